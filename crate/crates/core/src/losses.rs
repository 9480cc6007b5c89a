//! Permutation-invariant diarization loss and the two auxiliary-loss
//! variants.
//!
//! All losses are normalized binary cross-entropies. The optimal speaker
//! permutation is found by exhaustive search and treated as a constant when
//! the loss is recorded on a tape, so no gradient flows through the argmin.

use crate::error::{Error, Result};
use crate::labels::{LabelMatrix, Permutation};
use crate::model::{AuxMode, ModelConfig, PosteriorSet};
use crate::tensor::{Real, Tape, Tensor, Var, PROB_EPS};

pub const MAX_EXHAUSTIVE_SPEAKERS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub diar: f64,
    pub aux: f64,
    pub phi_main: Permutation,
    pub phi_per_block: Option<Vec<Permutation>>,
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce_term(y: u8, p: f64) -> f64 {
    let q = clamp(p);
    if y == 1 {
        -q.ln()
    } else {
        -(1.0 - q).ln()
    }
}

/// `H(y, p) = sum_s -y log p - (1 - y) log(1 - p)` for one frame.
pub fn bce<R: Real>(y: &[u8], p: &[R]) -> Result<f64> {
    if y.len() != p.len() {
        return Err(Error::dim("bce", &[y.len()], &[p.len()]));
    }
    Ok(y.iter().zip(p).map(|(y, p)| bce_term(*y, p.as_f64())).sum())
}

fn check_shapes<R: Real>(y: &LabelMatrix, p: &Tensor<R>) -> Result<()> {
    if p.shape() != [y.frames(), y.speakers()] {
        return Err(Error::dim(
            "diarization_loss",
            &[y.frames(), y.speakers()],
            p.shape(),
        ));
    }
    if y.speakers() > MAX_EXHAUSTIVE_SPEAKERS {
        return Err(Error::SearchLimit {
            speakers: y.speakers(),
            max: MAX_EXHAUSTIVE_SPEAKERS,
        });
    }
    Ok(())
}

/// `cost[s][src] = sum_t H(y[t][src], p[t][s])`, the summed BCE of output
/// column `s` against label column `src`.
fn pair_costs<R: Real>(y: &LabelMatrix, p: &Tensor<R>) -> Vec<Vec<f64>> {
    let s_count = y.speakers();
    let mut cost = vec![vec![0.0; s_count]; s_count];
    for t in 0..y.frames() {
        let prow = p.row(t);
        for (s, c) in cost.iter_mut().enumerate() {
            let q = clamp(prow[s].as_f64());
            let (on, off) = (-q.ln(), -(1.0 - q).ln());
            for (src, cell) in c.iter_mut().enumerate() {
                *cell += if y.get(t, src) == 1 { on } else { off };
            }
        }
    }
    cost
}

/// Minimum summed BCE over all permutations; ties go to the
/// lexicographically smallest mapping.
fn best_permutation<R: Real>(y: &LabelMatrix, p: &Tensor<R>) -> (f64, Permutation) {
    let cost = pair_costs(y, p);
    let mut best: Option<(f64, Permutation)> = None;
    for phi in Permutation::all(y.speakers()) {
        let total: f64 = phi
            .as_slice()
            .iter()
            .enumerate()
            .map(|(s, &src)| cost[s][src])
            .sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, phi));
        }
    }
    best.expect("at least one permutation")
}

fn summed_bce<R: Real>(y: &LabelMatrix, p: &Tensor<R>, phi: &Permutation) -> f64 {
    let cost = pair_costs(y, p);
    phi.as_slice()
        .iter()
        .enumerate()
        .map(|(s, &src)| cost[s][src])
        .sum()
}

/// Permutation-invariant loss `(1 / TS) min_phi sum_t H(y_t^phi, p_t)` and
/// the minimizing permutation.
pub fn diarization_loss<R: Real>(y: &LabelMatrix, p: &Tensor<R>) -> Result<(f64, Permutation)> {
    check_shapes(y, p)?;
    let (sum, phi) = best_permutation(y, p);
    Ok((sum / (y.frames() * y.speakers()) as f64, phi))
}

/// Auxiliary loss on blocks `1..P-1` using the final block's permutation.
pub fn shared_aux_loss<R: Real>(
    y: &LabelMatrix,
    aux: &[&Tensor<R>],
    phi_final: &Permutation,
) -> Result<f64> {
    if aux.is_empty() {
        return Ok(0.0);
    }
    if phi_final.len() != y.speakers() {
        return Err(Error::dim("shared_aux_loss", &[y.speakers()], &[phi_final.len()]));
    }
    let mut total = 0.0;
    for p in aux {
        check_shapes(y, p)?;
        total += summed_bce(y, p, phi_final);
    }
    Ok(total / (y.frames() * y.speakers() * aux.len()) as f64)
}

/// Auxiliary loss on blocks `1..P-1` with a separately optimized permutation
/// per block.
pub fn indiv_aux_loss<R: Real>(
    y: &LabelMatrix,
    aux: &[&Tensor<R>],
) -> Result<(f64, Vec<Permutation>)> {
    if aux.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let mut total = 0.0;
    let mut phis = Vec::with_capacity(aux.len());
    for p in aux {
        check_shapes(y, p)?;
        let (sum, phi) = best_permutation(y, p);
        total += sum;
        phis.push(phi);
    }
    Ok((total / (y.frames() * y.speakers() * aux.len()) as f64, phis))
}

/// `L = L_d + lambda * L_aux` with the auxiliary variant chosen by `config`.
pub fn total_loss<R: Real>(
    y: &LabelMatrix,
    posteriors: &PosteriorSet<R>,
    config: &ModelConfig,
) -> Result<LossReport> {
    let (diar, phi_main) = diarization_loss(y, posteriors.last())?;
    let aux_posteriors = || {
        posteriors.auxiliary().ok_or_else(|| {
            Error::Contract(format!(
                "aux mode {} needs posteriors from every block",
                config.aux_mode
            ))
        })
    };
    let (aux, phi_per_block) = match config.aux_mode {
        AuxMode::None => (0.0, None),
        AuxMode::Shared => (shared_aux_loss(y, &aux_posteriors()?, &phi_main)?, None),
        AuxMode::Indiv => {
            let (aux, phis) = indiv_aux_loss(y, &aux_posteriors()?)?;
            (aux, Some(phis))
        }
    };
    Ok(LossReport {
        total: diar + config.lambda * aux,
        diar,
        aux,
        phi_main,
        phi_per_block,
    })
}

fn permuted_target<R: Real>(y: &LabelMatrix, phi: &Permutation) -> Result<Vec<R>> {
    Ok(y.permute_columns(phi)?.to_tensor::<R>().into_data())
}

/// Records the total loss on `tape`. Permutations are selected from the
/// current posterior values and held fixed.
pub fn total_loss_on_tape<R: Real>(
    tape: &mut Tape<R>,
    y: &LabelMatrix,
    posteriors: &[Option<Var>],
    config: &ModelConfig,
) -> Result<(Var, LossReport)> {
    let values = PosteriorSet {
        blocks: posteriors
            .iter()
            .map(|v| v.map(|v| tape.value(v).clone()))
            .collect(),
    };
    let report = total_loss(y, &values, config)?;
    let norm = (y.frames() * y.speakers()) as f64;

    let last = posteriors
        .last()
        .copied()
        .flatten()
        .ok_or_else(|| Error::Contract("final posterior missing".into()))?;
    let diar = tape.bce_sum(last, permuted_target(y, &report.phi_main)?)?;
    let diar = tape.scale(diar, R::of(1.0 / norm));
    if config.aux_mode == AuxMode::None || posteriors.len() < 2 {
        return Ok((diar, report));
    }

    let lower = &posteriors[..posteriors.len() - 1];
    let mut aux: Option<Var> = None;
    for (i, p) in lower.iter().enumerate() {
        let p = p.expect("checked by total_loss");
        let phi = match &report.phi_per_block {
            Some(phis) => &phis[i],
            None => &report.phi_main,
        };
        let term = tape.bce_sum(p, permuted_target(y, phi)?)?;
        aux = Some(match aux {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let aux = aux.expect("at least one lower block");
    let weight = config.lambda / (norm * lower.len() as f64);
    let aux = tape.scale(aux, R::of(weight));
    let total = tape.add(diar, aux)?;
    Ok((total, report))
}
