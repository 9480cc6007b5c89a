use super::*;

fn spec(seed: u64) -> DialogueSpec {
    DialogueSpec {
        seed,
        ..DialogueSpec::default()
    }
}

#[test]
fn same_seed_same_labels() {
    assert_eq!(gen_labels(&spec(3)).unwrap(), gen_labels(&spec(3)).unwrap());
    assert_ne!(gen_labels(&spec(3)).unwrap(), gen_labels(&spec(4)).unwrap());
}

#[test]
fn tuned_overlap_lands_in_band() {
    for seed in 0..100 {
        let y = gen_labels(&spec(seed)).unwrap();
        let rho = overlap_ratio(&y).unwrap();
        assert!((0.29..=0.39).contains(&rho), "seed {seed}: {rho}");
    }
}

#[test]
fn other_targets_are_reachable() {
    for target in [0.0, 0.1, 0.6, 0.9] {
        for seed in 0..10 {
            let s = DialogueSpec { target_overlap: target, ..spec(seed) };
            let rho = overlap_ratio(&gen_labels(&s).unwrap()).unwrap();
            assert!((rho - target).abs() <= OVERLAP_TOLERANCE, "{target}: {rho}");
        }
    }
}

#[test]
fn vanishing_pauses_give_full_overlap() {
    let y = gen_labels_with_pause(&spec(1), 1e-4).unwrap();
    assert!(overlap_ratio(&y).unwrap() > 0.95);
    let sparse = gen_labels_with_pause(&spec(1), 200.0).unwrap();
    assert!(overlap_ratio(&sparse).unwrap_or(0.0) < 0.2);
}

#[test]
fn unattainable_target_is_a_tuning_error() {
    let s = DialogueSpec { target_overlap: 0.95, ..spec(1) };
    assert!(matches!(gen_labels(&s), Err(Error::Tuning(_))));
    let s = DialogueSpec { target_overlap: 1.0, ..spec(1) };
    assert!(matches!(gen_labels(&s), Err(Error::Config(_))));
}

#[test]
fn invalid_specs_rejected() {
    for s in [
        DialogueSpec { total_frames: 49, ..spec(1) },
        DialogueSpec { mean_utt_frames: 0.0, ..spec(1) },
        DialogueSpec { num_speakers: 1, ..spec(1) },
        DialogueSpec { noise_std: -1.0, ..spec(1) },
    ] {
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn noiseless_features_are_signature_sums() {
    let s = DialogueSpec { noise_std: 0.0, ..spec(5) };
    let y = gen_labels(&s).unwrap();
    let x = labels_to_features(&y, &s).unwrap().data;
    let mu = speaker_signatures(&s, 2);
    let mut seen = [false; 4];
    for t in 0..y.frames() {
        let row = x.row(t);
        let (a, b) = (y.get(t, 0) == 1, y.get(t, 1) == 1);
        seen[a as usize * 2 + b as usize] = true;
        for j in 0..FEATURE_DIM {
            let expected = a as u8 as f64 * mu[0][j] + b as u8 as f64 * mu[1][j];
            assert_eq!(row[j], expected as f32);
        }
    }
    assert!(seen.iter().all(|s| *s), "every activity pattern occurs");
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

#[test]
fn classes_are_separable() {
    let s = spec(8);
    let d = gen_dialogue("d", &s).unwrap();
    let x = &d.features.data;
    let class = |t: usize| d.labels.row(t).to_vec();
    let frames: Vec<usize> = (0..100).collect();
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
    for &i in &frames {
        for &j in &frames {
            if i < j {
                let dist = sq_dist(x.row(i), x.row(j)).sqrt();
                if class(i) == class(j) {
                    within += dist;
                    nw += 1;
                } else {
                    between += dist;
                    nb += 1;
                }
            }
        }
    }
    assert!(nw > 0 && nb > 0);
    assert!(within / (nw as f64) < between / (nb as f64));
}

#[test]
fn noiseless_bayes_classifier_is_exact() {
    let s = DialogueSpec { noise_std: 0.0, ..spec(12) };
    let d = gen_dialogue("d", &s).unwrap();
    let mu = speaker_signatures(&s, 2);
    let patterns = [[0u8, 0], [1, 0], [0, 1], [1, 1]];
    for t in 0..d.frames() {
        let row = d.features.data.row(t);
        let best = patterns
            .iter()
            .min_by(|p, q| {
                let cost = |p: &[u8; 2]| -> f64 {
                    (0..FEATURE_DIM)
                        .map(|j| {
                            let c = p[0] as f64 * mu[0][j] + p[1] as f64 * mu[1][j];
                            (row[j] as f64 - c).powi(2)
                        })
                        .sum()
                };
                cost(p).total_cmp(&cost(q))
            })
            .unwrap();
        assert_eq!(d.labels.row(t), best);
    }
}

#[test]
fn measured_overlap_matches_metric() {
    for seed in 0..5 {
        let d = gen_dialogue("d", &spec(seed)).unwrap();
        assert_eq!(d.measured_overlap, overlap_ratio(&d.labels).unwrap());
        assert_eq!(d.seed, seed);
    }
}

#[test]
fn spec_text_round_trips() {
    let s = DialogueSpec { noise_std: 0.1 + 0.2, seed: u64::MAX, ..spec(0) };
    assert_eq!(DialogueSpec::from_text("s", &s.to_text()).unwrap(), s);
    assert!(DialogueSpec::from_text("s", "bogus = 1\n").is_err());
    assert!(DialogueSpec::from_text("s", "seed = 1\nseed = 2\n").is_err());
}

#[test]
fn corpus_writes_manifest_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let small = DialogueSpec { total_frames: 60, ..spec(40) };
    let manifest = gen_corpus(4, &small, &a).unwrap();
    let text = fs::read_to_string(a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(manifest.entries[2].seed, 42);
    assert_eq!(manifest.entries[2].id, "dlg00002");

    let b = dir.path().join("b");
    regenerate_corpus(&a, &b).unwrap();
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }

    let loaded = load_corpus(&a).unwrap();
    let direct = gen_dialogues(4, &small).unwrap();
    assert_eq!(loaded, direct);
}

#[test]
fn corpus_io_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let err = gen_corpus(1, &spec(1), &blocker.join("sub")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
    assert!(matches!(gen_corpus(0, &spec(1), dir.path()), Err(Error::Config(_))));
}

/// Solves `(K + alpha I) a = b` for symmetric positive definite `K` by
/// Cholesky factorization.
fn ridge_solve(k: &[Vec<f64>], alpha: f64, b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = k.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = k[i][j] + if i == j { alpha } else { 0.0 };
            for m in 0..j {
                s -= l[i][m] * l[j][m];
            }
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let cols = b[0].len();
    let mut x = b.to_vec();
    for c in 0..cols {
        for i in 0..n {
            let s: f64 = (0..i).map(|m| l[i][m] * x[m][c]).sum();
            x[i][c] = (x[i][c] - s) / l[i][i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|m| l[m][i] * x[m][c]).sum();
            x[i][c] = (x[i][c] - s) / l[i][i];
        }
    }
    x
}

#[test]
fn linear_probe_with_small_noise_is_accurate() {
    use crate::metrics::{score_posterior, EvalParams};
    use crate::tensor::Tensor;

    let s = DialogueSpec { total_frames: 600, noise_std: 0.1, ..spec(21) };
    let d = gen_dialogue("d", &s).unwrap();
    let x = &d.features.data;
    let dot = |a: usize, b: usize| -> f64 {
        x.row(a).iter().zip(x.row(b)).map(|(p, q)| *p as f64 * *q as f64).sum()
    };
    let (fit, test) = (0..300, 300..600);
    let k: Vec<Vec<f64>> = fit.clone().map(|a| fit.clone().map(|b| dot(a, b)).collect()).collect();
    let y: Vec<Vec<f64>> = fit.clone().map(|t| d.labels.row(t).iter().map(|v| *v as f64).collect()).collect();
    let coef = ridge_solve(&k, 1.0, &y);
    let mut post = Vec::new();
    for t in test.clone() {
        for c in 0..2 {
            let v: f64 = fit.clone().zip(&coef).map(|(a, w)| dot(t, a) * w[c]).sum();
            post.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let post = Tensor::new(vec![300, 2], post).unwrap();
    let labels = d.labels.slice_frames(test.start, test.end);
    let params = EvalParams { median_window: 1, ..EvalParams::default() };
    let der = score_posterior(&post, &labels, "d", &params).unwrap().report().unwrap().der;
    assert!(der < 0.05, "{der}");
}
