use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bijection on speaker columns. `mapping[s]` is the source column that
/// lands in output column `s`, so `y^phi[t][s] = y[t][mapping[s]]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || seen[m] {
                return Err(Error::Contract(format!("{mapping:?} is not a permutation")));
            }
            seen[m] = true;
        }
        Ok(Self(mapping))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// All permutations of `n` items in lexicographic order.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut cur = Self::identity(n).0;
        loop {
            out.push(Self(cur.clone()));
            // next lexicographic permutation
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                return out;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot exists");
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// `T x S` binary speaker activity matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    frames: usize,
    speakers: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(frames: usize, speakers: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * speakers {
            return Err(Error::dim("labels", &[frames, speakers], &[data.len()]));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::Contract("labels must be 0 or 1".into()));
        }
        Ok(Self {
            frames,
            speakers,
            data,
        })
    }

    pub fn zeros(frames: usize, speakers: usize) -> Self {
        Self {
            frames,
            speakers,
            data: vec![0; frames * speakers],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let speakers = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != speakers) {
            return Err(Error::Contract("label rows differ in length".into()));
        }
        Self::new(rows.len(), speakers, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, t: usize, s: usize) -> u8 {
        self.data[t * self.speakers + s]
    }

    pub fn set(&mut self, t: usize, s: usize, v: bool) {
        self.data[t * self.speakers + s] = v as u8;
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.speakers..(t + 1) * self.speakers]
    }

    pub fn active_count(&self, t: usize) -> usize {
        self.row(t).iter().map(|v| *v as usize).sum()
    }

    /// Frames `start..end`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            frames: end - start,
            speakers: self.speakers,
            data: self.data[start * self.speakers..end * self.speakers].to_vec(),
        }
    }

    /// `Y^phi`: column `s` of the result is column `phi[s]` of `self`.
    pub fn permute_columns(&self, phi: &Permutation) -> Result<Self> {
        if phi.len() != self.speakers {
            return Err(Error::dim("permute_columns", &[self.speakers], &[phi.len()]));
        }
        let mut out = Self::zeros(self.frames, self.speakers);
        for t in 0..self.frames {
            for (s, &src) in phi.as_slice().iter().enumerate() {
                out.data[t * self.speakers + s] = self.get(t, src);
            }
        }
        Ok(out)
    }

    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        Tensor::new(
            vec![self.frames, self.speakers],
            self.data.iter().map(|v| if *v == 1 { R::one() } else { R::zero() }).collect(),
        )
        .expect("shape matches by construction")
    }
}
