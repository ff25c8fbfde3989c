//! Per-anchor similarity thresholds.
//!
//! A threshold `k[i]` splits the candidate negatives of anchor `i` into the
//! retained set `M⁻(i)` (similarity ≤ k) and the re-labeled set `M⁺(i)`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::similarity::{PairLayout, SimilarityMatrix};
use crate::tensor::Tensor;

pub const DEFAULT_Q: f64 = 90.0;
pub const DEFAULT_HIDDEN: usize = 64;
pub const RESERVOIR_CAPACITY: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fixed,
    Statistical,
    Learnable,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "statistical" => Ok(Self::Statistical),
            "learnable" => Ok(Self::Learnable),
            _ => Err(Error::InvalidArgument(format!(
                "unknown threshold strategy {s:?} (expected fixed, statistical or learnable)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Statistical => "statistical",
            Self::Learnable => "learnable",
        })
    }
}

pub fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q <= 100.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("percentile must lie in (0, 100], got {q}")))
    }
}

/// Nearest-rank percentile of ascending `sorted`: the value at 1-based
/// index `ceil(q/100 · n)`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let n = sorted.len();
    let rank = (q * n as f64 / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    nearest_rank(&v, q)
}

pub fn fixed_thresholds(k0: f64, size: usize) -> Result<Vec<f64>> {
    if !(-1.0..=1.0).contains(&k0) {
        return Err(Error::InvalidArgument(format!("k0 must lie in [-1, 1], got {k0}")));
    }
    Ok(vec![k0; size])
}

/// Per anchor, the nearest-rank `q`-th percentile of its candidate
/// similarities.
pub fn statistical_thresholds(m: &SimilarityMatrix, layout: &PairLayout, q: f64) -> Vec<f64> {
    (0..layout.len())
        .map(|i| {
            let row: Vec<f64> = layout.candidates(i).map(|j| m.get(i, j)).collect();
            percentile(&row, q).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Two-layer perceptron `g` mapping `[f(view_i), mean_j f(view_j)]` to a
/// threshold in (−1, 1).
#[derive(Clone, Debug)]
pub struct ThresholdNet {
    pub params: ParamSet,
}

impl ThresholdNet {
    pub const W1: &'static str = "g.w1";
    pub const B1: &'static str = "g.b1";
    pub const W2: &'static str = "g.w2";
    pub const B2: &'static str = "g.b2";

    /// Hidden layer ~ U(±1/√(2D)); the output layer starts at zero so every
    /// threshold is initially 0.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((2 * dim) as f64).sqrt();
        let w1 = (0..2 * dim * hidden)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let mut params = ParamSet::new();
        params.push(Self::W1, Tensor::from_vec(2 * dim, hidden, w1));
        params.push(Self::B1, Tensor::zeros(1, hidden));
        params.push(Self::W2, Tensor::zeros(hidden, 1));
        params.push(Self::B2, Tensor::zeros(1, 1));
        Self { params }
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(Self::W1).expect("g.w1").rows()
    }

    pub fn hidden(&self) -> usize {
        self.params.get(Self::W1).expect("g.w1").cols()
    }

    /// Thresholds for the rows of `views` as a `2B × 1` column. The views
    /// enter as constants: no gradient reaches the encoder through `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, views: Var) -> Var {
        let x = g.detach(views);
        let n = g.value(x).rows();
        let mean = g.mean_rows(x);
        let mean = g.broadcast_rows(mean, n);
        let input = g.concat_cols(&[x, mean]);
        let h = g.linear(input, p.var(Self::W1), p.var(Self::B1));
        let h = g.tanh(h);
        let out = g.linear(h, p.var(Self::W2), p.var(Self::B2));
        g.tanh(out)
    }

    pub fn thresholds(&self, views: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let v = g.constant(views.clone());
        let k = self.forward(&mut g, &p, v);
        let out = g.value(k).data().to_vec();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFiniteThreshold)
        }
    }

    /// Shifts the output bias so that a network with a zero output layer
    /// emits `k`.
    pub fn set_output_bias(&mut self, k: f64) {
        let b = self.params.get_mut(Self::B2).expect("g.b2");
        b.data_mut()[0] = k.clamp(-0.999, 0.999).atanh();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTarget {
    pub value: f64,
    pub sample_count: usize,
}

/// Uniform reservoir sample of candidate-negative similarities.
#[derive(Clone, Debug)]
pub struct SimReservoir {
    capacity: usize,
    seen: u64,
    samples: Vec<f64>,
    rng: ChaCha8Rng,
}

impl SimReservoir {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            seen: 0,
            samples: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, v: f64) {
        self.seen += 1;
        if self.samples.len() < self.capacity {
            self.samples.push(v);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.samples[j as usize] = v;
            }
        }
    }

    pub fn extend(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.push(v);
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.seen = 0;
    }
}

/// New target from the finished epoch's samples; the buffer is reset. An
/// empty buffer keeps `previous`.
pub fn update_stat_target(
    acc: &mut SimReservoir,
    q: f64,
    previous: Option<StatTarget>,
) -> Option<StatTarget> {
    if acc.is_empty() {
        warn!("no candidate similarities were collected this epoch; keeping the previous target");
        return previous;
    }
    let value = percentile(acc.samples(), q);
    let target = StatTarget {
        value,
        sample_count: acc.len(),
    };
    acc.clear();
    assert!(value.abs() <= 1.0 + 1e-9, "similarity target out of range: {value}");
    Some(target)
}

/// `Σ_i (k[i] − k̄)²`, or 0 while no target exists (warm-up). The flag is
/// true during warm-up.
pub fn regularization_loss(k: &[f64], target: Option<&StatTarget>) -> (f64, bool) {
    match target {
        Some(t) => (k.iter().map(|v| (v - t.value).powi(2)).sum(), false),
        None => (0.0, true),
    }
}

/// Graph form of [`regularization_loss`] for a defined target.
pub fn regularization_graph(g: &mut Graph, k: Var, target: f64) -> Var {
    let d = g.add_scalar(k, -target);
    let sq = g.mul(d, d);
    g.sum(sq)
}
