//! Pairwise similarity over the 2B views of a batch.
//!
//! Views are stored as `[originals 0..B, positives B..2B]`, so the positive
//! partner of view `i` is `i ± B`. The candidate negatives `N(i)` of an anchor
//! are all other views except its partner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairLayout {
    b: usize,
}

impl PairLayout {
    pub fn new(b: usize) -> Result<Self> {
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "a contrastive batch needs at least 2 sequences, got {b}"
            )));
        }
        Ok(Self { b })
    }

    pub fn batch(&self) -> usize {
        self.b
    }

    /// Number of views, 2B.
    pub fn len(&self) -> usize {
        2 * self.b
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pos(&self, i: usize) -> usize {
        if i < self.b {
            i + self.b
        } else {
            i - self.b
        }
    }

    /// `N(i)` in ascending view order.
    pub fn candidates(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let p = self.pos(i);
        (0..self.len()).filter(move |&j| j != i && j != p)
    }
}

/// Where the positive view of an anchor came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositiveSource {
    /// A second dropout pass over the same sequence.
    Augmented,
    /// Another sequence with the same target item.
    TargetShared,
}

/// The 2B representations of one contrastive batch.
#[derive(Clone, Debug)]
pub struct BatchViews {
    pub vectors: Tensor,
    pub layout: PairLayout,
    /// Target item of each view (a positive shares its anchor's target).
    pub targets: Vec<usize>,
    pub sources: Vec<PositiveSource>,
}

impl BatchViews {
    /// Stacks `originals` over `positives`; `sources[r]` describes how the
    /// positive of row `r` was obtained.
    pub fn new(
        originals: &Tensor,
        positives: &Tensor,
        targets: &[usize],
        sources: &[PositiveSource],
    ) -> Result<Self> {
        let b = originals.rows();
        if positives.shape() != originals.shape() || targets.len() != b || sources.len() != b {
            return Err(Error::InvalidArgument(
                "original and positive views must have matching shapes".into(),
            ));
        }
        let layout = PairLayout::new(b)?;
        let mut data = originals.data().to_vec();
        data.extend_from_slice(positives.data());
        Ok(Self {
            vectors: Tensor::from_vec(2 * b, originals.cols(), data),
            layout,
            targets: targets.iter().chain(targets).copied().collect(),
            sources: sources.iter().chain(sources).copied().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }
}

fn check_norms(x: &Tensor) -> Result<()> {
    for r in 0..x.rows() {
        let n: f64 = x.row(r).iter().map(|v| v * v).sum();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm(r));
        }
    }
    Ok(())
}

pub fn cosine_matrix(x: &Tensor) -> Result<SimilarityMatrix> {
    check_norms(x)?;
    let mut n = x.clone();
    for r in 0..n.rows() {
        let norm = n.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        n.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(SimilarityMatrix {
        values: matmul(&n, false, &n, true),
    })
}

/// Differentiable cosine matrix of the rows of `x`.
pub fn cosine_graph(g: &mut Graph, x: Var) -> Result<Var> {
    check_norms(g.value(x))?;
    let n = g.row_normalize(x);
    Ok(g.matmul(n, false, n, true))
}

/// `N(i)` ordered by ascending similarity to `i`, ties by view index.
pub fn sorted_row(m: &SimilarityMatrix, layout: &PairLayout, i: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = layout.candidates(i).collect();
    idx.sort_by(|&a, &b| m.get(i, a).total_cmp(&m.get(i, b)).then(a.cmp(&b)));
    idx
}

/// `(M⁻(i), M⁺(i))`: candidates at or below `k` and strictly above it.
pub fn split_by_threshold(
    m: &SimilarityMatrix,
    layout: &PairLayout,
    i: usize,
    k: f64,
) -> (Vec<usize>, Vec<usize>) {
    split_row(m.values.row(i), layout, i, k)
}

pub(crate) fn split_row(
    row: &[f64],
    layout: &PairLayout,
    i: usize,
    k: f64,
) -> (Vec<usize>, Vec<usize>) {
    layout
        .candidates(i)
        .partition(|&j| row[j].clamp(-1.0, 1.0) <= k)
}

/// Similarities of every anchor to each of its candidate negatives, row by
/// row.
pub fn candidate_sims(m: &SimilarityMatrix, layout: &PairLayout) -> Vec<f64> {
    (0..layout.len())
        .flat_map(|i| layout.candidates(i).map(move |j| m.get(i, j)))
        .collect()
}
