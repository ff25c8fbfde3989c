//! Training objectives.
//!
//! Every contrastive loss is a sum over the 2B anchors of a per-anchor
//! term built from the anchor's similarity row. For anchor `i` with
//! positive `i⁺`, retained negatives `M⁻(i)` and re-labeled positives
//! `M⁺(i)`, write `Z_i = Σ_{j ∈ M⁻(i) ∪ {i⁺}} exp(sim(i, j)/τ)`:
//!
//! * InfoNCE: `log Z_i − sim(i, i⁺)/τ` with `M⁻(i) = N(i)`.
//! * Filtered: the same with thresholded `M⁻(i)`; zero when `M⁻(i)` is empty.
//! * Positive sampling: `−log(w⁺ e^{sim(i,i⁺)/τ}/Z_i) − Σ_{j ∈ M⁺(i)} log(w e^{sim(i,j)/τ}/Z_i)`
//!   with `w⁺ = ½`, `w = 1/(2|M⁺(i)|)`, or `w⁺ = 1` when `M⁺(i)` is empty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LseSelection, Var};
use crate::similarity::{split_row, PairLayout, SimilarityMatrix};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augmentation {
    #[serde(rename = "su")]
    Su,
    #[serde(rename = "un")]
    Un,
    #[serde(rename = "us_x")]
    UsX,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Self::Su, Self::Un, Self::UsX];

    pub fn name(self) -> &'static str {
        match self {
            Self::Su => "su",
            Self::Un => "un",
            Self::UsX => "us_x",
        }
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "su" => Ok(Self::Su),
            "un" => Ok(Self::Un),
            "us_x" | "usx" => Ok(Self::UsX),
            _ => Err(Error::InvalidArgument(format!(
                "unknown augmentation {s:?} (expected su, un or us_x)"
            ))),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the threshold regularizer inside the contrastive loss.
    pub lambda: f64,
    /// Weight of the contrastive loss in the total.
    pub lambda_cl: f64,
    pub tau: f64,
    pub positive_sampling: bool,
    pub augmentation: Augmentation,
    /// Straight-through gain routing the filtered loss back to learnable
    /// thresholds; see [`contrastive_terms`].
    pub st_gain: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_cl: 0.1,
            tau: 1.0,
            positive_sampling: true,
            augmentation: Augmentation::Un,
            st_gain: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda_cl >= 0.0 && self.st_gain >= 0.0) {
            return Err(Error::InvalidArgument(
                "lambda, lambda_cl and st_gain must be non-negative".into(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    InfoNce,
    Filtered,
    PositiveSampling,
}

/// `M⁻`/`M⁺` for every anchor. Membership is fixed once computed; gradients
/// never flow through it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub minus: Vec<Vec<usize>>,
    pub plus: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(sims: &Tensor, layout: &PairLayout, k: &[f64]) -> Self {
        assert_eq!(k.len(), layout.len(), "one threshold per view");
        let (minus, plus) = (0..layout.len())
            .map(|i| split_row(sims.row(i), layout, i, k[i]))
            .unzip();
        Self { minus, plus }
    }

    /// Every candidate retained.
    pub fn full(layout: &PairLayout) -> Self {
        Self {
            minus: (0..layout.len()).map(|i| layout.candidates(i).collect()).collect(),
            plus: vec![Vec::new(); layout.len()],
        }
    }

    pub fn mean_minus(&self) -> f64 {
        mean_len(&self.minus)
    }

    pub fn mean_plus(&self) -> f64 {
        mean_len(&self.plus)
    }
}

fn mean_len(sets: &[Vec<usize>]) -> f64 {
    sets.iter().map(Vec::len).sum::<usize>() as f64 / sets.len().max(1) as f64
}

/// `(w⁺, w)`: weight of the original positive and of each re-labeled one.
pub fn positive_weights(m: usize) -> (f64, f64) {
    if m == 0 {
        return (1.0, 0.0);
    }
    let (w_pos, w) = (0.5, 1.0 / (2.0 * m as f64));
    let total = w_pos + m as f64 * w;
    assert!((total - 1.0).abs() < 1e-12, "positive weights sum to {total}");
    (w_pos, w)
}

/// Per-anchor contrastive terms as a `2B × 1` column.
///
/// Set membership is a step function of the threshold. When `k` is given and
/// `gain > 0`, the backward pass gives `k[i]` the slope
/// `gain · Σ_{j ∈ N(i)} e^{sim(i,j)/τ} / Σ_{j ∈ N(i) ∪ {i⁺}} e^{sim(i,j)/τ}`
/// per unit of upstream gradient, whatever the objective's row weight; a
/// bounded stand-in for the effect of admitting more negatives. The forward
/// value is unaffected.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_terms(
    g: &mut Graph,
    sim: Var,
    layout: &PairLayout,
    part: &Partition,
    k: Option<Var>,
    objective: Objective,
    tau: f64,
    gain: f64,
) -> Var {
    let n = layout.len();
    assert_eq!(g.value(sim).shape(), (n, n));
    let inv_tau = 1.0 / tau;
    let full;
    let part = if objective == Objective::InfoNce {
        full = Partition::full(layout);
        &full
    } else {
        part
    };
    let include: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut cols = part.minus[i].clone();
            cols.push(layout.pos(i));
            cols.sort_unstable();
            cols
        })
        .collect();
    let mut coef = vec![1.0; n];
    let mut offset = vec![0.0; n];
    let mut picks = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![(layout.pos(i), inv_tau)];
        match objective {
            Objective::InfoNce => {}
            Objective::Filtered => {
                if part.minus[i].is_empty() {
                    coef[i] = 0.0;
                    row.clear();
                }
            }
            Objective::PositiveSampling => {
                let m = part.plus[i].len();
                let (w_pos, w) = positive_weights(m);
                coef[i] = (1 + m) as f64;
                offset[i] = -w_pos.ln();
                if m > 0 {
                    offset[i] -= m as f64 * w.ln();
                }
                row.extend(part.plus[i].iter().map(|&j| (j, inv_tau)));
            }
        }
        picks.push(row);
    }
    // The row coefficient multiplies the upstream gradient; dividing it out
    // keeps each anchor's threshold slope within `[0, gain]`.
    let gains = if k.is_some() && gain != 0.0 {
        coef.iter().map(|&c| if c > 0.0 { gain / c } else { 0.0 }).collect()
    } else {
        Vec::new()
    };
    let gated = (0..n).map(|i| layout.candidates(i).collect()).collect();
    let lse = g.masked_lse(sim, k, LseSelection { include, gated }, inv_tau, gains);
    let scaled = if coef.iter().all(|&c| c == 1.0) {
        lse
    } else {
        g.mul_const(lse, Tensor::column(coef))
    };
    let picked = g.gather_entries(sim, picks);
    let terms = g.sub(scaled, picked);
    if offset.iter().all(|&o| o == 0.0) {
        terms
    } else {
        let c = g.constant(Tensor::column(offset));
        g.add(terms, c)
    }
}

fn contrastive_value(
    m: &SimilarityMatrix,
    layout: &PairLayout,
    part: &Partition,
    objective: Objective,
    tau: f64,
) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(m.values.clone());
    let t = contrastive_terms(&mut g, s, layout, part, None, objective, tau, 0.0);
    g.value(t).sum()
}

pub fn info_nce(m: &SimilarityMatrix, layout: &PairLayout, tau: f64) -> f64 {
    contrastive_value(m, layout, &Partition::full(layout), Objective::InfoNce, tau)
}

pub fn learn_loss(m: &SimilarityMatrix, layout: &PairLayout, k: &[f64], tau: f64) -> f64 {
    let part = Partition::new(&m.values, layout, k);
    contrastive_value(m, layout, &part, Objective::Filtered, tau)
}

pub fn positive_sampling_loss(
    m: &SimilarityMatrix,
    layout: &PairLayout,
    k: &[f64],
    tau: f64,
) -> f64 {
    let part = Partition::new(&m.values, layout, k);
    contrastive_value(m, layout, &part, Objective::PositiveSampling, tau)
}

fn target_columns(targets: &[usize], items: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&t| {
            if t == crate::dataset::PADDING || t > items {
                Err(Error::InvalidArgument(format!(
                    "target token {t} is padding or outside the {items} items"
                )))
            } else {
                Ok(t - 1)
            }
        })
        .collect()
}

/// Mean softmax cross-entropy of item `scores` (one column per item,
/// padding excluded) against target tokens.
pub fn basic_graph(g: &mut Graph, scores: Var, targets: &[usize]) -> Result<Var> {
    let cols = target_columns(targets, g.value(scores).cols())?;
    Ok(g.softmax_xent(scores, &cols))
}

pub fn basic_loss(scores: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = basic_graph(&mut g, s, targets)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_basic: f64,
    pub l_learn: f64,
    pub l_reg: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub per_anchor: Vec<f64>,
    pub minus_counts: Vec<usize>,
    pub plus_counts: Vec<usize>,
}

impl LossBreakdown {
    pub fn compose(
        l_basic: f64,
        l_learn: f64,
        l_reg: f64,
        cfg: &LossConfig,
        per_anchor: Vec<f64>,
        part: &Partition,
    ) -> Self {
        let l_cl = l_learn + cfg.lambda * l_reg;
        Self {
            l_basic,
            l_learn,
            l_reg,
            l_cl,
            l_total: l_basic + cfg.lambda_cl * l_cl,
            per_anchor,
            minus_counts: part.minus.iter().map(Vec::len).collect(),
            plus_counts: part.plus.iter().map(Vec::len).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_basic, self.l_learn, self.l_reg, self.l_cl, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One line of the per-step loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_basic: f64,
    pub l_learn: f64,
    pub l_reg: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub mean_k: f64,
    #[serde(rename = "mean_Mminus")]
    pub mean_m_minus: f64,
    #[serde(rename = "mean_Mplus")]
    pub mean_m_plus: f64,
}

impl StepRecord {
    pub fn new(step: u64, b: &LossBreakdown, mean_k: f64) -> Self {
        let mean = |c: &[usize]| c.iter().sum::<usize>() as f64 / c.len().max(1) as f64;
        Self {
            step,
            l_basic: b.l_basic,
            l_learn: b.l_learn,
            l_reg: b.l_reg,
            l_cl: b.l_cl,
            l_total: b.l_total,
            mean_k,
            mean_m_minus: mean(&b.minus_counts),
            mean_m_plus: mean(&b.plus_counts),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::cosine_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the per-anchor formulas, independent of the
    /// graph machinery.
    fn oracle(m: &SimilarityMatrix, l: &PairLayout, k: &[f64], tau: f64, sampling: bool) -> f64 {
        let mut total = 0.0;
        for i in 0..l.len() {
            let s = |j: usize| m.get(i, j) / tau;
            let p = l.pos(i);
            let minus: Vec<usize> = l.candidates(i).filter(|&j| m.get(i, j) <= k[i]).collect();
            let plus: Vec<usize> = l.candidates(i).filter(|&j| m.get(i, j) > k[i]).collect();
            let z: f64 = s(p).exp() + minus.iter().map(|&j| s(j).exp()).sum::<f64>();
            if sampling && !plus.is_empty() {
                let w = 1.0 / (2.0 * plus.len() as f64);
                total -= (0.5 * s(p).exp() / z).ln();
                for &j in &plus {
                    total -= (w * s(j).exp() / z).ln();
                }
            } else if !minus.is_empty() {
                total -= (s(p).exp() / z).ln();
            }
        }
        total
    }

    fn random_sims(rng: &mut ChaCha8Rng, b: usize, d: usize) -> (SimilarityMatrix, PairLayout) {
        let x = Tensor::from_vec(2 * b, d, (0..2 * b * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (cosine_matrix(&x).unwrap(), PairLayout::new(b).unwrap())
    }

    fn matrix(rows: Vec<Vec<f64>>) -> SimilarityMatrix {
        SimilarityMatrix { values: Tensor::from_rows(&rows) }
    }

    #[test]
    fn basic_loss_examples() {
        let uniform = Tensor::from_rows(&[vec![0.3, 0.3]]);
        assert!((basic_loss(&uniform, &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let gap = Tensor::from_rows(&[vec![20.0, 0.0]]);
        assert!(basic_loss(&gap, &[1]).unwrap() < 1e-8);
        assert!(basic_loss(&gap, &[0]).is_err());
        assert!(basic_loss(&gap, &[3]).is_err());
    }

    #[test]
    fn basic_loss_gradient_on_five_items() {
        let base = vec![0.2, -1.0, 0.7, 0.0, 1.3, -0.4, 0.5, 0.1, -0.2, 0.9];
        let targets = [3, 5];
        let mut g = Graph::new();
        let s = g.param(Tensor::from_vec(2, 5, base.clone()));
        let l = basic_graph(&mut g, s, &targets).unwrap();
        let grads = g.backward(l);
        let h = 1e-5;
        for e in 0..10 {
            let mut p = base.clone();
            p[e] += h;
            let mut m = base.clone();
            m[e] -= h;
            let fd = (basic_loss(&Tensor::from_vec(2, 5, p), &targets).unwrap()
                - basic_loss(&Tensor::from_vec(2, 5, m), &targets).unwrap())
                / (2.0 * h);
            let a = grads.get(s).unwrap().data()[e];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) <= 1e-4, "{e}: {a} vs {fd}");
        }
    }

    #[test]
    fn info_nce_examples() {
        // B = 2: anchor 0 has positive 2 and candidates {1, 3}.
        let l = PairLayout::new(2).unwrap();
        let mut rows = vec![vec![0.0; 4]; 4];
        for i in 0..4 {
            rows[i][i] = 1.0;
            rows[i][l.pos(i)] = 1.0;
        }
        let term = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((term - 0.5514).abs() < 1e-4);
        assert!((info_nce(&matrix(rows), &l, 1.0) - 4.0 * term).abs() < 1e-12);

        let l3 = PairLayout::new(3).unwrap();
        let flat = matrix(vec![vec![0.4; 6]; 6]);
        assert!((info_nce(&flat, &l3, 1.0) - 6.0 * 5f64.ln()).abs() < 1e-12);

        // Positive strictly most similar, small temperature.
        let mut rows = vec![vec![0.1; 4]; 4];
        for i in 0..4 {
            rows[i][l.pos(i)] = 0.9;
        }
        assert!(info_nce(&matrix(rows), &l, 0.05) < 1e-3);
    }

    #[test]
    fn learn_loss_examples() {
        // Anchor 0: positive 2 at 0.5, candidates 1 at 0.9 and 3 at −0.2.
        let l = PairLayout::new(2).unwrap();
        let mut rows = vec![vec![0.0; 4]; 4];
        rows[0] = vec![1.0, 0.9, 0.5, -0.2];
        let m = matrix(rows);
        let k = [0.0, -1.0, -1.0, -1.0];
        let expect = -(0.5f64.exp() / (0.5f64.exp() + (-0.2f64).exp())).ln();
        assert!((expect - 0.4032).abs() < 1e-4);
        assert!((learn_loss(&m, &l, &k, 1.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn collapse_endpoint_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (m, l) = random_sims(&mut rng, 4, 8);
            let k = vec![-1.0; 8];
            assert_eq!(learn_loss(&m, &l, &k, 1.0), 0.0);
        }
    }

    #[test]
    fn positive_sampling_single_extra_positive_differs_by_log_weights() {
        // Anchor 0: positive 2 and candidate 1 share similarity 0.6; 3 is low.
        let l = PairLayout::new(2).unwrap();
        let mut rows = vec![vec![0.0; 4]; 4];
        rows[0] = vec![1.0, 0.6, 0.6, -0.3];
        let m = matrix(rows);
        let k = [0.0, 1.0, 1.0, 1.0];
        let others = learn_loss(&m, &l, &[1.0, 1.0, 1.0, 1.0], 1.0)
            - {
                let z: f64 = 0.6f64.exp() + 0.6f64.exp() + (-0.3f64).exp();
                -(0.6f64.exp() / z).ln()
            };
        // With M⁺ = {1}: Z = e^{0.6} + e^{−0.3}; each of the two terms is
        // −log(e^{0.6}/Z) + ln 2.
        let z = 0.6f64.exp() + (-0.3f64).exp();
        let plain = -(0.6f64.exp() / z).ln();
        let got = positive_sampling_loss(&m, &l, &k, 1.0) - others;
        assert!((got - 2.0 * (plain + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        for m in 0..50 {
            let (a, w) = positive_weights(m);
            assert!((a + m as f64 * w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_identity_and_switches() {
        let part = Partition::full(&PairLayout::new(2).unwrap());
        let mut cfg = LossConfig { lambda_cl: 0.0, ..LossConfig::default() };
        let b = LossBreakdown::compose(1.5, 2.0, 3.0, &cfg, vec![], &part);
        assert_eq!(b.l_total, 1.5);
        cfg.lambda_cl = 0.3;
        cfg.lambda = 0.2;
        let b = LossBreakdown::compose(1.5, 2.0, 3.0, &cfg, vec![], &part);
        assert!((b.l_total - (1.5 + 0.3 * (2.0 + 0.2 * 3.0))).abs() < 1e-12);
        assert_eq!(b.minus_counts, vec![2; 4]);
    }

    #[test]
    fn step_record_uses_log_field_names() {
        let part = Partition::full(&PairLayout::new(2).unwrap());
        let b = LossBreakdown::compose(1.0, 0.0, 0.0, &LossConfig::default(), vec![], &part);
        let json = serde_json::to_string(&StepRecord::new(3, &b, 0.25)).unwrap();
        for key in ["step", "l_basic", "l_learn", "l_reg", "l_cl", "l_total", "mean_k", "mean_Mminus", "mean_Mplus"] {
            assert!(json.contains(&format!("\"{key}\"")), "{json}");
        }
    }

    #[test]
    fn surrogate_pushes_thresholds_up_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, l) = random_sims(&mut rng, 3, 4);
        let kv = vec![0.0; 6];
        let part = Partition::new(&m.values, &l, &kv);
        assert!(part.plus.iter().any(|p| p.len() > 1));
        for objective in [Objective::Filtered, Objective::PositiveSampling] {
            let mut g = Graph::new();
            let s = g.constant(m.values.clone());
            let k = g.param(Tensor::column(kv.clone()));
            let t = contrastive_terms(&mut g, s, &l, &part, Some(k), objective, 1.0, 0.5);
            let total = g.sum(t);
            let grads = g.backward(total);
            // Raising a threshold can only enlarge the denominator, so the
            // surrogate slope is positive for every anchor, and at most `gain`
            // even where positive sampling weights the row by 1 + |M⁺|.
            assert!(grads.get(k).unwrap().data().iter().all(|&v| v > 0.0 && v < 0.5), "{objective:?}");
        }
    }

    #[test]
    fn terms_are_finite_for_small_temperatures() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, l) = random_sims(&mut rng, 4, 3);
        for tau in [0.01, 0.1, 1.0] {
            let k = vec![0.2; 8];
            assert!(info_nce(&m, &l, tau).is_finite());
            assert!(learn_loss(&m, &l, &k, tau).is_finite());
            assert!(positive_sampling_loss(&m, &l, &k, tau).is_finite());
        }
    }

    proptest! {
        #[test]
        fn losses_match_the_direct_oracle(
            seed in 0u64..10_000,
            b in 2usize..6,
            k in prop::collection::vec(-1.0f64..1.0, 10),
            tau in 0.1f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, l) = random_sims(&mut rng, b, 5);
            let k = &k[..2 * b];
            let ones = vec![1.0; 2 * b];
            prop_assert!((learn_loss(&m, &l, &ones, tau) - info_nce(&m, &l, tau)).abs() < 1e-6);
            prop_assert!((learn_loss(&m, &l, k, tau) - oracle(&m, &l, k, tau, false)).abs() < 1e-9);
            prop_assert!((positive_sampling_loss(&m, &l, k, tau) - oracle(&m, &l, k, tau, true)).abs() < 1e-9);
        }

        #[test]
        fn raising_a_threshold_never_lowers_its_term(
            seed in 0u64..10_000,
            k1 in -1.0f64..1.0,
            k2 in -1.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, l) = random_sims(&mut rng, 3, 4);
            let lo = vec![k1.min(k2); 6];
            let hi = vec![k1.max(k2); 6];
            let term = |k: &[f64]| {
                let part = Partition::new(&m.values, &l, k);
                let mut g = Graph::new();
                let s = g.constant(m.values.clone());
                let t = contrastive_terms(&mut g, s, &l, &part, None, Objective::Filtered, 1.0, 0.0);
                g.value(t).data().to_vec()
            };
            for (a, b) in term(&lo).iter().zip(term(&hi)) {
                prop_assert!(*a <= b + 1e-12);
            }
        }
    }
}
