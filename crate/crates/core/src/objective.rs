//! The loss graph of one training step.
//!
//! The batch is encoded once with dropout to give the anchors. Depending on
//! the augmentation setting, positives are a second dropout view of the same
//! rows (UN), a dropout view of same-target partner sequences (SU), or both
//! view sets with their contrastive losses averaged (US_X).

use crate::dataset::{token, PADDING};
use crate::encoder::{DropoutMode, Encoder, ITEM_EMB};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{
    basic_graph, contrastive_terms, Augmentation, LossBreakdown, LossConfig, Objective, Partition,
};
use crate::params::Bound;
use crate::similarity::{cosine_graph, PairLayout, PositiveSource, SimilarityMatrix};
use crate::tensor::Tensor;
use crate::threshold::{
    fixed_thresholds, regularization_graph, statistical_thresholds, Strategy, ThresholdNet,
};

/// Inputs of one step. `partners[r]` is a padded row sharing row `r`'s
/// target, or `None` when no such sequence exists.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub rows: &'a [Vec<usize>],
    /// Dense item index of each row's target.
    pub targets: &'a [usize],
    pub partners: &'a [Option<Vec<usize>>],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdPlan {
    pub strategy: Strategy,
    pub k0: f64,
    pub q: f64,
    /// Statistical target in effect; `None` during warm-up.
    pub target: Option<f64>,
}

impl ThresholdPlan {
    /// True when thresholds come from the network `g` this step.
    pub fn uses_g(&self) -> bool {
        self.strategy == Strategy::Learnable && self.target.is_some()
    }
}

/// Dropout seeds for the anchor view, the second view and the partner view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSeeds {
    pub anchor: u64,
    pub second: u64,
    pub partner: u64,
}

#[derive(Clone, Debug)]
pub struct ViewSetInfo {
    pub kind: Augmentation,
    pub layout: PairLayout,
    pub sims: SimilarityMatrix,
    pub thresholds: Vec<f64>,
    pub partition: Partition,
    pub sources: Vec<PositiveSource>,
}

pub struct StepGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub view_sets: Vec<ViewSetInfo>,
    pub encoder_vars: Bound,
    pub g_vars: Bound,
}

impl StepGraph {
    pub fn thresholds(&self) -> impl Iterator<Item = f64> + '_ {
        self.view_sets.iter().flat_map(|v| v.thresholds.iter().copied())
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.view_sets.iter().map(|v| v.partition.clone()).collect()
    }
}

fn view_kinds(aug: Augmentation) -> &'static [Augmentation] {
    match aug {
        Augmentation::Un => &[Augmentation::Un],
        Augmentation::Su => &[Augmentation::Su],
        Augmentation::UsX => &[Augmentation::Su, Augmentation::Un],
    }
}

/// Builds the step's loss on `g`. With `frozen`, `M⁻`/`M⁺` membership is
/// taken from it instead of being recomputed; gradient audits use this to
/// hold the piecewise-constant selection fixed.
#[allow(clippy::too_many_arguments)]
pub fn build_step(
    g: &mut Graph,
    encoder: &Encoder,
    gnet: &ThresholdNet,
    batch: StepBatch<'_>,
    plan: &ThresholdPlan,
    cfg: &LossConfig,
    seeds: ViewSeeds,
    frozen: Option<&[Partition]>,
) -> Result<StepGraph> {
    let b = batch.rows.len();
    if batch.targets.len() != b || batch.partners.len() != b {
        return Err(Error::InvalidArgument("batch fields must have one entry per row".into()));
    }
    let layout = PairLayout::new(b)?;
    let ep = encoder.params.bind(g);
    let gp = gnet.params.bind(g);

    let anchors = encoder.forward(g, &ep, batch.rows, DropoutMode::Stochastic(seeds.anchor))?;

    let vocab = encoder.config.vocab_size;
    let items = g.slice_rows(ep.var(ITEM_EMB), PADDING + 1, vocab);
    let scores = g.matmul(anchors, false, items, true);
    let tokens: Vec<usize> = batch.targets.iter().map(|&t| token(t)).collect();
    let l_basic = basic_graph(g, scores, &tokens)?;

    let objective = if cfg.positive_sampling {
        Objective::PositiveSampling
    } else {
        Objective::Filtered
    };
    let kinds = view_kinds(cfg.augmentation);
    if let Some(f) = frozen {
        assert_eq!(f.len(), kinds.len(), "one frozen partition per view set");
    }
    let mut learn_parts = Vec::new();
    let mut reg_parts = Vec::new();
    let mut view_sets = Vec::new();
    let mut per_anchor = Vec::new();
    for (idx, &kind) in kinds.iter().enumerate() {
        let (positives, sources) = match kind {
            Augmentation::Un => (
                encoder.forward(g, &ep, batch.rows, DropoutMode::Stochastic(seeds.second))?,
                vec![PositiveSource::Augmented; b],
            ),
            _ => {
                let rows: Vec<Vec<usize>> = batch
                    .partners
                    .iter()
                    .zip(batch.rows)
                    .map(|(p, r)| p.clone().unwrap_or_else(|| r.clone()))
                    .collect();
                let sources = batch
                    .partners
                    .iter()
                    .map(|p| {
                        if p.is_some() {
                            PositiveSource::TargetShared
                        } else {
                            PositiveSource::Augmented
                        }
                    })
                    .collect();
                (
                    encoder.forward(g, &ep, &rows, DropoutMode::Stochastic(seeds.partner))?,
                    sources,
                )
            }
        };
        let views = g.concat_rows(&[anchors, positives]);
        let sim = cosine_graph(g, views)?;
        let sims = SimilarityMatrix {
            values: g.value(sim).clone(),
        };
        let (thresholds, k_var) = if plan.uses_g() {
            let k = gnet.forward(g, &gp, views);
            let values = g.value(k).data().to_vec();
            if !values.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteThreshold);
            }
            reg_parts.push(regularization_graph(g, k, plan.target.expect("checked")));
            (values, Some(k))
        } else {
            let values = match plan.strategy {
                Strategy::Fixed => fixed_thresholds(plan.k0, layout.len())?,
                _ => statistical_thresholds(&sims, &layout, plan.q),
            };
            (values, None)
        };
        let partition = match frozen {
            Some(f) => f[idx].clone(),
            None => Partition::new(&sims.values, &layout, &thresholds),
        };
        let terms = contrastive_terms(
            g,
            sim,
            &layout,
            &partition,
            k_var,
            objective,
            cfg.tau,
            cfg.st_gain,
        );
        per_anchor.extend_from_slice(g.value(terms).data());
        learn_parts.push(g.sum(terms));
        view_sets.push(ViewSetInfo {
            kind,
            layout,
            sims,
            thresholds,
            partition,
            sources,
        });
    }

    let mean = |g: &mut Graph, parts: &[Var]| -> Option<Var> {
        let first = *parts.first()?;
        let s = parts[1..].iter().fold(first, |acc, &p| g.add(acc, p));
        Some(g.scale(s, 1.0 / parts.len() as f64))
    };
    let l_learn = mean(g, &learn_parts).expect("at least one view set");
    let l_reg = mean(g, &reg_parts);

    let mut l_cl = l_learn;
    if let Some(r) = l_reg {
        let weighted = g.scale(r, cfg.lambda);
        l_cl = g.add(l_cl, weighted);
    }
    let weighted = g.scale(l_cl, cfg.lambda_cl);
    let total = g.add(l_basic, weighted);

    let merged = Partition {
        minus: view_sets.iter().flat_map(|v| v.partition.minus.clone()).collect(),
        plus: view_sets.iter().flat_map(|v| v.partition.plus.clone()).collect(),
    };
    let breakdown = LossBreakdown::compose(
        g.value(l_basic).item(),
        g.value(l_learn).item(),
        l_reg.map_or(0.0, |r| g.value(r).item()),
        cfg,
        per_anchor,
        &merged,
    );
    Ok(StepGraph {
        total,
        breakdown,
        view_sets,
        encoder_vars: ep,
        g_vars: gp,
    })
}

/// Gradients of `total` for every parameter of `bound`, zero where a
/// parameter did not contribute.
pub fn collect_grads(
    grads: &mut crate::graph::Gradients,
    bound: &Bound,
    shapes: &[Tensor],
) -> Vec<Tensor> {
    bound
        .vars()
        .iter()
        .zip(shapes)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect()
}
