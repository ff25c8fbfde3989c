//! Numeric audit of the analytic gradients.
//!
//! Every loss is rebuilt at `θ ± h·e_c` for each parameter coordinate `c`
//! and compared against the tape's gradient. Set membership (`M⁻`/`M⁺`) is
//! frozen at the unperturbed point and the threshold surrogate is disabled,
//! so the audited function is smooth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{input_row, token, PADDING};
use crate::encoder::{DropoutMode, Encoder, EncoderConfig, ITEM_EMB};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{basic_graph, contrastive_terms, Augmentation, LossConfig, Objective, Partition};
use crate::objective::{build_step, StepBatch, ThresholdPlan, ViewSeeds};
use crate::params::Bound;
use crate::similarity::{cosine_graph, PairLayout, SimilarityMatrix};
use crate::threshold::{statistical_thresholds, Strategy, ThresholdNet};

pub const DEFAULT_H: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub dim: usize,
    pub batch: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub g_hidden: usize,
    pub dropout: f64,
    pub tau: f64,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            batch: 4,
            vocab_size: 20,
            max_len: 5,
            layers: 1,
            heads: 2,
            g_hidden: 4,
            dropout: 0.1,
            tau: 0.5,
            h: DEFAULT_H,
            tolerance: DEFAULT_TOLERANCE,
            seed: 11,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim > 8 || self.batch > 4 || self.vocab_size > 20 {
            return Err(Error::InvalidArgument(format!(
                "gradcheck needs dim ≤ 8, batch ≤ 4 and vocab ≤ 20, got {}, {}, {}",
                self.dim, self.batch, self.vocab_size
            )));
        }
        if self.batch < 2 || self.vocab_size < 3 || !(self.h > 0.0) || !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("gradcheck needs batch ≥ 2, vocab ≥ 3, h > 0, tau > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub h: f64,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn case(&self, name: &str) -> Option<&CaseReport> {
        self.cases.iter().find(|c| c.name == name)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A scalar loss on a graph with the bindings of both parameter sets.
pub struct Audited {
    pub loss: Var,
    pub encoder: Bound,
    pub g: Bound,
    /// Part of the loss that reaches the encoder only through a
    /// stop-gradient. It is excluded when differencing encoder coordinates.
    pub detached: f64,
}

type LossFn<'a> = dyn Fn(&mut Graph, &Encoder, &ThresholdNet) -> Result<Audited> + 'a;

/// Compares analytic and central-difference gradients of `loss` for every
/// coordinate of both parameter sets.
pub fn audit(name: &str, encoder: &Encoder, gnet: &ThresholdNet, h: f64, tol: f64, loss: &LossFn<'_>) -> Result<CaseReport> {
    let mut g = Graph::new();
    let base = loss(&mut g, encoder, gnet)?;
    let mut grads = g.backward(base.loss);
    let analytic: Vec<Vec<f64>> = base
        .encoder
        .vars()
        .iter()
        .chain(base.g.vars())
        .zip(encoder.params.tensors().iter().chain(gnet.params.tensors()))
        .map(|(&v, t)| grads.take(v).map_or_else(|| vec![0.0; t.len()], |x| x.into_data()))
        .collect();

    let eval = |e: &Encoder, n: &ThresholdNet, on_encoder: bool| -> Result<f64> {
        let mut g = Graph::new();
        let a = loss(&mut g, e, n)?;
        let v = g.value(a.loss).item();
        Ok(if on_encoder { v - a.detached } else { v })
    };
    let n_enc = encoder.params.len();
    let mut enc = encoder.clone();
    let mut net = gnet.clone();
    let mut report = CaseReport {
        name: name.to_string(),
        coordinates: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (String::new(), 0),
        passed: true,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let tensor_name = if t < n_enc {
            encoder.params.names()[t].clone()
        } else {
            gnet.params.names()[t - n_enc].clone()
        };
        for (c, &a) in grad.iter().enumerate() {
            let mut at = |x: f64| -> Result<f64> {
                let p = if t < n_enc { &mut enc.params.tensors_mut()[t] } else { &mut net.params.tensors_mut()[t - n_enc] };
                p.data_mut()[c] = x;
                eval(&enc, &net, t < n_enc)
            };
            let orig = if t < n_enc { encoder.params.tensors()[t].data()[c] } else { gnet.params.tensors()[t - n_enc].data()[c] };
            let plus = at(orig + h)?;
            let minus = at(orig - h)?;
            at(orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = rel_error(a, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (tensor_name.clone(), c);
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

struct Fixture {
    encoder: Encoder,
    gnet: ThresholdNet,
    rows: Vec<Vec<usize>>,
    targets: Vec<usize>,
    partners: Vec<Option<Vec<usize>>>,
    seeds: ViewSeeds,
}

fn fixture(cfg: &GradcheckConfig) -> Result<Fixture> {
    let enc_cfg = EncoderConfig {
        dim: cfg.dim,
        layers: cfg.layers,
        heads: cfg.heads,
        dropout: cfg.dropout,
        max_len: cfg.max_len,
        vocab_size: cfg.vocab_size,
    };
    let encoder = Encoder::init(enc_cfg, cfg.seed)?;
    let mut gnet = ThresholdNet::init(cfg.dim, cfg.g_hidden, cfg.seed ^ 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 2);
    // A non-zero output layer lets the hidden weights of g receive gradient.
    for t in gnet.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let items = cfg.vocab_size - 1;
    let random_row = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(1..=cfg.max_len);
        let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..items)).collect();
        input_row(&seq, cfg.max_len)
    };
    let rows = (0..cfg.batch).map(|_| random_row(&mut rng)).collect();
    let targets = (0..cfg.batch).map(|_| rng.gen_range(0..items)).collect();
    let partners = (0..cfg.batch)
        .map(|r| (r % 2 == 0).then(|| random_row(&mut rng)))
        .collect();
    Ok(Fixture {
        encoder,
        gnet,
        rows,
        targets,
        partners,
        seeds: ViewSeeds {
            anchor: cfg.seed ^ 3,
            second: cfg.seed ^ 4,
            partner: cfg.seed ^ 5,
        },
    })
}

/// Unsupervised two-view similarity graph shared by the per-objective cases.
fn two_views(g: &mut Graph, e: &Encoder, p: &Bound, f: &Fixture) -> Result<Var> {
    let a = e.forward(g, p, &f.rows, DropoutMode::Stochastic(f.seeds.anchor))?;
    let b = e.forward(g, p, &f.rows, DropoutMode::Stochastic(f.seeds.second))?;
    let views = g.concat_rows(&[a, b]);
    cosine_graph(g, views)
}

fn contrastive_case<'a>(
    f: &'a Fixture,
    layout: &PairLayout,
    part: &Partition,
    objective: Objective,
    tau: f64,
) -> impl Fn(&mut Graph, &Encoder, &ThresholdNet) -> Result<Audited> + 'a {
    let part = part.clone();
    let layout = *layout;
    move |g, e, n| {
        let ep = e.params.bind(g);
        let gp = n.params.bind(g);
        let sim = two_views(g, e, &ep, f)?;
        let terms = contrastive_terms(g, sim, &layout, &part, None, objective, tau, 0.0);
        Ok(Audited { loss: g.sum(terms), encoder: ep, g: gp, detached: 0.0 })
    }
}

/// Runs every audited case on a tiny random model.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let f = fixture(cfg)?;
    let (h, tol) = (cfg.h, cfg.tolerance);
    let layout = PairLayout::new(cfg.batch)?;
    let mut cases = Vec::new();

    let basic = |g: &mut Graph, e: &Encoder, n: &ThresholdNet| {
        let ep = e.params.bind(g);
        let gp = n.params.bind(g);
        let anchors = e.forward(g, &ep, &f.rows, DropoutMode::Stochastic(f.seeds.anchor))?;
        let items = g.slice_rows(ep.var(ITEM_EMB), PADDING + 1, e.config.vocab_size);
        let scores = g.matmul(anchors, false, items, true);
        let tokens: Vec<usize> = f.targets.iter().map(|&t| token(t)).collect();
        Ok(Audited { loss: basic_graph(g, scores, &tokens)?, encoder: ep, g: gp, detached: 0.0 })
    };
    cases.push(audit("basic", &f.encoder, &f.gnet, h, tol, &basic)?);

    // Median thresholds give every anchor both kept and re-labeled candidates.
    let base = {
        let mut g = Graph::new();
        let ep = f.encoder.params.bind_frozen(&mut g);
        let sim = two_views(&mut g, &f.encoder, &ep, &f)?;
        SimilarityMatrix { values: g.value(sim).clone() }
    };
    let k = statistical_thresholds(&base, &layout, 50.0);
    let split = Partition::new(&base.values, &layout, &k);
    let full = Partition::full(&layout);
    for (name, part, objective) in [
        ("infonce", &full, Objective::InfoNce),
        ("filtered", &split, Objective::Filtered),
        ("positive_sampling", &split, Objective::PositiveSampling),
    ] {
        let case = contrastive_case(&f, &layout, part, objective, cfg.tau);
        cases.push(audit(name, &f.encoder, &f.gnet, h, tol, &case)?);
    }

    for aug in Augmentation::ALL {
        let loss_cfg = LossConfig {
            lambda: 0.5,
            lambda_cl: 0.5,
            tau: cfg.tau,
            positive_sampling: true,
            augmentation: aug,
            st_gain: 0.0,
        };
        let plan = ThresholdPlan {
            strategy: Strategy::Learnable,
            k0: 1.0,
            q: 90.0,
            target: Some(0.1),
        };
        let batch = StepBatch {
            rows: &f.rows,
            targets: &f.targets,
            partners: &f.partners,
        };
        let frozen = {
            let mut g = Graph::new();
            build_step(&mut g, &f.encoder, &f.gnet, batch, &plan, &loss_cfg, f.seeds, None)?.partitions()
        };
        let total = |g: &mut Graph, e: &Encoder, n: &ThresholdNet| {
            let s = build_step(g, e, n, batch, &plan, &loss_cfg, f.seeds, Some(&frozen))?;
            // g sees detached views, so the regularizer is constant in the encoder.
            let detached = loss_cfg.lambda_cl * loss_cfg.lambda * s.breakdown.l_reg;
            Ok(Audited { loss: s.total, encoder: s.encoder_vars, g: s.g_vars, detached })
        };
        cases.push(audit(&format!("total_{}", aug.name()), &f.encoder, &f.gnet, h, tol, &total)?);
    }

    Ok(GradcheckReport {
        tolerance: tol,
        h,
        cases,
    })
}
