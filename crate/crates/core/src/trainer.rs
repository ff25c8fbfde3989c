//! Training loop, model selection and run artifacts.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{
    batch_samples, build_dataset_with, input_row, load_interactions, CandidateSetting, EvalTarget,
    SequenceDataset, SplitView, TrainSample,
};
use crate::diagnostics::{
    alignment, uniformity, EmbeddingSnapshot, EpochRecord, Histogram, SimCurve, TrajectoryLog,
};
use crate::encoder::{view_seed, Encoder, EncoderConfig, ITEM_EMB};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{Augmentation, StepRecord};
use crate::metrics::{evaluate, write_csv, EvalOptions, Metric, MetricReport, DEFAULT_CUTOFFS};
use crate::objective::{build_step, collect_grads, StepBatch, ThresholdPlan, ViewSeeds, ViewSetInfo};
use crate::optim::Adam;
use crate::seed::mix;
use crate::similarity::candidate_sims;
use crate::threshold::{update_stat_target, SimReservoir, StatTarget, Strategy, ThresholdNet, RESERVOIR_CAPACITY};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const VALID_LOG: &str = "valid_metrics.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const FAILURE_CKPT: &str = "failure.ckpt";
pub const MANIFEST: &str = "manifest.json";
/// Stem of the end-of-run test report (`.csv` and `.json`).
pub const TEST_REPORT: &str = "test_metrics";

/// Seeds of every random stream, derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub encoder_init: u64,
    pub g_init: u64,
    pub samples: u64,
    pub dropout: u64,
    pub partners: u64,
    pub reservoir: u64,
    pub snapshot: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn derive(run: u64) -> Self {
        Self {
            run,
            encoder_init: mix(run, 1),
            g_init: mix(run, 2),
            samples: mix(run, 3),
            dropout: mix(run, 4),
            partners: mix(run, 5),
            reservoir: mix(run, 6),
            snapshot: mix(run, 7),
            eval: mix(run, 8),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub g: ThresholdNet,
}

/// Configuration stored in a checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderConfig,
    pub g_hidden: usize,
    pub run: RunConfig,
}

pub const ENCODER_SECTION: &str = "encoder";
pub const G_SECTION: &str = "g";

impl Model {
    pub fn init(cfg: &RunConfig, num_items: usize, seeds: &Seeds) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::init(cfg.encoder(num_items), seeds.encoder_init)?,
            g: ThresholdNet::init(cfg.dim, cfg.g_hidden, seeds.g_init),
        })
    }

    pub fn to_checkpoint(&self, run: &RunConfig, vocab_hash: u64) -> Result<Checkpoint> {
        let meta = ModelMeta {
            encoder: self.encoder.config.clone(),
            g_hidden: self.g.hidden(),
            run: run.clone(),
        };
        Ok(Checkpoint {
            config_json: serde_json::to_string(&meta)?,
            vocab_hash,
            sections: vec![
                (ENCODER_SECTION.into(), self.encoder.params.clone()),
                (G_SECTION.into(), self.g.params.clone()),
            ],
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, ModelMeta)> {
        let meta: ModelMeta = serde_json::from_str(&c.config_json)?;
        let mut encoder = Encoder::init(meta.encoder.clone(), 0)?;
        let mut g = ThresholdNet::init(meta.encoder.dim, meta.g_hidden, 0);
        for (section, target) in [(ENCODER_SECTION, &mut encoder.params), (G_SECTION, &mut g.params)] {
            let stored = c
                .section(section)
                .ok_or_else(|| Error::Checkpoint(format!("missing section {section}")))?;
            if stored.names() != target.names() {
                return Err(Error::Checkpoint(format!("section {section} has unexpected tensors")));
            }
            for (dst, src) in target.tensors_mut().iter_mut().zip(stored.tensors()) {
                if dst.shape() != src.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor shape {:?} does not match the configuration ({:?})",
                        src.shape(),
                        dst.shape()
                    )));
                }
                *dst = src.clone();
            }
        }
        Ok((Self { encoder, g }, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta, u64)> {
        let c = Checkpoint::load(path)?;
        let (m, meta) = Self::from_checkpoint(&c)?;
        Ok((m, meta, c.vocab_hash))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    pub mean_l_total: f64,
    pub mean_k: f64,
    pub min_k: f64,
    pub max_k: f64,
    pub k_stat_target: Option<f64>,
    pub alignment: f64,
    pub uniformity: f64,
    pub negated_uniformity: f64,
    pub valid_ndcg10: Option<f64>,
    pub valid: Option<MetricReport>,
}

pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<StepRecord>,
    pub stat_target: Option<StatTarget>,
    pub trajectory: TrajectoryLog,
    pub seeds: Seeds,
    /// Test metrics of the best model for every candidate setting.
    pub test: Vec<MetricReport>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    seeds: Seeds,
    users: usize,
    items: usize,
    vocab_hash: String,
}

pub fn write_manifest(dir: &Path, cfg: &RunConfig, seeds: Seeds, dataset: &SequenceDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = Manifest {
        config: cfg,
        seeds,
        users: dataset.num_users(),
        items: dataset.num_items(),
        vocab_hash: format!("{:016x}", dataset.vocab_hash()),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&m)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// All `(user, cut)` pairs of the training prefixes grouped by target item.
struct PartnerIndex {
    by_target: HashMap<usize, Vec<(usize, usize)>>,
}

impl PartnerIndex {
    fn new(split: &SplitView) -> Self {
        let mut by_target: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
        for u in split.training_users() {
            let prefix = &split.users[u].train_prefix;
            for cut in 1..prefix.len() {
                by_target.entry(prefix[cut]).or_default().push((u, cut));
            }
        }
        Self { by_target }
    }

    /// A different training sequence whose next item is `target`.
    fn partner(&self, split: &SplitView, s: &TrainSample, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        let (u, cut) = self.pick(s, rng)?;
        Some(input_row(&split.users[u].train_prefix[..cut], split.max_len))
    }

    fn pick(&self, s: &TrainSample, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
        let own = (s.user, s.input.len());
        let pool = self.by_target.get(&s.target)?;
        let others = pool.len() - usize::from(pool.contains(&own));
        if others == 0 {
            return None;
        }
        let mut pick = rng.gen_range(0..others);
        for &(u, cut) in pool {
            if (u, cut) == own {
                continue;
            }
            if pick == 0 {
                return Some((u, cut));
            }
            pick -= 1;
        }
        unreachable!("partner index out of range")
    }
}

#[derive(Clone, Copy, Default)]
struct KStats {
    sum: f64,
    count: u64,
    min: f64,
    max: f64,
}

impl KStats {
    fn add(&mut self, k: f64) {
        if self.count == 0 {
            self.min = k;
            self.max = k;
        }
        self.sum += k;
        self.count += 1;
        self.min = self.min.min(k);
        self.max = self.max.max(k);
    }

    fn merge(&mut self, o: &KStats) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *o;
            return;
        }
        self.sum += o.sum;
        self.count += o.count;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }

    fn mean(&self) -> f64 {
        self.sum / self.count.max(1) as f64
    }
}

/// Feeds one step's similarities and thresholds to the epoch accumulators.
fn observe(
    views: &[ViewSetInfo],
    reservoir: &mut SimReservoir,
    hist: &mut Histogram,
    curve: &mut SimCurve,
) -> KStats {
    let mut ks = KStats::default();
    for v in views {
        let sims = candidate_sims(&v.sims, &v.layout);
        for &x in &sims {
            hist.add(x);
        }
        reservoir.extend(sims);
        curve.add_batch(&v.sims, &v.layout);
        for &k in &v.thresholds {
            ks.add(k);
        }
    }
    ks
}

type StepInputs = (Vec<Vec<usize>>, Vec<usize>, Vec<Option<Vec<usize>>>);

/// Padded rows, targets and (optionally) same-target partner rows.
fn step_inputs(samples: &[TrainSample], split: &SplitView, partners: Option<&PartnerIndex>, seed: u64) -> StepInputs {
    let rows = samples.iter().map(|s| input_row(&s.input, split.max_len)).collect();
    let targets = samples.iter().map(|s| s.target).collect();
    let partner_rows = match partners {
        Some(idx) => samples
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, r as u64));
                idx.partner(split, s, &mut rng)
            })
            .collect(),
        None => vec![None; samples.len()],
    };
    (rows, targets, partner_rows)
}

fn snapshot_rows(split: &SplitView, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut users: Vec<usize> = (0..split.users.len()).collect();
    if users.len() > size {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        users = users.choose_multiple(&mut rng, size).copied().collect();
        users.sort_unstable();
    }
    users
        .iter()
        .map(|&u| input_row(&split.users[u].train_prefix, split.max_len))
        .collect()
}

fn zero_padding_grad(grads: &mut [crate::tensor::Tensor], encoder: &Encoder) {
    let i = encoder.params.position(ITEM_EMB).expect("item table");
    grads[i].row_mut(crate::dataset::PADDING).fill(0.0);
}

struct Writer {
    out: Option<BufWriter<File>>,
    path: PathBuf,
}

impl Writer {
    fn create(dir: Option<&Path>, name: &str) -> Result<Self> {
        let path = dir.map(|d| d.join(name)).unwrap_or_default();
        let out = match dir {
            Some(_) => Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?)),
            None => None,
        };
        Ok(Self { out, path })
    }

    fn line<T: Serialize>(&mut self, v: &T) -> Result<()> {
        if let Some(w) = &mut self.out {
            let s = serde_json::to_string(v)?;
            writeln!(w, "{s}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Trains on the leave-one-out split of `dataset`. With `out`, the manifest,
/// loss log, validation log, diagnostics and checkpoints are written there.
pub fn train(cfg: &RunConfig, dataset: &SequenceDataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = crate::dataset::split(dataset);
    if split.training_users().next().is_none() {
        return Err(Error::EmptyDataset(0));
    }
    let seeds = Seeds::derive(cfg.seed);
    if let Some(dir) = out {
        write_manifest(dir, cfg, seeds, dataset)?;
    }
    let vocab_hash = dataset.vocab_hash();
    let mut model = Model::init(cfg, dataset.num_items(), &seeds)?;
    let mut opt_enc = Adam::new(cfg.adam(), &model.encoder.params);
    let mut opt_g = Adam::new(cfg.g_adam(), &model.g.params);
    let loss_cfg = cfg.loss();
    let partners = PartnerIndex::new(&split);
    let needs_partners = loss_cfg.augmentation != Augmentation::Un;
    let snapshot = snapshot_rows(&split, cfg.snapshot_size, seeds.snapshot);
    let eval_opts = EvalOptions {
        target: EvalTarget::Valid,
        cutoffs: DEFAULT_CUTOFFS.to_vec(),
        num_candidates: cfg.eval_candidates,
        exclude_seen: cfg.exclude_seen,
        seed: seeds.eval,
    };

    let mut loss_log = Writer::create(out, LOSS_LOG)?;
    let mut valid_log = Writer::create(out, VALID_LOG)?;
    let mut trajectory = match out {
        Some(d) => TrajectoryLog::to_dir(d),
        None => TrajectoryLog::in_memory(),
    };
    let mut reservoir = SimReservoir::new(RESERVOIR_CAPACITY, seeds.reservoir);
    let mut stat_target: Option<StatTarget> = None;
    let mut step: u64 = 0;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut since_best = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let plan = ThresholdPlan {
            strategy: cfg.strategy,
            k0: cfg.k0,
            q: cfg.q,
            target: stat_target.map(|t| t.value),
        };
        let mut hist = Histogram::new(cfg.hist_bins)?;
        let mut curve = SimCurve::default();
        let mut kstats = KStats::default();
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0u64;
        let mut unpartnered = 0usize;
        let mut rows_seen = 0usize;
        let batches = batch_samples(&split, cfg.batch_size, mix(seeds.samples, epoch as u64))?;
        for samples in &batches {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break;
            }
            let (rows, targets, partner_rows) =
                step_inputs(samples, &split, needs_partners.then_some(&partners), mix(seeds.partners, step));
            unpartnered += partner_rows.iter().filter(|p| p.is_none()).count();
            rows_seen += samples.len();
            let view_seeds = ViewSeeds {
                anchor: view_seed(seeds.dropout, step, 0),
                second: view_seed(seeds.dropout, step, 1),
                partner: view_seed(seeds.dropout, step, 2),
            };
            let batch = StepBatch {
                rows: &rows,
                targets: &targets,
                partners: &partner_rows,
            };
            let mut g = Graph::new();
            let s = build_step(&mut g, &model.encoder, &model.g, batch, &plan, &loss_cfg, view_seeds, None)?;
            if !s.breakdown.is_finite() || !g.value(s.total).item().is_finite() {
                if let Some(dir) = out {
                    let path = dir.join(FAILURE_CKPT);
                    model.to_checkpoint(cfg, vocab_hash)?.save(&path)?;
                    warn!("non-finite loss at step {step}; state written to {}", path.display());
                }
                return Err(Error::NonFiniteLoss { batch: step as usize });
            }
            let mut grads = g.backward(s.total);
            let mut enc_grads = collect_grads(&mut grads, &s.encoder_vars, model.encoder.params.tensors());
            zero_padding_grad(&mut enc_grads, &model.encoder);
            opt_enc.step(&mut model.encoder.params, &enc_grads);
            if plan.uses_g() {
                let g_grads = collect_grads(&mut grads, &s.g_vars, model.g.params.tensors());
                opt_g.step(&mut model.g.params, &g_grads);
            }
            if !model.encoder.params.is_finite() || !model.g.params.is_finite() {
                return Err(Error::NonFiniteLoss { batch: step as usize });
            }

            let step_k = observe(&s.view_sets, &mut reservoir, &mut hist, &mut curve);
            kstats.merge(&step_k);
            let record = StepRecord::new(step, &s.breakdown, step_k.mean());
            loss_log.line(&record)?;
            steps.push(record);
            loss_sum += s.breakdown.l_total;
            epoch_steps += 1;
            step += 1;
        }
        loss_log.flush()?;
        if epoch_steps == 0 {
            break;
        }
        if needs_partners && unpartnered > 0 {
            warn!(
                "epoch {epoch}: {unpartnered} of {rows_seen} sequences have no same-target partner; \
                 their positives fall back to a dropout view"
            );
        }

        // The target computed now is in effect for the next epoch.
        let in_effect = stat_target.map(|t| t.value);
        let was_warm_up = stat_target.is_none();
        stat_target = update_stat_target(&mut reservoir, cfg.q, stat_target);
        if was_warm_up && cfg.strategy == Strategy::Learnable {
            if let Some(t) = stat_target {
                model.g.set_output_bias(t.value);
            }
        }

        let snap = EmbeddingSnapshot::from_encoder(&model.encoder, &snapshot, epoch, mix(seeds.snapshot, epoch as u64))?;
        let (align, unif) = (alignment(&snap), uniformity(&snap));
        trajectory.log_epoch(EpochRecord {
            epoch,
            mean_k: kstats.mean(),
            min_k: kstats.min,
            max_k: kstats.max,
            k_stat_target: in_effect,
            alignment: align,
            uniformity: unif,
            histogram: hist,
            curve: Some(curve),
        })?;

        let mut summary = EpochSummary {
            epoch,
            steps: step,
            mean_l_total: loss_sum / epoch_steps as f64,
            mean_k: kstats.mean(),
            min_k: kstats.min,
            max_k: kstats.max,
            k_stat_target: in_effect,
            alignment: align,
            uniformity: unif,
            negated_uniformity: -unif,
            valid_ndcg10: None,
            valid: None,
        };
        let last_epoch = epoch + 1 == cfg.epochs || (cfg.max_steps > 0 && step >= cfg.max_steps);
        let mut stop = last_epoch;
        if (epoch + 1) % cfg.eval_every == 0 || last_epoch {
            let report = evaluate(&model.encoder, &split, cfg.eval_setting, &eval_opts)?;
            let ndcg = report.get(Metric::Ndcg, 10).unwrap_or(0.0);
            summary.valid_ndcg10 = Some(ndcg);
            summary.valid = Some(report);
            if best.as_ref().map_or(true, |(_, b, _)| ndcg > *b) {
                best = Some((epoch, ndcg, model.clone()));
                since_best = 0;
                if let Some(dir) = out {
                    model.to_checkpoint(cfg, vocab_hash)?.save(&dir.join(BEST_CKPT))?;
                }
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    info!("early stop after epoch {epoch}: no improvement for {since_best} evaluations");
                    stop = true;
                }
            }
        }
        info!(
            "epoch {epoch}: loss {:.4} mean_k {:.3} target {:?} ndcg@10 {:?}",
            summary.mean_l_total, summary.mean_k, in_effect, summary.valid_ndcg10
        );
        valid_log.line(&summary)?;
        valid_log.flush()?;
        epochs.push(summary);
        if stop {
            break 'epochs;
        }
    }

    let (best_epoch, best_ndcg10, best_model) = best.ok_or(Error::EmptyDataset(0))?;
    let test = test_reports(&best_model.encoder, &split, cfg, seeds.eval, &CandidateSetting::ALL)?;
    if let Some(dir) = out {
        model.to_checkpoint(cfg, vocab_hash)?.save(&dir.join(FINAL_CKPT))?;
        write_reports(dir, TEST_REPORT, &test)?;
    }
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_epoch,
        best_ndcg10,
        epochs,
        steps,
        stat_target,
        trajectory,
        seeds,
        test,
    })
}

/// Reads `cfg.data` and builds the sequences with the configured filters.
pub fn load_dataset(cfg: &RunConfig) -> Result<SequenceDataset> {
    let path = cfg
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no data path given".into()))?;
    let rows = load_interactions(Path::new(path), cfg.format)?;
    build_dataset_with(&rows, &cfg.dataset_options())
}

/// Held-out test metrics of `encoder` for each candidate setting.
pub fn test_reports(
    encoder: &Encoder,
    split: &SplitView,
    cfg: &RunConfig,
    seed: u64,
    settings: &[CandidateSetting],
) -> Result<Vec<MetricReport>> {
    let opts = EvalOptions {
        target: EvalTarget::Test,
        cutoffs: DEFAULT_CUTOFFS.to_vec(),
        num_candidates: cfg.eval_candidates,
        exclude_seen: cfg.exclude_seen,
        seed,
    };
    settings.iter().map(|&s| evaluate(encoder, split, s, &opts)).collect()
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[MetricReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let mut buf = Vec::new();
    write_csv(&mut buf, reports).map_err(|e| Error::io(&csv, e))?;
    fs::write(&csv, buf).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(reports)? + "\n";
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Diagnostics of a trained model over one pass of training batches,
/// without updating it. Thresholds come from the configured strategy; a
/// learnable model uses its network. The returned record's target is the
/// percentile of the similarities seen during the pass.
pub fn diagnose(model: &Model, split: &SplitView, cfg: &RunConfig, seed: u64) -> Result<EpochRecord> {
    let seeds = Seeds::derive(seed);
    let plan = ThresholdPlan {
        strategy: cfg.strategy,
        k0: cfg.k0,
        q: cfg.q,
        target: (cfg.strategy == Strategy::Learnable).then_some(0.0),
    };
    let loss_cfg = cfg.loss();
    let partners = PartnerIndex::new(split);
    let needs_partners = loss_cfg.augmentation != Augmentation::Un;
    let mut hist = Histogram::new(cfg.hist_bins)?;
    let mut curve = SimCurve::default();
    let mut kstats = KStats::default();
    let mut reservoir = SimReservoir::new(RESERVOIR_CAPACITY, seeds.reservoir);
    for (b, samples) in batch_samples(split, cfg.batch_size, seeds.samples)?.iter().enumerate() {
        let step = b as u64;
        let (rows, targets, partner_rows) =
            step_inputs(samples, split, needs_partners.then_some(&partners), mix(seeds.partners, step));
        let view_seeds = ViewSeeds {
            anchor: view_seed(seeds.dropout, step, 0),
            second: view_seed(seeds.dropout, step, 1),
            partner: view_seed(seeds.dropout, step, 2),
        };
        let batch = StepBatch { rows: &rows, targets: &targets, partners: &partner_rows };
        let mut g = Graph::new();
        let s = build_step(&mut g, &model.encoder, &model.g, batch, &plan, &loss_cfg, view_seeds, None)?;
        kstats.merge(&observe(&s.view_sets, &mut reservoir, &mut hist, &mut curve));
    }
    let target = update_stat_target(&mut reservoir, cfg.q, None).map(|t| t.value);
    let rows = snapshot_rows(split, cfg.snapshot_size, seeds.snapshot);
    let snap = EmbeddingSnapshot::from_encoder(&model.encoder, &rows, 0, seeds.snapshot)?;
    Ok(EpochRecord {
        epoch: 0,
        mean_k: kstats.mean(),
        min_k: kstats.min,
        max_k: kstats.max,
        k_stat_target: target,
        alignment: alignment(&snap),
        uniformity: uniformity(&snap),
        histogram: hist,
        curve: Some(curve),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_dataset;
    use crate::dataset::synthetic::{clustered, ClusteredSpec};

    fn tiny_dataset() -> SequenceDataset {
        let spec = ClusteredSpec { users: 40, items: 30, clusters: 3, min_len: 5, max_len: 9, ..ClusteredSpec::default() };
        build_dataset(&clustered(&spec), 3, 8).unwrap()
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            max_len: 8,
            epochs: 3,
            batch_size: 8,
            g_hidden: 4,
            snapshot_size: 20,
            eval_candidates: 10,
            ..RunConfig::default()
        }
    }

    #[test]
    fn smoke_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let o = train(&tiny_config(), &tiny_dataset(), Some(dir.path())).unwrap();
        for f in [
            MANIFEST,
            LOSS_LOG,
            VALID_LOG,
            BEST_CKPT,
            FINAL_CKPT,
            "diag_alignment_uniformity.csv",
            "diag_threshold.csv",
            "diag_sim_hist_0.csv",
            "diag_sim_curve_2.csv",
            "test_metrics.csv",
            "test_metrics.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(o.epochs.len(), 3);
        assert!(o.epochs[0].k_stat_target.is_none());
        assert!(o.epochs[1].k_stat_target.is_some());
        let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(log.lines().count(), o.steps.len());
        let (m, meta, _) = Model::load(&dir.path().join(BEST_CKPT)).unwrap();
        assert_eq!(meta.run, tiny_config());
        assert_eq!(m.encoder.params, o.best.encoder.params);
        let csv = fs::read_to_string(dir.path().join("test_metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 18);
    }

    #[test]
    fn diagnose_summarizes_a_trained_model() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let o = train(&cfg, &ds, None).unwrap();
        let split = crate::dataset::split(&ds);
        let r = diagnose(&o.best, &split, &cfg, 1).unwrap();
        assert!(r.histogram.total() > 0);
        assert!(r.min_k - 1e-12 <= r.mean_k && r.mean_k <= r.max_k + 1e-12, "{r:?}");
        assert!((0.0..=4.0).contains(&r.alignment));
        assert!(r.uniformity <= 0.0);
        let t = r.k_stat_target.unwrap();
        assert!((-1.0..=1.0).contains(&t));
        assert_eq!(diagnose(&o.best, &split, &cfg, 1).unwrap(), r);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.aug = Augmentation::UsX;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train(&cfg, &ds, Some(a.path())).unwrap();
        train(&cfg, &ds, Some(b.path())).unwrap();
        for f in [LOSS_LOG, VALID_LOG, BEST_CKPT, "diag_threshold.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn best_checkpoint_dominates_every_epoch() {
        let mut cfg = tiny_config();
        cfg.epochs = 5;
        let o = train(&cfg, &tiny_dataset(), None).unwrap();
        for e in &o.epochs {
            if let Some(n) = e.valid_ndcg10 {
                assert!(o.best_ndcg10 >= n);
            }
        }
        assert_eq!(o.epochs[o.best_epoch].valid_ndcg10, Some(o.best_ndcg10));
    }

    #[test]
    fn max_steps_and_patience_stop_early() {
        let mut cfg = tiny_config();
        cfg.epochs = 50;
        cfg.max_steps = 7;
        let o = train(&cfg, &tiny_dataset(), None).unwrap();
        assert_eq!(o.steps.len(), 7);
        let mut cfg = tiny_config();
        cfg.epochs = 200;
        cfg.patience = 2;
        cfg.learning_rate = 1e-9;
        let o = train(&cfg, &tiny_dataset(), None).unwrap();
        assert!(o.epochs.len() < 200);
    }

    #[test]
    fn partner_index_never_returns_the_sample_itself() {
        let ds = tiny_dataset();
        let split = crate::dataset::split(&ds);
        let idx = PartnerIndex::new(&split);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut found = 0;
        for s in crate::dataset::epoch_samples(&split, 3) {
            if let Some((u, cut)) = idx.pick(&s, &mut rng) {
                assert_ne!((u, cut), (s.user, s.input.len()));
                assert_eq!(split.users[u].train_prefix[cut], s.target);
                found += 1;
            }
        }
        assert!(found > 0);
    }
}
