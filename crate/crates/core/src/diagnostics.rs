//! Representation diagnostics: alignment, uniformity, similarity
//! distributions and threshold trajectories, written as plain CSV files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{DropoutMode, Encoder};
use crate::error::{Error, Result};
use crate::similarity::{sorted_row, PairLayout, SimilarityMatrix};
use crate::tensor::Tensor;

pub const DEFAULT_SNAPSHOT_SIZE: usize = 1000;
pub const DEFAULT_BINS: usize = 40;
pub const CURVE_POINTS: usize = 101;
/// Fraction of trailing epochs used by the convergence detector.
pub const TRAILING_FRACTION: f64 = 0.2;

/// Unit-normalized anchors and their positive partners.
#[derive(Clone, Debug)]
pub struct EmbeddingSnapshot {
    pub anchors: Tensor,
    pub partners: Tensor,
    pub epoch: usize,
}

fn normalized(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let norm = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm(r));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

impl EmbeddingSnapshot {
    pub fn new(anchors: &Tensor, partners: &Tensor, epoch: usize) -> Result<Self> {
        if anchors.shape() != partners.shape() {
            return Err(Error::InvalidArgument(
                "anchors and partners must have the same shape".into(),
            ));
        }
        Ok(Self {
            anchors: normalized(anchors)?,
            partners: normalized(partners)?,
            epoch,
        })
    }

    /// Anchors encoded without dropout; partners are one dropout view of the
    /// same rows.
    pub fn from_encoder(encoder: &Encoder, rows: &[Vec<usize>], epoch: usize, seed: u64) -> Result<Self> {
        let mut a = Vec::new();
        let mut p = Vec::new();
        for (c, chunk) in rows.chunks(256).enumerate() {
            for r in encoder.encode(chunk, DropoutMode::Off)? {
                a.push(r.vector);
            }
            let view = DropoutMode::Stochastic(crate::seed::mix(seed, c as u64));
            for r in encoder.encode(chunk, view)? {
                p.push(r.vector);
            }
        }
        Self::new(&Tensor::from_rows(&a), &Tensor::from_rows(&p), epoch)
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between each anchor and its partner.
pub fn alignment(s: &EmbeddingSnapshot) -> f64 {
    assert!(!s.is_empty(), "alignment needs at least one pair");
    let n = s.len();
    (0..n)
        .map(|i| sq_dist(s.anchors.row(i), s.partners.row(i)))
        .sum::<f64>()
        / n as f64
}

/// `log` of the mean Gaussian potential `e^{−2‖x−y‖²}` over ordered
/// distinct anchor pairs.
pub fn uniformity(s: &EmbeddingSnapshot) -> f64 {
    let n = s.len();
    assert!(n >= 2, "uniformity needs at least two points");
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (-2.0 * sq_dist(s.anchors.row(i), s.anchors.row(j))).exp();
            }
        }
    }
    (total / (n * (n - 1)) as f64).ln()
}

/// Equal-width bins over [−1, 1]; the top edge belongs to the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Self {
            counts: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self, b: usize) -> (f64, f64) {
        let w = 2.0 / self.bins() as f64;
        (-1.0 + b as f64 * w, -1.0 + (b + 1) as f64 * w)
    }

    pub fn add(&mut self, v: f64) {
        let n = self.bins();
        let b = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * n as f64).floor() as usize;
        self.counts[b.min(n - 1)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(b);
            let _ = writeln!(s, "{lo},{hi},{c}");
        }
        s
    }
}

/// Histogram of every anchor-to-candidate similarity in `m`.
pub fn similarity_histogram(m: &SimilarityMatrix, layout: &PairLayout, bins: usize) -> Result<Histogram> {
    let mut h = Histogram::new(bins)?;
    for i in 0..layout.len() {
        for j in layout.candidates(i) {
            h.add(m.get(i, j));
        }
    }
    Ok(h)
}

/// Average sorted candidate-similarity row, sampled at evenly spaced
/// quantile positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SimCurve {
    sums: Vec<f64>,
    rows: u64,
}

impl Default for SimCurve {
    fn default() -> Self {
        Self {
            sums: vec![0.0; CURVE_POINTS],
            rows: 0,
        }
    }
}

impl SimCurve {
    pub fn add_batch(&mut self, m: &SimilarityMatrix, layout: &PairLayout) {
        for i in 0..layout.len() {
            let order = sorted_row(m, layout, i);
            let last = (order.len() - 1) as f64;
            for (p, s) in self.sums.iter_mut().enumerate() {
                let idx = (p as f64 / (CURVE_POINTS - 1) as f64 * last).round() as usize;
                *s += m.get(i, order[idx]);
            }
            self.rows += 1;
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantile,similarity\n");
        for (p, v) in self.values().iter().enumerate() {
            let _ = writeln!(s, "{},{v}", p as f64 / (CURVE_POINTS - 1) as f64);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_k: f64,
    pub min_k: f64,
    pub max_k: f64,
    /// Target in effect during the epoch; absent during warm-up.
    pub k_stat_target: Option<f64>,
    pub alignment: f64,
    pub uniformity: f64,
    pub histogram: Histogram,
    #[serde(skip)]
    pub curve: Option<SimCurve>,
}

impl EpochRecord {
    pub fn negated_uniformity(&self) -> f64 {
        -self.uniformity
    }
}

/// Per-epoch records, optionally mirrored to CSV files in a directory.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryLog {
    dir: Option<PathBuf>,
    records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl TrajectoryLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_dir(dir: &Path) -> Self {
        Self {
            dir: Some(dir.to_path_buf()),
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends `record` and rewrites the CSV files.
    pub fn log_epoch(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::NonMonotoneEpoch {
                    last: last.epoch,
                    got: record.epoch,
                });
            }
        }
        self.records.push(record);
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        let mut au = String::from("epoch,alignment,uniformity,negated_uniformity\n");
        let mut th = String::from("epoch,mean_k,min_k,max_k,k_stat_target\n");
        for r in &self.records {
            let _ = writeln!(au, "{},{},{},{}", r.epoch, r.alignment, r.uniformity, r.negated_uniformity());
            let _ = writeln!(
                th,
                "{},{},{},{},{}",
                r.epoch,
                r.mean_k,
                r.min_k,
                r.max_k,
                opt(r.k_stat_target)
            );
        }
        write("diag_alignment_uniformity.csv".into(), au)?;
        write("diag_threshold.csv".into(), th)?;
        let last = self.records.last().expect("non-empty");
        write(format!("diag_sim_hist_{}.csv", last.epoch), last.histogram.to_csv())?;
        if let Some(c) = &last.curve {
            write(format!("diag_sim_curve_{}.csv", last.epoch), c.to_csv())?;
        }
        Ok(())
    }

    /// Population standard deviation of mean k over the trailing 20% of
    /// epochs (at least one).
    pub fn trailing_k_stddev(&self) -> Option<f64> {
        let mk: Vec<f64> = self.records.iter().map(|r| r.mean_k).collect();
        trailing_stddev(&mk, TRAILING_FRACTION)
    }
}

pub fn trailing_stddev(values: &[f64], fraction: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let w = ((values.len() as f64 * fraction).ceil() as usize).clamp(1, values.len());
    let tail = &values[values.len() - w..];
    let mean = tail.iter().sum::<f64>() / w as f64;
    Some((tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::cosine_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snap(a: Vec<Vec<f64>>, p: Vec<Vec<f64>>) -> EmbeddingSnapshot {
        EmbeddingSnapshot::new(&Tensor::from_rows(&a), &Tensor::from_rows(&p), 0).unwrap()
    }

    #[test]
    fn alignment_closed_forms() {
        let s = snap(vec![vec![1.0, 0.0]], vec![vec![3.0, 0.0]]);
        assert!(alignment(&s).abs() < 1e-12);
        let s = snap(vec![vec![1.0, 0.0]], vec![vec![0.0, 2.0]]);
        assert!((alignment(&s) - 2.0).abs() < 1e-12);
        let s = snap(vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]);
        assert!((alignment(&s) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn uniformity_closed_forms() {
        let s = snap(vec![vec![0.0, 1.0]; 3], vec![vec![0.0, 1.0]; 3]);
        assert!(uniformity(&s).abs() < 1e-12);
        let s = snap(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![vec![1.0, 0.0]; 2]);
        assert!((uniformity(&s) + 8.0).abs() < 1e-12);
    }

    #[test]
    fn snapshot_rejects_zero_vectors() {
        let e = EmbeddingSnapshot::new(&Tensor::from_rows(&[vec![0.0, 0.0]]), &Tensor::from_rows(&[vec![1.0, 0.0]]), 0);
        assert!(matches!(e, Err(Error::ZeroNorm(0))));
    }

    #[test]
    fn metrics_match_a_double_loop_and_keep_their_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rand_rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..12).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let a = rand_rows(&mut rng);
        let p = rand_rows(&mut rng);
        let s = snap(a.clone(), p.clone());
        let unit = |v: &Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let (ua, up): (Vec<_>, Vec<_>) = (a.iter().map(unit).collect(), p.iter().map(unit).collect());
        let mut al = 0.0;
        for i in 0..12 {
            for d in 0..5 {
                al += (ua[i][d] - up[i][d]).powi(2);
            }
        }
        al /= 12.0;
        let mut un = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                if i == j {
                    continue;
                }
                let d2: f64 = (0..5).map(|d| (ua[i][d] - ua[j][d]).powi(2)).sum();
                un += (-2.0 * d2).exp();
            }
        }
        let un = (un / 132.0).ln();
        assert!((alignment(&s) - al).abs() < 1e-9);
        assert!((uniformity(&s) - un).abs() < 1e-9);
        assert!(alignment(&s) >= 0.0 && uniformity(&s) <= 0.0);
    }

    #[test]
    fn histogram_examples() {
        let mut h = Histogram::new(4).unwrap();
        for _ in 0..10 {
            h.add(0.2);
        }
        assert_eq!(h.counts, vec![0, 0, 10, 0]);
        assert_eq!(h.edges(2), (0.0, 0.5));
        h.add(1.0);
        h.add(-1.0);
        assert_eq!(h.counts, vec![1, 0, 10, 1]);
        assert!(Histogram::new(1).is_err());
    }

    #[test]
    fn histogram_of_uniform_values_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = Histogram::new(10).unwrap();
        let n = 20_000;
        for _ in 0..n {
            h.add(rng.gen_range(-1.0..1.0));
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = h.counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 9 degrees of freedom: P(χ² > 27.88) = 0.001.
        assert!(chi2 < 27.88, "{chi2}");
    }

    #[test]
    fn batch_histogram_counts_every_candidate_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in [2, 3, 8] {
            let x = Tensor::from_vec(2 * b, 4, (0..8 * b).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let m = cosine_matrix(&x).unwrap();
            let l = PairLayout::new(b).unwrap();
            let h = similarity_histogram(&m, &l, 7).unwrap();
            assert_eq!(h.total(), (2 * b * (2 * b - 2)) as u64);
        }
    }

    #[test]
    fn curve_is_non_decreasing_and_spans_the_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(8, 3, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m = cosine_matrix(&x).unwrap();
        let l = PairLayout::new(4).unwrap();
        let mut c = SimCurve::default();
        c.add_batch(&m, &l);
        let v = c.values();
        assert_eq!(v.len(), CURVE_POINTS);
        assert!(v.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        let min_mean = (0..8)
            .map(|i| l.candidates(i).map(|j| m.get(i, j)).fold(f64::MAX, f64::min))
            .sum::<f64>()
            / 8.0;
        assert!((v[0] - min_mean).abs() < 1e-12);
    }

    fn record(epoch: usize, mean_k: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            mean_k,
            min_k: mean_k - 0.1,
            max_k: mean_k + 0.1,
            k_stat_target: (epoch > 0).then_some(0.5),
            alignment: 0.3,
            uniformity: -2.0,
            histogram: Histogram::new(4).unwrap(),
            curve: Some(SimCurve::default()),
        }
    }

    #[test]
    fn log_rejects_non_increasing_epochs() {
        let mut log = TrajectoryLog::in_memory();
        log.log_epoch(record(0, 0.1)).unwrap();
        assert_eq!(log.len(), 1);
        assert!(matches!(
            log.log_epoch(record(0, 0.2)),
            Err(Error::NonMonotoneEpoch { last: 0, got: 0 })
        ));
    }

    #[test]
    fn trailing_window_stddev() {
        assert_eq!(trailing_stddev(&[], 0.2), None);
        assert_eq!(trailing_stddev(&[3.0], 0.2), Some(0.0));
        // 10 values: the last 2 are 1 and 3, stddev 1.
        let v = [9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 1.0, 3.0];
        assert!((trailing_stddev(&v, 0.2).unwrap() - 1.0).abs() < 1e-12);
        // 11 values: window of 3.
        let v = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        let expect = (2.0f64 / 3.0).sqrt();
        assert!((trailing_stddev(&v, 0.2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn files_are_written_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let d = dir.path().join(sub);
            let mut log = TrajectoryLog::to_dir(&d);
            for e in 0..3 {
                log.log_epoch(record(e, 0.1 * e as f64)).unwrap();
            }
            d
        };
        let (a, b) = (run("a"), run("b"));
        for name in [
            "diag_alignment_uniformity.csv",
            "diag_threshold.csv",
            "diag_sim_hist_0.csv",
            "diag_sim_hist_2.csv",
            "diag_sim_curve_1.csv",
        ] {
            let x = fs::read(a.join(name)).unwrap();
            assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name}");
        }
        let th = fs::read_to_string(a.join("diag_threshold.csv")).unwrap();
        assert_eq!(th.lines().next().unwrap(), "epoch,mean_k,min_k,max_k,k_stat_target");
        assert!(th.lines().nth(1).unwrap().ends_with(','));
        let au = fs::read_to_string(a.join("diag_alignment_uniformity.csv")).unwrap();
        assert!(au.lines().nth(1).unwrap().ends_with(",2"));
    }
}
