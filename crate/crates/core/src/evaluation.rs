//! Label-budgeted linear probe and cross-client alignment metrics.
//!
//! The probe classifies slices by partition from frozen embeddings. For each
//! cross-validation fold, every client holds out a block of volumes for
//! validation and labels `N` of its remaining volumes; the labelled slices
//! of all clients are pooled to train one softmax-regression layer, which is
//! scored on the pooled validation slices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::contrastive::{ClientId, PartitionId, VolumeId};
use crate::data::{standardize, ClientShard};
use crate::encoder::EncoderParams;
use crate::error::{FclError, Result};
use crate::federation::{run_experiment, ExperimentConfig, Mode};
use crate::parallel::Parallelism;
use crate::seeding::{self, tag};
use crate::tensor_math::{dot_unchecked, log_sum_exp, Mat64, Vec64};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Label budgets `N` (labelled volumes per client) to evaluate.
    pub budgets: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub folds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            budgets: vec![1, 2, 4],
            epochs: 100,
            lr: 0.5,
            folds: 5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self, volumes_per_client: usize) -> Result<()> {
        if self.folds < 2 {
            return Err(FclError::config("folds", "must be ≥ 2"));
        }
        if self.folds > volumes_per_client {
            return Err(FclError::config(
                "folds",
                format!("cannot exceed volumes_per_client ({volumes_per_client})"),
            ));
        }
        if self.epochs == 0 {
            return Err(FclError::config("probe_epochs", "must be ≥ 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(FclError::config("probe_lr", "must be > 0"));
        }
        let train_volumes = volumes_per_client - volumes_per_client.div_ceil(self.folds);
        for &n in &self.budgets {
            if n == 0 || n > train_volumes {
                return Err(FclError::config(
                    "label_budgets",
                    format!(
                        "budget {n} must be in [1, {train_volumes}] with {} folds",
                        self.folds
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Embedding of one un-augmented, standardised slice together with where it
/// came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSlice {
    pub client_id: ClientId,
    pub volume_id: VolumeId,
    pub partition_id: PartitionId,
    pub embedding: Vec64,
}

pub fn embed_shards(encoder: &EncoderParams, shards: &[ClientShard]) -> Result<Vec<EmbeddedSlice>> {
    let mut out = Vec::new();
    for shard in shards {
        let spec = shard.partition_spec();
        for v in shard.volumes() {
            for (i, s) in v.slices().iter().enumerate() {
                out.push(EmbeddedSlice {
                    client_id: shard.client_id(),
                    volume_id: v.volume_id(),
                    partition_id: spec.partition_of(i),
                    embedding: encoder.embed(&standardize(s))?,
                });
            }
        }
    }
    Ok(out)
}

/// Softmax regression on fixed features, trained by full-batch gradient
/// descent from zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: Mat64,
    bias: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(
        features: &[&[f64]],
        labels: &[usize],
        classes: usize,
        epochs: usize,
        lr: f64,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(FclError::dim(
                "probe training set",
                features.len(),
                labels.len(),
            ));
        }
        let first = labels[0];
        if labels.iter().all(|&l| l == first) {
            return Err(FclError::Contract(
                "probe labels contain a single class".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FclError::Contract(format!(
                "label {bad} ≥ class count {classes}"
            )));
        }
        let dim = features[0].len();
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(FclError::dim("probe features", dim, f.len()));
        }
        let mut probe = LinearProbe {
            weights: Mat64::zeros(classes, dim),
            bias: vec![0.0; classes],
        };
        let inv = 1.0 / features.len() as f64;
        for _ in 0..epochs {
            let mut gw = Mat64::zeros(classes, dim);
            let mut gb = vec![0.0; classes];
            for (x, &y) in features.iter().zip(labels) {
                let logits = probe.logits(x);
                let lse = log_sum_exp(&logits);
                let mut delta: Vec<f64> = logits.iter().map(|l| (l - lse).exp() * inv).collect();
                delta[y] -= inv;
                gw.add_outer(1.0, &delta, x)?;
                gb.iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
            }
            probe
                .weights
                .data_mut()
                .iter_mut()
                .zip(gw.data())
                .for_each(|(w, g)| *w -= lr * g);
            probe
                .bias
                .iter_mut()
                .zip(&gb)
                .for_each(|(b, g)| *b -= lr * g);
        }
        Ok(probe)
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.bias.len())
            .map(|c| dot_unchecked(self.weights.row(c), x) + self.bias[c])
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        // first maximum wins ties
        let mut best = 0;
        for (c, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[&[f64]], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / features.len() as f64
    }
}

/// Volumes (as `(client, volume)` pairs) used by one cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub labeled: Vec<(ClientId, VolumeId)>,
    pub validation: Vec<(ClientId, VolumeId)>,
}

/// Folds over each client's volumes, shuffled with a per-client stream.
/// Within a fold, the first `budget` non-validation volumes (in shuffled
/// order) are labelled.
pub fn cross_validation_folds(
    shards: &[ClientShard],
    folds: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(FclError::Contract(
            "cross-validation needs ≥ 2 folds".into(),
        ));
    }
    let mut out: Vec<Fold> = (0..folds)
        .map(|index| Fold {
            index,
            labeled: Vec::new(),
            validation: Vec::new(),
        })
        .collect();
    for shard in shards {
        let mut ids: Vec<VolumeId> = shard.volumes().iter().map(|v| v.volume_id()).collect();
        let n = ids.len();
        if n < folds {
            return Err(FclError::InsufficientData(format!(
                "client {} has {n} volumes for {folds} folds",
                shard.client_id()
            )));
        }
        ids.shuffle(&mut seeding::stream(
            seed,
            &[tag::PROBE, u64::from(shard.client_id())],
        ));
        for fold in out.iter_mut() {
            let lo = fold.index * n / folds;
            let hi = (fold.index + 1) * n / folds;
            let train: Vec<VolumeId> = ids[..lo].iter().chain(&ids[hi..]).copied().collect();
            if budget == 0 || budget > train.len() {
                return Err(FclError::Contract(format!(
                    "label budget {budget} outside [1, {}]",
                    train.len()
                )));
            }
            let c = shard.client_id();
            fold.validation.extend(ids[lo..hi].iter().map(|&v| (c, v)));
            fold.labeled.extend(train[..budget].iter().map(|&v| (c, v)));
        }
    }
    Ok(out)
}

fn select<'a>(
    points: &'a [EmbeddedSlice],
    volumes: &[(ClientId, VolumeId)],
) -> (Vec<&'a [f64]>, Vec<usize>) {
    let wanted: std::collections::BTreeSet<_> = volumes.iter().copied().collect();
    points
        .iter()
        .filter(|p| wanted.contains(&(p.client_id, p.volume_id)))
        .map(|p| (p.embedding.as_slice(), usize::from(p.partition_id)))
        .unzip()
}

pub fn probe_fold(
    points: &[EmbeddedSlice],
    fold: &Fold,
    classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    let (train_x, train_y) = select(points, &fold.labeled);
    let (val_x, val_y) = select(points, &fold.validation);
    let probe = LinearProbe::fit(&train_x, &train_y, classes, epochs, lr)?;
    Ok(probe.accuracy(&val_x, &val_y))
}

/// Per-fold held-out accuracy of a probe on the frozen `encoder` with `budget`
/// labelled volumes per client.
pub fn linear_probe(
    encoder: &EncoderParams,
    shards: &[ClientShard],
    budget: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let points = embed_shards(encoder, shards)?;
    let classes = shards
        .first()
        .map(|s| s.partition_spec().partitions)
        .ok_or_else(|| FclError::InsufficientData("no clients".into()))?;
    probe_points(&points, classes, budget, cfg, shards, seed)
}

fn probe_points(
    points: &[EmbeddedSlice],
    classes: usize,
    budget: usize,
    cfg: &ProbeConfig,
    shards: &[ClientShard],
    seed: u64,
) -> Result<Vec<f64>> {
    cross_validation_folds(shards, cfg.folds, budget, seed)?
        .iter()
        .map(|fold| probe_fold(points, fold, classes, cfg.epochs, cfg.lr))
        .collect()
}

type Centroids = BTreeMap<(ClientId, PartitionId), Vec<f64>>;

fn centroids(points: &[EmbeddedSlice]) -> Result<Centroids> {
    let mut sums: BTreeMap<(ClientId, PartitionId), (Vec<f64>, usize)> = BTreeMap::new();
    for p in points {
        let entry = sums
            .entry((p.client_id, p.partition_id))
            .or_insert_with(|| (vec![0.0; p.embedding.len()], 0));
        if entry.0.len() != p.embedding.len() {
            return Err(FclError::dim(
                "alignment embeddings",
                entry.0.len(),
                p.embedding.len(),
            ));
        }
        entry
            .0
            .iter_mut()
            .zip(p.embedding.iter())
            .for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    let clients: std::collections::BTreeSet<_> = sums.keys().map(|k| k.0).collect();
    let partitions: std::collections::BTreeSet<_> = sums.keys().map(|k| k.1).collect();
    if clients.len() < 2 || partitions.len() < 2 {
        return Err(FclError::Contract(format!(
            "alignment needs ≥ 2 clients and ≥ 2 partitions, got {} and {}",
            clients.len(),
            partitions.len()
        )));
    }
    for c in &clients {
        for s in &partitions {
            if !sums.contains_key(&(*c, *s)) {
                log::warn!("client {c} has no features in partition {s}; skipping that cell");
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot_unchecked(a, a).sqrt();
    let nb = dot_unchecked(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot_unchecked(a, b) / (na * nb)
}

fn alignment_from(centroids: &Centroids, only_client: Option<ClientId>) -> f64 {
    let cells: Vec<_> = centroids.iter().collect();
    let (mut same, mut sn, mut cross, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for (i, ((ca, pa), va)) in cells.iter().enumerate() {
        for ((cb, pb), vb) in &cells[i + 1..] {
            if ca == cb {
                continue;
            }
            if let Some(c) = only_client {
                if *ca != c && *cb != c {
                    continue;
                }
            }
            let s = cosine(va, vb);
            if pa == pb {
                same += s;
                sn += 1;
            } else {
                cross += s;
                cn += 1;
            }
        }
    }
    if sn == 0 || cn == 0 {
        return 0.0;
    }
    same / sn as f64 - cross / cn as f64
}

/// Mean cosine similarity between same-partition centroids of different
/// clients, minus the mean over different-partition centroid pairs of
/// different clients.
pub fn alignment_metric(points: &[EmbeddedSlice]) -> Result<f64> {
    Ok(alignment_from(&centroids(points)?, None))
}

/// [`alignment_metric`] restricted to centroid pairs that involve `client`.
pub fn client_alignment(points: &[EmbeddedSlice], client: ClientId) -> Result<f64> {
    Ok(alignment_from(&centroids(points)?, Some(client)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub arm: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub fold: usize,
    pub probe_accuracy: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub arm: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub alignment_mean: f64,
}

/// Probe rows for all arms, budgets, seeds and folds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    fn arms(&self) -> Vec<String> {
        let mut arms: Vec<String> = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm.clone());
            }
        }
        arms
    }

    fn budgets(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns
    }

    /// Mean ± population std of probe accuracy per (arm, N) over seeds and
    /// folds, plus the mean final alignment over seeds.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for arm in self.arms() {
            for n in self.budgets() {
                let cell: Vec<&EvalRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.arm == arm && r.n == n)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let acc: Vec<f64> = cell.iter().map(|r| r.probe_accuracy).collect();
                let (mean, std) = mean_std(&acc);
                let mut per_seed: BTreeMap<u64, f64> = BTreeMap::new();
                for r in &cell {
                    per_seed.insert(r.seed, r.alignment);
                }
                let align: Vec<f64> = per_seed.into_values().collect();
                out.push(SummaryRow {
                    arm: arm.clone(),
                    n,
                    mean,
                    std,
                    count: acc.len(),
                    alignment_mean: mean_std(&align).0,
                });
            }
        }
        out
    }

    pub fn mean_accuracy(&self, arm: &str, n: usize) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.arm == arm && s.n == n)
            .map(|s| s.mean)
    }

    pub fn mean_alignment(&self, arm: &str) -> Option<f64> {
        let mut per_seed: BTreeMap<u64, f64> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.arm == arm) {
            per_seed.insert(r.seed, r.alignment);
        }
        if per_seed.is_empty() {
            return None;
        }
        Some(mean_std(&per_seed.into_values().collect::<Vec<_>>()).0)
    }

    /// For each budget and ordered pair of arms: mean over seeds of the
    /// per-seed accuracy difference, and the number of seeds where the first
    /// arm wins.
    pub fn paired_comparisons(&self) -> Vec<(String, String, usize, f64, usize, usize)> {
        let arms = self.arms();
        let mut out = Vec::new();
        let per_seed = |arm: &str, n: usize| -> BTreeMap<u64, f64> {
            let mut m: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for r in self.rows.iter().filter(|r| r.arm == arm && r.n == n) {
                m.entry(r.seed).or_default().push(r.probe_accuracy);
            }
            m.into_iter().map(|(s, v)| (s, mean_std(&v).0)).collect()
        };
        for n in self.budgets() {
            for (i, a) in arms.iter().enumerate() {
                for b in &arms[i + 1..] {
                    let pa = per_seed(a, n);
                    let pb = per_seed(b, n);
                    let diffs: Vec<f64> = pa
                        .iter()
                        .filter_map(|(s, x)| pb.get(s).map(|y| y - x))
                        .collect();
                    if diffs.is_empty() {
                        continue;
                    }
                    let wins = diffs.iter().filter(|d| **d > 0.0).count();
                    out.push((
                        b.clone(),
                        a.clone(),
                        n,
                        mean_std(&diffs).0,
                        wins,
                        diffs.len(),
                    ));
                }
            }
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>4} {:>18} {:>10}",
            "arm", "N", "probe accuracy", "alignment"
        );
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{:<12} {:>4} {:>9.4} ± {:<6.4} {:>10.4}",
                r.arm, r.n, r.mean, r.std, r.alignment_mean
            );
        }
        let pairs = self.paired_comparisons();
        if !pairs.is_empty() {
            let _ = writeln!(s, "\npaired differences (mean over seeds):");
            for (a, b, n, d, wins, total) in pairs {
                let _ = writeln!(
                    s,
                    "  N={n:<3} {a} − {b}: {d:+.4} ({wins}/{total} seeds positive)"
                );
            }
        }
        s
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Raw {
            arm: String,
            #[serde(rename = "N")]
            n: usize,
            seed: u64,
            fold: usize,
            probe_accuracy: f64,
            alignment: f64,
        }
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr
            .deserialize::<Raw>()
            .map(|row| {
                row.map(|r| EvalRow {
                    arm: r.arm,
                    n: r.n,
                    seed: r.seed,
                    fold: r.fold,
                    probe_accuracy: r.probe_accuracy,
                    alignment: r.alignment,
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(EvalReport { rows })
    }
}

/// Probe and alignment rows for an already trained encoder.
pub fn evaluate_encoder(
    arm: &str,
    encoder: &EncoderParams,
    shards: &[ClientShard],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let points = embed_shards(encoder, shards)?;
    let classes = shards
        .first()
        .map(|s| s.partition_spec().partitions)
        .ok_or_else(|| FclError::InsufficientData("no clients".into()))?;
    let alignment = if shards.len() >= 2 {
        alignment_metric(&points)?
    } else {
        0.0
    };
    let mut rows = Vec::new();
    for &n in &cfg.budgets {
        let accs = probe_points(&points, classes, n, cfg, shards, seed)?;
        rows.extend(accs.into_iter().enumerate().map(|(fold, acc)| EvalRow {
            arm: arm.to_string(),
            n,
            seed,
            fold,
            probe_accuracy: acc,
            alignment,
        }));
    }
    Ok(rows)
}

/// Pre-trains every arm for every seed and probes the result at every
/// budget. Each (arm, seed) cell is independent and may run in parallel.
pub fn run_ablation(
    base: &ExperimentConfig,
    arms: &[Mode],
    seeds: &[u64],
    par: &Parallelism,
) -> Result<EvalReport> {
    let cells: Vec<(Mode, u64)> = arms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results = par.map(&cells, |&(mode, seed)| {
        let mut cfg = base.clone();
        cfg.round.mode = mode;
        cfg.seed = seed;
        run_experiment(&cfg, &Parallelism::sequential()).map(|r| r.eval)
    });
    let mut report = EvalReport::default();
    for rows in results {
        report.rows.extend(rows?);
    }
    Ok(report)
}
