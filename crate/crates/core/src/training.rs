//! Losses, optimiser schedules and the two training loops.
//!
//! The uncertainty network is trained with the negative log-likelihood of a
//! logistic-normal model of each normalised descriptor dimension:
//!
//! ```text
//! L = Σ_i [ ½·ln var_i + ln(y_i (1 − y_i)) + (logit y_i − mu_i)² / (2 var_i) ]
//! ```
//!
//! with the constant `½·ln 2π` dropped. The retrieval backbone is trained with
//! a hinge triplet loss on squared Euclidean distances.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Descriptor, TrainableBackbone};
use crate::dataset::{mine_triplets, DatasetView, PlaceRecord, RecordStore, Split};
use crate::error::{ensure, Error, Result};
use crate::nn::Adam;
use crate::ue_net::{build_reference_set, prepare_input, FeatureCache, UeInput, UeNet};

/// Per-dimension min-max scaling of descriptors into `[ε, 1 − ε]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub epsilon: f64,
    /// Incremented every time the statistics are re-fitted.
    #[serde(default)]
    pub version: u32,
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self {
            min: Vec::new(),
            max: Vec::new(),
            epsilon: 1e-3,
            version: 0,
        }
    }
}

impl NormalizationStats {
    /// Fits min/max per dimension. A dimension with zero range is widened by
    /// ±0.5 so the affine map stays defined.
    pub fn fit(descriptors: &[Vec<f64>], epsilon: f64) -> Result<Self> {
        ensure!(
            !descriptors.is_empty(),
            Validation,
            "cannot fit normalisation on zero descriptors"
        );
        ensure!(
            epsilon > 0.0 && epsilon < 0.5,
            Validation,
            "epsilon must lie in (0, 0.5), got {epsilon}"
        );
        let d = descriptors[0].len();
        ensure!(
            descriptors.iter().all(|v| v.len() == d),
            Validation,
            "descriptors have differing dimensions"
        );
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for v in descriptors {
            for k in 0..d {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        for k in 0..d {
            if max[k] <= min[k] {
                min[k] -= 0.5;
                max[k] += 0.5;
            }
        }
        Ok(Self {
            min,
            max,
            epsilon,
            version: 1,
        })
    }

    pub fn is_fitted(&self) -> bool {
        !self.min.is_empty()
    }

    fn check(&self, len: usize) -> Result<()> {
        if !self.is_fitted() {
            return Err(Error::State(
                "normalisation statistics have not been fitted".into(),
            ));
        }
        ensure!(
            len == self.min.len(),
            Validation,
            "descriptor has {len} dimensions, statistics have {}",
            self.min.len()
        );
        Ok(())
    }

    pub fn normalize(&self, d: &[f64]) -> Result<Vec<f64>> {
        self.check(d.len())?;
        let eps = self.epsilon;
        Ok(d.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| ((v - lo) / (hi - lo)).clamp(eps, 1.0 - eps))
            .collect())
    }

    pub fn denormalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y.len())?;
        Ok(y.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect())
    }
}

pub fn normalize_descriptor(d: &Descriptor, stats: &NormalizationStats) -> Result<Vec<f64>> {
    stats.normalize(d.values())
}

pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

fn check_nll_inputs(y: &[f64], mu: &[f64], var: &[f64]) -> Result<()> {
    ensure!(
        y.len() == mu.len() && y.len() == var.len(),
        Validation,
        "length mismatch: y {}, mu {}, var {}",
        y.len(),
        mu.len(),
        var.len()
    );
    if let Some(i) = y.iter().position(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(Error::Validation(format!(
            "y[{i}] = {} lies outside (0, 1)",
            y[i]
        )));
    }
    if let Some(i) = var.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Validation(format!(
            "var[{i}] = {} is not positive",
            var[i]
        )));
    }
    Ok(())
}

/// Logistic-normal negative log-likelihood summed over dimensions.
pub fn nll_loss(y: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    check_nll_inputs(y, mu, var)?;
    Ok(y.iter()
        .zip(mu.iter().zip(var))
        .map(|(&y, (&m, &v))| {
            let r = logit(y) - m;
            0.5 * v.ln() + (y * (1.0 - y)).ln() + r * r / (2.0 * v)
        })
        .sum())
}

/// Loss together with `∂L/∂mu` and `∂L/∂var`.
pub fn nll_loss_and_grad(y: &[f64], mu: &[f64], var: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let loss = nll_loss(y, mu, var)?;
    let mut d_mu = Vec::with_capacity(y.len());
    let mut d_var = Vec::with_capacity(y.len());
    for ((&y, &m), &v) in y.iter().zip(mu).zip(var) {
        let r = logit(y) - m;
        d_mu.push(-r / v);
        d_var.push(0.5 / v - r * r / (2.0 * v * v));
    }
    Ok((loss, d_mu, d_var))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ_n max(0, margin + ‖a − p‖² − ‖a − n‖²)`.
pub fn triplet_loss(
    anchor: &Descriptor,
    positive: &Descriptor,
    negatives: &[Descriptor],
    margin: f64,
) -> Result<f64> {
    let negs: Vec<&[f64]> = negatives.iter().map(Descriptor::values).collect();
    Ok(triplet_loss_and_grad(anchor.values(), positive.values(), &negs, margin)?.0)
}

/// Gradients of the triplet hinge with respect to the anchor, positive and each negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn triplet_loss_and_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<(f64, TripletGrad)> {
    ensure!(
        margin > 0.0,
        Validation,
        "margin must be positive, got {margin}"
    );
    let d = anchor.len();
    ensure!(
        positive.len() == d && negatives.iter().all(|n| n.len() == d),
        Validation,
        "descriptor dimensions differ"
    );
    let dp = squared_distance(anchor, positive);
    let mut grad = TripletGrad {
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negatives: vec![vec![0.0; d]; negatives.len()],
    };
    let mut loss = 0.0;
    for (n, gn) in negatives.iter().zip(&mut grad.negatives) {
        let hinge = margin + dp - squared_distance(anchor, n);
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        for k in 0..d {
            let ap = anchor[k] - positive[k];
            let an = anchor[k] - n[k];
            grad.anchor[k] += 2.0 * ap - 2.0 * an;
            grad.positive[k] -= 2.0 * ap;
            gn[k] += 2.0 * an;
        }
    }
    Ok((loss, grad))
}

/// Stop once `patience` scores have followed the first occurrence of the best one.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some((best, _)) = history
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
            Some((_, b)) if v <= b => acc,
            _ => Some((i, v)),
        })
    else {
        return false;
    };
    history.len() - 1 - best >= patience.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VprTrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub negatives_per_anchor: usize,
}

impl Default for VprTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            lr_decay: 0.99,
            weight_decay: 1e-3,
            batch_size: 8,
            margin: 0.1,
            negatives_per_anchor: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UeTrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epsilon: f64,
}

impl Default for UeTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            lr_decay: 0.999,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 100,
            epsilon: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub vpr: VprTrainConfig,
    pub ue: UeTrainConfig,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vpr: VprTrainConfig::default(),
            ue: UeTrainConfig::default(),
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vpr.lr", self.vpr.lr),
            ("vpr.lr_decay", self.vpr.lr_decay),
            ("vpr.margin", self.vpr.margin),
            ("ue.lr", self.ue.lr),
            ("ue.lr_decay", self.ue.lr_decay),
        ] {
            ensure!(
                v > 0.0 && v.is_finite(),
                Config,
                "{name} must be positive, got {v}"
            );
        }
        ensure!(
            self.vpr.weight_decay >= 0.0 && self.ue.weight_decay >= 0.0,
            Config,
            "weight decay must be non-negative"
        );
        ensure!(
            self.vpr.batch_size >= 1 && self.ue.batch_size >= 1,
            Config,
            "batch sizes must be at least 1"
        );
        ensure!(self.patience >= 1, Config, "patience must be at least 1");
        Ok(())
    }
}

/// Optimiser state carried across retrieval epochs.
#[derive(Debug, Clone)]
pub struct VprTrainer {
    pub optimizer: Adam,
    pub epoch: u32,
    pub config: VprTrainConfig,
}

impl VprTrainer {
    pub fn new(param_count: usize, config: VprTrainConfig) -> Self {
        Self {
            optimizer: Adam::new(param_count, config.lr, config.weight_decay),
            epoch: 0,
            config,
        }
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VprEpochMetrics {
    pub epoch: u32,
    pub loss: f64,
    pub triplets: usize,
    pub steps: usize,
    pub skipped_queries: usize,
    /// Learning rate used during the epoch (before the end-of-epoch decay).
    pub lr: f64,
}

/// One pass over freshly mined triplets, batched, followed by the lr decay.
///
/// Every record in `view` must belong to the training split.
pub fn train_vpr_epoch<B: TrainableBackbone>(
    model: &mut B,
    trainer: &mut VprTrainer,
    store: &RecordStore,
    view: &DatasetView,
    negative_threshold: f64,
    seed: u64,
) -> Result<VprEpochMetrics> {
    if let Some(r) = view
        .queries
        .iter()
        .chain(&view.database)
        .find(|r| r.split != Split::Train)
    {
        return Err(Error::Validation(format!(
            "record {:?} from the {:?} split cannot be used for training",
            r.id, r.split
        )));
    }
    let epoch = trainer.epoch + 1;
    let mined = mine_triplets(
        view,
        trainer.config.negatives_per_anchor,
        negative_threshold,
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9),
    )?;
    if mined.triplets.is_empty() {
        return Err(Error::Config(format!(
            "no triplets could be mined ({} queries without a positive); \
             raise the positive threshold or run augmentation",
            mined.skipped_queries
        )));
    }
    let mut order: Vec<usize> = (0..mined.triplets.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed.wrapping_add(epoch as u64),
    ));
    let lr = trainer.lr();
    let margin = trainer.config.margin;
    let mut total = 0.0;
    let mut steps = 0;
    for batch in order.chunks(trainer.config.batch_size) {
        let mut grads = vec![0.0; model.params().len()];
        for &ti in batch {
            let t = &mined.triplets[ti];
            let (a, a_trace) = model.forward_trace(&*store.image(&t.anchor)?)?;
            let (p, p_trace) = model.forward_trace(&*store.image(&t.positive)?)?;
            let mut negs = Vec::with_capacity(t.negatives.len());
            for id in &t.negatives {
                negs.push(model.forward_trace(&*store.image(id)?)?);
            }
            let neg_vals: Vec<&[f64]> = negs.iter().map(|(d, _)| d.values()).collect();
            let (loss, g) = triplet_loss_and_grad(a.values(), p.values(), &neg_vals, margin)?;
            debug_assert!(loss.is_finite() && loss >= 0.0);
            total += loss;
            let scale = 1.0 / batch.len() as f64;
            let scaled = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
            model.backward(&a_trace, &scaled(&g.anchor), &mut grads);
            model.backward(&p_trace, &scaled(&g.positive), &mut grads);
            for ((_, tr), gn) in negs.iter().zip(&g.negatives) {
                model.backward(tr, &scaled(gn), &mut grads);
            }
        }
        trainer.optimizer.step(model.params_mut(), &grads);
        steps += 1;
    }
    trainer.optimizer.lr *= trainer.config.lr_decay;
    trainer.epoch = epoch;
    Ok(VprEpochMetrics {
        epoch,
        loss: total / mined.triplets.len() as f64,
        triplets: mined.triplets.len(),
        steps,
        skipped_queries: mined.skipped_queries,
        lr,
    })
}

/// One supervised example for the uncertainty network.
#[derive(Debug, Clone)]
pub struct UeSample {
    pub candidate_id: String,
    pub input: UeInput,
    pub target: Vec<f64>,
}

/// Treats each candidate record as an unseen pose: its references are the `N`
/// nearest *other* pool records and its target the normalised descriptor of
/// its real image.
pub fn build_ue_samples(
    ue: &UeNet,
    backbone: &dyn Backbone,
    store: &RecordStore,
    candidates: &[PlaceRecord],
    pool: &[PlaceRecord],
    cache: &FeatureCache,
    stats: &NormalizationStats,
) -> Result<Vec<UeSample>> {
    let n = ue.config().references;
    candidates
        .iter()
        .map(|c| {
            let others: Vec<PlaceRecord> = pool.iter().filter(|r| r.id != c.id).cloned().collect();
            ensure!(
                others.len() >= n,
                Config,
                "uncertainty training needs at least {} real records, found {}",
                n + 1,
                others.len() + 1
            );
            let refs = build_reference_set(&c.pose, &others, n, cache)?;
            let input = prepare_input(&refs, &c.pose, ue.config())?;
            let desc = backbone.embed(&*store.image(&c.id)?)?;
            Ok(UeSample {
                candidate_id: c.id.clone(),
                input,
                target: stats.normalize(desc.values())?,
            })
        })
        .collect()
}

pub fn mean_nll(ue: &UeNet, samples: &[UeSample]) -> Result<f64> {
    ensure!(!samples.is_empty(), Validation, "no samples to evaluate");
    let mut total = 0.0;
    for s in samples {
        let pred = ue.forward(&s.input)?;
        total += nll_loss(&s.target, &pred.mu, &pred.var)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeTrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub final_lr: f64,
}

/// Adam on the NLL with per-epoch lr decay; keeps the parameters of the epoch
/// with the lowest validation NLL and stops early after `patience` epochs
/// without improvement.
pub fn train_ue(
    ue: &mut UeNet,
    train: &[UeSample],
    val: &[UeSample],
    config: &UeTrainConfig,
    patience: usize,
    seed: u64,
) -> Result<UeTrainReport> {
    ensure!(
        !train.is_empty(),
        Config,
        "uncertainty training set is empty"
    );
    let val_set = if val.is_empty() { train } else { val };
    let mut opt = Adam::new(ue.params().len(), config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = mean_nll(ue, val_set)?;
    let mut best = (initial, 0usize, ue.params().to_vec());
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = vec![0.0; ue.params().len()];
            for &i in batch {
                let (loss, g) = ue.loss_and_grad(&train[i].input, &train[i].target)?;
                total += loss;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b / batch.len() as f64;
                }
            }
            opt.step(ue.params_mut(), &grads);
        }
        opt.lr *= config.lr_decay;
        train_loss.push(total / train.len() as f64);
        let v = mean_nll(ue, val_set)?;
        val_loss.push(v);
        if v < best.0 {
            best = (v, epoch, ue.params().to_vec());
        }
        let scores: Vec<f64> = val_loss.iter().map(|l| -l).collect();
        if early_stop(&scores, patience) {
            break;
        }
    }
    ue.params_mut().copy_from_slice(&best.2);
    Ok(UeTrainReport {
        train_loss,
        val_loss,
        initial_val_loss: initial,
        best_epoch: best.1,
        final_lr: opt.lr,
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u32,
    pub split: String,
    pub loss: Option<f64>,
    #[serde(rename = "recall@1")]
    pub recall_at_1: Option<f64>,
    pub lr: Option<f64>,
    pub triplets: Option<usize>,
    pub synthetic_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<serde_json::Value>,
}

/// Appends one JSON line to `path`.
pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{numeric_gradient, relative_error};
    use rand::Rng;

    #[test]
    fn worked_nll_values() {
        let l = nll_loss(&[0.5], &[0.0], &[1.0]).unwrap();
        assert!((l - 0.25f64.ln()).abs() < 1e-12);
        assert!((l + 1.386294).abs() < 1e-6);
        let e2 = std::f64::consts::E.powi(2);
        let l = nll_loss(&[0.5], &[0.0], &[e2]).unwrap();
        assert!((l + 0.386294).abs() < 1e-6);
    }

    #[test]
    fn nll_rejects_bad_inputs() {
        assert!(nll_loss(&[0.0], &[0.0], &[1.0]).is_err());
        assert!(nll_loss(&[1.0], &[0.0], &[1.0]).is_err());
        assert!(nll_loss(&[0.5], &[0.0], &[0.0]).is_err());
        assert!(nll_loss(&[0.5, 0.2], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=8 {
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.95)).collect();
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
            let (_, gm, gv) = nll_loss_and_grad(&y, &mu, &var).unwrap();
            let nm = numeric_gradient(&mu, 1e-6, |m| nll_loss(&y, m, &var).unwrap());
            let nv = numeric_gradient(&var, 1e-6, |v| nll_loss(&y, &mu, v).unwrap());
            assert!(relative_error(&gm, &nm) < 1e-5);
            assert!(relative_error(&gv, &nv) < 1e-5);
        }
    }

    #[test]
    fn stationary_in_mu_at_logit() {
        for &(y, v) in &[(0.3, 0.5), (0.9, 2.0), (0.5, 1e-3)] {
            let (_, gm, gv) = nll_loss_and_grad(&[y], &[logit(y)], &[v]).unwrap();
            assert_eq!(gm[0], 0.0);
            assert!(gv[0] > 0.0);
            assert!((gv[0] - 0.5 / v).abs() < 1e-12);
        }
    }

    #[test]
    fn normalisation_edges_and_round_trip() {
        let stats =
            NormalizationStats::fit(&[vec![0.0, -1.0, 5.0], vec![2.0, 1.0, 5.0]], 1e-3).unwrap();
        assert_eq!(
            stats.normalize(&[0.0, -1.0, 4.0]).unwrap(),
            vec![1e-3, 1e-3, 1e-3]
        );
        assert_eq!(
            stats.normalize(&[1.0, 0.0, 5.0]).unwrap(),
            vec![0.5, 0.5, 0.5]
        );
        let d = [0.3, 0.7, 5.2];
        let back = stats.denormalize(&stats.normalize(&d).unwrap()).unwrap();
        for (a, b) in back.iter().zip(d) {
            assert!((a - b).abs() < 1e-9);
        }
        let unfitted = NormalizationStats::default();
        assert!(matches!(unfitted.normalize(&[1.0]), Err(Error::State(_))));
    }

    #[test]
    fn triplet_cases() {
        let a = Descriptor::new(vec![1.0, 0.0]);
        let far = Descriptor::new(vec![-1.0, 0.0]);
        assert_eq!(triplet_loss(&a, &a, &[far.clone(), far], 0.1).unwrap(), 0.0);
        assert!(
            (triplet_loss(&a, &a, &[a.clone(), a.clone(), a.clone()], 0.1).unwrap() - 0.3).abs()
                < 1e-12
        );
        assert_eq!(triplet_loss(&a, &a, &[], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn triplet_matches_loop_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let v = |rng: &mut ChaCha8Rng| {
                (0..6)
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect::<Vec<f64>>()
            };
            let a = v(&mut rng);
            let p = v(&mut rng);
            let negs: Vec<Vec<f64>> = (0..4).map(|_| v(&mut rng)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
            let (loss, g) = triplet_loss_and_grad(&a, &p, &refs, 0.1).unwrap();
            let mut expected = 0.0;
            for n in &negs {
                let mut dap = 0.0;
                let mut dan = 0.0;
                for k in 0..6 {
                    dap += (a[k] - p[k]).powi(2);
                    dan += (a[k] - n[k]).powi(2);
                }
                expected += f64::max(0.0, 0.1 + dap - dan);
            }
            assert!((loss - expected).abs() < 1e-6);
            let na = numeric_gradient(&a, 1e-7, |x| {
                triplet_loss_and_grad(x, &p, &refs, 0.1).unwrap().0
            });
            assert!(relative_error(&g.anchor, &na) < 1e-4 || na.iter().all(|x| x.abs() < 1e-9));
        }
    }

    #[test]
    fn early_stop_rule() {
        let mut h = vec![0.5, 0.6];
        h.extend([0.6; 10]);
        assert!(early_stop(&h, 10));
        let improving: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert!(!early_stop(&improving, 10));
        // best followed by exactly patience − 1 entries keeps going
        let mut h = vec![0.1, 0.9];
        h.extend([0.2; 9]);
        assert!(!early_stop(&h, 10));
        h.push(0.2);
        assert!(early_stop(&h, 10));
        assert!(!early_stop(&[], 10));
    }

    #[test]
    fn metrics_lines_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = MetricsRecord {
            epoch: 1,
            split: "train".into(),
            loss: Some(0.5),
            recall_at_1: None,
            lr: Some(1e-5),
            triplets: Some(16),
            synthetic_count: 0,
            note: None,
        };
        append_metrics(&path, &rec).unwrap();
        append_metrics(&path, &rec).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(v.get("recall@1").is_some());
    }
}
