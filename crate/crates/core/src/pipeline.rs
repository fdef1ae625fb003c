//! End-to-end loop on top of the other modules: warm-up retrieval training,
//! uncertainty-network fitting, then alternating retrieval epochs and
//! augmentation rounds. Also hosts the procedural toy dataset and the sweeps
//! built on it.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augmentation_epoch, AugmentConfig, AugmentContext, CandidatePose};
use crate::backbone::{Backbone, DeskBackbone, DeskBackboneConfig, TrainableBackbone};
use crate::dataset::{
    organize, save_manifest, DatasetView, Organization, PlaceRecord, RecordStore, Retention, Role,
    Split,
};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{evaluate, RecallReport, DEFAULT_NS};
use crate::geometry::{Intrinsics, Pose};
use crate::nn::Activation;
use crate::raster::Image;
use crate::renderer::{psnr, OracleRenderer, Renderer, SceneSpec};
use crate::training::{
    append_metrics, build_ue_samples, early_stop, train_ue, train_vpr_epoch, MetricsRecord,
    NormalizationStats, TrainConfig, UeTrainReport, VprTrainer,
};
use crate::ue_net::{FeatureCache, UeConfig, UeNet};

/// Camera ring inside the procedural room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySceneConfig {
    pub scene: SceneSpec,
    pub scene_id: String,
    pub image_size: u32,
    pub fov_deg: f64,
    pub ring_radius: f64,
    pub camera_height: f64,
    pub train_poses: usize,
    /// Yaw jitter bound of training database poses.
    pub train_yaw_jitter_deg: f64,
    /// Training queries are perturbed like held-out queries.
    pub train_query_offsets: bool,
    pub val_queries: usize,
    pub test_queries: usize,
    /// Yaw offset bound of held-out queries relative to the outward direction.
    pub eval_yaw_jitter_deg: f64,
    pub eval_radial_jitter: f64,
    /// Query images get per-channel gains drawn from `1 ± appearance_shift`.
    pub appearance_shift: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            scene_id: "toy".into(),
            image_size: 32,
            fov_deg: 70.0,
            ring_radius: 2.5,
            camera_height: 1.5,
            train_poses: 72,
            train_yaw_jitter_deg: 5.0,
            train_query_offsets: true,
            val_queries: 60,
            test_queries: 120,
            eval_yaw_jitter_deg: 15.0,
            eval_radial_jitter: 0.15,
            appearance_shift: 0.6,
        }
    }
}

impl ToySceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        ensure!(
            self.image_size >= 8,
            Config,
            "toy images need at least 8 pixels per side"
        );
        ensure!(
            self.fov_deg > 0.0 && self.fov_deg < 170.0,
            Config,
            "field of view must lie in (0, 170) degrees"
        );
        let half = 0.5 * self.scene.size[0].min(self.scene.size[2]);
        ensure!(
            self.ring_radius + self.eval_radial_jitter < half,
            Config,
            "camera ring does not fit inside the room"
        );
        ensure!(
            self.camera_height > 0.0 && self.camera_height < self.scene.size[1],
            Config,
            "camera height must lie between floor and ceiling"
        );
        ensure!(
            self.train_poses >= 4,
            Config,
            "need at least 4 training poses"
        );
        ensure!(
            (0.0..1.0).contains(&self.appearance_shift),
            Config,
            "appearance_shift must lie in [0, 1)"
        );
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.fov_deg.to_radians(), self.image_size, self.image_size)
    }

    /// Camera on the ring at angle `phi`, offset radially by `dr`, looking
    /// outward rotated by `yaw` about the vertical axis.
    pub fn ring_pose(&self, phi: f64, dr: f64, yaw: f64) -> Pose {
        let r = self.ring_radius + dr;
        let position = Vector3::new(r * phi.sin(), -self.camera_height, r * phi.cos());
        look_along(position, phi + yaw)
    }
}

/// Level camera at `position` whose optical axis is `(sin h, 0, cos h)`.
pub fn look_along(position: Vector3<f64>, heading: f64) -> Pose {
    let forward = Vector3::new(heading.sin(), 0.0, heading.cos());
    let down = Vector3::y();
    let right = down.cross(&forward);
    Pose::new(Matrix3::from_columns(&[right, down, forward]), position)
        .expect("orthonormal by construction")
}

/// Rendered toy records with their images loaded into a store.
#[derive(Debug)]
pub struct ToyDataset {
    pub store: RecordStore,
    pub intrinsics: Intrinsics,
    pub config: ToySceneConfig,
}

fn toy_record(
    cfg: &ToySceneConfig,
    intr: &Intrinsics,
    id: String,
    pose: Pose,
    split: Split,
    role: Role,
) -> PlaceRecord {
    PlaceRecord {
        image_path: PathBuf::from(format!("{}.png", id.replace('/', "_"))),
        id,
        pose,
        intrinsics: *intr,
        is_synthetic: false,
        scene_id: cfg.scene_id.clone(),
        split,
        role,
        epoch_added: 0,
    }
}

/// Training poses evenly spaced on the ring with alternating database/query
/// roles; validation and test queries at random ring angles with larger yaw
/// offsets. Real images are noiseless renders.
pub fn toy_records(cfg: &ToySceneConfig, seed: u64) -> Result<(Vec<PlaceRecord>, Intrinsics)> {
    cfg.validate()?;
    let intr = cfg.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let jitter = cfg.train_yaw_jitter_deg.to_radians();
    let eval_yaw = cfg.eval_yaw_jitter_deg.to_radians();
    for i in 0..cfg.train_poses {
        let phi = 2.0 * PI * i as f64 / cfg.train_poses as f64;
        let role = if i % 2 == 0 {
            Role::Database
        } else {
            Role::Query
        };
        let (dr, yaw) = if role == Role::Query && cfg.train_query_offsets {
            (
                rng.random_range(-1.0..=1.0) * cfg.eval_radial_jitter,
                rng.random_range(-1.0..=1.0) * eval_yaw,
            )
        } else {
            (0.0, rng.random_range(-1.0..=1.0) * jitter)
        };
        let id = format!("{}/train/{i:03}", cfg.scene_id);
        out.push(toy_record(
            cfg,
            &intr,
            id,
            cfg.ring_pose(phi, dr, yaw),
            Split::Train,
            role,
        ));
    }
    for (split, count, name) in [
        (Split::Val, cfg.val_queries, "val"),
        (Split::Test, cfg.test_queries, "test"),
    ] {
        for i in 0..count {
            let phi = rng.random_range(0.0..2.0 * PI);
            let dr = rng.random_range(-1.0..=1.0) * cfg.eval_radial_jitter;
            let yaw = rng.random_range(-1.0..=1.0) * eval_yaw;
            let id = format!("{}/{name}/{i:03}", cfg.scene_id);
            out.push(toy_record(
                cfg,
                &intr,
                id,
                cfg.ring_pose(phi, dr, yaw),
                split,
                Role::Query,
            ));
        }
    }
    Ok((out, intr))
}

/// Clean render for database records; query records get a colour shift
/// seeded by their position in the record list.
fn toy_image(
    cfg: &ToySceneConfig,
    renderer: &OracleRenderer,
    record: &PlaceRecord,
    seed: u64,
    index: usize,
) -> Image {
    let mut image = renderer.render_pose(&record.pose, &record.intrinsics);
    if record.role == Role::Query && cfg.appearance_shift > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (index as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407),
        );
        let gain: [f32; 3] = std::array::from_fn(|_| {
            (1.0 + cfg.appearance_shift * rng.random_range(-1.0..=1.0)) as f32
        });
        for px in image.data_mut().chunks_exact_mut(3) {
            for (v, g) in px.iter_mut().zip(gain) {
                *v = (*v * g).clamp(0.0, 1.0);
            }
        }
    }
    image
}

pub fn toy_dataset(cfg: &ToySceneConfig, seed: u64) -> Result<ToyDataset> {
    let (records, intrinsics) = toy_records(cfg, seed)?;
    let renderer = OracleRenderer::new(cfg.scene.clone(), cfg.scene.seed, 0.0)?;
    let mut store = RecordStore::new();
    for (i, r) in records.into_iter().enumerate() {
        let image = toy_image(cfg, &renderer, &r, seed, i);
        store.push(r, Some(image))?;
    }
    Ok(ToyDataset {
        store,
        intrinsics,
        config: cfg.clone(),
    })
}

/// Writes the toy images as PNGs next to a `manifest.json`; returns the manifest path.
pub fn write_toy_dataset(cfg: &ToySceneConfig, seed: u64, dir: &Path) -> Result<PathBuf> {
    let (records, _) = toy_records(cfg, seed)?;
    let renderer = OracleRenderer::new(cfg.scene.clone(), cfg.scene.seed, 0.0)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, r) in records.iter().enumerate() {
        toy_image(cfg, &renderer, r, seed, i).save_png(&dir.join(&r.image_path))?;
    }
    let path = dir.join("manifest.json");
    save_manifest(&path, &cfg.scene_id, &records)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backbone: DeskBackboneConfig,
    pub ue: UeConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub organization: Organization,
    pub positive_threshold: f64,
    pub negative_threshold: f64,
    /// Retrieval epochs before the uncertainty network is fitted.
    pub warmup_epochs: u32,
    /// Retrieval epochs after warm-up, each followed by an augmentation round.
    pub epochs: u32,
    /// `false` skips augmentation entirely (regular training).
    pub augmentation: bool,
    pub ns: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backbone: DeskBackboneConfig::default(),
            ue: UeConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            organization: Organization::RealQuerySynthDb,
            positive_threshold: 0.5,
            negative_threshold: 1.0,
            warmup_epochs: 3,
            epochs: 30,
            augmentation: true,
            ns: DEFAULT_NS.to_vec(),
        }
    }
}

impl PipelineConfig {
    /// Sizes matched to the 32-pixel toy scene.
    pub fn toy() -> Self {
        let mut cfg = Self {
            backbone: DeskBackboneConfig {
                input_size: 32,
                stage_channels: vec![8, 16, 16],
                pool_grid: 2,
                descriptor_dim: 32,
                normalize: true,
                activation: Activation::Silu,
                seed: 0,
            },
            ue: UeConfig {
                descriptor_dim: 32,
                fused_dim: 32,
                feat_hidden: vec![32, 32],
                out_hidden: vec![64],
                bands: 4,
                ..UeConfig::default()
            },
            warmup_epochs: 4,
            epochs: 15,
            ..Self::default()
        };
        cfg.train.vpr.lr = 3e-3;
        cfg.train.vpr.negatives_per_anchor = 15;
        cfg.train.ue.lr = 1e-3;
        cfg.train.ue.epochs = 60;
        cfg.train.patience = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ue.validate()?;
        self.train.validate()?;
        if self.augmentation {
            self.augment.validate()?;
        }
        ensure!(
            self.positive_threshold > 0.0,
            Config,
            "positive_threshold must be positive"
        );
        ensure!(
            self.negative_threshold > self.positive_threshold,
            Config,
            "negative_threshold must exceed positive_threshold"
        );
        ensure!(
            self.ue.descriptor_dim == self.backbone.descriptor_dim,
            Config,
            "ue.descriptor_dim ({}) must equal backbone.descriptor_dim ({})",
            self.ue.descriptor_dim,
            self.backbone.descriptor_dim
        );
        ensure!(
            self.augment.references == self.ue.references,
            Config,
            "augment.references ({}) must equal ue.references ({})",
            self.augment.references,
            self.ue.references
        );
        ensure!(
            !self.ns.is_empty() && self.ns.iter().all(|n| *n >= 1),
            Config,
            "ns must be non-empty and positive"
        );
        Ok(())
    }
}

/// Fitted uncertainty network with the artefacts augmentation needs.
#[derive(Debug, Clone)]
pub struct UeStage {
    pub net: UeNet,
    pub stats: NormalizationStats,
    /// Feature maps of the real training records under the frozen backbone.
    pub cache: FeatureCache,
    pub report: UeTrainReport,
}

/// Trains the uncertainty network on real data with `backbone` frozen:
/// training candidates are the real training records, validation candidates
/// the real validation records, references always come from the training records.
pub fn fit_ue(
    backbone: &dyn Backbone,
    store: &RecordStore,
    ue_config: &UeConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<UeStage> {
    ensure!(
        ue_config.descriptor_dim == backbone.descriptor_dim(),
        Validation,
        "uncertainty network expects {}-d descriptors but the backbone produces {}",
        ue_config.descriptor_dim,
        backbone.descriptor_dim()
    );
    let pool = store.real(Split::Train);
    let val = store.real(Split::Val);
    let mut cache = FeatureCache::new();
    cache.extend_from(backbone, store, &pool)?;
    let mut descriptors = Vec::with_capacity(pool.len());
    for r in &pool {
        descriptors.push(backbone.embed(&*store.image(&r.id)?)?.values().to_vec());
    }
    let stats = NormalizationStats::fit(&descriptors, train.ue.epsilon)?;
    let mut net = UeNet::new(
        UeConfig {
            seed: ue_config.seed ^ seed,
            ..ue_config.clone()
        },
        backbone.feature_shape(),
    )?;
    let train_samples = build_ue_samples(&net, backbone, store, &pool, &pool, &cache, &stats)?;
    let val_samples = build_ue_samples(&net, backbone, store, &val, &pool, &cache, &stats)?;
    let report = train_ue(
        &mut net,
        &train_samples,
        &val_samples,
        &train.ue,
        train.patience,
        seed,
    )?;
    Ok(UeStage {
        net,
        stats,
        cache,
        report,
    })
}

/// Invariant checks accumulated over the augmentation epochs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantLog {
    pub epochs_checked: usize,
    /// Synthetic queries or real database entries in a real-query/synthetic-database view.
    pub organization_violations: usize,
    /// Synthetic records from earlier epochs under current-epoch-only retention.
    pub stale_records: usize,
    /// Epochs where insertions differ from failures × K.
    pub insertion_mismatches: usize,
    /// Inserted synthetic records that are not flagged or dated correctly.
    pub record_flag_violations: usize,
}

impl InvariantLog {
    pub fn clean(&self) -> bool {
        self.organization_violations == 0
            && self.stale_records == 0
            && self.insertion_mismatches == 0
            && self.record_flag_violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub loss: f64,
    pub triplets: usize,
    pub organization: Organization,
    pub val_recall_at_1: f64,
    pub synthetic_count: usize,
    pub failures: usize,
    pub inserted: usize,
    /// Mean PSNR of this epoch's renders against clean renders, if any.
    pub psnr: Option<f64>,
    /// Row-major poses rendered this epoch.
    #[serde(skip)]
    pub selected: Vec<[f64; 16]>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub backbone: DeskBackbone,
    pub ue: Option<UeStage>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 = end of warm-up).
    pub best_epoch: u32,
    pub best_val_recall: f64,
    pub test: RecallReport,
    pub invariants: InvariantLog,
    pub mean_psnr: Option<f64>,
    pub last_candidates: Vec<CandidatePose>,
}

/// State after the warm-up epochs, shareable between runs of the same seed.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub backbone: DeskBackbone,
    pub trainer: VprTrainer,
    pub val_history: Vec<f64>,
    pub ue: Option<UeStage>,
}

/// Environment a pipeline run operates in.
pub struct PipelineEnv<'a> {
    pub renderer: &'a dyn Renderer,
    /// Clean renderer used only to measure render quality.
    pub reference_renderer: Option<&'a dyn Renderer>,
    pub intrinsics: Intrinsics,
    pub scene_id: &'a str,
    pub metrics_path: Option<&'a Path>,
}

fn val_recall(cfg: &PipelineConfig, backbone: &dyn Backbone, store: &RecordStore) -> Result<f64> {
    let val = store.real(Split::Val);
    if val.is_empty() {
        return Ok(0.0);
    }
    let db = store.real(Split::Train);
    let report = evaluate(backbone, store, &val, &db, cfg.positive_threshold, &[1])?;
    Ok(report.at(1).unwrap_or(0.0))
}

fn log_metrics(env: &PipelineEnv<'_>, record: MetricsRecord) -> Result<()> {
    match env.metrics_path {
        Some(path) => append_metrics(path, &record),
        None => Ok(()),
    }
}

/// Warm-up retrieval epochs under the regular organisation, then (if
/// `fit_uncertainty`) the uncertainty network on the frozen backbone.
pub fn warm_start(
    cfg: &PipelineConfig,
    store: &RecordStore,
    env: &PipelineEnv<'_>,
    fit_uncertainty: bool,
    seed: u64,
) -> Result<WarmStart> {
    cfg.validate()?;
    let mut backbone = DeskBackbone::new(DeskBackboneConfig {
        seed: cfg.backbone.seed ^ seed,
        ..cfg.backbone.clone()
    })?;
    let mut trainer = VprTrainer::new(backbone.params().len(), cfg.train.vpr.clone());
    let real = store.real(Split::Train);
    let view = organize(&real, &[], Organization::Regular, cfg.positive_threshold)?;
    let mut val_history = Vec::new();
    for _ in 0..cfg.warmup_epochs {
        let m = train_vpr_epoch(
            &mut backbone,
            &mut trainer,
            store,
            &view,
            cfg.negative_threshold,
            seed,
        )?;
        let r1 = val_recall(cfg, &backbone, store)?;
        val_history.push(r1);
        log_metrics(
            env,
            MetricsRecord {
                epoch: m.epoch,
                split: "train".into(),
                loss: Some(m.loss),
                recall_at_1: Some(r1),
                lr: Some(m.lr),
                triplets: Some(m.triplets),
                synthetic_count: 0,
                note: Some(serde_json::json!({"stage": "warmup", "seed": seed})),
            },
        )?;
    }
    let ue = if fit_uncertainty {
        let stage = fit_ue(&backbone, store, &cfg.ue, &cfg.train, seed)?;
        log_metrics(
            env,
            MetricsRecord {
                epoch: trainer.epoch,
                split: "ue".into(),
                loss: stage
                    .report
                    .val_loss
                    .get(stage.report.best_epoch.saturating_sub(1))
                    .copied(),
                recall_at_1: None,
                lr: Some(stage.report.final_lr),
                triplets: None,
                synthetic_count: 0,
                note: Some(serde_json::json!({
                    "initial_val_nll": stage.report.initial_val_loss,
                    "best_epoch": stage.report.best_epoch,
                    "seed": seed,
                })),
            },
        )?;
        Some(stage)
    } else {
        None
    };
    Ok(WarmStart {
        backbone,
        trainer,
        val_history,
        ue,
    })
}

fn training_view(cfg: &PipelineConfig, store: &RecordStore) -> Result<(DatasetView, Organization)> {
    let real = store.real(Split::Train);
    let synth = store.synthetic();
    let mode = if cfg.organization == Organization::RealQuerySynthDb && !synth.is_empty() {
        Organization::RealQuerySynthDb
    } else {
        Organization::Regular
    };
    Ok((organize(&real, &synth, mode, cfg.positive_threshold)?, mode))
}

fn check_view(view: &DatasetView, mode: Organization, log: &mut InvariantLog) {
    if mode == Organization::RealQuerySynthDb {
        log.organization_violations += view.queries.iter().filter(|r| r.is_synthetic).count();
        log.organization_violations += view.database.iter().filter(|r| !r.is_synthetic).count();
    }
}

/// Runs the post-warm-up loop on `store` and evaluates the best model on the
/// test queries against every real training record.
pub fn continue_pipeline(
    cfg: &PipelineConfig,
    warm: WarmStart,
    store: &mut RecordStore,
    env: &PipelineEnv<'_>,
    seed: u64,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let WarmStart {
        mut backbone,
        mut trainer,
        mut val_history,
        ue,
    } = warm;
    if cfg.augmentation && cfg.augment.use_ue {
        ensure!(
            ue.is_some(),
            Config,
            "uncertainty scoring is enabled but the warm start carries no trained UE network"
        );
    }
    let real_train = store.real(Split::Train);
    let mut best_val = val_history.last().copied().unwrap_or(f64::NEG_INFINITY);
    let mut best = (trainer.epoch, backbone.params().to_vec());
    let mut invariants = InvariantLog::default();
    let mut epochs = Vec::new();
    let mut psnr_all = Vec::new();
    let mut last_candidates = Vec::new();
    let empty_cache = FeatureCache::new();
    for _ in 0..cfg.epochs {
        let (view, mode) = training_view(cfg, store)?;
        check_view(&view, mode, &mut invariants);
        let m = train_vpr_epoch(
            &mut backbone,
            &mut trainer,
            store,
            &view,
            cfg.negative_threshold,
            seed,
        )?;
        let epoch = m.epoch;
        let r1 = val_recall(cfg, &backbone, store)?;
        val_history.push(r1);
        if r1 > best_val {
            best_val = r1;
            best = (epoch, backbone.params().to_vec());
        }
        let mut log = EpochLog {
            epoch,
            loss: m.loss,
            triplets: m.triplets,
            organization: mode,
            val_recall_at_1: r1,
            synthetic_count: store.synthetic_count(),
            failures: 0,
            inserted: 0,
            psnr: None,
            selected: Vec::new(),
        };
        if cfg.augmentation {
            let (detect_view, detect_mode) = training_view(cfg, store)?;
            check_view(&detect_view, detect_mode, &mut invariants);
            let ctx = AugmentContext {
                model: &backbone,
                ue: ue.as_ref().map(|s| &s.net),
                reference_features: ue.as_ref().map_or(&empty_cache, |s| &s.cache),
                reference_pool: &real_train,
                renderer: env.renderer,
                intrinsics: env.intrinsics,
                scene_id: env.scene_id,
                positive_threshold: cfg.positive_threshold,
            };
            let before = store.synthetic_count();
            let summary = augmentation_epoch(&ctx, store, &detect_view, &cfg.augment, epoch, seed)?;
            invariants.epochs_checked += 1;
            if summary.inserted != summary.failures.len() * cfg.augment.top_k {
                invariants.insertion_mismatches += 1;
            }
            let fresh: Vec<PlaceRecord> = store
                .synthetic()
                .into_iter()
                .filter(|r| r.epoch_added == epoch)
                .collect();
            invariants.record_flag_violations += fresh
                .iter()
                .filter(|r| r.split != Split::Train || r.role != Role::Database)
                .count();
            if fresh.len() != summary.inserted {
                invariants.record_flag_violations += 1;
            }
            if cfg.augment.retention == Retention::CurrentEpochOnly {
                invariants.stale_records += store
                    .synthetic()
                    .iter()
                    .filter(|r| r.epoch_added < epoch)
                    .count();
            } else if store.synthetic_count() != before + summary.inserted {
                invariants.record_flag_violations += 1;
            }
            let (view_after, mode_after) = training_view(cfg, store)?;
            check_view(&view_after, mode_after, &mut invariants);
            if let Some(reference) = env.reference_renderer {
                if !fresh.is_empty() {
                    let poses: Vec<Pose> = fresh.iter().map(|r| r.pose).collect();
                    let req = crate::renderer::RenderRequest::new(
                        poses,
                        env.intrinsics,
                        env.scene_id,
                        "reference",
                    )?;
                    let clean = reference.render(&req)?;
                    let mut values = Vec::with_capacity(fresh.len());
                    for (r, c) in fresh.iter().zip(&clean) {
                        values.push(psnr(&*store.image(&r.id)?, &c.image)?);
                    }
                    log.psnr = Some(values.iter().sum::<f64>() / values.len() as f64);
                    psnr_all.extend(values);
                }
            }
            log.failures = summary.failures.len();
            log.inserted = summary.inserted;
            log.synthetic_count = store.synthetic_count();
            log.selected = fresh.iter().map(|r| r.pose.to_row_major()).collect();
            last_candidates = summary.candidates;
        }
        log_metrics(
            env,
            MetricsRecord {
                epoch,
                split: "train".into(),
                loss: Some(m.loss),
                recall_at_1: Some(r1),
                lr: Some(m.lr),
                triplets: Some(m.triplets),
                synthetic_count: log.synthetic_count,
                note: Some(serde_json::json!({
                    "organization": mode,
                    "failures": log.failures,
                    "inserted": log.inserted,
                    "psnr": log.psnr,
                    "seed": seed,
                })),
            },
        )?;
        epochs.push(log);
        if early_stop(&val_history, cfg.train.patience) {
            break;
        }
    }
    backbone.params_mut().copy_from_slice(&best.1);
    let test = evaluate(
        &backbone,
        store,
        &store.real(Split::Test),
        &real_train,
        cfg.positive_threshold,
        &cfg.ns,
    )?;
    log_metrics(
        env,
        MetricsRecord {
            epoch: best.0,
            split: "test".into(),
            loss: None,
            recall_at_1: test.at(1),
            lr: None,
            triplets: None,
            synthetic_count: store.synthetic_count(),
            note: Some(serde_json::json!({"best_epoch": best.0, "seed": seed})),
        },
    )?;
    let mean_psnr =
        (!psnr_all.is_empty()).then(|| psnr_all.iter().sum::<f64>() / psnr_all.len() as f64);
    Ok(PipelineOutcome {
        backbone,
        ue,
        epochs,
        best_epoch: best.0,
        best_val_recall: best_val,
        test,
        invariants,
        mean_psnr,
        last_candidates,
    })
}

/// Warm start followed by the main loop.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    store: &mut RecordStore,
    env: &PipelineEnv<'_>,
    seed: u64,
) -> Result<PipelineOutcome> {
    let needs_ue = cfg.augmentation && cfg.augment.use_ue;
    let warm = warm_start(cfg, store, env, needs_ue, seed)?;
    continue_pipeline(cfg, warm, store, env, seed)
}

/// One condition of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub organization: Organization,
    pub augmentation: bool,
    pub candidates: usize,
    pub use_ue: bool,
    pub retention: Retention,
    pub noise_level: f64,
}

impl Variant {
    pub fn regular() -> Self {
        Self {
            label: "regular".into(),
            organization: Organization::Regular,
            augmentation: false,
            candidates: AugmentConfig::default().candidates,
            use_ue: false,
            retention: Retention::KeepAll,
            noise_level: 0.0,
        }
    }

    pub fn ugna(organization: Organization) -> Self {
        let label = match organization {
            Organization::Regular => "ugna_regular_org",
            Organization::RealQuerySynthDb => "ugna_real_query_synth_db",
        };
        Self {
            label: label.into(),
            organization,
            augmentation: true,
            use_ue: true,
            ..Self::regular()
        }
    }

    fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        cfg.organization = self.organization;
        cfg.augmentation = self.augmentation && self.candidates > 0;
        cfg.augment.candidates = self.candidates;
        cfg.augment.use_ue = self.use_ue;
        cfg.augment.retention = self.retention;
        if cfg.augmentation {
            cfg.augment.top_k = cfg.augment.top_k.min(self.candidates);
        }
        cfg
    }
}

/// Regular training, augmentation with the regular organisation, augmentation
/// with the real-query/synthetic-database organisation.
pub fn comparison_variants() -> Vec<Variant> {
    vec![
        Variant::regular(),
        Variant::ugna(Organization::Regular),
        Variant::ugna(Organization::RealQuerySynthDb),
    ]
}

/// `M ∈ {0, 10, 20, 30}`; `M = 0` is regular training.
pub fn m_sweep_variants() -> Vec<Variant> {
    [0usize, 10, 20, 30]
        .into_iter()
        .map(|m| Variant {
            label: format!("M={m}"),
            candidates: m,
            ..Variant::ugna(Organization::RealQuerySynthDb)
        })
        .collect()
}

/// The `use_ue × retention` grid.
pub fn ablation_variants() -> Vec<Variant> {
    let mut out = Vec::new();
    for use_ue in [false, true] {
        for retention in [Retention::CurrentEpochOnly, Retention::KeepAll] {
            let r = match retention {
                Retention::KeepAll => "keep_all",
                Retention::CurrentEpochOnly => "current_epoch_only",
            };
            out.push(Variant {
                label: format!("ue={use_ue},{r}"),
                use_ue,
                retention,
                ..Variant::ugna(Organization::RealQuerySynthDb)
            });
        }
    }
    out
}

/// Renderer noise levels `{0, 0.05, 0.15}`.
pub fn noise_variants() -> Vec<Variant> {
    [0.0, 0.05, 0.15]
        .into_iter()
        .map(|noise_level| Variant {
            label: format!("noise={noise_level}"),
            noise_level,
            ..Variant::ugna(Organization::RealQuerySynthDb)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub seed: u64,
    pub test: RecallReport,
    pub best_epoch: u32,
    pub mean_psnr: Option<f64>,
    pub synthetic_count: usize,
    pub invariants: InvariantLog,
    pub epochs: Vec<EpochLog>,
}

/// Runs every variant for every seed on freshly generated toy data. Warm-up
/// and the uncertainty network are shared between the variants of one seed.
pub fn run_toy_sweep(
    base: &PipelineConfig,
    toy: &ToySceneConfig,
    variants: &[Variant],
    seeds: &[u64],
    metrics_dir: Option<&Path>,
) -> Result<Vec<VariantResult>> {
    base.validate()?;
    toy.validate()?;
    ensure!(
        !variants.is_empty() && !seeds.is_empty(),
        Config,
        "sweep needs variants and seeds"
    );
    for v in variants {
        v.apply(base).validate()?;
    }
    let needs_ue = variants
        .iter()
        .any(|v| v.augmentation && v.candidates > 0 && v.use_ue);
    let clean = OracleRenderer::new(toy.scene.clone(), toy.scene.seed, 0.0)?;
    let mut results = Vec::new();
    for &seed in seeds {
        let data = toy_dataset(toy, seed)?;
        let quiet = PipelineEnv {
            renderer: &clean,
            reference_renderer: None,
            intrinsics: data.intrinsics,
            scene_id: &toy.scene_id,
            metrics_path: None,
        };
        let warm = warm_start(base, &data.store, &quiet, needs_ue, seed)?;
        for v in variants {
            let cfg = v.apply(base);
            let mut store = toy_dataset(toy, seed)?.store;
            let noisy =
                OracleRenderer::new(toy.scene.clone(), toy.scene.seed ^ seed, v.noise_level)?;
            let metrics_path =
                metrics_dir.map(|d| d.join(format!("{}_seed{seed}.jsonl", sanitize(&v.label))));
            if let Some(p) = &metrics_path {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let _ = fs::remove_file(p);
            }
            let env = PipelineEnv {
                renderer: &noisy,
                reference_renderer: Some(&clean),
                intrinsics: data.intrinsics,
                scene_id: &toy.scene_id,
                metrics_path: metrics_path.as_deref(),
            };
            let out = continue_pipeline(&cfg, warm.clone(), &mut store, &env, seed)?;
            results.push(VariantResult {
                label: v.label.clone(),
                seed,
                test: out.test,
                best_epoch: out.best_epoch,
                mean_psnr: out.mean_psnr,
                synthetic_count: store.synthetic_count(),
                invariants: out.invariants,
                epochs: out.epochs,
            });
        }
    }
    Ok(results)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Averages each variant's recall over seeds, keeping variant order.
pub fn mean_by_label(results: &[VariantResult]) -> Vec<(String, RecallReport)> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let runs: Vec<&VariantResult> = results.iter().filter(|r| r.label == label).collect();
            let mut report = runs[0].test.clone();
            for (n, v) in report.recall_at.iter_mut() {
                *v = runs
                    .iter()
                    .map(|r| r.test.at(*n).unwrap_or(0.0))
                    .sum::<f64>()
                    / runs.len() as f64;
            }
            (label.to_string(), report)
        })
        .collect()
}

/// `label,psnr_db,recall_at_1` rows averaged over seeds.
pub fn psnr_table(results: &[VariantResult]) -> Vec<(String, f64, f64)> {
    mean_by_label(results)
        .into_iter()
        .map(|(label, report)| {
            let runs: Vec<f64> = results
                .iter()
                .filter(|r| r.label == label)
                .filter_map(|r| r.mean_psnr)
                .collect();
            let p = if runs.is_empty() {
                f64::NAN
            } else {
                runs.iter().sum::<f64>() / runs.len() as f64
            };
            (label, p, report.at(1).unwrap_or(0.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_cameras_look_outward_and_level() {
        let cfg = ToySceneConfig::default();
        let pose = cfg.ring_pose(0.3, 0.0, 0.0);
        let t = pose.translation();
        let outward = Vector3::new(t.x, 0.0, t.z).normalize();
        assert!((pose.forward() - outward).norm() < 1e-12);
        assert!((t.y + cfg.camera_height).abs() < 1e-12);
    }

    #[test]
    fn toy_records_have_expected_layout() {
        let cfg = ToySceneConfig::default();
        let (records, intr) = toy_records(&cfg, 4).unwrap();
        assert_eq!(
            records.len(),
            cfg.train_poses + cfg.val_queries + cfg.test_queries
        );
        assert_eq!(intr.width, cfg.image_size);
        let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).collect();
        assert_eq!(
            train.iter().filter(|r| r.role == Role::Query).count(),
            cfg.train_poses / 2
        );
        let again = toy_records(&cfg, 4).unwrap().0;
        assert_eq!(records, again);
    }

    #[test]
    fn toy_views_see_walls() {
        let cfg = ToySceneConfig::default();
        let data = toy_dataset(&cfg, 0).unwrap();
        let rec = &data.store.records()[0];
        let ids = cfg.scene.texture_ids(&rec.pose, &data.intrinsics);
        assert!(ids.iter().all(|t| t.is_some()));
        let distinct: std::collections::HashSet<_> = ids.into_iter().collect();
        assert!(distinct.len() > 4);
    }

    #[test]
    fn variant_grids_have_expected_shapes() {
        assert_eq!(comparison_variants().len(), 3);
        let m: Vec<usize> = m_sweep_variants().iter().map(|v| v.candidates).collect();
        assert_eq!(m, [0, 10, 20, 30]);
        assert_eq!(ablation_variants().len(), 4);
        assert_eq!(noise_variants().len(), 3);
        let base = PipelineConfig::toy();
        assert!(!m_sweep_variants()[0].apply(&base).augmentation);
    }

    #[test]
    fn toy_config_validates() {
        PipelineConfig::toy().validate().unwrap();
        let mut bad = PipelineConfig::toy();
        bad.ue.descriptor_dim = 8;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
