use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;
use serde::Serialize;
use vpr_augment::augment::{augmentation_epoch, write_candidate_diagnostics, AugmentContext};
use vpr_augment::backbone::{Backbone, DeskBackbone};
use vpr_augment::dataset::{
    import_transforms, load_manifest, organize, save_manifest, ImportOptions, Organization,
    RecordStore, Split,
};
use vpr_augment::evaluation::{emit_report, evaluate, LabeledReport, RecallReport, ReportFormat};
use vpr_augment::geometry::Intrinsics;
use vpr_augment::pipeline::{
    ablation_variants, comparison_variants, fit_ue, m_sweep_variants, mean_by_label,
    noise_variants, psnr_table, run_pipeline, run_toy_sweep, toy_dataset, write_toy_dataset,
    PipelineEnv,
};
use vpr_augment::renderer::{ExternalRenderer, OracleRenderer, Renderer};
use vpr_augment::training::{append_metrics, MetricsRecord};
use vpr_augment::ue_net::{FeatureCache, UeNet};
use vpr_augment::{Error, Result};

use crate::config::{RendererKind, RunConfig, SweepMode};

struct Data {
    store: RecordStore,
    intrinsics: Intrinsics,
    scene_id: String,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    match &cfg.paths.manifest {
        None => {
            let toy = toy_dataset(&cfg.toy, cfg.seed)?;
            Ok(Data {
                store: toy.store,
                intrinsics: toy.intrinsics,
                scene_id: cfg.toy.scene_id.clone(),
            })
        }
        Some(path) => {
            let records = load_manifest(path)?;
            let first = records.first().ok_or_else(|| {
                Error::Config(format!("manifest {} has no records", path.display()))
            })?;
            let intrinsics = first.intrinsics;
            let scene_id = first.scene_id.clone();
            let mut store = RecordStore::from_records(records)?;
            store.load_images()?;
            Ok(Data {
                store,
                intrinsics,
                scene_id,
            })
        }
    }
}

fn build_renderer(cfg: &RunConfig) -> Result<Box<dyn Renderer>> {
    Ok(match cfg.renderer.kind {
        RendererKind::Oracle => Box::new(OracleRenderer::new(
            cfg.toy.scene.clone(),
            cfg.toy.scene.seed ^ cfg.seed,
            cfg.renderer.noise_level,
        )?),
        RendererKind::External => Box::new(ExternalRenderer::new(
            cfg.paths.exchange_dir.clone().expect("checked by validate"),
            Duration::from_secs_f64(cfg.renderer.timeout_secs),
        )),
    })
}

/// Clean oracle renders for PSNR; none for an external synthesizer.
fn reference_renderer(cfg: &RunConfig) -> Result<Option<OracleRenderer>> {
    match cfg.renderer.kind {
        RendererKind::Oracle => Ok(Some(OracleRenderer::new(
            cfg.toy.scene.clone(),
            cfg.toy.scene.seed,
            0.0,
        )?)),
        RendererKind::External => Ok(None),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates the output directory and records the resolved config.
fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.paths.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let path = out.join("run_config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))?;
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
        }
        _ => Ok(()),
    }
}

/// Truncates a metrics stream left by an earlier run.
fn fresh_metrics(out: &Path, name: &str) -> Result<PathBuf> {
    let path = out.join(name);
    if path.exists() {
        fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
    }
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_err(path, e))
}

fn load_backbone(cfg: &RunConfig) -> Result<DeskBackbone> {
    let backbone = DeskBackbone::load_checkpoint(&cfg.paths.vpr_checkpoint())?;
    if backbone.descriptor_dim() != cfg.pipeline.backbone.descriptor_dim {
        return Err(Error::Validation(format!(
            "checkpoint {} produces {}-d descriptors but the run expects {}",
            cfg.paths.vpr_checkpoint().display(),
            backbone.descriptor_dim(),
            cfg.pipeline.backbone.descriptor_dim
        )));
    }
    Ok(backbone)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    seed: u64,
    best_epoch: u32,
    best_val_recall_at_1: f64,
    test: &'a RecallReport,
    mean_psnr: Option<f64>,
    synthetic_count: usize,
    invariants_clean: bool,
}

pub fn train_vpr(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut pipeline = cfg.pipeline.clone();
    pipeline.augmentation = false;
    pipeline.organization = Organization::Regular;
    pipeline.validate()?;
    let mut data = load_data(cfg)?;
    let renderer = build_renderer(cfg)?;
    let out = prepare_output(cfg)?;
    let metrics = fresh_metrics(&out, "metrics.jsonl")?;
    let env = PipelineEnv {
        renderer: renderer.as_ref(),
        reference_renderer: None,
        intrinsics: data.intrinsics,
        scene_id: &data.scene_id,
        metrics_path: Some(&metrics),
    };
    info!("training the retrieval backbone (seed {})", cfg.seed);
    let outcome = run_pipeline(&pipeline, &mut data.store, &env, cfg.seed)?;
    let ckpt = cfg.paths.vpr_checkpoint();
    ensure_parent(&ckpt)?;
    outcome.backbone.save_checkpoint(&ckpt, cfg.seed)?;
    emit_report(
        &[LabeledReport {
            label: "regular".into(),
            dataset: data.scene_id.clone(),
            report: outcome.test.clone(),
        }],
        ReportFormat::Table,
        &out,
    )?;
    write_json(&out.join("epochs.json"), &outcome.epochs)?;
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            command: "train-vpr",
            seed: cfg.seed,
            best_epoch: outcome.best_epoch,
            best_val_recall_at_1: outcome.best_val_recall,
            test: &outcome.test,
            mean_psnr: None,
            synthetic_count: 0,
            invariants_clean: outcome.invariants.clean(),
        },
    )?;
    info!(
        "best epoch {}; test R@1 {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.test.at(1).unwrap_or(0.0),
        ckpt.display()
    );
    Ok(())
}

pub fn train_ue(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let backbone = load_backbone(cfg)?;
    let data = load_data(cfg)?;
    let out = prepare_output(cfg)?;
    info!(
        "fitting the uncertainty network on the frozen backbone (seed {})",
        cfg.seed
    );
    let stage = fit_ue(
        &backbone,
        &data.store,
        &cfg.pipeline.ue,
        &cfg.pipeline.train,
        cfg.seed,
    )?;
    let ckpt = cfg.paths.ue_checkpoint();
    ensure_parent(&ckpt)?;
    stage
        .net
        .save_checkpoint(&ckpt, Some(&stage.stats), cfg.seed)?;
    let metrics = fresh_metrics(&out, "ue_metrics.jsonl")?;
    for (i, (train, val)) in stage
        .report
        .train_loss
        .iter()
        .zip(&stage.report.val_loss)
        .enumerate()
    {
        append_metrics(
            &metrics,
            &MetricsRecord {
                epoch: i as u32 + 1,
                split: "ue".into(),
                loss: Some(*train),
                recall_at_1: None,
                lr: None,
                triplets: None,
                synthetic_count: 0,
                note: Some(serde_json::json!({"val_nll": val, "seed": cfg.seed})),
            },
        )?;
    }
    write_json(
        &out.join("ue_summary.json"),
        &serde_json::json!({
            "command": "train-ue",
            "seed": cfg.seed,
            "report": stage.report,
            "checkpoint": ckpt,
        }),
    )?;
    info!(
        "uncertainty network: val NLL {:.4} -> best at epoch {}",
        stage.report.initial_val_loss, stage.report.best_epoch
    );
    Ok(())
}

/// One augmentation round against the saved checkpoints.
pub fn augment(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    cfg.pipeline.augment.validate()?;
    let backbone = load_backbone(cfg)?;
    let ue: Option<UeNet> = if cfg.pipeline.augment.use_ue {
        Some(UeNet::load_checkpoint(&cfg.paths.ue_checkpoint())?.0)
    } else {
        None
    };
    let data = load_data(cfg)?;
    let renderer = build_renderer(cfg)?;
    let out = prepare_output(cfg)?;
    if cfg.paths.manifest.is_none() {
        // The augmented manifest should point at real images on disk.
        write_toy_dataset(&cfg.toy, cfg.seed, &out)?;
    }
    let mut store = data.store.with_image_dir(out.join("synthetic"));
    let real = store.real(Split::Train);
    let mut cache = FeatureCache::new();
    cache.extend_from(&backbone, &store, &real)?;
    let synth = store.synthetic();
    let mode = if cfg.pipeline.organization == Organization::RealQuerySynthDb && !synth.is_empty() {
        Organization::RealQuerySynthDb
    } else {
        Organization::Regular
    };
    let view = organize(&real, &synth, mode, cfg.pipeline.positive_threshold)?;
    let ctx = AugmentContext {
        model: &backbone,
        ue: ue.as_ref(),
        reference_features: &cache,
        reference_pool: &real,
        renderer: renderer.as_ref(),
        intrinsics: data.intrinsics,
        scene_id: &data.scene_id,
        positive_threshold: cfg.pipeline.positive_threshold,
    };
    let summary = augmentation_epoch(&ctx, &mut store, &view, &cfg.pipeline.augment, 1, cfg.seed)?;
    write_candidate_diagnostics(&out.join("candidates.json"), &summary.candidates)?;
    save_manifest(
        &out.join("manifest_augmented.json"),
        &data.scene_id,
        store.records(),
    )?;
    write_json(
        &out.join("augment_summary.json"),
        &serde_json::json!({
            "command": "augment",
            "seed": cfg.seed,
            "organization": mode,
            "failures": summary.failures,
            "rendered": summary.rendered,
            "inserted": summary.inserted,
        }),
    )?;
    info!(
        "{} failures, {} views rendered, {} inserted",
        summary.failures.len(),
        summary.rendered,
        summary.inserted
    );
    Ok(())
}

pub fn pipeline(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.sweep.mode != SweepMode::None {
        return sweep(cfg);
    }
    let mut data = load_data(cfg)?;
    let renderer = build_renderer(cfg)?;
    let reference = reference_renderer(cfg)?;
    let out = prepare_output(cfg)?;
    let metrics = fresh_metrics(&out, "metrics.jsonl")?;
    let env = PipelineEnv {
        renderer: renderer.as_ref(),
        reference_renderer: reference.as_ref().map(|r| r as &dyn Renderer),
        intrinsics: data.intrinsics,
        scene_id: &data.scene_id,
        metrics_path: Some(&metrics),
    };
    info!("running the augmentation pipeline (seed {})", cfg.seed);
    let outcome = run_pipeline(&cfg.pipeline, &mut data.store, &env, cfg.seed)?;
    let ckpt = cfg.paths.vpr_checkpoint();
    ensure_parent(&ckpt)?;
    outcome.backbone.save_checkpoint(&ckpt, cfg.seed)?;
    if let Some(stage) = &outcome.ue {
        let ue_ckpt = cfg.paths.ue_checkpoint();
        ensure_parent(&ue_ckpt)?;
        stage
            .net
            .save_checkpoint(&ue_ckpt, Some(&stage.stats), cfg.seed)?;
    }
    let label = if cfg.pipeline.augmentation {
        "ugna"
    } else {
        "regular"
    };
    emit_report(
        &[LabeledReport {
            label: label.into(),
            dataset: data.scene_id.clone(),
            report: outcome.test.clone(),
        }],
        ReportFormat::Table,
        &out,
    )?;
    write_json(&out.join("epochs.json"), &outcome.epochs)?;
    write_candidate_diagnostics(&out.join("candidates.json"), &outcome.last_candidates)?;
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            command: "pipeline",
            seed: cfg.seed,
            best_epoch: outcome.best_epoch,
            best_val_recall_at_1: outcome.best_val_recall,
            test: &outcome.test,
            mean_psnr: outcome.mean_psnr,
            synthetic_count: data.store.synthetic_count(),
            invariants_clean: outcome.invariants.clean(),
        },
    )?;
    info!(
        "best epoch {}; test R@1 {:.4}",
        outcome.best_epoch,
        outcome.test.at(1).unwrap_or(0.0)
    );
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    if cfg.paths.manifest.is_some() {
        return Err(Error::Config(
            "sweeps run on the generated toy scene; unset paths.manifest".into(),
        ));
    }
    if cfg.renderer.kind != RendererKind::Oracle {
        return Err(Error::Config(
            "sweeps need renderer.kind = \"oracle\"".into(),
        ));
    }
    if cfg.sweep.seeds.is_empty() {
        return Err(Error::Config("sweep.seeds is empty".into()));
    }
    let variants = match cfg.sweep.mode {
        SweepMode::Comparison => comparison_variants(),
        SweepMode::M => m_sweep_variants(),
        SweepMode::Ablation => ablation_variants(),
        SweepMode::Noise => noise_variants(),
        SweepMode::None => unreachable!("handled by the caller"),
    };
    let out = prepare_output(cfg)?;
    info!(
        "sweep over {} variants and seeds {:?}",
        variants.len(),
        cfg.sweep.seeds
    );
    let results = run_toy_sweep(
        &cfg.pipeline,
        &cfg.toy,
        &variants,
        &cfg.sweep.seeds,
        Some(&out.join("metrics")),
    )?;
    let reports: Vec<LabeledReport> = mean_by_label(&results)
        .into_iter()
        .map(|(label, report)| LabeledReport {
            label,
            dataset: cfg.toy.scene_id.clone(),
            report,
        })
        .collect();
    emit_report(&reports, ReportFormat::Table, &out)?;
    let mut table = String::from("label,psnr_db,recall_at_1\n");
    for (label, p, r1) in psnr_table(&results) {
        table.push_str(&format!("{label},{p:.4},{r1:.4}\n"));
    }
    let psnr_path = out.join("psnr_table.csv");
    fs::write(&psnr_path, table).map_err(|e| io_err(&psnr_path, e))?;
    write_json(
        &out.join("sweep_results.json"),
        &serde_json::json!({
            "command": "pipeline",
            "mode": cfg.sweep.mode,
            "seeds": cfg.sweep.seeds,
            "results": results,
        }),
    )?;
    for r in &reports {
        info!(
            "{}: mean test R@1 {:.4}",
            r.label,
            r.report.at(1).unwrap_or(0.0)
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let backbone = load_backbone(cfg)?;
    let data = load_data(cfg)?;
    let queries = data.store.real(cfg.eval.split);
    if queries.is_empty() {
        return Err(Error::Config(format!(
            "no real records in split {:?}",
            cfg.eval.split
        )));
    }
    let database = data.store.real(Split::Train);
    let out = prepare_output(cfg)?;
    let report = evaluate(
        &backbone,
        &data.store,
        &queries,
        &database,
        cfg.pipeline.positive_threshold,
        &cfg.pipeline.ns,
    )?;
    let labeled = [LabeledReport {
        label: cfg.eval.label.clone(),
        dataset: data.scene_id.clone(),
        report: report.clone(),
    }];
    emit_report(&labeled, ReportFormat::Table, &out)?;
    if cfg.eval.curve_plot {
        emit_report(&labeled, ReportFormat::CurvePlot, &out)?;
    }
    write_json(
        &out.join("eval_summary.json"),
        &serde_json::json!({
            "command": "eval",
            "seed": cfg.seed,
            "split": cfg.eval.split,
            "checkpoint": cfg.paths.vpr_checkpoint(),
            "report": report,
        }),
    )?;
    info!(
        "R@1 {:.4} over {} queries",
        report.at(1).unwrap_or(0.0),
        report.query_count
    );
    Ok(())
}

pub fn import(input: &Path, output: &Path, options: &ImportOptions) -> Result<()> {
    if !input.is_file() {
        return Err(Error::Config(format!(
            "transforms file {} does not exist",
            input.display()
        )));
    }
    let records = import_transforms(input, options)?;
    ensure_parent(output)?;
    save_manifest(output, &options.scene_id, &records)?;
    info!("wrote {} records to {}", records.len(), output.display());
    Ok(())
}
