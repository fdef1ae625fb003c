//! Mean scalar uncertainty of the toy UE network, and the squared logit error
//! of its mean prediction against a fresh render, as a function of candidate offset.
//!
//! `cargo run --release --example ue_probe -- [seed]`

use nalgebra::{Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_augment::backbone::Backbone;
use vpr_augment::dataset::Split;
use vpr_augment::geometry::Pose;
use vpr_augment::pipeline::{toy_dataset, warm_start, PipelineConfig, PipelineEnv, ToySceneConfig};
use vpr_augment::renderer::OracleRenderer;
use vpr_augment::training::logit;
use vpr_augment::ue_net::build_reference_set;

fn main() -> vpr_augment::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0);
    let cfg = PipelineConfig::toy();
    let toy = ToySceneConfig::default();
    let data = toy_dataset(&toy, seed)?;
    let renderer = OracleRenderer::new(toy.scene.clone(), 0, 0.0)?;
    let env = PipelineEnv {
        renderer: &renderer,
        reference_renderer: None,
        intrinsics: data.intrinsics,
        scene_id: &toy.scene_id,
        metrics_path: None,
    };
    let warm = warm_start(&cfg, &data.store, &env, true, seed)?;
    let stage = warm.ue.unwrap();
    println!(
        "ue nll initial {:.3} best {:.3} at epoch {} of {}",
        stage.report.initial_val_loss,
        stage.report.val_loss[stage.report.best_epoch.saturating_sub(1)],
        stage.report.best_epoch,
        stage.report.val_loss.len()
    );
    let pool = data.store.real(Split::Train);
    for (dist, deg) in [
        (0.0, 0.0),
        (0.05, 0.0),
        (0.1, 0.0),
        (0.25, 0.0),
        (0.0, 15.0),
        (0.25, 15.0),
        (0.5, 15.0),
        (1.0, 30.0),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let mut err = 0.0;
        let trials = 50;
        for _ in 0..trials {
            let anchor = &pool[rng.random_range(0..pool.len())];
            let refs = build_reference_set(&anchor.pose, &pool, cfg.ue.references, &stage.cache)?;
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let axis = Unit::new_normalize(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let p0 = refs.poses[0];
            let rot = p0.rotated_in_camera(&axis, f64::to_radians(deg));
            let cand = Pose::new(*rot.rotation(), p0.translation() + dir * dist)?;
            let pred = stage.net.predict(&cand, &refs)?;
            total += pred.scalar_uncertainty;
            let img = renderer.render_pose(&cand, &data.intrinsics);
            let y = stage.stats.normalize(warm.backbone.embed(&img)?.values())?;
            err += y
                .iter()
                .zip(&pred.mu)
                .map(|(&y, &m)| (logit(y) - m).powi(2))
                .sum::<f64>()
                / y.len() as f64;
        }
        println!(
            "offset {dist:.2} rot {deg:>4.0}°: mean uncertainty {:.4} sq err {:.4}",
            total / trials as f64,
            err / trials as f64
        );
    }
    Ok(())
}
