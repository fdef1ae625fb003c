//! Uncertainty-guided augmentation: find retrieval failures, sample candidate
//! poses around each, rank them by predicted uncertainty, render the top `K`
//! and add the renders to the training database.

use std::fs;
use std::path::Path;

use nalgebra::{Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{similarity, Backbone, Descriptor};
use crate::dataset::{DatasetView, PlaceRecord, RecordStore, Retention};
use crate::error::{ensure, Error, Result};
use crate::evaluation::embed_records;
use crate::geometry::{Intrinsics, Pose};
use crate::renderer::{RenderRequest, Renderer};
use crate::ue_net::{build_reference_set, FeatureCache, ReferenceSet, UeNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Candidates sampled per failure (`M`).
    pub candidates: usize,
    /// Candidates rendered per failure (`K`).
    pub top_k: usize,
    /// Reference images per failure (`N`).
    pub references: usize,
    /// Translation radius; `None` means half the positive threshold.
    pub translation_radius: Option<f64>,
    pub max_rotation_deg: f64,
    pub retention: Retention,
    /// When false, candidates get uniform random scores instead of UE scores.
    pub use_ue: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            candidates: 20,
            top_k: 3,
            references: 5,
            translation_radius: None,
            max_rotation_deg: 15.0,
            retention: Retention::KeepAll,
            use_ue: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.top_k >= 1 && self.top_k <= self.candidates,
            Config,
            "need 1 <= K <= M, got K={} M={}",
            self.top_k,
            self.candidates
        );
        ensure!(
            self.references >= 2,
            Config,
            "need N >= 2 references, got {}",
            self.references
        );
        ensure!(
            self.translation_radius.is_none_or(|r| r >= 0.0),
            Config,
            "translation radius must be non-negative"
        );
        ensure!(
            (0.0..=180.0).contains(&self.max_rotation_deg),
            Config,
            "rotation bound must lie in [0, 180] degrees"
        );
        Ok(())
    }

    pub fn radius(&self, positive_threshold: f64) -> f64 {
        self.translation_radius.unwrap_or(0.5 * positive_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub query_id: String,
    #[serde(skip, default = "Pose::identity")]
    pub query_pose: Pose,
    pub top1_id: String,
    pub top1_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePose {
    pub pose: Pose,
    pub parent_query: String,
    pub uncertainty: f64,
    pub selected: bool,
}

/// Queries whose top-1 database match lies farther than `positive_threshold`.
pub fn detect_failures_from(
    queries: &[(&PlaceRecord, &Descriptor)],
    database: &[(&PlaceRecord, &Descriptor)],
    positive_threshold: f64,
) -> Result<Vec<FailureCase>> {
    ensure!(
        !database.is_empty(),
        Validation,
        "failure detection needs a non-empty database"
    );
    let mut out = Vec::new();
    for (q, qd) in queries {
        let mut best: Option<(f64, &PlaceRecord)> = None;
        for (d, dd) in database {
            let s = similarity(qd, dd)?;
            let better = match best {
                None => true,
                Some((bs, br)) => s > bs || (s == bs && d.id < br.id),
            };
            if better {
                best = Some((s, d));
            }
        }
        let (_, top) = best.expect("database is non-empty");
        let dist = q.distance_to(top);
        if dist > positive_threshold {
            out.push(FailureCase {
                query_id: q.id.clone(),
                query_pose: q.pose,
                top1_id: top.id.clone(),
                top1_distance: dist,
            });
        }
    }
    Ok(out)
}

/// Embeds the view with `model` and runs top-1 failure detection.
pub fn detect_failures(
    model: &dyn Backbone,
    store: &RecordStore,
    view: &DatasetView,
) -> Result<Vec<FailureCase>> {
    let qd = embed_records(model, store, &view.queries)?;
    let dd = embed_records(model, store, &view.database)?;
    let q: Vec<_> = view.queries.iter().zip(qd.iter().map(|(_, d)| d)).collect();
    let d: Vec<_> = view
        .database
        .iter()
        .zip(dd.iter().map(|(_, d)| d))
        .collect();
    detect_failures_from(&q, &d, view.positive_threshold)
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let mut g = || -> f64 { StandardNormal.sample(rng) };
        let v = Vector3::new(g(), g(), g());
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// `M` poses around the failure: translation uniform in the ball of radius
/// `radius`, rotation by an angle uniform in `[0, θ_max]` about a uniform axis
/// in the camera frame.
pub fn sample_candidates(
    failure: &FailureCase,
    m: usize,
    radius: f64,
    max_rotation_deg: f64,
    seed: u64,
) -> Vec<CandidatePose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_max = max_rotation_deg.to_radians();
    (0..m)
        .map(|_| {
            let dir = unit_sphere(&mut rng);
            let r = radius * rng.random::<f64>().cbrt();
            let axis = Unit::new_normalize(unit_sphere(&mut rng));
            let angle = theta_max * rng.random::<f64>();
            let rotated = failure.query_pose.rotated_in_camera(&axis, angle);
            let pose = Pose::new(
                *rotated.rotation(),
                failure.query_pose.translation() + dir * r,
            )
            .expect("rotation product stays orthonormal");
            CandidatePose {
                pose,
                parent_query: failure.query_id.clone(),
                uncertainty: 0.0,
                selected: false,
            }
        })
        .collect()
}

/// Fills `uncertainty` from the UE network, or with uniform random scores
/// when `ue` is `None`.
pub fn score_candidates(
    candidates: &mut [CandidatePose],
    ue: Option<&UeNet>,
    refs: &ReferenceSet,
    seed: u64,
) -> Result<()> {
    match ue {
        Some(net) => {
            for c in candidates.iter_mut() {
                c.uncertainty = net.predict(&c.pose, refs)?.scalar_uncertainty;
            }
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for c in candidates.iter_mut() {
                c.uncertainty = rng.random::<f64>();
            }
        }
    }
    Ok(())
}

/// Marks and returns the `k` highest-uncertainty candidates; ties go to the lower index.
pub fn select_top_k(candidates: &mut [CandidatePose], k: usize) -> Result<Vec<CandidatePose>> {
    ensure!(
        k <= candidates.len(),
        Validation,
        "cannot select {k} of {} candidates",
        candidates.len()
    );
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .uncertainty
            .total_cmp(&candidates[a].uncertainty)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    Ok(order
        .into_iter()
        .map(|i| {
            candidates[i].selected = true;
            candidates[i].clone()
        })
        .collect())
}

/// Everything one augmentation round needs besides the store.
pub struct AugmentContext<'a> {
    pub model: &'a dyn Backbone,
    pub ue: Option<&'a UeNet>,
    /// Feature maps of `reference_pool`, from the backbone the UE was trained with.
    pub reference_features: &'a FeatureCache,
    pub reference_pool: &'a [PlaceRecord],
    pub renderer: &'a dyn Renderer,
    pub intrinsics: Intrinsics,
    pub scene_id: &'a str,
    pub positive_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSummary {
    pub epoch: u32,
    pub failures: Vec<FailureCase>,
    pub rendered: usize,
    pub inserted: usize,
    pub candidates: Vec<CandidatePose>,
}

/// Detect, sample, score, select, render and insert for one epoch.
///
/// A renderer failure leaves the store untouched. With no failures nothing is
/// rendered; only the current-epoch-only retention then touches the store, by
/// dropping earlier synthetic records.
pub fn augmentation_epoch(
    ctx: &AugmentContext<'_>,
    store: &mut RecordStore,
    view: &DatasetView,
    config: &AugmentConfig,
    epoch: u32,
    seed: u64,
) -> Result<AugmentSummary> {
    config.validate()?;
    if config.use_ue && ctx.ue.is_none() {
        return Err(Error::Config(
            "uncertainty scoring is enabled but no trained UE network is loaded; run train-ue first"
                .into(),
        ));
    }
    let failures = detect_failures(ctx.model, store, view)?;
    let radius = config.radius(ctx.positive_threshold);
    let mut all = Vec::new();
    let mut poses = Vec::new();
    for (i, f) in failures.iter().enumerate() {
        let fseed = seed ^ ((epoch as u64) << 32) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut cands =
            sample_candidates(f, config.candidates, radius, config.max_rotation_deg, fseed);
        let refs = build_reference_set(
            &f.query_pose,
            ctx.reference_pool,
            config.references,
            ctx.reference_features,
        )?;
        let scorer = if config.use_ue { ctx.ue } else { None };
        score_candidates(&mut cands, scorer, &refs, fseed.rotate_left(17))?;
        let chosen = select_top_k(&mut cands, config.top_k)?;
        poses.extend(chosen.iter().map(|c| c.pose));
        all.extend(cands);
    }
    if poses.is_empty() {
        store.insert_synthetic(&[], ctx.scene_id, &ctx.intrinsics, epoch, config.retention)?;
        return Ok(AugmentSummary {
            epoch,
            failures,
            rendered: 0,
            inserted: 0,
            candidates: all,
        });
    }
    let request = RenderRequest::new(poses, ctx.intrinsics, ctx.scene_id, format!("epoch{epoch}"))?;
    let results = ctx.renderer.render(&request)?;
    ensure!(
        results.len() == request.poses.len(),
        Render,
        "renderer returned {} images for {} poses",
        results.len(),
        request.poses.len()
    );
    let inserted = store.insert_synthetic(
        &results,
        ctx.scene_id,
        &ctx.intrinsics,
        epoch,
        config.retention,
    )?;
    Ok(AugmentSummary {
        epoch,
        failures,
        rendered: results.len(),
        inserted,
        candidates: all,
    })
}

#[derive(Serialize)]
struct CandidateDump<'a> {
    parent: &'a str,
    pose: [f64; 16],
    uncertainty: f64,
    selected: bool,
}

/// Writes `{parent, pose, uncertainty, selected}` per candidate as a JSON array.
pub fn write_candidate_diagnostics(path: &Path, candidates: &[CandidatePose]) -> Result<()> {
    let rows: Vec<CandidateDump> = candidates
        .iter()
        .map(|c| CandidateDump {
            parent: &c.parent_query,
            pose: c.pose.to_row_major(),
            uncertainty: c.uncertainty,
            selected: c.selected,
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Role, Split};

    fn failure() -> FailureCase {
        FailureCase {
            query_id: "q".into(),
            query_pose: Pose::from_translation(Vector3::new(1.0, -1.5, 2.0)),
            top1_id: "x".into(),
            top1_distance: 3.0,
        }
    }

    fn scored(scores: &[f64]) -> Vec<CandidatePose> {
        scores
            .iter()
            .map(|s| CandidatePose {
                pose: Pose::identity(),
                parent_query: "q".into(),
                uncertainty: *s,
                selected: false,
            })
            .collect()
    }

    #[test]
    fn degenerate_bounds_reproduce_the_failure_pose() {
        let c = sample_candidates(&failure(), 7, 0.0, 0.0, 1);
        assert_eq!(c.len(), 7);
        for cand in c {
            assert!(cand.pose.translation_distance(&failure().query_pose) < 1e-12);
            assert!(cand.pose.rotation_angle_to(&failure().query_pose) < 1e-9);
        }
    }

    #[test]
    fn samples_respect_bounds_and_seed() {
        let f = failure();
        let c = sample_candidates(&f, 10_000, 0.25, 15.0, 3);
        for cand in &c {
            assert!(cand.pose.translation_distance(&f.query_pose) <= 0.25 + 1e-12);
            assert!(cand.pose.rotation_angle_to(&f.query_pose) <= 15f64.to_radians() + 1e-9);
        }
        assert_eq!(sample_candidates(&f, 20, 0.25, 15.0, 3), c[..20].to_vec());
    }

    #[test]
    fn top_k_selection() {
        let mut c = scored(&[0.5, 2.0, 1.0]);
        let chosen = select_top_k(&mut c, 2).unwrap();
        let s: Vec<f64> = chosen.iter().map(|c| c.uncertainty).collect();
        assert_eq!(s, vec![2.0, 1.0]);
        assert!(c[1].selected && c[2].selected && !c[0].selected);
        let mut eq = scored(&[1.0; 5]);
        select_top_k(&mut eq, 3).unwrap();
        assert_eq!(
            eq.iter().map(|c| c.selected).collect::<Vec<_>>(),
            [true, true, true, false, false]
        );
        assert!(select_top_k(&mut scored(&[1.0]), 2).is_err());
    }

    #[test]
    fn random_scores_are_seeded() {
        let refs = ReferenceSet {
            records: vec![],
            feature_maps: vec![],
            poses: vec![],
        };
        let mut a = scored(&[0.0; 6]);
        let mut b = scored(&[0.0; 6]);
        score_candidates(&mut a, None, &refs, 11).unwrap();
        score_candidates(&mut b, None, &refs, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|c| (0.0..1.0).contains(&c.uncertainty)));
    }

    fn rec(id: &str, x: f64) -> PlaceRecord {
        PlaceRecord {
            id: id.into(),
            image_path: "x.png".into(),
            pose: Pose::from_translation(Vector3::new(x, 0.0, 0.0)),
            intrinsics: Intrinsics::from_fov(1.0, 8, 8).unwrap(),
            is_synthetic: false,
            scene_id: "s".into(),
            split: Split::Train,
            role: Role::Query,
            epoch_added: 0,
        }
    }

    #[test]
    fn failure_detection_cases() {
        let q = [rec("q0", 0.0), rec("q1", 5.0)];
        let dup = [rec("d0", 0.0), rec("d1", 5.0)];
        let desc = [
            Descriptor::normalized(vec![1.0, 0.0]),
            Descriptor::normalized(vec![0.0, 1.0]),
        ];
        let qs: Vec<_> = q.iter().zip(desc.iter()).collect();
        let ds: Vec<_> = dup.iter().zip(desc.iter()).collect();
        assert!(detect_failures_from(&qs, &ds, 0.5).unwrap().is_empty());
        let far = [rec("f", 20.0)];
        let fs: Vec<_> = far.iter().zip(desc.iter()).collect();
        let failures = detect_failures_from(&qs, &fs, 0.5).unwrap();
        assert_eq!(failures.len(), 2);
        assert_eq!(failures[0].top1_id, "f");
        assert!(failures.iter().all(|f| f.top1_distance > 0.5));
    }
}
