//! Uncertainty-estimation network.
//!
//! For a candidate pose the network warps the feature maps of its `N` nearest
//! reference images into the candidate view, fuses each warped map with an
//! encoding of the reference-to-candidate pose, aggregates the `N` fused
//! vectors into a weighted mean and variance, and decodes those into a
//! per-dimension logit-space mean `mu` and variance `var` of the candidate's
//! descriptor.
//!
//! Per reference `n`:
//!
//! ```text
//! F_n = Linear([mean of valid warped cells ; valid fraction])
//! h_n = MLP_feat([F_n ; P_n])
//! f_n = head_f(h_n) + F_n        W_n = softplus(head_w(h_n))
//! ```
//!
//! Aggregation over `g_n = f_n ⊙ W_n`:
//! `mean_k = (1/N) Σ_n g_nk`, `var_k = (1/(N−1)) Σ_n (g_nk − mean_k)²`.
//! Weights are not normalised across references.
//!
//! Decoding: `o = MLP_out([mean ; var])`, `mu = head_mu(o)`,
//! `var = softplus(head_var(o)) + 1e-6`, and the scalar uncertainty used for
//! ranking candidates is the mean of `var` over dimensions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{metadata_path, Backbone, FeatureMap, FeatureShape};
use crate::dataset::{PlaceRecord, RecordStore};
use crate::error::{ensure, Error, Result};
use crate::geometry::{
    bilinear_sample, project_feature_grid, relative_pose, Intrinsics, Pose, PoseFeature,
    ProjectedGrid, RotationRepr,
};
use crate::nn::{self, Activation, DenseCache, DenseStack, Linear, ParamLayout};
use crate::training::{nll_loss_and_grad, NormalizationStats};

/// Lower bound added to every predicted variance.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UeConfig {
    /// Output descriptor width `D`; must match the backbone.
    pub descriptor_dim: usize,
    /// Width `d` of the fused per-reference vectors.
    pub fused_dim: usize,
    pub feat_hidden: Vec<usize>,
    pub out_hidden: Vec<usize>,
    pub bands: usize,
    pub rotation: RotationRepr,
    pub plane_depth: f64,
    pub references: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for UeConfig {
    fn default() -> Self {
        Self {
            descriptor_dim: 512,
            fused_dim: 512,
            feat_hidden: vec![256; 3],
            out_hidden: vec![512; 2],
            bands: 10,
            rotation: RotationRepr::Matrix,
            plane_depth: 1.0,
            references: 5,
            activation: Activation::Silu,
            seed: 0,
        }
    }
}

impl UeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.references >= 2,
            Config,
            "the uncertainty network needs at least 2 references, got {}",
            self.references
        );
        ensure!(
            self.descriptor_dim > 0 && self.fused_dim > 0,
            Config,
            "descriptor and fused widths must be positive"
        );
        ensure!(
            self.bands >= 1,
            Config,
            "positional encoding needs at least one band"
        );
        ensure!(
            !self.feat_hidden.is_empty() && !self.out_hidden.is_empty(),
            Config,
            "both MLPs need at least one hidden layer"
        );
        ensure!(
            self.plane_depth > 0.0,
            Config,
            "plane depth must be positive, got {}",
            self.plane_depth
        );
        Ok(())
    }

    pub fn pose_feature_len(&self) -> usize {
        6 * self.bands + self.rotation.len()
    }
}

/// Reference images used to score one candidate, nearest first.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub records: Vec<PlaceRecord>,
    pub feature_maps: Vec<FeatureMap>,
    pub poses: Vec<Pose>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Feature maps keyed by record id.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    maps: HashMap<String, FeatureMap>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Extracts feature maps for `records` whose ids are not cached yet.
    pub fn extend_from(
        &mut self,
        backbone: &dyn Backbone,
        store: &RecordStore,
        records: &[PlaceRecord],
    ) -> Result<()> {
        for r in records {
            if !self.maps.contains_key(&r.id) {
                let image = store.image(&r.id)?;
                let fm = backbone.extract_feature_map(&image, &r.id)?;
                self.maps.insert(r.id.clone(), fm);
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, map: FeatureMap) {
        self.maps.insert(map.source_id().to_string(), map);
    }

    pub fn get(&self, id: &str) -> Option<&FeatureMap> {
        self.maps.get(id)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// The `n` pool records nearest to `candidate` by translation, ties by id.
pub fn nearest_records<'a>(
    candidate: &Pose,
    pool: &'a [PlaceRecord],
    n: usize,
) -> Result<Vec<&'a PlaceRecord>> {
    ensure!(n >= 2, Validation, "need at least 2 references, got {n}");
    ensure!(
        pool.len() >= n,
        Validation,
        "reference pool holds {} records but {n} are required",
        pool.len()
    );
    let mut ranked: Vec<(f64, &PlaceRecord)> = pool
        .iter()
        .map(|r| (r.pose.translation_distance(candidate), r))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(ranked.into_iter().take(n).map(|(_, r)| r).collect())
}

pub fn build_reference_set(
    candidate: &Pose,
    pool: &[PlaceRecord],
    n: usize,
    cache: &FeatureCache,
) -> Result<ReferenceSet> {
    let chosen = nearest_records(candidate, pool, n)?;
    let mut feature_maps = Vec::with_capacity(n);
    for r in &chosen {
        let fm = cache.get(&r.id).ok_or_else(|| {
            Error::State(format!("no cached feature map for reference {:?}", r.id))
        })?;
        feature_maps.push(fm.clone());
    }
    Ok(ReferenceSet {
        poses: chosen.iter().map(|r| r.pose).collect(),
        records: chosen.into_iter().cloned().collect(),
        feature_maps,
    })
}

fn warp_one(
    map: &FeatureMap,
    reference: &Pose,
    intrinsics: &Intrinsics,
    candidate: &Pose,
    config: &UeConfig,
) -> Result<(FeatureMap, ProjectedGrid, PoseFeature)> {
    let rel = relative_pose(reference, candidate)?;
    let grid = project_feature_grid(
        &rel,
        intrinsics,
        map.height(),
        map.width(),
        config.plane_depth,
    )?;
    let warped = bilinear_sample(map, &grid)?;
    Ok((
        warped,
        grid,
        PoseFeature::new(&rel, config.bands, config.rotation),
    ))
}

/// Warped reference features `e_n` and pose features `P_n`, one per reference.
pub fn warp_references(
    refs: &ReferenceSet,
    candidate: &Pose,
    config: &UeConfig,
) -> Result<(Vec<FeatureMap>, Vec<PoseFeature>)> {
    let mut maps = Vec::with_capacity(refs.len());
    let mut feats = Vec::with_capacity(refs.len());
    for ((map, pose), record) in refs.feature_maps.iter().zip(&refs.poses).zip(&refs.records) {
        let (warped, _, pf) = warp_one(map, pose, &record.intrinsics, candidate, config)?;
        maps.push(warped);
        feats.push(pf);
    }
    Ok((maps, feats))
}

/// Parameter-free part of the forward pass, ready for the MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct UeInput {
    /// Per reference: mean of valid warped cells followed by the valid fraction.
    pub pooled: Vec<Vec<f64>>,
    pub pose_features: Vec<Vec<f64>>,
}

impl UeInput {
    pub fn references(&self) -> usize {
        self.pooled.len()
    }
}

fn pool_valid(map: &FeatureMap, grid: &ProjectedGrid) -> Vec<f64> {
    let c = map.channels();
    let mut acc = vec![0.0; c + 1];
    let mut count = 0usize;
    for (cell, ok) in grid.valid.iter().enumerate() {
        if *ok {
            count += 1;
            let v = &map.values()[cell * c..(cell + 1) * c];
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
    }
    if count > 0 {
        for a in &mut acc[..c] {
            *a /= count as f64;
        }
    }
    acc[c] = count as f64 / grid.valid.len().max(1) as f64;
    acc
}

pub fn prepare_input(refs: &ReferenceSet, candidate: &Pose, config: &UeConfig) -> Result<UeInput> {
    ensure!(
        refs.len() >= 2,
        Validation,
        "aggregation needs at least 2 references, got {}",
        refs.len()
    );
    let mut pooled = Vec::with_capacity(refs.len());
    let mut pose_features = Vec::with_capacity(refs.len());
    for ((map, pose), record) in refs.feature_maps.iter().zip(&refs.poses).zip(&refs.records) {
        let (warped, grid, pf) = warp_one(map, pose, &record.intrinsics, candidate, config)?;
        pooled.push(pool_valid(&warped, &grid));
        pose_features.push(pf.to_vec());
    }
    Ok(UeInput {
        pooled,
        pose_features,
    })
}

/// Per-reference fused vectors, their weights and the aggregated statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub per_reference: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UePrediction {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub scalar_uncertainty: f64,
}

/// Weighted mean and unbiased variance of `f ⊙ w` across references.
pub fn aggregate(f: &[Vec<f64>], w: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = f.len();
    ensure!(
        n >= 2,
        Validation,
        "aggregation needs at least 2 references, got {n}"
    );
    ensure!(
        w.len() == n,
        Validation,
        "{n} feature rows but {} weight rows",
        w.len()
    );
    let d = f[0].len();
    ensure!(
        f.iter().chain(w).all(|row| row.len() == d),
        Validation,
        "ragged feature/weight rows"
    );
    let mut mean = vec![0.0; d];
    for (fr, wr) in f.iter().zip(w) {
        for k in 0..d {
            mean[k] += fr[k] * wr[k];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for (fr, wr) in f.iter().zip(w) {
        for k in 0..d {
            let dev = fr[k] * wr[k] - mean[k];
            var[k] += dev * dev;
        }
    }
    for v in &mut var {
        *v /= (n - 1) as f64;
    }
    Ok((mean, var))
}

#[derive(Debug, Clone)]
struct RefTrace {
    x: Vec<f64>,
    feat_cache: DenseCache,
    h: Vec<f64>,
    f: Vec<f64>,
    w_pre: Vec<f64>,
    w: Vec<f64>,
}

/// Activations from one forward pass, consumed by [`UeNet::backward`].
#[derive(Debug, Clone)]
pub struct UeTrace {
    refs: Vec<RefTrace>,
    mean: Vec<f64>,
    out_cache: DenseCache,
    o: Vec<f64>,
    raw_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct UeNet {
    config: UeConfig,
    feature_shape: FeatureShape,
    proj: Linear,
    feat: DenseStack,
    head_f: Linear,
    head_w: Linear,
    out: DenseStack,
    head_mu: Linear,
    head_var: Linear,
    params: Vec<f64>,
}

impl UeNet {
    pub fn new(config: UeConfig, feature_shape: FeatureShape) -> Result<Self> {
        config.validate()?;
        ensure!(
            feature_shape.channels > 0 && feature_shape.height > 0 && feature_shape.width > 0,
            Config,
            "feature shape must be non-empty"
        );
        let d = config.fused_dim;
        let mut layout = ParamLayout::new();
        let proj = layout.linear(feature_shape.channels + 1, d);
        let feat = DenseStack::new(
            &mut layout,
            d + config.pose_feature_len(),
            &config.feat_hidden,
            config.activation,
        );
        let hf = feat.out_dim(0);
        let head_f = layout.linear(hf, d);
        let head_w = layout.linear(hf, d);
        let out = DenseStack::new(&mut layout, 2 * d, &config.out_hidden, config.activation);
        let ho = out.out_dim(0);
        let head_mu = layout.linear(ho, config.descriptor_dim);
        let head_var = layout.linear(ho, config.descriptor_dim);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        proj.init(&mut params, &mut rng, 1.0);
        feat.init(&mut params, &mut rng);
        head_f.init(&mut params, &mut rng, 0.5);
        head_w.init(&mut params, &mut rng, 0.1);
        out.init(&mut params, &mut rng);
        head_mu.init(&mut params, &mut rng, 0.5);
        head_var.init(&mut params, &mut rng, 0.1);
        Ok(Self {
            config,
            feature_shape,
            proj,
            feat,
            head_f,
            head_w,
            out,
            head_mu,
            head_var,
            params,
        })
    }

    pub fn config(&self) -> &UeConfig {
        &self.config
    }

    pub fn feature_shape(&self) -> FeatureShape {
        self.feature_shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, input: &UeInput) -> Result<()> {
        ensure!(
            input.references() >= 2 && input.pose_features.len() == input.references(),
            Validation,
            "need at least 2 aligned references, got {} pooled and {} pose features",
            input.pooled.len(),
            input.pose_features.len()
        );
        let c = self.feature_shape.channels + 1;
        let p = self.config.pose_feature_len();
        ensure!(
            input.pooled.iter().all(|v| v.len() == c)
                && input.pose_features.iter().all(|v| v.len() == p),
            Validation,
            "input widths do not match the network ({c} pooled, {p} pose)"
        );
        Ok(())
    }

    fn fuse_traced(&self, input: &UeInput) -> Vec<RefTrace> {
        let p = &self.params;
        input
            .pooled
            .iter()
            .zip(&input.pose_features)
            .map(|(x, pf)| {
                let fused_in = self.proj.forward(p, x);
                let mut stack_in = fused_in.clone();
                stack_in.extend_from_slice(pf);
                let (h, feat_cache) = self.feat.forward_cached(p, &stack_in);
                let mut f = self.head_f.forward(p, &h);
                for (fv, r) in f.iter_mut().zip(&fused_in) {
                    *fv += r;
                }
                let w_pre = self.head_w.forward(p, &h);
                let w = w_pre.iter().map(|v| nn::softplus(*v)).collect();
                RefTrace {
                    x: x.clone(),
                    feat_cache,
                    h,
                    f,
                    w_pre,
                    w,
                }
            })
            .collect()
    }

    /// Fusion MLP followed by aggregation.
    pub fn fuse(&self, input: &UeInput) -> Result<FusedFeature> {
        self.check_input(input)?;
        let refs = self.fuse_traced(input);
        let per_reference: Vec<Vec<f64>> = refs.iter().map(|r| r.f.clone()).collect();
        let weights: Vec<Vec<f64>> = refs.iter().map(|r| r.w.clone()).collect();
        let (mean, var) = aggregate(&per_reference, &weights)?;
        Ok(FusedFeature {
            per_reference,
            weights,
            mean,
            var,
        })
    }

    fn decode_traced(
        &self,
        mean: &[f64],
        var: &[f64],
    ) -> (UePrediction, DenseCache, Vec<f64>, Vec<f64>) {
        let p = &self.params;
        let mut z = mean.to_vec();
        z.extend_from_slice(var);
        let (o, cache) = self.out.forward_cached(p, &z);
        let mu = self.head_mu.forward(p, &o);
        let raw_var = self.head_var.forward(p, &o);
        let var_out: Vec<f64> = raw_var
            .iter()
            .map(|r| nn::softplus(*r) + VAR_FLOOR)
            .collect();
        let scalar = var_out.iter().sum::<f64>() / var_out.len() as f64;
        (
            UePrediction {
                mu,
                var: var_out,
                scalar_uncertainty: scalar,
            },
            cache,
            o,
            raw_var,
        )
    }

    pub fn decode(&self, fused: &FusedFeature) -> Result<UePrediction> {
        let d = self.config.fused_dim;
        ensure!(
            fused.mean.len() == d && fused.var.len() == d,
            Validation,
            "fused statistics must have width {d}"
        );
        Ok(self.decode_traced(&fused.mean, &fused.var).0)
    }

    pub fn forward(&self, input: &UeInput) -> Result<UePrediction> {
        Ok(self.forward_trace(input)?.0)
    }

    pub fn forward_trace(&self, input: &UeInput) -> Result<(UePrediction, UeTrace)> {
        self.check_input(input)?;
        let refs = self.fuse_traced(input);
        let f: Vec<Vec<f64>> = refs.iter().map(|r| r.f.clone()).collect();
        let w: Vec<Vec<f64>> = refs.iter().map(|r| r.w.clone()).collect();
        let (mean, var) = aggregate(&f, &w)?;
        let (pred, out_cache, o, raw_var) = self.decode_traced(&mean, &var);
        Ok((
            pred,
            UeTrace {
                refs,
                mean,
                out_cache,
                o,
                raw_var,
            },
        ))
    }

    /// Accumulates parameter gradients given `∂L/∂mu` and `∂L/∂var`.
    pub fn backward(&self, trace: &UeTrace, d_mu: &[f64], d_var: &[f64], grads: &mut [f64]) {
        let p = &self.params;
        let d_raw: Vec<f64> = d_var
            .iter()
            .zip(&trace.raw_var)
            .map(|(g, r)| g * nn::sigmoid(*r))
            .collect();
        let mut d_o = self.head_mu.backward(p, &trace.o, d_mu, grads);
        for (a, b) in d_o
            .iter_mut()
            .zip(self.head_var.backward(p, &trace.o, &d_raw, grads))
        {
            *a += b;
        }
        let dz = self.out.backward(p, &trace.out_cache, &d_o, grads);
        let d = self.config.fused_dim;
        let (d_mean, d_fvar) = dz.split_at(d);
        let n = trace.refs.len() as f64;
        for r in &trace.refs {
            let mut df = vec![0.0; d];
            let mut da = vec![0.0; d];
            for k in 0..d {
                let g = r.f[k] * r.w[k];
                // the mean's own dependence on g cancels because Σ(g − mean) = 0
                let dg = d_mean[k] / n + d_fvar[k] * 2.0 * (g - trace.mean[k]) / (n - 1.0);
                df[k] = dg * r.w[k];
                da[k] = dg * r.f[k] * nn::sigmoid(r.w_pre[k]);
            }
            let mut dh = self.head_f.backward(p, &r.h, &df, grads);
            for (a, b) in dh.iter_mut().zip(self.head_w.backward(p, &r.h, &da, grads)) {
                *a += b;
            }
            let d_in = self.feat.backward(p, &r.feat_cache, &dh, grads);
            let d_fused: Vec<f64> = d_in[..d].iter().zip(&df).map(|(a, b)| a + b).collect();
            self.proj.backward(p, &r.x, &d_fused, grads);
        }
    }

    /// Warp, fuse and decode in one call.
    pub fn predict(&self, candidate: &Pose, refs: &ReferenceSet) -> Result<UePrediction> {
        let input = prepare_input(refs, candidate, &self.config)?;
        self.forward(&input)
    }

    /// NLL of `target` (normalised descriptor in (0, 1)) and its parameter gradient.
    pub fn loss_and_grad(&self, input: &UeInput, target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (pred, trace) = self.forward_trace(input)?;
        let (loss, d_mu, d_var) = nll_loss_and_grad(target, &pred.mu, &pred.var)?;
        let mut grads = vec![0.0; self.params.len()];
        self.backward(&trace, &d_mu, &d_var, &mut grads);
        Ok((loss, grads))
    }

    /// Writes raw parameters and a `<path>.meta.json` sidecar.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        stats: Option<&NormalizationStats>,
        seed: u64,
    ) -> Result<()> {
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let meta = UeMetadata {
            config: self.config.clone(),
            feature_shape: self.feature_shape,
            param_count: self.params.len(),
            seed,
            normalization: stats.cloned(),
        };
        let meta_path = metadata_path(path);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(meta_path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, Option<NormalizationStats>)> {
        let meta_path = metadata_path(path);
        if !path.exists() || !meta_path.exists() {
            return Err(Error::MissingDependency(format!(
                "uncertainty checkpoint {} not found; run train-ue first",
                path.display()
            )));
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: UeMetadata = serde_json::from_str(&text)?;
        let mut net = Self::new(meta.config, meta.feature_shape)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ensure!(
            bytes.len() == net.params.len() * 8,
            Validation,
            "checkpoint {} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            net.params.len() * 8
        );
        for (p, chunk) in net.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok((net, meta.normalization))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UeMetadata {
    pub config: UeConfig,
    pub feature_shape: FeatureShape,
    pub param_count: usize,
    pub seed: u64,
    pub normalization: Option<NormalizationStats>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Role, Split};
    use nalgebra::Vector3;
    use rand::Rng;

    fn tiny_config() -> UeConfig {
        UeConfig {
            descriptor_dim: 8,
            fused_dim: 6,
            feat_hidden: vec![10, 10],
            out_hidden: vec![12],
            bands: 2,
            references: 2,
            seed: 3,
            ..UeConfig::default()
        }
    }

    fn shape() -> FeatureShape {
        FeatureShape {
            height: 4,
            width: 4,
            channels: 3,
        }
    }

    fn intrinsics() -> Intrinsics {
        Intrinsics::from_fov(1.2, 16, 16).unwrap()
    }

    fn record(id: &str, pose: Pose) -> PlaceRecord {
        PlaceRecord {
            id: id.into(),
            image_path: format!("{id}.png").into(),
            pose,
            intrinsics: intrinsics(),
            is_synthetic: false,
            scene_id: "s".into(),
            split: Split::Train,
            role: Role::Database,
            epoch_added: 0,
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, id: &str) -> FeatureMap {
        let v = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(4, 4, 3, v, id).unwrap()
    }

    fn refs(rng: &mut ChaCha8Rng, poses: &[Pose]) -> ReferenceSet {
        let records: Vec<PlaceRecord> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| record(&format!("r{i}"), *p))
            .collect();
        ReferenceSet {
            feature_maps: records.iter().map(|r| random_map(rng, &r.id)).collect(),
            poses: poses.to_vec(),
            records,
        }
    }

    #[test]
    fn hand_computed_aggregation() {
        let f = vec![vec![1.0], vec![3.0]];
        let (m, v) = aggregate(&f, &[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!((m[0], v[0]), (2.0, 2.0));
        let (m, v) = aggregate(&f, &[vec![2.0], vec![0.0]]).unwrap();
        assert_eq!((m[0], v[0]), (1.0, 2.0));
        let (_, v) = aggregate(&vec![vec![2.0, 1.0]; 3], &vec![vec![0.5, 4.0]; 3]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(aggregate(&f[..1], &[vec![1.0]]).is_err());
    }

    #[test]
    fn nearest_selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool: Vec<PlaceRecord> = (0..200)
            .map(|i| {
                let t = Vector3::new(
                    rng.random_range(-5.0..5.0),
                    0.0,
                    rng.random_range(-5.0..5.0),
                );
                record(&format!("p{i:03}"), Pose::from_translation(t))
            })
            .collect();
        let cand = Pose::from_translation(Vector3::new(0.3, 0.0, -1.2));
        let got: Vec<&str> = nearest_records(&cand, &pool, 5)
            .unwrap()
            .iter()
            .map(|r| r.id.as_str())
            .collect();
        let mut all: Vec<(f64, &str)> = pool
            .iter()
            .map(|r| {
                let dx = r.pose.translation() - cand.translation();
                (dx.norm(), r.id.as_str())
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<&str> = all[..5].iter().map(|e| e.1).collect();
        assert_eq!(got, expected);

        let err = nearest_records(&cand, &pool[..3], 5)
            .unwrap_err()
            .to_string();
        assert!(err.contains('3') && err.contains('5'), "{err}");
        let coincident = pool[17].pose;
        assert_eq!(
            nearest_records(&coincident, &pool, 5).unwrap()[0].id,
            "p017"
        );
    }

    #[test]
    fn identity_warp_reproduces_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Pose::from_translation(Vector3::new(1.0, 0.0, 2.0));
        let q = Pose::from_translation(Vector3::new(0.0, 0.0, 0.0));
        let set = refs(&mut rng, &[p, q]);
        let (maps, feats) = warp_references(&set, &p, &tiny_config()).unwrap();
        assert_eq!((maps.len(), feats.len()), (2, 2));
        for (a, b) in maps[0].values().iter().zip(set.feature_maps[0].values()) {
            assert!((a - b).abs() < 1e-9);
        }
        let zero = crate::geometry::encode_position(&Vector3::zeros(), 2);
        assert_eq!(feats[0].encoded_translation, zero);
    }

    #[test]
    fn turning_away_masks_the_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Pose::identity();
        let set = refs(&mut rng, &[base, base]);
        let away = base.rotated_in_camera(&Vector3::y_axis(), std::f64::consts::PI);
        let cfg = tiny_config();
        let (maps, _) = warp_references(&set, &away, &cfg).unwrap();
        let rel = relative_pose(&base, &away).unwrap();
        let grid = project_feature_grid(&rel, &intrinsics(), 4, 4, cfg.plane_depth).unwrap();
        assert_eq!(grid.valid_fraction(), 0.0);
        assert!(maps.iter().all(|m| m.values().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn decode_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = UeNet::new(tiny_config(), shape()).unwrap();
        for _ in 0..100 {
            let mean: Vec<f64> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
            let var: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..50.0)).collect();
            let fused = FusedFeature {
                per_reference: vec![],
                weights: vec![],
                mean,
                var,
            };
            let pred = net.decode(&fused).unwrap();
            assert_eq!((pred.mu.len(), pred.var.len()), (8, 8));
            assert!(pred.var.iter().all(|v| *v >= VAR_FLOOR));
            let mean_var = pred.var.iter().sum::<f64>() / 8.0;
            assert!((pred.scalar_uncertainty - mean_var).abs() < 1e-9);
        }
    }

    #[test]
    fn default_widths() {
        let net = UeNet::new(
            UeConfig::default(),
            FeatureShape {
                height: 14,
                width: 14,
                channels: 64,
            },
        )
        .unwrap();
        let fused = FusedFeature {
            per_reference: vec![],
            weights: vec![],
            mean: vec![0.1; 512],
            var: vec![0.2; 512],
        };
        let pred = net.decode(&fused).unwrap();
        assert_eq!((pred.mu.len(), pred.var.len()), (512, 512));
    }

    #[test]
    fn predict_is_deterministic_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Pose::identity();
        let b = Pose::from_translation(Vector3::new(0.2, 0.0, 0.1));
        let set = refs(&mut rng, &[a, b]);
        let before = set.feature_maps.clone();
        let net = UeNet::new(tiny_config(), shape()).unwrap();
        let cand = Pose::from_translation(Vector3::new(0.1, 0.0, 0.3));
        let p1 = net.predict(&cand, &set).unwrap();
        let p2 = net.predict(&cand, &set).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(set.feature_maps, before);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Pose::identity();
        let b = Pose::from_translation(Vector3::new(0.3, 0.0, 0.2))
            .rotated_in_camera(&Vector3::y_axis(), 0.2);
        let set = refs(&mut rng, &[a, b]);
        let net = UeNet::new(tiny_config(), shape()).unwrap();
        let cand = Pose::from_translation(Vector3::new(0.1, 0.0, 0.1));
        let input = prepare_input(&set, &cand, net.config()).unwrap();
        let target: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
        let (_, grads) = net.loss_and_grad(&input, &target).unwrap();
        let mut probe = net.clone();
        let numeric = nn::numeric_gradient(net.params(), 1e-5, |p| {
            probe.params_mut().copy_from_slice(p);
            probe.loss_and_grad(&input, &target).unwrap().0
        });
        let err = nn::relative_error(&grads, &numeric);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ue.bin");
        let net = UeNet::new(tiny_config(), shape()).unwrap();
        let stats = NormalizationStats::fit(&[vec![0.0, 1.0], vec![1.0, 3.0]], 1e-3).unwrap();
        net.save_checkpoint(&path, Some(&stats), 3).unwrap();
        let (back, s) = UeNet::load_checkpoint(&path).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(s, Some(stats));
        let missing = UeNet::load_checkpoint(&dir.path().join("none.bin")).unwrap_err();
        assert!(matches!(missing, Error::MissingDependency(_)));
    }
}
