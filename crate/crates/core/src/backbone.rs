//! Feature extractor interface shared by retrieval and the uncertainty network,
//! plus a small trainable convolutional backbone for desk-scale runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{self, Activation, Conv3x3, Linear, ParamLayout};
use crate::raster::Image;

/// `H × W × C` feature grid (row-major, channels innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
    source_id: String,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        ensure!(
            values.len() == height * width * channels,
            Validation,
            "feature map holds {} values, expected {height}x{width}x{channels}",
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Validation,
            "feature map contains non-finite values"
        );
        Ok(Self {
            height,
            width,
            channels,
            values,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> FeatureShape {
        FeatureShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.values[o..o + self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Global image descriptor used for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
    normalized: bool,
}

impl Descriptor {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// Scales to unit L2 norm; a zero vector stays zero.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = nn::l2_norm(&values);
        let values = if norm > 0.0 {
            values.into_iter().map(|v| v / norm).collect()
        } else {
            values
        };
        Self {
            values,
            normalized: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Cosine similarity; the plain dot product when both sides are unit-normalised.
pub fn similarity(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        Validation,
        "descriptor dimensions differ: {} vs {}",
        a.dim(),
        b.dim()
    );
    let d = nn::dot(a.values(), b.values());
    if a.is_normalized() && b.is_normalized() {
        return Ok(d.clamp(-1.0, 1.0));
    }
    let denom = nn::l2_norm(a.values()) * nn::l2_norm(b.values());
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((d / denom).clamp(-1.0, 1.0))
}

/// Evaluation-mode interface every feature extractor adapter implements.
///
/// Implementations must be deterministic for a fixed parameter state and
/// always return feature maps of [`Backbone::feature_shape`].
pub trait Backbone: Send + Sync {
    /// Expected `(width, height)` of input images.
    fn input_size(&self) -> (usize, usize);

    fn feature_shape(&self) -> FeatureShape;

    fn descriptor_dim(&self) -> usize;

    fn normalizes(&self) -> bool;

    fn extract_feature_map(&self, image: &Image, source_id: &str) -> Result<FeatureMap>;

    fn describe(&self, features: &FeatureMap) -> Result<Descriptor>;

    fn embed(&self, image: &Image) -> Result<Descriptor> {
        let fm = self.extract_feature_map(image, "")?;
        self.describe(&fm)
    }
}

/// Backbones whose parameters can be trained by backpropagation.
pub trait TrainableBackbone: Backbone {
    type Trace;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Forward pass that records what [`TrainableBackbone::backward`] needs.
    fn forward_trace(&self, image: &Image) -> Result<(Descriptor, Self::Trace)>;

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂descriptor`.
    fn backward(&self, trace: &Self::Trace, d_descriptor: &[f64], grads: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskBackboneConfig {
    /// Square input resolution in pixels.
    pub input_size: usize,
    /// Output channels of each `conv3x3 → activation → avgpool2` stage.
    pub stage_channels: Vec<usize>,
    /// The descriptor head average-pools the feature map onto a `P × P` grid
    /// before its linear layer. `P = 1` makes the head pure global pooling,
    /// which is invariant to permutations of feature cells.
    pub pool_grid: usize,
    pub descriptor_dim: usize,
    pub normalize: bool,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for DeskBackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            stage_channels: vec![16, 32, 64, 64],
            pool_grid: 2,
            descriptor_dim: 512,
            normalize: true,
            activation: Activation::Silu,
            seed: 0,
        }
    }
}

impl DeskBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.stage_channels.is_empty(),
            Config,
            "backbone needs at least one stage"
        );
        ensure!(
            self.descriptor_dim > 0,
            Config,
            "descriptor_dim must be positive"
        );
        let side = self.feature_side();
        ensure!(
            side >= 1
                && self
                    .input_size
                    .is_multiple_of(1 << self.stage_channels.len()),
            Config,
            "input size {} must be divisible by 2^{}",
            self.input_size,
            self.stage_channels.len()
        );
        ensure!(
            self.pool_grid >= 1 && self.pool_grid <= side,
            Config,
            "pool grid {} must lie in [1, {side}]",
            self.pool_grid
        );
        Ok(())
    }

    pub fn feature_side(&self) -> usize {
        self.input_size >> self.stage_channels.len()
    }
}

/// Small convolutional stack with a pooled linear descriptor head.
#[derive(Debug, Clone)]
pub struct DeskBackbone {
    config: DeskBackboneConfig,
    convs: Vec<Conv3x3>,
    head: Linear,
    params: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct DeskTrace {
    conv_inputs: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    raw: Vec<f64>,
    feature_side: usize,
}

impl DeskBackbone {
    pub fn new(config: DeskBackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let mut prev = 3;
        let convs: Vec<Conv3x3> = config
            .stage_channels
            .iter()
            .map(|&c| {
                let conv = layout.conv3x3(prev, c);
                prev = c;
                conv
            })
            .collect();
        let head = layout.linear(
            config.pool_grid * config.pool_grid * prev,
            config.descriptor_dim,
        );
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for conv in &convs {
            conv.init(&mut params, &mut rng);
        }
        head.init(&mut params, &mut rng, 1.0);
        Ok(Self {
            config,
            convs,
            head,
            params,
        })
    }

    pub fn config(&self) -> &DeskBackboneConfig {
        &self.config
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.input_size;
        ensure!(
            image.width() == s && image.height() == s,
            Validation,
            "backbone expects {s}x{s} input, got {}x{}",
            image.width(),
            image.height()
        );
        Ok(())
    }

    fn image_tensor(image: &Image) -> Vec<f64> {
        image.data().iter().map(|v| *v as f64 - 0.5).collect()
    }

    fn run_stages(&self, image: &Image, mut trace: Option<&mut DeskTrace>) -> Vec<f64> {
        let act = self.config.activation;
        let mut x = Self::image_tensor(image);
        let mut side = self.config.input_size;
        for conv in &self.convs {
            let pre = conv.forward(&self.params, &x, side, side);
            let activated: Vec<f64> = pre.iter().map(|v| act.apply(*v)).collect();
            let (pooled, next, _) = nn::avg_pool2(&activated, side, side, conv.out_ch);
            if let Some(t) = trace.as_deref_mut() {
                t.conv_inputs.push(std::mem::take(&mut x));
                t.conv_pre.push(pre);
            }
            x = pooled;
            side = next;
        }
        x
    }

    /// Block boundaries of the adaptive pooling grid along one axis.
    fn pool_bounds(&self) -> Vec<(usize, usize)> {
        let side = self.config.feature_side();
        let p = self.config.pool_grid;
        (0..p).map(|i| (i * side / p, (i + 1) * side / p)).collect()
    }

    fn pool_features(&self, fm: &[f64], channels: usize) -> Vec<f64> {
        let side = self.config.feature_side();
        let bounds = self.pool_bounds();
        let mut out = Vec::with_capacity(bounds.len() * bounds.len() * channels);
        for &(y0, y1) in &bounds {
            for &(x0, x1) in &bounds {
                let mut acc = vec![0.0; channels];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let o = (y * side + x) * channels;
                        for (a, v) in acc.iter_mut().zip(&fm[o..o + channels]) {
                            *a += v;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                out.extend(acc.into_iter().map(|a| a / n));
            }
        }
        out
    }

    fn pool_backward(&self, d_pooled: &[f64], channels: usize) -> Vec<f64> {
        let side = self.config.feature_side();
        let bounds = self.pool_bounds();
        let mut d = vec![0.0; side * side * channels];
        let mut block = 0;
        for &(y0, y1) in &bounds {
            for &(x0, x1) in &bounds {
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let g = &d_pooled[block * channels..(block + 1) * channels];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let o = (y * side + x) * channels;
                        for (dv, gv) in d[o..o + channels].iter_mut().zip(g) {
                            *dv += gv / n;
                        }
                    }
                }
                block += 1;
            }
        }
        d
    }

    fn head_forward(&self, pooled: &[f64]) -> (Vec<f64>, Descriptor) {
        let raw = self.head.forward(&self.params, pooled);
        let desc = if self.config.normalize {
            Descriptor::normalized(raw.clone())
        } else {
            Descriptor::new(raw.clone())
        };
        (raw, desc)
    }

    /// Writes `<path>` (little-endian f64 parameters) and `<path>.meta.json`.
    pub fn save_checkpoint(&self, path: &Path, seed: u64) -> Result<()> {
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = self.config.feature_side();
        let meta = BackboneMetadata {
            kind: "desk".into(),
            descriptor_dim: self.config.descriptor_dim,
            feature_shape: self.feature_shape(),
            input_resolution: [side << self.convs.len(), side << self.convs.len()],
            normalized: self.config.normalize,
            param_count: self.params.len(),
            seed,
            config: self.config.clone(),
        };
        let meta_path = metadata_path(path);
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&meta_path, text).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let meta_path = metadata_path(path);
        if !path.exists() || !meta_path.exists() {
            return Err(Error::MissingDependency(format!(
                "backbone checkpoint {} (or its metadata) not found; run train-vpr first",
                path.display()
            )));
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BackboneMetadata = serde_json::from_str(&text)?;
        ensure!(
            meta.kind == "desk",
            Validation,
            "unsupported backbone kind {:?}",
            meta.kind
        );
        let mut model = Self::new(meta.config)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ensure!(
            bytes.len() == model.params.len() * 8,
            Validation,
            "checkpoint {} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            model.params.len() * 8
        );
        for (p, chunk) in model.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(model)
    }
}

/// Sidecar describing a backbone checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneMetadata {
    pub kind: String,
    pub descriptor_dim: usize,
    pub feature_shape: FeatureShape,
    pub input_resolution: [usize; 2],
    pub normalized: bool,
    pub param_count: usize,
    pub seed: u64,
    pub config: DeskBackboneConfig,
}

pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Backbone for DeskBackbone {
    fn input_size(&self) -> (usize, usize) {
        (self.config.input_size, self.config.input_size)
    }

    fn feature_shape(&self) -> FeatureShape {
        let side = self.config.feature_side();
        FeatureShape {
            height: side,
            width: side,
            channels: *self.config.stage_channels.last().expect("non-empty stages"),
        }
    }

    fn descriptor_dim(&self) -> usize {
        self.config.descriptor_dim
    }

    fn normalizes(&self) -> bool {
        self.config.normalize
    }

    fn extract_feature_map(&self, image: &Image, source_id: &str) -> Result<FeatureMap> {
        self.check_image(image)?;
        let values = self.run_stages(image, None);
        let s = self.feature_shape();
        FeatureMap::new(s.height, s.width, s.channels, values, source_id)
    }

    fn describe(&self, features: &FeatureMap) -> Result<Descriptor> {
        ensure!(
            features.shape() == self.feature_shape(),
            Validation,
            "feature map shape {:?} does not match backbone {:?}",
            features.shape(),
            self.feature_shape()
        );
        let pooled = self.pool_features(features.values(), features.channels());
        Ok(self.head_forward(&pooled).1)
    }
}

impl TrainableBackbone for DeskBackbone {
    type Trace = DeskTrace;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_trace(&self, image: &Image) -> Result<(Descriptor, DeskTrace)> {
        self.check_image(image)?;
        let mut trace = DeskTrace {
            conv_inputs: Vec::with_capacity(self.convs.len()),
            conv_pre: Vec::with_capacity(self.convs.len()),
            pooled: Vec::new(),
            raw: Vec::new(),
            feature_side: self.config.feature_side(),
        };
        let fm = self.run_stages(image, Some(&mut trace));
        let channels = self.feature_shape().channels;
        trace.pooled = self.pool_features(&fm, channels);
        let (raw, desc) = self.head_forward(&trace.pooled);
        trace.raw = raw;
        Ok((desc, trace))
    }

    fn backward(&self, trace: &DeskTrace, d_descriptor: &[f64], grads: &mut [f64]) {
        let d_raw = if self.config.normalize {
            let norm = nn::l2_norm(&trace.raw).max(1e-12);
            let y: Vec<f64> = trace.raw.iter().map(|v| v / norm).collect();
            let proj = nn::dot(&y, d_descriptor);
            d_descriptor
                .iter()
                .zip(&y)
                .map(|(g, yv)| (g - yv * proj) / norm)
                .collect()
        } else {
            d_descriptor.to_vec()
        };
        let d_pooled = self
            .head
            .backward(&self.params, &trace.pooled, &d_raw, grads);
        let channels = self.feature_shape().channels;
        let mut d = self.pool_backward(&d_pooled, channels);
        let mut side = trace.feature_side;
        let act = self.config.activation;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let in_side = side * 2;
            let mut d_act = nn::avg_pool2_backward(&d, in_side, in_side, conv.out_ch);
            for (g, pre) in d_act.iter_mut().zip(&trace.conv_pre[i]) {
                *g *= act.derivative(*pre);
            }
            d = conv.backward(
                &self.params,
                &trace.conv_inputs[i],
                in_side,
                in_side,
                &d_act,
                grads,
            );
            side = in_side;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{numeric_gradient, relative_error};
    use rand::Rng;

    fn tiny_config() -> DeskBackboneConfig {
        DeskBackboneConfig {
            input_size: 16,
            stage_channels: vec![4, 6],
            pool_grid: 2,
            descriptor_dim: 8,
            normalize: true,
            activation: Activation::Silu,
            seed: 7,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
        let data = (0..side * side * 3).map(|_| rng.random::<f32>()).collect();
        Image::new(side, side, data).unwrap()
    }

    #[test]
    fn zero_image_is_bitwise_stable() {
        let bb = DeskBackbone::new(tiny_config()).unwrap();
        let img = Image::filled(16, 16, [0.0; 3]);
        let a = bb.extract_feature_map(&img, "z").unwrap();
        let b = bb.extract_feature_map(&img, "z").unwrap();
        assert_eq!(a, b);
        let copy = DeskBackbone::new(tiny_config()).unwrap();
        assert_eq!(copy.extract_feature_map(&img, "z").unwrap(), a);
    }

    #[test]
    fn feature_shape_matches_configuration() {
        let bb = DeskBackbone::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let fm = bb
                .extract_feature_map(&random_image(&mut rng, 16), "r")
                .unwrap();
            assert_eq!((fm.height(), fm.width(), fm.channels()), (4, 4, 6));
        }
        let default = DeskBackboneConfig::default();
        assert_eq!(default.feature_side(), 14);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let bb = DeskBackbone::new(tiny_config()).unwrap();
        let img = Image::filled(15, 16, [0.0; 3]);
        assert!(matches!(
            bb.extract_feature_map(&img, "x"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn normalized_descriptor_has_unit_norm() {
        let bb = DeskBackbone::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = bb.embed(&random_image(&mut rng, 16)).unwrap();
        assert!((nn::l2_norm(d.values()) - 1.0).abs() < 1e-6);
        assert_eq!(d.dim(), 8);
    }

    #[test]
    fn head_is_sensitive_to_cell_permutation_unless_pure_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 16);
        let shuffled = |fm: &FeatureMap| {
            // swap the top-left and bottom-right cells
            let (h, w, c) = (fm.height(), fm.width(), fm.channels());
            let mut v = fm.values().to_vec();
            let last = (h * w - 1) * c;
            for i in 0..c {
                v.swap(i, last + i);
            }
            FeatureMap::new(h, w, c, v, "s").unwrap()
        };
        let bb = DeskBackbone::new(tiny_config()).unwrap();
        let fm = bb.extract_feature_map(&img, "a").unwrap();
        assert_ne!(
            bb.describe(&fm).unwrap(),
            bb.describe(&shuffled(&fm)).unwrap()
        );

        let pooled = DeskBackbone::new(DeskBackboneConfig {
            pool_grid: 1,
            ..tiny_config()
        })
        .unwrap();
        let fm = pooled.extract_feature_map(&img, "a").unwrap();
        let a = pooled.describe(&fm).unwrap();
        let b = pooled.describe(&shuffled(&fm)).unwrap();
        assert!(relative_error(a.values(), b.values()) < 1e-12);
    }

    #[test]
    fn descriptor_gradient_matches_finite_differences() {
        let mut bb = DeskBackbone::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 16);
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, trace) = bb.forward_trace(&img).unwrap();
        let mut grads = vec![0.0; bb.params().len()];
        bb.backward(&trace, &w, &mut grads);
        let base = bb.params().to_vec();
        let numeric = numeric_gradient(&base, 1e-5, |p| {
            bb.params_mut().copy_from_slice(p);
            nn::dot(bb.embed(&img).unwrap().values(), &w)
        });
        assert!(relative_error(&grads, &numeric) < 1e-3);
    }

    #[test]
    fn similarity_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dot = 0.0;
            let (mut na, mut nb) = (0.0, 0.0);
            for i in 0..16 {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            let expected = dot / (na.sqrt() * nb.sqrt());
            let s = similarity(&Descriptor::new(a.clone()), &Descriptor::new(b.clone())).unwrap();
            assert!((s - expected).abs() < 1e-6);
            let sn = similarity(&Descriptor::normalized(a), &Descriptor::normalized(b)).unwrap();
            assert!((sn - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn similarity_edge_cases() {
        let e1 = Descriptor::normalized(vec![1.0, 0.0]);
        let e2 = Descriptor::normalized(vec![0.0, 1.0]);
        assert_eq!(similarity(&e1, &e1).unwrap(), 1.0);
        assert_eq!(similarity(&e1, &e2).unwrap(), 0.0);
        let e3 = Descriptor::normalized(vec![1.0, 0.0, 0.0]);
        assert!(similarity(&e1, &e3).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vpr.bin");
        let bb = DeskBackbone::new(tiny_config()).unwrap();
        bb.save_checkpoint(&path, 42).unwrap();
        let meta: BackboneMetadata =
            serde_json::from_str(&fs::read_to_string(metadata_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.descriptor_dim, 8);
        assert_eq!(meta.input_resolution, [16, 16]);
        assert_eq!(meta.seed, 42);
        let back = DeskBackbone::load_checkpoint(&path).unwrap();
        assert_eq!(back.params(), bb.params());
        let missing = DeskBackbone::load_checkpoint(&dir.path().join("nope.bin"));
        assert!(matches!(missing, Err(Error::MissingDependency(_))));
    }
}
