//! View synthesis behind a single [`Renderer`] trait: a procedural oracle room
//! for desk-scale runs and a file-exchange adapter for external processes.
//!
//! # Oracle scene
//!
//! World axes follow the camera convention with `+y` pointing down. The room
//! spans `x ∈ [-w/2, w/2]`, `z ∈ [-d/2, d/2]`, with the floor at `y = 0` and the
//! ceiling at `y = -h`. Each of the six planar regions is tiled into unit
//! squares; every tile has its own texture id and a colour derived from
//! `(seed, region, tile)`.
//!
//! # Exchange protocol
//!
//! The adapter writes `request-<tag>.json`:
//! `{"scene_id", "tag", "intrinsics", "poses": [[16 numbers], ...]}`.
//! The synthesizer writes `img-<tag>-<i>.png` for every pose and finally
//! `response-<tag>.json` = `{"images": ["img-<tag>-0.png", ...]}` in request
//! order. Images are read only after the response file exists.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::raster::Image;

/// Reported when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderRequest {
    pub poses: Vec<Pose>,
    pub intrinsics: Intrinsics,
    pub scene_id: String,
    pub tag: String,
}

impl RenderRequest {
    pub fn new(
        poses: Vec<Pose>,
        intrinsics: Intrinsics,
        scene_id: impl Into<String>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        ensure!(
            !poses.is_empty(),
            Validation,
            "render request needs at least one pose"
        );
        intrinsics.validate()?;
        Ok(Self {
            poses,
            intrinsics,
            scene_id: scene_id.into(),
            tag: tag.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthSource {
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub pose: Pose,
    pub image: Image,
    pub synth_source: SynthSource,
}

/// Anything that turns poses into images.
pub trait Renderer {
    fn render(&self, request: &RenderRequest) -> Result<Vec<RenderResult>>;
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Room extent along x (width), y (height) and z (depth).
    pub size: [f64; 3],
    pub tile_size: f64,
    pub seed: u64,
    pub background: [f32; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: [10.0, 3.0, 10.0],
            tile_size: 1.0,
            seed: 0,
            background: [0.0, 0.0, 0.0],
        }
    }
}

/// One finite rectangle: `origin + a·u + b·v` for `a ∈ [0, extent_u]`, `b ∈ [0, extent_v]`.
#[derive(Debug, Clone, Copy)]
struct Region {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    normal: Vector3<f64>,
    extent_u: f64,
    extent_v: f64,
}

/// First surface hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub region: usize,
    pub tile: (usize, usize),
    pub texture_id: u32,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.size.iter().all(|s| *s > 0.0 && s.is_finite()),
            Validation,
            "room size must be positive, got {:?}",
            self.size
        );
        ensure!(
            self.tile_size > 0.0,
            Validation,
            "tile size must be positive"
        );
        Ok(())
    }

    fn regions(&self) -> [Region; 6] {
        let [w, h, d] = self.size;
        let (x0, x1) = (-w / 2.0, w / 2.0);
        let (z0, z1) = (-d / 2.0, d / 2.0);
        let (y_ceil, y_floor) = (-h, 0.0);
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        let rect = |origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, eu, ev| Region {
            origin,
            u,
            v,
            normal: u.cross(&v).normalize(),
            extent_u: eu,
            extent_v: ev,
        };
        [
            // walls at z = d/2, x = w/2, z = -d/2, x = -w/2
            rect(Vector3::new(x0, y_ceil, z1), x, y, w, h),
            rect(Vector3::new(x1, y_ceil, z0), z, y, d, h),
            rect(Vector3::new(x0, y_ceil, z0), x, y, w, h),
            rect(Vector3::new(x0, y_ceil, z0), z, y, d, h),
            rect(Vector3::new(x0, y_floor, z0), x, z, w, d),
            rect(Vector3::new(x0, y_ceil, z0), x, z, w, d),
        ]
    }

    fn tiles_along(&self, extent: f64) -> usize {
        (extent / self.tile_size).ceil().max(1.0) as usize
    }

    /// Texture id of a tile; unique across the scene.
    pub fn texture_id(&self, region: usize, tile: (usize, usize)) -> u32 {
        (region as u32) << 16 | (tile.0 as u32) << 8 | tile.1 as u32
    }

    /// Base colour of a tile, each channel in `[0.1, 0.9]`.
    pub fn tile_colour(&self, texture_id: u32) -> [f32; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (texture_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let unit = rand::distr::Uniform::new(0.1f32, 0.9).expect("valid range");
        [
            unit.sample(&mut rng),
            unit.sample(&mut rng),
            unit.sample(&mut rng),
        ]
    }

    /// Nearest intersection of the ray `origin + t·dir`, `t > 0`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, r) in self.regions().iter().enumerate() {
            let denom = r.normal.dot(dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = r.normal.dot(&(r.origin - origin)) / denom;
            if t <= 1e-9 || best.is_some_and(|b| b.distance <= t) {
                continue;
            }
            let local = origin + dir * t - r.origin;
            let a = local.dot(&r.u);
            let b = local.dot(&r.v);
            if a < 0.0 || b < 0.0 || a > r.extent_u || b > r.extent_v {
                continue;
            }
            let nu = self.tiles_along(r.extent_u);
            let nv = self.tiles_along(r.extent_v);
            let tile = (
                ((a / self.tile_size) as usize).min(nu - 1),
                ((b / self.tile_size) as usize).min(nv - 1),
            );
            best = Some(Hit {
                distance: t,
                region: i,
                tile,
                texture_id: self.texture_id(i, tile),
            });
        }
        best
    }

    /// Texture id seen through the centre of every pixel (`None` = background).
    pub fn texture_ids(&self, pose: &Pose, intrinsics: &Intrinsics) -> Vec<Option<u32>> {
        let origin = *pose.translation();
        let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
        let mut out = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                let cam = intrinsics.unproject(u as f64, v as f64, 1.0);
                let dir = pose.rotation() * cam;
                out.push(self.cast(&origin, &dir).map(|hit| hit.texture_id));
            }
        }
        out
    }

    /// World-space centre of a tile.
    pub fn tile_centre(&self, region: usize, tile: (usize, usize)) -> Vector3<f64> {
        let r = self.regions()[region];
        let a = ((tile.0 as f64 + 0.5) * self.tile_size).min(r.extent_u);
        let b = ((tile.1 as f64 + 0.5) * self.tile_size).min(r.extent_v);
        r.origin + r.u * a + r.v * b
    }

    pub fn tile_counts(&self, region: usize) -> (usize, usize) {
        let r = self.regions()[region];
        (self.tiles_along(r.extent_u), self.tiles_along(r.extent_v))
    }
}

/// Deterministic ray-cast rendering with optional additive clipped Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRenderer {
    pub scene: SceneSpec,
    pub seed: u64,
    /// Standard deviation of the per-channel noise; 0 renders the clean scene.
    pub noise_level: f64,
}

impl OracleRenderer {
    pub fn new(scene: SceneSpec, seed: u64, noise_level: f64) -> Result<Self> {
        scene.validate()?;
        ensure!(
            noise_level >= 0.0 && noise_level.is_finite(),
            Validation,
            "noise level must be non-negative, got {noise_level}"
        );
        Ok(Self {
            scene,
            seed,
            noise_level,
        })
    }

    pub fn render_pose(&self, pose: &Pose, intrinsics: &Intrinsics) -> Image {
        let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
        let ids = self.scene.texture_ids(pose, intrinsics);
        let mut data = Vec::with_capacity(w * h * 3);
        for id in ids {
            let rgb = id.map_or(self.scene.background, |t| self.scene.tile_colour(t));
            data.extend_from_slice(&rgb);
        }
        if self.noise_level > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed(pose));
            let normal = Normal::new(0.0, self.noise_level).expect("finite std");
            for v in &mut data {
                *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Image::new(w, h, data).expect("buffer sized from intrinsics")
    }

    fn noise_seed(&self, pose: &Pose) -> u64 {
        // FNV-1a over the pose bits so the noise is a function of the inputs only
        let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ self.seed;
        for v in pose.to_row_major() {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }
}

impl Renderer for OracleRenderer {
    fn render(&self, request: &RenderRequest) -> Result<Vec<RenderResult>> {
        request.intrinsics.validate()?;
        Ok(request
            .poses
            .iter()
            .map(|pose| RenderResult {
                pose: *pose,
                image: self.render_pose(pose, &request.intrinsics),
                synth_source: SynthSource::Oracle,
            })
            .collect())
    }
}

/// Renders every request pose of the procedural scene.
pub fn render_oracle(
    request: &RenderRequest,
    scene: &SceneSpec,
    seed: u64,
    noise_level: f64,
) -> Result<Vec<RenderResult>> {
    OracleRenderer::new(scene.clone(), seed, noise_level)?.render(request)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub scene_id: String,
    pub tag: String,
    pub intrinsics: Intrinsics,
    pub poses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExchangeResponse {
    pub images: Vec<String>,
}

pub fn request_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("request-{tag}.json"))
}

pub fn response_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("response-{tag}.json"))
}

pub fn image_name(tag: &str, index: usize) -> String {
    format!("img-{tag}-{index}.png")
}

/// Writes `contents` to a temporary sibling, then renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Client side of the exchange protocol.
#[derive(Debug, Clone)]
pub struct ExternalRenderer {
    pub exchange_dir: PathBuf,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl ExternalRenderer {
    pub fn new(exchange_dir: impl Into<PathBuf>, timeout: Duration) -> Self {
        Self {
            exchange_dir: exchange_dir.into(),
            timeout,
            poll_interval: Duration::from_millis(20),
        }
    }

    fn missing_images(&self, request: &RenderRequest) -> Vec<usize> {
        (0..request.poses.len())
            .filter(|i| {
                !self
                    .exchange_dir
                    .join(image_name(&request.tag, *i))
                    .exists()
            })
            .collect()
    }

    fn read_response(&self, request: &RenderRequest, path: &Path) -> Result<Vec<RenderResult>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let response: ExchangeResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Render(format!("malformed response {}: {e}", path.display())))?;
        if response.images.len() != request.poses.len() {
            return Err(Error::Render(format!(
                "response {} lists {} images for {} poses",
                path.display(),
                response.images.len(),
                request.poses.len()
            )));
        }
        let (w, h) = (
            request.intrinsics.width as usize,
            request.intrinsics.height as usize,
        );
        response
            .images
            .iter()
            .zip(&request.poses)
            .enumerate()
            .map(|(i, (name, pose))| {
                let img_path = self.exchange_dir.join(name);
                let image = Image::load(&img_path).map_err(|e| {
                    Error::Render(format!("image {i} ({}): {e}", img_path.display()))
                })?;
                if image.width() != w || image.height() != h {
                    return Err(Error::Render(format!(
                        "image {i} is {}x{}, request asked for {w}x{h}",
                        image.width(),
                        image.height()
                    )));
                }
                Ok(RenderResult {
                    pose: *pose,
                    image,
                    synth_source: SynthSource::External,
                })
            })
            .collect()
    }
}

impl Renderer for ExternalRenderer {
    fn render(&self, request: &RenderRequest) -> Result<Vec<RenderResult>> {
        fs::create_dir_all(&self.exchange_dir).map_err(|e| Error::io(&self.exchange_dir, e))?;
        let body = ExchangeRequest {
            scene_id: request.scene_id.clone(),
            tag: request.tag.clone(),
            intrinsics: request.intrinsics,
            poses: request
                .poses
                .iter()
                .map(|p| p.to_row_major().to_vec())
                .collect(),
        };
        let req_path = request_path(&self.exchange_dir, &request.tag);
        write_atomic(&req_path, serde_json::to_string_pretty(&body)?.as_bytes())?;
        let resp_path = response_path(&self.exchange_dir, &request.tag);
        let start = Instant::now();
        loop {
            if resp_path.exists() {
                return self.read_response(request, &resp_path);
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::RenderTimeout {
                    seconds: self.timeout.as_secs_f64(),
                    missing: self.missing_images(request),
                });
            }
            thread::sleep(self.poll_interval);
        }
    }
}

/// Responder-side helper: writes the images, then the response index.
pub fn write_response(dir: &Path, tag: &str, images: &[Image]) -> Result<()> {
    let mut names = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let name = image_name(tag, i);
        img.save_png(&dir.join(&name))?;
        names.push(name);
    }
    let body = serde_json::to_string(&ExchangeResponse { images: names })?;
    write_atomic(&response_path(dir, tag), body.as_bytes())
}

/// Responder-side helper: parses a request file into poses and intrinsics.
pub fn read_request(path: &Path) -> Result<(Vec<Pose>, ExchangeRequest)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let req: ExchangeRequest = serde_json::from_str(&text)?;
    let poses = req
        .poses
        .iter()
        .map(|p| Pose::from_row_major(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((poses, req))
}
