//! Camera poses, pinhole intrinsics, positional encoding and the
//! reference-to-candidate feature warp.
//!
//! # Conventions
//!
//! A [`Pose`] is **world-from-camera**: `pose.transform_point(p_cam)` returns the
//! world coordinates of a point expressed in that camera's frame. Camera frames
//! follow the pinhole/OpenCV layout: `+x` right, `+y` down, `+z` forward along
//! the optical axis.
//!
//! [`relative_pose`]`(reference, candidate)` returns `T_rc = candidate⁻¹ ∘ reference`,
//! which maps a point expressed in the reference camera frame into the
//! candidate camera frame.
//!
//! Feature-plane points are lifted onto the fronto-parallel plane `z = plane_depth`
//! of the reference camera, moved with `T_rc` and perspective-divided with the
//! intrinsics rescaled to the feature lattice (cell centres aligned with pixel
//! centres).

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{ensure, Error, Result};

/// Tolerance used for the orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Rigid transform, world-from-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, rejecting rotations that are not proper orthonormal matrices.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        ensure!(
            translation.iter().all(|v| v.is_finite()),
            Validation,
            "translation must be finite, got {translation:?}"
        );
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Builds a pose from an exact rotation, skipping validation.
    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Parses a row-major 4×4 homogeneous matrix.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        ensure!(
            values.len() == 16,
            Validation,
            "pose matrix needs 16 values, got {}",
            values.len()
        );
        let bottom = [values[12], values[13], values[14], values[15]];
        let expected = [0.0, 0.0, 0.0, 1.0];
        ensure!(
            bottom
                .iter()
                .zip(expected)
                .all(|(a, b)| (a - b).abs() <= ROTATION_TOLERANCE),
            Validation,
            "pose matrix bottom row must be [0, 0, 0, 1], got {bottom:?}"
        );
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let delta = self.rotation.transpose() * other.rotation;
        let cos = ((delta.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos()
    }

    /// Camera forward axis (`+z`) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Rotates the camera by `angle` radians about a camera-frame `axis`.
    pub fn rotated_in_camera(&self, axis: &Unit<Vector3<f64>>, angle: f64) -> Pose {
        let delta = Rotation3::from_axis_angle(axis, angle);
        Pose {
            rotation: self.rotation * delta.matrix(),
            translation: self.translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)
    }
}

fn check_rotation(rotation: &Matrix3<f64>) -> Result<()> {
    ensure!(
        rotation.iter().all(|v| v.is_finite()),
        Validation,
        "rotation must be finite"
    );
    let gram = rotation.transpose() * rotation;
    let deviation = (gram - Matrix3::identity()).abs().max();
    ensure!(
        deviation <= ROTATION_TOLERANCE,
        Validation,
        "rotation is not orthonormal: max |RᵀR - I| = {deviation:.3e}"
    );
    let det = rotation.determinant();
    ensure!(
        (det - 1.0).abs() <= ROTATION_TOLERANCE,
        Validation,
        "rotation determinant is {det:.6}, expected +1"
    );
    Ok(())
}

/// Transform from the reference camera frame to the candidate camera frame.
pub fn relative_pose(reference: &Pose, candidate: &Pose) -> Result<Pose> {
    reference.validate()?;
    candidate.validate()?;
    Ok(candidate.inverse().compose(reference))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intrinsics = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intrinsics.validate()?;
        Ok(intrinsics)
    }

    /// Square-pixel camera with the principal point at the image centre.
    pub fn from_fov(horizontal_fov: f64, width: u32, height: u32) -> Result<Self> {
        ensure!(
            horizontal_fov > 0.0 && horizontal_fov < std::f64::consts::PI,
            Validation,
            "field of view must lie in (0, π), got {horizontal_fov}"
        );
        let f = width as f64 / (2.0 * (horizontal_fov / 2.0).tan());
        Self::new(
            f,
            f,
            width as f64 / 2.0 - 0.5,
            height as f64 / 2.0 - 0.5,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite(),
            Validation,
            "focal lengths must be positive, got fx={} fy={}",
            self.fx,
            self.fy
        );
        ensure!(
            self.width > 0 && self.height > 0,
            Validation,
            "image size must be non-zero"
        );
        ensure!(
            (0.0..self.width as f64).contains(&self.cx)
                && (0.0..self.height as f64).contains(&self.cy),
            Validation,
            "principal point ({}, {}) outside {}x{} image",
            self.cx,
            self.cy,
            self.width,
            self.height
        );
        Ok(())
    }

    /// Rescales to another raster size keeping pixel centres aligned.
    pub fn scaled_to(&self, width: u32, height: u32) -> Intrinsics {
        if width == self.width && height == self.height {
            return *self;
        }
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    /// Projects a camera-frame point; `None` when it lies on or behind the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Option<[f64; 2]> {
        if point.z <= 0.0 {
            return None;
        }
        Some([
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ])
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    pub fn contains(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] < self.width as f64 && uv[1] >= 0.0 && uv[1] < self.height as f64
    }
}

/// NeRF-style frequency encoding of a 3-vector.
///
/// Per axis the layout is `sin(2⁰πp), cos(2⁰πp), …, sin(2^{B-1}πp), cos(2^{B-1}πp)`.
pub fn encode_position(p: &Vector3<f64>, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * bands);
    for axis in 0..3 {
        let mut freq = std::f64::consts::PI;
        for _ in 0..bands {
            let (s, c) = (freq * p[axis]).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRepr {
    /// Row-major flattened 3×3 matrix, 9 values.
    #[default]
    Matrix,
    /// Unit quaternion `(w, x, y, z)` with `w ≥ 0`, 4 values.
    Quaternion,
}

impl RotationRepr {
    pub fn len(self) -> usize {
        match self {
            RotationRepr::Matrix => 9,
            RotationRepr::Quaternion => 4,
        }
    }
}

/// Encoded relative pose fed to the fusion MLP alongside image features.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFeature {
    pub encoded_translation: Vec<f64>,
    pub rotation: Vec<f64>,
}

impl PoseFeature {
    pub fn new(relative: &Pose, bands: usize, repr: RotationRepr) -> Self {
        let rotation = match repr {
            RotationRepr::Matrix => {
                let r = relative.rotation();
                (0..3)
                    .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
                    .collect()
            }
            RotationRepr::Quaternion => {
                let q = relative.quaternion();
                let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
                vec![sign * q.w, sign * q.i, sign * q.j, sign * q.k]
            }
        };
        Self {
            encoded_translation: encode_position(relative.translation(), bands),
            rotation,
        }
    }

    pub fn len(&self) -> usize {
        self.encoded_translation.len() + self.rotation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.encoded_translation.clone();
        v.extend_from_slice(&self.rotation);
        v
    }
}

/// Reference lattice reprojected into the candidate view.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGrid {
    pub height: usize,
    pub width: usize,
    /// `(x, y)` in lattice units, row-major over the source lattice.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl ProjectedGrid {
    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len() as f64
    }
}

/// Lifts every lattice point to `z = plane_depth` in the reference frame,
/// moves it with `relative` and projects it into the candidate lattice.
///
/// `intrinsics` describe the full image; they are rescaled to the `height × width`
/// lattice. Points with non-positive depth after the transform, or landing
/// outside `[0, W) × [0, H)`, are masked.
pub fn project_feature_grid(
    relative: &Pose,
    intrinsics: &Intrinsics,
    height: usize,
    width: usize,
    plane_depth: f64,
) -> Result<ProjectedGrid> {
    ensure!(
        plane_depth > 0.0 && plane_depth.is_finite(),
        Validation,
        "plane depth must be positive, got {plane_depth}"
    );
    let k = intrinsics.scaled_to(width as u32, height as u32);
    let mut coords = Vec::with_capacity(height * width);
    let mut valid = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let lifted = k.unproject(x as f64, y as f64, plane_depth);
            let moved = relative.transform_point(&lifted);
            match k.project(&moved).map(|uv| uv.map(snap_edge)) {
                Some(uv) if k.contains(uv) => {
                    coords.push(uv);
                    valid.push(true);
                }
                Some(uv) => {
                    coords.push(uv);
                    valid.push(false);
                }
                None => {
                    coords.push([f64::NAN, f64::NAN]);
                    valid.push(false);
                }
            }
        }
    }
    Ok(ProjectedGrid {
        height,
        width,
        coords,
        valid,
    })
}

/// Round-off can push a lattice point on the lower image edge just below zero.
fn snap_edge(v: f64) -> f64 {
    if v < 0.0 && v > -1e-9 {
        0.0
    } else {
        v
    }
}

/// Bilinear lookup of `features` at every valid coordinate; masked cells are zero.
///
/// Neighbours past the last row/column are clamped to the border.
pub fn bilinear_sample(features: &FeatureMap, grid: &ProjectedGrid) -> Result<FeatureMap> {
    if features.height() != grid.height || features.width() != grid.width {
        return Err(Error::Validation(format!(
            "feature map is {}x{} but coordinate field is {}x{}",
            features.height(),
            features.width(),
            grid.height,
            grid.width
        )));
    }
    let (h, w, c) = (features.height(), features.width(), features.channels());
    let src = features.values();
    let mut out = vec![0.0; h * w * c];
    for (cell, (uv, ok)) in grid.coords.iter().zip(&grid.valid).enumerate() {
        if !*ok {
            continue;
        }
        ensure!(
            uv[0].is_finite() && uv[1].is_finite(),
            Validation,
            "non-finite coordinate at valid cell {cell}"
        );
        let x0 = uv[0].floor();
        let y0 = uv[1].floor();
        let ax = uv[0] - x0;
        let ay = uv[1] - y0;
        let x0 = (x0 as usize).min(w - 1);
        let y0 = (y0 as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let taps = [
            ((1.0 - ax) * (1.0 - ay), y0 * w + x0),
            (ax * (1.0 - ay), y0 * w + x1),
            ((1.0 - ax) * ay, y1 * w + x0),
            (ax * ay, y1 * w + x1),
        ];
        let dst = &mut out[cell * c..(cell + 1) * c];
        for (weight, idx) in taps {
            if weight == 0.0 {
                continue;
            }
            let s = &src[idx * c..(idx + 1) * c];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += weight * v;
            }
        }
    }
    FeatureMap::new(h, w, c, out, features.source_id())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0) + 1e-3,
        ));
        let angle = rng.random_range(-3.0..3.0);
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Pose::from_parts(Rotation3::from_axis_angle(&axis, angle), t)
    }

    fn max_diff(a: &Pose, b: &Pose) -> f64 {
        a.to_row_major()
            .iter()
            .zip(b.to_row_major())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn self_relative_pose_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pose(&mut rng);
        let rel = relative_pose(&p, &p).unwrap();
        assert!(max_diff(&rel, &Pose::identity()) < 1e-12);
    }

    #[test]
    fn relative_pose_of_forward_translation() {
        let cand = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let rel = relative_pose(&Pose::identity(), &cand).unwrap();
        assert_eq!(*rel.translation(), Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(*rel.rotation(), Matrix3::identity());
    }

    #[test]
    fn relative_pose_transports_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let p_a = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            // brute force: camera A -> world -> camera B
            let world = a.rotation() * p_a + a.translation();
            let p_b = b.rotation().transpose() * (world - b.translation());
            let rel = relative_pose(&a, &b).unwrap();
            assert!((rel.transform_point(&p_a) - p_b).norm() < 1e-6);
        }
    }

    #[test]
    fn group_axioms_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            assert!(max_diff(&a.inverse().compose(&a), &Pose::identity()) < 1e-6);
            assert!(max_diff(&a.compose(&a.inverse()), &Pose::identity()) < 1e-6);
            assert!(max_diff(&a.compose(&Pose::identity()), &a) < 1e-12);
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!(max_diff(&left, &right) < 1e-6);
            assert!(a.compose(&b).validate().is_ok());
        }
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 1.1;
        let err = Pose::new(m, Vector3::zeros()).unwrap_err();
        assert!(err.to_string().contains("orthonormal"));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let err = Pose::new(reflect, Vector3::zeros()).unwrap_err();
        assert!(err.to_string().contains("determinant"));
    }

    #[test]
    fn row_major_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_pose(&mut rng);
        let q = Pose::from_row_major(&p.to_row_major()).unwrap();
        assert_eq!(p, q);
        let mut bad = p.to_row_major();
        bad[15] = 2.0;
        assert!(Pose::from_row_major(&bad).is_err());
    }

    #[test]
    fn encoding_of_zero_is_sin_zero_cos_one() {
        let e = encode_position(&Vector3::zeros(), 2);
        assert_eq!(e.len(), 12);
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn encoding_half_unit_on_x() {
        let e = encode_position(&Vector3::new(0.5, 0.0, 0.0), 1);
        assert!(close(e[0], 1.0, 1e-12));
        assert!(close(e[1], 0.0, 1e-12));
        assert_eq!(&e[2..], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_band_doubling_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bands = 6;
        for _ in 0..50 {
            let p = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let e = encode_position(&p, bands);
            let e2 = encode_position(&(p * 2.0), bands);
            for axis in 0..3 {
                for b in 1..bands {
                    let hi = axis * 2 * bands + 2 * b;
                    let lo = axis * 2 * bands + 2 * (b - 1);
                    assert!(close(e[hi], e2[lo], 1e-9));
                    assert!(close(e[hi + 1], e2[lo + 1], 1e-9));
                }
            }
        }
    }

    #[test]
    fn pose_feature_lengths() {
        let rel = Pose::identity();
        let f = PoseFeature::new(&rel, 10, RotationRepr::Matrix);
        assert_eq!(f.len(), 69);
        let q = PoseFeature::new(&rel, 4, RotationRepr::Quaternion);
        assert_eq!(q.len(), 28);
        assert_eq!(q.rotation, vec![1.0, 0.0, 0.0, 0.0]);
    }

    fn grid_intrinsics() -> Intrinsics {
        Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap()
    }

    #[test]
    fn identity_projection_reproduces_lattice() {
        let g = project_feature_grid(&Pose::identity(), &grid_intrinsics(), 8, 8, 1.0).unwrap();
        assert!(g.valid.iter().all(|v| *v));
        for y in 0..8 {
            for x in 0..8 {
                let uv = g.coords[y * 8 + x];
                assert!(close(uv[0], x as f64, 1e-9) && close(uv[1], y as f64, 1e-9));
            }
        }
    }

    #[test]
    fn forward_translation_scales_about_principal_point() {
        let k = grid_intrinsics();
        let depth = 2.0;
        let delta = 0.5;
        let rel = Pose::from_translation(Vector3::new(0.0, 0.0, -delta));
        let g = project_feature_grid(&rel, &k, 8, 8, depth).unwrap();
        let scale = depth / (depth - delta);
        for y in 0..8 {
            for x in 0..8 {
                let uv = g.coords[y * 8 + x];
                let ex = k.cx + (x as f64 - k.cx) * scale;
                let ey = k.cy + (y as f64 - k.cy) * scale;
                assert!(close(uv[0], ex, 1e-9) && close(uv[1], ey, 1e-9));
                assert_eq!(g.valid[y * 8 + x], k.contains([ex, ey]));
            }
        }
    }

    #[test]
    fn half_turn_about_y_masks_everything() {
        let rel = Pose::from_parts(
            Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::PI),
            Vector3::zeros(),
        );
        let g = project_feature_grid(&rel, &grid_intrinsics(), 8, 8, 1.0).unwrap();
        assert!(g.valid.iter().all(|v| !v));
    }

    #[test]
    fn plane_depth_must_be_positive() {
        assert!(project_feature_grid(&Pose::identity(), &grid_intrinsics(), 8, 8, 0.0).is_err());
    }

    fn ramp_map(h: usize, w: usize, c: usize) -> FeatureMap {
        let values = (0..h * w * c).map(|i| i as f64 * 0.5 - 3.0).collect();
        FeatureMap::new(h, w, c, values, "ramp").unwrap()
    }

    fn grid_from(coords: Vec<[f64; 2]>, h: usize, w: usize) -> ProjectedGrid {
        let valid = vec![true; coords.len()];
        ProjectedGrid {
            height: h,
            width: w,
            coords,
            valid,
        }
    }

    #[test]
    fn lattice_hits_return_exact_cells() {
        let f = ramp_map(3, 4, 2);
        let coords = (0..3)
            .flat_map(|y| (0..4).map(move |x| [x as f64, y as f64]))
            .collect();
        let out = bilinear_sample(&f, &grid_from(coords, 3, 4)).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn midpoint_averages_four_cells() {
        let f = ramp_map(2, 2, 3);
        let coords = vec![[0.5, 0.5]; 4];
        let out = bilinear_sample(&f, &grid_from(coords, 2, 2)).unwrap();
        for ch in 0..3 {
            let mean = (0..4).map(|cell| f.values()[cell * 3 + ch]).sum::<f64>() / 4.0;
            assert!(close(out.values()[ch], mean, 1e-12));
        }
    }

    #[test]
    fn invalid_mask_zeroes_output() {
        let f = ramp_map(2, 3, 2);
        let mut g = grid_from(vec![[0.0, 0.0]; 6], 2, 3);
        g.valid = vec![false; 6];
        let out = bilinear_sample(&f, &g).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = ramp_map(2, 3, 2);
        let g = grid_from(vec![[0.0, 0.0]; 4], 2, 2);
        assert!(matches!(bilinear_sample(&f, &g), Err(Error::Validation(_))));
    }

    #[test]
    fn sampling_is_linear_in_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w, c) = (4, 5, 3);
        let rand_map = |rng: &mut ChaCha8Rng| {
            let v = (0..h * w * c)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            FeatureMap::new(h, w, c, v, "r").unwrap()
        };
        let f1 = rand_map(&mut rng);
        let f2 = rand_map(&mut rng);
        let coords = (0..h * w)
            .map(|_| {
                [
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                ]
            })
            .collect();
        let mut g = grid_from(coords, h, w);
        g.valid[3] = false;
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = f1
            .values()
            .iter()
            .zip(f2.values())
            .map(|(x, y)| a * x + b * y)
            .collect();
        let fc = FeatureMap::new(h, w, c, combo, "c").unwrap();
        let s1 = bilinear_sample(&f1, &g).unwrap();
        let s2 = bilinear_sample(&f2, &g).unwrap();
        let sc = bilinear_sample(&fc, &g).unwrap();
        for i in 0..h * w * c {
            assert!(close(
                sc.values()[i],
                a * s1.values()[i] + b * s2.values()[i],
                1e-6
            ));
        }
    }
}
