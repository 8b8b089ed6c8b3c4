//! Fixed-size geometry: rotations, camera intrinsics, homographies and the
//! plane-induced decomposition `H = R + t nᵀ`.
//!
//! Homographies are stored unnormalized. Normalizing to `h₃₃ = 1` happens only
//! where a caller needs the 8-parameter form (see [`Homography::normalized`]).

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const UNIT_NORMAL_TOL: f64 = 1e-9;
const SINGULAR_DET: f64 = 1e-12;
const INFINITY_DENOM: f64 = 1e-12;
const PURE_ROTATION_TOL: f64 = 1e-9;

fn row_major(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

fn from_row_major(v: [f64; 9]) -> Mat3 {
    Mat3::from_row_slice(&v)
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A proper rotation. Every constructor either builds an exact rotation or
/// projects onto SO(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 9]", into = "[f64; 9]")]
pub struct RotationMatrix(Mat3);

impl From<[f64; 9]> for RotationMatrix {
    fn from(v: [f64; 9]) -> Self {
        RotationMatrix(from_row_major(v))
    }
}

impl From<RotationMatrix> for [f64; 9] {
    fn from(r: RotationMatrix) -> Self {
        row_major(&r.0)
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Mat3::identity())
    }

    /// Rotation by the rotation vector `v` (axis × angle), via Rodrigues.
    pub fn exp(v: &Vec3) -> Self {
        RotationMatrix(*Rotation3::new(*v).matrix())
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        RotationMatrix(*Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix())
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::exp(&Vec3::new(angle, 0.0, 0.0))
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::exp(&Vec3::new(0.0, angle, 0.0))
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::exp(&Vec3::new(0.0, 0.0, angle))
    }

    /// Nearest rotation in the Frobenius sense (orthogonal polar factor).
    pub fn nearest(m: &Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteResult);
        }
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            // reflect along the weakest singular direction
            let (idx, _) = svd
                .singular_values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let mut u = u;
            u.column_mut(idx).neg_mut();
            r = u * v_t;
        }
        Ok(RotationMatrix(r))
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        RotationMatrix(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    /// `self · other`
    pub fn compose(&self, other: &RotationMatrix) -> Self {
        RotationMatrix(self.0 * other.0)
    }

    /// Rotation vector (axis × angle).
    pub fn log(&self) -> Vec3 {
        Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    /// Angle of `selfᵀ · other`, in radians.
    pub fn geodesic_distance(&self, other: &RotationMatrix) -> f64 {
        let rel = self.0.transpose() * other.0;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        // acos is ill-conditioned near zero; use the skew part there.
        let s = 0.5
            * Vec3::new(
                rel[(2, 1)] - rel[(1, 2)],
                rel[(0, 2)] - rel[(2, 0)],
                rel[(1, 0)] - rel[(0, 1)],
            )
            .norm();
        s.atan2(c)
    }

    /// `‖RᵀR − I‖_F`
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).norm()
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// A 3×3 projective map taking target-frame pixels to current-frame pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography(Mat3);

impl From<[f64; 9]> for Homography {
    fn from(v: [f64; 9]) -> Self {
        Homography(from_row_major(v))
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        row_major(&h.0)
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    /// Checked constructor: rejects singular matrices.
    pub fn new(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) || m.determinant().abs() <= SINGULAR_DET {
            return Err(Error::DegenerateHomography);
        }
        Ok(Homography(m))
    }

    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Homography(m)
    }

    pub fn identity() -> Self {
        Homography(Mat3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography(Mat3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn row_major(&self) -> [f64; 9] {
        row_major(&self.0)
    }

    pub fn inverse(&self) -> Result<Self> {
        self.0
            .try_inverse()
            .map(Homography)
            .ok_or(Error::DegenerateHomography)
    }

    /// `self · other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        Homography(self.0 * other.0)
    }

    /// Scaled so that `h₃₃ = 1`; requires `|h₃₃| > 1e-9`.
    pub fn normalized(&self) -> Result<Self> {
        let s = self.0[(2, 2)];
        if s.abs() <= 1e-9 || !s.is_finite() {
            return Err(Error::DegenerateHomography);
        }
        Ok(Homography(self.0 / s))
    }

    /// The eight free parameters `h₁…h₈` of the normalized form, row-major.
    pub fn params8(&self) -> Result<[f64; 8]> {
        let v = self.normalized()?.row_major();
        let mut p = [0.0; 8];
        p.copy_from_slice(&v[..8]);
        Ok(p)
    }

    pub fn from_params8(p: &[f64]) -> Self {
        debug_assert_eq!(p.len(), 8);
        Homography(Mat3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0))
    }

    pub fn apply(&self, p: &Vec2) -> Result<Vec2> {
        apply_homography(self, p)
    }
}

/// `K · R · K⁻¹`: a camera rotation expressed as a pixel homography.
pub fn to_camera_frame(r_gyro: &RotationMatrix, k: &CameraIntrinsics) -> Homography {
    Homography(k.matrix() * r_gyro.matrix() * k.inverse_matrix())
}

/// `H₀ = R₀ + t₀ n₀ᵀ`
pub fn compose_initial_homography(r0: &Homography, t0: &Vec3, n0: &Vec3) -> Result<Homography> {
    let norm = n0.norm();
    if (norm - 1.0).abs() > UNIT_NORMAL_TOL {
        return Err(Error::NonUnitNormal(norm));
    }
    Ok(Homography(r0.0 + t0 * n0.transpose()))
}

/// One factorization `H ∝ R + t nᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneDecomposition {
    pub r: RotationMatrix,
    pub t: Vec3,
    pub n: Vec3,
    /// Set when the input is a pure rotation: `t = 0` and `n` is arbitrary.
    pub degenerate: bool,
}

impl PlaneDecomposition {
    pub fn recompose(&self) -> Mat3 {
        self.r.matrix() + self.t * self.n.transpose()
    }
}

/// Splits a calibrated (Euclidean) homography into rotation, scaled
/// translation and plane normal.
///
/// The input is first rescaled so its middle singular value is one and its
/// determinant is positive. Of the analytic solutions (two distinct
/// rotations, each with a `(t, n)` / `(−t, −n)` pair), the one whose rotation
/// is geodesically nearest to `r_hint` is returned, with `n_z ≥ 0`.
pub fn decompose_homography(h: &Homography, r_hint: &RotationMatrix) -> Result<PlaneDecomposition> {
    let m = h.0;
    let det = m.determinant();
    if !det.is_finite() || det.abs() <= SINGULAR_DET {
        return Err(Error::DegenerateHomography);
    }

    let svd = m.svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let scale = sv[1] * det.signum();
    let hn = m / scale;

    let eig = (hn.transpose() * hn).symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s1 = eig.eigenvalues[order[0]];
    let s3 = eig.eigenvalues[order[2]];
    let v1: Vec3 = eig.eigenvectors.column(order[0]).into();
    let v2: Vec3 = eig.eigenvectors.column(order[1]).into();
    let v3: Vec3 = eig.eigenvectors.column(order[2]).into();

    if s1 - s3 < PURE_ROTATION_TOL {
        let r = RotationMatrix::nearest(&hn)?;
        return Ok(PlaneDecomposition {
            r,
            t: Vec3::zeros(),
            n: Vec3::z(),
            degenerate: true,
        });
    }

    let a = (1.0 - s3).max(0.0).sqrt();
    let b = (s1 - 1.0).max(0.0).sqrt();
    let d = (s1 - s3).sqrt();
    let u1 = (a * v1 + b * v3) / d;
    let u2 = (a * v1 - b * v3) / d;

    let hv2 = hn * v2;
    let solve = |u: Vec3| -> Result<(RotationMatrix, Vec3, Vec3)> {
        let hu = hn * u;
        let basis = Mat3::from_columns(&[v2, u, v2.cross(&u)]);
        let image = Mat3::from_columns(&[hv2, hu, hv2.cross(&hu)]);
        let r = RotationMatrix::nearest(&(image * basis.transpose()))?;
        let n = v2.cross(&u);
        let n = n / n.norm();
        let t = (hn - r.matrix()) * n;
        Ok((r, t, n))
    };

    let candidates = [solve(u1)?, solve(u2)?];
    let (r, mut t, mut n) = candidates
        .iter()
        .copied()
        .min_by(|a, b| {
            r_hint
                .geodesic_distance(&a.0)
                .total_cmp(&r_hint.geodesic_distance(&b.0))
        })
        .unwrap();
    if n.z < 0.0 {
        n = -n;
        t = -t;
    }
    Ok(PlaneDecomposition {
        r,
        t,
        n,
        degenerate: false,
    })
}

/// Perspective division of `h · [p; 1]`.
pub fn apply_homography(h: &Homography, p: &Vec2) -> Result<Vec2> {
    let m = &h.0;
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    let scale = m.row(2).abs().max().max(1.0);
    if w.abs() <= INFINITY_DENOM * scale || !w.is_finite() {
        return Err(Error::PointAtInfinity(w));
    }
    Ok(Vec2::new(
        (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
        (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
    ))
}

/// Express a Euclidean plane term `t nᵀ` in pixel coordinates:
/// `K t nᵀ K⁻¹ = t₀ n₀ᵀ` with unit `n₀`.
pub fn plane_term_to_pixels(t: &Vec3, n: &Vec3, k: &CameraIntrinsics) -> (Vec3, Vec3) {
    let m = k.inverse_matrix().transpose() * n;
    let s = m.norm();
    (k.matrix() * t * s, m / s)
}

/// `K⁻¹ H K`
pub fn to_euclidean(h: &Homography, k: &CameraIntrinsics) -> Homography {
    Homography(k.inverse_matrix() * h.0 * k.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn camera_frame_of_identity_is_identity() {
        let k = CameraIntrinsics::new(812.0, 790.0, 301.5, 244.0).unwrap();
        let h = to_camera_frame(&RotationMatrix::identity(), &k);
        assert!(close(h.matrix(), &Mat3::identity(), 1e-12));
    }

    #[test]
    fn camera_frame_matches_explicit_product() {
        // independent scalar expansion of diag(f,f,1)·rot_z(θ)·diag(1/f,1/f,1)
        let (f, th) = (500.0_f64, 0.3_f64);
        let k = CameraIntrinsics::new(f, f, 0.0, 0.0).unwrap();
        let h = to_camera_frame(&RotationMatrix::rot_z(th), &k);
        let (c, s) = (th.cos(), th.sin());
        let expect = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        assert!(close(h.matrix(), &expect, 1e-12));

        let k = CameraIntrinsics::new(f, f, 320.0, 240.0).unwrap();
        let h = to_camera_frame(&RotationMatrix::rot_z(th), &k);
        // the principal point shows up as a translation term
        let tx = 320.0 - (c * 320.0 - s * 240.0);
        let ty = 240.0 - (s * 320.0 + c * 240.0);
        let expect = Mat3::new(c, -s, tx, s, c, ty, 0.0, 0.0, 1.0);
        assert!(close(h.matrix(), &expect, 1e-9));
    }

    #[test]
    fn camera_frame_round_trip() {
        let k = CameraIntrinsics::new(640.0, 655.0, 330.0, 250.0).unwrap();
        let r = RotationMatrix::exp(&Vec3::new(0.02, -0.05, 0.11));
        let h = to_camera_frame(&r, &k);
        let back = k.inverse_matrix() * h.matrix() * k.matrix();
        assert!(close(&back, r.matrix(), 1e-12));
    }

    #[test]
    fn compose_examples() {
        let id = Homography::identity();
        let h = compose_initial_homography(&id, &Vec3::zeros(), &Vec3::z()).unwrap();
        assert_eq!(h, id);

        let h = compose_initial_homography(&id, &Vec3::new(0.1, 0.0, 0.0), &Vec3::z()).unwrap();
        let expect = Mat3::new(1.0, 0.0, 0.1, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(close(h.matrix(), &expect, 0.0));

        let err = compose_initial_homography(&id, &Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.1));
        assert!(matches!(err, Err(Error::NonUnitNormal(_))));
    }

    #[test]
    fn decompose_identity_is_flagged() {
        let d = decompose_homography(&Homography::identity(), &RotationMatrix::identity()).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.t, Vec3::zeros());
        assert!(close(d.r.matrix(), &Mat3::identity(), 1e-12));
        assert!((d.n.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decompose_recovers_construction() {
        let r = RotationMatrix::exp(&Vec3::new(0.05, -0.1, 0.2));
        let t = Vec3::new(0.2, -0.1, 0.3);
        let n = Vec3::new(0.1, 0.2, 0.9).normalize();
        let h = Homography::from_matrix_unchecked(r.matrix() + t * n.transpose());
        // arbitrary overall scale must not matter
        let scaled = Homography::from_matrix_unchecked(h.matrix() * -3.7);
        let d = decompose_homography(&scaled, &r).unwrap();
        assert!(!d.degenerate);
        assert!(close(d.r.matrix(), r.matrix(), 1e-6));
        assert!((d.t - t).norm() < 1e-6, "t = {:?}", d.t);
        assert!((d.n - n).norm() < 1e-6, "n = {:?}", d.n);
    }

    #[test]
    fn decompose_rejects_singular() {
        let h = Homography::from_matrix_unchecked(Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0));
        assert!(matches!(
            decompose_homography(&h, &RotationMatrix::identity()),
            Err(Error::DegenerateHomography)
        ));
    }

    #[test]
    fn apply_examples() {
        let p = Vec2::new(10.0, 20.0);
        assert_eq!(apply_homography(&Homography::identity(), &p).unwrap(), p);
        let q = apply_homography(&Homography::translation(5.0, 3.0), &Vec2::zeros()).unwrap();
        assert_eq!(q, Vec2::new(5.0, 3.0));

        let h = Homography::from_matrix_unchecked(Mat3::new(
            1.2, 0.1, 3.0, -0.2, 0.9, 7.0, 0.001, 0.0, 1.0,
        ));
        let q = apply_homography(&h, &Vec2::new(100.0, 0.0)).unwrap();
        // hand computation: w = 0.001·100 + 1 = 1.1
        assert!((q.x - (1.2 * 100.0 + 3.0) / 1.1).abs() < 1e-12);
        assert!((q.y - (-0.2 * 100.0 + 7.0) / 1.1).abs() < 1e-12);
    }

    #[test]
    fn apply_at_infinity() {
        let h = Homography::from_matrix_unchecked(Mat3::new(
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.01, 0.0, 1.0,
        ));
        assert!(matches!(
            apply_homography(&h, &Vec2::new(-100.0, 5.0)),
            Err(Error::PointAtInfinity(_))
        ));
    }

    #[test]
    fn nearest_rotation_projects() {
        let r = RotationMatrix::rot_y(PI / 3.0);
        let noisy = r.matrix() + Mat3::new(1e-3, 0.0, 2e-3, 0.0, -1e-3, 0.0, 1e-3, 0.0, 0.0);
        let p = RotationMatrix::nearest(&noisy).unwrap();
        assert!(p.orthonormality_error() < 1e-12);
        assert!((p.matrix().determinant() - 1.0).abs() < 1e-12);
        assert!(p.geodesic_distance(&r) < 5e-3);
    }

    #[test]
    fn geodesic_distance_small_angles() {
        let a = RotationMatrix::rot_x(1e-9);
        assert!((RotationMatrix::identity().geodesic_distance(&a) - 1e-9).abs() < 1e-15);
        let b = RotationMatrix::rot_z(2.5);
        assert!((RotationMatrix::identity().geodesic_distance(&b) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn params8_round_trip() {
        let h = Homography::from_matrix_unchecked(Mat3::new(
            2.0, 0.2, 6.0, -0.4, 1.8, 14.0, 0.002, 0.0, 2.0,
        ));
        let p = h.params8().unwrap();
        let back = Homography::from_params8(&p);
        assert!(close(back.matrix(), &(h.matrix() / 2.0), 1e-15));
    }

    #[test]
    fn serde_row_major() {
        let h = Homography::translation(5.0, -2.0);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[1.0,0.0,5.0,0.0,1.0,-2.0,0.0,0.0,1.0]");
        let back: Homography = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }
}
