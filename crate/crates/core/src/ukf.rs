//! Unscented Kalman filter over the eight free homography parameters.
//!
//! The state is `h₁…h₈` of a homography normalized to `h₉ = 1`. The process
//! model is the identity (a stationary parameter with additive noise) and the
//! measurement model maps every target point through the state's homography,
//! so a measurement vector stacks `2n` coordinates.
//!
//! Parameters live in a conditioned frame `x̃ = s (x − c)` fixed by the target
//! points (zero centroid, mean distance √2). In raw pixels `h₇, h₈` are four
//! orders of magnitude smaller than the translation terms, so an isotropic
//! process noise or covariance floor would be meaningless there.
//!
//! Weights follow the scaled unscented transform with `λ = (α² − 1) L` and
//! `κ = 0`. With the default `α = 1e-3` the centre weight is large and
//! negative, so weighted means are accumulated as deviations from the centre
//! sigma point to avoid cancellation.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::features::{dlt_rows, hartley_normalization, CorrespondenceSet, MIN_CORRESPONDENCES};
use crate::geometry::{apply_homography, Homography, Mat3, Vec2};

pub const STATE_DIM: usize = 8;
pub const SIGMA_COUNT: usize = 2 * STATE_DIM + 1;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateCovariance = SMatrix<f64, STATE_DIM, STATE_DIM>;

const COVARIANCE_FLOOR: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SIGMA_HALVINGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Standard deviation of the additive process noise on every parameter.
    pub process_noise_sigma: f64,
    /// Standard deviation of each measured pixel coordinate.
    pub measurement_noise_sigma: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        UkfConfig {
            alpha: 1e-3,
            beta: 2.0,
            process_noise_sigma: 1e-4,
            measurement_noise_sigma: 1.0,
        }
    }
}

impl UkfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.process_noise_sigma > 0.0 && self.measurement_noise_sigma > 0.0) {
            return Err(Error::InvalidArgument("UKF noise sigmas must be positive".into()));
        }
        Ok(())
    }

    /// `L + λ = α² L`, computed without the cancellation in `L + (α² − 1) L`.
    pub fn spread(&self) -> f64 {
        self.alpha * self.alpha * STATE_DIM as f64
    }

    pub fn lambda(&self) -> f64 {
        (self.alpha * self.alpha - 1.0) * STATE_DIM as f64
    }

    /// Mean and covariance weights `(w_m, w_c)`.
    pub fn weights(&self) -> (SVector<f64, SIGMA_COUNT>, SVector<f64, SIGMA_COUNT>) {
        let spread = self.spread();
        let lambda = self.lambda();
        let side = 1.0 / (2.0 * spread);
        let mut w_m = SVector::<f64, SIGMA_COUNT>::repeat(side);
        let mut w_c = w_m;
        w_m[0] = lambda / spread;
        w_c[0] = lambda / spread + (1.0 - self.alpha * self.alpha + self.beta);
        (w_m, w_c)
    }
}

/// Isotropic similarity `x̃ = s (x − c)` applied to both images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditioning {
    pub scale: f64,
    pub center: Vec2,
}

impl Conditioning {
    pub fn identity() -> Self {
        Conditioning {
            scale: 1.0,
            center: Vec2::zeros(),
        }
    }

    pub fn from_points(points: &[Vec2]) -> Result<Self> {
        let t = hartley_normalization(points.iter()).ok_or(Error::DegenerateConfiguration("coincident points"))?;
        let scale = t[(0, 0)];
        Ok(Conditioning {
            scale,
            center: Vec2::new(-t[(0, 2)] / scale, -t[(1, 2)] / scale),
        })
    }

    pub fn matrix(&self) -> Mat3 {
        let s = self.scale;
        Mat3::new(s, 0.0, -s * self.center.x, 0.0, s, -s * self.center.y, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        let s = 1.0 / self.scale;
        Mat3::new(s, 0.0, self.center.x, 0.0, s, self.center.y, 0.0, 0.0, 1.0)
    }

    pub fn point(&self, p: &Vec2) -> Vec2 {
        (p - self.center) * self.scale
    }

    pub fn to_conditioned(&self, h: &Homography) -> Result<Homography> {
        Homography::from_matrix_unchecked(self.matrix() * h.matrix() * self.inverse_matrix()).normalized()
    }

    pub fn to_pixels(&self, h: &Homography) -> Result<Homography> {
        Homography::from_matrix_unchecked(self.inverse_matrix() * h.matrix() * self.matrix()).normalized()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UkfState {
    /// Parameters in the conditioned frame.
    pub h: StateVector,
    pub p: StateCovariance,
    pub conditioning: Conditioning,
}

impl UkfState {
    pub fn new(h: StateVector, p: StateCovariance) -> Self {
        UkfState {
            h,
            p,
            conditioning: Conditioning::identity(),
        }
    }

    /// `h` is given in pixels; `p` in the frame of `conditioning`.
    pub fn from_homography(h: &Homography, p: StateCovariance, conditioning: Conditioning) -> Result<Self> {
        Ok(UkfState {
            h: StateVector::from_column_slice(&conditioning.to_conditioned(h)?.params8()?),
            p,
            conditioning,
        })
    }

    /// Pixel-frame homography of the current mean.
    pub fn homography(&self) -> Homography {
        let hc = Homography::from_params8(self.h.as_slice());
        let raw = Homography::from_matrix_unchecked(
            self.conditioning.inverse_matrix() * hc.matrix() * self.conditioning.matrix(),
        );
        raw.normalized().unwrap_or(raw)
    }

    /// Symmetric within tolerance and factorable after a `1e-12` jitter.
    pub fn covariance_is_valid(&self) -> bool {
        let asym = (self.p - self.p.transpose()).abs().max();
        asym <= SYMMETRY_TOL && (self.p + StateCovariance::identity() * 1e-12).cholesky().is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPoints {
    /// Columns are sampled states; column 0 is the mean.
    pub points: SMatrix<f64, STATE_DIM, SIGMA_COUNT>,
    pub w_m: SVector<f64, SIGMA_COUNT>,
    pub w_c: SVector<f64, SIGMA_COUNT>,
}

impl SigmaPoints {
    /// `Σ w_m X_j`, accumulated relative to the centre column.
    pub fn mean(&self) -> StateVector {
        weighted_mean(&self.points, &self.w_m)
    }

    pub fn covariance(&self, mean: &StateVector) -> StateCovariance {
        let mut p = StateCovariance::zeros();
        for j in 0..SIGMA_COUNT {
            let d = self.points.column(j) - mean;
            p += d * d.transpose() * self.w_c[j];
        }
        p
    }
}

fn weighted_mean<const R: usize>(
    pts: &SMatrix<f64, R, SIGMA_COUNT>,
    w: &SVector<f64, SIGMA_COUNT>,
) -> SVector<f64, R> {
    let c0 = pts.column(0).into_owned();
    let mut acc = SVector::<f64, R>::zeros();
    for j in 1..SIGMA_COUNT {
        acc += (pts.column(j) - c0) * w[j];
    }
    c0 + acc
}

/// Lower-triangular `L` with `L Lᵀ = p` for a positive *semi*definite `p`.
/// Pivots that vanish relative to their own diagonal produce zero columns.
fn psd_cholesky(p: &StateCovariance) -> Option<StateCovariance> {
    let mut l = StateCovariance::zeros();
    for j in 0..STATE_DIM {
        let diag = p[(j, j)];
        let d = diag - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if !d.is_finite() || d < -1e-9 * diag.abs() - 1e-300 {
            return None;
        }
        if d <= 1e-12 * diag.abs() {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..STATE_DIM {
            let s = p[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

fn symmetrize(p: &StateCovariance) -> StateCovariance {
    (p + p.transpose()) * 0.5
}

/// Symmetrizes and, if needed, clips negative eigenvalues.
fn make_psd(p: &StateCovariance) -> StateCovariance {
    let p = symmetrize(p);
    if psd_cholesky(&p).is_some() {
        return p;
    }
    let eig = p.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    symmetrize(&(eig.eigenvectors * StateCovariance::from_diagonal(&clipped) * eig.eigenvectors.transpose()))
}

fn sigma_points_from(h: &StateVector, p: &StateCovariance, cfg: &UkfConfig) -> Result<SigmaPoints> {
    let scaled = p * cfg.spread();
    let l = psd_cholesky(&scaled)
        .or_else(|| {
            let jitter = StateCovariance::from_diagonal(&scaled.diagonal().map(|d| d.abs() * 1e-9 + 1e-300));
            psd_cholesky(&(scaled + jitter))
        })
        .ok_or(Error::CovarianceNotPsd)?;
    let mut points = SMatrix::<f64, STATE_DIM, SIGMA_COUNT>::zeros();
    points.set_column(0, h);
    for i in 0..STATE_DIM {
        let col = l.column(i);
        points.set_column(1 + i, &(h + col));
        points.set_column(1 + STATE_DIM + i, &(h - col));
    }
    let (w_m, w_c) = cfg.weights();
    Ok(SigmaPoints { points, w_m, w_c })
}

/// `[ĥ, ĥ ± √((L+λ) P)]` with matching weights.
pub fn sigma_points(state: &UkfState, cfg: &UkfConfig) -> Result<SigmaPoints> {
    sigma_points_from(&state.h, &state.p, cfg)
}

/// First-order covariance of the homography parameters induced by i.i.d.
/// point noise, obtained by perturbing the null vector of the DLT matrix `A`.
///
/// `A` is built from the target points and their images under `h0`. For
/// `A h = 0` the perturbation of the unit null vector is `δh = −A⁺ δA h`, and
/// `δA h` is linear in the point perturbations, so the covariance follows in
/// closed form. The result is expressed for the eight parameters in the frame
/// `Conditioning::from_points` of the target points.
pub fn init_covariance(set: &CorrespondenceSet, h0: &Homography) -> Result<StateCovariance> {
    let n = set.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::DegenerateConfiguration("fewer than 4 correspondences"));
    }
    let h0 = h0.normalized()?;
    let targets: Vec<Vec2> = set.pairs.iter().map(|c| c.x).collect();
    let predicted: Vec<Vec2> = targets
        .iter()
        .map(|p| apply_homography(&h0, p))
        .collect::<Result<_>>()?;
    let t1 = hartley_normalization(targets.iter()).ok_or(Error::DegenerateConfiguration("coincident target points"))?;
    let t2 =
        hartley_normalization(predicted.iter()).ok_or(Error::DegenerateConfiguration("coincident predicted points"))?;
    let (s1, s2) = (t1[(0, 0)], t2[(0, 0)]);
    let norm = |m: &Mat3, p: &Vec2| Vec2::new(m[(0, 0)] * p.x + m[(0, 2)], m[(1, 1)] * p.y + m[(1, 2)]);
    let xs: Vec<Vec2> = targets.iter().map(|p| norm(&t1, p)).collect();
    let xps: Vec<Vec2> = predicted.iter().map(|p| norm(&t2, p)).collect();

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let r = dlt_rows(&xs[i], &xps[i]);
        for k in 0..2 {
            for c in 0..9 {
                a[(2 * i + k, c)] = r[k][c];
            }
        }
    }
    let svd = a.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if sv[order[7]] <= 1e-9 * sv[order[0]] {
        return Err(Error::DegenerateConfiguration("DLT matrix has a null space larger than one"));
    }

    // null vector in normalized coordinates, consistent with h0
    let t1_inv = t1.try_inverse().expect("similarity is invertible");
    let hn = t2 * h0.matrix() * t1_inv;
    let hn = hn / hn.norm();
    let hv: [f64; 9] = std::array::from_fn(|k| hn[(k / 3, k % 3)]);

    // pseudo-inverse restricted to the rank-8 row space
    let mut pinv = DMatrix::<f64>::zeros(9, rows);
    for &k in &order[..8] {
        let v = v_t.row(k).transpose();
        let uk = u.column(k);
        pinv += v * uk.transpose() / sv[k];
    }

    // covariance of the residual vector A h under point noise
    let var_t = (s1 * set.point_noise_sigma).powi(2);
    let var_c = (s2 * set.point_noise_sigma).powi(2);
    let mut cov_e = DMatrix::<f64>::zeros(rows, rows);
    for i in 0..n {
        let (x, y) = (xs[i].x, xs[i].y);
        let (xp, yp) = (xps[i].x, xps[i].y);
        let w = hv[6] * x + hv[7] * y + hv[8];
        // rows: ∂(row·h)/∂(x, y, x′, y′)
        let j = [
            [hv[0] - xp * hv[6], hv[1] - xp * hv[7], -w, 0.0],
            [hv[3] - yp * hv[6], hv[4] - yp * hv[7], 0.0, -w],
        ];
        let var = [var_t, var_t, var_c, var_c];
        for r in 0..2 {
            for c in 0..2 {
                let v: f64 = (0..4).map(|k| j[r][k] * j[c][k] * var[k]).sum();
                cov_e[(2 * i + r, 2 * i + c)] = v;
            }
        }
    }
    let cov_hn = &pinv * cov_e * pinv.transpose();

    // conditioned h = vec(T1 T2⁻¹ Hn) is linear in vec(Hn); T1 is the conditioning
    let t2_inv = t2.try_inverse().expect("similarity is invertible");
    let to_cond = t1 * t2_inv;
    let mut m = DMatrix::<f64>::zeros(9, 9);
    for k in 0..9 {
        let mut e = Mat3::zeros();
        e[(k / 3, k % 3)] = 1.0;
        let img = to_cond * e;
        for r in 0..9 {
            m[(r, k)] = img[(r / 3, r % 3)];
        }
    }
    let h_full = &m * DVector::from_column_slice(&hv);
    let h9 = h_full[8];
    let mut jr = DMatrix::<f64>::zeros(8, 9);
    for k in 0..8 {
        jr[(k, k)] = 1.0 / h9;
        jr[(k, 8)] = -h_full[k] / (h9 * h9);
    }
    let jm = jr * m;
    let cov = &jm * cov_hn * jm.transpose();
    let mut p = StateCovariance::from_fn(|r, c| cov[(r, c)]);
    p = symmetrize(&p) + StateCovariance::identity() * COVARIANCE_FLOOR;
    Ok(p)
}

fn observe(h: &StateVector, targets: &[Vec2]) -> Result<DVector<f64>> {
    let hom = Homography::from_params8(h.as_slice());
    let mut y = DVector::zeros(2 * targets.len());
    for (i, p) in targets.iter().enumerate() {
        let q = apply_homography(&hom, p)?;
        y[2 * i] = q.x;
        y[2 * i + 1] = q.y;
    }
    Ok(y)
}

/// One predict/update cycle against a fixed correspondence set.
///
/// Predict uses the identity transition plus additive process noise. The
/// update redraws sigma points from the predicted distribution, propagates
/// them through the point-mapping measurement model and applies the gain
/// `K = P_hy P_yy⁻¹`.
pub fn ukf_step(state: &UkfState, set: &CorrespondenceSet, cfg: &UkfConfig) -> Result<UkfState> {
    cfg.validate()?;
    if set.len() < MIN_CORRESPONDENCES {
        return Err(Error::DegenerateConfiguration("fewer than 4 correspondences"));
    }
    let sp = sigma_points(state, cfg)?;
    let h_pred = sp.mean();
    let q = StateCovariance::identity() * cfg.process_noise_sigma.powi(2);
    let p_pred = symmetrize(&(sp.covariance(&h_pred) + q));

    let mut sp = sigma_points_from(&h_pred, &p_pred, cfg)?;
    let cond = state.conditioning;
    let targets: Vec<Vec2> = set.pairs.iter().map(|c| cond.point(&c.x)).collect();
    let m = 2 * targets.len();
    let mut ys = DMatrix::<f64>::zeros(m, SIGMA_COUNT);
    for j in 0..SIGMA_COUNT {
        let mut attempt = 0;
        loop {
            let col: StateVector = sp.points.column(j).into_owned();
            match observe(&col, &targets) {
                Ok(y) => {
                    ys.set_column(j, &y);
                    break;
                }
                Err(e) if j == 0 || attempt == MAX_SIGMA_HALVINGS => return Err(e),
                Err(_) => {
                    attempt += 1;
                    let pulled = h_pred + (col - h_pred) * 0.5;
                    sp.points.set_column(j, &pulled);
                }
            }
        }
    }

    let y0 = ys.column(0).into_owned();
    let mut y_mean = DVector::<f64>::zeros(m);
    for j in 1..SIGMA_COUNT {
        y_mean += (ys.column(j) - &y0) * sp.w_m[j];
    }
    y_mean += &y0;

    let mut y_dev = ys.clone();
    let mut x_dev = DMatrix::<f64>::zeros(STATE_DIM, SIGMA_COUNT);
    for j in 0..SIGMA_COUNT {
        let mut c = y_dev.column_mut(j);
        c -= &y_mean;
        x_dev.set_column(j, &(sp.points.column(j) - h_pred));
    }
    let w_c = DMatrix::from_diagonal(&DVector::from_column_slice(sp.w_c.as_slice()));
    let mut p_yy = &y_dev * &w_c * y_dev.transpose();
    for i in 0..m {
        p_yy[(i, i)] += (cond.scale * cfg.measurement_noise_sigma).powi(2);
    }
    let p_yy = (&p_yy + p_yy.transpose()) * 0.5;
    let p_hy = &x_dev * &w_c * y_dev.transpose();

    let chol = p_yy.clone().cholesky().ok_or(Error::CovarianceNotPsd)?;
    let gain = chol.solve(&p_hy.transpose()).transpose();

    let mut y_meas = DVector::<f64>::zeros(m);
    for (i, c) in set.pairs.iter().enumerate() {
        let q = cond.point(&c.x_prime);
        y_meas[2 * i] = q.x;
        y_meas[2 * i + 1] = q.y;
    }
    let dh = &gain * (y_meas - y_mean);
    let h_new = h_pred + StateVector::from_column_slice(dh.as_slice());
    let kpk = &gain * p_yy * gain.transpose();
    let p_new = p_pred - StateCovariance::from_fn(|r, c| kpk[(r, c)]);
    let p_new = make_psd(&p_new);
    if !h_new.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteResult);
    }
    Ok(UkfState {
        h: h_new,
        p: p_new,
        conditioning: cond,
    })
}

/// Mean Euclidean residual `E‖H x − x′‖` over the set.
pub fn mean_reprojection_error(h: &Homography, set: &CorrespondenceSet) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    set.pairs
        .iter()
        .map(|c| crate::features::reprojection_error(h, c))
        .sum::<f64>()
        / set.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Refinement {
    /// Pixel-frame estimate.
    pub homography: Homography,
    /// Final mean reprojection error, px.
    pub mean_error: f64,
    pub iterations: usize,
    /// False when `max_iters` ran out before the error settled.
    pub converged: bool,
    pub state: UkfState,
}

/// Iterates [`ukf_step`] on a fixed correspondence set, starting from `h0`
/// with the perturbation-theory covariance, until the mean reprojection error
/// changes by less than `tol` px or `max_iters` steps have run.
pub fn refine_homography(
    h0: &Homography,
    set: &CorrespondenceSet,
    cfg: &UkfConfig,
    max_iters: usize,
    tol: f64,
) -> Result<Refinement> {
    cfg.validate()?;
    let h0 = h0.normalized()?;
    let p0 = init_covariance(set, &h0)?;
    let targets: Vec<Vec2> = set.pairs.iter().map(|c| c.x).collect();
    let mut state = UkfState::from_homography(&h0, p0, Conditioning::from_points(&targets)?)?;
    let mut err = mean_reprojection_error(&h0, set);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        state = ukf_step(&state, set, cfg)?;
        iterations += 1;
        let next = mean_reprojection_error(&state.homography(), set);
        let delta = (next - err).abs();
        err = next;
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(Refinement {
        homography: state.homography(),
        mean_error: err,
        iterations,
        converged,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{fit_homography_dlt, Correspondence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn true_h() -> Homography {
        Homography::from_matrix_unchecked(Mat3::new(
            0.998, -0.035, 6.0, 0.034, 1.002, -3.5, 1.5e-5, -2e-5, 1.0,
        ))
    }

    fn points(n: usize, seed: u64) -> Vec<Vec2> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec2::new(rng.random_range(20.0..620.0), rng.random_range(20.0..460.0)))
            .collect()
    }

    fn cond_of(set: &CorrespondenceSet) -> Conditioning {
        let pts: Vec<Vec2> = set.pairs.iter().map(|c| c.x).collect();
        Conditioning::from_points(&pts).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng) -> StateCovariance {
        let a = StateCovariance::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let scales = StateVector::from_fn(|i, _| 10f64.powi(-(i as i32)));
        let s = StateCovariance::from_diagonal(&scales);
        s * a * a.transpose() * s
    }

    #[test]
    fn reference_weights() {
        // L = 8, α = 1e-3, β = 2: λ = −7.999992, L + λ = 8e-6
        let cfg = UkfConfig::default();
        assert!((cfg.lambda() + 7.999992).abs() < 1e-12);
        let (w_m, w_c) = cfg.weights();
        assert!((w_m[0] + 999_999.0).abs() < 1e-6);
        for j in 1..SIGMA_COUNT {
            assert!((w_m[j] - 62_500.0).abs() < 1e-8);
            assert_eq!(w_m[j], w_c[j]);
        }
        assert!((w_c[0] - (w_m[0] + 3.0 - 1e-6)).abs() < 1e-6);
        assert!((w_m.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_covariance_collapses_sigma_points() {
        let h = StateVector::from_fn(|i, _| i as f64 * 0.5 - 1.0);
        let sp = sigma_points(&UkfState::new(h, StateCovariance::zeros()), &UkfConfig::default()).unwrap();
        for j in 0..SIGMA_COUNT {
            assert_eq!(sp.points.column(j), h.column(0));
        }
    }

    #[test]
    fn sigma_points_reconstruct_mean_and_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_psd(&mut rng);
            let h = StateVector::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let sp = sigma_points(&UkfState::new(h, p), &UkfConfig::default()).unwrap();
            assert_eq!(sp.points.column(0), h.column(0));
            let mean = sp.mean();
            assert!((mean - h).norm() <= 1e-8 * h.norm());
            let cov = sp.covariance(&mean);
            assert!((cov - p).norm() <= 1e-8 * p.norm());
        }
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let mut p = StateCovariance::identity();
        p[(3, 3)] = -1.0;
        let r = sigma_points(&UkfState::new(StateVector::zeros(), p), &UkfConfig::default());
        assert!(matches!(r, Err(Error::CovarianceNotPsd)));
    }

    #[test]
    fn init_covariance_vanishes_without_noise() {
        let h = true_h();
        let set = CorrespondenceSet::from_homography(&points(30, 1), &h, 0.0).unwrap();
        let p = init_covariance(&set, &h).unwrap();
        let norm = p.symmetric_eigen().eigenvalues.abs().max();
        assert!(norm <= 1e-9, "spectral norm {norm}");
    }

    #[test]
    fn init_covariance_scales_with_variance() {
        let h = true_h();
        let pts = points(30, 2);
        let a = init_covariance(&CorrespondenceSet::from_homography(&pts, &h, 0.5).unwrap(), &h).unwrap();
        let b = init_covariance(&CorrespondenceSet::from_homography(&pts, &h, 1.0).unwrap(), &h).unwrap();
        let na = a.symmetric_eigen().eigenvalues.abs().max();
        let nb = b.symmetric_eigen().eigenvalues.abs().max();
        assert!((nb / na - 4.0).abs() < 0.04, "ratio {}", nb / na);
    }

    #[test]
    fn init_covariance_matches_monte_carlo() {
        let h = true_h();
        let sigma = 0.5;
        let pts = points(50, 4);
        let exact = CorrespondenceSet::from_homography(&pts, &h, sigma).unwrap();
        let predicted = init_covariance(&exact, &h).unwrap();
        let cond = cond_of(&exact);

        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 2000;
        let samples: Vec<StateVector> = (0..trials)
            .map(|_| {
                let pairs = exact
                    .pairs
                    .iter()
                    .map(|c| Correspondence {
                        x: c.x + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
                        x_prime: c.x_prime + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)),
                        score: 1.0,
                    })
                    .collect();
                let fit = fit_homography_dlt(&CorrespondenceSet::new(pairs, sigma)).unwrap();
                StateVector::from_column_slice(&cond.to_conditioned(&fit).unwrap().params8().unwrap())
            })
            .collect();
        let mean = samples.iter().fold(StateVector::zeros(), |a, s| a + s) / trials as f64;
        let sample_cov = samples
            .iter()
            .fold(StateCovariance::zeros(), |a, s| a + (s - mean) * (s - mean).transpose())
            / (trials - 1) as f64;
        let ns = sample_cov.symmetric_eigen().eigenvalues.abs().max();
        let np = predicted.symmetric_eigen().eigenvalues.abs().max();
        let ratio = np / ns;
        assert!((0.5..=2.0).contains(&ratio), "predicted/sample spectral ratio {ratio}");
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let h = true_h();
        let set = CorrespondenceSet::from_homography(&points(40, 5), &h, 0.3).unwrap();
        let cfg = UkfConfig::default();
        let p = init_covariance(&set, &h).unwrap();
        let state = UkfState::from_homography(&h, p, cond_of(&set)).unwrap();
        let next = ukf_step(&state, &set, &cfg).unwrap();
        assert!((next.h - state.h).abs().max() < 1e-6);
        let q_trace = STATE_DIM as f64 * cfg.process_noise_sigma.powi(2);
        assert!(next.p.trace() <= state.p.trace() + q_trace);
    }

    #[test]
    fn informative_update_shrinks_covariance() {
        let h = true_h();
        let set = CorrespondenceSet::from_homography(&points(40, 6), &h, 0.3).unwrap();
        let cfg = UkfConfig::default();
        let start = h.compose(&Homography::translation(2.0, -1.0));
        let state = UkfState::from_homography(&start, init_covariance(&set, &start).unwrap(), cond_of(&set)).unwrap();
        let next = ukf_step(&state, &set, &cfg).unwrap();
        let q_trace = STATE_DIM as f64 * cfg.process_noise_sigma.powi(2);
        assert!(next.p.trace() < state.p.trace() + q_trace);
        assert!(next.covariance_is_valid());
    }

    #[test]
    fn refine_fixed_point() {
        let h = true_h();
        let set = CorrespondenceSet::from_homography(&points(60, 7), &h, 0.0).unwrap();
        let r = refine_homography(&h, &set, &UkfConfig::default(), 10, 1e-6).unwrap();
        assert!(r.converged);
        assert!((r.homography.matrix() - h.matrix()).abs().max() < 1e-6);
        assert!(r.mean_error < 1e-6);
    }

    #[test]
    fn sparse_gross_error_stays_large() {
        let h = true_h();
        let set = CorrespondenceSet::from_homography(&points(6, 10), &h, 0.3).unwrap();
        let start = Homography::translation(20.0, 0.0).compose(&h);
        let r = refine_homography(&start, &set, &UkfConfig::default(), 10, 1e-3).unwrap();
        assert!(r.mean_error > 5.0, "error {}", r.mean_error);
    }

    #[test]
    fn clean_data_error_is_monotone() {
        let h = true_h();
        let set = CorrespondenceSet::from_homography(&points(40, 11), &h, 0.3).unwrap();
        let cfg = UkfConfig {
            process_noise_sigma: 1e-12,
            ..UkfConfig::default()
        };
        let start = Homography::translation(1.5, -1.0).compose(&h);
        let mut state =
            UkfState::from_homography(&start, init_covariance(&set, &start).unwrap(), cond_of(&set)).unwrap();
        let mut prev = mean_reprojection_error(&state.homography(), &set);
        for _ in 0..10 {
            state = ukf_step(&state, &set, &cfg).unwrap();
            let e = mean_reprojection_error(&state.homography(), &set);
            assert!(e <= prev + 1e-9, "{e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn covariance_stays_valid_over_many_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = true_h();
        let cfg = UkfConfig::default();
        let set = CorrespondenceSet::from_homography(&points(30, 13), &h, 0.5).unwrap();
        let noisy = CorrespondenceSet::new(
            set.pairs
                .iter()
                .map(|c| Correspondence {
                    x_prime: c.x_prime + Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    ..*c
                })
                .collect(),
            0.5,
        );
        let mut state = UkfState::from_homography(&h, init_covariance(&set, &h).unwrap(), cond_of(&set)).unwrap();
        for _ in 0..100 {
            state = ukf_step(&state, &noisy, &cfg).unwrap();
            assert!(state.covariance_is_valid());
        }
    }

    #[test]
    fn conditioning_round_trip() {
        let h = true_h();
        let c = Conditioning::from_points(&points(20, 9)).unwrap();
        let back = c.to_pixels(&c.to_conditioned(&h).unwrap()).unwrap();
        assert!((back.matrix() - h.matrix()).abs().max() < 1e-9);
        let p = Vec2::new(10.0, 20.0);
        let q = c.matrix() * p.push(1.0);
        assert!((c.point(&p) - q.xy()).norm() < 1e-12);
    }

    #[test]
    fn two_pixel_error_converges() {
        let h = true_h();
        let set = CorrespondenceSet::from_homography(&points(50, 8), &h, 0.3).unwrap();
        let start = Homography::translation(2.0, 0.0).compose(&h);
        let cfg = UkfConfig {
            measurement_noise_sigma: 0.3,
            ..UkfConfig::default()
        };
        let r = refine_homography(&start, &set, &cfg, 10, 0.0).unwrap();
        assert!(r.mean_error < 0.1, "error {}", r.mean_error);
    }
}
