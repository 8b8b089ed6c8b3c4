//! Interest points, guided patch matching and homography fitting.
//!
//! Corners come from the Harris response; matches are found by zero-mean
//! normalized cross-correlation (ZNCC) in a small window around the position
//! predicted by a homography (in the pipeline, the gyro rotation). Current-frame
//! patches are resampled through that prediction, so moderate rotation between
//! the frames does not decorrelate them.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{apply_homography, Homography, Mat3, Vec2};
use crate::image::Image;

pub const MIN_CORRESPONDENCES: usize = 4;
const HARRIS_K: f64 = 0.04;
const HARRIS_SIGMA: f64 = 1.0;
const HARRIS_RELATIVE_THRESHOLD: f64 = 1e-3;
const HARRIS_ABSOLUTE_THRESHOLD: f64 = 1e-12;
const BORDER: usize = 4;
const DEGENERATE_SV_RATIO: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Position in the target (reference) frame.
    pub x: Vec2,
    /// Matched position in the current frame.
    pub x_prime: Vec2,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    /// Assumed localization noise, px.
    pub point_noise_sigma: f64,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>, point_noise_sigma: f64) -> Self {
        CorrespondenceSet {
            pairs,
            point_noise_sigma,
        }
    }

    /// Exact pairs `x ↦ H x`, score 1.
    pub fn from_homography(points: &[Vec2], h: &Homography, point_noise_sigma: f64) -> Result<Self> {
        let pairs = points
            .iter()
            .map(|p| {
                Ok(Correspondence {
                    x: *p,
                    x_prime: apply_homography(h, p)?,
                    score: 1.0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CorrespondenceSet::new(pairs, point_noise_sigma))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, mask: &[bool]) -> CorrespondenceSet {
        let pairs = self
            .pairs
            .iter()
            .zip(mask)
            .filter(|(_, keep)| **keep)
            .map(|(p, _)| *p)
            .collect();
        CorrespondenceSet::new(pairs, self.point_noise_sigma)
    }

    /// CSV with header `x,y,x_prime,y_prime,score`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y,x_prime,y_prime,score\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.x.x, p.x.y, p.x_prime.x, p.x_prime.y, p.score
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, point_noise_sigma: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::input(path, lineno + 1, e.to_string()))?;
            if v.len() != 5 {
                return Err(Error::input(path, lineno + 1, format!("expected 5 fields, got {}", v.len())));
            }
            if !(0.0..=1.0).contains(&v[4]) {
                return Err(Error::input(path, lineno + 1, format!("score {} outside [0, 1]", v[4])));
            }
            pairs.push(Correspondence {
                x: Vec2::new(v[0], v[1]),
                x_prime: Vec2::new(v[2], v[3]),
                score: v[4],
            });
        }
        Ok(CorrespondenceSet::new(pairs, point_noise_sigma))
    }
}

/// Knobs for guided matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    pub search_radius: usize,
    /// Odd patch side, px.
    pub patch: usize,
    pub zncc_threshold: f64,
    pub point_noise_sigma: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            search_radius: 8,
            patch: 11,
            zncc_threshold: 0.5,
            point_noise_sigma: 0.5,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with clamped borders.
pub(crate) fn convolve_separable(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn harris_response(img: &Image) -> Vec<f64> {
    let (w, h) = img.dims();
    let d = img.data();
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let gx = 0.5 * (d[y * w + xp] - d[y * w + xm]);
            let gy = 0.5 * (d[yp * w + x] - d[ym * w + x]);
            ixx[y * w + x] = gx * gx;
            iyy[y * w + x] = gy * gy;
            ixy[y * w + x] = gx * gy;
        }
    }
    let k = gaussian_kernel(HARRIS_SIGMA);
    let sxx = convolve_separable(&ixx, w, h, &k);
    let syy = convolve_separable(&iyy, w, h, &k);
    let sxy = convolve_separable(&ixy, w, h, &k);
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - HARRIS_K * tr * tr
        })
        .collect()
}

fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-300 {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// Harris corners, strongest first, at least `min_distance` apart, with
/// sub-pixel positions from a quadratic fit of the response.
pub fn detect_corners(img: &Image, max_corners: usize, min_distance: f64) -> Result<Vec<Vec2>> {
    let (w, h) = img.dims();
    if w < 32 || h < 32 {
        return Err(Error::InvalidArgument(format!("corner detection needs at least 32x32, got {w}x{h}")));
    }
    let resp = harris_response(img);
    let max_resp = resp.iter().copied().fold(0.0_f64, f64::max);
    let threshold = (max_resp * HARRIS_RELATIVE_THRESHOLD).max(HARRIS_ABSOLUTE_THRESHOLD);

    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let v = resp[y * w + x];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = resp[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    // ties go to the earlier pixel in raster order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v, x, y));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));

    let cell = min_distance.max(1.0);
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<Vec2>> = vec![Vec::new(); gw * gh];
    let min_d2 = min_distance * min_distance;
    let mut out = Vec::new();
    for (_, x, y) in peaks {
        if out.len() >= max_corners {
            break;
        }
        let c = Vec2::new(
            x as f64 + parabola_offset(resp[y * w + x - 1], resp[y * w + x], resp[y * w + x + 1]),
            y as f64 + parabola_offset(resp[(y - 1) * w + x], resp[y * w + x], resp[(y + 1) * w + x]),
        );
        let (cx, cy) = ((c.x / cell) as usize, (c.y / cell) as usize);
        let crowded = (cy.saturating_sub(1)..=(cy + 1).min(gh - 1)).any(|gy| {
            (cx.saturating_sub(1)..=(cx + 1).min(gw - 1))
                .any(|gx| grid[gy * gw + gx].iter().any(|p| (p - c).norm_squared() < min_d2))
        });
        if crowded {
            continue;
        }
        grid[cy * gw + cx].push(c);
        out.push(c);
    }
    if out.len() < MIN_CORRESPONDENCES {
        return Err(Error::TooFewFeatures {
            found: out.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    Ok(out)
}

fn match_one(target: &Image, current: &Image, corner: &Vec2, h: &Homography, p: &MatchParams) -> Option<Correspondence> {
    let half = (p.patch / 2) as isize;
    let r = p.search_radius as isize;
    let (tw, th) = target.dims();
    let ci = (corner.x.round() as isize, corner.y.round() as isize);
    if ci.0 - half < 0 || ci.1 - half < 0 || ci.0 + half >= tw as isize || ci.1 + half >= th as isize {
        return None;
    }
    let n = (2 * half + 1) as usize;
    let mut tpatch = Vec::with_capacity(n * n);
    let mut pred = Vec::with_capacity(n * n);
    let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (ci.0 + dx, ci.1 + dy);
            tpatch.push(target.get(x as usize, y as usize));
            let q = apply_homography(h, &Vec2::new(x as f64, y as f64)).ok()?;
            lo = lo.inf(&q);
            hi = hi.sup(&q);
            pred.push(q);
        }
    }
    let (cw, ch) = current.dims();
    let rf = r as f64;
    if lo.x - rf < 0.0 || lo.y - rf < 0.0 || hi.x + rf > (cw - 1) as f64 || hi.y + rf > (ch - 1) as f64 {
        return None;
    }
    let tmean = tpatch.iter().sum::<f64>() / tpatch.len() as f64;
    tpatch.iter_mut().for_each(|v| *v -= tmean);
    let tnorm = tpatch.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tnorm < 1e-9 {
        return None;
    }

    // integer offsets keep the bilinear weights, so split each position once
    let taps: Vec<(isize, isize, f64, f64)> = pred
        .iter()
        .map(|q| {
            let (fx, fy) = (q.x.floor(), q.y.floor());
            (fx as isize, fy as isize, q.x - fx, q.y - fy)
        })
        .collect();
    let data = current.data();
    let (cwi, chi) = (cw as isize, ch as isize);
    let side = (2 * r + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    let mut buf = vec![0.0; n * n];
    for oy in -r..=r {
        for ox in -r..=r {
            for (b, &(ix, iy, fx, fy)) in buf.iter_mut().zip(&taps) {
                let (x0, y0) = (ix + ox, iy + oy);
                let x1 = (x0 + 1).min(cwi - 1) as usize;
                let y1 = (y0 + 1).min(chi - 1) as usize;
                let (x0, y0) = (x0 as usize, y0 as usize);
                let top = (1.0 - fx) * data[y0 * cw + x0] + fx * data[y0 * cw + x1];
                let bottom = (1.0 - fx) * data[y1 * cw + x0] + fx * data[y1 * cw + x1];
                *b = (1.0 - fy) * top + fy * bottom;
            }
            let mean = buf.iter().sum::<f64>() / buf.len() as f64;
            let (mut cov, mut var) = (0.0, 0.0);
            for (t, b) in tpatch.iter().zip(&buf) {
                let c = b - mean;
                cov += t * c;
                var += c * c;
            }
            if var > 0.0 {
                scores[(oy + r) as usize * side + (ox + r) as usize] = cov / (tnorm * var.sqrt());
            }
        }
    }
    let (best, &score) = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
    let (bx, by) = (best % side, best / side);
    if score < p.zncc_threshold {
        return None;
    }
    // a peak on the window edge means the true optimum may lie outside it
    if r > 0 && (bx == 0 || by == 0 || bx == side - 1 || by == side - 1) {
        return None;
    }
    let at = |x: usize, y: usize| scores[y * side + x];
    let mut d = Vec2::new(bx as f64 - rf, by as f64 - rf);
    if r > 0 {
        d.x += parabola_offset(at(bx - 1, by), score, at(bx + 1, by));
        d.y += parabola_offset(at(bx, by - 1), score, at(bx, by + 1));
    }
    let x = Vec2::new(ci.0 as f64, ci.1 as f64);
    let center = apply_homography(h, &x).ok()?;
    Some(Correspondence {
        x,
        x_prime: center + d,
        score: score.clamp(0.0, 1.0),
    })
}

/// Matches each target corner inside a window around its predicted position.
///
/// Target positions are the corners rounded to the pixel grid; current-frame
/// positions carry the sub-pixel refinement.
pub fn match_corners(
    target: &Image,
    current: &Image,
    corners: &[Vec2],
    predicted_h: &Homography,
    params: &MatchParams,
) -> Result<CorrespondenceSet> {
    if params.patch < 7 || params.patch.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("patch must be odd and >= 7, got {}", params.patch)));
    }
    if params.search_radius < 1 {
        return Err(Error::InvalidArgument("search radius must be >= 1".into()));
    }
    let pairs: Vec<Correspondence> = corners
        .par_iter()
        .filter_map(|c| match_one(target, current, c, predicted_h, params))
        .collect();
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(Error::TooFewFeatures {
            found: pairs.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    Ok(CorrespondenceSet::new(pairs, params.point_noise_sigma))
}

/// Similarity transform taking points to zero centroid and mean distance √2.
pub(crate) fn hartley_normalization<'a>(points: impl Iterator<Item = &'a Vec2> + Clone) -> Option<Mat3> {
    let n = points.clone().count() as f64;
    let centroid = points.clone().fold(Vec2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) || !mean_dist.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Mat3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0))
}

fn transform(m: &Mat3, p: &Vec2) -> Vec2 {
    let v = m * p.push(1.0);
    Vec2::new(v.x / v.z, v.y / v.z)
}

/// The two constraint rows each correspondence contributes to `A h = 0`.
pub(crate) fn dlt_rows(x: &Vec2, xp: &Vec2) -> [[f64; 9]; 2] {
    [
        [x.x, x.y, 1.0, 0.0, 0.0, 0.0, -x.x * xp.x, -x.y * xp.x, -xp.x],
        [0.0, 0.0, 0.0, x.x, x.y, 1.0, -x.x * xp.y, -x.y * xp.y, -xp.y],
    ]
}

/// Least-squares homography by the normalized direct linear transform.
pub fn fit_homography_dlt(set: &CorrespondenceSet) -> Result<Homography> {
    let n = set.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::DegenerateConfiguration("fewer than 4 correspondences"));
    }
    let t1 = hartley_normalization(set.pairs.iter().map(|p| &p.x))
        .ok_or(Error::DegenerateConfiguration("coincident target points"))?;
    let t2 = hartley_normalization(set.pairs.iter().map(|p| &p.x_prime))
        .ok_or(Error::DegenerateConfiguration("coincident current points"))?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in set.pairs.iter().enumerate() {
        let r = dlt_rows(&transform(&t1, &p.x), &transform(&t2, &p.x_prime));
        for k in 0..2 {
            for c in 0..9 {
                a[(2 * i + k, c)] = r[k][c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateConfiguration("SVD failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s_max = svd.singular_values[order[0]];
    let s_second_smallest = svd.singular_values[order[7]];
    if s_second_smallest <= DEGENERATE_SV_RATIO * s_max {
        return Err(Error::DegenerateConfiguration("null space has more than one dimension"));
    }
    let hv = v_t.row(order[8]);
    let hn = Mat3::from_row_slice(&hv.iter().copied().collect::<Vec<_>>());
    let t2_inv = t2.try_inverse().expect("similarity is invertible");
    let m = t2_inv * hn * t1;
    let h = Homography::new(m).map_err(|_| Error::DegenerateConfiguration("fitted homography is singular"))?;
    h.normalized()
        .map_err(|_| Error::DegenerateConfiguration("fitted homography has vanishing h33"))
}

/// Forward reprojection distance `‖H x − x′‖`, infinite at the line at infinity.
pub fn reprojection_error(h: &Homography, c: &Correspondence) -> f64 {
    match apply_homography(h, &c.x) {
        Ok(p) => (p - c.x_prime).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// RANSAC over minimal 4-point samples followed by a DLT refit on the
/// consensus set. Deterministic for a given seed.
pub fn fit_homography_robust(
    set: &CorrespondenceSet,
    inlier_threshold: f64,
    max_iters: usize,
    rng_seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    let n = set.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::DegenerateConfiguration("fewer than 4 correspondences"));
    }
    let inliers_of = |h: &Homography| -> (Vec<bool>, usize, f64) {
        let mut count = 0;
        let mut err_sum = 0.0;
        let mask = set
            .pairs
            .iter()
            .map(|c| {
                let e = reprojection_error(h, c);
                let ok = e < inlier_threshold;
                if ok {
                    count += 1;
                    err_sum += e;
                }
                ok
            })
            .collect();
        (mask, count, err_sum)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best: Option<(Vec<bool>, usize, f64)> = None;
    let mut needed = max_iters as f64;
    let mut iter = 0;
    while iter < max_iters && (iter as f64) < needed {
        iter += 1;
        let idx = rand::seq::index::sample(&mut rng, n, MIN_CORRESPONDENCES);
        let sample = CorrespondenceSet::new(idx.iter().map(|i| set.pairs[i]).collect(), set.point_noise_sigma);
        let Ok(h) = fit_homography_dlt(&sample) else {
            continue;
        };
        let (mask, count, err) = inliers_of(&h);
        let better = match &best {
            None => true,
            Some((_, c, e)) => count > *c || (count == *c && err < *e),
        };
        if better {
            let w = count as f64 / n as f64;
            let p_fail = 1.0 - w.powi(MIN_CORRESPONDENCES as i32);
            needed = if p_fail <= 0.0 {
                0.0
            } else if p_fail >= 1.0 {
                max_iters as f64
            } else {
                (1e-3_f64).ln() / p_fail.ln()
            };
            best = Some((mask, count, err));
        }
    }
    let (mut mask, count, _) = best.ok_or(Error::DegenerateConfiguration("no RANSAC model could be fit"))?;
    if count < MIN_CORRESPONDENCES {
        return Err(Error::DegenerateConfiguration("no model reached 4 inliers"));
    }
    let mut h = fit_homography_dlt(&set.subset(&mask))?;
    for _ in 0..4 {
        let (next, count, _) = inliers_of(&h);
        if next == mask || count < MIN_CORRESPONDENCES {
            break;
        }
        match fit_homography_dlt(&set.subset(&next)) {
            Ok(refit) => {
                h = refit;
                mask = next;
            }
            Err(_) => break,
        }
    }
    Ok((h, mask))
}
