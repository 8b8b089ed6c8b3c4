//! Warping, translational fallback alignment, frame selection and the
//! tile-based frequency-domain Wiener merge.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CorrespondenceSet;
use crate::geometry::{apply_homography, Homography, Vec2};
use crate::image::{Image, Mask};

/// Share of invalid pixels above which a tile of an alternative is ignored.
const MAX_INVALID_TILE_FRACTION: f64 = 0.25;
/// Minimum share of the level that must overlap for an offset to be scored.
const MIN_OVERLAP_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFrame {
    /// Frame resampled into reference geometry.
    pub image: Image,
    pub mask: Mask,
    /// Reference-to-frame mapping used for the warp.
    pub homography: Homography,
    /// Mean residual in px; infinite when it could not be measured.
    pub steady_error: f64,
    pub valid: bool,
}

impl AlignedFrame {
    pub fn reference(image: Image) -> Self {
        let (w, h) = image.dims();
        AlignedFrame {
            image,
            mask: Mask::full(w, h),
            homography: Homography::identity(),
            steady_error: 0.0,
            valid: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub tile: usize,
    pub overlap: usize,
    /// Per-pixel noise variance of the input frames.
    pub noise_variance: f64,
    pub max_frames: usize,
    pub steady_error_threshold: f64,
    /// Robustness factor `c` in `|D|² / (|D|² + c σ²)`.
    pub shrinkage: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            tile: 16,
            overlap: 8,
            noise_variance: 0.0,
            max_frames: 18,
            steady_error_threshold: 5.0,
            shrinkage: 8.0,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32, 64].contains(&self.tile) {
            return Err(Error::InvalidArgument(format!("tile must be 8, 16, 32 or 64, got {}", self.tile)));
        }
        if self.overlap == 0 || self.overlap >= self.tile {
            return Err(Error::InvalidArgument(format!(
                "overlap must lie in (0, {}), got {}",
                self.tile, self.overlap
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidArgument("noise variance must be finite and non-negative".into()));
        }
        if self.max_frames == 0 {
            return Err(Error::InvalidArgument("max_frames must be at least 1".into()));
        }
        if !(self.steady_error_threshold >= 0.0 && self.shrinkage >= 0.0) {
            return Err(Error::InvalidArgument("threshold and shrinkage must be non-negative".into()));
        }
        Ok(())
    }
}

/// Resamples `img` into reference geometry: output pixel `p` reads `img` at
/// `h·p`. Samples that fall outside `img` are zero and masked invalid.
pub fn warp_frame(img: &Image, h: &Homography) -> (Image, Mask) {
    let (w, ht) = img.dims();
    if h.matrix() == Homography::identity().matrix() {
        return (img.clone(), Mask::full(w, ht));
    }
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..ht)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0; w];
            let mut ok = vec![false; w];
            for x in 0..w {
                if let Ok(q) = apply_homography(h, &Vec2::new(x as f64, y as f64)) {
                    if let Some(v) = img.sample(q.x, q.y) {
                        vals[x] = v;
                        ok[x] = true;
                    }
                }
            }
            (vals, ok)
        })
        .collect();
    let mut data = Vec::with_capacity(w * ht);
    let mut valid = Vec::with_capacity(w * ht);
    for (v, m) in rows {
        data.extend(v);
        valid.extend(m);
    }
    (Image::new(w, ht, data).expect("sizes agree"), Mask::from_vec(w, ht, valid))
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// 5-tap binomial blur followed by 2× decimation. A coarse pixel is valid
/// only if its whole footprint was.
fn downsample(img: &Image, mask: &Mask) -> (Image, Mask) {
    let (w, h) = img.dims();
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0; nw * nh];
    let mut ok = vec![true; nw * nh];
    for cy in 0..nh {
        for cx in 0..nw {
            let (x0, y0) = (2 * cx as isize, 2 * cy as isize);
            let mut acc = 0.0;
            let mut valid = true;
            for (j, wy) in BINOMIAL.iter().enumerate() {
                let y = clamp(y0 + j as isize - 2, h);
                for (i, wx) in BINOMIAL.iter().enumerate() {
                    let x = clamp(x0 + i as isize - 2, w);
                    if mask.get(x, y) {
                        acc += wx * wy * img.get(x, y);
                    } else {
                        valid = false;
                    }
                }
            }
            out[cy * nw + cx] = if valid { acc } else { 0.0 };
            ok[cy * nw + cx] = valid;
        }
    }
    (Image::new(nw, nh, out).expect("sizes agree"), Mask::from_vec(nw, nh, ok))
}

/// Mean squared difference of `cur(p + d)` against `reference(p)` over the
/// valid overlap; `None` when the overlap is too small.
fn ssd(reference: &Image, current: &Image, mask: &Mask, dx: isize, dy: isize) -> Option<f64> {
    let (w, h) = reference.dims();
    let (wi, hi) = (w as isize, h as isize);
    let x_lo = 0.max(-dx);
    let x_hi = wi.min(wi - dx);
    let y_lo = 0.max(-dy);
    let y_hi = hi.min(hi - dy);
    if x_lo >= x_hi || y_lo >= y_hi {
        return None;
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (cx, cy) = ((x + dx) as usize, (y + dy) as usize);
            if mask.get(cx, cy) {
                let d = current.get(cx, cy) - reference.get(x as usize, y as usize);
                acc += d * d;
                count += 1;
            }
        }
    }
    if (count as f64) < MIN_OVERLAP_FRACTION * (w * h) as f64 {
        return None;
    }
    Some(acc / count as f64)
}

/// Coarse-to-fine integer translation `d` minimizing
/// `Σ (current(p + d) − reference(p))²`.
pub fn pyramid_align(reference: &Image, current: &Image, levels: usize, search: usize) -> Result<Vec2> {
    let (w, h) = current.dims();
    pyramid_align_masked(reference, current, &Mask::full(w, h), levels, search)
}

/// [`pyramid_align`] restricted to pixels of `current` flagged in `mask`.
pub fn pyramid_align_masked(
    reference: &Image,
    current: &Image,
    mask: &Mask,
    levels: usize,
    search: usize,
) -> Result<Vec2> {
    if reference.dims() != current.dims() {
        return Err(Error::DimensionMismatch {
            expected: reference.dims(),
            got: current.dims(),
        });
    }
    if mask.dims() != current.dims() {
        return Err(Error::DimensionMismatch {
            expected: current.dims(),
            got: mask.dims(),
        });
    }
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let (w, h) = reference.dims();
    let full = Mask::full(w, h);
    let mut refs = vec![(reference.clone(), full)];
    let mut curs = vec![(current.clone(), mask.clone())];
    for _ in 1..levels {
        let (ri, rm) = refs.last().unwrap();
        let (ci, cm) = curs.last().unwrap();
        if ri.width() < 8 || ri.height() < 8 {
            break;
        }
        let r = downsample(ri, rm);
        let c = downsample(ci, cm);
        refs.push(r);
        curs.push(c);
    }

    let s = search as isize;
    let mut est = (0isize, 0isize);
    for level in (0..refs.len()).rev() {
        let (ri, _) = &refs[level];
        let (ci, cm) = &curs[level];
        let mut best: Option<(f64, isize, (isize, isize))> = None;
        for oy in -s..=s {
            for ox in -s..=s {
                let d = (est.0 + ox, est.1 + oy);
                if let Some(cost) = ssd(ri, ci, cm, d.0, d.1) {
                    let mag = d.0 * d.0 + d.1 * d.1;
                    let better = match best {
                        None => true,
                        Some((bc, bm, _)) => cost < bc || (cost == bc && mag < bm),
                    };
                    if better {
                        best = Some((cost, mag, d));
                    }
                }
            }
        }
        if let Some((_, _, d)) = best {
            est = d;
        }
        if level > 0 {
            est = (est.0 * 2, est.1 * 2);
        }
    }
    Ok(Vec2::new(est.0 as f64, est.1 as f64))
}

/// Mean `‖H x − x′‖` over the set.
pub fn steady_error(h: &Homography, set: &CorrespondenceSet) -> f64 {
    if set.is_empty() {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for c in &set.pairs {
        match apply_homography(h, &c.x) {
            Ok(p) => total += (p - c.x_prime).norm(),
            Err(_) => return f64::INFINITY,
        }
    }
    total / set.len() as f64
}

/// Indices kept by [`select_frames`].
pub fn selected_indices(frames: &[AlignedFrame], cfg: &MergeConfig) -> Vec<usize> {
    let mut keep = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        if keep.len() == cfg.max_frames {
            break;
        }
        if i == 0 || f.steady_error <= cfg.steady_error_threshold {
            keep.push(i);
        }
    }
    keep
}

/// Reference plus every frame whose steady error is within the threshold, in
/// order, capped at `max_frames`. Kept frames are marked valid.
pub fn select_frames(frames: &[AlignedFrame], cfg: &MergeConfig) -> Vec<AlignedFrame> {
    selected_indices(frames, cfg)
        .into_iter()
        .map(|i| AlignedFrame {
            valid: true,
            ..frames[i].clone()
        })
        .collect()
}

fn window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos())
        .collect()
}

struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    /// In-place unitary 2-D transform.
    fn run(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(buf);
        transpose(buf, n);
        plan.process(buf);
        transpose(buf, n);
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

fn transpose(buf: &mut [Complex<f64>], n: usize) {
    for y in 0..n {
        for x in y + 1..n {
            buf.swap(y * n + x, x * n + y);
        }
    }
}

/// Tile-wise pairwise Wiener merge against `frames[0]`.
///
/// For each raised-cosine-windowed tile the windowed difference
/// `D_z = w·(T_z − T₀)` is shrunk per frequency by `1 − A_z` with
/// `A_z = |D_z|² / (|D_z|² + c σ²)`, and the reference plus the averaged
/// surviving difference is overlap-added. Invalid pixels of an alternative
/// contribute no difference, and a tile with too many of them is skipped for
/// that frame.
pub fn merge_wiener(frames: &[AlignedFrame], cfg: &MergeConfig) -> Result<Image> {
    cfg.validate()?;
    let reference = &frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge needs at least one frame".into()))?
        .image;
    let (w, h) = reference.dims();
    for f in frames {
        if f.image.dims() != (w, h) || f.mask.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: f.image.dims(),
            });
        }
    }
    if frames.len() == 1 {
        return Ok(reference.clone());
    }

    let n = cfg.tile;
    let step = (n - cfg.overlap) as isize;
    let win = window(n);
    let fft = Fft2::new(n);
    let noise = cfg.shrinkage * cfg.noise_variance;
    let inv_frames = 1.0 / frames.len() as f64;

    let mut origins = Vec::new();
    let mut oy = -(n as isize) / 2;
    while oy < h as isize {
        let mut ox = -(n as isize) / 2;
        while ox < w as isize {
            origins.push((ox, oy));
            ox += step;
        }
        oy += step;
    }

    let corrections: Vec<Vec<f64>> = origins
        .par_iter()
        .map(|&(ox, oy)| {
            let mut total = vec![Complex::new(0.0, 0.0); n * n];
            let mut buf = vec![Complex::new(0.0, 0.0); n * n];
            let mut any = false;
            for frame in &frames[1..] {
                let mut inside = 0usize;
                let mut invalid = 0usize;
                for ty in 0..n {
                    for tx in 0..n {
                        let (x, y) = (ox + tx as isize, oy + ty as isize);
                        let mut d = 0.0;
                        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                            let (xu, yu) = (x as usize, y as usize);
                            inside += 1;
                            if frame.mask.get(xu, yu) {
                                d = win[tx] * win[ty] * (frame.image.get(xu, yu) - reference.get(xu, yu));
                            } else {
                                invalid += 1;
                            }
                        }
                        buf[ty * n + tx] = Complex::new(d, 0.0);
                    }
                }
                if invalid as f64 > MAX_INVALID_TILE_FRACTION * inside as f64 {
                    continue;
                }
                fft.run(&mut buf, false);
                for (t, d) in total.iter_mut().zip(&buf) {
                    let p = d.norm_sqr();
                    let keep = if p == 0.0 { 0.0 } else { 1.0 - p / (p + noise) };
                    *t += d * keep;
                }
                any = true;
            }
            if !any {
                return Vec::new();
            }
            for t in total.iter_mut() {
                *t *= inv_frames;
            }
            fft.run(&mut total, true);
            total.iter().map(|c| c.re).collect()
        })
        .collect();

    let mut acc = vec![0.0; w * h];
    let mut weight = vec![0.0; w * h];
    for (&(ox, oy), corr) in origins.iter().zip(&corrections) {
        for ty in 0..n {
            for tx in 0..n {
                let (x, y) = (ox + tx as isize, oy + ty as isize);
                if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                    continue;
                }
                let i = y as usize * w + x as usize;
                weight[i] += win[tx] * win[ty];
                if !corr.is_empty() {
                    acc[i] += corr[ty * n + tx];
                }
            }
        }
    }
    let data = reference
        .data()
        .iter()
        .zip(acc.iter().zip(&weight))
        .map(|(r, (a, wt))| if *a == 0.0 { *r } else { r + a / wt })
        .collect();
    Image::new(w, h, data)
}

/// Noise standard deviation from the median absolute finest-scale Haar
/// diagonal coefficient, `median(|HH|) / 0.6745`. Images should be at least
/// 64×64 for a stable estimate.
pub fn estimate_noise_sigma(img: &Image) -> f64 {
    let (w, h) = img.dims();
    let mut coeffs = Vec::with_capacity((w / 2) * (h / 2));
    for y in (0..h.saturating_sub(1)).step_by(2) {
        for x in (0..w.saturating_sub(1)).step_by(2) {
            let v = (img.get(x, y) - img.get(x + 1, y) - img.get(x, y + 1) + img.get(x + 1, y + 1)) / 2.0;
            coeffs.push(v.abs());
        }
    }
    if coeffs.is_empty() {
        return 0.0;
    }
    let mid = coeffs.len() / 2;
    let (_, m, _) = coeffs.select_nth_unstable_by(mid, f64::total_cmp);
    *m / 0.6745
}
