//! End-to-end alignment and merging of a burst against its first frame.

use rayon::prelude::*;
use serde::Serialize;

use crate::burst::BurstData;
use crate::error::{Error, Result};
use crate::features::{detect_corners, fit_homography_robust, match_corners, CorrespondenceSet, MatchParams};
use crate::geometry::{
    compose_initial_homography, decompose_homography, plane_term_to_pixels, to_camera_frame, to_euclidean,
    CameraIntrinsics, Homography, RotationMatrix, Vec2, Vec3,
};
use crate::gyro::{interframe_rotations, FrameTiming, GyroOptions, GyroTrace};
use crate::image::Image;
use crate::merge::{
    estimate_noise_sigma, merge_wiener, pyramid_align_masked, selected_indices, steady_error, warp_frame,
    AlignedFrame, MergeConfig,
};
use crate::simulator::{homography_error, psnr};
use crate::ukf::{refine_homography, UkfConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureConfig {
    pub max_corners: usize,
    pub min_distance: f64,
    pub patch: usize,
    pub search_radius: usize,
    pub zncc_threshold: f64,
    /// Assumed localization noise of a matched point, px.
    pub point_noise_sigma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            max_corners: 300,
            min_distance: 8.0,
            patch: 11,
            search_radius: 16,
            zncc_threshold: 0.5,
            point_noise_sigma: 0.5,
        }
    }
}

impl FeatureConfig {
    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            search_radius: self.search_radius,
            patch: self.patch,
            zncc_threshold: self.zncc_threshold,
            point_noise_sigma: self.point_noise_sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Falls back to the burst's ground truth when absent.
    pub intrinsics: Option<CameraIntrinsics>,
    pub ukf: UkfConfig,
    pub ukf_iterations: usize,
    /// Stop once the mean reprojection error changes by less than this, px.
    pub ukf_tolerance: f64,
    pub merge: MergeConfig,
    /// Per-pixel noise std of the frames; estimated from the reference when
    /// neither this nor ground truth provides it.
    pub noise_sigma: Option<f64>,
    pub features: FeatureConfig,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    /// RK4 step; `None` uses `min(native gyro interval, 1 ms)`.
    pub rk4_step_ns: Option<i64>,
    pub clock_offset_ns: i64,
    pub fallback_levels: usize,
    pub fallback_search: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            intrinsics: None,
            ukf: UkfConfig::default(),
            ukf_iterations: 10,
            ukf_tolerance: 1e-3,
            merge: MergeConfig::default(),
            noise_sigma: None,
            features: FeatureConfig::default(),
            ransac_threshold: 2.0,
            ransac_iterations: 500,
            rk4_step_ns: None,
            clock_offset_ns: 0,
            fallback_levels: 3,
            fallback_search: 4,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = &self.intrinsics {
            k.validate()?;
        }
        self.ukf.validate()?;
        self.merge.validate()?;
        if self.fallback_levels == 0 {
            return Err(Error::InvalidArgument("fallback_levels must be at least 1".into()));
        }
        if self.features.max_corners < 4 {
            return Err(Error::InvalidArgument("max_corners must be at least 4".into()));
        }
        if !(self.ransac_threshold > 0.0) || self.ransac_iterations == 0 {
            return Err(Error::InvalidArgument("RANSAC threshold and iterations must be positive".into()));
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {s}")));
            }
        }
        if matches!(self.rk4_step_ns, Some(s) if s <= 0) {
            return Err(Error::InvalidArgument("rk4 step must be positive".into()));
        }
        Ok(())
    }
}

/// How the final geometry of an alternative frame was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentPath {
    /// Gyro rotation, feature-based plane term and UKF refinement.
    Full,
    /// Features were usable but the refinement failed; the gyro-plus-plane
    /// initial homography was kept.
    Unrefined,
    /// Too few features: gyro rotation only.
    GyroOnly,
    /// Translation-only alignment without gyro or features.
    TranslationOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameReport {
    pub frame_id: usize,
    pub gyro_rotation: RotationMatrix,
    pub initial_h: Homography,
    pub refined_h: Homography,
    /// `refined_h` composed with the fallback translation.
    pub final_h: Homography,
    /// Mean validation residual, px; `null` in JSON when not measurable.
    pub steady_error: f64,
    pub fallback_shift: [f64; 2],
    pub valid: bool,
    pub feature_count: usize,
    pub inlier_count: usize,
    pub path: AlignmentPath,
}

/// Validation matches must be near-certain; random peaks of a weaker
/// correlation would report a plausible error for a wrong geometry.
const VALIDATION_ZNCC: f64 = 0.8;

fn validation_matches_needed(corners: usize) -> usize {
    8.max(corners.div_ceil(4))
}

/// Mean residual of the final geometry, measured on a fresh set of matches
/// guided by that geometry. Too few matches means the frame cannot be
/// trusted and yields an infinite error.
fn validation_error(reference: &Image, current: &Image, corners: &[Vec2], h: &Homography, params: &MatchParams) -> f64 {
    let params = MatchParams {
        zncc_threshold: params.zncc_threshold.max(VALIDATION_ZNCC),
        ..*params
    };
    match match_corners(reference, current, corners, h, &params) {
        Ok(set) if set.len() >= validation_matches_needed(corners.len()) => steady_error(h, &set),
        _ => f64::INFINITY,
    }
}

struct Shared<'a> {
    reference: &'a Image,
    corners: &'a [Vec2],
    k: CameraIntrinsics,
    cfg: &'a PipelineConfig,
}

fn align_alternative(shared: &Shared, frame_id: usize, current: &Image, r_gyro: RotationMatrix) -> (AlignedFrame, FrameReport) {
    let cfg = shared.cfg;
    let k = &shared.k;
    let params = cfg.features.match_params();
    let r0 = to_camera_frame(&r_gyro, k);

    let mut feature_count = 0;
    let mut inlier_count = 0;
    let mut initial_h = r0;
    let mut refined_h = r0;
    let mut path = AlignmentPath::GyroOnly;

    let guided = if shared.corners.len() >= 4 {
        match_corners(shared.reference, current, shared.corners, &r0, &params).ok()
    } else {
        None
    };
    if let Some(set) = guided {
        feature_count = set.len();
        let seed = cfg.seed.wrapping_add(frame_id as u64);
        if let Ok((h_fit, mask)) = fit_homography_robust(&set, cfg.ransac_threshold, cfg.ransac_iterations, seed) {
            let inliers: CorrespondenceSet = set.subset(&mask);
            inlier_count = inliers.len();
            let (t0, n0) = match decompose_homography(&to_euclidean(&h_fit, k), &r_gyro) {
                Ok(d) if !d.degenerate => plane_term_to_pixels(&d.t, &d.n, k),
                _ => (Vec3::zeros(), Vec3::z()),
            };
            if let Ok(h0) = compose_initial_homography(&r0, &t0, &n0) {
                initial_h = h0;
                refined_h = h0;
                path = AlignmentPath::Unrefined;
                if let Ok(r) = refine_homography(&h0, &inliers, &cfg.ukf, cfg.ukf_iterations, cfg.ukf_tolerance) {
                    if r.homography.matrix().iter().all(|v| v.is_finite()) {
                        refined_h = r.homography;
                        path = AlignmentPath::Full;
                    }
                }
            }
        }
    }

    let (mut image, mut mask) = warp_frame(current, &refined_h);
    let shift = pyramid_align_masked(shared.reference, &image, &mask, cfg.fallback_levels, cfg.fallback_search)
        .unwrap_or_else(|_| Vec2::zeros());
    let final_h = refined_h.compose(&Homography::translation(shift.x, shift.y));
    if shift != Vec2::zeros() {
        (image, mask) = warp_frame(current, &final_h);
    }
    let err = validation_error(shared.reference, current, shared.corners, &final_h, &params);
    let valid = err <= cfg.merge.steady_error_threshold;
    (
        AlignedFrame {
            image,
            mask,
            homography: final_h,
            steady_error: err,
            valid,
        },
        FrameReport {
            frame_id,
            gyro_rotation: r_gyro,
            initial_h,
            refined_h,
            final_h,
            steady_error: err,
            fallback_shift: [shift.x, shift.y],
            valid,
            feature_count,
            inlier_count,
            path,
        },
    )
}

fn check_frames(frames: &[Image], timings: &[FrameTiming]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("burst has no frames".into()));
    }
    if frames.len() != timings.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frames but {} timing entries",
            frames.len(),
            timings.len()
        )));
    }
    let dims = frames[0].dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            got: f.dims(),
        });
    }
    Ok(())
}

fn reference_corners(reference: &Image, cfg: &PipelineConfig) -> Vec<Vec2> {
    detect_corners(reference, cfg.features.max_corners, cfg.features.min_distance).unwrap_or_default()
}

/// Aligns every frame to frame 0. The returned frames start with the
/// untouched reference; reports cover the alternatives only. Per-frame
/// failures degrade to `valid = false` rather than aborting.
pub fn align_burst(
    frames: &[Image],
    timings: &[FrameTiming],
    trace: &GyroTrace,
    cfg: &PipelineConfig,
) -> Result<(Vec<AlignedFrame>, Vec<FrameReport>)> {
    cfg.validate()?;
    check_frames(frames, timings)?;
    let k = cfg
        .intrinsics
        .ok_or_else(|| Error::InvalidArgument("camera intrinsics are required".into()))?;
    let reference = &frames[0];
    if frames.len() == 1 {
        return Ok((vec![AlignedFrame::reference(reference.clone())], Vec::new()));
    }
    let opts = GyroOptions {
        step_ns: cfg.rk4_step_ns,
        clock_offset_ns: cfg.clock_offset_ns,
    };
    let rotations = interframe_rotations(trace, timings, &opts)?;
    let corners = reference_corners(reference, cfg);
    let shared = Shared {
        reference,
        corners: &corners,
        k,
        cfg,
    };
    let results: Vec<(AlignedFrame, FrameReport)> = (1..frames.len())
        .into_par_iter()
        .map(|i| align_alternative(&shared, i, &frames[i], rotations[i]))
        .collect();
    let mut aligned = vec![AlignedFrame::reference(reference.clone())];
    let mut reports = Vec::with_capacity(results.len());
    for (a, r) in results {
        aligned.push(a);
        reports.push(r);
    }
    Ok((aligned, reports))
}

/// Translation-only comparison: each alternative is aligned by the pyramid
/// search alone, with no gyro or feature information.
pub fn align_burst_translation_only(
    frames: &[Image],
    cfg: &PipelineConfig,
) -> Result<(Vec<AlignedFrame>, Vec<FrameReport>)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("burst has no frames".into()));
    }
    let reference = &frames[0];
    let corners = reference_corners(reference, cfg);
    let params = cfg.features.match_params();
    let results: Vec<(AlignedFrame, FrameReport)> = (1..frames.len())
        .into_par_iter()
        .map(|i| {
            let current = &frames[i];
            let (w, h) = current.dims();
            let shift = pyramid_align_masked(
                reference,
                current,
                &crate::image::Mask::full(w, h),
                cfg.fallback_levels,
                cfg.fallback_search,
            )
            .unwrap_or_else(|_| Vec2::zeros());
            let hom = Homography::translation(shift.x, shift.y);
            let (image, mask) = warp_frame(current, &hom);
            let err = validation_error(reference, current, &corners, &hom, &params);
            let valid = err <= cfg.merge.steady_error_threshold;
            (
                AlignedFrame {
                    image,
                    mask,
                    homography: hom,
                    steady_error: err,
                    valid,
                },
                FrameReport {
                    frame_id: i,
                    gyro_rotation: RotationMatrix::identity(),
                    initial_h: Homography::identity(),
                    refined_h: Homography::identity(),
                    final_h: hom,
                    steady_error: err,
                    fallback_shift: [shift.x, shift.y],
                    valid,
                    feature_count: 0,
                    inlier_count: 0,
                    path: AlignmentPath::TranslationOnly,
                },
            )
        })
        .collect();
    let mut aligned = vec![AlignedFrame::reference(reference.clone())];
    let mut reports = Vec::new();
    for (a, r) in results {
        aligned.push(a);
        reports.push(r);
    }
    Ok((aligned, reports))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// PSNR of the merged image against the clean reference, dB.
    pub merged_psnr: Option<f64>,
    /// PSNR of the noisy reference frame against the clean reference, dB.
    pub reference_psnr: Option<f64>,
    /// Final-geometry error against ground truth per alternative, px.
    pub homography_errors: Vec<f64>,
    pub median_homography_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub frame_count: usize,
    /// Frames merged, reference included.
    pub merged_count: usize,
    pub noise_sigma: f64,
    pub frames: Vec<FrameReport>,
    pub metrics: Option<Metrics>,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Number of alternatives that made it into the merge.
    pub fn valid_alternatives(&self) -> usize {
        self.frames.iter().filter(|f| f.valid).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub merged: Image,
    pub report: PipelineReport,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}

/// Aligns, selects and merges a burst, filling intrinsics and noise level
/// from ground truth when the configuration leaves them open.
pub fn run_pipeline(burst: &BurstData, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut cfg = *cfg;
    if cfg.intrinsics.is_none() {
        cfg.intrinsics = burst.truth.as_ref().map(|t| t.intrinsics);
    }
    let sigma = cfg
        .noise_sigma
        .or_else(|| burst.truth.as_ref().map(|t| t.noise_sigma))
        .unwrap_or_else(|| burst.frames.first().map(estimate_noise_sigma).unwrap_or(0.0));
    cfg.merge.noise_variance = sigma * sigma;

    let (mut aligned, mut reports) = align_burst(&burst.frames, &burst.timings, &burst.trace, &cfg)?;
    let keep = selected_indices(&aligned, &cfg.merge);
    for (i, frame) in aligned.iter_mut().enumerate() {
        frame.valid = keep.contains(&i);
    }
    for r in reports.iter_mut() {
        r.valid = keep.contains(&r.frame_id);
    }
    let chosen: Vec<AlignedFrame> = keep.iter().map(|&i| aligned[i].clone()).collect();
    let merged = merge_wiener(&chosen, &cfg.merge)?;

    let metrics = match &burst.truth {
        None => None,
        Some(truth) => {
            let size = burst.frames[0].dims();
            let errors = reports
                .iter()
                .map(|r| homography_error(&r.final_h, &truth.homographies[r.frame_id], size).unwrap_or(f64::INFINITY))
                .collect::<Vec<_>>();
            let (merged_psnr, reference_psnr) = match &burst.clean_reference {
                Some(clean) => (Some(psnr(&merged, clean)?), Some(psnr(&burst.frames[0], clean)?)),
                None => (None, None),
            };
            Some(Metrics {
                merged_psnr,
                reference_psnr,
                median_homography_error: median(&errors),
                homography_errors: errors,
            })
        }
    };
    Ok(PipelineOutput {
        merged,
        report: PipelineReport {
            frame_count: burst.frames.len(),
            merged_count: keep.len(),
            noise_sigma: sigma,
            frames: reports,
            metrics,
        },
    })
}
