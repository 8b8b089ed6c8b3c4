//! Ground-truth bursts: a planar textured scene filmed along a known camera
//! trajectory, with a matching gyro trace and image noise.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::convolve_separable;
use crate::geometry::{apply_homography, CameraIntrinsics, Homography, Mat3, RotationMatrix, Vec2, Vec3};
use crate::gyro::{FrameTiming, GyroSample, GyroTrace};
use crate::image::Image;

const NS_PER_S: f64 = 1e9;

/// A camera pose at time `t_ns`: world point `X` maps to camera coordinates
/// `rotation · X + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keyframe {
    pub t_ns: i64,
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

/// Piecewise constant-rate motion between keyframes: rotations are slerped,
/// translations interpolated linearly. Poses are held outside the span.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    keyframes: Vec<Keyframe>,
}

impl Trajectory {
    pub fn new(keyframes: Vec<Keyframe>) -> Result<Self> {
        if keyframes.is_empty() {
            return Err(Error::InvalidArgument("trajectory needs at least one keyframe".into()));
        }
        if keyframes.windows(2).any(|w| w[1].t_ns <= w[0].t_ns) {
            return Err(Error::InvalidArgument("keyframe timestamps must increase strictly".into()));
        }
        if keyframes.iter().any(|k| !k.translation.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite keyframe translation".into()));
        }
        Ok(Trajectory { keyframes })
    }

    pub fn stationary(t0: i64, t1: i64) -> Result<Self> {
        let still = |t_ns| Keyframe {
            t_ns,
            rotation: RotationMatrix::identity(),
            translation: Vec3::zeros(),
        };
        Trajectory::new(vec![still(t0), still(t1)])
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn start_ns(&self) -> i64 {
        self.keyframes[0].t_ns
    }

    pub fn end_ns(&self) -> i64 {
        self.keyframes[self.keyframes.len() - 1].t_ns
    }

    /// Index of the segment `[t_k, t_{k+1})` containing `t`.
    fn segment(&self, t: i64) -> Option<usize> {
        if t < self.start_ns() || t >= self.end_ns() {
            return None;
        }
        Some(self.keyframes.partition_point(|k| k.t_ns <= t) - 1)
    }

    fn segment_rotation_vector(&self, k: usize) -> Vec3 {
        let (a, b) = (&self.keyframes[k], &self.keyframes[k + 1]);
        b.rotation.compose(&a.rotation.transpose()).log()
    }

    pub fn pose_at(&self, t: i64) -> (RotationMatrix, Vec3) {
        match self.segment(t) {
            None => {
                let k = if t < self.start_ns() {
                    &self.keyframes[0]
                } else {
                    &self.keyframes[self.keyframes.len() - 1]
                };
                (k.rotation, k.translation)
            }
            Some(i) => {
                let (a, b) = (&self.keyframes[i], &self.keyframes[i + 1]);
                let s = (t - a.t_ns) as f64 / (b.t_ns - a.t_ns) as f64;
                let phi = self.segment_rotation_vector(i);
                let r = RotationMatrix::exp(&(phi * s)).compose(&a.rotation);
                (r, a.translation + (b.translation - a.translation) * s)
            }
        }
    }

    /// `ω` with `dR/dt = [ω]× R`; right-continuous at keyframes.
    pub fn angular_velocity_at(&self, t: i64) -> Vec3 {
        match self.segment(t) {
            None => Vec3::zeros(),
            Some(i) => self.segment_angular_velocity(i),
        }
    }

    fn segment_angular_velocity(&self, i: usize) -> Vec3 {
        let dt = (self.keyframes[i + 1].t_ns - self.keyframes[i].t_ns) as f64 / NS_PER_S;
        self.segment_rotation_vector(i) / dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorModel {
    pub width: usize,
    pub height: usize,
    pub gyro_rate_hz: f64,
    /// Per-axis white noise, rad/s.
    pub gyro_noise_sigma: f64,
    /// Constant per-axis offset, rad/s.
    pub gyro_bias: Vec3,
    pub frame_rate_hz: f64,
    pub exposure_ns: i64,
    pub image_noise_sigma: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            width: 320,
            height: 240,
            gyro_rate_hz: 200.0,
            gyro_noise_sigma: 0.003,
            gyro_bias: Vec3::repeat(0.002),
            frame_rate_hz: 30.0,
            exposure_ns: 10_000_000,
            image_noise_sigma: 0.02,
        }
    }
}

impl SensorModel {
    /// Noise-free sensor with the default geometry and rates.
    pub fn ideal() -> Self {
        SensorModel {
            gyro_noise_sigma: 0.0,
            gyro_bias: Vec3::zeros(),
            image_noise_sigma: 0.0,
            ..SensorModel::default()
        }
    }

    pub fn frame_interval_ns(&self) -> f64 {
        NS_PER_S / self.frame_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidArgument("frames must be at least 16×16".into()));
        }
        if !(self.gyro_rate_hz > 0.0 && self.frame_rate_hz > 0.0) {
            return Err(Error::InvalidArgument("sensor rates must be positive".into()));
        }
        if self.exposure_ns <= 0 || self.exposure_ns as f64 >= self.frame_interval_ns() {
            return Err(Error::InvalidArgument("exposure must be positive and shorter than the frame interval".into()));
        }
        if !(self.gyro_noise_sigma >= 0.0 && self.image_noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthBurst {
    pub frames: Vec<Image>,
    pub timings: Vec<FrameTiming>,
    pub trace: GyroTrace,
    /// Frame-0-to-frame-i pixel homographies; the first is the identity.
    pub true_homographies: Vec<Homography>,
    pub intrinsics: CameraIntrinsics,
    /// Frame 0 rendered without noise.
    pub clean_reference: Image,
    pub seed: u64,
    pub noise_sigma: f64,
}

/// Frames whose whole exposure fits in the trajectory span.
pub fn frame_timings(traj: &Trajectory, sensor: &SensorModel) -> Result<Vec<FrameTiming>> {
    let mut out = Vec::new();
    let interval = sensor.frame_interval_ns();
    loop {
        let start = traj.start_ns() + (out.len() as f64 * interval).round() as i64;
        let end = start + sensor.exposure_ns;
        if end > traj.end_ns() {
            break;
        }
        out.push(FrameTiming::new(out.len(), start, end)?);
    }
    Ok(out)
}

/// `K (R + T e₃ᵀ / d) K⁻¹`: pixels of a camera at the world origin to pixels
/// of a camera with pose `(R, T)`, for the plane `Z = d`.
fn plane_homography(r: &RotationMatrix, t: &Vec3, k: &CameraIntrinsics, depth: f64) -> Mat3 {
    let n = Vec3::z();
    k.matrix() * (r.matrix() + t * n.transpose() / depth) * k.inverse_matrix()
}

fn gyro_trace(traj: &Trajectory, sensor: &SensorModel, rng: &mut ChaCha8Rng) -> Result<GyroTrace> {
    let period = NS_PER_S / sensor.gyro_rate_hz;
    let (t0, t1) = (traj.start_ns(), traj.end_ns());
    let knots: Vec<i64> = traj.keyframes()[1..traj.keyframes().len() - 1]
        .iter()
        .map(|k| k.t_ns)
        .collect();
    let mut truth: Vec<(i64, Vec3)> = Vec::new();
    let mut j = 0usize;
    loop {
        let t = t0 + (j as f64 * period).round() as i64;
        if t >= t1 {
            break;
        }
        if !knots.iter().any(|k| (t - k).abs() <= 1) {
            truth.push((t, traj.angular_velocity_at(t)));
        }
        j += 1;
    }
    // the rate jumps at interior keyframes; pin both one-sided values
    for (i, &k) in knots.iter().enumerate() {
        truth.push((k - 1, traj.segment_angular_velocity(i)));
        truth.push((k, traj.segment_angular_velocity(i + 1)));
    }
    let last_segment = traj.keyframes().len().saturating_sub(2);
    let end_omega = if traj.keyframes().len() > 1 {
        traj.segment_angular_velocity(last_segment)
    } else {
        Vec3::zeros()
    };
    truth.push((t1, end_omega));
    truth.sort_by_key(|(t, _)| *t);

    let noise = Normal::new(0.0, sensor.gyro_noise_sigma.max(0.0)).expect("finite sigma");
    let samples = truth
        .into_iter()
        .map(|(t_ns, w)| {
            let mut omega = w + sensor.gyro_bias;
            if sensor.gyro_noise_sigma > 0.0 {
                omega += Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
            }
            GyroSample { t_ns, omega }
        })
        .collect();
    GyroTrace::new(samples)
}

/// Renders every frame of `traj` from `scene`, which is the view of a camera
/// at the world origin, padded symmetrically around the frame size.
pub fn render_burst(
    scene: &Image,
    traj: &Trajectory,
    sensor: &SensorModel,
    k: &CameraIntrinsics,
    plane_depth: f64,
    rng_seed: u64,
) -> Result<GroundTruthBurst> {
    sensor.validate()?;
    k.validate()?;
    if !(plane_depth > 0.0 && plane_depth.is_finite()) {
        return Err(Error::InvalidArgument(format!("plane depth must be positive, got {plane_depth}")));
    }
    let (w, h) = (sensor.width, sensor.height);
    if scene.width() < w || scene.height() < h {
        return Err(Error::InvalidArgument("scene is smaller than the frame".into()));
    }
    let offset = Vec2::new(
        (scene.width() - w) as f64 / 2.0,
        (scene.height() - h) as f64 / 2.0,
    );
    let timings = frame_timings(traj, sensor)?;
    if timings.is_empty() {
        return Err(Error::InvalidArgument("trajectory too short for a single exposure".into()));
    }

    // frame i pixel → scene pixel
    let mut to_scene = Vec::with_capacity(timings.len());
    let mut world_to_frame = Vec::with_capacity(timings.len());
    for timing in &timings {
        let (r, t) = traj.pose_at(timing.midpoint_ns());
        let hw = Homography::new(plane_homography(&r, &t, k, plane_depth))?;
        let inv = hw.inverse()?;
        let corners = [
            Vec2::new(0.0, 0.0),
            Vec2::new((w - 1) as f64, 0.0),
            Vec2::new(0.0, (h - 1) as f64),
            Vec2::new((w - 1) as f64, (h - 1) as f64),
        ];
        for c in corners {
            let p = apply_homography(&inv, &c)? + offset;
            if p.x < 0.0 || p.y < 0.0 || p.x > (scene.width() - 1) as f64 || p.y > (scene.height() - 1) as f64 {
                return Err(Error::ExcursionTooLarge { x: p.x, y: p.y });
            }
        }
        world_to_frame.push(hw);
        to_scene.push(inv);
    }
    let ref_inv = to_scene[0];
    let true_homographies: Vec<Homography> = world_to_frame
        .iter()
        .map(|hw| hw.compose(&ref_inv).normalized())
        .collect::<Result<_>>()?;

    let render = |inv: &Homography| {
        Image::from_fn(w, h, |x, y| {
            let p = apply_homography(inv, &Vec2::new(x as f64, y as f64)).expect("checked above") + offset;
            scene.sample(p.x, p.y).expect("corners checked inside the scene")
        })
    };
    let noise = Normal::new(0.0, sensor.image_noise_sigma).expect("finite sigma");
    let frames: Vec<Image> = to_scene
        .par_iter()
        .enumerate()
        .map(|(i, inv)| {
            let mut img = render(inv);
            if sensor.image_noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                rng.set_stream(i as u64 + 1);
                for v in img.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            img
        })
        .collect();
    let clean_reference = render(&to_scene[0]);

    let mut gyro_rng = ChaCha8Rng::seed_from_u64(rng_seed);
    gyro_rng.set_stream(0);
    let trace = gyro_trace(traj, sensor, &mut gyro_rng)?;

    Ok(GroundTruthBurst {
        frames,
        timings,
        trace,
        true_homographies,
        intrinsics: *k,
        clean_reference,
        seed: rng_seed,
        noise_sigma: sensor.image_noise_sigma,
    })
}

/// Blurred random rectangles over a mid-gray background, values in `[0.1, 0.9]`.
pub fn textured_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(width, height, 0.5);
    let count = (width * height) / 300;
    for _ in 0..count {
        let rw = rng.random_range(4..40).min(width);
        let rh = rng.random_range(4..40).min(height);
        let x0 = rng.random_range(0..=width - rw);
        let y0 = rng.random_range(0..=height - rh);
        let v = rng.random_range(0.1..0.9);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                img.set(x, y, v);
            }
        }
    }
    let kernel = [0.054, 0.244, 0.404, 0.244, 0.054];
    let data = convolve_separable(img.data(), width, height, &kernel);
    Image::new(width, height, data.into_iter().map(|v| v.clamp(0.1, 0.9)).collect()).expect("sizes agree")
}

/// The canonical motion classes of a hand-held burst.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionPreset {
    Static,
    /// Random in-plane translation of up to 10 px.
    Offset,
    /// Steady roll about the optical axis, 3° over the burst.
    InPlaneRotation,
    /// Steady pitch about the camera x axis, 6° over the burst.
    XRotation,
    /// Small jitter, then a 40 px jump before frame 12.
    LateExcursion,
}

impl MotionPreset {
    pub const ALL: [MotionPreset; 5] = [
        MotionPreset::Static,
        MotionPreset::Offset,
        MotionPreset::InPlaneRotation,
        MotionPreset::XRotation,
        MotionPreset::LateExcursion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MotionPreset::Static => "static",
            MotionPreset::Offset => "offset",
            MotionPreset::InPlaneRotation => "in-plane-rotation",
            MotionPreset::XRotation => "x-rotation",
            MotionPreset::LateExcursion => "late-excursion",
        }
    }
}

impl fmt::Display for MotionPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {s:?}")))
    }
}

pub const LATE_EXCURSION_FRAME: usize = 12;
pub const LATE_EXCURSION_PX: f64 = 40.0;

/// Everything [`render_burst`] needs for a preset.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub scene: Image,
    pub trajectory: Trajectory,
    pub sensor: SensorModel,
    pub intrinsics: CameraIntrinsics,
    pub plane_depth: f64,
}

impl Scenario {
    pub fn render(&self, seed: u64) -> Result<GroundTruthBurst> {
        render_burst(&self.scene, &self.trajectory, &self.sensor, &self.intrinsics, self.plane_depth, seed)
    }
}

pub const SCENE_MARGIN: usize = 64;

/// Default camera for the presets: 320×240 frames, 320 px focal length.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 320.0,
        fy: 320.0,
        cx: 159.5,
        cy: 119.5,
    }
}

pub fn preset_scenario(preset: MotionPreset, frames: usize, sensor: SensorModel, seed: u64) -> Result<Scenario> {
    if frames == 0 {
        return Err(Error::InvalidArgument("a burst needs at least one frame".into()));
    }
    if preset == MotionPreset::LateExcursion && frames <= LATE_EXCURSION_FRAME {
        return Err(Error::InvalidArgument(format!(
            "late-excursion needs more than {LATE_EXCURSION_FRAME} frames"
        )));
    }
    sensor.validate()?;
    let k = default_intrinsics();
    let depth = 1.0;
    let px = |dx: f64, dy: f64| Vec3::new(dx * depth / k.fx, dy * depth / k.fy, 0.0);
    let interval = sensor.frame_interval_ns();
    let start_of = |i: usize| (i as f64 * interval).round() as i64;
    let end = start_of(frames - 1) + sensor.exposure_ns;
    let key = |t_ns, rotation, translation| Keyframe {
        t_ns,
        rotation,
        translation,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut jitter = |amp: f64| px(rng.random_range(-amp..amp), rng.random_range(-amp..amp));
    let id = RotationMatrix::identity();

    let keyframes = match preset {
        MotionPreset::Static => vec![key(0, id, Vec3::zeros()), key(end.max(1), id, Vec3::zeros())],
        MotionPreset::Offset => {
            let mut ks = vec![key(0, id, Vec3::zeros())];
            let mut i = 4;
            while i < frames {
                ks.push(key(start_of(i), id, jitter(10.0)));
                i += 4;
            }
            if ks.last().unwrap().t_ns < end {
                ks.push(key(end, id, jitter(10.0)));
            }
            ks
        }
        MotionPreset::InPlaneRotation => vec![
            key(0, id, Vec3::zeros()),
            key(end, RotationMatrix::rot_z(3f64.to_radians()), Vec3::zeros()),
        ],
        MotionPreset::XRotation => vec![
            key(0, id, Vec3::zeros()),
            key(end, RotationMatrix::rot_x(6f64.to_radians()), Vec3::zeros()),
        ],
        MotionPreset::LateExcursion => {
            let before = start_of(LATE_EXCURSION_FRAME - 1) + sensor.exposure_ns;
            let after = start_of(LATE_EXCURSION_FRAME);
            let base = jitter(2.0);
            let jump = base + px(LATE_EXCURSION_PX, 0.0);
            let mut ks = vec![key(0, id, Vec3::zeros()), key(before, id, base), key(after, id, jump)];
            if end > after {
                ks.push(key(end, id, jump));
            }
            ks
        }
    };
    let trajectory = Trajectory::new(keyframes)?;
    let scene = textured_scene(sensor.width + 2 * SCENE_MARGIN, sensor.height + 2 * SCENE_MARGIN, seed);
    Ok(Scenario {
        scene,
        trajectory,
        sensor,
        intrinsics: k,
        plane_depth: depth,
    })
}

/// Renders a preset burst with the default sensor and the given image noise.
pub fn simulate_preset(preset: MotionPreset, frames: usize, noise_sigma: f64, seed: u64) -> Result<GroundTruthBurst> {
    let sensor = SensorModel {
        image_noise_sigma: noise_sigma,
        ..SensorModel::default()
    };
    preset_scenario(preset, frames, sensor, seed)?.render(seed)
}

/// Peak signal-to-noise ratio with peak 1; identical images give 99 dB.
pub fn psnr(test: &Image, truth: &Image) -> Result<f64> {
    if test.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            expected: truth.dims(),
            got: test.dims(),
        });
    }
    let mse = test
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / truth.data().len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Mean distance between the two mappings of the frame corners and centre.
pub fn homography_error(estimate: &Homography, truth: &Homography, frame_size: (usize, usize)) -> Result<f64> {
    let (w, h) = ((frame_size.0 - 1) as f64, (frame_size.1 - 1) as f64);
    let probes = [
        Vec2::new(0.0, 0.0),
        Vec2::new(w, 0.0),
        Vec2::new(0.0, h),
        Vec2::new(w, h),
        Vec2::new(w / 2.0, h / 2.0),
    ];
    let mut total = 0.0;
    for p in &probes {
        total += (apply_homography(estimate, p)? - apply_homography(truth, p)?).norm();
    }
    Ok(total / probes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gyro::{interframe_rotations, GyroOptions};
    use crate::merge::estimate_noise_sigma;

    fn small_sensor() -> SensorModel {
        SensorModel {
            width: 96,
            height: 72,
            ..SensorModel::ideal()
        }
    }

    fn small_k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 47.5,
            cy: 35.5,
        }
    }

    fn rotating(end: i64, r: RotationMatrix) -> Trajectory {
        Trajectory::new(vec![
            Keyframe {
                t_ns: 0,
                rotation: RotationMatrix::identity(),
                translation: Vec3::zeros(),
            },
            Keyframe {
                t_ns: end,
                rotation: r,
                translation: Vec3::zeros(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn static_noise_free_burst() {
        let scene = textured_scene(128, 104, 1);
        let traj = Trajectory::stationary(0, 200_000_000).unwrap();
        let b = render_burst(&scene, &traj, &small_sensor(), &small_k(), 1.0, 3).unwrap();
        assert_eq!(b.frames.len(), 6);
        for (f, h) in b.frames.iter().zip(&b.true_homographies) {
            assert_eq!(f, &b.frames[0]);
            assert_eq!(h.matrix(), Homography::identity().matrix());
        }
        assert!(b.trace.samples().iter().all(|s| s.omega == Vec3::zeros()));
        assert_eq!(b.clean_reference, b.frames[0]);
    }

    #[test]
    fn in_plane_rotation_matches_closed_form() {
        // 0.5° per frame interval
        let sensor = small_sensor();
        let k = small_k();
        let interval = sensor.frame_interval_ns();
        let frames = 5;
        let end = ((frames - 1) as f64 * interval).round() as i64 + sensor.exposure_ns;
        let rate = 0.5f64.to_radians() / interval;
        let traj = rotating(end, RotationMatrix::rot_z(rate * end as f64));
        let scene = textured_scene(160, 136, 2);
        let b = render_burst(&scene, &traj, &sensor, &k, 1.0, 0).unwrap();
        assert_eq!(b.frames.len(), frames);
        for (i, h) in b.true_homographies.iter().enumerate() {
            let theta = rate * (b.timings[i].midpoint_ns() - b.timings[0].midpoint_ns()) as f64;
            let expected = k.matrix() * RotationMatrix::rot_z(theta).matrix() * k.inverse_matrix();
            assert!((h.matrix() - expected).abs().max() < 1e-9, "frame {i}");
            let nominal = i as f64 * 0.5f64.to_radians();
            assert!((theta - nominal).abs() < 1e-6);
        }
    }

    #[test]
    fn x_rotation_has_perspective_term() {
        let sensor = small_sensor();
        let k = small_k();
        let end = 200_000_000;
        let total = 4f64.to_radians();
        let traj = rotating(end, RotationMatrix::rot_x(total));
        let b = render_burst(&textured_scene(200, 176, 3), &traj, &sensor, &k, 1.0, 0).unwrap();
        let h = b.true_homographies.last().unwrap();
        let theta = total * (b.timings.last().unwrap().midpoint_ns() - b.timings[0].midpoint_ns()) as f64 / end as f64;
        // K Rx(θ) K⁻¹ expanded by hand, then scaled to h₉ = 1
        let (c, s) = (theta.cos(), theta.sin());
        let (f, cx, cy) = (k.fx, k.cx, k.cy);
        let m = Mat3::new(
            1.0,
            cx * s / f,
            cx * (c - s * cy / f) - cx,
            0.0,
            c + cy * s / f,
            -s * f - s * cy * cy / f,
            0.0,
            s / f,
            c - s * cy / f,
        );
        let m = m / m[(2, 2)];
        assert!((h.matrix() - m).abs().max() < 1e-9);
        assert!(h.matrix()[(2, 1)].abs() > 1e-5);
        assert!((h.matrix()[(2, 1)] - (s / f) / (c - s * cy / f)).abs() < 1e-12);
    }

    #[test]
    fn gyro_trace_integrates_to_true_rotations() {
        let sensor = small_sensor();
        let scenario = preset_scenario(
            MotionPreset::InPlaneRotation,
            8,
            SensorModel {
                width: 320,
                height: 240,
                ..sensor
            },
            4,
        )
        .unwrap();
        let b = scenario.render(4).unwrap();
        let rs = interframe_rotations(&b.trace, &b.timings, &GyroOptions::default()).unwrap();
        let (r0, _) = scenario.trajectory.pose_at(b.timings[0].midpoint_ns());
        for (timing, r) in b.timings.iter().zip(&rs) {
            let (ri, _) = scenario.trajectory.pose_at(timing.midpoint_ns());
            let truth = ri.compose(&r0.transpose());
            assert!(r.geodesic_distance(&truth) < 1e-6);
        }
    }

    #[test]
    fn knots_are_reproduced_by_integration() {
        let traj = Trajectory::new(vec![
            Keyframe {
                t_ns: 0,
                rotation: RotationMatrix::identity(),
                translation: Vec3::zeros(),
            },
            Keyframe {
                t_ns: 73_000_000,
                rotation: RotationMatrix::rot_y(0.02),
                translation: Vec3::zeros(),
            },
            Keyframe {
                t_ns: 190_000_000,
                rotation: RotationMatrix::rot_x(-0.03).compose(&RotationMatrix::rot_z(0.01)),
                translation: Vec3::zeros(),
            },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = gyro_trace(&traj, &SensorModel::ideal(), &mut rng).unwrap();
        let r = crate::gyro::integrate_rotation(&trace, 0, 190_000_000, 1_000_000).unwrap();
        let truth = traj.keyframes()[2].rotation;
        assert!(r.geodesic_distance(&truth) < 1e-6, "{}", r.geodesic_distance(&truth));
    }

    #[test]
    fn deterministic_and_noise_calibrated() {
        let sensor = SensorModel {
            width: 64,
            height: 48,
            image_noise_sigma: 0.02,
            ..SensorModel::default()
        };
        let s = preset_scenario(MotionPreset::Offset, 4, sensor, 9).unwrap();
        assert_eq!(s.render(5).unwrap(), s.render(5).unwrap());
        assert_ne!(s.render(5).unwrap().frames[1], s.render(6).unwrap().frames[1]);

        let flat = Image::filled(640, 640, 0.5);
        let traj = Trajectory::stationary(0, 20_000_000).unwrap();
        let big = SensorModel {
            width: 512,
            height: 512,
            ..sensor
        };
        let k = CameraIntrinsics::new(512.0, 512.0, 255.5, 255.5).unwrap();
        let b = render_burst(&flat, &traj, &big, &k, 1.0, 11).unwrap();
        let d = b.frames[0].data();
        let std = (d.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn excursion_is_detected() {
        let sensor = small_sensor();
        let traj = Trajectory::new(vec![
            Keyframe {
                t_ns: 0,
                rotation: RotationMatrix::identity(),
                translation: Vec3::zeros(),
            },
            Keyframe {
                t_ns: 100_000_000,
                rotation: RotationMatrix::identity(),
                translation: Vec3::new(0.5, 0.0, 0.0),
            },
        ])
        .unwrap();
        let r = render_burst(&textured_scene(110, 86, 1), &traj, &sensor, &small_k(), 1.0, 0);
        assert!(matches!(r, Err(Error::ExcursionTooLarge { .. })));
    }

    #[test]
    fn late_excursion_jumps_at_frame_twelve() {
        let b = simulate_preset(MotionPreset::LateExcursion, 16, 0.0, 2).unwrap();
        let shift = |i: usize| b.true_homographies[i].matrix()[(0, 2)];
        assert!((shift(12) - shift(11) - LATE_EXCURSION_PX).abs() < 2.0);
        assert!(shift(11).abs() < 2.0);
        for i in 13..16 {
            assert!((shift(i) - shift(12)).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(10, 10, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Image::filled(10, 10, 0.6);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(
            psnr(&Image::filled(3, 3, 0.0), &a),
            Err(Error::DimensionMismatch { .. })
        ));
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Image::from_fn(256, 256, |_, _| 0.5 + noise.sample(&mut rng));
        let big = Image::filled(256, 256, 0.5);
        assert!((psnr(&n, &big).unwrap() - 40.0).abs() < 0.2);
    }

    #[test]
    fn homography_error_cases() {
        let t = Homography::translation(3.0, -2.0);
        assert_eq!(homography_error(&t, &t, (320, 240)).unwrap(), 0.0);
        let id = Homography::identity();
        let shifted = id.compose(&Homography::translation(1.0, 0.0));
        assert!((homography_error(&shifted, &id, (320, 240)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_estimate_on_scene() {
        let scene = textured_scene(256, 256, 5);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = Image::from_fn(256, 256, |x, y| scene.get(x, y) + noise.sample(&mut rng));
        let s = estimate_noise_sigma(&noisy);
        assert!((0.005..=0.015).contains(&s), "estimate {s}");
    }

    #[test]
    fn preset_names_round_trip() {
        for p in MotionPreset::ALL {
            assert_eq!(p.name().parse::<MotionPreset>().unwrap(), p);
        }
        assert!("spin".parse::<MotionPreset>().is_err());
    }
}
