//! Gyroscope traces and their integration into camera rotations.
//!
//! Angular velocity follows the convention `dR/dt = [ω]× R`, where `R(t)` maps
//! coordinates of the reference camera to the camera at time `t`. Samples are
//! linearly interpolated; RK4 steps never straddle a sample, so the integrand
//! is smooth within every step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, Mat3, RotationMatrix, Vec3};

/// Largest plausible angular rate, rad/s.
pub const MAX_OMEGA: f64 = 100.0;

const NS_PER_S: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GyroSample {
    pub t_ns: i64,
    pub omega: Vec3,
}

/// Time-ordered angular-velocity samples (strictly increasing, at least two).
#[derive(Clone, Debug, PartialEq)]
pub struct GyroTrace {
    samples: Vec<GyroSample>,
}

impl GyroTrace {
    pub fn new(samples: Vec<GyroSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument("gyro trace needs at least 2 samples".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.omega.iter().all(|v| v.is_finite()) || s.omega.norm() >= MAX_OMEGA {
                return Err(Error::InvalidArgument(format!(
                    "gyro sample {i} has implausible angular velocity {:?}",
                    s.omega
                )));
            }
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].t_ns <= w[0].t_ns) {
            return Err(Error::InvalidArgument(format!(
                "gyro timestamps not strictly increasing at sample {}",
                i + 1
            )));
        }
        Ok(GyroTrace { samples })
    }

    pub fn samples(&self) -> &[GyroSample] {
        &self.samples
    }

    pub fn first_ns(&self) -> i64 {
        self.samples[0].t_ns
    }

    pub fn last_ns(&self) -> i64 {
        self.samples[self.samples.len() - 1].t_ns
    }

    /// Median spacing between samples.
    pub fn native_interval_ns(&self) -> i64 {
        let mut d: Vec<i64> = self.samples.windows(2).map(|w| w[1].t_ns - w[0].t_ns).collect();
        d.sort_unstable();
        d[d.len() / 2]
    }

    fn check_range(&self, t: i64) -> Result<()> {
        if t < self.first_ns() || t > self.last_ns() {
            return Err(Error::OutOfRange {
                t,
                first: self.first_ns(),
                last: self.last_ns(),
            });
        }
        Ok(())
    }

    /// Index `i` such that `samples[i].t ≤ t ≤ samples[i+1].t`.
    fn bracket(&self, t: i64) -> usize {
        let idx = self.samples.partition_point(|s| s.t_ns <= t);
        idx.saturating_sub(1).min(self.samples.len() - 2)
    }

    /// Reads `t_ns,omega_x,omega_y,omega_z` rows after a header line.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::input(path, lineno + 1, format!("expected 4 fields, got {}", fields.len())));
            }
            let t_ns = fields[0]
                .parse::<i64>()
                .map_err(|_| Error::input(path, lineno + 1, format!("bad timestamp {:?}", fields[0])))?;
            let mut w = [0.0; 3];
            for k in 0..3 {
                w[k] = fields[k + 1]
                    .parse::<f64>()
                    .map_err(|_| Error::input(path, lineno + 1, format!("bad angular rate {:?}", fields[k + 1])))?;
            }
            samples.push(GyroSample {
                t_ns,
                omega: Vec3::new(w[0], w[1], w[2]),
            });
        }
        GyroTrace::new(samples).map_err(|e| Error::input(path, 0, e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t_ns,omega_x,omega_y,omega_z\n");
        for s in &self.samples {
            out.push_str(&format!("{},{:e},{:e},{:e}\n", s.t_ns, s.omega.x, s.omega.y, s.omega.z));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Exposure window of one frame, in the gyro clock unless an offset says otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame_id: usize,
    pub exposure_start_ns: i64,
    pub exposure_end_ns: i64,
}

impl FrameTiming {
    pub fn new(frame_id: usize, exposure_start_ns: i64, exposure_end_ns: i64) -> Result<Self> {
        if exposure_end_ns <= exposure_start_ns {
            return Err(Error::InvalidArgument(format!(
                "frame {frame_id}: exposure end {exposure_end_ns} not after start {exposure_start_ns}"
            )));
        }
        Ok(FrameTiming {
            frame_id,
            exposure_start_ns,
            exposure_end_ns,
        })
    }

    /// The instant each frame is anchored to.
    pub fn midpoint_ns(&self) -> i64 {
        self.exposure_start_ns + (self.exposure_end_ns - self.exposure_start_ns) / 2
    }
}

pub fn read_timing_json(path: &Path) -> Result<Vec<FrameTiming>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let timings: Vec<FrameTiming> = serde_json::from_str(&text)
        .map_err(|e| Error::input(path, e.line(), e.to_string()))?;
    for t in &timings {
        FrameTiming::new(t.frame_id, t.exposure_start_ns, t.exposure_end_ns)
            .map_err(|e| Error::input(path, 0, e.to_string()))?;
    }
    Ok(timings)
}

pub fn write_timing_json(timings: &[FrameTiming], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(timings).expect("timings serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Integration knobs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GyroOptions {
    /// RK4 step; `None` picks `min(native interval, 1 ms)`.
    pub step_ns: Option<i64>,
    /// Added to frame timestamps to express them in the gyro clock.
    pub clock_offset_ns: i64,
}

/// Linearly interpolated angular velocity at `t`.
pub fn omega_at(trace: &GyroTrace, t: i64) -> Result<Vec3> {
    trace.check_range(t)?;
    let i = trace.bracket(t);
    let (a, b) = (&trace.samples[i], &trace.samples[i + 1]);
    let s = (t - a.t_ns) as f64 / (b.t_ns - a.t_ns) as f64;
    Ok(a.omega + (b.omega - a.omega) * s)
}

/// RK4 solution of `dR/dt = [ω(t)]× R` with `R(t_from) = I`, projected onto
/// SO(3) once at the end. Integrating backwards in time returns the inverse.
pub fn integrate_rotation(trace: &GyroTrace, t_from: i64, t_to: i64, step_ns: i64) -> Result<RotationMatrix> {
    if step_ns <= 0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step_ns}")));
    }
    trace.check_range(t_from)?;
    trace.check_range(t_to)?;
    if t_to < t_from {
        return integrate_rotation(trace, t_to, t_from, step_ns).map(|r| r.transpose());
    }

    let mut r = Mat3::identity();
    let mut i = trace.bracket(t_from);
    let mut lo = t_from;
    while lo < t_to {
        let (a, b) = (&trace.samples[i], &trace.samples[i + 1]);
        let hi = b.t_ns.min(t_to);
        if hi > lo {
            let span = (b.t_ns - a.t_ns) as f64;
            let slope = (b.omega - a.omega) / span;
            let base = a.omega + slope * (lo - a.t_ns) as f64;
            let len = (hi - lo) as f64;
            let n = ((hi - lo) as f64 / step_ns as f64).ceil().max(1.0) as usize;
            let h_ns = len / n as f64;
            let h = h_ns / NS_PER_S;
            let omega = |tau_ns: f64| skew(&(base + slope * tau_ns));
            for k in 0..n {
                let tau = k as f64 * h_ns;
                let w0 = omega(tau);
                let wm = omega(tau + 0.5 * h_ns);
                let w1 = omega(tau + h_ns);
                let k1 = w0 * r;
                let k2 = wm * (r + k1 * (0.5 * h));
                let k3 = wm * (r + k2 * (0.5 * h));
                let k4 = w1 * (r + k3 * h);
                r += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            }
        }
        lo = hi;
        i += 1;
    }
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteResult);
    }
    RotationMatrix::nearest(&r)
}

/// Rotation from frame 0's exposure midpoint to each frame's midpoint.
pub fn interframe_rotations(
    trace: &GyroTrace,
    timings: &[FrameTiming],
    opts: &GyroOptions,
) -> Result<Vec<RotationMatrix>> {
    let Some(first) = timings.first() else {
        return Ok(Vec::new());
    };
    let step = opts
        .step_ns
        .unwrap_or_else(|| trace.native_interval_ns().min(1_000_000))
        .max(1);
    let t0 = first.midpoint_ns() + opts.clock_offset_ns;
    trace.check_range(t0)?;
    timings
        .iter()
        .enumerate()
        .map(|(i, timing)| {
            if i == 0 {
                Ok(RotationMatrix::identity())
            } else {
                integrate_rotation(trace, t0, timing.midpoint_ns() + opts.clock_offset_ns, step)
            }
        })
        .collect()
}
