//! On-disk burst layout:
//!
//! ```text
//! frame_0000.png …   16-bit grayscale frames
//! gyro.csv           t_ns,omega_x,omega_y,omega_z
//! timing.json        per-frame exposure windows
//! truth.json         optional ground truth (homographies, intrinsics, seed, noise)
//! clean.png          optional noise-free reference frame
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Homography};
use crate::gyro::{read_timing_json, write_timing_json, FrameTiming, GyroTrace};
use crate::image::Image;
use crate::simulator::GroundTruthBurst;

pub const GYRO_FILE: &str = "gyro.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const CLEAN_FILE: &str = "clean.png";

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:04}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstTruth {
    /// Frame-0-to-frame-i homographies, row-major.
    pub homographies: Vec<Homography>,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl BurstTruth {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::input(path, e.line(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("truth serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A burst as loaded from disk, with ground truth when available.
#[derive(Clone, Debug, PartialEq)]
pub struct BurstData {
    pub frames: Vec<Image>,
    pub timings: Vec<FrameTiming>,
    pub trace: GyroTrace,
    pub truth: Option<BurstTruth>,
    pub clean_reference: Option<Image>,
}

impl From<GroundTruthBurst> for BurstData {
    fn from(b: GroundTruthBurst) -> Self {
        BurstData {
            truth: Some(BurstTruth {
                homographies: b.true_homographies,
                intrinsics: b.intrinsics,
                seed: b.seed,
                noise_sigma: b.noise_sigma,
            }),
            frames: b.frames,
            timings: b.timings,
            trace: b.trace,
            clean_reference: Some(b.clean_reference),
        }
    }
}

pub fn write_burst(dir: &Path, burst: &GroundTruthBurst) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in burst.frames.iter().enumerate() {
        f.save(&dir.join(frame_file_name(i)))?;
    }
    burst.trace.write_csv(&dir.join(GYRO_FILE))?;
    write_timing_json(&burst.timings, &dir.join(TIMING_FILE))?;
    BurstTruth {
        homographies: burst.true_homographies.clone(),
        intrinsics: burst.intrinsics,
        seed: burst.seed,
        noise_sigma: burst.noise_sigma,
    }
    .write(&dir.join(TRUTH_FILE))?;
    burst.clean_reference.save(&dir.join(CLEAN_FILE))
}

/// Loads a burst directory; the frame count comes from `timing.json`.
pub fn read_burst(dir: &Path) -> Result<BurstData> {
    if !dir.is_dir() {
        return Err(Error::input(dir, 0, "not a burst directory"));
    }
    let timing_path = dir.join(TIMING_FILE);
    let timings = read_timing_json(&timing_path)?;
    if timings.is_empty() {
        return Err(Error::input(&timing_path, 1, "no frames listed"));
    }
    for (i, t) in timings.iter().enumerate() {
        if t.frame_id != i {
            return Err(Error::input(
                &timing_path,
                1,
                format!("frame ids must be 0..n in order; entry {i} has id {}", t.frame_id),
            ));
        }
    }
    let frames = timings
        .iter()
        .map(|t| Image::load(&dir.join(frame_file_name(t.frame_id))))
        .collect::<Result<Vec<_>>>()?;
    let dims = frames[0].dims();
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
        return Err(Error::input(
            dir.join(frame_file_name(i)),
            0,
            format!("frame is {:?}, reference is {:?}", f.dims(), dims),
        ));
    }
    let trace = GyroTrace::read_csv(&dir.join(GYRO_FILE))?;

    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        let t = BurstTruth::read(&truth_path)?;
        if t.homographies.len() != frames.len() {
            return Err(Error::input(
                &truth_path,
                0,
                format!("{} homographies for {} frames", t.homographies.len(), frames.len()),
            ));
        }
        Some(t)
    } else {
        None
    };
    let clean_path = dir.join(CLEAN_FILE);
    let clean_reference = if clean_path.exists() {
        Some(Image::load(&clean_path)?)
    } else {
        None
    };
    Ok(BurstData {
        frames,
        timings,
        trace,
        truth,
        clean_reference,
    })
}
