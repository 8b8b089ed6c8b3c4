//! Burst alignment for hand-held captures: gyroscope rotation, feature-based
//! plane term, UKF refinement of the homography, pyramid fallback and a
//! tile-based Wiener merge. A simulator renders bursts with ground truth.

pub mod burst;
pub mod config;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gyro;
pub mod image;
pub mod merge;
pub mod pipeline;
pub mod simulator;
pub mod ukf;

pub use burst::{read_burst, write_burst, BurstData, BurstTruth};
pub use error::{Error, Result};
pub use features::{Correspondence, CorrespondenceSet};
pub use geometry::{CameraIntrinsics, Homography, RotationMatrix, Vec2, Vec3};
pub use gyro::{FrameTiming, GyroSample, GyroTrace};
pub use image::{Image, Mask};
pub use merge::{AlignedFrame, MergeConfig};
pub use pipeline::{run_pipeline, FeatureConfig, FrameReport, PipelineConfig, PipelineOutput, PipelineReport};
pub use simulator::{GroundTruthBurst, MotionPreset, SensorModel};
pub use ukf::{UkfConfig, UkfState};
