//! Plain-text pipeline configuration: one `key = value` per line, `#` starts
//! a comment. Keys are the flat field names of [`PipelineConfig`]; dashes and
//! underscores are interchangeable.
//!
//! ```text
//! # tighter selection, more corners
//! steady_error_threshold = 3
//! max_corners = 500
//! intrinsics = 320, 320, 159.5, 119.5
//! noise_sigma = auto
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::pipeline::PipelineConfig;

/// Every key accepted by [`PipelineConfig::set`].
pub const KEYS: &[&str] = &[
    "intrinsics",
    "alpha",
    "beta",
    "process_noise_sigma",
    "measurement_noise_sigma",
    "ukf_iterations",
    "ukf_tolerance",
    "tile",
    "overlap",
    "max_frames",
    "steady_error_threshold",
    "shrinkage",
    "noise_sigma",
    "max_corners",
    "min_distance",
    "patch",
    "search_radius",
    "zncc_threshold",
    "point_noise_sigma",
    "ransac_threshold",
    "ransac_iterations",
    "rk4_step_ns",
    "clock_offset_ns",
    "fallback_levels",
    "fallback_search",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse {value:?} as the value of {key}"))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> std::result::Result<Option<T>, String> {
    if value.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_intrinsics(value: &str) -> std::result::Result<Option<CameraIntrinsics>, String> {
    if value.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("intrinsics must be four numbers fx,fy,cx,cy; got {value:?}"))?;
    match parts[..] {
        [fx, fy, cx, cy] => CameraIntrinsics::new(fx, fy, cx, cy).map(Some).map_err(|e| e.to_string()),
        _ => Err(format!("intrinsics must be four numbers fx,fy,cx,cy; got {} values", parts.len())),
    }
}

impl PipelineConfig {
    /// Assigns one field by its flat key name. Unknown keys and unparsable
    /// values are reported as `InvalidArgument`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key, value.trim()).map_err(Error::InvalidArgument)
    }

    fn set_inner(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "intrinsics" => self.intrinsics = parse_intrinsics(v)?,
            "alpha" => self.ukf.alpha = parse(k, v)?,
            "beta" => self.ukf.beta = parse(k, v)?,
            "process_noise_sigma" => self.ukf.process_noise_sigma = parse(k, v)?,
            "measurement_noise_sigma" => self.ukf.measurement_noise_sigma = parse(k, v)?,
            "ukf_iterations" => self.ukf_iterations = parse(k, v)?,
            "ukf_tolerance" => self.ukf_tolerance = parse(k, v)?,
            "tile" => self.merge.tile = parse(k, v)?,
            "overlap" => self.merge.overlap = parse(k, v)?,
            "max_frames" => self.merge.max_frames = parse(k, v)?,
            "steady_error_threshold" => self.merge.steady_error_threshold = parse(k, v)?,
            "shrinkage" => self.merge.shrinkage = parse(k, v)?,
            "noise_sigma" => self.noise_sigma = parse_auto(k, v)?,
            "max_corners" => self.features.max_corners = parse(k, v)?,
            "min_distance" => self.features.min_distance = parse(k, v)?,
            "patch" => self.features.patch = parse(k, v)?,
            "search_radius" => self.features.search_radius = parse(k, v)?,
            "zncc_threshold" => self.features.zncc_threshold = parse(k, v)?,
            "point_noise_sigma" => self.features.point_noise_sigma = parse(k, v)?,
            "ransac_threshold" => self.ransac_threshold = parse(k, v)?,
            "ransac_iterations" => self.ransac_iterations = parse(k, v)?,
            "rk4_step_ns" => self.rk4_step_ns = parse_auto(k, v)?,
            "clock_offset_ns" => self.clock_offset_ns = parse(k, v)?,
            "fallback_levels" => self.fallback_levels = parse(k, v)?,
            "fallback_search" => self.fallback_search = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            _ => return Err(format!("unknown key {k:?}")),
        }
        Ok(())
    }
}

/// Parses `key = value` lines into `(line number, key, value)` triples.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::input(path, i + 1, format!("expected key = value, got {line:?}")));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::input(path, i + 1, "empty key"));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Applies the settings in `text` on top of `cfg`; errors carry the line.
pub fn apply_config_text(cfg: &mut PipelineConfig, text: &str, path: &Path) -> Result<()> {
    for (line, k, v) in parse_key_values(text, path)? {
        cfg.set(&k, &v).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::input(path, line, msg),
            other => other,
        })?;
    }
    Ok(())
}

pub fn apply_config_file(cfg: &mut PipelineConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_config_text(cfg, &text, path)
}
