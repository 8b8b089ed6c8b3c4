use gyroburst::merge::{merge_wiener, select_frames, AlignedFrame};
use gyroburst::pipeline::{align_burst, align_burst_translation_only, run_pipeline, PipelineConfig};
use gyroburst::simulator::{simulate_preset, MotionPreset, LATE_EXCURSION_FRAME};
use gyroburst::{read_burst, write_burst, BurstData};

fn burst(preset: MotionPreset, seed: u64) -> BurstData {
    simulate_preset(preset, 16, 0.02, seed).unwrap().into()
}

#[test]
fn offset_burst_aligns_almost_every_frame() {
    let b = burst(MotionPreset::Offset, 0);
    let out = run_pipeline(&b, &PipelineConfig::default()).unwrap();
    let metrics = out.report.metrics.as_ref().unwrap();
    assert!(out.report.valid_alternatives() >= 14, "{} valid", out.report.valid_alternatives());
    let med = metrics.median_homography_error.unwrap();
    assert!(med < 1.0, "median homography error {med}");
    assert_eq!(out.report.merged_count, out.report.valid_alternatives() + 1);
}

#[test]
fn small_rotation_beats_translation_only() {
    let b = burst(MotionPreset::InPlaneRotation, 2);
    let full = run_pipeline(&b, &PipelineConfig::default()).unwrap().report.valid_alternatives();
    let (_, reports) = align_burst_translation_only(&b.frames, &PipelineConfig::default()).unwrap();
    let base = reports.iter().filter(|r| r.valid).count();
    assert!(full > base, "pipeline {full}, baseline {base}");
}

#[test]
fn late_excursion_frames_are_dropped() {
    let b = burst(MotionPreset::LateExcursion, 0);
    let out = run_pipeline(&b, &PipelineConfig::default()).unwrap();
    for r in &out.report.frames {
        if r.frame_id >= LATE_EXCURSION_FRAME {
            assert!(!r.valid, "frame {} kept with error {}", r.frame_id, r.steady_error);
            assert!(r.steady_error > 5.0);
        }
    }
    let kept = out.report.frames.iter().filter(|r| r.valid).count();
    assert!(kept >= LATE_EXCURSION_FRAME - 2, "only {kept} early frames kept");
    assert_eq!(out.report.merged_count, kept + 1);
}

#[test]
fn runs_are_deterministic() {
    let b = burst(MotionPreset::XRotation, 3);
    let a = run_pipeline(&b, &PipelineConfig::default()).unwrap();
    let c = run_pipeline(&b, &PipelineConfig::default()).unwrap();
    assert_eq!(a.merged, c.merged);
    assert_eq!(a.report.to_json(), c.report.to_json());
}

#[test]
fn invalid_frame_changes_no_pixel() {
    let b: BurstData = simulate_preset(MotionPreset::Offset, 6, 0.02, 5).unwrap().into();
    let cfg = PipelineConfig {
        intrinsics: b.truth.as_ref().map(|t| t.intrinsics),
        ..PipelineConfig::default()
    };
    let (aligned, _) = align_burst(&b.frames, &b.timings, &b.trace, &cfg).unwrap();
    let merge = gyroburst::MergeConfig {
        noise_variance: 0.02 * 0.02,
        ..cfg.merge
    };
    let before = merge_wiener(&select_frames(&aligned, &merge), &merge).unwrap();
    let mut extended = aligned.clone();
    extended.push(AlignedFrame {
        steady_error: 50.0,
        ..AlignedFrame::reference(b.frames[3].clone())
    });
    let after = merge_wiener(&select_frames(&extended, &merge), &merge).unwrap();
    assert_eq!(before, after);
}

#[test]
fn burst_directory_round_trip_runs() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_preset(MotionPreset::Offset, 4, 0.02, 7).unwrap();
    write_burst(dir.path(), &sim).unwrap();
    let b = read_burst(dir.path()).unwrap();
    let out = run_pipeline(&b, &PipelineConfig::default()).unwrap();
    assert_eq!(out.report.frames.len(), 3);
    assert!(out.report.metrics.unwrap().merged_psnr.is_some());
}
