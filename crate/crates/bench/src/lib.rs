//! Fixtures shared by the benchmarks.

use rigfit_core::fit_multi::MultiViewSequence;
use rigfit_core::synth::{self, RenderConfig, Scene, SceneConfig};

/// Default rig seen by `cameras` views over `frames` frames.
pub fn scene(seed: u64, cameras: usize, frames: usize, render: RenderConfig) -> Scene {
    let cfg = SceneConfig {
        seed,
        cameras,
        frames,
        render,
        ..SceneConfig::default()
    };
    synth::make_scene(&synth::make_default_rig(0), &cfg).expect("valid scene config")
}

pub fn sequence(s: &Scene) -> MultiViewSequence {
    MultiViewSequence {
        cameras: s.cameras.clone(),
        frames: s.frames.clone(),
        fps: s.fps,
    }
}
