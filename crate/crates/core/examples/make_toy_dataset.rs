//! Generate a small labeled synthetic dataset for trying out the pipeline.
//!
//! ```sh
//! cargo run -p sceneq-core --example make_toy_dataset -- OUT_DIR [SCENES] [VIEWS] [SIZE] [SEED]
//! ```
//!
//! Writes `OUT_DIR/<scene>/<method>/view_*.png` plus `OUT_DIR/labels.json`, with one
//! pseudo-renderer per Gaussian-blur severity 1..=4 (severity 1 = best quality).

use std::path::PathBuf;
use std::process::ExitCode;

use sceneq_core::distortion::{DistortionKind, DistortionSpec};
use sceneq_core::synth::{generate, SynthSpec};

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next().map(PathBuf::from) else {
        eprintln!("usage: make_toy_dataset OUT_DIR [SCENES] [VIEWS] [SIZE] [SEED]");
        return ExitCode::from(2);
    };
    let mut num = |default: usize| -> usize {
        args.next()
            .map(|s| s.parse().unwrap_or(default))
            .unwrap_or(default)
    };
    let n_scenes = num(3);
    let views_per_scene = num(6);
    let size = num(64);
    let seed = num(7) as u64;

    let blur = |severity| {
        DistortionSpec::new(DistortionKind::GaussianBlur, severity)
            .expect("severity in table range")
    };
    let spec = SynthSpec {
        n_scenes,
        views_per_scene,
        resolution: (size, size),
        pseudo_methods: vec![blur(1), blur(2), blur(3), blur(4)],
        seed,
    };
    match generate(&spec, &out) {
        Ok(()) => {
            println!(
                "wrote {} scenes x 4 methods x {} views at {}x{} to {}",
                n_scenes,
                views_per_scene,
                size,
                size,
                out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
