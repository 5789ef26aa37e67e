//! Kinematic rig, camera geometry and optimization-based human mesh fitting.

pub mod camera;
pub mod dual;
pub mod error;
pub mod evaluate;
pub mod fit_multi;
pub mod fit_single;
pub mod formats;
pub mod geom;
pub mod merge;
pub mod metrics;
pub mod optim;
pub mod priors;
pub mod rig;
pub mod synth;
pub mod terms;
pub mod triangulate;

pub use camera::Camera;
pub use error::{Error, Result};
pub use fit_multi::{MultiFitConfig, MultiFitResult, MultiViewSequence};
pub use fit_single::{FitConfig, FitResult, Observation2D, Prompt};
pub use priors::GmmPrior;
pub use rig::{Handedness, KinematicRig, RigDefinition, RigParams};
pub use terms::LossBreakdown;
