//! Multi-view stereo reconstruction: PatchMatch depth and normal estimation,
//! cross-view consistency maps, confidence handling, planar refinement,
//! point-cloud fusion and evaluation.

pub mod confidence;
pub mod consistency;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod io;
pub mod map;
pub mod patchmatch;
pub mod pipeline;
pub mod refine;
pub mod synthetic;

pub use geometry::{Camera, GeometryError, PlaneHypothesis, PolarNormal};
pub use image::{RgbImage, View};
pub use io::IoError;
pub use map::{DepthMap, DepthNormalMap, GridMap, NormalMap};
pub use patchmatch::{PatchMatchConfig, PatchMatchError};
pub use confidence::{ConfidenceError, ConfidenceMap};
pub use consistency::{ConsistencyThresholds, CounterMap, Label, LabelMap};
pub use eval::{EvalError, EvalReport};
pub use fusion::{FusedPointCloud, FusionConfig, FusionError};
pub use pipeline::{PipelineConfig, PipelineError, Variant, Workspace};
pub use refine::{RefineConfig, RefineError, RefinementState};
