//! Scene reconstruction and completion from posed depth frames with a sparse
//! grid of local implicit signed-distance functions.
//!
//! The pipeline: depth frames are unprojected and binned into sparse voxels
//! (`ingest`), encoded and completed by a sparse convolutional network
//! (`circnet` over the `tape` autodiff engine), trained against analytic CSG
//! ground truth (`train`, `scene`), rendered with a differentiable
//! sphere-tracing renderer (`render`), refined at inference time (`refine`),
//! and finally meshed and scored (`mesh`, `metrics`).

pub mod circnet;
pub mod geom;
pub mod ingest;
pub mod mesh;
pub mod metrics;
pub mod refine;
pub mod render;
pub mod scene;
pub mod tape;
pub mod train;

pub use geom::{Intrinsics, Pose, Twist, Vec3};
pub use tape::{ParamSet, Tape, Tensor};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty frame: no valid depth pixels")]
    EmptyFrame,
    #[error("empty scene: no occupied voxels")]
    EmptyScene,
    #[error("all voxels pruned at the finest level")]
    AllPruned,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty set")]
    EmptySet,
    #[error("empty mesh")]
    EmptyMesh,
    #[error("query outside the active grid")]
    OutsideGrid,
    #[error("no overlap between rendered and observed pixels")]
    NoOverlap,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
