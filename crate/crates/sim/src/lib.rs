//! Deterministic synthetic multi-camera scenes: walking subjects with
//! head-mounted cameras, a ring of static cameras, noisy detections and the
//! ground truth for every pipeline stage.

pub mod artifacts;
pub mod config;
pub mod render;
pub mod scene;

use ego3d_core::body_fit::BodyFitError;
use ego3d_core::geometry::GeometryError;
use thiserror::Error;

pub use config::{CameraSpec, NoiseConfig, PathSpec, SceneConfig, SubjectMotion};
pub use render::{render_depth_crop, render_detections, Detection, Rendering};
pub use scene::{generate_scene, CameraKind, CameraStream, Scene, SubjectFrame, SubjectView};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Body(#[from] BodyFitError),
}
