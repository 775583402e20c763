//! Geometry and data-synthesis core for UV-space body shape capture.
//!
//! The pipeline represented here: a parametric body in T-pose carries a UV
//! atlas; fine geometry is stored as normal and vector-displacement images in
//! that atlas; a software renderer with spherical-harmonic lighting produces
//! paired training images; staged registration maps arbitrary scans onto the
//! body topology so their detail can be baked into the same maps.
//!
//! Modules:
//! - [`mesh`]: indexed triangle meshes, midpoint subdivision, normals, Laplacian
//! - [`obj`]: Wavefront OBJ subset I/O
//! - [`fmap`]: float image maps ([`fmap::FloatMap`]) and PFM / PNG I/O
//! - [`body`]: linear shape space + LBS skeleton, procedural stub model, container I/O
//! - [`uv`]: per-pixel barycentric lookup, attribute/shape-map baking and application
//! - [`chart`]: 24-part chart table, partial-texture scatter, map compositing
//! - [`sh`]: spherical-harmonic lighting (9 coefficients per channel)
//! - [`camera`]: pinhole camera
//! - [`raster`]: deterministic rasterizer producing color/depth/UV/correspondence passes
//! - [`register`]: staged scan registration (landmarks, pose, shape, free-form)
//! - [`synth`]: procedural wardrobe fields and paired-dataset generation

pub mod body;
pub mod camera;
pub mod chart;
pub mod closest;
pub mod fmap;
pub mod mesh;
pub mod obj;
pub mod raster;
pub mod register;
pub mod sh;
pub mod synth;
pub mod uv;

pub use body::{BodyModel, Pose, ShapeParams};
pub use camera::Camera;
pub use fmap::FloatMap;
pub use mesh::Mesh;
pub use sh::SHLighting;
pub use uv::{ShapeMaps, UvLookup};

/// Errors produced by the geometry core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("uv atlas: {0}")]
    Atlas(String),
    #[error("registration: {0}")]
    Registration(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// 3D vector in meters.
pub type Vec3 = nalgebra::Vector3<f32>;
/// 2D UV coordinate in [0,1]^2.
pub type Vec2 = nalgebra::Vector2<f32>;
/// 3x3 rotation / linear map.
pub type Mat3 = nalgebra::Matrix3<f32>;
