use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped by subsystem; all numerical
/// preconditions surface as structured errors rather than panics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- geometry ----
    #[error("quaternion norm {norm} too small to normalize")]
    ZeroQuaternion { norm: f64 },
    #[error("trajectory needs {expected} control poses for {mode} interpolation, got {got}")]
    ControlPointCount {
        mode: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("interpolation parameter t={t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },
    #[error("need at least {min} virtual views, got {got}")]
    TooFewViews { min: usize, got: usize },
    #[error("point at camera depth {z} is behind the near plane {near}")]
    BehindCamera { z: f64, near: f64 },
    #[error("trajectory alignment needs {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("trajectory length mismatch: {a} vs {b} poses")]
    LengthMismatch { a: usize, b: usize },
    #[error("point set is degenerate (coincident or collinear); alignment rank {rank} < 2")]
    DegenerateAlignment { rank: usize },

    // ---- images ----
    #[error("image dimension mismatch: {a_h}x{a_w}x{a_c} vs {b_h}x{b_w}x{b_c}")]
    ImageShapeMismatch {
        a_h: usize,
        a_w: usize,
        a_c: usize,
        b_h: usize,
        b_w: usize,
        b_c: usize,
    },
    #[error("empty image or zero-sized dimension {h}x{w}x{c}")]
    EmptyImage { h: usize, w: usize, c: usize },

    // ---- map / rasterizer / blur ----
    #[error("gaussian map is empty")]
    EmptyMap,
    #[error("gaussian {index}: {what}")]
    InvalidGaussian { index: usize, what: String },
    #[error("render state mismatch: map changed since the forward pass (generation {expected} vs {got})")]
    StaleRenderState { expected: u64, got: u64 },
    #[error("virtual render stack is empty")]
    EmptyStack,
    #[error("virtual render stack shapes differ between views")]
    StackShapeMismatch,
    #[error("depth fusion needs positive scale, got theta={theta}")]
    NonPositiveScale { theta: f64 },
    #[error("scale/shift fit is rank deficient: {what}")]
    ScaleShiftRankDeficient { what: String },
    #[error("deformation lookup failed for {count} of {total} anchored gaussians")]
    DeformationFailed { count: usize, total: usize },

    // ---- tracking ----
    #[error("frame untrackable: map coverage {coverage:.4} of edge pixels is below {min:.4}")]
    Untrackable { coverage: f64, min: f64 },

    // ---- factor graph ----
    #[error("factor graph has no keyframe {id}")]
    UnknownKeyframe { id: usize },
    #[error("factor graph window is empty")]
    EmptyWindow,
    #[error("linear solve failed: {what}")]
    SolveFailed { what: String },
    #[error("flow provider failed for frames ({i}, {j}): {what}")]
    FlowUnavailable { i: usize, j: usize, what: String },

    // ---- data / config ----
    #[error("parse error in {path} line {line}: {what}")]
    Parse {
        path: PathBuf,
        line: usize,
        what: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error at {path}: {what}")]
    Dataset { path: PathBuf, what: String },
    #[error("sharp frame count {frames} not divisible by group size {group}")]
    GroupSizeMismatch { frames: usize, group: usize },

    #[error("{0}")]
    Msg(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn msg(m: impl Into<String>) -> Self {
        Error::Msg(m.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
