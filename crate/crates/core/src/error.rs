use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the geometry kernels, the analyses and the batch pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mesh")]
    EmptyMesh,

    #[error("mesh is not a tube: {0}")]
    Topology(String),

    #[error("ambiguous inlet/outlet labeling: loop radii {0:.6} and {1:.6} mm differ by less than 1%")]
    AmbiguousLabeling(f64, f64),

    #[error("no path between the boundary loops (surface is disconnected)")]
    NoPath,

    #[error("seam crosses itself at face {0}")]
    SeamSelfIntersection(usize),

    #[error("singular parameterization system at vertex {0}")]
    SingularSystem(usize),

    #[error("linear solver did not converge (relative residual {0:.3e})")]
    SolverDiverged(f64),

    #[error("lattice point ({u:.6}, {v:.6}) is outside the parameter domain")]
    OutsideDomain { u: f64, v: f64 },

    #[error("section plane at station {0} is degenerate (collinear defining points)")]
    CollinearPlane(usize),

    #[error("plane at station {0} does not cut the surface in a closed loop")]
    OpenContour(usize),

    #[error("missing area for station {station}, frame {frame}")]
    MissingCell { station: usize, frame: usize },

    #[error("not enough defined peaks for wave speed statistics ({0} < 3)")]
    TooFewPeaks(usize),

    #[error("clip target unreachable at frame {frame}: full layer volume {volume:.6} < target {target:.6}")]
    ClipUnreachable { frame: usize, volume: f64, target: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed ({context}): {source}")]
    Stage {
        stage: &'static str,
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }

    pub fn in_stage(self, stage: &'static str, context: impl Into<String>) -> Self {
        Error::Stage { stage, context: context.into(), source: Box::new(self) }
    }
}
