use thiserror::Error;

use crate::data::Violation;
use crate::model_based::MixtureTransitionModel;
use crate::sieve::TwoWayFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory set: {}", summarize(.0))]
    InvalidData(Vec<Violation>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("observation {0} is not a known state")]
    UnknownState(f64),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// The projected Gram matrix has a relative singular value below the cutoff.
    #[error("singular design (relative singular value {ratio:.3e})")]
    SingularDesign { ratio: f64 },

    #[error("singular estimating system (relative singular value {ratio:.3e})")]
    SingularSystem { ratio: f64 },

    #[error("profile least squares did not converge within {max_iter} iterations")]
    ProfileNonConvergence { max_iter: usize, last: Box<TwoWayFit> },

    #[error("EM did not converge within {max_iter} iterations")]
    EmNonConvergence {
        max_iter: usize,
        trace: Vec<f64>,
        last: Box<MixtureTransitionModel>,
    },

    #[error("all component densities vanish at {} cell(s), first {:?}", .0.len(), .0.first())]
    DegenerateDensity(Vec<(usize, usize)>),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ingestion failed: {}", .0.join("; "))]
    Ingestion(Vec<String>),

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: usize) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

fn summarize(v: &[Violation]) -> String {
    let mut parts: Vec<String> = v.iter().take(5).map(|x| x.to_string()).collect();
    if v.len() > 5 {
        parts.push(format!("... {} more", v.len() - 5));
    }
    parts.join("; ")
}
