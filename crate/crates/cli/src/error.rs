use deform_core::datagen::DataError;
use deform_core::fitting::FitError;
use deform_core::model::ModelError;
use deform_core::netcore::NetError;
use deform_core::semantics::SemanticError;
use deform_core::training::TrainError;
use deform_core::MeshError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(s) => CliError::Config(s),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Net(n) => n.into(),
            ModelError::LatentOutOfRange { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(s) => CliError::Config(s),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Net(n) => n.into(),
            TrainError::Mesh(m) => m.into(),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Model(m) => m.into(),
            FitError::Net(n) => n.into(),
            FitError::Degenerate => CliError::Numerical(e.to_string()),
            FitError::NonFinite(_) => CliError::Numerical(e.to_string()),
            FitError::TooFewPoints { .. } | FitError::VertexOutOfRange { .. } | FitError::LatentDim { .. } => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<SemanticError> for CliError {
    fn from(e: SemanticError) -> Self {
        match e {
            SemanticError::Config(s) => CliError::Config(s),
            SemanticError::Threshold(_) => CliError::Config(e.to_string()),
            SemanticError::ZeroNormal => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
