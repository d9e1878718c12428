use std::io::ErrorKind;
use std::path::PathBuf;

use fisheye_hpe::evaluation::EvalError;
use fisheye_hpe::synthesis::SynthesisError;
use fisheye_hpe::tensor::TensorError;
use fisheye_hpe::training::TrainingError;
use thiserror::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_INPUT: u8 = 3;
pub const EXIT_MALFORMED_INPUT: u8 = 4;
pub const EXIT_NON_FINITE_LOSS: u8 = 5;
pub const EXIT_GRADCHECK_FAILED: u8 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: no such file or directory", .0.display())]
    Missing(PathBuf),
    #[error("{}: {msg}", path.display())]
    BadConfig { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_code(e: &std::io::Error) -> u8 {
    if e.kind() == ErrorKind::NotFound {
        EXIT_MISSING_INPUT
    } else {
        EXIT_FAILURE
    }
}

fn image_code(e: &image::ImageError) -> u8 {
    match e {
        image::ImageError::IoError(io) => io_code(io),
        _ => EXIT_MALFORMED_INPUT,
    }
}

fn synthesis_code(e: &SynthesisError) -> u8 {
    match e {
        SynthesisError::Io(io) => io_code(io),
        SynthesisError::Image(img) => image_code(img),
        SynthesisError::Manifest { .. } | SynthesisError::InvalidSource { .. } => EXIT_MALFORMED_INPUT,
        _ => EXIT_FAILURE,
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::Io(io) => io_code(io),
        TensorError::Checkpoint(_) => EXIT_MALFORMED_INPUT,
        _ => EXIT_FAILURE,
    }
}

fn training_code(e: &TrainingError) -> u8 {
    match e {
        TrainingError::NonFiniteLoss { .. } => EXIT_NON_FINITE_LOSS,
        TrainingError::EmptyDataset | TrainingError::MissingLocation(_) | TrainingError::InvalidConfig(_) => {
            EXIT_MALFORMED_INPUT
        }
        TrainingError::Tensor(t) => tensor_code(t),
        TrainingError::Synthesis(s) => synthesis_code(s),
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) => EXIT_MISSING_INPUT,
            CliError::BadConfig { .. } => EXIT_MALFORMED_INPUT,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::GradCheck(_) => EXIT_GRADCHECK_FAILED,
            CliError::Synthesis(e) => synthesis_code(e),
            CliError::Training(e) => training_code(e),
            CliError::Eval(EvalError::Training(e)) => training_code(e),
            CliError::Eval(EvalError::Io(e)) => io_code(e),
            CliError::Eval(EvalError::Empty | EvalError::MissingLocation(_) | EvalError::Parse { .. }) => {
                EXIT_MALFORMED_INPUT
            }
            CliError::Tensor(e) => tensor_code(e),
            CliError::Image(e) => image_code(e),
            CliError::Io(e) => io_code(e),
        }
    }
}
