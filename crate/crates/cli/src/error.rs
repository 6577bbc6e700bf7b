//! Command failures with their exit codes and error-line categories.

use std::io;
use std::path::Path;

use fedtensor_core::eval::EvalError;
use fedtensor_core::factorize::PlanError;
use fedtensor_core::fedsim::SimError;
use fedtensor_core::format::FormatError;
use fedtensor_core::learning::LearningError;
use fedtensor_core::privacy::PrivacyError;
use thiserror::Error;

pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

/// Printed as `error: <category>: <message>` on one line.
#[derive(Debug, Error)]
#[error("{category}: {message}")]
pub struct Failure {
    pub code: i32,
    pub category: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, category: &'static str, message: impl Into<String>) -> Self {
        Failure {
            code,
            category,
            message: message.into().replace('\n', " "),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new(EXIT_USAGE, "usage", message)
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure::new(EXIT_RUNTIME, "runtime", message)
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        Failure::new(EXIT_USAGE, "io", format!("{}: {err}", path.display()))
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        let text = e.to_string();
        let message = match e.kind() {
            Some(kind) if !text.starts_with(kind) => format!("{kind}: {text}"),
            _ => text,
        };
        Failure::new(EXIT_INVALID, e.category(), message)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Type(t) => FormatError::Type(t).into(),
            other => Failure::runtime(other.to_string()),
        }
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Invalid(vs) => FormatError::Validation(vs).into(),
            other => Failure::runtime(other.to_string()),
        }
    }
}

impl From<PrivacyError> for Failure {
    fn from(e: PrivacyError) -> Self {
        match e {
            PrivacyError::Plan(p) => p.into(),
            other => Failure::new(EXIT_USAGE, "privacy", other.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Plan(p) => p.into(),
            SimError::Privacy(p) => p.into(),
            other => Failure::new(EXIT_RUNTIME, "transport", other.to_string()),
        }
    }
}

impl From<LearningError> for Failure {
    fn from(e: LearningError) -> Self {
        match e {
            LearningError::Eval(ev) => ev.into(),
            other => Failure::new(EXIT_USAGE, "learning", other.to_string()),
        }
    }
}
