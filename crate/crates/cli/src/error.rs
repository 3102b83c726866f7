//! CLI error type with the documented exit-code mapping:
//! 0 success, 2 validation error, 3 budget exceeded, 4 search/experiment failure.

use frl_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("search failure: {0}")]
    Search(String),

    #[error("experiment failed its sanity check: {0}")]
    Experiment(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Budget(_) => 3,
            CliError::Search(_) | CliError::Experiment(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NodeBudget { .. } => CliError::Budget(format!(
                "{e}; reduce depth or n1, or raise node_budget in the config"
            )),
            CoreError::QuadratureBudget { .. } => {
                CliError::Budget(format!("{e}; coarsen the spacing or shrink the domain"))
            }
            CoreError::SearchFailure { .. } => CliError::Search(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("serialization error: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 2);
        assert_eq!(CliError::Budget("x".into()).exit_code(), 3);
        assert_eq!(CliError::Search("x".into()).exit_code(), 4);
        assert_eq!(CliError::Experiment("x".into()).exit_code(), 4);
        let core = CoreError::NodeBudget {
            nodes: 10,
            budget: 1,
        };
        assert_eq!(CliError::from(core).exit_code(), 3);
    }
}
