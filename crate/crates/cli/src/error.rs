use thiserror::Error;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_UNSTABLE: i32 = 3;
pub const EXIT_SIMULATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Unstable(String),
    #[error("{0}")]
    Simulation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Unstable(_) => EXIT_UNSTABLE,
            CliError::Simulation(_) => EXIT_SIMULATION,
        }
    }
}

pub fn input(msg: impl std::fmt::Display) -> CliError {
    CliError::Input(msg.to_string())
}
