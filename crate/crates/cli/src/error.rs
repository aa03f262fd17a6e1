use thiserror::Error;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("output error: {0}")]
    Output(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("inversion did not converge: {0}")]
    NotConverged(String),
    #[error("provider failure: {0}")]
    Provider(String),
}

impl CliError {
    /// 0 success, 2 input or configuration, 3 simulation, 4 non-convergence,
    /// 5 provider.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Input(_) | Self::Output(_) => 2,
            Self::Simulation(_) => 3,
            Self::NotConverged(_) => 4,
            Self::Provider(_) => 5,
        }
    }
}
