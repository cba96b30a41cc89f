use std::path::PathBuf;

/// Errors produced by solvers, validators and the experiment runner.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: non-finite value in {0}")]
    NonFinite(String),

    #[error("simulation blow-up: non-finite state at path {path}, step {step}")]
    BlowUp { path: usize, step: usize },

    #[error(
        "regression design is rank deficient at time slice {slice} \
         (numerical rank {rank} < {cols} active columns); try a lower basis degree"
    )]
    RankDeficient { slice: usize, rank: usize, cols: usize },

    #[error(
        "CFL violation: time step {dt:.6e} exceeds the admissible {admissible:.6e}; \
         use at least {min_steps} time steps"
    )]
    Cfl { dt: f64, admissible: f64, min_steps: usize },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("unknown registered function `{name}` for {role}")]
    UnknownFunction { name: String, role: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code bucket used by the CLI: 2 for usage/config
    /// problems, 3 for numeric/solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::UnknownFunction { .. } | Error::Input(_) => 2,
            Error::Io(_) => 2,
            _ => 3,
        }
    }
}
