use std::io;
use std::path::PathBuf;

use flowmix_core::grid::GridSpec;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] flowmix_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Usage(String),
    #[error("dead state at row {row}, col {col}: no component carries flow through it")]
    DeadCell { row: usize, col: usize },
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    /// 2 for configuration or usage problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(e) if e.is_numeric() => 3,
            AppError::DeadCell { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }

    /// Replaces a bare dead-state id by its grid coordinates.
    pub fn locate(self, grid: GridSpec) -> AppError {
        match self {
            AppError::Core(flowmix_core::Error::DeadState(s)) if s.0 < grid.num_cells() => {
                let (row, col) = grid.coords(s);
                AppError::DeadCell { row, col }
            }
            e => e,
        }
    }
}
