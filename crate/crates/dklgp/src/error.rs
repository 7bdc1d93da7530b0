use thiserror::Error;

/// Errors surfaced by the numerical core and the CLI pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// A dense kernel submatrix failed its Cholesky factorization.
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// A triangular factor has a zero diagonal entry on the active set.
    #[error("singular diagonal at index {0}")]
    SingularDiagonal(usize),

    /// Two input points coincide under the current distance metric.
    #[error("duplicate points at rows {0} and {1}")]
    DuplicatePoints(usize, usize),

    /// Mismatched row counts or dimensions between aligned inputs.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A dense operation was requested above its size guard.
    #[error("size guard exceeded: n = {n} > {guard}")]
    SizeGuard { n: usize, guard: usize },

    /// A numerical failure tied to a specific column of a factor.
    #[error("numerical failure in column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach the column index at which a per-column computation failed.
    pub fn in_column(self, column: usize) -> Error {
        Error::Column {
            column,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
