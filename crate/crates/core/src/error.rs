use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised while validating inputs or running an estimation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-finite {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },

    #[error("needs two periods, found {found} distinct period label(s)")]
    NeedsTwoPeriods { found: usize },

    #[error("negative dose {value} at row {row}")]
    NegativeDose { value: f64, row: usize },

    #[error("column length mismatch: `{column}` has {found} rows, expected {expected}")]
    LengthMismatch { column: String, expected: usize, found: usize },

    #[error("required period {0} absent from sample")]
    PeriodAbsent(i64),

    #[error("history leaks post-treatment doses: column with lag {lag} is not older than lag {min_allowed}")]
    HistoryLeak { lag: u32, min_allowed: u32 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("all observation weights are zero")]
    ZeroWeights,

    #[error("labels contain a single class")]
    SingleClass,

    #[error("nonpositive dose {value} at row {row} under the loglinear density family")]
    NonPositiveDose { value: f64, row: usize },

    #[error("empty local cell (dose {dose}, period {period}): all kernel weights are zero")]
    EmptyLocalCell { dose: f64, period: String },

    #[error("empty group {0}: zero total weight")]
    EmptyGroup(String),

    #[error("group {0} empties under trimming")]
    GroupEmptiesUnderTrimming(String),

    #[error("density normalizer {0:e} is below 1e-12")]
    DegenerateDensity(f64),

    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<Error> },

    #[error("{failed} of {reps} replications failed, exceeding the 5% limit")]
    TooManyFailures { failed: usize, reps: usize },
}

impl Error {
    /// Input errors are malformed data or arguments; everything else is an
    /// estimation failure on otherwise valid input.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::MissingColumn(_)
            | Error::NonFinite { .. }
            | Error::NeedsTwoPeriods { .. }
            | Error::NegativeDose { .. }
            | Error::LengthMismatch { .. }
            | Error::PeriodAbsent(_)
            | Error::HistoryLeak { .. }
            | Error::InvalidParameter(_)
            | Error::NonPositiveDose { .. } => true,
            Error::Fold { source, .. } => source.is_input_error(),
            _ => false,
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Error {
        Error::Fold { fold, source: Box::new(self) }
    }
}
