use thiserror::Error;

/// Errors raised by channel construction, indexing, simulation and configuration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside its domain")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("query size {size} gives crossover {crossover} > 1/2")]
    InvalidState { size: f64, crossover: f64 },

    #[error("unknown output symbol {symbol} (alphabet size {alphabet})")]
    UnknownSymbol { symbol: usize, alphabet: usize },

    #[error("output symbol {0} has zero marginal probability")]
    ImpossibleOutput(usize),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("partition with M = {m}, d = {d} exceeds the supported number of bins")]
    PartitionOverflow { m: u64, d: u32 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
