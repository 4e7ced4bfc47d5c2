//! Crate-wide error type.
//!
//! Everything fallible in this crate returns [`Result`]. The variants are
//! deliberately coarse: callers almost always either bubble the error up to
//! the CLI or assert on it in tests, so we optimize for readable messages
//! over exhaustive machine-matchable structure.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor name was looked up in a parameter set that does not contain it.
    #[error("parameter `{0}` not found in parameter set")]
    MissingParam(String),

    /// Two parameter sets that must share a schema (same names, same shapes)
    /// do not.
    #[error("parameter schema mismatch: {0}")]
    SchemaMismatch(String),

    /// An array had the wrong shape for the operation.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A caller-supplied value was out of range or otherwise unusable.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An input collection that must be non-empty was empty.
    #[error("empty input: {0}")]
    Empty(String),

    /// A client-local optimization step failed during a federated round.
    #[error("client {client} failed in round {round}: {source}")]
    Client {
        round: u32,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    /// A byte stream could not be decoded as a message or archive.
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    /// A frame announced a wire version this build does not speak.
    #[error("unsupported wire version {got} (this build speaks {expected})")]
    WireVersion { got: u16, expected: u16 },

    /// A transport endpoint failed to deliver or receive a message.
    #[error("transport: {0}")]
    Transport(String),

    /// A blocking receive gave up.
    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization of a config, partition, or metrics record failed.
    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl Error {
    /// Wrap an error that occurred while running a specific client's local
    /// update, so the federated loop can report *which* participant broke.
    pub fn in_client(self, round: u32, client: usize) -> Self {
        Error::Client {
            round,
            client,
            source: Box::new(self),
        }
    }
}
