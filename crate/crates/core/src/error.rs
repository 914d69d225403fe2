use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("non-finite value {context} at layer {layer}")]
    NonFinite { layer: usize, context: &'static str },
    #[error("numeric error: {0}")]
    Numeric(String),
}
