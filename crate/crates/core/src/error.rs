use thiserror::Error;

/// Every failure mode of the crate, keyed by a stable `E_*` code.
///
/// The code string is part of the CLI contract: commands print it on stderr
/// and scripts dispatch on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("E_SHAPE: {0}")]
    Shape(String),
    #[error("E_IO: {0}")]
    Io(String),
    #[error("E_FORMAT: {0}")]
    Format(String),
    #[error("E_DEGENERATE: {0}")]
    Degenerate(String),
    #[error("E_EMPTY_FG: {0}")]
    EmptyFg(String),
    #[error("E_EMPTY_BG: {0}")]
    EmptyBg(String),
    #[error("E_PATCH_DIV: {0}")]
    PatchDiv(String),
    #[error("E_K_TOO_LARGE: {0}")]
    KTooLarge(String),
    #[error("E_CONFIG: {0}")]
    Config(String),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Io(_) => "E_IO",
            Error::Format(_) => "E_FORMAT",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::EmptyFg(_) => "E_EMPTY_FG",
            Error::EmptyBg(_) => "E_EMPTY_BG",
            Error::PatchDiv(_) => "E_PATCH_DIV",
            Error::KTooLarge(_) => "E_K_TOO_LARGE",
            Error::Config(_) => "E_CONFIG",
        }
    }

    pub(crate) fn io(context: &str, err: std::io::Error) -> Error {
        Error::Io(format!("{context}: {err}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_carries_code() {
        let e = Error::Shape("channel mismatch".into());
        assert_eq!(e.to_string(), "E_SHAPE: channel mismatch");
        assert_eq!(e.code(), "E_SHAPE");
    }
}
