use std::fmt;
use std::process::ExitCode;

use xmatch::Error;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;

/// An error tagged with the exit code it should produce.
#[derive(Debug)]
pub struct Classified {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Classified {}

pub fn usage_error(msg: impl Into<String>) -> anyhow::Error {
    Classified { code: USAGE, message: msg.into() }.into()
}

pub fn data_error(msg: impl Into<String>) -> anyhow::Error {
    Classified { code: DATA, message: msg.into() }.into()
}

pub fn numeric_error(msg: impl Into<String>) -> anyhow::Error {
    Classified { code: NUMERIC, message: msg.into() }.into()
}

fn library_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidTemperature(_) | Error::InvalidLambda(_) => USAGE,
        Error::NonFiniteTerm(_)
        | Error::DegenerateOutputRow(_)
        | Error::DegenerateRow(_)
        | Error::EmptyRow(_)
        | Error::NothingMined => NUMERIC,
        _ => DATA,
    }
}

pub fn code_of(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Classified>() {
            return c.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return library_code(e);
        }
    }
    DATA
}

pub fn report(err: &anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    ExitCode::from(code_of(err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification() {
        assert_eq!(code_of(&Error::InvalidConfig("x".into()).into()), USAGE);
        assert_eq!(code_of(&Error::NonFiniteTerm("itc").into()), NUMERIC);
        assert_eq!(code_of(&Error::MissingCheckpoint("x".into()).into()), DATA);
        let wrapped = Err::<(), _>(Error::DegenerateRow(3)).context("training").unwrap_err();
        assert_eq!(code_of(&wrapped), NUMERIC);
        assert_eq!(code_of(&usage_error("bad")), USAGE);
        assert_eq!(code_of(&anyhow::anyhow!("other")), DATA);
    }
}
