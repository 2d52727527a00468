//! Newline-delimited JSON, the hand-off format between pipeline stages.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdjsonError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

/// Read every non-blank line; the first bad line is an error.
pub fn read<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>, NdjsonError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| NdjsonError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<(), NdjsonError> {
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|source| NdjsonError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_bad_line_number() {
        let err = read::<u32, _>("1\n\n2\nx\n".as_bytes()).unwrap_err();
        assert!(matches!(err, NdjsonError::Json { line: 4, .. }));
        assert_eq!(read::<u32, _>("1\n\n2\n".as_bytes()).unwrap(), [1, 2]);
    }
}
