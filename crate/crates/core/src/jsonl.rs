//! Line-delimited JSON helpers shared by every on-disk stream.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub fn write_line<W: Write, T: Serialize>(w: &mut W, item: &T) -> Result<(), JsonlError> {
    serde_json::to_writer(&mut *w, item)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_all<W: Write, T: Serialize>(w: &mut W, items: &[T]) -> Result<(), JsonlError> {
    for it in items {
        write_line(w, it)?;
    }
    Ok(())
}

/// Reads every non-blank line as one `T`.
pub fn read_all<R: BufRead, T: DeserializeOwned>(r: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| JsonlError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}
