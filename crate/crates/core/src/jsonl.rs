//! Line-delimited JSON reading and writing.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: display.clone(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("serializable");
        buf.push(b'\n');
    }
    buf
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(&to_jsonl_bytes(items)).map_err(io_err)?;
    w.flush().map_err(io_err)
}
