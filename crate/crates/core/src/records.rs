//! Dataset rows and JSON-lines I/O.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// `(Q, p, v)` row of a value-model training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRecord {
    pub question_id: String,
    pub question: String,
    pub partial_steps: Vec<String>,
    pub value: f64,
    pub iteration: u32,
}

/// Correct solution row of a policy fine-tuning set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub question_id: String,
    pub question: String,
    pub solution_steps: Vec<String>,
    pub answer: String,
    pub iteration: u32,
}

/// Writes one JSON document per line; returns the number of lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> io::Result<usize> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(rows.len())
}

/// Reads a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}
