//! JSON Lines input and output.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Records parsed from a JSONL stream plus the lines that were skipped.
#[derive(Debug)]
pub struct JsonlRead<T> {
    pub records: Vec<T>,
    /// `(1-based line number, parse error)` for every rejected line.
    pub skipped: Vec<(usize, String)>,
}

/// Parses one record per non-blank line.
///
/// In strict mode the first malformed line aborts with its line number;
/// otherwise malformed lines are logged, recorded in `skipped` and parsing
/// continues.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead, strict: bool) -> Result<JsonlRead<T>> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(rec) => records.push(rec),
            Err(e) if strict => {
                return Err(Error::MalformedLine {
                    line: lineno,
                    message: e.to_string(),
                })
            }
            Err(e) => {
                tracing::warn!(line = lineno, error = %e, "skipping malformed JSONL line");
                skipped.push((lineno, e.to_string()));
            }
        }
    }
    Ok(JsonlRead { records, skipped })
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path, strict: bool) -> Result<JsonlRead<T>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file), strict)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, records: &[T]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, Serialize, PartialEq)]
    struct Rec {
        a: u32,
    }

    const INPUT: &str = "{\"a\":1}\n\nnot json\n{\"a\":2}\n{\"b\":3}\n";

    #[test]
    fn lenient_mode_skips_with_line_numbers() {
        let out: JsonlRead<Rec> = read_jsonl(INPUT.as_bytes(), false).unwrap();
        assert_eq!(out.records, vec![Rec { a: 1 }, Rec { a: 2 }]);
        let lines: Vec<usize> = out.skipped.iter().map(|(l, _)| *l).collect();
        assert_eq!(lines, vec![3, 5]);
    }

    #[test]
    fn strict_mode_aborts_at_first_bad_line() {
        let err = read_jsonl::<Rec>(INPUT.as_bytes(), true).unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_read() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[Rec { a: 7 }, Rec { a: 8 }]).unwrap();
        let back: JsonlRead<Rec> = read_jsonl(buf.as_slice(), true).unwrap();
        assert_eq!(back.records, vec![Rec { a: 7 }, Rec { a: 8 }]);
    }
}
