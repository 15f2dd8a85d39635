//! Artifact persistence: JSONL with a leading metadata line, config-hash
//! stamped CSV, and whole-file JSON documents.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JsonlMeta {
    config_hash: String,
}

/// Write records as JSON lines; the first line is a metadata object carrying
/// the config hash.
pub fn write_jsonl<T: Serialize>(path: &Path, config_hash: &str, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &JsonlMeta { config_hash: config_hash.to_string() })?;
    out.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read records written by [`write_jsonl`]; returns the config hash and items.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(String, Vec<T>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::config(format!("{} is empty", path.display())))??;
    let meta: JsonlMeta = serde_json::from_str(&meta_line)?;
    let mut items = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok((meta.config_hash, items))
}

/// Write CSV content under a `# config_hash=<hash>` comment line.
pub fn write_csv_with_hash(path: &Path, config_hash: &str, body: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# config_hash={config_hash}")?;
    out.write_all(body.as_bytes())?;
    Ok(())
}

/// A JSON document with its config hash embedded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document<T> {
    pub config_hash: String,
    pub payload: T,
}

pub fn write_json<T: Serialize>(path: &Path, config_hash: &str, payload: &T) -> Result<()> {
    let doc = Document { config_hash: config_hash.to_string(), payload };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Document<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let items = vec![[1.0_f64, 2.0], [3.0, 4.0]];
        write_jsonl(&path, "abc123", &items).unwrap();
        let (hash, back): (String, Vec<[f64; 2]>) = read_jsonl(&path).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(back, items);
    }

    #[test]
    fn csv_carries_hash_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv_with_hash(&path, "deadbeef", "a,b\n1,2\n").unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.starts_with("# config_hash=deadbeef\n"));
    }

    #[test]
    fn json_document_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        write_json(&path, "h", &vec![1, 2, 3]).unwrap();
        let doc: Document<Vec<i32>> = read_json(&path).unwrap();
        assert_eq!(doc.config_hash, "h");
        assert_eq!(doc.payload, vec![1, 2, 3]);
    }
}
