//! JSONL persistence. One example per line; the split seed and ratio live in a
//! `<file>.meta.json` sidecar so a reload restores the whole [`Dataset`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset, Example};

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    split_ratio: Option<f64>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for example in &dataset.examples {
        let line = serde_json::to_string(example).expect("examples always serialize");
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    let meta = Meta {
        seed: dataset.seed,
        split_ratio: dataset.split_ratio,
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_string(&meta).expect("meta serializes")).map_err(io_err(&mp))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let example: Example = serde_json::from_str(line).map_err(|e| CorpusError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(example);
    }
    let mp = meta_path(path);
    let meta = match fs::read_to_string(&mp) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| CorpusError::Format {
            line: 1,
            message: format!("{}: {e}", mp.display()),
        })?,
        Err(_) => Meta {
            seed: 0,
            split_ratio: None,
        },
    };
    Ok(Dataset {
        examples,
        seed: meta.seed,
        split_ratio: meta.split_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, shipped_templates, stratified_split};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = stratified_split(&generate_corpus(shipped_templates(), 3, 8).unwrap(), 0.8, 2).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn key_order_is_fixed() {
        let ds = generate_corpus(shipped_templates(), 1, 1).unwrap();
        let line = serde_json::to_string(&ds.examples[0]).unwrap();
        let keys = ["\"id\"", "\"buggy_source\"", "\"reference_source\"", "\"failing_behavior\"",
            "\"gold_fix_type\"", "\"supervision\"", "\"split\"", "\"provenance\""];
        let positions: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
    }

    #[test]
    fn missing_label_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let ds = generate_corpus(shipped_templates(), 1, 1).unwrap();
        let mut v: serde_json::Value = serde_json::to_value(&ds.examples[0]).unwrap();
        v.as_object_mut().unwrap().remove("gold_fix_type");
        let good = serde_json::to_string(&ds.examples[1]).unwrap();
        fs::write(&path, format!("{good}\n{v}\n")).unwrap();
        match load_dataset(&path) {
            Err(CorpusError::Format { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("gold_fix_type"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }
}
