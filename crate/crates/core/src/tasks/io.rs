use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, Example, Vocab};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    input: String,
    target: String,
}

/// `<dir>/<task>.<split>.jsonl`
pub fn split_path(dir: &Path, task: &str, split: &str) -> PathBuf {
    dir.join(format!("{task}.{split}.jsonl"))
}

pub fn save_split(examples: &[Example], vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let rec = Record {
            input: vocab.decode(&ex.input),
            target: vocab.decode(&ex.target),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One `{"input": .., "target": ..}` object per line; blank lines are skipped.
pub fn load_split(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(Example {
            input: vocab.encode(&rec.input).map_err(parse)?,
            target: vocab.encode(&rec.target).map_err(parse)?,
        });
    }
    Ok(out)
}

/// Writes the three splits of `task` and the shared `vocab.txt` into `dir`.
pub fn save_corpus(dir: impl AsRef<Path>, task: &str, corpus: &Corpus, vocab: &Vocab) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.save(dir.join("vocab.txt"))?;
    save_split(&corpus.train, vocab, split_path(dir, task, "train"))?;
    save_split(&corpus.val, vocab, split_path(dir, task, "val"))?;
    save_split(&corpus.test, vocab, split_path(dir, task, "test"))
}

pub fn corpus_exists(dir: impl AsRef<Path>, task: &str) -> bool {
    let dir = dir.as_ref();
    ["train", "val", "test"]
        .iter()
        .any(|s| split_path(dir, task, s).exists())
}

/// Reads `vocab.txt` and the three splits of `task` from `dir`.
pub fn load_corpus(dir: impl AsRef<Path>, task: &str) -> Result<(Corpus, Vocab)> {
    let dir = dir.as_ref();
    let vocab = Vocab::load(dir.join("vocab.txt"))?;
    let corpus = Corpus {
        train: load_split(split_path(dir, task, "train"), &vocab)?,
        val: load_split(split_path(dir, task, "val"), &vocab)?,
        test: load_split(split_path(dir, task, "test"), &vocab)?,
    };
    Ok((corpus, vocab))
}
