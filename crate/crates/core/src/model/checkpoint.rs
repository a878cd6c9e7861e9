//! Binary checkpoints.
//!
//! Adapter files start with the line `ALMP1`, followed by one record per
//! adapter: a UTF-8 header line of space-separated `key=value` pairs
//!
//! ```text
//! task_tag=<tag> layer_id=<l> projection=<query|value> rank=<r> alpha=<a>
//! a_rows=<r> a_cols=<in> b_rows=<out> b_cols=<r> dropout=<p> init_seed=<s>
//! ```
//!
//! (on one line) and then `A` and `B` as little-endian `f32` in row-major
//! order. Base-model files use the same layout with magic `ALMB1`, a model
//! shape line, and one `name=<tensor> rows=<r> cols=<c>` record per tensor.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::adapter::{validate_tag, AdapterModule, AdapterSet, Site};
use crate::model::base::{BaseModel, ModelConfig};
use crate::numerics::Matrix;

pub const ADAPTER_MAGIC: &str = "ALMP1";
pub const BASE_MAGIC: &str = "ALMB1";

fn write_floats(w: &mut impl Write, m: &Matrix) -> std::io::Result<()> {
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serialises adapters to bytes; the file written by [`save_adapters`].
pub fn encode_adapters(set: &AdapterSet) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{ADAPTER_MAGIC}").expect("vec write");
    for m in set.modules() {
        writeln!(
            out,
            "task_tag={} layer_id={} projection={} rank={} alpha={} a_rows={} a_cols={} b_rows={} b_cols={} dropout={} init_seed={}",
            m.task_tag,
            m.site.layer,
            m.site.projection,
            m.rank(),
            m.alpha,
            m.a.rows(),
            m.a.cols(),
            m.b.rows(),
            m.b.cols(),
            m.dropout,
            m.init_seed
        )
        .expect("vec write");
        write_floats(&mut out, &m.a).expect("vec write");
        write_floats(&mut out, &m.b).expect("vec write");
    }
    out
}

pub fn save_adapters(set: &AdapterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_adapters(set)).map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: BufRead> Reader<R> {
    /// Next header line without its newline, or `None` at a clean EOF.
    fn line(&mut self) -> Result<Option<String>> {
        let mut buf = Vec::new();
        let n = self
            .inner
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io(&self.path, e))?;
        if n == 0 {
            return Ok(None);
        }
        if buf.last() != Some(&b'\n') {
            return Err(Error::format(&self.path, "truncated header line"));
        }
        buf.pop();
        String::from_utf8(buf)
            .map(Some)
            .map_err(|_| Error::format(&self.path, "header is not UTF-8"))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut bytes = vec![0u8; rows * cols * 4];
        self.inner
            .read_exact(&mut bytes)
            .map_err(|_| Error::format(&self.path, format!("truncated {rows}x{cols} payload")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(&self.path, e.to_string()))
    }

    fn fields(&self, line: &str) -> Result<HashMap<String, String>> {
        line.split(' ')
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::format(&self.path, format!("malformed header field `{kv}`")))
            })
            .collect()
    }
}

fn field<T: std::str::FromStr>(path: &Path, fields: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = fields
        .get(key)
        .ok_or_else(|| Error::format(path, format!("header lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::format(path, format!("bad value `{raw}` for `{key}`")))
}

fn open(path: &Path, magic: &str) -> Result<Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Reader {
        inner: BufReader::new(file),
        path: path.to_path_buf(),
    };
    match reader.line()? {
        Some(m) if m == magic => Ok(reader),
        Some(m) => Err(Error::format(
            path,
            format!("expected magic `{magic}`, found `{}`", m.chars().take(16).collect::<String>()),
        )),
        None => Err(Error::format(path, "empty file")),
    }
}

/// Reads an adapter checkpoint. Shapes are checked for internal consistency
/// only; use [`load_adapters_for`] to also check them against a base model.
pub fn load_adapters(path: impl AsRef<Path>) -> Result<AdapterSet> {
    let path = path.as_ref();
    let mut reader = open(path, ADAPTER_MAGIC)?;
    let mut set = AdapterSet::new();
    while let Some(line) = reader.line()? {
        let f = reader.fields(&line)?;
        let task_tag: String = field(path, &f, "task_tag")?;
        validate_tag(&task_tag).map_err(|e| Error::format(path, e.to_string()))?;
        let site = Site::new(field(path, &f, "layer_id")?, field(path, &f, "projection")?);
        let rank: usize = field(path, &f, "rank")?;
        let (a_rows, a_cols): (usize, usize) = (field(path, &f, "a_rows")?, field(path, &f, "a_cols")?);
        let (b_rows, b_cols): (usize, usize) = (field(path, &f, "b_rows")?, field(path, &f, "b_cols")?);
        if a_rows != rank || b_cols != rank || rank == 0 {
            return Err(Error::Shape(format!(
                "{}: adapter {task_tag} at {site} declares rank {rank} with A {a_rows}x{a_cols}, B {b_rows}x{b_cols}",
                path.display()
            )));
        }
        let a = reader.matrix(a_rows, a_cols)?;
        let b = reader.matrix(b_rows, b_cols)?;
        let module = AdapterModule {
            task_tag,
            site,
            a,
            b,
            alpha: field(path, &f, "alpha")?,
            dropout: f.get("dropout").map_or(Ok(0.0), |_| field(path, &f, "dropout"))?,
            init_seed: f.get("init_seed").map_or(Ok(0), |_| field(path, &f, "init_seed"))?,
        };
        set.insert(module)?;
    }
    Ok(set)
}

/// [`load_adapters`] plus a shape check against `base`.
pub fn load_adapters_for(path: impl AsRef<Path>, base: &BaseModel) -> Result<AdapterSet> {
    let set = load_adapters(path)?;
    set.check_against(base)?;
    Ok(set)
}

pub fn save_base(base: &BaseModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let c = &base.config;
    let io = |e| Error::io(path, e);
    writeln!(w, "{BASE_MAGIC}").map_err(io)?;
    writeln!(
        w,
        "vocab_size={} d_model={} layers={} heads={} d_ff={} max_len={}",
        c.vocab_size, c.d_model, c.layers, c.heads, c.d_ff, c.max_len
    )
    .map_err(io)?;
    for (name, m) in base.tensors() {
        writeln!(w, "name={name} rows={} cols={}", m.rows(), m.cols()).map_err(io)?;
        write_floats(&mut w, m).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_base(path: impl AsRef<Path>) -> Result<BaseModel> {
    let path = path.as_ref();
    let mut reader = open(path, BASE_MAGIC)?;
    let line = reader
        .line()?
        .ok_or_else(|| Error::format(path, "missing model shape line"))?;
    let f = reader.fields(&line)?;
    let config = ModelConfig {
        vocab_size: field(path, &f, "vocab_size")?,
        d_model: field(path, &f, "d_model")?,
        layers: field(path, &f, "layers")?,
        heads: field(path, &f, "heads")?,
        d_ff: field(path, &f, "d_ff")?,
        max_len: field(path, &f, "max_len")?,
    };
    config.validate().map_err(|e| Error::format(path, e.to_string()))?;
    // Shapes come from a template; the file must match it tensor for tensor.
    let mut base = BaseModel::random(config, 0)?;
    for (name, slot) in base.tensors_mut() {
        let line = reader
            .line()?
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        let f = reader.fields(&line)?;
        let got: String = field(path, &f, "name")?;
        let (rows, cols): (usize, usize) = (field(path, &f, "rows")?, field(path, &f, "cols")?);
        if got != name || (rows, cols) != slot.shape() {
            return Err(Error::Shape(format!(
                "{}: expected tensor {name} {:?}, found {got} ({rows}, {cols})",
                path.display(),
                slot.shape()
            )));
        }
        *slot = reader.matrix(rows, cols)?;
    }
    if reader.line()?.is_some() {
        return Err(Error::format(path, "trailing data after last tensor"));
    }
    Ok(base)
}
