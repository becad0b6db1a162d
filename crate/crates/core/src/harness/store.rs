//! On-disk formats: JSON manifests next to raw little-endian `f64` arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnm::{FnmConfig, FnmParams, TensorEntry};
use crate::rno::{Adam, EpochMetrics, RnoArch, RnoModel, TrainState, Variant};

pub const FORMAT_VERSION: u32 = 1;

/// Location of a row-major array inside a raw `f64` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayRef {
    pub file: String,
    /// Byte offset.
    pub offset: u64,
    pub shape: Vec<usize>,
}

impl ArrayRef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Appends arrays to named files held in memory until [`ArrayWriter::finish`].
#[derive(Debug, Default)]
pub struct ArrayWriter {
    files: BTreeMap<String, Vec<u8>>,
}

impl ArrayWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, file: &str, values: &[f64], shape: Vec<usize>) -> ArrayRef {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let buf = self.files.entry(file.to_string()).or_default();
        let offset = buf.len() as u64;
        buf.reserve(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        ArrayRef {
            file: file.to_string(),
            offset,
            shape,
        }
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        for (name, bytes) in self.files {
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Reads arrays, loading each referenced file once.
#[derive(Debug)]
pub struct ArrayReader {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl ArrayReader {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        }
    }

    pub fn read(&mut self, r: &ArrayRef) -> Result<Vec<f64>> {
        if r.file.contains('/') || r.file.contains('\\') || r.file.starts_with('.') {
            return Err(Error::Config(format!("array file name {:?} must be a plain file name", r.file)));
        }
        if !self.files.contains_key(&r.file) {
            let path = self.dir.join(&r.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(path, e))?;
            self.files.insert(r.file.clone(), bytes);
        }
        let bytes = &self.files[&r.file];
        let start = r.offset as usize;
        let end = start + r.len() * 8;
        if start % 8 != 0 || end > bytes.len() {
            return Err(Error::Shape(format!(
                "array {:?} at offset {} with shape {:?} does not fit in {} bytes",
                r.file,
                r.offset,
                r.shape,
                bytes.len()
            )));
        }
        Ok(bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Network description stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkHeader {
    pub config: FnmConfig,
    pub tensors: Vec<TensorEntry>,
    pub params: ArrayRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub variant: Variant,
    pub n_state: usize,
    pub arch: RnoArch,
    pub f: NetworkHeader,
    pub g: NetworkHeader,
}

fn net_header(w: &mut ArrayWriter, file: &str, p: &FnmParams) -> NetworkHeader {
    NetworkHeader {
        config: p.config,
        tensors: p.tensors(),
        params: w.push(file, &p.data, vec![p.data.len()]),
    }
}

fn model_header(w: &mut ArrayWriter, file: &str, m: &RnoModel) -> CheckpointHeader {
    CheckpointHeader {
        version: FORMAT_VERSION,
        variant: m.variant,
        n_state: m.n_state,
        arch: m.arch(),
        f: net_header(w, file, &m.f),
        g: net_header(w, file, &m.g),
    }
}

fn model_from_header(r: &mut ArrayReader, h: &CheckpointHeader) -> Result<RnoModel> {
    if h.version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {}", h.version)));
    }
    let m = RnoModel {
        variant: h.variant,
        n_state: h.n_state,
        f: FnmParams::from_data(h.f.config, r.read(&h.f.params)?)?,
        g: FnmParams::from_data(h.g.config, r.read(&h.g.params)?)?,
    };
    m.validate()?;
    Ok(m)
}

fn data_file_name(json: &Path) -> Result<String> {
    let stem = json
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no file name", json.display())))?;
    Ok(format!("{stem}.f64"))
}

fn parent(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

/// Save a model as `<name>.json` plus `<name>.f64` next to it.
pub fn save_model(path: &Path, model: &RnoModel) -> Result<()> {
    let file = data_file_name(path)?;
    let mut w = ArrayWriter::new();
    let header = model_header(&mut w, &file, model);
    w.finish(parent(path))?;
    write_json(path, &header)
}

pub fn load_model(path: &Path) -> Result<RnoModel> {
    let header: CheckpointHeader = read_json(path)?;
    model_from_header(&mut ArrayReader::new(parent(path)), &header)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    m_f: ArrayRef,
    v_f: ArrayRef,
    m_g: ArrayRef,
    v_g: ArrayRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    version: u32,
    epoch: usize,
    lr_scale: f64,
    nan_restarts: u32,
    /// Absent until the first epoch has been scored.
    best_val: Option<f64>,
    model: CheckpointHeader,
    best: CheckpointHeader,
    adam: AdamHeader,
    history: Vec<EpochMetrics>,
}

/// Save everything needed to resume training.
pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let file = data_file_name(path)?;
    let mut w = ArrayWriter::new();
    let model = model_header(&mut w, &file, &state.model);
    let best = model_header(&mut w, &file, &state.best);
    let a = &state.adam;
    let adam = AdamHeader {
        step: a.step,
        m_f: w.push(&file, &a.m_f, vec![a.m_f.len()]),
        v_f: w.push(&file, &a.v_f, vec![a.v_f.len()]),
        m_g: w.push(&file, &a.m_g, vec![a.m_g.len()]),
        v_g: w.push(&file, &a.v_g, vec![a.v_g.len()]),
    };
    let header = StateHeader {
        version: FORMAT_VERSION,
        epoch: state.epoch,
        lr_scale: state.lr_scale,
        nan_restarts: state.nan_restarts,
        best_val: state.best_val.is_finite().then_some(state.best_val),
        model,
        best,
        adam,
        history: state.history.clone(),
    };
    w.finish(parent(path))?;
    write_json(path, &header)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let h: StateHeader = read_json(path)?;
    if h.version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported training state version {}", h.version)));
    }
    let mut r = ArrayReader::new(parent(path));
    let model = model_from_header(&mut r, &h.model)?;
    let best = model_from_header(&mut r, &h.best)?;
    let adam = Adam {
        m_f: r.read(&h.adam.m_f)?,
        v_f: r.read(&h.adam.v_f)?,
        m_g: r.read(&h.adam.m_g)?,
        v_g: r.read(&h.adam.v_g)?,
        step: h.adam.step,
    };
    if adam.m_f.len() != model.f.data.len() || adam.m_g.len() != model.g.data.len() {
        return Err(Error::Shape("optimizer moments do not match the model".into()));
    }
    Ok(TrainState {
        model,
        best,
        best_val: h.best_val.unwrap_or(f64::INFINITY),
        adam,
        epoch: h.epoch,
        lr_scale: h.lr_scale,
        nan_restarts: h.nan_restarts,
        history: h.history,
    })
}
