//! Versioned text checkpoints.
//!
//! ```text
//! fuse-checkpoint v1
//! [config]
//! d=350
//! ...
//! [mapper]
//! output_norm=sigmoid
//! layers=2
//! layer=0 in=64 out=256
//! weights=<out*in values>
//! bias=<out values>
//! ...
//! [volume]
//! mode=sigmoid
//! raw=<d values>
//! checksum=sha256:<hex digest of every preceding byte>
//! ```
//!
//! Floats are written in Rust's shortest round-trip decimal form, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::algebra::VolumeWeights;
use crate::mapper::{Layer, MapperParams};
use crate::model::{FuseModel, ModelError};
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "fuse-checkpoint";
const CHECKSUM_PREFIX: &str = "checksum=sha256:";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("unsupported checkpoint version '{found}' (expected v{FORMAT_VERSION})")]
    Version { found: String },

    #[error("not a checkpoint file")]
    NotACheckpoint,

    #[error("checkpoint is truncated: missing checksum line")]
    Truncated,

    #[error("checksum mismatch")]
    Checksum,

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    pub mapper: MapperParams,
    pub weights: VolumeWeights,
}

impl ModelCheckpoint {
    pub fn new(config: TrainConfig, model: FuseModel) -> Self {
        Self { config, mapper: model.mapper, weights: model.weights }
    }

    pub fn to_model(&self) -> Result<FuseModel> {
        Ok(FuseModel::new(self.mapper.clone(), self.weights.clone(), self.config.score_options())?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} v{FORMAT_VERSION}\n[config]\n");
        out.push_str(&self.config.to_kv_text());
        let _ = writeln!(out, "[mapper]\noutput_norm={}\nlayers={}", self.mapper.output_norm, self.mapper.layers.len());
        for (i, l) in self.mapper.layers.iter().enumerate() {
            let _ = writeln!(out, "layer={i} in={} out={}", l.in_dim, l.out_dim);
            write_values(&mut out, "weights", &l.weights);
            write_values(&mut out, "bias", &l.bias);
        }
        let _ = writeln!(out, "[volume]\nmode={}", self.weights.mode);
        write_values(&mut out, "raw", &self.weights.raw);
        let digest = sha256_hex(out.as_bytes());
        let _ = writeln!(out, "{CHECKSUM_PREFIX}{digest}");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let first = text.lines().next().ok_or(CheckpointError::NotACheckpoint)?;
        let version = first.strip_prefix(MAGIC).map(str::trim).ok_or(CheckpointError::NotACheckpoint)?;
        if version != format!("v{FORMAT_VERSION}") {
            return Err(CheckpointError::Version { found: version.to_string() });
        }
        let at = text.rfind(CHECKSUM_PREFIX).ok_or(CheckpointError::Truncated)?;
        if at > 0 && text.as_bytes()[at - 1] != b'\n' {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = text.split_at(at);
        let stored = tail[CHECKSUM_PREFIX.len()..].trim_end_matches('\n');
        if stored != sha256_hex(body.as_bytes()) {
            return Err(CheckpointError::Checksum);
        }
        parse_body(body)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_values(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    out.push('=');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.inner.next().ok_or_else(|| malformed("unexpected end of file"))
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got == want {
            Ok(())
        } else {
            Err(malformed(format!("expected '{want}', found '{got}'")))
        }
    }

    fn value(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| malformed(format!("expected '{key}=', found '{line}'")))
    }

    fn floats(&mut self, key: &str, n: usize) -> Result<Vec<f64>> {
        let values = self
            .value(key)?
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| malformed(format!("bad number '{t}' in {key}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != n {
            return Err(malformed(format!("{key}: expected {n} values, found {}", values.len())));
        }
        Ok(values)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| malformed(format!("bad {what} '{s}'")))
}

fn parse_body(body: &str) -> Result<ModelCheckpoint> {
    let mut lines = Lines { inner: body.lines().peekable() };
    lines.next()?; // magic, already checked
    lines.expect("[config]")?;
    let mut config_text = String::new();
    while let Some(&line) = lines.inner.peek() {
        if line.starts_with('[') {
            break;
        }
        config_text.push_str(lines.next()?);
        config_text.push('\n');
    }
    let mut config = TrainConfig::default();
    config.apply_kv_text(&config_text).map_err(|e| malformed(e.to_string()))?;

    lines.expect("[mapper]")?;
    let output_norm = lines.value("output_norm")?.parse().map_err(malformed)?;
    let n_layers: usize = parse_field(lines.value("layers")?, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let header = lines.next()?;
        let mut parts = header.split(' ');
        let (idx, in_dim, out_dim) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c), None) => (
                a.strip_prefix("layer=").ok_or_else(|| malformed(header))?,
                b.strip_prefix("in=").ok_or_else(|| malformed(header))?,
                c.strip_prefix("out=").ok_or_else(|| malformed(header))?,
            ),
            _ => return Err(malformed(format!("bad layer header '{header}'"))),
        };
        if parse_field::<usize>(idx, "layer index")? != i {
            return Err(malformed(format!("layer {i} out of order")));
        }
        let in_dim: usize = parse_field(in_dim, "input dimension")?;
        let out_dim: usize = parse_field(out_dim, "output dimension")?;
        let weights = lines.floats("weights", in_dim * out_dim)?;
        let bias = lines.floats("bias", out_dim)?;
        layers.push(Layer { in_dim, out_dim, weights, bias });
    }
    let mapper = MapperParams { layers, output_norm };

    lines.expect("[volume]")?;
    let mode = lines.value("mode")?.parse().map_err(malformed)?;
    let raw = lines.floats("raw", mapper.output_dim())?;
    if let Some(extra) = lines.inner.next() {
        return Err(malformed(format!("unexpected trailing line '{extra}'")));
    }
    let ckpt = ModelCheckpoint { config, mapper, weights: VolumeWeights::new(raw, mode) };
    ckpt.to_model()?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_text())
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() })?;
    ModelCheckpoint::from_text(&text)
}
