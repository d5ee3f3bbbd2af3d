//! Bit-stable file formats: the `MOIR` tensor dump, dataset directories,
//! model JSON and fixed-precision CSV.
//!
//! Tensor dump layout (all integers little-endian):
//!
//! ```text
//! b"MOIR" | u32 version = 1 | u8 dtype (0 = f64) | u8 ndim | ndim x u64 dims | payload
//! ```
//!
//! The payload is the row-major `f64` data, little-endian.

use std::fs;
use std::path::Path;

use crate::error::{MoirError, Result};
use crate::synth::{Instance, SyntheticData};
use crate::tokens::{Modality, TokenSequence};

pub const MAGIC: &[u8; 4] = b"MOIR";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

/// A dense `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > usize::from(u8::MAX) || n != data.len() {
            return Err(MoirError::Format(format!(
                "shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tokens(t: &TokenSequence) -> Self {
        let (b, l, d) = t.shape();
        Self {
            shape: vec![b, l, d],
            data: t.values().to_vec(),
        }
    }

    /// Interprets a rank-3 tensor as `B x L x D` tokens, or a rank-2 tensor
    /// as a single batch entry of `L x D` tokens.
    pub fn to_tokens(&self, modality: Modality) -> Result<TokenSequence> {
        let (b, l, d) = match self.shape[..] {
            [b, l, d] => (b, l, d),
            [l, d] => (1, l, d),
            _ => {
                return Err(MoirError::Format(format!(
                    "expected a rank-2 or rank-3 tensor, got shape {:?}",
                    self.shape
                )))
            }
        };
        TokenSequence::new(b, l, d, self.data.clone(), modality)
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.shape.len() + 8 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| MoirError::Format(msg.to_string());
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(bad("missing MOIR magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(MoirError::Format(format!("unsupported version {version}")));
    }
    if bytes[8] != DTYPE_F64 {
        return Err(MoirError::Format(format!("unsupported dtype code {}", bytes[8])));
    }
    let ndim = usize::from(bytes[9]);
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated shape header"));
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != count.checked_mul(8).ok_or_else(|| bad("shape overflows"))? {
        return Err(MoirError::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| MoirError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| MoirError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MoirError::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?)
}

fn split_tensors(items: &[Instance]) -> Result<[Tensor; 4]> {
    let first = items
        .first()
        .ok_or_else(|| MoirError::input("cannot write an empty split"))?;
    let n = items.len();
    let (_, la, d) = first.tokens_a.shape();
    let lb = first.tokens_b.tokens();
    let mut a = Vec::with_capacity(n * la * d);
    let mut b = Vec::with_capacity(n * lb * d);
    let mut q = Vec::with_capacity(n * d);
    let mut meta = Vec::with_capacity(n * 2);
    for inst in items {
        a.extend_from_slice(inst.tokens_a.values());
        b.extend_from_slice(inst.tokens_b.values());
        q.extend_from_slice(&inst.question);
        meta.push(inst.label as f64);
        meta.push(if inst.dependent_on_a { 1.0 } else { 0.0 });
    }
    Ok([
        Tensor::new(vec![n, la, d], a)?,
        Tensor::new(vec![n, lb, d], b)?,
        Tensor::new(vec![n, d], q)?,
        Tensor::new(vec![n, 2], meta)?,
    ])
}

const SPLIT_FILES: [&str; 4] = ["a", "b", "questions", "meta"];

/// Writes a dataset as tensor dumps: `{train,test}_{a,b,questions,meta}.moir`
/// plus `informative_{a,b}.moir`. The meta tensor is `N x 2` holding the
/// label and the A-dependence flag (0 or 1).
pub fn write_dataset(dir: &Path, data: &SyntheticData) -> Result<Vec<String>> {
    let mut written = Vec::new();
    for (split, items) in [("train", &data.train), ("test", &data.test)] {
        for (name, t) in SPLIT_FILES.iter().zip(split_tensors(items)?) {
            let file = format!("{split}_{name}.moir");
            write_tensor(&dir.join(&file), &t)?;
            written.push(file);
        }
    }
    for (name, chans) in [("a", &data.informative_a), ("b", &data.informative_b)] {
        let file = format!("informative_{name}.moir");
        let t = Tensor {
            shape: vec![chans.len()],
            data: chans.iter().map(|&c| c as f64).collect(),
        };
        write_tensor(&dir.join(&file), &t)?;
        written.push(file);
    }
    Ok(written)
}

fn read_split(dir: &Path, split: &str) -> Result<Vec<Instance>> {
    let load = |name: &str| read_tensor(&dir.join(format!("{split}_{name}.moir")));
    let (a, b, q, meta) = (load("a")?, load("b")?, load("questions")?, load("meta")?);
    let n = meta.shape[0];
    let shape_ok = a.shape.len() == 3
        && b.shape.len() == 3
        && q.shape.len() == 2
        && meta.shape == [n, 2]
        && a.shape[0] == n
        && b.shape[0] == n
        && q.shape[0] == n
        && a.shape[2] == b.shape[2]
        && q.shape[1] == a.shape[2];
    if !shape_ok {
        return Err(MoirError::Format(format!("inconsistent {split} tensors")));
    }
    let (la, lb, d) = (a.shape[1], b.shape[1], a.shape[2]);
    (0..n)
        .map(|i| {
            let label = meta.data[2 * i];
            if label < 0.0 || label.fract() != 0.0 {
                return Err(MoirError::Format(format!("bad label {label}")));
            }
            Ok(Instance {
                tokens_a: TokenSequence::new(1, la, d, a.data[i * la * d..(i + 1) * la * d].to_vec(), Modality::A)?,
                tokens_b: TokenSequence::new(1, lb, d, b.data[i * lb * d..(i + 1) * lb * d].to_vec(), Modality::B)?,
                question: q.data[i * d..(i + 1) * d].to_vec(),
                label: label as usize,
                dependent_on_a: meta.data[2 * i + 1] != 0.0,
            })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticData> {
    let chans = |name: &str| -> Result<Vec<usize>> {
        Ok(read_tensor(&dir.join(format!("informative_{name}.moir")))?
            .data
            .iter()
            .map(|&c| c as usize)
            .collect())
    };
    Ok(SyntheticData {
        train: read_split(dir, "train")?,
        test: read_split(dir, "test")?,
        informative_a: chans("a")?,
        informative_b: chans("b")?,
    })
}

/// Formats a value with six significant digits, `%g` style.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    // Round first so the exponent reflects the rounded value (9.999995 -> 10).
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Renders a CSV table with a fixed header; every cell is already a string.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| MoirError::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| MoirError::Format(e.to_string()))
}
