//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `LRLM` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `H` (`u64`) |
//! | H | UTF-8 JSON header |
//! | .. | zero padding to a multiple of 64 |
//! | .. | payload |
//!
//! Tensor offsets in the header are relative to the payload start and are
//! multiples of 64. Quantized tensors (`u8q`, `u4q`) store packed codes and
//! are accompanied by `<name>.scale` and `<name>.offset` entries in `f32`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use half::f16;
use lrlm_core::lowrank::{BlendLayer, LoraAdapter, LoraBase, LowRankFactors};
use lrlm_core::transformer::{LayerKind, Linear, ModelConfig};
use lrlm_core::{LayerSpecs, Model, QuantizedMatrix, TensorGrid};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"LRLM";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
const PREAMBLE: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    U8q,
    U4q,
}

impl Dtype {
    fn quant_bits(self) -> Option<u8> {
        match self {
            Dtype::U8q => Some(8),
            Dtype::U4q => Some(4),
            _ => None,
        }
    }

    /// Payload bytes for a `rows × cols` tensor.
    pub fn byte_len(self, rows: usize, cols: usize) -> u64 {
        let (rows, cols) = (rows as u64, cols as u64);
        match self {
            Dtype::F32 => 4 * rows * cols,
            Dtype::F16 => 2 * rows * cols,
            Dtype::U8q => rows * cols,
            Dtype::U4q => rows * cols.div_ceil(2),
        }
    }
}

/// Storage format for float tensors on save.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FloatFormat {
    #[default]
    F32,
    F16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: [usize; 2],
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model_config: ModelConfig,
    pub layer_specs: LayerSpecs,
    #[serde(default)]
    pub frozen: BTreeSet<String>,
    /// Current α of each blend layer.
    #[serde(default)]
    pub blend_alpha: BTreeMap<String, f64>,
    #[serde(default)]
    pub merged_adapters: BTreeSet<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Header {
    /// Sum of tensor payload lengths, padding excluded.
    pub fn tensor_bytes(&self) -> u64 {
        self.tensors.values().map(|e| e.length).sum()
    }
}

fn align(n: u64) -> u64 {
    n.div_ceil(ALIGN) * ALIGN
}

struct Writer {
    tensors: BTreeMap<String, TensorEntry>,
    blobs: Vec<(String, Vec<u8>)>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: Dtype, shape: [usize; 2], bytes: Vec<u8>) {
        let entry = TensorEntry {
            dtype,
            shape,
            offset: 0,
            length: bytes.len() as u64,
        };
        self.tensors.insert(name.clone(), entry);
        self.blobs.push((name, bytes));
    }

    fn float(&mut self, name: String, t: &TensorGrid<f32>, fmt: FloatFormat) {
        let bytes = match fmt {
            FloatFormat::F32 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            FloatFormat::F16 => t.data().iter().flat_map(|v| f16::from_f32(*v).to_le_bytes()).collect(),
        };
        let dtype = match fmt {
            FloatFormat::F32 => Dtype::F32,
            FloatFormat::F16 => Dtype::F16,
        };
        self.push(name, dtype, [t.rows(), t.cols()], bytes);
    }

    fn quantized(&mut self, name: String, q: &QuantizedMatrix) {
        let dtype = if q.bits() == 8 { Dtype::U8q } else { Dtype::U4q };
        let rows = q.rows();
        let f32s = |v: &[f32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        self.push(format!("{name}.scale"), Dtype::F32, [rows, 1], f32s(q.scale()));
        self.push(format!("{name}.offset"), Dtype::F32, [rows, 1], f32s(q.offset()));
        self.push(name, dtype, [rows, q.cols()], q.codes().to_vec());
    }
}

/// Serializes `model`. Float tensors use `fmt`; quantized matrices keep
/// their codes.
pub fn to_bytes(model: &Model, fmt: FloatFormat) -> Result<Vec<u8>> {
    let mut w = Writer {
        tensors: BTreeMap::new(),
        blobs: Vec::new(),
    };
    for p in model.params() {
        w.float(p.name, p.tensor, fmt);
    }
    let mut blend_alpha = BTreeMap::new();
    let mut merged = BTreeSet::new();
    for (id, lin) in model.linears() {
        match lin {
            Linear::Quantized(q) => w.quantized(format!("{id}.weight"), q),
            Linear::Lora(a) => {
                if let LoraBase::Quantized(q) = a.base() {
                    w.quantized(format!("{id}.base"), q);
                }
                if a.is_merged() {
                    merged.insert(id.to_string());
                }
            }
            Linear::Blend(b) => {
                blend_alpha.insert(id.to_string(), b.alpha());
            }
            Linear::Dense(_) | Linear::LowRank(_) => {}
        }
    }
    // Offsets follow name order so the layout is canonical.
    let mut cursor = 0;
    for entry in w.tensors.values_mut() {
        entry.offset = cursor;
        cursor = align(cursor + entry.length);
    }
    let header = Header {
        model_config: model.config().clone(),
        layer_specs: model.specs().clone(),
        frozen: model.frozen().clone(),
        blend_alpha,
        merged_adapters: merged,
        tensors: w.tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CliError::Config(format!("header encoding: {e}")))?;
    let payload_start = align(PREAMBLE + json.len() as u64);
    let mut out = Vec::with_capacity((payload_start + cursor) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start as usize, 0);
    w.blobs.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, bytes) in &w.blobs {
        let entry = &header.tensors[name];
        out.resize((payload_start + entry.offset) as usize, 0);
        out.extend_from_slice(bytes);
    }
    out.resize((payload_start + cursor) as usize, 0);
    Ok(out)
}

/// Writes through a temporary file so a failed save never leaves a
/// half-written checkpoint behind.
pub fn save(model: &Model, path: &Path, fmt: FloatFormat) -> Result<Header> {
    let bytes = to_bytes(model, fmt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    let (header, _) = parse_header(&bytes).map_err(|d| bad(path, d))?;
    Ok(header)
}

pub fn load(path: &Path) -> Result<(Model, Header)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        CliError::Checkpoint { detail, .. } => bad(path, detail),
        other => other,
    })
}

fn bad(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Header and payload start, with every structural check applied.
pub fn parse_header(bytes: &[u8]) -> std::result::Result<(Header, u64), String> {
    if bytes.len() < PREAMBLE as usize || &bytes[..4] != MAGIC {
        return Err("not an LRLM checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}; this build reads version {VERSION}"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or("truncated header")?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE as usize..header_end as usize])
        .map_err(|e| format!("corrupt header: {e}"))?;
    let payload_start = align(header_end);
    let payload_len = (bytes.len() as u64).saturating_sub(payload_start);

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for (name, e) in &header.tensors {
        let [rows, cols] = e.shape;
        if e.length != e.dtype.byte_len(rows, cols) {
            return Err(format!("{name}: {} bytes do not match {:?} {rows}x{cols}", e.length, e.dtype));
        }
        if e.offset % ALIGN != 0 {
            return Err(format!("{name}: offset {} is not {ALIGN}-byte aligned", e.offset));
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| format!("{name}: offset overflow"))?;
        if end > payload_len {
            return Err(format!("truncated payload: {name} ends at {end}, payload has {payload_len} bytes"));
        }
        if e.dtype.quant_bits().is_some() {
            for part in ["scale", "offset"] {
                let companion = header.tensors.get(&format!("{name}.{part}"));
                if !matches!(companion, Some(c) if c.dtype == Dtype::F32 && c.shape == [rows, 1]) {
                    return Err(format!("{name}: missing or malformed .{part} companion"));
                }
            }
        }
        spans.push((e.offset, end, name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(format!("tensors {} and {} overlap", pair[0].2, pair[1].2));
        }
    }
    Ok((header, payload_start))
}

struct Reader<'a> {
    header: &'a Header,
    payload: &'a [u8],
    used: BTreeSet<String>,
}

impl Reader<'_> {
    fn entry(&mut self, name: &str) -> std::result::Result<&TensorEntry, String> {
        let e = self.header.tensors.get(name).ok_or_else(|| format!("missing tensor {name}"))?;
        self.used.insert(name.to_string());
        Ok(e)
    }

    fn bytes(&self, e: &TensorEntry) -> &[u8] {
        &self.payload[e.offset as usize..(e.offset + e.length) as usize]
    }

    fn float(&mut self, name: &str) -> std::result::Result<TensorGrid<f32>, String> {
        let e = self.entry(name)?.clone();
        let raw = self.bytes(&e);
        let data: Vec<f32> = match e.dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().expect("2")).to_f32())
                .collect(),
            other => return Err(format!("{name}: expected a float tensor, found {other:?}")),
        };
        TensorGrid::new(e.shape[0], e.shape[1], data).map_err(|err| format!("{name}: {err}"))
    }

    fn is_quantized(&self, name: &str) -> bool {
        self.header.tensors.get(name).is_some_and(|e| e.dtype.quant_bits().is_some())
    }

    fn quantized(&mut self, name: &str) -> std::result::Result<QuantizedMatrix, String> {
        let e = self.entry(name)?.clone();
        let bits = e.dtype.quant_bits().ok_or_else(|| format!("{name}: expected codes, found {:?}", e.dtype))?;
        let codes = self.bytes(&e).to_vec();
        let scale = self.float(&format!("{name}.scale"))?.into_data();
        let offset = self.float(&format!("{name}.offset"))?.into_data();
        QuantizedMatrix::from_parts(e.shape[0], e.shape[1], bits, codes, scale, offset).map_err(|err| format!("{name}: {err}"))
    }

    fn factors(&mut self, id: &str) -> std::result::Result<LowRankFactors, String> {
        let down = self.float(&format!("{id}.down"))?;
        let up = self.float(&format!("{id}.up"))?;
        LowRankFactors::new(down, up).map_err(|e| format!("{id}: {e}"))
    }
}

/// Rebuilds a model; any inconsistency is an error and no partial model
/// is returned.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Header)> {
    let fail = |d: String| CliError::Checkpoint {
        path: "<memory>".into(),
        detail: d,
    };
    let (header, payload_start) = parse_header(bytes).map_err(fail)?;
    let mut model: Model = Model::new(header.model_config.clone(), header.layer_specs.clone(), 0)?;
    let mut r = Reader {
        header: &header,
        payload: &bytes[payload_start as usize..],
        used: BTreeSet::new(),
    };
    let ids: Vec<_> = model.linears().into_iter().map(|(id, _)| id).collect();
    for id in ids {
        let key = id.to_string();
        let built = match header.layer_specs.kind(id.matrix) {
            LayerKind::Dense => Linear::Dense(r.float(&format!("{key}.weight")).map_err(fail)?),
            LayerKind::Lowrank { .. } => Linear::LowRank(r.factors(&key).map_err(fail)?),
            LayerKind::Quantized { .. } => Linear::Quantized(r.quantized(&format!("{key}.weight")).map_err(fail)?),
            LayerKind::Lora { .. } => {
                let base_name = format!("{key}.base");
                let base = if r.is_quantized(&base_name) {
                    LoraBase::Quantized(r.quantized(&base_name).map_err(fail)?)
                } else {
                    LoraBase::Dense(r.float(&base_name).map_err(fail)?)
                };
                let delta = r.factors(&key).map_err(fail)?;
                Linear::Lora(LoraAdapter::from_parts(base, delta, header.merged_adapters.contains(&key))?)
            }
            LayerKind::Blend { schedule, .. } => {
                let base = r.float(&format!("{key}.base")).map_err(fail)?;
                let mut b = BlendLayer::new(base, r.factors(&key).map_err(fail)?, schedule)?;
                let alpha = header
                    .blend_alpha
                    .get(&key)
                    .ok_or_else(|| fail(format!("{key}: missing blend weight")))?;
                b.set_alpha(*alpha)?;
                Linear::Blend(b)
            }
        };
        if built.shape() != model.linear(id).shape() {
            return Err(fail(format!("{key}: shape {:?} does not match the config", built.shape())));
        }
        *model.linear_mut(id) = built;
    }
    let norms: Vec<String> = model
        .params()
        .into_iter()
        .map(|p| p.name)
        .filter(|n| n.ends_with("_norm"))
        .collect();
    for name in norms {
        let t = r.float(&name).map_err(fail)?;
        let slot = model.param_mut(&name).expect("listed by params");
        if slot.shape() != t.shape() {
            return Err(fail(format!("{name}: shape {:?} does not match the config", t.shape())));
        }
        *slot = t;
    }
    if let Some(extra) = header.tensors.keys().find(|k| !r.used.contains(*k)) {
        return Err(fail(format!("unexpected tensor {extra}")));
    }
    for name in &header.frozen {
        model.freeze(name.clone());
    }
    Ok((model, header))
}
