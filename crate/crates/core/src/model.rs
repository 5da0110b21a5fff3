//! Workload descriptions shared by all simulated machines.
//!
//! A network is a JSON document listing FC/CONV layers, optional weight
//! tensor files and per-layer weight quantization parameters. Tensors use a
//! small fixed binary format:
//!
//! ```text
//! "QHT1" | u8 elem_kind | u8 ndims | u32 dims[ndims] | payload
//! ```
//!
//! with every multi-byte field little-endian and `elem_kind` one of
//! `0 = Real16`, `1 = Int8`, `2 = Int16`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::quant::{log2_quantize_ref, QuantActivation, Sign, EXP_MAX, EXP_MIN};
use crate::{Error, Real16, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"QHT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    FC,
    CONV,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ActivationFn {
    #[default]
    None,
    ReLU,
    /// A non-linearity evaluated through a 256-entry table.
    LUT(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pool {
    pub kind: PoolKind,
    pub size: usize,
}

fn one() -> usize {
    1
}

/// Shape and post-processing of one FC or CONV layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub kernel_h: usize,
    #[serde(default = "one")]
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub in_h: usize,
    #[serde(default = "one")]
    pub in_w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub activation_fn: ActivationFn,
    #[serde(default)]
    pub pool: Option<Pool>,
}

impl LayerDescriptor {
    pub fn fc(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        LayerDescriptor {
            name: name.into(),
            kind: LayerKind::FC,
            in_channels,
            out_channels,
            kernel_h: 1,
            kernel_w: 1,
            in_h: 1,
            in_w: 1,
            stride: 1,
            padding: 0,
            activation_fn: ActivationFn::None,
            pool: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        in_hw: (usize, usize),
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerDescriptor {
            name: name.into(),
            kind: LayerKind::CONV,
            in_channels,
            out_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            in_h: in_hw.0,
            in_w: in_hw.1,
            stride,
            padding,
            activation_fn: ActivationFn::None,
            pool: None,
        }
    }

    pub fn with_activation(mut self, f: ActivationFn) -> Self {
        self.activation_fn = f;
        self
    }

    pub fn with_pool(mut self, size: usize) -> Self {
        self.pool = Some(Pool {
            kind: PoolKind::Max,
            size,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Shape(format!("layer {}: {msg}", self.name)));
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("in_h", self.in_h),
            ("in_w", self.in_w),
            ("stride", self.stride),
        ];
        for (field, v) in positive {
            if v == 0 {
                return bad(format!("{field} must be positive"));
            }
        }
        if self.kind == LayerKind::FC {
            let unit = [
                self.kernel_h,
                self.kernel_w,
                self.in_h,
                self.in_w,
                self.stride,
            ];
            if unit.iter().any(|&v| v != 1) || self.padding != 0 {
                return bad(
                    "FC layers need unit kernel, spatial dims and stride, zero padding".into(),
                );
            }
            if self.pool.is_some() {
                return bad("FC layers cannot pool".into());
            }
        }
        if self.in_h + 2 * self.padding < self.kernel_h
            || self.in_w + 2 * self.padding < self.kernel_w
        {
            return bad("kernel larger than padded input".into());
        }
        if let Some(pool) = self.pool {
            let (oh, ow) = self.conv_out_hw();
            if pool.size == 0 || pool.size > oh || pool.size > ow {
                return bad(format!("pool size {} does not fit {oh}x{ow}", pool.size));
            }
        }
        if let ActivationFn::LUT(id) = &self.activation_fn {
            crate::pe::LutFunction::from_id(id)?;
        }
        Ok(())
    }

    /// Spatial size of the convolution output, before pooling.
    pub fn conv_out_hw(&self) -> (usize, usize) {
        let oh = (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1;
        let ow = (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1;
        (oh, ow)
    }

    /// Spatial size after pooling.
    pub fn out_hw(&self) -> (usize, usize) {
        let (oh, ow) = self.conv_out_hw();
        match self.pool {
            Some(p) => (oh / p.size, ow / p.size),
            None => (oh, ow),
        }
    }

    pub fn input_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::FC => vec![self.in_channels],
            LayerKind::CONV => vec![self.in_channels, self.in_h, self.in_w],
        }
    }

    pub fn output_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::FC => vec![self.out_channels],
            LayerKind::CONV => {
                let (h, w) = self.out_hw();
                vec![self.out_channels, h, w]
            }
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::FC => vec![self.out_channels, self.in_channels],
            LayerKind::CONV => vec![
                self.out_channels,
                self.in_channels,
                self.kernel_h,
                self.kernel_w,
            ],
        }
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElemKind {
    Real16,
    Int8,
    Int16,
}

impl ElemKind {
    pub fn code(self) -> u8 {
        match self {
            ElemKind::Real16 => 0,
            ElemKind::Int8 => 1,
            ElemKind::Int16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ElemKind::Real16),
            1 => Ok(ElemKind::Int8),
            2 => Ok(ElemKind::Int16),
            other => Err(Error::Parse(format!("unknown element kind {other}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            ElemKind::Int8 => 1,
            ElemKind::Real16 | ElemKind::Int16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    Real16(Vec<Real16>),
    Int8(Vec<i8>),
    Int16(Vec<i16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Real16(v) => v.len(),
            TensorData::Int8(v) => v.len(),
            TensorData::Int16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ElemKind {
        match self {
            TensorData::Real16(_) => ElemKind::Real16,
            TensorData::Int8(_) => ElemKind::Int8,
            TensorData::Int16(_) => ElemKind::Int16,
        }
    }
}

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!(
                "tensor dims must be positive: {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        if let TensorData::Real16(v) = &data {
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue(format!("0x{:04x}", bad.to_bits())));
            }
        }
        Ok(Tensor { dims, data })
    }

    pub fn real16(dims: Vec<usize>, data: Vec<Real16>) -> Result<Self> {
        Self::new(dims, TensorData::Real16(data))
    }

    pub fn int8(dims: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(dims, TensorData::Int8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn elem_kind(&self) -> ElemKind {
        self.data.kind()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_real16(&self) -> Option<&[Real16]> {
        match &self.data {
            TensorData::Real16(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_int8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::Int8(v) => Some(v),
            _ => None,
        }
    }

    /// Same data under different dims with an equal element count.
    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.len() {
            return Err(Error::DimsMismatch {
                expected: dims,
                found: self.dims,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + self.len() * 2);
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.elem_kind().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::Real16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Int8(v) => out.extend(v.iter().map(|&x| x as u8)),
            TensorData::Int16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Parse(m.to_string());
        if bytes.len() < 6 || &bytes[..4] != TENSOR_MAGIC {
            return Err(err("missing QHT1 header"));
        }
        let kind = ElemKind::from_code(bytes[4])?;
        let ndims = bytes[5] as usize;
        if ndims == 0 {
            return Err(err("tensor has no dims"));
        }
        let header = 6 + 4 * ndims;
        if bytes.len() < header {
            return Err(err("truncated dims"));
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| err("dims overflow"))?;
        let payload = &bytes[header..];
        if payload.len() != count * kind.size_bytes() {
            return Err(Error::Parse(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                count * kind.size_bytes()
            )));
        }
        let data = match kind {
            ElemKind::Real16 => TensorData::Real16(
                payload
                    .chunks_exact(2)
                    .map(|c| Real16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            ElemKind::Int8 => TensorData::Int8(payload.iter().map(|&b| b as i8).collect()),
            ElemKind::Int16 => TensorData::Int16(
                payload
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
        };
        Tensor::new(dims, data).map_err(|e| match e {
            Error::Shape(m) => Error::Parse(m),
            other => other,
        })
    }
}

/// Reads a tensor file, checking its dims when `expected_dims` is given.
pub fn load_tensor(path: &Path, expected_dims: Option<&[usize]>) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensor = Tensor::from_bytes(&bytes)?;
    if let Some(expected) = expected_dims {
        if tensor.dims() != expected {
            return Err(Error::DimsMismatch {
                expected: expected.to_vec(),
                found: tensor.dims().to_vec(),
            });
        }
    }
    Ok(tensor)
}

pub fn store_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    std::fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Weight quantization parameters `(s, z)` of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerQuant {
    pub scale: f64,
    #[serde(default)]
    pub offset: i32,
}

impl Default for LayerQuant {
    fn default() -> Self {
        LayerQuant {
            scale: 1.0 / 256.0,
            offset: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default)]
    name: Option<String>,
    layers: Vec<LayerDescriptor>,
    #[serde(default)]
    weights: BTreeMap<String, PathBuf>,
    #[serde(default)]
    quant: BTreeMap<String, LayerQuant>,
}

/// A validated, shape-chained sequence of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDescriptor {
    pub name: String,
    pub layers: Vec<LayerDescriptor>,
    /// Weight tensor files by layer name; layers without an entry get
    /// synthetic weights.
    pub weight_files: BTreeMap<String, PathBuf>,
    pub quant: BTreeMap<String, LayerQuant>,
}

impl NetworkDescriptor {
    pub fn new(name: impl Into<String>, layers: Vec<LayerDescriptor>) -> Result<Self> {
        let net = NetworkDescriptor {
            name: name.into(),
            layers,
            weight_files: BTreeMap::new(),
            quant: BTreeMap::new(),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for layer in &self.layers {
            layer.validate()?;
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Shape(format!("duplicate layer name {}", layer.name)));
            }
        }
        for pair in self.layers.windows(2) {
            check_chain(&pair[0], &pair[1])?;
        }
        for key in self.weight_files.keys().chain(self.quant.keys()) {
            if !names.contains(key.as_str()) {
                return Err(Error::Parse(format!("entry for unknown layer {key}")));
            }
        }
        for (layer, q) in &self.quant {
            if !(q.scale.is_finite() && q.scale > 0.0) {
                return Err(Error::Parse(format!(
                    "layer {layer}: scale must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn quant_for(&self, layer: &str) -> LayerQuant {
        self.quant.get(layer).copied().unwrap_or_default()
    }

    /// Weights of layer `index`: the referenced tensor file, or uniform
    /// random INT8 values derived from `seed` when none is given.
    pub fn weights_for(&self, index: usize, seed: u64) -> Result<Tensor> {
        let layer = &self.layers[index];
        let dims = layer.weight_dims();
        match self.weight_files.get(&layer.name) {
            Some(path) => {
                let t = load_tensor(path, Some(&dims))?;
                if t.elem_kind() != ElemKind::Int8 {
                    return Err(Error::Parse(format!(
                        "weights of {} must be Int8",
                        layer.name
                    )));
                }
                Ok(t)
            }
            None => Ok(synth_weights(layer, seed.wrapping_add(index as u64))),
        }
    }
}

fn check_chain(a: &LayerDescriptor, b: &LayerDescriptor) -> Result<()> {
    let out = a.output_dims();
    let ok = match b.kind {
        LayerKind::FC => b.in_channels == out.iter().product::<usize>(),
        LayerKind::CONV => out == b.input_dims(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "layer {} produces {:?} but layer {} expects {:?}",
            a.name,
            out,
            b.name,
            b.input_dims()
        )))
    }
}

/// Loads and validates a network descriptor. Weight paths are resolved
/// relative to the descriptor's directory.
pub fn load_network(path: &Path) -> Result<NetworkDescriptor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: NetworkFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let weight_files: BTreeMap<String, PathBuf> = file
        .weights
        .into_iter()
        .map(|(k, p)| (k, if p.is_absolute() { p } else { base.join(p) }))
        .collect();
    let name = file.name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let net = NetworkDescriptor {
        name,
        layers: file.layers,
        weight_files,
        quant: file.quant,
    };
    net.validate()?;
    for (layer, p) in &net.weight_files {
        if !p.is_file() {
            return Err(Error::MissingTensor {
                layer: layer.clone(),
                path: p.clone(),
            });
        }
    }
    Ok(net)
}

/// Deterministic uniform INT8 weights in `[-127, 127]`.
pub fn synth_weights(layer: &LayerDescriptor, seed: u64) -> Tensor {
    let dims = layer.weight_dims();
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| rng.gen_range(-127i8..=127)).collect();
    Tensor::int8(dims, data).expect("dims are positive")
}

/// A bin of the LOG2 exponent histogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpBin {
    Exp(i8),
    Zero,
}

impl ExpBin {
    /// Every bin in display order: `-8 ..= 7`, then `zero`.
    pub fn all() -> impl Iterator<Item = ExpBin> {
        (EXP_MIN..=EXP_MAX)
            .map(ExpBin::Exp)
            .chain(std::iter::once(ExpBin::Zero))
    }

    pub fn parse(key: &str) -> Result<Self> {
        if key == "zero" {
            return Ok(ExpBin::Zero);
        }
        match key.parse::<i8>() {
            Ok(e) if (EXP_MIN..=EXP_MAX).contains(&e) => Ok(ExpBin::Exp(e)),
            _ => Err(Error::Parse(format!("bad exponent bin {key:?}"))),
        }
    }
}

impl fmt::Display for ExpBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpBin::Exp(e) => write!(f, "{e}"),
            ExpBin::Zero => f.write_str("zero"),
        }
    }
}

/// Relative masses over exponent bins, as read from a distribution file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExpDistribution {
    masses: BTreeMap<ExpBin, f64>,
}

impl ExpDistribution {
    pub fn from_masses(masses: impl IntoIterator<Item = (ExpBin, f64)>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (bin, m) in masses {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Parse(format!(
                    "bin {bin}: mass must be non-negative, got {m}"
                )));
            }
            *out.entry(bin).or_insert(0.0) += m;
        }
        Ok(ExpDistribution { masses: out })
    }

    /// All mass on one exponent.
    pub fn single(exp: i8) -> Self {
        ExpDistribution {
            masses: BTreeMap::from([(ExpBin::Exp(exp), 1.0)]),
        }
    }

    /// Parses the JSON map `{"-3": 0.3, "zero": 0.1, ...}`. Keys starting
    /// with `_` carry metadata and are ignored.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut masses = Vec::new();
        for (key, value) in raw {
            if key.starts_with('_') {
                continue;
            }
            let bin = ExpBin::parse(&key)?;
            let mass = value
                .as_f64()
                .ok_or_else(|| Error::Parse(format!("bin {key}: mass must be a number")))?;
            masses.push((bin, mass));
        }
        Self::from_masses(masses)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn mass(&self, bin: ExpBin) -> f64 {
        self.masses.get(&bin).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.masses.values().sum()
    }

    /// Integer counts per bin summing to `count`, by largest remainder.
    /// Each bin is within one of its exact proportional share.
    pub fn quotas(&self, count: usize) -> Result<Vec<(ExpBin, usize)>> {
        let total = self.total();
        if total <= 0.0 {
            return Err(Error::EmptyDistribution);
        }
        let mut quotas: Vec<(ExpBin, usize, f64)> = self
            .masses
            .iter()
            .filter(|(_, &m)| m > 0.0)
            .map(|(&bin, &m)| {
                let exact = count as f64 * m / total;
                (bin, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = quotas.iter().map(|q| q.1).sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        // stable sort keeps bin order among equal remainders
        order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2));
        for &i in order.iter().take(count.saturating_sub(assigned)) {
            quotas[i].1 += 1;
        }
        Ok(quotas.into_iter().map(|(b, n, _)| (b, n)).collect())
    }
}

/// Real16 activations whose LOG2-quantized exponents follow `dist`.
///
/// Bin sizes come from [`ExpDistribution::quotas`]. A value for exponent `e`
/// is drawn uniformly from `[2^(e-1/2), 2^(e+1/2))`, the interval that rounds
/// to `e`. The order is shuffled with a seeded ChaCha8 stream, so output is a
/// pure function of `(dist, count, seed)`.
pub fn synth_activations(dist: &ExpDistribution, count: usize, seed: u64) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Shape("activation count must be positive".into()));
    }
    let quotas = dist.quotas(count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(count);
    for (bin, n) in quotas {
        for _ in 0..n {
            values.push(match bin {
                ExpBin::Zero => Real16::ZERO,
                ExpBin::Exp(e) => sample_exponent(e, &mut rng),
            });
        }
    }
    values.shuffle(&mut rng);
    Tensor::real16(vec![count], values)
}

fn sample_exponent(exp: i8, rng: &mut ChaCha8Rng) -> Real16 {
    let target = QuantActivation::new(Sign::Pos, exp as i32);
    let lo = (exp as f64 - 0.5).exp2();
    let hi = (exp as f64 + 0.5).exp2();
    for _ in 0..16 {
        let x = Real16::from_f64(rng.gen_range(lo..hi));
        // binary16 rounding can land just past the upper bound
        if log2_quantize_ref(x.to_f64()).ok() == Some(target) {
            return x;
        }
    }
    Real16::from_f64((exp as f64).exp2())
}
