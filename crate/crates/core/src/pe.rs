//! Processing element: Decode-&-Shift, the ADD array and the SFU.
//!
//! A weight multiplied by `2^e` is produced without a multiplier. For
//! `e >= 0` the full INT8 weight is sign-extended and shifted left. For
//! `e < 0` only the top `8 - |e|` bits were fetched, and sign-extending that
//! slice is exactly the arithmetic right shift `w >> |e|` (floor semantics).

use serde::{Deserialize, Serialize};

use crate::mem3d::{AccessCounters, MemGeometry, WEIGHT_BITS};
use crate::model::{ActivationFn, LayerDescriptor, Tensor};
use crate::quant::{dequantize_output, Sign};
use crate::{Error, Real16, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeConfig {
    pub ib_bytes: usize,
    pub ob_bytes: usize,
    pub wb_bytes: usize,
    /// Adders in the ADD array (`d`); also the MAC count of the baseline.
    pub num_adders: usize,
    pub double_buffered: bool,
    /// 16-bit words the NoC delivers to one PE per cycle.
    pub noc_words_per_cycle: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            ib_bytes: 64,
            ob_bytes: 2048,
            wb_bytes: 64,
            num_adders: 16,
            double_buffered: true,
            noc_words_per_cycle: 8,
        }
    }
}

impl PeConfig {
    fn half(&self, bytes: usize) -> usize {
        if self.double_buffered {
            bytes / 2
        } else {
            bytes
        }
    }

    /// Usable IB bytes per buffer half.
    pub fn ib_half(&self) -> usize {
        self.half(self.ib_bytes)
    }

    pub fn ob_half(&self) -> usize {
        self.half(self.ob_bytes)
    }

    pub fn wb_half(&self) -> usize {
        self.half(self.wb_bytes)
    }

    pub fn validate(&self, geometry: &MemGeometry) -> Result<()> {
        if self.num_adders == 0 || self.noc_words_per_cycle == 0 {
            return Err(Error::InvalidConfig(
                "pe: num_adders and noc_words_per_cycle must be positive".into(),
            ));
        }
        if self.ib_half() < 2 || self.ob_half() < 2 {
            return Err(Error::InvalidConfig(
                "pe: IB and OB must hold at least one value".into(),
            ));
        }
        // worst case: all 8 planes of M weights
        let group_bytes = geometry.bus_bits * WEIGHT_BITS as usize / 8;
        if self.wb_half() < group_bytes {
            return Err(Error::InvalidConfig(format!(
                "pe: WB half of {} bytes cannot hold a {group_bytes}-byte weight group",
                self.wb_half()
            )));
        }
        Ok(())
    }
}

/// The top `len` bits of an INT8 weight, right-aligned in `bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct MsbSlice {
    bits: u8,
    len: u8,
}

impl MsbSlice {
    pub fn new(bits: u8, len: u8) -> Self {
        let len = len.min(8);
        let mask = if len == 8 { 0xff } else { (1u8 << len) - 1 };
        MsbSlice {
            bits: bits & mask,
            len,
        }
    }

    /// The slice a bit-plane fetch would return for `w` when `len` bits are read.
    pub fn of_weight(w: i8, len: u8) -> Self {
        let len = len.min(8);
        MsbSlice::new(((w as u8) as u16 >> (8 - len)) as u8, len)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Keeps only the top `len` bits of this slice.
    pub fn top(&self, len: u8) -> Self {
        let len = len.min(self.len);
        MsbSlice::new(self.bits >> (self.len - len), len)
    }

    fn sign_extended(&self) -> i16 {
        if self.len == 0 {
            return 0;
        }
        let shift = 16 - self.len as u32;
        ((self.bits as i16) << shift) >> shift
    }
}

/// Slice width needed for exponent `exp`.
pub fn slice_len_for(exp: i8) -> u8 {
    WEIGHT_BITS as u8 - crate::analysis::skipped_bits(exp).min(WEIGHT_BITS) as u8
}

/// Reconstructs `w * 2^exp` (floor for negative `exp`) from a fetched slice.
pub fn decode_and_shift(slice: MsbSlice, exp: i8) -> Result<i16> {
    let expected = slice_len_for(exp);
    if !(-7..=7).contains(&exp) || slice.len != expected {
        return Err(Error::SliceLengthMismatch {
            exp,
            expected,
            found: slice.len,
        });
    }
    let v = slice.sign_extended();
    Ok(if exp >= 0 { v << exp } else { v })
}

/// A 16-bit partial output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartialOutput {
    pub value: i16,
    pub saturated: bool,
}

/// Adds or subtracts `shifted` according to the activation sign, saturating
/// at the int16 bounds.
pub fn accumulate(
    out: PartialOutput,
    shifted: i16,
    sign: Sign,
    counters: &mut AccessCounters,
) -> PartialOutput {
    counters.adds += 1;
    let exact = match sign {
        Sign::Pos => out.value as i32 + shifted as i32,
        Sign::Neg => out.value as i32 - shifted as i32,
    };
    let value = exact.clamp(i16::MIN as i32, i16::MAX as i32) as i16;
    let hit = value as i32 != exact;
    if hit {
        counters.saturations += 1;
    }
    PartialOutput {
        value,
        saturated: out.saturated || hit,
    }
}

/// Non-linearities available through the SFU tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LutFunction {
    Sigmoid,
    Tanh,
}

impl LutFunction {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "sigmoid" => Ok(LutFunction::Sigmoid),
            "tanh" => Ok(LutFunction::Tanh),
            other => Err(Error::UnknownTableId(other.to_string())),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            LutFunction::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            LutFunction::Tanh => x.tanh(),
        }
    }
}

/// 256-entry table indexed by the top 8 bits of the binary16 encoding
/// (sign, exponent and the two leading fraction bits). Each entry holds the
/// function at the midpoint of its bucket.
#[derive(Clone, Debug)]
pub struct Lut {
    table: Vec<Real16>,
}

impl Lut {
    pub fn build(f: LutFunction) -> Self {
        let table = (0u16..256)
            .map(|i| {
                let lo = Real16::from_bits(i << 8).to_f64();
                let hi = Real16::from_bits((i << 8) | 0xff).to_f64();
                let mid = if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else {
                    // Inf/NaN encodings: saturate toward the signed maximum
                    lo.signum() * Real16::MAX.to_f64()
                };
                Real16::from_f64(f.eval(mid))
            })
            .collect();
        Lut { table }
    }

    pub fn lookup(&self, x: Real16) -> Real16 {
        self.table[(x.to_bits() >> 8) as usize]
    }
}

/// De-quantizes a layer's final accumulators, applies its activation and
/// pooling. `outs` holds `OC * OH * OW` values before pooling.
pub fn sfu_apply(outs: &[i16], layer: &LayerDescriptor, weight_scale: f64) -> Result<Tensor> {
    sfu_finish(
        outs.iter()
            .map(|&acc| dequantize_output(acc, weight_scale))
            .collect(),
        layer,
    )
}

/// Applies a layer's activation and pooling to already de-quantized outputs.
pub fn sfu_finish(values: Vec<Real16>, layer: &LayerDescriptor) -> Result<Tensor> {
    let (oh, ow) = layer.conv_out_hw();
    let oc = layer.out_channels;
    if values.len() != oc * oh * ow {
        return Err(Error::Shape(format!(
            "layer {}: SFU got {} outputs, expected {}",
            layer.name,
            values.len(),
            oc * oh * ow
        )));
    }
    let lut = match &layer.activation_fn {
        ActivationFn::LUT(id) => Some(Lut::build(LutFunction::from_id(id)?)),
        _ => None,
    };
    let activated: Vec<Real16> = values
        .into_iter()
        .map(|x| match (&layer.activation_fn, &lut) {
            (ActivationFn::ReLU, _) if x < Real16::ZERO => Real16::ZERO,
            (ActivationFn::LUT(_), Some(t)) => t.lookup(x),
            _ => x,
        })
        .collect();
    let data = match layer.pool {
        None => activated,
        Some(pool) => {
            let (ph, pw) = (oh / pool.size, ow / pool.size);
            let mut pooled = Vec::with_capacity(oc * ph * pw);
            for c in 0..oc {
                for py in 0..ph {
                    for px in 0..pw {
                        let mut best = Real16::NEG_INFINITY;
                        for dy in 0..pool.size {
                            for dx in 0..pool.size {
                                let v = activated
                                    [(c * oh + py * pool.size + dy) * ow + px * pool.size + dx];
                                best = best.max(v);
                            }
                        }
                        pooled.push(best);
                    }
                }
            }
            pooled
        }
    };
    Tensor::real16(layer.output_dims(), data)
}

/// Occupancy of one on-chip buffer half.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferTracker {
    name: &'static str,
    capacity: usize,
    resident: usize,
    peak: usize,
}

impl BufferTracker {
    pub fn new(name: &'static str, capacity: usize) -> Self {
        BufferTracker {
            name,
            capacity,
            resident: 0,
            peak: 0,
        }
    }

    pub fn fill(&mut self, bytes: usize) -> Result<()> {
        if self.resident + bytes > self.capacity {
            return Err(Error::BufferOverflow(format!(
                "{} needs {} bytes, capacity {}",
                self.name,
                self.resident + bytes,
                self.capacity
            )));
        }
        self.resident += bytes;
        self.peak = self.peak.max(self.resident);
        Ok(())
    }

    pub fn drain(&mut self, bytes: usize) {
        self.resident = self.resident.saturating_sub(bytes);
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}
