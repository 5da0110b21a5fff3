//! Weight and activation quantizers.
//!
//! Weights use uniform INT8 quantization, `Q(r) = round(r / s) - z`.
//! Activations use a LOG2 quantizer: a non-zero `x` becomes `sign(x) * 2^e`
//! with `e = clip(round(log2|x|), -8, 7)`. The bottom of the exponent range is
//! reserved for zero, so anything that clips to `-8` is pruned.
//!
//! Two LOG2 paths exist. [`log2_quantize_ref`] evaluates the formula with
//! `f64` arithmetic. [`log2_quantize_hw`] mirrors the PE datapath: it reads
//! the unbiased exponent straight out of the binary16 encoding and adds one
//! when the 10-bit fraction reaches [`SQRT2_FRACTION_THRESHOLD`]. The two
//! agree on every finite binary16 value.

use serde::{Deserialize, Serialize};

use crate::{Error, Real16, Result};

/// Width of the activation exponent field.
pub const EXP_BITS: u32 = 4;
/// Smallest exponent; doubles as the zero code.
pub const EXP_MIN: i8 = -(1 << (EXP_BITS - 1));
/// Largest exponent.
pub const EXP_MAX: i8 = (1 << (EXP_BITS - 1)) - 1;

/// Smallest 10-bit fraction `f` with `1 + f/1024 >= sqrt(2)`.
///
/// `ceil((sqrt(2) - 1) * 1024) = 425`. The nearest binary16 encoding of
/// `sqrt(2)` has fraction 424, but `log2(1 + 424/1024) = 0.49995` still rounds
/// down, so 424 would misclassify that mantissa.
pub const SQRT2_FRACTION_THRESHOLD: u16 = 425;

const F16_EXP_MASK: u16 = 0x7c00;
const F16_FRAC_MASK: u16 = 0x03ff;
const F16_EXP_BIAS: i32 = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub fn of(negative: bool) -> Self {
        if negative {
            Sign::Neg
        } else {
            Sign::Pos
        }
    }
}

/// A LOG2-quantized activation: `0` or `sign * 2^exp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantActivation {
    pub is_zero: bool,
    pub sign: Sign,
    pub exp: i8,
}

impl QuantActivation {
    pub const ZERO: QuantActivation = QuantActivation {
        is_zero: true,
        sign: Sign::Pos,
        exp: EXP_MIN,
    };

    /// Builds a non-zero activation, pruning it if `exp` is at or below the
    /// zero code.
    pub fn new(sign: Sign, exp: i32) -> Self {
        let exp = exp.clamp(EXP_MIN as i32, EXP_MAX as i32) as i8;
        if exp == EXP_MIN {
            Self::ZERO
        } else {
            QuantActivation {
                is_zero: false,
                sign,
                exp,
            }
        }
    }

    /// The represented value, `0` or `±2^exp`.
    pub fn value(&self) -> f64 {
        if self.is_zero {
            return 0.0;
        }
        let magnitude = (self.exp as f64).exp2();
        match self.sign {
            Sign::Pos => magnitude,
            Sign::Neg => -magnitude,
        }
    }
}

/// A uniformly quantized INT8 weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantWeight(pub i8);

/// Fields of a binary16 value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Real16Fields {
    pub negative: bool,
    /// Raw biased exponent field, `0..=31`.
    pub biased_exp: u16,
    /// The 10 fraction bits.
    pub fraction: u16,
}

impl Real16Fields {
    pub fn of(x: Real16) -> Self {
        let bits = x.to_bits();
        Real16Fields {
            negative: bits & 0x8000 != 0,
            biased_exp: (bits & F16_EXP_MASK) >> 10,
            fraction: bits & F16_FRAC_MASK,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.biased_exp != 0x1f
    }

    /// True for ±0 and subnormals, the encodings without a hidden bit.
    pub fn lacks_hidden_bit(&self) -> bool {
        self.biased_exp == 0
    }

    /// Unbiased exponent `e` for normal numbers.
    pub fn exponent(&self) -> i32 {
        self.biased_exp as i32 - F16_EXP_BIAS
    }
}

/// `round(r / s) - z`, saturated to the INT8 range.
pub fn uniform_quantize(r: f64, s: f64, z: i32) -> Result<QuantWeight> {
    if !r.is_finite() {
        return Err(Error::NonFiniteValue(format!("weight {r}")));
    }
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "scale must be positive, got {s}"
        )));
    }
    let q = (r / s).round() - z as f64;
    Ok(QuantWeight(q.clamp(i8::MIN as f64, i8::MAX as f64) as i8))
}

/// Reference LOG2 quantizer evaluated in `f64`.
///
/// Uses round-half-up on `log2|x|`. Ties are impossible for binary16 inputs,
/// since a tie needs the mantissa to equal `sqrt(2)` exactly.
pub fn log2_quantize_ref(x: f64) -> Result<QuantActivation> {
    if !x.is_finite() {
        return Err(Error::NonFiniteValue(format!("activation {x}")));
    }
    if x == 0.0 {
        return Ok(QuantActivation::ZERO);
    }
    let rounded = (x.abs().log2() + 0.5).floor();
    // clamp in f64 first so huge magnitudes cannot overflow the cast
    let rounded = rounded.clamp(EXP_MIN as f64, EXP_MAX as f64) as i32;
    Ok(QuantActivation::new(Sign::of(x < 0.0), rounded))
}

/// `round(log2|x|)` as computed by the LOG2-Quant unit: one comparator on the
/// fraction bits and one integer add.
pub fn round_log2_hw(x: Real16) -> Result<i32> {
    let f = Real16Fields::of(x);
    if !f.is_finite() {
        return Err(Error::NonFiniteValue(format!("activation {x}")));
    }
    if f.lacks_hidden_bit() {
        return Err(Error::ZeroOrSubnormal(x.to_bits()));
    }
    let round_up = (f.fraction >= SQRT2_FRACTION_THRESHOLD) as i32;
    Ok(f.exponent() + round_up)
}

/// Hardware LOG2 quantizer. Zeros and subnormals are flushed before the
/// comparator; every subnormal has `log2|x| <= -14` and would be pruned anyway.
pub fn log2_quantize_hw(x: Real16) -> Result<QuantActivation> {
    let f = Real16Fields::of(x);
    if !f.is_finite() {
        return Err(Error::NonFiniteValue(format!("activation {x}")));
    }
    if f.lacks_hidden_bit() {
        return Ok(QuantActivation::ZERO);
    }
    let e = round_log2_hw(x)?;
    Ok(QuantActivation::new(Sign::of(f.negative), e))
}

/// Converts a 16-bit accumulator back to binary16 using the weight scale.
/// The activation scale is a power of two already folded into the shifts.
pub fn dequantize_output(acc: i16, weight_scale: f64) -> Real16 {
    let product = acc as f64 * weight_scale;
    let max = Real16::MAX.to_f64();
    if product.is_nan() {
        return Real16::ZERO;
    }
    Real16::from_f64(product.clamp(-max, max))
}
