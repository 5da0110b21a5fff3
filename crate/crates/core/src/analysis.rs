//! Exponent histograms and the estimated memory savings they imply.
//!
//! A weight multiplied by `2^e` with `e < 0` loses its `|e|` low-order bits to
//! the right shift, so those bits never need to leave DRAM. The estimated
//! savings of a stream is the fraction of weight bits skipped this way,
//! relative to fetching every weight at full width for every non-pruned
//! activation. Pruned activations are left out of both sides because every
//! input-stationary machine skips them identically.

use crate::model::{ExpBin, Tensor};
use crate::quant::{log2_quantize_hw, QuantActivation, EXP_MAX, EXP_MIN};
use crate::{Error, Result};

const BINS: usize = (EXP_MAX as i32 - EXP_MIN as i32 + 1) as usize;

/// Counts of quantized activations per exponent, plus pruned ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExpHistogram {
    counts: [u64; BINS],
    zero: u64,
}

impl ExpHistogram {
    pub fn add(&mut self, act: &QuantActivation) {
        if act.is_zero {
            self.zero += 1;
        } else {
            self.counts[(act.exp - EXP_MIN) as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ExpHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.zero += other.zero;
    }

    pub fn count(&self, bin: ExpBin) -> u64 {
        match bin {
            ExpBin::Zero => self.zero,
            ExpBin::Exp(e) => self.counts[(e - EXP_MIN) as usize],
        }
    }

    /// `(bin, count)` for every bin, `-8 ..= 7` then `zero`.
    pub fn bins(&self) -> impl Iterator<Item = (ExpBin, u64)> + '_ {
        ExpBin::all().map(|b| (b, self.count(b)))
    }

    pub fn total(&self) -> u64 {
        self.zero + self.nonzero()
    }

    pub fn nonzero(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn nonzero_exps(&self) -> impl Iterator<Item = (i8, u64)> + '_ {
        (EXP_MIN..=EXP_MAX).zip(self.counts.iter().copied())
    }
}

impl<'a> FromIterator<&'a QuantActivation> for ExpHistogram {
    fn from_iter<I: IntoIterator<Item = &'a QuantActivation>>(iter: I) -> Self {
        let mut h = ExpHistogram::default();
        iter.into_iter().for_each(|a| h.add(a));
        h
    }
}

pub fn histogram<'a>(acts: impl IntoIterator<Item = &'a QuantActivation>) -> ExpHistogram {
    acts.into_iter().collect()
}

/// Quantizes a Real16 tensor with the hardware path and bins the result.
pub fn histogram_of_tensor(t: &Tensor) -> Result<ExpHistogram> {
    let values = t
        .as_real16()
        .ok_or_else(|| Error::Parse("activation tensor must be Real16".into()))?;
    let mut h = ExpHistogram::default();
    for &x in values {
        h.add(&log2_quantize_hw(x)?);
    }
    Ok(h)
}

/// Fraction of non-pruned activations with a negative exponent.
pub fn negative_fraction(h: &ExpHistogram) -> Result<f64> {
    let nonzero = h.nonzero();
    if nonzero == 0 {
        return Err(Error::EmptyHistogram);
    }
    let negative: u64 = h
        .nonzero_exps()
        .filter(|(e, _)| *e < 0)
        .map(|(_, c)| c)
        .sum();
    Ok(negative as f64 / nonzero as f64)
}

/// Exact form of the savings: `skipped_bits / full_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SavingsRatio {
    pub skipped_bits: u64,
    pub full_bits: u64,
}

impl SavingsRatio {
    pub fn value(&self) -> f64 {
        self.skipped_bits as f64 / self.full_bits as f64
    }
}

/// Weight bits a `2^exp` multiplier never reads.
pub fn skipped_bits(exp: i8) -> u32 {
    if exp < 0 {
        exp.unsigned_abs() as u32
    } else {
        0
    }
}

pub fn savings_ratio(h: &ExpHistogram, weight_bits: u32) -> Result<SavingsRatio> {
    let nonzero = h.nonzero();
    if nonzero == 0 {
        return Err(Error::EmptyHistogram);
    }
    let skipped = h
        .nonzero_exps()
        .map(|(e, c)| c * skipped_bits(e).min(weight_bits) as u64)
        .sum();
    Ok(SavingsRatio {
        skipped_bits: skipped,
        full_bits: weight_bits as u64 * nonzero,
    })
}

pub fn estimated_memory_savings(h: &ExpHistogram, weight_bits: u32) -> Result<f64> {
    savings_ratio(h, weight_bits).map(|r| r.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Sign;
    use proptest::prelude::*;

    fn act(e: i32) -> QuantActivation {
        QuantActivation::new(Sign::Pos, e)
    }

    fn hist(items: &[(i32, u64)]) -> ExpHistogram {
        let mut h = ExpHistogram::default();
        for &(e, n) in items {
            for _ in 0..n {
                h.add(&act(e));
            }
        }
        h
    }

    #[test]
    fn histogram_examples() {
        let empty = histogram(&[]);
        assert_eq!(empty.total(), 0);
        assert!(empty.bins().all(|(_, c)| c == 0));

        let h = histogram(&[act(-3), act(-3), QuantActivation::ZERO]);
        assert_eq!(h.count(ExpBin::Exp(-3)), 2);
        assert_eq!(h.count(ExpBin::Zero), 1);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn negative_fraction_examples() {
        assert_eq!(negative_fraction(&hist(&[(-1, 1), (2, 1)])).unwrap(), 0.5);
        assert_eq!(negative_fraction(&hist(&[(0, 3), (5, 1)])).unwrap(), 0.0);
        assert!(matches!(
            negative_fraction(&histogram(&[QuantActivation::ZERO])),
            Err(Error::EmptyHistogram)
        ));
    }

    #[test]
    fn savings_examples() {
        for n in [1, 7, 1000] {
            assert_eq!(
                estimated_memory_savings(&hist(&[(-3, n)]), 8).unwrap(),
                0.375
            );
        }
        assert_eq!(estimated_memory_savings(&hist(&[(0, 4)]), 8).unwrap(), 0.0);
        assert_eq!(
            estimated_memory_savings(&hist(&[(0, 1), (3, 2), (7, 1)]), 8).unwrap(),
            0.0
        );
        assert!(estimated_memory_savings(&ExpHistogram::default(), 8).is_err());
    }

    fn arb_hist() -> impl Strategy<Value = Vec<u64>> {
        proptest::collection::vec(0u64..50, BINS)
    }

    fn from_counts(counts: &[u64]) -> ExpHistogram {
        let mut h = ExpHistogram::default();
        // bin -8 is the zero code and can never hold a non-pruned activation
        for (i, &c) in counts.iter().enumerate().skip(1) {
            h.counts[i] = c;
        }
        h
    }

    proptest! {
        #[test]
        fn savings_bounded(counts in arb_hist()) {
            let h = from_counts(&counts);
            if h.nonzero() > 0 {
                let s = estimated_memory_savings(&h, 8).unwrap();
                prop_assert!((0.0..=7.0 / 8.0).contains(&s));
            }
        }

        #[test]
        fn moving_mass_down_never_reduces_savings(
            counts in arb_hist(), from in -7i8..=7, to_off in 1i8..14, moved in 0u64..50,
        ) {
            let to = from.min(0) - to_off;
            prop_assume!(to > EXP_MIN);
            let mut h = from_counts(&counts);
            let idx = |e: i8| (e - EXP_MIN) as usize;
            h.counts[idx(from)] += moved;
            prop_assume!(h.nonzero() > 0);
            let before = savings_ratio(&h, 8).unwrap();
            h.counts[idx(from)] -= moved;
            h.counts[idx(to)] += moved;
            let after = savings_ratio(&h, 8).unwrap();
            prop_assert_eq!(before.full_bits, after.full_bits);
            prop_assert!(after.skipped_bits >= before.skipped_bits);
        }
    }
}
