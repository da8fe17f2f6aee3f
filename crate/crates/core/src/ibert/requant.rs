use super::tensor::{AccTensor, QuantTensor};

/// Fixed-point rescaling by a constant ratio of scales: multiply by a
/// 31-bit integer, then shift right with rounding. The constant is derived
/// once, offline; the per-element path is integer-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Requantizer {
    pub multiplier: i64,
    pub shift: i32,
}

impl Requantizer {
    /// Panics unless `in_scale / out_scale` is positive and finite.
    pub fn new(in_scale: f64, out_scale: f64) -> Self {
        let ratio = in_scale / out_scale;
        assert!(
            ratio > 0.0 && ratio.is_finite(),
            "scale ratio {ratio} must be positive"
        );
        // ratio = mant * 2^exp with mant in [0.5, 1).
        let (mant, exp) = frexp(ratio);
        let mut multiplier = (mant * (1u64 << 31) as f64).round() as i64;
        let mut shift = 31 - exp;
        if multiplier == 1 << 31 {
            multiplier >>= 1;
            shift -= 1;
        }
        Self { multiplier, shift }
    }

    #[inline]
    pub fn apply(&self, x: i64) -> i64 {
        let p = x as i128 * self.multiplier as i128;
        if self.shift <= 0 {
            (p << -self.shift) as i64
        } else {
            ((p + (1i128 << (self.shift - 1))) >> self.shift) as i64
        }
    }

    #[inline]
    pub fn to_i8(&self, x: i64) -> i8 {
        self.apply(x).clamp(-128, 127) as i8
    }
}

fn frexp(v: f64) -> (f64, i32) {
    let bits = v.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i32;
    if raw_exp == 0 {
        // Subnormal: scale into the normal range first.
        let (m, e) = frexp(v * 2f64.powi(64));
        return (m, e - 64);
    }
    let mant = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (mant, raw_exp - 1022)
}

/// INT32 → INT8 at a new scale, saturating.
pub fn quant(x: &AccTensor, out_scale: f64) -> QuantTensor {
    let rq = Requantizer::new(x.scale, out_scale);
    let data = x.data.iter().map(|&v| rq.to_i8(i64::from(v))).collect();
    QuantTensor {
        rows: x.rows,
        cols: x.cols,
        data,
        scale: out_scale,
    }
}

pub fn quant_row(x: &[i64], rq: &Requantizer) -> Vec<i8> {
    x.iter().map(|&v| rq.to_i8(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibert::reference;
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_zero() {
        for s in [1e-6, 0.01, 1.0, 37.5] {
            let t = AccTensor {
                rows: 1,
                cols: 1,
                data: vec![0],
                scale: s,
            };
            assert_eq!(quant(&t, 0.1).data, vec![0]);
        }
    }

    #[test]
    fn saturates() {
        let t = AccTensor {
            rows: 1,
            cols: 2,
            data: vec![1_000_000, -1_000_000],
            scale: 1.0,
        };
        assert_eq!(quant(&t, 1.0).data, vec![127, -128]);
    }

    #[test]
    fn large_ratios_shift_left() {
        let rq = Requantizer::new(2f64.powi(40), 1.0);
        assert!(rq.shift < 0);
        assert_eq!(rq.apply(3), 3 << 40);
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle(
            x in proptest::collection::vec(any::<i32>(), 1..64),
            log_in in -20.0f64..4.0,
            log_out in -10.0f64..4.0,
        ) {
            let (si, so) = (2f64.powf(log_in), 2f64.powf(log_out));
            let rq = Requantizer::new(si, so);
            prop_assert_eq!((rq.multiplier, rq.shift), reference::dyadic(si / so));
            let t = AccTensor { rows: 1, cols: x.len(), data: x.clone(), scale: si };
            prop_assert_eq!(quant(&t, so).data, reference::quantize(&x, si, so));
        }
    }
}
