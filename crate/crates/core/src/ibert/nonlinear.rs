use super::requant::Requantizer;
use super::tensor::{AccTensor, IbertError, QuantTensor};

/// Output scale of the integer softmax: codes 0..=127 cover [0, 1).
pub const SOFTMAX_SCALE: f64 = 1.0 / 128.0;

const EXP_SHIFT: i64 = 30;
const EXP_COEF: [f64; 3] = [0.35815147, 0.96963238, 1.0];
// Truncated as in the integer-only algorithm; the integer constants depend on it.
#[allow(clippy::approx_constant)]
const LN2: f64 = 0.6931;

/// Integer constants of the softmax for one input scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftmaxConsts {
    x0: i64,
    b: i64,
    c: i64,
}

impl SoftmaxConsts {
    pub fn new(scale: f64) -> Self {
        let a = EXP_COEF[0];
        Self {
            x0: (-LN2 / scale).floor() as i64,
            b: (EXP_COEF[1] / a / scale).floor() as i64,
            c: (EXP_COEF[2] / a / (scale * scale)).floor() as i64,
        }
    }

    /// `exp(x)` for `x ≤ 0`, scaled by `2^30`: split `x = -q·ln2 + r`, use a
    /// second-order polynomial on `r` and shift by `q`.
    fn exp(&self, x: i64) -> i128 {
        let x = x.max(EXP_SHIFT * self.x0);
        let q = x / self.x0;
        let r = x - self.x0 * q;
        let poly = i128::from(r) * i128::from(r + self.b) + i128::from(self.c);
        (poly << (EXP_SHIFT - q)).max(0)
    }

    pub fn row(&self, x: &[i32]) -> Vec<i8> {
        let Some(&max) = x.iter().max() else {
            return Vec::new();
        };
        let exps: Vec<i128> = x
            .iter()
            .map(|&v| self.exp(i64::from(v) - i64::from(max)))
            .collect();
        let sum: i128 = exps.iter().sum();
        let factor = (1i128 << 96) / sum;
        exps.iter()
            .map(|&e| ((e * factor) >> 89).min(127) as i8)
            .collect()
    }
}

/// Row-wise integer softmax; `s.scale` is the logit scale.
pub fn softmax_int(s: &AccTensor) -> QuantTensor {
    let k = SoftmaxConsts::new(s.scale);
    let data = (0..s.rows).flat_map(|r| k.row(s.row(r))).collect();
    QuantTensor {
        rows: s.rows,
        cols: s.cols,
        data,
        scale: SOFTMAX_SCALE,
    }
}

#[allow(clippy::approx_constant)]
const GELU_K: f64 = 1.4142;
const ERF_COEF: [f64; 3] = [-0.2888, -1.769, 1.0];
const ERF_SHIFT: u32 = 14;

/// Integer constants of GELU for one input scale; `x · (erf(x/√2) + 1) / 2`
/// with erf as a clipped second-order polynomial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeluConsts {
    b: i64,
    c: i64,
    one: i64,
    /// Scale of the INT64 GELU output.
    pub out_scale: f64,
}

impl GeluConsts {
    pub fn new(scale: f64) -> Self {
        let s = scale / GELU_K;
        let erf_scale = s * s * ERF_COEF[0] * f64::from(1u32 << ERF_SHIFT);
        Self {
            b: (ERF_COEF[1] / s).floor() as i64,
            c: (ERF_COEF[2] / ERF_COEF[0] / (s * s)).floor() as i64,
            one: (1.0 / erf_scale).floor() as i64,
            // The erf scale is negative; fold the sign into the values.
            out_scale: -(scale * erf_scale / 2.0),
        }
    }

    #[inline]
    pub fn apply(&self, x: i32) -> i64 {
        let x = i64::from(x);
        let clipped = x.abs().min(-self.b);
        let erf = x.signum() * ((clipped + self.b).pow(2) + self.c);
        let erf = erf >> ERF_SHIFT;
        -(x * (erf + self.one))
    }
}

/// GELU followed by requantization to `out_scale`.
pub fn gelu_int(x: &AccTensor, out_scale: f64) -> QuantTensor {
    let g = GeluConsts::new(x.scale);
    let rq = Requantizer::new(g.out_scale, out_scale);
    let data = x.data.iter().map(|&v| rq.to_i8(g.apply(v))).collect();
    QuantTensor {
        rows: x.rows,
        cols: x.cols,
        data,
        scale: out_scale,
    }
}

/// Floor square root by Newton's iteration.
pub fn isqrt(n: u128) -> u128 {
    if n < 2 {
        return n;
    }
    let mut x = 1u128 << (128 - n.leading_zeros()).div_ceil(2);
    loop {
        let y = (x + n / x) / 2;
        if y >= x {
            return x;
        }
        x = y;
    }
}

/// Learned affine part of a LayerNorm: INT8 gain and INT32 bias, each with
/// its own scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormAffine {
    pub gamma: Vec<i8>,
    pub gamma_scale: f64,
    pub beta: Vec<i32>,
    pub beta_scale: f64,
}

/// Scale of a normalized row of width `n`.
pub fn normalized_scale(n: usize) -> f64 {
    (n as f64).sqrt() / f64::from(1u32 << 30)
}

/// Normalize one row to zero mean and unit variance at
/// [`normalized_scale`]. Uses an integer square root; a constant row comes
/// out as zeros.
pub fn normalize(x: &[i64]) -> Vec<i64> {
    let n = x.len() as i64;
    let sum: i64 = x.iter().sum();
    let mean = (2 * sum + n).div_euclid(2 * n);
    let var: u128 = x
        .iter()
        .map(|&v| (v - mean).unsigned_abs() as u128)
        .map(|d| d * d)
        .sum();
    let std = isqrt(var);
    if std == 0 {
        return vec![0; x.len()];
    }
    let factor = ((1u128 << 31) / std) as i128;
    x.iter()
        .map(|&v| ((i128::from(v - mean) * factor) >> 1) as i64)
        .collect()
}

/// LayerNorm with its affine folded into integer constants.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormInt {
    gamma: Vec<i64>,
    beta: Vec<i64>,
    rq: Requantizer,
    pub out_scale: f64,
}

impl LayerNormInt {
    pub fn new(affine: &LayerNormAffine, out_scale: f64) -> Result<Self, IbertError> {
        let n = affine.gamma.len();
        if affine.beta.len() != n || n == 0 {
            return Err(IbertError::Shape(format!(
                "layernorm gain {n} vs bias {}",
                affine.beta.len()
            )));
        }
        let acc_scale = normalized_scale(n) * affine.gamma_scale;
        let beta = affine
            .beta
            .iter()
            .map(|&b| (f64::from(b) * affine.beta_scale / acc_scale).round() as i64)
            .collect();
        Ok(Self {
            gamma: affine.gamma.iter().map(|&g| i64::from(g)).collect(),
            beta,
            rq: Requantizer::new(acc_scale, out_scale),
            out_scale,
        })
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn row(&self, x: &[i64]) -> Vec<i8> {
        normalize(x)
            .iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(&y, (&g, &b))| self.rq.to_i8(y * g + b))
            .collect()
    }
}

/// Residual connection: `main + skip`, with `skip` brought to `main`'s
/// scale.
pub fn residual_add(main: &[i8], main_scale: f64, skip: &[i8], skip_scale: f64) -> Vec<i64> {
    let rq = Requantizer::new(skip_scale, main_scale);
    main.iter()
        .zip(skip)
        .map(|(&a, &b)| i64::from(a) + rq.apply(i64::from(b)))
        .collect()
}

pub fn layernorm_int(x: &AccTensor, norm: &LayerNormInt) -> Result<QuantTensor, IbertError> {
    if x.cols != norm.width() {
        return Err(IbertError::Shape(format!(
            "{} columns into a width-{} layernorm",
            x.cols,
            norm.width()
        )));
    }
    let data = (0..x.rows)
        .flat_map(|r| norm.row(&x.row(r).iter().map(|&v| i64::from(v)).collect::<Vec<_>>()))
        .collect();
    Ok(QuantTensor {
        rows: x.rows,
        cols: x.cols,
        data,
        scale: norm.out_scale,
    })
}
