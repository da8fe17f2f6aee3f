//! Scalar reference implementations of every integer kernel, written
//! element by element with no shared helpers so they can serve as
//! independent oracles for the tiled and streaming implementations.

use super::config::EncoderConfig;
use super::model::{EncoderParams, LinearParams, NormParams};

/// Dyadic approximation `ratio ≈ m / 2^shift` with `m` in `[2^30, 2^31)`,
/// found by repeated exact doubling/halving.
pub fn dyadic(ratio: f64) -> (i64, i32) {
    assert!(ratio > 0.0 && ratio.is_finite());
    let mut v = ratio;
    let mut shift = 0i32;
    while v < (1u64 << 30) as f64 {
        v *= 2.0;
        shift += 1;
    }
    while v >= (1u64 << 31) as f64 {
        v /= 2.0;
        shift -= 1;
    }
    let mut m = v.round() as i64;
    if m == 1 << 31 {
        m = 1 << 30;
        shift -= 1;
    }
    (m, shift)
}

/// `x * m / 2^shift`, rounded half up.
pub fn requantize(x: i64, m: i64, shift: i32) -> i64 {
    let p = x as i128 * m as i128;
    if shift <= 0 {
        return (p << (-shift)) as i64;
    }
    let d = 1i128 << shift;
    let q = p.div_euclid(d);
    let r = p.rem_euclid(d);
    (if 2 * r >= d { q + 1 } else { q }) as i64
}

pub fn saturate_i8(v: i64) -> i8 {
    if v > 127 {
        127
    } else if v < -128 {
        -128
    } else {
        v as i8
    }
}

pub fn quantize(x: &[i32], in_scale: f64, out_scale: f64) -> Vec<i8> {
    let (m, s) = dyadic(in_scale / out_scale);
    x.iter()
        .map(|&v| saturate_i8(requantize(i64::from(v), m, s)))
        .collect()
}

/// `out[i][j] = Σ_h a[i][h] · b[h][j] (+ bias[j])` by the textbook triple loop.
pub fn matmul(
    a: &[i8],
    b: &[i8],
    rows: usize,
    inner: usize,
    cols: usize,
    bias: Option<&[i32]>,
) -> Vec<i64> {
    let mut out = vec![0i64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = bias.map_or(0, |b| i64::from(b[j]));
            for h in 0..inner {
                acc += i64::from(a[i * inner + h]) * i64::from(b[h * cols + j]);
            }
            out[i * cols + j] = acc;
        }
    }
    out
}

/// `a · bᵀ` for `a` of `ra×k` and `b` of `rb×k`.
pub fn matmul_transposed(a: &[i8], b: &[i8], ra: usize, rb: usize, k: usize) -> Vec<i64> {
    let mut out = vec![0i64; ra * rb];
    for i in 0..ra {
        for j in 0..rb {
            out[i * rb + j] = (0..k)
                .map(|h| i64::from(a[i * k + h]) * i64::from(b[j * k + h]))
                .sum();
        }
    }
    out
}

fn floor_f(v: f64) -> i64 {
    v.floor() as i64
}

/// Integer-only softmax of one row of logits at `scale`; output codes at
/// scale 1/128.
#[allow(clippy::approx_constant)]
pub fn softmax_row(x: &[i32], scale: f64) -> Vec<i8> {
    const N: i64 = 30;
    let a = 0.35815147;
    let b = 0.96963238 / a;
    let c = 1.0 / a;
    let x0 = floor_f(-0.6931 / scale);
    let b_int = floor_f(b / scale);
    let c_int = floor_f(c / (scale * scale));
    let max = x.iter().copied().max().unwrap_or(0);
    let mut exps = Vec::with_capacity(x.len());
    for &v in x {
        let mut d = i64::from(v) - i64::from(max);
        if d < N * x0 {
            d = N * x0;
        }
        // Both operands are non-positive; floor of their quotient.
        let q = (-d) / (-x0);
        let r = d - x0 * q;
        let z = i128::from(r) * i128::from(r + b_int) + i128::from(c_int);
        let e = z * (1i128 << (N - q));
        exps.push(if e < 0 { 0 } else { e });
    }
    let sum: i128 = exps.iter().sum();
    let factor = (1i128 << 96) / sum;
    exps.iter()
        .map(|&e| {
            let v = (e * factor) >> (96 - 7);
            if v > 127 {
                127
            } else {
                v as i8
            }
        })
        .collect()
}

/// Integer GELU of one accumulator value at `scale`. Returns the result
/// together with its (positive) output scale.
#[allow(clippy::approx_constant)]
pub fn gelu(x: i32, scale: f64) -> (i64, f64) {
    let k = 1.4142;
    let a = -0.2888;
    let b = -1.769;
    let c = 1.0 / a;
    let s = scale / k;
    let b_int = floor_f(b / s);
    let c_int = floor_f(c / (s * s));
    let x = i64::from(x);
    let sign = x.signum();
    let abs = x.abs().min(-b_int);
    let y = sign * ((abs + b_int) * (abs + b_int) + c_int);
    let y = y.div_euclid(1 << 14);
    let sig_scale = s * s * a * (1 << 14) as f64;
    let shift = (1.0 / sig_scale).floor() as i64;
    let out = x * (y + shift);
    (-out, -(scale * sig_scale / 2.0))
}

/// Floor square root by bisection.
pub fn isqrt(n: u128) -> u128 {
    let (mut lo, mut hi) = (0u128, 1u128 << 64);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if mid.checked_mul(mid).is_some_and(|sq| sq <= n) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if n == 0 {
        0
    } else {
        lo
    }
}

/// Integer normalization of one row: zero mean, unit variance at scale
/// `sqrt(n) / 2^30`. A constant row normalizes to zeros.
pub fn normalize_row(x: &[i64]) -> Vec<i64> {
    let n = x.len() as i64;
    let total: i64 = x.iter().sum();
    // Mean rounded half up: floor(total / n + 1/2).
    let mean = (2 * total + n).div_euclid(2 * n);
    let centered: Vec<i64> = x.iter().map(|v| v - mean).collect();
    let var: u128 = centered
        .iter()
        .map(|&v| (v as i128 * v as i128) as u128)
        .sum();
    let std = isqrt(var);
    if std == 0 {
        return vec![0; x.len()];
    }
    let factor = ((1u128 << 31) / std) as i128;
    centered
        .iter()
        .map(|&v| (v as i128 * factor).div_euclid(2) as i64)
        .collect()
}

fn requant_all(v: &[i64], in_scale: f64, out_scale: f64) -> Vec<i8> {
    let (m, s) = dyadic(in_scale / out_scale);
    v.iter()
        .map(|&a| saturate_i8(requantize(a, m, s)))
        .collect()
}

fn linear_acc(lp: &LinearParams, x: &[i8], rows: usize, in_scale: f64) -> Vec<i64> {
    let acc_scale = in_scale * lp.weight.scale;
    let bias: Vec<i32> = if lp.bias_scale == acc_scale {
        lp.bias.clone()
    } else {
        lp.bias
            .iter()
            .map(|&b| (f64::from(b) * lp.bias_scale / acc_scale).round() as i32)
            .collect()
    };
    matmul(
        x,
        &lp.weight.data,
        rows,
        lp.weight.rows,
        lp.weight.cols,
        Some(&bias),
    )
}

/// Linear module: matmul, bias, requantization to the output scale.
pub fn linear_layer(lp: &LinearParams, x: &[i8], rows: usize, in_scale: f64) -> Vec<i8> {
    requant_all(
        &linear_acc(lp, x, rows, in_scale),
        in_scale * lp.weight.scale,
        lp.out_scale,
    )
}

/// Linear module followed by GELU, then requantization.
pub fn linear_gelu_layer(lp: &LinearParams, x: &[i8], rows: usize, in_scale: f64) -> Vec<i8> {
    let acc = linear_acc(lp, x, rows, in_scale);
    let g: Vec<(i64, f64)> = acc
        .iter()
        .map(|&v| gelu(v as i32, in_scale * lp.weight.scale))
        .collect();
    let Some(&(_, g_scale)) = g.first() else {
        return Vec::new();
    };
    requant_all(
        &g.iter().map(|v| v.0).collect::<Vec<_>>(),
        g_scale,
        lp.out_scale,
    )
}

/// Softmax probabilities of `q · kᵀ` for one head; `q` is `ra×d`, `k` is
/// `rb×d`.
pub fn attention_probs(
    q: &[i8],
    k: &[i8],
    ra: usize,
    rb: usize,
    d: usize,
    score_scale: f64,
) -> Vec<i8> {
    let s = matmul_transposed(q, k, ra, rb, d);
    (0..ra)
        .flat_map(|r| {
            softmax_row(
                &s[r * rb..(r + 1) * rb]
                    .iter()
                    .map(|&v| v as i32)
                    .collect::<Vec<_>>(),
                score_scale,
            )
        })
        .collect()
}

/// Probabilities (`ra×rb`, scale 1/128) times values (`rb×d`), requantized.
pub fn context(
    p: &[i8],
    v: &[i8],
    ra: usize,
    rb: usize,
    d: usize,
    v_scale: f64,
    out_scale: f64,
) -> Vec<i8> {
    requant_all(&matmul(p, v, ra, rb, d, None), v_scale / 128.0, out_scale)
}

/// Residual add of `skip` into `main`, then LayerNorm, row by row.
pub fn norm_layer(
    np: &NormParams,
    main: &[i8],
    main_scale: f64,
    skip: &[i8],
    skip_scale: f64,
    rows: usize,
) -> Vec<i8> {
    let h = np.affine.gamma.len();
    let (rm, rs) = dyadic(skip_scale / main_scale);
    let acc_scale = (h as f64).sqrt() / f64::from(1u32 << 30) * np.affine.gamma_scale;
    let (om, os) = dyadic(acc_scale / np.out_scale);
    let mut out = Vec::with_capacity(rows * h);
    for r in 0..rows {
        let sum: Vec<i64> = (0..h)
            .map(|c| i64::from(main[r * h + c]) + requantize(i64::from(skip[r * h + c]), rm, rs))
            .collect();
        let y = normalize_row(&sum);
        for c in 0..h {
            let beta =
                (f64::from(np.affine.beta[c]) * np.affine.beta_scale / acc_scale).round() as i64;
            out.push(saturate_i8(requantize(
                y[c] * i64::from(np.affine.gamma[c]) + beta,
                om,
                os,
            )));
        }
    }
    out
}

/// The encoder composed from the scalar oracles above.
pub fn encoder(cfg: &EncoderConfig, p: &EncoderParams, x: &[i8], m: usize) -> Vec<i8> {
    let (h, d) = (cfg.hidden, cfg.head_dim());
    let q = linear_layer(&p.query, x, m, p.input_scale);
    let k = linear_layer(&p.key, x, m, p.input_scale);
    let v = linear_layer(&p.value, x, m, p.input_scale);
    let score_scale = p.query.out_scale * p.key.out_scale / (d as f64).sqrt();
    let mut ctx = vec![0i8; m * h];
    for head in 0..cfg.heads {
        let cols = |t: &[i8]| -> Vec<i8> {
            (0..m)
                .flat_map(|r| t[r * h + head * d..r * h + (head + 1) * d].to_vec())
                .collect()
        };
        let probs = attention_probs(&cols(&q), &cols(&k), m, m, d, score_scale);
        let c = context(
            &probs,
            &cols(&v),
            m,
            m,
            d,
            p.value.out_scale,
            p.context_scale,
        );
        for r in 0..m {
            ctx[r * h + head * d..r * h + (head + 1) * d].copy_from_slice(&c[r * d..(r + 1) * d]);
        }
    }
    let a = linear_layer(&p.attn_out, &ctx, m, p.context_scale);
    let l1 = norm_layer(&p.ln1, &a, p.attn_out.out_scale, x, p.input_scale, m);
    let f1 = linear_gelu_layer(&p.ffn1, &l1, m, p.ln1.out_scale);
    let f2 = linear_layer(&p.ffn2, &f1, m, p.ffn1.out_scale);
    norm_layer(&p.ln2, &f2, p.ffn2.out_scale, &l1, p.ln1.out_scale, m)
}
