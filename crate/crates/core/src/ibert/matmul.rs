use super::config::min_padding;
use super::tensor::{checked_i32, AccTensor, IbertError, QuantTensor};

/// Stored weights of a Linear module: INT8 `in_dim × out_dim` matrix kept
/// column-major (one contiguous column per output feature) plus INT32 bias
/// at scale `input_scale · weight_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearWeights {
    pub in_dim: usize,
    pub out_dim: usize,
    columns: Vec<i8>,
    pub weight_scale: f64,
    pub bias: Vec<i32>,
}

impl LinearWeights {
    /// `w` is row-major `in_dim × out_dim`.
    pub fn new(w: &QuantTensor, bias: Vec<i32>) -> Result<Self, IbertError> {
        if bias.len() != w.cols {
            return Err(IbertError::Shape(format!(
                "{} bias values for {} outputs",
                bias.len(),
                w.cols
            )));
        }
        let mut columns = vec![0i8; w.data.len()];
        for h in 0..w.rows {
            for j in 0..w.cols {
                columns[j * w.rows + h] = w.at(h, j);
            }
        }
        Ok(Self {
            in_dim: w.rows,
            out_dim: w.cols,
            columns,
            weight_scale: w.scale,
            bias,
        })
    }

    pub fn column(&self, j: usize) -> &[i8] {
        &self.columns[j * self.in_dim..(j + 1) * self.in_dim]
    }

    /// Row-major `in_dim × out_dim` view, as stored on disk.
    pub fn to_row_major(&self) -> Vec<i8> {
        let mut w = vec![0i8; self.columns.len()];
        for j in 0..self.out_dim {
            for (h, &v) in self.column(j).iter().enumerate() {
                w[h * self.out_dim + j] = v;
            }
        }
        w
    }

    /// Output columns `start..start + width`, for splitting one Linear over
    /// several kernels.
    pub fn col_block(&self, start: usize, width: usize) -> LinearWeights {
        LinearWeights {
            in_dim: self.in_dim,
            out_dim: width,
            columns: self.columns[start * self.in_dim..(start + width) * self.in_dim].to_vec(),
            weight_scale: self.weight_scale,
            bias: self.bias[start..start + width].to_vec(),
        }
    }
}

/// Tile/PE organisation of a matmul module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub tiles: usize,
    pub pes: usize,
}

/// Linear module on row-streamed input: tile `t` owns output columns
/// `j ≡ t (mod tiles)`; within a tile each PE forms a partial dot product
/// over its slice of the inner dimension and the partials are summed before
/// bias addition. No padding on M: extra rows are just more rows.
pub fn linear(x: &QuantTensor, w: &LinearWeights, tiling: Tiling) -> Result<AccTensor, IbertError> {
    if x.cols != w.in_dim {
        return Err(IbertError::Shape(format!(
            "input has {} columns, weights expect {}",
            x.cols, w.in_dim
        )));
    }
    if tiling.tiles == 0 || tiling.pes == 0 {
        return Err(IbertError::Config(
            "tile and PE counts must be at least 1".into(),
        ));
    }
    let chunk = w.in_dim.div_ceil(tiling.pes).max(1);
    let mut data = vec![0i32; x.rows * w.out_dim];
    for r in 0..x.rows {
        let row = x.row(r);
        for tile in 0..tiling.tiles {
            for j in (tile..w.out_dim).step_by(tiling.tiles) {
                let col = w.column(j);
                let mut acc = i64::from(w.bias[j]);
                for (xs, ws) in row.chunks(chunk).zip(col.chunks(chunk)) {
                    let partial: i32 = xs
                        .iter()
                        .zip(ws)
                        .map(|(&a, &b)| i32::from(a) * i32::from(b))
                        .sum();
                    acc += i64::from(partial);
                }
                data[r * w.out_dim + j] = checked_i32(acc, "linear")?;
            }
        }
    }
    Ok(AccTensor {
        rows: x.rows,
        cols: w.out_dim,
        data,
        scale: x.scale * w.weight_scale,
    })
}

/// `q · kᵀ` for one attention head. Each row of `q` is broadcast to all
/// PEs; the rows of `k` (columns of `kᵀ`) are dealt round-robin to the PEs
/// after zero-padding to a multiple of `num_pe`. Padded output columns are
/// dropped before returning.
pub fn attention_dot_product(
    q: &QuantTensor,
    k: &QuantTensor,
    num_pe: usize,
) -> Result<AccTensor, IbertError> {
    if num_pe == 0 {
        return Err(IbertError::Config("num_pe must be at least 1".into()));
    }
    if q.cols != k.cols {
        return Err(IbertError::Shape(format!(
            "head widths {} and {} differ",
            q.cols, k.cols
        )));
    }
    let m = k.rows;
    let padded = min_padding(m, num_pe);
    let zero = vec![0i8; k.cols];
    let mut out = vec![0i32; padded];
    let mut data = Vec::with_capacity(q.rows * m);
    for r in 0..q.rows {
        let qrow = q.row(r);
        for pe in 0..num_pe {
            for c in (pe..padded).step_by(num_pe) {
                let kcol = if c < m { k.row(c) } else { &zero };
                out[c] = qrow
                    .iter()
                    .zip(kcol)
                    .map(|(&a, &b)| i32::from(a) * i32::from(b))
                    .sum();
            }
        }
        data.extend_from_slice(&out[..m]);
    }
    Ok(AccTensor {
        rows: q.rows,
        cols: m,
        data,
        scale: q.scale * k.scale,
    })
}

/// `p · v` where `p` holds softmax rows. PE `e` takes the entries of each
/// `p` row at positions `c ≡ e (mod num_pe)` (the row is zero-padded to a
/// multiple of `num_pe`) together with row `c` of `v`, accumulating a
/// partial output row; partial rows are summed. Only the first matrix is
/// padded, so the sequence length and `v`'s width are arbitrary.
pub fn softmax_matmul(
    p: &QuantTensor,
    v: &QuantTensor,
    num_pe: usize,
) -> Result<AccTensor, IbertError> {
    if num_pe == 0 {
        return Err(IbertError::Config("num_pe must be at least 1".into()));
    }
    if p.cols != v.rows {
        return Err(IbertError::Shape(format!(
            "{} softmax columns for {} value rows",
            p.cols, v.rows
        )));
    }
    let m = p.cols;
    let n = v.cols;
    let padded = min_padding(m, num_pe);
    let mut partial = vec![vec![0i32; n]; num_pe];
    let mut data = Vec::with_capacity(p.rows * n);
    for r in 0..p.rows {
        let prow = p.row(r);
        for (pe, acc) in partial.iter_mut().enumerate() {
            acc.fill(0);
            for c in (pe..padded).step_by(num_pe) {
                // Padded positions hold zero and have no value row.
                let Some(&w) = prow.get(c) else { continue };
                let w = i32::from(w);
                for (a, &b) in acc.iter_mut().zip(v.row(c)) {
                    *a += w * i32::from(b);
                }
            }
        }
        for col in 0..n {
            data.push(partial.iter().map(|acc| acc[col]).sum());
        }
    }
    Ok(AccTensor {
        rows: p.rows,
        cols: n,
        data,
        scale: p.scale * v.scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibert::reference;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> QuantTensor {
        QuantTensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen()).collect(),
            0.5,
        )
        .unwrap()
    }

    fn widen(v: &[i32]) -> Vec<i64> {
        v.iter().map(|&x| i64::from(x)).collect()
    }

    #[test]
    fn hand_linear() {
        let x = QuantTensor::new(1, 2, vec![1, 2], 1.0).unwrap();
        let w =
            LinearWeights::new(&QuantTensor::new(2, 1, vec![3, 4], 1.0).unwrap(), vec![5]).unwrap();
        assert_eq!(
            linear(&x, &w, Tiling { tiles: 1, pes: 1 }).unwrap().data,
            vec![16]
        );
    }

    #[test]
    fn column_partition_concatenates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = random(5, 24, &mut rng);
        let wt = random(24, 30, &mut rng);
        let w = LinearWeights::new(&wt, (0..30).map(|i| i * 7 - 100).collect()).unwrap();
        let t = Tiling { tiles: 4, pes: 3 };
        let full = linear(&x, &w, t).unwrap();
        let parts: Vec<_> = [(0, 10), (10, 10), (20, 10)]
            .iter()
            .map(|&(s, n)| linear(&x, &w.col_block(s, n), t).unwrap())
            .collect();
        assert_eq!(AccTensor::concat_cols(&parts).unwrap(), full);
        assert_eq!(w.to_row_major(), wt.data);
    }

    #[test]
    fn padded_dims() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for (m, pe) in [(8, 12), (128, 12)] {
            let q = random(m, 64, &mut rng);
            let k = random(m, 64, &mut rng);
            let s = attention_dot_product(&q, &k, pe).unwrap();
            assert_eq!((s.rows, s.cols), (m, m));
            assert_eq!(
                widen(&s.data),
                reference::matmul_transposed(&q.data, &k.data, m, m, 64)
            );
        }
        assert!(
            attention_dot_product(&random(1, 2, &mut rng), &random(1, 2, &mut rng), 0).is_err()
        );
    }

    #[test]
    fn value_partition_concatenates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = random(7, 7, &mut rng);
        let v = random(7, 12, &mut rng);
        let full = softmax_matmul(&p, &v, 3).unwrap();
        let parts: Vec<_> = (0..3)
            .map(|i| softmax_matmul(&p, &v.col_slice(4 * i, 4), 3).unwrap())
            .collect();
        assert_eq!(AccTensor::concat_cols(&parts).unwrap(), full);
    }

    proptest! {
        #[test]
        fn linear_matches_triple_loop(
            seed in any::<u64>(), m in 1usize..=16, h in 1usize..=64, o in 1usize..=24,
            tiles in 1usize..=8, pes in 1usize..=8,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = random(m, h, &mut rng);
            let wt = random(h, o, &mut rng);
            let bias: Vec<i32> = (0..o).map(|_| rng.gen_range(-100_000..100_000)).collect();
            let w = LinearWeights::new(&wt, bias.clone()).unwrap();
            let got = linear(&x, &w, Tiling { tiles, pes }).unwrap();
            prop_assert_eq!(widen(&got.data), reference::matmul(&x.data, &wt.data, m, h, o, Some(&bias)));
        }

        #[test]
        fn dot_product_matches_oracle(seed in any::<u64>(), m in 1usize..=20, rq in 1usize..=4, k in 1usize..=16, pe in 1usize..=13) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = random(rq, k, &mut rng);
            let km = random(m, k, &mut rng);
            let got = attention_dot_product(&q, &km, pe).unwrap();
            prop_assert_eq!(widen(&got.data), reference::matmul_transposed(&q.data, &km.data, rq, m, k));
        }

        #[test]
        fn softmax_matmul_matches_oracle(seed in any::<u64>(), m in 1usize..=20, rp in 1usize..=4, n in 1usize..=16, pe in 1usize..=13) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = random(rp, m, &mut rng);
            let v = random(m, n, &mut rng);
            let got = softmax_matmul(&p, &v, pe).unwrap();
            prop_assert_eq!(widen(&got.data), reference::matmul(&p.data, &v.data, rp, m, n, None));
        }
    }
}
