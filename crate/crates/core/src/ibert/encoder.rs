use super::config::EncoderConfig;
use super::matmul::{attention_dot_product, linear, softmax_matmul, LinearWeights, Tiling};
use super::model::{EncoderParams, LinearParams, ModelParams};
use super::nonlinear::{
    residual_add, softmax_int, GeluConsts, LayerNormInt, SoftmaxConsts, SOFTMAX_SCALE,
};
use super::requant::{quant, Requantizer};
use super::tensor::{AccTensor, IbertError, QuantTensor};

/// A Linear module with its output stage folded into integer constants.
#[derive(Clone, Debug)]
pub struct CompiledLinear {
    pub weights: LinearWeights,
    pub in_scale: f64,
    pub out_scale: f64,
    gelu: Option<GeluConsts>,
    rq: Requantizer,
}

impl CompiledLinear {
    fn new(p: &LinearParams, in_scale: f64, gelu: bool) -> Result<Self, IbertError> {
        let acc_scale = in_scale * p.weight.scale;
        // Bias is stored at its own scale; restate it at the accumulator scale.
        let bias = if p.bias_scale == acc_scale {
            p.bias.clone()
        } else {
            p.bias
                .iter()
                .map(|&b| (f64::from(b) * p.bias_scale / acc_scale).round() as i32)
                .collect()
        };
        let weights = LinearWeights::new(&p.weight, bias)?;
        let gelu = gelu.then(|| GeluConsts::new(acc_scale));
        let rq_in = gelu.map_or(acc_scale, |g| g.out_scale);
        Ok(Self {
            weights,
            in_scale,
            out_scale: p.out_scale,
            gelu,
            rq: Requantizer::new(rq_in, p.out_scale),
        })
    }

    fn finish(&self, acc: &AccTensor) -> QuantTensor {
        let data = match &self.gelu {
            Some(g) => acc
                .data
                .iter()
                .map(|&v| self.rq.to_i8(g.apply(v)))
                .collect(),
            None => acc
                .data
                .iter()
                .map(|&v| self.rq.to_i8(i64::from(v)))
                .collect(),
        };
        QuantTensor {
            rows: acc.rows,
            cols: acc.cols,
            data,
            scale: self.out_scale,
        }
    }

    /// Matmul, bias, optional GELU, requantization.
    pub fn forward(&self, x: &QuantTensor, tiling: Tiling) -> Result<QuantTensor, IbertError> {
        let x = QuantTensor {
            scale: self.in_scale,
            ..x.clone()
        };
        Ok(self.finish(&linear(&x, &self.weights, tiling)?))
    }

    pub fn forward_row(&self, row: &[i8], tiling: Tiling) -> Result<Vec<i8>, IbertError> {
        let x = QuantTensor {
            rows: 1,
            cols: row.len(),
            data: row.to_vec(),
            scale: self.in_scale,
        };
        Ok(self.finish(&linear(&x, &self.weights, tiling)?).data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinearSlot {
    Query,
    Key,
    Value,
    AttnOut,
    /// Linear followed by GELU.
    Ffn1,
    Ffn2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormSlot {
    /// Residual from the encoder input, after the attention block.
    Ln1,
    /// Residual from Ln1's output, after the feed-forward block.
    Ln2,
}

/// One encoder ready to execute: parameters plus every integer constant the
/// kernels need.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_scale: f64,
    query: CompiledLinear,
    key: CompiledLinear,
    value: CompiledLinear,
    attn_out: CompiledLinear,
    ffn1: CompiledLinear,
    ffn2: CompiledLinear,
    /// Logit scale: `S_q · S_k / √(head_dim)`.
    pub score_scale: f64,
    softmax: SoftmaxConsts,
    pub context_scale: f64,
    context_rq: Requantizer,
    ln1: LayerNormInt,
    ln2: LayerNormInt,
}

impl Encoder {
    pub fn compile(config: &EncoderConfig, p: &EncoderParams) -> Result<Self, IbertError> {
        config.validate()?;
        p.check(config)?;
        let score_scale = p.query.out_scale * p.key.out_scale / (config.head_dim() as f64).sqrt();
        Ok(Self {
            config: config.clone(),
            input_scale: p.input_scale,
            query: CompiledLinear::new(&p.query, p.input_scale, false)?,
            key: CompiledLinear::new(&p.key, p.input_scale, false)?,
            value: CompiledLinear::new(&p.value, p.input_scale, false)?,
            attn_out: CompiledLinear::new(&p.attn_out, p.context_scale, false)?,
            ffn1: CompiledLinear::new(&p.ffn1, p.ln1.out_scale, true)?,
            ffn2: CompiledLinear::new(&p.ffn2, p.ffn1.out_scale, false)?,
            score_scale,
            softmax: SoftmaxConsts::new(score_scale),
            context_scale: p.context_scale,
            context_rq: Requantizer::new(SOFTMAX_SCALE * p.value.out_scale, p.context_scale),
            ln1: LayerNormInt::new(&p.ln1.affine, p.ln1.out_scale)?,
            ln2: LayerNormInt::new(&p.ln2.affine, p.ln2.out_scale)?,
        })
    }

    pub fn compile_model(model: &ModelParams) -> Result<Vec<Encoder>, IbertError> {
        model
            .encoders
            .iter()
            .map(|e| Encoder::compile(&model.config, e))
            .collect()
    }

    pub fn output_scale(&self) -> f64 {
        self.ln2.out_scale
    }

    pub fn linear(&self, slot: LinearSlot) -> &CompiledLinear {
        match slot {
            LinearSlot::Query => &self.query,
            LinearSlot::Key => &self.key,
            LinearSlot::Value => &self.value,
            LinearSlot::AttnOut => &self.attn_out,
            LinearSlot::Ffn1 => &self.ffn1,
            LinearSlot::Ffn2 => &self.ffn2,
        }
    }

    fn norm(&self, slot: NormSlot) -> &LayerNormInt {
        match slot {
            NormSlot::Ln1 => &self.ln1,
            NormSlot::Ln2 => &self.ln2,
        }
    }

    /// Scale of the tensor arriving on a norm stage's main input.
    fn norm_main_scale(&self, slot: NormSlot) -> f64 {
        match slot {
            NormSlot::Ln1 => self.attn_out.out_scale,
            NormSlot::Ln2 => self.ffn2.out_scale,
        }
    }

    fn norm_skip_scale(&self, slot: NormSlot) -> f64 {
        match slot {
            NormSlot::Ln1 => self.input_scale,
            NormSlot::Ln2 => self.ln1.out_scale,
        }
    }

    fn default_tiling(&self) -> Tiling {
        Tiling {
            tiles: self.config.linear_tiles,
            pes: self.config.linear_pes,
        }
    }

    // -- Row-level stage functions, as executed by the streaming kernels. --

    pub fn linear_row(
        &self,
        slot: LinearSlot,
        row: &[i8],
        tiling: Tiling,
    ) -> Result<Vec<i8>, IbertError> {
        self.linear(slot).forward_row(row, tiling)
    }

    /// Attention probabilities for one query row of one head against the
    /// head's full key matrix.
    pub fn attention_row(
        &self,
        q_row: &[i8],
        keys: &QuantTensor,
        num_pe: usize,
    ) -> Result<Vec<i8>, IbertError> {
        let q = QuantTensor {
            rows: 1,
            cols: q_row.len(),
            data: q_row.to_vec(),
            scale: self.query.out_scale,
        };
        let s = attention_dot_product(&q, keys, num_pe)?;
        Ok(self.softmax.row(&s.data))
    }

    /// Context row for one head: probabilities times values, requantized.
    pub fn context_row(
        &self,
        p_row: &[i8],
        values: &QuantTensor,
        num_pe: usize,
    ) -> Result<Vec<i8>, IbertError> {
        let p = QuantTensor {
            rows: 1,
            cols: p_row.len(),
            data: p_row.to_vec(),
            scale: SOFTMAX_SCALE,
        };
        let c = softmax_matmul(&p, values, num_pe)?;
        Ok(c.data
            .iter()
            .map(|&v| self.context_rq.to_i8(i64::from(v)))
            .collect())
    }

    /// Residual add followed by LayerNorm.
    pub fn norm_row(
        &self,
        slot: NormSlot,
        main: &[i8],
        skip: &[i8],
    ) -> Result<Vec<i8>, IbertError> {
        let n = self.norm(slot);
        if main.len() != n.width() || skip.len() != n.width() {
            return Err(IbertError::Shape(format!(
                "norm rows of {} and {} values, expected {}",
                main.len(),
                skip.len(),
                n.width()
            )));
        }
        let sum = residual_add(
            main,
            self.norm_main_scale(slot),
            skip,
            self.norm_skip_scale(slot),
        );
        Ok(n.row(&sum))
    }

    // -- Whole-matrix execution. --

    /// One encoder applied to an `M × H` input, heads in natural order.
    pub fn forward(&self, x: &QuantTensor) -> Result<QuantTensor, IbertError> {
        let order: Vec<usize> = (0..self.config.heads).collect();
        self.forward_with_head_order(x, &order)
    }

    /// As [`Encoder::forward`], but evaluating heads in `order`; results are
    /// put back in head order when the heads are gathered.
    pub fn forward_with_head_order(
        &self,
        x: &QuantTensor,
        order: &[usize],
    ) -> Result<QuantTensor, IbertError> {
        let cfg = &self.config;
        cfg.check_len(x.rows)?;
        if x.cols != cfg.hidden {
            return Err(IbertError::Shape(format!(
                "input has {} columns, hidden size is {}",
                x.cols, cfg.hidden
            )));
        }
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..cfg.heads).collect::<Vec<_>>() {
            return Err(IbertError::Config(format!(
                "{order:?} is not a permutation of the heads"
            )));
        }
        let x = QuantTensor {
            scale: self.input_scale,
            ..x.clone()
        };
        let t = self.default_tiling();
        let q = self.query.forward(&x, t)?;
        let k = self.key.forward(&x, t)?;
        let v = self.value.forward(&x, t)?;

        let d = cfg.head_dim();
        let mut heads: Vec<(usize, QuantTensor)> = Vec::with_capacity(cfg.heads);
        for &h in order {
            let mut s =
                attention_dot_product(&q.col_slice(h * d, d), &k.col_slice(h * d, d), cfg.num_pe)?;
            s.scale = self.score_scale;
            let p = softmax_int(&s);
            let c = softmax_matmul(&p, &v.col_slice(h * d, d), cfg.num_pe)?;
            heads.push((h, quant(&c, self.context_scale)));
        }
        heads.sort_by_key(|(h, _)| *h);
        let mut context = QuantTensor::zeros(x.rows, cfg.hidden, self.context_scale);
        for (h, c) in &heads {
            for r in 0..x.rows {
                context.data[r * cfg.hidden + h * d..r * cfg.hidden + (h + 1) * d]
                    .copy_from_slice(c.row(r));
            }
        }

        let a = self.attn_out.forward(&context, t)?;
        let ln1 = self.norm_matrix(NormSlot::Ln1, &a, &x)?;
        let f1 = self.ffn1.forward(&ln1, t)?;
        let f2 = self.ffn2.forward(&f1, t)?;
        self.norm_matrix(NormSlot::Ln2, &f2, &ln1)
    }

    fn norm_matrix(
        &self,
        slot: NormSlot,
        main: &QuantTensor,
        skip: &QuantTensor,
    ) -> Result<QuantTensor, IbertError> {
        let n = self.norm(slot);
        let mut data = Vec::with_capacity(main.data.len());
        for r in 0..main.rows {
            let sum = residual_add(main.row(r), main.scale, skip.row(r), skip.scale);
            data.extend(n.row(&sum));
        }
        Ok(QuantTensor {
            rows: main.rows,
            cols: main.cols,
            data,
            scale: n.out_scale,
        })
    }
}

/// The whole encoder stack, executed in-process one encoder at a time.
pub fn encoder_forward(encoders: &[Encoder], x: &QuantTensor) -> Result<QuantTensor, IbertError> {
    let mut cur = x.clone();
    for e in encoders {
        cur = e.forward(&cur)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibert::model::generate;
    use crate::ibert::reference;
    use rand::{Rng, SeedableRng};

    fn input(m: usize, h: usize, seed: u64) -> QuantTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        QuantTensor::new(m, h, (0..m * h).map(|_| rng.gen()).collect(), 1.0 / 32.0).unwrap()
    }

    fn tiny() -> Vec<Encoder> {
        Encoder::compile_model(&generate(&EncoderConfig::tiny(), 11).unwrap()).unwrap()
    }

    #[test]
    fn matches_scalar_oracle_composition() {
        let model = generate(&EncoderConfig::tiny(), 5).unwrap();
        let encs = Encoder::compile_model(&model).unwrap();
        for (seed, m) in [(1, 1), (2, 3), (3, 8)] {
            let x = input(m, 8, seed);
            let got = encs[0].forward(&x).unwrap();
            assert_eq!(
                got.data,
                reference::encoder(&model.config, &model.encoders[0], &x.data, m)
            );
        }
    }

    #[test]
    fn output_is_not_degenerate() {
        let encs = tiny();
        let out = encoder_forward(&encs, &input(6, 8, 9)).unwrap();
        assert_eq!((out.rows, out.cols), (6, 8));
        let distinct: std::collections::BTreeSet<i8> = out.data.iter().copied().collect();
        assert!(distinct.len() > 8, "{distinct:?}");
        assert!(out.data.iter().filter(|&&v| v == 127 || v == -128).count() < out.data.len() / 4);
    }

    #[test]
    fn head_order_does_not_matter() {
        let encs = tiny();
        let x = input(5, 8, 4);
        assert_eq!(
            encs[0].forward_with_head_order(&x, &[1, 0]).unwrap(),
            encs[0].forward(&x).unwrap()
        );
        assert!(encs[0].forward_with_head_order(&x, &[1, 1]).is_err());
    }

    #[test]
    fn stacking_is_repeated_application() {
        let encs = tiny();
        let x = input(4, 8, 2);
        let mut manual = x.clone();
        for e in &encs {
            manual = e.forward(&manual).unwrap();
        }
        assert_eq!(encoder_forward(&encs, &x).unwrap(), manual);
    }

    #[test]
    fn rejects_over_long_input() {
        let encs = tiny();
        assert!(matches!(
            encs[0].forward(&input(9, 8, 0)),
            Err(IbertError::TooLong { m: 9, max: 8 })
        ));
    }

    #[test]
    fn row_stages_reproduce_matrix_execution() {
        let e = &tiny()[0];
        let x = input(7, 8, 3);
        let t = Tiling { tiles: 3, pes: 1 };
        let row = |slot, r: &[i8]| e.linear_row(slot, r, t).unwrap();
        let rows: Vec<Vec<i8>> = (0..7).map(|r| x.row(r).to_vec()).collect();
        let q: Vec<_> = rows.iter().map(|r| row(LinearSlot::Query, r)).collect();
        let k: Vec<_> = rows.iter().map(|r| row(LinearSlot::Key, r)).collect();
        let v: Vec<_> = rows.iter().map(|r| row(LinearSlot::Value, r)).collect();
        let d = 4;
        let mut ctx = vec![Vec::new(); 7];
        for h in 0..2 {
            let head = |t: &Vec<Vec<i8>>, s: f64| {
                QuantTensor::from_rows(
                    &t.iter()
                        .map(|r| r[h * d..(h + 1) * d].to_vec())
                        .collect::<Vec<_>>(),
                    d,
                    s,
                )
                .unwrap()
            };
            let kh = head(&k, 1.0);
            let vh = head(&v, 1.0);
            for r in 0..7 {
                let p = e.attention_row(&q[r][h * d..(h + 1) * d], &kh, 5).unwrap();
                ctx[r].extend(e.context_row(&p, &vh, 5).unwrap());
            }
        }
        let mut out = Vec::new();
        for r in 0..7 {
            let a = row(LinearSlot::AttnOut, &ctx[r]);
            let l1 = e.norm_row(NormSlot::Ln1, &a, &rows[r]).unwrap();
            let f = row(LinearSlot::Ffn2, &row(LinearSlot::Ffn1, &l1));
            out.extend(e.norm_row(NormSlot::Ln2, &f, &l1).unwrap());
        }
        assert_eq!(out, e.forward(&x).unwrap().data);
    }
}
