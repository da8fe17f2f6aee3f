use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::deploy::{linear_slot, norm_slot, run_plan};
use super::plan::{ClusterPlan, KernelRole, StageRef};
use super::BuildError;
use crate::ibert::{
    read_encoder, reference, Encoder, EncoderParams, LinearParams, LinearSlot, NormSlot,
    QuantTensor, Tiling,
};
use crate::runtime::SimOptions;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KernelCheck {
    pub kernel: String,
    pub stage: String,
    pub rows: usize,
    pub mismatches: usize,
}

impl KernelCheck {
    pub fn pass(&self) -> bool {
        self.mismatches == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub rows: usize,
    pub seed: u64,
    pub kernels: Vec<KernelCheck>,
    /// Mismatching bytes between the simulated plan and the scalar oracle
    /// chain; `None` when the end-to-end run was skipped.
    pub end_to_end_mismatches: Option<usize>,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.kernels.iter().all(KernelCheck::pass) && self.end_to_end_mismatches.unwrap_or(0) == 0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kernel,stage,rows,mismatches,result\n");
        for k in &self.kernels {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                k.kernel,
                k.stage,
                k.rows,
                k.mismatches,
                verdict(k.pass())
            );
        }
        if let Some(n) = self.end_to_end_mismatches {
            let _ = writeln!(s, "end_to_end,plan,{},{n},{}", self.rows, verdict(n == 0));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in &self.kernels {
            let _ = writeln!(
                s,
                "{:<6} {:<24} {:<14} rows={} mismatches={}",
                verdict(k.pass()),
                k.kernel,
                k.stage,
                k.rows,
                k.mismatches
            );
        }
        if let Some(n) = self.end_to_end_mismatches {
            let _ = writeln!(
                s,
                "{:<6} {:<24} {:<14} rows={} mismatches={n}",
                verdict(n == 0),
                "end-to-end",
                "plan",
                self.rows
            );
        }
        let passed = self.kernels.iter().filter(|k| k.pass()).count();
        let _ = writeln!(s, "{passed}/{} kernels bit-exact", self.kernels.len());
        s
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn random_i8(rng: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.gen()).collect()
}

fn diff(a: &[i8], b: &[i8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

fn params_for(slot: LinearSlot, p: &EncoderParams) -> (&LinearParams, f64) {
    match slot {
        LinearSlot::Query => (&p.query, p.input_scale),
        LinearSlot::Key => (&p.key, p.input_scale),
        LinearSlot::Value => (&p.value, p.input_scale),
        LinearSlot::AttnOut => (&p.attn_out, p.context_scale),
        LinearSlot::Ffn1 => (&p.ffn1, p.ln1.out_scale),
        LinearSlot::Ffn2 => (&p.ffn2, p.ffn1.out_scale),
    }
}

/// Drive one compute kernel's row function with random operands and
/// compare with the scalar oracle for its stage.
fn check_stage(
    enc: &Encoder,
    p: &EncoderParams,
    stage: &StageRef,
    tiling: Tiling,
    num_pe: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(String, usize), BuildError> {
    let model = |e: crate::ibert::IbertError| BuildError::Model(e.to_string());
    let cfg = &enc.config;
    let (h, d) = (cfg.hidden, cfg.head_dim());
    Ok(match stage {
        StageRef::Linear { slot } => {
            let s = linear_slot(slot)
                .ok_or_else(|| BuildError::Plan(format!("unknown slot `{slot}`")))?;
            let (lp, in_scale) = params_for(s, p);
            let k = lp.weight.rows;
            let x = random_i8(rng, m * k);
            let mut got = Vec::new();
            for r in 0..m {
                got.extend(
                    enc.linear_row(s, &x[r * k..(r + 1) * k], tiling)
                        .map_err(model)?,
                );
            }
            let want = if s == LinearSlot::Ffn1 {
                reference::linear_gelu_layer(lp, &x, m, in_scale)
            } else {
                reference::linear_layer(lp, &x, m, in_scale)
            };
            (format!("linear:{slot}"), diff(&got, &want))
        }
        StageRef::Attention { head } => {
            let (q, k) = (random_i8(rng, m * d), random_i8(rng, m * d));
            let keys = QuantTensor::new(m, d, k.clone(), p.key.out_scale).map_err(model)?;
            let mut got = Vec::new();
            for r in 0..m {
                got.extend(
                    enc.attention_row(&q[r * d..(r + 1) * d], &keys, num_pe)
                        .map_err(model)?,
                );
            }
            (
                format!("attention:{head}"),
                diff(
                    &got,
                    &reference::attention_probs(&q, &k, m, m, d, enc.score_scale),
                ),
            )
        }
        StageRef::Context { head } => {
            let probs: Vec<i8> = (0..m * m).map(|_| rng.gen_range(0..=127)).collect();
            let v = random_i8(rng, m * d);
            let values = QuantTensor::new(m, d, v.clone(), p.value.out_scale).map_err(model)?;
            let mut got = Vec::new();
            for r in 0..m {
                got.extend(
                    enc.context_row(&probs[r * m..(r + 1) * m], &values, num_pe)
                        .map_err(model)?,
                );
            }
            let want = reference::context(&probs, &v, m, m, d, p.value.out_scale, p.context_scale);
            (format!("context:{head}"), diff(&got, &want))
        }
        StageRef::Norm { slot } => {
            let s = norm_slot(slot)
                .ok_or_else(|| BuildError::Plan(format!("unknown slot `{slot}`")))?;
            let (np, ms, ss) = match s {
                NormSlot::Ln1 => (&p.ln1, p.attn_out.out_scale, p.input_scale),
                NormSlot::Ln2 => (&p.ln2, p.ffn2.out_scale, p.ln1.out_scale),
            };
            let (main, skip) = (random_i8(rng, m * h), random_i8(rng, m * h));
            let mut got = Vec::new();
            for r in 0..m {
                got.extend(
                    enc.norm_row(s, &main[r * h..(r + 1) * h], &skip[r * h..(r + 1) * h])
                        .map_err(model)?,
                );
            }
            (
                format!("norm:{slot}"),
                diff(&got, &reference::norm_layer(np, &main, ms, &skip, ss, m)),
            )
        }
    })
}

/// Check every compute kernel of `plan` (or only those whose name contains
/// `filter`) against the scalar oracles on `rows` random rows, then run the
/// whole plan in simulation against the oracle encoder chain.
pub fn verify_plan(
    plan: &ClusterPlan,
    encoders: &[Arc<Encoder>],
    rows: usize,
    seed: u64,
    filter: Option<&str>,
    end_to_end: bool,
) -> Result<VerifyReport, BuildError> {
    let model = |e: crate::ibert::IbertError| BuildError::Model(e.to_string());
    plan.config.check_len(rows).map_err(model)?;
    let params: Vec<EncoderParams> = (0..plan.encoders)
        .map(|l| read_encoder(&plan.model_fs, &plan.config, l).map_err(model))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::new();
    for k in plan.kernels() {
        let KernelRole::Compute {
            encoder,
            stage,
            tiles,
            pes,
            num_pe,
        } = &k.role
        else {
            continue;
        };
        if filter.is_some_and(|f| !k.name.contains(f)) {
            continue;
        }
        let tiling = Tiling {
            tiles: *tiles,
            pes: *pes,
        };
        let (stage, mismatches) = check_stage(
            &encoders[*encoder],
            &params[*encoder],
            stage,
            tiling,
            *num_pe,
            rows,
            &mut rng,
        )?;
        kernels.push(KernelCheck {
            kernel: k.name.clone(),
            stage,
            rows,
            mismatches,
        });
    }
    if kernels.is_empty() && filter.is_some() {
        return Err(BuildError::Plan(format!(
            "no compute kernel matches `{}`",
            filter.unwrap_or_default()
        )));
    }
    let end_to_end_mismatches = if end_to_end {
        let h = plan.config.hidden;
        let x = random_i8(&mut rng, rows * h);
        let mut want = x.clone();
        for p in &params {
            want = reference::encoder(&plan.config, p, &want, rows);
        }
        let input = QuantTensor::new(rows, h, x, params[0].input_scale).map_err(model)?;
        let run = run_plan(plan, encoders, &[input], 1, SimOptions::default())?;
        Some(
            run.outputs
                .first()
                .map_or(want.len(), |y| diff(&y.data, &want)),
        )
    } else {
        None
    };
    Ok(VerifyReport {
        rows,
        seed,
        kernels,
        end_to_end_mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_text() {
        let r = VerifyReport {
            rows: 2,
            seed: 0,
            kernels: vec![KernelCheck {
                kernel: "e0.q".into(),
                stage: "linear:q".into(),
                rows: 2,
                mismatches: 1,
            }],
            end_to_end_mismatches: Some(0),
        };
        assert!(!r.pass());
        assert!(r.to_csv().contains("e0.q,linear:q,2,1,FAIL"));
        assert!(r.to_text().contains("0/1 kernels bit-exact"));
    }
}
