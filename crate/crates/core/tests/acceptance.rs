//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line to stderr (bypassing output capture) before asserting.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use gala::builder::{
    build, load_encoders, read_json, run_plan, BuildError, ClusterDescription, ClusterPlan,
    HwConfig, KernelRole, LayerDescription, LayerSpec, ModuleKind,
};
use gala::fabric::{KernelAddress, NetworkConfig, NodeId, RoutingTables, Topology};
use gala::gmi::{
    allgather, allgather_stage, broadcast, gather, reduce, scatter, BroadcastKernel, CollectiveOp,
    ElemWidth, GatherKernel, GmiKernelSpec, ReduceOp,
};
use gala::ibert::{
    attention_dot_product, encoder_forward, generate, quant, reference, softmax_int,
    softmax_matmul, write_model_fs, write_tensor_blob, Encoder, EncoderConfig, LinearSlot,
    NormSlot, QuantTensor, Tiling, SOFTMAX_SCALE,
};
use gala::perfmodel::{
    end_to_end_latency, ibert_allocation, latency_table, routing_state_bound, throughput, to_f64,
    versal_estimate, CycleTable, PipelineModel, VersalParams, DEFAULT_CLOCK_HZ,
};
use gala::runtime::{
    measure_xti, Deployment, Endpoint, EventKind, Incoming, KernelBehavior, KernelKind, Outgoing,
    Reaction, SimKernel, SimOptions, SimResult, Simulator, Stimulus, StimulusItem, StreamSpec,
    Work,
};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[{}] criterion {n:>2} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

fn random_input(rows: usize, cols: usize, seed: u64) -> QuantTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QuantTensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen()).collect(),
        1.0,
    )
    .unwrap()
}

/// Twelve-encoder I-BERT-base model file system, generated once per run.
fn ibert_base_fs() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-ibert-base");
        let _ = std::fs::remove_dir_all(&dir);
        write_model_fs(&dir, &generate(&EncoderConfig::ibert_base(), 2024).unwrap()).unwrap();
        dir
    })
}

fn tiny_fs(layers: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_model_fs(
        dir.path(),
        &generate(
            &EncoderConfig {
                layers,
                ..EncoderConfig::tiny()
            },
            11,
        )
        .unwrap(),
    )
    .unwrap();
    dir
}

fn clusters(n: usize, nodes: usize) -> ClusterDescription {
    let mut c = ClusterDescription::single(nodes);
    c.clusters = n;
    c
}

fn ibert_base_cluster_desc() -> ClusterDescription {
    read_json(&configs().join("ibert-base/cluster.json")).unwrap()
}

fn ibert_base_layer_desc() -> LayerDescription {
    read_json(&configs().join("ibert-base/layers.json")).unwrap()
}

/// One encoder of the twelve-cluster layout, alone in one cluster.
fn single_encoder_desc(nodes_from_layout: bool) -> (ClusterDescription, LayerDescription) {
    let mut cd = if nodes_from_layout {
        ibert_base_cluster_desc()
    } else {
        ClusterDescription::single(1)
    };
    cd.clusters = 1;
    let mut ld = ibert_base_layer_desc();
    ld.encoders = Some(1);
    (cd, ld)
}

#[test]
fn latency_table_reproduction() {
    let start = Instant::now();
    let table = CycleTable::load(&configs().join("cycles_ultrascale.csv")).unwrap();
    let rows = latency_table(&table, 12, 0.0, DEFAULT_CLOCK_HZ, &[]).unwrap();
    let want = [0.416, 0.630, 0.837, 1.053, 1.461, 2.269, 3.910, 7.193];
    let errs: Vec<f64> = rows
        .iter()
        .zip(want)
        .map(|(r, w)| rel(r.latency_s * 1e3, w))
        .collect();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let with_d = latency_table(&table, 12, 1.1e-6, DEFAULT_CLOCK_HZ, &[]).unwrap();
    verdict(
        1,
        "latency table",
        rows.len() == 8 && worst < 0.002 && elapsed < 1.0,
        &format!(
            "8 rows, worst relative error {:.4}% (limit 0.2%), {elapsed:.3} s; seq 128 = {:.4} ms with d=0, {:.4} ms with d=1.1 us",
            worst * 100.0,
            rows[7].latency_s * 1e3,
            with_d[7].latency_s * 1e3
        ),
    );
}

#[test]
fn average_latency_at_seq_38() {
    let table = CycleTable::load(&configs().join("cycles_ultrascale.csv")).unwrap();
    let r = table.interpolate(38).unwrap();
    let ms =
        end_to_end_latency(&PipelineModel::new(12, r.x, r.t, r.i, 0.0, DEFAULT_CLOCK_HZ).unwrap())
            * 1e3;
    let err = rel(ms, 2.58);
    verdict(
        2,
        "average latency",
        err < 0.01,
        &format!(
            "{ms:.4} ms vs 2.58 ms, error {:.3}% (limit 1%)",
            err * 100.0
        ),
    );
}

#[test]
fn versal_arithmetic() {
    let start = Instant::now();
    let alloc = ibert_allocation(&EncoderConfig::ibert_base(), 128);
    let e = versal_estimate(&alloc, &VersalParams::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let q = &e.kernels[0];
    let matmuls_24: Vec<_> = e.kernels.iter().filter(|k| k.aies == 24).collect();
    let per_kernel = matmuls_24.len() == 4
        && matmuls_24
            .iter()
            .all(|k| k.multiplies_per_aie == 3_145_728 && k.cycles == 49_152)
        && q.latency_us == Ratio::new(49_152, 1000);
    let encoder_ok = e.reported.encoder_us == Ratio::new(1241, 10);
    let model_err = (to_f64(e.reported.model_us) - 860.0).abs();
    verdict(
        3,
        "versal arithmetic",
        per_kernel && e.total_aies == 312 && encoder_ok && model_err <= 0.1 && elapsed < 1.0,
        &format!(
            "{} cycles = {} us per 24-AIE kernel, {} AIEs, encoder {} us, model {} us (unrounded {:.3} / {:.3} us), {elapsed:.4} s",
            q.cycles,
            to_f64(q.latency_us),
            e.total_aies,
            to_f64(e.reported.encoder_us),
            to_f64(e.reported.model_us),
            to_f64(e.exact.encoder_us),
            to_f64(e.exact.model_us)
        ),
    );
}

#[test]
fn throughput_model() {
    let m = PipelineModel::new(12, 111_708.0, 209_789.0, 767.0, 0.0, DEFAULT_CLOCK_HZ).unwrap();
    let t = throughput(&m, 128);
    let err = rel(t.inferences_per_s, 2023.47);
    verdict(
        4,
        "throughput",
        !t.latency_bound && err < 0.02,
        &format!(
            "f/(M*I) = {:.2} inf/s vs measured 2023.47, residual {:+.2}% (limit 2%)",
            t.inferences_per_s,
            (t.inferences_per_s / 2023.47 - 1.0) * 100.0
        ),
    );
}

#[test]
fn routing_state_bound_holds() {
    let tiny = tiny_fs(3);
    let mut plans: Vec<(String, ClusterDescription, ClusterPlan)> = Vec::new();
    for (n, nodes) in [(1, 1), (3, 1), (3, 2), (3, 3)] {
        let cd = clusters(n, nodes);
        plans.push((
            format!("tiny {n}x{nodes}"),
            cd.clone(),
            build(&cd, &LayerDescription::ibert(Some(3)), tiny.path()).unwrap(),
        ));
    }
    let cd = ibert_base_cluster_desc();
    plans.push((
        "ibert-base 12x6".into(),
        cd.clone(),
        build(&cd, &ibert_base_layer_desc(), ibert_base_fs()).unwrap(),
    ));
    for layout in [false, true] {
        let (cd, ld) = single_encoder_desc(layout);
        let name = format!("ibert-base 1x{}", cd.nodes_per_cluster);
        plans.push((name, cd.clone(), build(&cd, &ld, ibert_base_fs()).unwrap()));
    }
    let mut ok = true;
    let mut literal = 0;
    let mut parts = Vec::new();
    for (name, cd, plan) in &plans {
        let n = plan.clusters.len();
        let stored = plan.max_stored_addresses();
        // Own cluster's node addresses plus one gateway per other cluster.
        ok &= stored < cd.nodes_per_cluster + n;
        // The 2N-1 form presumes at most N addresses per cluster.
        if cd.nodes_per_cluster <= n {
            literal += 1;
            ok &= stored < 2 * n;
        }
        parts.push(format!("{name}: {stored}"));
    }
    let contrast = routing_state_bound(256, 256).unwrap();
    let twelve = routing_state_bound(12, 12).unwrap();
    ok &= contrast.gateway == 511
        && contrast.full_mesh == 65_536
        && twelve.gateway == 23
        && twelve.full_mesh == 144;
    verdict(
        5,
        "routing-state bound",
        ok,
        &format!(
            "{} plans within nodes+N-1, {literal} with <=N nodes per cluster within 2N-1 [{}]; N=256: {} vs {}",
            plans.len(),
            parts.join(", "),
            contrast.gateway,
            contrast.full_mesh
        ),
    );
}

#[derive(Default)]
struct KernelTally {
    instances: usize,
    mismatched: Vec<String>,
}

impl KernelTally {
    fn check(&mut self, label: &str, got: &[i8], want: &[i8]) {
        self.instances += 1;
        if got != want {
            self.mismatched.push(label.to_string());
        }
    }
}

const SLOTS: [LinearSlot; 6] = [
    LinearSlot::Query,
    LinearSlot::Key,
    LinearSlot::Value,
    LinearSlot::AttnOut,
    LinearSlot::Ffn1,
    LinearSlot::Ffn2,
];

/// Run one stage of `enc` against its scalar oracle. `kind` picks the stage.
fn kernel_instance(
    tally: &mut KernelTally,
    model: &gala::ibert::ModelParams,
    kind: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) {
    let cfg = &model.config;
    let p = &model.encoders[0];
    let enc = Encoder::compile(cfg, p).unwrap();
    let (h, d) = (cfg.hidden, cfg.head_dim());
    let rand_i8 =
        |rng: &mut ChaCha8Rng, n: usize| -> Vec<i8> { (0..n).map(|_| rng.gen()).collect() };
    let label = format!("kind {kind}, H={h}, A={}, M={m}", cfg.heads);
    match kind {
        0 | 1 => {
            let slot = if kind == 1 {
                LinearSlot::Ffn1
            } else {
                *SLOTS.choose(rng).unwrap()
            };
            let (lp, in_scale) = match slot {
                LinearSlot::Query => (&p.query, p.input_scale),
                LinearSlot::Key => (&p.key, p.input_scale),
                LinearSlot::Value => (&p.value, p.input_scale),
                LinearSlot::AttnOut => (&p.attn_out, p.context_scale),
                LinearSlot::Ffn1 => (&p.ffn1, p.ln1.out_scale),
                LinearSlot::Ffn2 => (&p.ffn2, p.ffn1.out_scale),
            };
            let tiling = Tiling {
                tiles: rng.gen_range(1..=16),
                pes: rng.gen_range(1..=64),
            };
            let x = QuantTensor::new(
                m,
                lp.weight.rows,
                rand_i8(rng, m * lp.weight.rows),
                in_scale,
            )
            .unwrap();
            let got = enc.linear(slot).forward(&x, tiling).unwrap();
            let want = if slot == LinearSlot::Ffn1 {
                reference::linear_gelu_layer(lp, &x.data, m, in_scale)
            } else {
                reference::linear_layer(lp, &x.data, m, in_scale)
            };
            tally.check(
                &format!("linear {slot:?} {tiling:?} {label}"),
                &got.data,
                &want,
            );
        }
        2 => {
            let num_pe = rng.gen_range(1..=16);
            let q = QuantTensor::new(m, d, rand_i8(rng, m * d), p.query.out_scale).unwrap();
            let k = QuantTensor::new(m, d, rand_i8(rng, m * d), p.key.out_scale).unwrap();
            let mut s = attention_dot_product(&q, &k, num_pe).unwrap();
            s.scale = enc.score_scale;
            let got = softmax_int(&s);
            tally.check(
                &format!("attention pe={num_pe} {label}"),
                &got.data,
                &reference::attention_probs(&q.data, &k.data, m, m, d, enc.score_scale),
            );
        }
        3 => {
            let num_pe = rng.gen_range(1..=16);
            let probs = QuantTensor::new(
                m,
                m,
                (0..m * m).map(|_| rng.gen_range(0..=127)).collect(),
                SOFTMAX_SCALE,
            )
            .unwrap();
            let v = QuantTensor::new(m, d, rand_i8(rng, m * d), p.value.out_scale).unwrap();
            let got = quant(
                &softmax_matmul(&probs, &v, num_pe).unwrap(),
                p.context_scale,
            );
            let want = reference::context(
                &probs.data,
                &v.data,
                m,
                m,
                d,
                p.value.out_scale,
                p.context_scale,
            );
            tally.check(&format!("context pe={num_pe} {label}"), &got.data, &want);
        }
        4 => {
            let slot = if rng.gen() {
                NormSlot::Ln1
            } else {
                NormSlot::Ln2
            };
            let (np, ms, ss) = match slot {
                NormSlot::Ln1 => (&p.ln1, p.attn_out.out_scale, p.input_scale),
                NormSlot::Ln2 => (&p.ln2, p.ffn2.out_scale, p.ln1.out_scale),
            };
            let (main, skip) = (rand_i8(rng, m * h), rand_i8(rng, m * h));
            let got: Vec<i8> = (0..m)
                .flat_map(|r| {
                    enc.norm_row(slot, &main[r * h..(r + 1) * h], &skip[r * h..(r + 1) * h])
                        .unwrap()
                })
                .collect();
            tally.check(
                &format!("norm {slot:?} {label}"),
                &got,
                &reference::norm_layer(np, &main, ms, &skip, ss, m),
            );
        }
        _ => {
            let x = QuantTensor::new(m, h, rand_i8(rng, m * h), p.input_scale).unwrap();
            let got = enc.forward(&x).unwrap();
            tally.check(
                &format!("encoder {label}"),
                &got.data,
                &reference::encoder(cfg, p, &x.data, m),
            );
        }
    }
}

#[test]
fn bit_exact_kernel_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut desk = KernelTally::default();
    for i in 0..1200 {
        let hidden = *[8usize, 16, 24, 32, 48, 64, 96, 128]
            .choose(&mut rng)
            .unwrap();
        let heads = *[1usize, 2, 4, 8]
            .iter()
            .filter(|&&a| hidden % a == 0)
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .unwrap();
        let cfg = EncoderConfig {
            m_max: 32,
            hidden,
            heads: *heads,
            ffn: hidden * rng.gen_range(1..=4),
            layers: 1,
            num_pe: rng.gen_range(1..=12),
            linear_tiles: rng.gen_range(1..=8),
            linear_pes: rng.gen_range(1..=16),
        };
        let model = generate(&cfg, 10_000 + i).unwrap();
        let m = rng.gen_range(1..=32);
        kernel_instance(&mut desk, &model, (i % 6) as usize, m, &mut rng);
    }
    let mut full = KernelTally::default();
    let model = generate(
        &EncoderConfig {
            layers: 1,
            ..EncoderConfig::ibert_base()
        },
        77,
    )
    .unwrap();
    for kind in [0, 0, 0, 0, 1, 2, 2, 3, 3, 4, 4, 5] {
        kernel_instance(&mut full, &model, kind, 128, &mut rng);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = desk.instances >= 1000
        && full.instances >= 10
        && desk.mismatched.is_empty()
        && full.mismatched.is_empty();
    verdict(
        6,
        "bit-exact kernels",
        ok && elapsed < 300.0,
        &format!(
            "{}/{} desk-scale and {}/{} full-size instances bit-exact, {elapsed:.1} s{}",
            desk.instances - desk.mismatched.len(),
            desk.instances,
            full.instances - full.mismatched.len(),
            full.instances,
            desk.mismatched
                .iter()
                .chain(&full.mismatched)
                .next()
                .map(|m| format!("; first mismatch: {m}"))
                .unwrap_or_default()
        ),
    );
}

#[test]
fn distributed_equals_monolithic() {
    let mut failures = Vec::new();
    let mut runs = 0;
    let mut kernel_count = 0;
    for layout in [true, false] {
        let (cd, ld) = single_encoder_desc(layout);
        let plan = build(&cd, &ld, ibert_base_fs()).unwrap();
        kernel_count = plan.clusters[0].kernels.len();
        let encoders = load_encoders(&plan).unwrap();
        let mono: Vec<Encoder> = encoders.iter().map(|e| (**e).clone()).collect();
        for (i, m) in [1usize, 38, 54, 128].into_iter().enumerate() {
            let x = random_input(m, 768, 700 + i as u64);
            let want = encoder_forward(&mono, &x).unwrap();
            let run = run_plan(&plan, &encoders, &[x], 1, SimOptions::default()).unwrap();
            runs += 1;
            if run.outputs.len() != 1 || run.outputs[0].data != want.data {
                failures.push(format!("M={m} on {} nodes", cd.nodes_per_cluster));
            }
        }
    }
    verdict(
        7,
        "distributed = monolithic",
        failures.is_empty() && kernel_count == 38,
        &format!(
            "{kernel_count}-kernel plan, {}/{runs} runs bit-identical for M in {{1, 38, 54, 128}} on 6-node and 1-node layouts{}",
            runs - failures.len(),
            if failures.is_empty() { String::new() } else { format!("; differing: {}", failures.join(", ")) }
        ),
    );
}

/// X/T/I of the output kernel when `inputs` are streamed one row every
/// `interval` cycles.
fn chain_components(
    plan: &ClusterPlan,
    x: &QuantTensor,
    interval: u64,
) -> gala::runtime::LatencyComponents {
    let encoders = load_encoders(plan).unwrap();
    let run = run_plan(
        plan,
        &encoders,
        std::slice::from_ref(x),
        interval,
        SimOptions::default(),
    )
    .unwrap();
    measure_xti(
        &run.result.trace,
        plan.output_kernel().unwrap(),
        plan.network.clock_hz,
        plan.network.switch_latency_s,
    )
    .unwrap()
}

#[test]
fn pipeline_model_self_consistency() {
    let fs = tiny_fs(4);
    let x = random_input(8, 8, 88);
    let single = build(
        &clusters(1, 1),
        &LayerDescription::ibert(Some(1)),
        fs.path(),
    )
    .unwrap();
    // Steady state: feed rows at the rate the encoder emits them, which is
    // the rate every downstream encoder sees.
    let interval = chain_components(&single, &x, 1).i.max(1);
    let one = chain_components(&single, &x, interval);
    let d_cycles = single.network.switch_latency_s * single.network.clock_hz;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for l in [2usize, 3, 4] {
        let chain = build(
            &clusters(l, 1),
            &LayerDescription::ibert(Some(l)),
            fs.path(),
        )
        .unwrap();
        let measured = chain_components(&chain, &x, interval).t as f64;
        let predicted = one.t as f64 + (l as f64 - 1.0) * (one.x as f64 + d_cycles);
        let err = rel(measured, predicted);
        worst = worst.max(err);
        parts.push(format!(
            "L={l}: {measured} vs {predicted} cycles ({:.2}%)",
            err * 100.0
        ));
    }
    verdict(
        8,
        "pipeline model self-consistency",
        worst < 0.01,
        &format!(
            "X={} T={} I={} from one encoder; {} (limit 1%)",
            one.x,
            one.t,
            one.i,
            parts.join(", ")
        ),
    );
}

struct Tag(u8);
impl KernelBehavior for Tag {
    fn on_message(&mut self, msg: Incoming) -> Reaction {
        let mut p = msg.payload[1..].to_vec();
        p.push(self.0);
        Reaction::single(Work::new(1, vec![Outgoing::new(0, p, msg.end_of_matrix)]))
    }
}

/// Three tagging members feeding a gather, whose result a broadcast returns
/// to the host on three ports.
fn allgather_deployment(g: GatherKernel, b: BroadcastKernel) -> Deployment {
    let addr = |k: u8| KernelAddress::new(0, k);
    let ep = |k: u8| Endpoint::Kernel(addr(k));
    let link = |from, from_port, to, to_port, gmi_dest| StreamSpec {
        from,
        from_port,
        to,
        to_port,
        capacity_bytes: 1 << 16,
        gmi_dest,
    };
    let mut kernels = vec![
        SimKernel {
            address: addr(4),
            kind: KernelKind::Gmi,
            node: NodeId(1),
            behavior: Box::new(g),
        },
        SimKernel {
            address: addr(5),
            kind: KernelKind::Gmi,
            node: NodeId(1),
            behavior: Box::new(b),
        },
    ];
    let mut streams = vec![link(ep(4), 0, ep(5), 0, None)];
    for m in 1..=3u8 {
        kernels.push(SimKernel {
            address: addr(m),
            kind: KernelKind::Compute,
            node: NodeId(u16::from(m) + 1),
            behavior: Box::new(Tag(m)),
        });
        streams.push(link(Endpoint::Host, usize::from(m) - 1, ep(m), 0, Some(m)));
        streams.push(link(ep(m), 0, ep(4), usize::from(m) - 1, None));
        streams.push(link(ep(5), usize::from(m) - 1, Endpoint::Host, 0, Some(0)));
    }
    let host = NodeId(999);
    let mut tables = RoutingTables::new(0);
    for k in &kernels {
        tables.local.insert(k.address.kernel, k.node);
    }
    let routing: BTreeMap<NodeId, RoutingTables> =
        kernels.iter().map(|k| (k.node, tables.clone())).collect();
    let topology = Topology::single_switch(kernels.iter().map(|k| k.node).chain([host]));
    Deployment {
        kernels,
        streams,
        routing,
        host_node: host,
        network: NetworkConfig {
            topology,
            ..NetworkConfig::default()
        },
    }
}

fn run_allgather(g: GatherKernel, b: BroadcastKernel) -> SimResult {
    let stim = Stimulus {
        items: (0..3)
            .map(|p| StimulusItem {
                cycle: 0,
                port: p,
                payload: vec![9; 4],
                end_of_matrix: true,
            })
            .collect(),
    };
    Simulator::new(allgather_deployment(g, b))
        .unwrap()
        .run(stim, SimOptions::default())
        .unwrap()
}

#[test]
fn gmi_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures: Vec<String> = Vec::new();
    let cases = 500;
    for case in 0..cases {
        let n = rng.gen_range(1..=8usize);
        let group: Vec<KernelAddress> = (1..=n as u8).map(|k| KernelAddress::new(0, k)).collect();
        let len = rng.gen_range(0..=200usize);
        let msg: Vec<u8> = (0..len).map(|_| rng.gen()).collect();

        let mut s = GmiKernelSpec::new(CollectiveOp::Scatter, group.clone(), group[0]);
        if rng.gen() {
            s.chunking = Some(len.div_ceil(n).max(1) + rng.gen_range(0..4));
        }
        let mut segs = scatter(&msg, &s).unwrap().segments;
        segs.shuffle(&mut rng);
        let g = GmiKernelSpec::new(CollectiveOp::Gather, group.clone(), group[0]);
        if gather(segs, &g).unwrap() != msg {
            failures.push(format!("case {case}: gather(scatter(m)) != m"));
        }

        let b = broadcast(
            &msg,
            &GmiKernelSpec::new(CollectiveOp::Broadcast, group.clone(), group[0]),
        );
        if b.len() != n
            || b.iter().any(|(_, p)| p != &msg)
            || b.iter().map(|(a, _)| *a).collect::<Vec<_>>() != group
        {
            failures.push(format!("case {case}: broadcast fan-out"));
        }

        let width = rng.gen_range(1..=16usize);
        let parts: Vec<Vec<i8>> = (0..n)
            .map(|_| (0..width).map(|_| rng.gen_range(-15..=15)).collect())
            .collect();
        let op = *[ReduceOp::Sum, ReduceOp::Min, ReduceOp::Max]
            .choose(&mut rng)
            .unwrap();
        let mut r = GmiKernelSpec::new(CollectiveOp::Reduce, group.clone(), group[0]);
        r.reduce_fn = op;
        r.width = ElemWidth::I8;
        let mut arrivals: Vec<(KernelAddress, Vec<u8>)> = group
            .iter()
            .zip(&parts)
            .map(|(a, p)| (*a, p.iter().map(|&v| v as u8).collect()))
            .collect();
        arrivals.shuffle(&mut rng);
        let mut fold = parts[0].clone();
        for part in &parts[1..] {
            for (acc, &v) in fold.iter_mut().zip(part) {
                *acc = match op {
                    ReduceOp::Sum => *acc + v,
                    ReduceOp::Min => (*acc).min(v),
                    ReduceOp::Max => (*acc).max(v),
                };
            }
        }
        if reduce(arrivals, &r).unwrap() != fold.iter().map(|&v| v as u8).collect::<Vec<_>>() {
            failures.push(format!("case {case}: reduce != sequential fold"));
        }

        let msgs: Vec<(KernelAddress, Vec<u8>)> = group
            .iter()
            .map(|a| (*a, vec![a.kernel; rng.gen_range(0..6)]))
            .collect();
        let all = allgather(msgs.clone(), &g).unwrap();
        if all != broadcast(&gather(msgs, &g).unwrap(), &g) {
            failures.push(format!("case {case}: allgather != broadcast . gather"));
        }
    }

    let (g, b) = allgather_stage(3);
    let fused = run_allgather(g, b);
    let composed = run_allgather(GatherKernel::new(3), BroadcastKernel { members: 3 });
    if fused.trace != composed.trace || fused.host_outputs.len() != 3 {
        failures.push("allgather stage trace differs from gather then broadcast".into());
    }

    let fs = tiny_fs(3);
    let (mut inter, mut intra) = (0, 0);
    for nodes in [1, 2] {
        let plan = build(
            &clusters(3, nodes),
            &LayerDescription::ibert(None),
            fs.path(),
        )
        .unwrap();
        let encoders = load_encoders(&plan).unwrap();
        let run = run_plan(
            &plan,
            &encoders,
            &[random_input(6, 8, 1), random_input(3, 8, 2)],
            1,
            SimOptions::default(),
        )
        .unwrap();
        for e in run
            .result
            .trace
            .of_kind(EventKind::Send)
            .chain(run.result.trace.of_kind(EventKind::Recv))
        {
            let (Some(Endpoint::Kernel(s)), Some(Endpoint::Kernel(d))) = (e.src, e.dst) else {
                continue;
            };
            if s.cluster == d.cluster {
                intra += 1;
                if e.gmi_bytes != 0 {
                    failures.push(format!("intra-cluster packet with header: {e:?}"));
                }
            } else {
                inter += 1;
                if e.gmi_bytes != 1 || !d.is_gateway() {
                    failures.push(format!(
                        "inter-cluster packet without exactly one header at a gateway: {e:?}"
                    ));
                }
            }
        }
    }
    verdict(
        9,
        "GMI algebra",
        failures.is_empty() && inter > 0 && intra > 0,
        &format!(
            "{cases} random cases of scatter/gather, broadcast, reduce, allgather; allgather trace-equivalent; header audit over {inter} inter- and {intra} intra-cluster packet events{}",
            failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()
        ),
    );
}

#[test]
fn builder_conformance() {
    let start = Instant::now();
    let plan = build(
        &ibert_base_cluster_desc(),
        &ibert_base_layer_desc(),
        ibert_base_fs(),
    )
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let mut ok = plan.clusters.len() == 12;
    for c in &plan.clusters {
        let gmi = c
            .kernels
            .iter()
            .filter(|k| matches!(k.role, KernelRole::Gmi { .. } | KernelRole::Gateway { .. }))
            .count();
        let ids: Vec<u8> = c.kernels.iter().map(|k| k.address.kernel).collect();
        ok &= c.kernels.len() == 38
            && gmi == 6
            && matches!(c.kernels[0].role, KernelRole::Gateway { .. })
            && c.kernels[0].address.kernel == 0
            && ids == (0..38).collect::<Vec<u8>>();
    }

    let tiny = tiny_fs(3);
    let layers: Vec<LayerSpec> = (0..300)
        .map(|i| LayerSpec {
            name: format!("l{i}"),
            module: ModuleKind::Linear,
            slot: Some("out".into()),
            inputs: vec![if i == 0 {
                "input".into()
            } else {
                format!("l{}", i - 1)
            }],
            hw: HwConfig::default(),
        })
        .collect();
    let big = LayerDescription {
        encoders: Some(1),
        layers,
        output: "l299".into(),
    };
    let too_many_kernels = build(&clusters(1, 1), &big, tiny.path());
    let too_many_clusters = build(
        &clusters(257, 1),
        &LayerDescription::ibert(None),
        tiny.path(),
    );
    ok &= matches!(
        too_many_kernels,
        Err(BuildError::TooManyKernels { limit: 256, .. })
    );
    ok &= matches!(
        too_many_clusters,
        Err(BuildError::TooManyClusters {
            count: 257,
            limit: 256
        })
    );
    verdict(
        10,
        "builder conformance",
        ok,
        &format!(
            "{} clusters x {:?} kernels, 6 GMI kernels each, gateway at 0, IDs 0..38 contiguous, built in {elapsed:.2} s; 300-kernel cluster: {}; 257 clusters: {}",
            plan.clusters.len(),
            plan.clusters.iter().map(|c| c.kernels.len()).collect::<std::collections::BTreeSet<_>>(),
            too_many_kernels.map(|_| "accepted".to_string()).unwrap_or_else(|e| e.to_string()),
            too_many_clusters.map(|_| "accepted".to_string()).unwrap_or_else(|e| e.to_string())
        ),
    );
}

/// What `gala run` does: load the plan file, simulate, serialize the trace
/// and output blobs.
fn run_artifacts(plan_path: &Path, x: &QuantTensor, seed: u64) -> (String, Vec<u8>) {
    let mut plan = ClusterPlan::load(plan_path).unwrap();
    plan.network.seed = seed;
    let encoders: Vec<Arc<Encoder>> = load_encoders(&plan).unwrap();
    let run = run_plan(
        &plan,
        &encoders,
        std::slice::from_ref(x),
        1,
        SimOptions::default(),
    )
    .unwrap();
    let mut blob = Vec::new();
    for y in &run.outputs {
        write_tensor_blob(&mut blob, y).unwrap();
    }
    (run.result.trace.to_csv(), blob)
}

#[test]
fn determinism() {
    let fs = tiny_fs(3);
    let mut cd = clusters(3, 2);
    cd.network.loss_probability = 0.0;
    let plan = build(&cd, &LayerDescription::ibert(None), fs.path()).unwrap();
    let path = fs.path().join("plan.json");
    plan.save(&path).unwrap();
    let x = random_input(7, 8, 3);
    let a = run_artifacts(&path, &x, 5);
    let b = run_artifacts(&path, &x, 5);
    let rebuilt = build(&cd, &LayerDescription::ibert(None), fs.path()).unwrap();
    let ok = a == b && rebuilt.to_json() == plan.to_json() && !a.0.is_empty();
    verdict(
        11,
        "determinism",
        ok,
        &format!("two runs: {} trace bytes and {} output bytes, identical = {}; rebuilt plan identical = {}", a.0.len(), a.1.len(), a == b, rebuilt.to_json() == plan.to_json()),
    );
}
