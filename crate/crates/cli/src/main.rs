//! `gala`: generate or import a model file system, build a deployment plan,
//! simulate it, verify it bit-exactly and estimate latency.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gala::builder::{
    build, default_interval, emit_skeleton, load_encoders, read_json, run_plan, verify_plan,
    BuildError, ClusterDescription, ClusterPlan, LayerDescription,
};
use gala::ibert::{
    generate, import_model, read_tensor_blob, write_archive, write_model_fs, write_tensor_blob,
    EncoderConfig, IbertError, QuantTensor,
};
use gala::perfmodel::{
    end_to_end_latency, end_to_end_latency_without_switch, ibert_allocation, latency_csv,
    latency_table, latency_text, micros_from_seconds, routing_state_bound, throughput, versal_csv,
    versal_estimate, versal_text, CycleTable, LatencyRow, PerfError, PipelineModel, VersalParams,
    DEFAULT_CLOCK_HZ, SWITCH_LATENCY_S,
};
use gala::runtime::{measure_xti, LatencyComponents, SimOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "gala",
    version,
    about = "Multi-FPGA streaming-kernel cluster toolchain"
)]
struct Cli {
    /// Directory searched for relative description and table paths that do
    /// not exist under the working directory.
    #[arg(long, global = true, env = "GALA_CONFIG_DIR")]
    config_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    IbertBase,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Ultrascale,
    Versal,
}

#[derive(Subcommand)]
enum Command {
    /// Unpack a model archive into a model file system.
    Import {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic, deterministic model.
    GenModel {
        #[arg(long, value_enum, default_value = "tiny")]
        preset: Preset,
        /// Override the number of encoders.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model file system directory.
        #[arg(long, required_unless_present = "archive")]
        out: Option<PathBuf>,
        /// Write a single-file archive instead of (or as well as) the file system.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Write a random INT8 input matrix blob.
    GenInput {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a deployment plan from cluster and layer descriptions.
    Build {
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long)]
        layers: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one kernel source outline per kernel here.
        #[arg(long)]
        emit_skeleton: Option<PathBuf>,
        /// Validation report (CSV).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Simulate a plan on input blobs.
    Run {
        #[arg(long)]
        plan: PathBuf,
        /// Input matrices, streamed back to back.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// One output blob per input.
        #[arg(long, required = true, num_args = 1..)]
        output: Vec<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// X/T/I report (key = value).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Seed of the network loss model.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        cycle_budget: Option<u64>,
        /// Cycles between injected rows; defaults to one row per link slot.
        #[arg(long)]
        interval: Option<u64>,
    },
    /// Latency and throughput estimate.
    Estimate {
        /// Cycle table, CSV `seq,X,T,I`.
        #[arg(long, conflicts_with = "report")]
        table: Option<PathBuf>,
        /// X/T/I report written by `run`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ultrascale")]
        target: Target,
        /// Number of encoders.
        #[arg(long = "L", default_value_t = 12)]
        layers: usize,
        /// Switch latency in seconds.
        #[arg(long)]
        d: Option<f64>,
        /// Clock in Hz.
        #[arg(long)]
        f: Option<f64>,
        /// Extra sequence lengths, interpolated from the table.
        #[arg(long, num_args = 1..)]
        seq: Vec<usize>,
        /// Sequence length for `--report` throughput and the Versal allocation.
        #[arg(long, default_value_t = 128)]
        m: usize,
        /// Machine-readable copy of the report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare every compute kernel, and the whole plan, with the scalar oracles.
    Verify {
        #[arg(long)]
        plan: PathBuf,
        /// Only kernels whose name contains this.
        #[arg(long)]
        kernel: Option<String>,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_end_to_end: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Validation,
    Simulation,
    Io,
}

impl Category {
    fn code(self) -> u8 {
        match self {
            Category::Validation => 1,
            Category::Simulation => 2,
            Category::Io => 3,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Validation => "validation",
            Category::Simulation => "simulation",
            Category::Io => "io",
        })
    }
}

struct Failure {
    category: Category,
    error: anyhow::Error,
}

type Outcome<T> = Result<T, Failure>;

fn fail(category: Category, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        category,
        error: error.into(),
    }
}

impl From<BuildError> for Failure {
    fn from(e: BuildError) -> Self {
        let category = match e {
            BuildError::Sim(_) => Category::Simulation,
            BuildError::Io(_) => Category::Io,
            _ => Category::Validation,
        };
        fail(category, e)
    }
}

impl From<IbertError> for Failure {
    fn from(e: IbertError) -> Self {
        let category = if matches!(e, IbertError::Io(_)) {
            Category::Io
        } else {
            Category::Validation
        };
        fail(category, e)
    }
}

impl From<PerfError> for Failure {
    fn from(e: PerfError) -> Self {
        let category = if matches!(e, PerfError::Io(_)) {
            Category::Io
        } else {
            Category::Validation
        };
        fail(category, e)
    }
}

fn io_err(e: std::io::Error, path: &Path) -> Failure {
    fail(
        Category::Io,
        anyhow::Error::new(e).context(path.display().to_string()),
    )
}

fn write_file(path: &Path, contents: &str) -> Outcome<()> {
    fs::write(path, contents).map_err(|e| io_err(e, path))
}

fn must_exist(path: &Path) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(fail(
            Category::Io,
            anyhow::anyhow!("{} does not exist", path.display()),
        ))
    }
}

struct Ctx {
    config_dir: Option<PathBuf>,
}

impl Ctx {
    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.config_dir {
            Some(dir) if path.is_relative() && !path.exists() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        config_dir: cli.config_dir,
    };
    match dispatch(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.category, f.error);
            for cause in f.error.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::from(f.category.code())
        }
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> Outcome<()> {
    match command {
        Command::Import { archive, out } => {
            must_exist(&archive)?;
            let model = import_model(&archive, &out)?;
            println!(
                "imported {} encoders ({}) into {}",
                model.encoders.len(),
                describe(&model.config),
                out.display()
            );
            Ok(())
        }
        Command::GenModel {
            preset,
            layers,
            seed,
            out,
            archive,
        } => {
            let mut cfg = match preset {
                Preset::Tiny => EncoderConfig::tiny(),
                Preset::IbertBase => EncoderConfig::ibert_base(),
            };
            if let Some(l) = layers {
                cfg.layers = l;
            }
            let model = generate(&cfg, seed)?;
            if let Some(dir) = &out {
                write_model_fs(dir, &model)?;
                println!(
                    "wrote model file system {} ({})",
                    dir.display(),
                    describe(&cfg)
                );
            }
            if let Some(path) = &archive {
                let f = fs::File::create(path).map_err(|e| io_err(e, path))?;
                let mut w = BufWriter::new(f);
                write_archive(&mut w, &model)?;
                w.flush().map_err(|e| io_err(e, path))?;
                println!("wrote archive {}", path.display());
            }
            Ok(())
        }
        Command::GenInput {
            rows,
            cols,
            seed,
            out,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = QuantTensor::new(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen()).collect(),
                1.0,
            )?;
            let mut w = BufWriter::new(fs::File::create(&out).map_err(|e| io_err(e, &out))?);
            write_tensor_blob(&mut w, &t)?;
            w.flush().map_err(|e| io_err(e, &out))?;
            Ok(())
        }
        Command::Build {
            cluster,
            layers,
            model,
            out,
            emit_skeleton: skeleton,
            report,
        } => cmd_build(
            ctx,
            &cluster,
            &layers,
            &model,
            &out,
            skeleton.as_deref(),
            report.as_deref(),
        ),
        Command::Run {
            plan,
            input,
            output,
            trace,
            report,
            seed,
            cycle_budget,
            interval,
        } => cmd_run(RunArgs {
            plan,
            inputs: input,
            outputs: output,
            trace,
            report,
            seed,
            cycle_budget,
            interval,
        }),
        Command::Estimate {
            table,
            report,
            target,
            layers,
            d,
            f,
            seq,
            m,
            csv,
        } => cmd_estimate(
            ctx,
            table,
            report,
            target,
            layers,
            d,
            f,
            &seq,
            m,
            csv.as_deref(),
        ),
        Command::Verify {
            plan,
            kernel,
            rows,
            seed,
            no_end_to_end,
            csv,
        } => {
            must_exist(&plan)?;
            let plan = ClusterPlan::load(&plan)?;
            let encoders = load_encoders(&plan)?;
            let report = verify_plan(
                &plan,
                &encoders,
                rows,
                seed,
                kernel.as_deref(),
                !no_end_to_end,
            )?;
            print!("{}", report.to_text());
            if let Some(path) = &csv {
                write_file(path, &report.to_csv())?;
            }
            if report.pass() {
                Ok(())
            } else {
                Err(fail(
                    Category::Validation,
                    anyhow::anyhow!("oracle mismatch"),
                ))
            }
        }
    }
}

fn describe(cfg: &EncoderConfig) -> String {
    format!(
        "{} encoders, H={}, A={}, FFN={}, M<={}",
        cfg.layers, cfg.hidden, cfg.heads, cfg.ffn, cfg.m_max
    )
}

fn cmd_build(
    ctx: &Ctx,
    cluster: &Path,
    layers: &Path,
    model: &Path,
    out: &Path,
    skeleton: Option<&Path>,
    report: Option<&Path>,
) -> Outcome<()> {
    let (cluster, layers) = (ctx.resolve(cluster), ctx.resolve(layers));
    for p in [&cluster, &layers, &model.to_path_buf()] {
        must_exist(p)?;
    }
    let cd: ClusterDescription = read_json(&cluster)?;
    let ld: LayerDescription = read_json(&layers)?;
    let plan = build(&cd, &ld, model)?;
    plan.save(out)?;
    let n = plan.clusters.len();
    let bound = routing_state_bound(n, n)?;
    let mut csv = String::from("cluster,kernels,compute,communication,virtual\n");
    println!(
        "plan {} : {n} clusters, {} encoders",
        out.display(),
        plan.encoders
    );
    for c in &plan.clusters {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.id,
            c.kernels.len(),
            c.ids.compute.len(),
            c.ids.communication.len(),
            c.ids.virtual_ids.len()
        ));
    }
    let sizes: Vec<usize> = plan.clusters.iter().map(|c| c.kernels.len()).collect();
    println!("kernels per cluster: {sizes:?}");
    println!(
        "stored addresses per node: max {} (gateway scheme bound {} for N={n}; full mesh would need {})",
        plan.max_stored_addresses(),
        bound.gateway,
        bound.full_mesh
    );
    println!("validation: ok");
    if let Some(path) = report {
        write_file(path, &csv)?;
    }
    if let Some(dir) = skeleton {
        let files = emit_skeleton(&plan, dir)?;
        println!(
            "wrote {} kernel outlines under {}",
            files.len(),
            dir.display()
        );
    }
    Ok(())
}

struct RunArgs {
    plan: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
    seed: Option<u64>,
    cycle_budget: Option<u64>,
    interval: Option<u64>,
}

fn cmd_run(a: RunArgs) -> Outcome<()> {
    if a.inputs.len() != a.outputs.len() {
        return Err(fail(
            Category::Validation,
            anyhow::anyhow!("{} inputs but {} outputs", a.inputs.len(), a.outputs.len()),
        ));
    }
    must_exist(&a.plan)?;
    let mut plan = ClusterPlan::load(&a.plan)?;
    if let Some(seed) = a.seed {
        plan.network.seed = seed;
    }
    let encoders = load_encoders(&plan)?;
    let scale = encoders[0].input_scale;
    let mut xs = Vec::new();
    for path in &a.inputs {
        let f = fs::File::open(path).map_err(|e| io_err(e, path))?;
        xs.push(
            read_tensor_blob(&mut BufReader::new(f), scale)
                .map_err(|e| fail(Category::Validation, e).context(path))?,
        );
    }
    let interval = a.interval.unwrap_or_else(|| default_interval(&plan));
    let run = run_plan(
        &plan,
        &encoders,
        &xs,
        interval,
        SimOptions {
            cycle_budget: a.cycle_budget,
        },
    )?;
    if let Some(path) = &a.trace {
        write_file(path, &run.result.trace.to_csv())?;
    }
    if run.result.trace.incomplete {
        return Err(fail(
            Category::Simulation,
            anyhow::anyhow!(
                "cycle budget exhausted at cycle {} before all outputs drained",
                run.result.end_cycle
            ),
        ));
    }
    if run.outputs.len() != xs.len() {
        return Err(fail(
            Category::Simulation,
            anyhow::anyhow!("{} inputs produced {} outputs", xs.len(), run.outputs.len()),
        ));
    }
    for (y, path) in run.outputs.iter().zip(&a.outputs) {
        let mut w = BufWriter::new(fs::File::create(path).map_err(|e| io_err(e, path))?);
        write_tensor_blob(&mut w, y)?;
        w.flush().map_err(|e| io_err(e, path))?;
    }
    let observer = plan
        .output_kernel()
        .ok_or_else(|| fail(Category::Validation, anyhow::anyhow!("plan has no output")))?;
    let xti = measure_xti(
        &run.result.trace,
        observer,
        plan.network.clock_hz,
        plan.network.switch_latency_s,
    )
    .map_err(|e| fail(Category::Simulation, e))?;
    println!(
        "simulated {} cycles, {} trace events",
        run.result.end_cycle,
        run.result.trace.events.len()
    );
    print!("{xti}");
    if let Some(path) = &a.report {
        write_file(path, &xti.to_string())?;
    }
    Ok(())
}

trait WithPath {
    fn context(self, path: &Path) -> Self;
}

impl WithPath for Failure {
    fn context(self, path: &Path) -> Self {
        Failure {
            category: self.category,
            error: self.error.context(path.display().to_string()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    ctx: &Ctx,
    table: Option<PathBuf>,
    report: Option<PathBuf>,
    target: Target,
    layers: usize,
    d: Option<f64>,
    f: Option<f64>,
    seqs: &[usize],
    m: usize,
    csv: Option<&Path>,
) -> Outcome<()> {
    let (text, machine) = match target {
        Target::Versal => {
            let mut p = VersalParams {
                layers: layers as i64,
                ..VersalParams::default()
            };
            if let Some(d) = d {
                p.switch_latency_us = micros_from_seconds(d);
            }
            let e = versal_estimate(
                &ibert_allocation(&EncoderConfig::ibert_base(), m as u64),
                &p,
            )?;
            (versal_text(&e), versal_csv(&e))
        }
        Target::Ultrascale => {
            let d = d.unwrap_or(SWITCH_LATENCY_S);
            let f = f.unwrap_or(DEFAULT_CLOCK_HZ);
            let rows = match (table, report) {
                (Some(t), _) => {
                    let path = ctx.resolve(&t);
                    must_exist(&path)?;
                    latency_table(&CycleTable::load(&path)?, layers, d, f, seqs)?
                }
                (None, Some(r)) => {
                    let path = ctx.resolve(&r);
                    let text = fs::read_to_string(&path).map_err(|e| io_err(e, &path))?;
                    let c: LatencyComponents = text
                        .parse()
                        .map_err(|e| fail(Category::Validation, e).context(&path))?;
                    let model =
                        PipelineModel::new(layers, c.x as f64, c.t as f64, c.i as f64, d, f)?;
                    vec![LatencyRow {
                        seq: m,
                        x: model.x,
                        t: model.t,
                        i: model.i,
                        latency_s: end_to_end_latency(&model),
                        latency_no_switch_s: end_to_end_latency_without_switch(&model),
                        throughput: throughput(&model, m),
                    }]
                }
                (None, None) => {
                    return Err(fail(
                        Category::Validation,
                        anyhow::anyhow!("one of --table or --report is required"),
                    ))
                }
            };
            (latency_text(&rows, layers, d, f), latency_csv(&rows))
        }
    };
    print!("{text}");
    if let Some(path) = csv {
        write_file(path, &machine)?;
    }
    Ok(())
}
