//! `diffzsl`: train, adapt, generate, evaluate and check the theory suite
//! from one JSON run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use diffzsl::checkpoint::Checkpoint;
use diffzsl::exec::Exec;
use diffzsl::gan::trace_csv;
use diffzsl::genstage::{harmonic_mean, projection_csv, EvalReport};
use diffzsl::pipeline::{self, Method, RunConfig, SweepRow};
use diffzsl::theory::{run_suite, CheckRecord, SuiteConfig};
use serde_json::{json, Value};

/// Overrides the output directory of every command.
const OUT_ENV: &str = "DIFFZSL_OUT";

#[derive(Parser)]
#[command(
    name = "diffzsl",
    version,
    about = "Diffusion-augmented generative zero-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of each seen class's training rows kept.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory (beats DIFFZSL_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CkptArg {
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PathArgs {
    #[arg(long, value_enum, default_value = "diffgen")]
    method: MethodArg,
    /// Test-time adaptation before partial-denoise generation; defaults to
    /// the config's `gen.tta`.
    #[arg(long)]
    tta: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fngen,
    Diffgen,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the encoders and the generator; writes the checkpoint and trace.
    Train(Common),
    /// Adapt a checkpoint's generator to the pseudo-labelled unseen rows.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CkptArg,
    },
    /// Synthesize unseen features; writes provenance and projection CSVs.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CkptArg,
        #[command(flatten)]
        path: PathArgs,
    },
    /// Evaluate one inference path; writes the report and the N_syn sweep.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CkptArg,
        #[command(flatten)]
        path: PathArgs,
        /// Comma-separated N_syn values, replacing the config's sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
    },
    /// Run the numerical property checks.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        /// Cases per check family.
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Summarise everything found in the output directory.
    Report(Common),
}

/// A failure and the exit code it maps to: 2 for bad input, 1 otherwise.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        err: err.into(),
    }
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        err: err.into(),
    }
}

fn core(err: diffzsl::Error) -> Failure {
    match err {
        diffzsl::Error::DimensionMismatch(_) | diffzsl::Error::InvalidArgument(_) => usage(err),
        _ => runtime(err),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Train(common) => train(&Ctx::new(&common)?),
        Cmd::Adapt { common, ckpt } => adapt(&Ctx::new(&common)?, &ckpt),
        Cmd::Generate { common, ckpt, path } => generate(&Ctx::new(&common)?, &ckpt, &path),
        Cmd::Evaluate {
            common,
            ckpt,
            path,
            sweep,
        } => {
            let mut ctx = Ctx::new(&common)?;
            if let Some(s) = sweep {
                ctx.cfg.n_syn_sweep = s;
                ctx.cfg.validate().map_err(core)?;
            }
            evaluate(&ctx, &ckpt, &path)
        }
        Cmd::TheoryCheck { common, cases } => theory(&Ctx::new(&common)?, cases),
        Cmd::Report(common) => report(&Ctx::new(&common)?),
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Outcome<Self> {
        let mut cfg = match &c.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))
                    .map_err(usage)?;
                serde_json::from_str::<RunConfig>(&text)
                    .with_context(|| format!("invalid config {}", p.display()))
                    .map_err(usage)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(r) = c.ratio {
            cfg.ratio = r;
        }
        if let Some(e) = c.epochs {
            cfg.train.epochs = e;
        }
        if let Some(o) = c
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        {
            cfg.out_dir = o;
        }
        cfg.validate().map_err(core)?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out)
            .with_context(|| format!("cannot create output directory {}", out.display()))
            .map_err(runtime)?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn checkpoint(&self, arg: &CkptArg) -> Outcome<Checkpoint> {
        let p = arg
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.path("checkpoint.bin"));
        if !p.exists() {
            return Err(usage(anyhow!("checkpoint {} does not exist", p.display())));
        }
        Checkpoint::load(&p)
            .with_context(|| format!("cannot load checkpoint {}", p.display()))
            .map_err(runtime)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Outcome {
    let mut s = serde_json::to_string_pretty(v).map_err(runtime)?;
    s.push('\n');
    write(path, s)
}

fn train(ctx: &Ctx) -> Outcome {
    let (ckpt, trace, _) = pipeline::run_training(&ctx.cfg).map_err(core)?;
    write(
        &ctx.path("checkpoint.bin"),
        ckpt.to_bytes().map_err(runtime)?,
    )?;
    write(&ctx.path("trace.csv"), trace_csv(&trace))
}

fn adapt(ctx: &Ctx, arg: &CkptArg) -> Outcome {
    let ckpt = ctx.checkpoint(arg)?;
    let data = pipeline::embed_for(&ctx.cfg, &ckpt).map_err(core)?;
    let model = pipeline::adapt(&ctx.cfg, &ckpt.model, &data).map_err(core)?;
    let adapted = Checkpoint { model, ..ckpt };
    write(
        &ctx.path("adapted.bin"),
        adapted.to_bytes().map_err(runtime)?,
    )
}

fn resolve(ctx: &Ctx, p: &PathArgs) -> (Method, bool, String) {
    let tta = p.tta.unwrap_or(ctx.cfg.gen.tta);
    match p.method {
        MethodArg::Fngen => (Method::Fngen, false, "fngen".into()),
        MethodArg::Diffgen if tta => (Method::Diffgen, true, "diffgen_tta".into()),
        MethodArg::Diffgen => (Method::Diffgen, false, "diffgen".into()),
    }
}

fn generate(ctx: &Ctx, arg: &CkptArg, p: &PathArgs) -> Outcome {
    let ckpt = ctx.checkpoint(arg)?;
    let data = pipeline::embed_for(&ctx.cfg, &ckpt).map_err(core)?;
    let (method, tta, tag) = resolve(ctx, p);
    let synth = pipeline::synthesize(&ctx.cfg, &ckpt.model, &data, method, tta, ctx.cfg.gen.n_syn)
        .map_err(core)?;
    write(
        &ctx.path(&format!("provenance_{tag}.csv")),
        synth.provenance_csv(),
    )?;
    let rows = data.visual.unseen_rows();
    let real = data.visual.features.select_rows(&rows);
    let labels: Vec<usize> = rows.iter().map(|&i| data.visual.labels[i]).collect();
    let mut rng = ctx.cfg.root_rng().substream("gen").substream("projection");
    let proj = projection_csv(&real, &labels, &synth, &mut rng).map_err(core)?;
    write(&ctx.path(&format!("projection_{tag}.csv")), proj)
}

fn check_sweep(rows: &[SweepRow], want: &[usize]) -> anyhow::Result<()> {
    if rows.len() != want.len() || rows.iter().zip(want).any(|(r, &n)| r.n_syn != n) {
        return Err(anyhow!(
            "sweep rows do not match the requested N_syn values"
        ));
    }
    for r in rows {
        if (harmonic_mean(r.u, r.s) - r.h).abs() > 1e-9 {
            return Err(anyhow!("sweep row N_syn={} has inconsistent H", r.n_syn));
        }
    }
    Ok(())
}

fn evaluate(ctx: &Ctx, arg: &CkptArg, p: &PathArgs) -> Outcome {
    let ckpt = ctx.checkpoint(arg)?;
    let data = pipeline::embed_for(&ctx.cfg, &ckpt).map_err(core)?;
    let (method, tta, tag) = resolve(ctx, p);
    let (report, _) =
        pipeline::run_inference(&ctx.cfg, &ckpt.model, &data, method, tta).map_err(core)?;
    report.validate().map_err(runtime)?;
    println!(
        "{tag}: T1 {:.2}  U {:.2}  S {:.2}  H {:.2}",
        report.t1, report.u, report.s, report.h
    );
    write_json(&ctx.path(&format!("report_{tag}.json")), &report)?;
    if !ctx.cfg.n_syn_sweep.is_empty() {
        let rows = pipeline::sweep(&ctx.cfg, &ckpt.model, &data, method, tta).map_err(core)?;
        check_sweep(&rows, &ctx.cfg.n_syn_sweep).map_err(runtime)?;
        let mut csv = String::from("n_syn,t1,u,s,h\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                r.n_syn, r.t1, r.u, r.s, r.h
            ));
        }
        write(&ctx.path(&format!("sweep_{tag}.csv")), csv)?;
    }
    Ok(())
}

fn check_records(recs: &[CheckRecord]) -> anyhow::Result<()> {
    for (i, r) in recs.iter().enumerate() {
        if r.check.is_empty() || !r.inputs.is_object() || !r.values.is_object() {
            return Err(anyhow!("theory record {i} is malformed"));
        }
    }
    Ok(())
}

fn theory(ctx: &Ctx, cases: Option<usize>) -> Outcome {
    let suite = match cases {
        Some(n) => SuiteConfig {
            mc_samples: ctx.cfg.theory.mc_samples,
            n_noise: ctx.cfg.theory.n_noise,
            ..SuiteConfig::uniform(n)
        },
        None => ctx.cfg.theory,
    };
    let sched = ctx.cfg.schedule.build().map_err(core)?;
    let rng = ctx.cfg.root_rng().substream("theory");
    let recs = run_suite(&suite, &sched, &rng, Exec::default()).map_err(core)?;
    check_records(&recs).map_err(runtime)?;
    write_json(&ctx.path("theory.json"), &recs)?;
    let failed = recs.iter().filter(|r| !r.holds).count();
    println!("{} checks, {failed} failed", recs.len());
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} theory checks do not hold")));
    }
    Ok(())
}

/// Last row of the trace CSV keyed by column; non-finite values become null.
fn final_trace(path: &Path) -> anyhow::Result<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| anyhow!("{} is empty", path.display()))?
        .split(',')
        .collect();
    let Some(last) = lines.last() else {
        return Ok(None);
    };
    let mut row = serde_json::Map::new();
    for (k, v) in header.iter().zip(last.split(',')) {
        let bad = || format!("bad value {v:?} in {}", path.display());
        let val = if *k == "epoch" {
            json!(v.parse::<usize>().with_context(bad)?)
        } else {
            let x: f64 = v.parse().with_context(bad)?;
            if x.is_finite() {
                json!(x)
            } else {
                Value::Null
            }
        };
        row.insert((*k).into(), val);
    }
    Ok(Some(Value::Object(row)))
}

fn report(ctx: &Ctx) -> Outcome {
    let mut reports = BTreeMap::new();
    for tag in ["fngen", "diffgen", "diffgen_tta"] {
        let p = ctx.path(&format!("report_{tag}.json"));
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(runtime)?;
            let r: EvalReport = serde_json::from_str(&text)
                .with_context(|| format!("invalid report {}", p.display()))
                .map_err(runtime)?;
            r.validate()
                .with_context(|| format!("invalid report {}", p.display()))
                .map_err(runtime)?;
            println!(
                "{tag:<12} T1 {:>6.2}  U {:>6.2}  S {:>6.2}  H {:>6.2}",
                r.t1, r.u, r.s, r.h
            );
            reports.insert(tag, json!({"t1": r.t1, "u": r.u, "s": r.s, "h": r.h}));
        }
    }
    let theory = ctx.path("theory.json");
    let theory = if theory.exists() {
        let recs: Vec<Value> =
            serde_json::from_str(&std::fs::read_to_string(&theory).map_err(runtime)?)
                .map_err(runtime)?;
        let failed = recs
            .iter()
            .filter(|r| r["holds"] != Value::Bool(true))
            .count();
        println!("theory       {} checks, {failed} failed", recs.len());
        json!({"checks": recs.len(), "failed": failed})
    } else {
        Value::Null
    };
    let trace = final_trace(&ctx.path("trace.csv")).map_err(runtime)?;
    if trace.is_none() && reports.is_empty() && theory.is_null() {
        return Err(usage(anyhow!("nothing to report in {}", ctx.out.display())));
    }
    write_json(
        &ctx.path("summary.json"),
        &json!({"seed": ctx.cfg.seed, "ratio": ctx.cfg.ratio, "final_epoch": trace, "reports": reports, "theory": theory}),
    )
}
