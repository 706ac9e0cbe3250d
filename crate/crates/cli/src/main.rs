use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use pimsim_cli::events::{channel_events, write_events};
use pimsim_cli::run::{csv_bytes, rebuild, row_dir, sweep_to_dir, RESULTS_CSV};
use pimsim_cli::spec::{expand, resolve, ExperimentSpec, StrategyArg, DEFAULT_PREFILL, DEFAULT_SEQ_GAP};
use pimsim_cli::verify::verify;
use pimsim_core::compiler::lower::compile_token;
use pimsim_core::compiler::{trace_manifest, write_traces, CompileOptions, Phase};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pimsim", version, about = "Compile, simulate and cost LLM inference on CXL-attached PIM devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map a model and write the plan and one token's device traces.
    Compile {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Token position to compile; the first decode position by default.
        #[arg(long)]
        pos: Option<usize>,
    },
    /// Run decode tokens through the functional simulator and compare with the float references.
    Verify {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 8)]
        tokens: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Simulate every combination of --devices and --context and write one CSV row each.
    Simulate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Also write the DRAM command log of one device for the first decode token.
        #[arg(long)]
        event_log: bool,
        /// Device whose command log is written; the first active one by default.
        #[arg(long)]
        event_device: Option<u32>,
    },
    /// Rebuild the CSV table from the artifacts in DIR and check it against results.csv.
    Report { dir: PathBuf },
    /// Run a JSON list of experiment specs.
    Sweep {
        /// JSON array of experiment specs.
        #[arg(long)]
        specs: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pp")]
    strategy: StrategyArg,
    /// Device counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    devices: Vec<u32>,
    #[arg(long)]
    tp: Option<u32>,
    #[arg(long)]
    pp: Option<u32>,
    #[arg(long, default_value_t = 1)]
    dp: u32,
    #[arg(long, default_value_t = DEFAULT_PREFILL)]
    prefill: usize,
    /// Decode tokens; context minus prefill when --context is given.
    #[arg(long)]
    decode: Option<usize>,
    /// Context lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    context: Vec<usize>,
    /// Simulate every k-th token position and interpolate in between.
    #[arg(long, default_value_t = DEFAULT_SEQ_GAP)]
    seq_gap: usize,
    /// Architecture override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Energy parameter file replacing the architecture's.
    #[arg(long)]
    energy: Option<PathBuf>,
    /// Cost parameter file replacing the architecture's.
    #[arg(long)]
    cost: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl ExperimentArgs {
    fn base(&self) -> ExperimentSpec {
        ExperimentSpec {
            model: self.model.clone(),
            arch: self.arch.clone(),
            set: self.set.clone(),
            energy: self.energy.clone(),
            cost: self.cost.clone(),
            strategy: self.strategy,
            devices: None,
            tp: self.tp,
            pp: self.pp,
            dp: self.dp,
            prefill: self.prefill,
            decode: self.decode,
            context: None,
            seq_gap: self.seq_gap,
        }
    }

    fn specs(&self) -> Vec<ExperimentSpec> {
        expand(&self.base(), &self.devices, &self.context)
    }

    fn single(&self) -> Result<ExperimentSpec> {
        let mut s = self.specs();
        ensure!(s.len() == 1, "this command takes one device count and one context");
        Ok(s.remove(0))
    }
}

fn write_pretty<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn compile(exp: &ExperimentArgs, pos: Option<usize>) -> Result<bool> {
    let r = resolve(&exp.single()?)?;
    let pos = pos.unwrap_or(r.prefill);
    let (_, traces) = compile_token(&r.model, &r.arch, &r.plan, pos, Phase::Decode, &CompileOptions::default())?;
    std::fs::create_dir_all(&exp.out)?;
    write_pretty(&exp.out.join("plan.json"), &r.plan)?;
    let manifest = trace_manifest(&r.model, &r.plan, pos, &traces);
    write_traces(&exp.out, &manifest, &traces)?;
    let n: usize = traces.iter().map(|t| t.instructions.len()).sum();
    println!("{} devices, {n} instructions at position {pos} -> {}", traces.len(), exp.out.display());
    Ok(true)
}

fn verify_cmd(exp: &ExperimentArgs, tokens: usize, seed: u64) -> Result<bool> {
    let r = resolve(&exp.single()?)?;
    ensure!(tokens <= r.context, "{tokens} tokens exceed the context of {}", r.context);
    let rep = verify(&r.model, &r.arch, &r.plan, tokens, seed)?;
    std::fs::create_dir_all(&exp.out)?;
    write_pretty(&exp.out.join("verify.json"), &rep)?;
    for g in &rep.gemv {
        println!("gemv {:<7} {:>6}x{:<6} on {:>2} channels: {} mismatches", g.name, g.rows, g.cols, g.channels, g.mismatches);
    }
    println!(
        "{} tokens: max relative error {:.3e} (order-matched), {:.3e} (f64) -> {}",
        rep.tokens.len(),
        rep.max_rel_ordered,
        rep.max_rel_exact,
        if rep.pass { "PASS" } else { "FAIL" }
    );
    Ok(rep.pass)
}

fn write_event_log(spec: &ExperimentSpec, device: Option<u32>, path: &Path) -> Result<()> {
    let r = resolve(spec)?;
    let dev = match device {
        Some(d) => d,
        None => r.plan.block_assignments.first().map(|a| a.master).context("plan places no blocks")?,
    };
    let (_, traces) = compile_token(&r.model, &r.arch, &r.plan, r.prefill, Phase::Decode, &CompileOptions::default())?;
    let Some(trace) = traces.iter().find(|t| t.device == dev) else {
        bail!("device {dev} holds no blocks");
    };
    let events = channel_events(trace, r.arch.channels_per_device as u8, &r.arch.timing)?;
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_events(std::io::BufWriter::new(f), &events)
}

fn run_specs(specs: &[ExperimentSpec], workers: usize, out: &Path) -> Result<bool> {
    let summary = sweep_to_dir(specs, workers, out, &mut std::io::stderr())?;
    std::io::stdout().write_all(&csv_bytes(&summary.rows)?)?;
    Ok(summary.all_ok())
}

fn simulate(exp: &ExperimentArgs, event_log: bool, event_device: Option<u32>) -> Result<bool> {
    let specs = exp.specs();
    let ok = run_specs(&specs, exp.workers, &exp.out)?;
    if event_log {
        let dir = row_dir(&exp.out, 0);
        std::fs::create_dir_all(&dir)?;
        write_event_log(&specs[0], event_device, &dir.join("events.csv"))?;
    }
    Ok(ok)
}

fn report(dir: &Path) -> Result<bool> {
    let rows = rebuild(dir)?;
    let bytes = csv_bytes(&rows)?;
    std::io::stdout().write_all(&bytes)?;
    let saved = dir.join(RESULTS_CSV);
    if saved.is_file() {
        let old = std::fs::read(&saved)?;
        if old != bytes {
            eprintln!("{} differs from the table rebuilt from the row artifacts", saved.display());
            return Ok(false);
        }
    }
    Ok(true)
}

fn sweep_cmd(specs: &Path, out: &Path, workers: usize) -> Result<bool> {
    let text = std::fs::read_to_string(specs).with_context(|| format!("reading {}", specs.display()))?;
    let list: Vec<ExperimentSpec> = serde_json::from_str(&text).with_context(|| format!("parsing {}", specs.display()))?;
    run_specs(&list, workers, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compile { exp, pos } => compile(exp, *pos),
        Command::Verify { exp, tokens, seed } => verify_cmd(exp, *tokens, *seed),
        Command::Simulate { exp, event_log, event_device } => simulate(exp, *event_log, *event_device),
        Command::Report { dir } => report(dir),
        Command::Sweep { specs, out, workers } => sweep_cmd(specs, out, *workers),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
