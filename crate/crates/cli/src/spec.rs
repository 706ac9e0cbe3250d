//! Experiment descriptions and their resolution into a model, an
//! architecture and a mapping plan.

use anyhow::{bail, ensure, Context, Result};
use pimsim_core::config::{load_arch, load_cost, load_energy, load_model, ArchConfig, ModelSpec};
use pimsim_core::mapper::{pipeline_plan_with, plan_hybrid, plan_pipeline, plan_scaled_with, plan_tensor, MappingPlan};
use pimsim_core::timesim::{simulate_system, QuerySpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

pub const DEFAULT_PREFILL: usize = 512;
pub const DEFAULT_DECODE: usize = 3584;
pub const DEFAULT_SEQ_GAP: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    /// One block per pipeline stage, blocks spread evenly over the devices.
    Pp,
    /// Every block split over `tp` devices (all devices by default).
    Tp,
    /// `pp` stages of `tp` devices each.
    Hybrid,
    /// Pipeline replicas chosen for the device count by simulated
    /// throughput, spare devices idle.
    Scaled,
}

/// One configuration to compile, simulate and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: PathBuf,
    #[serde(default)]
    pub arch: Option<PathBuf>,
    /// `key=value` overrides applied to the architecture.
    #[serde(default)]
    pub set: Vec<String>,
    #[serde(default)]
    pub energy: Option<PathBuf>,
    #[serde(default)]
    pub cost: Option<PathBuf>,
    pub strategy: StrategyArg,
    /// Device count; the architecture's when absent.
    #[serde(default)]
    pub devices: Option<u32>,
    #[serde(default)]
    pub tp: Option<u32>,
    #[serde(default)]
    pub pp: Option<u32>,
    #[serde(default = "one")]
    pub dp: u32,
    #[serde(default = "default_prefill")]
    pub prefill: usize,
    /// Decode tokens; `context - prefill` when absent and a context is given.
    #[serde(default)]
    pub decode: Option<usize>,
    /// Planned context; `prefill + decode` when absent.
    #[serde(default)]
    pub context: Option<usize>,
    #[serde(default = "default_seq_gap")]
    pub seq_gap: usize,
}

fn one() -> u32 {
    1
}
fn default_prefill() -> usize {
    DEFAULT_PREFILL
}
fn default_seq_gap() -> usize {
    DEFAULT_SEQ_GAP
}

impl ExperimentSpec {
    pub fn new(model: impl Into<PathBuf>, strategy: StrategyArg) -> Self {
        ExperimentSpec {
            model: model.into(),
            arch: None,
            set: Vec::new(),
            energy: None,
            cost: None,
            strategy,
            devices: None,
            tp: None,
            pp: None,
            dp: 1,
            prefill: DEFAULT_PREFILL,
            decode: None,
            context: None,
            seq_gap: DEFAULT_SEQ_GAP,
        }
    }

    /// Decode token count and planned context.
    pub fn tokens(&self) -> Result<(usize, usize)> {
        let p = self.prefill;
        let (decode, context) = match (self.decode, self.context) {
            (Some(d), Some(c)) => (d, c),
            (Some(d), None) => (d, p + d),
            (None, Some(c)) => {
                ensure!(c > p, "context {c} leaves no room to decode after {p} prefill tokens");
                (c - p, c)
            }
            (None, None) => (DEFAULT_DECODE, p + DEFAULT_DECODE),
        };
        ensure!(decode > 0, "decode token count must be positive");
        ensure!(p + decode <= context, "prefill {p} + decode {decode} exceed context {context}");
        Ok((decode, context))
    }

    fn check_files(&self) -> Result<()> {
        let files = [Some(&self.model), self.arch.as_ref(), self.energy.as_ref(), self.cost.as_ref()];
        for f in files.into_iter().flatten() {
            ensure!(f.is_file(), "{} does not exist", f.display());
        }
        Ok(())
    }
}

/// Everything a spec names, loaded and checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelSpec,
    pub arch: ArchConfig,
    pub plan: MappingPlan,
    pub prefill: usize,
    pub decode: usize,
    pub context: usize,
}

pub fn load_inputs(spec: &ExperimentSpec) -> Result<(ModelSpec, ArchConfig)> {
    spec.check_files()?;
    let model = load_model(&spec.model)?;
    let mut arch = load_arch(spec.arch.as_deref(), &spec.set)?;
    if let Some(n) = spec.devices {
        ensure!(n > 0, "device count must be positive");
        arch.n_devices = n as usize;
    }
    if let Some(p) = &spec.energy {
        arch.energy = load_energy(p)?;
    }
    if let Some(p) = &spec.cost {
        arch.cost = load_cost(p)?;
    }
    Ok((model, arch))
}

pub fn resolve(spec: &ExperimentSpec) -> Result<Resolved> {
    let (model, arch) = load_inputs(spec)?;
    let (decode, context) = spec.tokens()?;
    ensure!(
        context <= model.max_context,
        "context {context} exceeds the max_context {} of {}",
        model.max_context,
        model.name
    );
    let plan = plan_for(spec, &model, &arch, context).with_context(|| format!("mapping {}", model.name))?;
    Ok(Resolved { model, arch, plan, prefill: spec.prefill, decode, context })
}

fn plan_for(spec: &ExperimentSpec, model: &ModelSpec, arch: &ArchConfig, context: usize) -> Result<MappingPlan> {
    let n = arch.n_devices as u32;
    if spec.dp != 1 && spec.strategy != StrategyArg::Pp {
        bail!("dp is only set explicitly with the pp strategy");
    }
    let plan = match spec.strategy {
        StrategyArg::Pp if spec.dp > 1 => {
            let per = n / spec.dp;
            ensure!(per > 0, "{} replicas need more than {n} devices", spec.dp);
            let b = (model.n_layers as u32).div_ceil(per);
            pipeline_plan_with(model, arch, context, n, b, spec.dp)?
        }
        StrategyArg::Pp => match spec.pp {
            Some(pp) => plan_hybrid(model, arch, 1, pp, context)?,
            None => plan_pipeline(model, arch, context)?,
        },
        StrategyArg::Tp => match spec.tp {
            Some(tp) => plan_hybrid(model, arch, tp, 1, context)?,
            None => plan_tensor(model, arch, context)?,
        },
        StrategyArg::Hybrid => {
            let (Some(tp), Some(pp)) = (spec.tp, spec.pp) else {
                bail!("the hybrid strategy needs both tp and pp");
            };
            plan_hybrid(model, arch, tp, pp, context)?
        }
        StrategyArg::Scaled => plan_scaled_simulated(spec, model, arch, context)?,
    };
    Ok(plan)
}

/// Single-replica throughput by replica shape, shared by all rows of a process.
fn replica_cache() -> &'static Mutex<HashMap<String, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Simulated tokens/s of one replica with `b` blocks per device. Replicas
/// share nothing, so a plan's throughput is this times its replica count.
fn replica_throughput(model: &ModelSpec, arch: &ArchConfig, context: usize, b: u32, query: &QuerySpec) -> Result<f64> {
    let per = (model.n_layers as u32).div_ceil(b);
    let mut sub = arch.clone();
    sub.n_devices = per as usize;
    let key = serde_json::to_string(&(model, &sub, context, b, query))?;
    if let Some(&t) = replica_cache().lock().expect("cache lock").get(&key) {
        return Ok(t);
    }
    let plan = pipeline_plan_with(model, &sub, context, per, b, 1)?;
    let t = simulate_system(model, &sub, &plan, query, 1)?.tokens_per_s;
    replica_cache().lock().expect("cache lock").insert(key, t);
    Ok(t)
}

/// Every blocks-per-device count that fits, each replicated as often as the
/// devices allow, ranked by simulated throughput. Ties go to fewer blocks per
/// device. The best throughput never drops as devices are added, since every
/// candidate at `n` devices remains one at `n + 1`.
fn plan_scaled_simulated(spec: &ExperimentSpec, model: &ModelSpec, arch: &ArchConfig, context: usize) -> Result<MappingPlan> {
    let (decode, _) = spec.tokens()?;
    let query = QuerySpec { prefill: spec.prefill, decode, seq_gap: spec.seq_gap };
    let mut failure = None;
    let plan = plan_scaled_with(model, arch, arch.n_devices as u32, context, 0.0, |p| {
        match replica_throughput(model, arch, context, p.blocks_per_device, &query) {
            Ok(t) => p.dp_replicas as f64 * t,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    })?;
    match failure {
        Some(e) => Err(e.context("ranking replica shapes")),
        None => Ok(plan),
    }
}

/// Cartesian product of device counts and contexts over a base spec, devices
/// outermost. Empty lists keep the base value.
pub fn expand(base: &ExperimentSpec, devices: &[u32], contexts: &[usize]) -> Vec<ExperimentSpec> {
    let ds: Vec<Option<u32>> = if devices.is_empty() { vec![base.devices] } else { devices.iter().map(|&d| Some(d)).collect() };
    let cs: Vec<Option<usize>> =
        if contexts.is_empty() { vec![base.context] } else { contexts.iter().map(|&c| Some(c)).collect() };
    let mut out = Vec::new();
    for d in &ds {
        for c in &cs {
            let mut s = base.clone();
            s.devices = *d;
            if !contexts.is_empty() {
                s.context = *c;
                s.decode = None;
            }
            out.push(s);
        }
    }
    out
}
