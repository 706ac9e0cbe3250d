//! Timing simulation: DRAM command scheduling per channel, instruction
//! scheduling per device, CXL transfers between devices, and the pipeline
//! algebra that turns one token's timeline into per-query latency and
//! steady-state throughput.

pub mod channel;
pub mod device;

pub use channel::{
    channel_commands, check_event_log, closed_form_gemv_latency, instruction_bursts, simulate_channel, Burst,
    ChannelRun, ChannelState, CommandKind, DramCommand, Event, TimingError,
};
pub use device::{class_of, run_devices, Class, CommandCounts, DeviceRun};

use crate::compiler::{build_layout, compile_devices, CompileError, CompileOptions, DeviceTrace, Operator, ProgramLayout};
use crate::config::{ArchConfig, CxlParams, ModelSpec};
use crate::mapper::MappingPlan;
use channel::{ns, Ps};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("device {device}, instruction {index}: {reason}")]
    Timing { device: u32, index: usize, reason: String },
    #[error("device {device} has no routine at PC {pc}")]
    MissingRoutine { device: u32, pc: u32 },
    #[error("device {device} has no channel {channel}")]
    Channel { device: u32, channel: u32 },
    #[error("message addressed to device {0}, which has no trace")]
    UnknownDevice(u32),
    #[error("devices {blocked:?} wait for messages that never arrive")]
    Deadlock { blocked: Vec<u32> },
    #[error("plan/trace mismatch: {0}")]
    Mismatch(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TransferKind {
    P2p,
    Broadcast,
    Multicast,
    Gather,
}

/// Analytical CXL transfer time in ns. Switch-replicated transfers pay the
/// multicast latency and bandwidth factors; a gather serializes `fanout`
/// payloads on the receiver link.
pub fn cxl_transfer_time(bytes: u64, kind: TransferKind, fanout: u32, c: &CxlParams) -> Result<f64, TimingError> {
    let bw = c.effective_b_per_ns();
    if bw <= 0.0 {
        return Err(TimingError::ZeroBandwidth);
    }
    let b = bytes as f64;
    Ok(match kind {
        TransferKind::P2p => c.base_latency_ns + b / bw,
        TransferKind::Broadcast | TransferKind::Multicast => {
            c.multicast_latency_factor * c.base_latency_ns + b / (c.multicast_bandwidth_factor * bw)
        }
        TransferKind::Gather => c.base_latency_ns + fanout as f64 * b / bw,
    })
}

/// Time during which at least one resource of each class was busy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub pim_ns: f64,
    pub pnm_ns: f64,
    pub cxl_ns: f64,
}

impl Breakdown {
    fn scaled(self, k: f64) -> Breakdown {
        Breakdown { pim_ns: self.pim_ns * k, pnm_ns: self.pnm_ns * k, cxl_ns: self.cxl_ns * k }
    }

    fn add(&mut self, o: Breakdown) {
        self.pim_ns += o.pim_ns;
        self.pnm_ns += o.pnm_ns;
        self.cxl_ns += o.cxl_ns;
    }
}

fn union_len(mut iv: Vec<(Ps, Ps)>) -> Ps {
    iv.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(Ps, Ps)> = None;
    for (a, b) in iv {
        match cur {
            Some((s, e)) if a <= e => cur = Some((s, e.max(b))),
            _ => {
                if let Some((s, e)) = cur {
                    total += e - s;
                }
                cur = Some((a, b));
            }
        }
    }
    total + cur.map_or(0, |(s, e)| e - s)
}

/// Timing of one token through replica 0 of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTiming {
    pub pos: usize,
    /// Time for one token to traverse an otherwise idle replica.
    pub latency_ns: f64,
    /// Steady-state interval between pipeline steps with every stage busy.
    pub beat_ns: f64,
    pub breakdown: Breakdown,
    /// Breakdown restricted to the instructions of each operator.
    pub operators: BTreeMap<String, Breakdown>,
    pub counts: CommandCounts,
    /// Per device, column-command occupancy of each channel over the token latency.
    pub channel_utilization: BTreeMap<u32, Vec<f64>>,
}

/// A group of devices that holds whole blocks, and the blocks it holds.
struct Unit {
    devices: Vec<u32>,
    blocks: Vec<u32>,
    /// Blocks occupy disjoint channels and run side by side.
    concurrent: bool,
}

fn units_of(plan: &MappingPlan) -> Vec<Unit> {
    let mut units: Vec<Unit> = Vec::new();
    let mut ranges: Vec<Vec<(u32, u32)>> = Vec::new();
    for a in plan.replica_assignments(0) {
        let mut devs = a.devices.clone();
        devs.sort_unstable();
        let r = (a.channels.start, a.channels.start + a.channels.count);
        match units.iter().position(|u| u.devices == devs) {
            Some(k) => {
                let disjoint = ranges[k].iter().all(|&(s, e)| r.1 <= s || e <= r.0);
                units[k].concurrent &= disjoint;
                units[k].blocks.push(a.block);
                ranges[k].push(r);
            }
            None => {
                units.push(Unit { devices: devs, blocks: vec![a.block], concurrent: true });
                ranges.push(vec![r]);
            }
        }
    }
    for u in &mut units {
        u.concurrent &= u.blocks.len() > 1;
    }
    units
}

/// Pipeline steps a token takes through one replica: one per block on
/// devices running their blocks side by side, one per device group otherwise.
pub fn pipeline_steps(plan: &MappingPlan) -> u32 {
    units_of(plan).iter().map(|u| if u.concurrent { u.blocks.len() as u32 } else { 1 }).sum()
}

fn replica0_devices(plan: &MappingPlan) -> BTreeSet<u32> {
    plan.replica_assignments(0).flat_map(|a| a.devices.iter().copied()).collect()
}

/// Time the traces of one token on replica 0. Traces of other replicas are
/// ignored: replicas are identical and independent.
pub fn simulate_token(plan: &MappingPlan, traces: &[DeviceTrace], cfg: &ArchConfig, pos: usize) -> Result<TokenTiming, SimError> {
    let want = replica0_devices(plan);
    let active: BTreeSet<u32> = plan.block_assignments.iter().flat_map(|a| a.devices.iter().copied()).collect();
    for t in traces {
        if !active.contains(&t.device) {
            return Err(SimError::Mismatch(format!("trace for device {}, which the plan leaves idle", t.device)));
        }
    }
    let mine: Vec<&DeviceTrace> = traces.iter().filter(|t| want.contains(&t.device)).collect();
    let have: BTreeSet<u32> = mine.iter().map(|t| t.device).collect();
    if have != want {
        let missing: Vec<u32> = want.difference(&have).copied().collect();
        return Err(SimError::Mismatch(format!("no trace for devices {missing:?}")));
    }
    let runs = run_devices(&mine, cfg)?;
    let traces_by_dev: BTreeMap<u32, &DeviceTrace> = mine.iter().map(|t| (t.device, *t)).collect();
    let by_dev: BTreeMap<u32, (&DeviceTrace, &DeviceRun)> =
        runs.iter().map(|r| (r.device, (traces_by_dev[&r.device], r))).collect();
    let latency = runs.iter().map(|r| r.finish).max().unwrap_or(0);

    let mut classes: [Vec<(Ps, Ps)>; 3] = Default::default();
    let mut per_op: BTreeMap<Operator, [Vec<(Ps, Ps)>; 3]> = BTreeMap::new();
    for (t, r) in by_dev.values() {
        for (i, inst) in t.instructions.iter().enumerate() {
            let k = class_of(inst) as usize;
            classes[k].push((r.inst_start[i], r.inst_done[i]));
        }
        for a in &t.annotations {
            let e = per_op.entry(a.operator).or_default();
            for i in a.start..a.end {
                e[class_of(&t.instructions[i]) as usize].push((r.inst_start[i], r.inst_done[i]));
            }
        }
    }
    let bd = |c: [Vec<(Ps, Ps)>; 3]| {
        let [p, n, x] = c;
        Breakdown { pim_ns: ns(union_len(p)), pnm_ns: ns(union_len(n)), cxl_ns: ns(union_len(x)) }
    };
    let operators = per_op.into_iter().map(|(op, c)| (op.name().to_string(), bd(c))).collect();

    let mut beat: Ps = 0;
    for u in units_of(plan) {
        let mut spans = Vec::new();
        for &b in &u.blocks {
            let (mut first, mut end) = (Ps::MAX, 0);
            for d in &u.devices {
                let (t, r) = by_dev[d];
                let idx: Vec<usize> =
                    t.annotations.iter().filter(|a| a.block == Some(b)).flat_map(|a| a.start..a.end).collect();
                if let Some(&i0) = idx.iter().min() {
                    first = first.min(r.inst_start[i0]);
                }
                end = idx.iter().map(|&i| r.inst_done[i]).fold(end, Ps::max);
            }
            spans.push(if first == Ps::MAX { 0 } else { end.saturating_sub(first) });
        }
        // Hidden-state transfer from the previous stage.
        let incoming: Ps = u
            .devices
            .iter()
            .map(|d| {
                let (t, r) = by_dev[d];
                t.annotations
                    .iter()
                    .filter(|a| a.block.is_none() && a.operator == Operator::Communication)
                    .flat_map(|a| a.start..a.end)
                    .filter(|&i| matches!(t.instructions[i], crate::isa::Instruction::RecvCxl))
                    .map(|i| r.inst_done[i] - r.inst_start[i])
                    .sum::<Ps>()
            })
            .max()
            .unwrap_or(0);
        let b = if u.concurrent {
            let shared = u.devices.iter().map(|d| by_dev[d].1.shared_busy).max().unwrap_or(0);
            let first = spans[0] + incoming;
            spans.iter().copied().chain([first, shared]).max().unwrap_or(0)
        } else {
            incoming + spans.iter().sum::<Ps>()
        };
        beat = beat.max(b);
    }

    let mut counts = CommandCounts::default();
    for r in &runs {
        counts.add(&r.counts);
    }
    let channel_utilization = runs
        .iter()
        .map(|r| {
            let u = r.channel_busy.iter().map(|&b| if latency == 0 { 0.0 } else { b as f64 / latency as f64 }).collect();
            (r.device, u)
        })
        .collect();
    Ok(TokenTiming {
        pos,
        latency_ns: ns(latency),
        beat_ns: ns(beat),
        breakdown: bd(classes),
        operators,
        counts,
        channel_utilization,
    })
}

/// Token counts of one query and the decode sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub prefill: usize,
    pub decode: usize,
    /// Simulate every `seq_gap`-th position and interpolate in between.
    pub seq_gap: usize,
}

impl QuerySpec {
    /// Positions simulated: every `seq_gap`-th of each phase plus the last.
    pub fn sample_positions(&self) -> Vec<usize> {
        let gap = self.seq_gap.max(1);
        let mut s = BTreeSet::new();
        for (lo, hi) in [(0, self.prefill), (self.prefill, self.prefill + self.decode)] {
            if hi > lo {
                s.extend((lo..hi).step_by(gap));
                s.insert(hi - 1);
            }
        }
        s.into_iter().collect()
    }
}

/// Sum of `f(p)` over `lo..hi`, linear between sampled positions.
fn interpolated_sum(samples: &[(usize, f64)], lo: usize, hi: usize) -> f64 {
    let mut total = 0.0;
    for p in lo..hi {
        total += interpolate(samples, p);
    }
    total
}

fn interpolate(samples: &[(usize, f64)], p: usize) -> f64 {
    match samples.binary_search_by_key(&p, |s| s.0) {
        Ok(i) => samples[i].1,
        Err(0) => samples[0].1,
        Err(i) if i == samples.len() => samples[i - 1].1,
        Err(i) => {
            let (a, fa) = samples[i - 1];
            let (b, fb) = samples[i];
            fa + (fb - fa) * (p - a) as f64 / (b - a) as f64
        }
    }
}

/// Everything the energy model needs from a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub counts: CommandCounts,
    pub wall_ns: f64,
    pub active_devices: u32,
    pub idle_devices: u32,
    /// Tokens generated in `wall_ns`.
    pub tokens: u64,
}

impl Activity {
    /// Activity of two runs back to back on the same fleet.
    pub fn then(&self, o: &Activity) -> Activity {
        let mut counts = self.counts.clone();
        counts.add(&o.counts);
        Activity {
            counts,
            wall_ns: self.wall_ns + o.wall_ns,
            active_devices: self.active_devices.max(o.active_devices),
            idle_devices: self.idle_devices.max(o.idle_devices),
            tokens: self.tokens + o.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub model: String,
    pub strategy: String,
    pub n_devices: u32,
    pub active_devices: u32,
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
    /// Queries in flight per replica.
    pub batch: u32,
    /// Pipeline steps per token.
    pub steps: u32,
    pub query: QuerySpec,
    /// Prefill latency of one query under full load.
    pub prefill_ns: f64,
    /// Decode latency of one query under full load, all decode tokens.
    pub decode_ns: f64,
    pub decode_ns_per_token: f64,
    /// Mean latency of one decode token through an idle replica.
    pub unloaded_token_ns: f64,
    /// Generated tokens per second over the whole query, prefill included.
    pub tokens_per_s: f64,
    /// Tokens per second during decode alone.
    pub decode_tokens_per_s: f64,
    /// Mean per decode token, unloaded.
    pub breakdown: Breakdown,
    pub operators: BTreeMap<String, Breakdown>,
    /// Fleet activity for one batch of queries on every replica.
    pub activity: Activity,
    pub samples: Vec<TokenTiming>,
}

/// Compile and time every sampled position of a query on `plan`, using
/// `workers` threads. Results do not depend on the worker count.
pub fn simulate_system(
    model: &ModelSpec,
    cfg: &ArchConfig,
    plan: &MappingPlan,
    query: &QuerySpec,
    workers: usize,
) -> Result<SimReport, SimError> {
    let layout = build_layout(model, cfg, plan)?;
    simulate_with_layout(model, cfg, plan, &layout, query, workers)
}

pub fn simulate_with_layout(
    model: &ModelSpec,
    cfg: &ArchConfig,
    plan: &MappingPlan,
    layout: &ProgramLayout,
    query: &QuerySpec,
    workers: usize,
) -> Result<SimReport, SimError> {
    if query.decode == 0 {
        return Err(SimError::Query("decode token count must be positive".into()));
    }
    let total = query.prefill + query.decode;
    if total > plan.context {
        return Err(SimError::Query(format!("{total} tokens exceed the planned context of {}", plan.context)));
    }
    let positions = query.sample_positions();
    let devices: Vec<u32> = replica0_devices(plan).into_iter().collect();
    let run = |&pos: &usize| -> Result<TokenTiming, SimError> {
        let mine = compile_devices(model, plan, layout, pos, &devices, &CompileOptions::default())?;
        simulate_token(plan, &mine, cfg, pos)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimError::Query(format!("worker pool: {e}")))?;
    let samples: Vec<TokenTiming> = pool.install(|| positions.par_iter().map(run).collect::<Result<_, _>>())?;
    Ok(assemble(model, plan, query, samples))
}

fn assemble(model: &ModelSpec, plan: &MappingPlan, query: &QuerySpec, samples: Vec<TokenTiming>) -> SimReport {
    let steps = pipeline_steps(plan);
    let (p, d) = (query.prefill, query.prefill + query.decode);
    let series = |f: &dyn Fn(&TokenTiming) -> f64| -> Vec<(usize, f64)> { samples.iter().map(|s| (s.pos, f(s))).collect() };
    let beat = series(&|s| s.beat_ns);
    let prefill_beats = interpolated_sum(&beat, 0, p);
    let decode_beats = interpolated_sum(&beat, p, d);
    let steps_f = steps as f64;
    let prefill_ns = steps_f * prefill_beats;
    let decode_ns = steps_f * decode_beats;
    let dp = plan.dp_replicas as f64;
    let tokens = plan.dp_replicas as u64 * steps as u64 * query.decode as u64;
    let wall = prefill_ns + decode_ns;

    let n_dec = query.decode as f64;
    let mut breakdown = Breakdown::default();
    for (k, f) in [
        (0, (&|s: &TokenTiming| s.breakdown.pim_ns) as &dyn Fn(&TokenTiming) -> f64),
        (1, &|s: &TokenTiming| s.breakdown.pnm_ns),
        (2, &|s: &TokenTiming| s.breakdown.cxl_ns),
    ] {
        let v = interpolated_sum(&series(f), p, d) / n_dec;
        match k {
            0 => breakdown.pim_ns = v,
            1 => breakdown.pnm_ns = v,
            _ => breakdown.cxl_ns = v,
        }
    }
    let mut operators: BTreeMap<String, Breakdown> =
        samples.iter().flat_map(|s| s.operators.keys()).map(|k| (k.clone(), Breakdown::default())).collect();
    for (name, acc) in operators.iter_mut() {
        let get = |s: &TokenTiming| s.operators.get(name).copied().unwrap_or_default();
        let mut sum = Breakdown::default();
        for (k, f) in [
            (0, (&|b: Breakdown| b.pim_ns) as &dyn Fn(Breakdown) -> f64),
            (1, &|b: Breakdown| b.pnm_ns),
            (2, &|b: Breakdown| b.cxl_ns),
        ] {
            let v = interpolated_sum(&series(&|s| f(get(s))), p, d);
            match k {
                0 => sum.pim_ns = v,
                1 => sum.pnm_ns = v,
                _ => sum.cxl_ns = v,
            }
        }
        acc.add(sum.scaled(1.0 / n_dec));
    }

    // Every pipeline step of every position runs once per query in the batch.
    let counts = interpolated_counts(&samples, 0, d).scaled(steps as u64 * plan.dp_replicas as u64);
    let unloaded = interpolated_sum(&series(&|s| s.latency_ns), p, d) / n_dec;
    SimReport {
        model: model.name.clone(),
        strategy: plan.strategy.name().to_string(),
        n_devices: plan.n_devices,
        active_devices: plan.active_devices(),
        tp: plan.tp_degree,
        pp: plan.pp_stages,
        dp: plan.dp_replicas,
        batch: steps,
        steps,
        query: *query,
        prefill_ns,
        decode_ns,
        decode_ns_per_token: decode_ns / n_dec,
        unloaded_token_ns: unloaded,
        tokens_per_s: if wall > 0.0 { tokens as f64 * 1e9 / wall } else { 0.0 },
        decode_tokens_per_s: if decode_beats > 0.0 { dp * n_dec * 1e9 / decode_beats } else { 0.0 },
        breakdown,
        operators,
        activity: Activity {
            counts,
            wall_ns: wall,
            active_devices: plan.active_devices(),
            idle_devices: plan.idle_devices.len() as u32,
            tokens,
        },
        samples,
    }
}

/// Command counts summed over positions `lo..hi`, linear between samples.
fn interpolated_counts(samples: &[TokenTiming], lo: usize, hi: usize) -> CommandCounts {
    let fields: [fn(&CommandCounts) -> u64; 17] = [
        |c| c.act,
        |c| c.pre,
        |c| c.mac,
        |c| c.ewmul,
        |c| c.rd,
        |c| c.wr,
        |c| c.af,
        |c| c.bank_activations,
        |c| c.mac_bank_columns,
        |c| c.ewmul_group_columns,
        |c| c.af_bank_ops,
        |c| c.rd_columns,
        |c| c.wr_columns,
        |c| c.pnm_slot_ops,
        |c| c.riscv_cycles,
        |c| c.cxl_bytes,
        |c| c.instructions,
    ];
    let v: Vec<u64> = fields
        .iter()
        .map(|f| {
            let s: Vec<(usize, f64)> = samples.iter().map(|t| (t.pos, f(&t.counts) as f64)).collect();
            interpolated_sum(&s, lo, hi).round() as u64
        })
        .collect();
    CommandCounts {
        act: v[0],
        pre: v[1],
        mac: v[2],
        ewmul: v[3],
        rd: v[4],
        wr: v[5],
        af: v[6],
        bank_activations: v[7],
        mac_bank_columns: v[8],
        ewmul_group_columns: v[9],
        af_bank_ops: v[10],
        rd_columns: v[11],
        wr_columns: v[12],
        pnm_slot_ops: v[13],
        riscv_cycles: v[14],
        cxl_bytes: v[15],
        instructions: v[16],
    }
}
