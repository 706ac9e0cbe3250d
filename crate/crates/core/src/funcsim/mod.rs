//! Functional execution of device traces under BF16 semantics.
//!
//! [`MemoryImage`] holds the architectural state of every device; [`run_trace`]
//! applies instructions in program order per device and pairs CXL sends with
//! receives in the order messages arrive. The weight loader, the float
//! reference block and the checkpoint format live in submodules.

pub mod checkpoint;
pub mod reference;
pub mod weights;

use crate::bf16::{self, Lanes, ZERO_LANES};
use crate::compiler::lower::compile_token_with;
use crate::compiler::{CompileOptions, DeviceTrace, Phase, ProgramLayout, Routine};
use crate::config::{ArchConfig, ModelSpec};
use crate::mapper::MappingPlan;
use crate::isa::{broadcast_targets, AfId, Instruction, SourceSelect};
use std::collections::{BTreeMap, VecDeque};

pub use reference::{compare, reference_block, reference_gemv_ordered, DiffReport, KvCache, ReferenceMode};
pub use weights::{load_weights, synthetic_weights, BlockWeights, ModelWeights};

/// One DRAM row of one bank: 64 columns of 16 lanes.
pub type Row = Box<[Lanes]>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FuncError {
    #[error("device {device} instruction {index}: read of uninitialized {what}")]
    Poison { device: u32, index: usize, what: String },
    #[error("deadlock: devices {blocked:?} wait on RECV_CXL with no message pending")]
    Deadlock { blocked: Vec<u32> },
    #[error("device {device} instruction {index}: {msg}")]
    Fault { device: u32, index: usize, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("compile: {0}")]
    Compile(String),
}

/// Accumulator precision of the near-bank PUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccPrecision {
    #[default]
    Fp32,
    /// Round the accumulator to BF16 after every MAC micro-op.
    Bf16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FuncOptions {
    /// Fail on reads of never-written Shared Buffer, Global Buffer or DRAM state.
    pub strict: bool,
    pub acc_precision: AccPrecision,
}

/// Knots of each activation lookup table.
pub const AF_TABLE_ENTRIES: usize = 1024;
/// The tables cover `[-AF_DOMAIN, AF_DOMAIN]`.
pub const AF_DOMAIN: f32 = 8.0;

/// Bounded "gate" functions tabulated per AFid. SiLU and GELU multiply the
/// gate by the input; sigmoid and tanh are the gate itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AfTables {
    tables: [Vec<f32>; 4],
}

fn gelu_gate(x: f64) -> f64 {
    0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl AfTables {
    pub fn new() -> Self {
        let knots = |f: fn(f64) -> f64| -> Vec<f32> {
            (0..AF_TABLE_ENTRIES)
                .map(|i| {
                    let x = -AF_DOMAIN as f64 + 2.0 * AF_DOMAIN as f64 * i as f64 / (AF_TABLE_ENTRIES - 1) as f64;
                    f(x) as f32
                })
                .collect()
        };
        AfTables { tables: [knots(sigmoid), knots(gelu_gate), knots(sigmoid), knots(f64::tanh)] }
    }

    fn lookup(&self, t: &[f32], x: f32) -> f32 {
        let n = (AF_TABLE_ENTRIES - 1) as f32;
        let pos = ((x + AF_DOMAIN) / (2.0 * AF_DOMAIN) * n).clamp(0.0, n);
        let i = (pos.floor() as usize).min(AF_TABLE_ENTRIES - 2);
        let frac = pos - i as f32;
        t[i] + (t[i + 1] - t[i]) * frac
    }

    pub fn apply(&self, af: AfId, x: f32) -> f32 {
        let gate = self.lookup(&self.tables[af.code() as usize], x);
        match af {
            AfId::Silu | AfId::Gelu => x * gate,
            AfId::Sigmoid | AfId::Tanh => gate,
        }
    }
}

impl Default for AfTables {
    fn default() -> Self {
        Self::new()
    }
}

/// Message in flight between devices: captured at send time, written on receive.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub source: u32,
    pub rd: u16,
    pub data: Vec<Lanes>,
}

/// Architectural state of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    /// Bank rows keyed by (channel, bank, row); absent rows were never allocated.
    pub banks: BTreeMap<(u8, u8, u32), Row>,
    pub gb: Vec<Vec<Lanes>>,
    pub gb_written: Vec<Vec<bool>>,
    pub sb: Vec<Lanes>,
    pub sb_written: Vec<bool>,
    /// `acc[channel][bank][reg]`.
    pub acc: Vec<Vec<Vec<f32>>>,
    pub inbox: VecDeque<Message>,
}

impl DeviceState {
    pub fn new(cfg: &ArchConfig) -> Self {
        let ch = cfg.channels_per_device;
        DeviceState {
            banks: BTreeMap::new(),
            gb: vec![vec![ZERO_LANES; cfg.gb_slots()]; ch],
            gb_written: vec![vec![false; cfg.gb_slots()]; ch],
            sb: vec![ZERO_LANES; cfg.sb_slots()],
            sb_written: vec![false; cfg.sb_slots()],
            acc: vec![vec![vec![0.0; cfg.acc_registers]; cfg.banks_per_channel]; ch],
            inbox: VecDeque::new(),
        }
    }

    /// Allocate zeroed rows `rows` in `banks` of `channel`.
    pub fn zero_rows(&mut self, channel: u8, banks: std::ops::Range<u8>, rows: std::ops::Range<u32>, cols: usize) {
        for b in banks {
            for r in rows.clone() {
                self.banks.entry((channel, b, r)).or_insert_with(|| vec![ZERO_LANES; cols].into_boxed_slice());
            }
        }
    }

    pub fn write_slots(&mut self, at: u16, data: &[Lanes]) {
        for (i, l) in data.iter().enumerate() {
            self.sb[at as usize + i] = *l;
            self.sb_written[at as usize + i] = true;
        }
    }

    pub fn read_slots(&self, at: u16, n: usize) -> &[Lanes] {
        &self.sb[at as usize..at as usize + n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryImage {
    pub devices: BTreeMap<u32, DeviceState>,
    pub columns: usize,
    pub af: AfTables,
}

impl MemoryImage {
    /// Empty state for devices `0..n_devices`.
    pub fn new(cfg: &ArchConfig) -> Self {
        let devices = (0..cfg.n_devices as u32).map(|d| (d, DeviceState::new(cfg))).collect();
        MemoryImage { devices, columns: cfg.columns_per_row(), af: AfTables::new() }
    }

    pub fn device(&self, d: u32) -> &DeviceState {
        &self.devices[&d]
    }

    pub fn device_mut(&mut self, d: u32) -> &mut DeviceState {
        self.devices.get_mut(&d).expect("device exists")
    }

    /// Write `v` as BF16 into slots starting at `at` of device `d`.
    pub fn set_vector(&mut self, d: u32, at: u16, v: &[f32]) {
        let lanes: Vec<Lanes> = v.chunks(16).map(bf16::lanes_from_f32).collect();
        self.device_mut(d).write_slots(at, &lanes);
    }

    /// Read `n` elements from slots starting at `at` of device `d`.
    pub fn get_vector(&self, d: u32, at: u16, n: usize) -> Vec<f32> {
        let dev = self.device(d);
        dev.read_slots(at, n.div_ceil(16)).iter().flat_map(bf16::lanes_to_f32).take(n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub instructions: u64,
    pub messages: u64,
}

struct Ctx<'a> {
    device: u32,
    index: usize,
    opts: &'a FuncOptions,
    cols: usize,
}

impl Ctx<'_> {
    fn poison(&self, what: String) -> FuncError {
        FuncError::Poison { device: self.device, index: self.index, what }
    }
    fn fault(&self, msg: String) -> FuncError {
        FuncError::Fault { device: self.device, index: self.index, msg }
    }
}

fn channels(mask: u32) -> impl Iterator<Item = usize> {
    (0..32usize).filter(move |c| mask >> c & 1 == 1)
}

fn sb_read(dev: &DeviceState, cx: &Ctx, at: usize) -> Result<Lanes, FuncError> {
    if at >= dev.sb.len() {
        return Err(cx.fault(format!("slot {at} out of range")));
    }
    if cx.opts.strict && !dev.sb_written[at] {
        return Err(cx.poison(format!("Shared Buffer slot {at}")));
    }
    Ok(dev.sb[at])
}

fn sb_write(dev: &mut DeviceState, cx: &Ctx, at: usize, v: Lanes) -> Result<(), FuncError> {
    if at >= dev.sb.len() {
        return Err(cx.fault(format!("slot {at} out of range")));
    }
    dev.sb[at] = v;
    dev.sb_written[at] = true;
    Ok(())
}

fn bank_row<'a>(dev: &'a mut DeviceState, cx: &Ctx, ch: usize, bank: usize, row: u32) -> Result<&'a mut Row, FuncError> {
    let cols = cx.cols;
    if cx.opts.strict && !dev.banks.contains_key(&(ch as u8, bank as u8, row)) {
        return Err(cx.poison(format!("DRAM channel {ch} bank {bank} row {row}")));
    }
    Ok(dev
        .banks
        .entry((ch as u8, bank as u8, row))
        .or_insert_with(|| vec![ZERO_LANES; cols].into_boxed_slice()))
}

fn col_check(cx: &Ctx, col: u32, n: u32) -> Result<(), FuncError> {
    if col as usize + n as usize > cx.cols {
        return Err(cx.fault(format!("columns {col}..{} cross the row", col + n)));
    }
    Ok(())
}

fn gb_read(dev: &DeviceState, cx: &Ctx, ch: usize, slot: usize) -> Result<Lanes, FuncError> {
    if slot >= dev.gb[ch].len() {
        return Err(cx.fault(format!("Global Buffer slot {slot} out of range")));
    }
    if cx.opts.strict && !dev.gb_written[ch][slot] {
        return Err(cx.poison(format!("Global Buffer channel {ch} slot {slot}")));
    }
    Ok(dev.gb[ch][slot])
}

fn map_lanes(a: &Lanes, f: impl Fn(f32) -> f32) -> Lanes {
    let mut o = ZERO_LANES;
    for i in 0..16 {
        o[i] = bf16::from_f32(f(bf16::to_f32(a[i])));
    }
    o
}

fn replicate(v: f32) -> Lanes {
    [bf16::from_f32(v); 16]
}

fn run_routine(dev: &mut DeviceState, cx: &Ctx, r: &Routine, op_size: u32, rs: u16, rd: u16) -> Result<(), FuncError> {
    let read = |dev: &DeviceState, n: usize| -> Result<Vec<f32>, FuncError> {
        let mut v = Vec::with_capacity(16 * n);
        for i in 0..n {
            v.extend(bf16::lanes_to_f32(&sb_read(dev, cx, rs as usize + i)?));
        }
        Ok(v)
    };
    let write_flat = |dev: &mut DeviceState, at: usize, v: &[f32], n: usize| -> Result<(), FuncError> {
        for i in 0..n {
            let lo = (16 * i).min(v.len());
            let hi = (16 * i + 16).min(v.len());
            sb_write(dev, cx, at + i, bf16::lanes_from_f32(&v[lo..hi]))?;
        }
        Ok(())
    };
    let rep = |dev: &mut DeviceState, v: f32, n: u16| -> Result<(), FuncError> {
        for i in 0..n as usize {
            sb_write(dev, cx, rd as usize + i, replicate(v))?;
        }
        Ok(())
    };
    let n = op_size as usize;
    match *r {
        Routine::Rsqrt { inv_n, eps, out_slots } => {
            let s = read(dev, 1)?[0];
            rep(dev, 1.0 / (s * inv_n + eps).sqrt(), out_slots)
        }
        Routine::Recip { out_slots } => {
            let s = read(dev, 1)?[0];
            rep(dev, 1.0 / s, out_slots)
        }
        Routine::NegMax { valid, out_slots } => {
            let v = read(dev, n)?;
            let m = v[..valid as usize].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            rep(dev, -m, out_slots)
        }
        Routine::ZeroTail { valid } => {
            let mut l = sb_read(dev, cx, rs as usize)?;
            for x in l.iter_mut().skip(valid as usize) {
                *x = 0;
            }
            sb_write(dev, cx, rd as usize, l)
        }
        Routine::Pack { pairs } => {
            let v = read(dev, n)?;
            let p = pairs as usize;
            let a: Vec<f32> = (0..p).map(|i| v[2 * i]).collect();
            let b: Vec<f32> = (0..p).map(|i| v[2 * i + 1]).collect();
            let ab: Vec<f32> = a.iter().chain(&b).copied().collect();
            let ba: Vec<f32> = b.iter().chain(&a).copied().collect();
            write_flat(dev, rd as usize, &ab, n)?;
            write_flat(dev, rd as usize + n, &ba, n)
        }
        Routine::Unpack { pairs } => {
            let v = read(dev, n)?;
            let p = pairs as usize;
            let out: Vec<f32> = (0..p).flat_map(|i| [v[i], v[p + i]]).collect();
            write_flat(dev, rd as usize, &out, n)
        }
    }
}

/// Effect of one instruction. Returns `Ok(false)` when a receive finds no message.
fn step(
    image_af: &AfTables,
    dev: &mut DeviceState,
    outbox: &mut Vec<(u32, Message)>,
    programs: &BTreeMap<u32, Routine>,
    inst: &Instruction,
    cx: &Ctx,
) -> Result<bool, FuncError> {
    match *inst {
        Instruction::MacAbk { ch_mask, op_size, row, col, reg, src } => {
            col_check(cx, col, op_size)?;
            for ch in channels(ch_mask) {
                for i in 0..op_size {
                    let c = (col + i) as usize;
                    let banks = dev.acc[ch].len();
                    for b in 0..banks {
                        let prod = match src {
                            SourceSelect::GlobalBuffer => {
                                let g = gb_read(dev, cx, ch, c)?;
                                bf16::dot16(&bank_row(dev, cx, ch, b, row)?[c], &g)
                            }
                            SourceSelect::NeighborBank => {
                                if b % 2 == 1 {
                                    continue;
                                }
                                let n = bank_row(dev, cx, ch, b + 1, row)?[c];
                                bf16::dot16(&bank_row(dev, cx, ch, b, row)?[c], &n)
                            }
                        };
                        let a = &mut dev.acc[ch][b][reg as usize];
                        *a += prod;
                        if cx.opts.acc_precision == AccPrecision::Bf16 {
                            *a = bf16::round(*a);
                        }
                    }
                }
            }
        }
        Instruction::EwMul { ch_mask, op_size, row, col } => {
            col_check(cx, col, op_size)?;
            let groups = dev.acc[0].len() / 4;
            for ch in channels(ch_mask) {
                for g in 0..groups {
                    for i in 0..op_size {
                        let c = (col + i) as usize;
                        let a = bank_row(dev, cx, ch, 4 * g, row)?[c];
                        let b = bank_row(dev, cx, ch, 4 * g + 1, row)?[c];
                        let mut o = ZERO_LANES;
                        for l in 0..16 {
                            o[l] = bf16::from_f32(bf16::to_f32(a[l]) * bf16::to_f32(b[l]));
                        }
                        bank_row(dev, cx, ch, 4 * g + 2, row)?[c] = o;
                    }
                }
            }
        }
        Instruction::Af { ch_mask, af, reg } => {
            for ch in channels(ch_mask) {
                for bank in dev.acc[ch].iter_mut() {
                    bank[reg as usize] = image_af.apply(af, bank[reg as usize]);
                }
            }
        }
        Instruction::Exp { op_size, rd, rs } => {
            for i in 0..op_size as usize {
                let v = sb_read(dev, cx, rs as usize + i)?;
                sb_write(dev, cx, rd as usize + i, map_lanes(&v, bf16::taylor_exp))?;
            }
        }
        Instruction::Red { op_size, rd, rs } => {
            for i in 0..op_size as usize {
                let v = sb_read(dev, cx, rs as usize + i)?;
                let mut o = ZERO_LANES;
                o[0] = bf16::from_f32(bf16::tree_sum16(bf16::lanes_to_f32(&v)));
                sb_write(dev, cx, rd as usize + i, o)?;
            }
        }
        Instruction::Acc { op_size, rd, rs } => {
            for i in 0..op_size as usize {
                let a = bf16::lanes_to_f32(&sb_read(dev, cx, rd as usize + i)?);
                let b = bf16::lanes_to_f32(&sb_read(dev, cx, rs as usize + i)?);
                let mut o = ZERO_LANES;
                for l in 0..16 {
                    o[l] = bf16::from_f32(a[l] + b[l]);
                }
                sb_write(dev, cx, rd as usize + i, o)?;
            }
        }
        Instruction::Riscv { op_size, pc, rd, rs } => {
            let r = programs.get(&pc).ok_or_else(|| cx.fault(format!("no routine at PC {pc}")))?;
            run_routine(dev, cx, r, op_size, rs, rd)?;
        }
        Instruction::SendCxl { dv, rs, rd, slots } => {
            let data = (0..slots as usize).map(|i| sb_read(dev, cx, rs as usize + i)).collect::<Result<_, _>>()?;
            outbox.push((dv as u32, Message { source: cx.device, rd, data }));
        }
        Instruction::BcastCxl { dv_count, rs, rd, slots } => {
            let data: Vec<Lanes> =
                (0..slots as usize).map(|i| sb_read(dev, cx, rs as usize + i)).collect::<Result<_, _>>()?;
            for t in broadcast_targets(cx.device, dv_count as u32) {
                outbox.push((t, Message { source: cx.device, rd, data: data.clone() }));
            }
        }
        Instruction::RecvCxl => {
            let Some(m) = dev.inbox.pop_front() else {
                return Ok(false);
            };
            for (i, l) in m.data.iter().enumerate() {
                sb_write(dev, cx, m.rd as usize + i, *l)?;
            }
        }
        Instruction::WrSbk { ch, op_size, bank, row, col, rs } => {
            col_check(cx, col, op_size)?;
            for i in 0..op_size as usize {
                let v = sb_read(dev, cx, rs as usize + i)?;
                bank_row(dev, cx, ch as usize, bank as usize, row)?[col as usize + i] = v;
            }
        }
        Instruction::RdSbk { ch, op_size, bank, row, col, rd } => {
            col_check(cx, col, op_size)?;
            for i in 0..op_size as usize {
                let v = bank_row(dev, cx, ch as usize, bank as usize, row)?[col as usize + i];
                sb_write(dev, cx, rd as usize + i, v)?;
            }
        }
        Instruction::WrAbk { ch, row, col, rs, lane } => {
            col_check(cx, col, 1)?;
            let v = sb_read(dev, cx, rs as usize)?;
            for b in 0..dev.acc[ch as usize].len() {
                bank_row(dev, cx, ch as usize, b, row)?[col as usize][lane as usize] = v[b];
            }
        }
        Instruction::CopyBkgb { ch_mask, op_size, row, col, bank } => {
            col_check(cx, col, op_size)?;
            for ch in channels(ch_mask) {
                for i in 0..op_size as usize {
                    let c = col as usize + i;
                    let v = bank_row(dev, cx, ch, bank as usize, row)?[c];
                    if c >= dev.gb[ch].len() {
                        return Err(cx.fault(format!("Global Buffer slot {c} out of range")));
                    }
                    dev.gb[ch][c] = v;
                    dev.gb_written[ch][c] = true;
                }
            }
        }
        Instruction::CopyGbbk { ch_mask, op_size, row, col, bank } => {
            col_check(cx, col, op_size)?;
            for ch in channels(ch_mask) {
                for i in 0..op_size as usize {
                    let c = col as usize + i;
                    let v = gb_read(dev, cx, ch, c)?;
                    bank_row(dev, cx, ch, bank as usize, row)?[c] = v;
                }
            }
        }
        Instruction::WrBias { ch_mask, rs, reg } => {
            let v = bf16::lanes_to_f32(&sb_read(dev, cx, rs as usize)?);
            for ch in channels(ch_mask) {
                for (b, bank) in dev.acc[ch].iter_mut().enumerate() {
                    match reg {
                        Some(r) => bank[r as usize] = v[b],
                        None => bank.iter_mut().for_each(|a| *a = v[b]),
                    }
                }
            }
        }
        Instruction::RdMac { ch_mask, rd, reg } => {
            for (k, ch) in channels(ch_mask).enumerate() {
                let mut o = ZERO_LANES;
                for (b, bank) in dev.acc[ch].iter().enumerate() {
                    o[b] = bf16::from_f32(bank[reg as usize]);
                }
                sb_write(dev, cx, rd as usize + k, o)?;
            }
        }
        Instruction::WrGb { ch_mask, op_size, col, rs } => {
            for ch in channels(ch_mask) {
                for i in 0..op_size as usize {
                    let c = col as usize + i;
                    if c >= dev.gb[ch].len() {
                        return Err(cx.fault(format!("Global Buffer slot {c} out of range")));
                    }
                    dev.gb[ch][c] = sb_read(dev, cx, rs as usize + i)?;
                    dev.gb_written[ch][c] = true;
                }
            }
        }
    }
    Ok(true)
}

/// Execute `traces` against `image`. Devices run in program order; a device
/// blocked on `RECV_CXL` yields until a message reaches its inbox. Messages
/// are delivered in the order they were sent.
pub fn run_trace(traces: &[DeviceTrace], image: &mut MemoryImage, opts: &FuncOptions) -> Result<RunStats, FuncError> {
    let mut pcs = vec![0usize; traces.len()];
    let mut stats = RunStats::default();
    let cols = image.columns;
    for t in traces {
        if !image.devices.contains_key(&t.device) {
            return Err(FuncError::Shape(format!("trace for unknown device {}", t.device)));
        }
    }
    loop {
        let mut progressed = false;
        for (k, t) in traces.iter().enumerate() {
            let mut outbox = Vec::new();
            {
                let dev = image.devices.get_mut(&t.device).expect("checked above");
                while pcs[k] < t.instructions.len() {
                    let cx = Ctx { device: t.device, index: pcs[k], opts, cols };
                    if !step(&image.af, dev, &mut outbox, &t.programs, &t.instructions[pcs[k]], &cx)? {
                        break;
                    }
                    pcs[k] += 1;
                    stats.instructions += 1;
                    progressed = true;
                    if !outbox.is_empty() {
                        break;
                    }
                }
            }
            for (dst, m) in outbox {
                let target = image
                    .devices
                    .get_mut(&dst)
                    .ok_or_else(|| FuncError::Shape(format!("message to unknown device {dst}")))?;
                target.inbox.push_back(m);
                stats.messages += 1;
            }
        }
        if pcs.iter().zip(traces).all(|(&p, t)| p == t.instructions.len()) {
            return Ok(stats);
        }
        if !progressed {
            let blocked =
                pcs.iter().zip(traces).filter(|(&p, t)| p < t.instructions.len()).map(|(_, t)| t.device).collect();
            return Err(FuncError::Deadlock { blocked });
        }
    }
}

/// Pure form of [`run_trace`]: returns the final image.
pub fn run_traces(traces: &[DeviceTrace], image: &MemoryImage, opts: &FuncOptions) -> Result<MemoryImage, FuncError> {
    let mut out = image.clone();
    run_trace(traces, &mut out, opts)?;
    Ok(out)
}

/// Compile and execute the token at `pos` for replica 0 of `plan`: write
/// `x` into the residual slots of the first block's master, run every device,
/// and read the residual slots of the last block's master.
#[allow(clippy::too_many_arguments)]
pub fn run_token(
    model: &ModelSpec,
    plan: &MappingPlan,
    layout: &ProgramLayout,
    image: &mut MemoryImage,
    pos: usize,
    x: &[f32],
    copts: &CompileOptions,
    fopts: &FuncOptions,
) -> Result<Vec<f32>, FuncError> {
    if x.len() != model.d_model {
        return Err(FuncError::Shape(format!("hidden state of {} elements, want {}", x.len(), model.d_model)));
    }
    let master = |block: usize| {
        plan.block_assignments
            .iter()
            .find(|a| a.replica == 0 && a.block as usize == block)
            .map(|a| a.master)
            .ok_or_else(|| FuncError::Shape(format!("plan has no block {block}")))
    };
    let first = master(0)?;
    let last = master(model.n_layers - 1)?;
    let traces = compile_token_with(model, plan, layout, pos, Phase::Decode, copts)
        .map_err(|e| FuncError::Compile(e.to_string()))?;
    let replica: Vec<DeviceTrace> = traces
        .into_iter()
        .filter(|t| plan.block_assignments.iter().any(|a| a.replica == 0 && a.devices.contains(&t.device)))
        .collect();
    image.set_vector(first, layout.sb.x, x);
    run_trace(&replica, image, fopts)?;
    Ok(image.get_vector(last, layout.sb.x, model.d_model))
}
