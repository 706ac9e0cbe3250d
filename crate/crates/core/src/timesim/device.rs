//! Instruction scheduling inside a device and message timing between devices.
//!
//! The front end dispatches one instruction per `decode_ns` into per-resource
//! queues: one command queue per channel, one pipeline per PNM unit class,
//! the scalar cores and the CXL port. An instruction starts when its
//! resource is free and the Shared Buffer slots it reads or overwrites are
//! settled, so PNM work overlaps PIM work wherever the data allows.

use super::channel::{instruction_bursts, ps, ChannelState, CommandKind, Ps, Timing};
use super::SimError;
use crate::compiler::{DeviceTrace, Routine};
use crate::config::ArchConfig;
use crate::isa::{broadcast_targets, Instruction, Opcode};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

/// Activity counts that drive the energy model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandCounts {
    /// Channel-level DRAM commands by kind.
    pub act: u64,
    pub pre: u64,
    pub mac: u64,
    pub ewmul: u64,
    pub rd: u64,
    pub wr: u64,
    pub af: u64,
    /// Activate/precharge pairs counted per bank.
    pub bank_activations: u64,
    /// MAC columns counted per bank.
    pub mac_bank_columns: u64,
    /// Element-wise multiply columns counted per bank group.
    pub ewmul_group_columns: u64,
    /// Activation-function evaluations counted per bank PU.
    pub af_bank_ops: u64,
    /// 256-bit columns read from banks, registers or buffers.
    pub rd_columns: u64,
    pub wr_columns: u64,
    /// Slots processed by accumulator, reduction and exponent units.
    pub pnm_slot_ops: u64,
    pub riscv_cycles: u64,
    pub cxl_bytes: u64,
    pub instructions: u64,
}

impl CommandCounts {
    pub fn command(&self, k: CommandKind) -> u64 {
        match k {
            CommandKind::Act => self.act,
            CommandKind::Pre => self.pre,
            CommandKind::Mac => self.mac,
            CommandKind::EwMul => self.ewmul,
            CommandKind::Rd => self.rd,
            CommandKind::Wr => self.wr,
            CommandKind::Af => self.af,
        }
    }

    fn record(&mut self, kind: CommandKind, banks: u16, count: u64, groups: u64) {
        let nb = banks.count_ones() as u64;
        match kind {
            CommandKind::Act => {
                self.act += 1;
                self.bank_activations += nb;
            }
            CommandKind::Pre => self.pre += 1,
            CommandKind::Mac => {
                self.mac += count;
                self.mac_bank_columns += count * nb;
            }
            CommandKind::EwMul => {
                self.ewmul += count;
                self.ewmul_group_columns += count * groups;
            }
            CommandKind::Rd => {
                self.rd += count;
                self.rd_columns += count * nb.max(1);
            }
            CommandKind::Wr => {
                self.wr += count;
                self.wr_columns += count * nb.max(1);
            }
            CommandKind::Af => {
                self.af += count;
                self.af_bank_ops += count * nb;
            }
        }
    }

    /// Scale every count by `k`.
    pub fn scaled(&self, k: u64) -> CommandCounts {
        let mut c = self.clone();
        c.zip_with(&CommandCounts::default(), |a, _| a * k);
        c
    }

    pub fn add(&mut self, o: &CommandCounts) {
        self.zip_with(o, |a, b| a + b);
    }

    fn zip_with(&mut self, o: &CommandCounts, f: impl Fn(u64, u64) -> u64) {
        for (a, b) in [
            (&mut self.act, o.act),
            (&mut self.pre, o.pre),
            (&mut self.mac, o.mac),
            (&mut self.ewmul, o.ewmul),
            (&mut self.rd, o.rd),
            (&mut self.wr, o.wr),
            (&mut self.af, o.af),
            (&mut self.bank_activations, o.bank_activations),
            (&mut self.mac_bank_columns, o.mac_bank_columns),
            (&mut self.ewmul_group_columns, o.ewmul_group_columns),
            (&mut self.af_bank_ops, o.af_bank_ops),
            (&mut self.rd_columns, o.rd_columns),
            (&mut self.wr_columns, o.wr_columns),
            (&mut self.pnm_slot_ops, o.pnm_slot_ops),
            (&mut self.riscv_cycles, o.riscv_cycles),
            (&mut self.cxl_bytes, o.cxl_bytes),
            (&mut self.instructions, o.instructions),
        ] {
            *a = f(*a, b);
        }
    }
}

/// Resource class of an instruction, used for the latency breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Pim,
    Pnm,
    Cxl,
}

pub fn class_of(inst: &Instruction) -> Class {
    match inst.opcode() {
        Opcode::Exp | Opcode::Red | Opcode::Acc | Opcode::Riscv => Class::Pnm,
        Opcode::SendCxl | Opcode::RecvCxl | Opcode::BcastCxl => Class::Cxl,
        _ => Class::Pim,
    }
}

/// Device parameters converted to picoseconds.
#[derive(Debug, Clone)]
struct Params {
    timing: Timing,
    decode: Ps,
    cycle: Ps,
    fill: u64,
    units: [u64; 3],
    cores: usize,
    recip: u64,
    rsqrt: u64,
    pack_per_pair: u64,
    scan_per_elem: u64,
    lanes: u64,
    strict: bool,
    slot_b: u64,
    groups: u64,
    channels: usize,
    sb_slots: usize,
    /// Bytes per ns of one device link.
    link_bw: f64,
    base: f64,
    mc_latency: f64,
    mc_bandwidth: f64,
    host_bw: f64,
    inst_b: u64,
    inst_buffer_b: u64,
}

impl Params {
    fn new(cfg: &ArchConfig) -> Self {
        let cycle = ps(cfg.pnm_cycle_ns());
        let p = &cfg.pnm;
        let link_bw = cfg.cxl.effective_b_per_ns();
        Params {
            timing: Timing::new(&cfg.timing),
            decode: ps(p.decode_ns),
            cycle,
            fill: p.pipeline_fill_cycles as u64,
            units: [cfg.n_accumulators as u64, cfg.n_reduction_trees as u64, cfg.n_exp_units as u64],
            cores: cfg.n_scalar_cores,
            recip: p.riscv_recip_cycles as u64,
            rsqrt: p.riscv_rsqrt_cycles as u64,
            pack_per_pair: p.riscv_pack_cycles_per_pair as u64,
            scan_per_elem: p.riscv_scan_cycles_per_elem as u64,
            lanes: cfg.lanes() as u64,
            strict: p.strict_serial,
            slot_b: cfg.column_b as u64,
            groups: cfg.bank_groups as u64,
            channels: cfg.channels_per_device,
            sb_slots: cfg.sb_slots(),
            link_bw,
            base: cfg.cxl.base_latency_ns,
            mc_latency: cfg.cxl.multicast_latency_factor,
            mc_bandwidth: cfg.cxl.multicast_bandwidth_factor,
            host_bw: link_bw * cfg.cxl.host_link_lanes as f64 / cfg.cxl.device_link_lanes.max(1) as f64,
            inst_b: cfg.instruction_b,
            inst_buffer_b: cfg.instruction_buffer_b,
        }
    }

    fn routine_cycles(&self, r: &Routine) -> u64 {
        match *r {
            Routine::Recip { .. } => self.recip,
            Routine::Rsqrt { .. } => self.rsqrt,
            Routine::Pack { pairs } | Routine::Unpack { pairs } => self.pack_per_pair * pairs as u64,
            Routine::NegMax { valid, .. } => self.scan_per_elem * valid as u64,
            Routine::ZeroTail { .. } => self.scan_per_elem * self.lanes,
        }
    }

    /// Time for `bytes` to cross a link at `factor` of the link bandwidth.
    fn wire(&self, bytes: u64, factor: f64) -> Ps {
        ps(bytes as f64 / (self.link_bw * factor))
    }

    /// When instruction `i` is resident in the device instruction buffer.
    fn streamed(&self, i: usize) -> Ps {
        let need = (i as u64 + 1) * self.inst_b;
        if need <= self.inst_buffer_b || self.host_bw <= 0.0 {
            0
        } else {
            ps((need - self.inst_buffer_b) as f64 / self.host_bw)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Message {
    rd: u16,
    slots: u16,
    departure: Ps,
    arrival: Ps,
}

/// Timing of one device for one trace.
#[derive(Debug, Clone, Default)]
pub struct DeviceRun {
    pub device: u32,
    pub finish: Ps,
    pub counts: CommandCounts,
    /// Column-command occupancy per channel.
    pub channel_busy: Vec<Ps>,
    /// Busiest shared resource of the device: front end, a PNM unit class,
    /// the scalar cores or the CXL port.
    pub shared_busy: Ps,
    pub inst_start: Vec<Ps>,
    pub inst_done: Vec<Ps>,
}

struct DeviceState<'a> {
    trace: &'a DeviceTrace,
    pc: usize,
    channels: Vec<ChannelState>,
    fe_next: Ps,
    slot_ready: Vec<Ps>,
    slot_read: Vec<Ps>,
    unit_free: [Ps; 3],
    unit_busy: [Ps; 3],
    cores: Vec<Ps>,
    core_busy: Ps,
    egress_free: Ps,
    egress_busy: Ps,
    prev_done: Ps,
    run: DeviceRun,
}

impl<'a> DeviceState<'a> {
    fn new(trace: &'a DeviceTrace, p: &Params) -> Self {
        let n = trace.instructions.len();
        DeviceState {
            trace,
            pc: 0,
            channels: vec![ChannelState::default(); p.channels],
            fe_next: 0,
            slot_ready: vec![0; p.sb_slots],
            slot_read: vec![0; p.sb_slots],
            unit_free: [0; 3],
            unit_busy: [0; 3],
            cores: vec![0; p.cores.max(1)],
            core_busy: 0,
            egress_free: 0,
            egress_busy: 0,
            prev_done: 0,
            run: DeviceRun {
                device: trace.device,
                inst_start: Vec::with_capacity(n),
                inst_done: Vec::with_capacity(n),
                ..DeviceRun::default()
            },
        }
    }

    fn slots(&self, first: u16, n: u32) -> std::ops::Range<usize> {
        let a = (first as usize).min(self.slot_ready.len());
        a..(a + n as usize).min(self.slot_ready.len())
    }

    fn deps(&self, inst: &Instruction) -> Ps {
        let mut t = 0;
        if let Some((s, n)) = inst.sb_reads() {
            t = self.slots(s, n).map(|i| self.slot_ready[i]).max().unwrap_or(0);
        }
        if let Some((s, n)) = inst.sb_writes() {
            for i in self.slots(s, n) {
                t = t.max(self.slot_ready[i]).max(self.slot_read[i]);
            }
        }
        t
    }

    fn settle(&mut self, inst: &Instruction, done: Ps) {
        if let Some((s, n)) = inst.sb_reads() {
            for i in self.slots(s, n) {
                self.slot_read[i] = self.slot_read[i].max(done);
            }
        }
        if let Some((s, n)) = inst.sb_writes() {
            for i in self.slots(s, n) {
                self.slot_ready[i] = done;
            }
        }
    }

    fn finish(mut self) -> DeviceRun {
        self.run.channel_busy = self.channels.iter().map(|c| c.busy()).collect();
        self.run
    }
}

/// Messages in flight and link occupancy shared by all devices of a run.
struct Fabric {
    index: BTreeMap<u32, usize>,
    inbox: Vec<VecDeque<Message>>,
    ingress_free: Vec<Ps>,
}

impl Fabric {
    fn deliver(&mut self, dst: u32, rd: u16, slots: u16, departure: Ps, latency: f64, wire: Ps) -> Result<Ps, SimError> {
        let &k = self.index.get(&dst).ok_or(SimError::UnknownDevice(dst))?;
        let begin = (departure + ps(latency)).max(self.ingress_free[k]);
        let arrival = begin + wire;
        self.ingress_free[k] = arrival;
        self.inbox[k].push_back(Message { rd, slots, departure, arrival });
        Ok(arrival)
    }
}

/// Advance one device until it finishes or waits for a message. Returns
/// whether any instruction completed.
fn step_device(st: &mut DeviceState, me: usize, fab: &mut Fabric, p: &Params) -> Result<bool, SimError> {
    let mut progressed = false;
    let insts = &st.trace.instructions;
    while st.pc < insts.len() {
        let inst = &insts[st.pc];
        let dispatch = st.fe_next.max(p.streamed(st.pc));
        let mut ready = dispatch.max(st.deps(inst));
        if p.strict {
            ready = ready.max(st.prev_done);
        }
        let (start, done) = match *inst {
            Instruction::Exp { op_size, .. } | Instruction::Red { op_size, .. } | Instruction::Acc { op_size, .. } => {
                let u = match inst.opcode() {
                    Opcode::Acc => 0,
                    Opcode::Red => 1,
                    _ => 2,
                };
                let beats = (op_size as u64).div_ceil(p.units[u].max(1));
                let start = ready.max(st.unit_free[u]);
                st.unit_free[u] = start + beats * p.cycle;
                st.unit_busy[u] += beats * p.cycle;
                st.run.counts.pnm_slot_ops += op_size as u64;
                (start, start + (p.fill + beats) * p.cycle)
            }
            Instruction::Riscv { pc, .. } => {
                let r = st.trace.programs.get(&pc).ok_or(SimError::MissingRoutine { device: st.trace.device, pc })?;
                let cycles = p.routine_cycles(r);
                let core = (0..st.cores.len()).min_by_key(|&c| st.cores[c]).unwrap_or(0);
                let start = ready.max(st.cores[core]);
                let done = start + cycles * p.cycle;
                st.cores[core] = done;
                st.core_busy += cycles * p.cycle;
                st.run.counts.riscv_cycles += cycles;
                (start, done)
            }
            Instruction::SendCxl { dv, rd, slots, .. } => {
                let bytes = slots as u64 * p.slot_b;
                let wire = p.wire(bytes, 1.0);
                let start = ready.max(st.egress_free);
                st.egress_free = start + wire;
                st.egress_busy += wire;
                st.run.counts.cxl_bytes += bytes;
                let arrival = fab.deliver(dv as u32, rd, slots, start, p.base, wire)?;
                (start, arrival)
            }
            Instruction::BcastCxl { dv_count, rd, slots, .. } => {
                let bytes = slots as u64 * p.slot_b;
                let wire = p.wire(bytes, p.mc_bandwidth);
                let start = ready.max(st.egress_free);
                st.egress_free = start + wire;
                st.egress_busy += wire;
                st.run.counts.cxl_bytes += bytes;
                let mut last = start + wire;
                for t in broadcast_targets(st.trace.device, dv_count as u32) {
                    last = last.max(fab.deliver(t, rd, slots, start, p.base * p.mc_latency, wire)?);
                }
                (start, last)
            }
            Instruction::RecvCxl => {
                let Some(m) = fab.inbox[me].pop_front() else { break };
                let mut t = ready;
                for i in st.slots(m.rd, m.slots as u32) {
                    t = t.max(st.slot_ready[i]).max(st.slot_read[i]);
                }
                let done = t.max(m.arrival);
                for i in st.slots(m.rd, m.slots as u32) {
                    st.slot_ready[i] = done;
                }
                (t.max(m.departure), done)
            }
            _ => {
                let mask = inst.channel_mask().unwrap_or(0);
                let bursts = instruction_bursts(inst);
                let mut start = Ps::MAX;
                let mut done = ready;
                for ch in (0..32usize).filter(|c| mask >> c & 1 == 1) {
                    let Some(cs) = st.channels.get_mut(ch) else {
                        return Err(SimError::Channel { device: st.trace.device, channel: ch as u32 });
                    };
                    let mut not_before = ready;
                    for b in &bursts {
                        let (first, end) = cs
                            .issue_burst(b.kind, b.banks, b.row, b.count, not_before, &p.timing)
                            .map_err(|reason| SimError::Timing { device: st.trace.device, index: st.pc, reason })?;
                        start = start.min(first);
                        done = done.max(end);
                        not_before = 0;
                        st.run.counts.record(b.kind, b.banks, b.count as u64, p.groups);
                    }
                }
                (if start == Ps::MAX { ready } else { start }, done)
            }
        };
        st.settle(inst, done);
        st.fe_next = dispatch + p.decode;
        st.prev_done = done;
        st.run.finish = st.run.finish.max(done);
        st.run.counts.instructions += 1;
        st.run.inst_start.push(start);
        st.run.inst_done.push(done);
        st.pc += 1;
        progressed = true;
    }
    Ok(progressed)
}

/// Time the traces of one token together. Devices advance in id order until
/// each finishes or waits for a message; a full pass without progress is a
/// deadlock.
pub fn run_devices(traces: &[&DeviceTrace], cfg: &ArchConfig) -> Result<Vec<DeviceRun>, SimError> {
    let p = Params::new(cfg);
    if p.link_bw <= 0.0 && traces.iter().any(|t| t.instructions.iter().any(|i| class_of(i) == Class::Cxl)) {
        return Err(SimError::Timing { device: 0, index: 0, reason: "CXL link bandwidth is zero".into() });
    }
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by_key(|&i| traces[i].device);
    let index: BTreeMap<u32, usize> = order.iter().enumerate().map(|(k, &i)| (traces[i].device, k)).collect();
    let mut states: Vec<DeviceState> = order.iter().map(|&i| DeviceState::new(traces[i], &p)).collect();
    let n = states.len();
    let mut fab = Fabric { index, inbox: vec![VecDeque::new(); n], ingress_free: vec![0; n] };
    loop {
        let mut progressed = false;
        for (k, st) in states.iter_mut().enumerate() {
            progressed |= step_device(st, k, &mut fab, &p)?;
        }
        let blocked: Vec<u32> =
            states.iter().filter(|s| s.pc < s.trace.instructions.len()).map(|s| s.trace.device).collect();
        if blocked.is_empty() {
            break;
        }
        if !progressed {
            return Err(SimError::Deadlock { blocked });
        }
    }
    Ok(states
        .into_iter()
        .map(|st| {
            let shared = [
                st.run.counts.instructions * p.decode,
                st.unit_busy[0],
                st.unit_busy[1],
                st.unit_busy[2],
                st.core_busy / st.cores.len() as Ps,
                st.egress_busy,
            ]
            .into_iter()
            .max()
            .unwrap_or(0);
            let mut run = st.finish();
            run.shared_busy = shared;
            run
        })
        .collect())
}
