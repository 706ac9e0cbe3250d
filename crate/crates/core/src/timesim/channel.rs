//! DRAM command timing of one PIM channel.
//!
//! Time is kept in integer picoseconds so that command bursts and their
//! one-by-one expansion land on identical timestamps.

use crate::config::TimingParams;
use crate::isa::{Instruction, SourceSelect};
use serde::{Deserialize, Serialize};
use std::fmt;

pub type Ps = u64;

pub fn ps(ns: f64) -> Ps {
    (ns * 1000.0).round().max(0.0) as Ps
}

pub fn ns(t: Ps) -> f64 {
    t as f64 / 1000.0
}

const ALL_BANKS: u16 = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CommandKind {
    #[serde(rename = "ACTab")]
    Act,
    #[serde(rename = "PREab")]
    Pre,
    #[serde(rename = "MACab")]
    Mac,
    #[serde(rename = "EWMULab")]
    EwMul,
    #[serde(rename = "RD")]
    Rd,
    #[serde(rename = "WR")]
    Wr,
    #[serde(rename = "AFab")]
    Af,
}

impl CommandKind {
    pub const ALL: [CommandKind; 7] = [
        CommandKind::Act,
        CommandKind::Pre,
        CommandKind::Mac,
        CommandKind::EwMul,
        CommandKind::Rd,
        CommandKind::Wr,
        CommandKind::Af,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            CommandKind::Act => "ACTab",
            CommandKind::Pre => "PREab",
            CommandKind::Mac => "MACab",
            CommandKind::EwMul => "EWMULab",
            CommandKind::Rd => "RD",
            CommandKind::Wr => "WR",
            CommandKind::Af => "AFab",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column command that needs an open row in `banks`. `RD`/`WR` with an
    /// empty bank set move data between the bus and the global buffer or
    /// the PU registers instead.
    fn is_bank_column(self, banks: u16) -> bool {
        match self {
            CommandKind::Mac | CommandKind::EwMul => true,
            CommandKind::Rd | CommandKind::Wr => banks != 0,
            _ => false,
        }
    }

    fn is_column(self) -> bool {
        !matches!(self, CommandKind::Act | CommandKind::Pre)
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DramCommand {
    pub kind: CommandKind,
    pub channel: u8,
    /// Bit i set when bank i takes part.
    pub banks: u16,
    pub row: u32,
    pub col: u32,
    /// Requested issue time; `None` lets the simulator pick the earliest legal one.
    pub issue_ns: Option<f64>,
}

impl DramCommand {
    pub fn new(kind: CommandKind, banks: u16, row: u32, col: u32) -> Self {
        DramCommand { kind, channel: 0, banks, row, col, issue_ns: None }
    }

    pub fn at(mut self, t_ns: f64) -> Self {
        self.issue_ns = Some(t_ns);
        self
    }
}

/// One issued command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_ns: f64,
    pub channel: u8,
    pub command: CommandKind,
    pub bank: u16,
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TimingError {
    #[error("command {index} ({kind}): {reason}")]
    Illegal { index: usize, kind: CommandKind, reason: String },
    #[error("command {index} ({kind}) requested at {requested} ns, earliest legal issue is {earliest} ns")]
    TooEarly { index: usize, kind: CommandKind, requested: f64, earliest: f64 },
    #[error("CXL link bandwidth is zero")]
    ZeroBandwidth,
}

/// Timing constants in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub rcdrd: Ps,
    pub rcdwr: Ps,
    pub ras: Ps,
    pub rp: Ps,
    pub cl: Ps,
    pub ccds: Ps,
    /// `(tREFI, tRFC)` when refresh is modeled.
    pub refresh: Option<(Ps, Ps)>,
}

impl Timing {
    pub fn new(t: &TimingParams) -> Self {
        Timing {
            rcdrd: ps(t.t_rcdrd_ns),
            rcdwr: ps(t.t_rcdwr_ns),
            ras: ps(t.t_ras_ns),
            rp: ps(t.t_rp_ns),
            cl: ps(t.t_cl_ns),
            ccds: ps(t.t_ccds_ns),
            refresh: t.refresh_enabled.then(|| (ps(t.t_refi_ns), ps(t.t_rfc_ns))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OpenRow {
    row: u32,
    banks: u16,
    act: Ps,
}

/// Command-bus and bank state of one channel. Commands issue in order.
#[derive(Debug, Clone, Default)]
pub struct ChannelState {
    open: Option<OpenRow>,
    /// Earliest next activate (precharge complete).
    ready_act: Ps,
    /// Earliest next column command.
    col_next: Ps,
    last_issue: Ps,
    /// Issue time of the latest column command that touched a bank.
    last_bank_col: Option<Ps>,
    finish: Ps,
    /// Column commands issued, times tCCDS.
    busy: Ps,
}

impl ChannelState {
    pub fn finish(&self) -> Ps {
        self.finish
    }

    pub fn busy(&self) -> Ps {
        self.busy
    }

    /// Earliest legal issue time of the next command, or why it cannot issue.
    pub fn earliest(&self, kind: CommandKind, banks: u16, row: u32, t: &Timing) -> Result<Ps, String> {
        let mut at = self.last_issue;
        match kind {
            CommandKind::Act => {
                if self.open.is_some() {
                    return Err("activate while a row is open".into());
                }
                if banks == 0 {
                    return Err("activate of an empty bank set".into());
                }
                at = at.max(self.ready_act).max(self.col_next);
                if let Some((refi, rfc)) = t.refresh {
                    if refi > 0 && at % refi < rfc {
                        at += rfc - at % refi;
                    }
                }
            }
            CommandKind::Pre => {
                let o = self.open.ok_or("precharge with no open row")?;
                at = at.max(o.act + t.ras);
                if let Some(c) = self.last_bank_col {
                    at = at.max(c + t.ccds);
                }
            }
            k if k.is_bank_column(banks) => {
                let o = self.open.ok_or("column command with no open row")?;
                if o.row != row {
                    return Err(format!("row {row} is not open (row {} is)", o.row));
                }
                if banks & !o.banks != 0 {
                    return Err(format!("banks {banks:#06x} not activated ({:#06x} are)", o.banks));
                }
                let rcd = if k == CommandKind::Wr { t.rcdwr } else { t.rcdrd };
                at = at.max(o.act + rcd).max(self.col_next);
            }
            // Buffer and register transfers wait for the bus and any precharge.
            _ => at = at.max(self.col_next).max(self.ready_act),
        }
        Ok(at)
    }

    /// Issue `count` back-to-back commands of one kind, the first no earlier
    /// than `not_before`. Returns the first issue time and the completion
    /// time of the burst.
    pub fn issue_burst(
        &mut self,
        kind: CommandKind,
        banks: u16,
        row: u32,
        count: u32,
        not_before: Ps,
        t: &Timing,
    ) -> Result<(Ps, Ps), String> {
        let first = self.earliest(kind, banks, row, t)?.max(not_before);
        if count > 1 && !kind.is_column() {
            return Err(format!("{kind} cannot repeat"));
        }
        let last = first + (count.max(1) as Ps - 1) * t.ccds;
        let done = self.apply(kind, banks, row, last, count.max(1), t);
        Ok((first, done))
    }

    /// Record a command issued at `at` (the last of `count` for a burst);
    /// returns when its effect completes.
    fn apply(&mut self, kind: CommandKind, banks: u16, row: u32, at: Ps, count: u32, t: &Timing) -> Ps {
        self.last_issue = at;
        let done = match kind {
            CommandKind::Act => {
                self.open = Some(OpenRow { row, banks, act: at });
                at
            }
            CommandKind::Pre => {
                self.open = None;
                self.ready_act = at + t.rp;
                self.ready_act
            }
            k => {
                self.col_next = at + t.ccds;
                self.busy += count as Ps * t.ccds;
                if k.is_bank_column(banks) {
                    self.last_bank_col = Some(at);
                }
                if k == CommandKind::Rd {
                    at + t.cl.max(t.ccds)
                } else {
                    at + t.ccds
                }
            }
        };
        self.finish = self.finish.max(done);
        done
    }
}

/// Finish time and issued commands of one channel stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRun {
    pub finish_ns: f64,
    pub events: Vec<Event>,
}

/// Issue a command stream in order. Commands with a requested time are
/// checked against the timing constraints; the rest issue as early as legal.
pub fn simulate_channel(commands: &[DramCommand], t: &TimingParams) -> Result<ChannelRun, TimingError> {
    let tm = Timing::new(t);
    let mut st = ChannelState::default();
    let mut events = Vec::with_capacity(commands.len());
    for (index, c) in commands.iter().enumerate() {
        let earliest = st
            .earliest(c.kind, c.banks, c.row, &tm)
            .map_err(|reason| TimingError::Illegal { index, kind: c.kind, reason })?;
        let at = match c.issue_ns {
            Some(req) => {
                let r = ps(req);
                if r < earliest {
                    return Err(TimingError::TooEarly { index, kind: c.kind, requested: req, earliest: ns(earliest) });
                }
                r
            }
            None => earliest,
        };
        st.apply(c.kind, c.banks, c.row, at, 1, &tm);
        events.push(Event { time_ns: ns(at), channel: c.channel, command: c.kind, bank: c.banks, row: c.row, col: c.col });
    }
    Ok(ChannelRun { finish_ns: ns(st.finish), events })
}

/// Check an event log against the pairwise constraints without replaying the
/// simulator: ACT to column, column to column, ACT to PRE, PRE to ACT.
pub fn check_event_log(events: &[Event], t: &TimingParams) -> Result<(), String> {
    let tm = Timing::new(t);
    let mut by_channel: std::collections::BTreeMap<u8, Vec<&Event>> = Default::default();
    for e in events {
        by_channel.entry(e.channel).or_default().push(e);
    }
    for (ch, evs) in by_channel {
        let mut last_act: Option<Ps> = None;
        let mut last_pre: Option<Ps> = None;
        let mut last_col: Option<Ps> = None;
        let mut prev: Ps = 0;
        for e in evs {
            let at = ps(e.time_ns);
            let fail = |what: &str| Err(format!("channel {ch}: {} at {} ns violates {what}", e.command, e.time_ns));
            if at < prev {
                return fail("in-order issue");
            }
            prev = at;
            match e.command {
                CommandKind::Act => {
                    if let Some(p) = last_pre {
                        if at < p + tm.rp {
                            return fail("tRP");
                        }
                    }
                    last_act = Some(at);
                }
                CommandKind::Pre => {
                    let Some(a) = last_act else { return fail("an open row") };
                    if at < a + tm.ras {
                        return fail("tRAS");
                    }
                    last_pre = Some(at);
                    last_act = None;
                }
                k => {
                    if let Some(c) = last_col {
                        if at < c + tm.ccds {
                            return fail("tCCDS");
                        }
                    }
                    if k.is_bank_column(e.bank) {
                        let Some(a) = last_act else { return fail("an open row") };
                        let rcd = if k == CommandKind::Wr { tm.rcdwr } else { tm.rcdrd };
                        if at < a + rcd {
                            return fail(if k == CommandKind::Wr { "tRCDWR" } else { "tRCDRD" });
                        }
                    }
                    last_col = Some(at);
                }
            }
        }
    }
    Ok(())
}

/// A run of identical commands on every channel of an instruction's mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Burst {
    pub kind: CommandKind,
    pub banks: u16,
    pub row: u32,
    pub col: u32,
    pub count: u32,
}

fn bracket(banks: u16, row: u32, col: u32, kind: CommandKind, count: u32, col_banks: u16) -> Vec<Burst> {
    vec![
        Burst { kind: CommandKind::Act, banks, row, col: 0, count: 1 },
        Burst { kind, banks: col_banks, row, col, count },
        Burst { kind: CommandKind::Pre, banks, row, col: 0, count: 1 },
    ]
}

/// DRAM commands of a channel-addressed instruction, issued on every
/// channel of its mask. Each row access is bracketed by its own activate
/// and precharge. Instructions without channel work give no bursts.
pub fn instruction_bursts(inst: &Instruction) -> Vec<Burst> {
    use CommandKind as K;
    let one = |kind, banks, col, count| vec![Burst { kind, banks, row: 0, col, count }];
    match *inst {
        Instruction::MacAbk { op_size, row, col, src, .. } => {
            let banks = if src == SourceSelect::NeighborBank { 0x5555 } else { ALL_BANKS };
            bracket(banks, row, col, K::Mac, op_size, banks)
        }
        Instruction::EwMul { op_size, row, col, .. } => bracket(ALL_BANKS, row, col, K::EwMul, op_size, ALL_BANKS),
        Instruction::WrSbk { op_size, bank, row, col, .. } => bracket(1 << bank, row, col, K::Wr, op_size, 1 << bank),
        Instruction::RdSbk { op_size, bank, row, col, .. } => bracket(1 << bank, row, col, K::Rd, op_size, 1 << bank),
        Instruction::WrAbk { row, col, .. } => bracket(ALL_BANKS, row, col, K::Wr, 1, ALL_BANKS),
        Instruction::CopyBkgb { op_size, row, col, bank, .. } => bracket(1 << bank, row, col, K::Rd, op_size, 1 << bank),
        Instruction::CopyGbbk { op_size, row, col, bank, .. } => bracket(1 << bank, row, col, K::Wr, op_size, 1 << bank),
        Instruction::Af { .. } => one(K::Af, ALL_BANKS, 0, 1),
        Instruction::WrBias { .. } => one(K::Wr, 0, 0, 1),
        Instruction::RdMac { .. } => one(K::Rd, 0, 0, 1),
        Instruction::WrGb { op_size, col, .. } => one(K::Wr, 0, col, op_size),
        _ => Vec::new(),
    }
}

/// Command stream of one channel for a trace, one command per column.
pub fn channel_commands(trace: &[Instruction], channel: u8) -> Vec<DramCommand> {
    let mut out = Vec::new();
    for inst in trace {
        let Some(mask) = inst.channel_mask() else { continue };
        if mask >> channel & 1 == 0 {
            continue;
        }
        for b in instruction_bursts(inst) {
            for i in 0..b.count {
                out.push(DramCommand {
                    kind: b.kind,
                    channel,
                    banks: b.banks,
                    row: b.row,
                    col: b.col + if b.kind.is_column() { i } else { 0 },
                    issue_ns: None,
                });
            }
        }
    }
    out
}

/// Latency of a row-per-bank GEMV as the compiler schedules it, from the
/// shape alone. Output slots go round-robin over `channels`; tiles of up to
/// 32 slots per channel share one vector load per 64-slot input chunk.
///
/// Per channel and tile group: each chunk costs its vector load (one column
/// per tCCDS) plus, per tile, `tRCDRD + max(cols * tCCDS, tRAS - tRCDRD) + tRP`;
/// the first chunk adds one bias write per tile and the group ends with one
/// register readout per tile. The last readout adds tCL instead of tCCDS.
pub fn closed_form_gemv_latency(rows: usize, cols: usize, channels: usize, t: &TimingParams) -> f64 {
    if rows == 0 || cols == 0 || channels == 0 {
        return 0.0;
    }
    let (rcd, ras, rp, ccds, cl) = (t.t_rcdrd_ns, t.t_ras_ns, t.t_rp_ns, t.t_ccds_ns, t.t_cl_ns);
    let out_slots = rows.div_ceil(16);
    let in_slots = cols.div_ceil(16);
    let chunks: Vec<f64> = (0..in_slots.div_ceil(64)).map(|k| (in_slots - 64 * k).min(64) as f64).collect();
    let tiles = out_slots.div_ceil(channels);
    let mut worst = 0.0f64;
    for ch in 0..channels {
        let mut bus = 0.0;
        for g0 in (0..tiles).step_by(32) {
            let m = (g0..(g0 + 32).min(tiles)).filter(|&tile| tile * channels + ch < out_slots).count() as f64;
            if m == 0.0 {
                continue;
            }
            for &len in &chunks {
                bus += len * ccds + m * (rcd + (len * ccds).max(ras - rcd) + rp);
            }
            bus += 2.0 * m * ccds;
        }
        if bus > 0.0 {
            worst = worst.max(bus - ccds + cl.max(ccds));
        }
    }
    worst
}
