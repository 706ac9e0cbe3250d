//! Instruction set: decoded instructions, the textual assembly format,
//! micro-op expansion and trace validation.
//!
//! Operand order follows the assembly columns of the arithmetic and data
//! movement instruction tables. A few optional trailing operands extend the
//! grammar where the base encoding leaves a choice open:
//!
//! * `MAC_ABK ... Regid [GB|BANK]` selects the second multiplier operand.
//! * `COPY_BKGB` / `COPY_GBBK ... [BK]` name the bank (default 0).
//! * `WR_BIAS CHmask Rs [Regid]` initializes one register instead of all.
//! * `SEND_CXL` / `BCAST_CXL ... [slots]` move a run of slots (default 1).
//!
//! Canonical formatting omits a trailing operand that holds its default.

use crate::config::ArchConfig;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    MacAbk,
    EwMul,
    Af,
    Exp,
    Red,
    Acc,
    Riscv,
    SendCxl,
    RecvCxl,
    BcastCxl,
    WrSbk,
    RdSbk,
    WrAbk,
    CopyBkgb,
    CopyGbbk,
    WrBias,
    RdMac,
    WrGb,
}

impl Opcode {
    pub const ALL: [Opcode; 18] = [
        Opcode::MacAbk,
        Opcode::EwMul,
        Opcode::Af,
        Opcode::Exp,
        Opcode::Red,
        Opcode::Acc,
        Opcode::Riscv,
        Opcode::SendCxl,
        Opcode::RecvCxl,
        Opcode::BcastCxl,
        Opcode::WrSbk,
        Opcode::RdSbk,
        Opcode::WrAbk,
        Opcode::CopyBkgb,
        Opcode::CopyGbbk,
        Opcode::WrBias,
        Opcode::RdMac,
        Opcode::WrGb,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::MacAbk => "MAC_ABK",
            Opcode::EwMul => "EW_MUL",
            Opcode::Af => "AF",
            Opcode::Exp => "EXP",
            Opcode::Red => "RED",
            Opcode::Acc => "ACC",
            Opcode::Riscv => "RISCV",
            Opcode::SendCxl => "SEND_CXL",
            Opcode::RecvCxl => "RECV_CXL",
            Opcode::BcastCxl => "BCAST_CXL",
            Opcode::WrSbk => "WR_SBK",
            Opcode::RdSbk => "RD_SBK",
            Opcode::WrAbk => "WR_ABK",
            Opcode::CopyBkgb => "COPY_BKGB",
            Opcode::CopyGbbk => "COPY_GBBK",
            Opcode::WrBias => "WR_BIAS",
            Opcode::RdMac => "RD_MAC",
            Opcode::WrGb => "WR_GB",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|o| o.mnemonic() == s)
    }

    /// Opcodes that perform arithmetic (near-bank PU or PNM unit work).
    pub fn is_arithmetic(self) -> bool {
        matches!(
            self,
            Opcode::MacAbk | Opcode::EwMul | Opcode::Af | Opcode::Exp | Opcode::Red | Opcode::Acc | Opcode::Riscv
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Second operand of the near-bank multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceSelect {
    GlobalBuffer,
    NeighborBank,
}

/// Activation functions evaluated by the PU lookup tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AfId {
    Silu = 0,
    Gelu = 1,
    Sigmoid = 2,
    Tanh = 3,
}

impl AfId {
    pub fn from_code(c: u64) -> Option<AfId> {
        match c {
            0 => Some(AfId::Silu),
            1 => Some(AfId::Gelu),
            2 => Some(AfId::Sigmoid),
            3 => Some(AfId::Tanh),
            _ => None,
        }
    }
    pub fn code(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    MacAbk { ch_mask: u32, op_size: u32, row: u32, col: u32, reg: u8, src: SourceSelect },
    EwMul { ch_mask: u32, op_size: u32, row: u32, col: u32 },
    Af { ch_mask: u32, af: AfId, reg: u8 },
    Exp { op_size: u32, rd: u16, rs: u16 },
    Red { op_size: u32, rd: u16, rs: u16 },
    Acc { op_size: u32, rd: u16, rs: u16 },
    Riscv { op_size: u32, pc: u32, rd: u16, rs: u16 },
    SendCxl { dv: u16, rs: u16, rd: u16, slots: u16 },
    RecvCxl,
    BcastCxl { dv_count: u8, rs: u16, rd: u16, slots: u16 },
    WrSbk { ch: u8, op_size: u32, bank: u8, row: u32, col: u32, rs: u16 },
    RdSbk { ch: u8, op_size: u32, bank: u8, row: u32, col: u32, rd: u16 },
    WrAbk { ch: u8, row: u32, col: u32, rs: u16, lane: u8 },
    CopyBkgb { ch_mask: u32, op_size: u32, row: u32, col: u32, bank: u8 },
    CopyGbbk { ch_mask: u32, op_size: u32, row: u32, col: u32, bank: u8 },
    WrBias { ch_mask: u32, rs: u16, reg: Option<u8> },
    RdMac { ch_mask: u32, rd: u16, reg: u8 },
    WrGb { ch_mask: u32, op_size: u32, col: u32, rs: u16 },
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::MacAbk { .. } => Opcode::MacAbk,
            Instruction::EwMul { .. } => Opcode::EwMul,
            Instruction::Af { .. } => Opcode::Af,
            Instruction::Exp { .. } => Opcode::Exp,
            Instruction::Red { .. } => Opcode::Red,
            Instruction::Acc { .. } => Opcode::Acc,
            Instruction::Riscv { .. } => Opcode::Riscv,
            Instruction::SendCxl { .. } => Opcode::SendCxl,
            Instruction::RecvCxl => Opcode::RecvCxl,
            Instruction::BcastCxl { .. } => Opcode::BcastCxl,
            Instruction::WrSbk { .. } => Opcode::WrSbk,
            Instruction::RdSbk { .. } => Opcode::RdSbk,
            Instruction::WrAbk { .. } => Opcode::WrAbk,
            Instruction::CopyBkgb { .. } => Opcode::CopyBkgb,
            Instruction::CopyGbbk { .. } => Opcode::CopyGbbk,
            Instruction::WrBias { .. } => Opcode::WrBias,
            Instruction::RdMac { .. } => Opcode::RdMac,
            Instruction::WrGb { .. } => Opcode::WrGb,
        }
    }

    /// Channel mask for channel-addressed instructions (CHid maps to one bit).
    pub fn channel_mask(&self) -> Option<u32> {
        match *self {
            Instruction::MacAbk { ch_mask, .. }
            | Instruction::EwMul { ch_mask, .. }
            | Instruction::Af { ch_mask, .. }
            | Instruction::CopyBkgb { ch_mask, .. }
            | Instruction::CopyGbbk { ch_mask, .. }
            | Instruction::WrBias { ch_mask, .. }
            | Instruction::RdMac { ch_mask, .. }
            | Instruction::WrGb { ch_mask, .. } => Some(ch_mask),
            Instruction::WrSbk { ch, .. } | Instruction::RdSbk { ch, .. } | Instruction::WrAbk { ch, .. } => {
                Some(1u32 << ch)
            }
            _ => None,
        }
    }

    pub fn op_size(&self) -> u32 {
        match *self {
            Instruction::MacAbk { op_size, .. }
            | Instruction::EwMul { op_size, .. }
            | Instruction::Exp { op_size, .. }
            | Instruction::Red { op_size, .. }
            | Instruction::Acc { op_size, .. }
            | Instruction::Riscv { op_size, .. }
            | Instruction::WrSbk { op_size, .. }
            | Instruction::RdSbk { op_size, .. }
            | Instruction::CopyBkgb { op_size, .. }
            | Instruction::CopyGbbk { op_size, .. }
            | Instruction::WrGb { op_size, .. } => op_size,
            _ => 1,
        }
    }

    /// Number of micro-ops the decoder generates.
    pub fn micro_op_count(&self) -> u64 {
        match self.channel_mask() {
            Some(m) => self.op_size() as u64 * m.count_ones() as u64,
            None => self.op_size() as u64,
        }
    }

    /// Shared Buffer slots read by this instruction as (first, count).
    pub fn sb_reads(&self) -> Option<(u16, u32)> {
        match *self {
            Instruction::Exp { op_size, rs, .. }
            | Instruction::Red { op_size, rs, .. }
            | Instruction::Acc { op_size, rs, .. } => Some((rs, op_size)),
            Instruction::Riscv { op_size, rs, .. } => Some((rs, op_size)),
            Instruction::WrSbk { op_size, rs, .. } | Instruction::WrGb { op_size, rs, .. } => Some((rs, op_size)),
            Instruction::WrAbk { rs, .. } | Instruction::WrBias { rs, .. } => Some((rs, 1)),
            Instruction::SendCxl { rs, slots, .. } | Instruction::BcastCxl { rs, slots, .. } => {
                Some((rs, slots as u32))
            }
            _ => None,
        }
    }

    /// Shared Buffer slots written by this instruction as (first, count).
    /// `ACC` also reads its destination run.
    pub fn sb_writes(&self) -> Option<(u16, u32)> {
        match *self {
            Instruction::Exp { op_size, rd, .. }
            | Instruction::Red { op_size, rd, .. }
            | Instruction::Acc { op_size, rd, .. }
            | Instruction::Riscv { op_size, rd, .. }
            | Instruction::RdSbk { op_size, rd, .. } => Some((rd, op_size)),
            Instruction::RdMac { ch_mask, rd, .. } => Some((rd, ch_mask.count_ones())),
            _ => None,
        }
    }
}

fn hex_mask(m: u32) -> String {
    format!("0x{m:X}")
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.opcode().mnemonic();
        match *self {
            Instruction::MacAbk { ch_mask, op_size, row, col, reg, src } => {
                write!(f, "{op} {} {op_size} {row} {col} {reg}", hex_mask(ch_mask))?;
                if src == SourceSelect::NeighborBank {
                    f.write_str(" BANK")?;
                }
                Ok(())
            }
            Instruction::EwMul { ch_mask, op_size, row, col } => {
                write!(f, "{op} {} {op_size} {row} {col}", hex_mask(ch_mask))
            }
            Instruction::Af { ch_mask, af, reg } => write!(f, "{op} {} {} {reg}", hex_mask(ch_mask), af.code()),
            Instruction::Exp { op_size, rd, rs }
            | Instruction::Red { op_size, rd, rs }
            | Instruction::Acc { op_size, rd, rs } => write!(f, "{op} {op_size} {rd} {rs}"),
            Instruction::Riscv { op_size, pc, rd, rs } => write!(f, "{op} {op_size} {pc} {rd} {rs}"),
            Instruction::SendCxl { dv, rs, rd, slots } => {
                write!(f, "{op} {dv} {rs} {rd}")?;
                if slots != 1 {
                    write!(f, " {slots}")?;
                }
                Ok(())
            }
            Instruction::RecvCxl => f.write_str(op),
            Instruction::BcastCxl { dv_count, rs, rd, slots } => {
                write!(f, "{op} {dv_count} {rs} {rd}")?;
                if slots != 1 {
                    write!(f, " {slots}")?;
                }
                Ok(())
            }
            Instruction::WrSbk { ch, op_size, bank, row, col, rs } => {
                write!(f, "{op} {ch} {op_size} {bank} {row} {col} {rs}")
            }
            Instruction::RdSbk { ch, op_size, bank, row, col, rd } => {
                write!(f, "{op} {ch} {op_size} {bank} {row} {col} {rd}")
            }
            Instruction::WrAbk { ch, row, col, rs, lane } => write!(f, "{op} {ch} {row} {col} {rs} {lane}"),
            Instruction::CopyBkgb { ch_mask, op_size, row, col, bank }
            | Instruction::CopyGbbk { ch_mask, op_size, row, col, bank } => {
                write!(f, "{op} {} {op_size} {row} {col}", hex_mask(ch_mask))?;
                if bank != 0 {
                    write!(f, " {bank}")?;
                }
                Ok(())
            }
            Instruction::WrBias { ch_mask, rs, reg } => {
                write!(f, "{op} {} {rs}", hex_mask(ch_mask))?;
                if let Some(r) = reg {
                    write!(f, " {r}")?;
                }
                Ok(())
            }
            Instruction::RdMac { ch_mask, rd, reg } => write!(f, "{op} {} {rd} {reg}", hex_mask(ch_mask)),
            Instruction::WrGb { ch_mask, op_size, col, rs } => {
                write!(f, "{op} {} {op_size} {col} {rs}", hex_mask(ch_mask))
            }
        }
    }
}

/// Canonical assembly text for one instruction.
pub fn format_instruction(inst: &Instruction) -> String {
    inst.to_string()
}

/// Operand ranges used while parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IsaLimits {
    pub channels: u32,
    pub banks: u32,
    pub rows: u32,
    pub columns: u32,
    pub regs: u32,
    pub sb_slots: u32,
    pub lanes: u32,
}

impl Default for IsaLimits {
    fn default() -> Self {
        IsaLimits::from_arch(&ArchConfig::default())
    }
}

impl IsaLimits {
    pub fn from_arch(a: &ArchConfig) -> Self {
        IsaLimits {
            channels: a.channels_per_device as u32,
            banks: a.banks_per_channel as u32,
            rows: a.rows_per_bank() as u32,
            columns: a.columns_per_row() as u32,
            regs: a.acc_registers as u32,
            sb_slots: a.sb_slots() as u32,
            lanes: a.lanes() as u32,
        }
    }

    fn mask_limit(&self) -> u64 {
        if self.channels >= 32 {
            u32::MAX as u64
        } else {
            (1u64 << self.channels) - 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("empty instruction")]
    Empty,
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("{mnemonic}: expected {expected} operands, found {found}")]
    OperandCount { mnemonic: String, expected: String, found: usize },
    #[error("operand {position} (`{token}`): not a number")]
    BadNumber { token: String, position: usize },
    #[error("operand {position} (`{token}`): {field} out of range ({range})")]
    OutOfRange { token: String, position: usize, field: &'static str, range: String },
}

struct Operands<'a> {
    toks: &'a [&'a str],
    limits: &'a IsaLimits,
}

impl<'a> Operands<'a> {
    fn num(&self, pos: usize) -> Result<u64, ParseError> {
        let t = self.toks[pos];
        let parsed = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
            u64::from_str_radix(h, 16)
        } else {
            t.parse::<u64>()
        };
        parsed.map_err(|_| ParseError::BadNumber { token: t.to_string(), position: pos + 1 })
    }

    fn ranged(&self, pos: usize, field: &'static str, lo: u64, hi_exclusive: u64) -> Result<u64, ParseError> {
        let v = self.num(pos)?;
        if v < lo || v >= hi_exclusive {
            return Err(ParseError::OutOfRange {
                token: self.toks[pos].to_string(),
                position: pos + 1,
                field,
                range: format!("{lo}..{}", hi_exclusive - 1),
            });
        }
        Ok(v)
    }

    fn mask(&self, pos: usize) -> Result<u32, ParseError> {
        Ok(self.ranged(pos, "CHmask", 1, self.limits.mask_limit() + 1)? as u32)
    }
    fn chid(&self, pos: usize) -> Result<u8, ParseError> {
        Ok(self.ranged(pos, "CHid", 0, self.limits.channels as u64)? as u8)
    }
    fn op_size(&self, pos: usize) -> Result<u32, ParseError> {
        Ok(self.ranged(pos, "OPsize", 1, u32::MAX as u64 + 1)? as u32)
    }
    fn row(&self, pos: usize) -> Result<u32, ParseError> {
        Ok(self.ranged(pos, "RO", 0, self.limits.rows as u64)? as u32)
    }
    fn col(&self, pos: usize) -> Result<u32, ParseError> {
        Ok(self.ranged(pos, "CO", 0, self.limits.columns as u64)? as u32)
    }
    fn bank(&self, pos: usize) -> Result<u8, ParseError> {
        Ok(self.ranged(pos, "BK", 0, self.limits.banks as u64)? as u8)
    }
    fn reg(&self, pos: usize) -> Result<u8, ParseError> {
        Ok(self.ranged(pos, "Regid", 0, self.limits.regs as u64)? as u8)
    }
    fn lane(&self, pos: usize) -> Result<u8, ParseError> {
        Ok(self.ranged(pos, "Regid", 0, self.limits.lanes as u64)? as u8)
    }
    fn slot(&self, pos: usize, field: &'static str) -> Result<u16, ParseError> {
        Ok(self.ranged(pos, field, 0, self.limits.sb_slots as u64)? as u16)
    }
    fn slots(&self, pos: usize) -> Result<u16, ParseError> {
        Ok(self.ranged(pos, "slots", 1, self.limits.sb_slots as u64 + 1)? as u16)
    }
}

/// Parse one line of assembly using the default geometry.
pub fn parse_instruction(line: &str) -> Result<Instruction, ParseError> {
    parse_instruction_with(line, &IsaLimits::default())
}

pub fn parse_instruction_with(line: &str, limits: &IsaLimits) -> Result<Instruction, ParseError> {
    let code = line.split('#').next().unwrap_or("");
    let toks: Vec<&str> = code.split_whitespace().collect();
    let (&mn, rest) = toks.split_first().ok_or(ParseError::Empty)?;
    let op = Opcode::from_mnemonic(mn).ok_or_else(|| ParseError::UnknownMnemonic(mn.to_string()))?;
    let o = Operands { toks: rest, limits };
    let n = rest.len();
    let count = |lo: usize, hi: usize| -> Result<(), ParseError> {
        if n < lo || n > hi {
            let expected = if lo == hi { lo.to_string() } else { format!("{lo}-{hi}") };
            return Err(ParseError::OperandCount { mnemonic: mn.to_string(), expected, found: n });
        }
        Ok(())
    };
    let inst = match op {
        Opcode::MacAbk => {
            count(5, 6)?;
            let src = match rest.get(5).copied() {
                None | Some("GB") => SourceSelect::GlobalBuffer,
                Some("BANK") => SourceSelect::NeighborBank,
                Some(t) => {
                    return Err(ParseError::OutOfRange {
                        token: t.to_string(),
                        position: 6,
                        field: "source",
                        range: "GB|BANK".into(),
                    })
                }
            };
            Instruction::MacAbk {
                ch_mask: o.mask(0)?,
                op_size: o.op_size(1)?,
                row: o.row(2)?,
                col: o.col(3)?,
                reg: o.reg(4)?,
                src,
            }
        }
        Opcode::EwMul => {
            count(4, 4)?;
            Instruction::EwMul { ch_mask: o.mask(0)?, op_size: o.op_size(1)?, row: o.row(2)?, col: o.col(3)? }
        }
        Opcode::Af => {
            count(3, 3)?;
            let code = o.num(1)?;
            let af = AfId::from_code(code).ok_or_else(|| ParseError::OutOfRange {
                token: rest[1].to_string(),
                position: 2,
                field: "AFid",
                range: "0..3".into(),
            })?;
            Instruction::Af { ch_mask: o.mask(0)?, af, reg: o.reg(2)? }
        }
        Opcode::Exp | Opcode::Red | Opcode::Acc => {
            count(3, 3)?;
            let (op_size, rd, rs) = (o.op_size(0)?, o.slot(1, "Rd")?, o.slot(2, "Rs")?);
            match op {
                Opcode::Exp => Instruction::Exp { op_size, rd, rs },
                Opcode::Red => Instruction::Red { op_size, rd, rs },
                _ => Instruction::Acc { op_size, rd, rs },
            }
        }
        Opcode::Riscv => {
            count(4, 4)?;
            Instruction::Riscv {
                op_size: o.op_size(0)?,
                pc: o.ranged(1, "PC", 0, u32::MAX as u64 + 1)? as u32,
                rd: o.slot(2, "Rd")?,
                rs: o.slot(3, "Rs")?,
            }
        }
        Opcode::SendCxl => {
            count(3, 4)?;
            Instruction::SendCxl {
                dv: o.ranged(0, "DVid", 0, 1 << 16)? as u16,
                rs: o.slot(1, "Rs")?,
                rd: o.slot(2, "Rd")?,
                slots: if n == 4 { o.slots(3)? } else { 1 },
            }
        }
        Opcode::RecvCxl => {
            count(0, 0)?;
            Instruction::RecvCxl
        }
        Opcode::BcastCxl => {
            count(3, 4)?;
            Instruction::BcastCxl {
                dv_count: o.ranged(0, "DVcount", 1, 256)? as u8,
                rs: o.slot(1, "Rs")?,
                rd: o.slot(2, "Rd")?,
                slots: if n == 4 { o.slots(3)? } else { 1 },
            }
        }
        Opcode::WrSbk | Opcode::RdSbk => {
            count(6, 6)?;
            let (ch, op_size, bank, row, col) = (o.chid(0)?, o.op_size(1)?, o.bank(2)?, o.row(3)?, o.col(4)?);
            if op == Opcode::WrSbk {
                Instruction::WrSbk { ch, op_size, bank, row, col, rs: o.slot(5, "Rs")? }
            } else {
                Instruction::RdSbk { ch, op_size, bank, row, col, rd: o.slot(5, "Rd")? }
            }
        }
        Opcode::WrAbk => {
            count(5, 5)?;
            Instruction::WrAbk { ch: o.chid(0)?, row: o.row(1)?, col: o.col(2)?, rs: o.slot(3, "Rs")?, lane: o.lane(4)? }
        }
        Opcode::CopyBkgb | Opcode::CopyGbbk => {
            count(4, 5)?;
            let (ch_mask, op_size, row, col) = (o.mask(0)?, o.op_size(1)?, o.row(2)?, o.col(3)?);
            let bank = if n == 5 { o.bank(4)? } else { 0 };
            if op == Opcode::CopyBkgb {
                Instruction::CopyBkgb { ch_mask, op_size, row, col, bank }
            } else {
                Instruction::CopyGbbk { ch_mask, op_size, row, col, bank }
            }
        }
        Opcode::WrBias => {
            count(2, 3)?;
            Instruction::WrBias {
                ch_mask: o.mask(0)?,
                rs: o.slot(1, "Rs")?,
                reg: if n == 3 { Some(o.reg(2)?) } else { None },
            }
        }
        Opcode::RdMac => {
            count(3, 3)?;
            Instruction::RdMac { ch_mask: o.mask(0)?, rd: o.slot(1, "Rd")?, reg: o.reg(2)? }
        }
        Opcode::WrGb => {
            count(4, 4)?;
            Instruction::WrGb { ch_mask: o.mask(0)?, op_size: o.op_size(1)?, col: o.col(2)?, rs: o.slot(3, "Rs")? }
        }
    };
    Ok(inst)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {error}")]
pub struct TraceParseError {
    pub line: usize,
    pub error: ParseError,
}

/// Parse a trace file: one instruction per line, `#` comments, blank lines ignored.
pub fn parse_trace(text: &str, limits: &IsaLimits) -> Result<Vec<Instruction>, TraceParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let code = line.split('#').next().unwrap_or("");
        if code.trim().is_empty() {
            continue;
        }
        out.push(parse_instruction_with(code, limits).map_err(|error| TraceParseError { line: i + 1, error })?);
    }
    Ok(out)
}

pub fn format_trace(trace: &[Instruction]) -> String {
    let mut s = String::with_capacity(trace.len() * 24);
    for inst in trace {
        s.push_str(&inst.to_string());
        s.push('\n');
    }
    s
}

/// One decoded micro-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroOp {
    pub opcode: Opcode,
    pub channel: Option<u8>,
    /// Bit i set when bank i participates.
    pub banks: u16,
    pub row: Option<u32>,
    pub col: Option<u32>,
    pub slot: Option<u16>,
    pub seq: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExpandError {
    #[error("empty channel mask")]
    EmptyMask,
    #[error("columns {start}..{end} cross the {limit}-column row")]
    RowOverflow { start: u32, end: u32, limit: u32 },
    #[error("global buffer slots {start}..{end} exceed {limit} slots")]
    GlobalBufferOverflow { start: u32, end: u32, limit: u32 },
}

fn channels_of(mask: u32) -> impl Iterator<Item = u8> {
    (0..32u8).filter(move |c| mask >> c & 1 == 1)
}

/// Expand an instruction into decoder micro-ops, channel-major.
pub fn expand_microops(inst: &Instruction, cfg: &ArchConfig) -> Result<Vec<MicroOp>, ExpandError> {
    let cols = cfg.columns_per_row() as u32;
    let all_banks: u16 = if cfg.banks_per_channel >= 16 { u16::MAX } else { (1u16 << cfg.banks_per_channel) - 1 };
    let op = inst.opcode();
    let check_row = |col: u32, n: u32| {
        if col as u64 + n as u64 > cols as u64 {
            Err(ExpandError::RowOverflow { start: col, end: col + n, limit: cols })
        } else {
            Ok(())
        }
    };
    if let Some(0) = inst.channel_mask() {
        return Err(ExpandError::EmptyMask);
    }
    let mut out = Vec::new();
    let mk = |channel, banks, row, col, slot, seq| MicroOp { opcode: op, channel, banks, row, col, slot, seq };
    match *inst {
        Instruction::MacAbk { ch_mask, op_size, row, col, src, .. } => {
            check_row(col, op_size)?;
            let banks = if src == SourceSelect::NeighborBank { 0x5555 & all_banks } else { all_banks };
            for c in channels_of(ch_mask) {
                for i in 0..op_size {
                    out.push(mk(Some(c), banks, Some(row), Some(col + i), Some((col + i) as u16), i));
                }
            }
        }
        Instruction::EwMul { ch_mask, op_size, row, col } | Instruction::CopyBkgb { ch_mask, op_size, row, col, .. } | Instruction::CopyGbbk { ch_mask, op_size, row, col, .. } => {
            check_row(col, op_size)?;
            let banks = match *inst {
                Instruction::CopyBkgb { bank, .. } | Instruction::CopyGbbk { bank, .. } => 1u16 << bank,
                _ => all_banks,
            };
            for c in channels_of(ch_mask) {
                for i in 0..op_size {
                    out.push(mk(Some(c), banks, Some(row), Some(col + i), None, i));
                }
            }
        }
        Instruction::WrGb { ch_mask, op_size, col, rs } => {
            let gb = cfg.gb_slots() as u32;
            if col as u64 + op_size as u64 > gb as u64 {
                return Err(ExpandError::GlobalBufferOverflow { start: col, end: col + op_size, limit: gb });
            }
            for c in channels_of(ch_mask) {
                for i in 0..op_size {
                    out.push(mk(Some(c), 0, None, Some(col + i), Some(rs.wrapping_add(i as u16)), i));
                }
            }
        }
        Instruction::Af { ch_mask, .. } => {
            for c in channels_of(ch_mask) {
                out.push(mk(Some(c), all_banks, None, None, None, 0));
            }
        }
        Instruction::WrBias { ch_mask, rs, .. } => {
            for c in channels_of(ch_mask) {
                out.push(mk(Some(c), all_banks, None, None, Some(rs), 0));
            }
        }
        Instruction::RdMac { ch_mask, rd, .. } => {
            for (k, c) in channels_of(ch_mask).enumerate() {
                out.push(mk(Some(c), all_banks, None, None, Some(rd.wrapping_add(k as u16)), 0));
            }
        }
        Instruction::WrSbk { ch, op_size, bank, row, col, rs: slot }
        | Instruction::RdSbk { ch, op_size, bank, row, col, rd: slot } => {
            check_row(col, op_size)?;
            for i in 0..op_size {
                out.push(mk(Some(ch), 1u16 << bank, Some(row), Some(col + i), Some(slot.wrapping_add(i as u16)), i));
            }
        }
        Instruction::WrAbk { ch, row, col, rs, .. } => {
            out.push(mk(Some(ch), all_banks, Some(row), Some(col), Some(rs), 0));
        }
        Instruction::Exp { op_size, rd, .. }
        | Instruction::Red { op_size, rd, .. }
        | Instruction::Acc { op_size, rd, .. }
        | Instruction::Riscv { op_size, rd, .. } => {
            for i in 0..op_size {
                out.push(mk(None, 0, None, None, Some(rd.wrapping_add(i as u16)), i));
            }
        }
        Instruction::SendCxl { rs, .. } | Instruction::BcastCxl { rs, .. } => {
            out.push(mk(None, 0, None, None, Some(rs), 0));
        }
        Instruction::RecvCxl => out.push(mk(None, 0, None, None, None, 0)),
    }
    Ok(out)
}

/// Kinds of validation findings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FindingKind {
    OperandRange { field: String, value: u64, limit: u64 },
    RowOverflow { start: u32, end: u32 },
    GlobalBufferOverflow { start: u32, end: u32 },
    SlotRunOverflow { field: String, start: u32, end: u32 },
    EmptyChannelMask,
    UnknownDevice { target: u32 },
    /// Messages addressed to a device differ from its receive count.
    PairingImbalance { device: u32, sends: u32, receives: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub device: u32,
    /// Instruction index, absent for whole-trace findings.
    pub index: Option<usize>,
    pub kind: FindingKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_well_formed(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Destinations of a broadcast from `src`: the `count` devices after it.
pub fn broadcast_targets(src: u32, count: u32) -> impl Iterator<Item = u32> {
    (1..=count).map(move |k| src + k)
}

fn check_instruction(inst: &Instruction, cfg: &ArchConfig, n_devices: u32, src: u32, out: &mut Vec<FindingKind>) {
    let l = IsaLimits::from_arch(cfg);
    let mut range = |field: &str, value: u64, limit: u64| {
        if value >= limit {
            out.push(FindingKind::OperandRange { field: field.into(), value, limit });
        }
    };
    if let Some(m) = inst.channel_mask() {
        if m as u64 > l.mask_limit() {
            range("CHmask", m as u64, l.mask_limit() + 1);
        }
    }
    match *inst {
        Instruction::MacAbk { row, col, reg, .. } => {
            range("RO", row as u64, l.rows as u64);
            range("CO", col as u64, l.columns as u64);
            range("Regid", reg as u64, l.regs as u64);
        }
        Instruction::EwMul { row, col, .. } | Instruction::CopyBkgb { row, col, .. } | Instruction::CopyGbbk { row, col, .. } => {
            range("RO", row as u64, l.rows as u64);
            range("CO", col as u64, l.columns as u64);
        }
        Instruction::Af { reg, .. } | Instruction::RdMac { reg, .. } | Instruction::WrBias { reg: Some(reg), .. } => {
            range("Regid", reg as u64, l.regs as u64);
        }
        Instruction::WrSbk { bank, row, col, .. } | Instruction::RdSbk { bank, row, col, .. } => {
            range("BK", bank as u64, l.banks as u64);
            range("RO", row as u64, l.rows as u64);
            range("CO", col as u64, l.columns as u64);
        }
        Instruction::WrAbk { row, col, lane, .. } => {
            range("RO", row as u64, l.rows as u64);
            range("CO", col as u64, l.columns as u64);
            range("Regid", lane as u64, l.lanes as u64);
        }
        Instruction::SendCxl { dv, .. } => {
            if dv as u32 >= n_devices || dv as u32 == src {
                out.push(FindingKind::UnknownDevice { target: dv as u32 });
            }
        }
        Instruction::BcastCxl { dv_count, .. } => {
            let last = src + dv_count as u32;
            if last >= n_devices {
                out.push(FindingKind::UnknownDevice { target: last });
            }
        }
        _ => {}
    }
    if inst.channel_mask() == Some(0) {
        out.push(FindingKind::EmptyChannelMask);
    }
    let cols = l.columns;
    match *inst {
        Instruction::MacAbk { op_size, col, .. }
        | Instruction::EwMul { op_size, col, .. }
        | Instruction::CopyBkgb { op_size, col, .. }
        | Instruction::CopyGbbk { op_size, col, .. }
        | Instruction::WrSbk { op_size, col, .. }
        | Instruction::RdSbk { op_size, col, .. } => {
            if col as u64 + op_size as u64 > cols as u64 {
                out.push(FindingKind::RowOverflow { start: col, end: col.saturating_add(op_size) });
            }
        }
        Instruction::WrGb { op_size, col, .. } => {
            if col as u64 + op_size as u64 > cfg.gb_slots() as u64 {
                out.push(FindingKind::GlobalBufferOverflow { start: col, end: col.saturating_add(op_size) });
            }
        }
        _ => {}
    }
    let slots = l.sb_slots as u64;
    for (field, run) in [("Rs", inst.sb_reads()), ("Rd", inst.sb_writes())] {
        if let Some((s, n)) = run {
            if s as u64 + n as u64 > slots {
                out.push(FindingKind::SlotRunOverflow { field: field.into(), start: s as u32, end: s as u32 + n });
            }
        }
    }
    if let Instruction::SendCxl { rd, slots: n, .. } | Instruction::BcastCxl { rd, slots: n, .. } = *inst {
        if rd as u64 + n as u64 > slots {
            out.push(FindingKind::SlotRunOverflow { field: "Rd".into(), start: rd as u32, end: rd as u32 + n as u32 });
        }
    }
}

/// Validate one device trace in isolation (pairing is checked by
/// [`validate_traces`]).
pub fn validate_trace(trace: &[Instruction], cfg: &ArchConfig) -> ValidationReport {
    let mut findings = Vec::new();
    for (i, inst) in trace.iter().enumerate() {
        let mut kinds = Vec::new();
        check_instruction(inst, cfg, u32::MAX, u32::MAX - 1, &mut kinds);
        findings.extend(kinds.into_iter().map(|kind| Finding { device: 0, index: Some(i), kind }));
    }
    ValidationReport { findings }
}

/// Validate a set of device traces, including send/receive pairing.
/// `traces` holds `(device id, instructions)`; `n_devices` bounds the ids.
pub fn validate_traces(traces: &[(u32, &[Instruction])], cfg: &ArchConfig, n_devices: u32) -> ValidationReport {
    let mut findings = Vec::new();
    let mut incoming = vec![0u32; n_devices as usize];
    let mut receives = vec![0u32; n_devices as usize];
    for &(dev, trace) in traces {
        for (i, inst) in trace.iter().enumerate() {
            let mut kinds = Vec::new();
            check_instruction(inst, cfg, n_devices, dev, &mut kinds);
            findings.extend(kinds.into_iter().map(|kind| Finding { device: dev, index: Some(i), kind }));
            match *inst {
                Instruction::SendCxl { dv, .. } => {
                    if let Some(c) = incoming.get_mut(dv as usize) {
                        *c += 1;
                    }
                }
                Instruction::BcastCxl { dv_count, .. } => {
                    for t in broadcast_targets(dev, dv_count as u32) {
                        if let Some(c) = incoming.get_mut(t as usize) {
                            *c += 1;
                        }
                    }
                }
                Instruction::RecvCxl => {
                    if let Some(c) = receives.get_mut(dev as usize) {
                        *c += 1;
                    }
                }
                _ => {}
            }
        }
    }
    for d in 0..n_devices as usize {
        if incoming[d] != receives[d] {
            findings.push(Finding {
                device: d as u32,
                index: None,
                kind: FindingKind::PairingImbalance { device: d as u32, sends: incoming[d], receives: receives[d] },
            });
        }
    }
    ValidationReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_instruction("MAC_ABK 0xFFFFFFFF 64 12 0 2").unwrap(),
            Instruction::MacAbk {
                ch_mask: u32::MAX,
                op_size: 64,
                row: 12,
                col: 0,
                reg: 2,
                src: SourceSelect::GlobalBuffer
            }
        );
        assert_eq!(parse_instruction("RECV_CXL").unwrap(), Instruction::RecvCxl);
        assert_eq!(
            parse_instruction("BCAST_CXL 7 100 100").unwrap(),
            Instruction::BcastCxl { dv_count: 7, rs: 100, rd: 100, slots: 1 }
        );
    }

    #[test]
    fn format_examples() {
        let mac = Instruction::MacAbk { ch_mask: u32::MAX, op_size: 64, row: 12, col: 0, reg: 2, src: SourceSelect::GlobalBuffer };
        assert_eq!(format_instruction(&mac), "MAC_ABK 0xFFFFFFFF 64 12 0 2");
        assert_eq!(format_instruction(&Instruction::SendCxl { dv: 3, rs: 0, rd: 0, slots: 1 }), "SEND_CXL 3 0 0");
        assert_eq!(format_instruction(&Instruction::WrGb { ch_mask: 1, op_size: 8, col: 0, rs: 16 }), "WR_GB 0x1 8 0 16");
    }

    #[test]
    fn parse_errors_name_token_and_position() {
        assert_eq!(parse_instruction("FOO 1"), Err(ParseError::UnknownMnemonic("FOO".into())));
        assert!(matches!(parse_instruction("RECV_CXL 1"), Err(ParseError::OperandCount { found: 1, .. })));
        match parse_instruction("MAC_ABK 0x1 4 5 99 0") {
            Err(ParseError::OutOfRange { token, position, field, .. }) => {
                assert_eq!((token.as_str(), position, field), ("99", 4, "CO"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_instruction("EXP 1 2 zz"), Err(ParseError::BadNumber { position: 3, .. })));
    }

    #[test]
    fn comments_and_blank_lines() {
        let t = parse_trace("# header\n\nRECV_CXL # wait\n  EXP 2 0 4\n", &IsaLimits::default()).unwrap();
        assert_eq!(t.len(), 2);
        let e = parse_trace("RECV_CXL\nBAD\n", &IsaLimits::default()).unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn expansion_examples() {
        let cfg = ArchConfig::default();
        let mac = Instruction::MacAbk { ch_mask: 1, op_size: 4, row: 5, col: 10, reg: 0, src: SourceSelect::GlobalBuffer };
        let ops = expand_microops(&mac, &cfg).unwrap();
        assert_eq!(ops.iter().map(|m| m.col.unwrap()).collect::<Vec<_>>(), vec![10, 11, 12, 13]);
        assert!(ops.iter().all(|m| m.channel == Some(0)));
        let af = Instruction::Af { ch_mask: 3, af: AfId::Silu, reg: 1 };
        let ops = expand_microops(&af, &cfg).unwrap();
        assert_eq!(ops.len(), 2);
        assert!(ops.iter().all(|m| m.seq == 0));
        let wr = Instruction::WrSbk { ch: 2, op_size: 3, bank: 0, row: 0, col: 0, rs: 100 };
        let ops = expand_microops(&wr, &cfg).unwrap();
        assert_eq!(ops.iter().map(|m| (m.slot.unwrap(), m.col.unwrap())).collect::<Vec<_>>(), vec![(100, 0), (101, 1), (102, 2)]);
        let over = Instruction::MacAbk { ch_mask: 1, op_size: 8, row: 0, col: 60, reg: 0, src: SourceSelect::GlobalBuffer };
        assert!(matches!(expand_microops(&over, &cfg), Err(ExpandError::RowOverflow { .. })));
        let empty = Instruction::EwMul { ch_mask: 0, op_size: 1, row: 0, col: 0 };
        assert_eq!(expand_microops(&empty, &cfg), Err(ExpandError::EmptyMask));
    }

    #[test]
    fn validation_examples() {
        let cfg = ArchConfig::default();
        assert!(validate_trace(&[], &cfg).is_well_formed());
        let send = [Instruction::SendCxl { dv: 3, rs: 0, rd: 0, slots: 1 }];
        let r = validate_traces(&[(0, &send[..]), (3, &[][..])], &cfg, 4);
        assert!(r.findings.iter().any(|f| matches!(f.kind, FindingKind::PairingImbalance { device: 3, sends: 1, receives: 0 })));
        let gb = [Instruction::WrGb { ch_mask: 1, op_size: 65, col: 0, rs: 0 }];
        let r = validate_trace(&gb, &cfg);
        assert!(r.findings.iter().any(|f| matches!(f.kind, FindingKind::GlobalBufferOverflow { .. })));
    }
}
