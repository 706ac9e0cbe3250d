//! Lowering of transformer blocks and whole token iterations to per-device
//! instruction traces.
//!
//! Each block is compiled against a [`layout::BlockLayout`] that fixes where
//! its weights, caches and scratch rows live in DRAM, and an
//! [`layout::SbLayout`] that fixes the Shared Buffer regions. Scalar work the
//! instruction set has no opcode for (reciprocals, maxima, pair packing) is
//! issued as `RISCV` with a program counter naming a [`Routine`].

pub mod layout;
pub mod lower;

use crate::config::{ArchConfig, ConfigError, ModelSpec};
use crate::isa::{format_trace, validate_traces, Instruction, Opcode, ValidationReport};
use crate::mapper::MappingPlan;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub use layout::{slots, BlockLayout, LayoutKind, SbLayout, TensorPlacement};
pub use lower::{
    build_layout, compile_devices, compile_token, compile_token_with, lower_attention, lower_gemv, lower_rmsnorm, lower_rope, lower_softmax, CompileOptions, Emitter,
    Phase, ProgramLayout,
};

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("placement mismatch: {0}")]
    Placement(String),
    #[error("position {pos} is outside the reserved context of {context} tokens")]
    Context { pos: usize, context: usize },
}

/// Scalar routines run by the PNM RISC-V cores. `op_size` of the issuing
/// instruction is the number of input slots; outputs are listed per routine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "routine", rename_all = "snake_case")]
pub enum Routine {
    /// `1 / sqrt(lane0 * inv_n + eps)` replicated over `out_slots` slots.
    Rsqrt { inv_n: f32, eps: f32, out_slots: u16 },
    /// `1 / lane0` replicated over `out_slots` slots.
    Recip { out_slots: u16 },
    /// Negated maximum of the first `valid` elements, replicated over `out_slots` slots.
    NegMax { valid: u32, out_slots: u16 },
    /// Copy one slot, zeroing lanes from `valid` on.
    ZeroTail { valid: u8 },
    /// Split interleaved pairs `(a0, b0, a1, b1, ..)` into `[a.. | b..]`
    /// followed by the swapped copy `[b.. | a..]`.
    Pack { pairs: u16 },
    /// Inverse of the first half of [`Routine::Pack`]: `[a.. | b..]` back to pairs.
    Unpack { pairs: u16 },
}

impl Routine {
    /// Slots written, given the issuing instruction's `op_size`.
    pub fn write_slots(&self, op_size: u32) -> u32 {
        match *self {
            Routine::Rsqrt { out_slots, .. } | Routine::Recip { out_slots } | Routine::NegMax { out_slots, .. } => {
                out_slots as u32
            }
            Routine::ZeroTail { .. } => 1,
            Routine::Pack { .. } => 2 * op_size,
            Routine::Unpack { .. } => op_size,
        }
    }

    /// Elements the scalar core touches, used for latency.
    pub fn elements(&self) -> u32 {
        match *self {
            Routine::Rsqrt { .. } | Routine::Recip { .. } | Routine::ZeroTail { .. } => 1,
            Routine::NegMax { valid, .. } => valid,
            Routine::Pack { pairs } | Routine::Unpack { pairs } => 2 * pairs as u32,
        }
    }
}

/// Transformer-block operators used to annotate trace ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    RmsNorm,
    QkvProjection,
    Rope,
    Attention,
    OutProjection,
    Residual,
    Ffn,
    Communication,
}

impl Operator {
    pub const ALL: [Operator; 8] = [
        Operator::RmsNorm,
        Operator::QkvProjection,
        Operator::Rope,
        Operator::Attention,
        Operator::OutProjection,
        Operator::Residual,
        Operator::Ffn,
        Operator::Communication,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::RmsNorm => "rmsnorm",
            Operator::QkvProjection => "qkv_projection",
            Operator::Rope => "rope",
            Operator::Attention => "attention",
            Operator::OutProjection => "out_projection",
            Operator::Residual => "residual",
            Operator::Ffn => "ffn",
            Operator::Communication => "communication",
        }
    }
}

/// Instructions `start..end` of a trace belong to `operator` of `block`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub operator: Operator,
    pub block: Option<u32>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrace {
    pub device: u32,
    pub instructions: Vec<Instruction>,
    pub annotations: Vec<Annotation>,
    /// RISC-V routines addressed by the `PC` operand.
    pub programs: BTreeMap<u32, Routine>,
}

impl DeviceTrace {
    /// Operator owning instruction `i`, if annotated.
    pub fn operator_of(&self, i: usize) -> Option<Operator> {
        self.annotations.iter().find(|a| a.start <= i && i < a.end).map(|a| a.operator)
    }

    pub fn micro_ops(&self, op: Opcode) -> u64 {
        self.instructions.iter().filter(|i| i.opcode() == op).map(|i| i.micro_op_count()).sum()
    }
}

/// Check traces together, including send/receive pairing.
pub fn validate_device_traces(traces: &[DeviceTrace], cfg: &ArchConfig) -> ValidationReport {
    let v: Vec<(u32, &[Instruction])> = traces.iter().map(|t| (t.device, t.instructions.as_slice())).collect();
    validate_traces(&v, cfg, cfg.n_devices as u32)
}

/// Fraction of arithmetic micro-ops that are `MAC_ABK`.
pub fn mac_share(traces: &[DeviceTrace]) -> f64 {
    let (mut mac, mut all) = (0u64, 0u64);
    for t in traces {
        for i in &t.instructions {
            if i.opcode().is_arithmetic() {
                let n = i.micro_op_count();
                all += n;
                if i.opcode() == Opcode::MacAbk {
                    mac += n;
                }
            }
        }
    }
    if all == 0 {
        0.0
    } else {
        mac as f64 / all as f64
    }
}

/// CXL bytes put on device links by the traces: each `SEND_CXL` and each
/// `BCAST_CXL` counts its slot run once.
pub fn cxl_bytes(traces: &[DeviceTrace], slot_b: u64) -> u64 {
    traces
        .iter()
        .flat_map(|t| &t.instructions)
        .map(|i| match *i {
            Instruction::SendCxl { slots, .. } | Instruction::BcastCxl { slots, .. } => slots as u64 * slot_b,
            _ => 0,
        })
        .sum()
}

/// Distinct data carried over CXL: a broadcast counts once, and sends of
/// one block and operator to the same destination slots count once, since
/// they carry partial sums of a single vector.
pub fn cxl_payload_bytes(traces: &[DeviceTrace], slot_b: u64) -> u64 {
    let mut sends = std::collections::BTreeSet::new();
    let mut total = 0;
    for t in traces {
        for (i, inst) in t.instructions.iter().enumerate() {
            match *inst {
                Instruction::BcastCxl { slots, .. } => total += slots as u64 * slot_b,
                Instruction::SendCxl { dv, rd, slots, .. } => {
                    let an = t.annotations.iter().find(|a| a.start <= i && i < a.end);
                    sends.insert((dv, rd, slots, an.map(|a| (a.block, a.operator))));
                }
                _ => {}
            }
        }
    }
    total + sends.iter().map(|s| s.2 as u64 * slot_b).sum::<u64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub device: u32,
    pub file: String,
    pub instructions: usize,
    pub micro_ops: u64,
    pub opcode_counts: BTreeMap<String, u64>,
    pub annotations: Vec<Annotation>,
    pub programs: BTreeMap<u32, Routine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub model: String,
    pub strategy: String,
    pub token_pos: usize,
    pub devices: Vec<ManifestEntry>,
}

pub fn trace_manifest(model: &ModelSpec, plan: &MappingPlan, token_pos: usize, traces: &[DeviceTrace]) -> TraceManifest {
    let devices = traces
        .iter()
        .map(|t| {
            let mut opcode_counts = BTreeMap::new();
            for i in &t.instructions {
                *opcode_counts.entry(i.opcode().mnemonic().to_string()).or_insert(0) += 1;
            }
            ManifestEntry {
                device: t.device,
                file: trace_file_name(t.device),
                instructions: t.instructions.len(),
                micro_ops: t.instructions.iter().map(|i| i.micro_op_count()).sum(),
                opcode_counts,
                annotations: t.annotations.clone(),
                programs: t.programs.clone(),
            }
        })
        .collect();
    TraceManifest { model: model.name.clone(), strategy: plan.strategy.name().to_string(), token_pos, devices }
}

pub fn trace_file_name(device: u32) -> String {
    format!("device_{device}.trace")
}

/// Write `device_<id>.trace` files and `trace_manifest.json` into `dir`.
pub fn write_traces(dir: &Path, manifest: &TraceManifest, traces: &[DeviceTrace]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in traces {
        std::fs::write(dir.join(trace_file_name(t.device)), format_trace(&t.instructions))?;
    }
    let json = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("trace_manifest.json"), json)
}
