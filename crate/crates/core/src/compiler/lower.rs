//! Instruction emission for block operators and full token iterations.

use super::layout::{
    layout_block, norm_pairs, slots, AttentionLayout, BlockLayout, BlockShape, LayoutKind, RowAllocator, SbLayout,
    SlotSlice, TensorPlacement, GB_CHUNK_SLOTS,
};
use super::{Annotation, CompileError, DeviceTrace, Operator, Routine};
use crate::config::{ArchConfig, ModelSpec};
use crate::isa::{AfId, Instruction, SourceSelect};
use crate::mapper::{BlockAssignment, MappingPlan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Subtract the running maximum before exponentiation.
    pub stabilize_softmax: bool,
    /// Prompt whose KV cache the token reads and appends to.
    pub prompt: u32,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { stabilize_softmax: true, prompt: 0 }
    }
}

/// Accumulates one device's instructions, annotations and routines.
#[derive(Debug, Default)]
pub struct Emitter {
    pub insts: Vec<Instruction>,
    pub annotations: Vec<Annotation>,
    routines: Vec<Routine>,
}

impl Emitter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, i: Instruction) {
        self.insts.push(i);
    }

    /// Issue `RISCV` for `r`, registering the routine on first use.
    pub fn riscv(&mut self, r: Routine, op_size: u32, rs: u16, rd: u16) {
        let pc = match self.routines.iter().position(|x| *x == r) {
            Some(p) => p,
            None => {
                self.routines.push(r);
                self.routines.len() - 1
            }
        };
        self.push(Instruction::Riscv { op_size, pc: pc as u32, rd, rs });
    }

    pub fn annotate<R>(&mut self, operator: Operator, block: Option<u32>, f: impl FnOnce(&mut Self) -> R) -> R {
        let start = self.insts.len();
        let r = f(self);
        let end = self.insts.len();
        if end > start {
            self.annotations.push(Annotation { operator, block, start, end });
        }
        r
    }

    pub fn finish(self, device: u32) -> DeviceTrace {
        DeviceTrace {
            device,
            instructions: self.insts,
            annotations: self.annotations,
            programs: self.routines.into_iter().enumerate().map(|(i, r)| (i as u32, r)).collect(),
        }
    }
}

fn s16(v: usize) -> u16 {
    u16::try_from(v).expect("Shared Buffer slot fits in 16 bits")
}

/// Emit a GEMV over output slots `range` of `m`. The input vector spans
/// `in_slots` slots; `provider(e, chunk, len)` makes chunk `chunk` available
/// in the Shared Buffer and returns its first slot. Output slot `s` lands in
/// `out + s - range.start`.
#[allow(clippy::too_many_arguments)]
fn emit_gemv<P>(
    e: &mut Emitter,
    m: &TensorPlacement,
    range: Range<usize>,
    in_slots: usize,
    zero: u16,
    out: u16,
    af: Option<AfId>,
    mut provider: P,
) -> Result<(), CompileError>
where
    P: FnMut(&mut Emitter, usize, usize) -> u16,
{
    let c = m.channels.count as usize;
    let chunks = in_slots.div_ceil(GB_CHUNK_SLOTS);
    if range.is_empty() || in_slots == 0 {
        return Err(CompileError::Shape(format!("{}: empty GEMV", m.name)));
    }
    if chunks > m.chunks as usize || range.end > m.tiles() * c {
        return Err(CompileError::Placement(format!(
            "{}: GEMV of {} output slots by {in_slots} input slots exceeds placement",
            m.name, range.end
        )));
    }
    let t0 = range.start / c;
    let t1 = (range.end - 1) / c + 1;
    let tiles: Vec<(usize, u32, usize)> = (t0..t1)
        .filter_map(|t| m.tile_mask(t, range.start, range.end).map(|(mask, k0)| (t, mask, k0)))
        .collect();
    for group in tiles.chunks(32) {
        let union = group.iter().fold(0u32, |a, x| a | x.1);
        for ch in 0..chunks {
            let len = (in_slots - ch * GB_CHUNK_SLOTS).min(GB_CHUNK_SLOTS);
            let src = provider(e, ch, len);
            e.push(Instruction::WrGb { ch_mask: union, op_size: len as u32, col: 0, rs: src });
            for &(t, mask, _) in group {
                let reg = (t % 32) as u8;
                if ch == 0 {
                    e.push(Instruction::WrBias { ch_mask: mask, rs: zero, reg: Some(reg) });
                }
                e.push(Instruction::MacAbk {
                    ch_mask: mask,
                    op_size: len as u32,
                    row: m.gemv_row(t, ch),
                    col: 0,
                    reg,
                    src: SourceSelect::GlobalBuffer,
                });
            }
        }
        for &(t, mask, k0) in group {
            let reg = (t % 32) as u8;
            if let Some(af) = af {
                e.push(Instruction::Af { ch_mask: mask, af, reg });
            }
            e.push(Instruction::RdMac { ch_mask: mask, rd: out + s16(t * c + k0 - range.start), reg });
        }
    }
    Ok(())
}

/// GEMV of the first `rows` rows and `cols` columns of `placement` with the
/// vector at `vec_slot`; results go to `out_slot` in row order.
pub fn lower_gemv(
    rows: usize,
    cols: usize,
    placement: &TensorPlacement,
    vec_slot: u16,
    out_slot: u16,
    zero_slot: u16,
) -> Result<Vec<Instruction>, CompileError> {
    if placement.kind != LayoutKind::RowPerBankGemv {
        return Err(CompileError::Placement(format!("{} is not a GEMV layout", placement.name)));
    }
    if rows > placement.rows || cols > placement.cols || rows == 0 || cols == 0 {
        return Err(CompileError::Placement(format!(
            "{rows}x{cols} GEMV on {}x{} placement {}",
            placement.rows, placement.cols, placement.name
        )));
    }
    let mut e = Emitter::new();
    emit_gemv(&mut e, placement, 0..slots(rows), slots(cols), zero_slot, out_slot, None, |_, ch, _| {
        vec_slot + s16(ch * GB_CHUNK_SLOTS)
    })?;
    Ok(e.insts)
}

/// Second operand of an element-wise multiply.
#[derive(Clone, Copy)]
enum Multiplier {
    /// A scalar replicated over at least 64 slots starting here.
    Replicated(u16),
    /// Already resident in banks 4g+1 of the placement.
    Preloaded,
}

/// `out = a * multiplier` over `n` slots through the bank-group layout of `p`.
fn emit_ew(e: &mut Emitter, p: &TensorPlacement, a: u16, n: usize, mult: Multiplier, out: u16) {
    let ch = p.channels.start as u8;
    for row_start in (0..n).step_by(256) {
        let row_end = (row_start + 256).min(n);
        let groups: Vec<(usize, usize)> =
            (row_start..row_end).step_by(64).map(|s| (s, (row_end - s).min(64))).collect();
        let row = p.ew_location(row_start, 0).0;
        for &(s, len) in &groups {
            let (_, bank, col) = p.ew_location(s, 0);
            let op_size = len as u32;
            e.push(Instruction::WrSbk { ch, op_size, bank: bank as u8, row, col, rs: a + s16(s) });
            if let Multiplier::Replicated(r) = mult {
                e.push(Instruction::WrSbk { ch, op_size, bank: bank as u8 + 1, row, col, rs: r });
            }
        }
        let widest = groups.iter().map(|g| g.1).max().unwrap_or(0) as u32;
        e.push(Instruction::EwMul { ch_mask: 1 << ch, op_size: widest, row, col: 0 });
        for &(s, len) in &groups {
            let (_, bank, col) = p.ew_location(s, 0);
            e.push(Instruction::RdSbk { ch, op_size: len as u32, bank: bank as u8 + 2, row, col, rd: out + s16(s) });
        }
    }
}

/// DRAM scratch an RMSNorm needs, all in one channel.
pub struct NormScratch<'a> {
    pub pair: &'a TensorPlacement,
    pub ew: &'a TensorPlacement,
    /// Learned scale, preloaded in banks 4g+1.
    pub weight: &'a TensorPlacement,
}

fn emit_rmsnorm(
    e: &mut Emitter,
    sb: &SbLayout,
    s: &NormScratch,
    d: usize,
    eps: f64,
    x: u16,
    y: u16,
) -> Result<(), CompileError> {
    if d % 16 != 0 || d == 0 {
        return Err(CompileError::Shape(format!("RMSNorm width {d} is not a multiple of 16")));
    }
    let ns = d / 16;
    let ch = s.pair.channels.start as u8;
    let mask = 1u32 << ch;
    let pairs = norm_pairs(ns);
    let part = ns / pairs;
    let runs: Vec<(u32, usize, usize)> =
        (0..part).step_by(64).map(|o| (s.pair.base_row + (o / 64) as u32, o, (part - o).min(64))).collect();
    for m in 0..pairs {
        for &(row, o, len) in &runs {
            let rs = x + s16(m * part + o);
            for bank in [2 * m, 2 * m + 1] {
                e.push(Instruction::WrSbk { ch, op_size: len as u32, bank: bank as u8, row, col: 0, rs });
            }
        }
    }
    e.push(Instruction::WrBias { ch_mask: mask, rs: sb.zero, reg: Some(0) });
    for &(row, _, len) in &runs {
        e.push(Instruction::MacAbk {
            ch_mask: mask,
            op_size: len as u32,
            row,
            col: 0,
            reg: 0,
            src: SourceSelect::NeighborBank,
        });
    }
    e.push(Instruction::RdMac { ch_mask: mask, rd: sb.tmp, reg: 0 });
    e.push(Instruction::Red { op_size: 1, rd: sb.tmp2, rs: sb.tmp });
    let rep = ns.min(GB_CHUNK_SLOTS) as u16;
    e.riscv(Routine::Rsqrt { inv_n: 1.0 / d as f32, eps: eps as f32, out_slots: rep }, 1, sb.tmp2, sb.rep);
    emit_ew(e, s.ew, x, ns, Multiplier::Replicated(sb.rep), y);
    emit_ew(e, s.weight, y, ns, Multiplier::Preloaded, y);
    Ok(())
}

/// RMSNorm of the `d`-element vector in `sb.x` into `sb.y`.
pub fn lower_rmsnorm(d: usize, scratch: &NormScratch, sb: &SbLayout, eps: f64) -> Result<DeviceTrace, CompileError> {
    let mut e = Emitter::new();
    emit_rmsnorm(&mut e, sb, scratch, d, eps, sb.x, sb.y)?;
    Ok(e.finish(0))
}

/// Exponentiate `len` scores at `s` in place and leave their sum in lane 0 of `sb.sum`.
fn emit_softmax_core(e: &mut Emitter, sb: &SbLayout, s: u16, len: usize, stabilize: bool) {
    let n = slots(len);
    if stabilize {
        let rep = n.min(GB_CHUNK_SLOTS);
        e.riscv(Routine::NegMax { valid: len as u32, out_slots: rep as u16 }, n as u32, s, sb.rep);
        for c0 in (0..n).step_by(GB_CHUNK_SLOTS) {
            let k = (n - c0).min(GB_CHUNK_SLOTS) as u32;
            e.push(Instruction::Acc { op_size: k, rd: s + s16(c0), rs: sb.rep });
        }
    }
    e.push(Instruction::Exp { op_size: n as u32, rd: s, rs: s });
    if len % 16 != 0 {
        let last = s + s16(n - 1);
        e.riscv(Routine::ZeroTail { valid: (len % 16) as u8 }, 1, last, last);
    }
    e.push(Instruction::Red { op_size: 1, rd: sb.sum, rs: sb.zero });
    for c0 in (0..n).step_by(GB_CHUNK_SLOTS) {
        let k = (n - c0).min(GB_CHUNK_SLOTS);
        e.push(Instruction::Red { op_size: k as u32, rd: sb.red, rs: s + s16(c0) });
        let mut m = k;
        while m > 1 {
            let h = m / 2;
            let keep = m - h;
            e.push(Instruction::Acc { op_size: h as u32, rd: sb.red, rs: sb.red + s16(keep) });
            m = keep;
        }
        e.push(Instruction::Acc { op_size: 1, rd: sb.sum, rs: sb.red });
    }
}

/// Softmax of `len` scores at `scores`, normalized in place through the
/// element-wise multipliers of `ew`.
pub fn lower_softmax(
    len: usize,
    ew: &TensorPlacement,
    sb: &SbLayout,
    scores: u16,
    opts: &CompileOptions,
) -> Result<DeviceTrace, CompileError> {
    if len == 0 {
        return Err(CompileError::Shape("softmax of an empty vector".into()));
    }
    let n = slots(len);
    let mut e = Emitter::new();
    emit_softmax_core(&mut e, sb, scores, len, opts.stabilize_softmax);
    e.riscv(Routine::Recip { out_slots: n.min(GB_CHUNK_SLOTS) as u16 }, 1, sb.sum, sb.rep);
    emit_ew(&mut e, ew, scores, n, Multiplier::Replicated(sb.rep), scores);
    Ok(e.finish(0))
}

fn emit_rope(e: &mut Emitter, sb: &SbLayout, table: &TensorPlacement, d_head: usize, pos: usize, head: u16) {
    let ns = slots(d_head) as u16;
    let (ch, row, col) = table.rope_location(pos);
    let r = sb.rope;
    let pairs = (d_head / 2) as u16;
    let op_size = ns as u32;
    let ch8 = ch as u8;
    e.riscv(Routine::Pack { pairs }, op_size, head, r);
    e.push(Instruction::WrSbk { ch: ch8, op_size, bank: 0, row, col, rs: r });
    e.push(Instruction::WrSbk { ch: ch8, op_size, bank: 4, row, col, rs: r + ns });
    e.push(Instruction::EwMul { ch_mask: 1 << ch, op_size, row, col });
    e.push(Instruction::RdSbk { ch: ch8, op_size, bank: 2, row, col, rd: r + 2 * ns });
    e.push(Instruction::RdSbk { ch: ch8, op_size, bank: 6, row, col, rd: r + 3 * ns });
    e.push(Instruction::Acc { op_size, rd: r + 2 * ns, rs: r + 3 * ns });
    e.riscv(Routine::Unpack { pairs }, op_size, r + 2 * ns, head);
}

/// Rotate the head at `head` by the angles of `position`. The table holds
/// `[cos | cos]` in bank 1 and `[-sin | sin]` in bank 5 per position.
pub fn lower_rope(
    d_head: usize,
    position: usize,
    table: &TensorPlacement,
    sb: &SbLayout,
    head: u16,
) -> Result<DeviceTrace, CompileError> {
    if d_head % 2 != 0 || d_head == 0 {
        return Err(CompileError::Shape(format!("rotary embedding needs an even head width, got {d_head}")));
    }
    if table.kind != LayoutKind::RopeTable || position >= table.rows || slots(d_head) > 64 {
        return Err(CompileError::Placement(format!("position {position} not in table {}", table.name)));
    }
    let mut e = Emitter::new();
    emit_rope(&mut e, sb, table, d_head, position, head);
    Ok(e.finish(0))
}

fn shift_rows(p: &TensorPlacement, rows: u32) -> TensorPlacement {
    let mut q = p.clone();
    q.base_row += rows;
    q
}

/// Attention for one token at `pos`: append K and V, then per query head
/// scores against its KV head, softmax, and the value GEMV. Queries and keys
/// must already be rotated; the output replaces the queries in `sb.q`.
fn emit_attention(
    e: &mut Emitter,
    model: &ModelSpec,
    sb: &SbLayout,
    at: &AttentionLayout,
    pos: usize,
    opts: &CompileOptions,
) -> Result<(), CompileError> {
    if pos >= at.context {
        return Err(CompileError::Context { pos, context: at.context });
    }
    let ns = slots(model.d_head);
    let ch = at.v_cache.channels;
    let c = ch.count as usize;
    let prompt = opts.prompt;
    let n_tok = pos + 1;
    let k_off = prompt * at.k_stride_rows;
    let v_cache = shift_rows(&at.v_cache, prompt * at.v_stride_rows);

    for (g, kp) in at.k_cache.iter().enumerate() {
        let loc = kp.kcache_location(pos, 0);
        e.push(Instruction::WrSbk {
            ch: loc.channel as u8,
            op_size: ns as u32,
            bank: loc.bank as u8,
            row: loc.row + k_off,
            col: loc.col,
            rs: sb.k + s16(g * ns),
        });
    }
    for i in 0..slots(model.kv_dim()) {
        let loc = v_cache.gemv_location(16 * i, pos);
        e.push(Instruction::WrAbk {
            ch: loc.channel as u8,
            row: loc.row,
            col: loc.col,
            rs: sb.v + s16(i),
            lane: loc.lane as u8,
        });
    }

    let per_row = at.k_cache[0].heads_per_row();
    let j_count = n_tok.div_ceil(16 * c);
    let mask_of = |used: usize| (((1u64 << used) - 1) as u32) << ch.start;
    let used_all = n_tok.div_ceil(16).min(c);
    for h in 0..model.n_heads {
        let g = h / model.group_size();
        let kp = &at.k_cache[g];
        let qh = sb.q + s16(h * ns);
        for m in 0..per_row.min(j_count) {
            e.push(Instruction::WrGb { ch_mask: mask_of(used_all), op_size: ns as u32, col: (m * ns) as u32, rs: qh });
        }
        for jb in (0..j_count).step_by(32) {
            let js = jb..(jb + 32).min(j_count);
            let mask_j = |j: usize| mask_of((n_tok - j * 16 * c).div_ceil(16).min(c));
            for j in js.clone() {
                let reg = (j % 32) as u8;
                e.push(Instruction::WrBias { ch_mask: mask_j(j), rs: sb.zero, reg: Some(reg) });
                e.push(Instruction::MacAbk {
                    ch_mask: mask_j(j),
                    op_size: ns as u32,
                    row: kp.base_row + k_off + (j / per_row) as u32,
                    col: ((j % per_row) * ns) as u32,
                    reg,
                    src: SourceSelect::GlobalBuffer,
                });
            }
            for j in js {
                e.push(Instruction::RdMac { ch_mask: mask_j(j), rd: sb.work + s16(j * c), reg: (j % 32) as u8 });
            }
        }
        emit_softmax_core(e, sb, sb.work, n_tok, opts.stabilize_softmax);
        let work = sb.work;
        emit_gemv(e, &v_cache, g * ns..(g + 1) * ns, slots(n_tok), sb.zero, qh, None, |_, chunk, _| {
            work + s16(chunk * GB_CHUNK_SLOTS)
        })?;
        e.riscv(Routine::Recip { out_slots: ns as u16 }, 1, sb.sum, sb.rep);
        let ew_ch = at.ew_scratch.channels.start as u8;
        let mut s = h * ns;
        while s < (h + 1) * ns {
            let len = ((h + 1) * ns - s).min(64 - s % 64);
            let (row, bank, col) = at.ew_scratch.ew_location(s, 1);
            e.push(Instruction::WrSbk {
                ch: ew_ch,
                op_size: len as u32,
                bank: bank as u8,
                row,
                col,
                rs: sb.rep + s16(s - h * ns),
            });
            s += len;
        }
    }
    emit_ew(e, &at.ew_scratch, sb.q, slots(model.d_model), Multiplier::Preloaded, sb.q);
    Ok(())
}

/// Attention of one token against a layout's caches. Expects rotated
/// queries in `sb.q` and the new key and value in `sb.k` and `sb.v`.
pub fn lower_attention(
    model: &ModelSpec,
    context_len: usize,
    at: &AttentionLayout,
    sb: &SbLayout,
    opts: &CompileOptions,
) -> Result<DeviceTrace, CompileError> {
    if context_len == 0 {
        return Err(CompileError::Shape("attention over zero tokens".into()));
    }
    let mut e = Emitter::new();
    emit_attention(&mut e, model, sb, at, context_len - 1, opts)?;
    Ok(e.finish(0))
}

/// Shared Buffer regions plus every device's block layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramLayout {
    pub sb: SbLayout,
    pub context: usize,
    /// Block layouts per device, in block order.
    pub devices: BTreeMap<u32, Vec<BlockLayout>>,
    /// Highest DRAM row used per device.
    pub rows_used: BTreeMap<u32, u32>,
}

impl ProgramLayout {
    pub fn block(&self, device: u32, block: u32) -> Option<&BlockLayout> {
        self.devices.get(&device)?.iter().find(|b| b.block == block)
    }
}

/// Place every block of `plan` in DRAM.
pub fn build_layout(model: &ModelSpec, arch: &ArchConfig, plan: &MappingPlan) -> Result<ProgramLayout, CompileError> {
    if model.d_model % 16 != 0 || model.d_head % 16 != 0 {
        return Err(CompileError::Shape(format!(
            "d_model ({}) and d_head ({}) must be multiples of 16",
            model.d_model, model.d_head
        )));
    }
    if slots(model.d_head) > 64 {
        return Err(CompileError::Shape(format!("d_head {} exceeds one DRAM row", model.d_head)));
    }
    let sb = SbLayout::new(model, arch, plan.context)?;
    let mut by_device: BTreeMap<u32, Vec<&BlockAssignment>> = BTreeMap::new();
    for a in &plan.block_assignments {
        for &d in &a.devices {
            by_device.entry(d).or_default().push(a);
        }
    }
    let built: Result<Vec<(u32, Vec<BlockLayout>, u32)>, CompileError> = by_device
        .par_iter()
        .map(|(&dev, assigns)| {
            let mut alloc = RowAllocator::new(arch);
            let mut blocks = Vec::with_capacity(assigns.len());
            for a in assigns {
                let shape = BlockShape {
                    model,
                    block: a.block,
                    device: dev,
                    group: &a.devices,
                    channels: a.channels,
                    context: plan.context,
                    kv_prompts: plan.batch_size.max(1),
                };
                blocks.push(layout_block(&shape, &mut alloc)?);
            }
            Ok((dev, blocks, alloc.high_water()))
        })
        .collect();
    let mut devices = BTreeMap::new();
    let mut rows_used = BTreeMap::new();
    for (dev, blocks, rows) in built? {
        devices.insert(dev, blocks);
        rows_used.insert(dev, rows);
    }
    Ok(ProgramLayout { sb, context: plan.context, devices, rows_used })
}

fn fan_out(e: &mut Emitter, bl: &BlockLayout, region: u16, n: usize) {
    let tp = bl.group.len();
    if tp < 2 {
        return;
    }
    e.annotate(Operator::Communication, Some(bl.block), |e| {
        if bl.is_master() {
            e.push(Instruction::BcastCxl { dv_count: (tp - 1) as u8, rs: region, rd: region, slots: s16(n) });
        } else {
            e.push(Instruction::RecvCxl);
        }
    });
}

fn gather(e: &mut Emitter, bl: &BlockLayout, region: u16, slice: SlotSlice) {
    let tp = bl.group.len();
    if tp < 2 {
        return;
    }
    e.annotate(Operator::Communication, Some(bl.block), |e| {
        if bl.is_master() {
            for _ in 1..tp {
                e.push(Instruction::RecvCxl);
            }
        } else {
            let at = region + s16(slice.start);
            e.push(Instruction::SendCxl { dv: bl.master as u16, rs: at, rd: at, slots: s16(slice.len) });
        }
    });
}

fn norm_scratch<'a>(at: &'a AttentionLayout, weight: &'a TensorPlacement) -> NormScratch<'a> {
    NormScratch { pair: &at.pair_scratch, ew: &at.ew_scratch, weight }
}

/// Gate and up projections of this device's hidden slice, SiLU, their
/// product, and the down projection into `sb.q`.
fn emit_ffn(e: &mut Emitter, sb: &SbLayout, bl: &BlockLayout) -> Result<(), CompileError> {
    let d = sb.d_slots as usize;
    let c = bl.channels.count as usize;
    let f = bl.ffn_slice.len;
    let mut cs = (d / 2).max(1);
    if cs >= c {
        cs -= cs % c;
    }
    let h = &bl.h_scratch;
    let ch = h.channels.start as u8;
    for f0 in (0..f).step_by(cs) {
        let n = cs.min(f - f0);
        emit_gemv(e, &bl.w_gate, f0..f0 + n, d, sb.zero, sb.q, Some(AfId::Silu), |_, k, _| {
            sb.y + s16(k * GB_CHUNK_SLOTS)
        })?;
        emit_gemv(e, &bl.w_up, f0..f0 + n, d, sb.zero, sb.q + s16(cs), None, |_, k, _| {
            sb.y + s16(k * GB_CHUNK_SLOTS)
        })?;
        let mut s = f0;
        while s < f0 + n {
            let len = (f0 + n - s).min(64 - s % 64);
            let (row, bank, col) = h.ew_location(s, 0);
            let op_size = len as u32;
            e.push(Instruction::WrSbk { ch, op_size, bank: bank as u8, row, col, rs: sb.q + s16(s - f0) });
            e.push(Instruction::WrSbk { ch, op_size, bank: bank as u8 + 1, row, col, rs: sb.q + s16(cs + s - f0) });
            s += len;
        }
    }
    for r in 0..f.div_ceil(256) {
        let width = (f - r * 256).min(64) as u32;
        e.push(Instruction::EwMul { ch_mask: 1 << ch, op_size: width, row: h.base_row + r as u32, col: 0 });
    }
    let work = sb.work;
    emit_gemv(e, &bl.w_down, 0..d, f, sb.zero, sb.q, None, |e, k, len| {
        let (row, bank, _) = h.ew_location(k * GB_CHUNK_SLOTS, 2);
        e.push(Instruction::RdSbk { ch, op_size: len as u32, bank: bank as u8, row, col: 0, rd: work });
        work
    })
}

/// One transformer block on one device of its group.
fn emit_block(
    e: &mut Emitter,
    model: &ModelSpec,
    sb: &SbLayout,
    bl: &BlockLayout,
    pos: usize,
    opts: &CompileOptions,
) -> Result<(), CompileError> {
    let b = Some(bl.block);
    let d = sb.d_slots as usize;
    let master = bl.is_master();
    let at = bl.attn.as_ref();
    if let Some(at) = at {
        e.annotate(Operator::RmsNorm, b, |e| {
            emit_rmsnorm(e, sb, &norm_scratch(at, &at.attn_norm), model.d_model, model.rms_eps, sb.x, sb.y)
        })?;
    }
    for (w, slice, dst) in [(&bl.wq, bl.q_slice, sb.q), (&bl.wk, bl.kv_slice, sb.k), (&bl.wv, bl.kv_slice, sb.v)] {
        fan_out(e, bl, sb.y, d);
        e.annotate(Operator::QkvProjection, b, |e| {
            emit_gemv(e, w, 0..slice.len, d, sb.zero, dst + s16(slice.start), None, |_, k, _| {
                sb.y + s16(k * GB_CHUNK_SLOTS)
            })
        })?;
        gather(e, bl, dst, slice);
    }
    if let Some(at) = at {
        let ns = sb.head_slots;
        e.annotate(Operator::Rope, b, |e| {
            for g in 0..model.n_kv_heads {
                emit_rope(e, sb, &at.rope, model.d_head, pos, sb.k + ns * g as u16);
            }
            for h in 0..model.n_heads {
                emit_rope(e, sb, &at.rope, model.d_head, pos, sb.q + ns * h as u16);
            }
        });
        e.annotate(Operator::Attention, b, |e| emit_attention(e, model, sb, at, pos, opts))?;
    }
    fan_out(e, bl, sb.q, d);
    e.annotate(Operator::OutProjection, b, |e| {
        emit_gemv(e, &bl.wo, 0..bl.o_slice.len, d, sb.zero, sb.y + s16(bl.o_slice.start), None, |_, k, _| {
            sb.q + s16(k * GB_CHUNK_SLOTS)
        })
    })?;
    gather(e, bl, sb.y, bl.o_slice);
    if let Some(at) = at {
        e.annotate(Operator::Residual, b, |e| e.push(Instruction::Acc { op_size: d as u32, rd: sb.x, rs: sb.y }));
        e.annotate(Operator::RmsNorm, b, |e| {
            emit_rmsnorm(e, sb, &norm_scratch(at, &at.ffn_norm), model.d_model, model.rms_eps, sb.x, sb.y)
        })?;
    }
    fan_out(e, bl, sb.y, d);
    e.annotate(Operator::Ffn, b, |e| emit_ffn(e, sb, bl))?;
    let tp = bl.group.len();
    if tp > 1 {
        e.annotate(Operator::Communication, b, |e| {
            if master {
                for _ in 1..tp {
                    e.push(Instruction::RecvCxl);
                    e.push(Instruction::Acc { op_size: d as u32, rd: sb.q, rs: sb.y });
                }
            } else {
                e.push(Instruction::SendCxl { dv: bl.master as u16, rs: sb.q, rd: sb.y, slots: s16(d) });
            }
        });
    }
    if master {
        e.annotate(Operator::Residual, b, |e| e.push(Instruction::Acc { op_size: d as u32, rd: sb.x, rs: sb.q }));
    }
    Ok(())
}

/// Trace of one device for one token: receive the hidden state from the
/// previous stage, run its blocks, forward the result.
fn compile_device(
    model: &ModelSpec,
    plan: &MappingPlan,
    layout: &ProgramLayout,
    device: u32,
    pos: usize,
    opts: &CompileOptions,
) -> Result<DeviceTrace, CompileError> {
    let sb = &layout.sb;
    let blocks = &layout.devices[&device];
    let mut e = Emitter::new();
    let d = sb.d_slots;
    let replica = plan
        .block_assignments
        .iter()
        .find(|a| a.devices.contains(&device))
        .map(|a| a.replica)
        .unwrap_or(0);
    let master_of = |block: u32| {
        plan.block_assignments.iter().find(|a| a.replica == replica && a.block == block).map(|a| a.master)
    };
    let first = &blocks[0];
    if first.is_master() && first.block > 0 && master_of(first.block - 1) != Some(device) {
        e.annotate(Operator::Communication, None, |e| e.push(Instruction::RecvCxl));
    }
    for bl in blocks {
        emit_block(&mut e, model, sb, bl, pos, opts)?;
    }
    let last = blocks.last().expect("device holds a block");
    if last.is_master() {
        if let Some(next) = master_of(last.block + 1) {
            if next != device {
                e.annotate(Operator::Communication, None, |e| {
                    e.push(Instruction::SendCxl { dv: next as u16, rs: sb.x, rd: sb.x, slots: d })
                });
            }
        }
    }
    Ok(e.finish(device))
}

/// Traces of every active device for the token at `token_pos`, against an
/// existing layout. Prefill and decode tokens follow the same path.
pub fn compile_token_with(
    model: &ModelSpec,
    plan: &MappingPlan,
    layout: &ProgramLayout,
    token_pos: usize,
    _phase: Phase,
    opts: &CompileOptions,
) -> Result<Vec<DeviceTrace>, CompileError> {
    if token_pos >= plan.context {
        return Err(CompileError::Context { pos: token_pos, context: plan.context });
    }
    let devices: Vec<u32> = layout.devices.keys().copied().collect();
    compile_devices(model, plan, layout, token_pos, &devices, opts)
}

/// Traces of the listed devices only, in the order given.
pub fn compile_devices(
    model: &ModelSpec,
    plan: &MappingPlan,
    layout: &ProgramLayout,
    token_pos: usize,
    devices: &[u32],
    opts: &CompileOptions,
) -> Result<Vec<DeviceTrace>, CompileError> {
    if token_pos >= plan.context {
        return Err(CompileError::Context { pos: token_pos, context: plan.context });
    }
    if let Some(d) = devices.iter().find(|d| !layout.devices.contains_key(d)) {
        return Err(CompileError::Placement(format!("device {d} holds no blocks")));
    }
    devices.par_iter().map(|&dev| compile_device(model, plan, layout, dev, token_pos, opts)).collect()
}

/// Lay out `plan` and compile the token at `token_pos`.
pub fn compile_token(
    model: &ModelSpec,
    arch: &ArchConfig,
    plan: &MappingPlan,
    token_pos: usize,
    phase: Phase,
    opts: &CompileOptions,
) -> Result<(ProgramLayout, Vec<DeviceTrace>), CompileError> {
    let layout = build_layout(model, arch, plan)?;
    let traces = compile_token_with(model, plan, &layout, token_pos, phase, opts)?;
    Ok((layout, traces))
}
