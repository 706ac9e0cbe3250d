//! DRAM and Shared Buffer placement for compiled transformer blocks.

use super::CompileError;
use crate::config::{ArchConfig, ModelSpec};
use crate::mapper::ChannelRange;
use serde::{Deserialize, Serialize};

/// 256-bit slots needed for `n` BF16 elements.
pub fn slots(n: usize) -> usize {
    n.div_ceil(16)
}

/// Slot count of one input chunk: a full Global Buffer.
pub const GB_CHUNK_SLOTS: usize = 64;
/// Elements per Global Buffer chunk.
pub const GB_CHUNK_ELEMS: usize = GB_CHUNK_SLOTS * 16;
/// Columns of one DRAM row.
const COLS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayoutKind {
    /// Matrix rows spread over the 16 banks of each channel; see [`TensorPlacement::gemv_location`].
    RowPerBankGemv,
    /// The same vector segment in both banks of each neighbor pair.
    NeighborPairDot,
    /// Operands in banks 4g and 4g+1 of each bank group, result in 4g+2.
    BankgroupTripleEwmul,
    /// Key cache, one token per bank lane group; see [`TensorPlacement::kcache_location`].
    KvCacheAppend,
    /// Per-position rotary tables spread over channels.
    RopeTable,
}

/// Physical location of one BF16 element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub channel: u32,
    pub bank: u32,
    pub row: u32,
    pub col: u32,
    pub lane: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPlacement {
    pub name: String,
    pub kind: LayoutKind,
    pub rows: usize,
    pub cols: usize,
    pub channels: ChannelRange,
    pub base_row: u32,
    /// DRAM rows reserved in each channel of `channels`.
    pub row_count: u32,
    /// DRAM rows per tile (GEMV) or per head position block.
    pub chunks: u32,
}

impl TensorPlacement {
    fn c(&self) -> usize {
        self.channels.count as usize
    }

    /// Row tiles of a GEMV matrix: 16 rows per channel, all channels.
    pub fn tiles(&self) -> usize {
        slots(self.rows).div_ceil(self.c())
    }

    pub fn gemv_row(&self, tile: usize, chunk: usize) -> u32 {
        self.base_row + (tile * self.chunks as usize + chunk) as u32
    }

    /// Row `r` lives in bank `r % 16` of channel `(r / 16) % C`; column
    /// element `c` sits in chunk `c / 1024`, column `(c % 1024) / 16`.
    pub fn gemv_location(&self, r: usize, c: usize) -> Location {
        let slot = r / 16;
        let tile = slot / self.c();
        Location {
            channel: self.channels.start + (slot % self.c()) as u32,
            bank: (r % 16) as u32,
            row: self.gemv_row(tile, c / GB_CHUNK_ELEMS),
            col: ((c % GB_CHUNK_ELEMS) / 16) as u32,
            lane: (c % 16) as u32,
        }
    }

    /// Channel mask of the channels holding output slots `[s0, s1)` of tile `t`,
    /// plus the first channel offset used.
    pub fn tile_mask(&self, tile: usize, s0: usize, s1: usize) -> Option<(u32, usize)> {
        let c = self.c();
        let lo = s0.max(tile * c);
        let hi = s1.min((tile + 1) * c);
        if lo >= hi {
            return None;
        }
        let (k0, k1) = (lo - tile * c, hi - tile * c);
        let bits = ((1u64 << (k1 - k0)) - 1) as u32;
        Some((bits << (self.channels.start as usize + k0), k0))
    }

    /// Key-cache j-groups stored per DRAM row.
    pub fn heads_per_row(&self) -> usize {
        (COLS / slots(self.cols)).max(1)
    }

    /// Token `t` lives in bank `t % 16` of channel `(t / 16) % C` at local
    /// index `j = t / (16 C)`; each j holds the full head in consecutive columns.
    pub fn kcache_location(&self, t: usize, dim: usize) -> Location {
        let c = self.c();
        let j = t / (16 * c);
        let per_row = self.heads_per_row();
        let ns = slots(self.cols);
        Location {
            channel: self.channels.start + ((t / 16) % c) as u32,
            bank: (t % 16) as u32,
            row: self.base_row + (j / per_row) as u32,
            col: ((j % per_row) * ns + dim / 16) as u32,
            lane: (dim % 16) as u32,
        }
    }

    /// Bank-group layout: slot `s` sits in row `s / 256`, group `(s % 256) / 64`,
    /// column `s % 64`. `role` is 0/1 for the operands and 2 for the product.
    pub fn ew_location(&self, s: usize, role: u32) -> (u32, u32, u32) {
        let g = ((s % 256) / 64) as u32;
        (self.base_row + (s / 256) as u32, 4 * g + role, (s % 64) as u32)
    }

    /// Rotary tables: position `p` in channel `p % C`, local index `u = p / C`.
    /// Cosines sit in bank 1 and signed sines in bank 5.
    pub fn rope_location(&self, p: usize) -> (u32, u32, u32) {
        let c = self.c();
        let ns = slots(self.cols);
        let per_row = (COLS / ns).max(1);
        let u = p / c;
        (
            self.channels.start + (p % c) as u32,
            self.base_row + (u / per_row) as u32,
            ((u % per_row) * ns) as u32,
        )
    }
}

/// Per-channel DRAM row allocator.
#[derive(Debug, Clone)]
pub struct RowAllocator {
    next: Vec<u32>,
    limit: u32,
}

impl RowAllocator {
    pub fn new(cfg: &ArchConfig) -> Self {
        RowAllocator { next: vec![0; cfg.channels_per_device], limit: cfg.rows_per_bank() as u32 }
    }

    /// Reserve `rows` rows at a common base across `channels`.
    pub fn alloc(&mut self, name: &str, channels: ChannelRange, rows: u32) -> Result<u32, CompileError> {
        let r = channels.start as usize..(channels.start + channels.count) as usize;
        let base = self.next[r.clone()].iter().copied().max().unwrap_or(0);
        if base as u64 + rows as u64 > self.limit as u64 {
            return Err(CompileError::Capacity(format!(
                "{name}: needs rows {base}..{} but banks have {} rows",
                base as u64 + rows as u64,
                self.limit
            )));
        }
        for n in &mut self.next[r] {
            *n = base + rows;
        }
        Ok(base)
    }

    /// Highest row in use on any channel.
    pub fn high_water(&self) -> u32 {
        self.next.iter().copied().max().unwrap_or(0)
    }
}

/// Shared Buffer regions used by every block lowering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SbLayout {
    /// A slot that always holds zeros.
    pub zero: u16,
    /// Residual stream.
    pub x: u16,
    /// Normalized input; also receives gathered projections.
    pub y: u16,
    /// Queries, then attention output, then FFN temporaries.
    pub q: u16,
    /// Keys and values, then attention scores and staged input chunks.
    pub work: u16,
    pub k: u16,
    pub v: u16,
    /// 64 slots of a replicated scalar.
    pub rep: u16,
    /// 64 slots for reduction trees.
    pub red: u16,
    pub sum: u16,
    pub tmp: u16,
    pub tmp2: u16,
    /// Rotary scratch: packed pair (2 head widths), then two products.
    pub rope: u16,
    pub d_slots: u16,
    pub kv_slots: u16,
    pub head_slots: u16,
    pub work_slots: u16,
    pub total: u32,
}

impl SbLayout {
    /// Regions for `model` with attention scores of up to `context` tokens.
    pub fn new(model: &ModelSpec, cfg: &ArchConfig, context: usize) -> Result<Self, CompileError> {
        let d = slots(model.d_model);
        let kv = slots(model.kv_dim());
        let hs = slots(model.d_head);
        let work = slots(context).max(2 * kv).max(GB_CHUNK_SLOTS);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = at;
            at += n;
            s as u16
        };
        let zero = take(1);
        let x = take(d);
        let y = take(d);
        let q = take(d);
        let work_base = take(work);
        let rep = take(GB_CHUNK_SLOTS);
        let red = take(GB_CHUNK_SLOTS);
        let sum = take(1);
        let tmp = take(1);
        let tmp2 = take(1);
        let rope = take(4 * hs);
        let total = at as u32;
        if total as usize > cfg.sb_slots() {
            return Err(CompileError::Capacity(format!(
                "Shared Buffer needs {total} slots, has {}",
                cfg.sb_slots()
            )));
        }
        Ok(SbLayout {
            zero,
            x,
            y,
            q,
            work: work_base,
            k: work_base,
            v: work_base + kv as u16,
            rep,
            red,
            sum,
            tmp,
            tmp2,
            rope,
            d_slots: d as u16,
            kv_slots: kv as u16,
            head_slots: hs as u16,
            work_slots: work as u16,
            total,
        })
    }
}

/// Slot range `[start, start + len)` of a row-partitioned projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSlice {
    pub start: usize,
    pub len: usize,
}

/// Everything one device holds for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub block: u32,
    pub device: u32,
    pub master: u32,
    /// Devices of the tensor-parallel group, master first.
    pub group: Vec<u32>,
    pub channels: ChannelRange,
    pub q_slice: SlotSlice,
    pub kv_slice: SlotSlice,
    pub o_slice: SlotSlice,
    pub ffn_slice: SlotSlice,
    pub wq: TensorPlacement,
    pub wk: TensorPlacement,
    pub wv: TensorPlacement,
    pub wo: TensorPlacement,
    pub w_gate: TensorPlacement,
    pub w_up: TensorPlacement,
    pub w_down: TensorPlacement,
    pub h_scratch: TensorPlacement,
    pub attn: Option<AttentionLayout>,
    /// Prompts whose KV caches are reserved.
    pub kv_prompts: u32,
}

impl BlockLayout {
    pub fn is_master(&self) -> bool {
        self.device == self.master
    }
}

/// Master-only state: norms, caches, rotary tables and scratch rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayout {
    pub attn_norm: TensorPlacement,
    pub ffn_norm: TensorPlacement,
    pub pair_scratch: TensorPlacement,
    pub ew_scratch: TensorPlacement,
    pub rope: TensorPlacement,
    /// Key cache per KV head for prompt 0; prompt `p` adds `p * k_stride_rows`.
    pub k_cache: Vec<TensorPlacement>,
    pub k_stride_rows: u32,
    /// Values stored transposed: `kv_dim` rows by `context` token columns.
    pub v_cache: TensorPlacement,
    pub v_stride_rows: u32,
    pub context: usize,
}

/// Neighbor pairs used by the RMSNorm dot product for a vector of `n` slots.
pub fn norm_pairs(n: usize) -> usize {
    (1..=8).rev().find(|p| n % p == 0).unwrap_or(1)
}

fn gemv_placement(
    alloc: &mut RowAllocator,
    name: &str,
    rows: usize,
    cols: usize,
    channels: ChannelRange,
    prompts: u32,
) -> Result<TensorPlacement, CompileError> {
    let tiles = slots(rows).div_ceil(channels.count as usize);
    let chunks = cols.div_ceil(GB_CHUNK_ELEMS).max(1);
    let row_count = (tiles * chunks) as u32;
    let base_row = alloc.alloc(name, channels, row_count * prompts)?;
    Ok(TensorPlacement {
        name: name.to_string(),
        kind: LayoutKind::RowPerBankGemv,
        rows,
        cols,
        channels,
        base_row,
        row_count,
        chunks: chunks as u32,
    })
}

fn single(channels: ChannelRange) -> ChannelRange {
    ChannelRange { start: channels.start, count: 1 }
}

fn simple(
    alloc: &mut RowAllocator,
    name: &str,
    kind: LayoutKind,
    rows: usize,
    cols: usize,
    channels: ChannelRange,
    row_count: u32,
) -> Result<TensorPlacement, CompileError> {
    let base_row = alloc.alloc(name, channels, row_count)?;
    Ok(TensorPlacement { name: name.into(), kind, rows, cols, channels, base_row, row_count, chunks: 1 })
}

/// Inputs describing one device's share of one block.
pub struct BlockShape<'a> {
    pub model: &'a ModelSpec,
    pub block: u32,
    pub device: u32,
    pub group: &'a [u32],
    pub channels: ChannelRange,
    pub context: usize,
    pub kv_prompts: u32,
}

/// Partition `n` slots over `parts` devices, remainder on the last.
pub fn slot_partition(n: usize, parts: usize, index: usize) -> SlotSlice {
    let base = n / parts;
    let len = if index + 1 == parts { n - base * (parts - 1) } else { base };
    SlotSlice { start: index * base, len }
}

/// Allocate one device's share of one block. Structures spanning every
/// channel of the block come first so that their rows line up.
pub fn layout_block(
    shape: &BlockShape,
    alloc: &mut RowAllocator,
) -> Result<BlockLayout, CompileError> {
    let m = shape.model;
    let ch = shape.channels;
    let tp = shape.group.len();
    let idx = shape.group.iter().position(|&d| d == shape.device).expect("device in group");
    let master = shape.group[0];
    let is_master = shape.device == master;
    let dsl = slots(m.d_model);
    let q_slice = slot_partition(dsl, tp, idx);
    let kv_slice = slot_partition(slots(m.kv_dim()), tp, idx);
    let o_slice = q_slice;
    let ffn_slice = slot_partition(slots(m.d_ff), tp, idx);
    if q_slice.len == 0 || kv_slice.len == 0 || ffn_slice.len == 0 {
        return Err(CompileError::Shape(format!("{tp}-way split leaves a device without rows")));
    }
    let b = shape.block;
    let wq = gemv_placement(alloc, &format!("b{b}.wq"), 16 * q_slice.len, m.d_model, ch, 1)?;
    let wk = gemv_placement(alloc, &format!("b{b}.wk"), 16 * kv_slice.len, m.d_model, ch, 1)?;
    let wv = gemv_placement(alloc, &format!("b{b}.wv"), 16 * kv_slice.len, m.d_model, ch, 1)?;
    let wo = gemv_placement(alloc, &format!("b{b}.wo"), 16 * o_slice.len, m.d_model, ch, 1)?;
    let w_gate = gemv_placement(alloc, &format!("b{b}.w_gate"), 16 * ffn_slice.len, m.d_model, ch, 1)?;
    let w_up = gemv_placement(alloc, &format!("b{b}.w_up"), 16 * ffn_slice.len, m.d_model, ch, 1)?;
    let w_down = gemv_placement(alloc, &format!("b{b}.w_down"), m.d_model, 16 * ffn_slice.len, ch, 1)?;

    let attn = if is_master {
        let c = ch.count as usize;
        let ctx = shape.context;
        let prompts = shape.kv_prompts;
        let mut v_cache = gemv_placement(alloc, &format!("b{b}.v_cache"), m.kv_dim(), ctx, ch, prompts)?;
        v_cache.kind = LayoutKind::KvCacheAppend;
        let v_stride_rows = v_cache.row_count;
        let hs = slots(m.d_head);
        let per_row = (COLS / hs).max(1);
        let j_groups = ctx.div_ceil(16 * c);
        let k_rows = j_groups.div_ceil(per_row) as u32;
        let k_stride_rows = k_rows * m.n_kv_heads as u32;
        let k_base = alloc.alloc(&format!("b{b}.k_cache"), ch, k_stride_rows * prompts)?;
        let k_cache = (0..m.n_kv_heads)
            .map(|g| TensorPlacement {
                name: format!("b{b}.k_cache.{g}"),
                kind: LayoutKind::KvCacheAppend,
                rows: ctx,
                cols: m.d_head,
                channels: ch,
                base_row: k_base + g as u32 * k_rows,
                row_count: k_rows,
                chunks: 1,
            })
            .collect();
        let rope_rows = ctx.div_ceil(c).div_ceil(per_row) as u32;
        let rope = simple(alloc, &format!("b{b}.rope"), LayoutKind::RopeTable, ctx, m.d_head, ch, rope_rows)?;
        let one = single(ch);
        let ew_rows = (dsl.div_ceil(256)) as u32;
        let ew_scratch =
            simple(alloc, &format!("b{b}.ew_scratch"), LayoutKind::BankgroupTripleEwmul, dsl * 16, 1, one, ew_rows)?;
        let pairs = norm_pairs(dsl);
        let pair_rows = (dsl / pairs).div_ceil(COLS) as u32;
        let pair_scratch =
            simple(alloc, &format!("b{b}.pair_scratch"), LayoutKind::NeighborPairDot, m.d_model, 1, one, pair_rows)?;
        let attn_norm =
            simple(alloc, &format!("b{b}.attn_norm"), LayoutKind::BankgroupTripleEwmul, m.d_model, 1, one, ew_rows)?;
        let ffn_norm =
            simple(alloc, &format!("b{b}.ffn_norm"), LayoutKind::BankgroupTripleEwmul, m.d_model, 1, one, ew_rows)?;
        Some(AttentionLayout {
            attn_norm,
            ffn_norm,
            pair_scratch,
            ew_scratch,
            rope,
            k_cache,
            k_stride_rows,
            v_cache,
            v_stride_rows,
            context: ctx,
        })
    } else {
        None
    };
    let h_rows = ffn_slice.len.div_ceil(256) as u32;
    let h_scratch = simple(
        alloc,
        &format!("b{b}.h_scratch"),
        LayoutKind::BankgroupTripleEwmul,
        16 * ffn_slice.len,
        1,
        single(ch),
        h_rows,
    )?;
    Ok(BlockLayout {
        block: b,
        device: shape.device,
        master,
        group: shape.group.to_vec(),
        channels: ch,
        q_slice,
        kv_slice,
        o_slice,
        ffn_slice,
        wq,
        wk,
        wv,
        wo,
        w_gate,
        w_up,
        w_down,
        h_scratch,
        attn,
        kv_prompts: shape.kv_prompts,
    })
}
