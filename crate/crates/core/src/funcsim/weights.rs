//! Model weights and their placement into a memory image.

use super::MemoryImage;
use crate::bf16::{self, Lanes, ZERO_LANES};
use crate::compiler::layout::{slots, BlockLayout, LayoutKind, TensorPlacement};
use crate::compiler::ProgramLayout;
use crate::config::ModelSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Weights of one block. Matrices are row-major `out x in`; every value is
/// exactly representable in BF16.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
    pub attn_norm: Vec<f32>,
    pub ffn_norm: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f32> {
    let a = (3.0 / cols as f64).sqrt();
    (0..rows * cols).map(|_| bf16::round(rng.gen_range(-a..a) as f32)).collect()
}

/// Deterministic random weights with unit-variance-preserving scales.
pub fn synthetic_weights(model: &ModelSpec, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.d_model;
    let kv = model.kv_dim();
    let f = model.d_ff;
    let blocks = (0..model.n_layers)
        .map(|_| {
            let norm = |rng: &mut ChaCha8Rng| (0..d).map(|_| bf16::round(rng.gen_range(0.8..1.2))).collect();
            BlockWeights {
                wq: matrix(&mut rng, d, d),
                wk: matrix(&mut rng, kv, d),
                wv: matrix(&mut rng, kv, d),
                wo: matrix(&mut rng, d, d),
                w_gate: matrix(&mut rng, f, d),
                w_up: matrix(&mut rng, f, d),
                w_down: matrix(&mut rng, d, f),
                attn_norm: norm(&mut rng),
                ffn_norm: norm(&mut rng),
            }
        })
        .collect();
    ModelWeights { blocks }
}

/// Deterministic random vector of `n` BF16 values in `[-1, 1)`.
pub fn synthetic_vector(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| bf16::round(rng.gen_range(-1.0..1.0))).collect()
}

fn zero_placement(img: &mut MemoryImage, dev: u32, p: &TensorPlacement, rows: u32) {
    let cols = img.columns;
    let st = img.device_mut(dev);
    for ch in p.channels.start..p.channels.start + p.channels.count {
        st.zero_rows(ch as u8, 0..16, p.base_row..p.base_row + rows, cols);
    }
}

fn put(img: &mut MemoryImage, dev: u32, ch: u32, bank: u32, row: u32, col: u32, v: Lanes) {
    let cols = img.columns;
    let row = img
        .device_mut(dev)
        .banks
        .entry((ch as u8, bank as u8, row))
        .or_insert_with(|| vec![ZERO_LANES; cols].into_boxed_slice());
    row[col as usize] = v;
}

/// Store rows `row0..` of the `rows x cols` matrix `w` into `p`. Placement
/// rows beyond the matrix stay zero. `col0` selects a column window.
#[allow(clippy::too_many_arguments)]
fn load_gemv(
    img: &mut MemoryImage,
    dev: u32,
    p: &TensorPlacement,
    w: &[f32],
    cols: usize,
    row0: usize,
    col0: usize,
    scale: f32,
) {
    zero_placement(img, dev, p, p.row_count);
    let total_rows = w.len() / cols;
    for r in 0..p.rows {
        let gr = row0 + r;
        if gr >= total_rows {
            break;
        }
        for c in (0..p.cols).step_by(16) {
            let mut lanes = ZERO_LANES;
            for (l, lane) in lanes.iter_mut().enumerate() {
                let gc = col0 + c + l;
                if c + l < p.cols && gc < cols {
                    *lane = bf16::from_f32(w[gr * cols + gc] * scale);
                }
            }
            let loc = p.gemv_location(r, c);
            put(img, dev, loc.channel, loc.bank, loc.row, loc.col, lanes);
        }
    }
}

/// Store a vector into bank `4g + role` of a bank-group placement.
fn load_ew(img: &mut MemoryImage, dev: u32, p: &TensorPlacement, v: &[f32], role: u32) {
    for s in 0..slots(v.len()) {
        let lanes = bf16::lanes_from_f32(&v[16 * s..(16 * s + 16).min(v.len())]);
        let (row, bank, col) = p.ew_location(s, role);
        put(img, dev, p.channels.start, bank, row, col, lanes);
    }
}

/// Per-position rotary tables: `[cos | cos]` in bank 1, `[-sin | sin]` in bank 5.
fn load_rope(img: &mut MemoryImage, dev: u32, p: &TensorPlacement, d_head: usize, theta: f64) {
    zero_placement(img, dev, p, p.row_count);
    let half = d_head / 2;
    for pos in 0..p.rows {
        let mut cos = vec![0.0f32; d_head];
        let mut sin = vec![0.0f32; d_head];
        for i in 0..half {
            let ang = pos as f64 * theta.powf(-2.0 * i as f64 / d_head as f64);
            let (s, c) = ang.sin_cos();
            cos[i] = bf16::to_f32(bf16::from_f64(c));
            cos[half + i] = cos[i];
            sin[i] = bf16::to_f32(bf16::from_f64(-s));
            sin[half + i] = bf16::to_f32(bf16::from_f64(s));
        }
        let (ch, row, col) = p.rope_location(pos);
        for s in 0..slots(d_head) {
            let hi = (16 * s + 16).min(d_head);
            put(img, dev, ch, 1, row, col + s as u32, bf16::lanes_from_f32(&cos[16 * s..hi]));
            put(img, dev, ch, 5, row, col + s as u32, bf16::lanes_from_f32(&sin[16 * s..hi]));
        }
    }
}

fn load_block(img: &mut MemoryImage, model: &ModelSpec, bl: &BlockLayout, w: &BlockWeights) {
    let d = model.d_model;
    let dev = bl.device;
    // The attention score scale is folded into the query projection.
    let q_scale = 1.0 / (model.d_head as f32).sqrt();
    load_gemv(img, dev, &bl.wq, &w.wq, d, 16 * bl.q_slice.start, 0, q_scale);
    load_gemv(img, dev, &bl.wk, &w.wk, d, 16 * bl.kv_slice.start, 0, 1.0);
    load_gemv(img, dev, &bl.wv, &w.wv, d, 16 * bl.kv_slice.start, 0, 1.0);
    load_gemv(img, dev, &bl.wo, &w.wo, d, 16 * bl.o_slice.start, 0, 1.0);
    load_gemv(img, dev, &bl.w_gate, &w.w_gate, d, 16 * bl.ffn_slice.start, 0, 1.0);
    load_gemv(img, dev, &bl.w_up, &w.w_up, d, 16 * bl.ffn_slice.start, 0, 1.0);
    load_gemv(img, dev, &bl.w_down, &w.w_down, model.d_ff, 0, 16 * bl.ffn_slice.start, 1.0);
    zero_placement(img, dev, &bl.h_scratch, bl.h_scratch.row_count);
    if let Some(at) = &bl.attn {
        for p in [&at.pair_scratch, &at.ew_scratch, &at.attn_norm, &at.ffn_norm] {
            zero_placement(img, dev, p, p.row_count);
        }
        load_ew(img, dev, &at.attn_norm, &w.attn_norm, 1);
        load_ew(img, dev, &at.ffn_norm, &w.ffn_norm, 1);
        load_rope(img, dev, &at.rope, model.d_head, model.rope_theta);
        let prompts = bl.kv_prompts;
        zero_placement(img, dev, &at.v_cache, at.v_stride_rows * prompts);
        zero_placement(img, dev, &at.k_cache[0], at.k_stride_rows * prompts);
    }
}

/// Write weights, rotary tables and zeroed caches and scratch rows for every
/// block in `layout`, and the zero slot of every device.
pub fn load_weights(img: &mut MemoryImage, model: &ModelSpec, layout: &ProgramLayout, weights: &ModelWeights) {
    for (&dev, blocks) in &layout.devices {
        for bl in blocks {
            debug_assert_eq!(bl.wq.kind, LayoutKind::RowPerBankGemv);
            load_block(img, model, bl, &weights.blocks[bl.block as usize]);
        }
        img.device_mut(dev).write_slots(layout.sb.zero, &[ZERO_LANES]);
    }
}

/// Store the row-major `rows x cols` matrix `w` into the GEMV placement `p`
/// of device `dev`, zero-filling the rest of the placement.
pub fn store_matrix(img: &mut MemoryImage, dev: u32, p: &TensorPlacement, w: &[f32], cols: usize) {
    load_gemv(img, dev, p, w, cols, 0, 0, 1.0);
}

/// Store `v` into bank `4g + role` of the bank-group placement `p`.
pub fn store_bankgroup_vector(img: &mut MemoryImage, dev: u32, p: &TensorPlacement, v: &[f32], role: u32) {
    load_ew(img, dev, p, v, role);
}
