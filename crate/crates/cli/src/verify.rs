//! Functional check of a mapping: compiled programs executed under BF16
//! semantics against the float references.

use anyhow::{Context, Result};
use pimsim_core::compiler::layout::slots;
use pimsim_core::compiler::lower::build_layout;
use pimsim_core::compiler::{lower_gemv, CompileOptions, DeviceTrace, LayoutKind, TensorPlacement};
use pimsim_core::config::{ArchConfig, ModelSpec};
use pimsim_core::funcsim::weights::{store_matrix, synthetic_vector};
use pimsim_core::funcsim::{
    compare, load_weights, reference_block, reference_gemv_ordered, run_token, run_trace, synthetic_weights,
    FuncOptions, KvCache, MemoryImage, ReferenceMode,
};
use pimsim_core::mapper::{ChannelRange, MappingPlan};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Tolerance of the end-to-end comparison against the order-matched reference.
pub const ORDERED_TOLERANCE: f64 = 0.02;
/// Tolerance against plain `f64` arithmetic, which BF16 storage alone exceeds.
pub const EXACT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GemvCheck {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub channels: u32,
    pub mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCheck {
    pub pos: usize,
    pub max_rel_ordered: f64,
    pub max_rel_exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub model: String,
    pub strategy: String,
    pub seed: u64,
    pub gemv: Vec<GemvCheck>,
    pub tokens: Vec<TokenCheck>,
    pub max_rel_ordered: f64,
    pub max_rel_exact: f64,
    pub pass: bool,
}

fn gemv_placement(rows: usize, cols: usize, channels: u32) -> TensorPlacement {
    let chunks = cols.div_ceil(1024) as u32;
    let tiles = slots(rows).div_ceil(channels as usize) as u32;
    TensorPlacement {
        name: "w".into(),
        kind: LayoutKind::RowPerBankGemv,
        rows,
        cols,
        channels: ChannelRange { start: 0, count: channels },
        base_row: 0,
        row_count: tiles * chunks,
        chunks,
    }
}

/// Run one `rows x cols` GEMV on `channels` channels of a single device and
/// count output elements that differ from the order-matched reference.
pub fn check_gemv(rows: usize, cols: usize, channels: u32, seed: u64) -> Result<usize> {
    let cfg = ArchConfig { n_devices: 1, ..ArchConfig::default() };
    let p = gemv_placement(rows, cols, channels);
    let w = synthetic_vector(rows * cols, seed);
    let x = synthetic_vector(cols, seed + 1);
    let mut img = MemoryImage::new(&cfg);
    store_matrix(&mut img, 0, &p, &w, cols);
    img.set_vector(0, 0, &[0.0; 16]);
    let mut padded = x.clone();
    padded.resize(16 * slots(cols), 0.0);
    img.set_vector(0, 1, &padded);
    let out = 1 + slots(cols) as u16;
    let instructions = lower_gemv(rows, cols, &p, 1, out, 0)?;
    let trace = DeviceTrace { device: 0, instructions, annotations: vec![], programs: BTreeMap::new() };
    run_trace(&[trace], &mut img, &FuncOptions { strict: true, ..Default::default() })?;
    let got = img.get_vector(0, out, rows);
    let want = reference_gemv_ordered(&w, &x, rows, cols);
    Ok(got.iter().zip(&want).filter(|(a, b)| a.to_bits() != b.to_bits()).count())
}

/// Every weight-matrix shape of `model`, on the channel count a block gets
/// under `plan`.
pub fn check_model_gemvs(model: &ModelSpec, plan: &MappingPlan, seed: u64) -> Result<Vec<GemvCheck>> {
    let channels = plan.block_assignments.first().map(|a| a.channels.count).unwrap_or(32);
    let (d, kv, f) = (model.d_model, model.kv_dim(), model.d_ff);
    let shapes = [("wq", d, d), ("wk", kv, d), ("wv", kv, d), ("wo", d, d), ("w_gate", f, d), ("w_up", f, d), ("w_down", d, f)];
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(name, rows, cols))| {
            let mismatches = check_gemv(rows, cols, channels, seed + 1000 * i as u64)
                .with_context(|| format!("GEMV {name} {rows}x{cols}"))?;
            Ok(GemvCheck { name: name.into(), rows, cols, channels, mismatches })
        })
        .collect()
}

/// Decode `tokens` positions of `model` through the compiled programs and
/// compare each output with the order-matched and the exact references.
pub fn verify(model: &ModelSpec, arch: &ArchConfig, plan: &MappingPlan, tokens: usize, seed: u64) -> Result<VerifyReport> {
    let gemv = check_model_gemvs(model, plan, seed)?;
    let layout = build_layout(model, arch, plan)?;
    let weights = synthetic_weights(model, seed);
    let mut img = MemoryImage::new(arch);
    load_weights(&mut img, model, &layout, &weights);
    let mut ordered_kv = vec![KvCache::default(); model.n_layers];
    let mut exact_kv = vec![KvCache::default(); model.n_layers];
    let fopts = FuncOptions { strict: true, ..Default::default() };
    let mode = ReferenceMode::HardwareOrder { ffn_parts: plan.tp_degree as usize };
    let mut checks = Vec::with_capacity(tokens);
    for pos in 0..tokens {
        let x = synthetic_vector(model.d_model, seed + 100 + pos as u64);
        let got = run_token(model, plan, &layout, &mut img, pos, &x, &CompileOptions::default(), &fopts)
            .with_context(|| format!("functional run of position {pos}"))?;
        let got: Vec<f64> = got.iter().map(|&v| v as f64).collect();
        let mut ho: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut he = ho.clone();
        for (b, w) in weights.blocks.iter().enumerate() {
            ho = reference_block(model, w, &ho, &mut ordered_kv[b], pos, mode)?;
            he = reference_block(model, w, &he, &mut exact_kv[b], pos, ReferenceMode::Exact)?;
        }
        checks.push(TokenCheck {
            pos,
            max_rel_ordered: compare(&got, &ho, ORDERED_TOLERANCE)?.max_rel,
            max_rel_exact: compare(&got, &he, EXACT_TOLERANCE)?.max_rel,
        });
    }
    let max_rel_ordered = checks.iter().map(|c| c.max_rel_ordered).fold(0.0, f64::max);
    let max_rel_exact = checks.iter().map(|c| c.max_rel_exact).fold(0.0, f64::max);
    let pass = gemv.iter().all(|g| g.mismatches == 0) && max_rel_ordered <= ORDERED_TOLERANCE;
    Ok(VerifyReport {
        model: model.name.clone(),
        strategy: plan.strategy.name().to_string(),
        seed,
        gemv,
        tokens: checks,
        max_rel_ordered,
        max_rel_exact,
        pass,
    })
}
