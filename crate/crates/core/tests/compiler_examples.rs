//! Worked examples for the operator lowerings, executed under funcsim where
//! the result is numeric.

use pimsim_core::bf16;
use pimsim_core::compiler::layout::{slots, AttentionLayout, SbLayout};
use pimsim_core::compiler::lower::NormScratch;
use pimsim_core::compiler::lower::{build_layout, compile_token_with};
use pimsim_core::compiler::{
    cxl_bytes, cxl_payload_bytes, lower_attention, lower_gemv, lower_rmsnorm, lower_rope, lower_softmax, mac_share,
    validate_device_traces, CompileOptions, DeviceTrace, LayoutKind, Operator, Phase, ProgramLayout, Routine,
    TensorPlacement,
};
use pimsim_core::config::{load_model, ArchConfig, ModelSpec};
use pimsim_core::funcsim::weights::{store_bankgroup_vector, store_matrix, synthetic_vector};
use pimsim_core::funcsim::{load_weights, run_trace, synthetic_weights, FuncOptions, MemoryImage};
use pimsim_core::isa::{Instruction, Opcode};
use pimsim_core::mapper::{comm_volume, plan_pipeline, plan_tensor, ChannelRange, MappingPlan};
use std::collections::BTreeMap;
use std::path::PathBuf;

fn model(name: &str) -> ModelSpec {
    load_model(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../params/models/{name}.json"))).unwrap()
}

fn arch(n: usize) -> ArchConfig {
    ArchConfig { n_devices: n, ..ArchConfig::default() }
}

fn placement(kind: LayoutKind, rows: usize, cols: usize, base_row: u32) -> TensorPlacement {
    let chunks = cols.div_ceil(1024).max(1) as u32;
    TensorPlacement {
        name: "t".into(),
        kind,
        rows,
        cols,
        channels: ChannelRange { start: 0, count: 1 },
        base_row,
        row_count: slots(rows).max(1) as u32 * chunks,
        chunks,
    }
}

fn trace(instructions: Vec<Instruction>) -> DeviceTrace {
    DeviceTrace { device: 0, instructions, annotations: vec![], programs: BTreeMap::new() }
}

fn count(t: &[Instruction], op: Opcode) -> usize {
    t.iter().filter(|i| i.opcode() == op).count()
}

fn strict() -> FuncOptions {
    FuncOptions { strict: true, ..Default::default() }
}

fn toy_program() -> (ModelSpec, ArchConfig, MappingPlan, ProgramLayout) {
    let m = model("toy");
    let a = arch(1);
    let plan = plan_pipeline(&m, &a, m.max_context).unwrap();
    let layout = build_layout(&m, &a, &plan).unwrap();
    (m, a, plan, layout)
}

#[test]
fn gemv_full_row_is_one_tile() {
    let p = placement(LayoutKind::RowPerBankGemv, 16, 1024, 0);
    let t = lower_gemv(16, 1024, &p, 1, 100, 0).unwrap();
    assert_eq!(t.len(), 4);
    assert!(matches!(t[0], Instruction::WrGb { op_size: 64, .. }));
    assert!(matches!(t[1], Instruction::WrBias { .. }));
    assert!(matches!(t[2], Instruction::MacAbk { op_size: 64, .. }));
    assert!(matches!(t[3], Instruction::RdMac { rd: 100, .. }));
}

#[test]
fn gemv_minimal_tile() {
    let p = placement(LayoutKind::RowPerBankGemv, 16, 16, 0);
    let t = lower_gemv(16, 16, &p, 1, 100, 0).unwrap();
    let macs: Vec<_> = t.iter().filter(|i| i.opcode() == Opcode::MacAbk).collect();
    assert_eq!(macs.len(), 1);
    assert_eq!(macs[0].op_size(), 1);
}

#[test]
fn gemv_two_row_tiles_use_distinct_registers() {
    let p = placement(LayoutKind::RowPerBankGemv, 32, 1024, 0);
    let t = lower_gemv(32, 1024, &p, 1, 100, 0).unwrap();
    assert_eq!((count(&t, Opcode::WrBias), count(&t, Opcode::MacAbk), count(&t, Opcode::RdMac)), (2, 2, 2));
    let regs: Vec<u8> = t
        .iter()
        .filter_map(|i| match i {
            Instruction::MacAbk { reg, .. } => Some(*reg),
            _ => None,
        })
        .collect();
    assert_ne!(regs[0], regs[1]);
}

#[test]
fn gemv_rejects_wrong_layout() {
    let p = placement(LayoutKind::NeighborPairDot, 16, 16, 0);
    assert!(lower_gemv(16, 16, &p, 1, 100, 0).is_err());
    let g = placement(LayoutKind::RowPerBankGemv, 16, 16, 0);
    assert!(lower_gemv(32, 16, &g, 1, 100, 0).is_err());
}

#[test]
fn identity_gemv_returns_input() {
    let a = arch(1);
    let p = placement(LayoutKind::RowPerBankGemv, 16, 16, 0);
    let mut w = vec![0.0f32; 256];
    for i in 0..16 {
        w[i * 16 + i] = 1.0;
    }
    let v: Vec<f32> = (0..16).map(|i| bf16::round(i as f32 * 0.37 - 2.0)).collect();
    let mut img = MemoryImage::new(&a);
    store_matrix(&mut img, 0, &p, &w, 16);
    img.set_vector(0, 0, &[0.0; 16]);
    img.set_vector(0, 1, &v);
    run_trace(&[trace(lower_gemv(16, 16, &p, 1, 2, 0).unwrap())], &mut img, &strict()).unwrap();
    assert_eq!(img.get_vector(0, 2, 16), v);
}

struct NormRig {
    pair: TensorPlacement,
    ew: TensorPlacement,
    weight: TensorPlacement,
}

fn norm_rig(d: usize) -> NormRig {
    let rows = slots(d).div_ceil(256) as u32;
    let mut pair = placement(LayoutKind::NeighborPairDot, d, 1, 0);
    pair.row_count = rows.max(1) * 4;
    let mut ew = placement(LayoutKind::BankgroupTripleEwmul, d, 1, 8);
    ew.row_count = rows.max(1);
    let mut weight = placement(LayoutKind::BankgroupTripleEwmul, d, 1, 16);
    weight.row_count = rows.max(1);
    NormRig { pair, ew, weight }
}

fn run_rmsnorm(d: usize, x: &[f32], g: &[f32]) -> (DeviceTrace, Vec<f32>) {
    let (m, a, _, layout) = toy_program();
    let sb = &layout.sb;
    let rig = norm_rig(d);
    let t = lower_rmsnorm(d, &NormScratch { pair: &rig.pair, ew: &rig.ew, weight: &rig.weight }, sb, m.rms_eps).unwrap();
    let mut img = MemoryImage::new(&a);
    img.device_mut(0).zero_rows(0, 0..16, 0..24, a.columns_per_row());
    store_bankgroup_vector(&mut img, 0, &rig.weight, g, 1);
    img.set_vector(0, sb.zero, &[0.0; 16]);
    img.set_vector(0, sb.x, x);
    run_trace(std::slice::from_ref(&t), &mut img, &strict()).unwrap();
    let y = img.get_vector(0, sb.y, d);
    (t, y)
}

#[test]
fn rmsnorm_of_ones_is_ones() {
    let (_, y) = run_rmsnorm(256, &[1.0; 256], &[1.0; 256]);
    assert!(y.iter().all(|&v| v == 1.0), "{y:?}");
}

#[test]
fn rmsnorm_minimal_width() {
    let (t, _) = run_rmsnorm(16, &[0.5; 16], &[1.0; 16]);
    assert_eq!(t.micro_ops(Opcode::MacAbk), 1);
    assert_eq!(count(&t.instructions, Opcode::Red), 1);
}

#[test]
fn rmsnorm_matches_scalar_formula() {
    let x: Vec<f32> = synthetic_vector(256, 3);
    let g: Vec<f32> = synthetic_vector(256, 4).iter().map(|v| bf16::round(1.0 + 0.2 * v)).collect();
    let (_, y) = run_rmsnorm(256, &x, &g);
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / 256.0;
    let r = 1.0 / (ms + 1e-5).sqrt();
    for i in 0..256 {
        let want = x[i] as f64 * r * g[i] as f64;
        assert!((y[i] as f64 - want).abs() <= 0.01 * want.abs().max(0.1), "{i}: {} vs {want}", y[i]);
    }
}

#[test]
fn rmsnorm_wide_vector_uses_eight_pairs() {
    let m = model("llama2-70b");
    let sb = SbLayout::new(&m, &arch(1), 64).unwrap();
    let rig = norm_rig(8192);
    let t = lower_rmsnorm(8192, &NormScratch { pair: &rig.pair, ew: &rig.ew, weight: &rig.weight }, &sb, 1e-5).unwrap();
    // Eight neighbour pairs, each taking a 1024-element run of the vector:
    // 64 columns of 16 lanes, written to both banks of the pair.
    let writes: Vec<(u8, u32)> = t
        .instructions
        .iter()
        .filter_map(|i| match *i {
            Instruction::WrSbk { bank, op_size, row, .. } if row < rig.ew.base_row => Some((bank, op_size)),
            _ => None,
        })
        .collect();
    assert_eq!(writes.len(), 16);
    assert!(writes.iter().all(|&(_, n)| n == 64));
    let macs: Vec<&Instruction> = t.instructions.iter().filter(|i| i.opcode() == Opcode::MacAbk).collect();
    assert_eq!(macs.len(), 1);
    assert_eq!(macs[0].op_size() as usize * 16, 1024);
    assert!(lower_rmsnorm(24, &NormScratch { pair: &rig.pair, ew: &rig.ew, weight: &rig.weight }, &sb, 1e-5).is_err());
}

fn run_softmax(scores: &[f32], context: usize) -> (DeviceTrace, Vec<f32>) {
    let m = model("toy");
    let a = arch(1);
    let sb = SbLayout::new(&m, &a, context).unwrap();
    let mut ew = placement(LayoutKind::BankgroupTripleEwmul, 16 * slots(scores.len()), 1, 0);
    ew.row_count = slots(scores.len()).div_ceil(256) as u32;
    let t = lower_softmax(scores.len(), &ew, &sb, sb.work, &CompileOptions::default()).unwrap();
    let mut img = MemoryImage::new(&a);
    img.device_mut(0).zero_rows(0, 0..16, 0..ew.row_count, a.columns_per_row());
    img.set_vector(0, sb.zero, &[0.0; 16]);
    let mut padded = scores.to_vec();
    padded.resize(16 * slots(scores.len()), -1.0e4);
    img.set_vector(0, sb.work, &padded);
    run_trace(std::slice::from_ref(&t), &mut img, &strict()).unwrap();
    (t, img.get_vector(0, sb.work, scores.len()))
}

#[test]
fn softmax_uniform_is_one_sixteenth() {
    let (_, p) = run_softmax(&[0.75; 16], 64);
    assert!(p.iter().all(|&v| v == 1.0 / 16.0), "{p:?}");
}

#[test]
fn softmax_single_element_is_one() {
    let (_, p) = run_softmax(&[3.5], 64);
    assert_eq!(p, vec![1.0]);
}

#[test]
fn softmax_matches_float_softmax() {
    let s: Vec<f32> = synthetic_vector(100, 9).iter().map(|v| bf16::round(4.0 * v)).collect();
    let (_, p) = run_softmax(&s, 128);
    let m = s.iter().copied().fold(f32::MIN, f32::max) as f64;
    let z: f64 = s.iter().map(|&v| (v as f64 - m).exp()).sum();
    for (i, &v) in s.iter().enumerate() {
        let want = (v as f64 - m).exp() / z;
        assert!((p[i] as f64 - want).abs() <= 0.02 * want + 1e-6, "{i}: {} vs {want}", p[i]);
    }
}

#[test]
fn softmax_over_full_context_schedule() {
    let m = model("toy");
    let a = arch(1);
    let sb = SbLayout::new(&m, &a, 4096).unwrap();
    let mut ew = placement(LayoutKind::BankgroupTripleEwmul, 4096, 1, 0);
    ew.row_count = 1;
    let t = lower_softmax(4096, &ew, &sb, sb.work, &CompileOptions::default()).unwrap();
    assert_eq!(t.micro_ops(Opcode::Exp), 256);
    // Per-slot reductions over the 256 score slots, plus one clearing the sum.
    let reds: u64 = t
        .instructions
        .iter()
        .filter(|i| matches!(i, Instruction::Red { rs, .. } if *rs != sb.zero))
        .map(|i| i.micro_op_count())
        .sum();
    assert_eq!(reds, 256);
    // Each 64-slot chunk folds in 63 pairwise additions, then joins the sum.
    let adds: u64 = t
        .instructions
        .iter()
        .filter(|i| matches!(i, Instruction::Acc { rd, .. } if *rd == sb.red || *rd == sb.sum))
        .map(|i| i.micro_op_count())
        .sum();
    assert_eq!(adds, 4 * 63 + 4);
    assert!(lower_softmax(0, &ew, &sb, sb.work, &CompileOptions::default()).is_err());
}

/// Rotary table of `d_head` for positions `0..n`, written the way the loader
/// lays it out: `[cos | cos]` in bank 1 and `[-sin | sin]` in bank 5.
fn rope_rig(img: &mut MemoryImage, d_head: usize, n: usize, theta: f64) -> TensorPlacement {
    let mut p = placement(LayoutKind::RopeTable, n, d_head, 0);
    p.row_count = n as u32;
    img.device_mut(0).zero_rows(0, 0..16, 0..p.row_count, 64);
    let half = d_head / 2;
    for pos in 0..n {
        let mut cos = vec![0.0f32; d_head];
        let mut sin = vec![0.0f32; d_head];
        for i in 0..half {
            let (s, c) = (pos as f64 * theta.powf(-2.0 * i as f64 / d_head as f64)).sin_cos();
            cos[i] = bf16::round(c as f32);
            cos[half + i] = cos[i];
            sin[i] = bf16::round(-s as f32);
            sin[half + i] = bf16::round(s as f32);
        }
        let (_, row, col) = p.rope_location(pos);
        for s in 0..slots(d_head) {
            let hi = (16 * s + 16).min(d_head);
            let dev = img.device_mut(0);
            dev.banks.get_mut(&(0, 1, row)).unwrap()[col as usize + s] = bf16::lanes_from_f32(&cos[16 * s..hi]);
            dev.banks.get_mut(&(0, 5, row)).unwrap()[col as usize + s] = bf16::lanes_from_f32(&sin[16 * s..hi]);
        }
    }
    p
}

fn run_rope(d_head: usize, pos: usize, head: &[f32]) -> (DeviceTrace, Vec<f32>) {
    let m = model("toy");
    let a = arch(1);
    let sb = SbLayout::new(&m, &a, 64).unwrap();
    let mut img = MemoryImage::new(&a);
    let table = rope_rig(&mut img, d_head, pos + 1, 10000.0);
    let t = lower_rope(d_head, pos, &table, &sb, sb.q).unwrap();
    img.set_vector(0, sb.q, head);
    run_trace(std::slice::from_ref(&t), &mut img, &strict()).unwrap();
    (t, img.get_vector(0, sb.q, d_head))
}

#[test]
fn rope_full_head_packs_sixty_four_pairs() {
    let m = model("toy");
    let sb = SbLayout::new(&m, &arch(1), 64).unwrap();
    let table = placement(LayoutKind::RopeTable, 64, 128, 0);
    let t = lower_rope(128, 3, &table, &sb, sb.q).unwrap();
    assert!(t.programs.values().any(|r| *r == Routine::Pack { pairs: 64 }));
    assert!(t.programs.values().any(|r| *r == Routine::Unpack { pairs: 64 }));
    assert_eq!(count(&t.instructions, Opcode::EwMul), 1);
    assert!(lower_rope(127, 3, &table, &sb, sb.q).is_err());
}

#[test]
fn rope_position_zero_is_identity() {
    let h: Vec<f32> = synthetic_vector(64, 11);
    let (_, out) = run_rope(64, 0, &h);
    assert_eq!(out, h);
}

#[test]
fn rope_single_pair_matches_rotation() {
    for pos in [1usize, 5, 17] {
        let (a, b) = (0.8125f32, -0.375f32);
        let (_, out) = run_rope(2, pos, &[a, b]);
        let (s, c) = (pos as f64).sin_cos();
        let want = [a as f64 * c - b as f64 * s, a as f64 * s + b as f64 * c];
        for k in 0..2 {
            assert!((out[k] as f64 - want[k]).abs() < 0.01, "pos {pos}: {out:?} vs {want:?}");
        }
    }
}

fn attention_layout(layout: &ProgramLayout) -> &AttentionLayout {
    layout.block(0, 0).unwrap().attn.as_ref().unwrap()
}

#[test]
fn attention_first_token_returns_value() {
    let (m, a, _, layout) = toy_program();
    let sb = &layout.sb;
    let mut img = MemoryImage::new(&a);
    load_weights(&mut img, &m, &layout, &synthetic_weights(&m, 1));
    let q = synthetic_vector(m.d_model, 2);
    let k = synthetic_vector(m.kv_dim(), 3);
    let v = synthetic_vector(m.kv_dim(), 4);
    img.set_vector(0, sb.q, &q);
    img.set_vector(0, sb.k, &k);
    img.set_vector(0, sb.v, &v);
    let t = lower_attention(&m, 1, attention_layout(&layout), sb, &CompileOptions::default()).unwrap();
    run_trace(std::slice::from_ref(&t), &mut img, &strict()).unwrap();
    let out = img.get_vector(0, sb.q, m.d_model);
    for h in 0..m.n_heads {
        assert_eq!(&out[h * m.d_head..(h + 1) * m.d_head], &v[..], "head {h}");
    }
    let err = lower_attention(&m, m.max_context + 1, attention_layout(&layout), sb, &CompileOptions::default());
    assert!(err.is_err());
}

fn k_cache_macs(t: &DeviceTrace, at: &AttentionLayout, g: usize) -> Vec<Instruction> {
    let kp = &at.k_cache[g];
    t.instructions
        .iter()
        .filter(|i| matches!(i, Instruction::MacAbk { row, .. } if *row >= kp.base_row && *row < kp.base_row + kp.row_count))
        .cloned()
        .collect()
}

#[test]
fn attention_grouped_heads_issue_one_score_gemv_each() {
    let m = model("llama2-70b");
    let a = arch(32);
    let plan = plan_pipeline(&m, &a, m.max_context).unwrap();
    let layout = build_layout(&m, &a, &plan).unwrap();
    let dev = plan.block_assignments[0].master;
    let at = layout.block(dev, 0).unwrap().attn.as_ref().unwrap();
    let t = lower_attention(&m, 1, at, &layout.sb, &CompileOptions::default()).unwrap();
    for g in 0..m.n_kv_heads {
        assert_eq!(k_cache_macs(&t, at, g).len(), 8, "KV head {g}");
    }

    // Full context: every head's score GEMV covers a 4096 x 128 key block.
    let t = lower_attention(&m, 4096, at, &layout.sb, &CompileOptions::default()).unwrap();
    for g in 0..m.n_kv_heads {
        let elems: u64 = k_cache_macs(&t, at, g).iter().map(|i| i.micro_op_count() * 16 * 16).sum();
        assert_eq!(elems, 8 * 4096 * 128, "KV head {g}");
    }
}

#[test]
fn single_device_pipeline_has_no_cxl_traffic() {
    let (m, a, plan, layout) = toy_program();
    let traces = compile_token_with(&m, &plan, &layout, 3, Phase::Decode, &CompileOptions::default()).unwrap();
    assert_eq!(cxl_bytes(&traces, 32), 0);
    assert!(validate_device_traces(&traces, &a).is_well_formed());
    for op in [Opcode::SendCxl, Opcode::RecvCxl, Opcode::BcastCxl] {
        assert_eq!(traces.iter().map(|t| count(&t.instructions, op)).sum::<usize>(), 0);
    }
}

fn attention_ops(t: &DeviceTrace) -> (Vec<Opcode>, u64) {
    let ranges: Vec<_> = t.annotations.iter().filter(|a| a.operator == Operator::Attention).collect();
    let mut ops = vec![];
    let mut mac = 0;
    for a in ranges {
        for i in &t.instructions[a.start..a.end] {
            ops.push(i.opcode());
            if i.opcode() == Opcode::MacAbk {
                mac += i.micro_op_count();
            }
        }
    }
    (ops, mac)
}

fn outside_attention(t: &DeviceTrace) -> Vec<Opcode> {
    (0..t.instructions.len())
        .filter(|&i| t.operator_of(i) != Some(Operator::Attention))
        .map(|i| t.instructions[i].opcode())
        .collect()
}

#[test]
fn consecutive_decode_steps_differ_only_in_attention_extent() {
    let (m, _, plan, layout) = toy_program();
    let compile = |p| compile_token_with(&m, &plan, &layout, p, Phase::Decode, &CompileOptions::default()).unwrap();
    let mut prev = compile(0);
    for p in 1..48 {
        let cur = compile(p);
        assert_eq!(outside_attention(&cur[0]), outside_attention(&prev[0]), "pos {p}");
        let (ops_a, mac_a) = attention_ops(&prev[0]);
        let (ops_b, mac_b) = attention_ops(&cur[0]);
        // A new score slot starts every 16 tokens.
        if p % 16 == 0 {
            assert!(mac_b > mac_a, "pos {p}");
        } else {
            assert!(mac_b >= mac_a, "pos {p}");
        }
        let boundary = (p % 16 == 0) || (p % 16 == 15);
        if !boundary {
            assert_eq!(ops_a, ops_b, "pos {p}");
        }
        prev = cur;
    }
    let prefill = compile_token_with(&m, &plan, &layout, 7, Phase::Prefill, &CompileOptions::default()).unwrap();
    assert_eq!(prefill, compile(7));
}

#[test]
fn tensor_parallel_block_moves_about_135_kb() {
    let mut m = model("llama2-70b");
    m.n_layers = 2;
    let a = arch(32);
    let plan = plan_tensor(&m, &a, 256).unwrap();
    let layout = build_layout(&m, &a, &plan).unwrap();
    let traces = compile_token_with(&m, &plan, &layout, 0, Phase::Decode, &CompileOptions::default()).unwrap();
    assert!(validate_device_traces(&traces, &a).is_well_formed());
    let vol = comm_volume(&plan, &m);
    assert_eq!(cxl_bytes(&traces, 32), vol.per_token_wire_b);
    let per_block = cxl_payload_bytes(&traces, 32) as f64 / m.n_layers as f64;
    assert!((per_block / 135e3 - 1.0).abs() <= 0.05, "{per_block} B per block");
}

#[test]
fn operators_appear_once_per_block_on_the_master() {
    let m = model("llama2-7b");
    let a = arch(32);
    let plan = plan_pipeline(&m, &a, 512).unwrap();
    let layout = build_layout(&m, &a, &plan).unwrap();
    let traces = compile_token_with(&m, &plan, &layout, 5, Phase::Decode, &CompileOptions::default()).unwrap();
    assert!(validate_device_traces(&traces, &a).is_well_formed());
    let mut counts: BTreeMap<Operator, usize> = BTreeMap::new();
    for t in &traces {
        for an in &t.annotations {
            *counts.entry(an.operator).or_default() += 1;
        }
    }
    let n = m.n_layers;
    assert_eq!(counts[&Operator::RmsNorm], 2 * n);
    assert_eq!(counts[&Operator::Attention], n);
    assert_eq!(counts[&Operator::Ffn], n);
    assert_eq!(counts[&Operator::Rope], n);
    assert_eq!(counts[&Operator::OutProjection], n);
    assert_eq!(counts[&Operator::QkvProjection], 3 * n);
    assert!(mac_share(&traces) >= 0.99, "{}", mac_share(&traces));
}
