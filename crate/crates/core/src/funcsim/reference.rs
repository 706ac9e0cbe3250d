//! Float reference for one transformer block and error reporting.

use super::weights::BlockWeights;
use super::{AfTables, FuncError};
use crate::compiler::layout::{norm_pairs, slot_partition};
use crate::isa::AfId;
use crate::bf16;
use crate::config::ModelSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Plain `f64` arithmetic throughout.
    #[default]
    Exact,
    /// The compiled program's order of operations: GEMVs in the PU
    /// reduction order with `f32` accumulation, the PNM reduction trees, the
    /// activation and exponent units, and BF16 rounding wherever an
    /// intermediate is stored. `ffn_parts` is the tensor-parallel width.
    HardwareOrder { ffn_parts: usize },
}

/// Keys and values of past positions, one `kv_dim` vector per position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// GEMV as the near-bank PUs compute it: per row, 16-wide tree dot products
/// over consecutive 16-column groups accumulated in `f32` from zero, rounded
/// to BF16 at the end. `w` is row-major `rows x cols`.
pub fn reference_gemv_ordered(w: &[f32], x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    gemv_hw(w, x, rows, cols)
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gemv_f64(w: &[f32], x: &[f64], rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] as f64 * scale * x[c]).sum()).collect()
}

fn check_shapes(model: &ModelSpec, w: &BlockWeights, x_len: usize, kv: &KvCache, pos: usize) -> Result<(), FuncError> {
    let (d, kvd, f) = (model.d_model, model.kv_dim(), model.d_ff);
    if x_len != d || kv.k.len() != pos || kv.v.len() != pos {
        return Err(FuncError::Shape(format!(
            "hidden {x_len} (want {d}), cache {} (want position {pos})",
            kv.k.len()
        )));
    }
    let sizes = [
        (w.wq.len(), d * d),
        (w.wk.len(), kvd * d),
        (w.wv.len(), kvd * d),
        (w.wo.len(), d * d),
        (w.w_gate.len(), f * d),
        (w.w_up.len(), f * d),
        (w.w_down.len(), d * f),
        (w.attn_norm.len(), d),
        (w.ffn_norm.len(), d),
    ];
    if let Some((got, want)) = sizes.iter().find(|(g, w)| g != w) {
        return Err(FuncError::Shape(format!("weight of {got} elements, expected {want}")));
    }
    Ok(())
}

/// One transformer block at position `pos` = `kv.k.len()`: RMSNorm, QKV,
/// rotary embedding, grouped-query attention over the cache, output
/// projection, residual, RMSNorm, gated SiLU FFN, residual. Appends the new
/// key and value to `kv`.
pub fn reference_block(
    model: &ModelSpec,
    w: &BlockWeights,
    x: &[f64],
    kv: &mut KvCache,
    pos: usize,
    mode: ReferenceMode,
) -> Result<Vec<f64>, FuncError> {
    check_shapes(model, w, x.len(), kv, pos)?;
    match mode {
        ReferenceMode::Exact => Ok(exact_block(model, w, x, kv, pos)),
        ReferenceMode::HardwareOrder { ffn_parts } => {
            let xf: Vec<f32> = x.iter().map(|&v| bf16::to_f32(bf16::from_f64(v))).collect();
            let out = hardware_block(model, w, &xf, kv, pos, ffn_parts.max(1));
            Ok(out.into_iter().map(|v| v as f64).collect())
        }
    }
}

fn exact_block(model: &ModelSpec, w: &BlockWeights, x: &[f64], kv: &mut KvCache, pos: usize) -> Vec<f64> {
    let (d, kvd, f, dh) = (model.d_model, model.kv_dim(), model.d_ff, model.d_head);
    let rmsnorm = |x: &[f64], g: &[f32]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + model.rms_eps).sqrt();
        x.iter().zip(g).map(|(v, g)| v * r * *g as f64).collect()
    };
    let xn = rmsnorm(x, &w.attn_norm);
    let mut q = gemv_f64(&w.wq, &xn, d, d, 1.0);
    let mut k = gemv_f64(&w.wk, &xn, kvd, d, 1.0);
    let v = gemv_f64(&w.wv, &xn, kvd, d, 1.0);
    for h in q.chunks_mut(dh).chain(k.chunks_mut(dh)) {
        for i in 0..dh / 2 {
            let ang = pos as f64 * model.rope_theta.powf(-2.0 * i as f64 / dh as f64);
            let (s, c) = ang.sin_cos();
            let (a, b) = (h[2 * i], h[2 * i + 1]);
            h[2 * i] = a * c - b * s;
            h[2 * i + 1] = b * c + a * s;
        }
    }
    kv.k.push(k);
    kv.v.push(v);
    let n = pos + 1;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = vec![0.0; d];
    for h in 0..model.n_heads {
        let g = h / model.group_size();
        let qh = &q[h * dh..(h + 1) * dh];
        let scores: Vec<f64> = (0..n)
            .map(|t| qh.iter().zip(&kv.k[t][g * dh..(g + 1) * dh]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let sum: f64 = p.iter().sum();
        for (i, o) in attn[h * dh..(h + 1) * dh].iter_mut().enumerate() {
            *o = (0..n).map(|t| p[t] * kv.v[t][g * dh + i]).sum::<f64>() / sum;
        }
    }
    let o = gemv_f64(&w.wo, &attn, d, d, 1.0);
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let xn2 = rmsnorm(&x1, &w.ffn_norm);
    let gate = gemv_f64(&w.w_gate, &xn2, f, d, 1.0);
    let up = gemv_f64(&w.w_up, &xn2, f, d, 1.0);
    let hid: Vec<f64> = gate.iter().zip(&up).map(|(a, b)| silu(*a) * b).collect();
    let down = gemv_f64(&w.w_down, &hid, d, f, 1.0);
    x1.iter().zip(&down).map(|(a, b)| a + b).collect()
}

fn r(v: f32) -> f32 {
    bf16::round(v)
}

fn mul(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| r(x * y)).collect()
}

fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| r(x + y)).collect()
}

fn lanes(v: &[f32], slot: usize) -> [f32; 16] {
    let mut l = [0.0f32; 16];
    for (i, x) in v.iter().skip(16 * slot).take(16).enumerate() {
        l[i] = *x;
    }
    l
}

/// Sum of squares split over neighbour-bank pairs, reduced by the PNM adder
/// tree, then the scalar reciprocal square root and two element-wise scalings.
fn rmsnorm_hw(x: &[f32], g: &[f32], eps: f64) -> Vec<f32> {
    let ns = x.len() / 16;
    let pairs = norm_pairs(ns);
    let part = ns / pairs;
    let mut banks = [0.0f32; 16];
    for m in 0..pairs {
        let mut acc = 0.0f32;
        for s in m * part..(m + 1) * part {
            let l = bf16::lanes_from_f32(&lanes(x, s));
            acc += bf16::dot16(&l, &l);
        }
        banks[2 * m] = r(acc);
    }
    let ss = r(bf16::tree_sum16(banks));
    let inv_n = 1.0 / x.len() as f32;
    let scale = r(1.0 / (ss * inv_n + eps as f32).sqrt());
    let y: Vec<f32> = x.iter().map(|v| r(v * scale)).collect();
    mul(&y, g)
}

/// Pre-rounding `f32` accumulators of [`reference_gemv_ordered`].
fn gemv_acc(w: &[f32], x: &[f32], rows: usize, cols: usize, c0: usize, c1: usize) -> Vec<f32> {
    let xs: Vec<u16> = x.iter().map(|&v| bf16::from_f32(v)).collect();
    (0..rows)
        .map(|row| {
            let mut acc = 0.0f32;
            for c in (c0..c1).step_by(16) {
                let mut a = [0u16; 16];
                let mut b = [0u16; 16];
                for l in 0..16.min(c1 - c) {
                    a[l] = bf16::from_f32(w[row * cols + c + l]);
                    b[l] = xs[c + l];
                }
                acc += bf16::dot16(&a, &b);
            }
            acc
        })
        .collect()
}

fn gemv_hw(w: &[f32], x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    gemv_acc(w, x, rows, cols, 0, cols).into_iter().map(r).collect()
}

/// Sum of the first `n` elements of `p` as the PNM reduces it: per-slot
/// adder trees, then halving element-wise additions per 64-slot chunk.
fn softmax_sum_hw(p: &[f32]) -> f32 {
    let n = p.len().div_ceil(16);
    let mut sum = 0.0f32;
    for c0 in (0..n).step_by(64) {
        let k = (n - c0).min(64);
        let mut red: Vec<f32> = (c0..c0 + k).map(|s| r(bf16::tree_sum16(lanes(p, s)))).collect();
        let mut m = k;
        while m > 1 {
            let h = m / 2;
            let keep = m - h;
            for i in 0..h {
                red[i] = r(red[i] + red[keep + i]);
            }
            m = keep;
        }
        sum = r(sum + red[0]);
    }
    sum
}

/// Rotary embedding through the packed element-wise multiply: products
/// rounded, then one rounded addition per output.
fn rope_hw(h: &mut [f32], pos: usize, theta: f64) {
    let dh = h.len();
    for i in 0..dh / 2 {
        let ang = pos as f64 * theta.powf(-2.0 * i as f64 / dh as f64);
        let (s, c) = ang.sin_cos();
        let (s, ns, c) = (r(s as f32), r(-s as f32), r(c as f32));
        let (a, b) = (h[2 * i], h[2 * i + 1]);
        h[2 * i] = r(r(a * c) + r(b * ns));
        h[2 * i + 1] = r(r(b * c) + r(a * s));
    }
}

/// The block in the order the compiled program computes it, with BF16
/// rounding wherever an intermediate is stored. The FFN down projection is
/// split into `ffn_parts` partial sums over 16-element slots of the hidden
/// dimension, combined in device order as the tensor-parallel gather does.
fn hardware_block(model: &ModelSpec, w: &BlockWeights, x: &[f32], kv: &mut KvCache, pos: usize, ffn_parts: usize) -> Vec<f32> {
    let (d, kvd, f, dh) = (model.d_model, model.kv_dim(), model.d_ff, model.d_head);
    let af = AfTables::new();
    let xn = rmsnorm_hw(x, &w.attn_norm, model.rms_eps);
    let scale = 1.0 / (dh as f64).sqrt();
    let wq: Vec<f32> = w.wq.iter().map(|&v| bf16::to_f32(bf16::from_f64(v as f64 * scale))).collect();
    let mut q = gemv_hw(&wq, &xn, d, d);
    let mut k = gemv_hw(&w.wk, &xn, kvd, d);
    let v = gemv_hw(&w.wv, &xn, kvd, d);
    for h in k.chunks_mut(dh).chain(q.chunks_mut(dh)) {
        rope_hw(h, pos, model.rope_theta);
    }
    kv.k.push(k.iter().map(|&v| v as f64).collect());
    kv.v.push(v.iter().map(|&v| v as f64).collect());
    let n = pos + 1;
    let mut attn = vec![0.0f32; d];
    for h in 0..model.n_heads {
        let g = h / model.group_size();
        let qh = &q[h * dh..(h + 1) * dh];
        let scores: Vec<f32> = (0..n)
            .map(|t| {
                let kt: Vec<f32> = kv.k[t][g * dh..(g + 1) * dh].iter().map(|&v| v as f32).collect();
                gemv_hw(&kt, qh, 1, dh)[0]
            })
            .collect();
        let neg = -scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let p: Vec<f32> = scores.iter().map(|s| r(bf16::taylor_exp(r(s + neg)))).collect();
        let inv = r(1.0 / softmax_sum_hw(&p));
        let vt: Vec<f32> = (0..dh).flat_map(|i| (0..n).map(move |t| (t, i))).map(|(t, i)| kv.v[t][g * dh + i] as f32).collect();
        let o = gemv_hw(&vt, &p, dh, n);
        for (a, o) in attn[h * dh..(h + 1) * dh].iter_mut().zip(o) {
            *a = r(o * inv);
        }
    }
    let o = gemv_hw(&w.wo, &attn, d, d);
    let x1 = add(x, &o);
    let xn2 = rmsnorm_hw(&x1, &w.ffn_norm, model.rms_eps);
    let gate: Vec<f32> = gemv_acc(&w.w_gate, &xn2, f, d, 0, d).into_iter().map(|a| r(af.apply(AfId::Silu, a))).collect();
    let up = gemv_hw(&w.w_up, &xn2, f, d);
    let hid = mul(&gate, &up);
    let f_slots = f.div_ceil(16);
    let mut down: Option<Vec<f32>> = None;
    for part in 0..ffn_parts {
        let s = slot_partition(f_slots, ffn_parts, part);
        let c1 = (16 * (s.start + s.len)).min(f);
        let partial: Vec<f32> = gemv_acc(&w.w_down, &hid, d, f, 16 * s.start, c1).into_iter().map(r).collect();
        down = Some(match down {
            None => partial,
            Some(acc) => add(&acc, &partial),
        });
    }
    add(&x1, &down.unwrap_or_else(|| vec![0.0; d]))
}

/// Element-wise error of `actual` against `expected`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub len: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Relative errors use `max(|expected_i|, rms(expected))` as denominator
    /// so that near-zero elements do not dominate.
    pub max_rel: f64,
    pub mean_rel: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn compare(actual: &[f64], expected: &[f64], tolerance: f64) -> Result<DiffReport, FuncError> {
    if actual.len() != expected.len() {
        return Err(FuncError::Shape(format!("{} vs {} elements", actual.len(), expected.len())));
    }
    let n = actual.len();
    let rms = (expected.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    let (mut max_abs, mut sum_abs, mut max_rel, mut sum_rel, mut worst) = (0.0f64, 0.0, 0.0f64, 0.0, 0);
    for i in 0..n {
        let abs = (actual[i] - expected[i]).abs();
        let den = expected[i].abs().max(rms);
        let rel = if den > 0.0 { abs / den } else { abs };
        max_abs = max_abs.max(abs);
        sum_abs += abs;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        sum_rel += rel;
    }
    let nf = n.max(1) as f64;
    Ok(DiffReport {
        len: n,
        max_abs,
        mean_abs: sum_abs / nf,
        max_rel,
        mean_rel: sum_rel / nf,
        worst_index: worst,
        tolerance,
        pass: max_rel <= tolerance && max_rel.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_heads: usize, n_kv: usize, d: usize, f: usize) -> ModelSpec {
        let mut m = ModelSpec {
            version: 1,
            name: "tiny".into(),
            n_layers: 1,
            d_model: d,
            n_heads,
            n_kv_heads: n_kv,
            d_head: 0,
            d_ff: f,
            max_context: 8,
            weight_bytes: 2,
            rms_eps: 1e-5,
            rope_theta: 10000.0,
        };
        m.validate().unwrap();
        m
    }

    fn zeros(m: &ModelSpec) -> BlockWeights {
        let (d, kv, f) = (m.d_model, m.kv_dim(), m.d_ff);
        BlockWeights {
            wq: vec![0.0; d * d],
            wk: vec![0.0; kv * d],
            wv: vec![0.0; kv * d],
            wo: vec![0.0; d * d],
            w_gate: vec![0.0; f * d],
            w_up: vec![0.0; f * d],
            w_down: vec![0.0; d * f],
            attn_norm: vec![1.0; d],
            ffn_norm: vec![1.0; d],
        }
    }

    #[test]
    fn zero_weights_leave_residual_stream() {
        let m = tiny(2, 1, 4, 8);
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let out = reference_block(&m, &zeros(&m), &x, &mut KvCache::default(), 0, ReferenceMode::Exact).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn hand_computed_single_head_step() {
        // d = 2, one head, identity Q/K/V/O, d_ff = 1 with gate = up = [1, 0]
        // and down = [0, 1]^T, at position 1 after one cached token.
        let m = tiny(1, 1, 2, 1);
        let w = BlockWeights {
            wq: vec![1.0, 0.0, 0.0, 1.0],
            wk: vec![1.0, 0.0, 0.0, 1.0],
            wv: vec![1.0, 0.0, 0.0, 1.0],
            wo: vec![1.0, 0.0, 0.0, 1.0],
            w_gate: vec![1.0, 0.0],
            w_up: vec![1.0, 0.0],
            w_down: vec![0.0, 1.0],
            attn_norm: vec![1.0, 1.0],
            ffn_norm: vec![1.0, 1.0],
        };
        let mut kv = KvCache { k: vec![vec![1.0, 0.0]], v: vec![vec![0.0, 2.0]] };
        let x = [1.0, 1.0];
        let out = reference_block(&m, &w, &x, &mut kv, 1, ReferenceMode::Exact).unwrap();
        // By hand: rms(x) = 1 so xn = x / sqrt(1 + eps).
        let eps = 1e-5f64;
        let n1 = 1.0 / (1.0 + eps).sqrt();
        // q = k = xn rotated by angle 1: (n1(cos1 - sin1), n1(sin1 + cos1)).
        let (s, c) = 1f64.sin_cos();
        let q = [n1 * (c - s), n1 * (s + c)];
        // scores / sqrt(2): against k0 = (1, 0) and k1 = q.
        let s0 = q[0] / 2f64.sqrt();
        let s1 = (q[0] * q[0] + q[1] * q[1]) / 2f64.sqrt();
        let (e0, e1) = ((s0 - s1).exp(), 1.0);
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let attn = [p1 * n1, p0 * 2.0 + p1 * n1];
        let x1 = [1.0 + attn[0], 1.0 + attn[1]];
        let r = 1.0 / ((x1[0] * x1[0] + x1[1] * x1[1]) / 2.0 + eps).sqrt();
        let g = x1[0] * r;
        let y = [x1[0], x1[1] + g / (1.0 + (-g).exp()) * g];
        assert!((out[0] - y[0]).abs() < 1e-12 && (out[1] - y[1]).abs() < 1e-12, "{out:?} vs {y:?}");
    }

    #[test]
    fn gqa_matches_mha_with_shared_heads() {
        let g = tiny(4, 1, 16, 8);
        let mha = tiny(4, 4, 16, 8);
        let wg = super::super::weights::synthetic_weights(&g, 3).blocks.remove(0);
        let rep = |w: &[f32]| -> Vec<f32> { (0..4).flat_map(|_| w.iter().copied()).collect() };
        let wm = BlockWeights { wk: rep(&wg.wk), wv: rep(&wg.wv), ..wg.clone() };
        let (mut kg, mut km) = (KvCache::default(), KvCache::default());
        let mut xg: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut xm = xg.clone();
        for pos in 0..3 {
            xg = reference_block(&g, &wg, &xg, &mut kg, pos, ReferenceMode::Exact).unwrap();
            xm = reference_block(&mha, &wm, &xm, &mut km, pos, ReferenceMode::Exact).unwrap();
        }
        for (a, b) in xg.iter().zip(&xm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compare_reports() {
        let a = [1.0, 2.0, 3.0];
        let r = compare(&a, &a, 0.0).unwrap();
        assert_eq!((r.max_abs, r.max_rel, r.pass), (0.0, 0.0, true));
        assert!(compare(&a, &a[..2], 0.1).is_err());
        let r = compare(&[1.0, 2.0, 3.3], &a, 0.05).unwrap();
        assert_eq!(r.worst_index, 2);
        assert!(!r.pass);
    }
}
