//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use pimsim_cli::run::{csv_bytes, sweep, Outcome};
use pimsim_cli::spec::{ExperimentSpec, StrategyArg};
use pimsim_cli::verify::{verify, VerifyReport};
use pimsim_core::compiler::layout::slots;
use pimsim_core::compiler::lower::compile_token;
use pimsim_core::compiler::{lower_gemv, mac_share, CompileOptions, LayoutKind, Phase, TensorPlacement};
use pimsim_core::config::{load_model, ArchConfig, ModelSpec, TimingParams};
use pimsim_core::energycost::{controller_unit_cost, hardware_cost, mac_pj_per_bit, relative_to_gpu, FleetPoint, GpuReference};
use pimsim_core::mapper::{comm_volume, plan_pipeline, plan_tensor, ChannelRange, CommSite, MappingPlan};
use pimsim_core::timesim::channel::{channel_commands, check_event_log, closed_form_gemv_latency, simulate_channel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::{Duration, Instant};

const PREFILL: usize = 512;
const DECODE: usize = 3584;
/// Decode sampling interval for the 4096-token sweeps.
const SEQ_GAP: usize = 2048;
const SCALING_DEVICES: [u32; 15] = [16, 20, 24, 27, 32, 40, 42, 44, 48, 54, 64, 80, 96, 112, 128];

fn params(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../params").join(rel)
}

fn model(name: &str) -> ModelSpec {
    load_model(&params(&format!("models/{name}.json"))).unwrap()
}

fn arch(n: usize) -> ArchConfig {
    ArchConfig { n_devices: n, ..ArchConfig::default() }
}

fn within(v: f64, target: f64, rel: f64) -> bool {
    (v / target - 1.0).abs() <= rel
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// Fleet runs shared by several criteria.

const PP70: usize = 0;
const PP7: usize = 1;
const PP13: usize = 2;
const SCALING: usize = 3;

fn spec(name: &str, strategy: StrategyArg, devices: u32) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(params(&format!("models/{name}.json")), strategy);
    s.devices = Some(devices);
    s.prefill = PREFILL;
    s.decode = Some(DECODE);
    s.seq_gap = SEQ_GAP;
    s
}

fn fleet_specs() -> Vec<ExperimentSpec> {
    let mut v = vec![
        spec("llama2-70b", StrategyArg::Pp, 32),
        spec("llama2-7b", StrategyArg::Pp, 8),
        spec("llama2-13b", StrategyArg::Pp, 20),
    ];
    v.extend(SCALING_DEVICES.iter().map(|&n| spec("llama2-70b", StrategyArg::Scaled, n)));
    v
}

/// Everything criteria 1 to 8 produce, as computed with `workers` threads.
struct Outputs {
    toy: VerifyReport,
    toy_elapsed: Duration,
    gemv: Vec<(usize, usize, u32, f64, f64)>,
    plans: Vec<MappingPlan>,
    mac_shares: Vec<(String, usize, f64)>,
    fleet: Vec<Result<Outcome, String>>,
}

impl Outputs {
    fn bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.toy).unwrap();
        out.extend(serde_json::to_vec(&self.gemv).unwrap());
        out.extend(serde_json::to_vec(&self.plans).unwrap());
        out.extend(serde_json::to_vec(&self.mac_shares).unwrap());
        for r in &self.fleet {
            match r {
                Ok(o) => {
                    out.extend(csv_bytes([&o.row]).unwrap());
                    out.extend(serde_json::to_vec(&o.energy).unwrap());
                    out.extend(serde_json::to_vec(&o.tco).unwrap());
                }
                Err(e) => out.extend(e.as_bytes()),
            }
        }
        out
    }

    fn fleet(&self, i: usize) -> Result<&Outcome, String> {
        self.fleet[i].as_ref().map_err(|e| e.clone())
    }
}

fn toy_verify() -> (VerifyReport, Duration) {
    let m = model("toy");
    let a = arch(1);
    let t = Instant::now();
    let plan = plan_pipeline(&m, &a, m.max_context).unwrap();
    let rep = verify(&m, &a, &plan, m.max_context, 7).unwrap();
    (rep, t.elapsed())
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

/// Simulated and closed-form latency of one GEMV.
fn gemv_latencies(rows: usize, cols: usize, channels: u32, t: &TimingParams) -> (f64, f64) {
    let trace = lower_gemv(rows, cols, &gemv_placement(rows, cols, channels), 0, 256, 1024).unwrap();
    let sim = (0..channels as u8)
        .map(|ch| {
            let run = simulate_channel(&channel_commands(&trace, ch), t).unwrap();
            check_event_log(&run.events, t).unwrap();
            run.finish_ns
        })
        .fold(0.0, f64::max);
    (sim, closed_form_gemv_latency(rows, cols, channels as usize, t))
}

fn gemv_sweep() -> Vec<(usize, usize, u32, f64, f64)> {
    let t = TimingParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let choices = [1u32, 2, 3, 4, 8, 16, 32];
    let mut shapes = vec![(16, 8192, 1)];
    for _ in 0..200 {
        shapes.push((rng.gen_range(1..=2048), rng.gen_range(1..=4096), choices[rng.gen_range(0..choices.len())]));
    }
    shapes
        .into_iter()
        .map(|(r, c, ch)| {
            let (sim, closed) = gemv_latencies(r, c, ch, &t);
            (r, c, ch, sim, closed)
        })
        .collect()
}

fn mapping_plans() -> Vec<MappingPlan> {
    vec![
        plan_pipeline(&model("llama2-70b"), &arch(32), PREFILL + DECODE).unwrap(),
        plan_pipeline(&model("llama2-7b"), &arch(8), PREFILL + DECODE).unwrap(),
        plan_pipeline(&model("llama2-13b"), &arch(20), PREFILL + DECODE).unwrap(),
        plan_tensor(&model("llama2-70b"), &arch(32), PREFILL + DECODE).unwrap(),
    ]
}

fn mac_shares() -> Vec<(String, usize, f64)> {
    let mut out = Vec::new();
    for (name, n) in [("llama2-7b", 8), ("llama2-70b", 32)] {
        let m = model(name);
        let a = arch(n);
        let plan = plan_pipeline(&m, &a, PREFILL + DECODE).unwrap();
        for pos in [PREFILL, PREFILL + DECODE - 1] {
            let (_, traces) = compile_token(&m, &a, &plan, pos, Phase::Decode, &CompileOptions::default()).unwrap();
            out.push((name.to_string(), pos, mac_share(&traces)));
        }
    }
    out
}

fn collect(workers: usize) -> Outputs {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
    let (toy, toy_elapsed) = pool.install(toy_verify);
    let gemv = pool.install(gemv_sweep);
    let plans = pool.install(mapping_plans);
    let mac_shares = pool.install(mac_shares);
    let fleet = sweep(&fleet_specs(), workers).into_iter().map(|r| r.map_err(|e| format!("{e:#}"))).collect();
    Outputs { toy, toy_elapsed, gemv, plans, mac_shares, fleet }
}

fn criterion_1(o: &Outputs) -> Verdict {
    let exact_gemvs = o.toy.gemv.iter().all(|g| g.mismatches == 0);
    let ok = exact_gemvs && o.toy.max_rel_ordered <= 0.02 && o.toy_elapsed < Duration::from_secs(60);
    verdict(
        ok,
        format!(
            "{} GEMV shapes bit-exact: {exact_gemvs}; {} tokens, max rel error {:.2e}; {:.1} s",
            o.toy.gemv.len(),
            o.toy.tokens.len(),
            o.toy.max_rel_ordered,
            o.toy_elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(o: &Outputs) -> Verdict {
    let mismatches = o.gemv.iter().filter(|g| g.3 != g.4).count();
    let worked = o.gemv[0];
    let rows_term = 8.0 * (18.0 + 64.0 + 16.0);
    let ok = mismatches == 0 && o.gemv.len() == 201 && rows_term == 784.0 && worked.3 == rows_term + 512.0 + 1.0 + 25.0;
    verdict(ok, format!("{mismatches} of {} shapes differ; 16x8192 takes {} ns", o.gemv.len(), worked.3))
}

fn criterion_3(o: &Outputs) -> Verdict {
    let p70 = &o.plans[0];
    let two = (0..p70.n_devices).filter(|&d| p70.blocks_on_device(d).len() == 2).count();
    let three = (0..p70.n_devices).filter(|&d| p70.blocks_on_device(d).len() == 3).count();
    let batches = [o.plans[1].batch_size, o.plans[2].batch_size, p70.batch_size];
    let ok = p70.active_devices() == 27 && p70.blocks_per_device == 3 && three == 26 && two == 1 && batches == [32, 40, 80];
    verdict(
        ok,
        format!("70B: {} active, {three} with 3 blocks, {two} with 2; batches {batches:?}", p70.active_devices()),
    )
}

fn criterion_4(o: &Outputs) -> Verdict {
    let m = model("llama2-70b");
    let tp = comm_volume(&o.plans[3], &m).mean_per_block_b();
    let boundaries: Vec<u64> = o.plans[0]
        .comm_schedule
        .iter()
        .filter(|e| e.site == CommSite::StageBoundary)
        .map(|e| e.payload_b)
        .collect();
    let pp_ok = !boundaries.is_empty() && boundaries.iter().all(|&b| b == 16 * 1024);
    let ok = within(tp, 135e3, 0.05) && pp_ok;
    verdict(ok, format!("TP=32 moves {:.1} KB per block; {} stage boundaries of 16 KB: {pp_ok}", tp / 1e3, boundaries.len()))
}

fn criterion_5(o: &Outputs) -> Verdict {
    let min = o.mac_shares.iter().map(|s| s.2).fold(1.0, f64::min);
    let shown: Vec<String> = o.mac_shares.iter().map(|s| format!("{}@{} {:.4}", s.0, s.1, s.2)).collect();
    verdict(min >= 0.99, shown.join(", "))
}

fn criterion_6(o: &Outputs) -> Verdict {
    let pj = mac_pj_per_bit(&ArchConfig::default().energy, &ArchConfig::default());
    let run = match o.fleet(PP70) {
        Ok(r) => r,
        Err(e) => return verdict(false, e),
    };
    let e = &run.energy;
    let (mac, act) = (e.device_fractions[0] * 100.0, e.device_fractions[1] * 100.0);
    let ok = within(pj, 0.6, 0.10)
        && within(e.avg_device_w, 32.4, 0.10)
        && (mac - 54.5).abs() <= 3.0
        && (act - 30.2).abs() <= 3.0;
    verdict(
        ok,
        format!(
            "MAC {pj:.3} pJ/bit; {:.1} W per active device (target 32.4); MAC {mac:.1}% (54.5), ACT/PRE {act:.1}% (30.2)",
            e.avg_device_w
        ),
    )
}

fn criterion_7(o: &Outputs) -> Verdict {
    let c = ArchConfig::default().cost;
    let unit = controller_unit_cost(&c).unwrap().total_usd;
    let hw = hardware_cost(&c, 32).unwrap().total_usd;
    let run = match o.fleet(PP70) {
        Ok(r) => r,
        Err(e) => return verdict(false, e),
    };
    let (owned, rental) = (run.tco.owned_usd_per_hr, run.tco.rental_usd_per_hr);
    let ok = within(unit, 11.9, 0.15) && within(hw, 14873.0, 0.01) && within(owned, 0.73, 0.05) && within(rental, 1.05, 0.05);
    verdict(
        ok,
        format!(
            "controller ${unit:.2}, hardware ${hw:.0}, owned {owned:.3} $/hr (0.73), rental {rental:.3} $/hr (1.05) at {:.0} W",
            run.tco.fleet_w
        ),
    )
}

fn criterion_8(o: &Outputs) -> Verdict {
    let mut tps = Vec::new();
    for (i, &n) in SCALING_DEVICES.iter().enumerate() {
        match o.fleet(SCALING + i) {
            Ok(r) => tps.push((n, r.row.tokens_per_s)),
            Err(e) => return verdict(false, format!("{n} devices: {e}")),
        }
    }
    let monotone = tps.windows(2).all(|w| w[1].1 >= w[0].1);
    let at = |n: u32| tps.iter().find(|t| t.0 == n).unwrap().1;
    let flat = at(40) == at(42) && at(42) == at(44);
    let ratio = at(128) / at(16);
    let ok = monotone && flat && within(ratio, 8.4, 0.15);
    let shown: Vec<String> = tps.iter().map(|(n, t)| format!("{n}:{t:.0}")).collect();
    verdict(
        ok,
        format!("monotone {monotone}, 40..44 flat {flat}, 128/16 = {ratio:.2}; tokens/s {}", shown.join(" ")),
    )
}

fn criterion_9(o: &Outputs) -> Verdict {
    let gpu: GpuReference = pimsim_core::config::load_json(&params("gpu/a100.json")).unwrap();
    let mut points = Vec::new();
    for i in [PP7, PP13, PP70] {
        let r = match o.fleet(i) {
            Ok(r) => r,
            Err(e) => return verdict(false, e),
        };
        let e = &r.energy;
        points.push(FleetPoint {
            model: r.report.model.clone(),
            tokens_per_s: r.row.tokens_per_s,
            device_w: (e.total_j - e.categories.host_j) / e.wall_s,
            owned_usd_per_hr: r.tco.owned_usd_per_hr,
        });
    }
    let rr = match relative_to_gpu(&points, &gpu) {
        Ok(r) => r,
        Err(e) => return verdict(false, e),
    };
    let ok = within(rr.throughput, 2.3, 0.15) && within(rr.tokens_per_joule, 2.9, 0.15) && within(rr.tokens_per_dollar, 5.2, 0.15);
    verdict(
        ok,
        format!(
            "throughput {:.2}x (2.3), tokens/J {:.2}x (2.9), tokens/$ {:.2}x (5.2)",
            rr.throughput, rr.tokens_per_joule, rr.tokens_per_dollar
        ),
    )
}

fn criterion_10(serial: &Outputs) -> Verdict {
    let base = serial.bytes();
    let mut differ = Vec::new();
    for w in [4, 16] {
        if collect(w).bytes() != base {
            differ.push(w);
        }
    }
    verdict(differ.is_empty(), format!("{} bytes at 1 worker; differing worker counts {differ:?}", base.len()))
}

fn main() {
    let serial = collect(1);
    let criteria: [(&str, &dyn Fn(&Outputs) -> Verdict); 10] = [
        ("functional oracle equivalence", &criterion_1),
        ("timing oracle", &criterion_2),
        ("mapping reproduction", &criterion_3),
        ("communication volume", &criterion_4),
        ("MAC dominance", &criterion_5),
        ("energy calibration", &criterion_6),
        ("cost reproduction", &criterion_7),
        ("scalability shape", &criterion_8),
        ("GPU-relative ratios", &criterion_9),
        ("determinism", &criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check(&serial);
        println!("criterion {:>2} {:<30} {}  {}", i + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
