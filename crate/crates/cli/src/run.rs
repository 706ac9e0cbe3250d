//! Map, compile, simulate and cost one configuration; sweeps over many.

use crate::spec::{resolve, ExperimentSpec, Resolved};
use anyhow::{Context, Result};
use pimsim_core::energycost::{energy_from_activity, tco_report, EnergyReport, TcoReport};
use pimsim_core::mapper::MappingPlan;
use pimsim_core::timesim::{simulate_system, QuerySpec, SimReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model: String,
    pub n_devices: u32,
    pub strategy: String,
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
    pub batch: u32,
    pub prefill_ms: f64,
    pub decode_ms_per_token: f64,
    pub tokens_per_s: f64,
    #[serde(rename = "J_per_token")]
    pub j_per_token: f64,
    #[serde(rename = "avg_device_W")]
    pub avg_device_w: f64,
    pub tco_per_hr: f64,
    pub tokens_per_dollar: f64,
}

pub const COLUMNS: [&str; 14] = [
    "model",
    "n_devices",
    "strategy",
    "tp",
    "pp",
    "dp",
    "batch",
    "prefill_ms",
    "decode_ms_per_token",
    "tokens_per_s",
    "J_per_token",
    "avg_device_W",
    "tco_per_hr",
    "tokens_per_dollar",
];

/// The row is a pure function of the three persisted reports.
pub fn row_from(report: &SimReport, energy: &EnergyReport, tco: &TcoReport) -> Row {
    Row {
        model: report.model.clone(),
        n_devices: report.n_devices,
        strategy: report.strategy.clone(),
        tp: report.tp,
        pp: report.pp,
        dp: report.dp,
        batch: report.batch,
        prefill_ms: report.prefill_ns / 1e6,
        decode_ms_per_token: report.decode_ns_per_token / 1e6,
        tokens_per_s: report.tokens_per_s,
        j_per_token: energy.j_per_token,
        avg_device_w: energy.avg_device_w,
        tco_per_hr: tco.owned_usd_per_hr,
        tokens_per_dollar: tco.tokens_per_dollar_owned,
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub spec: ExperimentSpec,
    pub plan: MappingPlan,
    pub report: SimReport,
    pub energy: EnergyReport,
    pub tco: TcoReport,
    pub row: Row,
}

/// Simulate a resolved spec with `workers` threads.
pub fn run_resolved(spec: &ExperimentSpec, r: Resolved, workers: usize) -> Result<Outcome> {
    let query = QuerySpec { prefill: r.prefill, decode: r.decode, seq_gap: spec.seq_gap };
    let report = simulate_system(&r.model, &r.arch, &r.plan, &query, workers).context("timing simulation")?;
    let energy = energy_from_activity(&report.activity, &r.arch.energy, &r.arch).context("energy model")?;
    let tco = tco_report(&r.arch.cost, r.plan.n_devices, energy.fleet_w, report.tokens_per_s).context("cost model")?;
    let row = row_from(&report, &energy, &tco);
    Ok(Outcome { spec: spec.clone(), plan: r.plan, report, energy, tco, row })
}

pub fn run(spec: &ExperimentSpec, workers: usize) -> Result<Outcome> {
    run_resolved(spec, resolve(spec)?, workers)
}

/// Run every spec on a pool of `workers` threads. Results come back in spec
/// order; a failing spec yields its error and does not stop the others.
pub fn sweep(specs: &[ExperimentSpec], workers: usize) -> Vec<Result<Outcome>> {
    let workers = workers.max(1);
    let outer = workers.min(specs.len()).max(1);
    let inner = (workers / outer).max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(outer).build() {
        Ok(p) => p,
        Err(e) => return specs.iter().map(|_| Err(anyhow::anyhow!("worker pool: {e}"))).collect(),
    };
    pool.install(|| specs.par_iter().map(|s| run(s, inner)).collect())
}

pub fn csv_bytes<'a>(rows: impl IntoIterator<Item = &'a Row>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

pub fn read_csv(bytes: &[u8]) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

pub const RESULTS_CSV: &str = "results.csv";
pub const ROWS_DIR: &str = "rows";

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn row_dir(out: &Path, index: usize) -> PathBuf {
    out.join(ROWS_DIR).join(format!("{index:04}"))
}

/// Persist the spec, plan and reports of one row.
pub fn write_artifacts(dir: &Path, o: &Outcome) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("spec.json"), &o.spec)?;
    write_json(&dir.join("plan.json"), &o.plan)?;
    write_json(&dir.join("report.json"), &o.report)?;
    write_json(&dir.join("energy.json"), &o.energy)?;
    write_json(&dir.join("tco.json"), &o.tco)?;
    std::fs::write(dir.join("row.csv"), csv_bytes([&o.row])?)?;
    Ok(())
}

/// Rebuild one row from the reports persisted in `dir`.
pub fn row_from_artifacts(dir: &Path) -> Result<Row> {
    let report: SimReport = read_json(&dir.join("report.json"))?;
    let energy: EnergyReport = read_json(&dir.join("energy.json"))?;
    let tco: TcoReport = read_json(&dir.join("tco.json"))?;
    Ok(row_from(&report, &energy, &tco))
}

/// Rows rebuilt from every row directory under `out`, in index order.
pub fn rebuild(out: &Path) -> Result<Vec<Row>> {
    let base = out.join(ROWS_DIR);
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(&base) {
        Ok(it) => it.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e).with_context(|| format!("listing {}", base.display())),
    };
    dirs.sort();
    dirs.iter().map(|d| row_from_artifacts(d)).collect()
}

/// Outcome of a sweep written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<Row>,
    pub failures: Vec<(usize, String)>,
}

impl SweepSummary {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Run `specs`, write each successful row's artifacts under `out/rows/` and
/// the combined table to `out/results.csv`. Failed rows are logged to
/// `log` and left out of the table.
pub fn sweep_to_dir(specs: &[ExperimentSpec], workers: usize, out: &Path, log: &mut dyn Write) -> Result<SweepSummary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // Row directories from an earlier sweep would be picked up by `rebuild`.
    let stale = out.join(ROWS_DIR);
    if stale.is_dir() {
        std::fs::remove_dir_all(&stale).with_context(|| format!("clearing {}", stale.display()))?;
    }
    let results = sweep(specs, workers);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => {
                write_artifacts(&row_dir(out, i), &o)?;
                rows.push(o.row);
            }
            Err(e) => {
                writeln!(log, "row {i} ({}): {e:#}", specs[i].model.display())?;
                failures.push((i, format!("{e:#}")));
            }
        }
    }
    std::fs::write(out.join(RESULTS_CSV), csv_bytes(&rows)?)?;
    Ok(SweepSummary { rows, failures })
}
