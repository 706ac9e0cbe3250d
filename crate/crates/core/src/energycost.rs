//! Energy, power and cost of a simulated run.
//!
//! Energy is activity-based: every counted DRAM and near-memory event is
//! charged a fixed energy and every powered component a static power over
//! the wall time. Costs amortize hardware over its service life and add
//! electricity at the fleet's average power.

use crate::config::{ArchConfig, CostParams, EnergyParams};
use crate::timesim::Activity;
use serde::{Deserialize, Serialize};

const HOURS_PER_YEAR: f64 = 8760.0;
const PJ: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("{field} must be {need}, got {value}")]
    Input { field: &'static str, need: &'static str, value: f64 },
}

fn require(ok: bool, field: &'static str, need: &'static str, value: f64) -> Result<(), CostError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(CostError::Input { field, need, value })
    }
}

/// Energy per category, in joules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyCategories {
    /// In-bank arithmetic: MAC, element-wise multiply, activation functions.
    pub mac_pim_j: f64,
    pub act_pre_j: f64,
    pub rd_wr_j: f64,
    /// DRAM background power of every channel.
    pub background_j: f64,
    /// Memory controllers, scalar cores, controller logic, PNM units and CXL ports.
    pub controller_pnm_j: f64,
    pub host_j: f64,
}

impl EnergyCategories {
    pub const NAMES: [&'static str; 6] = ["mac_pim", "act_pre", "rd_wr", "background", "controller_pnm", "host"];

    pub fn values(&self) -> [f64; 6] {
        [self.mac_pim_j, self.act_pre_j, self.rd_wr_j, self.background_j, self.controller_pnm_j, self.host_j]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    fn add(&self, o: &EnergyCategories) -> EnergyCategories {
        let (a, b) = (self.values(), o.values());
        EnergyCategories {
            mac_pim_j: a[0] + b[0],
            act_pre_j: a[1] + b[1],
            rd_wr_j: a[2] + b[2],
            background_j: a[3] + b[3],
            controller_pnm_j: a[4] + b[4],
            host_j: a[5] + b[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub params: String,
    pub wall_s: f64,
    pub tokens: u64,
    pub active_devices: u32,
    pub idle_devices: u32,
    pub categories: EnergyCategories,
    pub total_j: f64,
    /// Category shares of the total, in `EnergyCategories::NAMES` order.
    pub fractions: [f64; 6],
    /// Shares of device energy, host excluded, for the first five categories.
    pub device_fractions: [f64; 5],
    /// Device energy (everything but the host) over wall time, per active device.
    pub avg_device_w: f64,
    /// Static power of one powered device.
    pub device_static_w: f64,
    /// All devices and the host.
    pub fleet_w: f64,
    pub tokens_per_j: f64,
    pub j_per_token: f64,
}

fn shares<const N: usize>(v: [f64; N]) -> [f64; N] {
    let t: f64 = v.iter().sum();
    if t > 0.0 {
        v.map(|x| x / t)
    } else {
        [0.0; N]
    }
}

/// Static power of one powered device: channel background, memory
/// controllers, scalar cores and controller logic.
pub fn device_static_w(e: &EnergyParams, arch: &ArchConfig) -> f64 {
    let ch = arch.channels_per_device as f64;
    ch * e.p_background_w_per_channel
        + ch / 2.0 * e.p_memctrl_w_per_two_channels
        + arch.n_scalar_cores as f64 * e.p_scalar_core_w
        + e.p_ctrl_logic_w
}

fn categories(a: &Activity, e: &EnergyParams, arch: &ArchConfig) -> EnergyCategories {
    let c = &a.counts;
    let s = a.wall_ns * 1e-9;
    let devices = (a.active_devices + a.idle_devices) as f64;
    let ch = arch.channels_per_device as f64;
    let controller_static = ch / 2.0 * e.p_memctrl_w_per_two_channels
        + arch.n_scalar_cores as f64 * e.p_scalar_core_w
        + e.p_ctrl_logic_w;
    EnergyCategories {
        mac_pim_j: (c.mac_bank_columns as f64 * e.e_mac_col_pj
            + c.ewmul_group_columns as f64 * e.e_ewmul_col_pj
            + c.af_bank_ops as f64 * e.e_af_pj)
            * PJ,
        act_pre_j: c.bank_activations as f64 * e.e_act_pre_pj * PJ,
        rd_wr_j: (c.rd_columns as f64 * e.e_rd_col_pj + c.wr_columns as f64 * e.e_wr_col_pj) * PJ,
        background_j: devices * ch * e.p_background_w_per_channel * s,
        controller_pnm_j: devices * controller_static * s
            + (c.pnm_slot_ops as f64 * e.e_pnm_slot_pj + c.cxl_bytes as f64 * e.e_cxl_pj_per_byte) * PJ,
        host_j: e.p_host_w * s,
    }
}

fn report(a: &Activity, e: &EnergyParams, cat: EnergyCategories, static_w: f64) -> EnergyReport {
    let wall_s = a.wall_ns * 1e-9;
    let total = cat.total();
    let device_j = total - cat.host_j;
    let v = cat.values();
    EnergyReport {
        params: e.name.clone(),
        wall_s,
        tokens: a.tokens,
        active_devices: a.active_devices,
        idle_devices: a.idle_devices,
        categories: cat,
        total_j: total,
        fractions: shares(v),
        device_fractions: shares([v[0], v[1], v[2], v[3], v[4]]),
        avg_device_w: if wall_s > 0.0 && a.active_devices > 0 {
            // Idle devices draw static power only.
            (device_j / wall_s - a.idle_devices as f64 * static_w) / a.active_devices as f64
        } else {
            0.0
        },
        device_static_w: static_w,
        fleet_w: if wall_s > 0.0 { total / wall_s } else { 0.0 },
        tokens_per_j: if total > 0.0 { a.tokens as f64 / total } else { 0.0 },
        j_per_token: if a.tokens > 0 { total / a.tokens as f64 } else { 0.0 },
    }
}

/// Energy of a run from its activity counts and wall time.
pub fn energy_from_activity(a: &Activity, e: &EnergyParams, arch: &ArchConfig) -> Result<EnergyReport, CostError> {
    require(a.wall_ns >= 0.0, "wall time", "finite and >= 0", a.wall_ns)?;
    Ok(report(a, e, categories(a, e, arch), device_static_w(e, arch)))
}

/// Reports of runs on the same fleet, back to back.
pub fn combine(a: &EnergyReport, b: &EnergyReport, e: &EnergyParams) -> EnergyReport {
    let act = Activity {
        counts: Default::default(),
        wall_ns: (a.wall_s + b.wall_s) * 1e9,
        active_devices: a.active_devices.max(b.active_devices),
        idle_devices: a.idle_devices.max(b.idle_devices),
        tokens: a.tokens + b.tokens,
    };
    report(&act, e, a.categories.add(&b.categories), a.device_static_w)
}

/// Energy of one MAC micro-op on one bank, per bit of the 256-bit column.
pub fn mac_pj_per_bit(e: &EnergyParams, arch: &ArchConfig) -> f64 {
    e.e_mac_col_pj / (arch.column_b as f64 * 8.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerCost {
    pub dies_per_wafer: f64,
    pub yield_rate: f64,
    pub die_usd: f64,
    pub packaging_usd: f64,
    pub nre_usd: f64,
    pub total_usd: f64,
}

/// Unit cost of one device controller: die, packaging and amortized NRE.
pub fn controller_unit_cost(c: &CostParams) -> Result<ControllerCost, CostError> {
    let a = c.controller_area_mm2;
    let d = c.wafer_diameter_mm;
    require(a > 0.0, "controller_area_mm2", "> 0", a)?;
    require(d > 0.0, "wafer_diameter_mm", "> 0", d)?;
    require(c.defect_density_per_mm2 >= 0.0, "defect_density_per_mm2", ">= 0", c.defect_density_per_mm2)?;
    require(c.production_volume > 0.0, "production_volume", "> 0", c.production_volume)?;
    let wafer_area = std::f64::consts::PI * (d / 2.0).powi(2);
    require(a < wafer_area, "controller_area_mm2", "smaller than the wafer", a)?;
    let dies_per_wafer = wafer_area / a - std::f64::consts::PI * d / (2.0 * a).sqrt();
    require(dies_per_wafer > 0.0, "dies per wafer", "> 0", dies_per_wafer)?;
    let yield_rate = (-a * c.defect_density_per_mm2).exp();
    require(yield_rate > 0.0, "yield", "> 0", yield_rate)?;
    let die_usd = c.wafer_cost_usd / (dies_per_wafer * yield_rate);
    let packaging_usd = c.packaging_fraction * die_usd;
    let nre_usd = c.nre_total_usd / c.production_volume;
    Ok(ControllerCost {
        dies_per_wafer,
        yield_rate,
        die_usd,
        packaging_usd,
        nre_usd,
        total_usd: die_usd + packaging_usd + nre_usd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareCost {
    pub host_usd: f64,
    pub pim_memory_usd: f64,
    pub controllers_usd: f64,
    pub switch_usd: f64,
    pub total_usd: f64,
}

/// Purchase cost of a host, `n_devices` devices and the switch. Memory
/// cost scales linearly from the reference fleet.
pub fn hardware_cost(c: &CostParams, n_devices: u32) -> Result<HardwareCost, CostError> {
    let unit = controller_unit_cost(c)?;
    let n = n_devices as f64;
    let pim_memory_usd = c.pim_memory_cost_usd * n / c.pim_memory_reference_devices.max(1) as f64;
    let controllers_usd = unit.total_usd * n;
    Ok(HardwareCost {
        host_usd: c.host_cost_usd,
        pim_memory_usd,
        controllers_usd,
        switch_usd: c.switch_cost_usd,
        total_usd: c.host_cost_usd + pim_memory_usd + controllers_usd + c.switch_cost_usd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TcoMode {
    Owned,
    Rental,
}

/// Cost per hour of running the fleet at `fleet_w` average power. Owned
/// amortizes all hardware; rental pays the host's rental price and amortizes
/// the rest.
pub fn tco_per_hour(c: &CostParams, hw: &HardwareCost, fleet_w: f64, mode: TcoMode) -> Result<f64, CostError> {
    require(c.amortization_years > 0.0, "amortization_years", "> 0", c.amortization_years)?;
    require(fleet_w >= 0.0, "fleet power", ">= 0", fleet_w)?;
    let hours = c.amortization_years * HOURS_PER_YEAR;
    let power = fleet_w / 1000.0 * c.electricity_usd_per_kwh;
    Ok(match mode {
        TcoMode::Owned => hw.total_usd / hours + power,
        TcoMode::Rental => c.host_rental_usd_per_hr + (hw.total_usd - hw.host_usd) / hours + power,
    })
}

pub fn tokens_per_dollar(tokens_per_s: f64, usd_per_hr: f64) -> f64 {
    if usd_per_hr > 0.0 {
        tokens_per_s * 3600.0 / usd_per_hr
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcoReport {
    pub controller: ControllerCost,
    pub hardware: HardwareCost,
    pub fleet_w: f64,
    pub owned_usd_per_hr: f64,
    pub rental_usd_per_hr: f64,
    pub tokens_per_s: f64,
    pub tokens_per_dollar_owned: f64,
    pub tokens_per_dollar_rental: f64,
}

pub fn tco_report(c: &CostParams, n_devices: u32, fleet_w: f64, tokens_per_s: f64) -> Result<TcoReport, CostError> {
    let hardware = hardware_cost(c, n_devices)?;
    let owned = tco_per_hour(c, &hardware, fleet_w, TcoMode::Owned)?;
    let rental = tco_per_hour(c, &hardware, fleet_w, TcoMode::Rental)?;
    Ok(TcoReport {
        controller: controller_unit_cost(c)?,
        hardware,
        fleet_w,
        owned_usd_per_hr: owned,
        rental_usd_per_hr: rental,
        tokens_per_s,
        tokens_per_dollar_owned: tokens_per_dollar(tokens_per_s, owned),
        tokens_per_dollar_rental: tokens_per_dollar(tokens_per_s, rental),
    })
}

/// One GPU baseline deployment, taken as configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuDeployment {
    pub model: String,
    pub n_gpus: u32,
    /// Devices of the fleet it is compared against.
    pub n_devices: u32,
    pub tokens_per_s: f64,
    pub power_w_per_gpu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuReference {
    pub name: String,
    pub gpu_cost_usd: f64,
    pub host_cost_usd: f64,
    pub host_power_w: f64,
    pub electricity_usd_per_kwh: f64,
    pub amortization_years: f64,
    pub deployments: Vec<GpuDeployment>,
}

impl GpuReference {
    pub fn deployment(&self, model: &str) -> Option<&GpuDeployment> {
        self.deployments.iter().find(|d| d.model == model)
    }

    /// Owned cost per hour of one deployment, by the same method as the fleet.
    pub fn owned_usd_per_hr(&self, d: &GpuDeployment) -> f64 {
        let hw = self.host_cost_usd + self.gpu_cost_usd * d.n_gpus as f64;
        let w = self.host_power_w + d.power_w_per_gpu * d.n_gpus as f64;
        hw / (self.amortization_years * HOURS_PER_YEAR) + w / 1000.0 * self.electricity_usd_per_kwh
    }

    /// Accelerator power of one deployment, host excluded.
    pub fn device_w(&self, d: &GpuDeployment) -> f64 {
        d.power_w_per_gpu * d.n_gpus as f64
    }
}

/// Fleet-side figures of one model for the GPU comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetPoint {
    pub model: String,
    pub tokens_per_s: f64,
    /// Device power, host excluded.
    pub device_w: f64,
    pub owned_usd_per_hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRatios {
    pub throughput: f64,
    pub tokens_per_joule: f64,
    pub tokens_per_dollar: f64,
    pub per_model: Vec<(String, [f64; 3])>,
}

fn geomean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for x in v {
        s += x.ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).exp()
    }
}

/// Geometric means over models of fleet/GPU throughput, tokens per joule
/// (accelerator power only) and tokens per dollar (owned cost).
pub fn relative_to_gpu(points: &[FleetPoint], gpu: &GpuReference) -> Result<RelativeRatios, String> {
    let mut per_model = Vec::new();
    for p in points {
        let d = gpu.deployment(&p.model).ok_or_else(|| format!("no GPU deployment for {}", p.model))?;
        let t = p.tokens_per_s / d.tokens_per_s;
        let j = (p.tokens_per_s / p.device_w) / (d.tokens_per_s / gpu.device_w(d));
        let usd = tokens_per_dollar(p.tokens_per_s, p.owned_usd_per_hr)
            / tokens_per_dollar(d.tokens_per_s, gpu.owned_usd_per_hr(d));
        per_model.push((p.model.clone(), [t, j, usd]));
    }
    Ok(RelativeRatios {
        throughput: geomean(per_model.iter().map(|r| r.1[0])),
        tokens_per_joule: geomean(per_model.iter().map(|r| r.1[1])),
        tokens_per_dollar: geomean(per_model.iter().map(|r| r.1[2])),
        per_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_fleet_draws_static_power_only() {
        let arch = ArchConfig::default();
        let e = EnergyParams::default();
        let a = Activity { wall_ns: 1e9, active_devices: 1, ..Default::default() };
        let r = energy_from_activity(&a, &e, &arch).unwrap();
        let stat = 32.0 * 0.083 + 16.0 * 0.3146 + 8.0 * 0.25 + 1.06;
        assert!((device_static_w(&e, &arch) - stat).abs() < 1e-12);
        assert!((r.total_j - r.categories.host_j - stat).abs() < 1e-9);
        assert_eq!(r.categories.mac_pim_j + r.categories.act_pre_j + r.categories.rd_wr_j, 0.0);
    }

    #[test]
    fn perfect_yield_gives_wafer_over_dies() {
        let c = CostParams { defect_density_per_mm2: 0.0, ..CostParams::default() };
        let u = controller_unit_cost(&c).unwrap();
        assert_eq!(u.yield_rate, 1.0);
        assert_eq!(u.die_usd, c.wafer_cost_usd / u.dies_per_wafer);
    }

    #[test]
    fn doubling_volume_halves_nre() {
        let c = CostParams::default();
        let d = CostParams { production_volume: 2.0 * c.production_volume, ..c.clone() };
        assert_eq!(controller_unit_cost(&d).unwrap().nre_usd * 2.0, controller_unit_cost(&c).unwrap().nre_usd);
    }

    #[test]
    fn free_electricity_is_pure_amortization() {
        let c = CostParams { electricity_usd_per_kwh: 0.0, ..CostParams::default() };
        let hw = hardware_cost(&c, 32).unwrap();
        let t = tco_per_hour(&c, &hw, 5000.0, TcoMode::Owned).unwrap();
        assert_eq!(t, hw.total_usd / (3.0 * 8760.0));
    }

    #[test]
    fn tokens_per_dollar_arithmetic() {
        assert!((tokens_per_dollar(1000.0, 0.73) - 4.93e6).abs() < 0.01e6);
        assert_eq!(tokens_per_dollar(0.0, 0.73), 0.0);
    }

    #[test]
    fn bad_cost_inputs_are_rejected() {
        let c = CostParams { controller_area_mm2: 1e6, ..CostParams::default() };
        assert!(controller_unit_cost(&c).is_err());
        let c = CostParams { defect_density_per_mm2: -1.0, ..CostParams::default() };
        assert!(controller_unit_cost(&c).is_err());
    }
}
