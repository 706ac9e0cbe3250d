//! Model, architecture, timing, energy and cost parameters.
//!
//! Every record deserializes from JSON with unit-suffixed field names and
//! falls back to the evaluated system configuration for any missing field.
//! Overrides of the form `section.field=value` are applied to the raw JSON
//! before validation so that they go through the same checks as file input.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: parse error at line {line}, column {column}: {msg}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("invalid value for `{field}`: {msg}")]
    Invariant { field: String, msg: String },
    #[error("bad override `{0}` (expected key=value)")]
    Override(String),
    #[error("context {context} exceeds max_context {max}")]
    ContextOverflow { context: usize, max: usize },
}

fn invariant(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invariant {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub version: u32,
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    /// Optional in files; always equal to `d_model / n_heads` after validation.
    #[serde(default)]
    pub d_head: usize,
    pub d_ff: usize,
    pub max_context: usize,
    #[serde(default = "default_weight_bytes")]
    pub weight_bytes: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
}

fn default_weight_bytes() -> usize {
    2
}
fn default_rms_eps() -> f64 {
    1e-5
}
fn default_rope_theta() -> f64 {
    10000.0
}

impl ModelSpec {
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
            ("weight_bytes", self.weight_bytes),
        ] {
            if v == 0 {
                return Err(invariant(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invariant(
                "d_model",
                format!(
                    "d_model ({}) must be divisible by n_heads ({})",
                    self.d_model, self.n_heads
                ),
            ));
        }
        let d_head = self.d_model / self.n_heads;
        if self.d_head != 0 && self.d_head != d_head {
            return Err(invariant(
                "d_head",
                format!("d_head ({}) must equal d_model / n_heads ({d_head})", self.d_head),
            ));
        }
        self.d_head = d_head;
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(invariant(
                "n_kv_heads",
                format!(
                    "n_heads ({}) must be a multiple of n_kv_heads ({})",
                    self.n_heads, self.n_kv_heads
                ),
            ));
        }
        if self.d_head % 2 != 0 {
            return Err(invariant("d_head", "rotary embedding needs an even head dimension"));
        }
        if !(self.rms_eps > 0.0) {
            return Err(invariant("rms_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn params_per_block(&self) -> u64 {
        let d = self.d_model as u64;
        let kv = self.kv_dim() as u64;
        let ff = self.d_ff as u64;
        2 * d * d + 2 * d * kv + 3 * d * ff
    }
}

/// Weight and KV-cache bytes of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub weights_b: u64,
    pub kv_b: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.weights_b + self.kv_b
    }
}

/// Bytes per block for one prompt at `context` tokens.
pub fn block_footprint(model: &ModelSpec, context: usize) -> Result<Footprint, ConfigError> {
    if context > model.max_context {
        return Err(ConfigError::ContextOverflow {
            context,
            max: model.max_context,
        });
    }
    let p = model.weight_bytes as u64;
    Ok(Footprint {
        weights_b: model.params_per_block() * p,
        kv_b: 2 * context as u64 * model.kv_dim() as u64 * p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub t_rcdrd_ns: f64,
    pub t_ras_ns: f64,
    pub t_cl_ns: f64,
    pub t_rcdwr_ns: f64,
    pub t_ccds_ns: f64,
    pub t_rp_ns: f64,
    /// Refresh is off unless enabled; the parameters are for sensitivity runs.
    pub refresh_enabled: bool,
    pub t_refi_ns: f64,
    pub t_rfc_ns: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            t_rcdrd_ns: 18.0,
            t_ras_ns: 27.0,
            t_cl_ns: 25.0,
            t_rcdwr_ns: 14.0,
            t_ccds_ns: 1.0,
            t_rp_ns: 16.0,
            refresh_enabled: false,
            t_refi_ns: 1900.0,
            t_rfc_ns: 210.0,
        }
    }
}

impl TimingParams {
    fn validate(&self) -> Result<(), ConfigError> {
        for (f, v) in [
            ("timing.t_rcdrd_ns", self.t_rcdrd_ns),
            ("timing.t_ras_ns", self.t_ras_ns),
            ("timing.t_cl_ns", self.t_cl_ns),
            ("timing.t_rcdwr_ns", self.t_rcdwr_ns),
            ("timing.t_ccds_ns", self.t_ccds_ns),
            ("timing.t_rp_ns", self.t_rp_ns),
            ("timing.t_refi_ns", self.t_refi_ns),
            ("timing.t_rfc_ns", self.t_rfc_ns),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invariant(f, "must be a finite value >= 0"));
            }
        }
        if self.t_ras_ns < self.t_rcdrd_ns {
            return Err(invariant("timing.t_ras_ns", "must be >= t_rcdrd_ns"));
        }
        if self.refresh_enabled && self.t_rfc_ns >= self.t_refi_ns {
            return Err(invariant("timing.t_rfc_ns", "must be < t_refi_ns"));
        }
        Ok(())
    }
}

/// Latencies of the near-memory units and the device front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PnmParams {
    /// Front-end cost of decoding and dispatching one instruction.
    pub decode_ns: f64,
    /// Pipeline fill of the accumulator, reduction and exponent units, in PNM cycles.
    pub pipeline_fill_cycles: u32,
    pub riscv_recip_cycles: u32,
    pub riscv_rsqrt_cycles: u32,
    /// Complex pack/unpack cost per element pair.
    pub riscv_pack_cycles_per_pair: u32,
    /// Scalar scan cost (max search, lane gather) per element.
    pub riscv_scan_cycles_per_elem: u32,
    /// Every instruction waits for its predecessor to complete.
    pub strict_serial: bool,
}

impl Default for PnmParams {
    fn default() -> Self {
        PnmParams {
            decode_ns: 0.5,
            pipeline_fill_cycles: 4,
            riscv_recip_cycles: 20,
            riscv_rsqrt_cycles: 24,
            riscv_pack_cycles_per_pair: 2,
            riscv_scan_cycles_per_elem: 1,
            strict_serial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CxlParams {
    /// Raw per-direction bandwidth of one device link (PCIe 6.0 x4).
    pub link_bandwidth_raw_bps: f64,
    pub protocol_efficiency: f64,
    pub device_link_lanes: u32,
    pub host_link_lanes: u32,
    pub base_latency_ns: f64,
    pub multicast_latency_factor: f64,
    pub multicast_bandwidth_factor: f64,
}

impl Default for CxlParams {
    fn default() -> Self {
        CxlParams {
            link_bandwidth_raw_bps: 32e9,
            protocol_efficiency: 0.9,
            device_link_lanes: 4,
            host_link_lanes: 16,
            base_latency_ns: 400.0,
            multicast_latency_factor: 2.0,
            multicast_bandwidth_factor: 0.5,
        }
    }
}

impl CxlParams {
    /// Effective link bandwidth in bytes per nanosecond.
    pub fn effective_b_per_ns(&self) -> f64 {
        self.link_bandwidth_raw_bps * self.protocol_efficiency / 1e9
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.multicast_latency_factor > 0.0) {
            return Err(invariant("cxl.multicast_latency_factor", "must be > 0"));
        }
        if !(self.multicast_bandwidth_factor > 0.0) {
            return Err(invariant("cxl.multicast_bandwidth_factor", "must be > 0"));
        }
        if !(self.protocol_efficiency > 0.0 && self.protocol_efficiency <= 1.0) {
            return Err(invariant("cxl.protocol_efficiency", "must be in (0, 1]"));
        }
        if !(self.link_bandwidth_raw_bps >= 0.0) || !(self.base_latency_ns >= 0.0) {
            return Err(invariant("cxl", "bandwidth and latency must be >= 0"));
        }
        Ok(())
    }
}

/// Per-event DRAM energies and static powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub name: String,
    /// One MAC micro-op on one bank (one 256-bit column).
    pub e_mac_col_pj: f64,
    /// One element-wise multiply micro-op on one bank group (two reads, one write).
    pub e_ewmul_col_pj: f64,
    /// One activation-function evaluation on one bank PU.
    pub e_af_pj: f64,
    /// One activate + precharge pair on one bank.
    pub e_act_pre_pj: f64,
    pub e_rd_col_pj: f64,
    pub e_wr_col_pj: f64,
    /// One PNM unit operation on a 256-bit slot.
    pub e_pnm_slot_pj: f64,
    pub e_cxl_pj_per_byte: f64,
    pub p_background_w_per_channel: f64,
    pub p_memctrl_w_per_two_channels: f64,
    pub p_scalar_core_w: f64,
    pub p_ctrl_logic_w: f64,
    pub p_host_w: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        // Matches params/energy/c-die-default.json.
        EnergyParams {
            name: "c-die-default".into(),
            e_mac_col_pj: 157.55,
            e_ewmul_col_pj: 212.62,
            e_af_pj: 52.52,
            e_act_pre_pj: 5455.5,
            e_rd_col_pj: 52.52,
            e_wr_col_pj: 55.08,
            e_pnm_slot_pj: 4.0,
            e_cxl_pj_per_byte: 40.0,
            p_background_w_per_channel: 0.083,
            p_memctrl_w_per_two_channels: 0.3146,
            p_scalar_core_w: 0.25,
            p_ctrl_logic_w: 1.06,
            p_host_w: 270.0,
        }
    }
}

impl EnergyParams {
    fn validate(&self) -> Result<(), ConfigError> {
        for (f, v) in [
            ("energy.e_mac_col_pj", self.e_mac_col_pj),
            ("energy.e_ewmul_col_pj", self.e_ewmul_col_pj),
            ("energy.e_af_pj", self.e_af_pj),
            ("energy.e_act_pre_pj", self.e_act_pre_pj),
            ("energy.e_rd_col_pj", self.e_rd_col_pj),
            ("energy.e_wr_col_pj", self.e_wr_col_pj),
            ("energy.e_pnm_slot_pj", self.e_pnm_slot_pj),
            ("energy.e_cxl_pj_per_byte", self.e_cxl_pj_per_byte),
            ("energy.p_background_w_per_channel", self.p_background_w_per_channel),
            ("energy.p_memctrl_w_per_two_channels", self.p_memctrl_w_per_two_channels),
            ("energy.p_scalar_core_w", self.p_scalar_core_w),
            ("energy.p_ctrl_logic_w", self.p_ctrl_logic_w),
            ("energy.p_host_w", self.p_host_w),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invariant(f, "must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub wafer_cost_usd: f64,
    pub wafer_diameter_mm: f64,
    pub defect_density_per_mm2: f64,
    pub controller_area_mm2: f64,
    pub packaging_fraction: f64,
    pub nre_total_usd: f64,
    pub production_volume: f64,
    /// PIM memory cost of the reference fleet, scaled per device.
    pub pim_memory_cost_usd: f64,
    pub pim_memory_reference_devices: u32,
    pub switch_cost_usd: f64,
    pub host_cost_usd: f64,
    pub host_rental_usd_per_hr: f64,
    pub electricity_usd_per_kwh: f64,
    pub amortization_years: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            wafer_cost_usd: 9346.0,
            wafer_diameter_mm: 300.0,
            defect_density_per_mm2: 0.0015,
            controller_area_mm2: 19.0,
            packaging_fraction: 0.29,
            nre_total_usd: 25_318_000.0,
            production_volume: 3.0e6,
            pim_memory_cost_usd: 11873.0,
            pim_memory_reference_devices: 32,
            switch_cost_usd: 490.0,
            host_cost_usd: 2128.0,
            host_rental_usd_per_hr: 0.40,
            electricity_usd_per_kwh: 0.139,
            amortization_years: 3.0,
        }
    }
}

impl CostParams {
    fn validate(&self) -> Result<(), ConfigError> {
        for (f, v) in [
            ("cost.wafer_cost_usd", self.wafer_cost_usd),
            ("cost.wafer_diameter_mm", self.wafer_diameter_mm),
            ("cost.controller_area_mm2", self.controller_area_mm2),
            ("cost.production_volume", self.production_volume),
            ("cost.amortization_years", self.amortization_years),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invariant(f, "must be positive"));
            }
        }
        for (f, v) in [
            ("cost.defect_density_per_mm2", self.defect_density_per_mm2),
            ("cost.packaging_fraction", self.packaging_fraction),
            ("cost.nre_total_usd", self.nre_total_usd),
            ("cost.pim_memory_cost_usd", self.pim_memory_cost_usd),
            ("cost.switch_cost_usd", self.switch_cost_usd),
            ("cost.host_cost_usd", self.host_cost_usd),
            ("cost.host_rental_usd_per_hr", self.host_rental_usd_per_hr),
            ("cost.electricity_usd_per_kwh", self.electricity_usd_per_kwh),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invariant(f, "must be >= 0"));
            }
        }
        if self.pim_memory_reference_devices == 0 {
            return Err(invariant("cost.pim_memory_reference_devices", "must be positive"));
        }
        Ok(())
    }
}

/// How co-resident pipeline stages on one device share it in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOverlap {
    /// Stages on disjoint channel sets run at the same time.
    Concurrent,
    /// Stages on one device run one after another.
    Serial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub version: u32,
    pub n_devices: usize,
    pub channels_per_device: usize,
    pub banks_per_channel: usize,
    pub bank_groups: usize,
    pub bank_capacity_b: u64,
    pub row_buffer_b: usize,
    pub column_b: usize,
    pub global_buffer_b: usize,
    pub shared_buffer_b: usize,
    pub instruction_buffer_b: u64,
    pub instruction_b: u64,
    pub acc_registers: usize,
    pub pu_clock_ghz: f64,
    pub pnm_clock_ghz: f64,
    pub n_accumulators: usize,
    pub n_reduction_trees: usize,
    pub n_exp_units: usize,
    pub n_scalar_cores: usize,
    pub stage_overlap: StageOverlap,
    pub timing: TimingParams,
    pub pnm: PnmParams,
    pub cxl: CxlParams,
    pub energy: EnergyParams,
    pub cost: CostParams,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            version: 1,
            n_devices: 32,
            channels_per_device: 32,
            banks_per_channel: 16,
            bank_groups: 4,
            bank_capacity_b: 32 << 20,
            row_buffer_b: 2048,
            column_b: 32,
            global_buffer_b: 2048,
            shared_buffer_b: 64 << 10,
            instruction_buffer_b: 2 << 20,
            instruction_b: 8,
            acc_registers: 32,
            pu_clock_ghz: 1.0,
            pnm_clock_ghz: 2.0,
            n_accumulators: 32,
            n_reduction_trees: 32,
            n_exp_units: 32,
            n_scalar_cores: 8,
            stage_overlap: StageOverlap::Concurrent,
            timing: TimingParams::default(),
            pnm: PnmParams::default(),
            cxl: CxlParams::default(),
            energy: EnergyParams::default(),
            cost: CostParams::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (f, v) in [
            ("n_devices", self.n_devices),
            ("channels_per_device", self.channels_per_device),
            ("banks_per_channel", self.banks_per_channel),
            ("bank_groups", self.bank_groups),
            ("row_buffer_b", self.row_buffer_b),
            ("column_b", self.column_b),
            ("global_buffer_b", self.global_buffer_b),
            ("shared_buffer_b", self.shared_buffer_b),
            ("acc_registers", self.acc_registers),
            ("n_accumulators", self.n_accumulators),
            ("n_reduction_trees", self.n_reduction_trees),
            ("n_exp_units", self.n_exp_units),
            ("n_scalar_cores", self.n_scalar_cores),
        ] {
            if v == 0 {
                return Err(invariant(f, "must be positive"));
            }
        }
        if self.bank_capacity_b == 0 || self.instruction_buffer_b == 0 || self.instruction_b == 0 {
            return Err(invariant("bank_capacity_b", "capacities must be positive"));
        }
        if !(self.pu_clock_ghz > 0.0) || !(self.pnm_clock_ghz > 0.0) {
            return Err(invariant("pnm_clock_ghz", "clocks must be positive"));
        }
        if self.channels_per_device > 32 {
            return Err(invariant("channels_per_device", "a 32-bit channel mask limits this to 32"));
        }
        if self.banks_per_channel != 16 || self.column_b != 32 {
            return Err(invariant(
                "banks_per_channel",
                "the PU datapath is fixed at 16 banks of 256-bit columns",
            ));
        }
        if self.banks_per_channel % self.bank_groups != 0 || self.banks_per_channel / self.bank_groups < 3 {
            return Err(invariant("bank_groups", "each bank group needs at least three banks"));
        }
        if self.row_buffer_b % self.column_b != 0 || self.bank_capacity_b % self.row_buffer_b as u64 != 0 {
            return Err(invariant("row_buffer_b", "row and bank sizes must be whole columns and rows"));
        }
        if self.global_buffer_b % self.column_b != 0 || self.shared_buffer_b % self.column_b != 0 {
            return Err(invariant("global_buffer_b", "buffers must hold whole 256-bit slots"));
        }
        if self.shared_buffer_b / self.column_b > 1 << 16 {
            return Err(invariant("shared_buffer_b", "slot index must fit in 16 bits"));
        }
        self.timing.validate()?;
        self.cxl.validate()?;
        self.energy.validate()?;
        self.cost.validate()?;
        if !(self.pnm.decode_ns >= 0.0) {
            return Err(invariant("pnm.decode_ns", "must be >= 0"));
        }
        Ok(())
    }

    pub fn columns_per_row(&self) -> usize {
        self.row_buffer_b / self.column_b
    }
    pub fn rows_per_bank(&self) -> usize {
        (self.bank_capacity_b / self.row_buffer_b as u64) as usize
    }
    pub fn gb_slots(&self) -> usize {
        self.global_buffer_b / self.column_b
    }
    pub fn sb_slots(&self) -> usize {
        self.shared_buffer_b / self.column_b
    }
    /// BF16 elements per 256-bit column.
    pub fn lanes(&self) -> usize {
        self.column_b / 2
    }
    pub fn banks_per_group(&self) -> usize {
        self.banks_per_channel / self.bank_groups
    }
    pub fn channel_capacity_b(&self) -> u64 {
        self.banks_per_channel as u64 * self.bank_capacity_b
    }
    pub fn device_capacity_b(&self) -> u64 {
        self.channels_per_device as u64 * self.channel_capacity_b()
    }
    pub fn fleet_capacity_b(&self) -> u64 {
        self.n_devices as u64 * self.device_capacity_b()
    }
    /// Per-PU throughput: 16 multipliers, 2 FLOPs each, per PU clock.
    pub fn pu_gflops(&self) -> f64 {
        self.lanes() as f64 * 2.0 * self.pu_clock_ghz
    }
    pub fn fleet_pim_tflops(&self) -> f64 {
        (self.n_devices * self.channels_per_device * self.banks_per_channel) as f64 * self.pu_gflops() / 1e3
    }
    /// Each bank delivers one column per PU cycle.
    pub fn fleet_internal_bandwidth_tb_s(&self) -> f64 {
        (self.n_devices * self.channels_per_device * self.banks_per_channel) as f64
            * self.column_b as f64
            * self.pu_clock_ghz
            / 1e3
    }
    /// PNM throughput from unit counts: one 16-lane slot per unit per cycle,
    /// counting accumulators, reduction trees and exponent units.
    pub fn device_pnm_gflops(&self) -> f64 {
        let units = (self.n_accumulators + self.n_reduction_trees + self.n_exp_units) as f64;
        units * self.lanes() as f64 * self.pnm_clock_ghz
    }
    pub fn pnm_cycle_ns(&self) -> f64 {
        1.0 / self.pnm_clock_ghz
    }
}

/// Parse JSON text, mapping serde errors to line/column diagnostics.
pub fn parse_json(text: &str, origin: &str) -> Result<Value, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        origin: origin.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

fn from_value<T: for<'de> Deserialize<'de>>(v: Value, origin: &str) -> Result<T, ConfigError> {
    serde_json::from_value(v).map_err(|e| ConfigError::Parse {
        origin: origin.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Set `dotted.key` in a JSON object tree. The value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn model_from_value(v: Value, origin: &str) -> Result<ModelSpec, ConfigError> {
    let mut m: ModelSpec = from_value(v, origin)?;
    m.validate()?;
    Ok(m)
}

pub fn arch_from_value(v: Value, origin: &str) -> Result<ArchConfig, ConfigError> {
    let a: ArchConfig = from_value(v, origin)?;
    a.validate()?;
    Ok(a)
}

pub fn load_model(path: &Path) -> Result<ModelSpec, ConfigError> {
    let origin = path.display().to_string();
    model_from_value(parse_json(&read(path)?, &origin)?, &origin)
}

/// Load an architecture file, applying `key=value` overrides first.
pub fn load_arch(path: Option<&Path>, overrides: &[String]) -> Result<ArchConfig, ConfigError> {
    let (mut v, origin) = match path {
        Some(p) => {
            let origin = p.display().to_string();
            (parse_json(&read(p)?, &origin)?, origin)
        }
        None => (Value::Object(Default::default()), "<defaults>".to_string()),
    };
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    arch_from_value(v, &origin)
}

/// Load a standalone energy parameter set.
pub fn load_energy(path: &Path) -> Result<EnergyParams, ConfigError> {
    let origin = path.display().to_string();
    let e: EnergyParams = from_value(parse_json(&read(path)?, &origin)?, &origin)?;
    e.validate()?;
    Ok(e)
}

/// Load a standalone cost parameter set.
pub fn load_cost(path: &Path) -> Result<CostParams, ConfigError> {
    let origin = path.display().to_string();
    let c: CostParams = from_value(parse_json(&read(path)?, &origin)?, &origin)?;
    c.validate()?;
    Ok(c)
}

/// Deserialize any JSON file, with line/column diagnostics.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let origin = path.display().to_string();
    from_value(parse_json(&read(path)?, &origin)?, &origin)
}

/// Load a combined file `{"model": {...}, "arch": {...}}`. A missing or empty
/// `arch` section yields the default architecture.
pub fn load_config(path: &Path) -> Result<(ModelSpec, ArchConfig), ConfigError> {
    let origin = path.display().to_string();
    let mut v = parse_json(&read(path)?, &origin)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| invariant("<root>", "expected a JSON object"))?;
    let model = obj.remove("model").ok_or_else(|| invariant("model", "missing section"))?;
    let arch = obj.remove("arch").unwrap_or(Value::Object(Default::default()));
    if let Some(k) = obj.keys().next() {
        return Err(invariant(k, "unknown top-level section"));
    }
    Ok((model_from_value(model, &origin)?, arch_from_value(arch, &origin)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn llama70b() -> ModelSpec {
        let mut m = ModelSpec {
            version: 1,
            name: "llama2-70b".into(),
            n_layers: 80,
            d_model: 8192,
            n_heads: 64,
            n_kv_heads: 8,
            d_head: 0,
            d_ff: 28672,
            max_context: 4096,
            weight_bytes: 2,
            rms_eps: 1e-5,
            rope_theta: 10000.0,
        };
        m.validate().unwrap();
        m
    }

    #[test]
    fn derived_capacities() {
        let a = ArchConfig::default();
        assert_eq!(a.channel_capacity_b(), 512 << 20);
        assert_eq!(a.device_capacity_b(), 16 << 30);
        assert_eq!(a.fleet_capacity_b(), 512 << 30);
        assert_eq!(a.columns_per_row(), 64);
        assert_eq!(a.rows_per_bank(), 16384);
        assert_eq!(a.gb_slots(), 64);
        assert_eq!(a.sb_slots(), 2048);
        assert!((a.fleet_pim_tflops() - 524.288).abs() < 1e-9);
    }

    #[test]
    fn footprint_70b() {
        let m = llama70b();
        let f = block_footprint(&m, 4096).unwrap();
        // 2*8192^2 + 2*8192*1024 + 3*8192*28672 parameters, two bytes each
        assert_eq!(f.weights_b, (134_217_728u64 + 16_777_216 + 704_643_072) * 2);
        assert_eq!(f.kv_b, 2 * 4096 * 128 * 8 * 2);
        assert_eq!(block_footprint(&m, 0).unwrap().kv_b, 0);
        assert!(block_footprint(&m, 4097).is_err());
    }

    #[test]
    fn divisibility_error_names_field() {
        let v = serde_json::json!({"name":"bad","n_layers":1,"d_model":100,"n_heads":7,
            "n_kv_heads":1,"d_ff":4,"max_context":8});
        let e = model_from_value(v, "t").unwrap_err().to_string();
        assert!(e.contains("d_model") && e.contains("n_heads"), "{e}");
    }

    #[test]
    fn empty_arch_is_default() {
        let a = arch_from_value(serde_json::json!({}), "t").unwrap();
        assert_eq!(a, ArchConfig::default());
    }

    #[test]
    fn override_nested_field() {
        let mut v = serde_json::json!({});
        apply_override(&mut v, "cxl.base_latency_ns=500").unwrap();
        apply_override(&mut v, "n_devices=16").unwrap();
        let a = arch_from_value(v, "t").unwrap();
        assert_eq!(a.cxl.base_latency_ns, 500.0);
        assert_eq!(a.n_devices, 16);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let e = arch_from_value(serde_json::json!({"n_devics": 3}), "t").unwrap_err();
        assert!(e.to_string().contains("n_devics"));
    }
}
