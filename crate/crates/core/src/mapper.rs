//! Placement of transformer blocks onto devices and channels, and the CXL
//! communication schedule that goes with each placement.

use crate::config::{block_footprint, ArchConfig, ConfigError, ModelSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pipeline,
    Tensor,
    Hybrid,
    PipelineDp,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pipeline => "PP",
            Strategy::Tensor => "TP",
            Strategy::Hybrid => "HYBRID",
            Strategy::PipelineDp => "PP+DP",
        }
    }
}

/// Contiguous channel range inside a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelRange {
    pub start: u32,
    pub count: u32,
}

impl ChannelRange {
    pub fn mask(&self) -> u32 {
        let ones = if self.count >= 32 { u32::MAX } else { (1u32 << self.count) - 1 };
        ones << self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub replica: u32,
    pub block: u32,
    /// Pipeline stage holding the block.
    pub stage: u32,
    /// Devices sharing the block; one device unless tensor-parallel.
    pub devices: Vec<u32>,
    /// Channels used on every device of `devices`.
    pub channels: ChannelRange,
    /// Device running attention, normalization and residual adds.
    pub master: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CommKind {
    Send,
    Broadcast,
    Multicast,
    Gather,
}

/// Where in the block schedule a transfer happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommSite {
    StageBoundary,
    Query,
    Key,
    Value,
    AttnOut,
    Ffn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: CommKind,
    pub sources: Vec<u32>,
    pub destinations: Vec<u32>,
    /// Logical bytes delivered: the vector the transfer assembles or distributes.
    pub payload_b: u64,
    /// Bytes each source puts on its link. Equals `payload_b` for sends,
    /// broadcasts and partial-sum gathers; a slice of it for concatenating gathers.
    pub wire_b_per_source: u64,
    pub replica: u32,
    pub block: u32,
    pub site: CommSite,
}

impl CommEvent {
    pub fn wire_bytes(&self) -> u64 {
        self.wire_b_per_source * self.sources.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub strategy: Strategy,
    pub n_devices: u32,
    pub tp_degree: u32,
    pub pp_stages: u32,
    pub dp_replicas: u32,
    pub devices_per_replica: u32,
    /// Largest number of blocks placed on one device (pipeline layouts).
    pub blocks_per_device: u32,
    pub batch_size: u32,
    pub context: usize,
    pub block_assignments: Vec<BlockAssignment>,
    pub idle_devices: Vec<u32>,
    pub comm_schedule: Vec<CommEvent>,
}

impl MappingPlan {
    pub fn active_devices(&self) -> u32 {
        self.n_devices - self.idle_devices.len() as u32
    }

    pub fn replica_assignments(&self, replica: u32) -> impl Iterator<Item = &BlockAssignment> {
        self.block_assignments.iter().filter(move |a| a.replica == replica)
    }

    /// Blocks of one replica grouped by device, in block order.
    pub fn blocks_on_device(&self, device: u32) -> Vec<&BlockAssignment> {
        self.block_assignments.iter().filter(|a| a.devices.contains(&device)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("infeasible mapping: {0}")]
    Infeasible(String),
}

fn vector_bytes(model: &ModelSpec, elems: usize) -> u64 {
    (elems * model.weight_bytes) as u64
}

/// Contiguous row ranges, remainder rows on the last part.
pub fn partition_rows(rows: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = rows / parts;
    (0..parts)
        .map(|p| {
            let len = if p + 1 == parts { rows - base * (parts - 1) } else { base };
            (p * base, len)
        })
        .collect()
}

/// Channel counts for `k` blocks sharing `channels`: an even split, with
/// leftover channels handed out one each in block order.
pub fn split_channels(channels: u32, k: u32) -> Vec<ChannelRange> {
    let base = channels / k;
    let extra = channels - base * k;
    let mut start = 0;
    (0..k)
        .map(|i| {
            let count = base + u32::from(i < extra);
            let r = ChannelRange { start, count };
            start += count;
            r
        })
        .collect()
}

/// Bytes one pipeline block holds: weights plus KV caches for `batch` prompts.
fn pipeline_block_bytes(model: &ModelSpec, context: usize, batch: u64) -> Result<u64, ConfigError> {
    let f = block_footprint(model, context)?;
    Ok(f.weights_b + f.kv_b * batch)
}

/// Whether `b` pipeline blocks fit on one device.
fn pipeline_fits(model: &ModelSpec, arch: &ArchConfig, context: usize, b: u32) -> Result<bool, ConfigError> {
    let ch = arch.channels_per_device as u32;
    if b == 0 || b > ch {
        return Ok(false);
    }
    let bytes = pipeline_block_bytes(model, context, model.n_layers as u64)?;
    let per_block_channels = (ch / b) as u64;
    Ok(bytes.div_ceil(per_block_channels) <= arch.channel_capacity_b())
}

/// Largest blocks-per-device count that still fits.
pub fn max_blocks_per_device(model: &ModelSpec, arch: &ArchConfig, context: usize) -> Result<u32, ConfigError> {
    let mut best = 0;
    for b in 1..=arch.channels_per_device as u32 {
        if pipeline_fits(model, arch, context, b)? {
            best = b;
        }
    }
    Ok(best)
}

/// Fewest devices that can hold one pipeline replica.
pub fn min_pipeline_devices(model: &ModelSpec, arch: &ArchConfig, context: usize) -> Result<u32, MapError> {
    let b = max_blocks_per_device(model, arch, context)?;
    if b == 0 {
        return Err(MapError::Capacity(format!("one block of {} does not fit on a device", model.name)));
    }
    Ok((model.n_layers as u32).div_ceil(b))
}

/// One pipeline replica with `b` blocks per device, starting at `first_device`.
fn pipeline_replica(
    model: &ModelSpec,
    arch: &ArchConfig,
    b: u32,
    first_device: u32,
    replica: u32,
) -> (Vec<BlockAssignment>, Vec<CommEvent>, u32) {
    let layers = model.n_layers as u32;
    let used = layers.div_ceil(b);
    let mut assigns = Vec::with_capacity(layers as usize);
    let mut events = Vec::new();
    for d in 0..used {
        let lo = d * b;
        let hi = (lo + b).min(layers);
        let ranges = split_channels(arch.channels_per_device as u32, hi - lo);
        let dev = first_device + d;
        for (k, blk) in (lo..hi).enumerate() {
            assigns.push(BlockAssignment {
                replica,
                block: blk,
                stage: blk,
                devices: vec![dev],
                channels: ranges[k],
                master: dev,
            });
        }
        if d + 1 < used {
            let payload = vector_bytes(model, model.d_model);
            events.push(CommEvent {
                kind: CommKind::Send,
                sources: vec![dev],
                destinations: vec![dev + 1],
                payload_b: payload,
                wire_b_per_source: payload,
                replica,
                block: hi - 1,
                site: CommSite::StageBoundary,
            });
        }
    }
    (assigns, events, used)
}

/// Pipeline plan with `b` blocks per device and `dp` replicas over `n_devices`.
pub fn pipeline_plan_with(
    model: &ModelSpec,
    arch: &ArchConfig,
    context: usize,
    n_devices: u32,
    b: u32,
    dp: u32,
) -> Result<MappingPlan, MapError> {
    if !pipeline_fits(model, arch, context, b)? {
        return Err(MapError::Capacity(format!(
            "{b} blocks of {} per device exceed device capacity at context {context}",
            model.name
        )));
    }
    let per_replica = (model.n_layers as u32).div_ceil(b);
    if per_replica * dp > n_devices || dp == 0 {
        return Err(MapError::Infeasible(format!(
            "{dp} replicas of {per_replica} devices do not fit in {n_devices} devices"
        )));
    }
    let mut block_assignments = Vec::new();
    let mut comm_schedule = Vec::new();
    for r in 0..dp {
        let (a, e, _) = pipeline_replica(model, arch, b, r * per_replica, r);
        block_assignments.extend(a);
        comm_schedule.extend(e);
    }
    Ok(MappingPlan {
        strategy: if dp > 1 { Strategy::PipelineDp } else { Strategy::Pipeline },
        n_devices,
        tp_degree: 1,
        pp_stages: model.n_layers as u32,
        dp_replicas: dp,
        devices_per_replica: per_replica,
        blocks_per_device: b.min(model.n_layers as u32),
        batch_size: model.n_layers as u32,
        context,
        block_assignments,
        idle_devices: (per_replica * dp..n_devices).collect(),
        comm_schedule,
    })
}

/// Pipeline-parallel plan: each block is a stage with one prompt in flight.
/// Blocks are spread as evenly as the device count allows.
pub fn plan_pipeline(model: &ModelSpec, arch: &ArchConfig, context: usize) -> Result<MappingPlan, MapError> {
    let n = arch.n_devices as u32;
    let b = (model.n_layers as u32).div_ceil(n);
    if !pipeline_fits(model, arch, context, b)? {
        let min = min_pipeline_devices(model, arch, context)?;
        return Err(MapError::Capacity(format!(
            "{} needs at least {min} devices at context {context}, have {n}",
            model.name
        )));
    }
    pipeline_plan_with(model, arch, context, n, b, 1)
}

/// Tensor-parallel events for one block on a device group.
fn tensor_block_events(model: &ModelSpec, group: &[u32], replica: u32, block: u32, kind: CommKind) -> Vec<CommEvent> {
    let tp = group.len();
    if tp <= 1 {
        return Vec::new();
    }
    let master = group[0];
    let others: Vec<u32> = group[1..].to_vec();
    let x = vector_bytes(model, model.d_model);
    let mut ev = Vec::new();
    let mut push_pair = |site: CommSite, out_elems: usize, partial_sums: bool| {
        ev.push(CommEvent {
            kind,
            sources: vec![master],
            destinations: others.clone(),
            payload_b: x,
            wire_b_per_source: x,
            replica,
            block,
            site,
        });
        let out = vector_bytes(model, out_elems);
        let slice = if partial_sums {
            out
        } else {
            // Devices own whole 16-element slots of the output.
            let (_, len) = partition_rows(out_elems.div_ceil(16), tp)[0];
            vector_bytes(model, 16 * len)
        };
        ev.push(CommEvent {
            kind: CommKind::Gather,
            sources: others.clone(),
            destinations: vec![master],
            payload_b: out,
            wire_b_per_source: slice,
            replica,
            block,
            site,
        });
    };
    push_pair(CommSite::Query, model.d_model, false);
    push_pair(CommSite::Key, model.kv_dim(), false);
    push_pair(CommSite::Value, model.kv_dim(), false);
    push_pair(CommSite::AttnOut, model.d_model, false);
    // Gate and up are row-partitioned so each device keeps its slice of the
    // hidden vector; down is split by columns and returns partial sums.
    push_pair(CommSite::Ffn, model.d_model, true);
    ev
}

fn check_tensor_capacity(
    model: &ModelSpec,
    arch: &ArchConfig,
    context: usize,
    blocks: u32,
    tp: u32,
    prompts: u64,
) -> Result<(), MapError> {
    let f = block_footprint(model, context)?;
    // The master also holds the KV caches.
    let master_bytes = blocks as u64 * (f.weights_b.div_ceil(tp as u64) + f.kv_b * prompts);
    let cap = arch.device_capacity_b();
    if master_bytes > cap {
        return Err(MapError::Capacity(format!(
            "master device needs {master_bytes} B for {blocks} blocks at TP={tp}, has {cap} B"
        )));
    }
    Ok(())
}

fn tensor_group_plan(
    model: &ModelSpec,
    arch: &ArchConfig,
    context: usize,
    n_devices: u32,
    tp: u32,
    pp: u32,
) -> Result<MappingPlan, MapError> {
    let layers = model.n_layers as u32;
    let per_stage = layers.div_ceil(pp);
    let stages = layers.div_ceil(per_stage);
    check_tensor_capacity(model, arch, context, per_stage, tp, pp as u64)?;
    let all = ChannelRange { start: 0, count: arch.channels_per_device as u32 };
    let fan_kind = if tp == n_devices { CommKind::Broadcast } else { CommKind::Multicast };
    let mut block_assignments = Vec::new();
    let mut comm_schedule = Vec::new();
    for s in 0..stages {
        let group: Vec<u32> = (s * tp..(s + 1) * tp).collect();
        let lo = s * per_stage;
        let hi = (lo + per_stage).min(layers);
        for blk in lo..hi {
            block_assignments.push(BlockAssignment {
                replica: 0,
                block: blk,
                stage: s,
                devices: group.clone(),
                channels: all,
                master: group[0],
            });
            comm_schedule.extend(tensor_block_events(model, &group, 0, blk, fan_kind));
        }
        if s + 1 < stages {
            let payload = vector_bytes(model, model.d_model);
            comm_schedule.push(CommEvent {
                kind: CommKind::Send,
                sources: vec![group[0]],
                destinations: vec![(s + 1) * tp],
                payload_b: payload,
                wire_b_per_source: payload,
                replica: 0,
                block: hi - 1,
                site: CommSite::StageBoundary,
            });
        }
    }
    Ok(MappingPlan {
        strategy: if pp == 1 { Strategy::Tensor } else { Strategy::Hybrid },
        n_devices,
        tp_degree: tp,
        pp_stages: stages,
        dp_replicas: 1,
        devices_per_replica: stages * tp,
        blocks_per_device: per_stage,
        batch_size: stages,
        context,
        block_assignments,
        idle_devices: (stages * tp..n_devices).collect(),
        comm_schedule,
    })
}

/// Tensor-parallel plan over the whole fleet with one prompt in flight.
pub fn plan_tensor(model: &ModelSpec, arch: &ArchConfig, context: usize) -> Result<MappingPlan, MapError> {
    let n = arch.n_devices as u32;
    tensor_group_plan(model, arch, context, n, n, 1)
}

/// `pp` pipeline stages of `tp` devices each. `tp = 1` reduces to the
/// pipeline plan on `pp` devices and `pp = 1` to the tensor plan on `tp`.
pub fn plan_hybrid(
    model: &ModelSpec,
    arch: &ArchConfig,
    tp: u32,
    pp: u32,
    context: usize,
) -> Result<MappingPlan, MapError> {
    let n = arch.n_devices as u32;
    if tp == 0 || pp == 0 || tp * pp > n {
        return Err(MapError::Infeasible(format!("tp={tp} x pp={pp} needs more than {n} devices")));
    }
    if pp > model.n_layers as u32 {
        return Err(MapError::Infeasible(format!("pp={pp} exceeds {} blocks", model.n_layers)));
    }
    if tp == 1 {
        let mut sub = arch.clone();
        sub.n_devices = pp as usize;
        let mut p = plan_pipeline(model, &sub, context)?;
        p.n_devices = n;
        p.idle_devices = (p.devices_per_replica..n).collect();
        return Ok(p);
    }
    tensor_group_plan(model, arch, context, n, tp, pp)
}

/// Throughput proxy used when no simulator is supplied: the slowest block
/// streams its weights at the internal bandwidth of its channels.
pub fn analytic_throughput(plan: &MappingPlan, model: &ModelSpec, arch: &ArchConfig) -> f64 {
    let f = match block_footprint(model, plan.context) {
        Ok(f) => f,
        Err(_) => return 0.0,
    };
    let bank_bw = arch.column_b as f64 * arch.pu_clock_ghz; // B/ns per bank
    let beat_ns = plan
        .replica_assignments(0)
        .map(|a| {
            let banks = (a.channels.count as usize * arch.banks_per_channel * a.devices.len()) as f64;
            f.weights_b as f64 / (banks * bank_bw)
        })
        .fold(0.0, f64::max);
    if beat_ns <= 0.0 {
        return 0.0;
    }
    let per_beat = if plan.tp_degree > 1 { plan.batch_size as f64 / plan.pp_stages as f64 } else { 1.0 };
    plan.dp_replicas as f64 * per_beat * 1e9 / beat_ns
}

/// Default relative tolerance within which a lower-latency candidate wins.
pub const DP_TIE_TOLERANCE: f64 = 0.02;

/// Best pipeline plan with data-parallel replicas on `n_devices`.
///
/// Every feasible blocks-per-device count is tried with as many replicas as
/// fit. The candidate with the highest `throughput` wins, except that a
/// candidate with fewer blocks per device (lower token latency) is preferred
/// when its throughput is within `tie_tolerance` of the best.
pub fn plan_scaled_with<F>(
    model: &ModelSpec,
    arch: &ArchConfig,
    n_devices: u32,
    context: usize,
    tie_tolerance: f64,
    mut throughput: F,
) -> Result<MappingPlan, MapError>
where
    F: FnMut(&MappingPlan) -> f64,
{
    let layers = model.n_layers as u32;
    let b_max = max_blocks_per_device(model, arch, context)?;
    let b_min = layers.div_ceil(n_devices.max(1));
    if b_max == 0 || b_min > b_max {
        return Err(MapError::Capacity(format!(
            "{} needs at least {} devices, have {n_devices}",
            model.name,
            min_pipeline_devices(model, arch, context)?
        )));
    }
    let mut candidates = Vec::new();
    let mut seen_devices = Vec::new();
    for b in b_min..=b_max.min(layers) {
        let per = layers.div_ceil(b);
        // A larger b that needs the same device count is never better.
        if seen_devices.contains(&per) {
            continue;
        }
        seen_devices.push(per);
        let dp = n_devices / per;
        let plan = pipeline_plan_with(model, arch, context, n_devices, b, dp)?;
        let t = throughput(&plan);
        candidates.push((b, t, plan));
    }
    let best = candidates.iter().map(|c| c.1).fold(f64::MIN, f64::max);
    let pick = candidates
        .into_iter()
        .find(|c| c.1 >= best * (1.0 - tie_tolerance))
        .expect("at least one candidate");
    Ok(pick.2)
}

pub fn plan_scaled(model: &ModelSpec, arch: &ArchConfig, n_devices: u32, context: usize) -> Result<MappingPlan, MapError> {
    plan_scaled_with(model, arch, n_devices, context, DP_TIE_TOLERANCE, |p| analytic_throughput(p, model, arch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommVolume {
    /// Logical bytes per block of replica 0, indexed by block.
    pub per_block_b: Vec<u64>,
    /// Logical bytes for one token through replica 0.
    pub per_token_b: u64,
    /// Bytes on the wire for one token through replica 0.
    pub per_token_wire_b: u64,
    pub stage_boundaries: u32,
}

impl CommVolume {
    pub fn mean_per_block_b(&self) -> f64 {
        if self.per_block_b.is_empty() {
            return 0.0;
        }
        self.per_block_b.iter().sum::<u64>() as f64 / self.per_block_b.len() as f64
    }
}

/// Per-block and per-token communication volume. Stage-boundary transfers
/// are attributed to the block that sends them.
pub fn comm_volume(plan: &MappingPlan, model: &ModelSpec) -> CommVolume {
    let mut per_block_b = vec![0u64; model.n_layers];
    let mut per_token_b = 0;
    let mut per_token_wire_b = 0;
    let mut stage_boundaries = 0;
    for e in plan.comm_schedule.iter().filter(|e| e.replica == 0) {
        per_block_b[e.block as usize] += e.payload_b;
        per_token_b += e.payload_b;
        per_token_wire_b += e.wire_bytes();
        if e.site == CommSite::StageBoundary {
            stage_boundaries += 1;
        }
    }
    CommVolume { per_block_b, per_token_b, per_token_wire_b, stage_boundaries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(name: &str, layers: usize, d: usize, heads: usize, kv: usize, ff: usize) -> ModelSpec {
        let mut m = ModelSpec {
            version: 1,
            name: name.into(),
            n_layers: layers,
            d_model: d,
            n_heads: heads,
            n_kv_heads: kv,
            d_head: 0,
            d_ff: ff,
            max_context: 4096,
            weight_bytes: 2,
            rms_eps: 1e-5,
            rope_theta: 1e4,
        };
        m.validate().unwrap();
        m
    }

    fn arch(n: usize) -> ArchConfig {
        ArchConfig { n_devices: n, ..ArchConfig::default() }
    }

    #[test]
    fn channel_split_hands_out_leftovers_in_order() {
        let r = split_channels(32, 3);
        assert_eq!(r.iter().map(|c| c.count).collect::<Vec<_>>(), vec![11, 11, 10]);
        assert_eq!(r[2].start, 22);
        assert_eq!(r[1].mask(), 0x3ff800);
    }

    #[test]
    fn row_partition_remainder_goes_last() {
        assert_eq!(partition_rows(10, 3), vec![(0, 3), (3, 3), (6, 4)]);
    }

    #[test]
    fn pipeline_7b_on_8_devices() {
        let m = model("7b", 32, 4096, 32, 32, 11008);
        let p = plan_pipeline(&m, &arch(8), 4096).unwrap();
        assert_eq!((p.blocks_per_device, p.active_devices(), p.batch_size), (4, 8, 32));
    }

    #[test]
    fn tensor_single_device_has_no_traffic() {
        let m = model("7b", 32, 4096, 32, 32, 11008);
        let p = plan_tensor(&m, &arch(1), 1024).unwrap();
        assert!(p.comm_schedule.is_empty());
        assert_eq!(comm_volume(&p, &m).per_token_b, 0);
    }

    fn llama70b() -> ModelSpec {
        model("70b", 80, 8192, 64, 8, 28672)
    }

    fn scaled(n: u32) -> MappingPlan {
        plan_scaled(&llama70b(), &arch(n as usize), n, 4096).unwrap()
    }

    #[test]
    fn scaled_16_devices_holds_five_blocks_each() {
        let p = scaled(16);
        assert_eq!((p.blocks_per_device, p.dp_replicas, p.active_devices(), p.batch_size), (5, 1, 16, 80));
    }

    #[test]
    fn scaled_44_devices_keeps_the_40_device_distribution() {
        let p = scaled(44);
        let q = scaled(40);
        assert_eq!((p.blocks_per_device, p.dp_replicas, p.idle_devices.len()), (2, 1, 4));
        assert_eq!(p.block_assignments, q.block_assignments);
    }

    #[test]
    fn scaled_replicas_are_copies_on_disjoint_devices() {
        let p = pipeline_plan_with(&llama70b(), &arch(80), 4096, 80, 2, 2).unwrap();
        let r0: Vec<_> = p.replica_assignments(0).collect();
        let r1: Vec<_> = p.replica_assignments(1).collect();
        assert_eq!(r0.len(), r1.len());
        for (a, b) in r0.iter().zip(&r1) {
            assert_eq!(b.devices, a.devices.iter().map(|d| d + 40).collect::<Vec<_>>());
            assert_eq!((a.block, a.channels), (b.block, b.channels));
        }
        assert_eq!(analytic_throughput(&p, &llama70b(), &arch(80)), 2.0 * analytic_throughput(&scaled(40), &llama70b(), &arch(40)));
    }

    #[test]
    fn scaled_picks_the_best_estimate() {
        // An estimator that only counts replicas prefers the smallest replica.
        let p = plan_scaled_with(&llama70b(), &arch(64), 64, 4096, 0.0, |p| p.dp_replicas as f64).unwrap();
        assert_eq!((p.blocks_per_device, p.dp_replicas), (5, 4));
    }
}
