//! Counters, energy accounting, roofline analysis, and report rendering.
//!
//! Counters are add-only, so the monotonicity invariant holds by
//! construction. Byte counters record logical payload bytes (vector length
//! times element width); bus padding to the 64-byte burst granularity is a
//! timing concern and never appears here. Energy is a pure function of the
//! counters and elapsed time, so a saved report can be re-derived exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cae::CaeConfig;
use crate::model::opstream::Direction;
use crate::timing::TimingParams;
use crate::{Error, Result};

// ── Traffic categories ──────────────────────────────────────────────────

/// What a byte transfer was for, independent of where it travelled.
/// Locality (DIMM-local rank access vs the shared channel) is tracked by
/// which counter map the bytes land in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Category {
    /// Source vectors streamed into an aggregation.
    ReduceSrcRead,
    /// Per-DIMM partial aggregates crossing the channel to the merge units.
    PartialReadout,
    /// Dense-operand rows read by the CAE (combination inputs, retained
    /// forward tensors consumed by the backward pass).
    UpdateInRead,
    /// Combination results written back to vertex storage.
    UpdateOutWrite,
    /// Combination-first staged vectors written ahead of their aggregation.
    StagingWrite,
    /// Forward tensors retained for the backward pass.
    RetainWrite,
    /// Loss and activation bookkeeping traffic.
    OthersIo,
}

pub const ALL_CATEGORIES: [Category; 7] = [
    Category::ReduceSrcRead,
    Category::PartialReadout,
    Category::UpdateInRead,
    Category::UpdateOutWrite,
    Category::StagingWrite,
    Category::RetainWrite,
    Category::OthersIo,
];

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::ReduceSrcRead => "reduce_src_read",
            Category::PartialReadout => "partial_readout",
            Category::UpdateInRead => "update_in_read",
            Category::UpdateOutWrite => "update_out_write",
            Category::StagingWrite => "staging_write",
            Category::RetainWrite => "retain_write",
            Category::OthersIo => "others_io",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        ALL_CATEGORIES
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unknown traffic category {s:?}"),
            })
    }
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "fwd",
        Direction::Backward => "bwd",
    }
}

fn parse_direction(s: &str) -> Result<Direction> {
    match s {
        "fwd" => Ok(Direction::Forward),
        "bwd" => Ok(Direction::Backward),
        _ => Err(Error::Parse {
            line: 0,
            msg: format!("unknown direction {s:?}"),
        }),
    }
}

/// (layer, direction, category) key for the per-phase byte maps.
pub type PhaseKey = (u8, Direction, Category);

// ── Counters ────────────────────────────────────────────────────────────

/// Busy time per modeled component, in ticks of the shared event clock.
/// NME entries are summed over all NMEs; the energy model multiplies the
/// per-engine power by this aggregate busy time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BusyTicks {
    pub nme_eu: u64,
    pub nme_buffer: u64,
    pub gemm: u64,
    pub vpu: u64,
    pub scratchpad: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StallCounts {
    /// NME result FIFO full when a reduction wanted to retire.
    pub nme_fifo_full: u64,
    /// Window scheduler blocked waiting for an in-order commit.
    pub window_blocked: u64,
    /// DRAM command queue full when a request wanted to issue.
    pub queue_full: u64,
}

/// Add-only traffic and work counters for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    pub off_chip_read_bytes: u64,
    pub off_chip_write_bytes: u64,
    pub local_read_bytes: u64,
    pub local_write_bytes: u64,
    /// Off-chip traffic per channel.
    pub channel_read_bytes: Vec<u64>,
    pub channel_write_bytes: Vec<u64>,
    /// DIMM-local traffic, indexed channel*dimms_per_channel + dimm.
    pub dimm_local_read_bytes: Vec<u64>,
    pub dimm_local_write_bytes: Vec<u64>,
    /// Logical payload bytes per (layer, direction, category), split by
    /// whether the transfer crossed the channel or stayed DIMM-local.
    pub off_chip_by_phase: BTreeMap<PhaseKey, u64>,
    pub local_by_phase: BTreeMap<PhaseKey, u64>,
    /// Off-chip write bytes that carried duplicated-vertex commits.
    pub dup_commit_write_bytes: u64,
    pub eu_mac_ops: u64,
    pub gemm_flops: u64,
    pub vpu_ops: u64,
    pub busy: BusyTicks,
    pub stalls: StallCounts,
}

impl Counters {
    pub fn new(num_channels: u32, dimms_per_channel: u32) -> Counters {
        Counters {
            channel_read_bytes: vec![0; num_channels as usize],
            channel_write_bytes: vec![0; num_channels as usize],
            dimm_local_read_bytes: vec![0; (num_channels * dimms_per_channel) as usize],
            dimm_local_write_bytes: vec![0; (num_channels * dimms_per_channel) as usize],
            ..Counters::default()
        }
    }

    pub fn add_off_chip_read(&mut self, channel: u32, bytes: u64, key: PhaseKey) {
        self.off_chip_read_bytes += bytes;
        self.channel_read_bytes[channel as usize] += bytes;
        *self.off_chip_by_phase.entry(key).or_insert(0) += bytes;
    }

    pub fn add_off_chip_write(&mut self, channel: u32, bytes: u64, key: PhaseKey) {
        self.off_chip_write_bytes += bytes;
        self.channel_write_bytes[channel as usize] += bytes;
        *self.off_chip_by_phase.entry(key).or_insert(0) += bytes;
    }

    pub fn add_local_read(&mut self, dimm_index: u32, bytes: u64, key: PhaseKey) {
        self.local_read_bytes += bytes;
        self.dimm_local_read_bytes[dimm_index as usize] += bytes;
        *self.local_by_phase.entry(key).or_insert(0) += bytes;
    }

    pub fn add_local_write(&mut self, dimm_index: u32, bytes: u64, key: PhaseKey) {
        self.local_write_bytes += bytes;
        self.dimm_local_write_bytes[dimm_index as usize] += bytes;
        *self.local_by_phase.entry(key).or_insert(0) += bytes;
    }

    /// Total logical bytes for a category in one (layer, direction) slice,
    /// local and off-chip combined.
    pub fn phase_bytes(&self, layer: u8, dir: Direction, cat: Category) -> u64 {
        let key = (layer, dir, cat);
        self.off_chip_by_phase.get(&key).copied().unwrap_or(0)
            + self.local_by_phase.get(&key).copied().unwrap_or(0)
    }

    /// Off-chip bytes attributable to the Reduce phase across the whole run.
    pub fn reduce_off_chip_read_bytes(&self) -> u64 {
        self.off_chip_by_phase
            .iter()
            .filter(|((_, _, c), _)| {
                matches!(c, Category::ReduceSrcRead | Category::PartialReadout)
            })
            .map(|(_, &b)| b)
            .sum()
    }
}

// ── Energy ──────────────────────────────────────────────────────────────

/// Data-movement costs per bit and component powers.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    pub off_chip_pj_per_bit: f64,
    /// DIMM-local rank access. Applied to writes as well as reads; the
    /// interface cost dominates and is symmetric at this granularity.
    pub local_pj_per_bit: f64,
    pub nme_eu_mw: f64,
    pub nme_buffer_mw: f64,
    pub gemm_mw: f64,
    pub vpu_mw: f64,
    pub scratchpad_mw: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            off_chip_pj_per_bit: 22.0,
            local_pj_per_bit: 14.0,
            nme_eu_mw: 178.1,
            nme_buffer_mw: 80.0,
            gemm_mw: 6291.4,
            vpu_mw: 296.6,
            scratchpad_mw: 5519.2,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.off_chip_pj_per_bit,
            self.local_pj_per_bit,
            self.nme_eu_mw,
            self.nme_buffer_mw,
            self.gemm_mw,
            self.vpu_mw,
            self.scratchpad_mw,
        ];
        if all.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config("energy constants must be positive".into()));
        }
        Ok(())
    }
}

/// How component power turns into energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribution {
    /// Power accrues only over cycles the component executed.
    Active,
    /// Power accrues over the whole run (coarse upper bound).
    AlwaysOn,
}

impl Attribution {
    pub fn name(self) -> &'static str {
        match self {
            Attribution::Active => "active",
            Attribution::AlwaysOn => "always_on",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBreakdown {
    pub movement_off_chip_j: f64,
    pub movement_local_j: f64,
    pub nme_eu_j: f64,
    pub nme_buffer_j: f64,
    pub gemm_j: f64,
    pub vpu_j: f64,
    pub scratchpad_j: f64,
    pub total_j: f64,
}

/// Total energy for a completed run. Movement energy depends only on byte
/// counters; component energy on busy ticks (Active) or elapsed time
/// (AlwaysOn). `nme_count` scales nothing here because `busy` already sums
/// over NMEs; it matters only for AlwaysOn, where every engine idles at
/// full power.
pub fn energy_total(
    counters: &Counters,
    elapsed_seconds: f64,
    tick_hz: u64,
    nme_count: u32,
    model: &EnergyModel,
    attribution: Attribution,
) -> EnergyBreakdown {
    let pj = 1e-12;
    let mw = 1e-3;
    let off_bits = 8.0 * (counters.off_chip_read_bytes + counters.off_chip_write_bytes) as f64;
    let loc_bits = 8.0 * (counters.local_read_bytes + counters.local_write_bytes) as f64;
    let movement_off_chip_j = off_bits * model.off_chip_pj_per_bit * pj;
    let movement_local_j = loc_bits * model.local_pj_per_bit * pj;
    let secs = |ticks: u64| ticks as f64 / tick_hz as f64;
    let (eu_t, buf_t, gemm_t, vpu_t, pad_t) = match attribution {
        Attribution::Active => (
            secs(counters.busy.nme_eu),
            secs(counters.busy.nme_buffer),
            secs(counters.busy.gemm),
            secs(counters.busy.vpu),
            secs(counters.busy.scratchpad),
        ),
        Attribution::AlwaysOn => {
            let n = nme_count as f64 * elapsed_seconds;
            (n, n, elapsed_seconds, elapsed_seconds, elapsed_seconds)
        }
    };
    let nme_eu_j = eu_t * model.nme_eu_mw * mw;
    let nme_buffer_j = buf_t * model.nme_buffer_mw * mw;
    let gemm_j = gemm_t * model.gemm_mw * mw;
    let vpu_j = vpu_t * model.vpu_mw * mw;
    let scratchpad_j = pad_t * model.scratchpad_mw * mw;
    let total_j = movement_off_chip_j
        + movement_local_j
        + nme_eu_j
        + nme_buffer_j
        + gemm_j
        + vpu_j
        + scratchpad_j;
    EnergyBreakdown {
        movement_off_chip_j,
        movement_local_j,
        nme_eu_j,
        nme_buffer_j,
        gemm_j,
        vpu_j,
        scratchpad_j,
        total_j,
    }
}

// ── Roofline ────────────────────────────────────────────────────────────

/// Which half of the machine a kernel runs on, hence which peak and
/// bandwidth bound it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    /// NME reductions against aggregated DIMM-local bandwidth.
    Reduce { dimms: u32, ranks_per_dimm: u32 },
    /// CAE dense work against aggregate channel bandwidth.
    Update { channels: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RooflinePoint {
    pub intensity_ops_per_byte: f64,
    pub peak_ops: f64,
    pub bandwidth_bytes: f64,
    pub attainable_ops: f64,
}

/// attainable = min(peak, intensity * bandwidth). Reduce peaks at the
/// summed NME MAC rate; Update at the systolic array rate.
pub fn roofline_point(
    kind: EngineKind,
    intensity: f64,
    cae: &CaeConfig,
    nme_lanes: u32,
    eu_hz: u64,
    timing: &TimingParams,
) -> RooflinePoint {
    let (peak_ops, bandwidth_bytes) = match kind {
        EngineKind::Reduce { dimms, ranks_per_dimm } => (
            2.0 * nme_lanes as f64 * eu_hz as f64 * dimms as f64,
            timing.rank_bandwidth() * dimms as f64 * ranks_per_dimm as f64,
        ),
        EngineKind::Update { channels } => (
            cae.gemm_peak_flops(),
            timing.rank_bandwidth() * channels as f64,
        ),
    };
    let attainable_ops = (intensity * bandwidth_bytes).min(peak_ops);
    RooflinePoint {
        intensity_ops_per_byte: intensity,
        peak_ops,
        bandwidth_bytes,
        attainable_ops,
    }
}

// ── Reports ─────────────────────────────────────────────────────────────

/// Identifies the workload a report came from; reports are only comparable
/// when their fingerprints agree on everything but the toggles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadFingerprint {
    pub vertices: u32,
    pub directed_edges: u64,
    pub graph_digest: u64,
    pub variant: String,
    pub dims: Vec<(u32, u32)>,
    pub element_bytes: u32,
    pub seed: u64,
    pub toggles: String,
}

impl WorkloadFingerprint {
    pub fn same_workload(&self, other: &WorkloadFingerprint) -> bool {
        self.vertices == other.vertices
            && self.directed_edges == other.directed_edges
            && self.graph_digest == other.graph_digest
            && self.variant == other.variant
            && self.dims == other.dims
            && self.element_bytes == other.element_bytes
            && self.seed == other.seed
    }
}

/// FNV-1a over the CSR arrays; stable fingerprint for workload identity.
pub fn graph_digest(row_ptr: &[u64], col: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for &r in row_ptr {
        eat(r);
    }
    for &c in col {
        eat(c as u64);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass { max_rel: f64 },
    Fail { tensor: String, index: String, rel: f64 },
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub workload: WorkloadFingerprint,
    pub counters: Counters,
    pub makespan_ticks: u64,
    pub tick_hz: u64,
    pub makespan_seconds: f64,
    pub nme_count: u32,
    pub energy_model: EnergyModel,
    pub energy_active: EnergyBreakdown,
    pub energy_always_on: EnergyBreakdown,
    /// Named roofline points for the run's dominant kernels.
    pub roofline: Vec<(String, RooflinePoint)>,
    pub verdict: Verdict,
}

/// f64 text codec that survives a render-parse round trip bit-exactly.
fn f(x: f64) -> String {
    format!("{x:?}")
}

fn render_energy(out: &mut String, prefix: &str, e: &EnergyBreakdown) {
    let _ = writeln!(out, "{prefix}.movement_off_chip_j = {}", f(e.movement_off_chip_j));
    let _ = writeln!(out, "{prefix}.movement_local_j = {}", f(e.movement_local_j));
    let _ = writeln!(out, "{prefix}.nme_eu_j = {}", f(e.nme_eu_j));
    let _ = writeln!(out, "{prefix}.nme_buffer_j = {}", f(e.nme_buffer_j));
    let _ = writeln!(out, "{prefix}.gemm_j = {}", f(e.gemm_j));
    let _ = writeln!(out, "{prefix}.vpu_j = {}", f(e.vpu_j));
    let _ = writeln!(out, "{prefix}.scratchpad_j = {}", f(e.scratchpad_j));
    let _ = writeln!(out, "{prefix}.total_j = {}", f(e.total_j));
}

impl SimReport {
    /// Deterministic key = value text. Identical reports render to
    /// identical bytes.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = &self.workload;
        let _ = writeln!(s, "workload.vertices = {}", w.vertices);
        let _ = writeln!(s, "workload.directed_edges = {}", w.directed_edges);
        let _ = writeln!(s, "workload.graph_digest = {:#018x}", w.graph_digest);
        let _ = writeln!(s, "workload.variant = {}", w.variant);
        let dims: Vec<String> = w.dims.iter().map(|(a, b)| format!("{a}x{b}")).collect();
        let _ = writeln!(s, "workload.dims = {}", dims.join(","));
        let _ = writeln!(s, "workload.element_bytes = {}", w.element_bytes);
        let _ = writeln!(s, "workload.seed = {}", w.seed);
        let _ = writeln!(s, "workload.toggles = {}", w.toggles);
        let _ = writeln!(s, "time.ticks = {}", self.makespan_ticks);
        let _ = writeln!(s, "time.tick_hz = {}", self.tick_hz);
        let _ = writeln!(s, "time.seconds = {}", f(self.makespan_seconds));
        let _ = writeln!(s, "machine.nme_count = {}", self.nme_count);
        let c = &self.counters;
        let _ = writeln!(s, "traffic.off_chip_read_bytes = {}", c.off_chip_read_bytes);
        let _ = writeln!(s, "traffic.off_chip_write_bytes = {}", c.off_chip_write_bytes);
        let _ = writeln!(s, "traffic.local_read_bytes = {}", c.local_read_bytes);
        let _ = writeln!(s, "traffic.local_write_bytes = {}", c.local_write_bytes);
        let _ = writeln!(s, "traffic.dup_commit_write_bytes = {}", c.dup_commit_write_bytes);
        for (i, (r, wb)) in c.channel_read_bytes.iter().zip(&c.channel_write_bytes).enumerate() {
            let _ = writeln!(s, "traffic.channel{i}.read_bytes = {r}");
            let _ = writeln!(s, "traffic.channel{i}.write_bytes = {wb}");
        }
        for (i, (r, wb)) in c
            .dimm_local_read_bytes
            .iter()
            .zip(&c.dimm_local_write_bytes)
            .enumerate()
        {
            let _ = writeln!(s, "traffic.dimm{i}.local_read_bytes = {r}");
            let _ = writeln!(s, "traffic.dimm{i}.local_write_bytes = {wb}");
        }
        for (scope, map) in [("off_chip", &c.off_chip_by_phase), ("local", &c.local_by_phase)] {
            for (&(layer, dir, cat), &bytes) in map {
                let _ = writeln!(
                    s,
                    "bytes.{scope}.{}.l{layer}.{} = {bytes}",
                    cat.name(),
                    direction_name(dir),
                );
            }
        }
        let _ = writeln!(s, "work.eu_mac_ops = {}", c.eu_mac_ops);
        let _ = writeln!(s, "work.gemm_flops = {}", c.gemm_flops);
        let _ = writeln!(s, "work.vpu_ops = {}", c.vpu_ops);
        let _ = writeln!(s, "busy.nme_eu_ticks = {}", c.busy.nme_eu);
        let _ = writeln!(s, "busy.nme_buffer_ticks = {}", c.busy.nme_buffer);
        let _ = writeln!(s, "busy.gemm_ticks = {}", c.busy.gemm);
        let _ = writeln!(s, "busy.vpu_ticks = {}", c.busy.vpu);
        let _ = writeln!(s, "busy.scratchpad_ticks = {}", c.busy.scratchpad);
        let _ = writeln!(s, "stalls.nme_fifo_full = {}", c.stalls.nme_fifo_full);
        let _ = writeln!(s, "stalls.window_blocked = {}", c.stalls.window_blocked);
        let _ = writeln!(s, "stalls.queue_full = {}", c.stalls.queue_full);
        let m = &self.energy_model;
        let _ = writeln!(s, "energy_model.off_chip_pj_per_bit = {}", f(m.off_chip_pj_per_bit));
        let _ = writeln!(s, "energy_model.local_pj_per_bit = {}", f(m.local_pj_per_bit));
        let _ = writeln!(s, "energy_model.nme_eu_mw = {}", f(m.nme_eu_mw));
        let _ = writeln!(s, "energy_model.nme_buffer_mw = {}", f(m.nme_buffer_mw));
        let _ = writeln!(s, "energy_model.gemm_mw = {}", f(m.gemm_mw));
        let _ = writeln!(s, "energy_model.vpu_mw = {}", f(m.vpu_mw));
        let _ = writeln!(s, "energy_model.scratchpad_mw = {}", f(m.scratchpad_mw));
        render_energy(&mut s, "energy.active", &self.energy_active);
        render_energy(&mut s, "energy.always_on", &self.energy_always_on);
        for (name, p) in &self.roofline {
            let _ = writeln!(s, "roofline.{name}.intensity = {}", f(p.intensity_ops_per_byte));
            let _ = writeln!(s, "roofline.{name}.peak_ops = {}", f(p.peak_ops));
            let _ = writeln!(s, "roofline.{name}.bandwidth_bytes = {}", f(p.bandwidth_bytes));
            let _ = writeln!(s, "roofline.{name}.attainable_ops = {}", f(p.attainable_ops));
        }
        match &self.verdict {
            Verdict::Pass { max_rel } => {
                let _ = writeln!(s, "verdict.functional = PASS");
                let _ = writeln!(s, "verdict.max_rel = {}", f(*max_rel));
            }
            Verdict::Fail { tensor, index, rel } => {
                let _ = writeln!(s, "verdict.functional = FAIL");
                let _ = writeln!(s, "verdict.tensor = {tensor}");
                let _ = writeln!(s, "verdict.index = {index}");
                let _ = writeln!(s, "verdict.max_rel = {}", f(*rel));
            }
            Verdict::Skipped => {
                let _ = writeln!(s, "verdict.functional = SKIPPED");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<SimReport> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k).map(|s| s.as_str()).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing report key {k}"),
            })
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad value for {k}: {v:?}"),
            })
        }
        let gu64 = |k: &str| -> Result<u64> { num(k, get(k)?) };
        let gu32 = |k: &str| -> Result<u32> { num(k, get(k)?) };
        let gf64 = |k: &str| -> Result<f64> { num(k, get(k)?) };

        let dims_s = get("workload.dims")?;
        let mut dims = Vec::new();
        if !dims_s.is_empty() {
            for part in dims_s.split(',') {
                let (a, b) = part.split_once('x').ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: format!("bad dims entry {part:?}"),
                })?;
                dims.push((num("dims", a)?, num("dims", b)?));
            }
        }
        let digest_s = get("workload.graph_digest")?;
        let graph_digest = u64::from_str_radix(digest_s.trim_start_matches("0x"), 16)
            .map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad graph digest {digest_s:?}"),
            })?;
        let workload = WorkloadFingerprint {
            vertices: gu32("workload.vertices")?,
            directed_edges: gu64("workload.directed_edges")?,
            graph_digest,
            variant: get("workload.variant")?.to_string(),
            dims,
            element_bytes: gu32("workload.element_bytes")?,
            seed: gu64("workload.seed")?,
            toggles: get("workload.toggles")?.to_string(),
        };

        let mut channel_read = Vec::new();
        let mut channel_write = Vec::new();
        for i in 0.. {
            match kv.get(&format!("traffic.channel{i}.read_bytes")) {
                Some(v) => {
                    channel_read.push(num("channel read", v)?);
                    channel_write.push(gu64(&format!("traffic.channel{i}.write_bytes"))?);
                }
                None => break,
            }
        }
        let mut dimm_read = Vec::new();
        let mut dimm_write = Vec::new();
        for i in 0.. {
            match kv.get(&format!("traffic.dimm{i}.local_read_bytes")) {
                Some(v) => {
                    dimm_read.push(num("dimm read", v)?);
                    dimm_write.push(gu64(&format!("traffic.dimm{i}.local_write_bytes"))?);
                }
                None => break,
            }
        }
        let mut off_chip_by_phase = BTreeMap::new();
        let mut local_by_phase = BTreeMap::new();
        for (k, v) in &kv {
            let Some(rest) = k.strip_prefix("bytes.") else {
                continue;
            };
            let parts: Vec<&str> = rest.split('.').collect();
            if parts.len() != 4 {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("bad phase-byte key {k}"),
                });
            }
            let cat = Category::parse(parts[1])?;
            let layer: u8 = num(k, parts[2].trim_start_matches('l'))?;
            let dir = parse_direction(parts[3])?;
            let bytes: u64 = num(k, v)?;
            match parts[0] {
                "off_chip" => off_chip_by_phase.insert((layer, dir, cat), bytes),
                "local" => local_by_phase.insert((layer, dir, cat), bytes),
                other => {
                    return Err(Error::Parse {
                        line: 0,
                        msg: format!("bad traffic scope {other}"),
                    })
                }
            };
        }

        let counters = Counters {
            off_chip_read_bytes: gu64("traffic.off_chip_read_bytes")?,
            off_chip_write_bytes: gu64("traffic.off_chip_write_bytes")?,
            local_read_bytes: gu64("traffic.local_read_bytes")?,
            local_write_bytes: gu64("traffic.local_write_bytes")?,
            channel_read_bytes: channel_read,
            channel_write_bytes: channel_write,
            dimm_local_read_bytes: dimm_read,
            dimm_local_write_bytes: dimm_write,
            off_chip_by_phase,
            local_by_phase,
            dup_commit_write_bytes: gu64("traffic.dup_commit_write_bytes")?,
            eu_mac_ops: gu64("work.eu_mac_ops")?,
            gemm_flops: gu64("work.gemm_flops")?,
            vpu_ops: gu64("work.vpu_ops")?,
            busy: BusyTicks {
                nme_eu: gu64("busy.nme_eu_ticks")?,
                nme_buffer: gu64("busy.nme_buffer_ticks")?,
                gemm: gu64("busy.gemm_ticks")?,
                vpu: gu64("busy.vpu_ticks")?,
                scratchpad: gu64("busy.scratchpad_ticks")?,
            },
            stalls: StallCounts {
                nme_fifo_full: gu64("stalls.nme_fifo_full")?,
                window_blocked: gu64("stalls.window_blocked")?,
                queue_full: gu64("stalls.queue_full")?,
            },
        };

        let energy_model = EnergyModel {
            off_chip_pj_per_bit: gf64("energy_model.off_chip_pj_per_bit")?,
            local_pj_per_bit: gf64("energy_model.local_pj_per_bit")?,
            nme_eu_mw: gf64("energy_model.nme_eu_mw")?,
            nme_buffer_mw: gf64("energy_model.nme_buffer_mw")?,
            gemm_mw: gf64("energy_model.gemm_mw")?,
            vpu_mw: gf64("energy_model.vpu_mw")?,
            scratchpad_mw: gf64("energy_model.scratchpad_mw")?,
        };
        let energy = |prefix: &str| -> Result<EnergyBreakdown> {
            Ok(EnergyBreakdown {
                movement_off_chip_j: gf64(&format!("{prefix}.movement_off_chip_j"))?,
                movement_local_j: gf64(&format!("{prefix}.movement_local_j"))?,
                nme_eu_j: gf64(&format!("{prefix}.nme_eu_j"))?,
                nme_buffer_j: gf64(&format!("{prefix}.nme_buffer_j"))?,
                gemm_j: gf64(&format!("{prefix}.gemm_j"))?,
                vpu_j: gf64(&format!("{prefix}.vpu_j"))?,
                scratchpad_j: gf64(&format!("{prefix}.scratchpad_j"))?,
                total_j: gf64(&format!("{prefix}.total_j"))?,
            })
        };

        let mut roofline = Vec::new();
        let mut seen = Vec::new();
        for k in kv.keys() {
            if let Some(rest) = k.strip_prefix("roofline.") {
                if let Some(name) = rest.strip_suffix(".intensity") {
                    seen.push(name.to_string());
                }
            }
        }
        for name in seen {
            roofline.push((
                name.clone(),
                RooflinePoint {
                    intensity_ops_per_byte: gf64(&format!("roofline.{name}.intensity"))?,
                    peak_ops: gf64(&format!("roofline.{name}.peak_ops"))?,
                    bandwidth_bytes: gf64(&format!("roofline.{name}.bandwidth_bytes"))?,
                    attainable_ops: gf64(&format!("roofline.{name}.attainable_ops"))?,
                },
            ));
        }

        let verdict = match get("verdict.functional")? {
            "PASS" => Verdict::Pass {
                max_rel: gf64("verdict.max_rel")?,
            },
            "FAIL" => Verdict::Fail {
                tensor: get("verdict.tensor")?.to_string(),
                index: get("verdict.index")?.to_string(),
                rel: gf64("verdict.max_rel")?,
            },
            "SKIPPED" => Verdict::Skipped,
            other => {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("bad verdict {other:?}"),
                })
            }
        };

        Ok(SimReport {
            workload,
            counters,
            makespan_ticks: gu64("time.ticks")?,
            tick_hz: gu64("time.tick_hz")?,
            makespan_seconds: gf64("time.seconds")?,
            nme_count: gu32("machine.nme_count")?,
            energy_model,
            energy_active: energy("energy.active")?,
            energy_always_on: energy("energy.always_on")?,
            roofline,
            verdict,
        })
    }
}

/// Off-chip Reduce-read saving of an NMP run against a baseline run of the
/// same workload: 1 - nmp/base.
pub fn reduction_saving(base: &SimReport, nmp: &SimReport) -> Result<f64> {
    if !base.workload.same_workload(&nmp.workload) {
        return Err(Error::Input(
            "reduction saving compares runs of one workload; fingerprints differ".into(),
        ));
    }
    let b = base.counters.reduce_off_chip_read_bytes();
    let n = nmp.counters.reduce_off_chip_read_bytes();
    if b == 0 {
        return Err(Error::Input("baseline run moved no Reduce bytes".into()));
    }
    Ok(1.0 - n as f64 / b as f64)
}

// ── Sweep output ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parameter: String,
    pub cycles: u64,
    pub off_chip_bytes: u64,
    pub energy_j: f64,
}

/// CSV for sweep results; rows are emitted in the given order, which the
/// caller keeps sorted by parameter value.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("parameter,cycles,off_chip_bytes,energy_j\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.parameter, r.cycles, r.off_chip_bytes, f(r.energy_j));
    }
    s
}
