//! Vertex placement across channels and DIMMs, plus the physical
//! address map from (vertex, tensor, layer, byte) to DRAM coordinates.
//!
//! Placement is immutable after construction. Duplicated vertices are
//! allocated first within each bank sequence so every replica of a
//! vertex shares identical (rank, bank, row, column) coordinates on
//! all DIMMs of its channel, which is what lets a single channel-wide
//! broadcast write update every replica at once.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::graph::CsrGraph;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Even,
    Hybrid,
}

impl PartitionMode {
    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::Even => "even",
            PartitionMode::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<PartitionMode> {
        match s {
            "even" => Ok(PartitionMode::Even),
            "hybrid" => Ok(PartitionMode::Hybrid),
            other => Err(Error::Config(format!("unknown partition mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PartitionConfig {
    pub num_channels: u32,
    pub dimms_per_channel: u32,
    pub ranks_per_dimm: u32,
    /// Fraction of each channel's vertices duplicated to all its DIMMs.
    pub lambda: f64,
    pub mode: PartitionMode,
    /// Optional per-DIMM resident vertex budget (homed + duplicated).
    pub capacity_vertices_per_dimm: Option<u32>,
}

impl Default for PartitionConfig {
    fn default() -> PartitionConfig {
        PartitionConfig {
            num_channels: 1,
            dimms_per_channel: 4,
            ranks_per_dimm: 2,
            lambda: 0.0,
            mode: PartitionMode::Even,
            capacity_vertices_per_dimm: None,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_channels == 0 || self.dimms_per_channel == 0 || self.ranks_per_dimm == 0 {
            return Err(Error::Config(
                "channel/dimm/rank counts must be nonzero".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "duplication ratio {} outside [0, 0.5]",
                self.lambda
            )));
        }
        if self.mode == PartitionMode::Even && self.lambda != 0.0 {
            return Err(Error::Config(
                "even mode requires duplication ratio 0".into(),
            ));
        }
        Ok(())
    }
}

/// Immutable vertex-to-DIMM assignment.
///
/// channel(v) = v mod num_channels always. Within a channel, vertices
/// not in the duplicated set are homed round-robin over that channel's
/// ascending vertex list, which for lambda = 0 reduces exactly to
/// dimm = (v / num_channels) mod dimms_per_channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub num_channels: u32,
    pub dimms_per_channel: u32,
    pub ranks_per_dimm: u32,
    home_dimm: Vec<u8>,
    dup: Vec<bool>,
    /// Duplicated vertices per channel, ascending vertex id.
    dup_lists: Vec<Vec<u32>>,
}

impl Placement {
    pub fn num_vertices(&self) -> u32 {
        self.home_dimm.len() as u32
    }

    pub fn channel(&self, v: u32) -> u32 {
        v % self.num_channels
    }

    pub fn home_dimm(&self, v: u32) -> u32 {
        self.home_dimm[v as usize] as u32
    }

    pub fn is_duplicated(&self, v: u32) -> bool {
        self.dup[v as usize]
    }

    pub fn duplicated_in_channel(&self, ch: u32) -> &[u32] {
        &self.dup_lists[ch as usize]
    }

    pub fn num_duplicated(&self) -> u64 {
        self.dup_lists.iter().map(|l| l.len() as u64).sum()
    }

    /// DIMM responsible for duplicated-source work of an interval.
    /// Round-robin, so consecutive intervals land on distinct DIMMs
    /// whenever the channel has more than one DIMM.
    pub fn interval_owner(&self, interval: u64) -> u32 {
        (interval % self.dimms_per_channel as u64) as u32
    }

    /// DIMMs of v's channel that hold v's vector, ascending.
    pub fn holders(&self, v: u32) -> Vec<u32> {
        if self.is_duplicated(v) {
            (0..self.dimms_per_channel).collect()
        } else {
            vec![self.home_dimm(v)]
        }
    }

    /// Vertices resident on one DIMM (homed there, or duplicated in
    /// the channel), ascending.
    pub fn resident_vertices(&self, ch: u32, dimm: u32) -> Vec<u32> {
        let mut out: Vec<u32> = (0..self.num_vertices())
            .filter(|&v| self.channel(v) == ch && (self.dup[v as usize] || self.home_dimm(v) == dimm))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn home_counts(&self) -> Vec<Vec<u32>> {
        let mut counts =
            vec![vec![0u32; self.dimms_per_channel as usize]; self.num_channels as usize];
        for v in 0..self.num_vertices() {
            counts[self.channel(v) as usize][self.home_dimm(v) as usize] += 1;
        }
        counts
    }
}

fn build_placement(graph: &CsrGraph, config: &PartitionConfig) -> Result<Placement> {
    config.validate()?;
    let n = graph.num_vertices;
    let c = config.num_channels;
    let d = config.dimms_per_channel;
    if d > u8::MAX as u32 + 1 {
        return Err(Error::Config("more than 256 DIMMs per channel".into()));
    }
    let mut home_dimm = vec![0u8; n as usize];
    let mut dup = vec![false; n as usize];
    let mut dup_lists = vec![Vec::new(); c as usize];

    for ch in 0..c {
        let members: Vec<u32> = (ch..n).step_by(c as usize).collect();
        let k = if config.mode == PartitionMode::Hybrid {
            (config.lambda * members.len() as f64).ceil() as usize
        } else {
            0
        };
        if k > 0 {
            let mut by_degree = members.clone();
            by_degree.sort_by(|&a, &b| graph.degree(b).cmp(&graph.degree(a)).then(a.cmp(&b)));
            let mut chosen: Vec<u32> = by_degree[..k].to_vec();
            chosen.sort_unstable();
            for &v in &chosen {
                dup[v as usize] = true;
            }
            dup_lists[ch as usize] = chosen;
        }
        let mut next = 0u32;
        for &v in &members {
            if dup[v as usize] {
                home_dimm[v as usize] = (dup_lists[ch as usize]
                    .binary_search(&v)
                    .expect("duplicated vertex indexed")
                    % d as usize) as u8;
            } else {
                home_dimm[v as usize] = (next % d) as u8;
                next += 1;
            }
        }
    }

    let placement = Placement {
        num_channels: c,
        dimms_per_channel: d,
        ranks_per_dimm: config.ranks_per_dimm,
        home_dimm,
        dup,
        dup_lists,
    };
    if let Some(cap) = config.capacity_vertices_per_dimm {
        for ch in 0..c {
            for dm in 0..d {
                let resident = placement.resident_vertices(ch, dm).len() as u32;
                if resident > cap {
                    return Err(Error::Capacity(format!(
                        "channel {ch} dimm {dm} holds {resident} vertices, budget {cap}"
                    )));
                }
            }
        }
    }
    Ok(placement)
}

/// Even placement: channel = v mod C, dimm = (v / C) mod D.
pub fn even_partition(graph: &CsrGraph, config: &PartitionConfig) -> Result<Placement> {
    if config.mode != PartitionMode::Even {
        return Err(Error::Config("even_partition requires even mode".into()));
    }
    build_placement(graph, config)
}

/// Hybrid placement: per channel, the top ceil(lambda * |V_ch|)
/// vertices by degree (ties to the lower index) are duplicated to all
/// DIMMs of the channel; the rest are homed evenly.
pub fn hybrid_partition(graph: &CsrGraph, config: &PartitionConfig) -> Result<Placement> {
    if config.mode != PartitionMode::Hybrid {
        return Err(Error::Config("hybrid_partition requires hybrid mode".into()));
    }
    build_placement(graph, config)
}

pub fn partition(graph: &CsrGraph, config: &PartitionConfig) -> Result<Placement> {
    match config.mode {
        PartitionMode::Even => even_partition(graph, config),
        PartitionMode::Hybrid => hybrid_partition(graph, config),
    }
}

/// Materialized round-robin interval ownership table.
pub fn interleave_intervals(num_intervals: u64, placement: &Placement) -> Vec<u8> {
    (0..num_intervals)
        .map(|i| placement.interval_owner(i) as u8)
        .collect()
}

const PLACEMENT_MAGIC: &[u8; 4] = b"GNPL";

pub fn write_placement<W: Write>(mut w: W, p: &Placement) -> Result<()> {
    w.write_all(PLACEMENT_MAGIC)?;
    w.write_u32::<LittleEndian>(p.num_vertices())?;
    w.write_u32::<LittleEndian>(p.num_channels)?;
    w.write_u32::<LittleEndian>(p.dimms_per_channel)?;
    w.write_u32::<LittleEndian>(p.ranks_per_dimm)?;
    for v in 0..p.num_vertices() {
        w.write_u32::<LittleEndian>(v)?;
        w.write_u8(p.channel(v) as u8)?;
        w.write_u8(p.home_dimm(v) as u8)?;
        w.write_u8(p.is_duplicated(v) as u8)?;
    }
    Ok(())
}

pub fn read_placement<R: Read>(mut r: R) -> Result<Placement> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PLACEMENT_MAGIC {
        return Err(Error::Parse {
            line: 0,
            msg: "bad placement magic".into(),
        });
    }
    let n = r.read_u32::<LittleEndian>()?;
    let c = r.read_u32::<LittleEndian>()?;
    let d = r.read_u32::<LittleEndian>()?;
    let ranks = r.read_u32::<LittleEndian>()?;
    if c == 0 || d == 0 || d > 256 || ranks == 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "bad placement geometry".into(),
        });
    }
    let mut home_dimm = vec![0u8; n as usize];
    let mut dup = vec![false; n as usize];
    let mut dup_lists = vec![Vec::new(); c as usize];
    let mut seen = vec![false; n as usize];
    for _ in 0..n {
        let v = r.read_u32::<LittleEndian>()?;
        let ch = r.read_u8()?;
        let dm = r.read_u8()?;
        let df = r.read_u8()?;
        if v >= n || seen[v as usize] {
            return Err(Error::Parse {
                line: 0,
                msg: format!("vertex {v} missing or repeated"),
            });
        }
        if ch as u32 != v % c || dm as u32 >= d || df > 1 {
            return Err(Error::Parse {
                line: 0,
                msg: format!("bad placement record for vertex {v}"),
            });
        }
        seen[v as usize] = true;
        home_dimm[v as usize] = dm;
        dup[v as usize] = df == 1;
        if df == 1 {
            dup_lists[(v % c) as usize].push(v);
        }
    }
    for l in &mut dup_lists {
        l.sort_unstable();
    }
    Ok(Placement {
        num_channels: c,
        dimms_per_channel: d,
        ranks_per_dimm: ranks,
        home_dimm,
        dup,
        dup_lists,
    })
}

/// Tensor families held in DIMM DRAM, one region per (kind, layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataKind {
    /// Hidden features h^l, layers 0..=L.
    H,
    /// Retained aggregation results a^l, layers 0..L.
    A,
    /// Pre-aggregation feature gradients, layers 0..L, width d_in.
    Delta,
    /// Masked aggregated gradients, layers 0..L, width d_out.
    DeltaMasked,
    /// Transformed vectors staged when combination runs first.
    Staged,
    /// GIN hidden MLP activations r^l, layers 0..L.
    GinR,
}

impl DataKind {
    pub const ALL: [DataKind; 6] = [
        DataKind::H,
        DataKind::A,
        DataKind::Delta,
        DataKind::DeltaMasked,
        DataKind::Staged,
        DataKind::GinR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DataKind::H => "h",
            DataKind::A => "a",
            DataKind::Delta => "delta",
            DataKind::DeltaMasked => "delta_masked",
            DataKind::Staged => "staged",
            DataKind::GinR => "gin_r",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DramGeometry {
    pub row_bytes: u32,
    pub num_banks: u32,
    pub rows_per_bank: u32,
}

impl Default for DramGeometry {
    fn default() -> DramGeometry {
        DramGeometry {
            row_bytes: 8192,
            num_banks: 16,
            rows_per_bank: 65536,
        }
    }
}

#[derive(Debug, Clone)]
struct Region {
    kind: DataKind,
    layer: u8,
    vec_bytes: u32,
    /// Per-rank share of one vector, padded to whole 64-byte bursts.
    sub_bytes: u32,
    slots_per_row: u32,
    base_row: u32,
}

/// Physical coordinates of one per-rank sub-vector access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Loc {
    pub channel: u32,
    pub dimm: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    /// Column offset in 8-byte beats.
    pub col: u32,
}

/// Deterministic map from (vertex, kind, layer, byte) to coordinates.
///
/// bank = v mod num_banks, so adjacent vertex ids always hit different
/// banks. Within a (DIMM, bank) the region packs sub-vectors into rows
/// sequentially, duplicated vertices first, so replica coordinates are
/// DIMM-invariant. Region bases are uniform across all DIMMs.
#[derive(Debug, Clone)]
pub struct AddressMap {
    pub geometry: DramGeometry,
    pub ranks_per_dimm: u32,
    /// Per-bank slot index of each vertex on its holder DIMMs.
    slot: Vec<u32>,
    regions: Vec<Region>,
    num_layers: u8,
    pub rows_used: u32,
}

impl AddressMap {
    pub fn build(
        placement: &Placement,
        model: &ModelConfig,
        geometry: DramGeometry,
    ) -> Result<AddressMap> {
        let n = placement.num_vertices();
        let banks = geometry.num_banks;
        let mut slot = vec![u32::MAX; n as usize];
        let mut max_slots = 0u32;
        for ch in 0..placement.num_channels {
            let mut dup_in_bank = vec![0u32; banks as usize];
            for &v in placement.duplicated_in_channel(ch) {
                let b = (v % banks) as usize;
                slot[v as usize] = dup_in_bank[b];
                dup_in_bank[b] += 1;
            }
            for dm in 0..placement.dimms_per_channel {
                let mut next = dup_in_bank.clone();
                for v in (ch..n).step_by(placement.num_channels as usize) {
                    if !placement.is_duplicated(v) && placement.home_dimm(v) == dm {
                        let b = (v % banks) as usize;
                        slot[v as usize] = next[b];
                        next[b] += 1;
                    }
                }
                max_slots = max_slots.max(next.iter().copied().max().unwrap_or(0));
            }
        }

        let num_layers = model.num_layers();
        let mut regions = Vec::new();
        let mut base_row = 0u32;
        for kind in DataKind::ALL {
            let layers: u8 = match kind {
                DataKind::H => num_layers as u8 + 1,
                _ => num_layers as u8,
            };
            for layer in 0..layers {
                let d = region_dim(model, kind, layer);
                let vec_bytes = d * model.element_bytes;
                let raw = vec_bytes.div_ceil(placement.ranks_per_dimm);
                let sub_bytes = raw.div_ceil(64) * 64;
                if sub_bytes > geometry.row_bytes {
                    return Err(Error::Capacity(format!(
                        "per-rank sub-vector of {sub_bytes} bytes exceeds a {}-byte row",
                        geometry.row_bytes
                    )));
                }
                let slots_per_row = geometry.row_bytes / sub_bytes;
                let rows = max_slots.div_ceil(slots_per_row);
                regions.push(Region {
                    kind,
                    layer,
                    vec_bytes,
                    sub_bytes,
                    slots_per_row,
                    base_row,
                });
                base_row = base_row
                    .checked_add(rows)
                    .ok_or_else(|| Error::Capacity("row space overflow".into()))?;
            }
        }
        if base_row > geometry.rows_per_bank {
            return Err(Error::Capacity(format!(
                "regions need {base_row} rows per bank, device has {}",
                geometry.rows_per_bank
            )));
        }
        Ok(AddressMap {
            geometry,
            ranks_per_dimm: placement.ranks_per_dimm,
            slot,
            regions,
            num_layers: num_layers as u8,
            rows_used: base_row,
        })
    }

    fn region(&self, kind: DataKind, layer: u8) -> Result<&Region> {
        self.regions
            .iter()
            .find(|r| r.kind == kind && r.layer == layer)
            .ok_or_else(|| {
                Error::Domain(format!("no region for {} layer {layer}", kind.name()))
            })
    }

    pub fn vec_bytes(&self, kind: DataKind, layer: u8) -> Result<u32> {
        Ok(self.region(kind, layer)?.vec_bytes)
    }

    /// Padded per-rank bytes of one vector; bursts = sub_bytes / 64.
    pub fn sub_bytes(&self, kind: DataKind, layer: u8) -> Result<u32> {
        Ok(self.region(kind, layer)?.sub_bytes)
    }

    pub fn bursts_per_rank(&self, kind: DataKind, layer: u8) -> Result<u32> {
        Ok(self.region(kind, layer)?.sub_bytes / 64)
    }

    pub fn num_layers(&self) -> u8 {
        self.num_layers
    }

    /// Coordinates of one byte of a vector, on the vertex's home DIMM.
    /// Duplicated vertices resolve to identical (rank, bank, row, col)
    /// on every DIMM of the channel.
    pub fn locate(
        &self,
        placement: &Placement,
        v: u32,
        kind: DataKind,
        layer: u8,
        byte_offset: u32,
    ) -> Result<Loc> {
        let r = self.region(kind, layer)?;
        if byte_offset >= r.vec_bytes {
            return Err(Error::Domain(format!(
                "byte {byte_offset} outside a {}-byte vector",
                r.vec_bytes
            )));
        }
        let raw_sub = r.vec_bytes.div_ceil(self.ranks_per_dimm);
        let rank = byte_offset / raw_sub;
        let within = byte_offset % raw_sub;
        let s = self.slot[v as usize];
        let row = r.base_row + s / r.slots_per_row;
        let col_byte = (s % r.slots_per_row) * r.sub_bytes + within;
        Ok(Loc {
            channel: placement.channel(v),
            dimm: placement.home_dimm(v),
            rank,
            bank: v % self.geometry.num_banks,
            row,
            col: col_byte / 8,
        })
    }
}

fn region_dim(model: &ModelConfig, kind: DataKind, layer: u8) -> u32 {
    let l = layer as usize;
    match kind {
        DataKind::H => {
            if l == 0 {
                model.dims[0].0
            } else {
                model.dims[l - 1].1
            }
        }
        DataKind::A | DataKind::Delta => model.dims[l].0,
        DataKind::DeltaMasked | DataKind::Staged | DataKind::GinR => model.dims[l].1,
    }
}

/// Sanity check that every vertex is covered and dimm ids are in range.
pub fn validate_coverage(placement: &Placement, num_vertices: u32) -> Result<()> {
    if placement.num_vertices() != num_vertices {
        return Err(Error::Config(format!(
            "placement covers {} vertices, graph has {num_vertices}",
            placement.num_vertices()
        )));
    }
    for v in 0..num_vertices {
        if placement.home_dimm(v) >= placement.dimms_per_channel {
            return Err(Error::Config(format!("vertex {v} homed out of range")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn cfg(c: u32, d: u32, mode: PartitionMode, lambda: f64) -> PartitionConfig {
        PartitionConfig {
            num_channels: c,
            dimms_per_channel: d,
            ranks_per_dimm: 2,
            lambda,
            mode,
            capacity_vertices_per_dimm: None,
        }
    }

    fn ring(n: u32) -> CsrGraph {
        let edges: Vec<(u32, u32)> = (0..n).map(|v| (v, (v + 1) % n)).collect();
        CsrGraph::from_edges(n, &edges, true).unwrap()
    }

    #[test]
    fn even_split_is_balanced() {
        let g = ring(8);
        let p = even_partition(&g, &cfg(2, 2, PartitionMode::Even, 0.0)).unwrap();
        for row in p.home_counts() {
            for c in row {
                assert_eq!(c, 2);
            }
        }
        assert_eq!(p.channel(5), 1);
        assert_eq!(p.home_dimm(5), 0);

        let g1 = ring(3);
        let single = even_partition(&g1, &cfg(1, 1, PartitionMode::Even, 0.0)).unwrap();
        assert_eq!(single.channel(0), 0);
        assert_eq!(single.home_dimm(0), 0);

        let big = ring(1000);
        let p = even_partition(&big, &cfg(4, 4, PartitionMode::Even, 0.0)).unwrap();
        for row in p.home_counts() {
            for c in row {
                assert!(c == 62 || c == 63, "count {c}");
            }
        }
    }

    #[test]
    fn hybrid_lambda_zero_matches_even() {
        let g = crate::graph::generate_power_law(500, 8.0, 11).unwrap();
        let even = even_partition(&g, &cfg(2, 4, PartitionMode::Even, 0.0)).unwrap();
        let hybrid = hybrid_partition(&g, &cfg(2, 4, PartitionMode::Hybrid, 0.0)).unwrap();
        assert_eq!(even, hybrid);
    }

    #[test]
    fn hybrid_duplicates_top_degree_vertices() {
        // Star around vertex 4 plus a chain keeps degrees distinct.
        let mut edges = vec![(4, 0), (4, 1), (4, 2), (4, 3), (4, 5), (4, 6)];
        edges.extend([(0, 1), (1, 2), (2, 3), (5, 6), (6, 7), (7, 8), (8, 9)]);
        let g = CsrGraph::from_edges(10, &edges, true).unwrap();
        let p = hybrid_partition(&g, &cfg(1, 2, PartitionMode::Hybrid, 0.1)).unwrap();
        assert_eq!(p.duplicated_in_channel(0), &[4]);
        assert!(p.is_duplicated(4));
        assert_eq!(p.num_duplicated(), 1);
        assert_eq!(p.holders(4), vec![0, 1]);
        assert_eq!(p.holders(0).len(), 1);
    }

    #[test]
    fn duplication_counts_per_channel_ceiling() {
        let g = crate::graph::generate_power_law(1000, 10.0, 3).unwrap();
        let p = hybrid_partition(&g, &cfg(4, 4, PartitionMode::Hybrid, 0.35)).unwrap();
        for ch in 0..4u32 {
            let members = (0..1000u32).filter(|v| v % 4 == ch).count();
            let want = (0.35 * members as f64).ceil() as usize;
            assert_eq!(p.duplicated_in_channel(ch).len(), want);
        }
    }

    #[test]
    fn capacity_budget_is_enforced() {
        let g = ring(64);
        let mut c = cfg(1, 2, PartitionMode::Hybrid, 0.5);
        c.capacity_vertices_per_dimm = Some(40);
        // 32 dup + 16 homed = 48 residents per DIMM, over the budget.
        let err = hybrid_partition(&g, &c).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        c.capacity_vertices_per_dimm = Some(48);
        hybrid_partition(&g, &c).unwrap();
    }

    #[test]
    fn interval_owners_round_robin() {
        let g = ring(16);
        let p = even_partition(&g, &cfg(1, 4, PartitionMode::Even, 0.0)).unwrap();
        let owners = interleave_intervals(8, &p);
        assert_eq!(owners, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        let p1 = even_partition(&g, &cfg(1, 1, PartitionMode::Even, 0.0)).unwrap();
        assert!(interleave_intervals(5, &p1).iter().all(|&o| o == 0));
    }

    proptest! {
        #[test]
        fn consecutive_intervals_use_distinct_owners(
            d in 2u32..64,
            count in 2u64..2000,
        ) {
            let g = ring(8);
            let p = even_partition(&g, &cfg(1, d, PartitionMode::Even, 0.0)).unwrap();
            for i in 0..count - 1 {
                prop_assert_ne!(p.interval_owner(i), p.interval_owner(i + 1));
            }
        }
    }

    #[test]
    fn placement_file_round_trips() {
        let g = crate::graph::generate_power_law(300, 6.0, 7).unwrap();
        let p = hybrid_partition(&g, &cfg(2, 4, PartitionMode::Hybrid, 0.2)).unwrap();
        let mut buf = Vec::new();
        write_placement(&mut buf, &p).unwrap();
        assert_eq!(buf.len(), 20 + 7 * 300);
        let back = read_placement(buf.as_slice()).unwrap();
        assert_eq!(p, back);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_placement(bad.as_slice()).is_err());
    }

    fn model(elem: u32) -> ModelConfig {
        ModelConfig::with_chain(Variant::Gcn, 32, 16, 4, 2, elem, 1)
    }

    #[test]
    fn address_map_splits_vectors_across_ranks() {
        let g = ring(64);
        let p = even_partition(&g, &cfg(1, 2, PartitionMode::Even, 0.0)).unwrap();
        let m = AddressMap::build(&p, &model(4), DramGeometry::default()).unwrap();
        // h layer 0 is 32 floats = 128 bytes, 64 per rank, one burst.
        assert_eq!(m.vec_bytes(DataKind::H, 0).unwrap(), 128);
        assert_eq!(m.sub_bytes(DataKind::H, 0).unwrap(), 64);
        assert_eq!(m.bursts_per_rank(DataKind::H, 0).unwrap(), 1);
        let lo = m.locate(&p, 3, DataKind::H, 0, 0).unwrap();
        let hi = m.locate(&p, 3, DataKind::H, 0, 64).unwrap();
        assert_eq!(lo.rank, 0);
        assert_eq!(hi.rank, 1);
        assert_eq!((lo.bank, lo.row, lo.col), (hi.bank, hi.row, hi.col));
        // Adjacent vertices always land in different banks.
        let a = m.locate(&p, 10, DataKind::H, 0, 0).unwrap();
        let b = m.locate(&p, 11, DataKind::H, 0, 0).unwrap();
        assert_ne!(a.bank, b.bank);
    }

    #[test]
    fn duplicated_replicas_share_coordinates() {
        let g = crate::graph::generate_power_law(200, 8.0, 5).unwrap();
        let p = hybrid_partition(&g, &cfg(1, 4, PartitionMode::Hybrid, 0.25)).unwrap();
        let m = AddressMap::build(&p, &model(4), DramGeometry::default()).unwrap();
        // Slots of duplicated vertices precede all homed vertices in
        // every bank sequence, making replica coordinates DIMM-wide.
        let dup = p.duplicated_in_channel(0).to_vec();
        assert!(!dup.is_empty());
        for &v in &dup {
            let loc = m.locate(&p, v, DataKind::A, 1, 0).unwrap();
            for w in 0..200u32 {
                if !p.is_duplicated(w) && w % 16 == v % 16 {
                    let lw = m.locate(&p, w, DataKind::A, 1, 0).unwrap();
                    assert!(
                        (lw.row, lw.col) > (loc.row, loc.col),
                        "homed vertex {w} precedes duplicated {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn locate_is_injective_per_region() {
        let g = crate::graph::generate_power_law(400, 8.0, 9).unwrap();
        let p = hybrid_partition(&g, &cfg(2, 4, PartitionMode::Hybrid, 0.3)).unwrap();
        let m = AddressMap::build(&p, &model(2), DramGeometry::default()).unwrap();
        let mut seen = HashSet::new();
        for v in 0..400u32 {
            for off in (0..m.vec_bytes(DataKind::H, 1).unwrap()).step_by(2) {
                let loc = m.locate(&p, v, DataKind::H, 1, off).unwrap();
                assert!(seen.insert((loc.channel, loc.dimm, loc.rank, loc.bank, loc.row, loc.col, off % 8)),
                    "collision at vertex {v} offset {off}");
            }
        }
    }

    #[test]
    fn sub_vector_never_crosses_a_row() {
        let g = ring(100);
        let p = even_partition(&g, &cfg(1, 1, PartitionMode::Even, 0.0)).unwrap();
        let big = ModelConfig::with_chain(Variant::Gcn, 602, 256, 8, 2, 4, 1);
        let m = AddressMap::build(&p, &big, DramGeometry::default()).unwrap();
        let sub = m.sub_bytes(DataKind::H, 0).unwrap();
        assert_eq!(sub, 1216);
        for v in 0..100u32 {
            let first = m.locate(&p, v, DataKind::H, 0, 0).unwrap();
            let last = m.locate(&p, v, DataKind::H, 0, 1203).unwrap();
            assert_eq!(first.row, last.row);
            assert!(last.col * 8 + 8 <= first.col * 8 + sub);
        }
    }

    #[test]
    fn region_overflow_is_a_capacity_error() {
        let g = ring(2000);
        let p = even_partition(&g, &cfg(1, 1, PartitionMode::Even, 0.0)).unwrap();
        let tight = DramGeometry {
            row_bytes: 8192,
            num_banks: 16,
            rows_per_bank: 4,
        };
        let err = AddressMap::build(&p, &model(4), tight).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }
}
