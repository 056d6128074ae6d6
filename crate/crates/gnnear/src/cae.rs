//! Host-side acceleration engine model: shard planning for the
//! near-memory reduce phase, window-based interval scheduling, partial
//! merging, and GEMM/VPU cost formulas.

use crate::graph::CsrGraph;
use crate::nme::NmeConfig;
use crate::partition::Placement;
use crate::{Error, Result};

/// Host engine parameters: one systolic GEMM array, a SIMD vector unit,
/// and a weight scratchpad, shared by all memory channels.
#[derive(Debug, Clone)]
pub struct CaeConfig {
    pub gemm_dim: u32,
    pub gemm_hz: u64,
    pub vpu_cores: u32,
    pub vpu_simd: u32,
    pub scratchpad_bytes: u64,
    pub mem_channels: u32,
}

impl Default for CaeConfig {
    fn default() -> CaeConfig {
        CaeConfig {
            gemm_dim: 128,
            gemm_hz: 700_000_000,
            vpu_cores: 32,
            vpu_simd: 16,
            scratchpad_bytes: 16 * 1024 * 1024,
            mem_channels: 4,
        }
    }
}

impl CaeConfig {
    pub fn vpu_lanes(&self) -> u32 {
        self.vpu_cores * self.vpu_simd
    }

    /// Peak MAC throughput of the systolic array, in FLOP/s (2 per MAC).
    pub fn gemm_peak_flops(&self) -> f64 {
        2.0 * self.gemm_dim as f64 * self.gemm_dim as f64 * self.gemm_hz as f64
    }

    pub fn check_weights_fit(&self, resident_bytes: u64) -> Result<()> {
        if resident_bytes > self.scratchpad_bytes {
            return Err(Error::Config(format!(
                "weights need {resident_bytes} bytes, scratchpad holds {}",
                self.scratchpad_bytes
            )));
        }
        Ok(())
    }
}

/// Edge-matrix tiling: R source rows per shard, C destinations per
/// interval. The NME buffer must hold R source vectors plus C partial
/// accumulators at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardConfig {
    pub r: u32,
    pub c: u32,
}

impl Default for ShardConfig {
    fn default() -> ShardConfig {
        ShardConfig { r: 1, c: 127 }
    }
}

impl ShardConfig {
    pub fn validate(&self, nme: &NmeConfig) -> Result<()> {
        if self.r == 0 || self.c == 0 {
            return Err(Error::Config("shard dims must be nonzero".into()));
        }
        if self.r + self.c > nme.buffer_vectors {
            return Err(Error::Config(format!(
                "shard {}x{} exceeds the {}-vector buffer budget",
                self.r, self.c, nme.buffer_vectors
            )));
        }
        Ok(())
    }
}

pub fn num_intervals(num_vertices: u32, c: u32) -> u64 {
    (num_vertices as u64).div_ceil(c as u64)
}

pub fn interval_of(dst: u32, c: u32) -> u64 {
    dst as u64 / c as u64
}

pub fn interval_range(interval: u64, num_vertices: u32, c: u32) -> std::ops::Range<u32> {
    let start = (interval * c as u64).min(num_vertices as u64) as u32;
    let end = ((interval + 1) * c as u64).min(num_vertices as u64) as u32;
    start..end
}

/// DIMM that processes source u's edges into `interval`. Non-duplicated
/// sources always reduce on their home DIMM; duplicated sources follow
/// the interval owner (or DIMM 0 when interleaving is off).
pub fn edge_processor(p: &Placement, interleave: bool, u: u32, interval: u64) -> (u32, u32) {
    let ch = p.channel(u);
    let dimm = if p.is_duplicated(u) {
        if interleave {
            p.interval_owner(interval)
        } else {
            0
        }
    } else {
        p.home_dimm(u)
    };
    (ch, dimm)
}

/// One non-empty shard of a DIMM's reduce stream: the source rows it
/// loads and the edges it accumulates. Sources are global vertex ids in
/// blocks of R; a triggered block loads every row assigned to the DIMM
/// in its range, edges or not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardWork {
    pub interval: u64,
    pub block: u32,
    pub loads: Vec<u32>,
    /// (source, destination) pairs, destination within the interval.
    pub edges: Vec<(u32, u32)>,
}

/// Per-(channel, dimm) ordered shard streams for one reduce direction.
///
/// `transposed` swaps edge roles: destinations become gradient receivers
/// aggregating from their forward neighbors, which over a symmetric
/// adjacency enumerates the same (u, v) pairs. `shared_loads` is the
/// narrow-shard behavior; without it every edge fetches its own source
/// row (no reuse, blocks of one edge each).
pub fn generate_shards(
    graph: &CsrGraph,
    placement: &Placement,
    shard: ShardConfig,
    interleave: bool,
    shared_loads: bool,
) -> Result<Vec<Vec<Vec<ShardWork>>>> {
    let n = graph.num_vertices;
    if placement.num_vertices() != n {
        return Err(Error::Config("placement does not cover the graph".into()));
    }
    let chs = placement.num_channels as usize;
    let dimms = placement.dimms_per_channel as usize;
    let mut streams: Vec<Vec<Vec<ShardWork>>> = vec![vec![Vec::new(); dimms]; chs];

    for interval in 0..num_intervals(n, shard.c) {
        let dsts = interval_range(interval, n, shard.c);
        // Edges of the interval, grouped per processing DIMM and block.
        let mut groups: Vec<Vec<(u32, Vec<(u32, u32)>)>> = vec![Vec::new(); chs * dimms];
        for v in dsts.clone() {
            for (u, _) in crate::model::closed_neighborhood(graph, v) {
                let (ch, dm) = edge_processor(placement, interleave, u, interval);
                let block = if shared_loads { u / shard.r } else { u32::MAX };
                let slot = &mut groups[ch as usize * dimms + dm as usize];
                match slot.iter_mut().find(|(b, _)| *b == block && shared_loads) {
                    Some((_, edges)) => edges.push((u, v)),
                    None => slot.push((block, vec![(u, v)])),
                }
            }
        }
        for ch in 0..chs {
            for dm in 0..dimms {
                let mut slot = std::mem::take(&mut groups[ch * dimms + dm]);
                slot.sort_by_key(|(b, edges)| (*b, edges[0]));
                for (block, mut edges) in slot {
                    edges.sort_unstable();
                    let loads = if shared_loads {
                        let start = block * shard.r;
                        let end = start.saturating_add(shard.r).min(n);
                        (start..end)
                            .filter(|&s| {
                                edge_processor(placement, interleave, s, interval)
                                    == (ch as u32, dm as u32)
                            })
                            .collect()
                    } else {
                        edges.iter().map(|&(u, _)| u).collect()
                    };
                    streams[ch][dm].push(ShardWork {
                        interval,
                        block,
                        loads,
                        edges,
                    });
                }
            }
        }
    }
    Ok(streams)
}

/// Local source-row loads for one reduce pass, in vectors, without
/// materializing shard streams. Matches generate_shards' load counts.
pub fn count_shard_loads(
    graph: &CsrGraph,
    placement: &Placement,
    shard: ShardConfig,
    interleave: bool,
    shared_loads: bool,
) -> u64 {
    let n = graph.num_vertices;
    if !shared_loads {
        return (0..n)
            .map(|v| graph.degree_tilde(v) as u64)
            .sum();
    }
    let chs = placement.num_channels;
    let dimms = placement.dimms_per_channel as usize;
    let num_blocks = n.div_ceil(shard.r) as usize;
    // Assigned rows per (dimm, block), split by duplication so the
    // interval owner's share can be added per interval.
    let mut homed = vec![vec![0u32; num_blocks]; chs as usize * dimms];
    let mut dup = vec![vec![0u32; num_blocks]; chs as usize];
    for u in 0..n {
        let ch = placement.channel(u) as usize;
        let b = (u / shard.r) as usize;
        if placement.is_duplicated(u) {
            dup[ch][b] += 1;
        } else {
            homed[ch * dimms + placement.home_dimm(u) as usize][b] += 1;
        }
    }

    let mut loads = 0u64;
    let mut marked: Vec<Vec<bool>> = vec![vec![false; num_blocks]; chs as usize * dimms];
    let mut touched: Vec<Vec<u32>> = vec![Vec::new(); chs as usize * dimms];
    for interval in 0..num_intervals(n, shard.c) {
        for v in interval_range(interval, n, shard.c) {
            for (u, _) in crate::model::closed_neighborhood(graph, v) {
                let (ch, dm) = edge_processor(placement, interleave, u, interval);
                let key = ch as usize * dimms + dm as usize;
                let b = (u / shard.r) as usize;
                if !marked[key][b] {
                    marked[key][b] = true;
                    touched[key].push(b as u32);
                }
            }
        }
        for ch in 0..chs as usize {
            for dm in 0..dimms {
                let key = ch * dimms + dm;
                let owner = if interleave {
                    placement.interval_owner(interval) as usize == dm
                } else {
                    dm == 0
                };
                for &b in &touched[key] {
                    let mut rows = homed[key][b as usize] as u64;
                    if owner {
                        rows += dup[ch][b as usize] as u64;
                    }
                    loads += rows;
                    marked[key][b as usize] = false;
                }
                touched[key].clear();
            }
        }
    }
    loads
}

/// Window-bounded interval scheduler: intervals may be in flight only
/// within W of the committed frontier, and commits are strictly
/// sequential, so the commit log is gapless and increasing.
#[derive(Debug, Clone)]
pub struct WindowScheduler {
    pub w: u64,
    pub num_intervals: u64,
    committed: u64,
    log: Vec<u64>,
}

impl WindowScheduler {
    pub fn new(w: u64, num_intervals: u64) -> Result<WindowScheduler> {
        if w == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(WindowScheduler {
            w,
            num_intervals,
            committed: 0,
            log: Vec::new(),
        })
    }

    pub fn can_issue(&self, interval: u64) -> bool {
        interval < self.num_intervals && interval < self.committed + self.w
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    pub fn commit(&mut self, interval: u64) -> Result<()> {
        if interval != self.committed {
            return Err(Error::Protocol(format!(
                "commit of interval {interval} while frontier is {}",
                self.committed
            )));
        }
        self.committed += 1;
        self.log.push(interval);
        Ok(())
    }

    pub fn commit_log(&self) -> &[u64] {
        &self.log
    }

    pub fn finished(&self) -> bool {
        self.committed == self.num_intervals
    }
}

/// Elementwise accumulation of one partial result into a window-buffer
/// slot. The slot starts zeroed; a single-DIMM system degenerates to a
/// plain copy.
pub fn merge_partials(slot: &mut [f32], partial: &[f32]) {
    debug_assert_eq!(slot.len(), partial.len());
    for (a, p) in slot.iter_mut().zip(partial) {
        *a += p;
    }
}

/// VPU cycles to merge one d-element partial vector.
pub fn merge_cycles(cae: &CaeConfig, d: u32) -> u64 {
    (d as u64).div_ceil(cae.vpu_lanes() as u64)
}

/// VPU cycles for an elementwise pass (activation, mask, loss) or an
/// outer-product accumulation, at one MAC per lane per cycle.
pub fn vpu_cycles(cae: &CaeConfig, elements: u64) -> u64 {
    elements.div_ceil(cae.vpu_lanes() as u64)
}

/// Systolic GEMM cycles for an M x K by K x N product, tiled to the
/// array dimension with a K + dim fill-drain term per tile.
pub fn update_cost(cae: &CaeConfig, m: u64, k: u64, n: u64) -> Result<u64> {
    if m == 0 || k == 0 || n == 0 {
        return Err(Error::Domain(format!("degenerate GEMM {m}x{k}x{n}")));
    }
    let dim = cae.gemm_dim as u64;
    Ok(m.div_ceil(dim) * n.div_ceil(dim) * (k + dim))
}

/// Reduce-phase traffic ratio of running combination after aggregation
/// versus before, for one linear layer: (2E*d1 + V*d2) / (2E*d2 + V*d1)
/// where `edge_terms` is the 2E directed count including self terms.
pub fn ieo_traffic_ratio(num_vertices: u64, edge_terms: u64, d1: u64, d2: u64) -> f64 {
    let num = (edge_terms * d1 + num_vertices * d2) as f64;
    let den = (edge_terms * d2 + num_vertices * d1) as f64;
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{even_partition, PartitionConfig, PartitionMode};

    fn place(g: &CsrGraph, chs: u32, dimms: u32) -> Placement {
        let cfg = PartitionConfig {
            num_channels: chs,
            dimms_per_channel: dimms,
            mode: PartitionMode::Even,
            ..PartitionConfig::default()
        };
        even_partition(g, &cfg).unwrap()
    }

    #[test]
    fn gemm_peak_is_twenty_two_tflops() {
        let c = CaeConfig::default();
        assert!((c.gemm_peak_flops() - 22.9e12).abs() < 0.1e12);
        assert_eq!(c.vpu_lanes(), 512);
    }

    #[test]
    fn shard_budget_enforced() {
        let nme = NmeConfig::default();
        ShardConfig { r: 1, c: 127 }.validate(&nme).unwrap();
        ShardConfig { r: 64, c: 64 }.validate(&nme).unwrap();
        assert!(ShardConfig { r: 2, c: 127 }.validate(&nme).is_err());
        assert!(ShardConfig { r: 0, c: 8 }.validate(&nme).is_err());
    }

    #[test]
    fn update_cost_tiles() {
        let c = CaeConfig::default();
        assert_eq!(update_cost(&c, 128, 256, 256).unwrap(), 2 * (256 + 128));
        assert_eq!(
            update_cost(&c, 1, 256, 256).unwrap(),
            update_cost(&c, 128, 256, 256).unwrap()
        );
        assert!(update_cost(&c, 4, 0, 4).is_err());
    }

    #[test]
    fn merge_adds_elementwise() {
        let mut slot = vec![0.0f32; 2];
        merge_partials(&mut slot, &[1.0, 1.0]);
        merge_partials(&mut slot, &[2.0, 0.0]);
        assert_eq!(slot, vec![3.0, 1.0]);
        let mut single = vec![0.0f32; 2];
        merge_partials(&mut single, &[5.0, -1.0]);
        assert_eq!(single, vec![5.0, -1.0]);
        assert_eq!(merge_cycles(&CaeConfig::default(), 512), 1);
        assert_eq!(merge_cycles(&CaeConfig::default(), 513), 2);
    }

    #[test]
    fn window_commits_are_gapless() {
        let mut w = WindowScheduler::new(4, 6).unwrap();
        assert!(w.can_issue(0) && w.can_issue(3));
        assert!(!w.can_issue(4));
        assert!(w.commit(1).is_err());
        for i in 0..6 {
            w.commit(i).unwrap();
        }
        assert!(w.finished());
        assert_eq!(w.commit_log(), &[0, 1, 2, 3, 4, 5]);
        assert!(WindowScheduler::new(0, 3).is_err());
    }

    #[test]
    fn single_source_shard_shares_one_load() {
        // Vertex 0 feeds three destinations in one interval.
        let g = CsrGraph::from_edges(4, &[(0, 1), (0, 2), (0, 3)], true).unwrap();
        let p = place(&g, 1, 1);
        let s = generate_shards(&g, &p, ShardConfig { r: 1, c: 127 }, true, true).unwrap();
        let work: &Vec<ShardWork> = &s[0][0];
        let zero_block: Vec<_> = work.iter().filter(|w| w.block == 0).collect();
        assert_eq!(zero_block.len(), 1);
        assert_eq!(zero_block[0].loads, vec![0]);
        // Self edge (0,0) plus the three fan-out edges share the load.
        assert_eq!(zero_block[0].edges.len(), 4);
    }

    #[test]
    fn empty_intervals_emit_nothing() {
        // Edges only at the ends; interval 2 covers destinations {4, 5}
        // whose sole sources are their self loops on DIMMs 0 and 1, so
        // DIMMs 2 and 3 have no work there at all.
        let g = CsrGraph::from_edges(8, &[(0, 1), (6, 7)], true).unwrap();
        let p = place(&g, 1, 4);
        let s = generate_shards(&g, &p, ShardConfig { r: 2, c: 2 }, true, true).unwrap();
        for dm in [2usize, 3] {
            assert!(
                s[0][dm].iter().all(|w| w.interval != 2),
                "dimm {dm} should skip interval 2"
            );
        }
        for dm in 0..4 {
            for w in &s[0][dm] {
                assert!(!w.edges.is_empty());
                assert!(!w.loads.is_empty());
            }
        }
    }

    #[test]
    fn blocked_loads_cover_assigned_rows() {
        let g = crate::graph::generate_power_law(200, 6.0, 21).unwrap();
        let p = place(&g, 2, 2);
        let shard = ShardConfig { r: 8, c: 50 };
        let s = generate_shards(&g, &p, shard, true, true).unwrap();
        let mut total_loads = 0u64;
        for ch in 0..2 {
            for dm in 0..2 {
                for w in &s[ch][dm] {
                    assert!(w.loads.len() <= shard.r as usize);
                    for &u in &w.loads {
                        assert_eq!(u / shard.r, w.block);
                        assert_eq!(
                            edge_processor(&p, true, u, w.interval),
                            (ch as u32, dm as u32)
                        );
                    }
                    for &(u, v) in &w.edges {
                        assert!(w.loads.contains(&u));
                        assert!(interval_range(w.interval, 200, shard.c).contains(&v));
                    }
                    total_loads += w.loads.len() as u64;
                }
            }
        }
        assert_eq!(
            total_loads,
            count_shard_loads(&g, &p, shard, true, true)
        );
    }

    #[test]
    fn per_edge_mode_counts_every_edge_term() {
        let g = crate::graph::generate_power_law(300, 8.0, 4).unwrap();
        let p = place(&g, 1, 4);
        let edge_terms: u64 = (0..300).map(|v| g.degree_tilde(v) as u64).sum();
        assert_eq!(
            count_shard_loads(&g, &p, ShardConfig::default(), true, false),
            edge_terms
        );
        let shards = generate_shards(&g, &p, ShardConfig::default(), true, false).unwrap();
        let loads: u64 = shards
            .iter()
            .flatten()
            .flatten()
            .map(|w| w.loads.len() as u64)
            .sum();
        assert_eq!(loads, edge_terms);
    }

    #[test]
    fn narrow_shards_minimize_loads_on_power_law() {
        let g = crate::graph::generate_power_law(2000, 12.0, 9).unwrap();
        let p = place(&g, 1, 4);
        let mut best = None;
        for (r, c) in [(1u32, 127u32), (8, 120), (64, 64), (127, 1)] {
            let loads = count_shard_loads(&g, &p, ShardConfig { r, c }, true, true);
            if let Some((br, _bc, bl)) = best {
                assert!(loads > bl, "({r},{c}) loads {loads} not worse than ({br},?)");
            }
            best = Some((r, c, loads));
        }
    }

    #[test]
    fn interleave_off_pins_duplicated_work_to_dimm_zero() {
        let g = crate::graph::generate_power_law(400, 10.0, 2).unwrap();
        let cfg = PartitionConfig {
            num_channels: 1,
            dimms_per_channel: 4,
            lambda: 0.25,
            mode: PartitionMode::Hybrid,
            ..PartitionConfig::default()
        };
        let p = crate::partition::hybrid_partition(&g, &cfg).unwrap();
        let dup = p
            .duplicated_in_channel(0)
            .first()
            .copied()
            .expect("some duplicated vertex");
        for interval in 0..5 {
            assert_eq!(edge_processor(&p, false, dup, interval), (0, 0));
        }
        let owners: Vec<u32> = (0..4)
            .map(|i| edge_processor(&p, true, dup, i).1)
            .collect();
        assert_eq!(owners, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ieo_ratio_closed_form() {
        let r = ieo_traffic_ratio(10_000, 4_000_000, 602, 256);
        assert!((r - 2.34).abs() < 0.01, "ratio {r}");
        assert_eq!(ieo_traffic_ratio(5, 100, 64, 64), 1.0);
    }
}
