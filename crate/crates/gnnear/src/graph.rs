//! Graph loading, CSR storage, degrees, and synthetic workload generation.
//!
//! Conventions used throughout the simulator:
//! - Graphs are stored as CSR over directed edges; a symmetric graph keeps
//!   both (u,v) and (v,u) in `col_idx`.
//! - Self-loops are implicit. Every aggregation over \~N(v) includes v
//!   itself, so explicit u==u entries are dropped at load/build time and
//!   `degree` counts proper neighbors only. `degree_tilde = degree + 1`.
//! - Vertex ids are u32; offsets are u64 so billion-edge CSR files stay
//!   representable even though tests use small graphs.

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};

/// Compressed sparse row adjacency. `row_ptr.len() == num_vertices + 1`,
/// `col_idx.len() == row_ptr[num_vertices]`, and each row's targets are
/// sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrGraph {
    pub num_vertices: u32,
    pub row_ptr: Vec<u64>,
    pub col_idx: Vec<u32>,
    /// True when the stored edge set is symmetric (both directions kept).
    pub symmetric: bool,
}

/// Per-vertex degrees. `degree` excludes the implicit self-loop,
/// `degree_tilde` includes it.
#[derive(Debug, Clone)]
pub struct DegreeTable {
    pub degree: Vec<u32>,
    pub degree_tilde: Vec<u32>,
}

impl CsrGraph {
    /// Build from an edge list. Self-loops are dropped; duplicates are
    /// collapsed; when `symmetrize` is set each edge is mirrored.
    pub fn from_edges(num_vertices: u32, edges: &[(u32, u32)], symmetrize: bool) -> Result<CsrGraph> {
        let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(edges.len() * if symmetrize { 2 } else { 1 });
        for &(u, v) in edges {
            if u >= num_vertices || v >= num_vertices {
                return Err(Error::Input(format!(
                    "edge ({u}, {v}) out of range for {num_vertices} vertices"
                )));
            }
            if u == v {
                continue; // implicit self-loop
            }
            pairs.push((u, v));
            if symmetrize {
                pairs.push((v, u));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut row_ptr = vec![0u64; num_vertices as usize + 1];
        for &(u, _) in &pairs {
            row_ptr[u as usize + 1] += 1;
        }
        for i in 0..num_vertices as usize {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = pairs.into_iter().map(|(_, v)| v).collect();
        Ok(CsrGraph {
            num_vertices,
            row_ptr,
            col_idx,
            symmetric: symmetrize,
        })
    }

    /// Stored (directed) edge count.
    pub fn num_directed_edges(&self) -> u64 {
        self.col_idx.len() as u64
    }

    /// Proper neighbors of v (self excluded), sorted ascending.
    pub fn neighbors(&self, v: u32) -> &[u32] {
        let lo = self.row_ptr[v as usize] as usize;
        let hi = self.row_ptr[v as usize + 1] as usize;
        &self.col_idx[lo..hi]
    }

    pub fn degree(&self, v: u32) -> u32 {
        (self.row_ptr[v as usize + 1] - self.row_ptr[v as usize]) as u32
    }

    /// degree + 1: the self-loop-inclusive fan-in used by every aggregator.
    pub fn degree_tilde(&self, v: u32) -> u32 {
        self.degree(v) + 1
    }

    pub fn degrees(&self) -> DegreeTable {
        let degree: Vec<u32> = (0..self.num_vertices).map(|v| self.degree(v)).collect();
        let degree_tilde = degree.iter().map(|d| d + 1).collect();
        DegreeTable { degree, degree_tilde }
    }

    pub fn average_degree(&self) -> f64 {
        if self.num_vertices == 0 {
            return 0.0;
        }
        self.col_idx.len() as f64 / self.num_vertices as f64
    }

    /// Structural invariants: monotone row_ptr, in-range targets, sorted
    /// deduplicated rows, no stored self-loops.
    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.num_vertices as usize + 1 {
            return Err(Error::Input("row_ptr length mismatch".into()));
        }
        if self.row_ptr[0] != 0 || *self.row_ptr.last().unwrap() != self.col_idx.len() as u64 {
            return Err(Error::Input("row_ptr endpoints mismatch".into()));
        }
        for v in 0..self.num_vertices as usize {
            if self.row_ptr[v] > self.row_ptr[v + 1] {
                return Err(Error::Input(format!("row_ptr not monotone at {v}")));
            }
            let row = &self.col_idx[self.row_ptr[v] as usize..self.row_ptr[v + 1] as usize];
            for (i, &t) in row.iter().enumerate() {
                if t >= self.num_vertices {
                    return Err(Error::Input(format!("target {t} out of range")));
                }
                if t as usize == v {
                    return Err(Error::Input(format!("stored self-loop at {v}")));
                }
                if i > 0 && row[i - 1] >= t {
                    return Err(Error::Input(format!("row {v} unsorted or duplicated")));
                }
            }
        }
        if self.symmetric {
            self.check_symmetric()?;
        }
        Ok(())
    }

    /// Verify that every stored edge has its mirror.
    pub fn check_symmetric(&self) -> Result<()> {
        for v in 0..self.num_vertices {
            for &u in self.neighbors(v) {
                if self.neighbors(u).binary_search(&v).is_err() {
                    return Err(Error::Input(format!("edge ({v}, {u}) lacks mirror")));
                }
            }
        }
        Ok(())
    }
}

/// GCN edge weight 1/sqrt(degree_tilde(u) * degree_tilde(v)). `u` must be
/// in \~N(v) (v itself or a stored neighbor).
pub fn gcn_edge_weight(g: &CsrGraph, u: u32, v: u32) -> Result<f32> {
    if u != v && g.neighbors(v).binary_search(&u).is_err() {
        return Err(Error::Domain(format!("{u} is not in ~N({v})")));
    }
    let du = g.degree_tilde(u) as f64;
    let dv = g.degree_tilde(v) as f64;
    Ok((1.0 / (du * dv).sqrt()) as f32)
}

/// Degree histogram over half-open buckets: (-inf, t0], (t0, t1], ...,
/// (t_last, inf). Thresholds must be strictly increasing. The returned
/// counts have `thresholds.len() + 1` entries and sum to `num_vertices`.
pub fn degree_histogram(g: &CsrGraph, thresholds: &[u32]) -> Result<Vec<u64>> {
    for w in thresholds.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Domain("thresholds must be strictly increasing".into()));
        }
    }
    let mut counts = vec![0u64; thresholds.len() + 1];
    for v in 0..g.num_vertices {
        let d = g.degree(v);
        let bucket = thresholds.partition_point(|&t| t < d);
        counts[bucket] += 1;
    }
    Ok(counts)
}

// ── Synthetic graphs ────────────────────────────────────────────────────

/// Seeded preferential-attachment generator. Produces a connected symmetric
/// power-law graph with mean stored degree close to `avg_degree` (each new
/// vertex attaches ~avg_degree/2 edges; duplicates are collapsed).
pub fn generate_power_law(num_vertices: u32, avg_degree: f64, seed: u64) -> Result<CsrGraph> {
    if avg_degree >= num_vertices as f64 {
        return Err(Error::Domain(format!(
            "avg_degree {avg_degree} must be below num_vertices {num_vertices}"
        )));
    }
    if avg_degree < 0.0 {
        return Err(Error::Domain("avg_degree must be non-negative".into()));
    }
    let n = num_vertices as usize;
    let m = (avg_degree / 2.0).round() as usize;
    if n == 0 || m == 0 {
        return CsrGraph::from_edges(num_vertices, &[], true);
    }
    let m = m.min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(n * m);
    // Endpoint list: each edge contributes both endpoints, so sampling a
    // uniform entry is degree-proportional sampling.
    let mut endpoints: Vec<u32> = Vec::with_capacity(2 * n * m);

    // Seed clique over the first m+1 vertices.
    let seed_sz = (m + 1).min(n);
    for a in 0..seed_sz {
        for b in (a + 1)..seed_sz {
            edges.push((a as u32, b as u32));
            endpoints.push(a as u32);
            endpoints.push(b as u32);
        }
    }
    let mut picked: Vec<u32> = Vec::with_capacity(m);
    for v in seed_sz..n {
        picked.clear();
        // Rejection-sample m distinct attachment targets.
        let mut guard = 0usize;
        while picked.len() < m && guard < 64 * m + 64 {
            guard += 1;
            let t = endpoints[rng.gen_range(0..endpoints.len())];
            if t != v as u32 && !picked.contains(&t) {
                picked.push(t);
            }
        }
        for &t in &picked {
            edges.push((v as u32, t));
            endpoints.push(v as u32);
            endpoints.push(t);
        }
    }
    CsrGraph::from_edges(num_vertices, &edges, true)
}

// ── Presets ─────────────────────────────────────────────────────────────

/// Published dataset shapes, used for closed-form traffic and intensity
/// estimates. Metadata only; no preset edge lists ship with the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GraphPreset {
    /// ogbn-products
    PT,
    /// Reddit
    RD,
    /// Yelp
    YP,
    /// Amazon
    AM,
}

#[derive(Debug, Clone, Copy)]
pub struct PresetStats {
    pub num_vertices: u64,
    pub num_edges: u64,
    pub feature_dim: u32,
    pub avg_degree: f64,
}

impl GraphPreset {
    pub fn parse(name: &str) -> Result<GraphPreset> {
        match name.to_ascii_uppercase().as_str() {
            "PT" => Ok(GraphPreset::PT),
            "RD" => Ok(GraphPreset::RD),
            "YP" => Ok(GraphPreset::YP),
            "AM" => Ok(GraphPreset::AM),
            other => Err(Error::Config(format!("unknown graph preset '{other}'"))),
        }
    }

    pub fn stats(self) -> PresetStats {
        match self {
            GraphPreset::PT => PresetStats {
                num_vertices: 132_534,
                num_edges: 39_561_252,
                feature_dim: 128,
                avg_degree: 597.0,
            },
            GraphPreset::RD => PresetStats {
                num_vertices: 232_965,
                num_edges: 114_615_892,
                feature_dim: 602,
                avg_degree: 492.9,
            },
            GraphPreset::YP => PresetStats {
                num_vertices: 716_847,
                num_edges: 6_977_410,
                feature_dim: 300,
                avg_degree: 19.5,
            },
            GraphPreset::AM => PresetStats {
                num_vertices: 2_449_029,
                num_edges: 123_718_280,
                feature_dim: 100,
                avg_degree: 101.0,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphPreset::PT => "PT",
            GraphPreset::RD => "RD",
            GraphPreset::YP => "YP",
            GraphPreset::AM => "AM",
        }
    }
}

// ── IO ──────────────────────────────────────────────────────────────────

/// Text edge list: one `u v` pair per line, `#` comments and blank lines
/// allowed. Vertex count is the max id + 1 unless `num_vertices` forces a
/// larger graph.
pub fn load_edge_list<R: Read>(reader: R, symmetrize: bool, num_vertices: Option<u32>) -> Result<CsrGraph> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    let mut edges = Vec::new();
    let mut max_v: u64 = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, idx: usize| -> Result<u64> {
            tok.ok_or(Error::Parse {
                line: idx + 1,
                msg: "expected two vertex ids".into(),
            })?
            .parse::<u64>()
            .map_err(|e| Error::Parse {
                line: idx + 1,
                msg: format!("bad vertex id: {e}"),
            })
        };
        let u = parse(it.next(), idx)?;
        let v = parse(it.next(), idx)?;
        if it.next().is_some() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "trailing tokens after edge".into(),
            });
        }
        if u > u32::MAX as u64 || v > u32::MAX as u64 {
            return Err(Error::Input(format!("vertex id beyond u32 at line {}", idx + 1)));
        }
        max_v = max_v.max(u).max(v);
        edges.push((u as u32, v as u32));
    }
    let implied = if edges.is_empty() { 0 } else { max_v as u32 + 1 };
    let n = num_vertices.unwrap_or(implied).max(implied);
    CsrGraph::from_edges(n, &edges, symmetrize)
}

const CSR_MAGIC: &[u8; 4] = b"GNRC";
const CSR_VERSION: u32 = 1;
const CSR_SYMMETRIC_FLAG: u32 = 1 << 16;

/// Binary CSR: magic "GNRC", version u32 (low 16 bits format version, bit
/// 16 symmetric flag), num_vertices u64, num_edges u64, then row_ptr u64[]
/// and col_idx u32[], all little-endian.
pub fn write_csr<W: Write>(mut w: W, g: &CsrGraph) -> Result<()> {
    w.write_all(CSR_MAGIC)?;
    let version = CSR_VERSION | if g.symmetric { CSR_SYMMETRIC_FLAG } else { 0 };
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(g.num_vertices as u64).to_le_bytes())?;
    w.write_all(&(g.col_idx.len() as u64).to_le_bytes())?;
    for &p in &g.row_ptr {
        w.write_all(&p.to_le_bytes())?;
    }
    for &c in &g.col_idx {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_csr<R: Read>(mut r: R) -> Result<CsrGraph> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CSR_MAGIC {
        return Err(Error::Input("bad CSR magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version & 0xffff != CSR_VERSION {
        return Err(Error::Input(format!("unsupported CSR version {}", version & 0xffff)));
    }
    let symmetric = version & CSR_SYMMETRIC_FLAG != 0;
    r.read_exact(&mut b8)?;
    let num_vertices = u64::from_le_bytes(b8);
    if num_vertices > u32::MAX as u64 {
        return Err(Error::Input("num_vertices beyond u32".into()));
    }
    r.read_exact(&mut b8)?;
    let num_edges = u64::from_le_bytes(b8);
    let mut row_ptr = Vec::with_capacity(num_vertices as usize + 1);
    for _ in 0..=num_vertices {
        r.read_exact(&mut b8)?;
        row_ptr.push(u64::from_le_bytes(b8));
    }
    let mut col_idx = Vec::with_capacity(num_edges as usize);
    for _ in 0..num_edges {
        r.read_exact(&mut b4)?;
        col_idx.push(u32::from_le_bytes(b4));
    }
    let g = CsrGraph {
        num_vertices: num_vertices as u32,
        row_ptr,
        col_idx,
        symmetric,
    };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> CsrGraph {
        // 0 - 1 - 2
        CsrGraph::from_edges(3, &[(0, 1), (1, 2)], true).unwrap()
    }

    #[test]
    fn triangle_plus_pendant_degrees() {
        // Triangle 0-1-2 plus pendant 3 attached to 0.
        let g = CsrGraph::from_edges(4, &[(0, 1), (1, 2), (0, 2), (0, 3)], true).unwrap();
        assert_eq!(g.degree(0), 3);
        assert_eq!(g.degree(1), 2);
        assert_eq!(g.degree(2), 2);
        assert_eq!(g.degree(3), 1);
        assert_eq!(g.degree_tilde(0), 4);
        assert_eq!(g.num_directed_edges(), 8);
        g.validate().unwrap();
    }

    #[test]
    fn self_loops_dropped_and_duplicates_collapsed() {
        let g = CsrGraph::from_edges(3, &[(0, 0), (0, 1), (0, 1), (1, 2)], true).unwrap();
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.num_directed_edges(), 4);
    }

    #[test]
    fn gcn_weight_on_path() {
        // Path 0-1-2: degree_tilde = [2, 3, 2].
        let g = path3();
        let w = gcn_edge_weight(&g, 0, 1).unwrap();
        assert!((w - 1.0 / (2.0f32 * 3.0).sqrt()).abs() < 1e-7);
        let self_w = gcn_edge_weight(&g, 1, 1).unwrap();
        assert!((self_w - 1.0 / 3.0).abs() < 1e-7);
        assert!(gcn_edge_weight(&g, 0, 2).is_err());
    }

    #[test]
    fn histogram_on_path() {
        let g = path3();
        let h = degree_histogram(&g, &[1]).unwrap();
        assert_eq!(h, vec![2, 1]);
        assert!(degree_histogram(&g, &[3, 3]).is_err());
        let total: u64 = degree_histogram(&g, &[0, 1, 2]).unwrap().iter().sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let text = "# comment\n0 1\n1 2\n\n2 0\n";
        let g = load_edge_list(text.as_bytes(), true, None).unwrap();
        assert_eq!(g.num_vertices, 3);
        assert_eq!(g.degree(0), 2);
        let bad = load_edge_list("0 x\n".as_bytes(), true, None);
        assert!(matches!(bad, Err(Error::Parse { line: 1, .. })));
        let huge = load_edge_list("0 4294967296\n".as_bytes(), true, None);
        assert!(matches!(huge, Err(Error::Input(_))));
    }

    #[test]
    fn csr_binary_round_trip() {
        let g = generate_power_law(500, 8.0, 7).unwrap();
        let mut buf = Vec::new();
        write_csr(&mut buf, &g).unwrap();
        let g2 = read_csr(&buf[..]).unwrap();
        assert_eq!(g, g2);
        // Asymmetric graphs keep their flag through the round trip.
        let d = CsrGraph::from_edges(3, &[(0, 1), (1, 2)], false).unwrap();
        let mut buf = Vec::new();
        write_csr(&mut buf, &d).unwrap();
        assert_eq!(read_csr(&buf[..]).unwrap(), d);
    }

    #[test]
    fn csr_bad_magic_rejected() {
        let mut buf = Vec::new();
        write_csr(&mut buf, &path3()).unwrap();
        buf[0] = b'X';
        assert!(read_csr(&buf[..]).is_err());
    }

    #[test]
    fn power_law_mean_degree_near_target() {
        let g = generate_power_law(10_000, 20.0, 42).unwrap();
        let mean = g.average_degree();
        assert!((18.0..=22.0).contains(&mean), "mean degree {mean}");
        g.validate().unwrap();
        // Heavy tail: max degree far above the mean.
        let max_deg = (0..g.num_vertices).map(|v| g.degree(v)).max().unwrap();
        assert!(max_deg as f64 > 5.0 * mean, "max degree {max_deg}");
    }

    #[test]
    fn power_law_seeded_determinism() {
        let a = generate_power_law(1000, 10.0, 5).unwrap();
        let b = generate_power_law(1000, 10.0, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_power_law(1000, 10.0, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_rejects_bad_density() {
        assert!(generate_power_law(4, 10.0, 1).is_err());
    }

    #[test]
    fn presets_match_published_shapes() {
        let rd = GraphPreset::RD.stats();
        assert_eq!(rd.num_vertices, 232_965);
        assert_eq!(rd.num_edges, 114_615_892);
        assert_eq!(rd.feature_dim, 602);
        assert!((rd.avg_degree - 492.9).abs() < 1e-9);
        let pt = GraphPreset::PT.stats();
        assert_eq!((pt.num_vertices, pt.feature_dim), (132_534, 128));
        let yp = GraphPreset::YP.stats();
        assert_eq!((yp.num_vertices, yp.num_edges), (716_847, 6_977_410));
        let am = GraphPreset::AM.stats();
        assert_eq!((am.num_vertices, am.num_edges), (2_449_029, 123_718_280));
        assert!(GraphPreset::parse("rd").is_ok());
        assert!(GraphPreset::parse("nope").is_err());
    }
}
