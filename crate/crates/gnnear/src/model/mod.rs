//! Model configuration, parameters, and the dense state shared by the
//! reference trainer and the simulator's functional datapath.
//!
//! Numeric contract used everywhere: storage precision is FP32 or BF16
//! (round-to-nearest-even on every store); accumulation is always FP32;
//! per-vertex aggregation runs in ascending source order; GEMM dot
//! products run in ascending k. Fixing the order makes runs reproducible
//! and keeps the simulator and the reference within reassociation noise
//! of each other.

pub mod intensity;
pub mod opstream;
pub mod reference;

use crate::bf16::Bf16;
use crate::graph::CsrGraph;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Gcn,
    Gin,
    SageConv,
    Gat,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcn => "gcn",
            Variant::Gin => "gin",
            Variant::SageConv => "sageconv",
            Variant::Gat => "gat",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Variant::Gcn),
            "gin" => Ok(Variant::Gin),
            "sage" | "sageconv" => Ok(Variant::SageConv),
            "gat" => Ok(Variant::Gat),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }

    /// Whether the aggregator is a fixed linear operator over features,
    /// which is what lets combination run first (order interchange).
    /// GAT's weights depend on the features themselves.
    pub fn linear_aggregation(self) -> bool {
        !matches!(self, Variant::Gat)
    }

    pub fn all() -> [Variant; 4] {
        [Variant::Gcn, Variant::Gin, Variant::SageConv, Variant::Gat]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Per-layer (d_in, d_out). Layer l consumes h^l and produces h^{l+1}.
    pub dims: Vec<(u32, u32)>,
    /// 4 for FP32 storage, 2 for BF16 storage.
    pub element_bytes: u32,
    pub learning_rate: f32,
    /// GIN self-loop weight is 1 + eps; fixed, not trained.
    pub gin_eps: f32,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, dims: Vec<(u32, u32)>, element_bytes: u32, seed: u64) -> ModelConfig {
        ModelConfig {
            variant,
            dims,
            element_bytes,
            learning_rate: 0.01,
            gin_eps: 0.1,
            seed,
        }
    }

    /// in_dim -> hidden ... hidden -> classes over `num_layers` layers.
    pub fn with_chain(
        variant: Variant,
        in_dim: u32,
        hidden: u32,
        classes: u32,
        num_layers: usize,
        element_bytes: u32,
        seed: u64,
    ) -> ModelConfig {
        assert!(num_layers >= 1);
        let mut dims = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d_in = if l == 0 { in_dim } else { hidden };
            let d_out = if l == num_layers - 1 { classes } else { hidden };
            dims.push((d_in, d_out));
        }
        ModelConfig::new(variant, dims, element_bytes, seed)
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn classes(&self) -> u32 {
        self.dims.last().map(|d| d.1).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (l, w) in self.dims.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(Error::Config(format!(
                    "layer {l} emits {} elements but layer {} consumes {}",
                    w[0].1,
                    l + 1,
                    w[1].0
                )));
            }
        }
        if self.dims.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(Error::Config("zero layer dimension".into()));
        }
        if !(self.element_bytes == 2 || self.element_bytes == 4) {
            return Err(Error::Config(format!(
                "element_bytes must be 2 or 4, got {}",
                self.element_bytes
            )));
        }
        Ok(())
    }

    /// Round a value to the storage precision. Identity for FP32.
    pub fn store(&self, x: f32) -> f32 {
        if self.element_bytes == 2 {
            crate::bf16::round_store(x)
        } else {
            x
        }
    }

    pub fn store_row(&self, row: &mut [f32]) {
        if self.element_bytes == 2 {
            for x in row {
                *x = crate::bf16::round_store(*x);
            }
        }
    }

    /// Edge weights travel with instructions; in BF16 storage mode they
    /// are quantized to the wire format, in FP32 mode they keep full
    /// precision (the encoded immediate is then only a projection).
    pub fn edge_w(&self, w: f32) -> f32 {
        self.store(w)
    }
}

// ── Dense matrices ──────────────────────────────────────────────────────

/// Row-major FP32 matrix. All products accumulate sequentially in k so
/// results are reproducible and comparable across implementations.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Matrix {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (m x k) times other (k x n).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0f32;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        out
    }

    /// self (m x k) times other^T where other is (n x k).
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0f32;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[j * other.cols + k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// out += self^T (k x m)^T... self is (n x m), other (n x p):
    /// out (m x p) += self^T * other, accumulating over rows of self in
    /// ascending order. This is the weight-gradient shape.
    pub fn accum_at_b(&self, other: &Matrix, out: &mut Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(out.rows, self.cols);
        assert_eq!(out.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &ai) in a.iter().enumerate() {
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b.iter()) {
                    *d += ai * bj;
                }
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Max relative difference with an absolute floor, the comparison used
/// by the validation gates.
pub fn max_rel_diff(a: &[f32], b: &[f32], floor: f32) -> f32 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct GinParams {
    /// Second FC of the MLP; the first FC is the layer's `w`.
    pub w2: Matrix,
    pub b1: Vec<f32>,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    /// Attention projections folded against the score vector halves:
    /// score(v as destination) = c1 . h_v, score(u as source) = c2 . h_u.
    /// The underlying W1/W2/a are fixed after initialization, so only
    /// the folded d_in-length vectors are kept.
    pub c1: Vec<f32>,
    pub c2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Matrix,
    pub gin: Option<GinParams>,
    pub gat: Option<GatParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for x in m.data.iter_mut() {
        *x = rng.gen_range(-bound..=bound);
    }
    m
}

impl ModelParams {
    /// Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) weights, zero biases,
    /// drawn in a fixed per-layer order from a seeded stream.
    pub fn init(cfg: &ModelConfig) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.num_layers());
        for &(d_in, d_out) in &cfg.dims {
            let (d_in, d_out) = (d_in as usize, d_out as usize);
            let bound = 1.0 / (d_in as f32).sqrt();
            let w = sample_matrix(&mut rng, d_in, d_out, bound);
            let gin = (cfg.variant == Variant::Gin).then(|| GinParams {
                w2: sample_matrix(&mut rng, d_out, d_out, 1.0 / (d_out as f32).sqrt()),
                b1: vec![0.0; d_out],
                b2: vec![0.0; d_out],
            });
            let gat = (cfg.variant == Variant::Gat).then(|| {
                let w1 = sample_matrix(&mut rng, d_in, d_out, bound);
                let w2 = sample_matrix(&mut rng, d_in, d_out, bound);
                let ab = 1.0 / (d_out as f32).sqrt();
                let a1: Vec<f32> = (0..d_out).map(|_| rng.gen_range(-ab..=ab)).collect();
                let a2: Vec<f32> = (0..d_out).map(|_| rng.gen_range(-ab..=ab)).collect();
                let fold = |wm: &Matrix, a: &[f32]| -> Vec<f32> {
                    (0..d_in)
                        .map(|i| {
                            let mut acc = 0.0f32;
                            for (j, &aj) in a.iter().enumerate() {
                                acc += wm.data[i * d_out + j] * aj;
                            }
                            acc
                        })
                        .collect()
                };
                GatParams {
                    c1: fold(&w1, &a1),
                    c2: fold(&w2, &a2),
                }
            });
            layers.push(LayerParams { w, gin, gat });
        }
        ModelParams { layers }
    }

    /// Bytes of weight state that must stay resident on the central
    /// engine's scratchpad.
    pub fn resident_bytes(&self) -> u64 {
        let mut total = 0u64;
        for l in &self.layers {
            total += (l.w.data.len() * 4) as u64;
            if let Some(g) = &l.gin {
                total += (g.w2.data.len() * 4 + g.b1.len() * 4 + g.b2.len() * 4) as u64;
            }
            if let Some(g) = &l.gat {
                total += ((g.c1.len() + g.c2.len()) * 4) as u64;
            }
        }
        total
    }
}

// ── Feature store ───────────────────────────────────────────────────────

/// Dense per-layer state: h^0..h^L activations, retained aggregates a^l,
/// feature gradients delta^l (with respect to a^l), and masked gradients
/// delta'^l (with respect to the pre-activation input of the combine).
/// The reference trainer and the simulator both read and write this
/// shape, which is what makes their outputs directly comparable.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub h: Vec<Matrix>,
    pub a: Vec<Matrix>,
    pub delta: Vec<Matrix>,
    pub delta_masked: Vec<Matrix>,
    /// GIN: post-ReLU MLP hidden, needed to backprop the second FC.
    pub gin_r: Vec<Matrix>,
    /// GAT: attention weights per layer, one slot per (dst, source in
    /// sorted closed neighborhood) position.
    pub gat_alpha: Vec<Vec<f32>>,
}

impl FeatureStore {
    pub fn new(cfg: &ModelConfig, n: usize, x: Matrix) -> Result<FeatureStore> {
        let l = cfg.num_layers();
        if x.rows != n || x.cols != cfg.dims[0].0 as usize {
            return Err(Error::Config(format!(
                "input features are {}x{}, expected {}x{}",
                x.rows, x.cols, n, cfg.dims[0].0
            )));
        }
        let mut h = Vec::with_capacity(l + 1);
        h.push(x);
        for &(_, d_out) in &cfg.dims {
            h.push(Matrix::zeros(n, d_out as usize));
        }
        Ok(FeatureStore {
            h,
            a: cfg.dims.iter().map(|&(d_in, _)| Matrix::zeros(n, d_in as usize)).collect(),
            delta: cfg.dims.iter().map(|&(d_in, _)| Matrix::zeros(n, d_in as usize)).collect(),
            delta_masked: cfg.dims.iter().map(|&(_, d_out)| Matrix::zeros(n, d_out as usize)).collect(),
            gin_r: if cfg.variant == Variant::Gin {
                cfg.dims.iter().map(|&(_, d_out)| Matrix::zeros(n, d_out as usize)).collect()
            } else {
                Vec::new()
            },
            gat_alpha: if cfg.variant == Variant::Gat {
                vec![Vec::new(); l]
            } else {
                Vec::new()
            },
        })
    }
}

/// Per-layer effect of requesting combination-first order: it applies
/// only where the aggregator is linear in the features and the layer
/// shrinks its vectors, so running the transform first reduces the
/// volume flowing through the reduction.
pub fn effective_ieo(cfg: &ModelConfig, requested: bool) -> Vec<bool> {
    cfg.dims
        .iter()
        .map(|&(d_in, d_out)| requested && cfg.variant.linear_aggregation() && d_in > d_out)
        .collect()
}

/// Iterate the closed neighborhood of v in ascending vertex order,
/// yielding (vertex, slot index). The self vertex is merged into its
/// sorted position; slot indices are dense from 0.
pub fn closed_neighborhood<'a>(
    graph: &'a CsrGraph,
    v: u32,
) -> impl Iterator<Item = (u32, usize)> + 'a {
    let neigh = graph.neighbors(v);
    let pos = neigh.partition_point(|&u| u < v);
    let head = neigh[..pos].iter().copied();
    let tail = neigh[pos..].iter().copied();
    head.chain(std::iter::once(v))
        .chain(tail)
        .enumerate()
        .map(|(i, u)| (u, i))
}

/// Offset of vertex v's first attention slot: each vertex before it
/// contributed degree + 1 slots.
pub fn alpha_offset(graph: &CsrGraph, v: u32) -> usize {
    graph.row_ptr[v as usize] as usize + v as usize
}

// ── Flat matrix file format ─────────────────────────────────────────────

pub const ELEM_U32: u32 = 0;
pub const ELEM_BF16: u32 = 2;
pub const ELEM_F32: u32 = 4;

/// Header: rows u64 LE, cols u64 LE, element code u32 LE, then row-major
/// data. Codes: 0 = u32, 2 = BF16, 4 = FP32.
pub fn write_matrix<W: Write>(mut w: W, m: &Matrix, elem: u32) -> Result<()> {
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    w.write_all(&elem.to_le_bytes())?;
    match elem {
        ELEM_F32 => {
            for &x in &m.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        ELEM_BF16 => {
            for &x in &m.data {
                w.write_all(&Bf16::from_f32(x).to_bits().to_le_bytes())?;
            }
        }
        ELEM_U32 => {
            for &x in &m.data {
                w.write_all(&(x as u32).to_le_bytes())?;
            }
        }
        other => return Err(Error::Encoding(format!("unknown element code {other}"))),
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<(Matrix, u32)> {
    let mut h = [0u8; 20];
    r.read_exact(&mut h)
        .map_err(|_| Error::Input("matrix file shorter than its header".into()))?;
    let rows = u64::from_le_bytes(h[0..8].try_into().unwrap());
    let cols = u64::from_le_bytes(h[8..16].try_into().unwrap());
    let elem = u32::from_le_bytes(h[16..20].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Input("matrix dimensions overflow".into()))?;
    if count > (1 << 32) {
        return Err(Error::Input(format!("matrix with {count} elements refused")));
    }
    let mut m = Matrix::zeros(rows as usize, cols as usize);
    match elem {
        ELEM_F32 => {
            let mut buf = vec![0u8; count as usize * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Input("matrix data truncated".into()))?;
            for (i, c) in buf.chunks_exact(4).enumerate() {
                m.data[i] = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        ELEM_BF16 => {
            let mut buf = vec![0u8; count as usize * 2];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Input("matrix data truncated".into()))?;
            for (i, c) in buf.chunks_exact(2).enumerate() {
                m.data[i] = Bf16::from_bits(u16::from_le_bytes(c.try_into().unwrap())).to_f32();
            }
        }
        ELEM_U32 => {
            let mut buf = vec![0u8; count as usize * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Input("matrix data truncated".into()))?;
            for (i, c) in buf.chunks_exact(4).enumerate() {
                m.data[i] = u32::from_le_bytes(c.try_into().unwrap()) as f32;
            }
        }
        other => return Err(Error::Encoding(format!("unknown element code {other}"))),
    }
    Ok((m, elem))
}

/// Seeded input features, uniform in (-1, 1), rounded to the storage
/// precision so both trainers start from identical values.
pub fn gen_features(cfg: &ModelConfig, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dims[0].0 as usize;
    let mut m = Matrix::zeros(n, d);
    for x in m.data.iter_mut() {
        *x = cfg.store(rng.gen_range(-1.0..1.0));
    }
    m
}

/// Seeded labels, uniform over the class count.
pub fn gen_labels(classes: u32, n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6265_6c73);
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CsrGraph;

    #[test]
    fn dims_chain_is_validated() {
        let good = ModelConfig::with_chain(Variant::Gcn, 8, 16, 4, 3, 4, 1);
        assert_eq!(good.dims, vec![(8, 16), (16, 16), (16, 4)]);
        good.validate().unwrap();
        let bad = ModelConfig::new(Variant::Gcn, vec![(8, 16), (12, 4)], 4, 1);
        assert!(bad.validate().is_err());
        let single = ModelConfig::with_chain(Variant::Gcn, 8, 16, 4, 1, 4, 1);
        assert_eq!(single.dims, vec![(8, 4)]);
        single.validate().unwrap();
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::with_chain(Variant::Gin, 16, 16, 4, 2, 4, 7);
        let a = ModelParams::init(&cfg);
        let b = ModelParams::init(&cfg);
        assert_eq!(a, b);
        let bound = 1.0 / 4.0;
        assert!(a.layers[0].w.data.iter().all(|x| x.abs() <= bound));
        assert!(a.layers[0].gin.as_ref().unwrap().b1.iter().all(|&x| x == 0.0));
        let cfg2 = ModelConfig { seed: 8, ..cfg };
        assert_ne!(ModelParams::init(&cfg2), a);
    }

    #[test]
    fn matmul_small_known() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(a.matmul(&b).data, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul_bt(&b).data, vec![17.0, 23.0, 39.0, 53.0]);
        let mut g = Matrix::zeros(2, 2);
        a.accum_at_b(&b, &mut g);
        // a^T b = [[1,3],[2,4]] x [[5,6],[7,8]]
        assert_eq!(g.data, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn closed_neighborhood_merges_self_in_order() {
        let g = CsrGraph::from_edges(3, &[(0, 2), (1, 2)], true).unwrap();
        let n: Vec<(u32, usize)> = closed_neighborhood(&g, 2).collect();
        assert_eq!(n, vec![(0, 0), (1, 1), (2, 2)]);
        let n0: Vec<(u32, usize)> = closed_neighborhood(&g, 0).collect();
        assert_eq!(n0, vec![(0, 0), (2, 1)]);
        assert_eq!(alpha_offset(&g, 0), 0);
        assert_eq!(alpha_offset(&g, 1), 2);
        assert_eq!(alpha_offset(&g, 2), 4);
    }

    #[test]
    fn matrix_file_round_trip() {
        let m = Matrix::from_rows(vec![vec![1.5, -2.0, 0.25], vec![3.0, 0.0, -0.5]]);
        for elem in [ELEM_F32, ELEM_BF16] {
            let mut buf = Vec::new();
            write_matrix(&mut buf, &m, elem).unwrap();
            assert_eq!(buf.len(), 20 + 6 * elem as usize);
            let (back, code) = read_matrix(&buf[..]).unwrap();
            assert_eq!(code, elem);
            assert_eq!(back.data, m.data);
        }
        let labels = Matrix::from_rows(vec![vec![0.0], vec![3.0]]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &labels, ELEM_U32).unwrap();
        let (back, _) = read_matrix(&buf[..]).unwrap();
        assert_eq!(back.data, vec![0.0, 3.0]);
        assert!(read_matrix(&buf[..10]).is_err());
    }

    #[test]
    fn storage_rounding_modes() {
        let fp32 = ModelConfig::with_chain(Variant::Gcn, 4, 4, 2, 1, 4, 0);
        let bf16 = ModelConfig::with_chain(Variant::Gcn, 4, 4, 2, 1, 2, 0);
        let x = 1.000_123_f32;
        assert_eq!(fp32.store(x), x);
        assert_eq!(bf16.store(x), crate::bf16::round_store(x));
        assert_ne!(bf16.store(x), x);
    }
}
