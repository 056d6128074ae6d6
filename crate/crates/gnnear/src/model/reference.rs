//! Dense reference trainer: the numerical oracle the simulator is
//! measured against. Straight loops over the CSR adjacency and dense
//! matrices, no machinery. A separate f64 twin of the forward pass
//! drives finite-difference checks of the backward pass.
//!
//! Shared numeric contract (see mod.rs): FP32 accumulation, ascending
//! source order in aggregations, ascending k in dot products, storage
//! rounding exactly at the points where the accelerator writes DRAM.

use super::*;
use crate::graph::CsrGraph;
use crate::{Error, Result};

// ── Activations ─────────────────────────────────────────────────────────

pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn elu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Slope of the attention nonlinearity.
pub const ATT_SLOPE: f32 = 0.2;

/// Combine-output activation per variant. GIN's MLP carries its own
/// internal ReLU and emits raw values.
pub fn activate(variant: Variant, z: f32) -> f32 {
    match variant {
        Variant::Gcn | Variant::SageConv => relu(z),
        Variant::Gin => z,
        Variant::Gat => elu(z),
    }
}

/// Derivative of the combine activation, recovered from the stored
/// activation value itself: ReLU' = [h > 0]; Elu' = h + 1 below zero
/// (since h = e^z - 1 there); GIN has no outer activation.
pub fn activation_mask(variant: Variant, h: f32) -> f32 {
    match variant {
        Variant::Gcn | Variant::SageConv => {
            if h > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Variant::Gin => 1.0,
        Variant::Gat => {
            if h > 0.0 {
                1.0
            } else {
                h + 1.0
            }
        }
    }
}

// ── Edge weights ────────────────────────────────────────────────────────

/// Slot of vertex u inside the sorted closed neighborhood of v.
pub fn slot_in_closed(graph: &CsrGraph, v: u32, u: u32) -> usize {
    let neigh = graph.neighbors(v);
    if u == v {
        neigh.partition_point(|&x| x < v)
    } else {
        let idx = neigh.partition_point(|&x| x < u);
        debug_assert!(neigh.get(idx) == Some(&u), "{u} not adjacent to {v}");
        idx + usize::from(v < u)
    }
}

/// Weight of the forward edge carrying fwd_src's vector into fwd_dst's
/// aggregate. The backward pass reuses the same weights on transposed
/// edges. Unrounded; callers apply the wire precision.
pub fn forward_edge_weight(
    variant: Variant,
    graph: &CsrGraph,
    fwd_src: u32,
    fwd_dst: u32,
    eps: f32,
    alpha: Option<&[f32]>,
) -> f32 {
    match variant {
        Variant::Gcn => {
            let du = graph.degree_tilde(fwd_src) as f64;
            let dv = graph.degree_tilde(fwd_dst) as f64;
            (1.0 / (du * dv).sqrt()) as f32
        }
        Variant::Gin => {
            if fwd_src == fwd_dst {
                1.0 + eps
            } else {
                1.0
            }
        }
        Variant::SageConv => 1.0 / graph.degree_tilde(fwd_dst) as f32,
        Variant::Gat => {
            let a = alpha.expect("attention weights required for GAT");
            a[alpha_offset(graph, fwd_dst) + slot_in_closed(graph, fwd_dst, fwd_src)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggDir {
    /// out_v = sum over u in ~N(v) of w(u, v) * in_u.
    Forward,
    /// out_u = sum over v in ~N(u) of w(u, v) * in_v.
    Transposed,
}

/// Weighted aggregation over the closed neighborhood, both directions.
/// Requires a symmetric graph so the transpose shares the adjacency.
/// `round_out` applies storage rounding to rows that the accelerator
/// would write back to DRAM.
pub fn aggregate(
    graph: &CsrGraph,
    cfg: &ModelConfig,
    input: &Matrix,
    dir: AggDir,
    alpha: Option<&[f32]>,
    round_out: bool,
) -> Matrix {
    let n = graph.num_vertices as usize;
    assert_eq!(input.rows, n);
    let mut out = Matrix::zeros(n, input.cols);
    for r in 0..n as u32 {
        let row = out.row_mut(r as usize);
        for (nbr, slot) in closed_neighborhood(graph, r) {
            let w = match (cfg.variant, dir) {
                // Forward GAT: slot indices line up with storage order.
                (Variant::Gat, AggDir::Forward) => {
                    alpha.expect("attention weights required")[alpha_offset(graph, r) + slot]
                }
                _ => {
                    let (fwd_src, fwd_dst) = match dir {
                        AggDir::Forward => (nbr, r),
                        AggDir::Transposed => (r, nbr),
                    };
                    cfg.edge_w(forward_edge_weight(
                        cfg.variant,
                        graph,
                        fwd_src,
                        fwd_dst,
                        cfg.gin_eps,
                        alpha,
                    ))
                }
            };
            let src = input.row(nbr as usize);
            for (o, &x) in row.iter_mut().zip(src) {
                *o += w * x;
            }
        }
        if round_out {
            cfg.store_row(row);
        }
    }
    out
}

/// Attention weights for one layer: score each vertex once with the
/// folded vectors, then softmax LeakyReLU(s1_dst + s2_src) over each
/// closed neighborhood in ascending source order. Stored at wire
/// precision because they ride on instructions.
pub fn gat_attention(graph: &CsrGraph, cfg: &ModelConfig, lp: &LayerParams, h: &Matrix) -> Vec<f32> {
    let gat = lp.gat.as_ref().expect("GAT layer parameters");
    let n = graph.num_vertices as usize;
    let score = |c: &[f32], row: &[f32]| -> f32 {
        let mut acc = 0.0f32;
        for (ci, xi) in c.iter().zip(row) {
            acc += ci * xi;
        }
        acc
    };
    let s1: Vec<f32> = (0..n).map(|v| score(&gat.c1, h.row(v))).collect();
    let s2: Vec<f32> = (0..n).map(|v| score(&gat.c2, h.row(v))).collect();
    let mut alpha = vec![0.0f32; graph.num_directed_edges() as usize + n];
    let mut scratch = Vec::new();
    for v in 0..n as u32 {
        scratch.clear();
        let mut m = f32::NEG_INFINITY;
        for (u, _) in closed_neighborhood(graph, v) {
            let e = leaky_relu(s1[v as usize] + s2[u as usize], ATT_SLOPE);
            scratch.push(e);
            m = m.max(e);
        }
        let mut sum = 0.0f32;
        for e in scratch.iter_mut() {
            *e = (*e - m).exp();
            sum += *e;
        }
        let base = alpha_offset(graph, v);
        for (k, &e) in scratch.iter().enumerate() {
            alpha[base + k] = cfg.edge_w(e / sum);
        }
    }
    alpha
}

// ── Loss ────────────────────────────────────────────────────────────────

/// Numerically shifted softmax cross-entropy for one vertex: returns
/// the loss term and the unscaled gradient (p - onehot).
pub fn softmax_xent_row(logits: &[f32], label: u32) -> (f32, Vec<f32>) {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut grad: Vec<f32> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f32 = grad.iter().sum();
    let loss = sum.ln() - (logits[label as usize] - m);
    for g in grad.iter_mut() {
        *g /= sum;
    }
    grad[label as usize] -= 1.0;
    (loss, grad)
}

/// Mean cross-entropy and the masked last-layer gradient delta'^{L-1}.
pub fn loss_and_seed_gradient(
    cfg: &ModelConfig,
    h_last: &Matrix,
    labels: &[u32],
) -> Result<(f64, Matrix)> {
    let n = h_last.rows;
    if labels.len() != n {
        return Err(Error::Input(format!(
            "{} labels for {n} vertices",
            labels.len()
        )));
    }
    let classes = h_last.cols as u32;
    let inv_n = 1.0 / n as f32;
    let mut total = 0.0f64;
    let mut seed = Matrix::zeros(n, h_last.cols);
    for v in 0..n {
        let label = labels[v];
        if label >= classes {
            return Err(Error::Input(format!("label {label} out of range")));
        }
        let (loss, mut grad) = softmax_xent_row(h_last.row(v), label);
        total += loss as f64;
        let row = seed.row_mut(v);
        for (dst, g) in row.iter_mut().zip(grad.iter_mut()) {
            *dst = *g * inv_n;
        }
        for (dst, &h) in row.iter_mut().zip(h_last.row(v)) {
            *dst *= activation_mask(cfg.variant, h);
        }
        cfg.store_row(seed.row_mut(v));
    }
    Ok((total / n as f64, seed))
}

// ── Forward ─────────────────────────────────────────────────────────────

fn add_bias_rows(m: &mut Matrix, b: &[f32]) {
    for r in 0..m.rows {
        for (x, &bi) in m.row_mut(r).iter_mut().zip(b) {
            *x += bi;
        }
    }
}

/// One forward pass; fills store.h[1..], store.a (unless the layer runs
/// combination-first), GIN hiddens, and GAT attention weights.
pub fn forward(
    graph: &CsrGraph,
    cfg: &ModelConfig,
    params: &ModelParams,
    store: &mut FeatureStore,
    ieo: &[bool],
) -> Result<()> {
    let n = graph.num_vertices as usize;
    for l in 0..cfg.num_layers() {
        let lp = &params.layers[l];
        let alpha_owned = (cfg.variant == Variant::Gat).then(|| {
            let a = gat_attention(graph, cfg, lp, &store.h[l]);
            store.gat_alpha[l] = a.clone();
            a
        });
        let alpha = alpha_owned.as_deref();
        // z = aggregate(h) . W, computed in either order. The aggregate
        // is only materialized (and retained) in the canonical order;
        // combination-first transforms per vertex, stages, and reduces
        // the transformed vectors.
        let mut z = if ieo[l] {
            let mut t = store.h[l].matmul(&lp.w);
            for r in 0..n {
                cfg.store_row(t.row_mut(r));
            }
            aggregate(graph, cfg, &t, AggDir::Forward, alpha, false)
        } else {
            let a = aggregate(graph, cfg, &store.h[l], AggDir::Forward, alpha, true);
            let z = a.matmul(&lp.w);
            store.a[l] = a;
            z
        };
        match cfg.variant {
            Variant::Gin => {
                let gin = lp.gin.as_ref().ok_or_else(|| {
                    Error::Config("GIN layer without MLP parameters".into())
                })?;
                add_bias_rows(&mut z, &gin.b1);
                let mut r = z;
                for x in r.data.iter_mut() {
                    *x = relu(*x);
                }
                for v in 0..n {
                    cfg.store_row(r.row_mut(v));
                }
                let mut h = r.matmul(&gin.w2);
                add_bias_rows(&mut h, &gin.b2);
                for v in 0..n {
                    cfg.store_row(h.row_mut(v));
                }
                store.gin_r[l] = r;
                store.h[l + 1] = h;
            }
            _ => {
                let mut h = z;
                for x in h.data.iter_mut() {
                    *x = activate(cfg.variant, *x);
                }
                for v in 0..n {
                    cfg.store_row(h.row_mut(v));
                }
                store.h[l + 1] = h;
            }
        }
    }
    Ok(())
}

// ── Backward ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Matrix,
    pub w2: Option<Matrix>,
    pub b1: Option<Vec<f32>>,
    pub b2: Option<Vec<f32>>,
}

impl LayerGrads {
    fn zeros_like(lp: &LayerParams) -> LayerGrads {
        LayerGrads {
            w: Matrix::zeros(lp.w.rows, lp.w.cols),
            w2: lp.gin.as_ref().map(|g| Matrix::zeros(g.w2.rows, g.w2.cols)),
            b1: lp.gin.as_ref().map(|g| vec![0.0; g.b1.len()]),
            b2: lp.gin.as_ref().map(|g| vec![0.0; g.b2.len()]),
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0f32; m.cols];
    for r in 0..m.rows {
        for (o, &x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Backward pass. Expects store.delta_masked[L-1] seeded with the
/// masked loss gradient; walks layers top down. Per layer: gradients of
/// this layer's weights, then the masked gradient one layer down via a
/// transposed aggregation. GAT attention weights are treated as
/// constants. Input-feature gradients are not produced.
pub fn backward(
    graph: &CsrGraph,
    cfg: &ModelConfig,
    params: &ModelParams,
    store: &mut FeatureStore,
    ieo: &[bool],
) -> Result<Vec<LayerGrads>> {
    let n = graph.num_vertices as usize;
    let mut grads: Vec<LayerGrads> = params.layers.iter().map(LayerGrads::zeros_like).collect();
    for l in (0..cfg.num_layers()).rev() {
        let lp = &params.layers[l];
        let alpha_owned = (cfg.variant == Variant::Gat).then(|| store.gat_alpha[l].clone());
        let alpha = alpha_owned.as_deref();
        // Gradient flowing into this layer's linear transform, i.e.,
        // with respect to (aggregate . w + bias-free part). For GIN the
        // MLP tail is peeled off first.
        let d_linear = match cfg.variant {
            Variant::Gin => {
                let gin = lp.gin.as_ref().unwrap();
                let dmask = &store.delta_masked[l];
                let r = &store.gin_r[l];
                r.accum_at_b(dmask, grads[l].w2.as_mut().unwrap());
                add_assign(grads[l].b2.as_mut().unwrap(), &column_sums(dmask));
                let mut dr = dmask.matmul_bt(&gin.w2);
                for v in 0..n {
                    let rr = r.row(v);
                    for (x, &rv) in dr.row_mut(v).iter_mut().zip(rr) {
                        if rv <= 0.0 {
                            *x = 0.0;
                        }
                    }
                }
                add_assign(grads[l].b1.as_mut().unwrap(), &column_sums(&dr));
                if ieo[l] {
                    // dr is staged for the reduction that follows.
                    for v in 0..n {
                        cfg.store_row(dr.row_mut(v));
                    }
                }
                dr
            }
            _ => store.delta_masked[l].clone(),
        };
        if ieo[l] {
            // Combination-first order mirrors into the backward pass:
            // reduce the narrow gradients first, then one transform per
            // source vertex; the weight gradient contracts against the
            // raw inputs because no aggregate was retained.
            let r_agg = aggregate(graph, cfg, &d_linear, AggDir::Transposed, alpha, false);
            store.h[l].accum_at_b(&r_agg, &mut grads[l].w);
            if l > 0 {
                let g2 = r_agg.matmul_bt(&lp.w);
                store.delta_masked[l - 1] = mask_and_store(cfg, &store.h[l], g2);
            }
        } else {
            store.a[l].accum_at_b(&d_linear, &mut grads[l].w);
            let mut g = d_linear.matmul_bt(&lp.w);
            for v in 0..n {
                cfg.store_row(g.row_mut(v));
            }
            store.delta[l] = g.clone();
            if l > 0 {
                let gg = aggregate(graph, cfg, &g, AggDir::Transposed, alpha, false);
                store.delta_masked[l - 1] = mask_and_store(cfg, &store.h[l], gg);
            }
        }
    }
    Ok(grads)
}

/// Apply the activation mask of the layer that produced `h`, then
/// storage rounding: this value is committed back to DRAM.
fn mask_and_store(cfg: &ModelConfig, h: &Matrix, mut g: Matrix) -> Matrix {
    for v in 0..g.rows {
        let hr = h.row(v);
        let row = g.row_mut(v);
        for (x, &hv) in row.iter_mut().zip(hr) {
            *x *= activation_mask(cfg.variant, hv);
        }
        cfg.store_row(row);
    }
    g
}

// ── Epoch driver ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochOutputs {
    pub store: FeatureStore,
    pub loss: f64,
    pub grads: Vec<LayerGrads>,
    pub updated: ModelParams,
}

pub fn sgd_step(params: &mut ModelParams, grads: &[LayerGrads], lr: f32) {
    for (lp, g) in params.layers.iter_mut().zip(grads) {
        for (w, &gw) in lp.w.data.iter_mut().zip(&g.w.data) {
            *w -= lr * gw;
        }
        if let (Some(gin), Some(gw2)) = (lp.gin.as_mut(), g.w2.as_ref()) {
            for (w, &gw) in gin.w2.data.iter_mut().zip(&gw2.data) {
                *w -= lr * gw;
            }
            for (b, &gb) in gin.b1.iter_mut().zip(g.b1.as_ref().unwrap()) {
                *b -= lr * gb;
            }
            for (b, &gb) in gin.b2.iter_mut().zip(g.b2.as_ref().unwrap()) {
                *b -= lr * gb;
            }
        }
    }
}

/// One full training epoch: forward, loss, backward, SGD. The graph
/// must be symmetric (training reduces along transposed edges).
pub fn run_epoch(
    graph: &CsrGraph,
    cfg: &ModelConfig,
    params: &ModelParams,
    x: Matrix,
    labels: &[u32],
    ieo_requested: bool,
) -> Result<EpochOutputs> {
    cfg.validate()?;
    if !graph.symmetric {
        return Err(Error::Input(
            "training requires a symmetric graph (backward reduces along transposed edges)".into(),
        ));
    }
    let ieo = effective_ieo(cfg, ieo_requested);
    let mut store = FeatureStore::new(cfg, graph.num_vertices as usize, x)?;
    forward(graph, cfg, params, &mut store, &ieo)?;
    let last = cfg.num_layers() - 1;
    let (loss, seed) = loss_and_seed_gradient(cfg, &store.h[last + 1], labels)?;
    store.delta_masked[last] = seed;
    let grads = backward(graph, cfg, params, &mut store, &ieo)?;
    let mut updated = params.clone();
    sgd_step(&mut updated, &grads, cfg.learning_rate);
    Ok(EpochOutputs {
        store,
        loss,
        grads,
        updated,
    })
}

/// Worst relative difference across everything an epoch produces that
/// the accelerator also produces: activations, loss, weight gradients,
/// and updated weights. Internal scratch (aggregates, deltas) is not
/// compared because the two sides legitimately stage different
/// intermediates under reordered execution.
pub struct EpochDiff {
    pub worst: f32,
    pub worst_at: String,
}

pub fn compare_epochs(a: &EpochOutputs, b: &EpochOutputs, floor: f32) -> EpochDiff {
    let mut diff = EpochDiff {
        worst: 0.0,
        worst_at: String::from("nothing compared"),
    };
    let mut probe = |name: String, x: &[f32], y: &[f32]| {
        let d = max_rel_diff(x, y, floor);
        if d >= diff.worst {
            diff.worst = d;
            diff.worst_at = name;
        }
    };
    assert_eq!(a.store.h.len(), b.store.h.len());
    for (l, (ha, hb)) in a.store.h.iter().zip(&b.store.h).enumerate().skip(1) {
        probe(format!("h[{l}]"), &ha.data, &hb.data);
    }
    probe(
        "loss".into(),
        &[a.loss as f32],
        &[b.loss as f32],
    );
    for (l, (ga, gb)) in a.grads.iter().zip(&b.grads).enumerate() {
        probe(format!("grad w[{l}]"), &ga.w.data, &gb.w.data);
        if let (Some(x), Some(y)) = (&ga.w2, &gb.w2) {
            probe(format!("grad w2[{l}]"), &x.data, &y.data);
        }
        if let (Some(x), Some(y)) = (&ga.b1, &gb.b1) {
            probe(format!("grad b1[{l}]"), x, y);
        }
        if let (Some(x), Some(y)) = (&ga.b2, &gb.b2) {
            probe(format!("grad b2[{l}]"), x, y);
        }
    }
    for (l, (pa, pb)) in a.updated.layers.iter().zip(&b.updated.layers).enumerate() {
        probe(format!("updated w[{l}]"), &pa.w.data, &pb.w.data);
    }
    diff
}

// ── f64 twin for finite differences ─────────────────────────────────────

#[derive(Clone)]
pub struct Layer64 {
    pub w: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
    pub w2: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Clone)]
pub struct Params64 {
    pub layers: Vec<Layer64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorId {
    W,
    W2,
    B1,
    B2,
}

impl Params64 {
    pub fn from_params(cfg: &ModelConfig, p: &ModelParams) -> Params64 {
        Params64 {
            layers: p
                .layers
                .iter()
                .zip(&cfg.dims)
                .map(|(lp, &(d_in, d_out))| Layer64 {
                    w: lp.w.data.iter().map(|&x| x as f64).collect(),
                    d_in: d_in as usize,
                    d_out: d_out as usize,
                    w2: lp.gin.as_ref().map(|g| g.w2.data.iter().map(|&x| x as f64).collect()).unwrap_or_default(),
                    b1: lp.gin.as_ref().map(|g| g.b1.iter().map(|&x| x as f64).collect()).unwrap_or_default(),
                    b2: lp.gin.as_ref().map(|g| g.b2.iter().map(|&x| x as f64).collect()).unwrap_or_default(),
                })
                .collect(),
        }
    }

    pub fn slot_mut(&mut self, layer: usize, t: TensorId, idx: usize) -> &mut f64 {
        let l = &mut self.layers[layer];
        match t {
            TensorId::W => &mut l.w[idx],
            TensorId::W2 => &mut l.w2[idx],
            TensorId::B1 => &mut l.b1[idx],
            TensorId::B2 => &mut l.b2[idx],
        }
    }
}

/// Forward and loss entirely in f64, canonical order, no storage
/// rounding. Edge weights are the f32 values cast up, so the function
/// differentiated is the one the f32 trainer implements. GAT requires
/// frozen attention weights (the straight-through contract).
pub fn loss_f64(
    graph: &CsrGraph,
    cfg: &ModelConfig,
    p: &Params64,
    x: &Matrix,
    labels: &[u32],
    frozen_alpha: Option<&[Vec<f32>]>,
) -> Result<f64> {
    let n = graph.num_vertices as usize;
    if cfg.variant == Variant::Gat && frozen_alpha.is_none() {
        return Err(Error::Domain(
            "GAT loss is only differentiated with frozen attention".into(),
        ));
    }
    let mut h: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let mut d = cfg.dims[0].0 as usize;
    for l in 0..cfg.num_layers() {
        let lp = &p.layers[l];
        let alpha = frozen_alpha.map(|a| a[l].as_slice());
        // Aggregate.
        let mut agg = vec![0.0f64; n * d];
        for v in 0..n as u32 {
            let row = &mut agg[v as usize * d..(v as usize + 1) * d];
            for (u, slot) in closed_neighborhood(graph, v) {
                let w = match cfg.variant {
                    Variant::Gat => alpha.unwrap()[alpha_offset(graph, v) + slot] as f64,
                    _ => cfg.edge_w(forward_edge_weight(
                        cfg.variant,
                        graph,
                        u,
                        v,
                        cfg.gin_eps,
                        None,
                    )) as f64,
                };
                let src = &h[u as usize * d..(u as usize + 1) * d];
                for (o, &xv) in row.iter_mut().zip(src) {
                    *o += w * xv;
                }
            }
        }
        // Combine.
        let d_out = lp.d_out;
        let mut z = vec![0.0f64; n * d_out];
        for v in 0..n {
            for j in 0..d_out {
                let mut acc = 0.0f64;
                for k in 0..d {
                    acc += agg[v * d + k] * lp.w[k * d_out + j];
                }
                z[v * d_out + j] = acc;
            }
        }
        h = match cfg.variant {
            Variant::Gin => {
                let mut r = z;
                for v in 0..n {
                    for j in 0..d_out {
                        let x = r[v * d_out + j] + lp.b1[j];
                        r[v * d_out + j] = if x > 0.0 { x } else { 0.0 };
                    }
                }
                let mut out = vec![0.0f64; n * d_out];
                for v in 0..n {
                    for j in 0..d_out {
                        let mut acc = lp.b2[j];
                        for k in 0..d_out {
                            acc += r[v * d_out + k] * lp.w2[k * d_out + j];
                        }
                        out[v * d_out + j] = acc;
                    }
                }
                out
            }
            Variant::Gcn | Variant::SageConv => {
                z.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
            }
            Variant::Gat => z
                .iter()
                .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
                .collect(),
        };
        d = d_out;
    }
    let classes = d;
    let mut total = 0.0f64;
    for v in 0..n {
        let row = &h[v * classes..(v + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        total += sum.ln() - (row[labels[v] as usize] - m);
    }
    Ok(total / n as f64)
}

/// Max relative error between analytic weight gradients and central
/// finite differences of the f64 loss, across every trained tensor.
pub fn finite_difference_max_rel(
    graph: &CsrGraph,
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Matrix,
    labels: &[u32],
) -> Result<f32> {
    let out = run_epoch(graph, cfg, params, x.clone(), labels, false)?;
    let frozen: Option<Vec<Vec<f32>>> =
        (cfg.variant == Variant::Gat).then(|| out.store.gat_alpha.clone());
    let base = Params64::from_params(cfg, params);
    let h = 1e-5f64;
    let mut worst = 0.0f32;
    let mut check = |layer: usize, t: TensorId, idx: usize, analytic: f32| -> Result<()> {
        let mut up = base.clone();
        *up.slot_mut(layer, t, idx) += h;
        let mut dn = base.clone();
        *dn.slot_mut(layer, t, idx) -= h;
        let lp = loss_f64(graph, cfg, &up, x, labels, frozen.as_deref())?;
        let lm = loss_f64(graph, cfg, &dn, x, labels, frozen.as_deref())?;
        let fd = ((lp - lm) / (2.0 * h)) as f32;
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-5);
        worst = worst.max(rel);
        Ok(())
    };
    for (l, g) in out.grads.iter().enumerate() {
        for (i, &a) in g.w.data.iter().enumerate() {
            check(l, TensorId::W, i, a)?;
        }
        if let Some(w2) = &g.w2 {
            for (i, &a) in w2.data.iter().enumerate() {
                check(l, TensorId::W2, i, a)?;
            }
        }
        if let Some(b1) = &g.b1 {
            for (i, &a) in b1.iter().enumerate() {
                check(l, TensorId::B1, i, a)?;
            }
        }
        if let Some(b2) = &g.b2 {
            for (i, &a) in b2.iter().enumerate() {
                check(l, TensorId::B2, i, a)?;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_power_law, CsrGraph};

    fn manual_params(w: Matrix) -> ModelParams {
        ModelParams {
            layers: vec![LayerParams {
                w,
                gin: None,
                gat: None,
            }],
        }
    }

    #[test]
    fn single_vertex_gcn_identity() {
        let g = CsrGraph::from_edges(1, &[], true).unwrap();
        let cfg = ModelConfig::new(Variant::Gcn, vec![(2, 2)], 4, 0);
        let params = manual_params(Matrix::identity(2));
        let x = Matrix::from_rows(vec![vec![1.0, -1.0]]);
        let mut store = FeatureStore::new(&cfg, 1, x).unwrap();
        forward(&g, &cfg, &params, &mut store, &[false]).unwrap();
        // Lone vertex: ~N = {v}, degree-tilde 1, weight 1.
        assert_eq!(store.a[0].data, vec![1.0, -1.0]);
        assert_eq!(store.h[1].data, vec![1.0, 0.0]);
    }

    #[test]
    fn two_vertex_path_sage_mean() {
        let g = CsrGraph::from_edges(2, &[(0, 1)], true).unwrap();
        let cfg = ModelConfig::new(Variant::SageConv, vec![(1, 1)], 4, 0);
        let params = manual_params(Matrix::identity(1));
        let x = Matrix::from_rows(vec![vec![2.0], vec![4.0]]);
        let mut store = FeatureStore::new(&cfg, 2, x).unwrap();
        forward(&g, &cfg, &params, &mut store, &[false]).unwrap();
        assert_eq!(store.a[0].data, vec![3.0, 3.0]);
        assert_eq!(store.h[1].data, vec![3.0, 3.0]);
    }

    #[test]
    fn gcn_matches_dense_normalized_adjacency() {
        let g = generate_power_law(50, 4.0, 11).unwrap();
        let cfg = ModelConfig::with_chain(Variant::Gcn, 8, 8, 4, 2, 4, 3);
        let params = ModelParams::init(&cfg);
        let x = gen_features(&cfg, 50, 5);
        let mut store = FeatureStore::new(&cfg, 50, x.clone()).unwrap();
        forward(&g, &cfg, &params, &mut store, &[false, false]).unwrap();
        // Dense oracle: A_hat[v][u] = 1/sqrt(dt(u) dt(v)) over ~N.
        let n = 50usize;
        let mut a_hat = Matrix::zeros(n, n);
        for v in 0..n as u32 {
            for (u, _) in closed_neighborhood(&g, v) {
                a_hat.data[v as usize * n + u as usize] =
                    forward_edge_weight(Variant::Gcn, &g, u, v, 0.0, None);
            }
        }
        let mut h = x;
        for l in 0..2 {
            let z = a_hat.matmul(&h).matmul(&params.layers[l].w);
            h = z;
            for x in h.data.iter_mut() {
                *x = relu(*x);
            }
            let rel = max_rel_diff(&h.data, &store.h[l + 1].data, 1e-6);
            assert!(rel <= 1e-6, "layer {l} diverges from dense oracle: {rel}");
        }
    }

    #[test]
    fn mean_and_sum_are_weighted_sums() {
        let g = generate_power_law(30, 4.0, 2).unwrap();
        let x = gen_features(&ModelConfig::with_chain(Variant::SageConv, 4, 4, 2, 1, 4, 0), 30, 9);
        let sage = ModelConfig::new(Variant::SageConv, vec![(4, 2)], 4, 0);
        let agg = aggregate(&g, &sage, &x, AggDir::Forward, None, false);
        for v in 0..30u32 {
            let dt = g.degree_tilde(v) as f32;
            for j in 0..4 {
                let mut mean = 0.0f32;
                for (u, _) in closed_neighborhood(&g, v) {
                    mean += (1.0 / dt) * x.row(u as usize)[j];
                }
                assert_eq!(mean, agg.row(v as usize)[j]);
            }
        }
        let gin = ModelConfig::new(Variant::Gin, vec![(4, 2)], 4, 0);
        let agg = aggregate(&g, &gin, &x, AggDir::Forward, None, false);
        for v in 0..30u32 {
            for j in 0..4 {
                let mut sum = 0.0f32;
                for (u, _) in closed_neighborhood(&g, v) {
                    let w = if u == v { 1.0 + gin.gin_eps } else { 1.0 };
                    sum += w * x.row(u as usize)[j];
                }
                assert_eq!(sum, agg.row(v as usize)[j]);
            }
        }
    }

    #[test]
    fn positive_preactivations_make_mask_identity() {
        // Positive weights and features keep every ReLU active, so the
        // masked gradient equals the plain transposed aggregate.
        let g = generate_power_law(20, 3.0, 4).unwrap();
        let cfg = ModelConfig::with_chain(Variant::Gcn, 3, 3, 3, 2, 4, 1);
        let mut params = ModelParams::init(&cfg);
        for l in &mut params.layers {
            for w in l.w.data.iter_mut() {
                *w = w.abs() + 0.05;
            }
        }
        let mut x = gen_features(&cfg, 20, 8);
        for v in x.data.iter_mut() {
            *v = v.abs() + 0.05;
        }
        let labels = gen_labels(3, 20, 5);
        let out = run_epoch(&g, &cfg, &params, x, &labels, false).unwrap();
        let plain = aggregate(&g, &cfg, &out.store.delta[1], AggDir::Transposed, None, false);
        let rel = max_rel_diff(&plain.data, &out.store.delta_masked[0].data, 1e-9);
        assert!(rel <= 1e-6, "mask should be identity: {rel}");
        assert!(out.store.h[1].data.iter().all(|&h| h > 0.0));
    }

    #[test]
    fn single_vertex_weight_gradient_is_outer_product() {
        let g = CsrGraph::from_edges(1, &[], true).unwrap();
        let cfg = ModelConfig::new(Variant::Gcn, vec![(2, 1)], 4, 0);
        let params = manual_params(Matrix::from_rows(vec![vec![1.0], vec![1.0]]));
        let x = Matrix::from_rows(vec![vec![0.5, -0.25]]);
        let mut store = FeatureStore::new(&cfg, 1, x).unwrap();
        forward(&g, &cfg, &params, &mut store, &[false]).unwrap();
        store.delta_masked[0] = Matrix::from_rows(vec![vec![1.0]]);
        let grads = backward(&g, &cfg, &params, &mut store, &[false]).unwrap();
        // dW = a^T . delta' with a = x (self aggregate, weight 1).
        assert_eq!(grads[0].w.data, vec![0.5, -0.25]);
    }

    #[test]
    fn finite_differences_validate_backward() {
        for (variant, seed) in [(Variant::Gcn, 21), (Variant::Gin, 22), (Variant::SageConv, 23)] {
            let g = generate_power_law(30, 4.0, seed).unwrap();
            let cfg = ModelConfig::with_chain(variant, 5, 6, 3, 2, 4, seed);
            let params = ModelParams::init(&cfg);
            let x = gen_features(&cfg, 30, seed + 100);
            let labels = gen_labels(3, 30, seed + 200);
            let rel = finite_difference_max_rel(&g, &cfg, &params, &x, &labels).unwrap();
            assert!(
                rel <= 1e-3,
                "{} gradients off by {rel} vs finite differences",
                variant.name()
            );
        }
    }

    #[test]
    fn gat_straight_through_matches_frozen_attention_differences() {
        let g = generate_power_law(25, 3.0, 31).unwrap();
        let cfg = ModelConfig::with_chain(Variant::Gat, 4, 5, 3, 2, 4, 31);
        let params = ModelParams::init(&cfg);
        let x = gen_features(&cfg, 25, 131);
        let labels = gen_labels(3, 25, 231);
        let rel = finite_difference_max_rel(&g, &cfg, &params, &x, &labels).unwrap();
        assert!(rel <= 1e-3, "GAT straight-through gradients off by {rel}");
    }

    #[test]
    fn sgd_edge_cases() {
        let cfg = ModelConfig::with_chain(Variant::Gcn, 3, 3, 3, 1, 4, 9);
        let mut p = ModelParams::init(&cfg);
        let orig = p.clone();
        let grads = vec![LayerGrads {
            w: p.layers[0].w.clone(),
            w2: None,
            b1: None,
            b2: None,
        }];
        sgd_step(&mut p, &grads, 0.0);
        assert_eq!(p, orig);
        sgd_step(&mut p, &grads, 1.0);
        assert!(p.layers[0].w.data.iter().all(|&w| w == 0.0));
        // Two steps with fixed gradients: W - 2 eta g.
        let mut q = orig.clone();
        sgd_step(&mut q, &grads, 0.25);
        sgd_step(&mut q, &grads, 0.25);
        for (a, b) in q.layers[0].w.data.iter().zip(&orig.layers[0].w.data) {
            assert!((a - (b - 2.0 * 0.25 * b)).abs() <= 1e-7);
        }
    }

    #[test]
    fn ieo_order_is_numerically_equivalent() {
        for variant in [Variant::Gcn, Variant::SageConv, Variant::Gin] {
            let g = generate_power_law(40, 5.0, 7).unwrap();
            let cfg = ModelConfig::with_chain(variant, 8, 6, 3, 2, 4, 17);
            assert_eq!(effective_ieo(&cfg, true), vec![true, true]);
            let params = ModelParams::init(&cfg);
            let x = gen_features(&cfg, 40, 3);
            let labels = gen_labels(3, 40, 4);
            let a = run_epoch(&g, &cfg, &params, x.clone(), &labels, false).unwrap();
            let b = run_epoch(&g, &cfg, &params, x, &labels, true).unwrap();
            let d = compare_epochs(&a, &b, 1e-6);
            assert!(
                d.worst <= 1e-4,
                "{}: interchange diverges {} at {}",
                variant.name(),
                d.worst,
                d.worst_at
            );
        }
        let gat = ModelConfig::with_chain(Variant::Gat, 8, 6, 3, 2, 4, 17);
        assert_eq!(effective_ieo(&gat, true), vec![false, false]);
    }

    #[test]
    fn epochs_are_deterministic() {
        let g = generate_power_law(60, 6.0, 77).unwrap();
        let cfg = ModelConfig::with_chain(Variant::Gat, 6, 8, 4, 2, 4, 5);
        let params = ModelParams::init(&cfg);
        let x = gen_features(&cfg, 60, 1);
        let labels = gen_labels(4, 60, 2);
        let a = run_epoch(&g, &cfg, &params, x.clone(), &labels, false).unwrap();
        let b = run_epoch(&g, &cfg, &params, x, &labels, false).unwrap();
        assert_eq!(a.loss, b.loss);
        for (x, y) in a.grads.iter().zip(&b.grads) {
            assert_eq!(x.w.data, y.w.data);
        }
        for (l, (x, y)) in a.store.h.iter().zip(&b.store.h).enumerate() {
            assert_eq!(x.data, y.data, "layer {l}");
        }
    }

    #[test]
    fn bf16_mode_rounds_stores() {
        let g = generate_power_law(20, 3.0, 1).unwrap();
        let cfg = ModelConfig::with_chain(Variant::Gcn, 4, 4, 2, 2, 2, 6);
        let params = ModelParams::init(&cfg);
        let x = gen_features(&cfg, 20, 2);
        let labels = gen_labels(2, 20, 3);
        let out = run_epoch(&g, &cfg, &params, x, &labels, false).unwrap();
        for h in &out.store.h[1..] {
            for &v in &h.data {
                assert_eq!(v, crate::bf16::round_store(v));
            }
        }
    }
}
