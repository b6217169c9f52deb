//! Visual-token embeddings: gesture state via graph convolution over the
//! hand skeleton, sinusoidal temporal position encoding, and a learned
//! two-row hand-chirality table. The three parts sum into the encoder input.

use ndarray::Array2;

use crate::numerics::{Graph, Result, Scalar, Var};
use crate::posedata::JOINT_COUNT;

/// Channel widths of the two graph-conv layers.
pub const GCN_CHANNELS: [usize; 2] = [64, 128];
/// Super-nodes after pooling: wrist + one per finger.
pub const POOLED_NODES: usize = 6;

/// Undirected hand-skeleton graph: 20 physical bone edges forming a tree,
/// plus symmetric edges linking same-level joints of adjacent fingers.
#[derive(Debug, Clone)]
pub struct HandGraph {
    pub physical_edges: Vec<(usize, usize)>,
    pub symmetric_edges: Vec<(usize, usize)>,
    pub adjacency: Array2<f64>,
    /// `D^-1/2 (A + I) D^-1/2`
    pub normalized: Array2<f64>,
}

pub fn build_hand_graph() -> HandGraph {
    let mut physical = Vec::with_capacity(20);
    for f in 0..5 {
        let base = 1 + 4 * f;
        physical.push((0, base));
        physical.push((base, base + 1));
        physical.push((base + 1, base + 2));
        physical.push((base + 2, base + 3));
    }
    // same-level joints of adjacent fingers, fingertip level excluded
    let mut symmetric = Vec::with_capacity(12);
    for f in 0..4 {
        for level in 0..3 {
            symmetric.push((1 + 4 * f + level, 1 + 4 * (f + 1) + level));
        }
    }
    let mut adjacency = Array2::<f64>::zeros((JOINT_COUNT, JOINT_COUNT));
    for &(a, b) in physical.iter().chain(symmetric.iter()) {
        adjacency[[a, b]] = 1.0;
        adjacency[[b, a]] = 1.0;
    }
    let mut with_loops = adjacency.clone();
    for i in 0..JOINT_COUNT {
        with_loops[[i, i]] += 1.0;
    }
    let degrees: Vec<f64> = (0..JOINT_COUNT).map(|i| with_loops.row(i).sum()).collect();
    let mut normalized = Array2::<f64>::zeros((JOINT_COUNT, JOINT_COUNT));
    for i in 0..JOINT_COUNT {
        for j in 0..JOINT_COUNT {
            normalized[[i, j]] = with_loops[[i, j]] / (degrees[i] * degrees[j]).sqrt();
        }
    }
    HandGraph {
        physical_edges: physical,
        symmetric_edges: symmetric,
        adjacency,
        normalized,
    }
}

/// Mean-pooling matrix to the 6 super-nodes: wrist kept, each finger's 4
/// joints averaged.
pub fn pooling_matrix() -> Array2<f64> {
    let mut pool = Array2::<f64>::zeros((POOLED_NODES, JOINT_COUNT));
    pool[[0, 0]] = 1.0;
    for f in 0..5 {
        for l in 0..4 {
            pool[[1 + f, 1 + 4 * f + l]] = 0.25;
        }
    }
    pool
}

/// Trainable pieces of the gesture-state embedding.
pub struct GestureEmbedVars {
    pub gcn1: Var,   // (2, 64)
    pub gcn2: Var,   // (64, 128)
    pub pool_w: Var, // (6*128, d)
    pub pool_b: Var, // (d,)
}

/// One graph-conv layer `relu(A_hat X W)` applied to every token at once.
/// `x` is `(n*21, c_in)`; returns `(n*21, c_out)`.
pub fn graph_conv_layer<T: Scalar>(
    g: &mut Graph<T>,
    adj: Var,
    x: Var,
    weights: Var,
    tokens: usize,
) -> Result<Var> {
    let c_out = g.shape(weights)[1];
    let xw = g.matmul(x, weights)?; // (n*21, c_out)
    let cube = g.reshape(xw, &[tokens, JOINT_COUNT, c_out])?;
    let joints_first = g.permute3(cube, [1, 0, 2])?; // (21, n, c_out)
    let flat = g.reshape(joints_first, &[JOINT_COUNT, tokens * c_out])?;
    let mixed = g.matmul(adj, flat)?; // (21, n*c_out)
    let cube2 = g.reshape(mixed, &[JOINT_COUNT, tokens, c_out])?;
    let tokens_first = g.permute3(cube2, [1, 0, 2])?;
    let out = g.reshape(tokens_first, &[tokens * JOINT_COUNT, c_out])?;
    g.relu(out)
}

/// Gesture-state embedding for a batch of tokens. `coords` is `(n*21, 2)`
/// with crop coordinates rescaled to [-1,1]. Returns `(n, d)`.
pub fn gesture_embed<T: Scalar>(
    g: &mut Graph<T>,
    graph: &HandGraph,
    vars: &GestureEmbedVars,
    coords: Var,
    tokens: usize,
) -> Result<Var> {
    g.push_scope("gesture_embed");
    let adj = g.input2(graph.normalized.mapv(T::from_f64))?;
    let h1 = graph_conv_layer(g, adj, coords, vars.gcn1, tokens)?;
    let h2 = graph_conv_layer(g, adj, h1, vars.gcn2, tokens)?;
    // pool to 6 super-nodes
    let c = GCN_CHANNELS[1];
    let cube = g.reshape(h2, &[tokens, JOINT_COUNT, c])?;
    let joints_first = g.permute3(cube, [1, 0, 2])?;
    let flat = g.reshape(joints_first, &[JOINT_COUNT, tokens * c])?;
    let pool = g.input2(pooling_matrix().mapv(T::from_f64))?;
    let pooled = g.matmul(pool, flat)?; // (6, n*c)
    let cube2 = g.reshape(pooled, &[POOLED_NODES, tokens, c])?;
    let tokens_first = g.permute3(cube2, [1, 0, 2])?;
    let stacked = g.reshape(tokens_first, &[tokens, POOLED_NODES * c])?;
    let projected = g.matmul(stacked, vars.pool_w)?;
    let out = g.add(projected, vars.pool_b)?;
    g.pop_scope();
    Ok(out)
}

/// Sinusoidal position encoding; identical for both hands at equal times.
pub fn temporal_encoding(times: &[usize], dim: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((times.len(), dim));
    for (row, &t) in times.iter().enumerate() {
        for i in 0..dim / 2 {
            let denom = 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[[row, 2 * i]] = (t as f64 / denom).sin();
            out[[row, 2 * i + 1]] = (t as f64 / denom).cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let denom = 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[[row, dim - 1]] = (t as f64 / denom).sin();
        }
    }
    out
}

/// Chirality embedding lookup: `table` is the learned `(2, d)` matrix,
/// `chirality` holds 0 (left) or 1 (right) per token.
pub fn chirality_embed<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    chirality: &[usize],
) -> Result<Var> {
    g.select_rows(table, chirality)
}

/// Sum the three embedding parts into the encoder input.
pub fn compose_tokens<T: Scalar>(
    g: &mut Graph<T>,
    gesture: Var,
    temporal: Var,
    chirality: Var,
) -> Result<Var> {
    let gt = g.add(gesture, temporal)?;
    g.add(gt, chirality)
}
