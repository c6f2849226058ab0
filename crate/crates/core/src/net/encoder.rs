//! Encoder forward/backward passes.
//!
//! Two choices, both emitting one vector per token:
//! * `WindowMlp`: the embeddings in a +-radius window are concatenated
//!   (positions off the sentence edge contribute zeros) and pushed through
//!   `depth` tanh layers.
//! * `BiElman`: `depth` stacked bidirectional Elman layers; each direction is
//!   `h_t = tanh(W_in x_t + W_hh h_neighbor + b)` and the per-token output is
//!   the concatenation of both directions.
//!
//! Backward passes take a `depth_limit` implicitly from the cache: the
//! multi-task auxiliary head runs the first layer only, so its gradient stops
//! there and upper layers stay untouched.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use super::{Layer, NetConfig};
use crate::matrix::{axpy, Mat};

/// One direction of an Elman recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnDirection {
    pub w_in: Mat,
    pub w_hh: Mat,
    pub b: Vec<f64>,
}

impl RnnDirection {
    fn init(hidden: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        RnnDirection {
            w_in: Mat::from_fn(hidden, in_dim, |_, _| rng.gen_range(-0.1..0.1)),
            w_hh: Mat::from_fn(hidden, hidden, |_, _| rng.gen_range(-0.1..0.1)),
            b: (0..hidden).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    fn zeros(hidden: usize, in_dim: usize) -> Self {
        RnnDirection {
            w_in: Mat::zeros(hidden, in_dim),
            w_hh: Mat::zeros(hidden, hidden),
            b: vec![0.0; hidden],
        }
    }
}

/// One bidirectional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLayer {
    pub fwd: RnnDirection,
    pub bwd: RnnDirection,
}

/// Encoder weights for either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    WindowMlp { layers: Vec<Layer> },
    BiElman { layers: Vec<BiLayer> },
}

impl EncoderParams {
    pub(crate) fn init(config: &NetConfig, rng: &mut impl Rng) -> Self {
        match config.encoder {
            super::EncoderKind::WindowMlp { radius, hidden } => {
                let window_dim = (2 * radius + 1) * config.embed_dim;
                let mut layers = Vec::with_capacity(config.depth);
                for l in 0..config.depth {
                    let in_dim = if l == 0 { window_dim } else { hidden };
                    layers.push(Layer::init(hidden, in_dim, rng));
                }
                EncoderParams::WindowMlp { layers }
            }
            super::EncoderKind::BiElman { hidden } => {
                let mut layers = Vec::with_capacity(config.depth);
                for l in 0..config.depth {
                    let in_dim = if l == 0 { config.embed_dim } else { 2 * hidden };
                    layers.push(BiLayer {
                        fwd: RnnDirection::init(hidden, in_dim, rng),
                        bwd: RnnDirection::init(hidden, in_dim, rng),
                    });
                }
                EncoderParams::BiElman { layers }
            }
        }
    }

    pub(crate) fn zeros_matching(other: &EncoderParams) -> Self {
        match other {
            EncoderParams::WindowMlp { layers } => EncoderParams::WindowMlp {
                layers: layers
                    .iter()
                    .map(|l| Layer::zeros(l.w.rows(), l.w.cols()))
                    .collect(),
            },
            EncoderParams::BiElman { layers } => EncoderParams::BiElman {
                layers: layers
                    .iter()
                    .map(|l| BiLayer {
                        fwd: RnnDirection::zeros(l.fwd.w_in.rows(), l.fwd.w_in.cols()),
                        bwd: RnnDirection::zeros(l.bwd.w_in.rows(), l.bwd.w_in.cols()),
                    })
                    .collect(),
            },
        }
    }

    pub(crate) fn collect_blocks<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        match self {
            EncoderParams::WindowMlp { layers } => {
                for l in layers {
                    out.push(l.w.data());
                    out.push(&l.b);
                }
            }
            EncoderParams::BiElman { layers } => {
                for l in layers {
                    for dir in [&l.fwd, &l.bwd] {
                        out.push(dir.w_in.data());
                        out.push(dir.w_hh.data());
                        out.push(&dir.b);
                    }
                }
            }
        }
    }

    pub(crate) fn collect_blocks_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        match self {
            EncoderParams::WindowMlp { layers } => {
                for l in layers {
                    out.push(l.w.data_mut());
                    out.push(&mut l.b);
                }
            }
            EncoderParams::BiElman { layers } => {
                for l in layers {
                    for dir in [&mut l.fwd, &mut l.bwd] {
                        out.push(dir.w_in.data_mut());
                        out.push(dir.w_hh.data_mut());
                        out.push(&mut dir.b);
                    }
                }
            }
        }
    }
}

/// Per-layer tanh activations kept for the backward pass.
pub(crate) enum EncoderCache {
    /// Per layer: len x hidden rows.
    WindowMlp { hidden: Vec<Vec<Vec<f64>>> },
    /// Per layer: len x 2*hidden rows (forward half, then backward half).
    BiElman { hidden: Vec<Vec<Vec<f64>>>, half: usize },
}

impl EncoderCache {
    /// Encoder output for token `t` (top cached layer).
    pub(crate) fn output(&self, t: usize) -> &[f64] {
        match self {
            EncoderCache::WindowMlp { hidden } | EncoderCache::BiElman { hidden, .. } => {
                &hidden.last().expect("at least one layer")[t]
            }
        }
    }
}

fn window_input(input: &[Vec<f64>], t: usize, radius: usize, d: usize) -> Vec<f64> {
    let mut x = vec![0.0; (2 * radius + 1) * d];
    let len = input.len() as isize;
    for (slot, off) in (-(radius as isize)..=radius as isize).enumerate() {
        let pos = t as isize + off;
        if pos >= 0 && pos < len {
            x[slot * d..(slot + 1) * d].copy_from_slice(&input[pos as usize]);
        }
    }
    x
}

pub(crate) fn forward(
    params: &EncoderParams,
    config: &NetConfig,
    input: &[Vec<f64>],
    depth_limit: usize,
) -> EncoderCache {
    let len = input.len();
    match params {
        EncoderParams::WindowMlp { layers } => {
            let radius = match config.encoder {
                super::EncoderKind::WindowMlp { radius, .. } => radius,
                _ => unreachable!("encoder params/config mismatch"),
            };
            let d = config.embed_dim;
            let mut hidden: Vec<Vec<Vec<f64>>> = Vec::with_capacity(depth_limit);
            for (l, layer) in layers.iter().take(depth_limit).enumerate() {
                let mut rows = Vec::with_capacity(len);
                for t in 0..len {
                    let mut pre = vec![0.0; layer.b.len()];
                    if l == 0 {
                        let x = window_input(input, t, radius, d);
                        layer.apply(&x, &mut pre);
                    } else {
                        layer.apply(&hidden[l - 1][t], &mut pre);
                    }
                    for v in pre.iter_mut() {
                        *v = v.tanh();
                    }
                    rows.push(pre);
                }
                hidden.push(rows);
            }
            EncoderCache::WindowMlp { hidden }
        }
        EncoderParams::BiElman { layers } => {
            let half = match config.encoder {
                super::EncoderKind::BiElman { hidden } => hidden,
                _ => unreachable!("encoder params/config mismatch"),
            };
            let mut hidden: Vec<Vec<Vec<f64>>> = Vec::with_capacity(depth_limit);
            for (l, layer) in layers.iter().take(depth_limit).enumerate() {
                let layer_input = |t: usize| -> &[f64] {
                    if l == 0 {
                        &input[t]
                    } else {
                        &hidden[l - 1][t]
                    }
                };
                let mut rows = vec![vec![0.0; 2 * half]; len];
                let mut state = vec![0.0; half];
                for t in 0..len {
                    let next = rnn_step(&layer.fwd, layer_input(t), &state);
                    rows[t][..half].copy_from_slice(&next);
                    state = next;
                }
                let mut state = vec![0.0; half];
                for t in (0..len).rev() {
                    let next = rnn_step(&layer.bwd, layer_input(t), &state);
                    rows[t][half..].copy_from_slice(&next);
                    state = next;
                }
                hidden.push(rows);
            }
            EncoderCache::BiElman { hidden, half }
        }
    }
}

fn rnn_step(dir: &RnnDirection, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
    let mut pre = vec![0.0; dir.b.len()];
    dir.w_in.matvec(x, &mut pre);
    let mut rec = vec![0.0; dir.b.len()];
    dir.w_hh.matvec(h_prev, &mut rec);
    for ((p, r), b) in pre.iter_mut().zip(&rec).zip(&dir.b) {
        *p += r + b;
        *p = p.tanh();
    }
    pre
}

/// Backpropagate `d_out` (gradient w.r.t. the top cached layer's outputs)
/// down to `d_input` (gradient w.r.t. the encoder's input rows), accumulating
/// weight gradients into `grads`. Only layers present in the cache are
/// touched.
pub(crate) fn backward(
    params: &EncoderParams,
    config: &NetConfig,
    cache: &EncoderCache,
    input: &[Vec<f64>],
    d_out: &mut Vec<Vec<f64>>,
    grads: &mut EncoderParams,
    d_input: &mut [Vec<f64>],
) {
    let len = input.len();
    match (params, cache, grads) {
        (
            EncoderParams::WindowMlp { layers },
            EncoderCache::WindowMlp { hidden },
            EncoderParams::WindowMlp { layers: glayers },
        ) => {
            let radius = match config.encoder {
                super::EncoderKind::WindowMlp { radius, .. } => radius,
                _ => unreachable!(),
            };
            let d = config.embed_dim;
            for l in (0..hidden.len()).rev() {
                let layer = &layers[l];
                let glayer = &mut glayers[l];
                let mut d_lower: Vec<Vec<f64>> = if l > 0 {
                    vec![vec![0.0; hidden[l - 1][0].len()]; len]
                } else {
                    Vec::new()
                };
                for t in 0..len {
                    let h = &hidden[l][t];
                    let d_pre: Vec<f64> = d_out[t]
                        .iter()
                        .zip(h)
                        .map(|(&g, &hv)| g * (1.0 - hv * hv))
                        .collect();
                    axpy(1.0, &d_pre, &mut glayer.b);
                    if l > 0 {
                        glayer.w.add_outer(1.0, &d_pre, &hidden[l - 1][t]);
                        layer.w.matvec_transpose_add(&d_pre, &mut d_lower[t]);
                    } else {
                        let x = window_input(input, t, radius, d);
                        glayer.w.add_outer(1.0, &d_pre, &x);
                        let mut dx = vec![0.0; x.len()];
                        layer.w.matvec_transpose_add(&d_pre, &mut dx);
                        for (slot, off) in (-(radius as isize)..=radius as isize).enumerate() {
                            let pos = t as isize + off;
                            if pos >= 0 && (pos as usize) < len {
                                axpy(1.0, &dx[slot * d..(slot + 1) * d], &mut d_input[pos as usize]);
                            }
                        }
                    }
                }
                if l > 0 {
                    *d_out = d_lower;
                }
            }
        }
        (
            EncoderParams::BiElman { layers },
            EncoderCache::BiElman { hidden, half },
            EncoderParams::BiElman { layers: glayers },
        ) => {
            let half = *half;
            for l in (0..hidden.len()).rev() {
                let layer = &layers[l];
                let glayer = &mut glayers[l];
                let rows = &hidden[l];
                let in_dim = layer.fwd.w_in.cols();
                let mut d_lower: Vec<Vec<f64>> = vec![vec![0.0; in_dim]; len];
                let layer_input = |t: usize| -> &[f64] {
                    if l == 0 {
                        &input[t]
                    } else {
                        &hidden[l - 1][t]
                    }
                };
                // forward direction: h_t depends on h_{t-1}
                let mut carry = vec![0.0; half];
                for t in (0..len).rev() {
                    let h = &rows[t][..half];
                    let d_pre: Vec<f64> = d_out[t][..half]
                        .iter()
                        .zip(carry.iter())
                        .zip(h)
                        .map(|((&g, &c), &hv)| (g + c) * (1.0 - hv * hv))
                        .collect();
                    glayer.fwd.w_in.add_outer(1.0, &d_pre, layer_input(t));
                    if t > 0 {
                        glayer.fwd.w_hh.add_outer(1.0, &d_pre, &rows[t - 1][..half]);
                    }
                    axpy(1.0, &d_pre, &mut glayer.fwd.b);
                    layer.fwd.w_in.matvec_transpose_add(&d_pre, &mut d_lower[t]);
                    carry = vec![0.0; half];
                    layer.fwd.w_hh.matvec_transpose_add(&d_pre, &mut carry);
                }
                // backward direction: h_t depends on h_{t+1}
                let mut carry = vec![0.0; half];
                for t in 0..len {
                    let h = &rows[t][half..];
                    let d_pre: Vec<f64> = d_out[t][half..]
                        .iter()
                        .zip(carry.iter())
                        .zip(h)
                        .map(|((&g, &c), &hv)| (g + c) * (1.0 - hv * hv))
                        .collect();
                    glayer.bwd.w_in.add_outer(1.0, &d_pre, layer_input(t));
                    if t + 1 < len {
                        glayer.bwd.w_hh.add_outer(1.0, &d_pre, &rows[t + 1][half..]);
                    }
                    axpy(1.0, &d_pre, &mut glayer.bwd.b);
                    layer.bwd.w_in.matvec_transpose_add(&d_pre, &mut d_lower[t]);
                    carry = vec![0.0; half];
                    layer.bwd.w_hh.matvec_transpose_add(&d_pre, &mut carry);
                }
                if l > 0 {
                    *d_out = d_lower;
                } else {
                    for (dst, src) in d_input.iter_mut().zip(&d_lower) {
                        axpy(1.0, src, dst);
                    }
                }
            }
        }
        _ => unreachable!("encoder params/cache/grads variant mismatch"),
    }
}
