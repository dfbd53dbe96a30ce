//! Helpers and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use graphcnn::ecc::{CirculantStack, EccParams, FNet, OutputLayer};
use graphcnn::graph::{NlgConfig, NonLocalGraph};
use graphcnn::network::NetworkConfig;
use graphcnn::rng::Stream;
use graphcnn::tensor::Tensor;

pub fn rand_tensor(s: &mut Stream, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| s.uniform(-scale, scale))
}

/// Row `m·r + j`, column `t` of a circulant stack is `g_m[(t − j) mod n]`.
pub fn circulant_dense_oracle(gens: &[f64], n: usize, r: usize) -> Vec<Vec<f64>> {
    let m = gens.len() / n;
    let mut rows = Vec::new();
    for mi in 0..m {
        for j in 0..r {
            rows.push((0..n).map(|t| gens[mi * n + (t + n * r - j) % n]).collect());
        }
    }
    rows
}

pub fn random_ecc_params(s: &mut Stream, d_in: usize, d_out: usize, h: usize, rows: Option<usize>) -> EccParams<f64> {
    let output = match rows {
        Some(r) => {
            OutputLayer::Circulant(CirculantStack::new(rand_tensor(s, vec![d_in * d_out / r, h], 0.6), r).unwrap())
        }
        None => OutputLayer::Dense(rand_tensor(s, vec![d_in * d_out, h], 0.6)),
    };
    EccParams {
        fnet: FNet {
            hidden_w: rand_tensor(s, vec![h, d_in], 0.8),
            hidden_b: rand_tensor(s, vec![h], 0.3),
            output,
            d_in,
            d_out,
            slope: 0.2,
        },
        node_transform: rand_tensor(s, vec![d_out, d_in], 0.5),
        bias: rand_tensor(s, vec![d_out], 0.2),
    }
}

/// Direct scalar loops over pixels, neighbors and matrix entries:
/// `out_i = (1/k) Σ_j F(x_j − x_i)·x_j + W x_i + b` on a planar `[d_in, H, W]` map.
pub fn ecc_scalar_oracle(x: &[f64], graph: &NonLocalGraph, p: &EccParams<f64>) -> Vec<f64> {
    let f = &p.fnet;
    let (d_in, d_out) = (f.d_in, f.d_out);
    let hid = f.hidden_b.len();
    let px = graph.len();
    let out_matrix: Vec<Vec<f64>> = match &f.output {
        OutputLayer::Circulant(c) => circulant_dense_oracle(c.generators().data(), hid, c.rows_per_matrix()),
        OutputLayer::Dense(w) => w.data().chunks(hid).map(|r| r.to_vec()).collect(),
    };
    let feat = |pix: usize, c: usize| x[c * px + pix];
    let mut out = vec![0.0; d_out * px];
    for i in 0..px {
        let nb = graph.neighbors(i);
        for q in 0..d_out {
            let mut acc = 0.0;
            for &j in nb {
                let j = j as usize;
                let mut a = vec![0.0; hid];
                for (t, at) in a.iter_mut().enumerate() {
                    let mut z = f.hidden_b.data()[t];
                    for c in 0..d_in {
                        z += f.hidden_w.data()[t * d_in + c] * (feat(j, c) - feat(i, c));
                    }
                    *at = if z > 0.0 { z } else { 0.2 * z };
                }
                for c in 0..d_in {
                    let row = &out_matrix[q * d_in + c];
                    let theta: f64 = (0..hid).map(|t| row[t] * a[t]).sum();
                    acc += theta * feat(j, c);
                }
            }
            let mut v = if nb.is_empty() { 0.0 } else { acc / nb.len() as f64 };
            for c in 0..d_in {
                v += p.node_transform.data()[q * d_in + c] * feat(i, c);
            }
            out[q * px + i] = v + p.bias.data()[q];
        }
    }
    out
}

/// `max |a − b| / max(|b|, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Neighbor lists by sorting every pixel of the map: candidates are pixels
/// within Chebyshev distance `window_radius` but farther than
/// `exclusion_radius`, ordered by squared feature distance, then index.
pub fn knn_oracle(x: &[f64], channels: usize, height: usize, width: usize, cfg: &NlgConfig) -> Vec<Vec<usize>> {
    let n = height * width;
    (0..n)
        .map(|i| {
            let (ri, ci) = (i / width, i % width);
            let mut cands: Vec<(f64, usize)> = Vec::new();
            for j in 0..n {
                let (rj, cj) = (j / width, j % width);
                let cheb = ri.abs_diff(rj).max(ci.abs_diff(cj));
                if cheb <= cfg.window_radius && cheb > cfg.exclusion_radius {
                    let d: f64 = (0..channels).map(|c| (x[c * n + i] - x[c * n + j]).powi(2)).sum();
                    cands.push((d, j));
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.into_iter().take(cfg.k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// `trunk` channels in three branches, one stage of `blocks` blocks with
/// `layers` layers each.
pub fn micro_network(trunk: usize, blocks: usize, layers: usize, k: usize, window: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        prepro_branch_channels: trunk / 3,
        trunk_channels: trunk,
        n_graph_stages: 1,
        res_blocks_per_stage: blocks,
        layers_per_res_block: layers,
        nlg: NlgConfig { k, window_radius: window, exclusion_radius: 1 },
        seed,
        ..NetworkConfig::default()
    }
}

/// Row-major pixels within Chebyshev distance `radius` of `(row, col)`.
pub fn square_set(height: usize, width: usize, row: usize, col: usize, radius: usize) -> Vec<bool> {
    (0..height * width).map(|p| (p / width).abs_diff(row) <= radius && (p % width).abs_diff(col) <= radius).collect()
}
