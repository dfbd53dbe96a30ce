mod common;

use std::sync::Arc;

use common::*;
use graphcnn::ecc::{ecc_aggregate, EccShape, EccVars, OutputLayer};
use graphcnn::graph::{build_knn_graph, NlgConfig, NonLocalGraph};
use graphcnn::rng::Stream;
use graphcnn::tensor::finite_difference_check;

fn case(seed: u64, d_in: usize, d_out: usize, h: usize, rows: Option<usize>, k: usize, side: usize) {
    let mut s = Stream::new(seed);
    let x = rand_tensor(&mut s, vec![d_in, side, side], 1.0);
    let graph = build_knn_graph(&x, &NlgConfig { k, window_radius: 3, exclusion_radius: 1 }).unwrap();
    let p = random_ecc_params(&mut s, d_in, d_out, h, rows);
    let got = ecc_aggregate(&x, &graph, &p).unwrap();
    let want = ecc_scalar_oracle(x.data(), &graph, &p);
    assert!(rel_err(got.data(), &want) < 1e-12, "seed {seed}: {}", rel_err(got.data(), &want));
}

#[test]
fn aggregate_matches_scalar_loops() {
    case(1, 3, 3, 3, Some(3), 4, 6);
    case(2, 4, 2, 5, Some(2), 3, 7);
    case(3, 2, 5, 4, None, 2, 5);
    case(4, 3, 3, 6, Some(1), 0, 6);
    // blocks of the pixel loop straddle a 20×20 map
    case(5, 2, 2, 2, Some(2), 5, 20);
}

#[test]
fn gradient_through_features_and_weights() {
    for (seed, rows) in [(10u64, Some(2usize)), (11, None)] {
        let mut s = Stream::new(seed);
        let (d_in, d_out, h, side) = (2, 3, 4, 5);
        let x = rand_tensor(&mut s, vec![1, d_in, side, side], 1.0);
        let graph = Arc::new(build_knn_graph(&x, &NlgConfig { k: 3, window_radius: 3, exclusion_radius: 1 }).unwrap());
        let p = random_ecc_params(&mut s, d_in, d_out, h, rows);
        let out_w = match &p.fnet.output {
            OutputLayer::Circulant(c) => c.generators().clone(),
            OutputLayer::Dense(w) => w.clone(),
        };
        let shape = EccShape { d_in, d_out, hidden: h, rows, slope: 0.2 };
        let weights = rand_tensor(&mut s, vec![1, d_out, side, side], 1.0);
        let params = vec![
            ("x".to_string(), x),
            ("hidden_w".into(), p.fnet.hidden_w.clone()),
            ("hidden_b".into(), p.fnet.hidden_b.clone()),
            ("out_w".into(), out_w),
            ("node_w".into(), p.node_transform.clone()),
            ("node_b".into(), p.bias.clone()),
        ];
        let report = finite_difference_check(
            |tape, v| {
                let vars = EccVars { hidden_w: v[1], hidden_b: v[2], out_w: v[3], node_w: v[4], node_b: v[5] };
                let y = tape.ecc_aggregate(v[0], vars, shape, std::slice::from_ref(&graph))?;
                let w = tape.constant(weights.clone());
                let prod = tape.mse(y, w)?;
                Ok(prod)
            },
            &params,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn empty_graph_leaves_node_term() {
    let mut s = Stream::new(3);
    let x = rand_tensor(&mut s, vec![2, 4, 4], 1.0);
    let p = random_ecc_params(&mut s, 2, 2, 2, Some(2));
    let got = ecc_aggregate(&x, &NonLocalGraph::empty(4, 4), &p).unwrap();
    let want = ecc_scalar_oracle(x.data(), &NonLocalGraph::empty(4, 4), &p);
    assert!(rel_err(got.data(), &want) < 1e-14);
}
