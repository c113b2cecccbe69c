//! Shared test infrastructure: a finite-difference gradient checker and
//! an independent brute-force implementation of both selection policies.
//! Everything here is deliberately naive — full sorts, full distance
//! matrices — so it cannot share bugs with the library's implementations.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use idann::nn::{backward, forward, init_params, output_shape, LayerSpec, ParamSet};
use idann::rng::substream;
use idann::selection::Candidate;
use idann::Tensor;

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

pub struct GradCheckReport {
    pub num_params: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

/// Check every parameter coordinate of `layers` against central finite
/// differences of the scalar loss `L = sum(c .* output)`, where `c` is a
/// fixed random coefficient vector. Returns the worst relative error
/// (with `abs_tol` absorbing near-zero coordinates).
pub fn check_stack_gradients(
    layers: &[LayerSpec],
    input_shape: &[usize],
    seed: u64,
    h: f64,
    abs_tol: f64,
) -> GradCheckReport {
    let mut rng = substream(seed, "gradcheck");
    let params = init_params(layers, input_shape, &mut rng).expect("stack builds");
    let n_in: usize = input_shape.iter().product();
    let x = Tensor::new(
        input_shape.to_vec(),
        (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let out_shape = output_shape(layers, input_shape).expect("shapes chain");
    let n_out: usize = out_shape.iter().product();
    let coeffs: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss_of = |p: &ParamSet| -> f64 {
        let (out, _) = forward(layers, p, &x).expect("forward");
        out.data().iter().zip(&coeffs).map(|(o, c)| o * c).sum()
    };

    let (out, cache) = forward(layers, &params, &x).expect("forward");
    assert_eq!(out.len(), n_out);
    let grad_out = Tensor::new(out_shape, coeffs.clone()).unwrap();
    let (grads, _) = backward(layers, &params, &cache, &grad_out, 0.0).expect("backward");
    let analytic = grads.flatten();

    let theta = params.flatten();
    assert_eq!(theta.len(), analytic.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_coord = 0usize;
    let mut scratch = params.clone();
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        scratch.load_flat(&plus).unwrap();
        let lp = loss_of(&scratch);
        let mut minus = theta.clone();
        minus[i] -= h;
        scratch.load_flat(&minus).unwrap();
        let lm = loss_of(&scratch);
        let numeric = (lp - lm) / (2.0 * h);
        let diff = (analytic[i] - numeric).abs();
        let denom = analytic[i].abs().max(numeric.abs());
        let rel = if diff <= abs_tol { 0.0 } else { diff / denom.max(abs_tol) };
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    GradCheckReport {
        num_params: theta.len(),
        max_rel_err,
        worst_coord,
    }
}

/// The random small stacks used by the gradient oracle: at most three
/// layers, at most 500 parameters each.
pub fn oracle_stacks() -> Vec<(Vec<LayerSpec>, Vec<usize>)> {
    use LayerSpec::*;
    vec![
        (vec![Conv { filters: 4, kh: 3, kw: 3 }, Relu, MaxPool { ph: 2, pw: 2 }], vec![8, 8, 2]),
        (vec![Conv { filters: 3, kh: 5, kw: 5 }, Relu], vec![9, 9, 1]),
        (vec![Dense { units: 10 }, Relu, Dense { units: 7 }], vec![12]),
        (vec![Dense { units: 8 }, SoftmaxOutput], vec![6]),
        (vec![Dense { units: 5 }, SigmoidOutput], vec![9]),
        (vec![Conv { filters: 2, kh: 3, kw: 3 }, MaxPool { ph: 2, pw: 2 }, Dense { units: 6 }], vec![6, 6, 1]),
        (vec![MaxPool { ph: 2, pw: 2 }, Dense { units: 4 }], vec![4, 4, 3]),
        (vec![Dense { units: 20 }], vec![20]),
        (vec![Conv { filters: 6, kh: 3, kw: 3 }, Relu, Conv { filters: 4, kh: 3, kw: 3 }], vec![8, 8, 1]),
        (vec![Dense { units: 12 }, Relu, SoftmaxOutput], vec![10]),
    ]
}

// ---------------------------------------------------------------------------
// Brute-force selection oracle
// ---------------------------------------------------------------------------

pub struct SelectionInstance {
    pub target_ids: Vec<u64>,
    pub posteriors: Vec<Vec<f64>>,
    pub target_features: Vec<Vec<f64>>,
    pub source_features: Vec<Vec<f64>>,
    pub source_labels: Vec<usize>,
    pub p_count: usize,
}

pub fn random_instance(rng: &mut ChaCha8Rng, min_source: usize) -> SelectionInstance {
    let num_labels = rng.gen_range(2..=10usize);
    let dim = rng.gen_range(2..=6usize);
    let n_source = rng.gen_range(min_source.max(1)..=500usize);
    let n_target = rng.gen_range(1..=500usize);
    let p_count = rng.gen_range(1..=n_target);
    let feats = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    };
    let posteriors = (0..n_target)
        .map(|_| {
            let raw: Vec<f64> = (0..num_labels).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect();
    SelectionInstance {
        target_ids: (0..n_target as u64).collect(),
        posteriors,
        target_features: feats(n_target, rng),
        source_features: feats(n_source, rng),
        source_labels: (0..n_source).map(|_| rng.gen_range(0..num_labels)).collect(),
        p_count,
    }
}

fn oracle_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Full-sort ranking: confidence descending, sample id ascending on ties.
pub fn oracle_rank(inst: &SelectionInstance) -> Vec<Candidate> {
    let mut ranked: Vec<Candidate> = inst
        .target_ids
        .iter()
        .zip(&inst.posteriors)
        .map(|(&sample_id, row)| {
            let pseudo_label = oracle_argmax(row);
            Candidate {
                sample_id,
                pseudo_label,
                confidence: row[pseudo_label],
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.sample_id.cmp(&b.sample_id))
    });
    ranked
}

pub fn oracle_confidence_select(inst: &SelectionInstance) -> Vec<Candidate> {
    let ranked = oracle_rank(inst);
    ranked[..inst.p_count.min(ranked.len())].to_vec()
}

/// Full distance matrix + full sorts, no early exits.
pub fn oracle_knn_select(inst: &SelectionInstance, k: usize) -> Vec<Candidate> {
    assert!(k >= 1 && k <= inst.source_features.len());
    let mut accepted = Vec::new();
    for cand in oracle_rank(inst) {
        if accepted.len() >= inst.p_count {
            break;
        }
        let q = &inst.target_features[cand.sample_id as usize];
        let mut dists: Vec<(f64, usize)> = inst
            .source_features
            .iter()
            .enumerate()
            .map(|(i, row)| {
                (
                    row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                    i,
                )
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut counts = vec![0usize; inst.posteriors[0].len()];
        for &(_, i) in &dists[..k] {
            counts[inst.source_labels[i]] += 1;
        }
        let mut majority = 0;
        for (l, &c) in counts.iter().enumerate() {
            if c > counts[majority] {
                majority = l;
            }
        }
        if cand.pseudo_label == majority && counts[majority] == k {
            accepted.push(cand);
        }
    }
    accepted
}

pub fn ids_of(cands: &[Candidate]) -> Vec<u64> {
    cands.iter().map(|c| c.sample_id).collect()
}
