#![allow(dead_code)]

use std::sync::Arc;

use mags::trace::{ActivationTrace, Label, ModelDims, TraceDataset, TraceMeta};
use mags::HeadId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dataset over `heads` of one layer. `values(problem, trace, step, slot, comp)`
/// supplies every activation component.
pub fn dataset_from_fn(
    problems: usize,
    traces_per_problem: usize,
    steps: usize,
    heads: usize,
    head_dim: usize,
    mut values: impl FnMut(usize, usize, usize, usize, usize) -> f32,
) -> TraceDataset {
    let monitored: Vec<HeadId> = (0..heads).map(|h| HeadId::new(0, h)).collect();
    let shared: Arc<[HeadId]> = monitored.clone().into();
    let mut traces = Vec::new();
    for p in 0..problems {
        for j in 0..traces_per_problem {
            let label = if j % 2 == 0 { Label::Correct } else { Label::Incorrect };
            let mut v = Vec::with_capacity(steps * heads * head_dim);
            for t in 0..steps {
                for h in 0..heads {
                    for c in 0..head_dim {
                        v.push(values(p, j, t, h, c));
                    }
                }
            }
            let meta = TraceMeta {
                problem_id: format!("p{p:03}"),
                trace_id: format!("p{p:03}-t{j}"),
                label,
                length: steps,
            };
            traces.push(ActivationTrace::new(meta, shared.clone(), head_dim, v).unwrap());
        }
    }
    let dims = ModelDims {
        layers: 1,
        heads,
        head_dim,
    };
    TraceDataset::new(dims, monitored, traces).unwrap()
}

/// Gaussian activations where incorrect traces carry a per-problem shift
/// along a few fixed directions.
pub fn random_dataset(seed: u64, problems: usize, steps: usize, head_dim: usize) -> TraceDataset {
    let mut r = rng(seed);
    let shifts: Vec<Vec<f32>> = (0..problems)
        .map(|_| (0..head_dim).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    dataset_from_fn(problems, 2, steps, 1, head_dim, |p, j, _, _, c| {
        let noise: f32 = r.random_range(-1.0..1.0);
        if j % 2 == 1 {
            noise + shifts[p][c]
        } else {
            noise
        }
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric `n x n` row-major matrix.
/// Returns eigenvalues (descending) and matching eigenvectors as rows.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

/// `V^T V` for the top-`k` eigenvectors of `D^T D`, `D` being `rows x d`.
pub fn oracle_projector(d_rows: &[f64], rows: usize, d: usize, k: usize) -> Vec<f64> {
    let mut gram = vec![0.0; d * d];
    for r in 0..rows {
        let row = &d_rows[r * d..(r + 1) * d];
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += row[i] * row[j];
            }
        }
    }
    let (_, vecs) = jacobi_eigen(&gram, d);
    let mut p = vec![0.0; d * d];
    for v in &vecs[..k] {
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] += v[i] * v[j];
            }
        }
    }
    p
}

/// AUROC by enumerating every (positive, negative) pair, as
/// `(2 * wins + ties, 2 * pairs)`.
pub fn auroc_pairs(labels: &[bool], scores: &[f64]) -> (u64, u64) {
    let mut num = 0;
    let mut den = 0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 2;
            if scores[i] > scores[j] {
                num += 2;
            } else if scores[i] == scores[j] {
                num += 1;
            }
        }
    }
    (num, den)
}
