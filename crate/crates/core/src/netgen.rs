//! Random directed networks: Bernoulli (Erdős–Rényi) and stochastic block model.
//!
//! Every generator draws from `ChaCha8Rng::seed_from_u64(seed)`, so an adjacency matrix is
//! fully determined by its arguments. Edges are sampled by geometric skipping, which costs
//! O(n + edges) rather than O(n²).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SarError};
use crate::linalg::sparse::{RowNormalized, SparseWeights};

/// Directed adjacency with independent a_ij ~ Bernoulli(edge_prob), i ≠ j.
pub fn gen_bernoulli(n: usize, edge_prob: f64, seed: u64) -> Result<SparseWeights> {
    if n < 2 {
        return Err(SarError::InvalidInput(format!("n = {n}, need at least 2 nodes")));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(SarError::InvalidInput(format!("edge probability {edge_prob} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..n).collect();
    let mut triplets = Vec::new();
    for i in 0..n {
        sample_row(&mut rng, i, &all, edge_prob, &mut triplets);
    }
    SparseWeights::from_triplets(n, &triplets)
}

/// Stochastic block model; returns the adjacency and the 0-based block labels.
pub fn gen_sbm(n: usize, blocks: usize, p_in: f64, p_out: f64, seed: u64) -> Result<(SparseWeights, Vec<usize>)> {
    if n < 2 || blocks == 0 {
        return Err(SarError::InvalidInput(format!("n = {n}, blocks = {blocks}")));
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(SarError::InvalidInput(format!("{name} = {p} outside (0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..blocks)).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); blocks];
    for (i, &b) in labels.iter().enumerate() {
        members[b].push(i);
    }
    let mut triplets = Vec::new();
    for (i, &li) in labels.iter().enumerate() {
        for (b, m) in members.iter().enumerate() {
            let p = if b == li { p_in } else { p_out };
            sample_row(&mut rng, i, m, p, &mut triplets);
        }
    }
    Ok((SparseWeights::from_triplets(n, &triplets)?, labels))
}

/// Default SBM of the simulation design: 5 blocks, p_in = n^-0.4, p_out = n^-0.8.
pub fn gen_sbm_default(n: usize, seed: u64) -> Result<(SparseWeights, Vec<usize>)> {
    let nf = n as f64;
    gen_sbm(n, 5, nf.powf(-0.4), nf.powf(-0.8), seed)
}

pub fn row_normalize(adj: &SparseWeights) -> RowNormalized {
    adj.row_normalize()
}

/// Adds edges (i, j) for j in `candidates`, j ≠ i, each with probability p.
fn sample_row(rng: &mut ChaCha8Rng, i: usize, candidates: &[usize], p: f64, out: &mut Vec<(usize, usize, f64)>) {
    if p <= 0.0 || candidates.is_empty() {
        return;
    }
    if p >= 1.0 {
        out.extend(candidates.iter().filter(|&&j| j != i).map(|&j| (i, j, 1.0)));
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut k: usize = 0;
    loop {
        let u: f64 = rng.random();
        let skip = ((1.0 - u).ln() / log_q).floor();
        if !skip.is_finite() || skip >= (candidates.len() - k) as f64 {
            break;
        }
        k += skip as usize;
        let j = candidates[k];
        if j != i {
            out.push((i, j, 1.0));
        }
        k += 1;
        if k >= candidates.len() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_gives_empty_graph() {
        assert_eq!(gen_bernoulli(50, 0.0, 1).unwrap().nnz(), 0);
    }

    #[test]
    fn full_probability_gives_complete_graph() {
        let w = gen_bernoulli(7, 1.0, 1).unwrap();
        assert_eq!(w.nnz(), 42);
    }

    #[test]
    fn adjacency_is_binary_without_loops() {
        let w = gen_bernoulli(300, 0.05, 4).unwrap();
        assert!(w.csr().values().iter().all(|&v| v == 1.0));
        assert!(w.csr().diag().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_sparse_graph_has_degree_five() {
        let n = 10_000;
        for seed in 0..20 {
            let w = gen_bernoulli(n, 5.0 / n as f64, seed).unwrap();
            let d = w.nnz() as f64 / n as f64;
            assert!((4.5..=5.5).contains(&d), "seed {seed}: {d}");
        }
    }

    #[test]
    fn mean_degree_at_n500() {
        let mut total = 0.0;
        for seed in 0..100 {
            total += gen_bernoulli(500, 0.01, seed).unwrap().nnz() as f64 / 500.0;
        }
        let mean = total / 100.0;
        assert!((mean - 4.99).abs() < 0.5, "{mean}");
    }

    #[test]
    fn edge_rate_matches_probability() {
        let n = 400;
        let p = 0.03;
        let mut edges = 0usize;
        for seed in 0..20 {
            edges += gen_bernoulli(n, p, seed).unwrap().nnz();
        }
        let rate = edges as f64 / (20.0 * (n * (n - 1)) as f64);
        let sd = (p * (1.0 - p) / (20.0 * (n * (n - 1)) as f64)).sqrt();
        assert!((rate - p).abs() < 5.0 * sd, "{rate}");
    }

    #[test]
    fn sbm_single_block_matches_bernoulli_rate() {
        let (w, labels) = gen_sbm(500, 1, 0.02, 0.5, 3).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        let d = w.nnz() as f64 / 500.0;
        assert!((d - 0.02 * 499.0).abs() < 1.5, "{d}");
    }

    #[test]
    fn sbm_block_rates() {
        let n = 1000;
        let (p_in, p_out) = (1000f64.powf(-0.4), 1000f64.powf(-0.8));
        let (mut e_in, mut e_out, mut pairs_in, mut pairs_out) = (0.0, 0.0, 0.0, 0.0);
        for seed in 0..10 {
            let (w, labels) = gen_sbm_default(n, seed).unwrap();
            let mut sizes = [0f64; 5];
            labels.iter().for_each(|&l| sizes[l] += 1.0);
            let same: f64 = sizes.iter().map(|s| s * (s - 1.0)).sum();
            pairs_in += same;
            pairs_out += (n * (n - 1)) as f64 - same;
            for (i, j, _) in w.csr().triplets() {
                if labels[i] == labels[j] {
                    e_in += 1.0;
                } else {
                    e_out += 1.0;
                }
            }
        }
        assert!((e_in / pairs_in / p_in - 1.0).abs() < 0.10);
        assert!((e_out / pairs_out / p_out - 1.0).abs() < 0.15);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(gen_bernoulli(200, 0.02, 8).unwrap(), gen_bernoulli(200, 0.02, 8).unwrap());
        assert_ne!(gen_bernoulli(200, 0.02, 8).unwrap(), gen_bernoulli(200, 0.02, 9).unwrap());
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let rn = row_normalize(&gen_bernoulli(500, 0.01, 2).unwrap());
        for i in 0..500 {
            let (_, v) = rn.weights.csr().row(i);
            if v.is_empty() {
                assert!(rn.zero_rows.contains(&i));
            } else {
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
