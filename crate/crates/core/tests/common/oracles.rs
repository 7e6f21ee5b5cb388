//! Synthetic fitness landscapes and small statistics used by the search and
//! sampler checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spos::space::{Architecture, SearchSpace};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sum of independent per-(block, choice) scores.
pub struct Separable {
    table: Vec<Vec<f64>>,
    space: SearchSpace,
}

impl Separable {
    pub fn new(space: &SearchSpace, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..space.num_blocks())
            .map(|b| (0..space.block_choices(b)).map(|_| rng.random::<f64>()).collect())
            .collect();
        Self {
            table,
            space: space.clone(),
        }
    }

    pub fn score(&self, arch: &Architecture) -> f64 {
        arch.genes()
            .iter()
            .enumerate()
            .map(|(b, g)| self.table[b][self.space.gene_index(b, *g)])
            .sum()
    }
}

/// Unary terms plus a random interaction table for every pair of blocks.
pub struct Rugged {
    unary: Vec<Vec<f64>>,
    pairs: Vec<Vec<Vec<Vec<f64>>>>,
    space: SearchSpace,
}

impl Rugged {
    pub fn new(space: &SearchSpace, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = space.num_blocks();
        let unary = (0..n)
            .map(|b| (0..space.block_choices(b)).map(|_| rng.random::<f64>()).collect())
            .collect();
        let pairs = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if j <= i {
                            return Vec::new();
                        }
                        (0..space.block_choices(i))
                            .map(|_| (0..space.block_choices(j)).map(|_| rng.random::<f64>()).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            unary,
            pairs,
            space: space.clone(),
        }
    }

    pub fn score(&self, arch: &Architecture) -> f64 {
        let idx: Vec<usize> = arch
            .genes()
            .iter()
            .enumerate()
            .map(|(b, g)| self.space.gene_index(b, *g))
            .collect();
        let mut s: f64 = idx.iter().enumerate().map(|(b, &c)| self.unary[b][c]).sum();
        for i in 0..idx.len() {
            for j in i + 1..idx.len() {
                s += self.pairs[i][j][idx[i]][idx[j]];
            }
        }
        s
    }
}

/// Pearson chi-square statistic of `counts` against equal expected counts,
/// and the upper-tail p-value.
pub fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}

/// Kendall's tau-b.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = (a[i] - a[j]).partial_cmp(&0.0).unwrap() as i64;
            let db = (b[i] - b[j]).partial_cmp(&0.0).unwrap() as i64;
            match (da, db) {
                (0, 0) => {}
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + ties_a) as f64;
    let n2 = (concordant + discordant + ties_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / (n1 * n2).sqrt()
}

#[test]
fn kendall_hand_values() {
    assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
    assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    // 5 concordant, 1 discordant of 6 pairs.
    let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
    assert!((t - 4.0 / 6.0).abs() < 1e-12);
}
