//! Size-balanced k-means: cluster sizes differ by at most one.

use diffcore::Rng;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after each iteration of the winning restart.
    pub objective: Vec<f64>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("at least one iteration")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances of each point to the mean of its cluster.
pub fn balanced_objective(points: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let c = centroids(points, assignments, k);
    sse(points, assignments, &c)
}

fn sse(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn centroids(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

fn capacities(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|c| n / k + usize::from(c < n % k)).collect()
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.below(points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.below(points.len())
        } else {
            let mut u = rng.uniform() * total;
            let mut idx = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        centers.push(points[pick].clone());
    }
    centers
}

/// Points in increasing (best − second best) margin order each take their
/// nearest centroid that still has room.
fn capacity_assign(points: &[Vec<f64>], centers: &[Vec<f64>], caps: &[usize]) -> Vec<usize> {
    let k = centers.len();
    let dists: Vec<Vec<f64>> = points
        .iter()
        .map(|p| centers.iter().map(|c| sq_dist(p, c)).collect())
        .collect();
    let margin = |d: &[f64]| {
        let mut s = d.to_vec();
        s.sort_by(f64::total_cmp);
        if k > 1 {
            s[0] - s[1]
        } else {
            0.0
        }
    };
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| margin(&dists[a]).total_cmp(&margin(&dists[b])).then(a.cmp(&b)));
    let mut room = caps.to_vec();
    let mut out = vec![0; points.len()];
    for i in order {
        let mut best: Option<usize> = None;
        for c in 0..k {
            if room[c] > 0 && best.is_none_or(|b| dists[i][c] < dists[i][b]) {
                best = Some(c);
            }
        }
        let c = best.expect("total capacity equals point count");
        room[c] -= 1;
        out[i] = c;
    }
    out
}

/// Local search over single-point moves that keep every size in
/// `{⌊n/k⌋, ⌈n/k⌉}` and pairwise swaps across clusters, while either lowers
/// the objective.
fn refine(points: &[Vec<f64>], assign: &mut [usize], k: usize, objective: &mut Vec<f64>) {
    let n = points.len();
    let (lo, hi) = (n / k, n.div_ceil(k));
    let mut sizes = vec![0usize; k];
    assign.iter().for_each(|&a| sizes[a] += 1);
    let mut current = balanced_objective(points, assign, k);
    loop {
        let mut improved = false;
        for i in 0..n {
            for c in 0..k {
                let from = assign[i];
                if c == from || sizes[from] == lo || sizes[c] == hi {
                    continue;
                }
                assign[i] = c;
                let cand = balanced_objective(points, assign, k);
                if cand < current - 1e-12 {
                    current = cand;
                    sizes[from] -= 1;
                    sizes[c] += 1;
                    improved = true;
                } else {
                    assign[i] = from;
                }
            }
            for j in i + 1..n {
                if assign[i] == assign[j] {
                    continue;
                }
                assign.swap(i, j);
                let cand = balanced_objective(points, assign, k);
                if cand < current - 1e-12 {
                    current = cand;
                    improved = true;
                } else {
                    assign.swap(i, j);
                }
            }
        }
        if !improved {
            break;
        }
        objective.push(current);
    }
}

/// Options beyond the core `(k, max_iter, seed)` signature.
#[derive(Clone, Copy, Debug)]
pub struct KMeansOptions {
    pub restarts: usize,
    /// Local refinement is quadratic in `n`; it is skipped above this size.
    pub swap_limit: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 64,
            swap_limit: 256,
        }
    }
}

pub fn balanced_kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, seed: u64) -> Result<Clustering> {
    balanced_kmeans_with(points, k, max_iter, seed, KMeansOptions::default())
}

pub fn balanced_kmeans_with(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<Clustering> {
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} points")));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(Error::invalid("points have differing dimensions"));
    }
    let caps = capacities(n, k);
    let mut best: Option<Clustering> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = Rng::stream(seed, restart as u64);
        let seeds = seed_plus_plus(points, k, &mut rng);
        let mut assign = capacity_assign(points, &seeds, &caps);
        let mut cents = centroids(points, &assign, k);
        let mut objective = vec![sse(points, &assign, &cents)];
        for _ in 0..max_iter {
            let cand = capacity_assign(points, &cents, &caps);
            if cand == assign || sse(points, &cand, &cents) >= sse(points, &assign, &cents) {
                break;
            }
            assign = cand;
            cents = centroids(points, &assign, k);
            objective.push(sse(points, &assign, &cents));
        }
        if n <= opts.swap_limit {
            refine(points, &mut assign, k, &mut objective);
            cents = centroids(points, &assign, k);
        }
        let run = Clustering {
            assignments: assign,
            centroids: cents,
            objective,
        };
        if best.as_ref().is_none_or(|b| run.final_objective() < b.final_objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive optimum over all balanced 2-way splits.
    fn brute_force_k2(points: &[Vec<f64>]) -> f64 {
        let n = points.len();
        let caps = capacities(n, 2);
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != caps[1] {
                continue;
            }
            let a: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            best = best.min(balanced_objective(points, &a, 2));
        }
        best
    }

    #[test]
    fn separates_two_pairs() {
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0].iter().map(|&x| vec![x]).collect();
        let c = balanced_kmeans(&pts, 2, 20, 1).unwrap();
        assert_eq!(c.assignments[0], c.assignments[1]);
        assert_eq!(c.assignments[2], c.assignments[3]);
        assert_ne!(c.assignments[0], c.assignments[2]);
        assert!((c.final_objective() - 1.0).abs() < 1e-12);
        assert!((brute_force_k2(&pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn n_equals_k_gives_singletons() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let c = balanced_kmeans(&pts, 5, 10, 2).unwrap();
        assert_eq!(c.sizes(), vec![1; 5]);
    }

    #[test]
    fn identical_points_split_evenly() {
        let pts = vec![vec![1.0, 2.0]; 4];
        let c = balanced_kmeans(&pts, 2, 10, 3).unwrap();
        assert_eq!(c.sizes(), vec![2, 2]);
    }

    #[test]
    fn rejects_bad_k() {
        let pts = vec![vec![0.0]; 3];
        assert!(balanced_kmeans(&pts, 0, 5, 0).is_err());
        assert!(balanced_kmeans(&pts, 4, 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn sizes_balanced_and_objective_monotone(
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..40),
            k in 1usize..6,
            seed in 0u64..100,
        ) {
            let k = k.min(raw.len());
            let c = balanced_kmeans(&raw, k, 30, seed).unwrap();
            let sizes = c.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for w in c.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn matches_exhaustive_optimum_for_small_k2(
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 2..=8),
            seed in 0u64..1000,
        ) {
            let c = balanced_kmeans(&raw, 2, 30, seed).unwrap();
            let opt = brute_force_k2(&raw);
            prop_assert!((c.final_objective() - opt).abs() <= 1e-9 * (1.0 + opt), "{} vs {}", c.final_objective(), opt);
        }
    }
}
