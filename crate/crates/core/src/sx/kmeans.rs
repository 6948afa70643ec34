use crate::error::{Error, Result};
use crate::rng::{Rng, Seed, StreamId};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Independent seeded restarts; the lowest-inertia run is kept.
    pub restarts: usize,
    /// Also start from every k-subset of the points when there are at most this many subsets.
    pub subset_seeding_limit: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iters: 100,
            restarts: 10,
            subset_seeding_limit: 256,
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn inertia_of(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn seed_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            // guard against landing on an already-chosen point through rounding
            if dist[chosen] == 0.0 {
                chosen = dist.iter().position(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    (sums, counts)
}

/// Lloyd iterations from the given centroids until the assignment stops changing.
fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..max_iters {
        let (mut next, counts) = means(points, &assignment, k, dim);
        for j in 0..k {
            if counts[j] == 0 {
                // reseed an empty cluster at the point farthest from its current centroid
                let far = points
                    .iter()
                    .zip(&assignment)
                    .enumerate()
                    .fold((0, -1.0), |best, (i, (p, &a))| {
                        let d = squared_distance(p, &centroids[a]);
                        if d > best.1 {
                            (i, d)
                        } else {
                            best
                        }
                    })
                    .0;
                next[j] = points[far].clone();
                assignment[far] = j;
            }
        }
        centroids = next;
        let reassigned: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if reassigned == assignment {
            break;
        }
        assignment = reassigned;
    }
    (centroids, assignment)
}

/// Single-point transfers that strictly lower the inertia, applied until none remains.
fn refine(points: &[Vec<f64>], assignment: &mut [usize], k: usize, max_passes: usize) {
    let dim = points[0].len();
    let (mut centroids, mut counts) = means(points, assignment, k, dim);
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignment[i];
            if counts[from] <= 1 {
                continue;
            }
            let nf = counts[from] as f64;
            let cost_out = nf / (nf - 1.0) * squared_distance(p, &centroids[from]);
            let mut best = (from, 0.0);
            for to in 0..k {
                if to == from {
                    continue;
                }
                let nt = counts[to] as f64;
                let gain = cost_out - nt / (nt + 1.0) * squared_distance(p, &centroids[to]);
                if gain > best.1 * (1.0 + 1e-12) + 1e-12 {
                    best = (to, gain);
                }
            }
            let to = best.0;
            if to != from {
                let (nf, nt) = (counts[from] as f64, counts[to] as f64);
                for d in 0..dim {
                    centroids[from][d] = (centroids[from][d] * nf - p[d]) / (nf - 1.0);
                    centroids[to][d] = (centroids[to][d] * nt + p[d]) / (nt + 1.0);
                }
                counts[from] -= 1;
                counts[to] += 1;
                assignment[i] = to;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// C(n, k) when it does not exceed `limit`.
fn subset_count(n: usize, k: usize, limit: usize) -> Option<usize> {
    let mut c: usize = 1;
    for i in 0..k {
        c = c.checked_mul(n - i)? / (i + 1);
        if c > limit {
            return None;
        }
    }
    Some(c)
}

/// All k-subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// k-means with k-means++ seeding, Lloyd iterations and transfer refinement.
///
/// The returned assignment always maps each point to its nearest returned
/// centroid, with ties going to the lowest centroid index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: Seed, stream: StreamId, opts: KMeansOptions) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::Config(format!("k-means needs 1 <= k <= {} points, got k = {k}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::dim("kmeans", "points have different dimensions"));
    }
    let mut inits: Vec<Vec<Vec<f64>>> = (0..opts.restarts.max(1))
        .map(|r| seed_plus_plus(points, k, &mut seed.stream(stream.with(r as u64))))
        .collect();
    if subset_count(points.len(), k, opts.subset_seeding_limit).is_some() {
        inits.extend(subsets(points.len(), k).into_iter().map(|s| s.iter().map(|&i| points[i].clone()).collect()));
    }
    let mut best: Option<KMeansResult> = None;
    for init in inits {
        let (_, mut assignment) = lloyd(points, init, opts.max_iters);
        refine(points, &mut assignment, k, opts.max_iters);
        // settle into a nearest-centroid fixpoint under the tie rule
        let (centroids, assignment) = lloyd(points, means(points, &assignment, k, dim).0, opts.max_iters);
        let inertia = inertia_of(points, &centroids, &assignment);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult {
                centroids,
                assignment,
                inertia,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(points: &[Vec<f64>], k: usize) -> KMeansResult {
        kmeans(points, k, Seed(1), StreamId::named("km"), KMeansOptions::default()).unwrap()
    }

    #[test]
    fn k_equals_n_reproduces_points() {
        let pts = vec![vec![0.0, 1.0], vec![3.0, -1.0], vec![5.0, 5.0]];
        let r = run(&pts, 3);
        assert_eq!(r.inertia, 0.0);
        let mut cs = r.centroids.clone();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cs, pts);
    }

    #[test]
    fn separated_blobs_give_blob_means() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
        let r = run(&pts, 2);
        let mut cs = r.centroids.clone();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
        assert_eq!(r.inertia, 1.0);
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_ne!(r.assignment[0], r.assignment[2]);
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let cs = vec![vec![-1.0], vec![1.0]];
        assert_eq!(nearest(&[0.0], &cs).0, 0);
        let cs = vec![vec![1.0], vec![-1.0]];
        assert_eq!(nearest(&[0.0], &cs).0, 0);
    }

    #[test]
    fn subset_enumeration() {
        assert_eq!(subsets(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(subsets(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(subset_count(8, 3, 256), Some(56));
        assert_eq!(subset_count(100, 3, 256), None);
    }

    #[test]
    fn errors_and_consistency() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&pts, 3, Seed(0), StreamId::named("k"), KMeansOptions::default()).is_err());
        assert!(kmeans(&pts, 0, Seed(0), StreamId::named("k"), KMeansOptions::default()).is_err());
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 1.7).sin(), (i as f64 * 0.3).cos()]).collect();
        let r = run(&pts, 4);
        assert!((r.inertia - inertia_of(&pts, &r.centroids, &r.assignment)).abs() < 1e-9);
        for (p, &a) in pts.iter().zip(&r.assignment) {
            assert_eq!(nearest(p, &r.centroids).0, a);
        }
    }

    #[test]
    fn identical_points() {
        let pts = vec![vec![2.0, 2.0]; 5];
        let r = run(&pts, 2);
        assert_eq!(r.inertia, 0.0);
    }
}
