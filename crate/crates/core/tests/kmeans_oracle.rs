//! k-means against an exhaustive search over all partitions of small point sets.

use peftcl_core::rng::{Seed, StreamId};
use peftcl_core::sx::{inertia_of, kmeans, nearest, squared_distance, KMeansOptions};
use proptest::prelude::*;

/// Lowest within-cluster sum of squares over every assignment into exactly `k` non-empty clusters.
fn exhaustive_minimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut assignment = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            let mut sums = vec![vec![0.0; dim]; k];
            for (p, &a) in points.iter().zip(&assignment) {
                for (s, v) in sums[a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let means: Vec<Vec<f64>> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
                .collect();
            best = best.min(
                points
                    .iter()
                    .zip(&assignment)
                    .map(|(p, &a)| squared_distance(p, &means[a]))
                    .sum(),
            );
        }
        // next assignment in base k
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            assignment[i] += 1;
            if assignment[i] < k {
                break;
            }
            assignment[i] = 0;
            i += 1;
        }
    }
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1usize..=8, 1usize..=3, 1usize..=3).prop_flat_map(|(n, k, dim)| {
        let coord = prop_oneof![(-4i32..=4).prop_map(f64::from), -5.0f64..5.0];
        (
            prop::collection::vec(prop::collection::vec(coord, dim), n),
            Just(k.min(n)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn reaches_the_exhaustive_minimum((points, k) in instance(), seed in 0u64..50) {
        let r = kmeans(&points, k, Seed(seed), StreamId::named("oracle"), KMeansOptions::default()).unwrap();
        let best = exhaustive_minimum(&points, k);
        prop_assert!((r.inertia - best).abs() <= 1e-9 * (1.0 + best), "got {}, minimum {best}", r.inertia);
        prop_assert_eq!(r.inertia, inertia_of(&points, &r.centroids, &r.assignment));
        // every point sits with its nearest centroid, ties to the lowest index
        for (p, &a) in points.iter().zip(&r.assignment) {
            prop_assert_eq!(nearest(p, &r.centroids).0, a);
        }
    }
}

#[test]
fn tie_break_rule() {
    // equidistant from both centroids: the lower index wins
    let c = vec![vec![-1.0, 0.0], vec![1.0, 0.0]];
    assert_eq!(nearest(&[0.0, 0.0], &c).0, 0);
    let c = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(nearest(&[0.0, 0.0], &c).0, 0);
    // a symmetric instance: four corners of a square with k = 2
    let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let r = kmeans(&pts, 2, Seed(1), StreamId::named("square"), KMeansOptions::default()).unwrap();
    assert_eq!(r.inertia, 1.0);
    assert_eq!(exhaustive_minimum(&pts, 2), 1.0);
}

#[test]
fn hand_oracle() {
    let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0, 12.0].iter().map(|&x| vec![x]).collect();
    assert_eq!(exhaustive_minimum(&pts, 2), 0.5 + 2.0);
    let r = kmeans(&pts, 2, Seed(0), StreamId::named("hand"), KMeansOptions::default()).unwrap();
    assert_eq!(r.inertia, 2.5);
}
