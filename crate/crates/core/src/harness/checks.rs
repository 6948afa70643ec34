//! Randomized oracle checks over many generated cases, each reporting its worst deviation.

use rand::Rng as _;

use crate::error::Result;
use crate::peft::{
    adapted_features, features_with, merge_into, multi_lora_masked_forward, Adaptation, Assignment, BoundLora,
    BoundPayload, LoraPair, Payload, PeftSpec,
};
use crate::rng::{Seed, StreamId, StreamRng};
use crate::sx::{kmeans, nearest, squared_distance, KMeansOptions};
use crate::tensor::{Tape, Tensor};
use crate::vit::{ProjectionSite, ViTConfig, ViTParams};

use super::gradcheck::tiny_config;
use super::metrics::{backward_transfer, forgetting, AccuracyMatrix, Tally};

fn random_images(cfg: &ViTConfig, n: usize, rng: &mut StreamRng) -> Vec<Vec<f32>> {
    let len = cfg.image_height * cfg.image_width * cfg.channels;
    (0..n).map(|_| (0..len).map(|_| rng.random::<f32>()).collect()).collect()
}

fn perturb(payload: &mut Payload, std: f64, rng: &mut StreamRng) {
    for t in payload.tensors_mut() {
        let noise = Tensor::randn(t.shape(), std, rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn random_lora_spec(cfg: &ViTConfig, rng: &mut StreamRng) -> PeftSpec {
    let sites: Vec<ProjectionSite> = ProjectionSite::ALL
        .iter()
        .copied()
        .filter(|s| !(cfg.bare_blocks && *s == ProjectionSite::Output))
        .collect();
    let mut targets: Vec<ProjectionSite> = sites.iter().copied().filter(|_| rng.random::<bool>()).collect();
    if targets.is_empty() {
        targets.push(sites[rng.random_range(0..sites.len())]);
    }
    PeftSpec::Lora {
        rank: rng.random_range(1..=4),
        targets,
        alpha: None,
    }
}

/// Alternates between the conventional and the bare tiny model.
fn case_config(case: usize) -> ViTConfig {
    if case.is_multiple_of(2) {
        tiny_config().conventional()
    } else {
        tiny_config()
    }
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroIncrementReport {
    pub cases: usize,
    /// Cases where a fresh adapter changed any output bit.
    pub bitwise_mismatches: usize,
    /// Largest gap between a merged backbone and the adapter forward.
    pub merge_max_diff: f64,
}

/// Fresh LoRA must leave the frozen output bit-identical; merging must agree with the adapter forward.
pub fn zero_increment_identity(cases: usize, seed: Seed) -> Result<ZeroIncrementReport> {
    let mut rng = seed.stream(StreamId::named("zero-increment"));
    let mut report = ZeroIncrementReport {
        cases,
        bitwise_mismatches: 0,
        merge_max_diff: 0.0,
    };
    for case in 0..cases {
        let cfg = case_config(case);
        let base = ViTParams::init(&cfg, seed.derive(StreamId::named("zero-increment-base").with(case as u64)))?;
        let spec = random_lora_spec(&cfg, &mut rng);
        let mut payload = spec.init(&cfg, seed, StreamId::named("zero-increment-adapter").with(case as u64))?;
        let images = random_images(&cfg, rng.random_range(1..=4), &mut rng);
        let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        let frozen = features_with(&cfg, &base, None, &refs, 8)?;
        let fresh = features_with(&cfg, &base, Some(&payload), &refs, 8)?;
        let same = frozen
            .iter()
            .flatten()
            .zip(fresh.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            report.bitwise_mismatches += 1;
        }
        perturb(&mut payload, 0.3, &mut rng);
        let Payload::Lora(lora) = &payload else {
            unreachable!("the spec is LoRA")
        };
        let merged = merge_into(&base, lora)?;
        let adapted = features_with(&cfg, &base, Some(&payload), &refs, 8)?;
        let folded = features_with(&cfg, &merged, None, &refs, 8)?;
        report.merge_max_diff = report.merge_max_diff.max(max_diff(&adapted, &folded));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedForwardReport {
    pub batches: usize,
    /// Projection-level gap to a direct per-sample computation.
    pub layer_max_diff: f64,
    /// Model-level gap between one mixed LoRA batch and routing each sample alone.
    pub model_max_diff: f64,
    /// The same comparison for per-sample prompt lists.
    pub prompt_max_diff: f64,
}

/// `z . W + sum_i w_i (z . down_i) . up_i` for one row, written out term by term.
fn routed_row(z: &[f64], w: &Tensor, pairs: &[LoraPair], weights: &[f64]) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; dout];
    for (o, slot) in out.iter_mut().enumerate() {
        for k in 0..din {
            *slot += z[k] * w.data()[k * dout + o];
        }
    }
    for (pair, &m) in pairs.iter().zip(weights) {
        if m == 0.0 {
            continue;
        }
        let r = pair.up.shape()[0];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut inc = 0.0;
            for j in 0..r {
                let mut h = 0.0;
                for k in 0..din {
                    h += z[k] * pair.down.data()[k * r + j];
                }
                inc += h * pair.up.data()[j * dout + o];
            }
            *slot += m * inc;
        }
    }
    out
}

fn layer_case(rng: &mut StreamRng) -> Result<f64> {
    let (din, dout) = (rng.random_range(1..=7), rng.random_range(1..=7));
    let adapters = rng.random_range(1..=5);
    let samples = rng.random_range(1..=6);
    let rows = rng.random_range(1..=4);
    let w = Tensor::randn(&[din, dout], 1.0, rng);
    let pairs: Vec<LoraPair> = (0..adapters)
        .map(|_| {
            let r = rng.random_range(1..=3);
            LoraPair {
                down: Tensor::randn(&[din, r], 1.0, rng),
                up: Tensor::randn(&[r, dout], 1.0, rng),
            }
        })
        .collect();
    let assignment = match rng.random_range(0..3) {
        0 => Assignment::Ids((0..samples).map(|_| rng.random_range(0..adapters)).collect()),
        // selection masks over several adapters
        1 => Assignment::Weights(
            (0..samples)
                .map(|_| (0..adapters).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect())
                .collect(),
        ),
        _ => Assignment::Weights(
            (0..samples)
                .map(|_| (0..adapters).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .collect(),
        ),
    };
    let weights = assignment.weights(samples, adapters)?;
    let z = Tensor::randn(&[samples * rows, din], 1.0, rng);
    let refs: Vec<&LoraPair> = pairs.iter().collect();
    let y = multi_lora_masked_forward(&z, &w, &refs, &assignment, rows)?;
    let mut worst: f64 = 0.0;
    for (row, (zr, yr)) in z.data().chunks(din).zip(y.data().chunks(dout)).enumerate() {
        let expect = routed_row(zr, &w, &pairs, &weights[row / rows]);
        for (a, b) in yr.iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn model_case(case: usize, seed: Seed, rng: &mut StreamRng) -> Result<(f64, f64)> {
    let cfg = case_config(case);
    let base = ViTParams::init(&cfg, seed.derive(StreamId::named("masked-base").with(case as u64)))?;
    let experts = rng.random_range(1..=4);
    let samples = rng.random_range(1..=5);
    let ids: Vec<usize> = (0..samples).map(|_| rng.random_range(0..experts)).collect();
    let images = random_images(&cfg, samples, rng);
    let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
    let lora_spec = random_lora_spec(&cfg, rng);
    let prompt_spec = PeftSpec::Prompt {
        length: rng.random_range(1..=3),
    };
    let mut gaps = [0.0f64; 2];
    for (slot, spec) in [lora_spec, prompt_spec].iter().enumerate() {
        let payloads: Vec<Payload> = (0..experts)
            .map(|e| {
                let mut p = spec.init(&cfg, seed, StreamId::named("masked-expert").with((case * 8 + e) as u64))?;
                perturb(&mut p, 0.3, rng);
                Ok(p)
            })
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let vit = base.bind(&mut tape);
        let bound: Vec<BoundPayload> = payloads.iter().map(|p| p.bind(&mut tape)).collect();
        let adaptation = match spec {
            PeftSpec::Lora { .. } => {
                let loras: Vec<&BoundLora> = bound
                    .iter()
                    .map(|b| match b {
                        BoundPayload::Lora(l) => l,
                        BoundPayload::Prompt(_) => unreachable!("LoRA experts"),
                    })
                    .collect();
                let weights: Vec<Vec<f64>> = ids
                    .iter()
                    .map(|&id| (0..experts).map(|e| f64::from(u8::from(e == id))).collect())
                    .collect();
                Adaptation::lora_mixture(&loras, &weights, cfg.num_layers)?
            }
            PeftSpec::Prompt { .. } => Adaptation::prompt_lists(
                ids.iter()
                    .map(|&id| match bound[id] {
                        BoundPayload::Prompt(v) => vec![v],
                        BoundPayload::Lora(_) => unreachable!("prompt experts"),
                    })
                    .collect(),
            ),
        };
        let f = adapted_features(&mut tape, &cfg, &vit, &refs, &adaptation)?;
        let mixed: Vec<Vec<f64>> = tape.value(f).chunks(cfg.hidden_dim).map(<[f64]>::to_vec).collect();
        let routed: Vec<Vec<f64>> = ids
            .iter()
            .zip(&refs)
            .map(|(&id, img)| Ok(features_with(&cfg, &base, Some(&payloads[id]), &[img], 1)?.remove(0)))
            .collect::<Result<_>>()?;
        gaps[slot] = max_diff(&mixed, &routed);
    }
    Ok((gaps[0], gaps[1]))
}

/// The masked multi-adapter forward against per-sample routing, at projection and model level.
pub fn masked_forward_oracle(batches: usize, seed: Seed) -> Result<MaskedForwardReport> {
    let mut rng = seed.stream(StreamId::named("masked-forward"));
    let mut report = MaskedForwardReport {
        batches,
        layer_max_diff: 0.0,
        model_max_diff: 0.0,
        prompt_max_diff: 0.0,
    };
    for case in 0..batches {
        report.layer_max_diff = report.layer_max_diff.max(layer_case(&mut rng)?);
        let (lora, prompt) = model_case(case, seed, &mut rng)?;
        report.model_max_diff = report.model_max_diff.max(lora);
        report.prompt_max_diff = report.prompt_max_diff.max(prompt);
    }
    Ok(report)
}

/// Lowest within-cluster sum of squares over every assignment into exactly `k` non-empty clusters.
pub fn exhaustive_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut assignment = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.iter().all(|&c| c > 0) {
            let total: f64 = points
                .iter()
                .zip(&assignment)
                .map(|(p, &a)| {
                    let mean: Vec<f64> = sums[a].iter().map(|s| s / counts[a] as f64).collect();
                    squared_distance(p, &mean)
                })
                .sum();
            best = best.min(total);
        }
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

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansReport {
    pub instances: usize,
    /// Instances whose inertia exceeds the exhaustive minimum.
    pub suboptimal: usize,
    pub worst_gap: f64,
    /// Points not assigned to their nearest centroid under the lowest-index tie rule.
    pub tie_violations: usize,
}

/// k-means on random instances of at most 8 points and k <= 3 against exhaustive search.
pub fn kmeans_oracle(instances: usize, seed: Seed) -> Result<KMeansReport> {
    let mut rng = seed.stream(StreamId::named("kmeans-oracle"));
    let mut report = KMeansReport {
        instances,
        suboptimal: 0,
        worst_gap: 0.0,
        tie_violations: 0,
    };
    for case in 0..instances {
        let n = rng.random_range(1..=8usize);
        let k = rng.random_range(1..=3usize).min(n);
        let dim = rng.random_range(1..=3usize);
        // integer grids produce duplicate points and exact distance ties
        let grid = rng.random::<bool>();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if grid {
                            f64::from(rng.random_range(-3..=3i32))
                        } else {
                            rng.random::<f64>() * 10.0 - 5.0
                        }
                    })
                    .collect()
            })
            .collect();
        let r = kmeans(&points, k, seed.derive(StreamId::named("kmeans-case").with(case as u64)), StreamId::named("oracle"), KMeansOptions::default())?;
        let best = exhaustive_inertia(&points, k);
        let gap = r.inertia - best;
        if gap > 1e-9 * (1.0 + best) {
            report.suboptimal += 1;
            report.worst_gap = report.worst_gap.max(gap);
        }
        report.tie_violations += points
            .iter()
            .zip(&r.assignment)
            .filter(|(p, &a)| nearest(p, &r.centroids).0 != a)
            .count();
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub matrices: usize,
    pub negative_forgetting: usize,
    pub negative_sum: usize,
    pub average_mismatches: usize,
}

/// Forgetting and backward-transfer bounds plus the micro-average on random accuracy matrices.
pub fn metric_identities(matrices: usize, seed: Seed) -> Result<MetricReport> {
    let mut rng = seed.stream(StreamId::named("metric-identities"));
    let mut report = MetricReport {
        matrices,
        negative_forgetting: 0,
        negative_sum: 0,
        average_mismatches: 0,
    };
    for _ in 0..matrices {
        let t = rng.random_range(2..=8usize);
        let sizes: Vec<usize> = (0..t).map(|_| rng.random_range(1..=200)).collect();
        let mut m = AccuracyMatrix::new(sizes.clone());
        for i in 0..t {
            for (j, &size) in sizes.iter().enumerate().take(i + 1) {
                // extremes are drawn often so that ties and saturated rows occur
                let correct = match rng.random_range(0..4) {
                    0 => 0,
                    1 => size,
                    _ => rng.random_range(0..=size),
                };
                m.set(i, j, Tally { correct, total: size })?;
            }
        }
        let f = forgetting(&m)?;
        let b = backward_transfer(&m)?;
        if f < 0.0 {
            report.negative_forgetting += 1;
        }
        if f + b < 0.0 {
            report.negative_sum += 1;
        }
        let (correct, total) = (0..t)
            .filter_map(|j| m.tally(t - 1, j))
            .fold((0usize, 0usize), |(c, n), tl| (c + tl.correct, n + tl.total));
        if m.final_average()? != correct as f64 / total as f64 {
            report.average_mismatches += 1;
        }
    }
    Ok(report)
}
