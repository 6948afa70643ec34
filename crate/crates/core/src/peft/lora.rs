use crate::error::{Error, Result};
use crate::rng::{Seed, StreamId};
use crate::tensor::{matmul_into, Tensor};
use crate::vit::{ProjectionSite, ViTParams};

/// Standard deviation of the Gaussian init of the `up` factor.
pub const LORA_INIT_STD: f64 = 0.02;

/// One low-rank increment `z -> (z . down) . up` on a `[D_in, D_out]` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `[D_in, r]`, zero at init.
    pub down: Tensor,
    /// `[r, D_out]`, Gaussian at init.
    pub up: Tensor,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.up.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }
}

/// LoRA pairs for every layer and target projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub rank: usize,
    pub targets: Vec<ProjectionSite>,
    /// Increments are multiplied by `alpha / rank`.
    pub alpha: f64,
    /// `pairs[layer][i]` adapts `targets[i]` in that layer.
    pub pairs: Vec<Vec<LoraPair>>,
}

impl LoraParams {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.pairs.iter().flatten().map(LoraPair::param_count).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.pairs.iter().flatten().flat_map(|p| [&p.down, &p.up]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.pairs
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.down, &mut p.up])
            .collect()
    }

    pub fn pair(&self, layer: usize, site: ProjectionSite) -> Option<&LoraPair> {
        let i = self.targets.iter().position(|&t| t == site)?;
        self.pairs.get(layer).map(|l| &l[i])
    }

    /// True when every `down` factor is exactly zero.
    pub fn is_zero_increment(&self) -> bool {
        self.pairs.iter().flatten().all(|p| p.down.data().iter().all(|&v| v == 0.0))
    }
}

pub fn parse_targets(s: &str) -> Result<Vec<ProjectionSite>> {
    let mut out: Vec<ProjectionSite> = Vec::new();
    for c in s.chars() {
        let site = ProjectionSite::from_char(c)
            .ok_or_else(|| Error::Config(format!("unknown LoRA target `{c}` (expected q, k, v or o)")))?;
        if out.contains(&site) {
            return Err(Error::Config(format!("LoRA target `{c}` listed twice")));
        }
        out.push(site);
    }
    if out.is_empty() {
        return Err(Error::Config("LoRA needs at least one target".into()));
    }
    Ok(out)
}

pub fn format_targets(targets: &[ProjectionSite]) -> String {
    targets.iter().map(|t| t.as_char()).collect()
}

/// Fresh LoRA pairs for `layers` layers of width `dim`; the initial increment is exactly zero.
pub fn init_lora(
    rank: usize,
    targets: &[ProjectionSite],
    dim: usize,
    layers: usize,
    seed: Seed,
    stream: StreamId,
) -> Result<LoraParams> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::Config("LoRA needs at least one target".into()));
    }
    let mut rng = seed.stream(stream);
    let pairs = (0..layers)
        .map(|_| {
            targets
                .iter()
                .map(|_| LoraPair {
                    down: Tensor::zeros(&[dim, rank]).with_requires_grad(true),
                    up: Tensor::randn(&[rank, dim], LORA_INIT_STD, &mut rng).with_requires_grad(true),
                })
                .collect()
        })
        .collect();
    Ok(LoraParams {
        rank,
        targets: targets.to_vec(),
        alpha: rank as f64,
        pairs,
    })
}

fn check_pair(op: &'static str, w: &Tensor, pair: &LoraPair) -> Result<(usize, usize, usize)> {
    let (din, dout) = match w.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::dim(op, format!("weight shape {s:?}"))),
    };
    let r = pair.rank();
    if pair.down.shape() != [din, r] || pair.up.shape() != [r, dout] {
        return Err(Error::dim(
            op,
            format!(
                "weight {din}x{dout} with factors {:?} and {:?}",
                pair.down.shape(),
                pair.up.shape()
            ),
        ));
    }
    Ok((din, dout, r))
}

/// `(z . down) . up` for `z: [n, D_in]`, as two rank-r products.
fn increment(z: &Tensor, pair: &LoraPair, n: usize, din: usize, dout: usize, r: usize) -> Vec<f64> {
    let mut low = vec![0.0; n * r];
    matmul_into(n, din, r, z.data(), false, pair.down.data(), false, &mut low, false);
    let mut out = vec![0.0; n * dout];
    matmul_into(n, r, dout, &low, false, pair.up.data(), false, &mut out, false);
    out
}

fn rows_of(op: &'static str, z: &Tensor, din: usize) -> Result<usize> {
    match z.shape() {
        [n, d] if *d == din => Ok(*n),
        s => Err(Error::dim(op, format!("input {s:?} for a {din}-wide projection"))),
    }
}

/// `z . W + (z . down) . up`, never materializing the full-rank product.
pub fn lora_linear_forward(w: &Tensor, pair: &LoraPair, z: &Tensor) -> Result<Tensor> {
    let (din, dout, r) = check_pair("lora_linear_forward", w, pair)?;
    let n = rows_of("lora_linear_forward", z, din)?;
    let mut y = vec![0.0; n * dout];
    matmul_into(n, din, dout, z.data(), false, w.data(), false, &mut y, false);
    for (o, d) in y.iter_mut().zip(increment(z, pair, n, din, dout, r)) {
        *o += d;
    }
    Tensor::new(vec![n, dout], y)
}

/// `W + down . up`.
pub fn merge_lora(w: &Tensor, pair: &LoraPair) -> Result<Tensor> {
    let (din, dout, r) = check_pair("merge_lora", w, pair)?;
    let mut out = w.data().to_vec();
    matmul_into(din, r, dout, pair.down.data(), false, pair.up.data(), false, &mut out, true);
    Tensor::new(vec![din, dout], out)
}

/// Folds every LoRA increment into a copy of the backbone.
pub fn merge_into(params: &ViTParams, lora: &LoraParams) -> Result<ViTParams> {
    if lora.pairs.len() != params.blocks.len() {
        return Err(Error::dim(
            "merge_into",
            format!("{} LoRA layers for {} blocks", lora.pairs.len(), params.blocks.len()),
        ));
    }
    let mut merged = params.clone();
    let s = lora.scaling();
    for (blk, layer) in merged.blocks.iter_mut().zip(&lora.pairs) {
        for (&site, pair) in lora.targets.iter().zip(layer) {
            let w = blk.projection_mut(site);
            let scaled = LoraPair {
                down: pair.down.clone(),
                up: Tensor::new(pair.up.shape().to_vec(), pair.up.data().iter().map(|v| v * s).collect())?,
            };
            let mut m = merge_lora(w, &scaled)?;
            m.set_requires_grad(w.requires_grad());
            *w = m;
        }
    }
    Ok(merged)
}

/// Which adapters contribute to each sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    /// One adapter id per sample.
    Ids(Vec<usize>),
    /// Per sample, one multiplier per adapter.
    Weights(Vec<Vec<f64>>),
}

impl Assignment {
    /// Dense `[samples][adapters]` multipliers.
    pub fn weights(&self, samples: usize, adapters: usize) -> Result<Vec<Vec<f64>>> {
        let out = match self {
            Assignment::Ids(ids) => ids
                .iter()
                .map(|&id| {
                    if id >= adapters {
                        return Err(Error::Contract(format!("adapter id {id} out of range for {adapters} adapters")));
                    }
                    let mut w = vec![0.0; adapters];
                    w[id] = 1.0;
                    Ok(w)
                })
                .collect::<Result<Vec<_>>>()?,
            Assignment::Weights(w) => {
                if let Some(bad) = w.iter().find(|row| row.len() != adapters) {
                    return Err(Error::Contract(format!(
                        "assignment row has {} weights for {adapters} adapters",
                        bad.len()
                    )));
                }
                w.clone()
            }
        };
        if out.len() != samples {
            return Err(Error::Contract(format!("{} assignments for {samples} samples", out.len())));
        }
        Ok(out)
    }
}

/// Runs every adapter on every sample and masks the increments by the assignment.
///
/// `z` is `[samples * rows_per_sample, D_in]`; each sample's rows are contiguous.
pub fn multi_lora_masked_forward(
    z: &Tensor,
    w: &Tensor,
    adapters: &[&LoraPair],
    assignment: &Assignment,
    rows_per_sample: usize,
) -> Result<Tensor> {
    let (din, dout) = match w.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::dim("multi_lora_masked_forward", format!("weight shape {s:?}"))),
    };
    let n = rows_of("multi_lora_masked_forward", z, din)?;
    if rows_per_sample == 0 || n % rows_per_sample != 0 {
        return Err(Error::dim(
            "multi_lora_masked_forward",
            format!("{n} rows do not split into samples of {rows_per_sample}"),
        ));
    }
    let samples = n / rows_per_sample;
    let weights = assignment.weights(samples, adapters.len())?;
    let mut y = vec![0.0; n * dout];
    matmul_into(n, din, dout, z.data(), false, w.data(), false, &mut y, false);
    for (i, pair) in adapters.iter().enumerate() {
        let (_, _, r) = check_pair("multi_lora_masked_forward", w, pair)?;
        let inc = increment(z, pair, n, din, dout, r);
        for (row, (out, d)) in y.chunks_mut(dout).zip(inc.chunks(dout)).enumerate() {
            let m = weights[row / rows_per_sample][i];
            for (o, v) in out.iter_mut().zip(d) {
                *o += m * v;
            }
        }
    }
    Tensor::new(vec![n, dout], y)
}
