//! Labeled image sets, their on-disk format, and the synthetic pattern generator.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{Rng, Seed, StreamId, StreamRng};

pub const MANIFEST_FILE: &str = "manifest";
pub const PAYLOAD_FILE: &str = "images.bin";

/// Images stored HWC row-major as contiguous f32 samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub domain: usize,
}

impl Dataset {
    pub fn empty(height: usize, width: usize, channels: usize, domain: usize) -> Self {
        Dataset {
            height,
            width,
            channels,
            images: Vec::new(),
            labels: Vec::new(),
            domain,
        }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_refs(&self, indices: &[usize]) -> Vec<&[f32]> {
        indices.iter().map(|&i| self.image(i)).collect()
    }

    pub fn all_refs(&self) -> Vec<&[f32]> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        debug_assert_eq!(image.len(), self.image_len());
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<usize> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = String::new();
        writeln!(m, "count = {}", self.len()).unwrap();
        writeln!(m, "height = {}", self.height).unwrap();
        writeln!(m, "width = {}", self.width).unwrap();
        writeln!(m, "channels = {}", self.channels).unwrap();
        writeln!(m, "dtype = f32le").unwrap();
        let labels: Vec<String> = self.labels.iter().map(usize::to_string).collect();
        writeln!(m, "labels = {}", labels.join(",")).unwrap();
        writeln!(m, "domain = {}", self.domain).unwrap();
        let payload: Vec<u8> = self.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bpath = dir.join(PAYLOAD_FILE);
        fs::write(&bpath, payload).map_err(|e| Error::io(&bpath, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, m).map_err(|e| Error::io(&mpath, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bad = |d: String| Error::format(&mpath, d);
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("unparseable line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .ok_or_else(|| bad(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| bad(format!("`{k}` is not a count")))
        };
        let (count, height, width, channels, domain) =
            (num("count")?, num("height")?, num("width")?, num("channels")?, num("domain")?);
        match fields.get("dtype").map(String::as_str) {
            Some("f32le") => {}
            other => return Err(bad(format!("unsupported dtype {other:?}"))),
        }
        let raw = fields.get("labels").ok_or_else(|| bad("missing `labels`".into()))?;
        let labels: Vec<usize> = if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',')
                .map(|s| s.trim().parse().map_err(|_| bad(format!("bad label `{s}`"))))
                .collect::<Result<_>>()?
        };
        if labels.len() != count {
            return Err(bad(format!("{} labels for count {count}", labels.len())));
        }
        let bpath = dir.join(PAYLOAD_FILE);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() != count * height * width * channels * 4 {
            return Err(Error::format(
                &bpath,
                format!("payload has {} bytes, expected {}", bytes.len(), count * height * width * channels * 4),
            ));
        }
        let images = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Dataset {
            height,
            width,
            channels,
            images,
            labels,
            domain,
        })
    }
}

/// Concatenates datasets with identical image shape.
pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
    let mut out = Dataset::empty(first.height, first.width, first.channels, first.domain);
    for p in parts {
        if (p.height, p.width, p.channels) != (first.height, first.width, first.channels) {
            return Err(Error::dim("concat", "datasets have different image shapes"));
        }
        out.images.extend_from_slice(&p.images);
        out.labels.extend_from_slice(&p.labels);
    }
    Ok(out)
}

/// One planar sine component, in cycles per image along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub fx: f64,
    pub fy: f64,
    pub amplitude: f64,
}

/// A class of synthetic images: a sum of planar waves tinted per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPattern {
    pub waves: Vec<Wave>,
    /// Per-channel gain; `None` draws a fresh tint for every sample.
    pub tint: Option<Vec<f64>>,
}

/// How a family of synthetic classes is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternStyle {
    pub waves_per_class: usize,
    pub max_frequency: usize,
    /// Tint is drawn per sample, so colour carries no label information.
    pub tint_is_nuisance: bool,
    /// Every class uses the same waves and differs only by tint.
    pub shared_waves: bool,
}

impl Default for PatternStyle {
    fn default() -> Self {
        PatternStyle {
            waves_per_class: 2,
            max_frequency: 3,
            tint_is_nuisance: false,
            shared_waves: false,
        }
    }
}

fn random_tint(channels: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..channels)
        .map(|_| {
            let m = rng.random_range(0.3..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn random_waves(n: usize, max_f: usize, rng: &mut StreamRng) -> Vec<Wave> {
    (0..n)
        .map(|i| {
            let axis = rng.random_range(0..3);
            let mut f = || {
                let v = rng.random_range(1..=max_f as i64) as f64;
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            };
            let (fx, fy) = match axis {
                0 => (f(), 0.0),
                1 => (0.0, f()),
                _ => (f(), f()),
            };
            Wave {
                fx,
                fy,
                amplitude: if i == 0 { 1.0 } else { 0.5 },
            }
        })
        .collect()
}

/// Draws `n` class patterns for a named family.
pub fn pattern_bank(n: usize, channels: usize, style: &PatternStyle, seed: Seed, family: &str) -> Vec<ClassPattern> {
    let mut rng = seed.stream(StreamId::named("pattern-bank").with(StreamId::named(family).raw()));
    let shared = random_waves(style.waves_per_class, style.max_frequency, &mut rng);
    (0..n)
        .map(|_| {
            let waves = if style.shared_waves {
                shared.clone()
            } else {
                random_waves(style.waves_per_class, style.max_frequency, &mut rng)
            };
            let tint = (!style.tint_is_nuisance).then(|| random_tint(channels, &mut rng));
            ClassPattern { waves, tint }
        })
        .collect()
}

/// Renders one sample: random phases and gain, then additive Gaussian noise.
pub fn render(pattern: &ClassPattern, h: usize, w: usize, c: usize, noise: f64, rng: &mut StreamRng) -> Vec<f32> {
    let phases: Vec<f64> = pattern.waves.iter().map(|_| rng.random_range(0.0..TAU)).collect();
    let gain = rng.random_range(0.8..1.2);
    let tint = match &pattern.tint {
        Some(t) => t.clone(),
        None => random_tint(c, rng),
    };
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (wave, ph) in pattern.waves.iter().zip(&phases) {
                let arg = TAU * (wave.fx * x as f64 / w as f64 + wave.fy * y as f64 / h as f64) + ph;
                s += wave.amplitude * arg.sin();
            }
            for t in tint.iter().take(c) {
                let n: f64 = StandardNormal.sample(rng);
                out.push((gain * t * s + noise * n) as f32);
            }
        }
    }
    out
}

/// Deterministic input transform for domain `d` of a domain-incremental stream.
pub fn apply_domain(image: &[f32], h: usize, w: usize, c: usize, domain: usize) -> Vec<f32> {
    let at = |y: usize, x: usize, ch: usize| image[(y * w + x) * c + ch];
    let mut out = Vec::with_capacity(image.len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = match domain % 4 {
                    0 => at(y, x, ch),
                    // mirror and rotate the channels
                    1 => at(y, w - 1 - x, (ch + 1) % c),
                    // transpose when square, vertical flip otherwise
                    2 if h == w => at(x, y, ch),
                    2 => at(h - 1 - y, x, ch),
                    // inverted contrast with a brightness offset
                    _ => 0.5 - at(y, x, ch),
                };
                out.push(v);
            }
        }
    }
    out
}

/// Samples `per_class` images for each listed class id.
pub fn sample_classes(
    bank: &[ClassPattern],
    classes: &[usize],
    per_class: usize,
    shape: (usize, usize, usize),
    noise: f64,
    seed: Seed,
    stream: StreamId,
) -> Result<Dataset> {
    let (h, w, c) = shape;
    let mut ds = Dataset::empty(h, w, c, 0);
    for &cls in classes {
        let pattern = bank
            .get(cls)
            .ok_or_else(|| Error::Stream(format!("class {cls} is outside the {}-class bank", bank.len())))?;
        let mut rng = seed.stream(stream.with(cls as u64));
        for _ in 0..per_class {
            ds.push(&render(pattern, h, w, c, noise, &mut rng), cls);
        }
    }
    Ok(ds)
}
