use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::params::{BoundBlock, BoundHead, BoundVit, Head, ViTParams};
use super::{ProjectionSite, ViTConfig};

/// A batch of token sequences laid out as `[batch * len, D]`.
#[derive(Debug, Clone, Copy)]
pub struct Sequence {
    pub x: Var,
    pub batch: usize,
    pub len: usize,
    /// Position of the class token inside each sequence.
    pub cls_index: usize,
}

/// One low-rank increment `(h . down) . up` added to a projection.
#[derive(Debug, Clone)]
pub struct LowRankTerm {
    /// `[D_in, r]`
    pub down: Var,
    /// `[r, D_out]`
    pub up: Var,
    /// Constant multiplier on the increment.
    pub scale: f64,
    /// Per-sample multipliers for the increment; `None` means 1 for every sample.
    pub sample_weights: Option<Vec<f64>>,
}

/// Low-rank increments per layer and projection site.
#[derive(Debug, Clone, Default)]
pub struct Increments {
    layers: Vec<[Vec<LowRankTerm>; 4]>,
}

impl Increments {
    pub fn new(num_layers: usize) -> Self {
        Increments {
            layers: (0..num_layers).map(|_| Default::default()).collect(),
        }
    }

    pub fn push(&mut self, layer: usize, site: ProjectionSite, term: LowRankTerm) {
        self.layers[layer][site.index()].push(term);
    }

    pub fn terms(&self, layer: usize, site: ProjectionSite) -> &[LowRankTerm] {
        self.layers
            .get(layer)
            .map_or(&[][..], |l| l[site.index()].as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(Vec::is_empty))
    }
}

/// Patchifies a batch of HWC images (row-major, f32) into `[batch * num_patches, patch_dim]`.
pub fn patchify(cfg: &ViTConfig, images: &[&[f32]]) -> Result<Vec<f64>> {
    let (h, w, c, p) = (cfg.image_height, cfg.image_width, cfg.channels, cfg.patch_size);
    let mut out = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
    for img in images {
        if img.len() != cfg.image_len() {
            return Err(Error::dim(
                "patchify",
                format!("image has {} values, expected {h}x{w}x{c}", img.len()),
            ));
        }
        for py in 0..h / p {
            for px in 0..w / p {
                for dy in 0..p {
                    let row = (py * p + dy) * w + px * p;
                    out.extend(img[row * c..(row + p) * c].iter().map(|&v| f64::from(v)));
                }
            }
        }
    }
    Ok(out)
}

/// Embeds patches, prepends the class token and adds position encodings.
pub fn embed_images(tape: &mut Tape, cfg: &ViTConfig, vit: &BoundVit, images: &[&[f32]]) -> Result<Sequence> {
    let batch = images.len();
    let np = cfg.num_patches();
    let d = cfg.hidden_dim;
    let patches = tape.constant(vec![batch * np, cfg.patch_dim()], patchify(cfg, images)?)?;
    let embedded = tape.matmul(patches, vit.patch_embed)?;
    let len = np + 1;
    let mut index = Vec::with_capacity(batch * len * d);
    for b in 0..batch {
        index.extend((0..d).map(|j| (0u32, j as u32)));
        for i in 0..np {
            index.extend((0..d).map(|j| (1u32, ((b * np + i) * d + j) as u32)));
        }
    }
    let x = tape.gather(&[vit.cls_token, embedded], index, vec![batch * len, d])?;
    let x = tape.add_bias(x, vit.pos_encoding)?;
    Ok(Sequence {
        x,
        batch,
        len,
        cls_index: 0,
    })
}

/// Prepends prompt rows to every sequence.
///
/// `prompts` holds one list per sample (or a single list shared by all
/// samples); each entry is a `[L_P, D]` tensor and they are stacked in the
/// given order ahead of the original tokens. Every sample must receive the
/// same total prompt length.
pub fn prepend_prompts(tape: &mut Tape, seq: Sequence, prompts: &[Vec<Var>]) -> Result<Sequence> {
    let shared = prompts.len() == 1;
    if !shared && prompts.len() != seq.batch {
        return Err(Error::dim(
            "prepend_prompts",
            format!("{} prompt lists for batch {}", prompts.len(), seq.batch),
        ));
    }
    let d = tape.shape(seq.x)[1];
    let mut inputs = vec![seq.x];
    let mut slot_of: HashMap<Var, u32> = HashMap::new();
    let mut extra = None;
    for list in prompts {
        let mut rows = 0;
        for &p in list {
            match tape.shape(p) {
                [r, c] if *c == d => rows += r,
                s => return Err(Error::dim("prepend_prompts", format!("prompt shape {s:?}, D = {d}"))),
            }
            slot_of.entry(p).or_insert_with(|| {
                inputs.push(p);
                (inputs.len() - 1) as u32
            });
        }
        match extra {
            None => extra = Some(rows),
            Some(e) if e != rows => {
                return Err(Error::dim("prepend_prompts", "samples received different prompt lengths"))
            }
            _ => {}
        }
    }
    let extra = extra.unwrap_or(0);
    if extra == 0 {
        return Ok(seq);
    }
    let new_len = seq.len + extra;
    let mut index = Vec::with_capacity(seq.batch * new_len * d);
    for b in 0..seq.batch {
        let list = if shared { &prompts[0] } else { &prompts[b] };
        for &p in list {
            let slot = slot_of[&p];
            let n = tape.value(p).len();
            index.extend((0..n).map(|o| (slot, o as u32)));
        }
        let start = b * seq.len * d;
        index.extend((start..start + seq.len * d).map(|o| (0u32, o as u32)));
    }
    let x = tape.gather(&inputs, index, vec![seq.batch * new_len, d])?;
    Ok(Sequence {
        x,
        batch: seq.batch,
        len: new_len,
        cls_index: seq.cls_index + extra,
    })
}

fn project(
    tape: &mut Tape,
    h: Var,
    weight: Var,
    terms: &[LowRankTerm],
    seq_len: usize,
) -> Result<Var> {
    let mut y = tape.matmul(h, weight)?;
    for term in terms {
        let z = tape.matmul(h, term.down)?;
        let mut z = tape.matmul(z, term.up)?;
        if term.scale != 1.0 {
            z = tape.scale(z, term.scale);
        }
        if let Some(w) = &term.sample_weights {
            let rows: Vec<f64> = w.iter().flat_map(|&v| std::iter::repeat_n(v, seq_len)).collect();
            z = tape.mul_rows(z, rows)?;
        }
        y = tape.add(y, z)?;
    }
    Ok(y)
}

fn block(
    tape: &mut Tape,
    cfg: &ViTConfig,
    blk: &BoundBlock,
    x: Var,
    seq: &Sequence,
    incr: Option<&Increments>,
    layer: usize,
    trace: &mut Option<&mut Vec<Var>>,
) -> Result<Var> {
    let terms = |site| incr.map_or(&[][..], |i| i.terms(layer, site));
    let (batch, len, heads) = (seq.batch, seq.len, cfg.num_heads);
    let h = if cfg.bare_blocks {
        x
    } else {
        tape.layer_norm(x, blk.ln1_gain, blk.ln1_bias, cfg.layer_norm_eps)?
    };
    let q = project(tape, h, blk.w_q, terms(ProjectionSite::Query), len)?;
    let k = project(tape, h, blk.w_k, terms(ProjectionSite::Key), len)?;
    let v = project(tape, h, blk.w_v, terms(ProjectionSite::Value), len)?;
    let q = tape.split_heads(q, batch, len, heads)?;
    let k = tape.split_heads(k, batch, len, heads)?;
    let v = tape.split_heads(v, batch, len, heads)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, cfg.attention_scale.factor(cfg.head_dim()));
    let attn = tape.softmax_rows(scores)?;
    if let Some(t) = trace.as_deref_mut() {
        t.push(attn);
    }
    let mixed = tape.batch_matmul(attn, v, false)?;
    let mixed = tape.merge_heads(mixed, batch, len, heads)?;
    let attn_out = if cfg.bare_blocks {
        mixed
    } else {
        project(tape, mixed, blk.w_o, terms(ProjectionSite::Output), len)?
    };
    let x = tape.add(x, attn_out)?;

    let h = if cfg.bare_blocks {
        x
    } else {
        tape.layer_norm(x, blk.ln2_gain, blk.ln2_bias, cfg.layer_norm_eps)?
    };
    let f = tape.matmul(h, blk.w_1)?;
    let f = tape.add_bias(f, blk.b_1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, blk.w_2)?;
    let mut f = tape.add_bias(f, blk.b_2)?;
    if cfg.outer_gelu {
        f = tape.gelu(f);
    }
    tape.add(x, f)
}

/// Runs every block and returns the class-token features `[batch, D]`.
pub fn encode(
    tape: &mut Tape,
    cfg: &ViTConfig,
    vit: &BoundVit,
    seq: &Sequence,
    increments: Option<&Increments>,
) -> Result<Var> {
    encode_traced(tape, cfg, vit, seq, increments, None)
}

/// Like [`encode`], also collecting each layer's attention weights `[batch * heads, len, len]`.
pub fn encode_traced(
    tape: &mut Tape,
    cfg: &ViTConfig,
    vit: &BoundVit,
    seq: &Sequence,
    increments: Option<&Increments>,
    attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut trace = attention;
    let mut x = seq.x;
    for (layer, blk) in vit.blocks.iter().enumerate() {
        x = block(tape, cfg, blk, x, seq, increments, layer, &mut trace)?;
    }
    if !cfg.bare_blocks {
        x = tape.layer_norm(x, vit.final_gain, vit.final_bias, cfg.layer_norm_eps)?;
    }
    let rows: Vec<usize> = (0..seq.batch).map(|b| b * seq.len + seq.cls_index).collect();
    tape.select_rows(x, &rows)
}

/// `features . W^c + b^c` for a batch of features `[batch, D]`.
pub fn classify_batch(tape: &mut Tape, features: Var, head: &BoundHead) -> Result<Var> {
    let logits = tape.matmul(features, head.weight)?;
    tape.add_bias(logits, head.bias)
}

/// Single-image embedding: `[H, W, C]` image to `[L_S, D]` tokens.
pub fn patchify_embed(image: &Tensor, cfg: &ViTConfig, params: &ViTParams) -> Result<Tensor> {
    let want = [cfg.image_height, cfg.image_width, cfg.channels];
    if image.shape() != want {
        return Err(Error::dim("patchify_embed", format!("image {:?}, expected {want:?}", image.shape())));
    }
    let pixels: Vec<f32> = image.data().iter().map(|&v| v as f32).collect();
    let mut tape = Tape::new();
    let vit = params.bind(&mut tape);
    let seq = embed_images(&mut tape, cfg, &vit, &[&pixels])?;
    Ok(tape.to_tensor(seq.x))
}

/// Single-sequence forward pass without adapters: `[L, D]` tokens to `[D]` features.
pub fn vit_forward(x: &Tensor, cls_index: usize, cfg: &ViTConfig, params: &ViTParams) -> Result<Tensor> {
    let len = match x.shape() {
        [l, d] if *d == cfg.hidden_dim && cls_index < *l => *l,
        s => return Err(Error::dim("vit_forward", format!("tokens {s:?}, cls index {cls_index}"))),
    };
    let mut tape = Tape::new();
    let vit = params.bind(&mut tape);
    let xv = tape.leaf(x);
    let seq = Sequence {
        x: xv,
        batch: 1,
        len,
        cls_index,
    };
    let f = encode(&mut tape, cfg, &vit, &seq, None)?;
    tape.to_tensor(f).reshape(vec![cfg.hidden_dim])
}

/// `W^c^T . features + b^c` for one feature vector.
pub fn classify(features: &Tensor, head: &Head) -> Result<Tensor> {
    let d = head.weight.shape()[0];
    if features.numel() != d {
        return Err(Error::dim("classify", format!("{} features for a {d}-wide head", features.numel())));
    }
    let f = features.clone().reshape(vec![1, d])?;
    let logits = f.matmul(&head.weight)?;
    let c = head.classes();
    let out = logits.data().iter().zip(head.bias.data()).map(|(a, b)| a + b).collect();
    Tensor::new(vec![c], out)
}

/// Class-token features for a batch of images with the plain backbone.
pub fn extract_features(cfg: &ViTConfig, params: &ViTParams, images: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vit = params.bind(&mut tape);
    let seq = embed_images(&mut tape, cfg, &vit, images)?;
    let f = encode(&mut tape, cfg, &vit, &seq, None)?;
    Ok(tape.value(f).chunks(cfg.hidden_dim).map(<[f64]>::to_vec).collect())
}
