use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::rng::{Seed, StreamId};
use crate::tensor::{Gradients, Tape, Tensor, Var};

use super::ViTConfig;

/// Linear classifier `features -> logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[D, C]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl Head {
    pub fn init(dim: usize, classes: usize, seed: Seed, stream: StreamId) -> Self {
        let mut rng = seed.stream(stream);
        Head {
            weight: Tensor::randn(&[dim, classes], 0.02, &mut rng).with_requires_grad(true),
            bias: Tensor::zeros(&[classes]).with_requires_grad(true),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn absorb(&mut self, bound: &BoundHead, grads: &Gradients) -> Result<()> {
        grads.accumulate_into(bound.weight, &mut self.weight)?;
        grads.accumulate_into(bound.bias, &mut self.bias)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.set_requires_grad(trainable);
        self.bias.set_requires_grad(trainable);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push(format!("{prefix}.weight"), &self.weight);
        ck.push(format!("{prefix}.bias"), &self.bias);
    }

    pub fn load(ck: &Checkpoint, prefix: &str, dim: usize) -> Result<Self> {
        let bias = ck.tensor(&format!("{prefix}.bias"))?.clone();
        let classes = bias.numel();
        let weight = ck.tensor_shaped(&format!("{prefix}.weight"), &[dim, classes])?;
        Ok(Head {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

const BLOCK_NAMES: [&str; 12] = [
    "w_q", "w_k", "w_v", "w_o", "w_1", "b_1", "w_2", "b_2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.b_1, &self.w_2, &self.b_2, &self.ln1_gain,
            &self.ln1_bias, &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    /// The projection weight at a low-rank injection site.
    pub fn projection(&self, site: super::ProjectionSite) -> &Tensor {
        use super::ProjectionSite::*;
        match site {
            Query => &self.w_q,
            Key => &self.w_k,
            Value => &self.w_v,
            Output => &self.w_o,
        }
    }

    pub fn projection_mut(&mut self, site: super::ProjectionSite) -> &mut Tensor {
        use super::ProjectionSite::*;
        match site {
            Query => &mut self.w_q,
            Key => &mut self.w_k,
            Value => &mut self.w_v,
            Output => &mut self.w_o,
        }
    }
}

impl BoundBlock {
    fn vars(&self) -> [Var; 12] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.w_1,
            self.b_1,
            self.w_2,
            self.b_2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Backbone weights plus a classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    /// `[patch_dim, D]`
    pub patch_embed: Tensor,
    /// `[L_S, D]`
    pub pos_encoding: Tensor,
    /// `[1, D]`
    pub cls_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct BoundVit {
    pub patch_embed: Var,
    pub pos_encoding: Var,
    pub cls_token: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: Var,
    pub final_bias: Var,
}

impl BoundVit {
    fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.patch_embed, self.pos_encoding, self.cls_token];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.push(self.final_gain);
        v.push(self.final_bias);
        v
    }
}

impl ViTParams {
    pub fn init(cfg: &ViTConfig, seed: Seed) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let base = StreamId::named("vit-init");
        let rng = |i: u64| seed.stream(base.with(i));
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_embed = Tensor::randn(&[cfg.patch_dim(), d], fan_in(cfg.patch_dim()), &mut rng(0));
        let pos_encoding = Tensor::randn(&[cfg.seq_len(), d], 0.02, &mut rng(1));
        let cls_token = Tensor::randn(&[1, d], 0.02, &mut rng(2));
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let mut r = rng(100 + l as u64);
                let w_q = Tensor::randn(&[d, d], fan_in(d), &mut r);
                let w_k = Tensor::randn(&[d, d], fan_in(d), &mut r);
                let w_v = Tensor::randn(&[d, d], fan_in(d), &mut r);
                let w_o = if cfg.bare_blocks {
                    Tensor::identity(d)
                } else {
                    Tensor::randn(&[d, d], fan_in(d), &mut r)
                };
                BlockParams {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    w_1: Tensor::randn(&[d, f], fan_in(d), &mut r),
                    b_1: Tensor::zeros(&[f]),
                    w_2: Tensor::randn(&[f, d], fan_in(f), &mut r),
                    b_2: Tensor::zeros(&[d]),
                    ln1_gain: Tensor::full(&[d], 1.0),
                    ln1_bias: Tensor::zeros(&[d]),
                    ln2_gain: Tensor::full(&[d], 1.0),
                    ln2_bias: Tensor::zeros(&[d]),
                }
            })
            .collect();
        let mut params = ViTParams {
            patch_embed,
            pos_encoding,
            cls_token,
            blocks,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head: Head::init(d, cfg.num_classes, seed, StreamId::named("vit-head")),
        };
        params.set_backbone_trainable(true);
        Ok(params)
    }

    fn backbone_tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_embed, &self.pos_encoding, &self.cls_token];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.final_gain);
        v.push(&self.final_bias);
        v
    }

    /// Backbone tensors in a fixed order, matching [`ViTParams::bind`].
    pub fn backbone_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.patch_embed, &mut self.pos_encoding, &mut self.cls_token];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.final_gain);
        v.push(&mut self.final_bias);
        v
    }

    /// Backbone tensors followed by the head's.
    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let ViTParams {
            patch_embed,
            pos_encoding,
            cls_token,
            blocks,
            final_gain,
            final_bias,
            head,
        } = self;
        let mut v = vec![patch_embed, pos_encoding, cls_token];
        for b in blocks {
            v.extend(b.tensors_mut());
        }
        v.push(final_gain);
        v.push(final_bias);
        v.extend(head.tensors_mut());
        v
    }

    /// Freezes or unfreezes every backbone tensor. The head is unaffected.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for t in self.backbone_tensors_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_tensors().iter().all(|t| !t.requires_grad())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundVit {
        let mut leaf = |t: &Tensor| tape.leaf(t);
        let patch_embed = leaf(&self.patch_embed);
        let pos_encoding = leaf(&self.pos_encoding);
        let cls_token = leaf(&self.cls_token);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let [w_q, w_k, w_v, w_o, w_1, b_1, w_2, b_2, ln1_gain, ln1_bias, ln2_gain, ln2_bias] =
                    b.tensors().map(&mut leaf);
                BoundBlock {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    w_1,
                    b_1,
                    w_2,
                    b_2,
                    ln1_gain,
                    ln1_bias,
                    ln2_gain,
                    ln2_bias,
                }
            })
            .collect();
        BoundVit {
            patch_embed,
            pos_encoding,
            cls_token,
            blocks,
            final_gain: leaf(&self.final_gain),
            final_bias: leaf(&self.final_bias),
        }
    }

    /// Accumulates backbone gradients from a backward pass.
    pub fn absorb(&mut self, bound: &BoundVit, grads: &Gradients) -> Result<()> {
        for (var, t) in bound.vars().into_iter().zip(self.backbone_tensors_mut()) {
            grads.accumulate_into(var, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in self.backbone_tensors_mut() {
            t.zero_grad();
        }
        self.head.weight.zero_grad();
        self.head.bias.zero_grad();
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone_tensors().iter().map(|t| t.numel()).sum()
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["patch_embed".to_string(), "pos_encoding".into(), "cls_token".into()];
        for l in 0..self.blocks.len() {
            names.extend(BLOCK_NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        names.push("final_gain".into());
        names.push("final_bias".into());
        names
    }

    pub fn to_checkpoint(&self, cfg: &ViTConfig) -> Checkpoint {
        let mut ck = Checkpoint::new("vit");
        write_config(&mut ck, cfg);
        for (name, t) in self.tensor_names().into_iter().zip(self.backbone_tensors()) {
            ck.push(name, t);
        }
        self.head.save(&mut ck, "head");
        ck
    }

    /// Restores a backbone; requires the checkpoint's architecture to match `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ViTConfig) -> Result<Self> {
        ck.expect_kind("vit")?;
        let stored = read_config(ck)?;
        if !same_architecture(&stored, cfg) {
            return Err(crate::Error::Config(format!(
                "checkpoint architecture {stored:?} does not match configured {cfg:?}"
            )));
        }
        let mut params = ViTParams::init(cfg, Seed(0))?;
        let names = params.tensor_names();
        for (name, t) in names.iter().zip(params.backbone_tensors_mut()) {
            let loaded = ck.tensor_shaped(name, t.shape())?;
            t.data_mut().copy_from_slice(loaded.data());
        }
        params.head = Head::load(ck, "head", cfg.hidden_dim)?;
        params.set_backbone_trainable(false);
        Ok(params)
    }
}

fn same_architecture(a: &ViTConfig, b: &ViTConfig) -> bool {
    a.image_height == b.image_height
        && a.image_width == b.image_width
        && a.channels == b.channels
        && a.patch_size == b.patch_size
        && a.hidden_dim == b.hidden_dim
        && a.num_layers == b.num_layers
        && a.num_heads == b.num_heads
        && a.ffn_dim == b.ffn_dim
        && a.bare_blocks == b.bare_blocks
        && a.attention_scale == b.attention_scale
        && a.outer_gelu == b.outer_gelu
        && a.layer_norm_eps.to_bits() == b.layer_norm_eps.to_bits()
}

fn write_config(ck: &mut Checkpoint, cfg: &ViTConfig) {
    ck.set_meta("image_height", cfg.image_height);
    ck.set_meta("image_width", cfg.image_width);
    ck.set_meta("channels", cfg.channels);
    ck.set_meta("patch_size", cfg.patch_size);
    ck.set_meta("hidden_dim", cfg.hidden_dim);
    ck.set_meta("num_layers", cfg.num_layers);
    ck.set_meta("num_heads", cfg.num_heads);
    ck.set_meta("ffn_dim", cfg.ffn_dim);
    ck.set_meta("num_classes", cfg.num_classes);
    ck.set_meta("bare_blocks", cfg.bare_blocks);
    ck.set_meta("attention_scale", cfg.attention_scale.as_str());
    ck.set_meta("outer_gelu", cfg.outer_gelu);
    ck.set_meta("layer_norm_eps", format!("{:e}", cfg.layer_norm_eps));
}

fn read_config(ck: &Checkpoint) -> Result<ViTConfig> {
    let scale = ck.meta("attention_scale")?;
    Ok(ViTConfig {
        image_height: ck.meta_parse("image_height")?,
        image_width: ck.meta_parse("image_width")?,
        channels: ck.meta_parse("channels")?,
        patch_size: ck.meta_parse("patch_size")?,
        hidden_dim: ck.meta_parse("hidden_dim")?,
        num_layers: ck.meta_parse("num_layers")?,
        num_heads: ck.meta_parse("num_heads")?,
        ffn_dim: ck.meta_parse("ffn_dim")?,
        num_classes: ck.meta_parse("num_classes")?,
        bare_blocks: ck.meta_parse("bare_blocks")?,
        attention_scale: super::AttentionScale::parse(scale)
            .ok_or_else(|| crate::Error::Config(format!("unknown attention scale `{scale}`")))?,
        outer_gelu: ck.meta_parse("outer_gelu")?,
        layer_norm_eps: ck.meta_parse("layer_norm_eps")?,
    })
}
