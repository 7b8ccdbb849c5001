//! The dual-decoder attention network.
//!
//! Wiring, for input `(N, 3, H, W)` and widths `[w1, w2, w3, w4]`:
//!
//! - Encoder block `i = 1..4`: `s_i = SE(Res_i(prev))`; `s_i` is kept as a
//!   skip and `prev = maxpool(s_i)`. The bottleneck sits at `H/16` with `w4`
//!   channels.
//! - Both decoders, stage `i = 1..4`: a 4×4 / stride-2 transpose conv doubles
//!   the spatial size, the result is concatenated with `s_{5−i}`, then two
//!   residual blocks follow. Stage output widths are `w3, w2, w1, w1`.
//! - At every attention stage the autoencoder output goes through a 1×1 conv
//!   to one channel and a sigmoid; the segmentation output is multiplied by
//!   that map before entering the next stage. The autoencoder branch is never
//!   gated.
//! - Heads: 1×1 conv to one channel plus sigmoid on each branch, giving the
//!   mask and the grayscale reconstruction.

use std::collections::BTreeSet;
use std::hash::{DefaultHasher, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{ensure, Result};
use crate::layers::{
    apply_running_updates, join, Conv2d, ConvTranspose2d, Ctx, Mode, Module, ResidualBlock, SqueezeExcite,
    TensorRole,
};
use crate::tensor::{Scalar, Tensor};

pub const NUM_STAGES: usize = 4;
/// Spatial sizes must be divisible by this (four 2× downsamplings).
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub channel_widths: Vec<usize>,
    pub se_ratio: usize,
    pub decoder_se: bool,
    /// Decoder stages (1-based) whose segmentation output is gated.
    pub attention_stages: BTreeSet<usize>,
    /// Training / inference resolution `(H, W)`.
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            channel_widths: vec![32, 64, 128, 256],
            se_ratio: 8,
            decoder_se: false,
            attention_stages: [1, 2, 3].into_iter().collect(),
            input_size: (64, 64),
        }
    }
}

impl ModelConfig {
    /// Widths `[4, 8, 16, 32]` for gradient checks and quick experiments.
    /// The SE ratio drops to 4 so that it divides the narrowest width.
    pub fn tiny() -> Self {
        ModelConfig {
            channel_widths: vec![4, 8, 16, 32],
            se_ratio: 4,
            ..Self::default()
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn without_attention(mut self) -> Self {
        self.attention_stages.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels > 0, "in_channels must be positive");
        ensure!(
            self.channel_widths.len() == NUM_STAGES,
            "expected {NUM_STAGES} channel widths, got {}",
            self.channel_widths.len()
        );
        ensure!(self.se_ratio > 0, "se_ratio must be positive");
        for &w in &self.channel_widths {
            ensure!(
                w > 0 && w % self.se_ratio == 0,
                "channel width {w} is not a positive multiple of se_ratio {}",
                self.se_ratio
            );
        }
        for &s in &self.attention_stages {
            ensure!(
                (1..NUM_STAGES).contains(&s),
                "attention stage {s} must be in 1..={} (the last stage has no successor)",
                NUM_STAGES - 1
            );
        }
        let (h, w) = self.input_size;
        check_spatial(h, w)
    }

    /// Output width of decoder stage `stage` (1-based).
    pub fn decoder_width(&self, stage: usize) -> usize {
        self.channel_widths[(NUM_STAGES - 1).saturating_sub(stage)]
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    ensure!(
        h > 0 && w > 0 && h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0,
        "spatial size {h}x{w} must be positive and divisible by {SIZE_MULTIPLE}"
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<T: Scalar> {
    pub res: ResidualBlock<T>,
    pub se: SqueezeExcite<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage<T: Scalar> {
    pub up: ConvTranspose2d<T>,
    pub res1: ResidualBlock<T>,
    pub res2: ResidualBlock<T>,
    pub se: Option<SqueezeExcite<T>>,
}

impl<T: Scalar> DecoderStage<T> {
    fn forward(&self, ctx: &mut Ctx<'_, T>, prev: &Tensor<T>, skip: &Tensor<T>) -> Result<Tensor<T>> {
        let u = self.up.forward(ctx, prev)?;
        let u = ctx.graph.concat_channels(&u, skip)?;
        let u = self.res1.forward(ctx, &u)?;
        let u = self.res2.forward(ctx, &u)?;
        match &self.se {
            Some(se) => se.forward(ctx, &u),
            None => Ok(u),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.up.visit(&join(prefix, "up"), f);
        self.res1.visit(&join(prefix, "res1"), f);
        self.res2.visit(&join(prefix, "res2"), f);
        if let Some(se) = &self.se {
            se.visit(&join(prefix, "se"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.res1.visit_mut(&join(prefix, "res1"), f);
        self.res2.visit_mut(&join(prefix, "res2"), f);
        if let Some(se) = &mut self.se {
            se.visit_mut(&join(prefix, "se"), f);
        }
    }
}

/// Outputs of one forward pass. Every value lies strictly inside (0, 1)
/// for `mask`, `gray` and the attention maps.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    pub mask: Tensor<T>,
    pub gray: Tensor<T>,
    /// One `(N,1,h,w)` map per attention stage, in stage order.
    pub attention_maps: Vec<Tensor<T>>,
    /// Encoder outputs `s_1..s_4`, shared by both decoders.
    pub skips: Vec<Tensor<T>>,
}

/// Shapes produced by the wiring for a given input, computed without
/// running any arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub skips: Vec<[usize; 4]>,
    pub bottleneck: [usize; 4],
    /// Per decoder stage: transpose-conv output, after concatenation, stage output.
    pub upsampled: Vec<[usize; 4]>,
    pub concatenated: Vec<[usize; 4]>,
    pub stage_outputs: Vec<[usize; 4]>,
    pub attention_maps: Vec<[usize; 4]>,
    pub mask: [usize; 4],
    pub gray: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct DDANet<T: Scalar = f32> {
    config: ModelConfig,
    pub encoder: Vec<EncoderBlock<T>>,
    pub seg: Vec<DecoderStage<T>>,
    pub auto: Vec<DecoderStage<T>>,
    /// `(stage, 1×1 conv to one channel)` per attention stage, ascending.
    pub attention: Vec<(usize, Conv2d<T>)>,
    pub head_seg: Conv2d<T>,
    pub head_auto: Conv2d<T>,
}

impl<T: Scalar> DDANet<T> {
    /// Initializes all parameters from a ChaCha PRNG seeded with `seed`.
    /// The same `(config, seed)` always yields bitwise-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = &config.channel_widths;

        let mut encoder = Vec::with_capacity(NUM_STAGES);
        let mut prev = config.in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let key = format!("encoder.{}", i + 1);
            encoder.push(EncoderBlock {
                res: ResidualBlock::new(&mut rng, &join(&key, "res"), prev, w),
                se: SqueezeExcite::new(&mut rng, w, config.se_ratio)?,
            });
            prev = w;
        }

        let mut make_decoder = |branch: &str| -> Result<Vec<DecoderStage<T>>> {
            let mut stages = Vec::with_capacity(NUM_STAGES);
            let mut prev = widths[NUM_STAGES - 1];
            for stage in 1..=NUM_STAGES {
                let key = format!("{branch}.{stage}");
                let out = config.decoder_width(stage);
                let skip = widths[NUM_STAGES - stage];
                let se = if config.decoder_se {
                    Some(SqueezeExcite::new(&mut rng, out, config.se_ratio)?)
                } else {
                    None
                };
                stages.push(DecoderStage {
                    up: ConvTranspose2d::new(&mut rng, prev, out, 4, 2, 1),
                    res1: ResidualBlock::new(&mut rng, &join(&key, "res1"), out + skip, out),
                    res2: ResidualBlock::new(&mut rng, &join(&key, "res2"), out, out),
                    se,
                });
                prev = out;
            }
            Ok(stages)
        };
        let seg = make_decoder("seg")?;
        let auto = make_decoder("auto")?;

        let attention = config
            .attention_stages
            .iter()
            .map(|&s| (s, Conv2d::new(&mut rng, config.decoder_width(s), 1, 1, 1, 0, true)))
            .collect();
        let last = config.decoder_width(NUM_STAGES);
        let head_seg = Conv2d::new(&mut rng, last, 1, 1, 1, 0, true);
        let head_auto = Conv2d::new(&mut rng, last, 1, 1, 1, 0, true);

        Ok(DDANet {
            config: config.clone(),
            encoder,
            seg,
            auto,
            attention,
            head_seg,
            head_auto,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let [_, c, h, w] = x.dims4()?;
        ensure!(
            c == self.config.in_channels,
            "model expects {} input channels, got {c}",
            self.config.in_channels
        );
        check_spatial(h, w)?;

        let mut skips = Vec::with_capacity(NUM_STAGES);
        let mut prev = x.clone();
        for block in &self.encoder {
            let s = block.res.forward(ctx, &prev)?;
            let s = block.se.forward(ctx, &s)?;
            prev = ctx.graph.maxpool2x2(&s)?;
            skips.push(s);
        }

        let mut seg = prev.clone();
        let mut auto = prev;
        let mut attention_maps = Vec::with_capacity(self.attention.len());
        for stage in 1..=NUM_STAGES {
            let skip = &skips[NUM_STAGES - stage];
            auto = self.auto[stage - 1].forward(ctx, &auto, skip)?;
            seg = self.seg[stage - 1].forward(ctx, &seg, skip)?;
            if let Some((_, conv)) = self.attention.iter().find(|(s, _)| *s == stage) {
                let logits = conv.forward(ctx, &auto)?;
                let map = ctx.graph.sigmoid(&logits)?;
                seg = ctx.graph.mul(&seg, &map)?;
                attention_maps.push(map);
            }
        }

        let mask = self.head_seg.forward(ctx, &seg)?;
        let mask = ctx.graph.sigmoid(&mask)?;
        let gray = self.head_auto.forward(ctx, &auto)?;
        let gray = ctx.graph.sigmoid(&gray)?;
        Ok(ForwardOutput {
            mask,
            gray,
            attention_maps,
            skips,
        })
    }

    /// Training-mode forward on `graph`; batch-norm running statistics are
    /// updated before returning.
    pub fn forward_train(&mut self, graph: &mut Graph<T>, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut ctx = Ctx::new(graph, Mode::Train);
        let out = self.forward(&mut ctx, x)?;
        let updates = ctx.take_updates();
        apply_running_updates(self, updates);
        Ok(out)
    }

    /// Eval-mode forward without recording a graph.
    pub fn predict(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut graph = Graph::inference();
        let mut ctx = Ctx::new(&mut graph, Mode::Eval);
        self.forward(&mut ctx, x)
    }

    /// Registers every learnable tensor as a leaf of `graph`.
    pub fn track_params(&mut self, graph: &mut Graph<T>) {
        self.visit_mut("", &mut |_, t, role| {
            if role == TensorRole::Param {
                graph.track(t);
            }
        });
    }

    pub fn untrack_params(&mut self) {
        self.visit_mut("", &mut |_, t, _| t.untrack());
    }

    /// Total learnable scalar count.
    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    /// Number of named tensors, parameters and buffers.
    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, _| n += 1);
        n
    }

    /// `(name, role, tensor)` for every tensor, in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, TensorRole, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, role| out.push((name.to_string(), role, t.detach())));
        out
    }

    /// Order-sensitive hash over every tensor's name, shape and bits.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit("", &mut |name, t, _| {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write_usize(d);
            }
            for v in t.data() {
                h.write_u64(v.as_f64().to_bits());
            }
        });
        h.finish()
    }

    /// Casts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DDANet<U> {
        let mut out = DDANet::<U>::build(&self.config, 0).expect("config was validated at build");
        let mut sources = self.named_tensors().into_iter();
        out.visit_mut("", &mut |name, t, _| {
            let (src_name, _, src) = sources.next().expect("same structure");
            debug_assert_eq!(src_name, name);
            *t = src.cast();
        });
        out
    }

    /// Shapes along the wiring for an `(n, in_channels, h, w)` input,
    /// validated against the layer geometry without doing any arithmetic.
    pub fn trace_shapes(&self, n: usize, h: usize, w: usize) -> Result<ShapeTrace> {
        check_spatial(h, w)?;
        let mut skips = Vec::new();
        let mut cur = [n, self.config.in_channels, h, w];
        for block in &self.encoder {
            ensure!(cur[1] == block.res.in_channels(), "encoder channel mismatch at {cur:?}");
            ensure!(block.se.channels() == block.res.out_channels(), "SE width mismatch");
            let s = [n, block.res.out_channels(), cur[2], cur[3]];
            skips.push(s);
            cur = [n, s[1], s[2] / 2, s[3] / 2];
        }
        let bottleneck = cur;

        let mut upsampled = Vec::new();
        let mut concatenated = Vec::new();
        let mut stage_outputs = Vec::new();
        let mut attention_maps = Vec::new();
        for (branch_index, branch) in [&self.seg, &self.auto].into_iter().enumerate() {
            let mut cur = bottleneck;
            for (i, stage) in branch.iter().enumerate() {
                ensure!(cur[1] == stage.up.in_channels(), "decoder channel mismatch at {cur:?}");
                let (uh, uw) = stage.up.output_size(cur[2], cur[3]);
                let up = [n, stage.up.out_channels(), uh, uw];
                let skip = skips[NUM_STAGES - 1 - i];
                ensure!(
                    skip[2] == uh && skip[3] == uw,
                    "upsampled {up:?} does not line up with skip {skip:?}"
                );
                let cat = [n, up[1] + skip[1], uh, uw];
                ensure!(cat[1] == stage.res1.in_channels(), "concat width mismatch at stage {}", i + 1);
                ensure!(stage.res1.out_channels() == stage.res2.in_channels(), "residual width mismatch");
                let out = [n, stage.res2.out_channels(), uh, uw];
                if branch_index == 0 {
                    upsampled.push(up);
                    concatenated.push(cat);
                    stage_outputs.push(out);
                    if let Some((_, conv)) = self.attention.iter().find(|(s, _)| *s == i + 1) {
                        ensure!(conv.in_channels() == out[1], "attention conv width mismatch");
                        attention_maps.push([n, 1, uh, uw]);
                    }
                }
                cur = out;
            }
        }
        let last = *stage_outputs.last().expect("four stages");
        ensure!(self.head_seg.in_channels() == last[1], "segmentation head width mismatch");
        ensure!(self.head_auto.in_channels() == last[1], "reconstruction head width mismatch");
        Ok(ShapeTrace {
            skips,
            bottleneck,
            upsampled,
            concatenated,
            stage_outputs,
            attention_maps,
            mask: [n, 1, last[2], last[3]],
            gray: [n, 1, last[2], last[3]],
        })
    }
}

impl<T: Scalar> Module<T> for DDANet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        for (i, block) in self.encoder.iter().enumerate() {
            let key = join(prefix, &format!("encoder.{}", i + 1));
            block.res.visit(&join(&key, "res"), f);
            block.se.visit(&join(&key, "se"), f);
        }
        for (branch, stages) in [("seg", &self.seg), ("auto", &self.auto)] {
            for (i, stage) in stages.iter().enumerate() {
                stage.visit(&join(prefix, &format!("{branch}.{}", i + 1)), f);
            }
        }
        for (s, conv) in &self.attention {
            conv.visit(&join(prefix, &format!("attention.{s}")), f);
        }
        self.head_seg.visit(&join(prefix, "head_seg"), f);
        self.head_auto.visit(&join(prefix, "head_auto"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorRole)) {
        for (i, block) in self.encoder.iter_mut().enumerate() {
            let key = join(prefix, &format!("encoder.{}", i + 1));
            block.res.visit_mut(&join(&key, "res"), f);
            block.se.visit_mut(&join(&key, "se"), f);
        }
        for (branch, stages) in [("seg", &mut self.seg), ("auto", &mut self.auto)] {
            for (i, stage) in stages.iter_mut().enumerate() {
                stage.visit_mut(&join(prefix, &format!("{branch}.{}", i + 1)), f);
            }
        }
        for (s, conv) in &mut self.attention {
            conv.visit_mut(&join(prefix, &format!("attention.{s}")), f);
        }
        self.head_seg.visit_mut(&join(prefix, "head_seg"), f);
        self.head_auto.visit_mut(&join(prefix, "head_auto"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::default();
        c.channel_widths = vec![32, 64, 128];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.channel_widths = vec![4, 8, 16, 32];
        assert!(c.validate().is_err(), "4 is not divisible by 8");
        let c = ModelConfig::default().with_input_size(72, 64);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.attention_stages.insert(4);
        assert!(c.validate().is_err());
    }

    #[test]
    fn decoder_widths_mirror_encoder() {
        let c = ModelConfig::default();
        let widths: Vec<usize> = (1..=4).map(|s| c.decoder_width(s)).collect();
        assert_eq!(widths, vec![128, 64, 32, 32]);
    }

    #[test]
    fn batchnorm_keys_match_visit_paths() {
        let mut net = DDANet::<f32>::build(&ModelConfig::tiny().with_input_size(16, 16), 0).unwrap();
        let mut g = Graph::new();
        let x = Tensor::full(vec![2, 3, 16, 16], 0.5);
        // apply_running_updates asserts (in debug builds) that every queued update found its tensor.
        let before = net.checksum();
        net.forward_train(&mut g, &x).unwrap();
        assert_ne!(before, net.checksum());
    }

    #[test]
    fn rejects_bad_input() {
        let net = DDANet::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        assert!(net.predict(&Tensor::zeros(vec![1, 3, 24, 32])).is_err());
        assert!(net.predict(&Tensor::zeros(vec![1, 1, 32, 32])).is_err());
        assert!(net.trace_shapes(1, 40, 32).is_err());
    }
}
