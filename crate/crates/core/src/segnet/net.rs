//! Small 3-D U-Net with optional kernel quantization.
//!
//! Every resolution level has two `conv3×3×3 → batchnorm → ReLU` blocks.
//! Encoder levels are joined by 2× max pooling; each decoder stage upsamples
//! (nearest + conv, or a 2× transposed conv), concatenates the skip
//! connection and applies two more blocks. A 1×1×1 head produces logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::PackedLayer;
use crate::error::{Error, Result};
use crate::quant::{quantize_on_tape, QuantScheme, QuantState, DEFAULT_THRESHOLD};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    /// Nearest-neighbour upsampling followed by a 3×3×3 convolution.
    Upsample,
    /// 2×2×2 transposed convolution with stride 2.
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Number of resolution levels; the bottleneck sits `levels - 1`
    /// poolings below the input.
    pub levels: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub scheme: QuantScheme,
    /// When false the first convolution and the head stay full precision.
    pub quantize_first_last: bool,
    pub decoder: Decoder,
    /// Threshold factor `t` for ternary schemes.
    pub threshold: f32,
    pub per_channel_alpha: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            levels: 3,
            base_channels: 8,
            num_classes: 3,
            scheme: QuantScheme::Tdq3,
            quantize_first_last: true,
            decoder: Decoder::Upsample,
            threshold: DEFAULT_THRESHOLD,
            per_channel_alpha: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 1 {
            return bad(format!("levels must be >= 1, got {}", self.levels));
        }
        if self.levels > 8 {
            return bad(format!("levels must be <= 8, got {}", self.levels));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return bad("channel counts must be >= 1".into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes must be in [2, 255], got {}", self.num_classes));
        }
        if !(self.threshold >= 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must be in [0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    /// Channels at resolution level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Odd cubic kernel, stride 1, "same" padding.
    Same { k: usize },
    /// Non-overlapping transposed convolution.
    Transposed { factor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kind: ConvKind,
    /// `[Cout, Cin, k, k, k]`.
    pub kernel: Tensor<f32>,
    pub bias: Option<Tensor<f32>>,
    pub quant: Option<QuantState<f32>>,
    /// Set when the kernel was loaded from packed storage; `kernel` then
    /// holds the restored `±γ·α` values.
    pub frozen: Option<PackedLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    conv: usize,
    norm: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stage {
    up: Block,
    first: Block,
    second: Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked.
    Train,
    /// Running statistics, no gradients.
    Eval,
}

/// Result of recording a forward pass on a tape.
pub struct ForwardPass {
    pub logits: Var,
    /// Leaves in [`UNet3d::params_mut`] order.
    pub params: Vec<Var>,
    /// Batch statistics per normalization layer (train mode only).
    pub batch_stats: Vec<Option<BatchStats<f32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet3d {
    pub config: NetConfig,
    pub convs: Vec<ConvLayer>,
    pub norms: Vec<NormLayer>,
    enc: Vec<[Block; 2]>,
    /// Deepest stage first.
    dec: Vec<Stage>,
    head: usize,
}

struct Builder<'a> {
    config: &'a NetConfig,
    rng: ChaCha8Rng,
    convs: Vec<ConvLayer>,
    norms: Vec<NormLayer>,
}

impl Builder<'_> {
    fn conv(&mut self, name: String, kind: ConvKind, cin: usize, cout: usize, bias: bool, quantize: bool) -> usize {
        let k = match kind {
            ConvKind::Same { k } => k,
            ConvKind::Transposed { factor } => factor,
        };
        let fan_in = (cin * k * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let kernel = Tensor::from_fn(&[cout, cin, k, k, k], |_| normal.sample(&mut self.rng));
        let quant = (quantize && self.config.scheme.is_quantized()).then(|| {
            QuantState::new(self.config.scheme, cout)
                .with_threshold(self.config.threshold)
                .with_per_channel(self.config.per_channel_alpha)
        });
        self.convs.push(ConvLayer {
            name,
            kind,
            kernel,
            bias: bias.then(|| Tensor::zeros(&[cout])),
            quant,
            frozen: None,
        });
        self.convs.len() - 1
    }

    fn norm(&mut self, name: String, c: usize) -> usize {
        self.norms.push(NormLayer {
            name,
            weight: Tensor::full(&[c], 1.0),
            bias: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        });
        self.norms.len() - 1
    }

    fn block(&mut self, name: &str, kind: ConvKind, cin: usize, cout: usize, quantize: bool) -> Block {
        let conv = self.conv(format!("{name}.conv"), kind, cin, cout, false, quantize);
        let norm = self.norm(format!("{name}.bn"), cout);
        Block { conv, norm }
    }
}

impl ConvLayer {
    /// Storage form of the kernel, if it is quantized.
    pub fn packed(&self) -> Result<Option<PackedLayer>> {
        if let Some(f) = &self.frozen {
            return Ok(Some(f.clone()));
        }
        match &self.quant {
            Some(q) => Ok(Some(PackedLayer::from_state(self.kernel_name(), q, q.pattern(&self.kernel)?))),
            None => Ok(None),
        }
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.kernel", self.name)
    }
}

/// Build a freshly initialised network (Kaiming fan-in normal kernels).
pub fn build_unet3d(config: &NetConfig, seed: u64) -> Result<UNet3d> {
    config.validate()?;
    let mut b = Builder { config, rng: ChaCha8Rng::seed_from_u64(seed), convs: Vec::new(), norms: Vec::new() };
    let same = ConvKind::Same { k: 3 };
    let mut enc = Vec::with_capacity(config.levels);
    let mut cin = config.in_channels;
    for l in 0..config.levels {
        let c = config.channels(l);
        let first = b.block(&format!("enc{l}.0"), same, cin, c, l > 0 || config.quantize_first_last);
        let second = b.block(&format!("enc{l}.1"), same, c, c, true);
        enc.push([first, second]);
        cin = c;
    }
    let mut dec = Vec::with_capacity(config.levels.saturating_sub(1));
    for l in (0..config.levels - 1).rev() {
        let (c, below) = (config.channels(l), config.channels(l + 1));
        let up_kind = match config.decoder {
            Decoder::Upsample => same,
            Decoder::Transposed => ConvKind::Transposed { factor: 2 },
        };
        let up = b.block(&format!("dec{l}.up"), up_kind, below, c, true);
        let first = b.block(&format!("dec{l}.0"), same, 2 * c, c, true);
        let second = b.block(&format!("dec{l}.1"), same, c, c, true);
        dec.push(Stage { up, first, second });
    }
    let head = b.conv(
        "head".into(),
        ConvKind::Same { k: 1 },
        config.channels(0),
        config.num_classes,
        true,
        config.quantize_first_last,
    );
    let mut net = UNet3d { config: config.clone(), convs: b.convs, norms: b.norms, enc, dec, head };
    net.refresh_quant()?;
    Ok(net)
}

impl UNet3d {
    /// Trainable scalars: kernels, biases, γ⁺/γ⁻ and normalization affines.
    pub fn parameter_count(&self) -> usize {
        let convs: usize = self
            .convs
            .iter()
            .map(|c| c.kernel.len() + c.bias.as_ref().map_or(0, |b| b.len()) + if c.quant.is_some() { 2 } else { 0 })
            .sum();
        let norms: usize = self.norms.iter().map(|n| n.weight.len() + n.bias.len()).sum();
        convs + norms
    }

    pub fn kernel_weight_count(&self) -> usize {
        self.convs.iter().map(|c| c.kernel.len()).sum()
    }

    pub fn quantized_layers(&self) -> usize {
        self.convs.iter().filter(|c| c.quant.is_some()).count()
    }

    /// Recompute Δ and α of every quantized kernel from its latent weights.
    pub fn refresh_quant(&mut self) -> Result<()> {
        for conv in &mut self.convs {
            if let Some(q) = conv.quant.as_mut() {
                q.refresh(&conv.kernel)?;
            }
        }
        Ok(())
    }

    /// Mutable views of all trainable buffers, in the order used by
    /// [`ForwardPass::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for ConvLayer { kernel, bias, quant, .. } in &mut self.convs {
            out.push(kernel.data_mut());
            if let Some(b) = bias {
                out.push(b.data_mut());
            }
            if let Some(QuantState { gamma_pos, gamma_neg, .. }) = quant {
                out.push(std::slice::from_mut(gamma_pos));
                out.push(std::slice::from_mut(gamma_neg));
            }
        }
        for NormLayer { weight, bias, .. } in &mut self.norms {
            out.push(weight.data_mut());
            out.push(bias.data_mut());
        }
        out
    }

    /// Fold batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats<f32>>]) -> Result<()> {
        if stats.len() != self.norms.len() {
            return Err(Error::shape("one statistics slot per normalization layer expected"));
        }
        for (norm, s) in self.norms.iter_mut().zip(stats) {
            let Some(s) = s else { continue };
            for (r, &b) in norm.running_mean.iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, &b) in norm.running_var.iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        Ok(())
    }

    /// Quantized kernels in storage form (requires refreshed states).
    pub fn packed_layers(&self) -> Result<Vec<PackedLayer>> {
        self.convs.iter().filter_map(|c| c.packed().transpose()).collect()
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected input [N, {}, D, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if s[2..].iter().any(|&d| d % m != 0) {
            return Err(Error::shape(format!(
                "spatial dims {:?} must be multiples of {m} for {} levels",
                &s[2..],
                self.config.levels
            )));
        }
        Ok(())
    }

    /// Record the network on `tape` and return logits `[N, classes, D, H, W]`.
    pub fn forward(&self, tape: &mut Tape<f32>, input: Var, mode: Mode) -> Result<ForwardPass> {
        self.check_input(tape.value(input))?;
        let train = mode == Mode::Train;
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape<f32>, t: &Tensor<f32>| {
            let v = tape.leaf(t.clone(), train);
            params.push(v);
            v
        };
        // effective kernel and bias per conv
        let mut conv_vars = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let kernel = leaf(tape, &conv.kernel);
            let bias = conv.bias.as_ref().map(|b| leaf(tape, b));
            let kernel = match &conv.quant {
                Some(q) => {
                    let gp = leaf(tape, &Tensor::scalar(q.gamma_pos));
                    let gn = leaf(tape, &Tensor::scalar(q.gamma_neg));
                    quantize_on_tape(tape, kernel, gp, gn, q)?
                }
                None => kernel,
            };
            conv_vars.push((kernel, bias));
        }
        let norm_vars: Vec<(Var, Var)> = self
            .norms
            .iter()
            .map(|n| (leaf(tape, &n.weight), leaf(tape, &n.bias)))
            .collect();

        let mut stats: Vec<Option<BatchStats<f32>>> = vec![None; self.norms.len()];
        let mut block = |tape: &mut Tape<f32>, x: Var, b: Block| -> Result<Var> {
            let conv = &self.convs[b.conv];
            let (k, bias) = conv_vars[b.conv];
            let y = match conv.kind {
                ConvKind::Same { k: size } => tape.conv3d(x, k, bias, 1, size / 2)?,
                ConvKind::Transposed { factor } => tape.transposed_conv3d(x, k, bias, factor)?,
            };
            let (w, beta) = norm_vars[b.norm];
            let y = if train {
                let (y, s) = tape.batchnorm_train(y, w, beta, BN_EPS)?;
                stats[b.norm] = Some(s);
                y
            } else {
                let n = &self.norms[b.norm];
                tape.batchnorm_eval(y, w, beta, &n.running_mean, &n.running_var, BN_EPS)?
            };
            Ok(tape.relu(y))
        };

        let mut skips = Vec::with_capacity(self.enc.len());
        let mut x = input;
        for (l, [first, second]) in self.enc.iter().enumerate() {
            if l > 0 {
                x = tape.max_pool(x, 2)?;
            }
            x = block(tape, x, *first)?;
            x = block(tape, x, *second)?;
            skips.push(x);
        }
        skips.pop();
        for stage in &self.dec {
            let up_in = match self.convs[stage.up.conv].kind {
                ConvKind::Same { .. } => tape.upsample_nearest(x, 2)?,
                ConvKind::Transposed { .. } => x,
            };
            let up = block(tape, up_in, stage.up)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = tape.concat_channels(skip, up)?;
            x = block(tape, cat, stage.first)?;
            x = block(tape, x, stage.second)?;
        }
        let (hk, hb) = conv_vars[self.head];
        let logits = tape.conv3d(x, hk, hb, 1, 0)?;
        Ok(ForwardPass { logits, params, batch_stats: stats })
    }

    /// Inference-mode logits for a batch.
    pub fn predict_logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let pass = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(pass.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scheme: QuantScheme) -> NetConfig {
        NetConfig { levels: 3, base_channels: 8, num_classes: 3, scheme, ..NetConfig::default() }
    }

    /// Layer-by-layer count written out by hand for levels 3, base 8,
    /// 1 input channel, 3 classes: kernels `cout·cin·27`, batchnorm `2·cout`.
    const fn conv(cin: usize, cout: usize) -> usize {
        cout * cin * 27 + 2 * cout
    }

    const HAND_COUNT_FULL: usize = {
        conv(1, 8) + conv(8, 8)          // enc0
            + conv(8, 16) + conv(16, 16)   // enc1
            + conv(16, 32) + conv(32, 32)  // enc2 (bottleneck)
            + conv(32, 16) + conv(32, 16) + conv(16, 16) // dec1: up, cat, conv
            + conv(16, 8) + conv(16, 8) + conv(8, 8)     // dec0
            + (8 * 3 + 3) // 1×1×1 head with bias
    };

    #[test]
    fn parameter_count_matches_hand_count() {
        assert_eq!(HAND_COUNT_FULL, 97_379);
        let full = build_unet3d(&cfg(QuantScheme::Full), 0).unwrap();
        assert_eq!(full.parameter_count(), HAND_COUNT_FULL);
        let q = build_unet3d(&cfg(QuantScheme::Tdq3), 0).unwrap();
        // 13 convolutions, each with γ⁺ and γ⁻
        assert_eq!(q.quantized_layers(), 13);
        assert_eq!(q.parameter_count(), HAND_COUNT_FULL + 26);
        let exempt = build_unet3d(&NetConfig { quantize_first_last: false, ..cfg(QuantScheme::Tdq3) }, 0).unwrap();
        assert_eq!(exempt.quantized_layers(), 11);
    }

    #[test]
    fn full_scheme_has_no_quant_state() {
        let net = build_unet3d(&cfg(QuantScheme::Full), 0).unwrap();
        assert!(net.convs.iter().all(|c| c.quant.is_none()));
        assert!(net.packed_layers().unwrap().is_empty());
    }

    #[test]
    fn output_shape() {
        let net = build_unet3d(&cfg(QuantScheme::Tdq3), 1).unwrap();
        let x = Tensor::from_fn(&[1, 1, 16, 16, 16], |i| (i % 7) as f32 / 7.0);
        assert_eq!(net.predict_logits(&x).unwrap().shape(), &[1, 3, 16, 16, 16]);
        let t = build_unet3d(&NetConfig { decoder: Decoder::Transposed, ..cfg(QuantScheme::Tdq3) }, 1).unwrap();
        assert_eq!(t.predict_logits(&x).unwrap().shape(), &[1, 3, 16, 16, 16]);
    }

    #[test]
    fn rejects_indivisible_input_and_bad_config() {
        let net = build_unet3d(&cfg(QuantScheme::Full), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 10, 10, 10]);
        assert!(net.predict_logits(&x).is_err());
        assert!(build_unet3d(&NetConfig { levels: 0, ..cfg(QuantScheme::Full) }, 0).is_err());
        assert!(build_unet3d(&NetConfig { num_classes: 1, ..cfg(QuantScheme::Full) }, 0).is_err());
    }

    #[test]
    fn params_align_with_forward_leaves() {
        let mut net = build_unet3d(&cfg(QuantScheme::Tdq3), 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8, 8]));
        let pass = net.forward(&mut tape, x, Mode::Train).unwrap();
        let lens: Vec<usize> = pass.params.iter().map(|v| tape.value(*v).len()).collect();
        let slices = net.params_mut();
        assert_eq!(lens, slices.iter().map(|s| s.len()).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_unet3d(&cfg(QuantScheme::Tdq3), 9).unwrap();
        let b = build_unet3d(&cfg(QuantScheme::Tdq3), 9).unwrap();
        assert_eq!(a, b);
    }
}
