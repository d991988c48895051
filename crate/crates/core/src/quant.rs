//! Ternary weight quantization with learned per-layer scales.
//!
//! A kernel `W` with output channels on its first axis is mapped to
//!
//! ```text
//!   +γ⁺·α_c   if w >  Δ
//!    0        if |w| ≤ Δ
//!   -γ⁻·α_c   if w < -Δ
//! ```
//!
//! where `Δ = t·max|W|` is recomputed from the latent weights before every
//! forward pass, `γ⁺`/`γ⁻` are trained per layer, and `α_c` is the mean
//! magnitude of the surviving weights of output channel `c`.
//!
//! Gradients follow the straight-through rule: the zero bin passes the
//! upstream gradient unchanged, the signed bins scale it by their level, and
//! `Δ`/`α` are treated as constants of the step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Default threshold factor `t`.
pub const DEFAULT_THRESHOLD: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantScheme {
    /// Full precision, no quantization.
    #[serde(rename = "FULL")]
    Full,
    /// Ternary with learned γ± and per-channel α.
    #[serde(rename = "3DQ")]
    Tdq3,
    /// Ternary with learned γ±, α fixed to 1.
    #[serde(rename = "TTQ")]
    Ttq,
    /// Binary sign quantization with learned γ± and α.
    #[serde(rename = "BTQ")]
    Btq,
}

impl QuantScheme {
    pub const ALL: [QuantScheme; 4] = [Self::Full, Self::Tdq3, Self::Ttq, Self::Btq];

    pub fn is_quantized(self) -> bool {
        self != Self::Full
    }

    pub fn is_binary(self) -> bool {
        self == Self::Btq
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, Self::Tdq3 | Self::Btq)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "FULL",
            Self::Tdq3 => "3DQ",
            Self::Ttq => "TTQ",
            Self::Btq => "BTQ",
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown quantization scheme {s:?}")))
    }
}

/// Fixed-length bit vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    words: Vec<u64>,
    len: usize,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self { words: vec![0; len.div_ceil(64)], len }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        debug_assert!(i < self.len);
        let bit = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersects(&self, other: &BitMask) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }
}

/// Ternary pattern stored as a positive and a negative mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryTensor {
    shape: Vec<usize>,
    pos: BitMask,
    neg: BitMask,
}

impl TernaryTensor {
    pub fn new(shape: &[usize], pos: BitMask, neg: BitMask) -> Result<Self> {
        let n: usize = shape.iter().product();
        if pos.len() != n || neg.len() != n {
            return Err(Error::shape(format!(
                "ternary masks of length {}/{} for shape {shape:?}",
                pos.len(),
                neg.len()
            )));
        }
        if pos.intersects(&neg) {
            return Err(Error::invalid("positive and negative masks overlap"));
        }
        Ok(Self { shape: shape.to_vec(), pos, neg })
    }

    pub fn from_values(shape: &[usize], values: &[i8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::shape(format!(
                "{} ternary values for shape {shape:?}",
                values.len()
            )));
        }
        let mut pos = BitMask::zeros(n);
        let mut neg = BitMask::zeros(n);
        for (i, &v) in values.iter().enumerate() {
            match v {
                1 => pos.set(i, true),
                -1 => neg.set(i, true),
                0 => {}
                other => return Err(Error::invalid(format!("{other} is not a ternary value"))),
            }
        }
        Ok(Self { shape: shape.to_vec(), pos, neg })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn pos_mask(&self) -> &BitMask {
        &self.pos
    }

    pub fn neg_mask(&self) -> &BitMask {
        &self.neg
    }

    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        if self.pos.get(i) {
            1
        } else if self.neg.get(i) {
            -1
        } else {
            0
        }
    }

    pub fn values(&self) -> Vec<i8> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let nonzero = self.pos.count_ones() + self.neg.count_ones();
        1.0 - nonzero as f64 / self.len() as f64
    }
}

/// `Δ = t · max|W|`.
pub fn compute_delta<T: Scalar>(weights: &Tensor<T>, t: T) -> Result<T> {
    if weights.is_empty() {
        return Err(Error::invalid("cannot compute a threshold for an empty tensor"));
    }
    if !(t >= T::zero() && t < T::one()) {
        return Err(Error::invalid(format!("threshold factor must be in [0, 1), got {t}")));
    }
    Ok(t * weights.max_abs())
}

/// Three-bin assignment; `|w| == Δ` falls into the zero bin.
pub fn ternarize<T: Scalar>(weights: &Tensor<T>, delta: T) -> Result<TernaryTensor> {
    if !(delta >= T::zero()) {
        return Err(Error::invalid(format!("threshold must be >= 0, got {delta}")));
    }
    let n = weights.len();
    let mut pos = BitMask::zeros(n);
    let mut neg = BitMask::zeros(n);
    for (i, &w) in weights.data().iter().enumerate() {
        if w > delta {
            pos.set(i, true);
        } else if w < -delta {
            neg.set(i, true);
        }
    }
    Ok(TernaryTensor { shape: weights.shape().to_vec(), pos, neg })
}

/// Two-bin sign assignment; `w >= 0` is positive.
pub fn binarize<T: Scalar>(weights: &Tensor<T>) -> TernaryTensor {
    let n = weights.len();
    let mut pos = BitMask::zeros(n);
    let mut neg = BitMask::zeros(n);
    for (i, &w) in weights.data().iter().enumerate() {
        if w >= T::zero() {
            pos.set(i, true);
        } else {
            neg.set(i, true);
        }
    }
    TernaryTensor { shape: weights.shape().to_vec(), pos, neg }
}

/// Mean `|w|` over the non-zero bins, per output channel (or one value
/// for the whole layer, repeated per channel, when `per_channel` is false).
/// Channels with no surviving weights get 1.0.
pub fn compute_alpha<T: Scalar>(
    weights: &Tensor<T>,
    ternary: &TernaryTensor,
    per_channel: bool,
) -> Result<Vec<T>> {
    if weights.shape() != ternary.shape() {
        return Err(Error::shape(format!(
            "alpha: weights {:?} vs pattern {:?}",
            weights.shape(),
            ternary.shape()
        )));
    }
    let channels = ternary.channels();
    let per = weights.len() / channels;
    let wd = weights.data();
    let mean = |range: std::ops::Range<usize>| {
        let mut acc = T::zero();
        let mut count = 0usize;
        for i in range {
            if ternary.get(i) != 0 {
                acc += wd[i].abs();
                count += 1;
            }
        }
        if count == 0 {
            T::one()
        } else {
            acc / T::from_f64(count as f64)
        }
    };
    if per_channel {
        Ok((0..channels).map(|c| mean(c * per..(c + 1) * per)).collect())
    } else {
        Ok(vec![mean(0..weights.len()); channels])
    }
}

/// Per-layer quantization record.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState<T: Scalar = f32> {
    pub scheme: QuantScheme,
    pub t: T,
    pub delta: T,
    pub gamma_pos: T,
    pub gamma_neg: T,
    pub alpha: Vec<T>,
    pub per_channel: bool,
}

impl<T: Scalar> QuantState<T> {
    pub fn new(scheme: QuantScheme, channels: usize) -> Self {
        Self {
            scheme,
            t: T::from_f64(DEFAULT_THRESHOLD as f64),
            delta: T::zero(),
            gamma_pos: T::one(),
            gamma_neg: T::one(),
            alpha: vec![T::one(); channels],
            per_channel: true,
        }
    }

    pub fn with_threshold(mut self, t: T) -> Self {
        self.t = t;
        self
    }

    pub fn with_per_channel(mut self, per_channel: bool) -> Self {
        self.per_channel = per_channel;
        self
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    /// Bin assignment of `weights` under this state's scheme and threshold.
    pub fn pattern(&self, weights: &Tensor<T>) -> Result<TernaryTensor> {
        match self.scheme {
            QuantScheme::Btq => Ok(binarize(weights)),
            _ => ternarize(weights, self.delta),
        }
    }

    /// Recompute Δ and α from the current latent weights. γ is untouched.
    pub fn refresh(&mut self, weights: &Tensor<T>) -> Result<()> {
        let channels = weights.shape().first().copied().unwrap_or(1);
        if channels != self.alpha.len() {
            return Err(Error::shape(format!(
                "quant state has {} channels, kernel {:?}",
                self.alpha.len(),
                weights.shape()
            )));
        }
        match self.scheme {
            QuantScheme::Full => {}
            QuantScheme::Btq => {
                self.delta = T::zero();
                self.alpha = compute_alpha(weights, &binarize(weights), self.per_channel)?;
            }
            QuantScheme::Ttq => {
                self.delta = compute_delta(weights, self.t)?;
                self.alpha.fill(T::one());
            }
            QuantScheme::Tdq3 => {
                self.delta = compute_delta(weights, self.t)?;
                let pattern = ternarize(weights, self.delta)?;
                self.alpha = compute_alpha(weights, &pattern, self.per_channel)?;
            }
        }
        Ok(())
    }

    /// α as applied in the forward pass (all ones for TTQ).
    pub fn effective_alpha(&self) -> Vec<T> {
        if self.scheme.uses_alpha() {
            self.alpha.clone()
        } else {
            vec![T::one(); self.alpha.len()]
        }
    }

    fn check_gammas(&self) -> Result<()> {
        if !self.gamma_pos.is_finite() || !self.gamma_neg.is_finite() {
            return Err(Error::NonFinite(format!(
                "scaling factors γ+={} γ-={}",
                self.gamma_pos, self.gamma_neg
            )));
        }
        Ok(())
    }
}

/// The two non-zero levels `(+γ⁺·α, −γ⁻·α)` of one channel.
///
/// Both training and restoration from storage go through this function so
/// they produce identical values.
#[inline]
pub fn levels<T: Scalar>(gamma_pos: T, gamma_neg: T, alpha: T) -> (T, T) {
    (gamma_pos * alpha, -(gamma_neg * alpha))
}

/// Expand a pattern into scaled weights.
pub fn dequantize<T: Scalar>(
    ternary: &TernaryTensor,
    gamma_pos: T,
    gamma_neg: T,
    alpha: &[T],
) -> Result<Tensor<T>> {
    let channels = ternary.channels();
    if alpha.len() != channels {
        return Err(Error::shape(format!(
            "{} alpha values for {channels} channels",
            alpha.len()
        )));
    }
    let per = ternary.len() / channels;
    let mut data = Vec::with_capacity(ternary.len());
    for (c, &a) in alpha.iter().enumerate() {
        let (hi, lo) = levels(gamma_pos, gamma_neg, a);
        for i in c * per..(c + 1) * per {
            data.push(match ternary.get(i) {
                1 => hi,
                -1 => lo,
                _ => T::zero(),
            });
        }
    }
    Tensor::new(ternary.shape(), data)
}

/// Quantized weights `W̃` for the state's scheme. `FULL` returns `weights`.
pub fn quantize_forward<T: Scalar>(weights: &Tensor<T>, state: &QuantState<T>) -> Result<Tensor<T>> {
    if state.scheme == QuantScheme::Full {
        return Ok(weights.clone());
    }
    state.check_gammas()?;
    let pattern = state.pattern(weights)?;
    dequantize(&pattern, state.gamma_pos, state.gamma_neg, &state.effective_alpha())
}


/// Straight-through gradients `(dW, dγ⁺, dγ⁻)` for upstream gradient `grad`.
pub fn quantize_backward<T: Scalar>(
    grad: &Tensor<T>,
    weights: &Tensor<T>,
    state: &QuantState<T>,
) -> Result<(Tensor<T>, T, T)> {
    if grad.shape() != weights.shape() {
        return Err(Error::shape(format!(
            "quantize backward: gradient {:?} vs weights {:?}",
            grad.shape(),
            weights.shape()
        )));
    }
    if state.scheme == QuantScheme::Full {
        return Ok((grad.clone(), T::zero(), T::zero()));
    }
    let pattern = state.pattern(weights)?;
    let alpha = state.effective_alpha();
    let channels = pattern.channels();
    let per = pattern.len() / channels;
    let gd = grad.data();
    let mut dw = Vec::with_capacity(gd.len());
    let (mut d_pos, mut d_neg) = (T::zero(), T::zero());
    for (c, &a) in alpha.iter().enumerate() {
        for i in c * per..(c + 1) * per {
            let g = gd[i];
            match pattern.get(i) {
                1 => {
                    d_pos += g * a;
                    dw.push(state.gamma_pos * a * g);
                }
                -1 => {
                    d_neg -= g * a;
                    dw.push(state.gamma_neg * a * g);
                }
                _ => dw.push(g),
            }
        }
    }
    Ok((Tensor::new(weights.shape(), dw)?, d_pos, d_neg))
}

/// Record quantization of `weights` on the tape, with `gamma_pos` and
/// `gamma_neg` as single-element trainable inputs.
///
/// `state` supplies Δ and α (already refreshed); the γ values are read from
/// the tape inputs. For `FULL` the weights are returned untouched.
pub fn quantize_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    weights: Var,
    gamma_pos: Var,
    gamma_neg: Var,
    state: &QuantState<T>,
) -> Result<Var> {
    if state.scheme == QuantScheme::Full {
        return Ok(weights);
    }
    let snapshot = state.clone();
    let with_gammas = move |gp: &Tensor<T>, gn: &Tensor<T>| -> Result<QuantState<T>> {
        if gp.len() != 1 || gn.len() != 1 {
            return Err(Error::shape("γ inputs must be single-element tensors"));
        }
        let mut s = snapshot.clone();
        s.gamma_pos = gp.data()[0];
        s.gamma_neg = gn.data()[0];
        Ok(s)
    };
    let fwd = with_gammas.clone();
    tape.custom(
        &[weights, gamma_pos, gamma_neg],
        move |inputs| quantize_forward(inputs[0], &fwd(inputs[1], inputs[2])?),
        Box::new(move |ctx| {
            let s = with_gammas(ctx.inputs[1], ctx.inputs[2])?;
            let (dw, dp, dn) = quantize_backward(ctx.grad, ctx.inputs[0], &s)?;
            Ok(vec![
                dw,
                Tensor::new(ctx.inputs[1].shape(), vec![dp])?,
                Tensor::new(ctx.inputs[2].shape(), vec![dn])?,
            ])
        }),
    )
}
