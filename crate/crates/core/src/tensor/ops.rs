//! Elementwise, normalization, resampling and loss operations.
//!
//! Channel-wise operations accept any `[N, C, spatial...]` layout; resampling
//! operations require the 5-D `[N, C, D, H, W]` layout.

use crate::error::{Error, Result};

use super::{expect_rank, Scalar, Tape, Tensor, Var};

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance, used for running-statistics updates.
    pub var: Vec<T>,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum",
            out,
            &[x],
            Box::new(move |ctx| Ok(vec![Tensor::full(&shape, ctx.grad.data()[0])])),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(
            "add",
            out,
            &[a, b],
            Box::new(|ctx| Ok(vec![ctx.grad.clone(), ctx.grad.clone()])),
        ))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(
            "scale",
            out,
            &[x],
            Box::new(move |ctx| Ok(vec![ctx.grad.map(|g| g * factor)])),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(
            "relu",
            out,
            &[x],
            Box::new(|ctx| {
                let x = ctx.inputs[0];
                let data = x
                    .data()
                    .iter()
                    .zip(ctx.grad.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Ok(vec![Tensor::new(x.shape(), data)?])
            }),
        )
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!(
                "concat: non-channel dims differ, {sa:?} vs {sb:?}"
            )));
        }
        let (n, ca, s) = ta.ncs()?;
        let cb = sb[1];
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&tb.data()[i * cb * s..(i + 1) * cb * s]);
        }
        let out = Tensor::new(&shape, data)?;
        let (shape_a, shape_b) = (sa.to_vec(), sb.to_vec());
        Ok(self.push(
            "concat",
            out,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut ga = Vec::with_capacity(n * ca * s);
                let mut gb = Vec::with_capacity(n * cb * s);
                for i in 0..n {
                    let base = i * (ca + cb) * s;
                    ga.extend_from_slice(&g[base..base + ca * s]);
                    gb.extend_from_slice(&g[base + ca * s..base + (ca + cb) * s]);
                }
                Ok(vec![Tensor::new(&shape_a, ga)?, Tensor::new(&shape_b, gb)?])
            }),
        ))
    }

    /// Softmax over the channel axis, independently per voxel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        Ok(self.push(
            "softmax",
            out,
            &[x],
            Box::new(|ctx| {
                let y = ctx.output;
                let (n, c, s) = y.ncs()?;
                let (yd, gd) = (y.data(), ctx.grad.data());
                let mut dx = vec![T::zero(); yd.len()];
                for i in 0..n {
                    for v in 0..s {
                        let at = |k: usize| i * c * s + k * s + v;
                        let mut dot = T::zero();
                        for k in 0..c {
                            dot += gd[at(k)] * yd[at(k)];
                        }
                        for k in 0..c {
                            dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                Ok(vec![Tensor::new(y.shape(), dx)?])
            }),
        ))
    }

    /// Training-mode batch normalization using the batch's own statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let tx = self.value(x);
        let (n, c, s) = tx.ncs()?;
        check_channel_param(self.value(weight), c, "batchnorm weight")?;
        check_channel_param(self.value(bias), c, "batchnorm bias")?;
        let m = n * s;
        let mf = T::from_f64(m as f64);
        let xd = tx.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..n {
                for &v in &xd[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    acc += v;
                }
            }
            mean[ch] = acc / mf;
            let mut sq = T::zero();
            for i in 0..n {
                for &v in &xd[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    let d = v - mean[ch];
                    sq += d * d;
                }
            }
            var[ch] = sq / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (wd, bd) = (self.value(weight).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * s..(i * c + ch + 1) * s;
                for j in range {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = wd[ch] * h + bd[ch];
                }
            }
        }
        let shape = tx.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        let unbiased = if m > 1 {
            let k = mf / T::from_f64((m - 1) as f64);
            var.iter().map(|&v| v * k).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats { mean, var: unbiased };
        let node = self.push(
            "batchnorm",
            out,
            &[x, weight, bias],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let w = ctx.inputs[1].data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                    for i in 0..n {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            sum_g += g[j];
                            sum_gx += g[j] * xhat[j];
                        }
                    }
                    db[ch] = sum_g;
                    dw[ch] = sum_gx;
                    let k = w[ch] * inv_std[ch] / mf;
                    for i in 0..n {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            dx[j] = k * (mf * g[j] - sum_g - xhat[j] * sum_gx);
                        }
                    }
                }
                Ok(vec![
                    Tensor::new(&shape, dx)?,
                    Tensor::new(&[c], dw)?,
                    Tensor::new(&[c], db)?,
                ])
            }),
        );
        Ok((node, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (n, c, s) = tx.ncs()?;
        check_channel_param(self.value(weight), c, "batchnorm weight")?;
        check_channel_param(self.value(bias), c, "batchnorm bias")?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(format!(
                "batchnorm: running stats for {} channels, input has {c}",
                mean.len()
            )));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let (wd, bd) = (self.value(weight).data(), self.value(bias).data());
        let xd = tx.data();
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    out[j] = wd[ch] * ((xd[j] - mean[ch]) * inv_std[ch]) + bd[ch];
                }
            }
        }
        let shape = tx.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            "batchnorm_eval",
            out,
            &[x, weight, bias],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xd = ctx.inputs[0].data();
                let w = ctx.inputs[1].data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            let h = (xd[j] - mean[ch]) * inv_std[ch];
                            dx[j] = g[j] * w[ch] * inv_std[ch];
                            dw[ch] += g[j] * h;
                            db[ch] += g[j];
                        }
                    }
                }
                Ok(vec![
                    Tensor::new(&shape, dx)?,
                    Tensor::new(&[c], dw)?,
                    Tensor::new(&[c], db)?,
                ])
            }),
        ))
    }

    /// Nearest-neighbour upsampling of a `[N, C, D, H, W]` tensor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::invalid(format!("upsample factor must be >= 2, got {factor}")));
        }
        let tx = self.value(x);
        expect_rank(tx, 5, "upsample_nearest")?;
        let in_shape = tx.shape().to_vec();
        let [n, c, d, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]];
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let xd = tx.data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        for plane in 0..n * c {
            let src = &xd[plane * d * h * w..(plane + 1) * d * h * w];
            for z in 0..od {
                for y in 0..oh {
                    let row = &src[((z / factor) * h + y / factor) * w..][..w];
                    for x in 0..ow {
                        out.push(row[x / factor]);
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, od, oh, ow], out)?;
        Ok(self.push(
            "upsample_nearest",
            out,
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); n * c * d * h * w];
                for plane in 0..n * c {
                    let dst = &mut dx[plane * d * h * w..(plane + 1) * d * h * w];
                    let src = &g[plane * od * oh * ow..(plane + 1) * od * oh * ow];
                    for z in 0..od {
                        for y in 0..oh {
                            let row = ((z / factor) * h + y / factor) * w;
                            for xx in 0..ow {
                                dst[row + xx / factor] += src[(z * oh + y) * ow + xx];
                            }
                        }
                    }
                }
                Ok(vec![Tensor::new(&in_shape, dx)?])
            }),
        ))
    }

    /// Non-overlapping max pooling with a cubic window of `size`.
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let tx = self.value(x);
        expect_rank(tx, 5, "max_pool")?;
        let in_shape = tx.shape().to_vec();
        let [n, c, d, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]];
        if size == 0 || d % size != 0 || h % size != 0 || w % size != 0 {
            return Err(Error::shape(format!(
                "max_pool: spatial dims {:?} not divisible by {size}",
                &in_shape[2..]
            )));
        }
        let (od, oh, ow) = (d / size, h / size, w / size);
        let xd = tx.data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = base + ((z * size) * h + y * size) * w + xx * size;
                        for a in 0..size {
                            for b in 0..size {
                                for e in 0..size {
                                    let j = base
                                        + ((z * size + a) * h + y * size + b) * w
                                        + xx * size
                                        + e;
                                    if xd[j] > xd[best] {
                                        best = j;
                                    }
                                }
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, od, oh, ow], out)?;
        Ok(self.push(
            "max_pool",
            out,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for (&j, &g) in argmax.iter().zip(ctx.grad.data()) {
                    dx[j] += g;
                }
                Ok(vec![Tensor::new(&in_shape, dx)?])
            }),
        ))
    }

    /// `1 - mean_c (2 Σ p·g + ε) / (Σ p + Σ g + ε)` with sums over batch and
    /// voxels. `target` is a one-hot tensor with the same shape as `probs`.
    pub fn dice_loss(&mut self, probs: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let tp = self.value(probs);
        same_shape(tp, target, "dice_loss")?;
        let (n, c, s) = tp.ncs()?;
        let (pd, gd) = (tp.data(), target.data());
        let mut inter = vec![T::zero(); c];
        let mut total = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    inter[ch] += pd[j] * gd[j];
                    total[ch] += pd[j] + gd[j];
                }
            }
        }
        let cf = T::from_f64(c as f64);
        let two = T::from_f64(2.0);
        let mut mean_dice = T::zero();
        for ch in 0..c {
            mean_dice += (two * inter[ch] + eps) / (total[ch] + eps);
        }
        let loss = T::one() - mean_dice / cf;
        let target = target.clone();
        Ok(self.push(
            "dice_loss",
            Tensor::scalar(loss),
            &[probs],
            Box::new(move |ctx| {
                let up = ctx.grad.data()[0];
                let gd = target.data();
                let mut dp = vec![T::zero(); gd.len()];
                for ch in 0..c {
                    let denom = total[ch] + eps;
                    let numer = two * inter[ch] + eps;
                    let k = -up / cf / (denom * denom);
                    for i in 0..n {
                        for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                            dp[j] = k * (two * gd[j] * denom - numer);
                        }
                    }
                }
                Ok(vec![Tensor::new(target.shape(), dp)?])
            }),
        ))
    }

    /// Mean over voxels of `w[y] · -log softmax(logits)[y]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        class_weights: &[T],
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c, s) = tl.ncs()?;
        if class_weights.len() != c {
            return Err(Error::shape(format!(
                "cross entropy: {} class weights for {c} classes",
                class_weights.len()
            )));
        }
        if labels.len() != n * s {
            return Err(Error::shape(format!(
                "cross entropy: {} labels for {} voxels",
                labels.len(),
                n * s
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_channels(tl)?;
        let ld = tl.data();
        let voxels = T::from_f64((n * s) as f64);
        let mut acc = T::zero();
        for i in 0..n {
            for v in 0..s {
                let at = |k: usize| i * c * s + k * s + v;
                let mut mx = ld[at(0)];
                for k in 1..c {
                    mx = mx.max(ld[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    z += (ld[at(k)] - mx).exp();
                }
                let y = labels[i * s + v] as usize;
                let nll = mx + z.ln() - ld[at(y)];
                acc += class_weights[y] * nll;
            }
        }
        let loss = acc / voxels;
        let labels = labels.to_vec();
        let weights = class_weights.to_vec();
        let shape = tl.shape().to_vec();
        Ok(self.push(
            "weighted_cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |ctx| {
                let up = ctx.grad.data()[0];
                let pd = probs.data();
                let mut dl = vec![T::zero(); pd.len()];
                for i in 0..n {
                    for v in 0..s {
                        let y = labels[i * s + v] as usize;
                        let k = up * weights[y] / voxels;
                        for ch in 0..c {
                            let j = i * c * s + ch * s + v;
                            let hot = if ch == y { T::one() } else { T::zero() };
                            dl[j] = k * (pd[j] - hot);
                        }
                    }
                }
                Ok(vec![Tensor::new(&shape, dl)?])
            }),
        ))
    }
}

fn check_channel_param<T: Scalar>(p: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if p.shape() != [c] {
        return Err(Error::shape(format!(
            "{what}: expected [{c}], got {:?}",
            p.shape()
        )));
    }
    Ok(())
}

/// Numerically stable softmax over axis 1 of `[N, C, spatial...]`.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s) = x.ncs()?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for i in 0..n {
        for v in 0..s {
            let at = |k: usize| i * c * s + k * s + v;
            let mut mx = xd[at(0)];
            for k in 1..c {
                mx = mx.max(xd[at(k)]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (xd[at(k)] - mx).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                out[at(k)] = out[at(k)] / z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}
