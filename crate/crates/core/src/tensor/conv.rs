//! 3-D convolution via volume-to-column lowering and a GEMM.
//!
//! Each batch element is lowered independently; per-sample kernel gradients
//! are reduced in batch order so results do not depend on the thread count.

use crate::error::{Error, Result};
use crate::par;

use super::{expect_rank, Scalar, Tape, Tensor, Var};

/// Output extent of a convolution along one axis.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ins: [usize; 3],
    outs: [usize; 3],
}

impl ConvGeom {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        expect_rank(input, 5, "conv3d input")?;
        expect_rank(kernel, 5, "conv3d kernel")?;
        let (is, ks) = (input.shape(), kernel.shape());
        if ks[1] != is[1] {
            return Err(Error::shape(format!(
                "conv3d: kernel expects {} input channels, input has {} (input {is:?}, kernel {ks:?})",
                ks[1], is[1]
            )));
        }
        let k = ks[2];
        if ks[3] != k || ks[4] != k {
            return Err(Error::shape(format!("conv3d: kernel must be cubic, got {ks:?}")));
        }
        if k % 2 == 0 {
            return Err(Error::shape(format!("conv3d: kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d: stride must be >= 1"));
        }
        if let Some(b) = bias {
            if b.shape() != [ks[0]] {
                return Err(Error::shape(format!(
                    "conv3d: bias shape {:?}, expected [{}]",
                    b.shape(),
                    ks[0]
                )));
            }
        }
        let mut outs = [0; 3];
        for a in 0..3 {
            outs[a] = conv_out_dim(is[2 + a], k, stride, pad).ok_or_else(|| {
                Error::shape(format!(
                    "conv3d: spatial dim {} with padding {pad} smaller than kernel {k}",
                    is[2 + a]
                ))
            })?;
        }
        Ok(Self {
            n: is[0],
            cin: is[1],
            cout: ks[0],
            k,
            stride,
            pad,
            ins: [is[2], is[3], is[4]],
            outs,
        })
    }

    fn in_plane(&self) -> usize {
        self.ins.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.outs.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Lower one sample `[Cin, D, H, W]` into a `[Cin·k³, P]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (k, p) = (self.k, self.out_plane());
        let [d, h, w] = self.ins;
        let [od, oh, ow] = self.outs;
        let mut cols = vec![T::zero(); self.rows() * p];
        let mut row = 0;
        for ci in 0..self.cin {
            let src = &x[ci * d * h * w..(ci + 1) * d * h * w];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        let mut j = 0;
                        for z in 0..od {
                            let iz = (z * self.stride + kd) as isize - self.pad as isize;
                            for y in 0..oh {
                                let iy = (y * self.stride + kh) as isize - self.pad as isize;
                                let valid_zy = iz >= 0 && iz < d as isize && iy >= 0 && iy < h as isize;
                                for xx in 0..ow {
                                    let ix = (xx * self.stride + kw) as isize - self.pad as isize;
                                    if valid_zy && ix >= 0 && ix < w as isize {
                                        dst[j] = src[(iz as usize * h + iy as usize) * w + ix as usize];
                                    }
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a `[Cin·k³, P]` matrix back onto a sample.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (k, p) = (self.k, self.out_plane());
        let [d, h, w] = self.ins;
        let [od, oh, ow] = self.outs;
        let mut row = 0;
        for ci in 0..self.cin {
            let dst = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let src = &cols[row * p..(row + 1) * p];
                        let mut j = 0;
                        for z in 0..od {
                            let iz = (z * self.stride + kd) as isize - self.pad as isize;
                            for y in 0..oh {
                                let iy = (y * self.stride + kh) as isize - self.pad as isize;
                                let valid_zy = iz >= 0 && iz < d as isize && iy >= 0 && iy < h as isize;
                                for xx in 0..ow {
                                    let ix = (xx * self.stride + kw) as isize - self.pad as isize;
                                    if valid_zy && ix >= 0 && ix < w as isize {
                                        dst[(iz as usize * h + iy as usize) * w + ix as usize] += src[j];
                                    }
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn forward_sample<T: Scalar>(&self, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let (p, kk) = (self.out_plane(), self.rows());
        let cols = self.im2col(x);
        let mut out = vec![T::zero(); self.cout * p];
        if let Some(b) = bias {
            for (co, chunk) in out.chunks_mut(p).enumerate() {
                chunk.fill(b[co]);
            }
        }
        T::gemm(
            self.cout,
            kk,
            p,
            kernel,
            (kk as isize, 1),
            &cols,
            (p as isize, 1),
            T::one(),
            &mut out,
            (p as isize, 1),
        );
        out
    }
}

/// Plain (tape-free) 3-D convolution of `[N, Cin, D, H, W]` by
/// `[Cout, Cin, k, k, k]`.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, bias, stride, padding)?;
    let (ip, op) = (g.cin * g.in_plane(), g.cout * g.out_plane());
    let xd = input.data();
    let kd = kernel.data();
    let bd = bias.map(|b| b.data());
    let per_sample = par::map_range(g.n, |i| g.forward_sample(&xd[i * ip..(i + 1) * ip], kd, bd));
    let mut data = Vec::with_capacity(g.n * op);
    for s in per_sample {
        data.extend_from_slice(&s);
    }
    Tensor::new(&[g.n, g.cout, g.outs[0], g.outs[1], g.outs[2]], data)
}

impl<T: Scalar> Tape<T> {
    /// Differentiable 3-D convolution.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv3d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let g = ConvGeom::new(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            "conv3d",
            out,
            &inputs,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let gout = ctx.grad.data();
                let (ip, p, kk) = (g.cin * g.in_plane(), g.out_plane(), g.rows());
                let op = g.cout * p;
                let per_sample = par::map_range(g.n, |i| {
                    let go = &gout[i * op..(i + 1) * op];
                    let cols = g.im2col(&x.data()[i * ip..(i + 1) * ip]);
                    let mut gw = vec![T::zero(); g.cout * kk];
                    T::gemm(
                        g.cout,
                        p,
                        kk,
                        go,
                        (p as isize, 1),
                        &cols,
                        (1, p as isize),
                        T::zero(),
                        &mut gw,
                        (kk as isize, 1),
                    );
                    let mut gcols = cols;
                    T::gemm(
                        kk,
                        g.cout,
                        p,
                        w.data(),
                        (1, kk as isize),
                        go,
                        (p as isize, 1),
                        T::zero(),
                        &mut gcols,
                        (p as isize, 1),
                    );
                    let mut gx = vec![T::zero(); ip];
                    g.col2im(&gcols, &mut gx);
                    let gb: Vec<T> = go.chunks(p).map(|c| c.iter().copied().sum()).collect();
                    (gx, gw, gb)
                });
                let mut dx = Vec::with_capacity(g.n * ip);
                let mut dw = vec![T::zero(); g.cout * kk];
                let mut db = vec![T::zero(); g.cout];
                for (gx, gw, gb) in per_sample {
                    dx.extend_from_slice(&gx);
                    for (a, b) in dw.iter_mut().zip(&gw) {
                        *a += *b;
                    }
                    for (a, b) in db.iter_mut().zip(&gb) {
                        *a += *b;
                    }
                }
                let mut grads = vec![Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?];
                if has_bias {
                    grads.push(Tensor::new(&[g.cout], db)?);
                }
                Ok(grads)
            }),
        ))
    }

    /// Transposed convolution with kernel size equal to stride `factor`
    /// (non-overlapping). Kernel layout is `[Cout, Cin, f, f, f]`.
    pub fn transposed_conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        factor: usize,
    ) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        expect_rank(x, 5, "transposed_conv3d input")?;
        expect_rank(w, 5, "transposed_conv3d kernel")?;
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if factor < 2 {
            return Err(Error::invalid(format!("transposed conv factor must be >= 2, got {factor}")));
        }
        if ws[1] != xs[1] || ws[2..] != [factor, factor, factor] {
            return Err(Error::shape(format!(
                "transposed_conv3d: kernel {ws:?} incompatible with input {xs:?} and factor {factor}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::shape("transposed_conv3d: bias must be [Cout]"));
            }
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let [d, h, wd] = [xs[2], xs[3], xs[4]];
        let f3 = factor * factor * factor;
        let p = d * h * wd;
        let out_shape = [n, cout, d * factor, h * factor, wd * factor];
        let op = cout * p * f3;
        // position of (patch voxel v, offset abe) in an output plane
        let scatter: Vec<usize> = {
            let (oh, ow) = (h * factor, wd * factor);
            let mut idx = vec![0; f3 * p];
            for a in 0..factor {
                for b in 0..factor {
                    for e in 0..factor {
                        let off = (a * factor + b) * factor + e;
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..wd {
                                    let v = (z * h + y) * wd + xx;
                                    idx[off * p + v] =
                                        ((z * factor + a) * oh + y * factor + b) * ow + xx * factor + e;
                                }
                            }
                        }
                    }
                }
            }
            idx
        };
        let xd = x.data();
        let kd = w.data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        let per_sample = par::map_range(n, |i| {
            let xi = &xd[i * cin * p..(i + 1) * cin * p];
            let mut out = vec![T::zero(); op];
            let mut y = vec![T::zero(); f3 * p];
            for co in 0..cout {
                T::gemm(
                    f3,
                    cin,
                    p,
                    &kd[co * cin * f3..(co + 1) * cin * f3],
                    (1, f3 as isize),
                    xi,
                    (p as isize, 1),
                    T::zero(),
                    &mut y,
                    (p as isize, 1),
                );
                let plane = &mut out[co * p * f3..(co + 1) * p * f3];
                let b0 = bd.as_ref().map_or(T::zero(), |b| b[co]);
                for (j, &v) in y.iter().enumerate() {
                    plane[scatter[j]] = v + b0;
                }
            }
            out
        });
        let mut data = Vec::with_capacity(n * op);
        for s in per_sample {
            data.extend_from_slice(&s);
        }
        let out = Tensor::new(&out_shape, data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            "transposed_conv3d",
            out,
            &inputs,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let gout = ctx.grad.data();
                let per_sample = par::map_range(n, |i| {
                    let xi = &x.data()[i * cin * p..(i + 1) * cin * p];
                    let go = &gout[i * op..(i + 1) * op];
                    let mut gx = vec![T::zero(); cin * p];
                    let mut gw = vec![T::zero(); cout * cin * f3];
                    let mut gb = vec![T::zero(); cout];
                    let mut gy = vec![T::zero(); f3 * p];
                    for co in 0..cout {
                        let plane = &go[co * p * f3..(co + 1) * p * f3];
                        for (j, slot) in gy.iter_mut().enumerate() {
                            *slot = plane[scatter[j]];
                        }
                        gb[co] = gy.iter().copied().sum();
                        // dK_co[abe, ci] = Σ_v gy[abe, v] x[ci, v]
                        T::gemm(
                            f3,
                            p,
                            cin,
                            &gy,
                            (p as isize, 1),
                            xi,
                            (1, p as isize),
                            T::zero(),
                            &mut gw[co * cin * f3..(co + 1) * cin * f3],
                            (1, f3 as isize),
                        );
                        // dx[ci, v] += Σ_abe K_co[abe, ci] gy[abe, v]
                        T::gemm(
                            cin,
                            f3,
                            p,
                            &w.data()[co * cin * f3..(co + 1) * cin * f3],
                            (f3 as isize, 1),
                            &gy,
                            (p as isize, 1),
                            T::one(),
                            &mut gx,
                            (p as isize, 1),
                        );
                    }
                    (gx, gw, gb)
                });
                let mut dx = Vec::with_capacity(n * cin * p);
                let mut dw = vec![T::zero(); cout * cin * f3];
                let mut db = vec![T::zero(); cout];
                for (gx, gw, gb) in per_sample {
                    dx.extend_from_slice(&gx);
                    for (a, b) in dw.iter_mut().zip(&gw) {
                        *a += *b;
                    }
                    for (a, b) in db.iter_mut().zip(&gb) {
                        *a += *b;
                    }
                }
                let mut grads = vec![Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?];
                if has_bias {
                    grads.push(Tensor::new(&[cout], db)?);
                }
                Ok(grads)
            }),
        ))
    }
}
