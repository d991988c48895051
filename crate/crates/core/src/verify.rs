//! Finite-difference verification of every differentiable building block,
//! run in double precision on random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::{quantize_on_tape, QuantScheme, QuantState};
use crate::segnet::loss::one_hot;
use crate::tensor::gradcheck::{check, GradComparison};
use crate::tensor::{Tape, Tensor, Var};

/// Finite-difference step for the γ⁺/γ⁻ checks.
pub const GAMMA_STEP: f64 = 1e-6;
/// Finite-difference step for every other operation.
pub const OP_STEP: f64 = 1e-4;
/// Relative error allowed for the γ⁺/γ⁻ gradients.
pub const GAMMA_TOLERANCE: f64 = 1e-4;
/// Relative error allowed for every other operation.
pub const OP_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<20} {:>3} instances  worst rel. err {:.3e}  (< {:.0e})  {}",
            self.name,
            self.instances,
            self.worst_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ x·c` for a fixed `c`, used to turn tensor outputs into a scalar with
/// non-trivial upstream gradients.
pub fn probe(tape: &mut Tape<f64>, x: Var, c: &Tensor<f64>) -> Result<Var> {
    if tape.value(x).shape() != c.shape() {
        return Err(Error::shape(format!(
            "probe weights {:?} for value {:?}",
            c.shape(),
            tape.value(x).shape()
        )));
    }
    let fwd = c.clone();
    let bwd = c.clone();
    tape.custom(
        &[x],
        move |v| Ok(Tensor::scalar(v[0].data().iter().zip(fwd.data()).map(|(a, b)| a * b).sum())),
        Box::new(move |ctx| Ok(vec![bwd.map(|w| w * ctx.grad.data()[0])])),
    )
}

fn worst(results: &[GradComparison]) -> f64 {
    results.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}

fn run(
    name: &'static str,
    instances: usize,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<CheckReport> {
    let mut w = 0.0f64;
    for _ in 0..instances {
        w = w.max(one(rng)?);
    }
    Ok(CheckReport { name, instances, worst_rel_err: w, tolerance })
}

fn conv_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(1..=2);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=k / 2);
    let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(3..=5)).collect();
    let x = uniform(rng, &[n, cin, dims[0], dims[1], dims[2]], -1.0, 1.0);
    let w = uniform(rng, &[cout, cin, k, k, k], -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    let out_shape = crate::tensor::conv3d_forward(&x, &w, Some(&b), stride, padding)?.shape().to_vec();
    let c = uniform(rng, &out_shape, -1.0, 1.0);
    let r = check(&[x, w, b], OP_STEP, |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), stride, padding)?;
        probe(t, y, &c)
    })?;
    Ok(worst(&r))
}

fn transposed_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let x = uniform(rng, &[n, cin, 2, 3, 2], -1.0, 1.0);
    let w = uniform(rng, &[cout, cin, 2, 2, 2], -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    let c = uniform(rng, &[n, cout, 4, 6, 4], -1.0, 1.0);
    let r = check(&[x, w, b], OP_STEP, |t, v| {
        let y = t.transposed_conv3d(v[0], v[1], Some(v[2]), 2)?;
        probe(t, y, &c)
    })?;
    Ok(worst(&r))
}

fn softmax_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=2), rng.gen_range(2..=4), 2, 3, 2];
    let x = uniform(rng, &shape, -3.0, 3.0);
    let c = uniform(rng, &shape, -1.0, 1.0);
    let r = check(&[x], OP_STEP, |t, v| {
        let y = t.softmax_channels(v[0])?;
        probe(t, y, &c)
    })?;
    Ok(worst(&r))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..classes) as u8).collect()
}

fn dice_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(2..=4));
    let spatial = [2, 3, 2];
    let logits = uniform(rng, &[n, c, 2, 3, 2], -2.0, 2.0);
    let labels = random_labels(rng, n * 12, c);
    let target = one_hot::<f64>(&labels, n, c, &spatial)?;
    let r = check(&[logits], OP_STEP, |t, v| {
        let p = t.softmax_channels(v[0])?;
        t.dice_loss(p, &target, 1e-6)
    })?;
    Ok(worst(&r))
}

fn wce_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(2..=4));
    let logits = uniform(rng, &[n, c, 2, 3, 2], -2.0, 2.0);
    let labels = random_labels(rng, n * 12, c);
    let weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..5.0)).collect();
    let r = check(&[logits], OP_STEP, |t, v| t.weighted_cross_entropy(v[0], &labels, &weights))?;
    Ok(worst(&r))
}

fn batchnorm_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=3), 2, 2, 3];
    let x = uniform(rng, &shape, -2.0, 2.0);
    let w = uniform(rng, &[shape[1]], 0.5, 1.5);
    let b = uniform(rng, &[shape[1]], -0.5, 0.5);
    let c = uniform(rng, &shape, -1.0, 1.0);
    let r = check(&[x, w, b], OP_STEP, |t, v| {
        let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
        probe(t, y, &c)
    })?;
    Ok(worst(&r))
}

fn upsample_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), 2, 1, 2];
    let x = uniform(rng, &shape, -1.0, 1.0);
    let c = uniform(rng, &[shape[0], shape[1], 4, 2, 4], -1.0, 1.0);
    let r = check(&[x], OP_STEP, |t, v| {
        let y = t.upsample_nearest(v[0], 2)?;
        probe(t, y, &c)
    })?;
    Ok(worst(&r))
}

fn max_pool_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=2), 4, 2, 4];
    // distinct values spaced well beyond the FD step keep the argmax fixed
    let count: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(&shape, order.iter().map(|&i| i as f64 * 0.01).collect())?;
    let c = uniform(rng, &[shape[0], shape[1], 2, 1, 2], -1.0, 1.0);
    let r = check(&[x], OP_STEP, |t, v| {
        let y = t.max_pool(v[0], 2)?;
        probe(t, y, &c)
    })?;
    Ok(worst(&r))
}

/// γ⁺/γ⁻ through `quantize → conv3d → probe`, the kernel held fixed. The
/// bin pattern depends only on the latent weights, so it is checked to be
/// identical at `γ ± step`.
fn gamma_instance(rng: &mut ChaCha8Rng, scheme: QuantScheme) -> Result<f64> {
    let (cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let x = uniform(rng, &[1, cin, 3, 3, 3], -1.0, 1.0);
    let w = uniform(rng, &[cout, cin, 3, 3, 3], -1.0, 1.0);
    let gammas = [Tensor::scalar(rng.gen_range(0.5..1.5)), Tensor::scalar(rng.gen_range(0.5..1.5))];
    let c = uniform(rng, &[1, cout, 3, 3, 3], -1.0, 1.0);
    let mut state = QuantState::<f64>::new(scheme, cout);
    state.refresh(&w)?;

    let pattern_at = |gp: f64, gn: f64| -> Result<Vec<i8>> {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let (a, b) = (tape.constant(Tensor::scalar(gp)), tape.constant(Tensor::scalar(gn)));
        let q = quantize_on_tape(&mut tape, wv, a, b, &state)?;
        Ok(tape.value(q).data().iter().map(|&v| v.partial_cmp(&0.0).map_or(0, |o| o as i8)).collect())
    };
    let (gp, gn) = (gammas[0].data()[0], gammas[1].data()[0]);
    let base = pattern_at(gp, gn)?;
    for (dp, dn) in [(GAMMA_STEP, 0.0), (-GAMMA_STEP, 0.0), (0.0, GAMMA_STEP), (0.0, -GAMMA_STEP)] {
        if pattern_at(gp + dp, gn + dn)? != base {
            return Err(Error::Gradient("γ perturbation moved a weight across a bin boundary".into()));
        }
    }

    let r = check(&gammas, GAMMA_STEP, |t, v| {
        let wv = t.constant(w.clone());
        let q = quantize_on_tape(t, wv, v[0], v[1], &state)?;
        let xv = t.constant(x.clone());
        let y = t.conv3d(xv, q, None, 1, 1)?;
        probe(t, y, &c)
    })?;
    Ok(worst(&r))
}

/// Run every check on `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    Ok(vec![
        run("gamma (3DQ)", instances, GAMMA_TOLERANCE, r, |r| gamma_instance(r, QuantScheme::Tdq3))?,
        run("gamma (TTQ)", instances, GAMMA_TOLERANCE, r, |r| gamma_instance(r, QuantScheme::Ttq))?,
        run("gamma (BTQ)", instances, GAMMA_TOLERANCE, r, |r| gamma_instance(r, QuantScheme::Btq))?,
        run("conv3d", instances, OP_TOLERANCE, r, conv_instance)?,
        run("transposed conv3d", instances, OP_TOLERANCE, r, transposed_instance)?,
        run("softmax", instances, OP_TOLERANCE, r, softmax_instance)?,
        run("dice loss", instances, OP_TOLERANCE, r, dice_instance)?,
        run("weighted CE", instances, OP_TOLERANCE, r, wce_instance)?,
        run("batchnorm", instances, OP_TOLERANCE, r, batchnorm_instance)?,
        run("upsample", instances, OP_TOLERANCE, r, upsample_instance)?,
        run("max pool", instances, OP_TOLERANCE, r, max_pool_instance)?,
    ])
}
