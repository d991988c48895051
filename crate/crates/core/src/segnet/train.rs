use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{argmax_channels, dice_per_class, mean_foreground, median_frequency_weights, one_hot};
use super::net::{Mode, UNet3d};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::voldata::{sample_patches, VolumeSample};

pub const DICE_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub iterations: usize,
    pub patch_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the Dice term; cross entropy gets `1 - loss_mix`.
    pub loss_mix: f32,
    /// Batches used to re-estimate normalization statistics with the final
    /// weights once training ends (0 keeps the running averages).
    pub recalibration_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, iterations: 200, patch_size: 16, batch_size: 4, seed: 0, loss_mix: 0.5, recalibration_batches: 8 }
    }
}

impl TrainConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return bad(format!("loss_mix must be in [0, 1], got {}", self.loss_mix));
        }
        let min = 1usize << levels;
        if !self.patch_size.is_power_of_two() || self.patch_size < min {
            return bad(format!(
                "patch_size must be a power of two >= {min} for {levels} levels, got {}",
                self.patch_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total_loss: f32,
    pub dice_loss: f32,
    pub ce_loss: f32,
    /// Hard Dice on the batch, averaged over foreground classes.
    pub mean_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,total_loss,dice_loss,ce_loss,mean_dice\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.total_loss, r.dice_loss, r.ce_loss, r.mean_dice
            ));
        }
        out
    }

    pub fn losses(&self) -> Vec<f32> {
        self.steps.iter().map(|r| r.total_loss).collect()
    }
}

fn draw_batch(
    data: &[VolumeSample],
    rng: &mut ChaCha8Rng,
    batch: usize,
    patch: usize,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut image = Vec::with_capacity(batch * patch * patch * patch);
    let mut labels = Vec::with_capacity(batch * patch * patch * patch);
    for _ in 0..batch {
        let v = &data[rng.gen_range(0..data.len())];
        let p = sample_patches(v, patch, 1, rng.gen())?.pop().expect("one patch requested");
        image.extend_from_slice(p.image.data());
        labels.extend_from_slice(&p.labels);
    }
    Ok((Tensor::new(&[batch, 1, patch, patch, patch], image)?, labels))
}

/// Quantization-aware training of `net` on random patches from `data`.
///
/// Each step: quantized forward with batch statistics, composite loss,
/// backward with straight-through kernels, Adam on latent weights and γ,
/// then running statistics and quantizer state are refreshed.
pub fn train(net: &mut UNet3d, data: &[VolumeSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate(net.config.levels)?;
    if net.config.in_channels != 1 {
        return Err(Error::Config("training data has a single input channel".into()));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let classes = net.config.num_classes;
    let all_labels: Vec<u8> = data.iter().flat_map(|v| v.labels.iter().copied()).collect();
    let weights = median_frequency_weights(&all_labels, classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mix = cfg.loss_mix;
    let p = cfg.patch_size;
    let mut log = TrainLog::default();
    for step in 0..cfg.iterations {
        let (image, labels) = draw_batch(data, &mut rng, cfg.batch_size, p)?;
        let target = one_hot::<f32>(&labels, cfg.batch_size, classes, &[p, p, p])?;

        let mut tape = Tape::new();
        let x = tape.constant(image);
        let pass = net.forward(&mut tape, x, Mode::Train)?;
        let probs = tape.softmax_channels(pass.logits)?;
        let dice = tape.dice_loss(probs, &target, DICE_EPS)?;
        let ce = tape.weighted_cross_entropy(pass.logits, &labels, &weights)?;
        let dice_part = tape.scale(dice, mix);
        let ce_part = tape.scale(ce, 1.0 - mix);
        let loss = tape.add(dice_part, ce_part)?;

        let total = tape.value(loss).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: total });
        }
        if let Some((op, _)) = tape.non_finite_origin() {
            return Err(Error::NonFinite(format!("{op} produced a non-finite value at step {step}")));
        }
        let pred = argmax_channels(tape.value(pass.logits))?;
        let record = StepRecord {
            step,
            total_loss: total,
            dice_loss: tape.value(dice).data()[0],
            ce_loss: tape.value(ce).data()[0],
            mean_dice: mean_foreground(&dice_per_class(&pred, &labels, classes)?),
        };

        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = pass
            .params
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect();
        if let Some(bad) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter buffer {bad} at step {step}")));
        }
        let grad_slices: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
        adam.step(&mut net.params_mut(), &grad_slices)?;
        net.update_running_stats(&pass.batch_stats)?;
        net.refresh_quant()?;
        log.steps.push(record);
    }
    if cfg.iterations > 0 {
        recalibrate(net, data, &mut rng, cfg)?;
    }
    Ok(log)
}

/// Replaces the running statistics with the average batch statistics of the
/// final weights. The exponential averages lag behind fast-moving weights,
/// which shows up as a gap between train-mode and eval-mode predictions.
fn recalibrate(net: &mut UNet3d, data: &[VolumeSample], rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<()> {
    let k = cfg.recalibration_batches;
    if k == 0 {
        return Ok(());
    }
    let mut sums: Vec<(Vec<f32>, Vec<f32>)> =
        net.norms.iter().map(|n| (vec![0.0; n.running_mean.len()], vec![0.0; n.running_var.len()])).collect();
    for _ in 0..k {
        let (image, _) = draw_batch(data, rng, cfg.batch_size, cfg.patch_size)?;
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let pass = net.forward(&mut tape, x, Mode::Train)?;
        for ((mean, var), s) in sums.iter_mut().zip(&pass.batch_stats) {
            let Some(s) = s else { continue };
            mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b / k as f32);
            var.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b / k as f32);
        }
    }
    for (norm, (mean, var)) in net.norms.iter_mut().zip(sums) {
        norm.running_mean = mean;
        norm.running_var = var;
    }
    Ok(())
}

/// Dice over whole volumes, averaged across volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<f64>,
    pub mean_foreground: f64,
    pub per_volume: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let classes = self.per_class.len();
        let mut out = String::from("volume");
        for c in 0..classes {
            out.push_str(&format!(",dice_{c}"));
        }
        out.push_str(",mean_foreground\n");
        let mut row = |name: String, d: &[f64]| {
            out.push_str(&name);
            for v in d {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", mean_foreground(d)));
        };
        for (i, d) in self.per_volume.iter().enumerate() {
            row(i.to_string(), d);
        }
        row("mean".into(), &self.per_class);
        out
    }
}

/// Inference-mode segmentation of each volume and hard Dice against its labels.
pub fn evaluate(net: &UNet3d, data: &[VolumeSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let classes = net.config.num_classes;
    if let Some(bad) = data.iter().flat_map(|v| v.labels.iter()).find(|&&l| l as usize >= classes) {
        return Err(Error::Config(format!(
            "data contains label {bad} but the model has {classes} classes"
        )));
    }
    let mut per_volume = Vec::with_capacity(data.len());
    for v in data {
        let [d, h, w] = v.spatial();
        let input = v.image.clone().reshape(&[1, 1, d, h, w])?;
        let logits = net.predict_logits(&input)?;
        let pred = argmax_channels(&logits)?;
        per_volume.push(dice_per_class(&pred, &v.labels, classes)?);
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| per_volume.iter().map(|d| d[c]).sum::<f64>() / per_volume.len() as f64)
        .collect();
    Ok(EvalReport { mean_foreground: mean_foreground(&per_class), per_class, per_volume })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantScheme;
    use crate::segnet::net::{build_unet3d, NetConfig};
    use crate::voldata::generate_volume;

    fn small_net(scheme: QuantScheme) -> UNet3d {
        build_unet3d(&NetConfig { levels: 2, base_channels: 4, num_classes: 3, scheme, ..NetConfig::default() }, 3).unwrap()
    }

    fn data() -> Vec<VolumeSample> {
        (0..2).map(|i| generate_volume(i, 16, 3, 0.1).unwrap()).collect()
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let mut net = small_net(QuantScheme::Tdq3);
        let before = net.clone();
        let cfg = TrainConfig { iterations: 0, patch_size: 8, ..TrainConfig::default() };
        let log = train(&mut net, &data(), &cfg).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let cfg = TrainConfig { iterations: 3, patch_size: 8, batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut net = small_net(QuantScheme::Tdq3);
            let log = train(&mut net, &data(), &cfg).unwrap();
            (net, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la.to_csv(), lb.to_csv());
        assert!(la.steps.iter().all(|r| r.total_loss.is_finite() && r.total_loss >= 0.0));
    }

    #[test]
    fn gammas_move_during_training() {
        let mut net = small_net(QuantScheme::Tdq3);
        let cfg = TrainConfig { iterations: 2, patch_size: 8, batch_size: 2, learning_rate: 1e-2, ..TrainConfig::default() };
        train(&mut net, &data(), &cfg).unwrap();
        assert!(net.convs.iter().filter_map(|c| c.quant.as_ref()).any(|q| q.gamma_pos != 1.0 && q.gamma_neg != 1.0));
    }

    #[test]
    fn rejects_bad_patch_size() {
        let mut net = small_net(QuantScheme::Full);
        let cfg = TrainConfig { patch_size: 12, ..TrainConfig::default() };
        assert!(matches!(train(&mut net, &data(), &cfg), Err(Error::Config(_))));
        let cfg = TrainConfig { patch_size: 2, ..TrainConfig::default() };
        assert!(train(&mut net, &data(), &cfg).is_err());
    }

    #[test]
    fn evaluate_rejects_class_mismatch() {
        let net = build_unet3d(&NetConfig { levels: 2, base_channels: 4, num_classes: 2, ..NetConfig::default() }, 0).unwrap();
        assert!(matches!(evaluate(&net, &data()), Err(Error::Config(_))));
    }
}
