//! Class balancing, one-hot targets and Dice scoring.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Median frequency balancing: `median(freq) / freq_c` over the classes
/// present in `labels`; absent classes get weight 0.
pub fn median_frequency_weights(labels: &[u8], num_classes: usize) -> Result<Vec<f32>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        let slot = counts
            .get_mut(l as usize)
            .ok_or_else(|| Error::invalid(format!("label {l} out of range for {num_classes} classes")))?;
        *slot += 1;
    }
    Ok(weights_from_counts(&counts))
}

pub fn weights_from_counts(counts: &[usize]) -> Vec<f32> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(|a, b| a.partial_cmp(b).expect("finite frequencies"));
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        0.5 * (present[m / 2 - 1] + present[m / 2])
    };
    freqs
        .iter()
        .map(|&f| if f > 0.0 { (median / f) as f32 } else { 0.0 })
        .collect()
}

/// One-hot encode `labels` (`N·S` entries, sample-major) into `[N, C, spatial...]`.
pub fn one_hot<T: Scalar>(labels: &[u8], batch: usize, num_classes: usize, spatial: &[usize]) -> Result<Tensor<T>> {
    let s: usize = spatial.iter().product();
    if labels.len() != batch * s {
        return Err(Error::shape(format!(
            "{} labels for batch {batch} of {spatial:?}",
            labels.len()
        )));
    }
    let mut shape = vec![batch, num_classes];
    shape.extend_from_slice(spatial);
    let mut data = vec![T::zero(); batch * num_classes * s];
    for i in 0..batch {
        for v in 0..s {
            let l = labels[i * s + v] as usize;
            if l >= num_classes {
                return Err(Error::invalid(format!("label {l} out of range")));
            }
            data[(i * num_classes + l) * s + v] = T::one();
        }
    }
    Tensor::new(&shape, data)
}

/// Channel-wise argmax of `[N, C, spatial...]` scores, sample-major.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, s) = scores.ncs()?;
    let d = scores.data();
    let mut out = Vec::with_capacity(n * s);
    for i in 0..n {
        for v in 0..s {
            let mut best = 0;
            for k in 1..c {
                if d[(i * c + k) * s + v] > d[(i * c + best) * s + v] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Per-class Dice `2|P∩G| / (|P| + |G|)` on hard labels. A class absent from
/// both prediction and ground truth scores 1.0.
pub fn dice_per_class(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut p_count = vec![0usize; num_classes];
    let mut g_count = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(truth) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::invalid(format!(
                "label out of range for {num_classes} classes"
            )));
        }
        p_count[p] += 1;
        g_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|c| {
            let denom = p_count[c] + g_count[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// Mean of the foreground (class ≥ 1) entries.
pub fn mean_foreground(per_class: &[f64]) -> f64 {
    if per_class.len() < 2 {
        return per_class.first().copied().unwrap_or(0.0);
    }
    per_class[1..].iter().sum::<f64>() / (per_class.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_frequency_examples() {
        let w = weights_from_counts(&[100, 50, 10]);
        assert_eq!(w, vec![0.5, 1.0, 5.0]);
        assert_eq!(weights_from_counts(&[7, 7, 7, 7]), vec![1.0; 4]);
        // class 2 absent: freqs over 160 voxels are [0.625, 0.375], median 0.5
        let w = weights_from_counts(&[100, 60, 0]);
        assert_eq!(w[2], 0.0);
        assert!((w[0] - 0.8).abs() < 1e-6 && (w[1] - 0.5 / 0.375).abs() < 1e-6);
    }

    #[test]
    fn median_frequency_from_labels() {
        let mut labels = vec![0u8; 100];
        labels.extend(vec![1u8; 50]);
        labels.extend(vec![2u8; 10]);
        assert_eq!(median_frequency_weights(&labels, 3).unwrap(), vec![0.5, 1.0, 5.0]);
        assert!(median_frequency_weights(&[3], 3).is_err());
    }

    #[test]
    fn dice_examples() {
        let g = [0u8, 1, 2, 1, 0];
        assert_eq!(dice_per_class(&g, &g, 3).unwrap(), vec![1.0; 3]);
        let p = [1u8, 1, 1, 1, 0, 0, 0, 0];
        let t = [0u8, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(dice_per_class(&p, &t, 2).unwrap(), vec![0.0, 0.0]);
        // |P| = 4, |G| = 4, overlap 2
        let p = [1u8, 1, 1, 1, 0, 0];
        let t = [1u8, 1, 0, 0, 1, 1];
        assert_eq!(dice_per_class(&p, &t, 2).unwrap()[1], 0.5);
    }

    #[test]
    fn one_hot_and_argmax_round_trip() {
        let labels = [2u8, 0, 1, 1, 0, 2];
        let oh: Tensor<f32> = one_hot(&labels, 2, 3, &[3]).unwrap();
        assert_eq!(oh.shape(), &[2, 3, 3]);
        assert_eq!(argmax_channels(&oh).unwrap(), labels.to_vec());
    }
}
