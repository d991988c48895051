//! Synthetic labelled volumes: random ellipsoids over a dim background.
//!
//! Each foreground class is one axis-aligned ellipsoid with its own
//! intensity band; later classes paint over earlier ones. Everything is a
//! pure function of the seed.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

const MAX_PLACEMENT_ATTEMPTS: usize = 64;
const BACKGROUND_LEVEL: f32 = 0.15;
const BAND_JITTER: f32 = 0.05;

/// One image/label pair. The image is `[1, D, H, W]`, labels are `[D, H, W]`
/// in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl VolumeSample {
    pub fn spatial(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_volumes: usize,
    pub volume_size: usize,
    pub noise_sigma: f32,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_volumes: 10, volume_size: 32, noise_sigma: 0.1, train_fraction: 0.8, seed: 7 }
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate one cubic volume of side `size` with `num_classes - 1` blobs.
pub fn generate_volume(seed: u64, size: usize, num_classes: usize, noise_sigma: f32) -> Result<VolumeSample> {
    if size < 8 {
        return Err(Error::invalid(format!("volume size must be >= 8, got {size}")));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(Error::invalid(format!("num_classes must be in [2, 255], got {num_classes}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size * size;
    let fg = num_classes - 1;

    let mut labels = vec![0u8; n];
    let mut placed = false;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        labels.fill(0);
        for class in 1..=fg {
            paint_ellipsoid(&mut rng, &mut labels, size, class as u8);
        }
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if seen[1..].iter().all(|&s| s) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Generation(format!(
            "could not place {fg} visible blobs in a {size}³ volume after {MAX_PLACEMENT_ATTEMPTS} attempts"
        )));
    }

    let levels: Vec<f32> = (0..num_classes)
        .map(|c| {
            let base = BACKGROUND_LEVEL + (1.0 - 2.0 * BACKGROUND_LEVEL) * c as f32 / fg as f32;
            base + rng.gen_range(-BAND_JITTER..=BAND_JITTER)
        })
        .collect();
    let noise = Normal::new(0.0f32, noise_sigma.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let image: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let v = levels[l as usize];
            let v = if noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(VolumeSample { image: Tensor::new(&[1, size, size, size], image)?, labels })
}

fn paint_ellipsoid(rng: &mut ChaCha8Rng, labels: &mut [u8], size: usize, class: u8) {
    let lo = (size as f32 / 8.0).max(1.5);
    let hi = (size as f32 / 4.0).max(lo + 0.5);
    let radii: [f32; 3] = std::array::from_fn(|_| rng.gen_range(lo..hi));
    let centre: [f32; 3] = std::array::from_fn(|a| {
        let r = radii[a];
        rng.gen_range(r..(size as f32 - 1.0 - r).max(r + 0.5))
    });
    for z in 0..size {
        let dz = (z as f32 - centre[0]) / radii[0];
        for y in 0..size {
            let dy = (y as f32 - centre[1]) / radii[1];
            for x in 0..size {
                let dx = (x as f32 - centre[2]) / radii[2];
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    labels[(z * size + y) * size + x] = class;
                }
            }
        }
    }
}

/// Generate `count` volumes, in parallel when enabled, capped by
/// `TERNQ_THREADS`. Volume `i` uses a seed derived from `(seed, i)`.
pub fn generate_dataset(
    count: usize,
    seed: u64,
    size: usize,
    num_classes: usize,
    noise_sigma: f32,
) -> Result<Vec<VolumeSample>> {
    par::with_thread_cap(par::thread_cap_from_env(), || {
        par::map_range(count, |i| generate_volume(mix_seed(seed, i as u64), size, num_classes, noise_sigma))
    })
    .into_iter()
    .collect()
}

/// Sequential twin of [`generate_dataset`].
pub fn generate_dataset_seq(
    count: usize,
    seed: u64,
    size: usize,
    num_classes: usize,
    noise_sigma: f32,
) -> Result<Vec<VolumeSample>> {
    par::map_range_seq(count, |i| generate_volume(mix_seed(seed, i as u64), size, num_classes, noise_sigma))
        .into_iter()
        .collect()
}

/// Crop a cube of side `patch` at `origin` (z, y, x).
pub fn crop(volume: &VolumeSample, origin: [usize; 3], patch: usize) -> Result<VolumeSample> {
    let [d, h, w] = volume.spatial();
    if origin[0] + patch > d || origin[1] + patch > h || origin[2] + patch > w {
        return Err(Error::invalid(format!(
            "patch {patch} at {origin:?} exceeds volume {:?}",
            [d, h, w]
        )));
    }
    let mut image = Vec::with_capacity(patch * patch * patch);
    let mut labels = Vec::with_capacity(patch * patch * patch);
    let src = volume.image.data();
    for z in origin[0]..origin[0] + patch {
        for y in origin[1]..origin[1] + patch {
            let row = (z * h + y) * w + origin[2];
            image.extend_from_slice(&src[row..row + patch]);
            labels.extend_from_slice(&volume.labels[row..row + patch]);
        }
    }
    Ok(VolumeSample { image: Tensor::new(&[1, patch, patch, patch], image)?, labels })
}

/// `count` cubic crops with uniformly random origins.
pub fn sample_patches(volume: &VolumeSample, patch_size: usize, count: usize, seed: u64) -> Result<Vec<VolumeSample>> {
    let dims = volume.spatial();
    if patch_size == 0 || dims.iter().any(|&d| patch_size > d) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} larger than volume {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let origin = std::array::from_fn(|a| rng.gen_range(0..=dims[a] - patch_size));
            crop(volume, origin, patch_size)
        })
        .collect()
}

/// Deterministic shuffled partition into `(train, test)`, each keeping the
/// original relative order.
pub fn split<T>(dataset: Vec<T>, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let n = dataset.len();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut is_train = vec![false; n];
    for &i in &order[..n_train.min(n)] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in dataset.into_iter().enumerate() {
        if is_train[i] {
            train.push(item);
        } else {
            test.push(item);
        }
    }
    Ok((train, test))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    shape: [usize; 3],
    image: FileEntry<'a>,
    labels: FileEntry<'a>,
}

#[derive(Serialize)]
struct FileEntry<'a> {
    file: &'a str,
    dtype: &'a str,
}

/// Write `<stem>.image.bin` (f32 LE), `<stem>.labels.bin` (u8) and a
/// `<stem>.json` sidecar describing them into `dir`.
pub fn export_volume(sample: &VolumeSample, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let image_file = format!("{stem}.image.bin");
    let labels_file = format!("{stem}.labels.bin");
    let bytes: Vec<u8> = sample.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(&image_file), bytes)?;
    fs::write(dir.join(&labels_file), &sample.labels)?;
    let sidecar = Sidecar {
        shape: sample.spatial(),
        image: FileEntry { file: &image_file, dtype: "float32-le" },
        labels: FileEntry { file: &labels_file, dtype: "uint8" },
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_volume() {
        let a = generate_volume(11, 16, 3, 0.1).unwrap();
        let b = generate_volume(11, 16, 3, 0.1).unwrap();
        assert_eq!(a, b);
        let c = generate_volume(12, 16, 3, 0.1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_volume_is_piecewise_constant() {
        let v = generate_volume(5, 16, 4, 0.0).unwrap();
        let mut level = [None; 4];
        for (&l, &x) in v.labels.iter().zip(v.image.data()) {
            let slot = &mut level[l as usize];
            match slot {
                None => *slot = Some(x),
                Some(prev) => assert_eq!(*prev, x),
            }
        }
    }

    #[test]
    fn every_class_present_and_background_dominates() {
        for seed in 0..20 {
            let v = generate_volume(seed, 16, 3, 0.1).unwrap();
            let counts = v.class_counts(3);
            assert!(counts.iter().all(|&c| c > 0), "seed {seed}: {counts:?}");
            assert!(counts[0] > counts[1] && counts[0] > counts[2]);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_volume(0, 7, 3, 0.1).is_err());
        assert!(generate_volume(0, 16, 1, 0.1).is_err());
        assert!(generate_volume(0, 16, 3, -1.0).is_err());
    }

    #[test]
    fn patches_are_cubic_and_deterministic() {
        let v = generate_volume(3, 16, 3, 0.1).unwrap();
        let a = sample_patches(&v, 8, 5, 9).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|p| p.image.shape() == [1, 8, 8, 8] && p.labels.len() == 512));
        assert_eq!(a, sample_patches(&v, 8, 5, 9).unwrap());
        let full = sample_patches(&v, 16, 1, 0).unwrap();
        assert_eq!(full, vec![v.clone()]);
        assert!(sample_patches(&v, 17, 1, 0).is_err());
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let items: Vec<usize> = (0..10).collect();
        let (train, test) = split(items.clone(), 0.8, 4).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(items.clone(), 0.8, 4).unwrap(), (train, test));
        assert!(split(items.clone(), 1.0, 4).is_err());
        assert!(split(items, 0.0, 4).is_err());
    }

    #[test]
    fn dataset_parallel_matches_sequential() {
        let a = generate_dataset(4, 1, 8, 3, 0.05).unwrap();
        let b = generate_dataset_seq(4, 1, 8, 3, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn export_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let v = generate_volume(1, 8, 2, 0.0).unwrap();
        export_volume(&v, dir.path(), "vol0").unwrap();
        let img = fs::read(dir.path().join("vol0.image.bin")).unwrap();
        assert_eq!(img.len(), 4 * 512);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("vol0.json")).unwrap()).unwrap();
        assert_eq!(json["shape"], serde_json::json!([8, 8, 8]));
    }
}
