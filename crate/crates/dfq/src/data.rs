//! Datasets: the procedural shapes benchmark and the CIFAR-10 binary
//! format.
//!
//! Shapes images are 32×32×3 in [−1, 1]: one bright shape per image on a
//! noisy dark background, class-balanced, with the drawn shape's pixel
//! centroid recorded per sample. The centroid ground truth is what makes
//! attention-position claims quantifiable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub const IMAGE_HW: usize = 32;
const PLANE: usize = IMAGE_HW * IMAGE_HW;
const SAMPLE: usize = 3 * PLANE;

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "cross", "triangle", "ring", "diamond", "hbar", "vbar", "xcross", "frame",
];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    /// N×3×32×32 row-major, values in the normalized range.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    /// Drawn-shape pixel centroids (row, col); shapes data only.
    pub centroids: Option<Vec<(f32, f32)>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * SAMPLE..(i + 1) * SAMPLE]
    }

    /// Assemble a batch tensor plus its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * SAMPLE);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        (
            Tensor::from_vec(data, &[indices.len(), 3, IMAGE_HW, IMAGE_HW]),
            labels,
        )
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig { train: 5000, test: 1000, classes: 10, seed: 7 }
    }
}

/// Membership test for shape `class` at offset (dy, dx) from the center,
/// with half-extent `s`.
fn shape_hit(class: usize, dy: f32, dx: f32, s: f32) -> bool {
    let t = s / 3.0;
    match class {
        0 => dy * dy + dx * dx <= s * s,
        1 => dy.abs() <= s && dx.abs() <= s,
        2 => (dy.abs() <= t && dx.abs() <= s) || (dx.abs() <= t && dy.abs() <= s),
        3 => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
        4 => {
            let r2 = dy * dy + dx * dx;
            r2 <= s * s && r2 >= (s / 2.0) * (s / 2.0)
        }
        5 => dy.abs() + dx.abs() <= s,
        6 => dy.abs() <= t && dx.abs() <= s,
        7 => dx.abs() <= t && dy.abs() <= s,
        8 => (dy.abs() - dx.abs()).abs() <= t && dy.abs().max(dx.abs()) <= s,
        9 => {
            let m = dy.abs().max(dx.abs());
            m <= s && m >= s / 2.0
        }
        _ => unreachable!(),
    }
}

fn render_split(count: usize, classes: usize, rng: &mut SeedStream, name: &str) -> Result<Dataset> {
    if count % classes != 0 {
        return Err(Error::Dataset(format!(
            "{name}: {count} samples do not split evenly over {classes} classes"
        )));
    }
    let mut images = vec![0.0f32; count * SAMPLE];
    let mut labels = vec![0u8; count];
    let mut centroids = vec![(0.0f32, 0.0f32); count];
    let per_class = count / classes;
    for i in 0..count {
        let class = i / per_class;
        labels[i] = class as u8;
        let img = &mut images[i * SAMPLE..(i + 1) * SAMPLE];

        // background noise around black, σ = 0.05 in [0, 1] space
        for v in img.iter_mut() {
            *v = (rng.normal() * 0.05).clamp(0.0, 0.35);
        }

        let s = 4.0 + rng.uniform() * 3.0; // half-extent 4..7 px
        let margin = s.ceil() as usize + 1;
        let cy = margin + rng.uniform_int(IMAGE_HW - 2 * margin);
        let cx = margin + rng.uniform_int(IMAGE_HW - 2 * margin);
        let color: [f32; 3] = [
            0.55 + rng.uniform() * 0.4,
            0.55 + rng.uniform() * 0.4,
            0.55 + rng.uniform() * 0.4,
        ];

        let mut sum_y = 0.0f64;
        let mut sum_x = 0.0f64;
        let mut hits = 0usize;
        for y in 0..IMAGE_HW {
            for x in 0..IMAGE_HW {
                let dy = y as f32 - cy as f32;
                let dx = x as f32 - cx as f32;
                if shape_hit(class, dy, dx, s) {
                    for (c, &col) in color.iter().enumerate() {
                        img[c * PLANE + y * IMAGE_HW + x] = col;
                    }
                    sum_y += y as f64;
                    sum_x += x as f64;
                    hits += 1;
                }
            }
        }
        debug_assert!(hits > 0, "shape {class} rendered no pixels");
        centroids[i] = ((sum_y / hits as f64) as f32, (sum_x / hits as f64) as f32);
    }
    // map [0, 1] → [−1, 1]
    for v in images.iter_mut() {
        *v = 2.0 * *v - 1.0;
    }
    // deterministic shuffle so batches mix classes
    let order = rng.permutation(count);
    let mut shuffled = Dataset {
        name: name.to_string(),
        num_classes: classes,
        images: vec![0.0; count * SAMPLE],
        labels: vec![0; count],
        centroids: Some(vec![(0.0, 0.0); count]),
    };
    for (dst, &src) in order.iter().enumerate() {
        shuffled.images[dst * SAMPLE..(dst + 1) * SAMPLE]
            .copy_from_slice(&images[src * SAMPLE..(src + 1) * SAMPLE]);
        shuffled.labels[dst] = labels[src];
        shuffled.centroids.as_mut().unwrap()[dst] = centroids[src];
    }
    Ok(shuffled)
}

/// Deterministic procedural shapes dataset: train and test splits.
pub fn generate_shapes(config: &ShapesConfig) -> Result<(Dataset, Dataset)> {
    if config.classes < 2 || config.classes > 10 {
        return Err(Error::Dataset(format!(
            "shapes supports 2..=10 classes, got {}",
            config.classes
        )));
    }
    let mut rng = SeedStream::new(config.seed);
    let train = render_split(config.train, config.classes, &mut rng, "shapes-train")?;
    let test = render_split(config.test, config.classes, &mut rng, "shapes-test")?;
    Ok((train, test))
}

const CIFAR_RECORD: usize = 3073;

/// Read the standard CIFAR-10 binary batches from a directory:
/// `data_batch_{1..5}.bin` for training, `test_batch.bin` for testing.
/// Pixels map through (p/255 − mean_c)/std_c.
pub fn read_cifar10(dir: &Path, mean: [f32; 3], std: [f32; 3]) -> Result<(Dataset, Dataset)> {
    let mut train = Dataset {
        name: "cifar10-train".into(),
        num_classes: 10,
        images: Vec::new(),
        labels: Vec::new(),
        centroids: None,
    };
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        read_cifar_file(&path, mean, std, &mut train)?;
    }
    let mut test = Dataset {
        name: "cifar10-test".into(),
        num_classes: 10,
        images: Vec::new(),
        labels: Vec::new(),
        centroids: None,
    };
    read_cifar_file(&dir.join("test_batch.bin"), mean, std, &mut test)?;
    Ok((train, test))
}

fn read_cifar_file(path: &Path, mean: [f32; 3], std: [f32; 3], out: &mut Dataset) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", path.display()))
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records (offset {})",
            path.display(),
            bytes.len(),
            bytes.len() % CIFAR_RECORD
        )));
    }
    for (r, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Dataset(format!(
                "{}: record {r} has label {label} outside 0..=9",
                path.display()
            )));
        }
        out.labels.push(label);
        for c in 0..3 {
            for p in 0..PLANE {
                let raw = rec[1 + c * PLANE + p] as f32 / 255.0;
                out.images.push((raw - mean[c]) / std[c]);
            }
        }
    }
    Ok(())
}

/// Dataset source accepted by the command line: either
/// `shapes:train=5000,test=1000,classes=10,seed=7` (all keys optional)
/// or a directory containing the CIFAR-10 binary batches.
pub fn load_data_spec(spec: &str) -> Result<(Dataset, Dataset)> {
    if let Some(args) = spec.strip_prefix("shapes:").or(if spec == "shapes" { Some("") } else { None }) {
        let mut cfg = ShapesConfig::default();
        for kv in args.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("bad shapes option `{kv}`")))?;
            let parse = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::Dataset(format!("bad shapes value `{v}`")))
            };
            match k {
                "train" => cfg.train = parse(v)?,
                "test" => cfg.test = parse(v)?,
                "classes" => cfg.classes = parse(v)?,
                "seed" => cfg.seed = parse(v)? as u64,
                other => return Err(Error::Dataset(format!("unknown shapes option `{other}`"))),
            }
        }
        generate_shapes(&cfg)
    } else {
        read_cifar10(Path::new(spec), [0.5; 3], [0.5; 3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_pixels() {
        let cfg = ShapesConfig { train: 40, test: 20, classes: 10, seed: 11 };
        let (a_train, a_test) = generate_shapes(&cfg).unwrap();
        let (b_train, b_test) = generate_shapes(&cfg).unwrap();
        assert_eq!(a_train.images, b_train.images);
        assert_eq!(a_test.images, b_test.images);
        assert_eq!(a_train.labels, b_train.labels);
    }

    #[test]
    fn class_histogram_exactly_balanced() {
        let cfg = ShapesConfig { train: 100, test: 50, classes: 10, seed: 3 };
        let (train, test) = generate_shapes(&cfg).unwrap();
        for ds in [&train, &test] {
            let mut hist = [0usize; 10];
            for &l in &ds.labels {
                hist[l as usize] += 1;
            }
            assert!(hist.iter().all(|&h| h == ds.len() / 10), "{hist:?}");
        }
    }

    #[test]
    fn unbalanced_or_too_many_classes_rejected() {
        let cfg = ShapesConfig { train: 101, test: 50, classes: 10, seed: 3 };
        assert!(generate_shapes(&cfg).is_err());
        let cfg = ShapesConfig { train: 110, test: 55, classes: 11, seed: 3 };
        assert!(generate_shapes(&cfg).is_err());
    }

    /// Brightest connected region centroid within 2 px of the record.
    #[test]
    fn centroid_recompute_oracle() {
        let cfg = ShapesConfig { train: 100, test: 10, classes: 10, seed: 5 };
        let (train, _) = generate_shapes(&cfg).unwrap();
        let centroids = train.centroids.as_ref().unwrap();
        for i in 0..train.len() {
            let img = train.image(i);
            // per-pixel brightness, back in [0, 1]
            let bright: Vec<f32> = (0..PLANE)
                .map(|p| {
                    let v = (img[p] + img[PLANE + p] + img[2 * PLANE + p]) / 3.0;
                    (v + 1.0) / 2.0
                })
                .collect();
            let peak = bright.iter().cloned().fold(f32::MIN, f32::max);
            let peak_idx = bright.iter().position(|&v| v == peak).unwrap();
            let threshold = peak * 0.5;
            // flood fill from the peak over above-threshold pixels
            let mut seen = vec![false; PLANE];
            let mut stack = vec![peak_idx];
            seen[peak_idx] = true;
            let (mut sy, mut sx, mut cnt) = (0.0f64, 0.0f64, 0usize);
            while let Some(p) = stack.pop() {
                let (y, x) = (p / IMAGE_HW, p % IMAGE_HW);
                sy += y as f64;
                sx += x as f64;
                cnt += 1;
                let mut push = |yy: isize, xx: isize| {
                    if yy >= 0 && xx >= 0 && (yy as usize) < IMAGE_HW && (xx as usize) < IMAGE_HW {
                        let q = yy as usize * IMAGE_HW + xx as usize;
                        if !seen[q] && bright[q] >= threshold {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                };
                push(y as isize - 1, x as isize);
                push(y as isize + 1, x as isize);
                push(y as isize, x as isize - 1);
                push(y as isize, x as isize + 1);
                // diagonals keep the xcross shape connected
                push(y as isize - 1, x as isize - 1);
                push(y as isize - 1, x as isize + 1);
                push(y as isize + 1, x as isize - 1);
                push(y as isize + 1, x as isize + 1);
            }
            let (ry, rx) = ((sy / cnt as f64) as f32, (sx / cnt as f64) as f32);
            let (gy, gx) = centroids[i];
            let d = ((ry - gy).powi(2) + (rx - gx).powi(2)).sqrt();
            assert!(d <= 2.0, "sample {i} class {}: recomputed ({ry:.1},{rx:.1}) vs recorded ({gy:.1},{gx:.1})", train.labels[i]);
        }
    }

    #[test]
    fn images_in_normalized_range() {
        let cfg = ShapesConfig { train: 20, test: 10, classes: 10, seed: 9 };
        let (train, _) = generate_shapes(&cfg).unwrap();
        assert!(train.images.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    fn write_fake_cifar(dir: &Path, records: usize) {
        let mut rng = SeedStream::new(1);
        for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
            let mut bytes = Vec::with_capacity(records * CIFAR_RECORD);
            for _ in 0..records {
                bytes.push(rng.uniform_int(10) as u8);
                for _ in 0..3072 {
                    bytes.push(rng.uniform_int(256) as u8);
                }
            }
            std::fs::write(dir.join(name), bytes).unwrap();
        }
    }

    #[test]
    fn cifar_reader_contract() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 8);
        let (train, test) = read_cifar10(dir.path(), [0.5; 3], [0.5; 3]).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 8);
        assert!(train.labels.iter().all(|&l| l <= 9));
        // affine contract: pixel 255 → (1.0 − 0.5)/0.5 = 1.0
        assert!(train.images.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn cifar_rejects_truncated_records() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar(dir.path(), 4);
        let path = dir.path().join("data_batch_3.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 100);
        std::fs::write(&path, bytes).unwrap();
        let err = read_cifar10(dir.path(), [0.5; 3], [0.5; 3]).unwrap_err().to_string();
        assert!(err.contains("3073"), "{err}");
    }

    #[test]
    fn cifar_pixel_mapping_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        // one record, all pixels 255, label 3
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(255u8).take(3072));
        for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
            std::fs::write(dir.path().join(name), &bytes).unwrap();
        }
        let (train, _) = read_cifar10(dir.path(), [0.4, 0.5, 0.6], [0.2, 0.25, 0.5]).unwrap();
        let img = train.image(0);
        assert_eq!(img[0], (1.0 - 0.4) / 0.2);
        assert_eq!(img[PLANE], (1.0 - 0.5) / 0.25);
        assert_eq!(img[2 * PLANE], (1.0 - 0.6) / 0.5);
    }

    #[test]
    fn data_spec_parsing() {
        let (train, test) = load_data_spec("shapes:train=40,test=20,classes=4,seed=1").unwrap();
        assert_eq!((train.len(), test.len()), (40, 20));
        assert_eq!(train.num_classes, 4);
        assert!(load_data_spec("shapes:bogus=1").is_err());
        assert!(load_data_spec("/nonexistent/dir").is_err());
    }
}
