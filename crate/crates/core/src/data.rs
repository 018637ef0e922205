//! Datasets: IDX loading, class filtering, correctly-classified filtering and
//! seeded synthetic blobs for small oracle tests.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::read_file;
use crate::network::SplitModel;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[B, 1, H, W]` in `[0, 1]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset(name.into()));
        }
        Ok(Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: name.into(),
        })
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
        }
    }
}

fn maybe_gunzip(path: &Path) -> Result<Vec<u8>> {
    let raw = read_file(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            reason: "truncated header".into(),
        })
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic {
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Parses IDX image bytes into `[count, 1, rows, cols]` scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    check_magic(be_u32(bytes, 0, path)?, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::LengthMismatch(format!(
            "{}: header declares {count}x{rows}x{cols} pixels, body has {}",
            path.display(),
            body.len()
        )));
    }
    let data = body.iter().map(|&p| p as f32 / 255.0).collect();
    Tensor::new(vec![count, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(be_u32(bytes, 0, path)?, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::LengthMismatch(format!(
            "{}: header declares {count} labels, body has {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair. Gzip-compressed files are accepted transparently.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&maybe_gunzip(ip)?, ip)?;
    let labels = parse_idx_labels(&maybe_gunzip(lp)?, lp)?;
    let name = ip
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, name)
}

/// Keeps samples whose label is in `keep`, remapping labels to their rank in
/// ascending `keep` order (MNIST-37: 3 → 0, 7 → 1).
pub fn filter_classes(dataset: &Dataset, keep: &[usize]) -> Result<Dataset> {
    let mut classes = keep.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let suffix: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
    let name = format!("{}[{}]", dataset.name, suffix.join(","));
    let indices: Vec<usize> = (0..dataset.len())
        .filter(|&i| classes.contains(&dataset.labels[i]))
        .collect();
    let mut out = dataset.subset(&indices, name)?;
    for l in &mut out.labels {
        *l = classes.binary_search(l).expect("kept label");
    }
    Ok(out)
}

/// Samples the model predicts correctly, in original order.
pub fn filter_correct(model: &SplitModel, dataset: &Dataset) -> Result<Dataset> {
    let classes = model.spec().num_classes;
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let preds = predict_all(model, &dataset.images)?;
    let indices: Vec<usize> = (0..dataset.len())
        .filter(|&i| preds[i] == dataset.labels[i])
        .collect();
    dataset.subset(&indices, format!("{}:correct", dataset.name))
}

/// Predictions for a large batch, evaluated in parallel chunks.
pub fn predict_all(model: &SplitModel, images: &Tensor<f32>) -> Result<Vec<usize>> {
    use rayon::prelude::*;
    const CHUNK: usize = 256;
    let n = images.batch();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Vec<usize>> = starts
        .par_iter()
        .map(|&s| model.predict(&images.slice_batch(s, (s + CHUNK).min(n))))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Fraction of samples whose prediction equals the label.
pub fn accuracy(model: &SplitModel, dataset: &Dataset) -> Result<f64> {
    let preds = predict_all(model, &dataset.images)?;
    let hits = preds.iter().zip(&dataset.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / dataset.len().max(1) as f64)
}

/// Gaussian blobs around `class_centers`, clipped to `[0, 1]`.
///
/// Each center is a flat image of `dims = [C, H, W]`; samples are ordered class by
/// class.
pub fn synth_generate(
    seed: u64,
    n_per_class: usize,
    dims: &[usize],
    class_centers: &[Vec<f32>],
    noise_std: f32,
) -> Result<Dataset> {
    let item: usize = dims.iter().product();
    if class_centers.is_empty() || n_per_class == 0 {
        return Err(Error::EmptyDataset("synthetic".into()));
    }
    for (i, c) in class_centers.iter().enumerate() {
        if c.len() != item {
            return Err(Error::InvalidShape(format!(
                "center {i} has {} values, dims {dims:?} need {item}",
                c.len()
            )));
        }
        if class_centers[..i].contains(c) {
            return Err(Error::Config(format!("center {i} duplicates an earlier center")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut data = Vec::with_capacity(item * n_per_class * class_centers.len());
    let mut labels = Vec::with_capacity(n_per_class * class_centers.len());
    for (class, center) in class_centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(center.iter().map(|&c| {
                let v = if noise_std > 0.0 { c + noise.sample(&mut rng) } else { c };
                v.clamp(0.0, 1.0)
            }));
            labels.push(class);
        }
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(dims);
    Dataset::new(Tensor::new(shape, data)?, labels, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkSpec};

    fn idx_images(count: u32, rows: u32, cols: u32, magic: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..count * rows * cols).map(|i| (i * 37 % 256) as u8));
        b
    }

    fn idx_labels(count: u32, magic: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, count] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..count).map(|i| (i % 10) as u8));
        b
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        std::fs::write(&ip, idx_images(100, 4, 5, IDX_IMAGES_MAGIC)).unwrap();
        std::fs::write(&lp, idx_labels(100, IDX_LABELS_MAGIC)).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.shape(), &[100, 1, 4, 5]);
        assert_eq!(d.labels[13], 3);
        let (lo, hi) = d
            .images
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn gz_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.gz"), dir.path().join("lbl"));
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&idx_images(3, 2, 2, IDX_IMAGES_MAGIC)).unwrap();
        std::fs::write(&ip, enc.finish().unwrap()).unwrap();
        std::fs::write(&lp, idx_labels(3, IDX_LABELS_MAGIC)).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap().len(), 3);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        std::fs::write(&ip, idx_images(100, 2, 2, IDX_IMAGES_MAGIC)).unwrap();
        // labels file carrying the image magic
        std::fs::write(&lp, idx_images(100, 2, 2, IDX_IMAGES_MAGIC)).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { .. })));
        std::fs::write(&lp, idx_labels(99, IDX_LABELS_MAGIC)).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch { images: 100, labels: 99 })
        ));
        let missing = dir.path().join("nope");
        match load_idx(&missing, &lp) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn class_filter_remaps() {
        let images = Tensor::zeros(&[6, 1, 2, 2]);
        let d = Dataset::new(images, vec![3, 7, 1, 3, 7, 3], "t").unwrap();
        let f = filter_classes(&d, &[7, 3]).unwrap();
        assert_eq!(f.labels, vec![0, 1, 0, 1, 0]);
        let threes = Dataset::new(Tensor::zeros(&[2, 1, 2, 2]), vec![3, 3], "t").unwrap();
        assert_eq!(filter_classes(&threes, &[3, 7]).unwrap().labels, vec![0, 0]);
        assert!(matches!(filter_classes(&d, &[99]), Err(Error::EmptyDataset(_))));
    }

    fn const_model(prefer: usize) -> SplitModel {
        let spec = NetworkSpec {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::conv(1, 1, 1, 1, 0), LayerSpec::Flatten, LayerSpec::dense(4, 2)],
            split_index: 0,
            num_classes: 2,
            split_after_activation: false,
        };
        let mut m = SplitModel::zeros(spec).unwrap();
        let mut bias = vec![0.0; 2];
        bias[prefer] = 1.0;
        m.params_mut()[2].as_mut().unwrap().bias = Tensor::new(vec![2], bias).unwrap();
        m
    }

    #[test]
    fn correct_filter() {
        let d = Dataset::new(Tensor::zeros(&[5, 1, 2, 2]), vec![0, 1, 1, 0, 1], "t").unwrap();
        let f = filter_correct(&const_model(0), &d).unwrap();
        assert_eq!(f.labels, vec![0, 0]);
        assert_eq!(filter_correct(&const_model(0), &f).unwrap(), {
            let mut g = f.clone();
            g.name = format!("{}:correct", f.name);
            g
        });
        let ones = Dataset::new(Tensor::zeros(&[2, 1, 2, 2]), vec![1, 1], "t").unwrap();
        assert_eq!(filter_correct(&const_model(1), &ones).unwrap().labels, vec![1, 1]);
    }

    #[test]
    fn synthetic_blobs() {
        let centers = vec![vec![0.2; 4], vec![0.8; 4]];
        let d = synth_generate(1, 5, &[1, 2, 2], &centers, 0.0).unwrap();
        assert_eq!(d.len(), 10);
        assert!(d.images.item(7).iter().all(|&v| v == 0.8));
        let a = synth_generate(4, 5, &[1, 2, 2], &centers, 0.3).unwrap();
        let b = synth_generate(4, 5, &[1, 2, 2], &centers, 0.3).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(synth_generate(1, 5, &[1, 2, 2], &[vec![0.1; 4], vec![0.1; 4]], 0.1).is_err());
    }
}
