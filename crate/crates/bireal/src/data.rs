//! Dataset sources: IDX image/label files (the classic u8 format) and a
//! deterministic synthetic generator for desk-scale runs.
//!
//! Images load as [N, C, H, W] with pixel values scaled to [0, 1]. The
//! synthetic generator draws one uniform template image per class and
//! perturbs it with Gaussian noise, clamped back to [0, 1], so samples
//! survive a round trip through 8-bit IDX files essentially unchanged.

use crate::error::{Error, Result};
use crate::model::NetworkSpec;
use crate::tensor::RealTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: RealTensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather a minibatch by index list.
    pub fn gather(&self, idx: &[usize]) -> (RealTensor, Vec<usize>) {
        let shape = self.images.shape();
        let sample = shape[1] * shape[2] * shape[3];
        let mut data = Vec::with_capacity(idx.len() * sample);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        let x = RealTensor::new(vec![idx.len(), shape[1], shape[2], shape[3]], data).unwrap();
        (x, labels)
    }
}

#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("reading {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file as [N, 1, H, W] with values in [0, 1].
pub fn load_idx_images(path: &Path) -> Result<RealTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r, "image count")? as usize;
    let h = read_u32_be(&mut r, "image height")? as usize;
    let w = read_u32_be(&mut r, "image width")? as usize;
    let mut raw = vec![0u8; n * h * w];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("{}: truncated pixel data: {e}", path.display())))?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes after pixel data", path.display())));
    }
    let data = raw.iter().map(|&b| b as f64 / 255.0).collect();
    RealTensor::new(vec![n, 1, h, w], data)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r, "label count")? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("{}: truncated label data: {e}", path.display())))?;
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Write [N, 1, H, W] images (values in [0, 1]) as an 8-bit IDX file.
pub fn write_idx_images(path: &Path, images: &RealTensor) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    if c != 1 {
        return Err(Error::ShapeMismatch {
            context: "write_idx_images",
            axis: "channels",
            expected: 1,
            got: c,
        });
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::ShapeMismatch {
            context: "write_idx_labels",
            axis: "label value",
            expected: 255,
            got: bad,
        });
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

fn load_idx_dataset(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "load_idx_dataset",
            axis: "sample count",
            expected: images.shape()[0],
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Format(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(Dataset { images, labels, num_classes })
}

/// Class-balanced Gaussian blobs: one uniform [0,1] template per class,
/// samples are template + spread * noise, clamped to [0, 1]. Fully
/// determined by (shape, counts, spread, seed); samples are laid out
/// class-major.
pub fn synthetic_blobs(
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> DataBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = channels * height * width;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..pixels).map(|_| rng.random::<f64>()).collect())
        .collect();
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| -> Dataset {
        let n = per_class * classes;
        let mut data = Vec::with_capacity(n * pixels);
        let mut labels = Vec::with_capacity(n);
        for class in 0..classes {
            for _ in 0..per_class {
                for pi in 0..pixels {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push((templates[class][pi] + spread * z).clamp(0.0, 1.0));
                }
                labels.push(class);
            }
        }
        Dataset {
            images: RealTensor::new(vec![n, channels, height, width], data).unwrap(),
            labels,
            num_classes: classes,
        }
    };
    let train = draw(train_per_class, &mut rng);
    let test = draw(test_per_class, &mut rng);
    DataBundle { train, test }
}

/// Where training/evaluation data comes from, as named on the command line:
/// `synthetic[:train=N,test=N,spread=X]` or
/// `idx:<train_images>,<train_labels>,<test_images>,<test_labels>`.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic { train_per_class: usize, test_per_class: usize, spread: f64 },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSource {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DatasetSource::Synthetic {
                train_per_class: 100,
                test_per_class: 30,
                spread: 0.25,
            });
        }
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let mut train_per_class = 100;
            let mut test_per_class = 30;
            let mut spread = 0.25;
            for kv in rest.split(',') {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::InvalidConfig(format!("synthetic option `{kv}` is not key=value"))
                })?;
                match k {
                    "train" => {
                        train_per_class = v.parse().map_err(|_| {
                            Error::InvalidConfig(format!("bad synthetic train count `{v}`"))
                        })?
                    }
                    "test" => {
                        test_per_class = v.parse().map_err(|_| {
                            Error::InvalidConfig(format!("bad synthetic test count `{v}`"))
                        })?
                    }
                    "spread" => {
                        spread = v.parse().map_err(|_| {
                            Error::InvalidConfig(format!("bad synthetic spread `{v}`"))
                        })?
                    }
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "unknown synthetic option `{other}` (train, test, spread)"
                        )))
                    }
                }
            }
            return Ok(DatasetSource::Synthetic { train_per_class, test_per_class, spread });
        }
        if let Some(rest) = s.strip_prefix("idx:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::InvalidConfig(format!(
                    "idx source needs 4 comma-separated paths, got {}",
                    parts.len()
                )));
            }
            return Ok(DatasetSource::Idx {
                train_images: parts[0].into(),
                train_labels: parts[1].into(),
                test_images: parts[2].into(),
                test_labels: parts[3].into(),
            });
        }
        Err(Error::InvalidConfig(format!(
            "unknown data source `{s}` (expected synthetic[:...] or idx:...)"
        )))
    }

    /// Materialize the data for a given network. Synthetic data takes its
    /// class count and image shape from the spec; IDX data is validated
    /// against the spec.
    pub fn load(&self, spec: &NetworkSpec, seed: u64) -> Result<DataBundle> {
        match self {
            DatasetSource::Synthetic { train_per_class, test_per_class, spread } => {
                Ok(synthetic_blobs(
                    spec.num_classes,
                    spec.input_channels,
                    spec.input_height,
                    spec.input_width,
                    *train_per_class,
                    *test_per_class,
                    *spread,
                    seed,
                ))
            }
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels } => {
                if spec.input_channels != 1 {
                    return Err(Error::InvalidConfig(
                        "idx sources carry single-channel images".into(),
                    ));
                }
                let train = load_idx_dataset(train_images, train_labels, spec.num_classes)?;
                let test = load_idx_dataset(test_images, test_labels, spec.num_classes)?;
                for ds in [&train, &test] {
                    let s = ds.images.shape();
                    if s[2] != spec.input_height || s[3] != spec.input_width {
                        return Err(Error::ShapeMismatch {
                            context: "DatasetSource::load",
                            axis: "image height",
                            expected: spec.input_height,
                            got: s[2],
                        });
                    }
                }
                Ok(DataBundle { train, test })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = synthetic_blobs(4, 1, 8, 8, 10, 5, 0.2, 42);
        let b = synthetic_blobs(4, 1, 8, 8, 10, 5, 0.2, 42);
        assert_eq!(a.train.images.data(), b.train.images.data());
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.test.images.data(), b.test.images.data());
        let c = synthetic_blobs(4, 1, 8, 8, 10, 5, 0.2, 43);
        assert_ne!(a.train.images.data(), c.train.images.data());

        assert_eq!(a.train.len(), 40);
        assert_eq!(a.test.len(), 20);
        for class in 0..4 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == class).count(), 10);
        }
        for &v in a.train.images.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn blobs_are_nearest_template_separable() {
        // With modest spread, nearest-template classification on held-out
        // samples should be nearly perfect; this pins the generator as a
        // sane sandbox for the training gates.
        let bundle = synthetic_blobs(4, 1, 10, 10, 20, 20, 0.25, 7);
        let pixels = 100;
        let mut centers = vec![vec![0.0; pixels]; 4];
        let mut counts = [0usize; 4];
        for (i, &l) in bundle.train.labels.iter().enumerate() {
            for p in 0..pixels {
                centers[l][p] += bundle.train.images.data()[i * pixels + p];
            }
            counts[l] += 1;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            for v in center.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut hits = 0;
        for (i, &l) in bundle.test.labels.iter().enumerate() {
            let img = &bundle.test.images.data()[i * pixels..(i + 1) * pixels];
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = img.iter().zip(&centers[a]).map(|(x, c)| (x - c) * (x - c)).sum();
                    let db: f64 = img.iter().zip(&centers[b]).map(|(x, c)| (x - c) * (x - c)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == l {
                hits += 1;
            }
        }
        let acc = hits as f64 / bundle.test.len() as f64;
        assert!(acc > 0.95, "nearest-template accuracy {acc}");
    }

    #[test]
    fn idx_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = synthetic_blobs(3, 1, 6, 6, 4, 2, 0.2, 9);
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        write_idx_images(&img_path, &bundle.train.images).unwrap();
        write_idx_labels(&lbl_path, &bundle.train.labels).unwrap();
        let images = load_idx_images(&img_path).unwrap();
        let labels = load_idx_labels(&lbl_path).unwrap();
        assert_eq!(images.shape(), bundle.train.images.shape());
        assert_eq!(labels, bundle.train.labels);
        for (a, b) in images.data().iter().zip(bundle.train.images.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn hand_built_idx_fixture_parses() {
        // Ten 28x28 images assembled byte by byte, independent of the
        // writer: 16-byte header then 7840 pixel bytes.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&[0x00, 0x00, 0x08, 0x03]);
        bytes.extend_from_slice(&[0x00, 0x00, 0x00, 0x0a]);
        bytes.extend_from_slice(&[0x00, 0x00, 0x00, 0x1c]);
        bytes.extend_from_slice(&[0x00, 0x00, 0x00, 0x1c]);
        for i in 0..10 * 28 * 28 {
            bytes.push((i % 256) as u8);
        }
        std::fs::write(&path, &bytes).unwrap();
        let images = load_idx_images(&path).unwrap();
        assert_eq!(images.shape(), &[10, 1, 28, 28]);
        assert_eq!(images.data()[0], 0.0);
        assert_eq!(images.data()[255], 1.0);
        assert_eq!(images.data()[256], 0.0);
    }

    #[test]
    fn idx_rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        std::fs::write(&path, 0x0000_0801u32.to_be_bytes()).unwrap();
        let err = load_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&4u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 10]); // needs 32
        std::fs::write(&path, &bytes).unwrap();
        let err = load_idx_images(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn source_parsing() {
        assert_eq!(
            DatasetSource::parse("synthetic").unwrap(),
            DatasetSource::Synthetic { train_per_class: 100, test_per_class: 30, spread: 0.25 }
        );
        assert_eq!(
            DatasetSource::parse("synthetic:train=5,test=2,spread=0.5").unwrap(),
            DatasetSource::Synthetic { train_per_class: 5, test_per_class: 2, spread: 0.5 }
        );
        assert!(DatasetSource::parse("synthetic:bogus=1").is_err());
        assert!(DatasetSource::parse("idx:a,b").is_err());
        assert!(DatasetSource::parse("csv:whatever").is_err());
        match DatasetSource::parse("idx:a,b,c,d").unwrap() {
            DatasetSource::Idx { train_images, .. } => {
                assert_eq!(train_images, PathBuf::from("a"))
            }
            _ => panic!(),
        }
    }

    #[test]
    fn load_rejects_mismatched_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::preset("micro").unwrap(); // 4 classes, 14x14
        let bundle = synthetic_blobs(6, 1, 14, 14, 2, 1, 0.2, 3);
        let ti = dir.path().join("ti.idx");
        let tl = dir.path().join("tl.idx");
        write_idx_images(&ti, &bundle.train.images).unwrap();
        write_idx_labels(&tl, &bundle.train.labels).unwrap();
        let src = DatasetSource::Idx {
            train_images: ti.clone(),
            train_labels: tl.clone(),
            test_images: ti.clone(),
            test_labels: tl.clone(),
        };
        // Labels reach 5 but the spec only has 4 classes.
        let err = src.load(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
    }
}
