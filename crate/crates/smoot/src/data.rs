//! Dataset ingestion: IDX-format image/label files (MNIST layout, plain
//! or gzip-compressed), a synthetic planted-feature dataset with known
//! ground-truth saliency, and deterministic batch iteration.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]`, class labels, and stable per-sample ids (file
/// order). Ids never change under shuffling; per-sample mask state is
/// keyed on them.
#[derive(Clone)]
pub struct Dataset<T: Element> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl<T: Element> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width)
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Features per image.
    pub fn features(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    /// Number of distinct classes, as `max(label) + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// One image as a `[1, C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Result<Tensor<T>> {
        let p = self.features();
        let (c, h, w) = self.image_dims();
        Tensor::new(vec![1, c, h, w], self.images.data()[i * p..(i + 1) * p].to_vec())
    }

    /// Gathers a sub-batch `[n, C, H, W]` by dataset positions.
    pub fn gather(&self, positions: &[usize]) -> Result<(Vec<usize>, Tensor<T>, Vec<usize>)> {
        let p = self.features();
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(positions.len() * p);
        let mut ids = Vec::with_capacity(positions.len());
        let mut labels = Vec::with_capacity(positions.len());
        for &pos in positions {
            if pos >= self.len() {
                return Err(Error::Index(format!(
                    "gather: position {pos} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[pos * p..(pos + 1) * p]);
            ids.push(self.ids[pos]);
            labels.push(self.labels[pos]);
        }
        let images = Tensor::new(vec![positions.len(), c, h, w], data)?;
        Ok((ids, images, labels))
    }

    /// First `n` samples, in file order.
    pub fn take(&self, n: usize) -> Result<Dataset<T>> {
        let n = n.min(self.len());
        let positions: Vec<usize> = (0..n).collect();
        let (ids, images, labels) = self.gather(&positions)?;
        Ok(Dataset {
            images,
            labels,
            ids,
        })
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: gzip decode failed: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("truncated IDX file while reading {what}"),
        )))
}

/// Loads an IDX image/label file pair. Pixels are scaled by 1/255.
pub fn load_idx<T: Element, P: AsRef<Path>>(images_path: P, labels_path: P) -> Result<Dataset<T>> {
    let img_bytes = read_maybe_gz(images_path.as_ref())?;
    let lbl_bytes = read_maybe_gz(labels_path.as_ref())?;

    let magic = be_u32(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected image magic {IDX_IMAGE_MAGIC:#010x}, got {magic:#010x}",
            images_path.as_ref().display()
        )));
    }
    let n = be_u32(&img_bytes, 4, "image count")? as usize;
    let h = be_u32(&img_bytes, 8, "image rows")? as usize;
    let w = be_u32(&img_bytes, 12, "image cols")? as usize;
    let pixels = img_bytes
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated IDX image data",
        )))?;

    let magic = be_u32(&lbl_bytes, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected label magic {IDX_LABEL_MAGIC:#010x}, got {magic:#010x}",
            labels_path.as_ref().display()
        )));
    }
    let n_labels = be_u32(&lbl_bytes, 4, "label count")? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    let labels_raw = lbl_bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated IDX label data",
        )))?;

    let data = pixels.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels: labels_raw.iter().map(|&b| b as usize).collect(),
        ids: (0..n).collect(),
    })
}

/// Writes a dataset back out as an IDX pair (pixels quantized to u8).
pub fn write_idx<T: Element, P: AsRef<Path>>(
    dataset: &Dataset<T>,
    images_path: P,
    labels_path: P,
) -> Result<()> {
    let (c, h, w) = dataset.image_dims();
    if c != 1 {
        return Err(Error::Parameter("write_idx: only single-channel images".into()));
    }
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for v in dataset.images.data() {
        let q = (v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        img.push(q);
    }
    std::fs::File::create(images_path)?.write_all(&img)?;

    let mut lbl = Vec::with_capacity(8 + dataset.len());
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        lbl.push(l as u8);
    }
    std::fs::File::create(labels_path)?.write_all(&lbl)?;
    Ok(())
}

/// Synthetic dataset spec: each class plants a bright square patch at a
/// class-specific location on a noisy background. The patch pixels are
/// the ground-truth informative features.
#[derive(Clone, Debug)]
pub struct PlantedSpec {
    pub height: usize,
    pub width: usize,
    /// Side length of the square patch.
    pub patch: usize,
    /// Top-left patch corner per class; the list length is the number of
    /// classes.
    pub locations: Vec<(usize, usize)>,
    /// Background pixels are uniform in [0, noise]; patch pixels in
    /// [1-noise, 1].
    pub noise: f64,
    pub seed: u64,
}

impl PlantedSpec {
    /// 28x28 four-class layout with 8x8 corner patches.
    pub fn default_28x28() -> Self {
        PlantedSpec {
            height: 28,
            width: 28,
            patch: 8,
            locations: vec![(2, 2), (2, 18), (18, 2), (18, 18)],
            noise: 0.3,
            seed: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.locations.is_empty() {
            return Err(Error::Parameter("planted: no class locations".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Parameter(format!(
                "planted: noise {} outside [0, 1]",
                self.noise
            )));
        }
        for &(r, c) in &self.locations {
            if r + self.patch > self.height || c + self.patch > self.width {
                return Err(Error::Parameter(format!(
                    "planted: patch at ({r}, {c}) exceeds {}x{} image",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

/// Generates `n` planted images round-robin over classes, plus the
/// per-image boolean ground-truth mask of informative pixels.
pub fn generate_planted<T: Element>(
    spec: &PlantedSpec,
    n: usize,
) -> Result<(Dataset<T>, Vec<Vec<bool>>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.locations.len();
        let (pr, pc) = spec.locations[class];
        let mut mask = vec![false; h * w];
        for r in pr..pr + spec.patch {
            for c in pc..pc + spec.patch {
                mask[r * w + c] = true;
            }
        }
        for (j, &inside) in mask.iter().enumerate() {
            let u: f64 = rng.random();
            let v = if inside {
                1.0 - spec.noise * u
            } else {
                spec.noise * u
            };
            let _ = j;
            data.push(T::from_f64(v));
        }
        labels.push(class);
        masks.push(mask);
    }
    let dataset = Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        ids: (0..n).collect(),
    };
    Ok((dataset, masks))
}

/// Persists a planted ground-truth mask as an IDX image file with 0/255
/// values, alongside the dataset itself.
pub fn write_mask_idx<P: AsRef<Path>>(
    masks: &[Vec<bool>],
    h: usize,
    w: usize,
    path: P,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + masks.len() * h * w);
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(masks.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for m in masks {
        bytes.extend(m.iter().map(|&b| if b { 255u8 } else { 0 }));
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Seed-deterministic minibatch order. Ids travel with the images so
/// per-sample mask state stays aligned under shuffling.
pub fn batch_order(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher–Yates
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny_dataset() -> Dataset<f64> {
        Dataset {
            images: Tensor::new(vec![5, 1, 2, 2], (0..20).map(|v| v as f64 / 20.0).collect())
                .unwrap(),
            labels: vec![0, 1, 0, 1, 0],
            ids: (0..5).collect(),
        }
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        // use /255-representable values so quantization is exact
        let ds = Dataset::<f64> {
            images: Tensor::new(
                vec![2, 1, 2, 2],
                vec![0.0, 1.0, 128.0 / 255.0, 7.0 / 255.0, 1.0, 0.0, 3.0 / 255.0, 200.0 / 255.0],
            )
            .unwrap(),
            labels: vec![3, 9],
            ids: vec![0, 1],
        };
        write_idx(&ds, &img, &lbl).unwrap();
        let back: Dataset<f64> = load_idx(&img, &lbl).unwrap();
        assert_eq!(back.images.data(), ds.images.data());
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn single_pixel_fixture_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(255);
        std::fs::write(&img, bytes).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(5);
        std::fs::write(&lbl, bytes).unwrap();
        let ds: Dataset<f64> = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.images.data(), &[1.0]);
        assert_eq!(ds.labels, &[5]);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        // labels file carrying the IMAGE magic must be rejected
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(0);
        std::fs::write(&img, &bytes).unwrap();
        std::fs::write(&lbl, &bytes).unwrap();
        assert!(matches!(
            load_idx::<f64, _>(&img, &lbl),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&10u32.to_be_bytes());
        std::fs::write(&img, &bytes).unwrap();
        std::fs::write(&lbl, &bytes).unwrap();
        assert!(matches!(load_idx::<f64, _>(&img, &lbl), Err(Error::Io(_))));
    }

    #[test]
    fn count_mismatch_is_a_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(0);
        std::fs::write(&img, &bytes).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 1]);
        std::fs::write(&lbl, &bytes).unwrap();
        assert!(matches!(
            load_idx::<f64, _>(&img, &lbl),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn gzip_variant_loads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let ds = tiny_dataset();
        write_idx(&ds, &img, &lbl).unwrap();
        let gz_img = dir.path().join("img.idx.gz");
        let gz_lbl = dir.path().join("lbl.idx.gz");
        for (src, dst) in [(&img, &gz_img), (&lbl, &gz_lbl)] {
            let raw = std::fs::read(src).unwrap();
            let f = std::fs::File::create(dst).unwrap();
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            enc.write_all(&raw).unwrap();
            enc.finish().unwrap();
        }
        let plain: Dataset<f64> = load_idx(&img, &lbl).unwrap();
        let gz: Dataset<f64> = load_idx(&gz_img, &gz_lbl).unwrap();
        assert_eq!(plain.images.data(), gz.images.data());
        assert_eq!(plain.labels, gz.labels);
    }

    #[test]
    fn planted_noise_zero_is_binary() {
        let mut spec = PlantedSpec::default_28x28();
        spec.noise = 0.0;
        let (ds, masks) = generate_planted::<f64>(&spec, 8).unwrap();
        for i in 0..8 {
            let img = &ds.images.data()[i * 784..(i + 1) * 784];
            for (px, &inside) in img.iter().zip(&masks[i]) {
                assert_eq!(*px, if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn planted_is_seed_deterministic() {
        let spec = PlantedSpec::default_28x28();
        let (a, _) = generate_planted::<f64>(&spec, 16).unwrap();
        let (b, _) = generate_planted::<f64>(&spec, 16).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn planted_rejects_out_of_bounds_patch() {
        let spec = PlantedSpec {
            height: 10,
            width: 10,
            patch: 6,
            locations: vec![(5, 5)],
            noise: 0.1,
            seed: 0,
        };
        assert!(matches!(
            generate_planted::<f64>(&spec, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn batches_partition_the_dataset() {
        let batches = batch_order(10, 3, true, 42).unwrap();
        let mut seen = BTreeSet::new();
        for b in &batches {
            for &i in b {
                assert!(seen.insert(i), "duplicate sample {i}");
            }
        }
        assert_eq!(seen.len(), 10);
        assert_eq!(batches.len(), 4);
    }

    #[test]
    fn unshuffled_batches_preserve_file_order() {
        let batches = batch_order(5, 2, false, 0).unwrap();
        assert_eq!(batches, vec![vec![0, 1], vec![2, 3], vec![4]]);
        // batch_size = n -> single identity batch
        let batches = batch_order(4, 4, false, 0).unwrap();
        assert_eq!(batches, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        assert_eq!(
            batch_order(100, 7, true, 9).unwrap(),
            batch_order(100, 7, true, 9).unwrap()
        );
        assert_ne!(
            batch_order(100, 7, true, 9).unwrap(),
            batch_order(100, 7, true, 10).unwrap()
        );
    }
}
