use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use pocon_nn::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images `[N, C, H, W]` with pixel values in `[0, 1]` and class ids in
/// `[0, num_classes)`. Channel normalization is applied per batch, after
/// augmentation, through [`Normalization`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let ds = Self { images, labels, num_classes, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.ndim() != 4 {
            return Err(CoreError::Dataset(format!("images must be [N,C,H,W], got {:?}", self.images.shape())));
        }
        if self.images.dim(0) != self.labels.len() {
            return Err(CoreError::Dataset(format!(
                "{} images but {} labels",
                self.images.dim(0),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(CoreError::Dataset(format!("label {bad} >= {} classes", self.num_classes)));
        }
        if !self.images.is_finite() {
            return Err(CoreError::Dataset("non-finite pixel values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Samples whose class is in `classes`, in dataset order.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    /// Sample indices grouped by class id.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| CoreError::Dataset("concat of nothing".into()))?;
        let imgs: Vec<&Tensor<T>> = parts.iter().map(|p| &p.images).collect();
        Self::new(
            Tensor::concat_rows(&imgs)?,
            parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
            first.num_classes,
            first.split,
        )
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.image_shape();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let data = self.images.data();
        for n in 0..self.len() {
            for ch in 0..c {
                for &v in &data[(n * c + ch) * h * w..(n * c + ch + 1) * h * w] {
                    let v = v.as_f64();
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * h * w).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(1e-12).sqrt())
            .collect();
        Normalization { mean, std }
    }

    /// Splits off `fraction` of every class (at least one sample when the
    /// class has two or more) as a validation set.
    pub fn carve_validation(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        let mut val = Vec::new();
        for (_, mut idx) in self.indices_by_class() {
            idx.shuffle(&mut rng);
            let k = ((idx.len() as f64 * fraction).round() as usize).max(usize::from(idx.len() > 1));
            val.extend_from_slice(&idx[..k]);
            keep.extend_from_slice(&idx[k..]);
        }
        keep.sort_unstable();
        val.sort_unstable();
        let mut v = self.subset(&val);
        v.split = Split::Val;
        (self.subset(&keep), v)
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn apply<T: Scalar>(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = batch.dims4()?;
        if c != self.mean.len() {
            return Err(CoreError::Dataset(format!(
                "normalization has {} channels, batch has {c}",
                self.mean.len()
            )));
        }
        let mut out = batch.clone();
        let data = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let m = T::lit(self.mean[ch]);
                let inv = T::lit(1.0 / self.std[ch]);
                for v in &mut data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w] {
                    *v = (*v - m) * inv;
                }
            }
        }
        Ok(out)
    }
}

/// Train/validation/test splits sharing one normalization.
#[derive(Clone, Debug)]
pub struct DataBundle<T> {
    pub train: LabeledDataset<T>,
    pub val: LabeledDataset<T>,
    pub test: LabeledDataset<T>,
    pub normalization: Normalization,
}

impl<T: Scalar> DataBundle<T> {
    /// Carves 10% of every training class into a validation split when none is
    /// supplied; normalization statistics come from the resulting train split.
    pub fn new(train: LabeledDataset<T>, val: Option<LabeledDataset<T>>, test: LabeledDataset<T>, seed: u64) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(CoreError::Dataset("train and test splits must be nonempty".into()));
        }
        let (train, val) = match val {
            Some(v) => (train, v),
            None => train.carve_validation(0.1, seed),
        };
        let normalization = train.channel_stats();
        Ok(Self { train, val, test, normalization })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}

// Packed array files: a sequence of arrays, each
//   u8 dtype (0 = u8, 1 = f32, 2 = u32) | u32 ndim | u64 dims[ndim] | little-endian data
// A packed dataset is an image array ([N,C,H,W], u8 scaled by 1/255 or f32 in
// [0,1]) followed by a u32 label array [N].

const PACKED_MAGIC: &[u8; 8] = b"PCNARRS1";

/// Writes images as f32 and labels as u32.
pub fn write_packed<T: Scalar>(ds: &LabeledDataset<T>, mut w: impl Write) -> Result<()> {
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&[1u8])?;
    w.write_all(&4u32.to_le_bytes())?;
    for &d in ds.images.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(ds.images.numel() * 4);
    for &v in ds.images.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.write_all(&[2u8])?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    for &l in &ds.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_packed<T: Scalar>(mut r: impl Read, split: Split) -> Result<LabeledDataset<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |m: &str| CoreError::Dataset(format!("packed file: {m}"));
    if bytes.len() < 8 || &bytes[..8] != PACKED_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut arrays: Vec<(u8, Vec<usize>, Vec<f64>)> = Vec::new();
    for _ in 0..2 {
        let dtype = take(1)?[0];
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match dtype {
            0 => take(numel)?.iter().map(|&b| b as f64 / 255.0).collect(),
            1 => take(numel * 4)?
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            2 => take(numel * 4)?
                .chunks(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            d => return Err(bad(&format!("unknown dtype tag {d}"))),
        };
        arrays.push((dtype, shape, values));
    }
    let (_, img_shape, img) = &arrays[0];
    let (label_dtype, _, labels) = &arrays[1];
    if *label_dtype != 2 {
        return Err(bad("labels must be u32"));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(Tensor::from_f64(img_shape, img)?, labels, num_classes, split)
}

/// Loads `root/<class>/<image files>`; class ids follow sorted directory names.
/// All images must share one size; they are converted to RGB.
pub fn load_image_dir<T: Scalar>(root: &Path, split: Split) -> Result<(LabeledDataset<T>, Vec<String>)> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for (class, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut files: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| CoreError::Dataset(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let dims = img.dimensions();
            if *size.get_or_insert(dims) != dims {
                return Err(CoreError::Dataset(format!("{} has size {dims:?}, expected {size:?}", file.display())));
            }
            let (w, h) = (dims.0 as usize, dims.1 as usize);
            let mut chw = vec![0.0; 3 * h * w];
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    chw[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
                }
            }
            values.extend(chw);
            labels.push(class);
        }
    }
    let (w, h) = size.ok_or_else(|| CoreError::Dataset(format!("no images under {}", root.display())))?;
    let images = Tensor::from_f64(&[labels.len(), 3, h as usize, w as usize], &values)?;
    Ok((LabeledDataset::new(images, labels, names.len(), split)?, names))
}
