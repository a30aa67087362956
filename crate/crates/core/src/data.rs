//! MNIST and CIFAR-10 loaders, augmentation and input encoding.

use std::fmt;
use std::fs;
use std::io::{self, Cursor, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::network::NUM_CLASSES;
use crate::tensor::{RngStream, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

pub const MNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar",
        })
    }
}

impl FromStr for DatasetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar" | "cifar10" | "cifar-10" => Ok(DatasetName::Cifar10),
            other => Err(Error::Argument(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
}

/// Images stored back to back, `[len × C × H × W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: DatasetName,
    pub split: Split,
    pub shape: [usize; 3],
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        LabeledImage {
            pixels: Tensor::from_parts(self.shape.to_vec(), self.image(i).to_vec()),
            label: self.label(i),
        }
    }

    /// New dataset holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            name: self.name,
            split: self.split,
            shape: self.shape,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }
}

/// A parsed IDX file: element type byte, dimensions and raw unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic = r.read_u32::<BigEndian>()?;
        if magic >> 8 != 0x08 {
            return Err(Error::Format(format!(
                "magic {magic:#010x} is not an unsigned-byte IDX file"
            )));
        }
        let rank = (magic & 0xff) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<BigEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0u8; len];
        r.read_exact(&mut data)?;
        if r.position() as usize != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after IDX payload",
                bytes.len() - r.position() as usize
            )));
        }
        Ok(Self { magic, dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.write_u32::<BigEndian>(self.magic).expect("write to Vec");
        for &d in &self.dims {
            out.write_u32::<BigEndian>(d as u32).expect("write to Vec");
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn read_idx(path: &Path, magic: u32) -> Result<IdxArray> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 4 {
        let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        if found != magic {
            return Err(Error::Format(format!(
                "{}: magic {found:#010x}, expected {magic:#010x}",
                path.display()
            )));
        }
    }
    IdxArray::parse(&bytes).map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Pixels scaled to `[0, 1]` by `/255`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let labels = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    if images.dims.len() != 3 || images.dims[1] != 28 || images.dims[2] != 28 {
        return Err(Error::Format(format!(
            "MNIST images must be [N, 28, 28], got {:?}",
            images.dims
        )));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.dims[0], labels.dims[0]
        )));
    }
    if let Some(bad) = labels.data.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Format(format!("label {bad} out of range")));
    }
    let split = if images.dims[0] == 10_000 {
        Split::Test
    } else {
        Split::Train
    };
    Ok(Dataset {
        name: DatasetName::Mnist,
        split,
        shape: [1, 28, 28],
        pixels: images.data.iter().map(|&b| f64::from(b) / 255.0).collect(),
        labels: labels.data,
    })
}

/// Loads a split from a directory holding the four standard IDX files.
pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = match split {
        Split::Train => MNIST_FILES[0],
        Split::Test => MNIST_FILES[1],
    };
    let mut ds = load_mnist_idx(&root.join(images), &root.join(labels))?;
    ds.split = split;
    Ok(ds)
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn of(ds: &Dataset) -> Self {
        let plane = ds.shape[1] * ds.shape[2];
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let values = (0..ds.len()).flat_map(|i| ds.image(i)[c * plane..(c + 1) * plane].iter());
            let n = (ds.len() * plane) as f64;
            mean[c] = values.clone().sum::<f64>() / n;
            std[c] = (values.map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
        }
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let plane = ds.shape[1] * ds.shape[2];
        for img in ds.pixels.chunks_mut(3 * plane) {
            for c in 0..3 {
                for v in &mut img[c * plane..(c + 1) * plane] {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Decodes CIFAR-10 binary batches to `[0, 1]` pixels (not yet standardized).
pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Format(format!("{}: label byte {}", path.display(), rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    Ok(Dataset {
        name: DatasetName::Cifar10,
        split,
        shape: [3, CIFAR_SIDE, CIFAR_SIDE],
        pixels,
        labels,
    })
}

/// Both splits from the standard `data_batch_{1..5}.bin` / `test_batch.bin`
/// directory, standardized with training-split channel statistics.
pub fn load_cifar10(root: &Path) -> Result<(Dataset, Dataset, ChannelStats)> {
    let train_paths: Vec<PathBuf> = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
    let mut train = load_cifar10_bin(&train_paths, Split::Train)?;
    let mut test = load_cifar10_bin(&[root.join("test_batch.bin")], Split::Test)?;
    let stats = ChannelStats::of(&train);
    stats.apply(&mut train);
    stats.apply(&mut test);
    Ok((train, test, stats))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Maximum absolute rotation in degrees; 0 disables.
    pub max_rotation_deg: f64,
    /// Zero padding before the random crop; 0 disables.
    pub crop_pad: usize,
    /// Shear (±10°), scale (0.8–1.2) and brightness/contrast/saturation
    /// (factor 0.2) jitter.
    pub extra: bool,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            max_rotation_deg: 0.0,
            crop_pad: 0,
            extra: false,
        }
    }

    pub fn cifar() -> Self {
        Self {
            flip: true,
            max_rotation_deg: 15.0,
            crop_pad: 4,
            extra: false,
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotation_deg: f64,
    /// Crop offset into the padded image, `(dy, dx)` in `0..=2·pad`.
    pub crop: (usize, usize),
    pub shear_deg: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl AugmentDraw {
    pub fn identity(pad: usize) -> Self {
        Self {
            flip: false,
            rotation_deg: 0.0,
            crop: (pad, pad),
            shear_deg: 0.0,
            scale: 1.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        }
    }

    pub fn sample(config: &AugmentConfig, stream: &mut RngStream) -> Self {
        let mut u = [0.0; 9];
        stream.fill_uniform(&mut u);
        let span = |x: f64, lo: f64, hi: f64| lo + (hi - lo) * x;
        let crop_range = (2 * config.crop_pad + 1) as f64;
        let mut d = Self::identity(config.crop_pad);
        d.flip = config.flip && u[0] < 0.5;
        d.rotation_deg = span(u[1], -config.max_rotation_deg, config.max_rotation_deg);
        d.crop = ((u[2] * crop_range) as usize, (u[3] * crop_range) as usize);
        if config.extra {
            d.shear_deg = span(u[4], -10.0, 10.0);
            d.scale = span(u[5], 0.8, 1.2);
            d.brightness = span(u[6], 0.8, 1.2);
            d.contrast = span(u[7], 0.8, 1.2);
            d.saturation = span(u[8], 0.8, 1.2);
        }
        d
    }
}

/// Bilinear sample of one plane with zero outside.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Warps every plane about the image centre; `inv` maps output offsets to
/// input offsets.
fn warp(img: &mut [f64], planes: usize, h: usize, w: usize, inv: [[f64; 2]; 2]) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for p in 0..planes {
        let src = img[p * h * w..(p + 1) * h * w].to_vec();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = inv[0][0] * dy + inv[0][1] * dx + cy;
                let sx = inv[1][0] * dy + inv[1][1] * dx + cx;
                img[p * h * w + y * w + x] = bilinear(&src, h, w, sy, sx);
            }
        }
    }
}

/// Applies a drawn augmentation: flip, rotation, optional shear/scale, padded
/// crop, then optional colour jitter. Shape and label are unchanged.
pub fn augment_with(image: &LabeledImage, draw: &AugmentDraw, pad: usize) -> LabeledImage {
    let &[c, h, w] = image.pixels.shape() else {
        panic!("augment expects a [C, H, W] image");
    };
    let mut img = image.pixels.data().to_vec();
    if draw.flip {
        for row in img.chunks_mut(w) {
            row.reverse();
        }
    }
    if draw.rotation_deg != 0.0 {
        let (s, co) = draw.rotation_deg.to_radians().sin_cos();
        warp(&mut img, c, h, w, [[co, s], [-s, co]]);
    }
    if draw.shear_deg != 0.0 || draw.scale != 1.0 {
        let k = draw.shear_deg.to_radians().tan();
        // forward: x' = scale·(x + k·y), y' = scale·y
        let inv_s = 1.0 / draw.scale;
        warp(&mut img, c, h, w, [[inv_s, 0.0], [-k * inv_s, inv_s]]);
    }
    if pad > 0 {
        let (oy, ox) = draw.crop;
        let mut out = vec![0.0; img.len()];
        for p in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = ((y + oy) as isize - pad as isize, (x + ox) as isize - pad as isize);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        out[p * h * w + y * w + x] = img[p * h * w + sy as usize * w + sx as usize];
                    }
                }
            }
        }
        img = out;
    }
    if draw.brightness != 1.0 || draw.contrast != 1.0 || draw.saturation != 1.0 {
        let plane = h * w;
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        for v in img.iter_mut() {
            *v = (*v * draw.brightness - mean) * draw.contrast + mean;
        }
        if c == 3 {
            for i in 0..plane {
                let gray = 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
                for ch in 0..3 {
                    let v = &mut img[ch * plane + i];
                    *v = gray + (*v - gray) * draw.saturation;
                }
            }
        }
    }
    LabeledImage {
        pixels: Tensor::from_parts(vec![c, h, w], img),
        label: image.label,
    }
}

pub fn augment(image: &LabeledImage, config: &AugmentConfig, stream: &mut RngStream) -> LabeledImage {
    let draw = AugmentDraw::sample(config, stream);
    augment_with(image, &draw, config.crop_pad)
}

/// `[T × pixels]`: the same analog image at every timestep.
pub fn encode_direct(image: &Tensor, horizon: usize) -> Result<Tensor> {
    if horizon == 0 {
        return Err(Error::Argument("horizon must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(horizon * image.len());
    for _ in 0..horizon {
        data.extend_from_slice(image.data());
    }
    let mut shape = vec![horizon];
    shape.extend_from_slice(image.shape());
    Tensor::new(&shape, data)
}

/// Directory from `SPIKEFIRST_DATA` if set.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os("SPIKEFIRST_DATA").map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_bytes(magic: u32, dims: &[u32], data: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(data);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn tiny_mnist(dir: &Path, n: u32) -> (PathBuf, PathBuf) {
        let mut px = vec![0u8; (n * 784) as usize];
        px[0] = 255;
        px[1] = 51;
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        (
            write(dir, "img", &idx_bytes(IDX_IMAGES_MAGIC, &[n, 28, 28], &px)),
            write(dir, "lbl", &idx_bytes(IDX_LABELS_MAGIC, &[n], &labels)),
        )
    }

    #[test]
    fn mnist_parses_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = tiny_mnist(dir.path(), 3);
        let ds = load_mnist_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.shape, [1, 28, 28]);
        assert_eq!(ds.image(0)[0], 1.0);
        assert_eq!(ds.image(0)[1], 0.2);
        assert_eq!(ds.image(0)[2], 0.0);
        assert_eq!(ds.label(2), 2);
    }

    #[test]
    fn mnist_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = tiny_mnist(dir.path(), 3);
        assert!(matches!(load_mnist_idx(&img, &img), Err(Error::Format(_))));
        let short = write(dir.path(), "short", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[1, 2]));
        assert!(matches!(load_mnist_idx(&img, &short), Err(Error::Consistency(_))));
        let bytes = fs::read(&img).unwrap();
        let cut = write(dir.path(), "cut", &bytes[..bytes.len() - 5]);
        assert!(matches!(load_mnist_idx(&cut, &lbl), Err(Error::Io(_))));
    }

    #[test]
    fn idx_round_trip() {
        let bytes = idx_bytes(
            IDX_IMAGES_MAGIC,
            &[2, 28, 28],
            &(0..1568).map(|i| (i % 251) as u8).collect::<Vec<_>>(),
        );
        assert_eq!(IdxArray::parse(&bytes).unwrap().to_bytes(), bytes);
    }

    fn cifar_record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn cifar_decodes_and_standardizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = cifar_record(3, |i| (i % 256) as u8);
        bytes.extend(cifar_record(7, |i| ((i * 7) % 256) as u8));
        let p = write(dir.path(), "b.bin", &bytes);
        let mut ds = load_cifar10_bin(std::slice::from_ref(&p), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.image(0)[255], 1.0);
        let stats = ChannelStats::of(&ds);
        stats.apply(&mut ds);
        let after = ChannelStats::of(&ds);
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-6);
            assert!((after.std[c] - 1.0).abs() < 1e-6);
        }
        let bad = write(dir.path(), "bad.bin", &bytes[..3000]);
        assert!(matches!(load_cifar10_bin(&[bad], Split::Train), Err(Error::Format(_))));
        let lab = write(dir.path(), "lab.bin", &cifar_record(10, |_| 0));
        assert!(matches!(load_cifar10_bin(&[lab], Split::Train), Err(Error::Format(_))));
    }

    fn test_image() -> LabeledImage {
        LabeledImage {
            pixels: Tensor::from_fn(&[3, 32, 32], |i| (i % 97) as f64 / 97.0),
            label: 5,
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = test_image();
        let out = augment(&img, &AugmentConfig::none(), &mut RngStream::new(1, 1));
        assert_eq!(out, img);
        assert_eq!(augment_with(&img, &AugmentDraw::identity(4), 4), img);
    }

    #[test]
    fn double_flip_restores() {
        let img = test_image();
        let mut d = AugmentDraw::identity(0);
        d.flip = true;
        let once = augment_with(&img, &d, 0);
        assert_ne!(once, img);
        assert_eq!(augment_with(&once, &d, 0), img);
    }

    #[test]
    fn crop_offset_shifts_interior() {
        let img = test_image();
        let mut d = AugmentDraw::identity(4);
        d.crop = (0, 8);
        let out = augment_with(&img, &d, 4);
        let at = |t: &Tensor, y, x| t.get(&[1, y, x]).unwrap();
        assert_eq!(at(&out.pixels, 10, 3), at(&img.pixels, 6, 7));
        assert_eq!(at(&out.pixels, 2, 31), 0.0);
        assert_eq!(at(&out.pixels, 0, 0), 0.0);
    }

    #[test]
    fn augmentation_is_deterministic_and_label_preserving() {
        let img = test_image();
        let mut cfg = AugmentConfig::cifar();
        cfg.extra = true;
        let a = augment(&img, &cfg, &mut RngStream::new(3, 9));
        let b = augment(&img, &cfg, &mut RngStream::new(3, 9));
        assert_eq!(a, b);
        assert_eq!(a.label, 5);
        assert_eq!(a.pixels.shape(), img.pixels.shape());
    }

    #[test]
    fn direct_encoding() {
        let img = Tensor::new(&[2], vec![0.25, 1.0]).unwrap();
        assert_eq!(encode_direct(&img, 1).unwrap().data(), img.data());
        let e = encode_direct(&img, 3).unwrap();
        assert_eq!(e.shape(), &[3, 2]);
        assert_eq!(e.sum(), 3.0 * img.sum());
        assert!(encode_direct(&img, 0).is_err());
    }
}
