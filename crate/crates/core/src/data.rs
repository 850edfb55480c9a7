//! Datasets of images and binary masks: directory ingestion, PNG I/O,
//! deterministic splitting, and a seeded synthetic stand-in dataset.
//!
//! Pixel intensities map linearly from `0..=255` to `[-1, 1]`; masks hold
//! exactly `-1` (background) and `+1` (foreground).

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{name} has no counterpart in {missing_in}")]
    MissingCounterpart { name: String, missing_in: PathBuf },
    #[error("no images found in {0}")]
    Empty(PathBuf),
    #[error("split {n_train}+{n_test} does not match dataset size {size}")]
    SplitMismatch { n_train: usize, n_test: usize, size: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// `0..=255` to `[-1, 1]`.
pub fn pixel_to_value(p: f32) -> f32 {
    p / 127.5 - 1.0
}

/// `[-1, 1]` to the nearest 8-bit level, clamping out-of-range values.
pub fn value_to_pixel(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `(1, C, H, W)` in `[-1, 1]`.
    pub image: Tensor,
    /// `(1, 1, H, W)` with values in `{-1, +1}`.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedDataset {
    pub samples: Vec<Sample>,
}

/// Two independent pools with no pairing relation between them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnpairedDataset {
    pub domain_a: Vec<Tensor>,
    pub domain_b: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[1])
    }

    /// Writes the dataset in the `images/` + `masks/` directory layout.
    pub fn save(&self, root: &Path) -> Result<()> {
        for sub in [IMAGES_DIR, MASKS_DIR] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for s in &self.samples {
            write_image(&s.image, &root.join(IMAGES_DIR).join(&s.name))?;
            write_image(&s.mask, &root.join(MASKS_DIR).join(&s.name))?;
        }
        Ok(())
    }
}

fn to_dynamic(t: &Tensor) -> Result<DynamicImage> {
    let [n, c, h, w] = t
        .dims4("write_image")
        .map_err(|e| DataError::InvalidArgument(e.to_string()))?;
    if n != 1 {
        return Err(DataError::InvalidArgument(format!("write_image expects batch 1, got {n}")));
    }
    let d = t.data();
    let plane = h * w;
    let (w32, h32) = (w as u32, h as u32);
    match c {
        1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w32, h32, |x, y| {
            Luma([value_to_pixel(d[y as usize * w + x as usize])])
        }))),
        3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w32, h32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([0, 1, 2].map(|ch| value_to_pixel(d[ch * plane + i])))
        }))),
        _ => Err(DataError::InvalidArgument(format!("cannot write {c}-channel image"))),
    }
}

/// Writes a `(1, C, H, W)` tensor with `C` in `{1, 3}` as an 8-bit PNG.
pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    to_dynamic(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

/// Writes a `(1, C, H, W)` tensor as a PNG resized to `width x height`,
/// nearest-neighbour when `nearest` (binary masks), bilinear otherwise.
pub fn write_image_resized(t: &Tensor, path: &Path, width: u32, height: u32, nearest: bool) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let img = to_dynamic(t)?;
    let img = if img.width() == width && img.height() == height {
        img
    } else {
        let filter = if nearest { FilterType::Nearest } else { FilterType::Triangle };
        img.resize_exact(width, height, filter)
    };
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => DataError::Io { path: path.to_path_buf(), source: e },
        source => DataError::Image { path: path.to_path_buf(), source },
    })
}

fn is_color(img: &DynamicImage) -> bool {
    img.color().has_color()
}

fn luma_tensor(img: &GrayImage, map: impl Fn(u8) -> f32) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| map(p.0[0])).collect();
    Tensor::new(vec![1, 1, h as usize, w as usize], data).expect("dims match")
}

fn rgb_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = pixel_to_value(p.0[ch] as f32);
        }
    }
    Tensor::new(vec![1, 3, h as usize, w as usize], data).expect("dims match")
}

fn resize<P: image::Pixel + 'static>(
    img: ImageBuffer<P, Vec<P::Subpixel>>,
    size: usize,
    filter: FilterType,
) -> ImageBuffer<P, Vec<P::Subpixel>> {
    if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, filter)
    }
}

/// Reads an image with the requested channel count (1 or 3), bilinearly
/// resized to `size x size`.
pub fn read_image_channels(path: &Path, size: usize, channels: usize) -> Result<Tensor> {
    let img = open(path)?;
    match channels {
        1 => Ok(luma_tensor(&resize(img.to_luma8(), size, FilterType::Triangle), |p| {
            pixel_to_value(p as f32)
        })),
        3 => Ok(rgb_tensor(&resize(img.to_rgb8(), size, FilterType::Triangle))),
        c => Err(DataError::InvalidArgument(format!("unsupported channel count {c}"))),
    }
}

/// Reads an image at its native channel count: 3 for color files, 1 otherwise.
pub fn read_image(path: &Path, size: usize) -> Result<Tensor> {
    let channels = if is_color(&open(path)?) { 3 } else { 1 };
    read_image_channels(path, size, channels)
}

/// Reads a mask: nearest-neighbour resize, then threshold at 127.5 to `{-1, +1}`.
pub fn read_mask(path: &Path, size: usize) -> Result<Tensor> {
    let img = resize(open(path)?.to_luma8(), size, FilterType::Nearest);
    Ok(luma_tensor(&img, |p| if p as f32 > 127.5 { 1.0 } else { -1.0 }))
}

/// Native `(width, height)` of an image file.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path)
        .map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

fn list_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(dir))?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads `<dir>/images/*` and `<dir>/masks/*` with matching file names,
/// as grayscale images.
pub fn load_paired(dir: &Path, image_size: usize) -> Result<PairedDataset> {
    load_paired_with_channels(dir, image_size, 1)
}

pub fn load_paired_with_channels(
    dir: &Path,
    image_size: usize,
    channels: usize,
) -> Result<PairedDataset> {
    if image_size == 0 {
        return Err(DataError::InvalidArgument("image_size must be positive".into()));
    }
    let (img_dir, mask_dir) = (dir.join(IMAGES_DIR), dir.join(MASKS_DIR));
    let images = list_files(&img_dir)?;
    let masks = list_files(&mask_dir)?;
    if let Some(orphan) = images.iter().find(|n| masks.binary_search(n).is_err()) {
        return Err(DataError::MissingCounterpart { name: orphan.clone(), missing_in: mask_dir });
    }
    if let Some(orphan) = masks.iter().find(|n| images.binary_search(n).is_err()) {
        return Err(DataError::MissingCounterpart { name: orphan.clone(), missing_in: img_dir });
    }
    if images.is_empty() {
        return Err(DataError::Empty(img_dir));
    }
    let samples = images
        .into_iter()
        .map(|name| {
            Ok(Sample {
                image: read_image_channels(&img_dir.join(&name), image_size, channels)?,
                mask: read_mask(&mask_dir.join(&name), image_size)?,
                name,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairedDataset { samples })
}

/// Seeded partition into `(train, test)`; the first `n_train` entries of a
/// random permutation go to train.
pub fn split(ds: &PairedDataset, spec: SplitSpec) -> Result<(PairedDataset, PairedDataset)> {
    let SplitSpec { n_train, n_test, seed } = spec;
    if n_train == 0 || n_test == 0 || n_train + n_test != ds.len() {
        return Err(DataError::SplitMismatch { n_train, n_test, size: ds.len() });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| PairedDataset {
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Drops the pairing: domain A keeps the images in order, domain B holds the
/// masks in an independent seeded order that differs from the identity.
pub fn to_unpaired(ds: &PairedDataset, seed: u64) -> UnpairedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    loop {
        order.shuffle(&mut rng);
        if ds.len() < 2 || order.iter().enumerate().any(|(i, &j)| i != j) {
            break;
        }
    }
    UnpairedDataset {
        domain_a: ds.samples.iter().map(|s| s.image.clone()).collect(),
        domain_b: order.iter().map(|&i| ds.samples[i].mask.clone()).collect(),
    }
}

const BACKGROUND: f32 = -0.8;
const NOISE_STD: f32 = 0.08;

/// Seeded toy segmentation task: dark noisy backgrounds with one to three
/// bright ellipses or rectangles. Pixels are snapped to the 8-bit grid so the
/// dataset survives a PNG round trip unchanged.
pub fn synth_shapes(n: usize, image_size: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(DataError::InvalidArgument("n must be >= 1".into()));
    }
    if image_size < 16 {
        return Err(DataError::InvalidArgument(format!("image_size {image_size} < 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    let s = image_size as f32;
    let samples = (0..n)
        .map(|i| {
            let mut mask = vec![-1.0f32; image_size * image_size];
            let mut image = vec![0.0f32; image_size * image_size];
            let mut brightness = vec![0.0f32; image_size * image_size];
            for _ in 0..rng.gen_range(1..=3) {
                let cx = rng.gen_range(0.15 * s..0.85 * s);
                let cy = rng.gen_range(0.15 * s..0.85 * s);
                let rx = rng.gen_range(s / 12.0..s / 5.0);
                let ry = rng.gen_range(s / 12.0..s / 5.0);
                let ellipse = rng.gen_bool(0.5);
                let level = rng.gen_range(0.3..0.9);
                for y in 0..image_size {
                    for x in 0..image_size {
                        let dx = (x as f32 + 0.5 - cx) / rx;
                        let dy = (y as f32 + 0.5 - cy) / ry;
                        let inside = if ellipse {
                            dx * dx + dy * dy <= 1.0
                        } else {
                            dx.abs() <= 1.0 && dy.abs() <= 1.0
                        };
                        if inside {
                            mask[y * image_size + x] = 1.0;
                            brightness[y * image_size + x] = level;
                        }
                    }
                }
            }
            for (j, px) in image.iter_mut().enumerate() {
                let base = if mask[j] > 0.0 { brightness[j] } else { BACKGROUND };
                let v = (base + noise.sample(&mut rng)).clamp(-1.0, 1.0);
                *px = pixel_to_value(value_to_pixel(v) as f32);
            }
            let shape = vec![1, 1, image_size, image_size];
            Sample {
                name: format!("synth_{i:05}.png"),
                image: Tensor::new(shape.clone(), image).expect("dims"),
                mask: Tensor::new(shape, mask).expect("dims"),
            }
        })
        .collect();
    Ok(PairedDataset { samples })
}
