//! Image and dataset ingestion, patch sampling, and anomaly-map serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TexanomError};

/// BT.601 luma weights.
const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// A single-channel intensity field with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    data: Array2<f64>,
}

impl GrayImage {
    /// Wraps an array, validating the `[0,1]` range.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(TexanomError::Contract(
                "image must have at least one row and one column".into(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TexanomError::Contract(format!(
                "intensity {v} outside [0,1]"
            )));
        }
        Ok(GrayImage { data })
    }

    /// Clamps out-of-range values instead of rejecting them. Used for model
    /// outputs that are mathematically in (0,1) but may round at the edges.
    pub fn from_clamped(mut data: Array2<f64>) -> Self {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        GrayImage { data }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Extracts a `size`×`size` patch with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<GrayImage> {
        if top + size > self.height() || left + size > self.width() {
            return Err(TexanomError::Contract(format!(
                "crop {size}x{size} at ({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let view = self.data.slice(ndarray::s![top..top + size, left..left + size]);
        Ok(GrayImage {
            data: view.to_owned(),
        })
    }
}

/// Converts one RGB pixel (channels in `[0,1]`) to gray with BT.601 weights.
pub fn rgb_to_gray(r: f64, g: f64, b: f64) -> f64 {
    GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
}

/// Loads an 8-bit grayscale or RGB image and normalizes intensities by 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| TexanomError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let format = ImageFormat::from_path(path)
        .map_err(|_| TexanomError::Format(format!("unsupported file extension: {}", path.display())))?;
    let img = image::load(reader, format)
        .map_err(|e| TexanomError::Format(format!("cannot decode {}: {e}", path.display())))?;
    decode_dynamic(img, path)
}

fn decode_dynamic(img: DynamicImage, path: &Path) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array2::<f64>::zeros((h, w));
    match img {
        DynamicImage::ImageLuma8(buf) => {
            for (i, row) in data.rows_mut().into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    *v = buf.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0;
                }
            }
        }
        DynamicImage::ImageRgb8(buf) => {
            for (i, row) in data.rows_mut().into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    let p = buf.get_pixel(j as u32, i as u32).0;
                    *v = rgb_to_gray(
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    );
                }
            }
        }
        DynamicImage::ImageRgba8(buf) => {
            for (i, row) in data.rows_mut().into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    let p = buf.get_pixel(j as u32, i as u32).0;
                    *v = rgb_to_gray(
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    );
                }
            }
        }
        other => {
            return Err(TexanomError::Format(format!(
                "unsupported bit depth/color type {:?} in {}",
                other.color(),
                path.display()
            )))
        }
    }
    GrayImage::new(data)
}

/// Writes a GrayImage as an 8-bit PNG (values quantized by rounding).
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::GrayImage::new(img.width() as u32, img.height() as u32);
    for (i, row) in img.data().rows().into_iter().enumerate() {
        for (j, &v) in row.into_iter().enumerate() {
            buf.put_pixel(j as u32, i as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    buf.save(path)
        .map_err(|e| TexanomError::Format(format!("cannot write {}: {e}", path.display())))
}

/// Writes a binary mask as an 8-bit PNG with values 0/255.
pub fn save_mask(mask: &Array2<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::GrayImage::new(mask.ncols() as u32, mask.nrows() as u32);
    for (i, row) in mask.rows().into_iter().enumerate() {
        for (j, &v) in row.into_iter().enumerate() {
            buf.put_pixel(j as u32, i as u32, image::Luma([if v != 0 { 255 } else { 0 }]));
        }
    }
    buf.save(path)
        .map_err(|e| TexanomError::Format(format!("cannot write {}: {e}", path.display())))
}

/// Loads a ground-truth mask PNG: nonzero pixels are anomalous.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let img = load_image(&path)?;
    Ok(img.data().mapv(|v| if v > 0.0 { 1 } else { 0 }))
}

/// Paths making up one run's dataset.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub train_normal: Vec<PathBuf>,
    pub validation_defective: Vec<(PathBuf, PathBuf)>,
    pub test: Vec<(PathBuf, Option<PathBuf>)>,
}

impl DatasetIndex {
    /// Checks path existence and validation/test disjointness.
    pub fn validate(&self) -> Result<()> {
        for p in self
            .train_normal
            .iter()
            .chain(self.validation_defective.iter().map(|(i, _)| i))
            .chain(self.validation_defective.iter().map(|(_, m)| m))
            .chain(self.test.iter().map(|(i, _)| i))
            .chain(self.test.iter().filter_map(|(_, m)| m.as_ref()))
        {
            if !p.exists() {
                return Err(TexanomError::Config(format!(
                    "dataset path does not exist: {}",
                    p.display()
                )));
            }
        }
        for (v, _) in &self.validation_defective {
            if self.test.iter().any(|(t, _)| t == v) {
                return Err(TexanomError::Config(format!(
                    "image {} appears in both validation and test sets",
                    v.display()
                )));
            }
        }
        Ok(())
    }
}

/// Seeded random patch sampler. Emits `(image index, top, left)` coordinates
/// with replacement, uniform over images and valid positions.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    pub patch_size: usize,
    pub count: usize,
    pub rng_seed: u64,
}

impl Default for PatchSampler {
    fn default() -> Self {
        PatchSampler {
            patch_size: 256,
            count: 50_000,
            rng_seed: 0,
        }
    }
}

/// One sampled patch location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchCoord {
    pub image: usize,
    pub top: usize,
    pub left: usize,
}

impl PatchSampler {
    /// Draws patch coordinates over preloaded training images.
    ///
    /// Deterministic for a fixed seed. Fails if any image is smaller than the
    /// patch size.
    pub fn sample_coords(&self, image_sizes: &[(usize, usize)]) -> Result<Vec<PatchCoord>> {
        if image_sizes.is_empty() && self.count > 0 {
            return Err(TexanomError::Config("no training images to sample from".into()));
        }
        for (idx, &(h, w)) in image_sizes.iter().enumerate() {
            if h < self.patch_size || w < self.patch_size {
                return Err(TexanomError::Config(format!(
                    "training image #{idx} is {h}x{w}, smaller than patch size {}",
                    self.patch_size
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        let mut coords = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let image = rng.gen_range(0..image_sizes.len());
            let (h, w) = image_sizes[image];
            let top = rng.gen_range(0..=h - self.patch_size);
            let left = rng.gen_range(0..=w - self.patch_size);
            coords.push(PatchCoord { image, top, left });
        }
        Ok(coords)
    }

    /// Materializes sampled patches from loaded images.
    pub fn sample_patches(&self, images: &[GrayImage]) -> Result<Vec<GrayImage>> {
        let sizes: Vec<_> = images.iter().map(|im| (im.height(), im.width())).collect();
        let coords = self.sample_coords(&sizes)?;
        coords
            .into_iter()
            .map(|c| images[c.image].crop(c.top, c.left, self.patch_size))
            .collect()
    }
}

const MAP_MAGIC: &[u8; 4] = b"TAM1";

/// Writes an anomaly map in the lossless "TAM1" format and an 8-bit min-max
/// scaled preview PNG next to it (same stem, `.png` extension).
pub fn write_anomaly_map(map: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if map.iter().any(|v| !v.is_finite()) {
        return Err(TexanomError::Contract("anomaly map contains non-finite scores".into()));
    }
    let file = File::create(path).map_err(|e| TexanomError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| TexanomError::io(path.display().to_string(), e);
    w.write_all(MAP_MAGIC).map_err(werr)?;
    w.write_all(&(map.nrows() as u32).to_le_bytes()).map_err(werr)?;
    w.write_all(&(map.ncols() as u32).to_le_bytes()).map_err(werr)?;
    for &v in map.iter() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
    }
    w.flush().map_err(werr)?;

    let preview = path.with_extension("png");
    save_image(&GrayImage::from_clamped(min_max_scale(map)), preview)
}

/// Min-max scales a map to `[0,1]`; a constant map scales to all zeros.
pub fn min_max_scale(map: &Array2<f64>) -> Array2<f64> {
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        map.mapv(|v| (v - min) / (max - min))
    } else {
        Array2::zeros(map.dim())
    }
}

/// Reads a "TAM1" anomaly map file back into an array of f32-exact scores.
pub fn read_anomaly_map(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| TexanomError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let rerr = |e| TexanomError::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAP_MAGIC {
        return Err(TexanomError::Format(format!(
            "{} is not an anomaly map file (bad magic)",
            path.display()
        )));
    }
    let mut dim = [0u8; 4];
    r.read_exact(&mut dim).map_err(rerr)?;
    let h = u32::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim).map_err(rerr)?;
    let w = u32::from_le_bytes(dim) as usize;
    let mut data = Vec::with_capacity(h * w);
    let mut buf = [0u8; 4];
    for _ in 0..h * w {
        r.read_exact(&mut buf).map_err(rerr)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| TexanomError::Format(format!("bad map shape: {e}")))
}
