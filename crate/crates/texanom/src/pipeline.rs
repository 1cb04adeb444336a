//! Full-image inference: patch-grid reconstruction, multi-scale anomaly
//! maps, threshold calibration, and morphological post-processing.

use ndarray::Array2;
use rayon::prelude::*;

use crate::autoencoder::{forward, ModelParams};
use crate::dataio::GrayImage;
use crate::error::{Result, TexanomError};
use crate::pyramid::{Decomposer, DecomposerConfig};
use crate::similarity::{cwssim_subband_map, CwssimConfig};

/// Morphological clean-up applied after thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    /// Keep a pixel only if the whole disk around it is above threshold.
    Erode,
    /// Dilation followed by erosion; fills small gaps instead of shrinking.
    Close,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Decomposition depths fused into the final map.
    pub fusion_scales: Vec<usize>,
    pub orientations: usize,
    pub window_size: usize,
    pub cwssim_k: f64,
    pub target_fpr: f64,
    pub erode_radius: usize,
    pub morphology: MorphOp,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            patch_size: 256,
            stride: 16,
            fusion_scales: vec![7, 8, 9],
            orientations: 6,
            window_size: 7,
            cwssim_k: 0.01,
            target_fpr: 0.05,
            erode_radius: 10,
            morphology: MorphOp::Erode,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(TexanomError::Config(format!(
                "stride {} must be in 1..=patch size {}",
                self.stride, self.patch_size
            )));
        }
        if self.fusion_scales.is_empty() || self.fusion_scales.iter().any(|&s| s < 2) {
            return Err(TexanomError::Config(
                "fusion scales must be a non-empty list of values >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.target_fpr) || self.target_fpr <= 0.0 {
            return Err(TexanomError::Config(format!(
                "target FPR {} must lie in (0, 1)",
                self.target_fpr
            )));
        }
        Ok(())
    }
}

/// Stride-spaced starts along one axis, with one extra start flush against
/// the far edge when the stride does not land there exactly.
fn axis_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Top-left corners of a regular patch grid covering every pixel of an
/// `h`-by-`w` image.
pub fn patch_grid(h: usize, w: usize, patch: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(TexanomError::Config("stride must be positive".into()));
    }
    if h < patch || w < patch {
        return Err(TexanomError::Degenerate(format!(
            "image {h}x{w} smaller than patch {patch}; pad the input first"
        )));
    }
    let rows = axis_starts(h, patch, stride);
    let cols = axis_starts(w, patch, stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push((r, c));
        }
    }
    Ok(out)
}

/// Applies `per_patch` to every grid patch and averages overlapping outputs.
pub fn reconstruct_with<F>(
    image: &Array2<f64>,
    patch: usize,
    stride: usize,
    per_patch: F,
) -> Result<Array2<f64>>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync,
{
    let (h, w) = image.dim();
    let grid = patch_grid(h, w, patch, stride)?;
    let mut acc = Array2::<f64>::zeros((h, w));
    let mut counts = Array2::<f64>::zeros((h, w));
    // bounded chunks keep memory flat; in-order accumulation keeps the
    // floating-point sum independent of thread scheduling
    for chunk in grid.chunks(64) {
        let outputs: Vec<Result<Array2<f64>>> = chunk
            .par_iter()
            .map(|&(r, c)| {
                let p = image.slice(ndarray::s![r..r + patch, c..c + patch]).to_owned();
                per_patch(&p)
            })
            .collect();
        for (&(r, c), out) in chunk.iter().zip(outputs) {
            let out = out?;
            if out.dim() != (patch, patch) {
                return Err(TexanomError::Contract(format!(
                    "per-patch output {:?} does not match patch size {patch}",
                    out.dim()
                )));
            }
            let mut acc_view = acc.slice_mut(ndarray::s![r..r + patch, c..c + patch]);
            acc_view += &out;
            let mut cnt_view = counts.slice_mut(ndarray::s![r..r + patch, c..c + patch]);
            cnt_view += 1.0;
        }
    }
    Ok(acc / &counts)
}

/// Reconstructs a full image by running the autoencoder over the patch grid
/// and averaging the overlaps.
pub fn reconstruct_full(
    image: &GrayImage,
    model: &ModelParams,
    cfg: &InferenceConfig,
) -> Result<GrayImage> {
    cfg.validate()?;
    let patch = cfg.patch_size;
    let recon = reconstruct_with(image.data(), patch, cfg.stride, |p| {
        let x = p.clone().into_shape((1, 1, patch, patch)).unwrap();
        let (_, y, _) = forward(&x, model)?;
        Ok(y.into_shape((patch, patch)).unwrap())
    })?;
    Ok(GrayImage::from_clamped(recon))
}

fn reflect_idx(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads on the bottom/right edges up to the next multiple of `div`.
fn pad_to_multiple(x: &Array2<f64>, div: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let nh = h.div_ceil(div) * div;
    let nw = w.div_ceil(div) * div;
    if nh == h && nw == w {
        return x.clone();
    }
    Array2::from_shape_fn((nh, nw), |(i, j)| x[[reflect_idx(i, h), reflect_idx(j, w)]])
}

/// Per-subband-pixel mean of the stride-1 window scores covering that pixel.
fn window_pixel_means(scores: &Array2<f64>, r: usize, hs: usize, ws: usize) -> Array2<f64> {
    let (nh, nw) = scores.dim();
    debug_assert_eq!((nh, nw), (hs - r + 1, ws - r + 1));
    let mut ps = Array2::<f64>::zeros((nh + 1, nw + 1));
    for i in 0..nh {
        for j in 0..nw {
            ps[[i + 1, j + 1]] = scores[[i, j]] + ps[[i, j + 1]] + ps[[i + 1, j]] - ps[[i, j]];
        }
    }
    let range = |p: usize, n: usize| {
        let lo = p.saturating_sub(r - 1);
        let hi = p.min(n - 1);
        (lo, hi)
    };
    Array2::from_shape_fn((hs, ws), |(p, q)| {
        let (r0, r1) = range(p, nh);
        let (c0, c1) = range(q, nw);
        let sum = ps[[r1 + 1, c1 + 1]] - ps[[r0, c1 + 1]] - ps[[r1 + 1, c0]] + ps[[r0, c0]];
        sum / (((r1 - r0 + 1) * (c1 - c0 + 1)) as f64)
    })
}

/// Anomaly map for one decomposition depth, over the padded image.
fn anomaly_map_single_scale(
    i_pad: &Array2<f64>,
    j_pad: &Array2<f64>,
    scales: usize,
    cfg: &InferenceConfig,
) -> Result<Array2<f64>> {
    let decomposer = Decomposer::new(DecomposerConfig {
        orientations: cfg.orientations,
        scales,
        input_size: 1 << (scales - 1),
    })?;
    let di = decomposer.decompose(i_pad)?;
    let dj = decomposer.decompose(j_pad)?;
    let sim_cfg = CwssimConfig {
        window_size: cfg.window_size,
        k: cfg.cwssim_k,
        stride: 1,
    };
    let r = cfg.window_size;
    let (h, w) = i_pad.dim();
    let mut acc = Array2::<f64>::zeros((h, w));
    let mut used = 0usize;
    for (sx, sy) in di.subbands.iter().zip(&dj.subbands) {
        let (hs, ws) = sx.coeffs.dim();
        if hs < r || ws < r {
            // subband too small to hold a single window at this depth
            continue;
        }
        let smap = cwssim_subband_map(&sx.coeffs, &sy.coeffs, &sim_cfg)?;
        let means = window_pixel_means(&smap.scores, r, hs, ws);
        let block = 1usize << sx.downsamplings(scales);
        for ((p, q), &v) in means.indexed_iter() {
            acc.slice_mut(ndarray::s![p * block..(p + 1) * block, q * block..(q + 1) * block])
                .mapv_inplace(|a| a + v);
        }
        used += 1;
    }
    if used == 0 {
        return Err(TexanomError::Degenerate(format!(
            "no subband of a {h}x{w} image at depth {scales} admits a {r}x{r} window"
        )));
    }
    Ok(acc.mapv(|v| 1.0 - v / used as f64))
}

/// Per-pixel anomaly scores: one minus the multi-scale mean similarity
/// between an image and its reconstruction.
pub fn anomaly_map(
    image: &GrayImage,
    recon: &GrayImage,
    cfg: &InferenceConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if image.shape() != recon.shape() {
        return Err(TexanomError::Contract(format!(
            "image {:?} and reconstruction {:?} differ in shape",
            image.shape(),
            recon.shape()
        )));
    }
    let (h, w) = image.shape();
    let maps: Vec<Result<Array2<f64>>> = cfg
        .fusion_scales
        .par_iter()
        .map(|&s| {
            let div = 1usize << (s - 1);
            let ip = pad_to_multiple(image.data(), div);
            let jp = pad_to_multiple(recon.data(), div);
            let full = anomaly_map_single_scale(&ip, &jp, s, cfg)?;
            Ok(full.slice(ndarray::s![..h, ..w]).to_owned())
        })
        .collect();
    let mut acc = Array2::<f64>::zeros((h, w));
    for m in maps {
        acc += &m?;
    }
    Ok(acc / cfg.fusion_scales.len() as f64)
}

/// One-call inference: reconstruct, then score.
pub fn score_image(
    image: &GrayImage,
    model: &ModelParams,
    cfg: &InferenceConfig,
) -> Result<(GrayImage, Array2<f64>)> {
    let recon = reconstruct_full(image, model, cfg)?;
    let map = anomaly_map(image, &recon, cfg)?;
    Ok((recon, map))
}

/// Threshold such that at most a `target_fpr` fraction of the given
/// normal-pixel scores reaches it: the (1 − target_fpr)-quantile with
/// higher interpolation.
pub fn calibrate_threshold(normal_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if normal_scores.is_empty() {
        return Err(TexanomError::Calibration(
            "no normal pixels available for calibration".into(),
        ));
    }
    if !(0.0 < target_fpr && target_fpr < 1.0) {
        return Err(TexanomError::Config(format!(
            "target FPR {target_fpr} must lie in (0, 1)"
        )));
    }
    if normal_scores.iter().any(|v| !v.is_finite()) {
        return Err(TexanomError::Calibration(
            "non-finite score in calibration pool".into(),
        ));
    }
    let mut sorted = normal_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = 1.0 - target_fpr;
    let idx = (q * (sorted.len() - 1) as f64).ceil() as usize;
    Ok(sorted[idx])
}

/// Pools anomaly scores of normal pixels (mask value 0) across images.
pub fn pool_normal_scores(maps: &[Array2<f64>], masks: &[Array2<u8>]) -> Result<Vec<f64>> {
    if maps.len() != masks.len() {
        return Err(TexanomError::Contract(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut pool = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(TexanomError::Contract(format!(
                "map {:?} and mask {:?} differ in shape",
                map.dim(),
                mask.dim()
            )));
        }
        for (v, m) in map.iter().zip(mask.iter()) {
            if *m == 0 {
                pool.push(*v);
            }
        }
    }
    Ok(pool)
}

/// Persistent record of a calibration run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationRecord {
    pub gamma: f64,
    pub target_fpr: f64,
    /// Hex digest identifying the validation inputs the threshold came from.
    pub validation_hash: String,
}

impl CalibrationRecord {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| TexanomError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| TexanomError::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<CalibrationRecord> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TexanomError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| TexanomError::Format(format!("{}: {e}", path.display())))
    }
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Erosion with a discrete disk: a pixel survives only if every disk offset
/// stays inside the frame and on the mask.
pub fn erode_disk(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let keep = mask[[i, j]] != 0
            && offsets.iter().all(|&(dy, dx)| {
                let y = i as isize + dy;
                let x = j as isize + dx;
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
                    && mask[[y as usize, x as usize]] != 0
            });
        u8::from(keep)
    })
}

/// Dilation with a discrete disk.
pub fn dilate_disk(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let hit = offsets.iter().any(|&(dy, dx)| {
            let y = i as isize + dy;
            let x = j as isize + dx;
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
                && mask[[y as usize, x as usize]] != 0
        });
        u8::from(hit)
    })
}

pub fn binarize(map: &Array2<f64>, gamma: f64) -> Array2<u8> {
    map.mapv(|v| u8::from(v >= gamma))
}

/// Thresholds the anomaly map at `gamma` and applies the configured
/// disk morphology.
pub fn binarize_and_erode(
    map: &Array2<f64>,
    gamma: f64,
    radius: usize,
    morphology: MorphOp,
) -> Array2<u8> {
    let mask = binarize(map, gamma);
    match morphology {
        MorphOp::Erode => erode_disk(&mask, radius),
        MorphOp::Close => erode_disk(&dilate_disk(&mask, radius), radius),
    }
}
