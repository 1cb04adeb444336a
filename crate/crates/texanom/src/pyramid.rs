//! Complex subband decomposition and its adjoint.
//!
//! An input patch is decomposed into `O*(S-2) + 2` subbands: the centered 2-D
//! DFT of the patch, `O` oriented complex responses at each of `S-2`
//! progressively 2x2-average-pooled scales, and a final lowpass residual.
//! The whole map is linear in the input, and [`Decomposer::adjoint`] is its
//! exact transpose (treating real and imaginary parts as independent reals),
//! which is what loss gradients are pulled back through.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Result, TexanomError};

/// Oriented kernel support; also the CW-SSIM window size the decomposition
/// is paired with.
pub const KERNEL_SIZE: usize = 7;

/// Number of subbands produced for `orientations` O and `scales` S.
pub fn subband_count(orientations: usize, scales: usize) -> Result<usize> {
    if orientations < 1 {
        return Err(TexanomError::Config("orientations must be >= 1".into()));
    }
    if scales < 2 {
        return Err(TexanomError::Config(
            "scales must be >= 2 (first and last subbands need room)".into(),
        ));
    }
    Ok(orientations * (scales - 2) + 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecomposerConfig {
    pub orientations: usize,
    pub scales: usize,
    /// Training patch edge length; inputs to [`Decomposer::decompose`] may be
    /// any rectangle whose sides are divisible by `2^(scales-1)`.
    pub input_size: usize,
}

impl Default for DecomposerConfig {
    fn default() -> Self {
        DecomposerConfig {
            orientations: 6,
            scales: 5,
            input_size: 256,
        }
    }
}

/// Identifies where a subband sits in the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubbandKind {
    /// Centered 2-D DFT of the input.
    First,
    /// Oriented response; `scale` counts poolings applied (1-based),
    /// `orientation` indexes the kernel angle `k*pi/O`.
    Oriented { scale: usize, orientation: usize },
    /// Lowpass residual, stored complex with zero imaginary part.
    Last,
}

#[derive(Debug, Clone)]
pub struct Subband {
    pub coeffs: Array2<Complex64>,
    pub kind: SubbandKind,
}

impl Subband {
    /// Number of poolings between the input and this subband; a subband pixel
    /// covers `2^downsamplings` input pixels per axis.
    pub fn downsamplings(&self, scales: usize) -> usize {
        match self.kind {
            SubbandKind::First => 0,
            SubbandKind::Oriented { scale, .. } => scale,
            SubbandKind::Last => scales - 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubbandDecomposition {
    pub subbands: Vec<Subband>,
    pub config: DecomposerConfig,
}

/// Reusable decomposer holding the precomputed oriented kernels.
pub struct Decomposer {
    config: DecomposerConfig,
    kernels: Vec<Array2<Complex64>>,
}

pub fn build_decomposer(config: DecomposerConfig) -> Result<Decomposer> {
    Decomposer::new(config)
}

impl Decomposer {
    pub fn new(config: DecomposerConfig) -> Result<Decomposer> {
        subband_count(config.orientations, config.scales)?;
        let div = 1usize << (config.scales - 1);
        if config.input_size % div != 0 {
            return Err(TexanomError::Config(format!(
                "input size {} not divisible by 2^(S-1) = {div}",
                config.input_size
            )));
        }
        let kernels = (0..config.orientations)
            .map(|k| gabor_kernel(k as f64 * std::f64::consts::PI / config.orientations as f64))
            .collect();
        Ok(Decomposer { config, kernels })
    }

    pub fn config(&self) -> &DecomposerConfig {
        &self.config
    }

    pub fn kernels(&self) -> &[Array2<Complex64>] {
        &self.kernels
    }

    pub fn subband_count(&self) -> usize {
        self.config.orientations * (self.config.scales - 2) + 2
    }

    fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << (self.config.scales - 1);
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(TexanomError::Contract(format!(
                "input {h}x{w} not divisible by 2^(S-1) = {div}"
            )));
        }
        Ok(())
    }

    /// Decomposes a real-valued patch into its subbands.
    pub fn decompose(&self, x: &Array2<f64>) -> Result<SubbandDecomposition> {
        let (h, w) = x.dim();
        self.check_shape(h, w)?;
        let s = self.config.scales;
        let mut subbands = Vec::with_capacity(self.subband_count());
        subbands.push(Subband {
            coeffs: fftshift(&fft2(x)),
            kind: SubbandKind::First,
        });
        let mut running = x.clone();
        for scale in 1..=s - 2 {
            running = avgpool2(&running);
            for (orientation, kernel) in self.kernels.iter().enumerate() {
                subbands.push(Subband {
                    coeffs: conv_reflect(&running, kernel),
                    kind: SubbandKind::Oriented { scale, orientation },
                });
            }
        }
        let last = avgpool2(&running);
        subbands.push(Subband {
            coeffs: last.mapv(|v| Complex64::new(v, 0.0)),
            kind: SubbandKind::Last,
        });
        Ok(SubbandDecomposition {
            subbands,
            config: self.config,
        })
    }

    /// Applies the transpose of `decompose` to a cotangent, yielding the
    /// gradient with respect to the input image. Real and imaginary parts of
    /// each subband are treated as independent real variables.
    pub fn adjoint(&self, g: &SubbandDecomposition) -> Result<Array2<f64>> {
        let s = self.config.scales;
        let o = self.config.orientations;
        if g.subbands.len() != self.subband_count() {
            return Err(TexanomError::Contract(format!(
                "cotangent has {} subbands, decomposer produces {}",
                g.subbands.len(),
                self.subband_count()
            )));
        }
        let (h, w) = g.subbands[0].coeffs.dim();
        self.check_shape(h, w)?;
        let expect = |idx: usize, eh: usize, ew: usize| -> Result<&Array2<Complex64>> {
            let c = &g.subbands[idx].coeffs;
            if c.dim() != (eh, ew) {
                return Err(TexanomError::Contract(format!(
                    "subband {idx} cotangent is {:?}, expected {eh}x{ew}",
                    c.dim()
                )));
            }
            Ok(c)
        };

        let last_idx = self.subband_count() - 1;
        let last_div = 1usize << (s - 1);
        let g_last = expect(last_idx, h / last_div, w / last_div)?;
        // Forward stores the residual with zero imaginary part, so only the
        // real component of its cotangent reaches the input.
        let mut grad = avgpool2_adjoint(&g_last.mapv(|c| c.re));
        for scale in (1..=s - 2).rev() {
            let div = 1usize << scale;
            for orientation in 0..o {
                let idx = 1 + (scale - 1) * o + orientation;
                let gk = expect(idx, h / div, w / div)?;
                grad = &grad + &conv_reflect_adjoint(gk, &self.kernels[orientation]);
            }
            grad = avgpool2_adjoint(&grad);
        }
        let g_first = expect(0, h, w)?;
        Ok(&grad + &fft2_adjoint(g_first))
    }
}

/// Complex Gabor kernel at the given orientation angle: isotropic Gaussian
/// envelope, carrier at radial frequency pi/2, one-octave bandwidth, with the
/// complex mean subtracted so constant inputs map exactly to zero.
fn gabor_kernel(theta: f64) -> Array2<Complex64> {
    let omega = std::f64::consts::FRAC_PI_2;
    let lambda = 2.0 * std::f64::consts::PI / omega;
    // sigma from the one-octave half-response bandwidth of a Gabor filter
    let sigma = lambda / std::f64::consts::PI * (0.5 * 2f64.ln()).sqrt() * 3.0;
    let half = (KERNEL_SIZE / 2) as isize;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut k = Array2::<Complex64>::zeros((KERNEL_SIZE, KERNEL_SIZE));
    for du in -half..=half {
        for dv in -half..=half {
            let (u, v) = (du as f64, dv as f64);
            let along = v * ct + u * st;
            let env = (-(u * u + v * v) / (2.0 * sigma * sigma)).exp();
            k[[(du + half) as usize, (dv + half) as usize]] =
                Complex64::from_polar(env, omega * along);
        }
    }
    let mean = k.sum() / (KERNEL_SIZE * KERNEL_SIZE) as f64;
    k.mapv_inplace(|c| c - mean);
    k
}

/// Unnormalized 2-D FFT of a real array.
pub fn fft2(x: &Array2<f64>) -> Array2<Complex64> {
    let mut c = x.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut c);
    c
}

fn fft2_inplace(c: &mut Array2<Complex64>) {
    let (h, w) = c.dim();
    let mut planner = FftPlanner::new();
    let fft_w = planner.plan_fft_forward(w);
    for mut row in c.rows_mut() {
        let slice = row.as_slice_mut().expect("row not contiguous");
        fft_w.process(slice);
    }
    let fft_h = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = c[[i, j]];
        }
        fft_h.process(&mut col);
        for i in 0..h {
            c[[i, j]] = col[i];
        }
    }
}

/// Moves the zero-frequency coefficient to the array center.
pub fn fftshift(x: &Array2<Complex64>) -> Array2<Complex64> {
    roll(x, x.nrows() / 2, x.ncols() / 2)
}

fn ifftshift(x: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    roll(x, h - h / 2, w - w / 2)
}

fn roll(x: &Array2<Complex64>, by_r: usize, by_c: usize) -> Array2<Complex64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| x[[(i + h - by_r) % h, (j + w - by_c) % w]])
}

/// Transpose of `fftshift . fft2` over interleaved real/imaginary parts:
/// un-shift, apply the conjugate-transpose DFT, keep the real component.
fn fft2_adjoint(g: &Array2<Complex64>) -> Array2<f64> {
    let mut c = ifftshift(g).mapv(|z| z.conj());
    fft2_inplace(&mut c);
    c.mapv(|z| z.conj().re)
}

/// 2x2 average pooling; both dimensions must be even.
pub fn avgpool2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dimensions");
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        0.25 * (x[[2 * i, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j]] + x[[2 * i + 1, 2 * j + 1]])
    })
}

fn avgpool2_adjoint(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    Array2::from_shape_fn((2 * h, 2 * w), |(i, j)| 0.25 * g[[i / 2, j / 2]])
}

fn reflect_index(t: isize, n: usize) -> usize {
    let n = n as isize;
    let mut t = t;
    while t < 0 || t >= n {
        if t < 0 {
            t = -t;
        }
        if t >= n {
            t = 2 * n - 2 - t;
        }
    }
    t as usize
}

/// Same-size correlation of a real image with a complex kernel, reflect
/// padding at the borders.
pub fn conv_reflect(x: &Array2<f64>, kernel: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let ks = kernel.nrows();
    let half = (ks / 2) as isize;
    let mut out = Array2::<Complex64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for u in 0..ks {
                let si = reflect_index(i as isize + u as isize - half, h);
                for v in 0..ks {
                    let sj = reflect_index(j as isize + v as isize - half, w);
                    acc += kernel[[u, v]] * x[[si, sj]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Transpose of [`conv_reflect`]: scatters the cotangent through the kernel
/// taps and folds the reflected border contributions back inside.
fn conv_reflect_adjoint(g: &Array2<Complex64>, kernel: &Array2<Complex64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let ks = kernel.nrows();
    let half = (ks / 2) as isize;
    let mut grad = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let gz = g[[i, j]];
            for u in 0..ks {
                let si = reflect_index(i as isize + u as isize - half, h);
                for v in 0..ks {
                    let sj = reflect_index(j as isize + v as isize - half, w);
                    let kz = kernel[[u, v]];
                    grad[[si, sj]] += kz.re * gz.re + kz.im * gz.im;
                }
            }
        }
    }
    grad
}
