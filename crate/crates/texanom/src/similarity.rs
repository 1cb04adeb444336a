//! CW-SSIM window index, subband-pooled loss, baseline MSE/SSIM losses, and
//! exact gradients of each with respect to the reconstructed image.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Result, TexanomError};
use crate::pyramid::{Decomposer, SubbandDecomposition};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwssimConfig {
    pub window_size: usize,
    /// Stability constant in the numerator and denominator of the index.
    pub k: f64,
    pub stride: usize,
}

impl Default for CwssimConfig {
    fn default() -> Self {
        CwssimConfig {
            window_size: 7,
            k: 0.01,
            stride: 1,
        }
    }
}

impl CwssimConfig {
    fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.k <= 0.0 || self.stride < 1 {
            return Err(TexanomError::Config(format!(
                "invalid CW-SSIM config: R={}, K={}, stride={}",
                self.window_size, self.k, self.stride
            )));
        }
        Ok(())
    }
}

/// Per-window scores over the sliding-window grid of one subband.
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    pub scores: Array2<f64>,
    pub window_size: usize,
    pub stride: usize,
    pub subband_shape: (usize, usize),
}

impl SimilarityMap {
    pub fn mean(&self) -> f64 {
        self.scores.sum() / self.scores.len() as f64
    }
}

/// CW-SSIM index of a single pair of complex windows (flattened to vectors):
/// `(2|<wx,wy>| + K) / (||wx||^2 + ||wy||^2 + K)`.
pub fn cwssim_window(wx: &Array2<Complex64>, wy: &Array2<Complex64>, k: f64) -> Result<f64> {
    if wx.dim() != wy.dim() {
        return Err(TexanomError::Contract(format!(
            "window shapes differ: {:?} vs {:?}",
            wx.dim(),
            wy.dim()
        )));
    }
    if k <= 0.0 {
        return Err(TexanomError::Config("K must be positive".into()));
    }
    let mut inner = Complex64::new(0.0, 0.0);
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in wx.iter().zip(wy.iter()) {
        inner += a * b.conj();
        nx += a.norm_sqr();
        ny += b.norm_sqr();
    }
    Ok((2.0 * inner.norm() + k) / (nx + ny + k))
}

fn grid_len(n: usize, r: usize, stride: usize) -> usize {
    (n - r) / stride + 1
}

/// Sliding-window box sums of `a` with window `r` and the given stride.
/// Separable two-pass direct summation.
fn box_sums(a: &Array2<f64>, r: usize, stride: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let (gh, gw) = (grid_len(h, r, stride), grid_len(w, r, stride));
    // vertical sums at every row start, then horizontal sums on the grid
    let mut vert = Array2::<f64>::zeros((h - r + 1, w));
    for i in 0..h - r + 1 {
        for j in 0..w {
            let mut s = 0.0;
            for u in 0..r {
                s += a[[i + u, j]];
            }
            vert[[i, j]] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((gh, gw));
    for gi in 0..gh {
        for gj in 0..gw {
            let (i, j) = (gi * stride, gj * stride);
            let mut s = 0.0;
            for v in 0..r {
                s += vert[[i, j + v]];
            }
            out[[gi, gj]] = s;
        }
    }
    out
}

/// Transpose of [`box_sums`]: spreads each window value back over the pixels
/// the window covers.
fn box_scatter(grid: &Array2<f64>, shape: (usize, usize), r: usize, stride: usize) -> Array2<f64> {
    let (h, w) = shape;
    let (gh, gw) = grid.dim();
    let mut mid = Array2::<f64>::zeros((gh, w));
    for gi in 0..gh {
        for gj in 0..gw {
            let v = grid[[gi, gj]];
            for dv in 0..r {
                mid[[gi, gj * stride + dv]] += v;
            }
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for gi in 0..gh {
        for j in 0..w {
            let v = mid[[gi, j]];
            for du in 0..r {
                out[[gi * stride + du, j]] += v;
            }
        }
    }
    out
}

/// Per-window statistics shared by the score map and the gradient.
struct WindowStats {
    inner_re: Array2<f64>,
    inner_im: Array2<f64>,
    norm_x: Array2<f64>,
    norm_y: Array2<f64>,
}

fn window_stats(
    xs: &Array2<Complex64>,
    ys: &Array2<Complex64>,
    cfg: &CwssimConfig,
) -> Result<WindowStats> {
    cfg.validate()?;
    if xs.dim() != ys.dim() {
        return Err(TexanomError::Contract(format!(
            "subband shapes differ: {:?} vs {:?}",
            xs.dim(),
            ys.dim()
        )));
    }
    let (h, w) = xs.dim();
    let r = cfg.window_size;
    if h < r || w < r {
        return Err(TexanomError::Degenerate(format!(
            "subband {h}x{w} smaller than window {r}"
        )));
    }
    let mut pr = Array2::<f64>::zeros((h, w));
    let mut pi = Array2::<f64>::zeros((h, w));
    let mut ax = Array2::<f64>::zeros((h, w));
    let mut ay = Array2::<f64>::zeros((h, w));
    for ((i, j), a) in xs.indexed_iter() {
        let b = ys[[i, j]];
        let p = a * b.conj();
        pr[[i, j]] = p.re;
        pi[[i, j]] = p.im;
        ax[[i, j]] = a.norm_sqr();
        ay[[i, j]] = b.norm_sqr();
    }
    Ok(WindowStats {
        inner_re: box_sums(&pr, r, cfg.stride),
        inner_im: box_sums(&pi, r, cfg.stride),
        norm_x: box_sums(&ax, r, cfg.stride),
        norm_y: box_sums(&ay, r, cfg.stride),
    })
}

/// CW-SSIM score over every stride-spaced window of a subband pair.
pub fn cwssim_subband_map(
    xs: &Array2<Complex64>,
    ys: &Array2<Complex64>,
    cfg: &CwssimConfig,
) -> Result<SimilarityMap> {
    let st = window_stats(xs, ys, cfg)?;
    let scores = Array2::from_shape_fn(st.inner_re.dim(), |(i, j)| {
        let p = (st.inner_re[[i, j]].powi(2) + st.inner_im[[i, j]].powi(2)).sqrt();
        (2.0 * p + cfg.k) / (st.norm_x[[i, j]] + st.norm_y[[i, j]] + cfg.k)
    });
    Ok(SimilarityMap {
        scores,
        window_size: cfg.window_size,
        stride: cfg.stride,
        subband_shape: xs.dim(),
    })
}

/// CW-SSIM loss between two patches: one minus the mean over subbands of the
/// mean window score.
pub fn cwssim_loss(
    x: &Array2<f64>,
    y: &Array2<f64>,
    decomposer: &Decomposer,
    cfg: &CwssimConfig,
) -> Result<f64> {
    let dx = decomposer.decompose(x)?;
    let dy = decomposer.decompose(y)?;
    cwssim_loss_of_decompositions(&dx, &dy, cfg)
}

pub fn cwssim_loss_of_decompositions(
    dx: &SubbandDecomposition,
    dy: &SubbandDecomposition,
    cfg: &CwssimConfig,
) -> Result<f64> {
    let mut acc = 0.0;
    for (sx, sy) in dx.subbands.iter().zip(&dy.subbands) {
        acc += cwssim_subband_map(&sx.coeffs, &sy.coeffs, cfg)?.mean();
    }
    Ok(1.0 - acc / dx.subbands.len() as f64)
}

/// Exact gradient of [`cwssim_loss`] with respect to `y`, obtained by
/// differentiating the window index analytically per subband and pulling the
/// cotangent back through the decomposition adjoint.
pub fn cwssim_loss_grad(
    x: &Array2<f64>,
    y: &Array2<f64>,
    decomposer: &Decomposer,
    cfg: &CwssimConfig,
) -> Result<Array2<f64>> {
    let dx = decomposer.decompose(x)?;
    let dy = decomposer.decompose(y)?;
    let cot = cwssim_cotangent(&dx, &dy, cfg)?;
    decomposer.adjoint(&cot)
}

/// Cotangent of the loss with respect to the subband coefficients of `y`.
pub fn cwssim_cotangent(
    dx: &SubbandDecomposition,
    dy: &SubbandDecomposition,
    cfg: &CwssimConfig,
) -> Result<SubbandDecomposition> {
    let m = dx.subbands.len() as f64;
    let r = cfg.window_size;
    let mut cot = dy.clone();
    for ((sx, sy), sc) in dx.subbands.iter().zip(&dy.subbands).zip(&mut cot.subbands) {
        let st = window_stats(&sx.coeffs, &sy.coeffs, cfg)?;
        let (gh, gw) = st.inner_re.dim();
        let weight = 1.0 / (m * (gh * gw) as f64);
        // loss = 1 - sum_l weight * (2|p_l| + K)/(den_l), so per window:
        //   d(loss)/d(wy_i) = -weight * (2 conj(p)/(den |p|)) x_i
        //                     + weight * (2(2|p|+K)/den^2) y_i
        let mut alpha_re = Array2::<f64>::zeros((gh, gw));
        let mut alpha_im = Array2::<f64>::zeros((gh, gw));
        let mut beta = Array2::<f64>::zeros((gh, gw));
        for gi in 0..gh {
            for gj in 0..gw {
                let p = Complex64::new(st.inner_re[[gi, gj]], st.inner_im[[gi, gj]]);
                let den = st.norm_x[[gi, gj]] + st.norm_y[[gi, gj]] + cfg.k;
                let pn = p.norm();
                if pn > 0.0 {
                    // subgradient 0 at p = 0
                    let a = p.conj() * (weight * 2.0 / (den * pn));
                    alpha_re[[gi, gj]] = a.re;
                    alpha_im[[gi, gj]] = a.im;
                }
                beta[[gi, gj]] = weight * 2.0 * (2.0 * pn + cfg.k) / (den * den);
            }
        }
        let shape = sx.coeffs.dim();
        let s_ar = box_scatter(&alpha_re, shape, r, cfg.stride);
        let s_ai = box_scatter(&alpha_im, shape, r, cfg.stride);
        let s_b = box_scatter(&beta, shape, r, cfg.stride);
        for ((i, j), c) in sc.coeffs.indexed_iter_mut() {
            let alpha = Complex64::new(s_ar[[i, j]], s_ai[[i, j]]);
            *c = -alpha * sx.coeffs[[i, j]] + s_b[[i, j]] * sy.coeffs[[i, j]];
        }
    }
    Ok(cot)
}

/// Mean squared error between two equally shaped patches.
pub fn mse_loss(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(TexanomError::Contract(format!(
            "patch shapes differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let n = x.len() as f64;
    Ok(x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Gradient of [`mse_loss`] with respect to `y`: `2 (y - x) / N`.
pub fn mse_grad(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.dim() != y.dim() {
        return Err(TexanomError::Contract("patch shapes differ".into()));
    }
    let n = x.len() as f64;
    Ok(Array2::from_shape_fn(x.dim(), |idx| 2.0 * (y[idx] - x[idx]) / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filtering.
fn gauss_filter_valid(a: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let r = k.len();
    let mut vert = Array2::<f64>::zeros((h - r + 1, w));
    for i in 0..h - r + 1 {
        for j in 0..w {
            vert[[i, j]] = (0..r).map(|u| k[u] * a[[i + u, j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h - r + 1, w - r + 1));
    for i in 0..h - r + 1 {
        for j in 0..w - r + 1 {
            out[[i, j]] = (0..r).map(|v| k[v] * vert[[i, j + v]]).sum();
        }
    }
    out
}

/// Transpose of [`gauss_filter_valid`].
fn gauss_scatter(g: &Array2<f64>, shape: (usize, usize), k: &[f64]) -> Array2<f64> {
    let (gh, gw) = g.dim();
    let r = k.len();
    let (h, w) = shape;
    let mut mid = Array2::<f64>::zeros((gh, w));
    for i in 0..gh {
        for j in 0..gw {
            let v = g[[i, j]];
            for dv in 0..r {
                mid[[i, j + dv]] += v * k[dv];
            }
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..gh {
        for j in 0..w {
            let v = mid[[i, j]];
            for du in 0..r {
                out[[i + du, j]] += v * k[du];
            }
        }
    }
    out
}

struct SsimStats {
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    var_x: Array2<f64>,
    var_y: Array2<f64>,
    cov: Array2<f64>,
}

fn ssim_stats(x: &Array2<f64>, y: &Array2<f64>, cfg: &SsimConfig) -> Result<SsimStats> {
    if x.dim() != y.dim() {
        return Err(TexanomError::Contract("patch shapes differ".into()));
    }
    let (h, w) = x.dim();
    if h < cfg.window_size || w < cfg.window_size {
        return Err(TexanomError::Degenerate(format!(
            "patch {h}x{w} smaller than SSIM window {}",
            cfg.window_size
        )));
    }
    let k = gaussian_kernel_1d(cfg.window_size, cfg.sigma);
    let mu_x = gauss_filter_valid(x, &k);
    let mu_y = gauss_filter_valid(y, &k);
    let xx = gauss_filter_valid(&(x * x), &k);
    let yy = gauss_filter_valid(&(y * y), &k);
    let xy = gauss_filter_valid(&(x * y), &k);
    let var_x = &xx - &(&mu_x * &mu_x);
    let var_y = &yy - &(&mu_y * &mu_y);
    let cov = &xy - &(&mu_x * &mu_y);
    Ok(SsimStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    })
}

/// Mean local SSIM with a Gaussian window over valid positions.
pub fn ssim_index(x: &Array2<f64>, y: &Array2<f64>, cfg: &SsimConfig) -> Result<f64> {
    let st = ssim_stats(x, y, cfg)?;
    let mut acc = 0.0;
    for idx in ndarray::indices(st.mu_x.dim()) {
        let idx = (idx.0, idx.1);
        let l = (2.0 * st.mu_x[idx] * st.mu_y[idx] + cfg.c1)
            / (st.mu_x[idx].powi(2) + st.mu_y[idx].powi(2) + cfg.c1);
        let cs = (2.0 * st.cov[idx] + cfg.c2) / (st.var_x[idx] + st.var_y[idx] + cfg.c2);
        acc += l * cs;
    }
    Ok(acc / st.mu_x.len() as f64)
}

pub fn ssim_loss(x: &Array2<f64>, y: &Array2<f64>, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim_index(x, y, cfg)?)
}

/// Gradient of [`ssim_loss`] with respect to `y`.
pub fn ssim_grad(x: &Array2<f64>, y: &Array2<f64>, cfg: &SsimConfig) -> Result<Array2<f64>> {
    let st = ssim_stats(x, y, cfg)?;
    let k = gaussian_kernel_1d(cfg.window_size, cfg.sigma);
    let dim = st.mu_x.dim();
    let n = (dim.0 * dim.1) as f64;
    // Per-window partials with respect to mu_y, w*(y^2) and w*(x*y); the
    // sigma terms are chained through sigma_y^2 = w*(y^2) - mu_y^2 and
    // sigma_xy = w*(x*y) - mu_x*mu_y.
    let mut d_mu = Array2::<f64>::zeros(dim);
    let mut d_y2 = Array2::<f64>::zeros(dim);
    let mut d_xy = Array2::<f64>::zeros(dim);
    for idx in ndarray::indices(dim) {
        let idx = (idx.0, idx.1);
        let (mx, my) = (st.mu_x[idx], st.mu_y[idx]);
        let nl = 2.0 * mx * my + cfg.c1;
        let dl = mx * mx + my * my + cfg.c1;
        let nc = 2.0 * st.cov[idx] + cfg.c2;
        let dc = st.var_x[idx] + st.var_y[idx] + cfg.c2;
        let l = nl / dl;
        let cs = nc / dc;
        let dl_dmy = (2.0 * mx * dl - nl * 2.0 * my) / (dl * dl);
        let dcs_dcov = 2.0 / dc;
        let dcs_dvary = -nc / (dc * dc);
        d_mu[idx] = cs * dl_dmy + l * (dcs_dvary * (-2.0 * my) + dcs_dcov * (-mx));
        d_y2[idx] = l * dcs_dvary;
        d_xy[idx] = l * dcs_dcov;
    }
    let s_mu = gauss_scatter(&d_mu, x.dim(), &k);
    let s_y2 = gauss_scatter(&d_y2, x.dim(), &k);
    let s_xy = gauss_scatter(&d_xy, x.dim(), &k);
    // loss = 1 - mean(ssim), hence the -1/n factor
    Ok(Array2::from_shape_fn(x.dim(), |idx| {
        -(s_mu[idx] + s_y2[idx] * 2.0 * y[idx] + s_xy[idx] * x[idx]) / n
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::DecomposerConfig;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_complex(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        })
    }

    fn rand_real(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.gen::<f64>())
    }

    fn toy_decomposer(n: usize) -> Decomposer {
        Decomposer::new(DecomposerConfig {
            orientations: 4,
            scales: 3,
            input_size: n,
        })
        .unwrap()
    }

    #[test]
    fn window_identical_inputs_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_complex(&mut rng, 7, 7);
        assert_eq!(cwssim_window(&w, &w, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn window_global_phase_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w = rand_complex(&mut rng, 7, 7);
            let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let rotated = w.mapv(|c| c * Complex64::from_polar(1.0, theta));
            let s = cwssim_window(&w, &rotated, 0.01).unwrap();
            assert!((s - 1.0).abs() < 1e-9, "phase invariance broken: {s}");
        }
    }

    #[test]
    fn window_direct_substitution_values() {
        // unit-norm wx against zero wy
        let mut wx = Array2::<Complex64>::zeros((1, 2));
        wx[[0, 0]] = Complex64::new(1.0, 0.0);
        let wy = Array2::<Complex64>::zeros((1, 2));
        let s = cwssim_window(&wx, &wy, 0.01).unwrap();
        assert!((s - 0.01 / 1.01).abs() < 1e-15);
        // wy = 2 wx
        let wy2 = wx.mapv(|c| c * 2.0);
        let s2 = cwssim_window(&wx, &wy2, 0.01).unwrap();
        assert!((s2 - 4.01 / 5.01).abs() < 1e-15);
    }

    #[test]
    fn window_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = rand_complex(&mut rng, 5, 5);
            let b = rand_complex(&mut rng, 5, 5);
            let ab = cwssim_window(&a, &b, 0.01).unwrap();
            let ba = cwssim_window(&b, &a, 0.01).unwrap();
            assert!((ab - ba).abs() < 1e-15);
        }
    }

    #[test]
    fn subband_map_grid_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_complex(&mut rng, 8, 8);
        let b = rand_complex(&mut rng, 8, 8);
        let map = cwssim_subband_map(&a, &b, &CwssimConfig::default()).unwrap();
        assert_eq!(map.scores.dim(), (2, 2));
    }

    #[test]
    fn subband_map_identical_inputs_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_complex(&mut rng, 12, 10);
        let map = cwssim_subband_map(&a, &a, &CwssimConfig::default()).unwrap();
        for &s in map.scores.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subband_map_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = CwssimConfig {
            window_size: 7,
            k: 0.01,
            stride: 2,
        };
        let a = rand_complex(&mut rng, 15, 13);
        let b = rand_complex(&mut rng, 15, 13);
        let map = cwssim_subband_map(&a, &b, &cfg).unwrap();
        for gi in 0..map.scores.nrows() {
            for gj in 0..map.scores.ncols() {
                let (i, j) = (gi * cfg.stride, gj * cfg.stride);
                let wa = a.slice(ndarray::s![i..i + 7, j..j + 7]).to_owned();
                let wb = b.slice(ndarray::s![i..i + 7, j..j + 7]).to_owned();
                let naive = cwssim_window(&wa, &wb, cfg.k).unwrap();
                assert!(
                    (map.scores[[gi, gj]] - naive).abs() < 1e-12,
                    "window ({gi},{gj}) {} vs {naive}",
                    map.scores[[gi, gj]]
                );
            }
        }
    }

    #[test]
    fn subband_smaller_than_window_is_degenerate() {
        let a = Array2::<Complex64>::zeros((5, 5));
        match cwssim_subband_map(&a, &a, &CwssimConfig::default()) {
            Err(TexanomError::Degenerate(_)) => {}
            other => panic!("expected Degenerate, got {other:?}"),
        }
    }

    #[test]
    fn loss_zero_for_identical_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = toy_decomposer(32);
        let x = rand_real(&mut rng, 32, 32);
        let loss = cwssim_loss(&x, &x, &d, &CwssimConfig::default()).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_near_one_against_zero_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = toy_decomposer(32);
        let x = rand_real(&mut rng, 32, 32);
        let zero = Array2::zeros((32, 32));
        let loss = cwssim_loss(&x, &zero, &d, &CwssimConfig::default()).unwrap();
        assert!(loss > 0.9, "loss {loss}");
    }

    #[test]
    fn loss_matches_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = toy_decomposer(32);
        let cfg = CwssimConfig::default();
        let x = rand_real(&mut rng, 32, 32);
        let y = rand_real(&mut rng, 32, 32);
        let fast = cwssim_loss(&x, &y, &d, &cfg).unwrap();
        // straight-line recomputation: decompose, double loop, means
        let dx = d.decompose(&x).unwrap();
        let dy = d.decompose(&y).unwrap();
        let mut subband_means = Vec::new();
        for (sx, sy) in dx.subbands.iter().zip(&dy.subbands) {
            let (h, w) = sx.coeffs.dim();
            let mut scores = Vec::new();
            for i in 0..=h - 7 {
                for j in 0..=w - 7 {
                    let wa = sx.coeffs.slice(ndarray::s![i..i + 7, j..j + 7]).to_owned();
                    let wb = sy.coeffs.slice(ndarray::s![i..i + 7, j..j + 7]).to_owned();
                    scores.push(cwssim_window(&wa, &wb, cfg.k).unwrap());
                }
            }
            subband_means.push(scores.iter().sum::<f64>() / scores.len() as f64);
        }
        let naive = 1.0 - subband_means.iter().sum::<f64>() / subband_means.len() as f64;
        assert!((fast - naive).abs() < 1e-12, "{fast} vs {naive}");
    }

    #[test]
    fn loss_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = toy_decomposer(32);
        let cfg = CwssimConfig::default();
        let x = rand_real(&mut rng, 32, 32);
        let y = rand_real(&mut rng, 32, 32);
        let a = cwssim_loss(&x, &y, &d, &cfg).unwrap();
        let b = cwssim_loss(&y, &x, &d, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn finite_diff_grad<F: Fn(&Array2<f64>) -> f64>(
        y: &Array2<f64>,
        f: F,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::<f64>::zeros(y.dim());
        for idx in ndarray::indices(y.dim()) {
            let idx = (idx.0, idx.1);
            let mut yp = y.clone();
            yp[idx] += h;
            let mut ym = y.clone();
            ym[idx] -= h;
            g[idx] = (f(&yp) - f(&ym)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
        let scale = numeric.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
        analytic
            .iter()
            .zip(numeric.iter())
            .fold(0f64, |m, (a, n)| m.max((a - n).abs() / scale))
    }

    #[test]
    fn cwssim_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = toy_decomposer(32);
        let cfg = CwssimConfig::default();
        let x = rand_real(&mut rng, 32, 32);
        let y = rand_real(&mut rng, 32, 32);
        let analytic = cwssim_loss_grad(&x, &y, &d, &cfg).unwrap();
        let numeric = finite_diff_grad(&y, |yy| cwssim_loss(&x, yy, &d, &cfg).unwrap(), 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn cwssim_grad_at_stationary_point_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = toy_decomposer(32);
        let cfg = CwssimConfig::default();
        let x = rand_real(&mut rng, 32, 32);
        let analytic = cwssim_loss_grad(&x, &x, &d, &cfg).unwrap();
        let numeric = finite_diff_grad(&x, |yy| cwssim_loss(&x, yy, &d, &cfg).unwrap(), 1e-5);
        // the index is maximal at y = x, so both sides should vanish; compare
        // absolutely since there is no gradient magnitude to normalize by
        let err = analytic
            .iter()
            .zip(numeric.iter())
            .fold(0f64, |m, (a, n)| m.max((a - n).abs()));
        assert!(err < 1e-6, "max abs error {err}");
    }

    #[test]
    fn batch_grad_is_sum_of_per_patch_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = toy_decomposer(32);
        let cfg = CwssimConfig::default();
        let x1 = rand_real(&mut rng, 32, 32);
        let x2 = rand_real(&mut rng, 32, 32);
        let y = rand_real(&mut rng, 32, 32);
        let g1 = cwssim_loss_grad(&x1, &y, &d, &cfg).unwrap();
        let g2 = cwssim_loss_grad(&x2, &y, &d, &cfg).unwrap();
        // differentiation is linear: summing losses sums gradients
        let sum = &g1 + &g2;
        let direct = &cwssim_loss_grad(&x1, &y, &d, &cfg).unwrap()
            + &cwssim_loss_grad(&x2, &y, &d, &cfg).unwrap();
        for (a, b) in sum.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_basics() {
        let x = Array2::<f64>::zeros((4, 4));
        let y = Array2::from_elem((4, 4), 0.5);
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        assert!((mse_loss(&x, &y).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mse_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_real(&mut rng, 6, 6);
        let y = rand_real(&mut rng, 6, 6);
        let analytic = mse_grad(&x, &y).unwrap();
        let numeric = finite_diff_grad(&y, |yy| mse_loss(&x, yy).unwrap(), 1e-6);
        assert!(max_rel_err(&analytic, &numeric) < 1e-8);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_real(&mut rng, 16, 16);
        let s = ssim_index(&x, &x, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_patches_closed_form() {
        let x = Array2::from_elem((16, 16), 0.5);
        let y = Array2::from_elem((16, 16), 0.25);
        let cfg = SsimConfig::default();
        let s = ssim_index(&x, &y, &cfg).unwrap();
        let expect = (2.0 * 0.5 * 0.25 + cfg.c1) / (0.25 + 0.0625 + cfg.c1);
        assert!((s - expect).abs() < 1e-10, "{s} vs {expect}");
    }

    #[test]
    fn ssim_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = SsimConfig::default();
        let x = rand_real(&mut rng, 14, 14);
        let y = rand_real(&mut rng, 14, 14);
        let analytic = ssim_grad(&x, &y, &cfg).unwrap();
        let numeric = finite_diff_grad(&y, |yy| ssim_loss(&x, yy, &cfg).unwrap(), 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn ssim_small_patch_is_degenerate() {
        let x = Array2::<f64>::zeros((8, 8));
        match ssim_index(&x, &x, &SsimConfig::default()) {
            Err(TexanomError::Degenerate(_)) => {}
            other => panic!("expected Degenerate, got {other:?}"),
        }
    }

    #[test]
    fn cwssim_more_shift_robust_than_ssim() {
        // band-limited random textures, 2-pixel cyclic shift, >= 10 seeds
        let d = toy_decomposer(32);
        let ccfg = CwssimConfig::default();
        let scfg = SsimConfig::default();
        let mut cw_sum = 0.0;
        let mut ss_sum = 0.0;
        let trials = 12;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let noise = rand_real(&mut rng, 32, 32);
            // lowpass by repeated 3x3 box blur with cyclic wrap
            let mut tex = noise;
            for _ in 0..4 {
                let prev = tex.clone();
                for i in 0..32 {
                    for j in 0..32 {
                        let mut s = 0.0;
                        for di in -1i32..=1 {
                            for dj in -1i32..=1 {
                                s += prev[[
                                    ((i as i32 + di).rem_euclid(32)) as usize,
                                    ((j as i32 + dj).rem_euclid(32)) as usize,
                                ]];
                            }
                        }
                        tex[[i, j]] = s / 9.0;
                    }
                }
            }
            let shifted = Array2::from_shape_fn((32, 32), |(i, j)| tex[[(i + 2) % 32, (j + 2) % 32]]);
            cw_sum += 1.0 - cwssim_loss(&tex, &shifted, &d, &ccfg).unwrap();
            ss_sum += ssim_index(&tex, &shifted, &scfg).unwrap();
        }
        let (cw, ss) = (cw_sum / trials as f64, ss_sum / trials as f64);
        assert!(cw >= ss, "CW-SSIM mean {cw} < SSIM mean {ss}");
    }
}
