//! Strided convolution and transposed convolution kernels with their exact
//! backward passes, plus the activations used by the autoencoder.
//!
//! Tensors are `(batch, channels, height, width)`. All layers use kernel 4,
//! stride 2, padding 1, so spatial size exactly halves (conv) or doubles
//! (transposed conv).

use ndarray::{Array1, Array4};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Kernel taps overlapping output pixel `(i, j)`: for each in-bounds tap,
/// `(flat kernel index u*4+v, flat input offset si*width+sj)`.
///
/// The hot loops below work on flat slices with per-(channel pair) 16-tap
/// kernels copied to the stack; ndarray's 4-D indexed access is far too slow
/// for the training inner loop.
#[inline]
fn taps(i: usize, j: usize, h: usize, wd: usize, out: &mut [(usize, usize); 16]) -> usize {
    let mut n = 0;
    for u in 0..KERNEL {
        let si = (i * STRIDE + u).wrapping_sub(PAD);
        if si >= h {
            continue;
        }
        for v in 0..KERNEL {
            let sj = (j * STRIDE + v).wrapping_sub(PAD);
            if sj >= wd {
                continue;
            }
            out[n] = (u * KERNEL + v, si * wd + sj);
            n += 1;
        }
    }
    n
}

#[inline]
fn copy_kernel(w: &[f64], o: usize, c: usize, c_in: usize) -> [f64; 16] {
    let base = (o * c_in + c) * KERNEL * KERNEL;
    let mut k = [0.0; 16];
    k.copy_from_slice(&w[base..base + 16]);
    k
}

/// Strided conv forward. Weights are `(out_ch, in_ch, 4, 4)`.
pub fn conv_forward(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array4<f64> {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, _, _) = w.dim();
    let (oh, ow) = (h / STRIDE, wd / STRIDE);
    let mut out = Array4::<f64>::zeros((n, c_out, oh, ow));
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    let mut tap_buf = [(0usize, 0usize); 16];
    for bn in 0..n {
        for o in 0..c_out {
            let out_base = (bn * c_out + o) * oh * ow;
            os[out_base..out_base + oh * ow].fill(b[o]);
            for c in 0..c_in {
                let k = copy_kernel(ws, o, c, c_in);
                let x_base = (bn * c_in + c) * h * wd;
                for i in 0..oh {
                    // interior columns share the full 16-tap pattern
                    let row0 = x_base + (i * STRIDE) * wd;
                    let full_rows = i > 0 && i * STRIDE + KERNEL - PAD <= h;
                    for j in 0..ow {
                        let idx = out_base + i * ow + j;
                        if full_rows && j > 0 && j * STRIDE + KERNEL - PAD <= wd {
                            let base = row0 - PAD * wd + (j * STRIDE - PAD);
                            let mut acc = 0.0;
                            for u in 0..KERNEL {
                                let r = base + u * wd;
                                let xr = &xs[r..r + KERNEL];
                                let kr = &k[u * KERNEL..u * KERNEL + KERNEL];
                                acc += kr[0] * xr[0] + kr[1] * xr[1] + kr[2] * xr[2] + kr[3] * xr[3];
                            }
                            os[idx] += acc;
                        } else {
                            let nt = taps(i, j, h, wd, &mut tap_buf);
                            let mut acc = 0.0;
                            for &(ki, xi) in &tap_buf[..nt] {
                                acc += k[ki] * xs[x_base + xi];
                            }
                            os[idx] += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv_forward`]. Returns `(grad_x, grad_w, grad_b)`.
pub fn conv_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    g: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, _, _) = w.dim();
    let (oh, ow) = (h / STRIDE, wd / STRIDE);
    let mut gx = Array4::<f64>::zeros(x.dim());
    let mut gw = Array4::<f64>::zeros(w.dim());
    let mut gb = Array1::<f64>::zeros(c_out);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    let gws = gw.as_slice_mut().unwrap();
    let mut tap_buf = [(0usize, 0usize); 16];
    for bn in 0..n {
        for o in 0..c_out {
            let g_base = (bn * c_out + o) * oh * ow;
            gb[o] += gs[g_base..g_base + oh * ow].iter().sum::<f64>();
            for c in 0..c_in {
                let k = copy_kernel(ws, o, c, c_in);
                let mut kw = [0.0f64; 16];
                let x_base = (bn * c_in + c) * h * wd;
                for i in 0..oh {
                    let row0 = x_base + (i * STRIDE) * wd;
                    let full_rows = i > 0 && i * STRIDE + KERNEL - PAD <= h;
                    for j in 0..ow {
                        let gz = gs[g_base + i * ow + j];
                        if full_rows && j > 0 && j * STRIDE + KERNEL - PAD <= wd {
                            let base = row0 - PAD * wd + (j * STRIDE - PAD);
                            for u in 0..KERNEL {
                                let r = base + u * wd;
                                for v in 0..KERNEL {
                                    kw[u * KERNEL + v] += gz * xs[r + v];
                                    gxs[r + v] += gz * k[u * KERNEL + v];
                                }
                            }
                        } else {
                            let nt = taps(i, j, h, wd, &mut tap_buf);
                            for &(ki, xi) in &tap_buf[..nt] {
                                kw[ki] += gz * xs[x_base + xi];
                                gxs[x_base + xi] += gz * k[ki];
                            }
                        }
                    }
                }
                let w_base = (o * c_in + c) * KERNEL * KERNEL;
                for t in 0..16 {
                    gws[w_base + t] += kw[t];
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Transposed conv forward (spatial size doubles). Weights `(out_ch, in_ch, 4, 4)`.
pub fn conv_transpose_forward(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>) -> Array4<f64> {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, _, _) = w.dim();
    let (oh, ow) = (h * STRIDE, wd * STRIDE);
    let mut out = Array4::<f64>::zeros((n, c_out, oh, ow));
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    let mut tap_buf = [(0usize, 0usize); 16];
    for bn in 0..n {
        for o in 0..c_out {
            let out_base = (bn * c_out + o) * oh * ow;
            os[out_base..out_base + oh * ow].fill(b[o]);
            for c in 0..c_in {
                let k = copy_kernel(ws, o, c, c_in);
                let x_base = (bn * c_in + c) * h * wd;
                for i in 0..h {
                    let full_rows = i > 0 && i * STRIDE + KERNEL - PAD <= oh;
                    for j in 0..wd {
                        let xv = xs[x_base + i * wd + j];
                        if full_rows && j > 0 && j * STRIDE + KERNEL - PAD <= ow {
                            let base = out_base + (i * STRIDE - PAD) * ow + (j * STRIDE - PAD);
                            for u in 0..KERNEL {
                                let r = base + u * ow;
                                for v in 0..KERNEL {
                                    os[r + v] += k[u * KERNEL + v] * xv;
                                }
                            }
                        } else {
                            let nt = taps(i, j, oh, ow, &mut tap_buf);
                            for &(ki, oi) in &tap_buf[..nt] {
                                os[out_base + oi] += k[ki] * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv_transpose_forward`].
pub fn conv_transpose_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    g: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, _, _) = w.dim();
    let (oh, ow) = (h * STRIDE, wd * STRIDE);
    let mut gx = Array4::<f64>::zeros(x.dim());
    let mut gw = Array4::<f64>::zeros(w.dim());
    let mut gb = Array1::<f64>::zeros(c_out);
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    let gws = gw.as_slice_mut().unwrap();
    let mut tap_buf = [(0usize, 0usize); 16];
    for bn in 0..n {
        for o in 0..c_out {
            let g_base = (bn * c_out + o) * oh * ow;
            gb[o] += gs[g_base..g_base + oh * ow].iter().sum::<f64>();
            for c in 0..c_in {
                let k = copy_kernel(ws, o, c, c_in);
                let mut kw = [0.0f64; 16];
                let x_base = (bn * c_in + c) * h * wd;
                for i in 0..h {
                    let full_rows = i > 0 && i * STRIDE + KERNEL - PAD <= oh;
                    for j in 0..wd {
                        let xv = xs[x_base + i * wd + j];
                        let mut acc = 0.0;
                        if full_rows && j > 0 && j * STRIDE + KERNEL - PAD <= ow {
                            let base = g_base + (i * STRIDE - PAD) * ow + (j * STRIDE - PAD);
                            for u in 0..KERNEL {
                                let r = base + u * ow;
                                let gr = &gs[r..r + KERNEL];
                                for v in 0..KERNEL {
                                    acc += gr[v] * k[u * KERNEL + v];
                                    kw[u * KERNEL + v] += gr[v] * xv;
                                }
                            }
                        } else {
                            let nt = taps(i, j, oh, ow, &mut tap_buf);
                            for &(ki, oi) in &tap_buf[..nt] {
                                let gz = gs[g_base + oi];
                                acc += gz * k[ki];
                                kw[ki] += gz * xv;
                            }
                        }
                        gxs[x_base + i * wd + j] += acc;
                    }
                }
                let w_base = (o * c_in + c) * KERNEL * KERNEL;
                for t in 0..16 {
                    gws[w_base + t] += kw[t];
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn leaky_relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Derivative through leaky-relu using the forward output (sign-preserving).
pub fn leaky_relu_backward(out: &Array4<f64>, g: &Array4<f64>) -> Array4<f64> {
    let mut gx = g.clone();
    gx.zip_mut_with(out, |gv, &ov| {
        if ov <= 0.0 {
            *gv *= LEAKY_SLOPE;
        }
    });
    gx
}

pub fn sigmoid(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(out: &Array4<f64>, g: &Array4<f64>) -> Array4<f64> {
    let mut gx = g.clone();
    gx.zip_mut_with(out, |gv, &ov| *gv *= ov * (1.0 - ov));
    gx
}
