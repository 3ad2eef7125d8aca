//! im2col convolution kernels shared by the graph ops.

use super::{gemm_portable, NnError, Real, Tensor};

/// Geometry of a forward convolution from `(c, h, w)` to `(ho, wo)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn conv_geom(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Geom, NnError> {
    if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(NnError::ShapeError(format!("kernel {k} stride {stride} pad {pad} does not fit {h}×{w}")));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    Ok(Geom { c, h, w, k, stride, pad, ho, wo })
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    if let Some(b) = bias {
        let [n, c, h, w] = out.shape;
        for i in 0..n {
            for ch in 0..c {
                let bv = b.data[ch];
                let s = (i * c + ch) * h * w;
                out.data[s..s + h * w].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

fn bias_grad<T: Real>(dout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dout.shape;
    let mut db = Tensor::zeros([1, c, 1, 1]);
    for i in 0..n {
        for ch in 0..c {
            let s = (i * c + ch) * h * w;
            let mut acc = T::ZERO;
            for &v in &dout.data[s..s + h * w] {
                acc += v;
            }
            db.data[ch] += acc;
        }
    }
    db
}

fn check_bias<T>(bias: Option<&Tensor<T>>, channels: usize) -> Result<(), NnError> {
    match bias {
        Some(b) if b.data.len() != channels => {
            Err(NnError::ShapeError(format!("bias has {} entries, expected {channels}", b.data.len())))
        }
        _ => Ok(()),
    }
}

/// Cross-correlation of `x` (N, C, H, W) with `w` (O, C, k, k).
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NnError> {
    conv2d_impl(x, w, bias, stride, pad, false)
}

pub(crate) fn conv2d_impl<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    portable: bool,
) -> Result<Tensor<T>, NnError> {
    let [n, c, h, wd] = x.shape;
    let [o, wc, k, k2] = w.shape;
    if wc != c || k != k2 {
        return Err(NnError::ShapeError(format!("weight {:?} incompatible with input {:?}", w.shape, x.shape)));
    }
    check_bias(bias, o)?;
    let g = conv_geom(c, h, wd, k, stride, pad)?;
    let (rows, cols_n) = (g.rows(), g.cols());
    let mut out = Tensor::zeros([n, o, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * cols_n] };
    for i in 0..n {
        let xn = &x.data[i * c * h * wd..(i + 1) * c * h * wd];
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        let on = &mut out.data[i * o * cols_n..(i + 1) * o * cols_n];
        if portable {
            gemm_portable(o, rows, cols_n, &w.data, rows, 1, b, on, false);
        } else {
            T::gemm(o, rows, cols_n, T::ONE, &w.data, rows as isize, 1, b, cols_n as isize, 1, T::ZERO, on, cols_n as isize, 1);
        }
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, wd] = x.shape;
    let [o, _, k, _] = w.shape;
    let g = conv_geom(c, h, wd, k, stride, pad).expect("validated in forward");
    let (rows, cols_n) = (g.rows(), g.cols());
    let mut dw = Tensor::zeros(w.shape);
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape)) } else { None };
    let mut cols = vec![T::ZERO; rows * cols_n];
    let mut dcols = vec![T::ZERO; rows * cols_n];
    for i in 0..n {
        let xn = &x.data[i * c * h * wd..(i + 1) * c * h * wd];
        let dn = &dout.data[i * o * cols_n..(i + 1) * o * cols_n];
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        T::gemm(o, cols_n, rows, T::ONE, dn, cols_n as isize, 1, b, 1, cols_n as isize, T::ONE, &mut dw.data, rows as isize, 1);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data[i * c * h * wd..(i + 1) * c * h * wd];
            if g.is_pointwise() {
                T::gemm(rows, o, cols_n, T::ONE, &w.data, 1, rows as isize, dn, cols_n as isize, 1, T::ZERO, dxn, cols_n as isize, 1);
            } else {
                T::gemm(rows, o, cols_n, T::ONE, &w.data, 1, rows as isize, dn, cols_n as isize, 1, T::ZERO, &mut dcols, cols_n as isize, 1);
                col2im(&dcols, &g, dxn);
            }
        }
    }
    (dx, dw, bias_grad(dout))
}

fn transpose_geom(x: &[usize; 4], w: &[usize; 4], stride: usize, pad: usize, out_pad: usize) -> Result<Geom, NnError> {
    let [_, ci, h, wd] = *x;
    let [wi, co, k, k2] = *w;
    if wi != ci || k != k2 {
        return Err(NnError::ShapeError(format!("transpose weight {w:?} incompatible with input {x:?}")));
    }
    if out_pad >= stride.max(1) {
        return Err(NnError::ShapeError("output padding must be smaller than the stride".into()));
    }
    let ho = ((h - 1) * stride + k + out_pad).checked_sub(2 * pad);
    let wo = ((wd - 1) * stride + k + out_pad).checked_sub(2 * pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => {
            let g = conv_geom(co, ho, wo, k, stride, pad)?;
            debug_assert_eq!((g.ho, g.wo), (h, wd));
            Ok(g)
        }
        _ => Err(NnError::ShapeError("transpose output would be empty".into())),
    }
}

/// Adjoint of [`conv2d`]: `x` (N, Ci, H, W), `w` (Ci, Co, k, k).
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>, NnError> {
    conv_transpose2d_impl(x, w, bias, stride, pad, out_pad, false)
}

pub(crate) fn conv_transpose2d_impl<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    portable: bool,
) -> Result<Tensor<T>, NnError> {
    let g = transpose_geom(&x.shape, &w.shape, stride, pad, out_pad)?;
    let [n, ci, h, wd] = x.shape;
    let co = w.shape[1];
    check_bias(bias, co)?;
    let (rows, hw) = (g.rows(), h * wd);
    let mut out = Tensor::zeros([n, co, g.h, g.w]);
    let mut cols = vec![T::ZERO; rows * hw];
    for i in 0..n {
        let xn = &x.data[i * ci * hw..(i + 1) * ci * hw];
        if portable {
            gemm_portable(rows, ci, hw, &w.data, 1, rows, xn, &mut cols, false);
        } else {
            T::gemm(rows, ci, hw, T::ONE, &w.data, 1, rows as isize, xn, hw as isize, 1, T::ZERO, &mut cols, hw as isize, 1);
        }
        let on = &mut out.data[i * co * g.h * g.w..(i + 1) * co * g.h * g.w];
        col2im(&cols, &g, on);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = transpose_geom(&x.shape, &w.shape, stride, pad, out_pad).expect("validated in forward");
    let [n, ci, h, wd] = x.shape;
    let co = w.shape[1];
    let (rows, hw) = (g.rows(), h * wd);
    let mut dw = Tensor::zeros(w.shape);
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape)) } else { None };
    let mut cols = vec![T::ZERO; rows * hw];
    for i in 0..n {
        let dn = &dout.data[i * co * g.h * g.w..(i + 1) * co * g.h * g.w];
        im2col(dn, &g, &mut cols);
        let xn = &x.data[i * ci * hw..(i + 1) * ci * hw];
        T::gemm(ci, hw, rows, T::ONE, xn, hw as isize, 1, &cols, 1, hw as isize, T::ONE, &mut dw.data, rows as isize, 1);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data[i * ci * hw..(i + 1) * ci * hw];
            T::gemm(ci, rows, hw, T::ONE, &w.data, rows as isize, 1, &cols, hw as isize, 1, T::ZERO, dxn, hw as isize, 1);
        }
    }
    (dx, dw, bias_grad(dout))
}

/// Mask of shape (O, C, k, k) keeping only taps strictly before the centre
/// in raster order.
pub fn strict_past_mask<T: Real>(out_channels: usize, in_channels: usize, k: usize) -> Tensor<T> {
    let centre = (k / 2) * k + k / 2;
    let mut m = Tensor::zeros([out_channels, in_channels, k, k]);
    for (i, v) in m.data.iter_mut().enumerate() {
        if i % (k * k) < centre {
            *v = T::ONE;
        }
    }
    m
}
