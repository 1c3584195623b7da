//! 3-D convolution and its stride-2 transposed counterpart, lowered to
//! matrix products via im2col.

use super::gemm::{gemm, MatRef};
use crate::par;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Gradients of a convolution with respect to input, weight and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: [usize; 3],
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn kvol(&self) -> usize {
        self.k.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.kvol()
    }

    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }
}

const AXES: [&str; 3] = ["depth", "height", "width"];

fn geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "conv3d input must be [C, D, H, W]".into(),
        });
    }
    if w.rank() != 5 {
        return Err(Error::InvalidShape {
            shape: w.shape().to_vec(),
            reason: "conv3d weight must be [C_out, C_in, kd, kh, kw]".into(),
        });
    }
    if stride == 0 {
        return Err(Error::ConfigInvalid("stride must be >= 1".into()));
    }
    let ws = w.shape();
    let cin = x.shape()[0];
    if ws[1] != cin {
        return Err(Error::shape("conv3d input channels", &[ws[1]], &[cin]));
    }
    let inp = x.spatial();
    let k = [ws[2], ws[3], ws[4]];
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = inp[a] + 2 * pad;
        if padded < k[a] {
            return Err(Error::ShapeMismatch {
                what: format!("conv3d {} axis: kernel larger than padded input", AXES[a]),
                expected: vec![k[a]],
                actual: vec![padded],
            });
        }
        out[a] = (padded - k[a]) / stride + 1;
    }
    Ok(Geometry {
        cin,
        cout: ws[0],
        k,
        stride,
        pad,
        inp,
        out,
    })
}

/// Unfolds `x` into a `(C_in·kd·kh·kw) × (D'·H'·W')` column matrix.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let n = g.out_len();
    let mut cols = vec![0.0; g.rows() * n];
    let [kd, kh, kw] = g.k;
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    par::for_each_chunk_mut(&mut cols, n, |row, dst| {
        let ci = row / (kd * kh * kw);
        let r = row % (kd * kh * kw);
        let (dz, dy, dx) = (r / (kh * kw), (r / kw) % kh, r % kw);
        let src = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for oz in 0..od {
            let iz = (oz * g.stride + dz) as isize - g.pad as isize;
            if iz < 0 || iz >= id as isize {
                continue;
            }
            for oy in 0..oh {
                let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                let srow = &src[(iz as usize * ih + iy as usize) * iw..][..iw];
                let drow = &mut dst[(oz * oh + oy) * ow..][..ow];
                for (ox, d) in drow.iter_mut().enumerate() {
                    let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                    if ix >= 0 && ix < iw as isize {
                        *d = srow[ix as usize];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let n = g.out_len();
    let in_len = g.in_len();
    let kvol = g.kvol();
    let [_, kh, kw] = g.k;
    let [id, ih, iw] = g.inp;
    let [od, oh, ow] = g.out;
    let mut grad = vec![0.0; g.cin * in_len];
    par::for_each_chunk_mut(&mut grad, in_len, |ci, dst| {
        for r in 0..kvol {
            let (dz, dy, dx) = (r / (kh * kw), (r / kw) % kh, r % kw);
            let src = &cols[(ci * kvol + r) * n..][..n];
            for oz in 0..od {
                let iz = (oz * g.stride + dz) as isize - g.pad as isize;
                if iz < 0 || iz >= id as isize {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let drow = &mut dst[(iz as usize * ih + iy as usize) * iw..][..iw];
                    let srow = &src[(oz * oh + oy) * ow..][..ow];
                    for (ox, s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix >= 0 && ix < iw as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    });
    grad
}

fn check_bias(b: &Tensor, cout: usize) -> Result<()> {
    if b.shape() != [cout] {
        return Err(Error::shape("conv bias", &[cout], b.shape()));
    }
    Ok(())
}

/// Cross-correlation of `x[C_in,D,H,W]` with `w[C_out,C_in,kd,kh,kw]` plus
/// bias, zero padding `pad` on every side and isotropic `stride`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = geometry(x, w, stride, pad)?;
    check_bias(b, g.cout)?;
    let n = g.out_len();
    let mut out = vec![0.0; g.cout * n];
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x.data(), &g);
        &owned
    };
    gemm(
        g.cout,
        g.rows(),
        n,
        MatRef::rows(w.data(), g.rows()),
        MatRef::rows(cols, n),
        &mut out,
        false,
    );
    for (co, chunk) in out.chunks_mut(n).enumerate() {
        let bias = b.data()[co];
        chunk.iter_mut().for_each(|v| *v += bias);
    }
    Tensor::new(&[g.cout, g.out[0], g.out[1], g.out[2]], out)
}

/// Exact gradients of [`conv3d_forward`].
pub fn conv3d_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor, stride: usize, pad: usize) -> Result<ConvGrads> {
    let g = geometry(x, w, stride, pad)?;
    let expect = [g.cout, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != expect {
        return Err(Error::shape("conv3d grad_out", &expect, grad_out.shape()));
    }
    let n = g.out_len();
    let rows = g.rows();
    let go = grad_out.data();

    let grad_b: Vec<f64> = go.chunks(n).map(|c| c.iter().sum()).collect();

    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x.data(), &g);
        &owned
    };
    let mut grad_w = vec![0.0; g.cout * rows];
    gemm(
        g.cout,
        n,
        rows,
        MatRef::rows(go, n),
        MatRef::transposed(cols, n),
        &mut grad_w,
        false,
    );

    let mut grad_cols = vec![0.0; rows * n];
    gemm(
        rows,
        g.cout,
        n,
        MatRef::transposed(w.data(), rows),
        MatRef::rows(go, n),
        &mut grad_cols,
        false,
    );
    let grad_x = if g.is_pointwise() {
        grad_cols
    } else {
        col2im(&grad_cols, &g)
    };

    Ok(ConvGrads {
        x: Tensor::new(x.shape(), grad_x)?,
        w: Tensor::new(w.shape(), grad_w)?,
        b: Tensor::new(&[g.cout], grad_b)?,
    })
}

fn transpose_geometry(y: &Tensor, w: &Tensor) -> Result<(usize, usize, [usize; 3])> {
    if y.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: y.shape().to_vec(),
            reason: "transposed conv input must be [C, D, H, W]".into(),
        });
    }
    let ws = w.shape();
    if w.rank() != 5 || ws[2..] != [2, 2, 2] {
        return Err(Error::InvalidShape {
            shape: ws.to_vec(),
            reason: "transposed conv weight must be [C_in, C_out, 2, 2, 2]".into(),
        });
    }
    if ws[0] != y.shape()[0] {
        return Err(Error::shape("transposed conv input channels", &[ws[0]], &[y.shape()[0]]));
    }
    Ok((ws[0], ws[1], y.spatial()))
}

/// Stride-2, kernel-2, unpadded transposed convolution: doubles every spatial
/// extent. `w` has shape `[C_in, C_out, 2, 2, 2]`; with zero bias this is the
/// exact adjoint of [`conv3d_forward`] using the same weight tensor, stride 2
/// and no padding.
pub fn conv_transpose3d_forward(y: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, cout, [d, h, wd]) = transpose_geometry(y, w)?;
    check_bias(b, cout)?;
    let n = d * h * wd;
    let rows = cout * 8;
    let mut p = vec![0.0; rows * n];
    gemm(
        rows,
        cin,
        n,
        MatRef::transposed(w.data(), rows),
        MatRef::rows(y.data(), n),
        &mut p,
        false,
    );
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let olen = od * oh * ow;
    let mut out = vec![0.0; cout * olen];
    par::for_each_chunk_mut(&mut out, olen, |co, dst| {
        let bias = b.data()[co];
        for r in 0..8 {
            let (a, bb, c) = (r / 4, (r / 2) % 2, r % 2);
            let src = &p[(co * 8 + r) * n..][..n];
            for z in 0..d {
                for yy in 0..h {
                    let drow = &mut dst[((2 * z + a) * oh + 2 * yy + bb) * ow..][..ow];
                    let srow = &src[(z * h + yy) * wd..][..wd];
                    for (x, s) in srow.iter().enumerate() {
                        drow[2 * x + c] = s + bias;
                    }
                }
            }
        }
    });
    Tensor::new(&[cout, od, oh, ow], out)
}

/// Exact gradients of [`conv_transpose3d_forward`] (the `x` field holds the
/// gradient with respect to the coarse input).
pub fn conv_transpose3d_backward(y: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (cin, cout, [d, h, wd]) = transpose_geometry(y, w)?;
    let expect = [cout, 2 * d, 2 * h, 2 * wd];
    if grad_out.shape() != expect {
        return Err(Error::shape("transposed conv grad_out", &expect, grad_out.shape()));
    }
    let n = d * h * wd;
    let rows = cout * 8;
    let (oh, ow) = (2 * h, 2 * wd);
    let olen = 2 * d * oh * ow;
    let go = grad_out.data();
    let grad_b: Vec<f64> = go.chunks(olen).map(|c| c.iter().sum()).collect();

    // Gather grad_out into the (C_out·8) × N layout produced by the forward gemm.
    let mut gp = vec![0.0; rows * n];
    par::for_each_chunk_mut(&mut gp, n, |row, dst| {
        let (co, r) = (row / 8, row % 8);
        let (a, bb, c) = (r / 4, (r / 2) % 2, r % 2);
        let src = &go[co * olen..][..olen];
        for z in 0..d {
            for yy in 0..h {
                let srow = &src[((2 * z + a) * oh + 2 * yy + bb) * ow..][..ow];
                let drow = &mut dst[(z * h + yy) * wd..][..wd];
                for (x, v) in drow.iter_mut().enumerate() {
                    *v = srow[2 * x + c];
                }
            }
        }
    });

    let mut grad_y = vec![0.0; cin * n];
    gemm(cin, rows, n, MatRef::rows(w.data(), rows), MatRef::rows(&gp, n), &mut grad_y, false);
    let mut grad_w = vec![0.0; cin * rows];
    gemm(
        cin,
        n,
        rows,
        MatRef::rows(y.data(), n),
        MatRef::transposed(&gp, n),
        &mut grad_w,
        false,
    );
    Ok(ConvGrads {
        x: Tensor::new(y.shape(), grad_y)?,
        w: Tensor::new(w.shape(), grad_w)?,
        b: Tensor::new(&[cout], grad_b)?,
    })
}
