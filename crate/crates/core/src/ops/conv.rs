//! Grouped, dilated, strided 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, Real, Shape4, Tensor4};

/// Stride, padding, dilation and grouping of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeom {
    /// Stride-1 geometry that keeps spatial dims for a `k x k` kernel.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvGeom {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output extent along one axis, or `None` when the dilated kernel does not fit.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let extent = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if stride == 0 || extent > padded {
        return None;
    }
    Some((padded - extent) / stride + 1)
}

/// Weight `(c_out, c_in/groups, k_h, k_w)`, optional per-output-channel bias, and geometry.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
    pub geom: ConvGeom,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Option<Vec<T>>, geom: ConvGeom) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.shape().n {
                return Err(Error::shape(format!(
                    "bias length {} != c_out {}",
                    b.len(),
                    weight.shape().n
                )));
            }
        }
        Ok(ConvParams { weight, bias, geom })
    }
}

/// Validated problem dimensions shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub input: Shape4,
    pub output: Shape4,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeom,
    cin_g: usize,
    cout_g: usize,
}

impl ConvDims {
    pub fn new(input: Shape4, weight: Shape4, geom: ConvGeom) -> Result<Self> {
        let ConvGeom {
            stride,
            padding,
            dilation,
            groups,
        } = geom;
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::shape(format!(
                "stride ({stride}), dilation ({dilation}) and groups ({groups}) must be >= 1"
            )));
        }
        let c_out = weight.n;
        if !input.c.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "groups {groups} must divide c_in {} and c_out {c_out}",
                input.c
            )));
        }
        if weight.c * groups != input.c {
            return Err(Error::shape(format!(
                "channel axis: input has {} channels but weight expects {} x {groups} groups",
                input.c, weight.c
            )));
        }
        let ho = conv_out_dim(input.h, weight.h, stride, padding, dilation).ok_or_else(|| {
            Error::shape(format!(
                "height axis: dilated kernel extent {} exceeds padded input {}",
                dilation * (weight.h - 1) + 1,
                input.h + 2 * padding
            ))
        })?;
        let wo = conv_out_dim(input.w, weight.w, stride, padding, dilation).ok_or_else(|| {
            Error::shape(format!(
                "width axis: dilated kernel extent {} exceeds padded input {}",
                dilation * (weight.w - 1) + 1,
                input.w + 2 * padding
            ))
        })?;
        Ok(ConvDims {
            input,
            output: Shape4::new(input.n, c_out, ho, wo),
            kh: weight.h,
            kw: weight.w,
            geom,
            cin_g: input.c / groups,
            cout_g: c_out / groups,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }
}

/// Unfold the input channels of one group into a `(cin_g*kh*kw) x (ho*wo)` matrix.
fn im2col<T: Real>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (h, w) = (d.input.h, d.input.w);
    let (ho, wo) = (d.output.h, d.output.w);
    let ConvGeom {
        stride,
        padding,
        dilation,
        ..
    } = d.geom;
    let p = ho * wo;
    for ci in 0..d.cin_g {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + ki * dilation) as isize - padding as isize;
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * stride + kj * dilation) as isize - padding as isize;
                        *o = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column matrix back onto one group's input channels.
fn col2im<T: Real>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let (h, w) = (d.input.h, d.input.w);
    let (ho, wo) = (d.output.h, d.output.w);
    let ConvGeom {
        stride,
        padding,
        dilation,
        ..
    } = d.geom;
    let p = ho * wo;
    for ci in 0..d.cin_g {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + ki * dilation) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kj * dilation) as isize - padding as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    geom: ConvGeom,
) -> Result<(Tensor4<T>, ConvDims)> {
    let d = ConvDims::new(x.shape(), weight.shape(), geom)?;
    if let Some(b) = bias {
        if b.len() != d.output.c {
            return Err(Error::shape(format!("bias length {} != c_out {}", b.len(), d.output.c)));
        }
    }
    let mut out = Tensor4::zeros(d.output);
    let p = d.output.plane();
    let k = d.col_rows();
    let in_chunk = d.cin_g * d.input.plane();
    let out_chunk = d.cout_g * p;
    let w_chunk = d.cout_g * k;
    let mut col = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    for n in 0..d.input.n {
        for g in 0..d.geom.groups {
            let xs = &xd[(n * d.geom.groups + g) * in_chunk..][..in_chunk];
            let os = &mut od[(n * d.geom.groups + g) * out_chunk..][..out_chunk];
            let ws = &wd[g * w_chunk..][..w_chunk];
            let cols: &[T] = if d.is_pointwise() {
                xs
            } else {
                im2col(xs, &d, &mut col);
                &col
            };
            matmul_acc(d.cout_g, k, p, ws, false, cols, false, os);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                let base = (n * d.output.c + co) * p;
                od[base..base + p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok((out, d))
}

/// Gradients for input, weight and bias. `dx`/`dw`/`db` are accumulated into when given.
pub(crate) fn conv2d_backward<T: Real>(
    d: &ConvDims,
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let p = d.output.plane();
    let k = d.col_rows();
    let in_chunk = d.cin_g * d.input.plane();
    let out_chunk = d.cout_g * p;
    let w_chunk = d.cout_g * k;
    let groups = d.geom.groups;

    if let Some(db) = db {
        for n in 0..d.output.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let base = (n * d.output.c + co) * p;
                *acc += dy[base..base + p].iter().copied().sum::<T>();
            }
        }
    }

    let xd = x.data();
    let wd = weight.data();
    let pointwise = d.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { k * p }];

    if let Some(dw) = dw {
        for n in 0..d.input.n {
            for g in 0..groups {
                let xs = &xd[(n * groups + g) * in_chunk..][..in_chunk];
                let dys = &dy[(n * groups + g) * out_chunk..][..out_chunk];
                let cols: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, d, &mut col);
                    &col
                };
                matmul_acc(d.cout_g, p, k, dys, false, cols, true, &mut dw[g * w_chunk..][..w_chunk]);
            }
        }
    }

    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); k * p];
        for n in 0..d.input.n {
            for g in 0..groups {
                let dys = &dy[(n * groups + g) * out_chunk..][..out_chunk];
                let ws = &wd[g * w_chunk..][..w_chunk];
                let dxs = &mut dx[(n * groups + g) * in_chunk..][..in_chunk];
                if pointwise {
                    matmul_acc(k, d.cout_g, p, ws, true, dys, false, dxs);
                } else {
                    dcol.fill(T::zero());
                    matmul_acc(k, d.cout_g, p, ws, true, dys, false, &mut dcol);
                    col2im(&dcol, d, dxs);
                }
            }
        }
    }
}

/// Grouped dilated cross-correlation plus bias.
pub fn conv2d<T: Real>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    conv2d_forward(x, &p.weight, p.bias.as_deref(), p.geom).map(|(y, _)| y)
}
