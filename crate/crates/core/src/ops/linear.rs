use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, Real, Shape4, Tensor4};

/// Affine map of each sample's flattened features.
///
/// `weight` is `(out, in, 1, 1)`; the input is read as `n` vectors of length `c*h*w`.
pub fn fully_connected<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: Option<&[T]>) -> Result<Tensor4<T>> {
    let s = x.shape();
    let feat = s.c * s.plane();
    let ws = weight.shape();
    if ws.c * ws.h * ws.w != feat {
        return Err(Error::shape(format!(
            "fully connected weight expects {} inputs, got {feat}",
            ws.c * ws.h * ws.w
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::shape(format!("bias length {} != outputs {}", b.len(), ws.n)));
        }
    }
    let mut out = Tensor4::zeros(Shape4::new(s.n, ws.n, 1, 1));
    // out (n x out) = x (n x in) @ W^T (in x out)
    matmul_acc(s.n, feat, ws.n, x.data(), false, weight.data(), true, out.data_mut());
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(ws.n) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
    }
    Ok(out)
}

pub(crate) fn fully_connected_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = x.shape().n;
    let feat = x.numel() / n;
    let outs = weight.shape().n;
    if let Some(dx) = dx {
        matmul_acc(n, outs, feat, dy, false, weight.data(), false, dx);
    }
    if let Some(dw) = dw {
        matmul_acc(outs, n, feat, dy, true, x.data(), false, dw);
    }
    if let Some(db) = db {
        for row in dy.chunks(outs) {
            db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
        }
    }
}
