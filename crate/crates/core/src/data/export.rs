//! Grayscale renderings of SA-head internals and a colour label overlay.

use std::path::{Path, PathBuf};

use super::netpbm::{write_pgm, write_ppm};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::Mode;
use crate::params::ParamStore;
use crate::sanet::{predict_labels, SegModel};
use crate::tensor::Tensor4;

/// Min-max scaling to `0..=255`; a constant map becomes uniform 128.
pub fn normalize_minmax(x: &[f32]) -> Vec<u8> {
    let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![128; x.len()];
    }
    x.iter()
        .map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
        .collect()
}

/// Attention masks are non-negative, so they are scaled by `max(1, max)` with
/// zero kept black: an all-zero mask renders black, a sigmoid mask keeps its level.
pub fn normalize_attention(x: &[f32]) -> Vec<u8> {
    let hi = x.iter().copied().fold(1.0f32, f32::max);
    x.iter()
        .map(|&v| (255.0 * v.max(0.0) / hi).round().min(255.0) as u8)
        .collect()
}

/// Per-pixel maximum over channels of sample `n`.
pub fn channel_max(t: &Tensor4<f32>, n: usize) -> Vec<f32> {
    let s = t.shape();
    let mut out = t.plane(n, 0).to_vec();
    for c in 1..s.c {
        for (o, &v) in out.iter_mut().zip(t.plane(n, c)) {
            *o = o.max(v);
        }
    }
    out
}

/// Channel with the largest mean activation; ties go to the lower index.
pub fn top_channel(t: &Tensor4<f32>, n: usize) -> usize {
    let s = t.shape();
    let mean = |c: usize| t.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
    (1..s.c).fold(0, |best, c| if mean(c) > mean(best) { c } else { best })
}

/// Nearest-neighbour resize of an `h x w` map to `oh x ow`.
pub fn resize_nearest(x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let si = i * h / oh;
        for j in 0..ow {
            out.push(x[si * w + j * w / ow]);
        }
    }
    out
}

/// Fixed colours for class ids; background is black.
pub fn palette(class: u8) -> [u8; 3] {
    const P: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    P[class as usize % P.len()]
}

/// 50/50 blend of an RGB image (`3 x h x w` planar in `[0, 1]`) with label colours.
pub fn overlay(image: &[f32], labels: &[u8], h: usize, w: usize) -> Vec<u8> {
    let p = h * w;
    let mut rgb = Vec::with_capacity(3 * p);
    for i in 0..p {
        let col = palette(labels[i]);
        for c in 0..3 {
            let v = image[c * p + i].clamp(0.0, 1.0) * 255.0;
            rgb.push(((v + col[c] as f32) / 2.0).round() as u8);
        }
    }
    rgb
}

/// Writes, for every SA head of sample 0 of `image`, the channel-max attention mask,
/// the most activated main-channel map and the channel-max module output, all at the
/// input resolution, plus a prediction overlay. Returns the written paths.
pub fn export_maps(
    model: &SegModel,
    store: &mut ParamStore<f32>,
    image: &Tensor4<f32>,
    prefix: &Path,
) -> Result<Vec<PathBuf>> {
    if model.sa.is_empty() {
        return Err(Error::config(format!("model {} has no attention heads", model.cfg.name())));
    }
    let s = image.shape();
    let single = Tensor4::new(
        crate::tensor::Shape4::new(1, s.c, s.h, s.w),
        image.data()[..s.c * s.plane()].to_vec(),
    )?;
    let mut g = Graph::new(store, Mode::Eval, 0);
    let x = g.constant(single.clone());
    let vars = model.forward(&mut g, x)?;
    let base = prefix.to_string_lossy().into_owned();
    let path = |suffix: &str| PathBuf::from(format!("{base}_{suffix}"));
    let mut written = Vec::new();
    for (i, sa) in vars.sa.iter().enumerate() {
        let head = i + 1;
        let shape = g.shape(sa.out);
        let up = |m: Vec<f32>| resize_nearest(&m, shape.h, shape.w, s.h, s.w);
        let attn = up(channel_max(g.value(sa.attn), 0));
        let res = g.value(sa.res);
        let top = top_channel(res, 0);
        let main = up(res.plane(0, top).to_vec());
        let out = up(channel_max(g.value(sa.out), 0));
        for (name, px) in [
            (format!("head{head}_attn_chmax.pgm"), normalize_attention(&attn)),
            (format!("head{head}_main_top{top}.pgm"), normalize_minmax(&main)),
            (format!("head{head}_out_chmax.pgm"), normalize_minmax(&out)),
        ] {
            let p = path(&name);
            write_pgm(&p, s.w, s.h, &px)?;
            written.push(p);
        }
    }
    let labels = predict_labels(g.value(vars.y_final));
    let p = path("overlay.ppm");
    write_ppm(&p, s.w, s.h, &overlay(single.data(), &labels, s.h, s.w))?;
    written.push(p);
    Ok(written)
}
