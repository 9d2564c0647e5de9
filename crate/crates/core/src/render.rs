//! Non-differentiable splat renderer for previews.
//!
//! Points are projected orthographically, so canonical coordinate `(u, v)` in
//! `[-0.5, 0.5]^2` lands on pixel `((u + 0.5) * size, (0.5 - v) * size)`. Each
//! point is an isotropic Gaussian with standard deviation
//! `mean(scale) * size / 256` pixels, composited back to front over white.

use crate::encoder::{GaussianAttributes, Reconstruction};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud3D, ViewDirection};
use crate::image::Image;
use crate::scalar::Scalar;

pub const DEFAULT_PREVIEW_SIZE: usize = 256;

/// Degree-0 spherical harmonic constant.
const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Footprints are cut off beyond this many standard deviations.
const CUTOFF_SIGMAS: f64 = 3.0;

pub fn sh_to_rgb<T: Scalar>(sh: [T; 3]) -> [f64; 3] {
    sh.map(|c| (0.5 + SH_C0 * c.as_f64()).clamp(0.0, 1.0))
}

/// Pixel-space centre of a canonical point seen from `view`.
pub fn pixel_position<T: Scalar>(p: [T; 3], view: ViewDirection, size: usize) -> [f64; 2] {
    let [u, v] = view.project_point(p);
    let s = size as f64;
    [(u.as_f64() + 0.5) * s, (0.5 - v.as_f64()) * s]
}

pub fn render_preview<T: Scalar>(
    cloud: &PointCloud3D<T>,
    attributes: &[GaussianAttributes<T>],
    view: ViewDirection,
    size: usize,
) -> Result<Image<T>> {
    if attributes.len() != cloud.len() {
        return Err(Error::shape(
            "render_preview",
            format!("{} attribute rows for {} points", attributes.len(), cloud.len()),
        ));
    }
    let centres: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .zip(attributes)
        .map(|(p, a)| [0, 1, 2].map(|k| (p[k] + a.offset[k]).as_f64()))
        .collect();
    let mut order: Vec<usize> = (0..centres.len()).collect();
    order.sort_by(|&i, &j| {
        view.depth(centres[i])
            .total_cmp(&view.depth(centres[j]))
            .then(i.cmp(&j))
    });

    let mut canvas = vec![[1.0f64; 3]; size * size];
    for i in order {
        let a = &attributes[i];
        let opacity = a.opacity.as_f64().clamp(0.0, 1.0);
        if opacity == 0.0 {
            continue;
        }
        let colour = sh_to_rgb(a.sh);
        let mean_scale = a.scale.iter().map(|s| s.as_f64()).sum::<f64>() / 3.0;
        let sigma = (mean_scale * size as f64 / 256.0).max(1e-6);
        let [cx, cy] = pixel_position(centres[i], view, size);
        let reach = CUTOFF_SIGMAS * sigma;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(size);
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(size);
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - cy;
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let w = opacity * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let px = &mut canvas[y * size + x];
                for c in 0..3 {
                    px[c] = w * colour[c] + (1.0 - w) * px[c];
                }
            }
        }
    }
    Ok(Image::from_fn(size, size, |y, x, c| T::lit(canvas[y * size + x][c])))
}

pub fn render_reconstruction<T: Scalar>(recon: &Reconstruction<T>, view: ViewDirection, size: usize) -> Result<Image<T>> {
    render_preview(&recon.cloud, &recon.attributes, view, size)
}
