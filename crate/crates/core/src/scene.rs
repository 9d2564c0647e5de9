//! Procedural test scene: a shaded sphere resting on a pedestal in front of
//! a light backdrop. Values are exact multiples of 1/255 so the scene
//! survives a PNG round trip unchanged.

use crate::image::{Image, Mask};
use crate::scalar::Scalar;

pub const SCENE_SIZE: usize = 64;
/// Encoder seed the scene is usually paired with.
pub const SCENE_ENCODER_SEED: u64 = 7;

const BACKDROP: [f64; 3] = [0.92, 0.92, 0.90];
const SPHERE: [f64; 3] = [0.85, 0.33, 0.18];
const PEDESTAL: [f64; 3] = [0.25, 0.40, 0.70];

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

// (colour, is_object) at pixel centre (y, x) of a size x size canvas
fn shade(y: usize, x: usize, size: usize) -> ([f64; 3], bool) {
    let s = size as f64;
    let (px, py) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);

    let (cx, cy, r) = (0.5, 0.42, 0.3);
    let (dx, dy) = ((px - cx) / r, (py - cy) / r);
    let d2 = dx * dx + dy * dy;
    if d2 <= 1.0 {
        let nz = (1.0 - d2).sqrt();
        let light: [f64; 3] = [-0.45, -0.55, 0.70];
        let norm = (light[0] * light[0] + light[1] * light[1] + light[2] * light[2]).sqrt();
        let lambert = ((dx * light[0] + dy * light[1] + nz * light[2]) / norm).max(0.0);
        let k = 0.25 + 0.75 * lambert;
        return (SPHERE.map(|c| c * k), true);
    }
    if (0.3..=0.7).contains(&px) && (0.72..=0.86).contains(&py) {
        let k = 0.8 + 0.2 * (1.0 - (px - 0.5).abs() / 0.2);
        return (PEDESTAL.map(|c| c * k), true);
    }
    let fade = 1.0 - 0.12 * py;
    (BACKDROP.map(|c| c * fade), false)
}

/// The scene image at `size x size`.
pub fn scene_image<T: Scalar>(size: usize) -> Image<T> {
    Image::from_fn(size, size, |y, x, c| T::lit(quantize(shade(y, x, size).0[c])))
}

/// Foreground mask of the scene object.
pub fn scene_mask(size: usize) -> Mask {
    Mask::from_fn(size, size, |y, x| shade(y, x, size).1)
}

/// The default 64x64 scene and its object mask.
pub fn bundled_scene<T: Scalar>() -> (Image<T>, Mask) {
    (scene_image(SCENE_SIZE), scene_mask(SCENE_SIZE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_8bit_exact() {
        let (img, mask) = bundled_scene::<f64>();
        assert_eq!(img.height(), 64);
        for &v in img.data() {
            let q = v * 255.0;
            assert_eq!(q, q.round());
            assert!((0.0..=1.0).contains(&v));
        }
        let n = mask.count();
        assert!(n > 500 && n < 64 * 64 - 500, "{n}");
    }
}
