//! Image and geometry metrics plus the robustness distortions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::Reconstructor;
use crate::error::{Error, Result};
use crate::geometry::{chamfer, ViewDirection};
use crate::image::{Image, CHANNELS};
use crate::render::{render_reconstruction, DEFAULT_PREVIEW_SIZE};
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_same<T: Scalar>(op: &'static str, a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ))
    }
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range; infinite for
/// identical images.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

// valid-region separable filter of an h x w plane
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) over the
/// valid region, averaged over channels.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let x: Vec<f64> = a.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / CHANNELS as f64)
}

/// Robustness transforms applied to a protected image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Distortion {
    /// Additive Gaussian noise with standard deviation `sigma8 / 255`.
    Gauss { sigma8: u8 },
    /// Multiply by `factor`, in `[1, 2]`.
    Brightness { factor: f64 },
    /// Nearest-neighbour downsample by `factor` (2 or 4) and back up.
    Downsample { factor: usize },
}

impl Distortion {
    /// The standard sweep.
    pub const MENU: [Distortion; 6] = [
        Distortion::Gauss { sigma8: 1 },
        Distortion::Gauss { sigma8: 2 },
        Distortion::Brightness { factor: 1.0 },
        Distortion::Brightness { factor: 2.0 },
        Distortion::Downsample { factor: 2 },
        Distortion::Downsample { factor: 4 },
    ];

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distortion::Gauss { sigma8 } => matches!(sigma8, 1 | 2),
            Distortion::Brightness { factor } => (1.0..=2.0).contains(&factor),
            Distortion::Downsample { factor } => matches!(factor, 2 | 4),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("distortion {self} is outside the supported menu")))
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distortion::Gauss { sigma8 } => write!(f, "gauss:{sigma8}"),
            Distortion::Brightness { factor } => write!(f, "brightness:{factor}"),
            Distortion::Downsample { factor } => write!(f, "downsample:{factor}"),
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown distortion {s:?}; expected gauss:N, brightness:F or downsample:N"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let d = match kind {
            "gauss" => Distortion::Gauss {
                sigma8: arg.parse().map_err(|_| bad())?,
            },
            "brightness" => Distortion::Brightness {
                factor: arg.parse().map_err(|_| bad())?,
            },
            "downsample" => Distortion::Downsample {
                factor: arg.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

pub fn apply_distortion<T: Scalar>(image: &Image<T>, distortion: Distortion, seed: u64) -> Result<Image<T>> {
    distortion.validate()?;
    let mut out = match distortion {
        Distortion::Gauss { sigma8 } => {
            let sigma = sigma8 as f64 / 255.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = image.clone();
            for v in out.data_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v = *v + T::lit(sigma * g);
            }
            out
        }
        Distortion::Brightness { factor } => {
            let mut out = image.clone();
            if factor != 1.0 {
                for v in out.data_mut() {
                    *v = *v * T::lit(factor);
                }
            }
            out
        }
        Distortion::Downsample { factor } => Image::from_fn(image.height(), image.width(), |y, x, c| {
            image.get(y / factor * factor, x / factor * factor, c)
        }),
    };
    out.clamp_unit();
    Ok(out)
}

/// Serializes `f64` with infinity written as the string `"inf"`.
pub mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub cd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub distortion: Distortion,
    pub name: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    #[serde(flatten)]
    pub scores: Scores,
    /// Always null: no perceptual network ships with this crate.
    pub lpips: Option<f64>,
    pub preview_view: String,
    pub preview_size: usize,
    pub distortions: Vec<DistortionReport>,
}

fn compare<T: Scalar>(
    reconstructor: &Reconstructor<T>,
    clean_render: &Image<T>,
    clean_cloud: &crate::geometry::PointCloud3D<T>,
    perturbed: &Image<T>,
    size: usize,
) -> Result<Scores> {
    let recon = reconstructor.reconstruct(perturbed)?;
    let render = render_reconstruction(&recon, ViewDirection::FRONT, size)?;
    Ok(Scores {
        psnr: psnr(clean_render, &render)?,
        ssim: ssim(clean_render, &render)?,
        cd: chamfer(clean_cloud, &recon.cloud)?.as_f64(),
    })
}

/// Compares the reconstructions of `clean` and `perturbed`, then of `clean`
/// and each distorted copy of `perturbed`.
pub fn evaluate<T: Scalar>(
    clean: &Image<T>,
    perturbed: &Image<T>,
    reconstructor: &Reconstructor<T>,
    distortions: &[Distortion],
    seed: u64,
) -> Result<EvalReport> {
    check_same("evaluate", clean, perturbed)?;
    let size = DEFAULT_PREVIEW_SIZE;
    let base = reconstructor.reconstruct(clean)?;
    let clean_render = render_reconstruction(&base, ViewDirection::FRONT, size)?;
    let scores = compare(reconstructor, &clean_render, &base.cloud, perturbed, size)?;
    let distortions = distortions
        .iter()
        .map(|&d| {
            let distorted = apply_distortion(perturbed, d, seed)?;
            Ok(DistortionReport {
                distortion: d,
                name: d.to_string(),
                scores: compare(reconstructor, &clean_render, &base.cloud, &distorted, size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        schema: 1,
        scores,
        lpips: None,
        preview_view: ViewDirection::FRONT.to_string(),
        preview_size: size,
        distortions,
    })
}
