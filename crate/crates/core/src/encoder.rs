//! Seeded reference image-to-point-cloud encoder and its forward-only
//! Gaussian attribute decoder.
//!
//! The encoder is a two-layer strided conv stack followed by a dense point
//! head:
//!
//! ```text
//! image 3xHxW -> conv3x3/2 (8) -> relu -> conv3x3/2 (16) -> relu
//!             -> flatten -> linear -> tanh * 0.5 -> N x 3 points
//! ```
//!
//! Every weight is drawn once from a ChaCha8 stream seeded with the encoder
//! seed, uniformly in `+-sqrt(6 / (fan_in + fan_out))`, so the same seed
//! always yields the same network. Points land in `[-0.5, 0.5]^3`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud3D;
use crate::image::{Image, CHANNELS};
use crate::ndiff::{bilinear_forward, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_POINTS: usize = 2048;
pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;

const BUNDLE_MAGIC: &[u8; 6] = b"GCENC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub n_points: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: DEFAULT_RESOLUTION,
            width: DEFAULT_RESOLUTION,
            n_points: DEFAULT_POINTS,
        }
    }
}

impl EncoderConfig {
    fn conv_out(n: usize) -> Option<usize> {
        (n >= KERNEL).then(|| (n - KERNEL) / STRIDE + 1)
    }

    /// `(channels, height, width)` of the second conv layer's output.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let h = Self::conv_out(self.height).and_then(Self::conv_out);
        let w = Self::conv_out(self.width).and_then(Self::conv_out);
        match (h, w) {
            (Some(h), Some(w)) if self.n_points > 0 => Ok((CONV2_CHANNELS, h, w)),
            _ => Err(Error::Config(format!(
                "encoder needs at least 7x7 input and one point, got {}x{} with {} points",
                self.height, self.width, self.n_points
            ))),
        }
    }

    pub fn feature_len(&self) -> Result<usize> {
        self.feature_shape().map(|(c, h, w)| c * h * w)
    }
}

/// Vars produced by one traced forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub image: Var,
    /// Second conv layer output after relu, `16 x h x w`.
    pub features: Var,
    /// `N x 3` points.
    pub points: Var,
}

/// Deterministic differentiable image-to-point-cloud map.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder<T> {
    seed: u64,
    config: EncoderConfig,
    conv1_w: Tensor<T>,
    conv1_b: Tensor<T>,
    conv2_w: Tensor<T>,
    conv2_b: Tensor<T>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
}

struct WeightShapes {
    conv1_w: Vec<usize>,
    conv1_b: Vec<usize>,
    conv2_w: Vec<usize>,
    conv2_b: Vec<usize>,
    head_w: Vec<usize>,
    head_b: Vec<usize>,
}

impl WeightShapes {
    fn of(config: &EncoderConfig) -> Result<Self> {
        let feat = config.feature_len()?;
        let out = 3 * config.n_points;
        Ok(Self {
            conv1_w: vec![CONV1_CHANNELS, CHANNELS, KERNEL, KERNEL],
            conv1_b: vec![CONV1_CHANNELS],
            conv2_w: vec![CONV2_CHANNELS, CONV1_CHANNELS, KERNEL, KERNEL],
            conv2_b: vec![CONV2_CHANNELS],
            head_w: vec![out, feat],
            head_b: vec![out, 1],
        })
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("finite weights")
}

impl<T: Scalar> ReferenceEncoder<T> {
    /// Default 64x64 input, 2048 points.
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, EncoderConfig::default()).expect("default config is valid")
    }

    pub fn with_config(seed: u64, config: EncoderConfig) -> Result<Self> {
        let s = WeightShapes::of(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = KERNEL * KERNEL;
        let b1 = glorot_bound(CHANNELS * k2, CONV1_CHANNELS * k2);
        let b2 = glorot_bound(CONV1_CHANNELS * k2, CONV2_CHANNELS * k2);
        let bh = glorot_bound(s.head_w[1], s.head_w[0]);
        Ok(Self {
            seed,
            config,
            conv1_w: uniform(&mut rng, s.conv1_w, b1),
            conv1_b: uniform(&mut rng, s.conv1_b, b1),
            conv2_w: uniform(&mut rng, s.conv2_w, b2),
            conv2_b: uniform(&mut rng, s.conv2_b, b2),
            head_w: uniform(&mut rng, s.head_w, bh),
            head_b: uniform(&mut rng, s.head_b, bh),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn n_points(&self) -> usize {
        self.config.n_points
    }

    pub fn check_image(&self, image: &Image<T>) -> Result<()> {
        if image.height() != self.config.height || image.width() != self.config.width {
            return Err(Error::Resolution {
                expected_h: self.config.height,
                expected_w: self.config.width,
                actual_h: image.height(),
                actual_w: image.width(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`, starting from an image var of
    /// shape `3 x H x W`.
    pub fn trace(&self, tape: &mut Tape<T>, image: Var) -> Result<EncoderVars> {
        let shape = tape.value(image).shape().to_vec();
        if shape != [CHANNELS, self.config.height, self.config.width] {
            return Err(Error::Resolution {
                expected_h: self.config.height,
                expected_w: self.config.width,
                actual_h: shape.get(1).copied().unwrap_or(0),
                actual_w: shape.get(2).copied().unwrap_or(0),
            });
        }
        let w1 = tape.constant(self.conv1_w.clone());
        let b1 = tape.constant(self.conv1_b.clone());
        let w2 = tape.constant(self.conv2_w.clone());
        let b2 = tape.constant(self.conv2_b.clone());
        let wh = tape.constant(self.head_w.clone());
        let bh = tape.constant(self.head_b.clone());

        let h1 = tape.conv2d(image, w1, Some(b1), STRIDE)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.conv2d(h1, w2, Some(b2), STRIDE)?;
        let features = tape.relu(h2)?;
        let flat = tape.reshape(features, vec![self.config.feature_len()?, 1])?;
        let pre = tape.matmul(wh, flat)?;
        let pre = tape.add(pre, bh)?;
        let squashed = tape.tanh(pre)?;
        let scaled = tape.scale(squashed, T::lit(0.5))?;
        let points = tape.reshape(scaled, vec![self.config.n_points, 3])?;
        Ok(EncoderVars {
            image,
            features,
            points,
        })
    }

    pub fn encode(&self, image: &Image<T>) -> Result<PointCloud3D<T>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let vars = self.trace(&mut tape, x)?;
        PointCloud3D::from_flat(tape.value(vars.points).data())
    }

    /// Cloud plus the conv feature map, from one forward pass.
    pub fn encode_with_features(&self, image: &Image<T>) -> Result<(PointCloud3D<T>, Tensor<T>)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let vars = self.trace(&mut tape, x)?;
        let cloud = PointCloud3D::from_flat(tape.value(vars.points).data())?;
        Ok((cloud, tape.value(vars.features).clone()))
    }

    /// Evaluates a scalar loss built on top of the traced encoder and returns
    /// it with its gradient with respect to the (planar) image.
    pub fn loss_and_gradient<F>(&self, image: &Image<T>, loss: F) -> Result<(T, Vec<T>)>
    where
        F: FnOnce(&mut Tape<T>, &EncoderVars) -> Result<Var>,
    {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.variable(image.to_tensor());
        let vars = self.trace(&mut tape, x)?;
        let l = loss(&mut tape, &vars)?;
        let value = tape.value(l).item();
        tape.backward(l)?;
        Ok((value, tape.grad(x).expect("image tracks gradients").to_vec()))
    }

    /// Forward-only counterpart of [`loss_and_gradient`](Self::loss_and_gradient).
    pub fn loss<F>(&self, image: &Image<T>, loss: F) -> Result<T>
    where
        F: FnOnce(&mut Tape<T>, &EncoderVars) -> Result<Var>,
    {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let vars = self.trace(&mut tape, x)?;
        let l = loss(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    }

    fn weights(&self) -> [&Tensor<T>; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    /// Serializes the weight bundle: magic `GCENC1`, seed, dimensions, then
    /// every weight as row-major little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = [
            self.config.height,
            self.config.width,
            self.config.n_points,
            CHANNELS,
            CONV1_CHANNELS,
            CONV2_CHANNELS,
            KERNEL,
            STRIDE,
        ];
        let n: usize = self.weights().iter().map(|w| w.len()).sum();
        let mut out = Vec::with_capacity(6 + 8 * (1 + dims.len() + n));
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for w in self.weights() {
            for v in w.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Bundle("truncated weight bundle".into()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(6)? != BUNDLE_MAGIC {
            return Err(Error::Bundle("missing GCENC1 magic".into()));
        }
        let mut u64_le = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let seed = u64_le()?;
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = usize::try_from(u64_le()?).map_err(|_| Error::Bundle("dimension overflow".into()))?;
        }
        let arch = [CHANNELS, CONV1_CHANNELS, CONV2_CHANNELS, KERNEL, STRIDE];
        if dims[3..] != arch {
            return Err(Error::Bundle(format!(
                "unsupported architecture {:?}, expected {arch:?}",
                &dims[3..]
            )));
        }
        let config = EncoderConfig {
            height: dims[0],
            width: dims[1],
            n_points: dims[2],
        };
        let s = WeightShapes::of(&config)?;
        let body = &bytes[6 + 8 * 9..];
        let total: usize = [&s.conv1_w, &s.conv1_b, &s.conv2_w, &s.conv2_b, &s.head_w, &s.head_b]
            .iter()
            .map(|sh| sh.iter().product::<usize>())
            .sum();
        if body.len() != total * 8 {
            return Err(Error::Bundle(format!(
                "expected {} weight bytes, found {}",
                total * 8,
                body.len()
            )));
        }
        let mut floats = body
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())));
        let mut next = |shape: Vec<usize>| -> Result<Tensor<T>> {
            let n = shape.iter().product();
            Tensor::new(shape, floats.by_ref().take(n).collect())
                .map_err(|e| Error::Bundle(e.to_string()))
        };
        Ok(Self {
            seed,
            config,
            conv1_w: next(s.conv1_w)?,
            conv1_b: next(s.conv1_b)?,
            conv2_w: next(s.conv2_w)?,
            conv2_b: next(s.conv2_b)?,
            head_w: next(s.head_w)?,
            head_b: next(s.head_b)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub const TRIPLANE_CHANNELS: usize = 8;
pub const TRIPLANE_SIZE: usize = 32;

/// Three axis-aligned feature planes `T_xy`, `T_xz`, `T_yz`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane<T> {
    pub xy: Tensor<T>,
    pub xz: Tensor<T>,
    pub yz: Tensor<T>,
}

impl<T: Scalar> Triplane<T> {
    pub fn new(xy: Tensor<T>, xz: Tensor<T>, yz: Tensor<T>) -> Result<Self> {
        if xy.shape() != xz.shape() || xy.shape() != yz.shape() || xy.shape().len() != 3 {
            return Err(Error::shape(
                "triplane",
                format!("{:?}, {:?}, {:?}", xy.shape(), xz.shape(), yz.shape()),
            ));
        }
        Ok(Self { xy, xz, yz })
    }

    /// Planes filled uniformly in `[-1, 1]` from stream 1 of the seed.
    pub fn seeded(seed: u64, channels: usize, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut plane = || uniform(&mut rng, vec![channels, size, size], 1.0);
        let (xy, xz, yz) = (plane(), plane(), plane());
        Self { xy, xz, yz }
    }

    pub fn channels(&self) -> usize {
        self.xy.shape()[0]
    }
}

fn plane_coords<T: Scalar>(cloud: &PointCloud3D<T>, axes: (usize, usize), flip_v: bool) -> Result<Tensor<T>> {
    let half = T::lit(0.5);
    let data = cloud
        .points()
        .iter()
        .flat_map(|p| {
            let u = p[axes.0] + half;
            let v = if flip_v { half - p[axes.1] } else { p[axes.1] + half };
            [u, v]
        })
        .collect();
    Tensor::new(vec![cloud.len(), 2], data)
}

/// Per-point triplane features: bilinear samples of `T_xy`, `T_xz` and
/// `T_yz` at the point's coordinate pairs (mapped from `[-0.5, 0.5]` to
/// `[0, 1]`), concatenated in that order. Returns `N x 3C`.
pub fn sample_triplane_features<T: Scalar>(tri: &Triplane<T>, cloud: &PointCloud3D<T>) -> Result<Tensor<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("sample_triplane_features"));
    }
    let c = tri.channels();
    let parts = [
        bilinear_forward(&tri.xy, &plane_coords(cloud, (0, 1), false)?)?,
        bilinear_forward(&tri.xz, &plane_coords(cloud, (0, 2), false)?)?,
        bilinear_forward(&tri.yz, &plane_coords(cloud, (1, 2), false)?)?,
    ];
    let mut out = Vec::with_capacity(cloud.len() * 3 * c);
    for i in 0..cloud.len() {
        for part in &parts {
            out.extend_from_slice(&part.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(vec![cloud.len(), 3 * c], out)
}

/// Local image features: bilinear lookup of a `C x h x w` feature map at each
/// point's orthographic image position (`x` to the right, `y` up).
pub fn local_image_features<T: Scalar>(feature_map: &Tensor<T>, cloud: &PointCloud3D<T>) -> Result<Tensor<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("local_image_features"));
    }
    bilinear_forward(feature_map, &plane_coords(cloud, (0, 1), true)?)
}

/// Decoded per-point Gaussian splat attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAttributes<T> {
    /// Position offset in canonical-box units.
    pub offset: [T; 3],
    pub opacity: T,
    pub scale: [T; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [T; 4],
    /// Degree-0 colour coefficients.
    pub sh: [T; 3],
}

pub const RAW_ATTRIBUTES: usize = 14;
const OFFSET_SCALE: f64 = 0.05;

impl<T: Scalar> GaussianAttributes<T> {
    /// Squashes a raw decoder row: offset `tanh * 0.05`, opacity logistic,
    /// scale `exp`, rotation normalized (identity for a zero vector).
    pub fn from_raw(raw: &[T; RAW_ATTRIBUTES]) -> Self {
        let offset = [raw[0], raw[1], raw[2]].map(|v| v.tanh() * T::lit(OFFSET_SCALE));
        let opacity = T::one() / (T::one() + (-raw[3]).exp());
        let scale = [raw[4], raw[5], raw[6]].map(|v| v.exp());
        let q = [raw[7], raw[8], raw[9], raw[10]];
        let norm = q.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        let rotation = if norm > T::zero() {
            q.map(|v| v / norm)
        } else {
            [T::one(), T::zero(), T::zero(), T::zero()]
        };
        Self {
            offset,
            opacity,
            scale,
            rotation,
            sh: [raw[11], raw[12], raw[13]],
        }
    }
}

/// Two-layer MLP mapping `x (+) f_t (+) f_l` to raw Gaussian attributes.
#[derive(Clone, Debug)]
pub struct GaussianDecoder<T> {
    input: usize,
    hidden: usize,
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
}

pub const DECODER_HIDDEN: usize = 32;

impl<T: Scalar> GaussianDecoder<T> {
    /// Weights from stream 2 of the seed.
    pub fn seeded(seed: u64, triplane_channels: usize, local_channels: usize) -> Self {
        let input = 3 + 3 * triplane_channels + local_channels;
        let hidden = DECODER_HIDDEN;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut draw = |n: usize, bound: f64| -> Vec<T> {
            (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
        };
        let bound1 = glorot_bound(input, hidden);
        let bound2 = glorot_bound(hidden, RAW_ATTRIBUTES);
        let w1 = draw(hidden * input, bound1);
        let b1 = draw(hidden, bound1);
        let w2 = draw(RAW_ATTRIBUTES * hidden, bound2);
        let b2 = draw(RAW_ATTRIBUTES, bound2);
        Self {
            input,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input
    }

    /// Raw (pre-squash) outputs for one input row.
    pub fn raw(&self, row: &[T]) -> [T; RAW_ATTRIBUTES] {
        let hidden: Vec<T> = (0..self.hidden)
            .map(|h| {
                let w = &self.w1[h * self.input..(h + 1) * self.input];
                let s = w.iter().zip(row).fold(self.b1[h], |acc, (&a, &b)| acc + a * b);
                s.max(T::zero())
            })
            .collect();
        std::array::from_fn(|o| {
            let w = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            w.iter().zip(&hidden).fold(self.b2[o], |acc, (&a, &b)| acc + a * b)
        })
    }

    pub fn decode(
        &self,
        f_t: &Tensor<T>,
        f_l: &Tensor<T>,
        cloud: &PointCloud3D<T>,
    ) -> Result<Vec<GaussianAttributes<T>>> {
        let n = cloud.len();
        let (rt, rl) = (f_t.shape()[0], f_l.shape()[0]);
        if rt != n || rl != n {
            return Err(Error::shape(
                "decode_gaussian_attributes",
                format!("{n} points but {rt} triplane rows and {rl} local rows"),
            ));
        }
        let (ct, cl) = (f_t.len() / n, f_l.len() / n);
        if 3 + ct + cl != self.input {
            return Err(Error::shape(
                "decode_gaussian_attributes",
                format!("decoder expects {} inputs, got {}", self.input, 3 + ct + cl),
            ));
        }
        let mut row = Vec::with_capacity(self.input);
        Ok(cloud
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                row.clear();
                row.extend_from_slice(p);
                row.extend_from_slice(&f_t.data()[i * ct..(i + 1) * ct]);
                row.extend_from_slice(&f_l.data()[i * cl..(i + 1) * cl]);
                GaussianAttributes::from_raw(&self.raw(&row))
            })
            .collect())
    }
}

/// Cloud and decoded splat attributes for one image.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub cloud: PointCloud3D<T>,
    pub attributes: Vec<GaussianAttributes<T>>,
}

/// Encoder plus the seeded triplane and attribute decoder used for previews.
#[derive(Clone, Debug)]
pub struct Reconstructor<T> {
    pub encoder: ReferenceEncoder<T>,
    pub triplane: Triplane<T>,
    pub decoder: GaussianDecoder<T>,
}

impl<T: Scalar> Reconstructor<T> {
    pub fn new(encoder: ReferenceEncoder<T>) -> Self {
        let seed = encoder.seed();
        Self {
            triplane: Triplane::seeded(seed, TRIPLANE_CHANNELS, TRIPLANE_SIZE),
            decoder: GaussianDecoder::seeded(seed, TRIPLANE_CHANNELS, CONV2_CHANNELS),
            encoder,
        }
    }

    pub fn reconstruct(&self, image: &Image<T>) -> Result<Reconstruction<T>> {
        let (cloud, features) = self.encoder.encode_with_features(image)?;
        let f_t = sample_triplane_features(&self.triplane, &cloud)?;
        let f_l = local_image_features(&features, &cloud)?;
        let attributes = self.decoder.decode(&f_t, &f_l, &cloud)?;
        Ok(Reconstruction { cloud, attributes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;

    fn small() -> EncoderConfig {
        EncoderConfig {
            height: 16,
            width: 16,
            n_points: 32,
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ReferenceEncoder::<f64>::with_config(3, small()).unwrap();
        let b = ReferenceEncoder::<f64>::with_config(3, small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = ReferenceEncoder::<f64>::with_config(4, small()).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn encode_is_pure_and_bounded() {
        let enc = ReferenceEncoder::<f64>::with_config(7, small()).unwrap();
        let img = test_image(16, 16, 1);
        let first = enc.encode(&img).unwrap();
        for _ in 0..10 {
            assert_eq!(enc.encode(&img).unwrap(), first);
        }
        assert_eq!(first.len(), 32);
        assert!(first.points().iter().flatten().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn perturbation_moves_the_cloud() {
        let enc = ReferenceEncoder::<f64>::with_config(7, small()).unwrap();
        let img = test_image(16, 16, 2);
        let mut pert = img.clone();
        for (i, v) in pert.data_mut().iter_mut().enumerate() {
            *v = (*v + if i % 2 == 0 { 8.0 / 255.0 } else { -8.0 / 255.0 }).clamp(0.0, 1.0);
        }
        let cd = geometry::chamfer(&enc.encode(&img).unwrap(), &enc.encode(&pert).unwrap()).unwrap();
        assert!(cd > 0.0);
    }

    #[test]
    fn resolution_mismatch_reports_sizes() {
        let enc = ReferenceEncoder::<f64>::with_config(7, small()).unwrap();
        let err = enc.encode(&test_image(8, 16, 0)).unwrap_err();
        assert!(err.to_string().contains("expected 16x16, got 8x16"), "{err}");
        assert!(ReferenceEncoder::<f64>::with_config(
            0,
            EncoderConfig {
                height: 5,
                width: 5,
                n_points: 4
            }
        )
        .is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let enc = ReferenceEncoder::<f64>::with_config(11, small()).unwrap();
        let bytes = enc.to_bytes();
        assert_eq!(&bytes[..6], b"GCENC1");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 11);
        let back = ReferenceEncoder::<f64>::from_bytes(&bytes).unwrap();
        let img = test_image(16, 16, 3);
        assert_eq!(back.encode(&img).unwrap(), enc.encode(&img).unwrap());
        assert!(ReferenceEncoder::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ReferenceEncoder::<f64>::from_bytes(b"NOTGC1").is_err());
    }

    #[test]
    fn constant_triplane_gives_constant_features() {
        let plane = || Tensor::new(vec![4, 8, 8], vec![0.25; 256]).unwrap();
        let tri = Triplane::new(plane(), plane(), plane()).unwrap();
        let cloud = PointCloud3D::new(vec![[0.1, -0.4, 0.3], [-0.5, 0.5, 0.0], [0.7, 0.0, -0.9]]);
        let f = sample_triplane_features(&tri, &cloud).unwrap();
        assert_eq!(f.shape(), &[3, 12]);
        assert!(f.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn centre_point_samples_plane_centres() {
        let tri = Triplane::<f64>::seeded(5, 3, 5);
        let cloud = PointCloud3D::new(vec![[0.0, 0.0, 0.0]]);
        let f = sample_triplane_features(&tri, &cloud).unwrap();
        // 5x5 planes: (0.5, 0.5) lands exactly on texel (2, 2)
        for (k, plane) in [&tri.xy, &tri.xz, &tri.yz].iter().enumerate() {
            for c in 0..3 {
                assert_eq!(f.data()[k * 3 + c], plane.data()[c * 25 + 2 * 5 + 2]);
            }
        }
    }

    #[test]
    fn permuting_points_permutes_rows() {
        let tri = Triplane::<f64>::seeded(9, 2, 6);
        let pts = vec![[0.1, 0.2, -0.3], [-0.2, 0.4, 0.1], [0.3, -0.1, 0.45]];
        let f = sample_triplane_features(&tri, &PointCloud3D::new(pts.clone())).unwrap();
        let rev: Vec<_> = pts.iter().rev().copied().collect();
        let g = sample_triplane_features(&tri, &PointCloud3D::new(rev)).unwrap();
        let w = 6;
        for i in 0..3 {
            assert_eq!(&f.data()[i * w..(i + 1) * w], &g.data()[(2 - i) * w..(3 - i) * w]);
        }
    }

    #[test]
    fn zero_raw_output_squashes_to_neutral_values() {
        let a = GaussianAttributes::<f64>::from_raw(&[0.0; RAW_ATTRIBUTES]);
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.scale, [1.0; 3]);
        assert_eq!(a.offset, [0.0; 3]);
        assert_eq!(a.rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decoded_attributes_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for _ in 0..1000 {
            let raw: [f64; RAW_ATTRIBUTES] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
            let a = GaussianAttributes::from_raw(&raw);
            assert!((0.0..=1.0).contains(&a.opacity));
            assert!(a.scale.iter().all(|&s| s > 0.0));
            let qn: f64 = a.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((qn - 1.0).abs() <= 1e-9);
            assert!(a.offset.iter().all(|v| v.abs() <= 0.05));
        }
    }

    #[test]
    fn decoder_rejects_row_mismatch() {
        let dec = GaussianDecoder::<f64>::seeded(1, 2, 3);
        let cloud = PointCloud3D::new(vec![[0.0; 3]; 4]);
        let f_t = Tensor::zeros(vec![3, 6]);
        let f_l = Tensor::zeros(vec![4, 3]);
        assert!(dec.decode(&f_t, &f_l, &cloud).is_err());
        let f_t = Tensor::zeros(vec![4, 6]);
        assert_eq!(dec.decode(&f_t, &f_l, &cloud).unwrap().len(), 4);
    }

    #[test]
    fn f32_encoder_tracks_f64() {
        let e64 = ReferenceEncoder::<f64>::with_config(7, small()).unwrap();
        let e32 = ReferenceEncoder::<f32>::with_config(7, small()).unwrap();
        let img = test_image(16, 16, 4);
        let a = e64.encode(&img).unwrap();
        let b = e32.encode(&img.cast::<f32>()).unwrap();
        for (p, q) in a.points().iter().zip(b.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k] as f64).abs() < 1e-4);
            }
        }
    }
}
