//! Sign-gradient projected descent that embeds a geometry cloak.
//!
//! Every mode runs the same loop on a scalar objective `L`:
//!
//! ```text
//! for i in 1..=N:
//!     I_hat <- I_hat - alpha * sgn(grad L(I_hat))      (masked pixels only)
//!     I_hat <- clip(I_hat, I - eps, I + eps)
//!     I_hat <- clip(I_hat, 0, 1)
//! ```
//!
//! * `targeted`: `L = CD(project(E(I_hat), view), pattern)`, or the 3-D
//!   Chamfer distance when the pattern is a customized 3-D cloud.
//! * `untargeted-geometry`: `L = -|E(I_hat) - E(I)|^2`.
//! * `adv-image`: `L = -|F(I_hat) - F(I)|^2` with `F` the encoder's conv
//!   feature map.
//!
//! Minimizing the negated deviation is the same as sign-gradient ascent on
//! the deviation. The deviation has zero gradient at the clean image, so the
//! two untargeted modes start from a seeded uniform point of the eps-ball;
//! the targeted mode starts from the clean image.
//!
//! The loss trace records `L` after each update; the returned image is the
//! iterate with the lowest recorded loss (earliest on ties).

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderVars, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::geometry::ViewDirection;
use crate::image::{Image, Mask};
use crate::ndiff::{Tape, Tensor, Var};
use crate::patterns::{Pattern, PatternPoints};
use crate::scalar::{sign, Scalar};

pub const DEFAULT_EPS: f64 = 8.0;
pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_STEPS: usize = 100;

/// Slack allowed on `|delta|_inf` beyond `eps / 255`.
pub const BUDGET_SLACK: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloakMode {
    Targeted,
    UntargetedGeometry,
    AdvImage,
    GaussNoise,
}

impl CloakMode {
    pub const ALL: [CloakMode; 4] = [
        CloakMode::Targeted,
        CloakMode::UntargetedGeometry,
        CloakMode::AdvImage,
        CloakMode::GaussNoise,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CloakMode::Targeted => "targeted",
            CloakMode::UntargetedGeometry => "untargeted-geometry",
            CloakMode::AdvImage => "adv-image",
            CloakMode::GaussNoise => "gauss-noise",
        }
    }
}

impl fmt::Display for CloakMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CloakMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CloakMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected targeted, untargeted-geometry, adv-image or gauss-noise"
                ))
            })
    }
}

/// Inputs of one cloaking run. `eps` is in 8-bit units (8 means 8/255).
#[derive(Clone, Debug)]
pub struct CloakConfig<T> {
    pub mode: CloakMode,
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub view: Option<ViewDirection>,
    pub pattern: Option<Pattern<T>>,
    pub seed: u64,
}

impl<T: Scalar> CloakConfig<T> {
    pub fn new(mode: CloakMode) -> Self {
        Self {
            mode,
            eps: DEFAULT_EPS,
            alpha: DEFAULT_ALPHA,
            steps: DEFAULT_STEPS,
            view: None,
            pattern: None,
            seed: 0,
        }
    }

    pub fn targeted(pattern: Pattern<T>, view: ViewDirection) -> Self {
        Self {
            view: Some(view),
            pattern: Some(pattern),
            ..Self::new(CloakMode::Targeted)
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Budget on the `[0, 1]` scale.
    pub fn budget(&self) -> f64 {
        self.eps / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.mode == CloakMode::Targeted {
            let Some(pattern) = &self.pattern else {
                return Err(Error::Config("targeted mode requires a pattern".into()));
            };
            if pattern.is_empty() {
                return Err(Error::EmptyCloud("pattern"));
            }
            if pattern.dimension() == 2 && self.view.is_none() {
                return Err(Error::Config("a 2-D pattern requires a view direction".into()));
            }
        }
        Ok(())
    }
}

/// Outcome of one cloaking run.
#[derive(Clone, Debug)]
pub struct CloakResult<T> {
    /// The cloaked image (best iterate).
    pub image: Image<T>,
    /// `image - original`, planar.
    pub perturbation: Vec<T>,
    /// Loss at the starting point, before any update.
    pub initial_loss: T,
    /// Loss after each of the `steps` updates.
    pub loss_trace: Vec<T>,
    pub best_index: usize,
    pub elapsed: Duration,
}

impl<T: Scalar> CloakResult<T> {
    pub fn linf(&self) -> T {
        self.perturbation.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn best_loss(&self) -> T {
        self.loss_trace[self.best_index]
    }
}

/// Runs the mode named by `config`. `mask = None` means every pixel is
/// foreground.
pub fn cloak<T: Scalar>(
    image: &Image<T>,
    mask: Option<&Mask>,
    encoder: &ReferenceEncoder<T>,
    config: &CloakConfig<T>,
) -> Result<CloakResult<T>> {
    cloak_observed(image, mask, encoder, config, &mut |_, _| {})
}

/// [`cloak`] with a callback on every iterate. The Gaussian-noise baseline
/// has a single iterate, reported as index 0.
pub fn cloak_observed<T: Scalar>(
    image: &Image<T>,
    mask: Option<&Mask>,
    encoder: &ReferenceEncoder<T>,
    config: &CloakConfig<T>,
    observer: &mut Observer<'_, T>,
) -> Result<CloakResult<T>> {
    match config.mode {
        CloakMode::Targeted => targeted(image, mask, encoder, config, observer),
        CloakMode::UntargetedGeometry | CloakMode::AdvImage => untargeted(image, mask, encoder, config, observer),
        CloakMode::GaussNoise => {
            encoder.check_image(image)?;
            let r = gauss_noise(image, mask, config)?;
            observer(0, &r.image);
            Ok(r)
        }
    }
}

fn full_mask<T: Scalar>(image: &Image<T>, mask: Option<&Mask>) -> Result<Mask> {
    match mask {
        Some(m) if m.height() != image.height() || m.width() != image.width() => Err(Error::shape(
            "mask",
            format!(
                "{}x{} mask for a {}x{} image",
                m.height(),
                m.width(),
                image.height(),
                image.width()
            ),
        )),
        Some(m) => Ok(m.clone()),
        None => Ok(Mask::all(image.height(), image.width())),
    }
}

/// Projects `current` onto the eps-ball around `original`, then onto [0, 1].
fn clip_to_budget<T: Scalar>(current: &mut [T], original: &[T], budget: T) {
    for (v, &o) in current.iter_mut().zip(original) {
        *v = v.max(o - budget).min(o + budget).max(T::zero()).min(T::one());
    }
}

fn within_budget<T: Scalar>(current: &[T], original: &[T], budget: f64) -> bool {
    current.iter().zip(original).all(|(&v, &o)| {
        (v - o).abs().as_f64() <= budget + BUDGET_SLACK && v >= T::zero() && v <= T::one()
    })
}

fn non_finite_at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { iteration },
        other => other,
    }
}

type LossFn<'a, T> = dyn Fn(&mut Tape<T>, &EncoderVars) -> Result<Var> + 'a;

/// Called with `(update index, iterate)` after every projected update.
pub type Observer<'a, T> = dyn FnMut(usize, &Image<T>) + 'a;

fn pgd<T: Scalar>(
    original: &Image<T>,
    start: Image<T>,
    mask: &Mask,
    encoder: &ReferenceEncoder<T>,
    config: &CloakConfig<T>,
    objective: &LossFn<'_, T>,
    observer: &mut Observer<'_, T>,
) -> Result<CloakResult<T>> {
    let started = Instant::now();
    let budget = T::lit(config.budget());
    let alpha = T::lit(config.alpha);

    let mut current = start;
    let (mut loss, mut grad) = encoder
        .loss_and_gradient(&current, objective)
        .map_err(non_finite_at(0))?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let initial_loss = loss;

    let mut trace = Vec::with_capacity(config.steps);
    let mut best: Option<(usize, T, Image<T>)> = None;
    for i in 0..config.steps {
        let mut step: Vec<T> = grad.iter().map(|&g| alpha * sign(g)).collect();
        mask.apply(&mut step)?;
        for (v, s) in current.data_mut().iter_mut().zip(&step) {
            *v = *v - *s;
        }
        clip_to_budget(current.data_mut(), original.data(), budget);
        debug_assert!(within_budget(current.data(), original.data(), config.budget()));
        observer(i, &current);

        let iteration = i + 1;
        if iteration < config.steps {
            (loss, grad) = encoder
                .loss_and_gradient(&current, objective)
                .map_err(non_finite_at(iteration))?;
        } else {
            loss = encoder.loss(&current, objective).map_err(non_finite_at(iteration))?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|(_, b, _)| loss < *b) {
            best = Some((i, loss, current.clone()));
        }
    }

    let (best_index, _, image) = best.expect("at least one step");
    let perturbation = image
        .data()
        .iter()
        .zip(original.data())
        .map(|(&a, &b)| a - b)
        .collect();
    Ok(CloakResult {
        image,
        perturbation,
        initial_loss,
        loss_trace: trace,
        best_index,
        elapsed: started.elapsed(),
    })
}

/// View-specific targeted cloak: pulls the projected reconstruction toward
/// the configured pattern.
pub fn cloak_targeted<T: Scalar>(
    image: &Image<T>,
    mask: Option<&Mask>,
    encoder: &ReferenceEncoder<T>,
    config: &CloakConfig<T>,
) -> Result<CloakResult<T>> {
    targeted(image, mask, encoder, config, &mut |_, _| {})
}

fn targeted<T: Scalar>(
    image: &Image<T>,
    mask: Option<&Mask>,
    encoder: &ReferenceEncoder<T>,
    config: &CloakConfig<T>,
    observer: &mut Observer<'_, T>,
) -> Result<CloakResult<T>> {
    if config.mode != CloakMode::Targeted {
        return Err(Error::Config(format!("cloak_targeted called with mode {}", config.mode)));
    }
    config.validate()?;
    encoder.check_image(image)?;
    let mask = full_mask(image, mask)?;
    let pattern = config.pattern.as_ref().expect("validated");
    let target = Tensor::new(vec![pattern.len(), pattern.dimension()], pattern.to_flat())?;
    let projection = match (&pattern.points, config.view) {
        (PatternPoints::Planar(_), Some(view)) => Some(Tensor::new(vec![3, 2], view.matrix::<T>().to_vec())?),
        _ => None,
    };
    let objective = move |tape: &mut Tape<T>, vars: &EncoderVars| -> Result<Var> {
        let target = tape.constant(target.clone());
        let cloud = match &projection {
            Some(m) => {
                let m = tape.constant(m.clone());
                tape.matmul(vars.points, m)?
            }
            None => vars.points,
        };
        tape.chamfer(cloud, target)
    };
    pgd(image, image.clone(), &mask, encoder, config, &objective, observer)
}

/// Uniform random start inside the eps-ball on masked pixels.
fn random_start<T: Scalar>(image: &Image<T>, mask: &Mask, budget: f64, seed: u64) -> Result<Image<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<T> = image
        .data()
        .iter()
        .map(|_| T::lit(rng.random_range(-budget..=budget)))
        .collect();
    mask.apply(&mut noise)?;
    let mut start = image.clone();
    for (v, n) in start.data_mut().iter_mut().zip(&noise) {
        *v = *v + *n;
    }
    clip_to_budget(start.data_mut(), image.data(), T::lit(budget));
    Ok(start)
}

/// Untargeted baselines: maximize the deviation of the reconstruction
/// (`untargeted-geometry`) or of the conv features (`adv-image`) from their
/// clean values.
pub fn cloak_untargeted<T: Scalar>(
    image: &Image<T>,
    mask: Option<&Mask>,
    encoder: &ReferenceEncoder<T>,
    config: &CloakConfig<T>,
) -> Result<CloakResult<T>> {
    untargeted(image, mask, encoder, config, &mut |_, _| {})
}

fn untargeted<T: Scalar>(
    image: &Image<T>,
    mask: Option<&Mask>,
    encoder: &ReferenceEncoder<T>,
    config: &CloakConfig<T>,
    observer: &mut Observer<'_, T>,
) -> Result<CloakResult<T>> {
    let use_features = match config.mode {
        CloakMode::UntargetedGeometry => false,
        CloakMode::AdvImage => true,
        other => return Err(Error::Config(format!("cloak_untargeted called with mode {other}"))),
    };
    config.validate()?;
    encoder.check_image(image)?;
    let mask = full_mask(image, mask)?;
    let (cloud, features) = encoder.encode_with_features(image)?;
    let reference = if use_features {
        features
    } else {
        Tensor::new(vec![cloud.len(), 3], cloud.to_flat())?
    };
    let objective = move |tape: &mut Tape<T>, vars: &EncoderVars| -> Result<Var> {
        let clean = tape.constant(reference.clone());
        let current = if use_features { vars.features } else { vars.points };
        let dev = tape.sub(current, clean)?;
        let sq = tape.square(dev)?;
        let total = tape.sum(sq)?;
        tape.scale(total, -T::one())
    };
    let start = random_start(image, &mask, config.budget(), config.seed)?;
    pgd(image, start, &mask, encoder, config, &objective, observer)
}

/// Gaussian-noise baseline: `delta = clip(sigma * g, +-eps)` with
/// `sigma = eps`, on masked pixels, then clipped to [0, 1].
pub fn gauss_noise<T: Scalar>(image: &Image<T>, mask: Option<&Mask>, config: &CloakConfig<T>) -> Result<CloakResult<T>> {
    if config.mode != CloakMode::GaussNoise {
        return Err(Error::Config(format!("gauss_noise called with mode {}", config.mode)));
    }
    config.validate()?;
    let started = Instant::now();
    let mask = full_mask(image, mask)?;
    let budget = config.budget();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise: Vec<T> = image
        .data()
        .iter()
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            T::lit((budget * g).clamp(-budget, budget))
        })
        .collect();
    mask.apply(&mut noise)?;
    let mut out = image.clone();
    for (v, n) in out.data_mut().iter_mut().zip(&noise) {
        *v = (*v + *n).max(T::zero()).min(T::one());
    }
    let perturbation = out
        .data()
        .iter()
        .zip(image.data())
        .map(|(&a, &b)| a - b)
        .collect();
    Ok(CloakResult {
        image: out,
        perturbation,
        initial_loss: T::zero(),
        loss_trace: vec![T::zero(); config.steps],
        best_index: 0,
        elapsed: started.elapsed(),
    })
}
