//! Noise schedule, training objective, guidance and samplers.
//!
//! The network works in the centred data space `y = 2x - 1`; [`to_model_space`]
//! and [`from_model_space`] convert between spectrogram values and it.

use apa_numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{predict_noise, AdapterParams, BaseParams, Net, TEXT_EMBED};
use crate::conditioning::{encode_text, encode_text_on_tape, AudioFeatures, TextFeatures};
use crate::error::{contract, ApaError, Result};
use crate::params::{Bound, ParamStore};
use crate::synthdata::{ConditionTokens, Spectrogram, FRAMES, FREQ_BINS};

/// Default number of training timesteps.
pub const T_TRAIN: usize = 200;
/// Default number of sampling steps.
pub const SAMPLE_STEPS: usize = 50;
/// Default guidance scale.
pub const DEFAULT_LAMBDA: f32 = 7.5;
/// Largest per-step variance kept after rescaling short schedules.
const MAX_VARIANCE: f64 = 0.999;

/// Per-step signal retention: `bar_beta[t]` is the fraction of signal
/// variance left after `t + 1` noising steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    variances: Vec<f64>,
    bar_beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear per-step variances in `[1e-4, 0.02]` rescaled by `1000 / t_train`
    /// so short schedules end as noisy as the 1000-step reference.
    pub fn linear(t_train: usize) -> Result<Self> {
        if t_train < 2 {
            return Err(contract(format!("a schedule needs at least 2 steps, got {t_train}")));
        }
        let scale = 1000.0 / t_train as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let variances: Vec<f64> = (0..t_train)
            .map(|i| (lo + (hi - lo) * i as f64 / (t_train - 1) as f64).min(MAX_VARIANCE))
            .collect();
        Ok(Self::from_variances(variances))
    }

    fn from_variances(variances: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let bar_beta = variances
            .iter()
            .map(|v| {
                acc *= 1.0 - v;
                acc
            })
            .collect();
        Self { variances, bar_beta }
    }

    /// Schedule with explicitly given retention values (must lie in `[0, 1]`).
    pub fn from_bar_beta(bar_beta: Vec<f64>) -> Result<Self> {
        if bar_beta.len() < 2 || bar_beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(contract("retention values must be in [0, 1] with at least 2 steps"));
        }
        let mut prev = 1.0;
        let variances = bar_beta
            .iter()
            .map(|&b| {
                let v = if prev > 0.0 { 1.0 - b / prev } else { 1.0 };
                prev = b;
                v
            })
            .collect();
        Ok(Self { variances, bar_beta })
    }

    pub fn t_train(&self) -> usize {
        self.bar_beta.len()
    }

    pub fn bar_beta(&self, t: usize) -> f64 {
        self.bar_beta[t]
    }

    pub fn bar_betas(&self) -> &[f64] {
        &self.bar_beta
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_train() {
            return Err(contract(format!("timestep {t} outside [0, {})", self.t_train())));
        }
        Ok(())
    }

    /// `steps` evenly strided timesteps in increasing order; `steps ==
    /// t_train` gives every timestep.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.t_train();
        if steps == 0 || steps > n {
            return Err(contract(format!("sampling steps must be in [1, {n}], got {steps}")));
        }
        Ok((0..steps).map(|i| i * n / steps).collect())
    }
}

/// `make_schedule` with the linear kind.
pub fn make_schedule(t_train: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_train)
}

/// `sqrt(bar_beta_t) x + sqrt(1 - bar_beta_t) eps`.
pub fn forward_noise(x: &Tensor<f32>, t: usize, eps: &Tensor<f32>, schedule: &NoiseSchedule) -> Result<Tensor<f32>> {
    schedule.check_t(t)?;
    let b = schedule.bar_beta(t);
    let (s, n) = (b.sqrt(), (1.0 - b).sqrt());
    x.zip_map(eps, "forward_noise", |a, e| (s * a as f64 + n * e as f64) as f32)
        .map_err(|e| ApaError::Dimension(e.to_string()))
}

pub fn to_model_space(x: &Spectrogram) -> Tensor<f32> {
    Tensor::from_fn([FREQ_BINS, FRAMES], |i| 2.0 * x.values()[i] - 1.0)
}

/// Inverse of [`to_model_space`], clamped to `[0, 1]`.
pub fn from_model_space(y: &Tensor<f32>) -> Result<Spectrogram> {
    Spectrogram::from_values(y.data().iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// One training example with conditions already pooled and dropped.
#[derive(Clone, Debug)]
pub struct TrainExample {
    /// Clean data in model space, `[FREQ_BINS, FRAMES]`.
    pub x0: Tensor<f32>,
    pub tokens: ConditionTokens,
    pub audio: Option<AudioFeatures>,
}

/// Which network and which of its tensors the loss is differentiated for.
pub struct LossModel<'a> {
    pub base: &'a BaseParams,
    pub adapter: Option<&'a AdapterParams>,
    pub alpha: f32,
    pub trainable: &'a dyn Fn(&str) -> bool,
}

/// Loss of one example at timestep `t` with noise `eps`; gradients for the
/// trainable tensors are added into `grads` scaled by `weight`.
pub fn example_loss(
    model: &LossModel<'_>,
    schedule: &NoiseSchedule,
    ex: &TrainExample,
    t: usize,
    eps: &Tensor<f32>,
    grads: Option<(&mut ParamStore, f32)>,
) -> Result<f64> {
    let x_t = forward_noise(&ex.x0, t, eps, schedule)?;
    let mut tape = Tape::new();
    let mut stores = vec![&model.base.store];
    stores.extend(model.adapter.map(|a| &a.store));
    let want_grads = grads.is_some();
    let bound = Bound::new(&mut tape, &stores, &|n| want_grads && (model.trainable)(n))?;
    let net = Net { cfg: &model.base.config, params: &bound };
    let cells = FREQ_BINS * FRAMES;
    let x = tape.constant(x_t.reshape([cells, 1])?);
    let c_y = encode_text_on_tape(&mut tape, bound.var(TEXT_EMBED)?, &ex.tokens)?;
    let c_x = ex.audio.as_ref().map(|f| tape.constant(f.seq().clone()));
    let eps_hat = net.forward(&mut tape, x, t, c_y, c_x, model.alpha)?;
    let target = tape.constant(eps.clone().reshape([cells, 1])?);
    let loss = tape.mse(eps_hat, target)?;
    let value = tape.value(loss).data()[0] as f64;
    if let Some((acc, weight)) = grads {
        let g = tape.backward(loss)?;
        for (name, var) in bound.iter() {
            if !tape.requires_grad(var) {
                continue;
            }
            let Some(d) = g.get(var) else { continue };
            if !acc.contains(name) {
                acc.insert(name, Tensor::zeros(d.shape()));
            }
            for (a, &v) in acc.get_mut(name)?.data_mut().iter_mut().zip(d.data()) {
                *a += weight * v;
            }
        }
    }
    Ok(value)
}

/// Draws `(t, eps)` for every example in order: `t` uniform, `eps` standard normal.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, schedule: &NoiseSchedule) -> Vec<(usize, Tensor<f32>)> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(0..schedule.t_train());
            (t, standard_normal(rng, &[FREQ_BINS, FRAMES]))
        })
        .collect()
}

/// Mean per-element squared noise error over `batch`; with `grads`, the
/// gradient of that mean is accumulated example by example in batch order.
pub fn training_loss<R: Rng + ?Sized>(
    model: &LossModel<'_>,
    schedule: &NoiseSchedule,
    batch: &[TrainExample],
    rng: &mut R,
    mut grads: Option<&mut ParamStore>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("training batch is empty"));
    }
    let draws = draw_noise(rng, batch.len(), schedule);
    let weight = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    for (ex, (t, eps)) in batch.iter().zip(&draws) {
        total += example_loss(model, schedule, ex, *t, eps, grads.as_deref_mut().map(|g| (g, weight)))?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Null caption in the negative branch.
    Standard,
    /// Caller-supplied caption in the negative branch.
    NegativePrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f32,
    pub mode: GuidanceMode,
    pub negative: ConditionTokens,
}

impl GuidanceConfig {
    pub fn standard(lambda: f32) -> Self {
        Self { lambda, mode: GuidanceMode::Standard, negative: ConditionTokens::null() }
    }

    pub fn negative_prompt(lambda: f32, negative: ConditionTokens) -> Self {
        Self { lambda, mode: GuidanceMode::NegativePrompt, negative }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(contract(format!("guidance scale must be finite and >= 0, got {}", self.lambda)));
        }
        self.negative.validate()
    }

    fn negative_tokens(&self) -> ConditionTokens {
        match self.mode {
            GuidanceMode::Standard => ConditionTokens::null(),
            GuidanceMode::NegativePrompt => self.negative,
        }
    }
}

/// Positive conditions of a sampling run.
#[derive(Clone, Debug)]
pub struct Conditions {
    pub tokens: ConditionTokens,
    pub audio: Option<AudioFeatures>,
    pub alpha: f32,
}

impl Conditions {
    pub fn unconditional() -> Self {
        Self { tokens: ConditionTokens::null(), audio: None, alpha: 0.0 }
    }
}

/// A model plus pre-encoded positive and negative captions.
pub struct Guided<'a> {
    pub base: &'a BaseParams,
    pub adapter: Option<&'a AdapterParams>,
    pub positive: TextFeatures,
    pub negative: TextFeatures,
    pub audio: Option<&'a AudioFeatures>,
    pub alpha: f32,
    pub lambda: f32,
}

impl<'a> Guided<'a> {
    pub fn new(
        base: &'a BaseParams,
        adapter: Option<&'a AdapterParams>,
        cond: &'a Conditions,
        guidance: &GuidanceConfig,
    ) -> Result<Self> {
        guidance.validate()?;
        if !cond.alpha.is_finite() || cond.alpha < 0.0 {
            return Err(contract(format!("audio prompt scale must be finite and >= 0, got {}", cond.alpha)));
        }
        let enc = base.encoder()?;
        Ok(Self {
            base,
            adapter,
            positive: encode_text(&cond.tokens, &enc)?,
            negative: encode_text(&guidance.negative_tokens(), &enc)?,
            audio: cond.audio.as_ref(),
            alpha: cond.alpha,
            lambda: guidance.lambda,
        })
    }

    pub fn positive(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        predict_noise(x_t, t, &self.positive, self.audio, self.alpha, self.base, self.adapter)
    }

    /// The negative branch sees no audio.
    pub fn negative(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        predict_noise(x_t, t, &self.negative, None, 0.0, self.base, self.adapter)
    }

    /// `(1 - lambda) eps_neg + lambda eps_pos`, the same affine combination as
    /// `eps_neg + lambda (eps_pos - eps_neg)` but exact at `lambda` 0 and 1.
    pub fn predict(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        // The other branch has weight exactly zero at these two scales.
        if self.lambda == 1.0 {
            return self.positive(x_t, t);
        }
        if self.lambda == 0.0 {
            return self.negative(x_t, t);
        }
        let pos = self.positive(x_t, t)?;
        let neg = self.negative(x_t, t)?;
        Ok(combine_guidance(&pos, &neg, self.lambda))
    }
}

pub fn combine_guidance(pos: &Tensor<f32>, neg: &Tensor<f32>, lambda: f32) -> Tensor<f32> {
    let l = lambda as f64;
    pos.zip_map(neg, "guidance", |p, n| ((1.0 - l) * n as f64 + l * p as f64) as f32)
        .expect("branches share a shape")
}

/// Guided noise prediction for one step.
pub fn guided_noise_prediction(
    x_t: &Tensor<f32>,
    t: usize,
    cond: &Conditions,
    guidance: &GuidanceConfig,
    base: &BaseParams,
    adapter: Option<&AdapterParams>,
) -> Result<Tensor<f32>> {
    Guided::new(base, adapter, cond, guidance)?.predict(x_t, t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Variance-free updates.
    #[default]
    Deterministic,
    /// Fresh schedule-scaled noise at every step.
    Ancestral,
}

#[derive(Clone, Debug)]
pub struct SampleOptions<'a> {
    pub steps: usize,
    pub mode: SamplerMode,
    pub seed: u64,
    /// Start from a partially noised clip instead of pure noise.
    pub init: Option<(&'a Spectrogram, f64)>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub clip: Spectrogram,
    /// Timesteps visited, in the order they were denoised.
    pub timesteps: Vec<usize>,
}

/// Sub-schedule entry closest to `strength * t_train`; ties go to the
/// smaller timestep.
pub fn strength_timestep(sub: &[usize], strength: f64, t_train: usize) -> usize {
    let target = strength * t_train as f64;
    let mut best = sub[0];
    for &t in sub {
        if (t as f64 - target).abs() < (best as f64 - target).abs() {
            best = t;
        }
    }
    best
}

pub fn sample(
    guided: &Guided<'_>,
    schedule: &NoiseSchedule,
    opts: &SampleOptions<'_>,
) -> Result<SampleOutput> {
    if opts.steps > schedule.t_train() {
        return Err(contract(format!("{} sampling steps exceed {} training steps", opts.steps, schedule.t_train())));
    }
    let sub = schedule.sub_schedule(opts.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = standard_normal(&mut rng, &[FREQ_BINS, FRAMES]);
    let (mut x, start) = match opts.init {
        None => (noise, *sub.last().expect("non-empty sub-schedule")),
        Some((clip, strength)) => {
            if !(strength > 0.0 && strength <= 1.0) {
                return Err(contract(format!("init strength must be in (0, 1], got {strength}")));
            }
            let t = strength_timestep(&sub, strength, schedule.t_train());
            (forward_noise(&to_model_space(clip), t, &noise, schedule)?, t)
        }
    };
    let visit: Vec<usize> = sub.iter().rev().copied().filter(|&t| t <= start).collect();
    for (i, &t) in visit.iter().enumerate() {
        let eps = guided.predict(&x, t)?;
        let b = schedule.bar_beta(t);
        let b_prev = visit.get(i + 1).map_or(1.0, |&p| schedule.bar_beta(p));
        let x0: Vec<f64> =
            x.data().iter().zip(eps.data()).map(|(&xt, &e)| (xt as f64 - (1.0 - b).sqrt() * e as f64) / b.sqrt()).collect();
        let sigma = match opts.mode {
            SamplerMode::Deterministic => 0.0,
            SamplerMode::Ancestral => ((1.0 - b_prev) / (1.0 - b) * (1.0 - b / b_prev)).max(0.0).sqrt(),
        };
        let dir = (1.0 - b_prev - sigma * sigma).max(0.0).sqrt();
        let fresh = (sigma > 0.0).then(|| standard_normal(&mut rng, &[FREQ_BINS, FRAMES]));
        let data = x
            .data_mut()
            .iter_mut()
            .zip(eps.data())
            .zip(&x0)
            .enumerate()
            .map(|(j, ((xt, &e), &x0))| (xt, b_prev.sqrt() * x0 + dir * e as f64 + sigma * fresh.as_ref().map_or(0.0, |z| z.data()[j] as f64)));
        for (xt, v) in data {
            *xt = v as f32;
        }
        if !x.is_finite() {
            return Err(ApaError::Diverged(format!("sampler produced non-finite values at timestep {t}")));
        }
    }
    Ok(SampleOutput { clip: from_model_space(&x)?, timesteps: visit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, UNetConfig};
    use crate::synthdata::Task;

    #[test]
    fn schedule_shape() {
        let s = make_schedule(T_TRAIN).unwrap();
        assert!(s.bar_betas().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.bar_beta(0), 1.0 - s.variances()[0]);
        assert!((s.variances()[0] - 5e-4).abs() < 1e-15);
        assert!((s.variances()[T_TRAIN - 1] - 0.1).abs() < 1e-12);
        // Independent product in log space.
        let log: f64 = (0..T_TRAIN).map(|i| (1.0 - (5e-4 + (0.1 - 5e-4) * i as f64 / 199.0)).ln()).sum();
        assert!((s.bar_beta(T_TRAIN - 1) - log.exp()).abs() < 1e-12);
        assert!(s.bar_beta(T_TRAIN - 1) < 0.01);
        assert!(make_schedule(1).is_err());
    }

    #[test]
    fn sub_schedule_strides() {
        let s = make_schedule(T_TRAIN).unwrap();
        assert_eq!(s.sub_schedule(T_TRAIN).unwrap(), (0..T_TRAIN).collect::<Vec<_>>());
        let sub = s.sub_schedule(50).unwrap();
        assert_eq!(sub.len(), 50);
        assert!(sub.iter().enumerate().all(|(i, &t)| t == 4 * i));
        assert!(s.sub_schedule(201).is_err());
        assert_eq!(strength_timestep(&sub, 0.75, T_TRAIN), 148);
        assert_eq!(strength_timestep(&sub, 0.05, T_TRAIN), 8);
    }

    #[test]
    fn forward_noise_extremes() {
        let s = NoiseSchedule::from_bar_beta(vec![1.0, 0.5, 0.0]).unwrap();
        let x = Tensor::from_fn([2, 3], |i| i as f32);
        let e = Tensor::from_fn([2, 3], |i| -(i as f32) - 0.5);
        assert_eq!(forward_noise(&x, 0, &e, &s).unwrap(), x);
        assert_eq!(forward_noise(&x, 2, &e, &s).unwrap(), e);
        let bad = Tensor::zeros([3, 2]);
        assert!(matches!(forward_noise(&x, 1, &bad, &s), Err(ApaError::Dimension(_))));
    }

    #[test]
    fn forward_noise_preserves_variance() {
        let s = make_schedule(T_TRAIN).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = standard_normal(&mut rng, &[100, 100]);
        let e = standard_normal(&mut rng, &[100, 100]);
        for t in [0, 60, 199] {
            let y = forward_noise(&x, t, &e, &s).unwrap();
            let n = y.numel() as f64;
            let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    fn tiny() -> (BaseParams, AdapterParams) {
        init_params(&UNetConfig::default(), 8).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut tape = Tape::<f32>::new();
        let e = tape.constant(Tensor::from_fn([4, 4], |i| i as f32 * 0.3));
        let l = tape.mse(e, e).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn initial_loss_is_near_unit() {
        let (base, _) = tiny();
        let s = make_schedule(T_TRAIN).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<_> = (0..8)
            .map(|_| TrainExample { x0: standard_normal(&mut rng, &[FREQ_BINS, FRAMES]), tokens: ConditionTokens::null(), audio: None })
            .collect();
        let model = LossModel { base: &base, adapter: None, alpha: 0.0, trainable: &|_| false };
        let a = training_loss(&model, &s, &batch, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        let b = training_loss(&model, &s, &batch, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        assert_eq!(a, b);
        assert!((a - 1.0).abs() < 0.3, "{a}");
        assert!(training_loss(&model, &s, &[], &mut rng, None).is_err());
    }

    #[test]
    fn guidance_endpoints_and_affinity() {
        let (base, adapter) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = standard_normal(&mut rng, &[FREQ_BINS, FRAMES]);
        let cond = Conditions {
            tokens: ConditionTokens::for_target(Task::Texture, 1, crate::synthdata::Timbre::Dark).unwrap(),
            audio: None,
            alpha: 0.0,
        };
        let neg = ConditionTokens::low_quality(Task::Texture);
        let at = |lambda| {
            guided_noise_prediction(&x, 30, &cond, &GuidanceConfig::negative_prompt(lambda, neg), &base, Some(&adapter))
                .unwrap()
        };
        let g = Guided::new(&base, Some(&adapter), &cond, &GuidanceConfig::negative_prompt(1.0, neg)).unwrap();
        assert_eq!(at(1.0), g.positive(&x, 30).unwrap());
        assert_eq!(at(0.0), g.negative(&x, 30).unwrap());
        let (a, b, c) = (at(2.0), at(4.5), at(7.0));
        for i in 0..a.numel() {
            let lhs = a.data()[i] as f64 + c.data()[i] as f64;
            assert!((lhs - 2.0 * b.data()[i] as f64).abs() < 1e-5 * (1.0 + lhs.abs()));
        }
        assert!(GuidanceConfig::standard(-1.0).validate().is_err());
    }

    #[test]
    fn deterministic_sampler_is_reproducible() {
        let (base, _) = tiny();
        let s = make_schedule(T_TRAIN).unwrap();
        let cond = Conditions::unconditional();
        let g = Guided::new(&base, None, &cond, &GuidanceConfig::standard(1.0)).unwrap();
        let opts = SampleOptions { steps: 5, mode: SamplerMode::Deterministic, seed: 3, init: None };
        let a = sample(&g, &s, &opts).unwrap();
        let b = sample(&g, &s, &opts).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.timesteps, vec![160, 120, 80, 40, 0]);
        assert!(a.clip.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let anc = sample(&g, &s, &SampleOptions { mode: SamplerMode::Ancestral, ..opts.clone() }).unwrap();
        assert_ne!(anc.clip, a.clip);
        let clip = Spectrogram::zeros();
        let init = sample(&g, &s, &SampleOptions { init: Some((&clip, 0.75)), steps: 50, ..opts.clone() }).unwrap();
        assert_eq!(init.timesteps.first(), Some(&148));
        assert!(sample(&g, &s, &SampleOptions { steps: 300, ..opts }).is_err());
    }
}
