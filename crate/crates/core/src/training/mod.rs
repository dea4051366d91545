//! Two-stage training: the caption-conditioned base network first, then the
//! audio adapters alone on top of the frozen base.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use apa_numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{sha256_hex, store_hash, Checkpoint, Manifest, TensorEntry, CHECKPOINT_VERSION};

use crate::backbone::{init_adapter_from_text, init_params, AdapterParams, BaseParams, UNetConfig, AUDIO_PROJ};
use crate::conditioning::{drop_conditions, encode_audio, pool_features, AudioFeatures, POOLING_RATES};
use crate::diffusion::{make_schedule, to_model_space, training_loss, LossModel, NoiseSchedule, TrainExample, T_TRAIN};
use crate::error::{contract, ApaError, Result};
use crate::params::ParamStore;
use crate::synthdata::{caption_tokens, ConditionTokens, Record, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub log_every: usize,
    pub t_train: usize,
}

impl TrainConfig {
    pub fn base() -> Self {
        Self {
            stage: Stage::Base,
            steps: 20_000,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            dropout: 0.05,
            seed: 0,
            log_every: 100,
            t_train: T_TRAIN,
        }
    }

    pub fn adapter() -> Self {
        Self { stage: Stage::Adapter, steps: 5_000, ..Self::base() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(contract("steps, batch size and log interval must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.dropout) {
            return Err(contract("weight decay must be >= 0 and dropout in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean batch loss over the steps since the previous entry.
    pub loss: f64,
}

/// Adam moments with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    /// Updates every tensor of `params` that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(contract(format!("gradient for '{name}' has the wrong shape")));
            }
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.shape()));
                self.v.insert(name, Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let (mf, vf) = (self.beta1 * *mi as f64 + (1.0 - self.beta1) * gi, self.beta2 * *vi as f64 + (1.0 - self.beta2) * gi * gi);
                *mi = mf as f32;
                *vi = vf as f32;
                let update = (mf / c1) / ((vf / c2).sqrt() + self.eps) + self.weight_decay * *w as f64;
                *w = (*w as f64 - self.lr * update) as f32;
            }
        }
        Ok(())
    }
}

fn random_caption<R: Rng + ?Sized>(rng: &mut R, rec: &Record) -> ConditionTokens {
    caption_tokens(&rec.spec, Task::ALL[rng.random_range(0..Task::ALL.len())])
}

struct Loop<'a> {
    config: &'a TrainConfig,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
    log: Vec<LogEntry>,
    window: (f64, usize),
}

impl<'a> Loop<'a> {
    fn new(config: &'a TrainConfig, records: &[Record]) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(contract("training dataset is empty"));
        }
        Ok(Self {
            config,
            schedule: make_schedule(config.t_train)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            log: Vec::new(),
            window: (0.0, 0),
        })
    }

    fn record(&mut self, step: usize, loss: f64, progress: &mut dyn FnMut(&LogEntry)) -> Result<()> {
        if !loss.is_finite() {
            return Err(ApaError::Diverged(format!("loss became {loss} at step {step}")));
        }
        self.window.0 += loss;
        self.window.1 += 1;
        if step % self.config.log_every == 0 || step == self.config.steps {
            let entry = LogEntry { step, loss: self.window.0 / self.window.1 as f64 };
            progress(&entry);
            self.log.push(entry);
            self.window = (0.0, 0);
        }
        Ok(())
    }
}

fn not_encoder(name: &str) -> bool {
    name != AUDIO_PROJ
}

pub fn is_adapter_tensor(name: &str) -> bool {
    name.contains(".adapter.")
}

/// Trains the caption-conditioned network from scratch. The audio branch is
/// off; captions are dropped to the null caption with the configured rate.
pub fn pretrain_base(
    config: &TrainConfig,
    model: &UNetConfig,
    records: &[Record],
    progress: &mut dyn FnMut(&LogEntry),
) -> Result<Checkpoint> {
    if config.stage != Stage::Base {
        return Err(contract("pretrain_base needs a base-stage configuration"));
    }
    if model.timesteps != config.t_train {
        return Err(contract("model timestep count differs from the training schedule"));
    }
    let mut lp = Loop::new(config, records)?;
    let (mut base, _) = init_params(model, lp.rng.random())?;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    for step in 1..=config.steps {
        let batch: Vec<TrainExample> = (0..config.batch_size)
            .map(|_| {
                let rec = &records[lp.rng.random_range(0..records.len())];
                let mut tokens = random_caption(&mut lp.rng, rec);
                if lp.rng.random::<f64>() < config.dropout {
                    tokens = ConditionTokens::null();
                }
                TrainExample { x0: to_model_space(&rec.spectrogram), tokens, audio: None }
            })
            .collect();
        let mut grads = ParamStore::new();
        let lm = LossModel { base: &base, adapter: None, alpha: 0.0, trainable: &not_encoder };
        let loss = training_loss(&lm, &lp.schedule, &batch, &mut lp.rng, Some(&mut grads))?;
        lp.record(step, loss, progress)?;
        opt.step(&mut base.store, &grads)?;
    }
    Ok(Checkpoint::new(Stage::Base, config.steps, config.clone(), model.clone(), lp.log, base.store, None))
}

/// Unpooled frozen-encoder features of every record.
pub fn encode_records(base: &BaseParams, records: &[Record]) -> Result<Vec<AudioFeatures>> {
    let enc = base.encoder()?;
    records.iter().map(|r| encode_audio(&r.spectrogram, &enc)).collect()
}

/// Trains only the adapters, initialized from the text projections, with
/// `alpha = 1`, a random pooling rate per example and independent audio and
/// caption dropout.
pub fn train_adapter(
    base_ckpt: &Checkpoint,
    config: &TrainConfig,
    records: &[Record],
    progress: &mut dyn FnMut(&LogEntry),
) -> Result<Checkpoint> {
    if config.stage != Stage::Adapter {
        return Err(contract("train_adapter needs an adapter-stage configuration"));
    }
    let base = base_ckpt.base_params()?;
    if base.config.timesteps != config.t_train {
        return Err(contract("base checkpoint timestep count differs from the training schedule"));
    }
    let mut lp = Loop::new(config, records)?;
    let features = encode_records(&base, records)?;
    let mut adapter = init_adapter_from_text(&base)?;
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let i = lp.rng.random_range(0..records.len());
            let tokens = random_caption(&mut lp.rng, &records[i]);
            let omega = POOLING_RATES[lp.rng.random_range(0..POOLING_RATES.len())];
            let pooled = pool_features(&features[i], omega)?;
            let (audio, tokens, _) = drop_conditions(pooled, tokens, &mut lp.rng, config.dropout);
            batch.push(TrainExample { x0: to_model_space(&records[i].spectrogram), tokens, audio: Some(audio) });
        }
        let mut grads = ParamStore::new();
        let lm = LossModel { base: &base, adapter: Some(&adapter), alpha: 1.0, trainable: &is_adapter_tensor };
        let loss = training_loss(&lm, &lp.schedule, &batch, &mut lp.rng, Some(&mut grads))?;
        lp.record(step, loss, progress)?;
        opt.step(&mut adapter.store, &grads)?;
    }
    let base_hash = base_ckpt.manifest.blob_sha256.clone();
    Ok(Checkpoint::new(
        Stage::Adapter,
        config.steps,
        config.clone(),
        base.config.clone(),
        lp.log,
        adapter.store,
        Some(base_hash),
    ))
}

/// How the audio stream is presented by [`evaluate_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioInput {
    /// Pooled features of the clip itself.
    Clip(usize),
    /// An all-zero feature matrix.
    Zero,
}

/// Mean denoising loss over `records` with self-captions, fixed seed.
pub fn evaluate_loss(
    base: &BaseParams,
    adapter: Option<&AdapterParams>,
    records: &[Record],
    audio: AudioInput,
    seed: u64,
) -> Result<f64> {
    let schedule = make_schedule(base.config.timesteps)?;
    let feats = encode_records(base, records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = records
        .iter()
        .zip(&feats)
        .map(|(rec, f)| {
            let tokens = random_caption(&mut rng, rec);
            let pooled = pool_features(f, if let AudioInput::Clip(w) = audio { w } else { 1 })?;
            let audio = adapter.map(|_| if audio == AudioInput::Zero { pooled.zeroed() } else { pooled });
            Ok(TrainExample { x0: to_model_space(&rec.spectrogram), tokens, audio })
        })
        .collect::<Result<Vec<_>>>()?;
    let lm = LossModel { base, adapter, alpha: if adapter.is_some() { 1.0 } else { 0.0 }, trainable: &|_| false };
    training_loss(&lm, &schedule, &batch, &mut rng, None)
}

/// Writes `step,loss` rows.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[LogEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for e in log {
        writeln!(out, "{},{}", e.step, e.loss)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_spectrogram, sample_clip_spec, SpecPins};

    fn records(n: usize) -> Vec<Record> {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        (0..n)
            .map(|_| {
                let spec = sample_clip_spec(&mut rng, &SpecPins::default()).unwrap();
                Record { spectrogram: render_spectrogram(&spec), tokens: caption_tokens(&spec, Task::None), spec }
            })
            .collect()
    }

    fn tiny(stage: Stage) -> TrainConfig {
        TrainConfig { stage, steps: 3, batch_size: 2, log_every: 2, ..TrainConfig::base() }
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new([2], vec![1.0, -2.0]).unwrap());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new([2], vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6, "{w:?}");
        // Decay alone shrinks the weight by lr * wd * w.
        let mut opt = AdamW::new(0.1, 0.5);
        let mut zero = ParamStore::new();
        zero.insert("w", Tensor::zeros([2]));
        let before = p.get("w").unwrap().data()[0];
        opt.step(&mut p, &zero).unwrap();
        assert!((p.get("w").unwrap().data()[0] - before * 0.95).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let recs = records(4);
        let model = UNetConfig::default();
        let base = pretrain_base(&tiny(Stage::Base), &model, &recs, &mut |_| {}).unwrap();
        assert_eq!(base.manifest.metric_log.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 3]);
        let bytes = base.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, base);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.manifest.tensors.iter().map(|e| e.name.as_str()).eq(back.tensors.names()));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(ApaError::Corrupt(_))));

        let text = String::from_utf8_lossy(&bytes[12..200]).to_string();
        let pos = text.find("\"version\": 1").unwrap() + 12 + 11;
        let mut other = bytes.clone();
        other[pos] = b'9';
        assert!(matches!(Checkpoint::from_bytes(&other), Err(ApaError::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"junk"), Err(ApaError::Format(_))));
    }

    #[test]
    fn adapter_stage_touches_only_adapters() {
        let recs = records(4);
        let base = pretrain_base(&tiny(Stage::Base), &UNetConfig::default(), &recs, &mut |_| {}).unwrap();
        let frozen = base.to_bytes().unwrap();
        let adapter = train_adapter(&base, &tiny(Stage::Adapter), &recs, &mut |_| {}).unwrap();
        assert_eq!(base.to_bytes().unwrap(), frozen);
        let params = adapter.adapter_params(&base).unwrap();
        let init = init_adapter_from_text(&base.base_params().unwrap()).unwrap();
        assert_ne!(params, init);
        assert!(train_adapter(&adapter, &tiny(Stage::Adapter), &recs, &mut |_| {}).is_err());
        assert!(pretrain_base(&tiny(Stage::Base), &UNetConfig::default(), &[], &mut |_| {}).is_err());
    }
}
