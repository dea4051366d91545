//! Experiment harness: held-out edit requests, hyperparameter sweeps, batch
//! evaluation and the generative Fréchet distance.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use apa_core::conditioning::{clip_embedding, EncoderParams, POOLING_RATES};
use apa_core::diffusion::{make_schedule, sample, Conditions, GuidanceConfig, Guided, SampleOptions, SamplerMode};
use apa_core::editops::{edit, sdedit_baseline, EditRequest, Model};
use apa_core::metrics::{chroma_similarity, feature_stats, frechet_distance, transfer_score, GaussianStats};
use apa_core::synthdata::{
    generate_records, render_spectrogram, sample_clip_spec, Accomp, ConditionTokens, Record, SpecPins, Spectrogram, Task,
    Texture, FRAMES, FREQ_BINS,
};
use apa_core::training::{pretrain_base, sha256_hex, train_adapter, Checkpoint, LogEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

/// Edit requests on clips never seen in training: single-voice sources with
/// no texture, each with its own sampling seed. Timbre targets cycle through
/// the three classes other than the source's.
pub fn held_out_requests(task: Task, n: usize, seed: u64) -> Result<Vec<EditRequest>> {
    ensure!(task != Task::None, "held-out requests need an edit task");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pins = SpecPins { texture: Some(Texture::None), accomp: Some(Accomp::None), ..SpecPins::default() };
    (0..n)
        .map(|i| {
            let spec = sample_clip_spec(&mut rng, &pins)?;
            let target = match task {
                Task::Timbre => (spec.timbre.index() + 1 + i % 3) % 4,
                Task::Texture => 1 + i % 3,
                _ => 1 + i % 2,
            };
            let clip = render_spectrogram(&spec);
            Ok(EditRequest::new(clip, Some(spec), task, target, seed.wrapping_add(i as u64)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditScore {
    /// Fidelity to the input.
    pub chroma: f64,
    pub transfer: f64,
}

pub fn score_edit(request: &EditRequest, edited: &Spectrogram) -> Result<EditScore> {
    Ok(EditScore {
        chroma: chroma_similarity(&request.input, edited),
        transfer: transfer_score(edited, request.task, request.target_class)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Omega,
    Alpha,
    Lambda,
}

/// Values of the two axes that are not swept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepFixed {
    pub omega: usize,
    pub alpha: f32,
    pub lambda: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_transfer: f64,
    pub std_transfer: f64,
    pub mean_chroma: f64,
    pub std_chroma: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn apply_axis(req: &EditRequest, axis: SweepAxis, value: f64, fixed: SweepFixed) -> Result<EditRequest> {
    let mut r = req.clone();
    (r.omega, r.alpha, r.lambda) = (fixed.omega, fixed.alpha, fixed.lambda);
    match axis {
        SweepAxis::Omega => {
            let w = value as usize;
            ensure!(w as f64 == value && POOLING_RATES.contains(&w), "pooling rate {value} is not one of {POOLING_RATES:?}");
            r.omega = w;
        }
        SweepAxis::Alpha => r.alpha = value as f32,
        SweepAxis::Lambda => r.lambda = value as f32,
    }
    Ok(r)
}

/// One row per axis value, each averaging the same request list. Points run
/// in parallel; rows come back in value order.
pub fn sweep_grid(
    axis: SweepAxis,
    values: &[f64],
    fixed: SweepFixed,
    requests: &[EditRequest],
    model: &Model,
) -> Result<Vec<SweepRow>> {
    ensure!(!values.is_empty() && !requests.is_empty(), "a sweep needs at least one value and one request");
    ensure!(values.windows(2).all(|w| w[0] < w[1]), "sweep values must be strictly ascending");
    let jobs: Vec<EditRequest> = values
        .iter()
        .flat_map(|&v| requests.iter().map(move |r| apply_axis(r, axis, v, fixed)))
        .collect::<Result<_>>()?;
    let scores: Vec<EditScore> = jobs
        .par_iter()
        .map(|r| score_edit(r, &edit(r, model)?.edited))
        .collect::<Result<_>>()?;
    Ok(values
        .iter()
        .zip(scores.chunks(requests.len()))
        .map(|(&value, chunk)| {
            let (mean_transfer, std_transfer) = mean_std(&chunk.iter().map(|s| s.transfer).collect::<Vec<_>>());
            let (mean_chroma, std_chroma) = mean_std(&chunk.iter().map(|s| s.chroma).collect::<Vec<_>>());
            SweepRow { value, mean_transfer, std_transfer, mean_chroma, std_chroma }
        })
        .collect())
}

/// Writes the sweep CSV and a whitespace-separated `<path>.plot.dat` with
/// `(transfer, fidelity)` per value.
pub fn write_sweep(path: &Path, axis: SweepAxis, rows: &[SweepRow]) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let plot = sibling(path, ".plot.dat");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&plot)?);
    writeln!(out, "# {} transfer fidelity", serde_json::to_value(axis)?.as_str().unwrap_or("value"))?;
    for r in rows {
        writeln!(out, "{} {:.6} {:.6}", r.value, r.mean_transfer, r.mean_chroma)?;
    }
    out.flush()?;
    Ok(plot)
}

pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Adapter,
    /// Adapter edit with the null caption as the negative prompt.
    AdapterNullNegative,
    Sdedit,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub clip_id: usize,
    pub method: Method,
    pub task: Task,
    pub target: String,
    pub chroma_similarity: f64,
    pub transfer_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrechetRow {
    pub set: String,
    pub clips: usize,
    pub frechet_distance: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub frechet: Vec<FrechetRow>,
}

impl EvalReport {
    pub fn mean(&self, method: Method, f: impl Fn(&EvalRow) -> f64) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(f).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let fd = sibling(path, ".frechet.csv");
        let mut w = csv::Writer::from_path(&fd)?;
        for r in &self.frechet {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(fd)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub methods: Vec<Method>,
    /// Reference set for Fréchet distances (typically the training clips).
    pub reference: Option<Vec<Spectrogram>>,
    /// Unconditional samples (and as many uniform-noise grids) to score
    /// against the reference; 0 skips both.
    pub unconditional: usize,
    pub seed: u64,
    pub steps: usize,
}

fn run_method(method: Method, r: &EditRequest, model: &Model) -> Result<Spectrogram> {
    Ok(match method {
        Method::Adapter => edit(r, model)?.edited,
        Method::AdapterNullNegative => {
            let mut r = r.clone();
            r.negative = Some(ConditionTokens::null());
            edit(&r, model)?.edited
        }
        Method::Sdedit => sdedit_baseline(r, model)?.edited,
    })
}

pub fn embed_all(clips: &[Spectrogram], enc: &EncoderParams) -> Result<GaussianStats> {
    let feats = clips.par_iter().map(|c| clip_embedding(c, enc)).collect::<apa_core::Result<Vec<_>>>()?;
    Ok(feature_stats(&feats)?)
}

pub fn evaluate(requests: &[EditRequest], model: &Model, opts: &EvalOptions) -> Result<EvalReport> {
    let jobs: Vec<(Method, usize)> =
        opts.methods.iter().flat_map(|&m| (0..requests.len()).map(move |i| (m, i))).collect();
    let outputs: Vec<Spectrogram> =
        jobs.par_iter().map(|&(m, i)| run_method(m, &requests[i], model)).collect::<Result<_>>()?;
    let mut report = EvalReport::default();
    for (&(method, i), out) in jobs.iter().zip(&outputs) {
        let r = &requests[i];
        let s = score_edit(r, out)?;
        report.rows.push(EvalRow {
            clip_id: i,
            method,
            task: r.task,
            target: r.task.class_name(r.target_class)?.to_string(),
            chroma_similarity: s.chroma,
            transfer_score: s.transfer,
        });
    }
    if let Some(reference) = &opts.reference {
        let enc = model.base.encoder()?;
        let ref_stats = embed_all(reference, &enc)?;
        let mut sets: Vec<(String, Vec<Spectrogram>)> = Vec::new();
        for (k, &m) in opts.methods.iter().enumerate() {
            let name = serde_json::to_value(m)?.as_str().unwrap_or_default().to_string();
            sets.push((name, outputs[k * requests.len()..(k + 1) * requests.len()].to_vec()));
        }
        if opts.unconditional > 0 {
            sets.push(("unconditional".into(), unconditional_samples(model, opts.unconditional, opts.seed, opts.steps)?));
            sets.push(("uniform_noise".into(), uniform_noise(opts.unconditional, opts.seed)));
        }
        for (set, clips) in sets {
            let d = frechet_distance(&embed_all(&clips, &enc)?, &ref_stats)?;
            report.frechet.push(FrechetRow { set, clips: clips.len(), frechet_distance: d });
        }
    }
    Ok(report)
}

/// Null-caption samples from the base model, seeds `seed..seed + n`.
pub fn unconditional_samples(model: &Model, n: usize, seed: u64, steps: usize) -> Result<Vec<Spectrogram>> {
    let schedule = make_schedule(model.base.config.timesteps)?;
    let cond = Conditions::unconditional();
    let guided = Guided::new(&model.base, None, &cond, &GuidanceConfig::standard(1.0))?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let opts = SampleOptions { steps, mode: SamplerMode::Deterministic, seed: seed.wrapping_add(i), init: None };
            Ok(sample(&guided, &schedule, &opts)?.clip)
        })
        .collect()
}

/// Grids of iid uniform values in `[0, 1)`.
pub fn uniform_noise(n: usize, seed: u64) -> Vec<Spectrogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_u64);
    (0..n)
        .map(|_| {
            let v = (0..FREQ_BINS * FRAMES).map(|_| rng.random::<f32>()).collect();
            Spectrogram::from_values(v).expect("full grid")
        })
        .collect()
}

/// Dataset, base and adapter checkpoint for `config`, trained on first use
/// and cached in `dir` under a hash of everything that determines them.
pub struct Trained {
    pub records: Vec<Record>,
    pub base: Checkpoint,
    pub adapter: Checkpoint,
}

/// Names the cached checkpoints of `config`: everything that affects
/// training goes into the hash.
pub fn cache_key(config: &RunConfig) -> Result<String> {
    let src = serde_json::to_string(&(
        config.seed,
        &config.data,
        &config.model,
        config.base_train(),
        config.adapter_train(),
        apa_core::training::CHECKPOINT_VERSION,
    ))?;
    Ok(sha256_hex(src.as_bytes())[..16].to_string())
}

pub fn train_cached(config: &RunConfig, dir: &Path, progress: &mut dyn FnMut(&str, &LogEntry)) -> Result<Trained> {
    config.validate()?;
    let key = cache_key(config)?;
    let records = generate_records(config.data.clips, config.seed, &SpecPins::default())?;
    std::fs::create_dir_all(dir)?;
    let base_path = dir.join(format!("base-{key}.ckpt"));
    let adapter_path = dir.join(format!("adapter-{key}.ckpt"));
    let base = match Checkpoint::load(&base_path) {
        Ok(c) => c,
        Err(_) => {
            let c = pretrain_base(&config.base_train(), &config.model, &records, &mut |e| progress("base", e))?;
            c.save(&base_path)?;
            c
        }
    };
    let adapter = match Checkpoint::load(&adapter_path) {
        Ok(c) if c.adapter_params(&base).is_ok() => c,
        Ok(_) => bail!("cached adapter {} does not match its base", adapter_path.display()),
        Err(_) => {
            let c = train_adapter(&base, &config.adapter_train(), &records, &mut |e| progress("adapter", e))?;
            c.save(&adapter_path)?;
            c
        }
    };
    Ok(Trained { records, base, adapter })
}
