//! Zero-shot edits of a clip and the partial-noising baseline.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterParams, BaseParams};
use crate::conditioning::{encode_audio, pool_features, POOLING_RATES};
use crate::diffusion::{
    make_schedule, sample, Conditions, GuidanceConfig, Guided, SampleOptions, SamplerMode, DEFAULT_LAMBDA, SAMPLE_STEPS,
};
use crate::error::{contract, Result};
use crate::metrics::attribute_oracle;
use crate::synthdata::{write_grids, ClipSpec, ConditionTokens, Spectrogram, Task, Timbre};
use crate::training::Checkpoint;

/// Partial-noising depth of the baseline, as a fraction of the schedule.
pub const SDEDIT_STRENGTH: f64 = 0.75;

/// Per-task inference defaults `(omega, alpha, lambda)`.
pub fn task_defaults(task: Task) -> (usize, f32, f32) {
    match task {
        Task::Texture => (1, 0.4, DEFAULT_LAMBDA),
        _ => (2, 0.5, DEFAULT_LAMBDA),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    #[serde(skip)]
    pub input: Spectrogram,
    /// Symbolic description of the input, when known.
    pub source: Option<ClipSpec>,
    pub task: Task,
    pub target_class: usize,
    /// Overrides the per-task negative caption.
    pub negative: Option<ConditionTokens>,
    pub omega: usize,
    pub alpha: f32,
    pub lambda: f32,
    pub steps: usize,
    pub seed: u64,
    pub sampler: SamplerMode,
}

impl EditRequest {
    /// Request with the per-task defaults.
    pub fn new(input: Spectrogram, source: Option<ClipSpec>, task: Task, target_class: usize, seed: u64) -> Self {
        let (omega, alpha, lambda) = task_defaults(task);
        Self {
            input,
            source,
            task,
            target_class,
            negative: None,
            omega,
            alpha,
            lambda,
            steps: SAMPLE_STEPS,
            seed,
            sampler: SamplerMode::Deterministic,
        }
    }

    /// Timbre of the input: from the spec when given, otherwise as detected.
    pub fn source_timbre(&self) -> Timbre {
        match &self.source {
            Some(s) => s.timbre,
            None => Timbre::ALL[attribute_oracle(&self.input).argmax(Task::Timbre).unwrap_or(0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task == Task::None {
            return Err(contract("an edit needs a task: timbre, texture or accomp"));
        }
        if self.target_class >= self.task.class_count() {
            return Err(contract(format!("class {} out of range for task {}", self.target_class, self.task)));
        }
        if self.task == Task::Timbre && self.target_class == self.source_timbre().index() {
            return Err(contract("a timbre edit must request a different timbre than the input's"));
        }
        if !POOLING_RATES.contains(&self.omega) {
            return Err(contract(format!("pooling rate {} is not one of {POOLING_RATES:?}", self.omega)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(contract("alpha and lambda must be finite and >= 0"));
        }
        if let Some(s) = &self.source {
            s.validate()?;
        }
        Ok(())
    }

    pub fn positive_tokens(&self) -> Result<ConditionTokens> {
        ConditionTokens::for_target(self.task, self.target_class, self.source_timbre())
    }

    /// Source-timbre caption for timbre edits, the low-quality caption
    /// otherwise.
    pub fn negative_tokens(&self) -> Result<ConditionTokens> {
        if let Some(n) = self.negative {
            return Ok(n);
        }
        Ok(match self.task {
            Task::Timbre => {
                let src = self.source_timbre();
                ConditionTokens::for_target(Task::Timbre, src.index(), src)?
            }
            task => ConditionTokens::low_quality(task),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMetadata {
    pub method: String,
    pub request: EditRequest,
    pub positive: ConditionTokens,
    pub negative: ConditionTokens,
    pub timesteps: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub edited: Spectrogram,
    pub metadata: EditMetadata,
    pub wall_time_ms: f64,
}

/// Loaded, mutually compatible checkpoints.
#[derive(Clone, Debug)]
pub struct Model {
    pub base: BaseParams,
    pub adapter: Option<AdapterParams>,
}

impl Model {
    pub fn from_checkpoints(base: &Checkpoint, adapter: Option<&Checkpoint>) -> Result<Self> {
        Ok(Self { base: base.base_params()?, adapter: adapter.map(|a| a.adapter_params(base)).transpose()? })
    }
}

/// Audio-prompted edit with the negative caption in the unconditioned branch.
pub fn edit(request: &EditRequest, model: &Model) -> Result<EditResult> {
    let started = Instant::now();
    request.validate()?;
    let adapter = model.adapter.as_ref().ok_or_else(|| contract("editing needs adapter weights"))?;
    let schedule = make_schedule(model.base.config.timesteps)?;
    let features = pool_features(&encode_audio(&request.input, &model.base.encoder()?)?, request.omega)?;
    let positive = request.positive_tokens()?;
    let negative = request.negative_tokens()?;
    let cond = Conditions { tokens: positive, audio: Some(features), alpha: request.alpha };
    let guidance = GuidanceConfig::negative_prompt(request.lambda, negative);
    let guided = Guided::new(&model.base, Some(adapter), &cond, &guidance)?;
    let opts = SampleOptions { steps: request.steps, mode: request.sampler, seed: request.seed, init: None };
    let out = sample(&guided, &schedule, &opts)?;
    Ok(EditResult {
        edited: out.clip,
        metadata: EditMetadata { method: "adapter".into(), request: request.clone(), positive, negative, timesteps: out.timesteps },
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Partially noises the input and denoises it under the target caption with
/// standard guidance; no audio branch.
pub fn sdedit_baseline(request: &EditRequest, model: &Model) -> Result<EditResult> {
    let started = Instant::now();
    request.validate()?;
    let schedule = make_schedule(model.base.config.timesteps)?;
    let positive = request.positive_tokens()?;
    let cond = Conditions { tokens: positive, audio: None, alpha: 0.0 };
    let guidance = GuidanceConfig::standard(request.lambda);
    let guided = Guided::new(&model.base, None, &cond, &guidance)?;
    let opts = SampleOptions {
        steps: request.steps,
        mode: request.sampler,
        seed: request.seed,
        init: Some((&request.input, SDEDIT_STRENGTH)),
    };
    let out = sample(&guided, &schedule, &opts)?;
    Ok(EditResult {
        edited: out.clip,
        metadata: EditMetadata {
            method: "sdedit".into(),
            request: request.clone(),
            positive,
            negative: ConditionTokens::null(),
            timesteps: out.timesteps,
        },
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Writes the edited grid and a JSON sidecar (`<path>.json`). Timing is left
/// out of the sidecar so that repeated runs produce identical files.
pub fn write_result(path: impl AsRef<Path>, result: &EditResult) -> Result<()> {
    let path = path.as_ref();
    write_grids(path, std::slice::from_ref(&result.edited))?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    std::fs::write(sidecar, serde_json::to_string_pretty(&result.metadata)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_adapter_from_text, init_params, UNetConfig};
    use crate::diffusion::GuidanceMode;
    use crate::synthdata::{render_spectrogram, vocab, Accomp, Texture, MELODY_LEN};

    fn model() -> Model {
        let (base, _) = init_params(&UNetConfig::default(), 5).unwrap();
        let adapter = Some(init_adapter_from_text(&base).unwrap());
        Model { base, adapter }
    }

    fn pure_clip() -> (Spectrogram, ClipSpec) {
        let spec = ClipSpec {
            melody: [22; MELODY_LEN],
            timbre: Timbre::Pure,
            texture: Texture::None,
            accomp: Accomp::None,
            seed: 0,
        };
        (render_spectrogram(&spec), spec)
    }

    #[test]
    fn token_mapping_is_total() {
        let (clip, spec) = pure_clip();
        for &task in &[Task::Timbre, Task::Texture, Task::Accomp] {
            for class in 0..task.class_count() {
                let r = EditRequest::new(clip.clone(), Some(spec.clone()), task, class, 0);
                if task == Task::Timbre && class == 0 {
                    assert!(r.validate().is_err());
                    continue;
                }
                r.validate().unwrap();
                r.positive_tokens().unwrap().validate().unwrap();
                let neg = r.negative_tokens().unwrap();
                neg.validate().unwrap();
                if task == Task::Timbre {
                    assert_eq!(neg.primary, vocab::TIMBRE_BASE);
                } else {
                    assert_eq!(neg, ConditionTokens::low_quality(task));
                }
            }
        }
        assert_eq!(task_defaults(Task::Texture), (1, 0.4, 7.5));
        assert_eq!(task_defaults(Task::Timbre), (2, 0.5, 7.5));
    }

    #[test]
    fn zero_alpha_edit_matches_caption_only_generation() {
        let m = model();
        let (clip, spec) = pure_clip();
        let mut r = EditRequest::new(clip.clone(), Some(spec), Task::Timbre, 1, 4);
        r.alpha = 0.0;
        r.steps = 4;
        let a = edit(&r, &m).unwrap();
        assert_eq!(r.input, clip);
        let cond = Conditions { tokens: r.positive_tokens().unwrap(), audio: None, alpha: 0.0 };
        let g = GuidanceConfig { lambda: r.lambda, mode: GuidanceMode::NegativePrompt, negative: r.negative_tokens().unwrap() };
        let guided = Guided::new(&m.base, None, &cond, &g).unwrap();
        let opts = SampleOptions { steps: 4, mode: SamplerMode::Deterministic, seed: 4, init: None };
        let b = sample(&guided, &make_schedule(200).unwrap(), &opts).unwrap();
        assert_eq!(a.edited, b.clip);
        let again = edit(&r, &m).unwrap();
        assert_eq!(again.edited, a.edited);
        assert_eq!(again.metadata, a.metadata);
    }

    #[test]
    fn sdedit_uses_fixed_strength() {
        let m = model();
        let (clip, spec) = pure_clip();
        let r = EditRequest::new(clip, Some(spec), Task::Timbre, 2, 1);
        let a = sdedit_baseline(&r, &m).unwrap();
        assert_eq!(a.metadata.timesteps.first(), Some(&148));
        assert_eq!(a.metadata.timesteps.len(), 38);
        assert_eq!(sdedit_baseline(&r, &m).unwrap().edited, a.edited);
    }

    #[test]
    fn sidecar_is_written() {
        let m = model();
        let (clip, spec) = pure_clip();
        let mut r = EditRequest::new(clip, Some(spec), Task::Accomp, 1, 1);
        r.steps = 2;
        let res = edit(&r, &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.grid");
        write_result(&path, &res).unwrap();
        let meta: EditMetadata = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.grid.json")).unwrap()).unwrap();
        assert_eq!(meta.timesteps, res.metadata.timesteps);
        assert_eq!(crate::synthdata::read_grids(&path).unwrap(), vec![res.edited]);
    }
}
