//! Checkpoint-free invariant checks: guidance and fusion algebra on a freshly
//! initialized model, and the closed forms of the metrics.

use apa_core::backbone::{fused_cross_attention, init_adapter_from_text, init_params, UNetConfig, SITES};
use apa_core::conditioning::{encode_audio, encode_text, pool_features, AudioFeatures};
use apa_core::diffusion::{combine_guidance, Conditions, GuidanceConfig, Guided};
use apa_core::metrics::{attribute_oracle, chroma_similarity, frechet_distance, GaussianStats};
use apa_core::synthdata::{
    render_spectrogram, sample_clip_spec, Accomp, ClipSpec, ConditionTokens, SpecPins, Task, Texture, Timbre, MELODY_LEN,
};
use apa_numerics::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ALGEBRA_TOL: f64 = 1e-6;
pub const FRECHET_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.outcome.is_ok()).count()
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.outcome.is_err())
    }

    fn push(&mut self, name: &'static str, outcome: Result<(), String>) {
        self.checks.push(Check { name, outcome });
    }
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.max_abs_diff(b)
}

fn within(what: &str, err: f64, tol: f64) -> Result<(), String> {
    if err <= tol {
        Ok(())
    } else {
        Err(format!("{what}: error {err:.3e} exceeds {tol:.0e}"))
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn run() -> Report {
    let mut report = Report::default();
    algebra(&mut report);
    metric_closed_forms(&mut report);
    report
}

fn algebra(report: &mut Report) {
    let (base, _) = match init_params(&UNetConfig::default(), 11) {
        Ok(p) => p,
        Err(err) => return report.push("model init", Err(e(err))),
    };
    let adapter = init_adapter_from_text(&base).map_err(e);
    let spec = ClipSpec {
        melody: [20, 22, 24, 25, 27, 25, 24, 22, 20, 22, 24, 25, 27, 25, 24, 22],
        timbre: Timbre::Bright,
        texture: Texture::Pulse,
        accomp: Accomp::Third,
        seed: 3,
    };
    let clip = render_spectrogram(&spec);
    let x_t = apa_core::diffusion::to_model_space(&clip);
    let t = 120;

    report.push(
        "guidance at lambda 1 and 0 reduces to one branch",
        (|| {
            let adapter = adapter.clone()?;
            let enc = base.encoder().map_err(e)?;
            let audio = pool_features(&encode_audio(&clip, &enc).map_err(e)?, 2).map_err(e)?;
            let cond = Conditions { tokens: ConditionTokens::for_target(Task::Timbre, 2, Timbre::Bright).map_err(e)?, audio: Some(audio), alpha: 0.5 };
            let g = GuidanceConfig::negative_prompt(7.5, ConditionTokens::low_quality(Task::Timbre));
            let guided = Guided::new(&base, Some(&adapter), &cond, &g).map_err(e)?;
            let pos = guided.positive(&x_t, t).map_err(e)?;
            let neg = guided.negative(&x_t, t).map_err(e)?;
            within("lambda=1", max_abs_diff(&combine_guidance(&pos, &neg, 1.0), &pos), ALGEBRA_TOL)?;
            within("lambda=0", max_abs_diff(&combine_guidance(&pos, &neg, 0.0), &neg), ALGEBRA_TOL)?;
            // Affine in lambda: compare against the textbook form in f64.
            for lambda in [0.5f32, 2.0, 7.5] {
                let got = combine_guidance(&pos, &neg, lambda);
                let err = got
                    .data()
                    .iter()
                    .zip(pos.data().iter().zip(neg.data()))
                    .map(|(&g, (&p, &n))| (g as f64 - (n as f64 + lambda as f64 * (p as f64 - n as f64))).abs())
                    .fold(0.0, f64::max);
                within("affine guidance", err, ALGEBRA_TOL)?;
            }
            Ok(())
        })(),
    );

    report.push(
        "fusion with alpha 0 equals the caption branch",
        (|| {
            let adapter = adapter.clone()?;
            let enc = base.encoder().map_err(e)?;
            let c_y = encode_text(&ConditionTokens::for_target(Task::Texture, 1, Timbre::Pure).map_err(e)?, &enc).map_err(e)?;
            let c_x = encode_audio(&clip, &enc).map_err(e)?;
            for site in SITES {
                let z = probe_tensor(base.config.site_channels(site));
                let fused = fused_cross_attention(&z, site, &c_y, Some(&c_x), 0.0, &base, Some(&adapter)).map_err(e)?;
                let text = fused_cross_attention(&z, site, &c_y, None, 0.0, &base, None).map_err(e)?;
                within(site, max_abs_diff(&fused, &text), ALGEBRA_TOL)?;
            }
            Ok(())
        })(),
    );

    report.push(
        "fresh adapters with audio equal to caption scale the caption branch by 1 + alpha",
        (|| {
            let adapter = adapter.clone()?;
            let enc = base.encoder().map_err(e)?;
            let c_y = encode_text(&ConditionTokens::for_target(Task::Accomp, 2, Timbre::Odd).map_err(e)?, &enc).map_err(e)?;
            let c_x = AudioFeatures::from_seq(c_y.seq.clone()).map_err(e)?;
            for site in SITES {
                let z = probe_tensor(base.config.site_channels(site));
                let text = fused_cross_attention(&z, site, &c_y, None, 0.0, &base, None).map_err(e)?;
                for alpha in [0.3f32, 1.0, 2.5] {
                    let fused = fused_cross_attention(&z, site, &c_y, Some(&c_x), alpha, &base, Some(&adapter)).map_err(e)?;
                    let expect = text.map(|v| ((1.0 + alpha as f64) * v as f64) as f32);
                    within(site, max_abs_diff(&fused, &expect), ALGEBRA_TOL)?;
                }
            }
            Ok(())
        })(),
    );

    report.push(
        "pooling with rate 1 is the identity",
        (|| {
            let feats = encode_audio(&clip, &base.encoder().map_err(e)?).map_err(e)?;
            let pooled = pool_features(&feats, 1).map_err(e)?;
            if pooled.seq() == feats.seq() {
                Ok(())
            } else {
                Err("pooled sequence differs".into())
            }
        })(),
    );
}

/// Deterministic, non-degenerate `[16, width]` activations.
fn probe_tensor(width: usize) -> Tensor<f32> {
    let rows = 16;
    let data = (0..rows * width).map(|i| (i as f32 * 0.37).sin() * 1.3).collect();
    Tensor::new([rows, width], data).expect("consistent shape")
}

fn gaussian(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats { mean: DVector::from_row_slice(mean), cov: DMatrix::from_row_slice(d, d, cov) }
}

fn metric_closed_forms(report: &mut Report) {
    let a = gaussian(&[0.5, -1.0, 2.0], &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.7]);
    report.push(
        "Frechet distance of identical statistics is 0",
        frechet_distance(&a, &a).map_err(e).and_then(|d| within("identical", d.abs(), FRECHET_TOL)),
    );
    let b = gaussian(&[1.5, 1.0, -1.0], &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.7]);
    report.push(
        "Frechet distance with equal covariance is the squared mean shift",
        frechet_distance(&a, &b).map_err(e).and_then(|d| within("mean shift", (d - (1.0 + 4.0 + 9.0)).abs(), FRECHET_TOL)),
    );
    let (m1, s1, m2, s2) = (0.3, 1.7, -1.1, 0.4);
    let closed = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    report.push(
        "one-dimensional Frechet distance closed form",
        frechet_distance(&gaussian(&[m1], &[s1 * s1]), &gaussian(&[m2], &[s2 * s2]))
            .map_err(e)
            .and_then(|d| within("1-D", (d - closed).abs(), FRECHET_TOL)),
    );

    let tone = |pitch: u8| {
        render_spectrogram(&ClipSpec {
            melody: [pitch; MELODY_LEN],
            timbre: Timbre::Pure,
            texture: Texture::None,
            accomp: Accomp::None,
            seed: 0,
        })
    };
    report.push("chroma similarity of a clip with itself is 1", {
        let x = tone(20);
        within("identical", (chroma_similarity(&x, &x) - 1.0).abs(), 1e-12)
    });
    report.push(
        "chroma similarity of pure tones a tritone apart is 0",
        within("tritone", chroma_similarity(&tone(20), &tone(26)).abs(), 1e-12),
    );

    report.push(
        "attribute oracle recovers every attribute combination",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(48);
            for &timbre in Timbre::ALL {
                for &texture in Texture::ALL {
                    for &accomp in Accomp::ALL {
                        let pins =
                            SpecPins { timbre: Some(timbre), texture: Some(texture), accomp: Some(accomp), pitch_range: None };
                        for _ in 0..3 {
                            let spec = sample_clip_spec(&mut rng, &pins).map_err(e)?;
                            let s = attribute_oracle(&render_spectrogram(&spec));
                            let got = (
                                s.argmax(Task::Timbre).map_err(e)?,
                                s.argmax(Task::Texture).map_err(e)?,
                                s.argmax(Task::Accomp).map_err(e)?,
                            );
                            if got != (timbre.index(), texture.index(), accomp.index()) {
                                return Err(format!("{timbre}/{texture}/{accomp} recovered as {got:?}"));
                            }
                        }
                    }
                }
            }
            Ok(())
        })(),
    );
}
