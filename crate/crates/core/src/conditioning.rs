//! Audio and text conditioning streams.
//!
//! The audio encoder is a frozen patch projection: the spectrogram is cut into
//! 8x8 patches, each flattened patch is mapped through a fixed orthonormal
//! projection and tagged with a sinusoidal position code. Pooling then trades
//! detail for coarseness along the patch sequence.
//!
//! Patches are ordered time-major: the eight frequency blocks of one time
//! block are adjacent, so coarse pooling blurs pitch content first while the
//! time envelope survives.

use apa_numerics::{Tape, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, ApaError, Result};
use crate::synthdata::{vocab, ConditionTokens, Spectrogram, CAPTION_SLOTS, FRAMES, FREQ_BINS};

/// Side length of a square audio patch.
pub const PATCH: usize = 8;
/// Number of patches per spectrogram (and unpooled audio sequence length).
pub const AUDIO_TOKENS: usize = (FREQ_BINS / PATCH) * (FRAMES / PATCH);
/// Values per flattened patch.
pub const PATCH_VALUES: usize = PATCH * PATCH;
/// Allowed pooling rates.
pub const POOLING_RATES: [usize; 4] = [1, 2, 4, 8];

/// Sinusoidal position code of dimension `dim` for each of `len` positions.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor<f32> {
    Tensor::from_fn([len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        (if j % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
    })
}

/// Frozen audio encoder and trainable token table.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `[PATCH_VALUES, d_audio]` with orthonormal columns (or rows when `d_audio > 64`).
    pub audio_proj: Tensor<f32>,
    /// `[vocab::SIZE, d_text]`.
    pub text_embed: Tensor<f32>,
}

impl EncoderParams {
    /// Seeded initialization: QR of a Gaussian matrix for the audio projection,
    /// scaled Gaussian token embeddings.
    pub fn init(seed: u64, audio_dim: usize, text_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            audio_proj: orthonormal_projection(&mut rng, PATCH_VALUES, audio_dim),
            text_embed: Tensor::from_fn([vocab::SIZE, text_dim], |_| rng.sample::<f32, _>(StandardNormal)),
        }
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_proj.shape()[1]
    }

    pub fn text_dim(&self) -> usize {
        self.text_embed.shape()[1]
    }
}

fn orthonormal_projection(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    Tensor::from_fn([rows, cols], |i| {
        let (a, b) = (i / cols, i % cols);
        (if tall { q[(a, b)] } else { q[(b, a)] }) as f32
    })
}

/// Audio conditioning sequence `c_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    seq: Tensor<f32>,
    pooling: usize,
}

impl AudioFeatures {
    /// Wraps an arbitrary unpooled `[len, d_a]` sequence.
    pub fn from_seq(seq: Tensor<f32>) -> Result<Self> {
        seq.dims2()?;
        Ok(Self { seq, pooling: 1 })
    }

    pub fn seq(&self) -> &Tensor<f32> {
        &self.seq
    }

    pub fn pooling(&self) -> usize {
        self.pooling
    }

    pub fn len(&self) -> usize {
        self.seq.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An all-zero matrix of the same shape (dropped audio condition).
    pub fn zeroed(&self) -> Self {
        Self { seq: Tensor::zeros(self.seq.shape()), pooling: self.pooling }
    }

    pub fn is_zero(&self) -> bool {
        self.seq.data().iter().all(|&v| v == 0.0)
    }
}

/// Text conditioning sequence `c_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub seq: Tensor<f32>,
}

/// Patch features of `x`, unpooled.
pub fn encode_audio(x: &Spectrogram, params: &EncoderParams) -> Result<AudioFeatures> {
    let grid = Tensor::new([FREQ_BINS, FRAMES], x.values().to_vec())?;
    encode_audio_grid(&grid, params)
}

/// As [`encode_audio`] for a raw `[FREQ_BINS, FRAMES]` tensor.
pub fn encode_audio_grid(x: &Tensor<f32>, params: &EncoderParams) -> Result<AudioFeatures> {
    if x.shape() != [FREQ_BINS, FRAMES] {
        return Err(ApaError::Dimension(format!(
            "audio encoder expects a {FREQ_BINS}x{FRAMES} grid, got {:?}",
            x.shape()
        )));
    }
    let bands = FREQ_BINS / PATCH;
    let patches = Tensor::from_fn([AUDIO_TOKENS, PATCH_VALUES], |i| {
        let (patch, j) = (i / PATCH_VALUES, i % PATCH_VALUES);
        let bin = (patch % bands) * PATCH + j / PATCH;
        let frame = (patch / bands) * PATCH + j % PATCH;
        x.data()[bin * FRAMES + frame]
    });
    let projected = apa_numerics::matmul(&patches, &params.audio_proj)?;
    let pos = sinusoidal_table(AUDIO_TOKENS, params.audio_dim());
    let seq = projected.zip_map(&pos, "audio position", |a, b| a + b)?;
    Ok(AudioFeatures { seq, pooling: 1 })
}

/// Windows of `omega` consecutive patches, each reduced to
/// `0.5 * (max + mean)` per feature.
pub fn pool_features(features: &AudioFeatures, omega: usize) -> Result<AudioFeatures> {
    if !POOLING_RATES.contains(&omega) {
        return Err(contract(format!("pooling rate {omega} is not one of {POOLING_RATES:?}")));
    }
    if features.pooling != 1 {
        return Err(contract(format!("features are already pooled at rate {}", features.pooling)));
    }
    let (len, dim) = features.seq.dims2()?;
    let out_len = len.div_ceil(omega);
    let src = features.seq.data();
    let mut out = Vec::with_capacity(out_len * dim);
    for w in 0..out_len {
        let rows = w * omega..((w + 1) * omega).min(len);
        let count = rows.len() as f32;
        for j in 0..dim {
            let mut max = f32::NEG_INFINITY;
            let mut sum = 0.0f32;
            for r in rows.clone() {
                let v = src[r * dim + j];
                max = max.max(v);
                sum += v;
            }
            out.push(0.5 * (max + sum / count));
        }
    }
    Ok(AudioFeatures { seq: Tensor::new([out_len, dim], out)?, pooling: omega })
}

fn check_tokens(tokens: &ConditionTokens) -> Result<()> {
    tokens.validate()?;
    if let Some(bad) = tokens.slots().into_iter().find(|&i| i >= vocab::SIZE) {
        return Err(contract(format!("token index {bad} out of vocabulary")));
    }
    Ok(())
}

/// Per-slot embedding lookup plus a fixed slot position code.
pub fn encode_text(tokens: &ConditionTokens, params: &EncoderParams) -> Result<TextFeatures> {
    let mut tape = Tape::new();
    let embed = tape.constant(params.text_embed.clone());
    let out = encode_text_on_tape(&mut tape, embed, tokens)?;
    Ok(TextFeatures { seq: tape.value(out).clone() })
}

/// Differentiable text encoding against an embedding table on `tape`.
pub fn encode_text_on_tape(tape: &mut Tape<f32>, embed: Var, tokens: &ConditionTokens) -> Result<Var> {
    check_tokens(tokens)?;
    let rows = tape.embedding(embed, &tokens.slots())?;
    let dim = tape.shape(embed)[1];
    let pos = tape.constant(sinusoidal_table(CAPTION_SLOTS, dim));
    Ok(tape.add(rows, pos)?)
}

/// Which streams [`drop_conditions`] replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dropped {
    pub audio: bool,
    pub text: bool,
}

/// Independently replaces the audio features with zeros and the caption with
/// the null caption, each with probability `p`.
pub fn drop_conditions<R: Rng + ?Sized>(
    audio: AudioFeatures,
    tokens: ConditionTokens,
    rng: &mut R,
    p: f64,
) -> (AudioFeatures, ConditionTokens, Dropped) {
    let drop_audio = rng.random::<f64>() < p;
    let drop_text = rng.random::<f64>() < p;
    let audio = if drop_audio { audio.zeroed() } else { audio };
    let tokens = if drop_text { ConditionTokens::null() } else { tokens };
    (audio, tokens, Dropped { audio: drop_audio, text: drop_text })
}

/// Clip-level descriptor: unpooled patch features averaged over the sequence.
pub fn clip_embedding(x: &Spectrogram, params: &EncoderParams) -> Result<Vec<f64>> {
    let f = encode_audio(x, params)?;
    let (len, dim) = f.seq.dims2()?;
    let mut mean = vec![0.0f64; dim];
    for r in 0..len {
        for (m, &v) in mean.iter_mut().zip(f.seq.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= len as f64);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Task, Timbre};

    fn params() -> EncoderParams {
        EncoderParams::init(11, 32, 32)
    }

    #[test]
    fn projection_is_orthonormal() {
        let p = params();
        let pt = p.audio_proj.transpose().unwrap();
        let gram = apa_numerics::matmul(&pt, &p.audio_proj).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram.data()[i * 32 + j] - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_input_gives_positions() {
        let f = encode_audio(&Spectrogram::zeros(), &params()).unwrap();
        assert_eq!(f.seq().shape(), &[AUDIO_TOKENS, 32]);
        assert_eq!(f.seq(), &sinusoidal_table(AUDIO_TOKENS, 32));
    }

    #[test]
    fn patch_locality() {
        let p = params();
        let mut values = vec![0.0f32; FREQ_BINS * FRAMES];
        let a = encode_audio(&Spectrogram::from_values(values.clone()).unwrap(), &p).unwrap();
        // bin 19, frame 42: frequency block 2 of time block 5 -> index 42.
        values[19 * FRAMES + 42] = 0.8;
        let b = encode_audio(&Spectrogram::from_values(values).unwrap(), &p).unwrap();
        for r in 0..AUDIO_TOKENS {
            let same = a.seq().row(r) == b.seq().row(r);
            assert_eq!(same, r != 42, "row {r}");
        }
    }

    #[test]
    fn identity_projection_exposes_patch_values() {
        let mut p = EncoderParams::init(1, 64, 32);
        p.audio_proj = Tensor::from_fn([64, 64], |i| if i / 64 == i % 64 { 1.0 } else { 0.0 });
        let mut values = vec![0.0f32; FREQ_BINS * FRAMES];
        values[8 * FRAMES + 1] = 0.5; // frequency block 1, time block 0; in-patch (0, 1)
        values[15 * FRAMES + 7] = 0.25; // same patch, in-patch (7, 7)
        let f = encode_audio(&Spectrogram::from_values(values).unwrap(), &p).unwrap();
        let pos = sinusoidal_table(AUDIO_TOKENS, 64);
        let row = f.seq().row(1);
        for j in 0..64 {
            let patch_value = match j {
                1 => 0.5,
                63 => 0.25,
                _ => 0.0,
            };
            assert!((row[j] - (patch_value + pos.row(1)[j])).abs() < 1e-7);
        }
    }

    fn features(rows: usize, data: Vec<f32>) -> AudioFeatures {
        let dim = data.len() / rows;
        AudioFeatures { seq: Tensor::new([rows, dim], data).unwrap(), pooling: 1 }
    }

    #[test]
    fn pooling_arithmetic() {
        let f = features(2, vec![0.0, 2.0, 2.0, 0.0]);
        assert_eq!(pool_features(&f, 2).unwrap().seq().data(), &[1.5, 1.5]);
        assert_eq!(pool_features(&f, 1).unwrap().seq(), f.seq());
        let f = features(3, vec![1.0, 2.0, 3.0]);
        // Windows [1, 2] and [3]: 0.5 * (2 + 1.5) and 3.
        assert_eq!(pool_features(&f, 2).unwrap().seq().data(), &[1.75, 3.0]);
    }

    #[test]
    fn pooling_lengths_and_errors() {
        let f = encode_audio(&Spectrogram::zeros(), &params()).unwrap();
        for omega in POOLING_RATES {
            assert_eq!(pool_features(&f, omega).unwrap().len(), AUDIO_TOKENS.div_ceil(omega));
        }
        assert!(pool_features(&f, 3).is_err());
        let pooled = pool_features(&f, 2).unwrap();
        assert!(pool_features(&pooled, 2).is_err());
    }

    #[test]
    fn text_slots_are_independent() {
        let p = params();
        let a = ConditionTokens::for_target(Task::Timbre, 0, Timbre::Pure).unwrap();
        let b = ConditionTokens::for_target(Task::Timbre, 2, Timbre::Pure).unwrap();
        let (fa, fb) = (encode_text(&a, &p).unwrap(), encode_text(&b, &p).unwrap());
        assert_eq!(fa, encode_text(&a, &p).unwrap());
        for slot in 0..CAPTION_SLOTS {
            assert_eq!(fa.seq.row(slot) == fb.seq.row(slot), slot != 1);
        }
        let null = encode_text(&ConditionTokens::null(), &p).unwrap();
        let pos = sinusoidal_table(CAPTION_SLOTS, 32);
        for slot in 0..CAPTION_SLOTS {
            for j in 0..32 {
                let expected = p.text_embed.row(vocab::NULL)[j] + pos.row(slot)[j];
                assert_eq!(null.seq.row(slot)[j], expected);
            }
        }
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let bad = ConditionTokens { task: Task::Timbre, primary: 99, secondary: 0, null_flag: false };
        assert!(encode_text(&bad, &params()).is_err());
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let f = encode_audio(&Spectrogram::zeros(), &params()).unwrap();
        let t = ConditionTokens::for_target(Task::Timbre, 1, Timbre::Pure).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, d) = drop_conditions(f.clone(), t, &mut rng, 0.0);
        assert_eq!((a, b, d), (f.clone(), t, Dropped::default()));
        let (a, b, _) = drop_conditions(f.clone(), t, &mut rng, 1.0);
        assert!(a.is_zero());
        assert_eq!(b, ConditionTokens::null());

        let (mut audio, mut text) = (0, 0);
        for _ in 0..10_000 {
            let (_, _, d) = drop_conditions(f.clone(), t, &mut rng, 0.05);
            audio += d.audio as usize;
            text += d.text as usize;
        }
        for count in [audio, text] {
            let rate = count as f64 / 10_000.0;
            assert!((rate - 0.05).abs() <= 0.01, "{rate}");
        }
    }
}
