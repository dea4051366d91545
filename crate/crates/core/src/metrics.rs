//! Fidelity, distribution and attribute metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{contract, ApaError, Result};
use crate::synthdata::{
    Accomp, Spectrogram, Task, Texture, Timbre, ACCOMP_SCALE, BASS_PITCH, FLOOR_LEVEL, FRAMES, FRAMES_PER_NOTE,
    FREQ_BINS, PARTIAL_OFFSETS, PITCH_MAX, PITCH_MIN, PULSE_LEVEL, PULSE_PERIOD, THIRD_INTERVAL,
};

pub const PITCH_CLASSES: usize = 12;
/// Frames (or clips) whose vectors are shorter than this are treated as silent.
pub const SILENCE: f64 = 1e-9;
/// Diagonal load added to under-sampled covariance estimates.
pub const COV_REGULARIZER: f64 = 1e-6;
const TEXTURE_SIGMA: f64 = 0.025;
const ACCOMP_SIGMA: f64 = 0.15;

/// `12 x FRAMES` pitch-class energies, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Chromagram {
    values: Vec<f64>,
}

impl Chromagram {
    pub fn get(&self, class: usize, frame: usize) -> f64 {
        self.values[class * FRAMES + frame]
    }

    fn column(&self, frame: usize) -> [f64; PITCH_CLASSES] {
        std::array::from_fn(|c| self.get(c, frame))
    }
}

/// Folds bins modulo 12.
pub fn chroma_extract(x: &Spectrogram) -> Chromagram {
    let mut values = vec![0.0; PITCH_CLASSES * FRAMES];
    for bin in 0..FREQ_BINS {
        let c = bin % PITCH_CLASSES;
        for f in 0..FRAMES {
            values[c * FRAMES + f] += x.get(bin, f) as f64;
        }
    }
    Chromagram { values }
}

/// Mean framewise cosine between chromagrams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChromaSimilarity {
    pub score: f64,
    /// Frames that entered the mean.
    pub frames: usize,
    /// No frame had energy in both clips; `score` is 0.
    pub degenerate: bool,
}

pub fn chroma_similarity_detail(a: &Spectrogram, b: &Spectrogram) -> ChromaSimilarity {
    let (ca, cb) = (chroma_extract(a), chroma_extract(b));
    let mut total = 0.0;
    let mut frames = 0;
    for f in 0..FRAMES {
        let (u, v) = (ca.column(f), cb.column(f));
        let (nu, nv) = (norm(&u), norm(&v));
        if nu < SILENCE || nv < SILENCE {
            continue;
        }
        total += (dot(&u, &v) / (nu * nv)).clamp(-1.0, 1.0);
        frames += 1;
    }
    if frames == 0 {
        return ChromaSimilarity { score: 0.0, frames, degenerate: true };
    }
    ChromaSimilarity { score: total / frames as f64, frames, degenerate: false }
}

pub fn chroma_similarity(a: &Spectrogram, b: &Spectrogram) -> f64 {
    chroma_similarity_detail(a, b).score
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na >= SILENCE && nb >= SILENCE).then(|| (dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Sample mean and unbiased covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// With fewer than `d + 1` samples the covariance is loaded with
/// [`COV_REGULARIZER`] on the diagonal.
pub fn feature_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let Some(first) = features.first() else { return Err(contract("feature set is empty")) };
    let d = first.len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(ApaError::Dimension("feature vectors must share a positive dimension".into()));
    }
    let n = features.len();
    let mean = DVector::from_fn(d, |i, _| features.iter().map(|f| f[i]).sum::<f64>() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    if n < d + 1 {
        cov += DMatrix::identity(d, d) * COV_REGULARIZER;
    }
    Ok(GaussianStats { mean, cov })
}

/// Square root of a symmetric matrix with negative eigenvalues clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`, floored at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.nrows() != a.dim() || b.cov.nrows() != b.dim() {
        return Err(contract(format!("cannot compare {}-d and {}-d statistics", a.dim(), b.dim())));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let s1h = psd_sqrt(&a.cov);
    let cross = psd_sqrt(&(&s1h * &b.cov * &s1h));
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Per-class attribute scores in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeScores {
    pub timbre: [f64; 4],
    pub texture: [f64; 4],
    pub accomp: [f64; 3],
    /// The input was silent; every score is 0.
    pub degenerate: bool,
}

impl AttributeScores {
    pub fn score(&self, task: Task, class: usize) -> Result<f64> {
        let table: &[f64] = match task {
            Task::None => return Err(contract("task 'none' has no attribute scores")),
            Task::Timbre => &self.timbre,
            Task::Texture => &self.texture,
            Task::Accomp => &self.accomp,
        };
        table.get(class).copied().ok_or_else(|| contract(format!("class {class} out of range for task {task}")))
    }

    pub fn argmax(&self, task: Task) -> Result<usize> {
        let n = task.class_count();
        let mut best = 0;
        for c in 1..n {
            if self.score(task, c)? > self.score(task, best)? {
                best = c;
            }
        }
        Ok(best)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn similarity(features: &[f64], template: &[f64], sigma: f64) -> f64 {
    let d2: f64 = features.iter().zip(template).map(|(a, b)| (a - b).powi(2)).sum();
    2.0 * (-d2 / (2.0 * sigma * sigma)).exp() - 1.0
}

/// What the oracle reads from one note segment.
struct Segment {
    /// Residual above the broadband level, averaged over the segment's
    /// quietest-background frames.
    residual: [f64; FREQ_BINS],
    pitch: usize,
}

fn segments(x: &Spectrogram, level: &[f64]) -> Vec<Segment> {
    (0..FRAMES / FRAMES_PER_NOTE)
        .map(|s| {
            let frames: Vec<usize> = (s * FRAMES_PER_NOTE..(s + 1) * FRAMES_PER_NOTE).collect();
            let floor = frames.iter().map(|&f| level[f]).fold(f64::INFINITY, f64::min);
            let quiet: Vec<usize> = frames.into_iter().filter(|&f| level[f] <= floor + 1e-9).collect();
            let residual = std::array::from_fn(|b| {
                quiet.iter().map(|&f| (x.get(b, f) as f64 - level[f]).max(0.0)).sum::<f64>() / quiet.len() as f64
            });
            let mut pitch = PITCH_MIN as usize;
            for b in PITCH_MIN as usize..PITCH_MAX as usize {
                if residual[b] > residual[pitch] {
                    pitch = b;
                }
            }
            Segment { residual, pitch }
        })
        .collect()
}

fn bass_bins() -> impl Iterator<Item = usize> {
    PARTIAL_OFFSETS.iter().map(|o| BASS_PITCH + o)
}

/// Analytic attribute detector.
///
/// The broadband level of each frame is its median over bins; the texture
/// is read from how that level varies across the rhythmic cycle. Above it,
/// each note segment's strongest bin in the melodic register is taken as the
/// fundamental, and the partial amplitudes at the template offsets are
/// compared with every timbre template. The accompaniment is read from the
/// residual a major third above the melody and at the bass pitch.
pub fn attribute_oracle(x: &Spectrogram) -> AttributeScores {
    if x.values().iter().all(|&v| (v as f64) < SILENCE) {
        return AttributeScores { timbre: [0.0; 4], texture: [0.0; 4], accomp: [0.0; 3], degenerate: true };
    }
    let level: Vec<f64> = (0..FRAMES).map(|f| median((0..FREQ_BINS).map(|b| x.get(b, f) as f64).collect())).collect();

    let mean_level = |keep: &dyn Fn(usize) -> bool| {
        let picked: Vec<f64> = (0..FRAMES).filter(|&f| keep(f)).map(|f| level[f]).collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    };
    let half = PULSE_PERIOD / 2;
    let texture_features = [
        mean_level(&|f| f % PULSE_PERIOD == 0),
        mean_level(&|f| f % PULSE_PERIOD == half),
        mean_level(&|f| f % PULSE_PERIOD != 0 && f % PULSE_PERIOD != half),
    ];
    let (pulse, floor) = (PULSE_LEVEL as f64, FLOOR_LEVEL as f64);
    let texture = std::array::from_fn(|i| {
        let t = Texture::ALL[i];
        let template = match t {
            Texture::None => [0.0, 0.0, 0.0],
            Texture::Pulse => [pulse, 0.0, 0.0],
            Texture::Offbeat => [0.0, pulse, 0.0],
            Texture::Floor => [floor, floor, floor],
        };
        similarity(&texture_features, &template, TEXTURE_SIGMA)
    });

    let segs = segments(x, &level);
    let partials = |s: &Segment| -> Vec<f64> {
        PARTIAL_OFFSETS.iter().map(|o| s.residual.get(s.pitch + o).copied().unwrap_or(0.0)).collect()
    };

    // Accompaniment tracks. The bass reading skips notes on the bass pitch.
    let third: Vec<f64> = segs.iter().map(|s| s.residual.get(s.pitch + THIRD_INTERVAL).copied().unwrap_or(0.0)).collect();
    let bass: Vec<f64> = segs.iter().filter(|s| s.pitch != BASS_PITCH).map(|s| s.residual[BASS_PITCH]).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let accomp_features = [mean(&third), mean(&bass)];
    let a = ACCOMP_SCALE as f64;
    let accomp = std::array::from_fn(|i| {
        let c = Accomp::ALL[i];
        let template = match c {
            Accomp::None => [0.0, 0.0],
            Accomp::Third => [a, 0.0],
            Accomp::Bass => [0.0, a],
        };
        similarity(&accomp_features, &template, ACCOMP_SIGMA)
    });

    // Timbre. When a bass line is heard, notes whose partials land on bass
    // partials are left out.
    let bass_heard = accomp[Accomp::Bass.index()] > accomp[Accomp::None.index()];
    let collides = |s: &Segment| bass_heard && PARTIAL_OFFSETS.iter().any(|o| bass_bins().any(|b| b == s.pitch + o));
    let clean: Vec<&Segment> = segs.iter().filter(|s| !collides(s)).collect();
    let usable: Vec<&Segment> = if clean.is_empty() { segs.iter().collect() } else { clean };
    let timbre = std::array::from_fn(|i| {
        let t = Timbre::ALL[i];
        let template: Vec<f64> = t.template().iter().map(|&v| v as f64).collect();
        let scores: Vec<f64> = usable.iter().filter_map(|s| cosine(&partials(s), &template)).collect();
        mean(&scores)
    });

    AttributeScores { timbre, texture, accomp, degenerate: false }
}

/// `(score + 1) / 2` for the requested class.
pub fn transfer_score(x: &Spectrogram, task: Task, class: usize) -> Result<f64> {
    Ok((attribute_oracle(x).score(task, class)? + 1.0) / 2.0)
}
