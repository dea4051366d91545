//! Procedurally rendered "music": semitone-binned spectrograms whose melody,
//! timbre, texture and accompaniment are known exactly.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub use io::{read_dataset, read_grids, write_dataset, write_grids, Record, FORMAT_VERSION};

/// Frequency bins (semitones) per spectrogram.
pub const FREQ_BINS: usize = 64;
/// Frames per spectrogram.
pub const FRAMES: usize = 64;
/// Melody notes per clip.
pub const MELODY_LEN: usize = 16;
/// Frames spanned by one melody note.
pub const FRAMES_PER_NOTE: usize = FRAMES / MELODY_LEN;
/// Lowest allowed melody pitch (inclusive).
pub const PITCH_MIN: u8 = 12;
/// Highest allowed melody pitch (exclusive); keeps `p + 24 < FREQ_BINS`.
pub const PITCH_MAX: u8 = 40;
/// Semitone offsets of harmonic partials 1..=4.
pub const PARTIAL_OFFSETS: [usize; 4] = [0, 12, 19, 24];
/// Magnitude of accompaniment voices relative to the melody.
pub const ACCOMP_SCALE: f32 = 0.6;
/// Fixed pitch of the bass accompaniment.
pub const BASS_PITCH: usize = 12;
/// Interval of the "third" accompaniment above the melody.
pub const THIRD_INTERVAL: usize = 4;
pub const PULSE_LEVEL: f32 = 0.3;
pub const FLOOR_LEVEL: f32 = 0.05;
pub const PULSE_PERIOD: usize = 8;

macro_rules! class_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Result<Self> {
                Self::ALL.get(i).copied().ok_or_else(|| {
                    contract(format!("{} class index {i} out of range", stringify!($name)))
                })
            }

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $label),+ }
            }

            pub fn from_name(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|c| c.name() == s)
                    .ok_or_else(|| contract(format!("unknown {} class '{s}'", stringify!($name))))
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

class_enum!(
    /// Harmonic amplitude template of the melody (the "instrument").
    Timbre { Pure => "pure", Bright => "bright", Odd => "odd", Dark => "dark" }
);
class_enum!(
    /// Broadband rhythmic background (the "genre").
    Texture { None => "none", Pulse => "pulse", Offbeat => "offbeat", Floor => "floor" }
);
class_enum!(
    /// Second voice accompanying the melody.
    Accomp { None => "none", Third => "third", Bass => "bass" }
);
class_enum!(
    /// Which attribute a caption talks about.
    Task { None => "none", Timbre => "timbre", Texture => "texture", Accomp => "accomp" }
);

impl Timbre {
    /// Amplitudes of partials 1..=4.
    pub fn template(self) -> [f32; 4] {
        match self {
            Timbre::Pure => [1.0, 0.0, 0.0, 0.0],
            Timbre::Bright => [1.0, 0.7, 0.5, 0.35],
            Timbre::Odd => [1.0, 0.0, 0.6, 0.0],
            Timbre::Dark => [1.0, 0.3, 0.1, 0.05],
        }
    }
}

impl Task {
    /// Number of target classes an edit of this task can request.
    pub fn class_count(self) -> usize {
        match self {
            Task::None => 0,
            Task::Timbre => Timbre::ALL.len(),
            Task::Texture => Texture::ALL.len(),
            Task::Accomp => Accomp::ALL.len(),
        }
    }

    pub fn class_name(self, class: usize) -> Result<&'static str> {
        match self {
            Task::None => Err(contract("task 'none' has no classes")),
            Task::Timbre => Timbre::from_index(class).map(Timbre::name),
            Task::Texture => Texture::from_index(class).map(Texture::name),
            Task::Accomp => Accomp::from_index(class).map(Accomp::name),
        }
    }

    pub fn class_from_name(self, name: &str) -> Result<usize> {
        match self {
            Task::None => Err(contract("task 'none' has no classes")),
            Task::Timbre => Timbre::from_name(name).map(Timbre::index),
            Task::Texture => Texture::from_name(name).map(Texture::index),
            Task::Accomp => Accomp::from_name(name).map(Accomp::index),
        }
    }
}

/// Symbolic description of one clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub melody: [u8; MELODY_LEN],
    pub timbre: Timbre,
    pub texture: Texture,
    pub accomp: Accomp,
    pub seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.melody.iter().find(|&&p| !(PITCH_MIN..PITCH_MAX).contains(&p)) {
            return Err(contract(format!("melody pitch {p} outside [{PITCH_MIN}, {PITCH_MAX})")));
        }
        Ok(())
    }

    pub fn class_of(&self, task: Task) -> Option<usize> {
        match task {
            Task::None => None,
            Task::Timbre => Some(self.timbre.index()),
            Task::Texture => Some(self.texture.index()),
            Task::Accomp => Some(self.accomp.index()),
        }
    }
}

/// Optional attribute constraints for [`sample_clip_spec`].
#[derive(Clone, Debug, Default)]
pub struct SpecPins {
    pub timbre: Option<Timbre>,
    pub texture: Option<Texture>,
    pub accomp: Option<Accomp>,
    /// Half-open melody pitch range; must lie inside `[PITCH_MIN, PITCH_MAX)`.
    pub pitch_range: Option<(u8, u8)>,
}

/// Draws a clip uniformly over the unpinned attributes; the melody is a
/// random walk with steps in `-2..=2` clamped to the pitch range.
pub fn sample_clip_spec<R: Rng + ?Sized>(rng: &mut R, pins: &SpecPins) -> Result<ClipSpec> {
    let (lo, hi) = pins.pitch_range.unwrap_or((PITCH_MIN, PITCH_MAX));
    if lo >= hi || lo < PITCH_MIN || hi > PITCH_MAX {
        return Err(contract(format!(
            "pitch range [{lo}, {hi}) is empty or outside [{PITCH_MIN}, {PITCH_MAX})"
        )));
    }
    let timbre = Timbre::ALL[rng.random_range(0..Timbre::ALL.len())];
    let texture = Texture::ALL[rng.random_range(0..Texture::ALL.len())];
    let accomp = Accomp::ALL[rng.random_range(0..Accomp::ALL.len())];
    let mut melody = [0u8; MELODY_LEN];
    let mut pitch = rng.random_range(lo..hi) as i32;
    for note in melody.iter_mut() {
        *note = pitch as u8;
        pitch = (pitch + rng.random_range(-2..=2)).clamp(lo as i32, hi as i32 - 1);
    }
    Ok(ClipSpec {
        melody,
        timbre: pins.timbre.unwrap_or(timbre),
        texture: pins.texture.unwrap_or(texture),
        accomp: pins.accomp.unwrap_or(accomp),
        seed: rng.random(),
    })
}

/// `FREQ_BINS x FRAMES` magnitudes in `[0, 1]`, bin-major (`values[bin * FRAMES + frame]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Vec<f32>,
}

impl Default for Spectrogram {
    fn default() -> Self {
        Self::zeros()
    }
}

impl Spectrogram {
    pub fn zeros() -> Self {
        Self { values: vec![0.0; FREQ_BINS * FRAMES] }
    }

    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        if values.len() != FREQ_BINS * FRAMES {
            return Err(crate::error::ApaError::Dimension(format!(
                "spectrogram needs {} values, got {}",
                FREQ_BINS * FRAMES,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(contract(format!("spectrogram value {v} is negative or not finite")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * FRAMES + frame]
    }

    fn add(&mut self, bin: usize, frame: usize, amount: f32) {
        if bin < FREQ_BINS {
            self.values[bin * FRAMES + frame] += amount;
        }
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Renders a clip spec. Pure function of the spec.
pub fn render_spectrogram(spec: &ClipSpec) -> Spectrogram {
    let mut grid = Spectrogram::zeros();
    let template = spec.timbre.template();
    for frame in 0..FRAMES {
        let pitch = spec.melody[frame / FRAMES_PER_NOTE] as usize;
        for (k, &offset) in PARTIAL_OFFSETS.iter().enumerate() {
            grid.add(pitch + offset, frame, template[k]);
            match spec.accomp {
                Accomp::None => {}
                Accomp::Third => grid.add(pitch + THIRD_INTERVAL + offset, frame, ACCOMP_SCALE * template[k]),
                Accomp::Bass => grid.add(BASS_PITCH + offset, frame, ACCOMP_SCALE * template[k]),
            }
        }
        let background = match spec.texture {
            Texture::None => 0.0,
            Texture::Pulse if frame % PULSE_PERIOD == 0 => PULSE_LEVEL,
            Texture::Offbeat if frame % PULSE_PERIOD == PULSE_PERIOD / 2 => PULSE_LEVEL,
            Texture::Pulse | Texture::Offbeat => 0.0,
            Texture::Floor => FLOOR_LEVEL,
        };
        if background > 0.0 {
            for bin in 0..FREQ_BINS {
                grid.add(bin, frame, background);
            }
        }
    }
    for v in grid.values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    grid
}

/// Vocabulary shared by all caption slots.
pub mod vocab {
    pub const NULL: usize = 0;
    pub const LOW_QUALITY: usize = 1;
    pub const PRESENT: usize = 2;
    pub const TASK_BASE: usize = 3;
    pub const TIMBRE_BASE: usize = 7;
    pub const TEXTURE_BASE: usize = 11;
    pub const ACCOMP_BASE: usize = 15;
    pub const SIZE: usize = 18;
}

/// Slot-structured caption: `[task, primary, secondary, presence]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionTokens {
    pub task: Task,
    pub primary: usize,
    pub secondary: usize,
    pub null_flag: bool,
}

/// Number of token slots per caption.
pub const CAPTION_SLOTS: usize = 4;

impl ConditionTokens {
    /// The empty-string condition.
    pub fn null() -> Self {
        Self { task: Task::None, primary: vocab::NULL, secondary: vocab::NULL, null_flag: true }
    }

    /// Generic "low quality" caption used as negative prompt for texture and
    /// accompaniment edits.
    pub fn low_quality(task: Task) -> Self {
        Self { task, primary: vocab::LOW_QUALITY, secondary: vocab::NULL, null_flag: false }
    }

    /// Caption requesting `class` of `task`; `context_timbre` fills the
    /// primary slot of accompaniment captions.
    pub fn for_target(task: Task, class: usize, context_timbre: Timbre) -> Result<Self> {
        let primary_of = |base: usize, count: usize| {
            if class < count {
                Ok(base + class)
            } else {
                Err(contract(format!("class {class} out of range for task {task}")))
            }
        };
        Ok(match task {
            Task::None => return Err(contract("task 'none' has no target classes")),
            Task::Timbre => Self {
                task,
                primary: primary_of(vocab::TIMBRE_BASE, Timbre::ALL.len())?,
                secondary: vocab::NULL,
                null_flag: false,
            },
            Task::Texture => Self {
                task,
                primary: primary_of(vocab::TEXTURE_BASE, Texture::ALL.len())?,
                secondary: vocab::NULL,
                null_flag: false,
            },
            Task::Accomp => Self {
                task,
                primary: vocab::TIMBRE_BASE + context_timbre.index(),
                secondary: primary_of(vocab::ACCOMP_BASE, Accomp::ALL.len())?,
                null_flag: false,
            },
        })
    }

    /// Token index of every slot.
    pub fn slots(&self) -> [usize; CAPTION_SLOTS] {
        if self.null_flag {
            return [vocab::NULL; CAPTION_SLOTS];
        }
        [vocab::TASK_BASE + self.task.index(), self.primary, self.secondary, vocab::PRESENT]
    }

    pub fn validate(&self) -> Result<()> {
        if self.null_flag && *self != Self::null() {
            return Err(contract("null caption must carry null indices in every slot"));
        }
        if let Some(bad) = [self.primary, self.secondary].into_iter().find(|&i| i >= vocab::SIZE) {
            return Err(contract(format!("token index {bad} out of vocabulary")));
        }
        Ok(())
    }
}

/// Caption describing `spec` from the point of view of `task`; `Task::None`
/// describes timbre and texture together.
pub fn caption_tokens(spec: &ClipSpec, task: Task) -> ConditionTokens {
    match task {
        Task::None => Ok(ConditionTokens {
            task,
            primary: vocab::TIMBRE_BASE + spec.timbre.index(),
            secondary: vocab::TEXTURE_BASE + spec.texture.index(),
            null_flag: false,
        }),
        Task::Timbre => ConditionTokens::for_target(task, spec.timbre.index(), spec.timbre),
        Task::Texture => ConditionTokens::for_target(task, spec.texture.index(), spec.timbre),
        Task::Accomp => ConditionTokens::for_target(task, spec.accomp.index(), spec.timbre),
    }
    .expect("spec classes are always in range")
}

/// `n` self-captioned records drawn from a ChaCha8 stream seeded with `seed`.
pub fn generate_records(n: usize, seed: u64, pins: &SpecPins) -> Result<Vec<Record>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let spec = sample_clip_spec(&mut rng, pins)?;
            Ok(Record { spectrogram: render_spectrogram(&spec), tokens: caption_tokens(&spec, Task::None), spec })
        })
        .collect()
}
