//! Noise-prediction network.
//!
//! A two-level encoder/decoder over the spectrogram grid. The 64x64 input is
//! folded 2x2 into 4 channels at 32x32 and tagged with fixed coordinate
//! channels; each level has two residual blocks, and the bottleneck and both
//! decoder levels carry a cross-attention site. Every site attends to the
//! caption through frozen projections and, when an adapter is present, to the
//! audio features through its own key/value projections sharing the query.

use apa_numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{AudioFeatures, EncoderParams, TextFeatures, PATCH_VALUES};
use crate::error::{contract, ApaError, Result};
use crate::params::{Bound, ParamStore};
use crate::synthdata::{vocab, FRAMES, FREQ_BINS};

/// Attention sites in forward order.
pub const SITES: [&str; 3] = ["mid", "dec2", "dec1"];
/// Fixed coordinate channels appended at the stem.
pub const POS_CHANNELS: usize = 8;
const FOLD: usize = 2;
const IN_CHANNELS: usize = FOLD * FOLD;
const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Channels at the 32x32 and 16x16 levels.
    pub channels: [usize; 2],
    /// Channels at the 8x8 bottleneck.
    pub bottleneck: usize,
    /// Query/key/value width at attention sites.
    pub attn_dim: usize,
    pub heads: usize,
    pub temb_dim: usize,
    pub text_dim: usize,
    pub audio_dim: usize,
    /// Number of diffusion training timesteps the embedding accepts.
    pub timesteps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32],
            bottleneck: 32,
            attn_dim: 32,
            heads: 2,
            temb_dim: 32,
            text_dim: 32,
            audio_dim: 32,
            timesteps: 200,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.channels[0], self.channels[1], self.bottleneck, self.attn_dim, self.temb_dim];
        if widths.contains(&0) || self.text_dim == 0 || self.audio_dim == 0 {
            return Err(contract("network widths must be positive"));
        }
        if self.heads == 0 || self.attn_dim % self.heads != 0 {
            return Err(contract(format!("{} heads do not divide attention width {}", self.heads, self.attn_dim)));
        }
        if self.temb_dim % 2 != 0 {
            return Err(contract("timestep embedding width must be even"));
        }
        if self.timesteps == 0 {
            return Err(contract("timesteps must be positive"));
        }
        Ok(())
    }

    /// Channel width at an attention site.
    pub fn site_channels(&self, site: &str) -> usize {
        match site {
            "mid" => self.bottleneck,
            "dec2" => self.channels[1],
            _ => self.channels[0],
        }
    }

    /// Closed-form size of the base parameter set.
    pub fn base_param_count(&self) -> usize {
        let [c0, c1] = self.channels;
        let (cb, d, te) = (self.bottleneck, self.attn_dim, self.temb_dim);
        let linear = |i: usize, o: usize| i * o + o;
        let res = |c: usize| 2 * c + 9 * c * c + c + te * c;
        let site = |c: usize| 2 * c + c * d + 2 * self.text_dim * d + d * c + c;
        vocab::SIZE * self.text_dim
            + PATCH_VALUES * self.audio_dim
            + linear(te, te)
            + linear(IN_CHANNELS + POS_CHANNELS, c0)
            + 4 * res(c0)
            + linear(c0, c1)
            + 4 * res(c1)
            + linear(c1, cb)
            + 2 * res(cb)
            + site(cb)
            + linear(cb + c1, c1)
            + site(c1)
            + linear(c1 + c0, c0)
            + site(c0)
            + 2 * c0
            + linear(c0, IN_CHANNELS)
    }

    /// Closed-form size of the adapter parameter set.
    pub fn adapter_param_count(&self) -> usize {
        SITES.len() * 2 * self.audio_dim * self.attn_dim
    }
}

/// Frozen backbone weights together with the encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseParams {
    pub config: UNetConfig,
    pub store: ParamStore,
}

/// Audio key/value projections, one pair per site.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub store: ParamStore,
}

pub fn adapter_key(site: &str) -> String {
    format!("{site}.adapter.k")
}

pub fn adapter_value(site: &str) -> String {
    format!("{site}.adapter.v")
}

/// Name of the frozen audio projection within the base store.
pub const AUDIO_PROJ: &str = "audio.proj";
/// Name of the caption token table within the base store.
pub const TEXT_EMBED: &str = "text.embed";

impl BaseParams {
    pub fn encoder(&self) -> Result<EncoderParams> {
        Ok(EncoderParams {
            audio_proj: self.store.get(AUDIO_PROJ)?.clone(),
            text_embed: self.store.get(TEXT_EMBED)?.clone(),
        })
    }
}

impl AdapterParams {
    pub fn check_against(&self, base: &BaseParams) -> Result<()> {
        let cfg = &base.config;
        for site in SITES {
            for name in [adapter_key(site), adapter_value(site)] {
                let shape = self.store.get(&name)?.shape();
                if shape != [cfg.audio_dim, cfg.attn_dim] {
                    return Err(contract(format!(
                        "adapter '{name}' has shape {shape:?}, base expects [{}, {}]",
                        cfg.audio_dim, cfg.attn_dim
                    )));
                }
            }
        }
        if self.store.len() != 2 * SITES.len() {
            return Err(contract("adapter holds tensors beyond the per-site key/value pairs"));
        }
        Ok(())
    }
}

enum Init {
    Fan(usize),
    /// Fan-in scaling times a gain.
    Scaled(usize, f64),
    Zeros,
    Ones,
}

struct Builder {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        let t = match init {
            Init::Fan(fan_in) => return self.add(name, shape, Init::Scaled(fan_in, 1.0)),
            Init::Scaled(fan_in, gain) => {
                let std = (gain / (fan_in as f64).sqrt()) as f32;
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| std * rng.sample::<f32, _>(StandardNormal))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        self.store.insert(name, t);
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) {
        self.add(format!("{name}.w"), &[i, o], Init::Fan(i));
        self.add(format!("{name}.b"), &[o], Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.norm.g"), &[c], Init::Ones);
        self.add(format!("{name}.norm.b"), &[c], Init::Zeros);
    }

    fn res(&mut self, name: &str, c: usize, temb: usize) {
        self.norm(name, c);
        self.linear(&format!("{name}.conv"), 9 * c, c);
        self.add(format!("{name}.temb.w"), &[temb, c], Init::Fan(temb));
    }

    fn site(&mut self, name: &str, c: usize, cfg: &UNetConfig) {
        let d = cfg.attn_dim;
        self.norm(name, c);
        self.add(format!("{name}.q"), &[c, d], Init::Fan(c));
        self.add(format!("{name}.k"), &[cfg.text_dim, d], Init::Fan(cfg.text_dim));
        self.add(format!("{name}.v"), &[cfg.text_dim, d], Init::Fan(cfg.text_dim));
        self.linear(&format!("{name}.out"), d, c);
    }
}

/// Seeded initialization of the base network and a randomly initialized
/// adapter placeholder (normally replaced by [`init_adapter_from_text`]).
pub fn init_params(config: &UNetConfig, seed: u64) -> Result<(BaseParams, AdapterParams)> {
    config.validate()?;
    let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), store: ParamStore::new() };
    let enc = EncoderParams::init(b.rng.random(), config.audio_dim, config.text_dim);
    b.store.insert(AUDIO_PROJ, enc.audio_proj);
    b.store.insert(TEXT_EMBED, enc.text_embed);

    let [c0, c1] = config.channels;
    let (cb, te) = (config.bottleneck, config.temb_dim);
    b.linear("time.proj", te, te);
    b.linear("stem", IN_CHANNELS + POS_CHANNELS, c0);
    for name in ["enc1.0", "enc1.1"] {
        b.res(name, c0, te);
    }
    b.linear("down", c0, c1);
    for name in ["enc2.0", "enc2.1"] {
        b.res(name, c1, te);
    }
    b.linear("mid.in", c1, cb);
    for name in ["mid.0", "mid.1"] {
        b.res(name, cb, te);
    }
    b.site("mid", cb, config);
    b.linear("up2", cb + c1, c1);
    for name in ["dec2.0", "dec2.1"] {
        b.res(name, c1, te);
    }
    b.site("dec2", c1, config);
    b.linear("up1", c1 + c0, c0);
    for name in ["dec1.0", "dec1.1"] {
        b.res(name, c0, te);
    }
    b.site("dec1", c0, config);
    b.norm("head", c0);
    // Small output layer: the untrained network predicts near-zero noise.
    b.add("head.w", &[c0, IN_CHANNELS], Init::Scaled(c0, 0.1));
    b.add("head.b", &[IN_CHANNELS], Init::Zeros);
    let base = BaseParams { config: config.clone(), store: b.store };

    let mut a = Builder { rng: b.rng, store: ParamStore::new() };
    for site in SITES {
        a.add(adapter_key(site), &[config.audio_dim, config.attn_dim], Init::Fan(config.audio_dim));
        a.add(adapter_value(site), &[config.audio_dim, config.attn_dim], Init::Fan(config.audio_dim));
    }
    Ok((base, AdapterParams { store: a.store }))
}

/// Adapter whose audio key/value projections are copies of the text ones.
pub fn init_adapter_from_text(base: &BaseParams) -> Result<AdapterParams> {
    let cfg = &base.config;
    if cfg.audio_dim != cfg.text_dim {
        return Err(contract(format!(
            "cannot copy text projections: audio width {} differs from text width {}",
            cfg.audio_dim, cfg.text_dim
        )));
    }
    let mut store = ParamStore::new();
    for site in SITES {
        store.insert(adapter_key(site), base.store.get(&format!("{site}.k"))?.clone());
        store.insert(adapter_value(site), base.store.get(&format!("{site}.v"))?.clone());
    }
    Ok(AdapterParams { store })
}

/// Sinusoidal embedding of timestep `t`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    Tensor::from_fn([1, dim], |j| {
        let freq = (-(10000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let a = t as f64 * freq;
        (if j < half { a.sin() } else { a.cos() }) as f32
    })
}

/// Coordinate channels of the folded grid: linear ramps along both axes and
/// sinusoids with periods matched to the rhythmic and register structure.
fn position_channels(h: usize, w: usize) -> Tensor<f32> {
    use std::f64::consts::TAU;
    Tensor::from_fn([h * w, POS_CHANNELS], |i| {
        let (cell, ch) = (i / POS_CHANNELS, i % POS_CHANNELS);
        let (y, x) = ((cell / w) as f64, (cell % w) as f64);
        let v = match ch {
            0 => 2.0 * y / (h - 1) as f64 - 1.0,
            1 => 2.0 * x / (w - 1) as f64 - 1.0,
            2 => (TAU * x / 4.0).sin(),
            3 => (TAU * x / 4.0).cos(),
            4 => (TAU * x / 8.0).sin(),
            5 => (TAU * x / 8.0).cos(),
            6 => (TAU * y / 16.0).sin(),
            _ => (TAU * y / 16.0).cos(),
        };
        v as f32
    })
}

/// Tape handles for one forward pass.
pub struct Net<'a> {
    pub cfg: &'a UNetConfig,
    pub params: &'a Bound,
}

impl Net<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    fn linear(&self, tape: &mut Tape<f32>, x: Var, name: &str) -> Result<Var> {
        let y = tape.matmul(x, self.p(&format!("{name}.w"))?)?;
        Ok(tape.add_row(y, self.p(&format!("{name}.b"))?)?)
    }

    fn norm(&self, tape: &mut Tape<f32>, x: Var, name: &str) -> Result<Var> {
        let (g, b) = (self.p(&format!("{name}.norm.g"))?, self.p(&format!("{name}.norm.b"))?);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    fn res(&self, tape: &mut Tape<f32>, x: Var, temb: Var, name: &str, h: usize, w: usize) -> Result<Var> {
        let n = self.norm(tape, x, name)?;
        let a = tape.silu(n);
        let cols = tape.im2col3x3(a, h, w)?;
        let conv = self.linear(tape, cols, &format!("{name}.conv"))?;
        let tproj = tape.matmul(temb, self.p(&format!("{name}.temb.w"))?)?;
        let c = tape.shape(tproj)[1];
        let trow = tape.reshape(tproj, [c])?;
        let conv = tape.add_row(conv, trow)?;
        Ok(tape.add(x, conv)?)
    }

    /// `attn(z Wq, c_y Wk, c_y Wv) + alpha * attn(z Wq, c_x W'k, c_x W'v)`
    /// for an already normalized `z`. The audio branch is skipped when
    /// `alpha == 0` or no audio is given.
    pub fn fused_attention(
        &self,
        tape: &mut Tape<f32>,
        site: &str,
        z: Var,
        c_y: Var,
        c_x: Option<Var>,
        alpha: f32,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        let q = tape.matmul(z, self.p(&format!("{site}.q"))?)?;
        let k = tape.matmul(c_y, self.p(&format!("{site}.k"))?)?;
        let v = tape.matmul(c_y, self.p(&format!("{site}.v"))?)?;
        let z_text = tape.attention(q, k, v, heads)?;
        let Some(c_x) = c_x.filter(|_| alpha != 0.0) else { return Ok(z_text) };
        let (ak, av) = (adapter_key(site), adapter_value(site));
        if !self.params.has(&ak) || !self.params.has(&av) {
            return Err(contract(format!("audio conditioning at site '{site}' needs adapter weights")));
        }
        let k = tape.matmul(c_x, self.p(&ak)?)?;
        let v = tape.matmul(c_x, self.p(&av)?)?;
        let z_audio = tape.attention(q, k, v, heads)?;
        let scaled = tape.scale(z_audio, alpha);
        Ok(tape.add(z_text, scaled)?)
    }

    fn site(&self, tape: &mut Tape<f32>, x: Var, site: &str, c_y: Var, c_x: Option<Var>, alpha: f32) -> Result<Var> {
        let z = self.norm(tape, x, site)?;
        let fused = self.fused_attention(tape, site, z, c_y, c_x, alpha)?;
        let out = self.linear(tape, fused, &format!("{site}.out"))?;
        Ok(tape.add(x, out)?)
    }

    /// Predicted noise for `x_t` (shape `[FREQ_BINS * FRAMES, 1]`, row-major
    /// bins by frames); the result has the same shape.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        x_t: Var,
        t: usize,
        c_y: Var,
        c_x: Option<Var>,
        alpha: f32,
    ) -> Result<Var> {
        let cfg = self.cfg;
        if t >= cfg.timesteps {
            return Err(contract(format!("timestep {t} outside [0, {})", cfg.timesteps)));
        }
        if tape.shape(x_t) != [FREQ_BINS * FRAMES, 1] {
            return Err(ApaError::Dimension(format!(
                "network input must be [{}, 1], got {:?}",
                FREQ_BINS * FRAMES,
                tape.shape(x_t)
            )));
        }
        let (h1, w1) = (FREQ_BINS / FOLD, FRAMES / FOLD);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let (h3, w3) = (h2 / 2, w2 / 2);

        let temb = tape.constant(timestep_embedding(t, cfg.temb_dim));
        let temb = self.linear(tape, temb, "time.proj")?;
        let temb = tape.silu(temb);

        let folded = tape.pixel_unshuffle(x_t, FREQ_BINS, FRAMES, FOLD)?;
        let pos = tape.constant(position_channels(h1, w1));
        let stem_in = tape.concat_cols(folded, pos)?;
        let mut x = self.linear(tape, stem_in, "stem")?;
        for name in ["enc1.0", "enc1.1"] {
            x = self.res(tape, x, temb, name, h1, w1)?;
        }
        let s1 = x;
        let x = tape.avg_pool2(s1, h1, w1)?;
        let mut x = self.linear(tape, x, "down")?;
        for name in ["enc2.0", "enc2.1"] {
            x = self.res(tape, x, temb, name, h2, w2)?;
        }
        let s2 = x;
        let x = tape.avg_pool2(s2, h2, w2)?;
        let x = self.linear(tape, x, "mid.in")?;
        let x = self.res(tape, x, temb, "mid.0", h3, w3)?;
        let x = self.site(tape, x, "mid", c_y, c_x, alpha)?;
        let x = self.res(tape, x, temb, "mid.1", h3, w3)?;

        let x = tape.upsample2(x, h3, w3)?;
        let x = tape.concat_cols(x, s2)?;
        let x = self.linear(tape, x, "up2")?;
        let x = self.res(tape, x, temb, "dec2.0", h2, w2)?;
        let x = self.site(tape, x, "dec2", c_y, c_x, alpha)?;
        let x = self.res(tape, x, temb, "dec2.1", h2, w2)?;

        let x = tape.upsample2(x, h2, w2)?;
        let x = tape.concat_cols(x, s1)?;
        let x = self.linear(tape, x, "up1")?;
        let x = self.res(tape, x, temb, "dec1.0", h1, w1)?;
        let x = self.site(tape, x, "dec1", c_y, c_x, alpha)?;
        let x = self.res(tape, x, temb, "dec1.1", h1, w1)?;

        let x = self.norm(tape, x, "head")?;
        let x = tape.silu(x);
        let x = self.linear(tape, x, "head")?;
        Ok(tape.pixel_shuffle(x, h1, w1, FOLD)?)
    }
}

fn stores<'a>(base: &'a BaseParams, adapter: Option<&'a AdapterParams>) -> Vec<&'a ParamStore> {
    let mut out = vec![&base.store];
    out.extend(adapter.map(|a| &a.store));
    out
}

fn check_cond(base: &BaseParams, c_y: &TextFeatures, c_x: Option<&AudioFeatures>) -> Result<()> {
    let cfg = &base.config;
    if c_y.seq.dims2()?.1 != cfg.text_dim {
        return Err(ApaError::Dimension(format!("caption features are {:?}, width {} expected", c_y.seq.shape(), cfg.text_dim)));
    }
    if let Some(f) = c_x {
        if f.seq().dims2()?.1 != cfg.audio_dim {
            return Err(ApaError::Dimension(format!("audio features are {:?}, width {} expected", f.seq().shape(), cfg.audio_dim)));
        }
    }
    Ok(())
}

/// Fused cross-attention output (before the site's output projection) for a
/// site input `z` of shape `[n, channels]`; `z` is used as given.
#[allow(clippy::too_many_arguments)]
pub fn fused_cross_attention(
    z: &Tensor<f32>,
    site: &str,
    c_y: &TextFeatures,
    c_x: Option<&AudioFeatures>,
    alpha: f32,
    base: &BaseParams,
    adapter: Option<&AdapterParams>,
) -> Result<Tensor<f32>> {
    if !SITES.contains(&site) {
        return Err(contract(format!("unknown attention site '{site}'")));
    }
    check_cond(base, c_y, c_x)?;
    let width = base.config.site_channels(site);
    if z.dims2()?.1 != width {
        return Err(ApaError::Dimension(format!("site '{site}' expects {width} channels, got {:?}", z.shape())));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &stores(base, adapter), &|_| false)?;
    let net = Net { cfg: &base.config, params: &bound };
    let zv = tape.constant(z.clone());
    let cy = tape.constant(c_y.seq.clone());
    let cx = c_x.map(|f| tape.constant(f.seq().clone()));
    let out = net.fused_attention(&mut tape, site, zv, cy, cx, alpha)?;
    Ok(tape.value(out).clone())
}

/// Noise prediction for a `[FREQ_BINS, FRAMES]` input at timestep `t`.
pub fn predict_noise(
    x_t: &Tensor<f32>,
    t: usize,
    c_y: &TextFeatures,
    c_x: Option<&AudioFeatures>,
    alpha: f32,
    base: &BaseParams,
    adapter: Option<&AdapterParams>,
) -> Result<Tensor<f32>> {
    if x_t.shape() != [FREQ_BINS, FRAMES] {
        return Err(ApaError::Dimension(format!("expected a {FREQ_BINS}x{FRAMES} input, got {:?}", x_t.shape())));
    }
    check_cond(base, c_y, c_x)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &stores(base, adapter), &|_| false)?;
    let net = Net { cfg: &base.config, params: &bound };
    let x = tape.constant(x_t.clone().reshape([FREQ_BINS * FRAMES, 1])?);
    let cy = tape.constant(c_y.seq.clone());
    let cx = c_x.map(|f| tape.constant(f.seq().clone()));
    let out = net.forward(&mut tape, x, t, cy, cx, alpha)?;
    Ok(tape.value(out).clone().reshape([FREQ_BINS, FRAMES])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{encode_audio, encode_text, pool_features};
    use crate::synthdata::{ConditionTokens, Spectrogram, Task, Timbre};

    fn setup() -> (BaseParams, AdapterParams) {
        init_params(&UNetConfig::default(), 3).unwrap()
    }

    #[test]
    fn param_count_matches_shapes() {
        let cfg = UNetConfig::default();
        let (base, adapter) = setup();
        let count = |s: &ParamStore| s.iter().map(|(_, t)| t.shape().iter().product::<usize>()).sum::<usize>();
        assert_eq!(count(&base.store), cfg.base_param_count());
        assert_eq!(count(&adapter.store), cfg.adapter_param_count());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = UNetConfig::default();
        assert_eq!(init_params(&cfg, 0).unwrap(), init_params(&cfg, 0).unwrap());
        assert_ne!(init_params(&cfg, 0).unwrap().0, init_params(&cfg, 1).unwrap().0);
    }

    #[test]
    fn adapter_copy_is_deep() {
        let (base, _) = setup();
        let mut adapter = init_adapter_from_text(&base).unwrap();
        for site in SITES {
            assert_eq!(adapter.store.get(&adapter_key(site)).unwrap(), base.store.get(&format!("{site}.k")).unwrap());
            assert_eq!(adapter.store.get(&adapter_value(site)).unwrap(), base.store.get(&format!("{site}.v")).unwrap());
        }
        let before = base.clone();
        adapter.store.get_mut(&adapter_key("mid")).unwrap().data_mut()[0] += 1.0;
        assert_eq!(base, before);
        adapter.check_against(&base).unwrap();
    }

    #[test]
    fn adapter_copy_needs_matching_widths() {
        let cfg = UNetConfig { audio_dim: 16, ..Default::default() };
        let (base, _) = init_params(&cfg, 0).unwrap();
        assert!(init_adapter_from_text(&base).is_err());
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let (base, adapter) = setup();
        let enc = base.encoder().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn([FREQ_BINS, FRAMES], |_| rng.sample::<f32, _>(StandardNormal));
        let cy = encode_text(&ConditionTokens::for_target(Task::Timbre, 1, Timbre::Pure).unwrap(), &enc).unwrap();
        let cx = pool_features(&encode_audio(&Spectrogram::zeros(), &enc).unwrap(), 2).unwrap();
        let a = predict_noise(&x, 17, &cy, Some(&cx), 0.5, &base, Some(&adapter)).unwrap();
        let b = predict_noise(&x, 17, &cy, Some(&cx), 0.5, &base, Some(&adapter)).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.is_finite());
        assert_eq!(a, b);
        assert!(predict_noise(&x, 200, &cy, None, 0.0, &base, None).is_err());
        assert!(predict_noise(&x, 0, &cy, Some(&cx), 0.5, &base, None).is_err());
    }
}
