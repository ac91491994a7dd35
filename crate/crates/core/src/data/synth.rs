//! Seeded synthetic clips whose tags have audio correlates by construction:
//! four tone bands, two amplitude-modulation rates on a shared carrier,
//! broadband noise, and a harmonic stack. Every clip is a deterministic
//! function of (seed, clip index); clip i draws from stream i of a ChaCha
//! generator, so emission order does not matter.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::{write_wav_pcm16, AudioClip};

use super::{read_manifest, write_manifest, DataError, Manifest, ManifestEntry, Split};

pub const TAG_NAMES: [&str; 8] = [
    "tone_500", "tone_1500", "tone_2500", "tone_4500", "am_slow", "am_fast", "noise",
    "harmonic",
];

const TAG_PROBS: [f64; 8] = [0.35, 0.35, 0.35, 0.35, 0.30, 0.30, 0.40, 0.30];
const TONE_FREQS: [f64; 4] = [500.0, 1500.0, 2500.0, 4500.0];
const TONE_AMP: f64 = 0.15;
const AM_CARRIER: f64 = 3500.0;
const AM_AMP: f64 = 0.25;
const AM_RATES: [f64; 2] = [2.0, 10.0];
const NOISE_AMP: f64 = 0.09;
const BED_AMP: f64 = 0.005;
const HARMONIC_F0: f64 = 1050.0;
const HARMONIC_PARTIALS: usize = 5;
const HARMONIC_AMP: f64 = 0.06;
const PEAK: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_clips: 1000, duration_s: 5.5, sample_rate: 16000, seed: 42 }
    }
}

fn clip_rng(cfg: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn draw_tags(rng: &mut ChaCha8Rng) -> [bool; 8] {
    let mut tags = [false; 8];
    for (t, &p) in tags.iter_mut().zip(&TAG_PROBS) {
        *t = rng.gen_bool(p);
    }
    tags
}

/// The tag vector clip `index` will carry, without rendering its audio.
pub fn tags_for(cfg: &SynthConfig, index: usize) -> [bool; 8] {
    draw_tags(&mut clip_rng(cfg, index))
}

/// Renders the audio for the given tag vector; phases come from `rng`.
pub(crate) fn render(tags: &[bool; 8], n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut x = vec![0.0f64; n];
    let phase = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..2.0 * PI);

    for v in x.iter_mut() {
        *v = BED_AMP * rng.gen_range(-1.0..1.0);
    }
    for (b, &f) in TONE_FREQS.iter().enumerate() {
        if tags[b] {
            let p = phase(rng);
            let w = 2.0 * PI * f / rate;
            for (t, v) in x.iter_mut().enumerate() {
                *v += TONE_AMP * (w * t as f64 + p).sin();
            }
        }
    }
    if tags[4] || tags[5] {
        let pc = phase(rng);
        let wc = 2.0 * PI * AM_CARRIER / rate;
        let mut env = vec![1.0f64; n];
        for (a, &r) in AM_RATES.iter().enumerate() {
            if tags[4 + a] {
                let p = phase(rng);
                let w = 2.0 * PI * r / rate;
                for (t, e) in env.iter_mut().enumerate() {
                    *e *= 0.5 * (1.0 + (w * t as f64 + p).sin());
                }
            }
        }
        for (t, v) in x.iter_mut().enumerate() {
            *v += AM_AMP * env[t] * (wc * t as f64 + pc).sin();
        }
    }
    if tags[6] {
        for v in x.iter_mut() {
            *v += NOISE_AMP * rng.gen_range(-1.0..1.0);
        }
    }
    if tags[7] {
        for k in 1..=HARMONIC_PARTIALS {
            let p = phase(rng);
            let w = 2.0 * PI * HARMONIC_F0 * k as f64 / rate;
            for (t, v) in x.iter_mut().enumerate() {
                *v += HARMONIC_AMP * (w * t as f64 + p).sin();
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > PEAK { PEAK / peak } else { 1.0 };
    x.iter().map(|&v| (v * scale) as f32).collect()
}

/// Samples and tags for clip `index`.
pub fn render_clip(cfg: &SynthConfig, index: usize) -> (Vec<f32>, [bool; 8]) {
    let mut rng = clip_rng(cfg, index);
    let tags = draw_tags(&mut rng);
    let n = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    let samples = render(&tags, n, cfg.sample_rate as f64, &mut rng);
    (samples, tags)
}

fn split_for(index: usize) -> Split {
    match index % 10 {
        0..=6 => Split::Train,
        7 => Split::Valid,
        _ => Split::Test,
    }
}

/// Writes `clips/clip_#####.wav` files plus `manifest.csv` under `out_dir`
/// and returns the loaded manifest. Splits cycle 70/10/20 by index.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest, DataError> {
    let clip_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clip_dir)
        .map_err(|source| DataError::Io { path: clip_dir.clone(), source })?;

    let entries: Vec<ManifestEntry> = (0..cfg.n_clips)
        .into_par_iter()
        .map(|i| {
            let (samples, tags) = render_clip(cfg, i);
            let name = format!("clip_{i:05}.wav");
            let path = clip_dir.join(&name);
            let clip = AudioClip { samples, sample_rate: cfg.sample_rate };
            write_wav_pcm16(&path, &clip)
                .map_err(|source| DataError::Wav { path: path.clone(), source })?;
            Ok(ManifestEntry {
                clip_id: format!("clip_{i:05}"),
                path: Path::new("clips").join(&name),
                split: split_for(i),
                tags: TAG_NAMES
                    .iter()
                    .zip(&tags)
                    .filter(|(_, &on)| on)
                    .map(|(t, _)| t.to_string())
                    .collect(),
            })
        })
        .collect::<Result<_, DataError>>()?;

    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &Manifest { entries })?;
    read_manifest(&manifest_path)
}

fn goertzel_power(x: &[f32], rate: f64, freq: f64) -> f64 {
    let w = 2.0 * PI * freq / rate;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for &v in x {
        let s0 = v as f64 + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    let p = s1 * s1 + s2 * s2 - coeff * s1 * s2;
    // |X|^2 scaled to squared amplitude of a pure sine.
    4.0 * p / (x.len() as f64 * x.len() as f64)
}

/// Band-limited envelope around the AM carrier: quadrature demodulation,
/// then a moving average whose nulls sit on the tone beat frequencies.
fn am_envelope(x: &[f32], rate: f64) -> (Vec<f32>, f64) {
    let window = (rate / 500.0).round() as usize;
    let wc = 2.0 * PI * AM_CARRIER / rate;
    let mut env = Vec::with_capacity(x.len() / window);
    let mut start = 0;
    while start + window <= x.len() {
        let (mut i_acc, mut q_acc) = (0.0f64, 0.0f64);
        for (t, &v) in x[start..start + window].iter().enumerate() {
            let ph = wc * (start + t) as f64;
            i_acc += v as f64 * ph.cos();
            q_acc -= v as f64 * ph.sin();
        }
        env.push(((i_acc * i_acc + q_acc * q_acc).sqrt() / window as f64) as f32);
        start += window;
    }
    let mean = env.iter().map(|&v| v as f64).sum::<f64>() / env.len() as f64;
    for v in env.iter_mut() {
        *v -= mean as f32;
    }
    (env, rate / window as f64)
}

/// Fixed hand-coded detector scores, one per tag, in `TAG_NAMES` order.
/// Each score rises with the energy of that tag's audio correlate.
pub fn detector_scores(samples: &[f32], rate: u32) -> [f64; 8] {
    let rate = rate as f64;
    let mut scores = [0.0f64; 8];
    for (b, &f) in TONE_FREQS.iter().enumerate() {
        scores[b] = goertzel_power(samples, rate, f);
    }
    let (env, env_rate) = am_envelope(samples, rate);
    for (a, &r) in AM_RATES.iter().enumerate() {
        scores[4 + a] = goertzel_power(&env, env_rate, r);
    }
    // Broadband noise shows up far above every deterministic component.
    scores[6] = (0..6)
        .map(|i| goertzel_power(samples, rate, 5400.0 + 100.0 * i as f64))
        .sum::<f64>();
    scores[7] = (1..=HARMONIC_PARTIALS)
        .map(|k| goertzel_power(samples, rate, HARMONIC_F0 * k as f64))
        .fold(f64::INFINITY, f64::min);
    scores
}
