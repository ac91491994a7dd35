//! Mel filterbank and log mel-spectrogram.
//!
//! Filter centers are uniformly spaced on the HTK mel scale
//! `m(f) = 2595 * log10(1 + f/700)`; each triangular filter spans its two
//! neighbours' centers. Weights are the average of the triangle over each
//! FFT bin's frequency interval (not a point sample at the bin center), so
//! even the narrowest low-frequency filters keep strictly positive support.
//! Rows are then normalized to sum to 1.

use super::stft::stft_magnitudes;
use super::{AudioClip, AudioError, FeatureKind, FeatureMatrix, FrontendConfig, LOG_EPS};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels x (n_fft/2 + 1)`, row-major, rows sum to 1.
    pub weights: Vec<f64>,
    pub center_freqs: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
}

impl MelFilterbank {
    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_bins + bin]
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }
}

/// Integral of the unit triangle (feet at `f_l`/`f_r`, apex 1 at `f_c`)
/// over the interval `[a, b]`.
fn triangle_integral(f_l: f64, f_c: f64, f_r: f64, a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    // Rising and falling edges as line segments alpha + beta * f.
    let segments = [
        (f_l, f_c, -f_l / (f_c - f_l), 1.0 / (f_c - f_l)),
        (f_c, f_r, f_r / (f_r - f_c), -1.0 / (f_r - f_c)),
    ];
    for (s0, s1, alpha, beta) in segments {
        if s1 <= s0 {
            continue;
        }
        let lo = a.max(s0);
        let hi = b.min(s1);
        if hi > lo {
            total += alpha * (hi - lo) + beta * (hi * hi - lo * lo) / 2.0;
        }
    }
    total
}

/// Builds the triangular mel filterbank for `cfg`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<MelFilterbank, AudioError> {
    cfg.validate()?;
    let n_mels = cfg.n_mels;
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    // n_mels filters need n_mels + 2 grid points; point i+1 is filter i's apex.
    let grid: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let center_freqs: Vec<f64> = grid[1..=n_mels].to_vec();

    let bin_width = cfg.target_rate as f64 / cfg.n_fft as f64;
    let mut weights = vec![0.0f64; n_mels * n_bins];
    for m in 0..n_mels {
        let (f_l, f_c, f_r) = (grid[m], grid[m + 1], grid[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let center = k as f64 * bin_width;
            *w = triangle_integral(f_l, f_c, f_r, center - bin_width / 2.0, center + bin_width / 2.0)
                / bin_width;
        }
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(AudioError::InvalidConfig(format!(
                "mel filter {m} has no spectral support; too many bands for this fft size"
            )));
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    Ok(MelFilterbank { weights, center_freqs, n_mels, n_bins })
}

/// Log mel-spectrogram: `ln(filterbank . power_spectrum + LOG_EPS)`,
/// shaped `n_mels x n_frames` (96 x 1366 at defaults).
pub fn melspectrogram_log(
    clip: &AudioClip,
    cfg: &FrontendConfig,
) -> Result<FeatureMatrix, AudioError> {
    let fb = mel_filterbank(cfg)?;
    let mags = stft_magnitudes(clip, cfg)?;
    let n_bins = cfg.n_bins();
    let mut data = vec![0.0f32; cfg.n_mels * cfg.n_frames];
    let mut power = vec![0.0f64; n_bins];
    for t in 0..cfg.n_frames {
        let frame = &mags[t * n_bins..(t + 1) * n_bins];
        for (p, &m) in power.iter_mut().zip(frame) {
            *p = m * m;
        }
        for b in 0..cfg.n_mels {
            let row = fb.row(b);
            let mut acc = 0.0f64;
            for (w, p) in row.iter().zip(&power) {
                acc += w * p;
            }
            data[b * cfg.n_frames + t] = (acc + LOG_EPS).ln() as f32;
        }
    }
    Ok(FeatureMatrix {
        kind: FeatureKind::LogMel,
        band_count: cfg.n_mels,
        frame_count: cfg.n_frames,
        config_hash: cfg.hash(),
        data,
    })
}

/// How many filter centers land in each 1 kHz band of `[0, fmax)`.
/// The mel scale concentrates filters at low frequencies, so the counts
/// decrease with frequency.
pub fn mel_bins_per_khz(fb: &MelFilterbank, fmax: f64) -> Vec<usize> {
    let bands = (fmax / 1000.0).ceil() as usize;
    let mut counts = vec![0usize; bands];
    for &c in &fb.center_freqs {
        let band = ((c / 1000.0).floor() as usize).min(bands - 1);
        counts[band] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_fixpoints() {
        assert!(hz_to_mel(0.0).abs() < 1e-12);
        // The HTK mel scale is close to the identity at 1 kHz.
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
        let f = 3456.7;
        assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
    }

    #[test]
    fn default_filterbank_dimensions_and_support() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.n_mels, 96);
        assert_eq!(fb.n_bins, 129);
        assert_eq!(fb.weights.len(), 96 * 129);
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().any(|&w| w > 0.0), "filter {m} has no support");
            assert!(row.iter().all(|&w| w >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "filter {m} sums to {s}");
        }
    }

    #[test]
    fn centers_increase_within_range() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        for pair in fb.center_freqs.windows(2) {
            assert!(pair[0] < pair[1]);
        }
        assert!(fb.center_freqs[0] > 0.0);
        assert!(*fb.center_freqs.last().unwrap() < 6000.0);
    }

    #[test]
    fn low_frequencies_get_most_filters() {
        // Uniform mel spacing puts 38 of 96 centers below 1 kHz, far more
        // than the 16 a uniform-in-Hz allocation would give.
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let below_1k = fb.center_freqs.iter().filter(|&&c| c < 1000.0).count();
        assert_eq!(below_1k, 38);
        assert!(below_1k > 96 / 6);

        let per_khz = mel_bins_per_khz(&fb, cfg.fmax);
        assert_eq!(per_khz.iter().sum::<usize>(), 96);
        assert_eq!(per_khz.len(), 6);
        for pair in per_khz.windows(2) {
            assert!(pair[0] >= pair[1], "counts must not increase: {per_khz:?}");
        }
        assert_eq!(per_khz[0], 38);
    }

    #[test]
    fn filterbank_covers_interior_bins() {
        let cfg = FrontendConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let bin_width = cfg.target_rate as f64 / cfg.n_fft as f64;
        let first = fb.center_freqs[0];
        let last = *fb.center_freqs.last().unwrap();
        for k in 0..fb.n_bins {
            let f = k as f64 * bin_width;
            if f > first && f < last {
                let col: f64 = (0..fb.n_mels).map(|m| fb.weight(m, k)).sum();
                assert!(col > 0.0, "bin {k} at {f} Hz is uncovered");
            }
        }
    }

    #[test]
    fn default_melspectrogram_shape() {
        let cfg = FrontendConfig::default();
        let n = cfg.expected_samples();
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 12_000.0).sin() as f32)
            .collect();
        let clip = AudioClip { samples, sample_rate: 12_000 };
        let m = melspectrogram_log(&clip, &cfg).unwrap();
        assert_eq!(m.band_count, 96);
        assert_eq!(m.frame_count, 1366);
        assert!(m.data.iter().all(|v| v.is_finite()));
        assert_eq!(m.kind, FeatureKind::LogMel);
    }

    #[test]
    fn silence_is_constant_log_floor() {
        let cfg = FrontendConfig::default();
        let clip = AudioClip { samples: vec![0.0; cfg.expected_samples()], sample_rate: 12_000 };
        let m = melspectrogram_log(&clip, &cfg).unwrap();
        let floor = (LOG_EPS).ln() as f32;
        assert!(m.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn scaling_shifts_log_power_by_log_c_squared() {
        let cfg = FrontendConfig::default();
        let n = cfg.expected_samples();
        let samples: Vec<f32> = (0..n)
            .map(|i| 0.05 * (2.0 * std::f64::consts::PI * 800.0 * i as f64 / 12_000.0).sin() as f32)
            .collect();
        let quiet = AudioClip { samples: samples.clone(), sample_rate: 12_000 };
        let loud = AudioClip {
            samples: samples.iter().map(|&s| s * 10.0).collect(),
            sample_rate: 12_000,
        };
        let mq = melspectrogram_log(&quiet, &cfg).unwrap();
        let ml = melspectrogram_log(&loud, &cfg).unwrap();
        let shift = (100.0f64).ln() as f32;
        let mut checked = 0;
        for (a, b) in mq.data.iter().zip(&ml.data) {
            // Ordering holds everywhere for c > 1.
            assert!(b >= a);
            // Where power dominates the log floor, the shift is exact.
            if *a > -12.0 {
                assert!((b - a - shift).abs() < 1e-3, "{a} -> {b}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }
}
