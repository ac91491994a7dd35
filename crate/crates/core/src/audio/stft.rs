//! Short-time Fourier transform with a periodic Hann window.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, AudioError, FeatureKind, FeatureMatrix, FrontendConfig, LOG_EPS};

fn check_preconditions(clip: &AudioClip, cfg: &FrontendConfig) -> Result<(), AudioError> {
    cfg.validate()?;
    if clip.sample_rate != cfg.target_rate {
        return Err(AudioError::RateMismatch { expected: cfg.target_rate, got: clip.sample_rate });
    }
    if clip.samples.len() != cfg.expected_samples() {
        return Err(AudioError::LengthMismatch {
            expected: cfg.expected_samples(),
            got: clip.samples.len(),
        });
    }
    Ok(())
}

/// Magnitude spectra, frame-major: `mags[frame * n_bins + bin]`.
/// Frame t covers samples [t*hop, t*hop + n_fft), zero-padded past the end
/// of the clip, windowed with a periodic Hann window.
pub(crate) fn stft_magnitudes(
    clip: &AudioClip,
    cfg: &FrontendConfig,
) -> Result<Vec<f64>, AudioError> {
    check_preconditions(clip, cfg)?;
    let n_fft = cfg.n_fft;
    let n_bins = cfg.n_bins();
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mags = vec![0.0f64; cfg.n_frames * n_bins];
    for t in 0..cfg.n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = clip.samples.get(start + i).copied().unwrap_or(0.0) as f64;
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            mags[t * n_bins + k] = buf[k].norm();
        }
    }
    Ok(mags)
}

/// Log-magnitude spectrogram: `(n_fft/2 + 1) x n_frames` entries of
/// `ln(|X| + LOG_EPS)`. The clip must match the config's rate and length.
pub fn stft_log(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix, AudioError> {
    let mags = stft_magnitudes(clip, cfg)?;
    let n_bins = cfg.n_bins();
    let mut data = vec![0.0f32; n_bins * cfg.n_frames];
    for t in 0..cfg.n_frames {
        for k in 0..n_bins {
            data[k * cfg.n_frames + t] = (mags[t * n_bins + k] + LOG_EPS).ln() as f32;
        }
    }
    Ok(FeatureMatrix {
        kind: FeatureKind::LogStft,
        band_count: n_bins,
        frame_count: cfg.n_frames,
        config_hash: cfg.hash(),
        data,
    })
}
