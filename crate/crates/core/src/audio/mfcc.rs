//! MFCCs with first and second temporal derivatives.
//!
//! Cepstra are the orthonormal DCT-II of each log-mel frame, truncated to
//! `n_mfcc` coefficients. Derivatives use a centered 9-point regression
//! (taps -4..4, denominator 60) with edge frames replicated. The stack is
//! `3 * n_mfcc` bands: cepstra, then deltas, then delta-deltas.

use super::mel::melspectrogram_log;
use super::{AudioClip, AudioError, FeatureKind, FeatureMatrix, FrontendConfig};

/// Orthonormal DCT-II of `input`, keeping the first `n_out` coefficients.
/// Direct O(n^2) evaluation; frame lengths here are two-digit numbers.
pub(crate) fn dct2_ortho(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len();
    let mut out = vec![0.0f64; n_out];
    let norm0 = (1.0 / n as f64).sqrt();
    let norm = (2.0 / n as f64).sqrt();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (b, &x) in input.iter().enumerate() {
            acc += x * (std::f64::consts::PI * k as f64 * (2 * b + 1) as f64 / (2 * n) as f64).cos();
        }
        *o = acc * if k == 0 { norm0 } else { norm };
    }
    out
}

/// 9-point regression delta along time for one band, edges replicated.
pub(crate) fn delta_row(row: &[f64]) -> Vec<f64> {
    const HALF: isize = 4;
    const DENOM: f64 = 60.0; // 2 * (1^2 + 2^2 + 3^2 + 4^2)
    let t_max = row.len() as isize - 1;
    let clamped = |t: isize| row[t.clamp(0, t_max) as usize];
    (0..row.len() as isize)
        .map(|t| {
            let mut acc = 0.0;
            for tau in 1..=HALF {
                acc += tau as f64 * (clamped(t + tau) - clamped(t - tau));
            }
            acc / DENOM
        })
        .collect()
}

/// `3 * n_mfcc x n_frames` stack of cepstra and their derivatives
/// (90 x 1366 at defaults).
pub fn mfcc_stack(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix, AudioError> {
    let mel = melspectrogram_log(clip, cfg)?;
    let (n_mels, frames, n_mfcc) = (cfg.n_mels, cfg.n_frames, cfg.n_mfcc);
    let bands = 3 * n_mfcc;
    let mut data = vec![0.0f32; bands * frames];

    // Cepstra, written band-major as they come out frame by frame.
    let mut frame_buf = vec![0.0f64; n_mels];
    for t in 0..frames {
        for (b, v) in frame_buf.iter_mut().enumerate() {
            *v = mel.at(b, t) as f64;
        }
        for (k, &c) in dct2_ortho(&frame_buf, n_mfcc).iter().enumerate() {
            data[k * frames + t] = c as f32;
        }
    }

    // Deltas of the cepstra, then deltas of the deltas.
    let mut row = vec![0.0f64; frames];
    for k in 0..n_mfcc {
        for t in 0..frames {
            row[t] = data[k * frames + t] as f64;
        }
        let d1 = delta_row(&row);
        for (t, &v) in d1.iter().enumerate() {
            data[(n_mfcc + k) * frames + t] = v as f32;
        }
        let d2 = delta_row(&d1);
        for (t, &v) in d2.iter().enumerate() {
            data[(2 * n_mfcc + k) * frames + t] = v as f32;
        }
    }

    Ok(FeatureMatrix {
        kind: FeatureKind::MfccStack,
        band_count: bands,
        frame_count: frames,
        config_hash: cfg.hash(),
        data,
    })
}
