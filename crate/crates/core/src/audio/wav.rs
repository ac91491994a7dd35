//! Minimal RIFF/WAVE reader and writer. Reads PCM 16-bit and IEEE float
//! 32-bit, mono or stereo (stereo is averaged down to mono); writes mono
//! PCM 16-bit, which is all the synthetic corpus needs.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use super::AudioClip;

#[derive(Debug)]
pub enum WavError {
    Io(io::Error),
    /// Missing RIFF/WAVE signature or a truncated chunk.
    Malformed(String),
    /// A format this reader does not handle (compressed audio, odd bit depths).
    Unsupported(String),
}

impl fmt::Display for WavError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WavError::Io(e) => write!(f, "wav i/o error: {e}"),
            WavError::Malformed(msg) => write!(f, "malformed wav: {msg}"),
            WavError::Unsupported(msg) => write!(f, "unsupported wav: {msg}"),
        }
    }
}

impl std::error::Error for WavError {}

impl From<io::Error> for WavError {
    fn from(e: io::Error) -> Self {
        WavError::Io(e)
    }
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Reads a WAV file into a mono clip. Stereo channels are averaged.
pub fn read_wav(path: &Path) -> Result<AudioClip, WavError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::Malformed("missing RIFF/WAVE header".to_string()));
    }

    let mut fmt_chunk: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(WavError::Malformed(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::Malformed("fmt chunk too short".to_string()));
                }
                let body = &bytes[body_start..body_end];
                fmt_chunk = Some((le_u16(body), le_u16(&body[2..]), le_u32(&body[4..]), le_u16(&body[14..])));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt_chunk.ok_or_else(|| WavError::Malformed("no fmt chunk".to_string()))?;
    let data = data.ok_or_else(|| WavError::Malformed("no data chunk".to_string()))?;
    if channels == 0 || channels > 2 {
        return Err(WavError::Unsupported(format!("{channels} channels")));
    }
    let ch = channels as usize;

    let interleaved: Vec<f32> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32_768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => {
            return Err(WavError::Unsupported(format!(
                "format tag {format} with {bits}-bit samples"
            )))
        }
    };

    let samples: Vec<f32> = if ch == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|p| (p[0] + p[1]) * 0.5).collect()
    };
    if samples.is_empty() {
        return Err(WavError::Malformed("empty data chunk".to_string()));
    }
    Ok(AudioClip { samples, sample_rate: rate })
}

/// Writes a mono clip as 16-bit PCM. Samples are clamped to [-1, 1].
pub fn write_wav_pcm16(path: &Path, clip: &AudioClip) -> Result<(), WavError> {
    let n = clip.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &clip.samples {
        let q = (s as f64 * 32_768.0).round().clamp(-32_768.0, 32_767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
