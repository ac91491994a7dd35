//! Binary feature file format.
//!
//! Layout (little-endian): magic "FCNF", version u16 = 1, kind u8
//! (0 mel / 1 stft / 2 mfcc), band_count u32, frame_count u32, config hash
//! u64, then band_count * frame_count f32 values in band-major order.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use super::{FeatureKind, FeatureMatrix};

const MAGIC: &[u8; 4] = b"FCNF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 8;

#[derive(Debug)]
pub enum FeatureFileError {
    Io(io::Error),
    BadMagic([u8; 4]),
    BadVersion(u16),
    BadKind(u8),
    /// Header/payload disagreement (truncated file, absurd dimensions).
    Corrupt(String),
}

impl fmt::Display for FeatureFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureFileError::Io(e) => write!(f, "feature file i/o error: {e}"),
            FeatureFileError::BadMagic(m) => {
                write!(f, "not a feature file (magic {:02x?})", m)
            }
            FeatureFileError::BadVersion(v) => write!(f, "unsupported feature file version {v}"),
            FeatureFileError::BadKind(k) => write!(f, "unknown feature kind code {k}"),
            FeatureFileError::Corrupt(msg) => write!(f, "corrupt feature file: {msg}"),
        }
    }
}

impl std::error::Error for FeatureFileError {}

impl From<io::Error> for FeatureFileError {
    fn from(e: io::Error) -> Self {
        FeatureFileError::Io(e)
    }
}

pub fn write_feature(path: &Path, m: &FeatureMatrix) -> Result<(), FeatureFileError> {
    debug_assert_eq!(m.data.len(), m.band_count * m.frame_count);
    let mut out = Vec::with_capacity(HEADER_LEN + m.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(m.kind.code());
    out.extend_from_slice(&(m.band_count as u32).to_le_bytes());
    out.extend_from_slice(&(m.frame_count as u32).to_le_bytes());
    out.extend_from_slice(&m.config_hash.to_le_bytes());
    for &v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Header alone: (kind, band_count, frame_count, config_hash). Reads 23
/// bytes, so staleness checks over many files stay cheap.
pub fn read_feature_header(
    path: &Path,
) -> Result<(FeatureKind, usize, usize, u64), FeatureFileError> {
    use std::io::Read;
    let mut header = [0u8; HEADER_LEN];
    let mut file = fs::File::open(path)?;
    file.read_exact(&mut header)
        .map_err(|_| FeatureFileError::Corrupt("shorter than header".to_string()))?;
    if &header[0..4] != MAGIC {
        return Err(FeatureFileError::BadMagic([header[0], header[1], header[2], header[3]]));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(FeatureFileError::BadVersion(version));
    }
    let kind = FeatureKind::from_code(header[6]).ok_or(FeatureFileError::BadKind(header[6]))?;
    let band_count = u32::from_le_bytes([header[7], header[8], header[9], header[10]]) as usize;
    let frame_count = u32::from_le_bytes([header[11], header[12], header[13], header[14]]) as usize;
    let config_hash = u64::from_le_bytes([
        header[15], header[16], header[17], header[18], header[19], header[20], header[21],
        header[22],
    ]);
    Ok((kind, band_count, frame_count, config_hash))
}

pub fn read_feature(path: &Path) -> Result<FeatureMatrix, FeatureFileError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(FeatureFileError::Corrupt("shorter than header".to_string()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(FeatureFileError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FeatureFileError::BadVersion(version));
    }
    let kind =
        FeatureKind::from_code(bytes[6]).ok_or(FeatureFileError::BadKind(bytes[6]))?;
    let band_count = u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]) as usize;
    let frame_count = u32::from_le_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]) as usize;
    let config_hash = u64::from_le_bytes([
        bytes[15], bytes[16], bytes[17], bytes[18], bytes[19], bytes[20], bytes[21], bytes[22],
    ]);
    let expected = HEADER_LEN + band_count * frame_count * 4;
    if bytes.len() != expected {
        return Err(FeatureFileError::Corrupt(format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - HEADER_LEN,
            expected - HEADER_LEN
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FeatureMatrix { kind, band_count, frame_count, config_hash, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FrontendConfig;

    fn sample_matrix() -> FeatureMatrix {
        FeatureMatrix {
            kind: FeatureKind::LogMel,
            band_count: 4,
            frame_count: 3,
            config_hash: FrontendConfig::default().hash(),
            data: (0..12).map(|i| i as f32 * 0.5 - 2.0).collect(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcnf");
        let m = sample_matrix();
        write_feature(&path, &m).unwrap();
        let back = read_feature(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_fields_live_at_documented_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcnf");
        let m = sample_matrix();
        write_feature(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FCNF");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 0);
        assert_eq!(u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]), 4);
        assert_eq!(u32::from_le_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]), 3);
        assert_eq!(bytes.len(), 23 + 12 * 4);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcnf");
        let m = sample_matrix();
        write_feature(&path, &m).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature(&path), Err(FeatureFileError::BadMagic(_))));

        write_feature(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature(&path), Err(FeatureFileError::BadVersion(9))));

        write_feature(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature(&path), Err(FeatureFileError::BadKind(7))));

        write_feature(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature(&path), Err(FeatureFileError::Corrupt(_))));
    }
}
