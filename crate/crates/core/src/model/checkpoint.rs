//! Checkpoint files: magic "FCNC", a format version, the model spec in its
//! canonical text form, the named parameter tensors, and the batch-norm
//! running statistics. Floats are stored as little-endian f32 bits, so a
//! save/load round trip is exact.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use super::{Model, ModelError, ModelSpec};

const MAGIC: &[u8; 4] = b"FCNC";
const VERSION: u16 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic,
    BadVersion(u16),
    Corrupt(String),
    Model(ModelError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::BadVersion(v) => {
                write!(f, "checkpoint version {v} unsupported (want {VERSION})")
            }
            CheckpointError::Corrupt(detail) => write!(f, "corrupt checkpoint: {detail}"),
            CheckpointError::Model(e) => write!(f, "checkpoint spec: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Model(e)
    }
}

fn put_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let spec_text = model.spec.to_text();
    buf.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(spec_text.as_bytes());

    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        put_name(&mut buf, name);
        let shape = p.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.to_vec() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let stats = model.bn_stats();
    buf.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    for (name, mean, var) in &stats {
        put_name(&mut buf, name);
        buf.extend_from_slice(&(mean.len() as u32).to_le_bytes());
        for v in mean.iter().chain(var) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "file ends at byte {} while reading {n} bytes at {}",
                self.buf.len(),
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("name is not utf-8".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let spec_len = r.u32()? as usize;
    let spec_text = String::from_utf8(r.take(spec_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("spec text is not utf-8".into()))?;
    let spec = ModelSpec::from_text(&spec_text)?;
    let mut model = Model::build(&spec, 0)?;

    let n_params = r.u32()? as usize;
    let expected = model.named_params();
    if n_params != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{n_params} parameters stored, spec wants {}",
            expected.len()
        )));
    }
    for (want_name, p) in &expected {
        let name = r.name()?;
        if name != *want_name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter '{name}' where '{want_name}' belongs"
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter '{name}' has shape {shape:?}, spec wants {:?}",
                p.shape()
            )));
        }
        let values = r.floats(p.len())?;
        p.set_values(&values);
    }

    let n_stats = r.u32()? as usize;
    if n_stats != model.bn_stats().len() {
        return Err(CheckpointError::Corrupt(format!(
            "{n_stats} stat blocks stored, spec wants {}",
            model.bn_stats().len()
        )));
    }
    for _ in 0..n_stats {
        let name = r.name()?;
        let channels = r.u32()? as usize;
        let mean = r.floats(channels)?;
        let var = r.floats(channels)?;
        if !model.set_bn_stats(&name, mean, var) {
            return Err(CheckpointError::Corrupt(format!("no batch-norm layer '{name}'")));
        }
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after the last stat block",
            buf.len() - r.pos
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{FeatureKind, FeatureMatrix};
    use crate::model::model_spec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_ish_model() -> Model {
        let spec = model_spec("fcn4s", 8).unwrap();
        let mut model = Model::build(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let names: Vec<String> = model.bn_stats().iter().map(|(n, _, _)| n.clone()).collect();
        for name in names {
            let c = model
                .bn_stats()
                .iter()
                .find(|(n, _, _)| *n == name)
                .map(|(_, m, _)| m.len())
                .unwrap();
            let mean = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let var = (0..c).map(|_| rng.gen_range(0.1..3.0)).collect();
            assert!(model.set_bn_stats(&name, mean, var));
        }
        model
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcnc");
        let mut model = trained_ish_model();
        save_checkpoint(&model, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.spec, model.spec);
        for ((na, pa), (nb, pb)) in model.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(*na, nb);
            let bits_a: Vec<u32> = pa.to_vec().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = pb.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na}");
        }
        assert_eq!(model.bn_stats(), loaded.bn_stats());

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let f = FeatureMatrix {
            kind: FeatureKind::LogMel,
            band_count: 96,
            frame_count: 256,
            config_hash: 0,
            data: (0..96 * 256).map(|_| rng.gen_range(-18.0f32..-2.0)).collect(),
        };
        let a = model.predict(&[&f]).unwrap();
        let b = loaded.predict(&[&f]).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcnc");
        save_checkpoint(&trained_ish_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"FCNC");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let spec_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[10..10 + spec_len]).unwrap();
        assert!(text.starts_with("name fcn4s\n"));
    }

    #[test]
    fn damage_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcnc");
        save_checkpoint(&trained_ish_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadVersion(9))));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&path, &extra).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));

        // Flip one character of the first parameter name.
        let spec_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let name_at = 10 + spec_len + 4 + 2;
        let mut renamed = bytes.clone();
        renamed[name_at] = b'x';
        std::fs::write(&path, &renamed).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }
}
