//! Versioned binary model format, little-endian throughout:
//!
//! ```text
//! magic "SWTM" | u32 version | u32 len, config JSON | 3×f64 mean | 3×f64 std
//! u32 n_tensors | per tensor: u32 len, name | u32 ndim | ndim×u64 dims | f64 data
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::nn::Params;
use super::transformer::Model;
use super::PredictorConfig;
use crate::error::{Error, Result};
use crate::scene::{NormStats, N_FEATURES};

const MAGIC: &[u8; 4] = b"SWTM";
const VERSION: u32 = 1;

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.cfg)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    for v in model.norm.mean.iter().chain(&model.norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let cfg: PredictorConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::ModelFormat(format!("config: {e}")))?;
    let mut norm = NormStats::identity();
    for i in 0..N_FEATURES {
        norm.mean[i] = r.f64()?;
    }
    for i in 0..N_FEATURES {
        norm.std[i] = r.f64()?;
    }
    let n = r.u32()? as usize;
    let mut params = Params::default();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::ModelFormat("tensor name is not UTF-8".into()))?
            .to_string();
        if r.u32()? != 2 {
            return Err(Error::ModelFormat(format!("{name}: expected a 2-D tensor")));
        }
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::ModelFormat(e.to_string()))?;
        params.push(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat("trailing bytes".into()));
    }
    Model::with_params(cfg, norm, params)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = PredictorConfig { d_model: 8, ..Default::default() };
        let norm = NormStats { mean: [1.0, 2.0, 3.0], std: [4.0, 5.0, 6.0] };
        let model = Model::new(cfg, norm).unwrap();
        let bytes = encode_model(&model).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.norm, model.norm);

        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::ModelFormat(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::ModelFormat(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_model(&extra), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let model = Model::new(PredictorConfig { d_model: 4, ..Default::default() }, NormStats::identity()).unwrap();
        save_model(&model, &path).unwrap();
        assert_eq!(load_model(&path).unwrap().params, model.params);
    }
}
