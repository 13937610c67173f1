//! Named-parameter container with a text header.
//!
//! Layout: UTF-8 header lines `key=value` opened by [`MAGIC`] and closed by
//! `end`, followed by one binary record per parameter:
//! `u32 name_len | name | u32 ndim | u64 dims.. | u8 trainable | u8 dtype | values (LE)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &str = "dgunfold-checkpoint v1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub entries: Vec<(String, String)>,
}

impl CheckpointHeader {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn encode<T: Scalar>(header: &CheckpointHeader, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (k, v) in &header.entries {
        if k.contains(['=', '\n']) || v.contains('\n') || k == "end" {
            return Err(Error::Checkpoint(format!("header entry {k:?} cannot be encoded")));
        }
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out.extend_from_slice(format!("params={}\nend\n", params.len()).as_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for d in p.tensor.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.push(p.trainable as u8);
        out.push(T::DTYPE_TAG);
        for v in p.tensor.data() {
            v.write_le(&mut out);
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
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest.iter().position(|b| *b == b'\n').ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }
}

/// Decodes a checkpoint. Values stored at another precision are converted.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.line()? != MAGIC {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let mut header = CheckpointHeader::default();
    let mut count = None;
    loop {
        let line = r.line()?;
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        if k == "params" {
            count = Some(v.parse::<usize>().map_err(|_| Error::Checkpoint("bad parameter count".into()))?);
        } else {
            header.entries.push((k.to_string(), v.to_string()));
        }
    }
    let count = count.ok_or_else(|| Error::Checkpoint("missing parameter count".into()))?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let trainable = r.take(1)?[0] != 0;
        let tag = r.take(1)?[0];
        let n: usize = shape.iter().product();
        let data: Vec<T> = match tag {
            4 => r.take(4 * n)?.chunks(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            8 => r.take(8 * n)?.chunks(8).map(|c| T::of(f64::read_le(c))).collect(),
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        };
        let id = params.add(name, Tensor::new(shape, data)?)?;
        if !trainable {
            let name = params.get(id).name.clone();
            params.set_trainable(&name, false);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok((header, params))
}

/// Writes via a temporary file and rename.
pub fn save<T: Scalar>(path: &Path, header: &CheckpointHeader, params: &ParamSet<T>) -> Result<()> {
    let bytes = encode(header, params)?;
    atomic_write(path, &bytes)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamSet<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_params(vals: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("a.w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()).unwrap();
        p.add("b", Tensor::full(&[2, 3], -0.0)).unwrap();
        p.set_trainable("b", false);
        p
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let p = sample_params(&vals);
            let mut h = CheckpointHeader::default();
            h.set("config_hash", "abc123");
            h.set("seed.model", 7);
            let bytes = encode(&h, &p).unwrap();
            let (h2, p2) = decode::<f64>(&bytes).unwrap();
            prop_assert_eq!(h2, h);
            for ((_, a), (_, b)) in p.iter().zip(p2.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.trainable, b.trainable);
                let abits: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = encode(&CheckpointHeader::default(), &sample_params(&[1.0, 2.0])).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<f64>(b"not a checkpoint\n").is_err());
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let mut p = ParamSet::<f32>::new();
        p.add("x", Tensor::new(vec![2], vec![0.1f32, 2.5]).unwrap()).unwrap();
        let bytes = encode(&CheckpointHeader::default(), &p).unwrap();
        let (_, q) = decode::<f64>(&bytes).unwrap();
        assert_eq!(q.tensor(q.id("x").unwrap()).data(), &[0.1f32 as f64, 2.5]);
    }
}
