//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `ZSSL1\0`, version u16, tensor count u32,
//! then per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims
//! and f32 payload; a CRC32 of everything before it closes the file.

use std::path::Path;

use crate::dataset::write_file;
use crate::error::{Error, Result};
use crate::model::MultiTaskNet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"ZSSL1\0";
pub const VERSION: u16 = 1;

/// Tensors in file order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Store every parameter of `net` under `prefix`.
    pub fn push_net(&mut self, prefix: &str, net: &MultiTaskNet) {
        for (name, t) in net.params() {
            let mut t = t.clone();
            t.set_requires_grad(false);
            self.push(format!("{prefix}{name}"), t);
        }
    }

    /// Load every parameter of `net` from entries under `prefix`. A missing
    /// or misshapen entry is a structural error.
    pub fn load_net(&self, prefix: &str, net: &mut MultiTaskNet) -> Result<()> {
        let names: Vec<String> = net.names().to_vec();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Structural(format!("checkpoint lacks {key}")))?;
            net.load_param(&name, t)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Parameter("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Parameter(format!("tensor name of {} bytes", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.dims();
            let rank = u8::try_from(dims.len()).map_err(|_| Error::Parameter(format!("rank {}", dims.len())))?;
            out.push(rank);
            for &d in dims {
                let d = u32::try_from(d).map_err(|_| Error::Parameter(format!("dimension {d}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, msg: &str| Error::parse(path, offset, msg);
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(err(bytes.len(), "file too short"));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(err(body, "CRC mismatch"));
        }
        if &bytes[..6] != MAGIC {
            return Err(err(0, "bad magic"));
        }
        let mut r = Reader { bytes: &bytes[..body], pos: 6, path };
        let version = r.u16()?;
        if version != VERSION {
            return Err(err(6, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| err(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let at = r.pos;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| err(at, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| err(at, &e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body {
            return Err(err(r.pos, "trailing bytes before CRC"));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::parse(self.path, self.pos, format!("need {n} more bytes")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("a", Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap());
        c.push("scalar", Tensor::new(&[1], vec![0.1]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let d = Checkpoint::decode(Path::new("x"), &bytes).unwrap();
        assert_eq!(d.tensors.len(), 2);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&d.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bits_eq(t2));
        }
        assert_eq!(d.encode().unwrap(), bytes);
    }

    #[test]
    fn corrupted_crc_is_refused() {
        let mut bytes = sample().encode().unwrap();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::decode(Path::new("x"), &bytes), Err(Error::Parse { .. })));
        let n = bytes.len();
        assert!(Checkpoint::decode(Path::new("x"), &bytes[..n - 3]).is_err());
    }

    #[test]
    fn nets_round_trip() {
        let net = MultiTaskNet::new(NetConfig::default(), 5).unwrap();
        let mut c = Checkpoint::new();
        c.push_net("student/", &net);
        let d = Checkpoint::decode(Path::new("x"), &c.encode().unwrap()).unwrap();
        let mut other = MultiTaskNet::new(NetConfig::default(), 6).unwrap();
        d.load_net("student/", &mut other).unwrap();
        assert_eq!(other.checksum(&[]), net.checksum(&[]));
        assert!(d.load_net("teacher/", &mut other).is_err());
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phase1.ckpt");
        assert!(matches!(Checkpoint::read(&p), Err(Error::MissingArtifact(_))));
        sample().write(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap().tensors.len(), 2);
    }
}
