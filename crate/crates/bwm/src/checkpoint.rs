//! Checkpoint container shared by all modules.
//!
//! Binary layout: magic `BWM1`, u32 tensor count, then per tensor —
//! u16 name length, UTF-8 name, u8 ndim, u32 dims (little-endian),
//! f32 data (little-endian, row-major). Values are stored as f32 even
//! though computation runs in f64.
//!
//! Arbitrary UTF-8 payloads (e.g. the resolved run configuration) can be
//! embedded as byte tensors via [`string_tensor`]/[`tensor_string`].

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"BWM1";

/// An ordered name → tensor container.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Invalid(format!("tensor name too long: {name}")));
            }
            if t.rank() > u8::MAX as usize {
                return Err(Error::Invalid(format!("tensor rank too large: {name}")));
            }
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Invalid(format!(
                "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b);
        let mut out = Checkpoint::new();
        for _ in 0..count {
            let mut u16b = [0u8; 2];
            r.read_exact(&mut u16b)?;
            let name_len = u16::from_le_bytes(u16b) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Invalid("checkpoint tensor name is not UTF-8".into()))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                r.read_exact(&mut u32b)?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0u8; numel * 4];
            r.read_exact(&mut data)?;
            let values = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            out.insert(name, Tensor::from_vec(values, &shape));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Encode a UTF-8 string as a rank-1 tensor of byte values.
pub fn string_tensor(s: &str) -> Tensor {
    Tensor::from_vec(s.bytes().map(|b| b as f64).collect(), &[s.len()])
}

/// Decode a tensor produced by [`string_tensor`].
pub fn tensor_string(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = t.data().iter().map(|&x| x as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::Invalid("embedded string is not UTF-8".into()))
}
