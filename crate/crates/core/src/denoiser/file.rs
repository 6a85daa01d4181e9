//! Binary model files.
//!
//! ```text
//! "CINVMDL1"
//! u64 n_meta, n_meta x u64      architecture integers
//! u64 n_params, n_params x f64  parameters
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::denoiser::{ConvNet, ConvNetMeta};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"CINVMDL1";

pub fn encode_model(model: &ConvNet) -> Vec<u8> {
    let meta = model.meta().to_ints();
    let params = model.params();
    let mut out = Vec::with_capacity(8 + 16 + 8 * (meta.len() + params.len()));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    for m in &meta {
        out.extend_from_slice(&m.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Length prefix, sanity-checked against the remaining payload.
    pub(crate) fn len(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("length {n} exceeds remaining payload")));
        }
        Ok(n)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ConvNet> {
    let mut r = Reader::new(bytes);
    if r.bytes(8)? != MODEL_MAGIC {
        return Err(Error::Format("bad model magic".into()));
    }
    let n_meta = r.len(8)?;
    let meta: Vec<u64> = (0..n_meta).map(|_| r.u64()).collect::<Result<_>>()?;
    let meta = ConvNetMeta::from_ints(&meta)?;
    let n = r.len(8)?;
    let params = r.f64s(n)?;
    r.finish()?;
    ConvNet::from_parts(meta, params)
}

pub fn save_model(path: impl AsRef<Path>, model: &ConvNet) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ConvNet> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn model_bytes_round_trip_bit_exactly(seed in 0u64..500, w in 1usize..6) {
            let net = ConvNet::init(ConvNetMeta::new(3, 3, 4).with_widths([w, w + 1, 2]), seed).unwrap();
            let bytes = encode_model(&net);
            let back = decode_model(&bytes).unwrap();
            prop_assert_eq!(back.meta(), net.meta());
            prop_assert!(back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(encode_model(&back), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let net = ConvNet::init(ConvNetMeta::new(3, 0, 2).with_widths([2, 2, 2]), 1).unwrap();
        let bytes = encode_model(&net);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_model(&bad).is_err());
        assert!(decode_model(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_model(&long).is_err());
    }
}
