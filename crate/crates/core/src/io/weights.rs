//! Weight file layout, all integers little-endian:
//!
//! ```text
//! magic "DFPNWGT\0" | version u32 | count u32
//! count × { name_len u32 | name (UTF-8) | ndim u32 | dims u32… | data f32… }
//! crc32 u32 over every preceding byte
//! ```

use std::collections::HashSet;
use std::path::Path;

use super::{read_bytes, write_file};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 8] = b"DFPNWGT\0";
pub const WEIGHT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 4;

pub fn encode_weights(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * store.num_elements() + 64 * store.len());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name().len() as u32).to_le_bytes());
        out.extend_from_slice(p.name().as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::WeightFormat(format!("record runs past the end at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weight file into named tensors, in file order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < HEADER + 4 {
        return Err(Error::WeightFormat(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..8] != WEIGHT_MAGIC {
        return Err(Error::WeightFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != WEIGHT_VERSION {
        return Err(Error::WeightVersion { found: version, expected: WEIGHT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::WeightFormat("parameter name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::WeightFormat(format!("parameter {name} appears twice")));
        }
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::WeightFormat(format!("parameter {name} has {ndim} dimensions")));
        }
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let nbytes = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::WeightFormat(format!("parameter {name} is too large")))?;
        let data = r.take(nbytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::WeightFormat(format!("parameter {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::WeightFormat(format!("{} trailing bytes after the last parameter", body.len() - r.pos)));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `bytes`. The file must name
/// exactly the parameters of the store, with matching shapes.
pub fn load_weights_into(store: &mut ParamStore<f32>, bytes: &[u8]) -> Result<()> {
    let params = decode_weights(bytes)?;
    let unknown: Vec<String> = params.iter().filter(|(n, _)| store.id(n).is_none()).map(|(n, _)| n.clone()).collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownParams(unknown));
    }
    let present: HashSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    let missing: Vec<String> =
        store.iter().map(|(_, p)| p.name()).filter(|n| !present.contains(n)).map(str::to_string).collect();
    if !missing.is_empty() {
        return Err(Error::MissingParams(missing));
    }
    for (name, t) in params {
        let id = store.id(&name).expect("checked above");
        store.set_value(id, t)?;
    }
    Ok(())
}

pub fn save_weights(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    write_file(path, encode_weights(store))
}

pub fn load_weights(store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
    load_weights_into(store, &read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2)).unwrap();
        s.add("a.bias", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
        s
    }

    fn reload(bytes: &[u8]) -> Result<ParamStore<f32>> {
        let mut s = store();
        for id in s.ids().collect::<Vec<_>>() {
            s.value_mut(id).data_mut().fill(9.0);
        }
        load_weights_into(&mut s, bytes)?;
        Ok(s)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = encode_weights(&store());
        let back = reload(&bytes).unwrap();
        for ((_, a), (_, b)) in store().iter().zip(back.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.value()), bits(b.value()));
        }
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = encode_weights(&store());
        assert!(matches!(reload(&bytes[..bytes.len() - 5]), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_and_checksum_errors_are_distinct() {
        let mut bytes = encode_weights(&store());
        bytes[8] = 7;
        assert!(matches!(reload(&bytes), Err(Error::WeightVersion { found: 7, expected: 1 })));
        let mut bytes = encode_weights(&store());
        bytes[20] ^= 1;
        assert!(matches!(reload(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn unknown_name_is_listed() {
        let mut s = store();
        s.add("stray.param", Tensor::zeros(&[1])).unwrap();
        let err = reload(&encode_weights(&s)).unwrap_err();
        assert!(matches!(&err, Error::UnknownParams(n) if n == &["stray.param".to_string()]));
        assert!(err.to_string().contains("stray.param"));
    }

    #[test]
    fn missing_name_is_listed() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros(&[2, 3])).unwrap();
        let err = reload(&encode_weights(&s)).unwrap_err();
        assert!(matches!(&err, Error::MissingParams(n) if n == &["a.bias".to_string()]));
    }
}
