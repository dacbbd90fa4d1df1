//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!   magic "MHSA" | u16 version | u32 entry count
//!   per entry: u16 name length | UTF-8 name | u8 rank | u32 dims... | f64 payload...
//!   trailing u32 CRC32 (IEEE) of every preceding byte.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MHSA";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

impl Entry {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Entry { name: name.into(), tensor }
    }
}

fn crc32(bytes: &[u8]) -> u32 {
    // IEEE 802.3 polynomial, reflected, table-free bitwise form.
    let mut crc: u32 = 0xffff_ffff;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Malformed(format!("duplicate entry name '{}'", e.name)));
        }
        if e.name.len() > u16::MAX as usize {
            return Err(Error::Malformed(format!("entry name '{}...' too long", &e.name[..32])));
        }
        if e.tensor.rank() > u8::MAX as usize {
            return Err(Error::Malformed(format!("entry '{}' rank too large", e.name)));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
        return Err(Error::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(Error::CrcMismatch);
    }

    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Malformed(format!("duplicate entry name '{name}'")));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Malformed(format!("entry '{name}': {e}")))?;
        if !tensor.is_finite() {
            return Err(Error::Malformed(format!("entry '{name}' holds non-finite values")));
        }
        entries.push(Entry { name, tensor });
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last entry",
            body.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    fs::write(path, bytes)
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let bytes =
        fs::read(path).map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Lookup helper over loaded entries.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|e| e.name == name)
        .map(|e| &e.tensor)
        .ok_or_else(|| Error::Malformed(format!("missing entry '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_entries(seed: u64) -> Vec<Entry> {
        let mut rng = Rng::new(seed);
        vec![
            Entry::new("a/matrix", Tensor::randn(&[3, 4], 1.0, &mut rng)),
            Entry::new("b/vector", Tensor::randn(&[1, 7], 2.0, &mut rng)),
            Entry::new("c/scalar", Tensor::scalar(42.0)),
            Entry::new("d/cube", Tensor::randn(&[2, 3, 2], 0.5, &mut rng)),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = sample_entries(1);
        let bytes = encode(&entries).unwrap();
        let loaded = decode(&bytes).unwrap();
        assert_eq!(entries, loaded);
        // Byte-level determinism too.
        assert_eq!(bytes, encode(&loaded).unwrap());
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode(&[]).unwrap();
        let loaded = decode(&bytes).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let entries = sample_entries(2);
        let mut bytes = encode(&entries).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::CrcMismatch)));
    }

    #[test]
    fn bad_magic_is_distinct_error() {
        let mut bytes = encode(&sample_entries(3)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn truncation_is_distinct_error() {
        let bytes = encode(&sample_entries(4)).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(Error::Truncated | Error::CrcMismatch)));
        assert!(matches!(decode(&bytes[..6]), Err(Error::Truncated)));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut bytes = encode(&[]).unwrap();
        bytes[4] = 9; // version low byte
        let fixed_crc = {
            let body = &bytes[..bytes.len() - 4];
            super::crc32(body)
        };
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&fixed_crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::BadVersion(9))));
    }

    #[test]
    fn duplicate_names_rejected_on_encode() {
        let entries = vec![
            Entry::new("same", Tensor::scalar(1.0)),
            Entry::new("same", Tensor::scalar(2.0)),
        ];
        assert!(matches!(encode(&entries), Err(Error::Malformed(_))));
    }

    #[test]
    fn save_load_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("mhsa-container-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.bin");
        let entries = sample_entries(5);
        save(&path, &entries).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(entries, loaded);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn crc32_known_vector() {
        // CRC32("123456789") = 0xCBF43926 for the IEEE polynomial.
        assert_eq!(super::crc32(b"123456789"), 0xcbf4_3926);
    }
}
