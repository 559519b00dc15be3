//! Single-file binary index.
//!
//! Layout (little endian): magic `SMDTTMIX`, u32 version, f64 k1, f64 b,
//! u64 N, f64 avg_len; u64 term count, then per term `u32 id, u64 df, u64
//! byte length` followed by LEB128 `(global-id delta, tf)` postings; finally
//! the sentence store, N records of LEB128 `global id, |src|, src..., |tgt|,
//! tgt...`.

use std::io::{Read, Write};
use std::path::Path;

use super::{TmEntry, TmIndex};
use crate::error::{Result, SmdtError};
use crate::numerics::read_u32_le as read_u32;

const MAGIC: &[u8; 8] = b"SMDTTMIX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    let mut shift = 0;
    loop {
        let byte = *bytes
            .get(*pos)
            .ok_or_else(|| SmdtError::Format("truncated varint".into()))?;
        *pos += 1;
        if shift >= 64 {
            return Err(SmdtError::Format("varint overflow".into()));
        }
        v |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
        shift += 7;
    }
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl TmIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.k1.to_le_bytes());
        out.extend_from_slice(&self.b.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.avg_len.to_le_bytes());
        out.extend_from_slice(&(self.postings.len() as u64).to_le_bytes());
        for (&term, plist) in &self.postings {
            let mut body = Vec::new();
            let mut prev = 0usize;
            for p in plist {
                write_varint(&mut body, (p.global_id - prev) as u64);
                write_varint(&mut body, u64::from(p.tf));
                prev = p.global_id;
            }
            out.extend_from_slice(&term.to_le_bytes());
            out.extend_from_slice(&(plist.len() as u64).to_le_bytes());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        let mut store = Vec::new();
        for e in &self.entries {
            write_varint(&mut store, e.global_id as u64);
            for side in [&e.src, &e.tgt] {
                write_varint(&mut store, side.len() as u64);
                for &t in side.iter() {
                    write_varint(&mut store, u64::from(t));
                }
            }
        }
        out.extend_from_slice(&(store.len() as u64).to_le_bytes());
        out.extend_from_slice(&store);
        out
    }

    /// Parses an index file. The header is validated before anything else is
    /// read, so a version mismatch never yields a partial index.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| SmdtError::Format("index file too short".into()))?;
        if &magic != MAGIC {
            return Err(SmdtError::Format("not an index file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_FORMAT_VERSION {
            return Err(SmdtError::VersionMismatch {
                artifact: "index",
                expected: INDEX_FORMAT_VERSION,
                found: version,
            });
        }
        let k1 = read_f64(&mut r)?;
        let b = read_f64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let avg_len = read_f64(&mut r)?;

        let num_terms = read_u64(&mut r)? as usize;
        let mut postings = Vec::with_capacity(num_terms.min(1 << 20));
        for _ in 0..num_terms {
            let term = read_u32(&mut r)?;
            let df = read_u64(&mut r)? as usize;
            let len = read_u64(&mut r)? as usize;
            if r.len() < len {
                return Err(SmdtError::Format("truncated postings".into()));
            }
            let (body, rest) = r.split_at(len);
            r = rest;
            let mut pos = 0;
            let mut prev = 0usize;
            let mut plist = Vec::with_capacity(df.min(1 << 20));
            for _ in 0..df {
                prev += read_varint(body, &mut pos)? as usize;
                let tf = read_varint(body, &mut pos)? as u32;
                plist.push((prev, tf));
            }
            postings.push((term, plist));
        }

        let store_len = read_u64(&mut r)? as usize;
        if r.len() != store_len {
            return Err(SmdtError::Format("sentence store length mismatch".into()));
        }
        let mut pos = 0;
        let mut entries = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let global_id = read_varint(r, &mut pos)? as usize;
            let mut sides = [Vec::new(), Vec::new()];
            for side in &mut sides {
                let len = read_varint(r, &mut pos)? as usize;
                *side = (0..len)
                    .map(|_| read_varint(r, &mut pos).map(|t| t as u32))
                    .collect::<Result<_>>()?;
            }
            let [src, tgt] = sides;
            entries.push(TmEntry { global_id, src, tgt });
        }

        let index = TmIndex::from_entries(entries, k1, b)?;
        let consistent = index.avg_len.to_bits() == avg_len.to_bits()
            && index.postings.len() == postings.len()
            && postings.iter().all(|(term, plist)| {
                let ours = index.postings(*term);
                ours.len() == plist.len()
                    && ours.iter().zip(plist).all(|(a, &(g, tf))| a.global_id == g && a.tf == tf)
            });
        if !consistent {
            return Err(SmdtError::Format(
                "index postings disagree with the sentence store".into(),
            ));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TmIndex::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TmIndex {
        let entries = (0..20)
            .map(|i| TmEntry {
                global_id: i * 3 + 1,
                src: (0..(i % 5 + 1)).map(|j| (i * 7 + j * 300) as u32 % 50).collect(),
                tgt: vec![i as u32; i % 3 + 1],
            })
            .collect();
        TmIndex::from_entries(entries, 1.5, 0.6).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let idx = sample();
        let bytes = idx.to_bytes();
        let back = TmIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn other_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        match TmIndex::from_bytes(&bytes) {
            Err(SmdtError::VersionMismatch { found: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(TmIndex::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(TmIndex::from_bytes(b"garbage!").is_err());
    }
}
