//! Binary library format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "GRDL" | version u16 = 1 | dim u32 | item count u64
//! catalog: count u32, then per class { id u16, name len u16, UTF-8 name }
//! items:   item_id u64 | class_id i32 (-1 = unlabeled) | provenance u8
//!          | source_tag (len u16 + UTF-8) | dim x f32
//! ```
//!
//! The generation counter is not persisted; loaded snapshots start at 0.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::catalog::{ClassId, LabelCatalog};
use crate::embedding::{self, Embedding, UNIT_TOLERANCE};
use crate::error::{with_path, Error, Result};
use crate::library::{LibrarySnapshot, Provenance, ReferenceItem};

pub const MAGIC: &[u8; 4] = b"GRDL";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject vectors whose norm drifted from 1 instead of renormalizing them.
    pub strict: bool,
    /// Fail with `DimMismatch` unless the file has this dimension.
    pub expected_dim: Option<usize>,
}

pub fn load_library(path: impl AsRef<Path>) -> Result<LibrarySnapshot> {
    load_library_with(path, LoadOptions::default())
}

pub fn load_library_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<LibrarySnapshot> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(with_path(path))?;
    decode(&bytes, opts)
}

pub fn save_library(snapshot: &LibrarySnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(with_path(path))?;
    let mut w = BufWriter::new(file);
    write_to(snapshot, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn encode(snapshot: &LibrarySnapshot) -> Vec<u8> {
    let dim = snapshot.dim();
    let mut out = Vec::with_capacity(32 + snapshot.len() * (24 + 4 * dim));
    write_to(snapshot, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn write_to<W: Write>(snapshot: &LibrarySnapshot, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(snapshot.dim() as u32).to_le_bytes())?;
    w.write_all(&(snapshot.len() as u64).to_le_bytes())?;

    let catalog = snapshot.catalog();
    w.write_all(&(catalog.len() as u32).to_le_bytes())?;
    for (id, name) in catalog.iter() {
        w.write_all(&id.to_le_bytes())?;
        write_str(w, name)?;
    }

    let mut payload = Vec::with_capacity(snapshot.dim() * 4);
    for item in snapshot.items() {
        w.write_all(&item.item_id.to_le_bytes())?;
        let class = item.class_id.map_or(-1i32, i32::from);
        w.write_all(&class.to_le_bytes())?;
        w.write_all(&[item.provenance.to_byte()])?;
        write_str(w, &item.source_tag)?;
        payload.clear();
        for x in item.embedding.values() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::CorruptRecord(format!("string of {} bytes exceeds u16 length", s.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptRecord(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::CorruptRecord(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode(bytes: &[u8], opts: LoadOptions) -> Result<LibrarySnapshot> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let dim = r.u32("dim")? as usize;
    if let Some(expected) = opts.expected_dim {
        if expected != dim {
            return Err(Error::DimMismatch { expected, found: dim });
        }
    }
    if dim < 2 {
        return Err(Error::DimTooSmall(dim));
    }
    let count = r.u64("item count")?;

    let n_classes = r.u32("catalog size")? as usize;
    let mut names = Vec::with_capacity(n_classes.min(1 << 16));
    for expected_id in 0..n_classes {
        let id = r.u16("class id")?;
        if id as usize != expected_id {
            return Err(Error::CorruptRecord(format!(
                "catalog ids must be contiguous: expected {expected_id}, found {id}"
            )));
        }
        names.push(r.string("class name")?);
    }
    let catalog = LabelCatalog::new(names)?;

    // each item needs at least this many bytes; guards absurd counts
    let min_item = 8 + 4 + 1 + 2 + 4 * dim;
    let remaining = (bytes.len() - r.pos) as u64;
    if count > remaining / min_item as u64 {
        return Err(Error::CorruptRecord(format!(
            "header claims {count} items but only {remaining} payload bytes remain"
        )));
    }

    let mut items = Vec::with_capacity(count as usize);
    let mut values = Vec::with_capacity(dim);
    for _ in 0..count {
        let item_id = r.u64("item id")?;
        let class = r.i32("class id")?;
        let class_id = match class {
            -1 => None,
            c if c >= 0 && (c as usize) < catalog.len() => Some(c as ClassId),
            c => return Err(Error::UnknownClassId(c as i64)),
        };
        let prov = r.u8("provenance")?;
        let provenance = Provenance::from_byte(prov)
            .ok_or_else(|| Error::CorruptRecord(format!("unknown provenance byte {prov}")))?;
        let source_tag = r.string("source tag")?;
        let raw = r.take(4 * dim, "vector payload")?;
        values.clear();
        values.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        let embedding = read_embedding(&values, opts.strict, item_id)?;
        items.push(ReferenceItem { item_id, embedding, class_id, provenance, source_tag });
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptRecord(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    LibrarySnapshot::new(0, dim, catalog, items)
}

fn read_embedding(values: &[f32], strict: bool, item_id: u64) -> Result<Embedding> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::CorruptRecord(format!("item {item_id} has non-finite values")));
    }
    let norm = embedding::l2_norm(values);
    if (norm - 1.0).abs() <= UNIT_TOLERANCE {
        return Embedding::from_unit(values.to_vec());
    }
    if strict {
        return Err(Error::NotNormalized(norm));
    }
    embedding::normalize(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;

    fn sample() -> LibrarySnapshot {
        let catalog = LabelCatalog::new(["normal", "dr", "amd"]).unwrap();
        let items = vec![
            ReferenceItem::new(7, normalize(&[1.0, 2.0, 3.0]).unwrap(), Some(0), Provenance::Base, "hq"),
            ReferenceItem::new(3, normalize(&[0.0, 1.0, 0.5]).unwrap(), Some(2), Provenance::Local, "site-a"),
            ReferenceItem::new(9, normalize(&[-1.0, 0.0, 0.5]).unwrap(), None, Provenance::Base, ""),
        ];
        LibrarySnapshot::new(0, 3, catalog, items).unwrap()
    }

    #[test]
    fn round_trip_three_items() {
        let s = sample();
        let bytes = encode(&s);
        let back = decode(&bytes, LoadOptions::default()).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[0..4], b"GRDL");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[10..18].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 3);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, LoadOptions::default()), Err(Error::BadMagic)));
        let mut bytes = encode(&sample());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes, LoadOptions::default()), Err(Error::VersionMismatch(2))));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut, LoadOptions::default()), Err(Error::CorruptRecord(_))));
    }

    #[test]
    fn rejects_unknown_class() {
        let s = sample();
        let mut bytes = encode(&s);
        // first item's class id follows the header, catalog and its item id
        let catalog_len: usize = 4 + s.catalog().names().iter().map(|n| 4 + n.len()).sum::<usize>();
        let at = 18 + catalog_len + 8;
        bytes[at..at + 4].copy_from_slice(&99i32.to_le_bytes());
        assert!(matches!(decode(&bytes, LoadOptions::default()), Err(Error::UnknownClassId(99))));
    }

    #[test]
    fn expected_dim_is_checked() {
        let bytes = encode(&sample());
        let opts = LoadOptions { expected_dim: Some(4), ..Default::default() };
        assert!(matches!(decode(&bytes, opts), Err(Error::DimMismatch { expected: 4, found: 3 })));
    }

    #[test]
    fn drifted_vectors_renormalize_unless_strict() {
        let s = sample();
        let mut bytes = encode(&s);
        let last = bytes.len() - 12;
        // scale the last item's first coordinate
        let x = f32::from_le_bytes(bytes[last..last + 4].try_into().unwrap());
        bytes[last..last + 4].copy_from_slice(&(x * 1.5).to_le_bytes());
        let loose = decode(&bytes, LoadOptions::default()).unwrap();
        assert!((loose.items()[2].embedding.norm() - 1.0).abs() < 1e-6);
        let strict = LoadOptions { strict: true, ..Default::default() };
        assert!(matches!(decode(&bytes, strict), Err(Error::NotNormalized(_))));
    }
}
