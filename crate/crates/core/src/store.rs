//! RAEB embedding-store files.
//!
//! Layout, all little-endian, no padding:
//!
//! | field   | type          | notes                                   |
//! |---------|---------------|-----------------------------------------|
//! | magic   | `[u8; 4]`     | `b"RAEB"`                               |
//! | version | `u16`         | `1`                                     |
//! | flags   | `u16`         | bit 0: labels present; others must be 0 |
//! | dim     | `u32`         |                                         |
//! | n       | `u64`         |                                         |
//! | rows    | `f32 * n*dim` | row-major                               |
//! | labels  | `u32 * n`     | only if flag bit 0; 1-based class ids   |
//!
//! Trailing bytes are rejected. Rows are stored as `f32`, so reading
//! re-validates unit norm at `1e-6` instead of the in-memory `1e-9`; values are
//! not re-normalized, which keeps write → read → write byte-identical.

use std::fs;
use std::path::Path;

use crate::embedding::{norm, ClassId, EmbeddingStore, UnitVector};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RAEB";
pub const VERSION: u16 = 1;
pub const FLAG_LABELS: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 8;
/// Unit-norm tolerance applied to rows read back from `f32`.
pub const FILE_NORM_TOLERANCE: f64 = 1e-6;

pub fn encode_store(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let dim = u32::try_from(store.dim())
        .map_err(|_| Error::InvalidParameter(format!("dimension {} too large", store.dim())))?;
    let n = store.len();
    let labels = store.labels();
    let mut out = Vec::with_capacity(HEADER_LEN + n * store.dim() * 4 + labels.map_or(0, |_| n * 4));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in store.vectors() {
        for &x in v.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(labels) = labels {
        for l in labels {
            let id = u32::try_from(l.get())
                .map_err(|_| Error::InvalidParameter(format!("class id {l} too large")))?;
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len()).ok_or(
            Error::TruncatedFile { needed: self.pos.saturating_add(len), available: self.buf.len() },
        )?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Decodes a RAEB byte buffer. `classes`, when given, bounds label values;
/// otherwise labels only need to be ≥ 1.
pub fn decode_store(bytes: &[u8], classes: Option<usize>) -> Result<EmbeddingStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    // A short buffer whose prefix is not RAEB is a magic error, not truncation.
    if bytes.len() < 4 {
        if !MAGIC.starts_with(bytes) {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(Error::BadMagic(m));
        }
        return Err(Error::TruncatedFile { needed: HEADER_LEN, available: bytes.len() });
    }
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = u16::from_le_bytes(r.array()?);
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::UnsupportedFlags(flags));
    }
    let dim = u32::from_le_bytes(r.array()?) as usize;
    let n = u64::from_le_bytes(r.array()?);
    let n = usize::try_from(n).map_err(|_| Error::TruncatedFile { needed: usize::MAX, available: bytes.len() })?;
    if dim < 2 {
        return Err(Error::DimensionTooSmall(dim));
    }
    let row_bytes = dim.checked_mul(4).ok_or(Error::DimensionTooSmall(dim))?;

    let mut vectors = Vec::with_capacity(n.min(bytes.len() / row_bytes + 1));
    for row in 0..n {
        let raw = r.take(row_bytes)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(row * dim + i));
        }
        let nrm = norm(&values);
        if (nrm - 1.0).abs() > FILE_NORM_TOLERANCE {
            return Err(Error::NormViolation { row, norm: nrm });
        }
        vectors.push(UnitVector::new_unchecked(values));
    }

    let labels = if flags & FLAG_LABELS != 0 {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let id = u32::from_le_bytes(r.array()?) as usize;
            labels.push(ClassId::new(id, classes.unwrap_or(usize::MAX))?);
        }
        Some(labels)
    } else {
        None
    };

    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - r.pos));
    }
    EmbeddingStore::new(dim, vectors, labels)
}

pub fn write_store(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_store(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::normalize;
    use proptest::prelude::*;

    fn sample_store(labels: bool) -> EmbeddingStore {
        let vs = vec![
            normalize(&[1.0, 2.0, 3.0]).unwrap(),
            normalize(&[-0.5, 0.0, 0.25]).unwrap(),
            normalize(&[0.0, 0.0, 1.0]).unwrap(),
        ];
        let ls = labels.then(|| vec![ClassId::from_index(0), ClassId::from_index(2), ClassId::from_index(1)]);
        EmbeddingStore::new(3, vs, ls).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_store(&sample_store(true)).unwrap();
        assert_eq!(&bytes[..4], b"RAEB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[1, 0]);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 9 * 4 + 3 * 4);
        assert_eq!(&bytes[bytes.len() - 4..], &[2, 0, 0, 0]);
    }

    #[test]
    fn round_trip_preserves_f32_bits_and_labels() {
        for labels in [false, true] {
            let store = sample_store(labels);
            let back = decode_store(&encode_store(&store).unwrap(), None).unwrap();
            assert_eq!(back.dim(), store.dim());
            assert_eq!(back.labels(), store.labels());
            for (a, b) in store.vectors().iter().zip(back.vectors()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
                }
            }
            // Values read back are exactly f32-representable, so a second pass is the identity.
            let again = decode_store(&encode_store(&back).unwrap(), None).unwrap();
            assert_eq!(again, back);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.raeb");
        let store = sample_store(true);
        write_store(&path, &store).unwrap();
        let back = read_store(&path).unwrap();
        assert_eq!(encode_store(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn corrupted_inputs() {
        let good = encode_store(&sample_store(true)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_store(&bad, None), Err(Error::BadMagic(_))));
        assert!(matches!(decode_store(b"XY", None), Err(Error::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_store(&bad, None), Err(Error::UnsupportedVersion(2))));

        let mut bad = good.clone();
        bad[6] = 3;
        assert!(matches!(decode_store(&bad, None), Err(Error::UnsupportedFlags(3))));

        // cut in the middle of the second row
        let cut = &good[..HEADER_LEN + 12 + 6];
        assert!(matches!(decode_store(cut, None), Err(Error::TruncatedFile { .. })));
        assert!(matches!(decode_store(&good[..10], None), Err(Error::TruncatedFile { .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_store(&bad, None), Err(Error::TrailingBytes(1))));

        let mut bad = good.clone();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(matches!(decode_store(&bad, None), Err(Error::NormViolation { row: 0, .. })));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_store(&bad, None), Err(Error::InvalidClass { id: 0, .. })));
        let mut bad = good;
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_store(&bad, Some(3)), Err(Error::InvalidClass { id: 7, .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_identity(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 0..20),
            labelled in any::<bool>(),
        ) {
            let vs: Vec<_> = rows.iter().filter_map(|r| normalize(r).ok()).collect();
            let ls = labelled.then(|| (0..vs.len()).map(|i| ClassId::from_index(i % 5)).collect());
            let store = EmbeddingStore::new(4, vs, ls).unwrap();
            let bytes = encode_store(&store).unwrap();
            let back = decode_store(&bytes, Some(5)).unwrap();
            prop_assert_eq!(encode_store(&back).unwrap(), bytes);
            prop_assert_eq!(back.labels(), store.labels());
        }
    }
}
