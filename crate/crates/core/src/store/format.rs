//! SNLE: a little-endian container for embedding matrices.
//!
//! ```text
//! "SNLE" | u32 version | u32 header_len | header JSON (header_len bytes)
//!        | rows*dim f32, row-major | rows u32 labels (iff has_labels)
//! ```
//!
//! There is no padding and no checksum; a file is valid only if its size is
//! exactly what the header implies.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{validate, EmbeddingSet, FeatureKind, UNIT_NORM_TOL};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SNLE";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dim: usize,
    rows: usize,
    classes: usize,
    kind: FeatureKind,
    has_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

fn encode(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let header = Header {
        dim: set.dim(),
        rows: set.len(),
        classes: set.num_classes,
        kind: set.kind,
        has_labels: set.labels.is_some(),
        class_names: set.class_names.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let labels_len = set.labels.as_ref().map_or(0, |l| l.len() * 4);
    let mut buf = Vec::with_capacity(PREAMBLE + json.len() + set.rows.len() * 4 + labels_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&json);
    for x in set.rows.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(labels) = &set.labels {
        for y in labels {
            buf.extend_from_slice(&y.to_le_bytes());
        }
    }
    Ok(buf)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn decode(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncation {
            expected: PREAMBLE,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = read_u32(bytes, 8) as usize;
    let header_end = PREAMBLE + header_len;
    if bytes.len() < header_end {
        return Err(Error::Truncation {
            expected: header_end,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;

    let payload = header
        .rows
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("header shape overflows".into()))?;
    let labels_len = if header.has_labels { header.rows * 4 } else { 0 };
    let expected = header_end + payload + labels_len;
    if bytes.len() < expected {
        return Err(Error::Truncation {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }

    let data: Vec<f32> = bytes[header_end..header_end + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut rows = Array2::from_shape_vec((header.rows, header.dim), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    renormalize(&mut rows)?;

    let labels = header.has_labels.then(|| {
        bytes[header_end + payload..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect::<Vec<_>>()
    });

    let set = EmbeddingSet {
        rows,
        labels,
        num_classes: header.classes,
        kind: header.kind,
        class_names: header.class_names,
    };
    let violations = validate(&set);
    if !violations.is_empty() {
        return Err(Error::Data(violations.join("; ")));
    }
    Ok(set)
}

/// Rows already within the unit-norm tolerance are left untouched so that a
/// save/load round trip is bit-exact.
fn renormalize(rows: &mut Array2<f32>) -> Result<()> {
    for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("row {i}: non-finite entry")));
        }
        let norm = row
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::Data(format!("row {i} has zero norm")));
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            row.mapv_inplace(|x| (f64::from(x) / norm) as f32);
        }
    }
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_store(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let violations = validate(set);
    if !violations.is_empty() {
        return Err(Error::Data(violations.join("; ")));
    }
    let path = path.as_ref();
    let bytes = encode(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> EmbeddingSet {
        EmbeddingSet::new(
            array![
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 0.6, 0.8, 0.0],
                [0.5, 0.5, 0.5, 0.5]
            ],
            Some(vec![0, 1, 2]),
            3,
            FeatureKind::Image,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.snle");
        save_store(&sample(), &p).unwrap();
        let back = load_store(&p).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.len(), 3);
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn second_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_store(&sample(), &a).unwrap();
        save_store(&load_store(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn header_records_labels() {
        let bytes = encode(&sample()).unwrap();
        let hl = read_u32(&bytes, 8) as usize;
        let h: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(h["has_labels"], true);
        assert_eq!(h["kind"], "image");
        assert_eq!(bytes.len(), 12 + hl + 3 * 4 * 4 + 3 * 4);
        assert_eq!(read_u32(&bytes, bytes.len() - 4), 2);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let set = EmbeddingSet::new(
            Array2::from_shape_fn((5, 2), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 0.0 }),
            None,
            2,
            FeatureKind::Text,
        )
        .unwrap();
        let bytes = encode(&set).unwrap();
        // drop the last row (2 floats)
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(
            decode(cut),
            Err(Error::Truncation { expected, found }) if expected == found + 8
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn zero_row_names_index() {
        let mut set = sample();
        set.rows.row_mut(1).fill(0.0);
        let bytes = encode(&set).unwrap();
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Data(ref s) if s.contains("row 1")), "{err}");
    }

    #[test]
    fn loader_renormalizes() {
        let mut set = sample();
        set.rows.row_mut(0).fill(2.0);
        let back = decode(&encode(&set).unwrap()).unwrap();
        for &x in back.row(0) {
            assert!((x - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn nan_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan");
        let mut set = sample();
        set.rows[[0, 1]] = f32::NAN;
        assert!(save_store(&set, &p).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_store(&sample(), "/nonexistent-dir/x.snle").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            n in 1usize..6,
            d in 2usize..7,
            seed in any::<u64>(),
            labeled in any::<bool>(),
            named in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0));
            rows.row_mut(0)[0] = 1.5;
            for mut r in rows.rows_mut() {
                let norm = r.iter().map(|x| x * x).sum::<f32>().sqrt();
                r.mapv_inplace(|x| x / norm);
            }
            let labels = labeled.then(|| (0..n as u32).map(|i| i % 3).collect());
            let mut set = EmbeddingSet::new(rows, labels, 3, FeatureKind::Image).unwrap();
            if named {
                set = set.with_class_names(vec!["a".into(), "b b".into(), "ç".into()]).unwrap();
            }
            let bytes = encode(&set).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
