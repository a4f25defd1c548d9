//! On-disk dataset container.
//!
//! A dataset is a directory holding three files:
//!
//! - `manifest.json`: `version`, `n` (embedding width), `num_samples`,
//!   `num_classes`, optional `num_domains`, and `checksums` mapping each data
//!   file name to the lowercase hex SHA-256 of its bytes.
//! - `embeddings.bin`: magic `HEMB`, `u16` version (= 1), `u64` rows, `u32`
//!   width, then `rows × width` little-endian `f32` values, row-major.
//! - `labels.csv`: header `index,class,domain,split`, one line per row in
//!   index order; `domain` and `split` may be empty.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, EmbeddingDataset, Result, Split};

pub const HEMB_MAGIC: &[u8; 4] = b"HEMB";
pub const HEMB_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const LABELS_FILE: &str = "labels.csv";

const HEADER_LEN: usize = 4 + 2 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u64,
    pub n: usize,
    pub num_samples: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_domains: Option<usize>,
    pub checksums: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_embeddings(ds: &EmbeddingDataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.embeddings().len() * 4);
    buf.extend_from_slice(HEMB_MAGIC);
    buf.extend_from_slice(&HEMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    for v in ds.embeddings() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_embeddings(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != HEMB_MAGIC {
        return Err(DataError::BadMagic { file: file.into() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != HEMB_VERSION {
        return Err(DataError::UnsupportedVersion {
            what: "HEMB",
            found: version as u64,
        });
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if dim == 0 || body.len() != rows * dim * 4 {
        return Err(DataError::RowCount {
            field: "embeddings.bin",
            expected: rows,
            found: if dim == 0 { 0 } else { body.len() / (dim * 4) },
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((rows, dim, values))
}

fn encode_labels(ds: &EmbeddingDataset) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "class", "domain", "split"]).unwrap();
    for i in 0..ds.len() {
        let domain = ds.domain_labels().map(|d| d[i].to_string()).unwrap_or_default();
        let split = ds.splits()[i].map(|s| s.as_str()).unwrap_or("");
        w.write_record([&i.to_string(), &ds.class_labels()[i].to_string(), &domain, split])
            .unwrap();
    }
    w.into_inner().expect("in-memory csv writer")
}

type LabelColumns = (Vec<usize>, Option<Vec<usize>>, Vec<Option<Split>>);

fn decode_labels(bytes: &[u8]) -> Result<LabelColumns> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r
        .headers()
        .map_err(|e| DataError::Labels { row: 0, msg: e.to_string() })?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["index", "class", "domain", "split"] {
        return Err(DataError::Labels {
            row: 0,
            msg: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut classes = Vec::new();
    let mut domains: Vec<Option<usize>> = Vec::new();
    let mut splits = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Labels { row, msg: e.to_string() })?;
        let bad = |msg: String| DataError::Labels { row, msg };
        let index: usize = rec[0].parse().map_err(|_| bad(format!("bad index `{}`", &rec[0])))?;
        if index != row {
            return Err(bad(format!("index {index} out of order")));
        }
        classes.push(rec[1].parse().map_err(|_| bad(format!("bad class `{}`", &rec[1])))?);
        domains.push(match &rec[2] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad(format!("bad domain `{s}`")))?),
        });
        splits.push(match &rec[3] {
            "" => None,
            s => Some(s.parse::<Split>().map_err(bad)?),
        });
    }
    let domains = match domains.iter().filter(|d| d.is_some()).count() {
        0 => None,
        n if n == domains.len() => Some(domains.into_iter().map(Option::unwrap).collect()),
        _ => {
            let row = domains.iter().position(Option::is_none).unwrap();
            return Err(DataError::Labels {
                row,
                msg: "domain label missing while other rows have one".into(),
            });
        }
    };
    Ok((classes, domains, splits))
}

/// Writes `manifest.json`, `embeddings.bin` and `labels.csv` into `dir`.
/// The manifest is written last, through a rename, so a readable manifest
/// always refers to complete data files.
pub fn save_dataset(ds: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let emb = encode_embeddings(ds);
    let labels = encode_labels(ds);
    let mut checksums = BTreeMap::new();
    checksums.insert(EMBEDDINGS_FILE.to_string(), sha256_hex(&emb));
    checksums.insert(LABELS_FILE.to_string(), sha256_hex(&labels));
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        n: ds.dim(),
        num_samples: ds.len(),
        num_classes: ds.num_classes(),
        num_domains: ds.num_domains(),
        checksums,
    };
    for (name, bytes) in [(EMBEDDINGS_FILE, &emb), (LABELS_FILE, &labels)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
    let dst = dir.join(MANIFEST_FILE);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&json).map_err(io_err(&tmp))?;
        f.write_all(b"\n").map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &dst).map_err(io_err(&dst))?;
    Ok(manifest)
}

fn manifest_location(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    }
}

/// Reads the manifest at `path` (a dataset directory or its
/// `manifest.json`).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let (_, mpath) = manifest_location(path.as_ref());
    let text = fs::read(&mpath).map_err(io_err(&mpath))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(DataError::UnsupportedVersion {
            what: "manifest",
            found: m.version,
        });
    }
    Ok(m)
}

/// Loads and validates a dataset, verifying checksums and every count the
/// manifest declares.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let (dir, _) = manifest_location(path.as_ref());
    let manifest = read_manifest(path.as_ref())?;
    let read_checked = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        match manifest.checksums.get(name) {
            Some(expected) if *expected != sha256_hex(&bytes) => Err(DataError::ChecksumMismatch { file: name.into() }),
            _ => Ok(bytes),
        }
    };
    let emb = read_checked(EMBEDDINGS_FILE)?;
    let labels = read_checked(LABELS_FILE)?;
    let (rows, dim, values) = decode_embeddings(&emb, EMBEDDINGS_FILE)?;
    if dim != manifest.n {
        return Err(DataError::Width {
            expected: manifest.n,
            found: dim,
        });
    }
    if rows != manifest.num_samples {
        return Err(DataError::RowCount {
            field: "embeddings.bin",
            expected: manifest.num_samples,
            found: rows,
        });
    }
    let (classes, domains, splits) = decode_labels(&labels)?;
    if classes.len() != rows {
        return Err(DataError::RowCount {
            field: "labels.csv",
            expected: rows,
            found: classes.len(),
        });
    }
    let ds = EmbeddingDataset::new(dim, values, classes, domains, splits)?;
    if ds.num_classes() != manifest.num_classes {
        return Err(DataError::NonContiguousLabels(format!(
            "manifest declares {} classes, labels contain {}",
            manifest.num_classes,
            ds.num_classes()
        )));
    }
    if let (Some(declared), Some(found)) = (manifest.num_domains, ds.num_domains()) {
        if found > declared {
            return Err(DataError::Manifest(format!(
                "manifest declares {declared} domains, labels contain {found}"
            )));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EmbeddingDataset {
        EmbeddingDataset::new(
            2,
            vec![0.5, -1.25, 3.0e-8, 7.0, -0.0, 1.0e30],
            vec![0, 1, 0],
            Some(vec![2, 0, 1]),
            vec![Some(Split::Train), Some(Split::Val), None],
        )
        .unwrap()
    }

    #[test]
    fn three_rows_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let via_manifest = load_dataset(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(via_manifest, ds);
        let csv = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(csv, "index,class,domain,split\n0,0,2,train\n1,1,0,val\n2,0,1,\n");
    }

    #[test]
    fn nan_is_reported_with_row() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let p = dir.path().join(EMBEDDINGS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        // row 2, column 1
        let off = HEADER_LEN + (2 * 2 + 1) * 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        // Drop the checksum so validation reaches the value check.
        let mut m = read_manifest(dir.path()).unwrap();
        m.checksums.remove(EMBEDDINGS_FILE);
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, DataError::NonFinite { row: 2, col: 1 }), "{err}");
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let p = dir.path().join(EMBEDDINGS_FILE);
        let good = fs::read(&p).unwrap();

        let mut bytes = good.clone();
        bytes[HEADER_LEN] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::ChecksumMismatch { .. })));

        let mut m = read_manifest(dir.path()).unwrap();
        m.checksums.clear();
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        let mut bytes = good.clone();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::BadMagic { .. })));

        let mut bytes = good.clone();
        bytes[4] = 9;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::UnsupportedVersion { what: "HEMB", .. })
        ));

        let bytes = &good[..good.len() - 4];
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::RowCount { .. })));

        fs::write(&p, &good).unwrap();
        fs::write(dir.path().join(LABELS_FILE), "index,class,domain,split\n0,0,2,train\n1,1,0,val\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::RowCount { field: "labels.csv", .. })));

        fs::write(dir.path().join(LABELS_FILE), "index,class,domain,split\n0,0,2,train\n1,2,0,val\n2,0,1,\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::NonContiguousLabels(_))));
    }
}
