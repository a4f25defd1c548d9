use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{EmbeddingDataset, Split};
use crate::model::ModelParams;
use crate::{Error, Result};

/// Points on the unit circle in the companion file.
pub const CIRCLE_SAMPLES: usize = 361;

/// `<stem>_circle.csv` next to `path`.
pub fn circle_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_circle.csv"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the 2D ball embeddings of the selected rows as CSV
/// `x,y,class,domain` (coordinates rescaled by `√c` onto the unit disk)
/// plus a unit-circle outline for plotting. Returns the number of points.
pub fn export_disk_embeddings(params: &ModelParams, ds: &EmbeddingDataset, split: Option<Split>, path: &Path) -> Result<usize> {
    if !params.spec.method.is_hyperbolic() {
        return Err(Error::Config("disk export needs a hyperbolic model".into()));
    }
    let branch = params
        .spec
        .branch_dims()
        .iter()
        .position(|&d| d == 2)
        .ok_or_else(|| Error::Config("model has no 2-dimensional branch".into()))?;
    let idx = ds.select(split);
    let x = ds.matrix(&idx);
    let outputs = params.forward(&x)?;
    let z = outputs[branch].z.as_ref().expect("hyperbolic branch has ball outputs");
    let scale = params.spec.curvature.sqrt();
    let classes = ds.classes_of(&idx);
    let domains = ds.domains_of(&idx);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "class", "domain"]).map_err(csv_err)?;
    for (r, &c) in classes.iter().enumerate() {
        let p = z.row(r);
        let d = domains.as_ref().map(|d| d[r].to_string()).unwrap_or_default();
        w.write_record([(p[0] * scale).to_string(), (p[1] * scale).to_string(), c.to_string(), d])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;

    let mut circle = String::from("x,y\n");
    for i in 0..CIRCLE_SAMPLES {
        let t = 2.0 * std::f64::consts::PI * i as f64 / (CIRCLE_SAMPLES - 1) as f64;
        circle.push_str(&format!("{},{}\n", t.cos(), t.sin()));
    }
    write_atomic(&circle_path(path), circle.as_bytes())?;
    Ok(idx.len())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
