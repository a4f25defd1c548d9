use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::commands::write_atomic;
use crate::geometry::{geodesic_boundary, kernels, mobius_add, BallPoint, Curvature};
use crate::{Error, Result};

/// A single class hyperplane in the disk, given by its offset `p` and
/// normal `a`, and a Euclidean line through `p` orthogonal to `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryToyConfig {
    pub offset: [f64; 2],
    pub normal: [f64; 2],
    pub curvature: f64,
    pub samples: usize,
    /// How far towards the rim the arc endpoints reach, as a fraction of
    /// the ball radius.
    pub reach: f64,
    /// Half-length of the Euclidean segment.
    pub extent: f64,
}

impl Default for BoundaryToyConfig {
    fn default() -> Self {
        Self {
            offset: [0.3, 0.2],
            normal: [1.0, -0.5],
            curvature: 1.0,
            samples: 201,
            reach: 0.999,
            extent: 3.0,
        }
    }
}

/// The four panels, each a polyline of 2D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryToy {
    /// Hyperbolic boundary: the geodesic through `p` orthogonal to `a`.
    pub hyperbolic_arc: Vec<[f64; 2]>,
    /// `log₀` of the arc.
    pub arc_log_image: Vec<[f64; 2]>,
    /// Euclidean boundary line.
    pub euclidean_line: Vec<[f64; 2]>,
    /// `exp₀` of the line.
    pub line_exp_image: Vec<[f64; 2]>,
}

pub fn boundary_toy(cfg: &BoundaryToyConfig) -> Result<BoundaryToy> {
    let c = Curvature::new(cfg.curvature)?;
    let an = kernels::norm(&cfg.normal);
    if an == 0.0 || !(cfg.reach > 0.0 && cfg.reach < 1.0) || cfg.samples < 2 || !(cfg.extent > 0.0) {
        return Err(Error::Config("boundary toy needs a non-zero normal, reach in (0, 1), ≥ 2 samples and positive extent".into()));
    }
    let u = [-cfg.normal[1] / an, cfg.normal[0] / an];
    let p = BallPoint::new(cfg.offset.to_vec(), c)?;
    let s = cfg.reach / c.sqrt();
    let end = |sign: f64| -> Result<BallPoint> {
        let y = BallPoint::new(vec![sign * s * u[0], sign * s * u[1]], c)?;
        Ok(mobius_add(&p, &y)?)
    };
    let arc = geodesic_boundary(&end(-1.0)?, &end(1.0)?, cfg.samples)?.samples;
    let map = |pts: &[[f64; 2]], f: fn(&[f64], f64, &mut [f64])| -> Vec<[f64; 2]> {
        pts.iter()
            .map(|q| {
                let mut o = [0.0; 2];
                f(q, c.value(), &mut o);
                o
            })
            .collect()
    };
    let arc_log_image = map(&arc, kernels::logmap0);
    let n = cfg.samples;
    let line: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let t = -cfg.extent + 2.0 * cfg.extent * i as f64 / (n - 1) as f64;
            [cfg.offset[0] + t * u[0], cfg.offset[1] + t * u[1]]
        })
        .collect();
    let line_exp_image = map(&line, kernels::expmap0);
    Ok(BoundaryToy {
        hyperbolic_arc: arc,
        arc_log_image,
        euclidean_line: line,
        line_exp_image,
    })
}

/// Writes one `x,y` CSV per panel into `out_dir`.
pub fn write_boundary_toy(toy: &BoundaryToy, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for (name, pts) in [
        ("a_hyperbolic_arc.csv", &toy.hyperbolic_arc),
        ("b_arc_log_image.csv", &toy.arc_log_image),
        ("c_euclidean_line.csv", &toy.euclidean_line),
        ("d_line_exp_image.csv", &toy.line_exp_image),
    ] {
        let mut s = String::from("x,y\n");
        for q in pts {
            s.push_str(&format!("{},{}\n", q[0], q[1]));
        }
        write_atomic(&out_dir.join(name), s.as_bytes())?;
    }
    Ok(())
}
