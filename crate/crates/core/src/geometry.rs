//! Poincaré-ball geometry.
//!
//! The ball of curvature `c > 0` is the open set `{x : c‖x‖² < 1}`. All
//! operations are computed in `f64`. Points produced by an operation are
//! projected so that `√c‖x‖ ≤ 1 − 1e−5`; the same bound is applied to the
//! argument of `artanh` in distances and logarithmic maps.
//!
//! The checked API works on [`BallPoint`] and [`TangentVector`]; the
//! [`kernels`] module exposes the same formulas over plain slices for the
//! differentiation engine and the metrics, which call them in tight loops.

use thiserror::Error;

/// Points are kept at `√c‖x‖ ≤ BOUNDARY_MARGIN`.
pub const BOUNDARY_MARGIN: f64 = 1.0 - 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("curvature must be positive and finite, got {0}")]
    InvalidCurvature(f64),
    #[error("clip radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("point lies outside the ball: c·‖x‖² = {0}")]
    OutsideBall(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("curvature mismatch: {0} vs {1}")]
    CurvatureMismatch(f64, f64),
    #[error("empty vector")]
    Empty,
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("Möbius addition denominator underflowed to zero")]
    DenominatorUnderflow,
    #[error("degenerate geodesic: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(GeometryError::InvalidCurvature(c))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest Euclidean norm a point may have after projection.
    pub fn max_norm(self) -> f64 {
        BOUNDARY_MARGIN / self.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ClipRadius(f64);

impl ClipRadius {
    pub fn new(r: f64) -> Result<Self> {
        if r.is_finite() && r > 0.0 {
            Ok(Self(r))
        } else {
            Err(GeometryError::InvalidRadius(r))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for ClipRadius {
    fn default() -> Self {
        Self(1.0)
    }
}

/// A point strictly inside the ball of its curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    /// Validates `c‖x‖² < 1`.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        check_finite(&coords)?;
        let scaled = curvature.value() * kernels::norm_sq(&coords);
        if scaled >= 1.0 {
            return Err(GeometryError::OutsideBall(scaled));
        }
        Ok(Self { coords, curvature })
    }

    /// Builds a point, pulling it inside the projection margin if needed.
    pub fn projected(mut coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        check_finite(&coords)?;
        kernels::project(&mut coords, curvature.value());
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        kernels::norm(&self.coords)
    }

    /// The additive inverse `−x`, which is also the gyro-inverse.
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }
}

/// A Euclidean vector in the tangent space at some base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_finite(&coords)?;
        Ok(Self(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        kernels::norm(&self.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }
}

/// Samples along the geodesic joining two points of the Poincaré disk.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicArc {
    pub endpoints: (BallPoint, BallPoint),
    pub samples: Vec<[f64; 2]>,
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(GeometryError::Empty);
    }
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(GeometryError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_pair(x: &BallPoint, y: &BallPoint) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(GeometryError::DimensionMismatch(x.dim(), y.dim()));
    }
    if x.curvature != y.curvature {
        return Err(GeometryError::CurvatureMismatch(
            x.curvature.value(),
            y.curvature.value(),
        ));
    }
    Ok(())
}

/// `λ_x = 2 / (1 − c‖x‖²)`.
pub fn conformal_factor(x: &BallPoint) -> Result<f64> {
    let scaled = x.curvature.value() * kernels::norm_sq(&x.coords);
    if scaled >= 1.0 {
        return Err(GeometryError::OutsideBall(scaled));
    }
    Ok(2.0 / (1.0 - scaled))
}

/// Möbius addition `x ⊕_c y`.
pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
    check_pair(x, y)?;
    let c = x.curvature.value();
    let mut out = vec![0.0; x.dim()];
    let den = kernels::mobius_add(&x.coords, &y.coords, c, &mut out);
    if den == 0.0 || !den.is_finite() {
        return Err(GeometryError::DenominatorUnderflow);
    }
    kernels::project(&mut out, c);
    Ok(BallPoint {
        coords: out,
        curvature: x.curvature,
    })
}

/// Geodesic distance `(2/√c) artanh(√c ‖−x ⊕ y‖)`.
pub fn dist(x: &BallPoint, y: &BallPoint) -> Result<f64> {
    check_pair(x, y)?;
    if x.coords == y.coords {
        return Ok(0.0);
    }
    Ok(kernels::dist(&x.coords, &y.coords, x.curvature.value()))
}

/// Exponential map at `base`. Returns `base` unchanged for a zero vector.
pub fn exp_map(base: &BallPoint, v: &TangentVector) -> Result<BallPoint> {
    if base.dim() != v.dim() {
        return Err(GeometryError::DimensionMismatch(base.dim(), v.dim()));
    }
    let c = base.curvature.value();
    let vn = kernels::norm(&v.0);
    if vn == 0.0 {
        return Ok(base.clone());
    }
    let sc = c.sqrt();
    let lambda = conformal_factor(base)?;
    let t = (sc * lambda * vn / 2.0).tanh();
    let mut step: Vec<f64> = v.0.iter().map(|vi| t * vi / (sc * vn)).collect();
    kernels::project(&mut step, c);
    if base.coords.iter().all(|&b| b == 0.0) {
        return Ok(BallPoint {
            coords: step,
            curvature: base.curvature,
        });
    }
    let step = BallPoint {
        coords: step,
        curvature: base.curvature,
    };
    mobius_add(base, &step)
}

/// Logarithmic map at `base`, the inverse of [`exp_map`]. Returns the zero
/// vector when `y == base`.
pub fn log_map(base: &BallPoint, y: &BallPoint) -> Result<TangentVector> {
    check_pair(base, y)?;
    if base.coords == y.coords {
        return Ok(TangentVector::zeros(base.dim()));
    }
    let c = base.curvature.value();
    let sc = c.sqrt();
    let mut m = vec![0.0; base.dim()];
    let neg: Vec<f64> = base.coords.iter().map(|v| -v).collect();
    let den = kernels::mobius_add(&neg, &y.coords, c, &mut m);
    if den == 0.0 || !den.is_finite() {
        return Err(GeometryError::DenominatorUnderflow);
    }
    let mn = kernels::norm(&m);
    if mn == 0.0 {
        return Ok(TangentVector::zeros(base.dim()));
    }
    let lambda = conformal_factor(base)?;
    let arg = (sc * mn).min(BOUNDARY_MARGIN);
    let coef = 2.0 / (sc * lambda) * arg.atanh() / mn;
    Ok(TangentVector(m.iter().map(|v| coef * v).collect()))
}

/// Rescales `h` to norm `r` when it is longer than `r`.
pub fn clip_features(h: &TangentVector, r: ClipRadius) -> TangentVector {
    let mut out = h.0.clone();
    kernels::clip(&mut out, r.value());
    TangentVector(out)
}

/// `n_samples` points on the geodesic from `p` to `q`, obtained as
/// `exp_p(t · log_p(q))` for evenly spaced `t ∈ [0, 1]`. The first and last
/// samples are `p` and `q` exactly.
pub fn geodesic_boundary(p: &BallPoint, q: &BallPoint, n_samples: usize) -> Result<GeodesicArc> {
    check_pair(p, q)?;
    if p.dim() != 2 {
        return Err(GeometryError::Degenerate(format!(
            "geodesic arcs are defined in the disk (d = 2), got d = {}",
            p.dim()
        )));
    }
    if p.coords == q.coords {
        return Err(GeometryError::Degenerate("endpoints coincide".into()));
    }
    if n_samples < 2 {
        return Err(GeometryError::Degenerate(format!(
            "need at least two samples, got {n_samples}"
        )));
    }
    let dir = log_map(p, q)?;
    let mut samples = Vec::with_capacity(n_samples);
    samples.push([p.coords[0], p.coords[1]]);
    for i in 1..n_samples - 1 {
        let t = i as f64 / (n_samples - 1) as f64;
        let s = exp_map(p, &dir.scaled(t))?;
        samples.push([s.coords[0], s.coords[1]]);
    }
    samples.push([q.coords[0], q.coords[1]]);
    Ok(GeodesicArc {
        endpoints: (p.clone(), q.clone()),
        samples,
    })
}

/// Unchecked slice kernels shared with the differentiation engine.
pub mod kernels {
    use super::BOUNDARY_MARGIN;

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[inline]
    pub fn norm_sq(a: &[f64]) -> f64 {
        dot(a, a)
    }

    /// Euclidean norm, rescaling first when the squared sum overflows.
    pub fn norm(a: &[f64]) -> f64 {
        let s = norm_sq(a);
        if s.is_finite() {
            return s.sqrt();
        }
        let m = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m == 0.0 || !m.is_finite() {
            return m;
        }
        m * a.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
    }

    /// Writes `x ⊕_c y` into `out` and returns the denominator.
    pub fn mobius_add(x: &[f64], y: &[f64], c: f64, out: &mut [f64]) -> f64 {
        let xy = dot(x, y);
        let xx = norm_sq(x);
        let yy = norm_sq(y);
        let alpha = 1.0 + 2.0 * c * xy + c * yy;
        let beta = 1.0 - c * xx;
        let den = 1.0 + 2.0 * c * xy + c * c * xx * yy;
        for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
            *o = (alpha * xi + beta * yi) / den;
        }
        den
    }

    /// Reverse pass of [`mobius_add`]: accumulates into `gx`, `gy` the
    /// gradients of a scalar with respect to `x` and `y`, given its gradient
    /// `gm` with respect to `m = x ⊕_c y`.
    pub fn mobius_add_backward(
        x: &[f64],
        y: &[f64],
        c: f64,
        m: &[f64],
        gm: &[f64],
        gx: &mut [f64],
        gy: &mut [f64],
    ) {
        let xy = dot(x, y);
        let xx = norm_sq(x);
        let yy = norm_sq(y);
        let alpha = 1.0 + 2.0 * c * xy + c * yy;
        let beta = 1.0 - c * xx;
        let den = 1.0 + 2.0 * c * xy + c * c * xx * yy;
        // m = N / den with N = alpha x + beta y
        let g_den = -dot(gm, m) / den;
        let mut g_alpha = 0.0;
        let mut g_beta = 0.0;
        for i in 0..x.len() {
            let gn = gm[i] / den;
            g_alpha += gn * x[i];
            g_beta += gn * y[i];
            gx[i] += alpha * gn;
            gy[i] += beta * gn;
        }
        let g_xy = 2.0 * c * g_alpha + 2.0 * c * g_den;
        let g_xx = -c * g_beta + c * c * yy * g_den;
        let g_yy = c * g_alpha + c * c * xx * g_den;
        for i in 0..x.len() {
            gx[i] += g_xy * y[i] + 2.0 * g_xx * x[i];
            gy[i] += g_xy * x[i] + 2.0 * g_yy * y[i];
        }
    }

    /// Geodesic distance between `x` and `y`.
    pub fn dist(x: &[f64], y: &[f64], c: f64) -> f64 {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let mut m = vec![0.0; x.len()];
        mobius_add(&neg, y, c, &mut m);
        let sc = c.sqrt();
        2.0 / sc * (sc * norm(&m)).min(BOUNDARY_MARGIN).atanh()
    }

    /// Pulls `x` back to `√c‖x‖ ≤ 1 − 1e−5`.
    pub fn project(x: &mut [f64], c: f64) {
        let max = BOUNDARY_MARGIN / c.sqrt();
        let n = norm(x);
        if n > max {
            let s = max / n;
            x.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Rescales `h` to norm `r` when it is longer.
    pub fn clip(h: &mut [f64], r: f64) {
        let n = norm(h);
        if n > r {
            let s = r / n;
            h.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `exp_0(v) = tanh(√c‖v‖) v / (√c‖v‖)`, projected into the margin.
    pub fn expmap0(v: &[f64], c: f64, out: &mut [f64]) {
        let n = norm(v);
        if n == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let sc = c.sqrt();
        let t = (sc * n).tanh().min(BOUNDARY_MARGIN);
        let s = t / (sc * n);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = s * vi;
        }
    }

    /// `log_0(y) = artanh(√c‖y‖) y / (√c‖y‖)`.
    pub fn logmap0(y: &[f64], c: f64, out: &mut [f64]) {
        let n = norm(y);
        if n == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let sc = c.sqrt();
        let s = (sc * n).min(BOUNDARY_MARGIN).atanh() / (sc * n);
        for (o, yi) in out.iter_mut().zip(y) {
            *o = s * yi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: f64) -> Curvature {
        Curvature::new(v).unwrap()
    }

    fn pt(v: &[f64], cv: f64) -> BallPoint {
        BallPoint::new(v.to_vec(), c(cv)).unwrap()
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
        assert!(ClipRadius::new(-1.0).is_err());
        assert!(matches!(
            BallPoint::new(vec![1.0, 0.0], c(1.0)),
            Err(GeometryError::OutsideBall(_))
        ));
        assert!(BallPoint::new(vec![], c(1.0)).is_err());
        let a = pt(&[0.1, 0.1], 1.0);
        let b = pt(&[0.1], 1.0);
        assert!(matches!(
            mobius_add(&a, &b),
            Err(GeometryError::DimensionMismatch(2, 1))
        ));
        let d = pt(&[0.1, 0.1], 0.5);
        assert!(matches!(
            dist(&a, &d),
            Err(GeometryError::CurvatureMismatch(..))
        ));
    }

    #[test]
    fn conformal_factor_values() {
        assert_eq!(conformal_factor(&BallPoint::origin(3, c(1.0))).unwrap(), 2.0);
        let half = 0.5f64.sqrt();
        let x = pt(&[half, 0.0], 1.0);
        assert!((conformal_factor(&x).unwrap() - 4.0).abs() < 1e-12);
        // 50-digit evaluation: 2.2857142857142857142857142857...
        let y = pt(&[0.3, 0.4], 0.5);
        assert!((conformal_factor(&y).unwrap() - 2.285_714_285_714_285_7).abs() < 1e-15);
    }

    #[test]
    fn mobius_add_identity_inverse_and_reference() {
        let y = pt(&[0.3, -0.2, 0.1], 1.0);
        let zero = BallPoint::origin(3, c(1.0));
        assert_eq!(mobius_add(&zero, &y).unwrap(), y);
        let s = mobius_add(&y, &y.neg()).unwrap();
        assert!(s.coords().iter().all(|v| v.abs() < 1e-12));

        // 50-digit reference values.
        let x = pt(&[0.1, 0.2], 1.0);
        let y = pt(&[-0.3, 0.05], 1.0);
        let m = mobius_add(&x, &y).unwrap();
        assert!((m.coords()[0] - -0.186_341_842_684_981_21).abs() < 1e-15);
        assert!((m.coords()[1] - 0.267_461_448_749_514_06).abs() < 1e-15);
    }

    #[test]
    fn dist_reference_and_euclidean_limit() {
        let x = pt(&[0.2, 0.1], 1.0);
        assert_eq!(dist(&x, &x).unwrap(), 0.0);
        let y = pt(&[-0.1, 0.3], 1.0);
        assert!((dist(&x, &y).unwrap() - 0.761_342_108_341_590_2).abs() < 1e-14);

        let a = pt(&[0.1, 0.0], 1e-8);
        let b = pt(&[0.4, 0.0], 1e-8);
        let d = dist(&a, &b).unwrap();
        assert!(((d - 0.6) / 0.6).abs() < 1e-4);
    }

    #[test]
    fn exp_map_reference_zero_and_saturation() {
        let o = BallPoint::origin(2, c(1.0));
        assert_eq!(exp_map(&o, &TangentVector::zeros(2)).unwrap(), o);

        let v = TangentVector::new(vec![0.5, -0.25]).unwrap();
        let z = exp_map(&o, &v).unwrap();
        assert!((z.coords()[0] - 0.453_696_152_405_777_7).abs() < 1e-15);
        assert!((z.coords()[1] - -0.226_848_076_202_888_86).abs() < 1e-15);

        let mut prev = 0.0;
        for k in 0..40 {
            let s = 0.25 * 1.5f64.powi(k);
            let z = exp_map(&o, &TangentVector::new(vec![s, -s]).unwrap()).unwrap();
            let n = z.norm();
            assert!(n < 1.0);
            assert!(n >= prev);
            prev = n;
        }
        assert!(prev > 0.9999);
    }

    #[test]
    fn exp_map_at_nonzero_base_returns_base_for_zero_vector() {
        let b = pt(&[0.3, -0.4], 1.0);
        assert_eq!(exp_map(&b, &TangentVector::zeros(2)).unwrap(), b);
    }

    #[test]
    fn log_map_reference() {
        let o = BallPoint::origin(2, c(1.0));
        assert_eq!(log_map(&o, &o).unwrap(), TangentVector::zeros(2));
        let y = pt(&[0.6, 0.0], 1.0);
        let v = log_map(&o, &y).unwrap();
        // artanh(0.6) = ln 2
        assert!((v.coords()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v.coords()[1], 0.0);
        let b = pt(&[0.1, 0.5], 1.0);
        assert_eq!(log_map(&b, &b).unwrap(), TangentVector::zeros(2));
    }

    #[test]
    fn clip_examples() {
        let r = ClipRadius::new(1.0).unwrap();
        let h = TangentVector::new(vec![0.3, 0.4]).unwrap();
        assert_eq!(clip_features(&h, r), h);
        let h = TangentVector::new(vec![2.0, 0.0]).unwrap();
        assert_eq!(clip_features(&h, r).coords(), &[1.0, 0.0]);
        let h = TangentVector::new(vec![3.0, 4.0]).unwrap();
        let out = clip_features(&h, r);
        assert!((out.coords()[0] - 0.6).abs() < 1e-15);
        assert!((out.coords()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn geodesic_through_origin_is_straight() {
        let p = pt(&[-0.3, 0.0], 1.0);
        let q = pt(&[0.3, 0.0], 1.0);
        let arc = geodesic_boundary(&p, &q, 21).unwrap();
        assert_eq!(arc.samples.len(), 21);
        assert_eq!(arc.samples[0], [-0.3, 0.0]);
        assert_eq!(arc.samples[20], [0.3, 0.0]);
        assert!(arc.samples.iter().all(|s| s[1] == 0.0));
        assert!(arc.samples.windows(2).all(|w| w[0][0] < w[1][0]));
    }

    #[test]
    fn geodesic_is_additive_off_axis() {
        let p = pt(&[-0.5, 0.4], 1.0);
        let q = pt(&[0.6, 0.3], 1.0);
        let total = dist(&p, &q).unwrap();
        let arc = geodesic_boundary(&p, &q, 33).unwrap();
        for s in &arc.samples {
            let s = pt(s, 1.0);
            let sum = dist(&p, &s).unwrap() + dist(&s, &q).unwrap();
            assert!((sum - total).abs() < 1e-6);
        }
    }

    #[test]
    fn geodesic_rejects_degenerate() {
        let p = pt(&[0.1, 0.1], 1.0);
        assert!(matches!(
            geodesic_boundary(&p, &p, 10),
            Err(GeometryError::Degenerate(_))
        ));
        let p3 = pt(&[0.1, 0.1, 0.0], 1.0);
        let q3 = pt(&[0.2, 0.1, 0.0], 1.0);
        assert!(geodesic_boundary(&p3, &q3, 10).is_err());
    }
}
