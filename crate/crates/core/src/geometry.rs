//! Planar projective transforms in `(x = col, y = row)` pixel coordinates.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3×3 homography normalised so the bottom-right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(Error::invalid("homography bottom-right entry is zero"));
        }
        let m = m / s;
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("homography has non-finite entries"));
        }
        if m.determinant().abs() < 1e-12 {
            return Err(Error::invalid("homography is singular"));
        }
        Ok(Homography(m))
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = dx;
        m[(1, 2)] = dy;
        Homography(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn inverse(&self) -> Self {
        let inv = self.0.try_inverse().expect("homography invariant: invertible");
        Homography(inv / inv[(2, 2)])
    }

    pub fn compose(&self, other: &Homography) -> Self {
        let m = self.0 * other.0;
        Homography(m / m[(2, 2)])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0 * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    fn corners(width: usize, height: usize) -> [(f64, f64); 4] {
        let (w, h) = ((width - 1) as f64, (height - 1) as f64);
        [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)]
    }

    /// Largest distance any image corner moves under the transform.
    pub fn corner_displacement(&self, width: usize, height: usize) -> f64 {
        Self::corners(width, height)
            .iter()
            .map(|&(x, y)| {
                let (u, v) = self.apply(x, y);
                ((u - x).powi(2) + (v - y).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Mean distance between the images of the four corners under `self` and `other`.
    pub fn corner_error(&self, other: &Homography, width: usize, height: usize) -> f64 {
        Self::corners(width, height)
            .iter()
            .map(|&(x, y)| {
                let (a, b) = self.apply(x, y);
                let (c, d) = other.apply(x, y);
                ((a - c).powi(2) + (b - d).powi(2)).sqrt()
            })
            .sum::<f64>()
            / 4.0
    }

    /// Direct linear transform with Hartley normalisation. Needs at least four
    /// correspondences `src[i] -> dst[i]`; with exactly four it is exact.
    pub fn estimate(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Self> {
        if src.len() != dst.len() || src.len() < 4 {
            return Err(Error::invalid("homography needs >= 4 paired points"));
        }
        let (ts, ns) = normalizer(src);
        let (td, nd) = normalizer(dst);
        let n = src.len();
        let mut a = DMatrix::<f64>::zeros(2 * n.max(5), 9);
        for i in 0..n {
            let (x, y) = ns[i];
            let (u, v) = nd[i];
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        }
        // Zero rows pad the 4-point case to a tall matrix so the SVD exposes the null space.
        let svd = a.svd(false, true);
        let vt = svd
            .v_t
            .ok_or_else(|| Error::Numerical("svd failed in homography fit".into()))?;
        let (idx, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let h = vt.row(idx);
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        let td_inv = td
            .try_inverse()
            .ok_or_else(|| Error::Numerical("degenerate point set".into()))?;
        Self::new(td_inv * hn * ts)
    }
}

fn normalizer(pts: &[(f64, f64)]) -> (Matrix3<f64>, Vec<(f64, f64)>) {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let md = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if md > 1e-12 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts.iter().map(|p| (s * (p.0 - cx), s * (p.1 - cy))).collect();
    (t, out)
}

/// Serialised form: nine row-major entries written as exact decimal strings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct HomographyRecord(pub Vec<String>);

impl From<&Homography> for HomographyRecord {
    fn from(h: &Homography) -> Self {
        HomographyRecord(h.to_row_major().iter().map(|v| format!("{v:?}")).collect())
    }
}

impl TryFrom<&HomographyRecord> for Homography {
    type Error = Error;

    fn try_from(r: &HomographyRecord) -> Result<Self> {
        if r.0.len() != 9 {
            return Err(Error::invalid("homography record needs 9 entries"));
        }
        let mut v = [0.0; 9];
        for (slot, s) in v.iter_mut().zip(&r.0) {
            *slot = s
                .parse()
                .map_err(|_| Error::invalid(format!("bad homography entry {s:?}")))?;
        }
        Homography::from_row_major(&v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_fit_is_exact() {
        let src = [(0.0, 0.0), (63.0, 0.0), (63.0, 63.0), (0.0, 63.0)];
        let dst = [(1.5, -2.0), (64.0, 1.0), (61.0, 65.5), (-1.0, 60.0)];
        let h = Homography::estimate(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = h.apply(s.0, s.1);
            assert!((u - d.0).abs() < 1e-8 && (v - d.1).abs() < 1e-8);
        }
    }

    #[test]
    fn record_round_trip_is_exact() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let dst = [(0.1, 0.3), (10.2, -0.1), (9.7, 10.4), (0.05, 9.9)];
        let h = Homography::estimate(&src, &dst).unwrap();
        let rec = HomographyRecord::from(&h);
        let back = Homography::try_from(&rec).unwrap();
        assert_eq!(back.to_row_major(), h.to_row_major());
    }

    #[test]
    fn singular_is_rejected() {
        assert!(Homography::new(Matrix3::zeros()).is_err());
    }
}
