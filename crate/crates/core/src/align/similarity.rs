//! Least-squares 2-D similarity fit between landmark sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five facial landmarks in pixels: left eye, right eye, nose tip, left and
/// right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: [[f64; 2]; 5],
}

/// Aligned-crop side length.
pub const ALIGNED_SIZE: usize = 112;

/// Canonical 112×112 landmark positions. This is the widely used ArcFace
/// crop convention, not a value tied to any particular dataset; override it
/// through the align config when a different crop is wanted.
pub const DEFAULT_TEMPLATE: LandmarkSet = LandmarkSet {
    points: [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ],
};

impl LandmarkSet {
    pub fn new(points: [[f64; 2]; 5]) -> Self {
        Self { points }
    }

    pub fn centroid(&self) -> [f64; 2] {
        let mut c = [0.0; 2];
        for p in &self.points {
            c[0] += p[0] / 5.0;
            c[1] += p[1] / 5.0;
        }
        c
    }

    /// Rejects non-finite, coincident, or collinear point sets.
    pub fn check_well_posed(&self, name: &str) -> Result<()> {
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Singular(format!("{name}: non-finite landmark coordinate")));
        }
        let c = self.centroid();
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for p in &self.points {
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        let trace = sxx + syy;
        let scale2 = c[0].abs().max(c[1].abs()).max(1.0).powi(2);
        if trace <= 1e-18 * scale2 {
            return Err(Error::Singular(format!("{name}: landmarks coincide")));
        }
        // Smallest eigenvalue of the 2x2 scatter relative to its trace.
        let det = sxx * syy - sxy * sxy;
        let disc = ((sxx - syy).powi(2) / 4.0 + sxy * sxy).sqrt();
        let lmin = trace / 2.0 - disc;
        let lmin = if lmin > 0.0 { lmin } else { det / (trace / 2.0 + disc) };
        if lmin <= 1e-10 * trace {
            return Err(Error::Singular(format!("{name}: landmarks are collinear")));
        }
        Ok(())
    }
}

/// `x -> s R x + t`, stored as the matrix `[[a, -b, tx], [b, a, ty]]` with
/// `a = s cos(angle)` and `b = s sin(angle)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn from_params(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle.cos(),
            b: scale * angle.sin(),
            tx,
            ty,
        }
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Rotation angle in radians, in `(-pi, pi]`.
    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn translation(&self) -> [f64; 2] {
        [self.tx, self.ty]
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.tx], [self.b, self.a, self.ty]]
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    pub fn apply_set(&self, set: &LandmarkSet) -> LandmarkSet {
        LandmarkSet {
            points: set.points.map(|p| self.apply(p)),
        }
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.a * self.a + self.b * self.b;
        d.is_finite() && d > 1e-24 && self.tx.is_finite() && self.ty.is_finite()
    }

    pub fn inverse(&self) -> Result<Self> {
        if !self.is_invertible() {
            return Err(Error::Singular(format!("transform {self:?} is not invertible")));
        }
        let d = self.a * self.a + self.b * self.b;
        let (ia, ib) = (self.a / d, -self.b / d);
        Ok(Self {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        })
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &SimilarityTransform) -> Self {
        let t = self.apply([first.tx, first.ty]);
        Self {
            a: self.a * first.a - self.b * first.b,
            b: self.a * first.b + self.b * first.a,
            tx: t[0],
            ty: t[1],
        }
    }

    /// Sum of squared distances between `self(src)` and `dst`.
    pub fn squared_error(&self, src: &LandmarkSet, dst: &LandmarkSet) -> f64 {
        src.points
            .iter()
            .zip(&dst.points)
            .map(|(s, d)| {
                let p = self.apply(*s);
                (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)
            })
            .sum()
    }

    /// Largest point-to-point distance between `self(src)` and `dst`.
    pub fn max_residual(&self, src: &LandmarkSet, dst: &LandmarkSet) -> f64 {
        src.points
            .iter()
            .zip(&dst.points)
            .map(|(s, d)| {
                let p = self.apply(*s);
                (p[0] - d[0]).hypot(p[1] - d[1])
            })
            .fold(0.0, f64::max)
    }
}

/// Closed-form least-squares similarity mapping `src` onto `template`.
///
/// With both sets centered, the optimal linear part `[[a, -b], [b, a]]` is
/// `a = sum(s . d) / sum(|s|^2)` and `b = sum(s x d) / sum(|s|^2)`; the
/// translation then carries the source centroid onto the template centroid.
/// Unlike a general affine fit, this parameterization cannot reflect.
pub fn estimate_similarity_transform(
    src: &LandmarkSet,
    template: &LandmarkSet,
) -> Result<SimilarityTransform> {
    src.check_well_posed("source landmarks")?;
    template.check_well_posed("template landmarks")?;
    let cs = src.centroid();
    let cd = template.centroid();
    let (mut dot, mut cross, mut norm) = (0.0, 0.0, 0.0);
    for (s, d) in src.points.iter().zip(&template.points) {
        let (sx, sy) = (s[0] - cs[0], s[1] - cs[1]);
        let (dx, dy) = (d[0] - cd[0], d[1] - cd[1]);
        dot += sx * dx + sy * dy;
        cross += sx * dy - sy * dx;
        norm += sx * sx + sy * sy;
    }
    let a = dot / norm;
    let b = cross / norm;
    let t = SimilarityTransform { a, b, tx: 0.0, ty: 0.0 }.apply(cs);
    Ok(SimilarityTransform {
        a,
        b,
        tx: cd[0] - t[0],
        ty: cd[1] - t[1],
    })
}
