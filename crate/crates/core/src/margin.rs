//! Additive angular margin (ArcFace) classification head.
//!
//! With unit embeddings `e_i` and unit class weights `w_j`, the logit matrix
//! is `s * cos(theta_ij)` except at the target class, where the angle is
//! penalized to `theta + m`. When `theta + m` would pass `pi` the target logit
//! falls back to `s * (cos(theta) - m * sin(m))`, which keeps it monotone in
//! `theta`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;
/// `sin(theta)` is floored at the value it takes for `|cos| = 1 - COS_EPS`,
/// so the margin derivative stays finite at `theta = 0` and `theta = pi`.
pub const COS_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
    /// Apply the margin only when `cos(theta) > 0`, with no fallback branch.
    pub easy_margin: bool,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            scale: 64.0,
            easy_margin: false,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin < std::f64::consts::PI) {
            return Err(Error::validation(format!(
                "margin.margin {} outside [0, pi)",
                self.margin
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::validation(format!(
                "margin.scale {} must be positive",
                self.scale
            )));
        }
        Ok(())
    }

    /// Target-class cosine after the margin and its derivative in `cos`.
    #[inline]
    fn target(&self, c: f64) -> (f64, f64) {
        let (cos_m, sin_m) = (self.margin.cos(), self.margin.sin());
        let with_margin = |c: f64| {
            let sin_t = (1.0 - c * c).max(0.0).sqrt();
            let floor = (1.0 - (1.0 - COS_EPS).powi(2)).sqrt();
            (c * cos_m - sin_t * sin_m, cos_m + c * sin_m / sin_t.max(floor))
        };
        if self.easy_margin {
            if c > 0.0 {
                with_margin(c)
            } else {
                (c, 1.0)
            }
        } else if c >= -cos_m {
            // theta <= pi - m
            with_margin(c)
        } else {
            (c - self.margin * sin_m, 1.0)
        }
    }
}

fn check_inputs(emb: &ArrayView2<f64>, w: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if emb.ncols() != w.ncols() {
        return Err(Error::validation(format!(
            "embedding dim {} != weight dim {}",
            emb.ncols(),
            w.ncols()
        )));
    }
    if labels.len() != emb.nrows() {
        return Err(Error::validation(format!(
            "{} labels for {} embeddings",
            labels.len(),
            emb.nrows()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l >= w.nrows()) {
        return Err(Error::validation(format!(
            "label {l} out of range for {} classes",
            w.nrows()
        )));
    }
    Ok(())
}

fn check_unit_rows(name: &str, m: &ArrayView2<f64>) -> Result<()> {
    for (i, row) in m.outer_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::validation(format!(
                "{name} row {i} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Row-wise L2 normalization; returns the unit rows and the original norms.
pub fn l2_normalize_rows(x: &ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let mut out = x.to_owned();
    for (mut row, n) in out.outer_iter_mut().zip(norms.iter()) {
        row /= *n;
    }
    (out, norms)
}

/// Pulls a gradient on unit rows back through [`l2_normalize_rows`]:
/// `dx = (g - u (u . g)) / |x|`.
pub fn normalize_rows_backward(
    unit: &ArrayView2<f64>,
    norms: &Array1<f64>,
    grad_unit: &ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = grad_unit.to_owned();
    for ((mut g, u), n) in out.outer_iter_mut().zip(unit.outer_iter()).zip(norms.iter()) {
        let proj = u.dot(&g);
        g.scaled_add(-proj, &u);
        g /= *n;
    }
    out
}

struct Forward {
    logits: Array2<f64>,
    /// d logit / d cos, zero where the cosine was clamped.
    dlogit_dcos: Array2<f64>,
}

fn forward(emb: &ArrayView2<f64>, w: &ArrayView2<f64>, labels: &[usize], cfg: &MarginConfig) -> Forward {
    let cos = emb.dot(&w.t());
    let mut logits = Array2::zeros(cos.raw_dim());
    let mut dlogit = Array2::zeros(cos.raw_dim());
    for ((i, j), c) in cos.indexed_iter() {
        let clamped = c.clamp(-1.0, 1.0);
        let live = if *c == clamped { 1.0 } else { 0.0 };
        let (v, d) = if j == labels[i] {
            cfg.target(clamped)
        } else {
            (clamped, 1.0)
        };
        logits[(i, j)] = cfg.scale * v;
        dlogit[(i, j)] = cfg.scale * d * live;
    }
    Forward {
        logits,
        dlogit_dcos: dlogit,
    }
}

/// `B x C` logits for unit-norm embeddings `emb` (`B x D`) and class weights `w` (`C x D`).
pub fn arcface_logits(
    emb: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_inputs(emb, w, labels)?;
    check_unit_rows("embedding", emb)?;
    check_unit_rows("class weight", w)?;
    Ok(forward(emb, w, labels, cfg).logits)
}

/// Row-wise `log(sum(exp(z)))` with max subtraction.
fn logsumexp(row: ndarray::ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the margin logits.
pub fn arcface_loss(
    emb: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<f64> {
    let logits = arcface_logits(emb, w, labels, cfg)?;
    Ok(cross_entropy(&logits, labels))
}

fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let b = logits.nrows().max(1) as f64;
    logits
        .outer_iter()
        .zip(labels)
        .map(|(row, y)| logsumexp(row) - row[*y])
        .sum::<f64>()
        / b
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub logits: Array2<f64>,
    /// Gradient with respect to the unit embeddings.
    pub grad_emb: Array2<f64>,
    /// Gradient with respect to the unit class weights.
    pub grad_w: Array2<f64>,
}

fn loss_grad_unchecked(
    emb: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> LossGrad {
    let fwd = forward(emb, w, labels, cfg);
    let loss = cross_entropy(&fwd.logits, labels);
    let b = emb.nrows().max(1) as f64;
    let mut dcos = Array2::zeros(fwd.logits.raw_dim());
    for (i, row) in fwd.logits.outer_iter().enumerate() {
        let lse = logsumexp(row);
        for (j, z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let g = (p - if j == labels[i] { 1.0 } else { 0.0 }) / b;
            dcos[(i, j)] = g * fwd.dlogit_dcos[(i, j)];
        }
    }
    LossGrad {
        loss,
        grad_emb: dcos.dot(w),
        grad_w: dcos.t().dot(emb),
        logits: fwd.logits,
    }
}

/// Loss and gradients with respect to the unit embeddings and class weights.
pub fn arcface_loss_grad(
    emb: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<LossGrad> {
    cfg.validate()?;
    check_inputs(emb, w, labels)?;
    check_unit_rows("embedding", emb)?;
    check_unit_rows("class weight", w)?;
    Ok(loss_grad_unchecked(emb, w, labels, cfg))
}

/// Trainable head: unnormalized class weights, normalized on every use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcFaceHead {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
}

impl ArcFaceHead {
    pub fn new(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        Self {
            classes,
            dim,
            weights: (0..classes * dim).map(|_| normal.sample(&mut rng)).collect(),
        }
    }

    pub fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.classes, self.dim), &self.weights).expect("consistent shape")
    }

    /// Loss on raw (unnormalized) embeddings, with gradients for the raw
    /// embeddings and the raw weight matrix.
    pub fn loss_and_grad(
        &self,
        raw_emb: &ArrayView2<f64>,
        labels: &[usize],
        cfg: &MarginConfig,
    ) -> Result<HeadStep> {
        let w_raw = self.weight_view();
        check_inputs(raw_emb, &w_raw, labels)?;
        let (e, en) = l2_normalize_rows(raw_emb);
        let (w, wn) = l2_normalize_rows(&w_raw);
        let g = loss_grad_unchecked(&e.view(), &w.view(), labels, cfg);
        // Accuracy is the argmax of the plain cosines, without the margin.
        let cos = e.dot(&w.t());
        let correct = cos
            .outer_iter()
            .zip(labels)
            .filter(|(row, y)| argmax(row.as_slice().unwrap_or(&row.to_vec())) == **y)
            .count();
        Ok(HeadStep {
            loss: g.loss,
            correct,
            max_abs_logit: g.logits.iter().fold(0.0, |a, b| a.max(b.abs())),
            grad_emb: normalize_rows_backward(&e.view(), &en, &g.grad_emb.view()),
            grad_w: normalize_rows_backward(&w.view(), &wn, &g.grad_w.view()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HeadStep {
    pub loss: f64,
    pub correct: usize,
    pub max_abs_logit: f64,
    pub grad_emb: Array2<f64>,
    pub grad_w: Array2<f64>,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_unit(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let m = Array2::from_shape_fn((rows, dim), |_| rng.random_range(-1.0..1.0));
        l2_normalize_rows(&m.view()).0
    }

    #[test]
    fn accuracy_ignores_the_margin() {
        // Target cosine 0.6 beats 0.5, but not once the margin is applied.
        let head = ArcFaceHead { classes: 2, dim: 3, weights: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };
        let emb = array![[0.6, 0.5, 0.39f64.sqrt()], [0.6, 0.8, 0.0]];
        let cfg = MarginConfig { margin: 0.5, scale: 64.0, easy_margin: false };
        let step = head.loss_and_grad(&emb.view(), &[0, 0], &cfg).unwrap();
        assert_eq!(step.correct, 1);
        let z = arcface_logits(&l2_normalize_rows(&emb.view()).0.view(), &head.weight_view(), &[0, 0], &cfg).unwrap();
        assert!(z[[0, 0]] < z[[0, 1]]);
    }

    #[test]
    fn margin_free_logits_are_cosines() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_unit(8, 16, &mut rng);
        let w = random_unit(10, 16, &mut rng);
        let labels: Vec<usize> = (0..8).map(|i| i % 10).collect();
        let cfg = MarginConfig { margin: 0.0, scale: 1.0, easy_margin: false };
        let z = arcface_logits(&e.view(), &w.view(), &labels, &cfg).unwrap();
        let cos = e.dot(&w.t());
        for (a, b) in z.iter().zip(cos.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn target_at_zero_angle() {
        let e = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let z = arcface_logits(&e.view(), &w.view(), &[0], &MarginConfig::default()).unwrap();
        // 64 cos(0.5)
        assert!((z[(0, 0)] - 64.0 * 0.5f64.cos()).abs() < 1e-12 && (z[(0, 0)] - 56.1652).abs() < 1e-4, "{}", z[(0, 0)]);
        assert_eq!(z[(0, 1)], 0.0);
    }

    #[test]
    fn target_at_sixty_degrees() {
        let t = std::f64::consts::FRAC_PI_3;
        let e = array![[1.0, 0.0]];
        let w = array![[t.cos(), t.sin()], [t.cos(), -t.sin()]];
        let z = arcface_logits(&e.view(), &w.view(), &[0], &MarginConfig::default()).unwrap();
        let expected = 64.0 * (t + 0.5).cos();
        assert!((z[(0, 0)] - expected).abs() < 1e-9);
        assert!((z[(0, 0)] - 1.510).abs() < 1e-3);
        assert!((z[(0, 1)] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn fallback_branch_past_pi_minus_m() {
        // theta = 170 degrees > pi - 0.5
        let t = 170f64.to_radians();
        let e = array![[1.0, 0.0]];
        let w = array![[t.cos(), t.sin()]];
        let cfg = MarginConfig::default();
        let z = arcface_logits(&e.view(), &w.view(), &[0], &cfg).unwrap();
        let expected = 64.0 * (t.cos() - 0.5 * 0.5f64.sin());
        assert!((z[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let e = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0]];
        let cfg = MarginConfig::default();
        assert!(arcface_logits(&e.view(), &w.view(), &[1], &cfg).is_err());
        let e2 = array![[2.0, 0.0]];
        assert!(arcface_logits(&e2.view(), &w.view(), &[0], &cfg).is_err());
        let bad = MarginConfig { margin: 4.0, ..cfg };
        assert!(arcface_logits(&e.view(), &w.view(), &[0], &bad).is_err());
    }

    #[test]
    fn saturated_target_gives_near_zero_loss() {
        let e = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0], [-1.0, 0.0]];
        let loss = arcface_loss(&e.view(), &w.view(), &[0], &MarginConfig::default()).unwrap();
        assert!(loss < 1e-40, "{loss}");
    }

    #[test]
    fn normalization_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
        let g = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let f = |x: &Array2<f64>| (l2_normalize_rows(&x.view()).0 * &g).sum();
        let (u, n) = l2_normalize_rows(&x.view());
        let analytic = normalize_rows_backward(&u.view(), &n, &g.view());
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (2, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn margin_only_touches_target_entries(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_unit(4, 6, &mut rng);
            let w = random_unit(5, 6, &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let z0 = arcface_logits(&e.view(), &w.view(), &labels, &MarginConfig { margin: 0.0, ..MarginConfig::default() }).unwrap();
            let z5 = arcface_logits(&e.view(), &w.view(), &labels, &MarginConfig::default()).unwrap();
            for ((i, j), a) in z0.indexed_iter() {
                if labels[i] != j {
                    prop_assert_eq!(a.to_bits(), z5[(i, j)].to_bits());
                }
            }
        }

        #[test]
        fn argmax_invariant_to_scale(seed in 0u64..1000, s in 0.5f64..128.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_unit(3, 8, &mut rng);
            let w = random_unit(7, 8, &mut rng);
            let labels = vec![0, 3, 6];
            let a = arcface_logits(&e.view(), &w.view(), &labels, &MarginConfig { scale: 1.0, ..MarginConfig::default() }).unwrap();
            let b = arcface_logits(&e.view(), &w.view(), &labels, &MarginConfig { scale: s, ..MarginConfig::default() }).unwrap();
            for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
                prop_assert_eq!(argmax(&ra.to_vec()), argmax(&rb.to_vec()));
            }
        }

        #[test]
        fn loss_nondecreasing_in_margin(seed in 0u64..1000, m1 in 0.0f64..0.6, dm in 0.0f64..0.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_unit(1, 4, &mut rng);
            let w = random_unit(3, 4, &mut rng);
            let theta = e.row(0).dot(&w.row(1)).clamp(-1.0, 1.0).acos();
            let m2 = m1 + dm;
            prop_assume!(theta < std::f64::consts::PI - m2);
            let l1 = arcface_loss(&e.view(), &w.view(), &[1], &MarginConfig { margin: m1, scale: 16.0, easy_margin: false }).unwrap();
            let l2 = arcface_loss(&e.view(), &w.view(), &[1], &MarginConfig { margin: m2, scale: 16.0, easy_margin: false }).unwrap();
            prop_assert!(l2 >= l1 - 1e-12);
        }
    }
}
