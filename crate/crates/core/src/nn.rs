//! Small residual convolutional encoder with hand-written backprop.
//!
//! Layout: fixed average-pool stem, 3x3 conv + ReLU, stages of basic residual
//! blocks (the first block of every stage after the first halves the spatial
//! size and uses a 1x1 projection shortcut), then a fully connected layer to
//! the embedding. There is no batch norm; the second conv of every block
//! starts at zero so each block is the identity map at initialization.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{Image, ALIGNED_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    /// Average-pool factor applied to the 112x112 crop before the stem.
    pub input_pool: usize,
    pub stem_width: usize,
    pub stages: Vec<StageSpec>,
    pub embedding_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderSpec {
    /// Reduced-depth default sized for CPU training.
    pub fn desk() -> Self {
        Self {
            input_pool: 4,
            stem_width: 8,
            stages: vec![
                StageSpec { width: 8, blocks: 2 },
                StageSpec { width: 16, blocks: 2 },
                StageSpec { width: 32, blocks: 2 },
            ],
            embedding_dim: 128,
        }
    }

    /// Tiny configuration for smoke runs and tests.
    pub fn toy() -> Self {
        Self {
            input_pool: 4,
            stem_width: 8,
            stages: vec![
                StageSpec { width: 8, blocks: 1 },
                StageSpec { width: 16, blocks: 1 },
                StageSpec { width: 32, blocks: 1 },
            ],
            embedding_dim: 64,
        }
    }

    /// 50-layer layout at full resolution. Far too slow for CPU training.
    pub fn resnet50_layout() -> Self {
        Self {
            input_pool: 1,
            stem_width: 64,
            stages: [(64, 3), (128, 4), (256, 14), (512, 3)]
                .into_iter()
                .map(|(width, blocks)| StageSpec { width, blocks })
                .collect(),
            embedding_dim: 512,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            "resnet50" => Ok(Self::resnet50_layout()),
            other => Err(Error::validation(format!(
                "unknown encoder preset {other:?} (expected desk, toy or resnet50)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_pool == 0 || ALIGNED_SIZE % self.input_pool != 0 {
            return Err(Error::validation(format!(
                "encoder.input_pool {} must divide {ALIGNED_SIZE}",
                self.input_pool
            )));
        }
        if self.stem_width == 0 || self.embedding_dim == 0 {
            return Err(Error::validation("encoder widths must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::validation("encoder needs at least one stage"));
        }
        if self.stages.iter().any(|s| s.width == 0 || s.blocks == 0) {
            return Err(Error::validation(
                "encoder stages need positive width and block count",
            ));
        }
        Ok(())
    }

    pub fn input_side(&self) -> usize {
        ALIGNED_SIZE / self.input_pool
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    hin: usize,
    hout: usize,
    w_off: usize,
    b_off: usize,
}

impl Conv {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, hin: usize, off: &mut usize) -> Self {
        let pad = k / 2;
        let hout = (hin + 2 * pad - k) / stride + 1;
        let w_off = *off;
        *off += cout * cin * k * k;
        let b_off = *off;
        *off += cout;
        Self { cin, cout, k, stride, hin, hout, w_off, b_off }
    }

    fn in_len(&self) -> usize {
        self.cin * self.hin * self.hin
    }

    fn out_len(&self) -> usize {
        self.cout * self.hout * self.hout
    }

    /// Output index range `[lo, hi)` whose input tap `o * stride + t - pad` is in bounds.
    fn valid(&self, t: usize) -> (usize, usize) {
        let pad = (self.k / 2) as isize;
        let (s, t, n) = (self.stride as isize, t as isize, self.hin as isize);
        let lo = if pad > t { (pad - t + s - 1) / s } else { 0 };
        let hi = ((n - 1 + pad - t) / s + 1).min(self.hout as isize);
        (lo.max(0) as usize, hi.max(0) as usize)
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Unfolds the input into a `(cin*k*k) x (hout*hout)` patch matrix.
    fn im2col(&self, x: &[f64]) -> Array2<f64> {
        let pad = self.k / 2;
        let (hi_, ho) = (self.hin, self.hout);
        let mut cols = Array2::zeros((self.kdim(), ho * ho));
        let buf = cols.as_slice_mut().expect("standard layout");
        for ic in 0..self.cin {
            let xin = &x[ic * hi_ * hi_..(ic + 1) * hi_ * hi_];
            for ky in 0..self.k {
                let (y0, y1) = self.valid(ky);
                for kx in 0..self.k {
                    let (x0, x1) = self.valid(kx);
                    let row = ((ic * self.k + ky) * self.k + kx) * ho * ho;
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - pad;
                        let ix0 = x0 * self.stride + kx - pad;
                        let dst = &mut buf[row + oy * ho + x0..row + oy * ho + x1];
                        let src = xin[iy * hi_ + ix0..].iter().step_by(self.stride);
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = *v;
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds a patch-matrix gradient back onto the input gradient.
    fn col2im(&self, cols: &Array2<f64>, gin: &mut [f64]) {
        let pad = self.k / 2;
        let (hi_, ho) = (self.hin, self.hout);
        let buf = cols.as_slice().expect("standard layout");
        for ic in 0..self.cin {
            let gi = &mut gin[ic * hi_ * hi_..(ic + 1) * hi_ * hi_];
            for ky in 0..self.k {
                let (y0, y1) = self.valid(ky);
                for kx in 0..self.k {
                    let (x0, x1) = self.valid(kx);
                    let row = ((ic * self.k + ky) * self.k + kx) * ho * ho;
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * self.stride + ky - pad;
                        let ix0 = x0 * self.stride + kx - pad;
                        let src = &buf[row + oy * ho + x0..row + oy * ho + x1];
                        let dst = gi[iy * hi_ + ix0..].iter_mut().step_by(self.stride);
                        for (d, v) in dst.zip(src) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }

    fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.cout, self.kdim()), &p[self.w_off..self.b_off])
            .expect("consistent shape")
    }

    fn forward(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        let plane = self.hout * self.hout;
        let cols = self.im2col(x);
        let mut o = ArrayViewMut2::from_shape((self.cout, plane), out).expect("consistent shape");
        for (oc, mut row) in o.outer_iter_mut().enumerate() {
            row.fill(p[self.b_off + oc]);
        }
        general_mat_mul(1.0, &self.weights(p), &cols, 1.0, &mut o);
    }

    /// Accumulates parameter gradients and, if requested, the input gradient.
    fn backward(&self, p: &[f64], x: &[f64], gout: &[f64], gp: &mut [f64], gin: Option<&mut [f64]>) {
        let plane = self.hout * self.hout;
        let g = ArrayView2::from_shape((self.cout, plane), gout).expect("consistent shape");
        for (oc, row) in g.outer_iter().enumerate() {
            gp[self.b_off + oc] += row.sum();
        }
        let cols = self.im2col(x);
        let (head, _) = gp.split_at_mut(self.b_off);
        let mut gw = ArrayViewMut2::from_shape((self.cout, self.kdim()), &mut head[self.w_off..])
            .expect("consistent shape");
        general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut gw);
        if let Some(gin) = gin {
            let gcols = self.weights(p).t().dot(&g);
            self.col2im(&gcols, gin);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    proj: Option<Conv>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    inp: usize,
    out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Conv,
    blocks: Vec<Block>,
    fc: Linear,
    len: usize,
}

impl Layout {
    fn new(spec: &EncoderSpec) -> Self {
        let mut off = 0;
        let mut side = spec.input_side();
        let stem = Conv::new(3, spec.stem_width, 3, 1, side, &mut off);
        let mut cin = spec.stem_width;
        let mut blocks = Vec::new();
        for (si, stage) in spec.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let conv1 = Conv::new(cin, stage.width, 3, stride, side, &mut off);
                let conv2 = Conv::new(stage.width, stage.width, 3, 1, conv1.hout, &mut off);
                let proj = (stride != 1 || cin != stage.width)
                    .then(|| Conv::new(cin, stage.width, 1, stride, side, &mut off));
                side = conv1.hout;
                cin = stage.width;
                blocks.push(Block { conv1, conv2, proj });
            }
        }
        let inp = cin * side * side;
        let w_off = off;
        off += inp * spec.embedding_dim;
        let b_off = off;
        off += spec.embedding_dim;
        Self {
            stem,
            blocks,
            fc: Linear { inp, out: spec.embedding_dim, w_off, b_off },
            len: off,
        }
    }
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Pooled input, stem output, then `(h, y)` for every block.
    acts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    layout: Layout,
    pub params: Vec<f64>,
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_mask(g: &mut [f64], act: &[f64]) {
    for (g, a) in g.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

impl Encoder {
    /// He-normal initialization; residual output convs start at zero.
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |c: &Conv, params: &mut [f64]| {
            let std = (2.0 / (c.cin * c.k * c.k) as f64).sqrt();
            let n = Normal::new(0.0, std).expect("valid std");
            for w in &mut params[c.w_off..c.b_off] {
                *w = n.sample(&mut rng);
            }
        };
        he(&layout.stem, &mut params);
        for b in &layout.blocks {
            he(&b.conv1, &mut params);
            if let Some(p) = &b.proj {
                he(p, &mut params);
            }
        }
        let fc = layout.fc;
        let n = Normal::new(0.0, (1.0 / fc.inp as f64).sqrt()).expect("valid std");
        for w in &mut params[fc.w_off..fc.b_off] {
            *w = n.sample(&mut rng);
        }
        Ok(Self { spec, layout, params })
    }

    pub fn from_params(spec: EncoderSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.len {
            return Err(Error::validation(format!(
                "encoder expects {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    /// Normalizes a 112x112 `[0, 1]` crop to `[-1, 1]` and average-pools it
    /// into channel-major layout.
    pub fn prepare_input(&self, image: &Image) -> Result<Vec<f64>> {
        if image.width() != ALIGNED_SIZE || image.height() != ALIGNED_SIZE {
            return Err(Error::validation(format!(
                "encoder input must be {ALIGNED_SIZE}x{ALIGNED_SIZE}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let k = self.spec.input_pool;
        let side = self.spec.input_side();
        let mut out = vec![0.0; 3 * side * side];
        let inv = 1.0 / (k * k) as f64;
        for y in 0..ALIGNED_SIZE {
            for x in 0..ALIGNED_SIZE {
                let base = (y * ALIGNED_SIZE + x) * 3;
                let o = (y / k) * side + x / k;
                for c in 0..3 {
                    out[c * side * side + o] += f64::from(image.data()[base + c]);
                }
            }
        }
        for v in &mut out {
            *v = (*v * inv - 0.5) / 0.5;
        }
        Ok(out)
    }

    fn run(&self, input: Vec<f64>, keep: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
        let p = &self.params;
        let l = &self.layout;
        let mut acts = Vec::new();
        let mut x = vec![0.0; l.stem.out_len()];
        l.stem.forward(p, &input, &mut x);
        relu_inplace(&mut x);
        if keep {
            acts.push(input);
        }
        for b in &l.blocks {
            let mut h = vec![0.0; b.conv1.out_len()];
            b.conv1.forward(p, &x, &mut h);
            relu_inplace(&mut h);
            let mut y = vec![0.0; b.conv2.out_len()];
            b.conv2.forward(p, &h, &mut y);
            match &b.proj {
                Some(pc) => {
                    let mut s = vec![0.0; pc.out_len()];
                    pc.forward(p, &x, &mut s);
                    y.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
                }
                None => y.iter_mut().zip(&x).for_each(|(a, b)| *a += b),
            }
            relu_inplace(&mut y);
            let prev = std::mem::replace(&mut x, y);
            if keep {
                acts.push(prev);
                acts.push(h);
            }
        }
        let fc = l.fc;
        let mut emb: Vec<f64> = p[fc.b_off..fc.b_off + fc.out].to_vec();
        for (j, e) in emb.iter_mut().enumerate() {
            let row = &p[fc.w_off + j * fc.inp..fc.w_off + (j + 1) * fc.inp];
            *e += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        }
        if keep {
            acts.push(x);
        }
        (emb, acts)
    }

    /// Raw (unnormalized) embedding of a prepared input.
    pub fn forward(&self, input: Vec<f64>) -> Vec<f64> {
        self.run(input, false).0
    }

    pub fn forward_train(&self, input: Vec<f64>) -> (Vec<f64>, ForwardCache) {
        let (emb, acts) = self.run(input, true);
        (emb, ForwardCache { acts })
    }

    /// Adds d(loss)/d(params) into `grads` given d(loss)/d(embedding).
    pub fn backward(&self, cache: &ForwardCache, grad_emb: &[f64], grads: &mut [f64]) {
        let p = &self.params;
        let l = &self.layout;
        let acts = &cache.acts;
        // acts = [input, x_0, h_0, x_1, h_1, ..., x_n]; x_0 is the stem output.
        let nb = l.blocks.len();
        let fc = l.fc;
        let last = &acts[acts.len() - 1];
        let mut g = vec![0.0; fc.inp];
        for (j, ge) in grad_emb.iter().enumerate() {
            grads[fc.b_off + j] += ge;
            let wrow = &p[fc.w_off + j * fc.inp..fc.w_off + (j + 1) * fc.inp];
            let grow = &mut grads[fc.w_off + j * fc.inp..fc.w_off + (j + 1) * fc.inp];
            for ((gw, x), (gx, w)) in grow.iter_mut().zip(last).zip(g.iter_mut().zip(wrow)) {
                *gw += ge * x;
                *gx += ge * w;
            }
        }
        for (bi, b) in l.blocks.iter().enumerate().rev() {
            let x = &acts[1 + 2 * bi];
            let h = &acts[2 + 2 * bi];
            let y = if bi + 1 == nb { last } else { &acts[1 + 2 * (bi + 1)] };
            relu_mask(&mut g, y);
            let mut gh = vec![0.0; b.conv2.in_len()];
            b.conv2.backward(p, h, &g, grads, Some(&mut gh));
            relu_mask(&mut gh, h);
            let mut gx = vec![0.0; b.conv1.in_len()];
            b.conv1.backward(p, x, &gh, grads, Some(&mut gx));
            match &b.proj {
                Some(pc) => pc.backward(p, x, &g, grads, Some(&mut gx)),
                None => gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            }
            g = gx;
        }
        relu_mask(&mut g, &acts[1]);
        l.stem.backward(p, &acts[0], &g, grads, None);
    }

    /// Raw embedding of a 112x112 `[0, 1]` crop.
    pub fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(self.prepare_input(image)?))
    }
}
