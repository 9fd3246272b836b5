//! Procedural face-like renderer standing in for the external 3D renderer,
//! plus helpers that turn a manifest into aligned training and evaluation
//! sets.
//!
//! Everything an identity looks like is a pure function of its id and traits;
//! everything else (pose, lighting, expression, accessories) comes from the
//! scene record. Drawing happens in a face frame where the eye distance is
//! about one unit, with +y pointing down.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{
    estimate_similarity_transform, warp_and_crop, AugmentationConfig, CsvLandmarks, Image, LandmarkSet, DEFAULT_TEMPLATE,
};
use crate::data::InMemoryDataset;
use crate::margin::MarginConfig;
use crate::nn::EncoderSpec;
use crate::trainer::TrainConfig;
use crate::error::{Error, Result};
use crate::sampler::{
    build_manifest, AccessoryPolicy, AxisMixture, DatasetManifest, Expression, ExpressionPreset, HdriPeriod, PoseDistribution,
    SamplerConfig, SceneConfig,
};
use crate::seed;
use crate::verifier::{image_ref, Embedder, EmbeddingSource, VerificationPair};

const SALT: u64 = 0x7a6f_7966_6163_6531;

fn unit(seed: u64, tag: &str) -> f64 {
    (seed::derive(seed, tag) >> 11) as f64 / (1u64 << 53) as f64
}

fn span(seed: u64, tag: &str, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(seed, tag)
}

type Rgb = [f64; 3];

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn scale(c: Rgb, k: f64) -> Rgb {
    [c[0] * k, c[1] * k, c[2] * k]
}

fn skin_tone(label: &str) -> Rgb {
    match label {
        "north_european" => [0.93, 0.78, 0.68],
        "african" => [0.42, 0.28, 0.20],
        "hispanic" => [0.78, 0.60, 0.46],
        "mediterranean" => [0.82, 0.65, 0.50],
        "southeast_asian" => [0.86, 0.70, 0.54],
        "south_asian" => [0.62, 0.45, 0.33],
        other => mix([0.93, 0.78, 0.68], [0.42, 0.28, 0.20], unit(seed::fnv1a64(other), "tone")),
    }
}

fn iris_color(name: &str) -> Rgb {
    match name {
        "brown" => [0.40, 0.25, 0.12],
        "dark_brown" => [0.22, 0.13, 0.07],
        "hazel" => [0.50, 0.40, 0.18],
        "green" => [0.30, 0.50, 0.25],
        "blue" => [0.30, 0.50, 0.80],
        "gray" => [0.55, 0.58, 0.62],
        "amber" => [0.70, 0.50, 0.15],
        other => {
            let s = seed::fnv1a64(other);
            [unit(s, "r"), unit(s, "g"), unit(s, "b")]
        }
    }
}

/// Facial-motion parameters driven by the expression record.
#[derive(Debug, Clone, Copy, Default)]
struct Motion {
    smile: f64,
    open: f64,
    brow_raise: f64,
    squint: f64,
    widen: f64,
}

impl Motion {
    fn add(self, o: Motion) -> Motion {
        Motion {
            smile: self.smile + o.smile,
            open: self.open + o.open,
            brow_raise: self.brow_raise + o.brow_raise,
            squint: self.squint + o.squint,
            widen: self.widen + o.widen,
        }
    }

    fn of(expr: &Expression, intensity: f64) -> Motion {
        let m = |smile, open, brow_raise, squint, widen| Motion { smile, open, brow_raise, squint, widen };
        let base = match expr {
            Expression::Preset(p) => match p {
                ExpressionPreset::Neutral => Motion::default(),
                ExpressionPreset::Happiness => m(0.9, 0.15, 0.05, 0.3, 0.15),
                ExpressionPreset::Sadness => m(-0.6, 0.0, 0.3, 0.1, -0.05),
                ExpressionPreset::Surprise => m(0.0, 0.8, 0.8, -0.4, -0.1),
                ExpressionPreset::Anger => m(-0.3, 0.05, -0.6, 0.4, 0.0),
                ExpressionPreset::Fear => m(-0.2, 0.45, 0.6, -0.3, 0.1),
                ExpressionPreset::Contempt => m(0.3, 0.0, -0.1, 0.2, 0.0),
                ExpressionPreset::Disgust => m(-0.5, 0.1, -0.4, 0.5, -0.05),
                ExpressionPreset::MouthOpen => m(0.0, 0.9, 0.1, 0.0, 0.0),
            },
            Expression::ActionUnits { eye, mouth } => {
                let e = match eye.as_deref() {
                    Some("AU05") => m(0.0, 0.0, 0.2, -0.5, 0.0),
                    Some("AU07") => m(0.0, 0.0, 0.0, 0.5, 0.0),
                    Some("AU43") => m(0.0, 0.0, -0.1, 1.0, 0.0),
                    Some("AU45") => m(0.0, 0.0, 0.0, 0.9, 0.0),
                    Some("AU46") => m(0.0, 0.0, -0.1, 0.7, 0.0),
                    _ => Motion::default(),
                };
                let mo = match mouth.as_deref() {
                    Some("AU12") => m(0.9, 0.0, 0.0, 0.1, 0.15),
                    Some("AU15") => m(-0.7, 0.0, 0.0, 0.0, 0.0),
                    Some("AU18") => m(0.0, 0.1, 0.0, 0.0, -0.35),
                    Some("AU20") => m(-0.1, 0.05, 0.0, 0.0, 0.3),
                    Some("AU25") => m(0.0, 0.35, 0.0, 0.0, 0.0),
                    Some("AU26") => m(0.0, 0.85, 0.0, 0.0, -0.05),
                    _ => Motion::default(),
                };
                e.add(mo)
            }
        };
        Motion {
            smile: base.smile * intensity,
            open: base.open * intensity,
            brow_raise: base.brow_raise * intensity,
            squint: base.squint * intensity,
            widen: base.widen * intensity,
        }
    }
}

#[derive(Debug, Clone)]
struct Brow {
    /// Posed inner and outer x.
    x0: f64,
    x1: f64,
    y_inner: f64,
    y_outer: f64,
    arch: f64,
    thick: f64,
}

impl Brow {
    fn sd(&self, q: [f64; 2]) -> f64 {
        let (lo, hi) = if self.x0 < self.x1 { (self.x0, self.x1) } else { (self.x1, self.x0) };
        let t = ((q[0] - self.x0) / (self.x1 - self.x0)).clamp(0.0, 1.0);
        let y = self.y_inner + (self.y_outer - self.y_inner) * t - self.arch * 4.0 * t * (1.0 - t);
        let half = 0.5 * self.thick * (1.0 - 0.45 * t);
        let dx = if q[0] < lo { lo - q[0] } else if q[0] > hi { q[0] - hi } else { 0.0 };
        let dy = (q[1] - y).abs() - half;
        if dx == 0.0 {
            dy
        } else {
            dy.max(0.0).hypot(dx)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    c: [f64; 2],
    r: [f64; 2],
}

impl Ellipse {
    fn k(&self, q: [f64; 2]) -> f64 {
        ((q[0] - self.c[0]) / self.r[0]).hypot((q[1] - self.c[1]) / self.r[1])
    }

    fn sd(&self, q: [f64; 2]) -> f64 {
        (self.k(q) - 1.0) * self.r[0].min(self.r[1])
    }
}

struct Mark {
    shape: Ellipse,
    color: Rgb,
    alpha: f64,
}

/// Fully posed scene in face units.
struct Face {
    skin: Rgb,
    hair: Rgb,
    lip: Rgb,
    iris: Rgb,
    head: Ellipse,
    hair_volume: Ellipse,
    hairline: f64,
    eyes: [[f64; 2]; 2],
    eye_r: [f64; 2],
    eye_open: f64,
    iris_off: [f64; 2],
    iris_freq: f64,
    iris_phase: f64,
    brows: [Brow; 2],
    brow_color: Rgb,
    nose_tip: [f64; 2],
    nose_w: f64,
    nose_len: f64,
    mouth: [f64; 2],
    mouth_half: f64,
    lip_th: f64,
    smile: f64,
    open: f64,
    marks: Vec<Mark>,
    beard: bool,
    glasses: bool,
    hat: Option<Rgb>,
    makeup: bool,
    occluder: Option<Ellipse>,
    light: [f64; 3],
    ambient: f64,
    diffuse: f64,
    tint: Rgb,
    sky: (Rgb, Rgb, Rgb),
    sun: [f64; 2],
}

/// How a scene's pose maps into the picture.
struct Placement {
    center: [f64; 2],
    unit: f64,
    roll: f64,
}

impl Placement {
    fn to_pixel(&self, q: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.roll.sin_cos();
        [
            self.center[0] + self.unit * (c * q[0] - s * q[1]),
            self.center[1] + self.unit * (s * q[0] + c * q[1]),
        ]
    }

    fn to_face(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.roll.sin_cos();
        let (dx, dy) = ((p[0] - self.center[0]) / self.unit, (p[1] - self.center[1]) / self.unit);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

fn build(scene: &SceneConfig, size: usize) -> (Face, Placement, LandmarkSet) {
    let id = seed::derive_index(seed::derive(SALT, "identity"), u64::from(scene.identity_id));
    let brow_seed = seed::derive_index(seed::derive(SALT, "eyebrow"), u64::from(scene.identity.eyebrow_style));
    let iris_seed = seed::derive_index(seed::derive(SALT, "iris"), u64::from(scene.identity.iris_texture));
    let scene_seed = scene.rng_seed;

    let yaw = (scene.head_pose.yaw - scene.camera_pose.yaw).clamp(-80.0, 80.0).to_radians();
    let pitch = (scene.head_pose.pitch - scene.camera_pose.pitch).clamp(-60.0, 60.0).to_radians();
    let roll = (scene.head_pose.roll + scene.camera_pose.roll).to_radians();
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let proj = |x: f64, y: f64, z: f64| [x * cy + z * sy, y * cp - z * sp];

    let intensity = scene.expression_intensity.unwrap_or(1.0);
    let motion = Motion::of(&scene.expression, intensity);

    // Identity geometry.
    let eye_half = span(id, "eye-half", 0.44, 0.56);
    let eye_r = span(id, "eye-r", 0.11, 0.15);
    let nose_len = span(id, "nose-len", 0.42, 0.62);
    let nose_w = span(id, "nose-w", 0.12, 0.22);
    let mouth_y = span(id, "mouth-y", 0.92, 1.12);
    let mouth_half = span(id, "mouth-half", 0.27, 0.42) * (1.0 + 0.5 * motion.widen + 0.15 * motion.smile.max(0.0));
    let lip_th = span(id, "lip", 0.05, 0.10);
    let head_r = [span(id, "head-rx", 0.95, 1.22), span(id, "head-ry", 1.25, 1.55)];
    let head_cy = span(id, "head-cy", 0.22, 0.38);
    let hairline = span(id, "hairline", -0.62, -0.3);

    let mut skin = skin_tone(&scene.identity.ethnicity);
    let bright = span(id, "skin-bright", 0.88, 1.12);
    let warm = span(id, "skin-warm", -0.04, 0.04);
    skin = [skin[0] * bright + warm, skin[1] * bright, skin[2] * bright - warm];

    let d = scene.hair_color.clone();
    let melanin = (span(id, "melanin", 0.0, 1.0) * d.melanin).clamp(0.0, 1.0);
    let mut hair = mix([0.86, 0.72, 0.45], [0.07, 0.05, 0.04], melanin);
    hair = mix(hair, [0.85, 0.85, 0.85], (0.25 * (d.whiteness - 1.0) + span(id, "gray", 0.0, 0.1)).clamp(0.0, 1.0));
    hair[0] += 0.25 * (d.redness - 1.0) + span(id, "red", 0.0, 0.12);
    hair = scale(hair, 1.0 + 0.1 * (d.roughness - 1.0));

    let lip = mix(skin, [0.65, 0.25, 0.28], span(id, "lip-tone", 0.35, 0.6));

    // Eyebrow style.
    let brow_len = span(brow_seed, "len", 0.30, 0.50);
    let brow_thick = span(brow_seed, "thick", 0.05, 0.15);
    let brow_slope = span(brow_seed, "slope", -0.18, 0.18);
    let brow_arch = span(brow_seed, "arch", 0.0, 0.12);
    let brow_gap = span(brow_seed, "gap", 0.2, 0.34) + 0.12 * motion.brow_raise;
    let brow_dark = span(brow_seed, "dark", 0.25, 0.9);
    let brow_inner = span(brow_seed, "inner", 0.08, 0.22);

    let mut eyes = [[0.0; 2]; 2];
    let mut brows = Vec::new();
    for (k, side) in [-1.0, 1.0].into_iter().enumerate() {
        eyes[k] = proj(side * eye_half, 0.0, 0.35);
        let xi = side * brow_inner;
        let xo = side * (brow_inner + brow_len);
        let yi = -brow_gap - eye_r * 0.5;
        let yo = yi - brow_slope * brow_len;
        let pi_ = proj(xi, yi, 0.42);
        let po = proj(xo, yo, 0.38);
        brows.push(Brow {
            x0: pi_[0],
            x1: po[0],
            y_inner: pi_[1] + 0.08 * (motion.squint.max(0.0) - motion.brow_raise.max(0.0)) * 0.5,
            y_outer: po[1],
            arch: brow_arch,
            thick: brow_thick,
        });
    }
    let brows = [brows[0].clone(), brows[1].clone()];

    let iris_off = [
        (scene.gaze.horizontal / scene.gaze.distance).clamp(-1.0, 1.0) * 0.4 * eye_r - sy * 0.3 * eye_r,
        ((0.925 - scene.gaze.vertical) / scene.gaze.distance).clamp(-1.0, 1.0) * 0.3 * eye_r,
    ];

    let mut marks = Vec::new();
    for i in 0..4 {
        let tag = |t: &str| format!("mark{i}-{t}");
        let ang = span(id, &tag("ang"), 0.0, 2.0 * PI);
        let rad = span(id, &tag("rad"), 0.3, 0.85);
        let x = ang.cos() * rad * head_r[0];
        let y = head_cy + ang.sin() * rad * head_r[1] * 0.8;
        let z = (1.0 - (x / head_r[0]).powi(2) - ((y - head_cy) / head_r[1]).powi(2)).max(0.0).sqrt() * 0.6;
        let r = span(id, &tag("r"), 0.14, 0.30);
        let dark = unit(id, &tag("dark")) < 0.6;
        marks.push(Mark {
            shape: Ellipse { c: proj(x, y, z), r: [r * (0.6 + 0.4 * cy), r] },
            color: if dark { scale(skin, 0.62) } else { mix(skin, [1.0, 0.95, 0.9], 0.45) },
            alpha: span(id, &tag("alpha"), 0.45, 0.8),
        });
    }

    let head_c = proj(0.0, head_cy, -0.3);
    let head = Ellipse { c: head_c, r: [head_r[0] * (0.88 + 0.12 * cy), head_r[1]] };
    let hair_volume = Ellipse {
        c: [head_c[0], head_c[1] - 0.06],
        r: [head.r[0] * span(id, "hair-vol-x", 1.03, 1.14), head.r[1] * span(id, "hair-vol-y", 1.02, 1.1)],
    };

    let hat = scene.accessories.hat.then(|| {
        let h = seed::derive(scene_seed, "hat");
        [span(h, "r", 0.1, 0.9), span(h, "g", 0.1, 0.9), span(h, "b", 0.1, 0.9)]
    });
    let occluder = scene.accessories.occlusion.then(|| {
        let o = seed::derive(scene_seed, "occluder");
        let side = if unit(o, "side") < 0.5 { -1.0 } else { 1.0 };
        Ellipse {
            c: proj(side * span(o, "x", 0.2, 0.7), span(o, "y", 0.6, 1.2), 0.6),
            r: [span(o, "rx", 0.3, 0.5), span(o, "ry", 0.25, 0.4)],
        }
    });

    let theta = scene.hdri_rotation.to_radians();
    let (ambient, diffuse, tint, sky) = match scene.hdri_period {
        HdriPeriod::Daytime => (0.6, 0.5, [1.0, 1.0, 1.0], ([0.55, 0.70, 0.90], [0.75, 0.78, 0.72], [1.0, 1.0, 0.9])),
        HdriPeriod::Evening => (0.5, 0.45, [1.08, 0.9, 0.74], ([0.85, 0.55, 0.35], [0.45, 0.30, 0.30], [1.0, 0.7, 0.4])),
        HdriPeriod::Night => (0.45, 0.3, [0.78, 0.84, 1.0], ([0.05, 0.07, 0.15], [0.12, 0.12, 0.15], [0.5, 0.6, 0.9])),
    };
    let l = [theta.sin() * 0.8, -0.35, theta.cos() * 0.8 + 0.3];
    let ln = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();

    let nose_tip = proj(0.0, nose_len, 0.75);
    let mouth = proj(0.0, mouth_y, 0.45);
    let face = Face {
        skin,
        hair,
        lip,
        iris: iris_color(&scene.identity.eye_color),
        head,
        hair_volume,
        hairline: proj(0.0, hairline, 0.3)[1],
        eyes,
        eye_r: [eye_r * (0.55 + 0.45 * cy), eye_r],
        eye_open: (1.0 - motion.squint).clamp(0.05, 1.4),
        iris_off,
        iris_freq: (3 + (iris_seed % 9)) as f64,
        iris_phase: span(iris_seed, "phase", 0.0, 2.0 * PI),
        brows,
        brow_color: mix(hair, [0.05, 0.04, 0.03], brow_dark),
        nose_tip,
        nose_w: nose_w * (0.6 + 0.4 * cy),
        nose_len,
        mouth,
        mouth_half: mouth_half * (0.6 + 0.4 * cy),
        lip_th,
        smile: motion.smile,
        open: motion.open.clamp(0.0, 1.0),
        marks,
        beard: scene.accessories.beard,
        glasses: scene.accessories.glasses,
        hat,
        makeup: scene.accessories.makeup,
        occluder,
        light: [l[0] / ln, l[1] / ln, l[2] / ln],
        ambient,
        diffuse,
        tint,
        sky,
        sun: [0.5 + 0.45 * theta.sin(), 0.22 + 0.1 * theta.cos()],
    };

    let s = size as f64;
    let placement = Placement {
        center: [
            s * (0.5 + 0.05 * (scene.camera_pose.yaw / 45.0).clamp(-1.0, 1.0)),
            s * (0.46 + 0.05 * (scene.camera_pose.pitch / 30.0).clamp(-1.0, 1.0)),
        ],
        unit: s * 0.165,
        roll,
    };
    let corners = [
        [mouth[0] - face.mouth_half, mouth[1] - 0.1 * face.smile],
        [mouth[0] + face.mouth_half, mouth[1] - 0.1 * face.smile],
    ];
    let pts = [eyes[0], eyes[1], nose_tip, corners[0], corners[1]];
    let landmarks = LandmarkSet::new(pts.map(|q| placement.to_pixel(q)));
    (face, placement, landmarks)
}

fn cover(sd: f64, aa: f64) -> f64 {
    (0.5 - sd / aa).clamp(0.0, 1.0)
}

impl Face {
    fn background(&self, uv: [f64; 2]) -> Rgb {
        let (top, bottom, glow) = self.sky;
        let base = mix(top, bottom, uv[1].clamp(0.0, 1.0));
        let d2 = (uv[0] - self.sun[0]).powi(2) + (uv[1] - self.sun[1]).powi(2);
        mix(base, glow, 0.7 * (-d2 / 0.02).exp())
    }

    fn shade(&self, q: [f64; 2]) -> f64 {
        let nx = (q[0] - self.head.c[0]) / self.head.r[0];
        let ny = (q[1] - self.head.c[1]) / self.head.r[1];
        let nz = (1.0 - nx * nx - ny * ny).max(0.0).sqrt();
        let dot = nx * self.light[0] + ny * self.light[1] + nz * self.light[2];
        self.ambient + self.diffuse * dot.max(0.0)
    }

    fn color(&self, q: [f64; 2], uv: [f64; 2], aa: f64) -> Rgb {
        let mut c = self.background(uv);
        let lit = |col: Rgb, k: f64| -> Rgb {
            [col[0] * k * self.tint[0], col[1] * k * self.tint[1], col[2] * k * self.tint[2]]
        };
        let shade = self.shade(q);

        let hv = cover(self.hair_volume.sd(q), aa);
        if hv > 0.0 && q[1] < self.head.c[1] {
            c = mix(c, lit(self.hair, shade.max(0.5)), hv);
        }
        let head = cover(self.head.sd(q), aa);
        if head <= 0.0 {
            return c;
        }
        let mut f = self.skin;
        for m in &self.marks {
            let a = cover(m.shape.sd(q), aa) * m.alpha;
            if a > 0.0 {
                f = mix(f, m.color, a);
            }
        }
        // Hair cap above the hairline, curving down at the temples.
        let dx = (q[0] - self.head.c[0]) / self.head.r[0];
        let line = self.hairline + 0.35 * dx * dx;
        f = mix(f, self.hair, cover(q[1] - line, aa));
        if self.beard {
            let top = self.mouth[1] - 0.16 + 0.1 * dx * dx;
            f = mix(f, scale(self.hair, 0.85), 0.9 * cover(top - q[1], aa));
        }
        // Nose: soft ridge shadow and nostrils.
        let ridge = Ellipse {
            c: [self.nose_tip[0] - 0.04, self.nose_tip[1] - self.nose_len * 0.45],
            r: [self.nose_w * 0.35, self.nose_len * 0.5],
        };
        f = mix(f, scale(f, 0.86), 0.7 * cover(ridge.sd(q), aa * 3.0));
        for s in [-1.0, 1.0] {
            let n = Ellipse { c: [self.nose_tip[0] + s * self.nose_w * 0.45, self.nose_tip[1]], r: [0.045, 0.03] };
            f = mix(f, scale(f, 0.45), cover(n.sd(q), aa));
        }
        // Eyes.
        for (k, e) in self.eyes.iter().enumerate() {
            if self.makeup {
                let shadow = Ellipse { c: [e[0], e[1] - self.eye_r[1] * 0.7], r: [self.eye_r[0] * 1.2, self.eye_r[1] * 0.55] };
                f = mix(f, [0.45, 0.25, 0.55], 0.55 * cover(shadow.sd(q), aa));
            }
            let sclera = Ellipse { c: *e, r: [self.eye_r[0], self.eye_r[1] * 0.55 * self.eye_open] };
            let lid = cover(sclera.sd(q) - 0.018, aa);
            f = mix(f, scale(f, 0.35), lid);
            let inside = cover(sclera.sd(q), aa);
            if inside > 0.0 {
                let mut ec = [0.94, 0.93, 0.9];
                let ic = [e[0] + self.iris_off[0], e[1] + self.iris_off[1]];
                let ir = self.eye_r[1] * 0.5;
                let dist = (q[0] - ic[0]).hypot(q[1] - ic[1]);
                let ang = (q[1] - ic[1]).atan2(q[0] - ic[0]);
                let texture = 0.78 + 0.22 * (self.iris_freq * ang + self.iris_phase + k as f64).sin();
                ec = mix(ec, scale(self.iris, texture), cover(dist - ir, aa));
                ec = mix(ec, [0.02, 0.02, 0.02], cover(dist - ir * 0.42, aa));
                f = mix(f, ec, inside);
            }
        }
        for b in &self.brows {
            f = mix(f, self.brow_color, cover(b.sd(q), aa));
        }
        // Mouth: lip band bent by the smile, dark opening inside.
        let rel = ((q[0] - self.mouth[0]) / self.mouth_half).clamp(-1.5, 1.5);
        let bent = [q[0], q[1] + 0.12 * self.smile * rel * rel];
        let lips = Ellipse { c: self.mouth, r: [self.mouth_half, self.lip_th + 0.22 * self.open] };
        let lip_col = if self.makeup { [0.75, 0.12, 0.22] } else { self.lip };
        f = mix(f, lip_col, cover(lips.sd(bent), aa));
        if self.open > 0.05 {
            let gap = Ellipse { c: self.mouth, r: [self.mouth_half * 0.78, 0.2 * self.open] };
            f = mix(f, [0.15, 0.04, 0.05], cover(gap.sd(bent), aa));
        } else {
            let line = (bent[1] - self.mouth[1]).abs() - 0.008;
            f = mix(f, scale(lip_col, 0.5), cover(line, aa) * cover(lips.sd(bent), aa));
        }
        if let Some(hat) = self.hat {
            let brim = self.hairline + 0.08;
            f = mix(f, hat, cover(q[1] - brim, aa));
        }
        if self.glasses {
            let frame = [0.08, 0.08, 0.09];
            for e in &self.eyes {
                let ring = Ellipse { c: *e, r: [self.eye_r[0] * 2.0, self.eye_r[1] * 1.6] };
                f = mix(f, frame, cover(ring.sd(q).abs() - 0.02, aa));
            }
            let y = (self.eyes[0][1] + self.eyes[1][1]) / 2.0;
            let (a, b) = (self.eyes[0][0] + self.eye_r[0] * 2.0, self.eyes[1][0] - self.eye_r[0] * 2.0);
            if q[0] > a.min(b) && q[0] < a.max(b) {
                f = mix(f, frame, cover((q[1] - y).abs() - 0.02, aa));
            }
        }
        if let Some(o) = &self.occluder {
            f = mix(f, scale(self.skin, 0.93), cover(o.sd(q), aa));
        }
        let out = lit(f, shade);
        let c = mix(c, out, head);
        if let Some(hat) = self.hat {
            // Crown of the hat extends above the head outline.
            let crown = Ellipse { c: [self.head.c[0], self.hairline - 0.1], r: [self.head.r[0] * 1.12, 0.75] };
            let a = cover(crown.sd(q), aa) * cover(q[1] - (self.hairline + 0.08), aa);
            return mix(c, lit(hat, shade.max(0.5)), a);
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// Renders `scene` at `size` x `size`, or at the scene's own resolution when
/// `size` is `None`.
pub fn render_scene(scene: &SceneConfig, size: Option<usize>) -> Result<Rendered> {
    let size = size.unwrap_or(scene.resolution as usize);
    if size < 32 {
        return Err(Error::validation(format!("render size {size} is below 32 pixels")));
    }
    let (face, placement, landmarks) = build(scene, size);
    let aa = 1.0 / placement.unit;
    let mut image = Image::new(size, size);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let q = placement.to_face(p);
            let c = face.color(q, [p[0] / s, p[1] / s], aa);
            image.put_pixel(x, y, [c[0].clamp(0.0, 1.0) as f32, c[1].clamp(0.0, 1.0) as f32, c[2].clamp(0.0, 1.0) as f32]);
        }
    }
    Ok(Rendered { image, landmarks })
}

/// Aligned 112x112 crop of a rendered scene using its exact landmarks.
pub fn render_aligned(scene: &SceneConfig, size: Option<usize>) -> Result<Image> {
    let r = render_scene(scene, size)?;
    let t = estimate_similarity_transform(&r.landmarks, &DEFAULT_TEMPLATE)?;
    Ok(warp_and_crop(&r.image, &t)?.image)
}

/// Default sampling policy reduced to pose and lighting jitter: narrower
/// head pose, fixed camera, daylight only and no accessories.
pub fn toy_sampler_config(identities: usize, samples_per_identity: usize) -> SamplerConfig {
    let zero = AxisMixture::normal(0.0, 0.0);
    SamplerConfig {
        identities,
        samples_per_identity,
        head_pose: PoseDistribution {
            yaw: AxisMixture::normal(0.0, 12.0),
            pitch: AxisMixture::normal(0.0, 6.0),
            roll: AxisMixture::normal(0.0, 6.0),
            ..PoseDistribution::default()
        },
        camera_pose: PoseDistribution { yaw: zero.clone(), pitch: zero.clone(), roll: zero, ..PoseDistribution::default() },
        hdri_weights: [1.0, 0.0, 0.0],
        accessories: AccessoryPolicy::uniform(0.0, 0.0),
        ..SamplerConfig::default()
    }
}

/// Training setup for the toy set: the desk encoder, a softer margin and
/// scale than the large-scale defaults, and a 24-epoch schedule.
pub fn toy_training() -> (TrainConfig, MarginConfig, AugmentationConfig) {
    let train = TrainConfig {
        batch_size: 64,
        epochs: 24,
        milestones: vec![16, 21],
        base_lr: 0.1,
        encoder: EncoderSpec::desk(),
        ..TrainConfig::default()
    };
    let margin = MarginConfig { margin: 0.2, scale: 16.0, easy_margin: false };
    (train, margin, AugmentationConfig::default())
}

/// Reference name of an identity in pairs files and image folders.
pub fn identity_name(identity_id: u32) -> String {
    format!("id{identity_id:05}")
}

/// Pairs-file reference of a scene (1-based sample index).
pub fn scene_ref(scene: &SceneConfig) -> String {
    image_ref(&identity_name(scene.identity_id), scene.sample_index as usize + 1)
}

/// Builds `folds` blocks of `per_class` genuine and `per_class` impostor
/// pairs. Identities are dealt to folds round-robin after a seeded shuffle,
/// so folds never share identities.
pub fn make_pairs(
    samples: &BTreeMap<String, usize>,
    folds: usize,
    per_class: usize,
    seed_value: u64,
) -> Result<Vec<VerificationPair>> {
    let mut names: Vec<&String> = samples.keys().filter(|n| samples[*n] >= 2).collect();
    if folds == 0 || names.len() < 2 * folds {
        return Err(Error::validation(format!(
            "need at least {} identities with two or more samples for {folds} folds, have {}",
            2 * folds,
            names.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "pairs"));
    names.shuffle(&mut rng);
    let mut out = Vec::with_capacity(folds * 2 * per_class);
    for f in 0..folds {
        let members: Vec<&String> = names.iter().skip(f).step_by(folds).copied().collect();
        let mut seen = std::collections::HashSet::new();
        let mut genuine = 0;
        let mut tries = 0;
        while genuine < per_class {
            tries += 1;
            let n = members[rng.random_range(0..members.len())];
            let count = samples[n];
            let i = rng.random_range(1..=count);
            let j = rng.random_range(1..=count);
            if i == j {
                continue;
            }
            let (i, j) = (i.min(j), i.max(j));
            if seen.insert((n.clone(), i, n.clone(), j)) || tries > 100 * per_class {
                out.push(VerificationPair { a: image_ref(n, i), b: image_ref(n, j), same: true, fold: f });
                genuine += 1;
            }
        }
        let mut impostor = 0;
        tries = 0;
        while impostor < per_class {
            tries += 1;
            let a = members[rng.random_range(0..members.len())];
            let b = members[rng.random_range(0..members.len())];
            if a == b {
                continue;
            }
            let i = rng.random_range(1..=samples[a]);
            let j = rng.random_range(1..=samples[b]);
            if seen.insert((a.clone(), i, b.clone(), j)) || tries > 100 * per_class {
                out.push(VerificationPair { a: image_ref(a, i), b: image_ref(b, j), same: false, fold: f });
                impostor += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySetSpec {
    pub train_identities: usize,
    pub eval_identities: usize,
    pub samples_per_identity: usize,
    /// Render size; scenes are drawn at this size regardless of their
    /// sampled resolution.
    pub render_size: usize,
    /// Expression strength applied to every toy scene; 0 renders neutral.
    pub expression_intensity: f64,
    pub folds: usize,
    /// Genuine (and impostor) pairs per fold.
    pub pairs_per_class: usize,
    pub seed: u64,
}

impl Default for ToySetSpec {
    fn default() -> Self {
        Self {
            train_identities: 200,
            eval_identities: 60,
            samples_per_identity: 20,
            render_size: 128,
            expression_intensity: 0.0,
            folds: 10,
            pairs_per_class: 30,
            seed: 0,
        }
    }
}

/// Aligned crops keyed by pairs-file reference.
#[derive(Debug, Clone, Default)]
pub struct CropSet {
    pub crops: HashMap<String, Image>,
}

/// A [`CropSet`] viewed through an embedder.
pub struct CropSource<'a> {
    pub crops: &'a CropSet,
    pub embedder: &'a dyn Embedder,
}

impl EmbeddingSource for CropSource<'_> {
    fn embedding(&self, image_ref: &str) -> Result<Vec<f64>> {
        let img = self
            .crops
            .crops
            .get(image_ref)
            .ok_or_else(|| Error::Missing(format!("no crop for image {image_ref:?}")))?;
        self.embedder
            .embed(img)
            .map_err(|e| Error::validation(format!("embedding {image_ref}: {e}")))
    }
}

pub struct ToySet {
    pub manifest: DatasetManifest,
    pub train: InMemoryDataset,
    pub eval: CropSet,
    pub pairs: Vec<VerificationPair>,
}

/// Samples one manifest covering train and held-out identities, renders and
/// aligns every scene needed, and deals verification pairs over the
/// held-out identities only.
pub fn build_toy_set(spec: &ToySetSpec) -> Result<ToySet> {
    let total = spec.train_identities + spec.eval_identities;
    let cfg = toy_sampler_config(total, spec.samples_per_identity);
    let mut manifest = build_manifest(&cfg, spec.seed)?;
    for s in &mut manifest.records {
        s.expression_intensity = Some(spec.expression_intensity);
    }
    let train_ids: Vec<u32> = (0..spec.train_identities as u32).collect();
    let names: Vec<String> = train_ids.iter().map(|i| identity_name(*i)).collect();

    let mut held_out = BTreeMap::new();
    for i in spec.train_identities..total {
        held_out.insert(identity_name(i as u32), spec.samples_per_identity);
    }
    let pairs = make_pairs(&held_out, spec.folds, spec.pairs_per_class, spec.seed)?;
    let needed: std::collections::HashSet<&str> =
        pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]).collect();

    let jobs: Vec<&SceneConfig> = manifest
        .records
        .iter()
        .filter(|s| (s.identity_id as usize) < spec.train_identities || needed.contains(scene_ref(s).as_str()))
        .collect();
    let crops: Vec<Image> = jobs
        .par_iter()
        .map(|s| render_aligned(s, Some(spec.render_size)))
        .collect::<Result<_>>()?;

    let mut train = InMemoryDataset::new(names);
    let mut eval = CropSet::default();
    for (s, img) in jobs.iter().zip(crops) {
        if (s.identity_id as usize) < spec.train_identities {
            train.push(&img, s.identity_id as usize)?;
        } else {
            eval.crops.insert(scene_ref(s), img);
        }
    }
    Ok(ToySet { manifest, train, eval, pairs })
}

/// Renders every scene of a manifest into `out/images/<id>/<ref>.png` and
/// writes `out/landmarks.csv` with paths relative to `out`.
pub fn write_renders(manifest: &DatasetManifest, out: &Path, size: Option<usize>) -> Result<usize> {
    let results: Vec<(String, LandmarkSet)> = manifest
        .records
        .par_iter()
        .map(|s| {
            let r = render_scene(s, size)?;
            let rel = format!("images/{}/{}.png", identity_name(s.identity_id), scene_ref(s));
            let path = out.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            r.image.save_png(&path)?;
            Ok((rel, r.landmarks))
        })
        .collect::<Result<_>>()?;
    let n = results.len();
    CsvLandmarks::from_rows(results).write(&out.join("landmarks.csv"))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Pose;

    fn scene(id: u32) -> SceneConfig {
        let m = build_manifest(&toy_sampler_config(3, 2), 5).unwrap();
        m.records.into_iter().find(|s| s.identity_id == id).unwrap()
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let s = scene(0);
        let a = render_scene(&s, Some(96)).unwrap();
        let b = render_scene(&s, Some(96)).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for p in a.landmarks.points {
            assert!(p[0] > 0.0 && p[0] < 96.0 && p[1] > 0.0 && p[1] < 96.0);
        }
    }

    #[test]
    fn landmarks_follow_roll() {
        let mut s = scene(1);
        s.head_pose = Pose { yaw: 0.0, pitch: 0.0, roll: 0.0 };
        s.camera_pose = Pose { yaw: 0.0, pitch: 0.0, roll: 0.0 };
        let flat = render_scene(&s, Some(128)).unwrap().landmarks;
        assert!((flat.points[0][1] - flat.points[1][1]).abs() < 1e-9);
        s.head_pose.roll = 20.0;
        let tilted = render_scene(&s, Some(128)).unwrap().landmarks;
        let ang = (tilted.points[1][1] - tilted.points[0][1]).atan2(tilted.points[1][0] - tilted.points[0][0]);
        assert!((ang.to_degrees() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn aligned_crops_put_eyes_on_template() {
        let s = scene(2);
        let img = render_aligned(&s, Some(128)).unwrap();
        assert_eq!((img.width(), img.height()), (112, 112));
    }

    #[test]
    fn eyebrow_style_changes_pixels() {
        let s = scene(0);
        let mut t = s.clone();
        t.identity.eyebrow_style += 1;
        assert_ne!(render_scene(&s, Some(64)).unwrap().image, render_scene(&t, Some(64)).unwrap().image);
    }

    #[test]
    fn pairs_are_fold_disjoint() {
        let samples: BTreeMap<String, usize> = (0..20).map(|i| (identity_name(i), 5)).collect();
        let pairs = make_pairs(&samples, 10, 4, 1).unwrap();
        assert_eq!(pairs.len(), 80);
        let name = |r: &str| r.rsplit_once('_').unwrap().0.to_string();
        let mut owner = HashMap::new();
        for p in &pairs {
            assert_eq!(p.same, name(&p.a) == name(&p.b));
            for r in [&p.a, &p.b] {
                assert_eq!(*owner.entry(name(r)).or_insert(p.fold), p.fold);
            }
        }
        assert_eq!(pairs, make_pairs(&samples, 10, 4, 1).unwrap());
        assert!(make_pairs(&samples, 11, 4, 1).is_err());
    }
}
