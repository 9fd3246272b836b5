use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{
    AxisMixture, HdriPeriod, Interval, PoseDistribution, SamplerConfig, SpreadUnit, POSE_LIMITS,
};
use super::pool::{Gender, IdentityRecord, IdentityTraits};
use crate::seed;

/// Rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionPreset {
    Neutral,
    Happiness,
    Sadness,
    Surprise,
    Anger,
    Fear,
    Contempt,
    Disgust,
    MouthOpen,
}

impl ExpressionPreset {
    pub const ALL: [ExpressionPreset; 9] = [
        ExpressionPreset::Neutral,
        ExpressionPreset::Happiness,
        ExpressionPreset::Sadness,
        ExpressionPreset::Surprise,
        ExpressionPreset::Anger,
        ExpressionPreset::Fear,
        ExpressionPreset::Contempt,
        ExpressionPreset::Disgust,
        ExpressionPreset::MouthOpen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExpressionPreset::Neutral => "neutral",
            ExpressionPreset::Happiness => "happiness",
            ExpressionPreset::Sadness => "sadness",
            ExpressionPreset::Surprise => "surprise",
            ExpressionPreset::Anger => "anger",
            ExpressionPreset::Fear => "fear",
            ExpressionPreset::Contempt => "contempt",
            ExpressionPreset::Disgust => "disgust",
            ExpressionPreset::MouthOpen => "mouth_open",
        }
    }
}

/// Either a platform preset or a randomized action-unit combination with at
/// most one eye unit and one mouth unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Expression {
    Preset(ExpressionPreset),
    ActionUnits {
        eye: Option<String>,
        mouth: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaze {
    pub horizontal: f64,
    pub vertical: f64,
    pub distance: f64,
}

/// Relative multipliers applied to the identity's default hair material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HairColorDelta {
    pub melanin: f64,
    pub whiteness: f64,
    pub roughness: f64,
    pub redness: f64,
}

impl HairColorDelta {
    pub const NEUTRAL: HairColorDelta = HairColorDelta {
        melanin: 1.0,
        whiteness: 1.0,
        roughness: 1.0,
        redness: 1.0,
    };

    pub fn values(&self) -> [f64; 4] {
        [self.melanin, self.whiteness, self.roughness, self.redness]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accessories {
    pub makeup: bool,
    pub occlusion: bool,
    pub hat: bool,
    pub glasses: bool,
    pub beard: bool,
}

/// One fully sampled render job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub identity_id: u32,
    pub sample_index: u32,
    pub identity: IdentityTraits,
    pub resolution: u32,
    /// 1 = single exclusive addition, 2 = simultaneous additions.
    pub variance_batch: u8,
    pub head_pose: Pose,
    pub camera_pose: Pose,
    pub hdri_period: HdriPeriod,
    pub hdri_rotation: f64,
    pub expression: Expression,
    /// Opaque expression strength in `[0, 1]`; absent means full strength.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_intensity: Option<f64>,
    pub gaze: Gaze,
    pub hair_color: HairColorDelta,
    /// Hair-cut asset label, set only by variant manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hair_style: Option<String>,
    pub accessories: Accessories,
    pub rng_seed: u64,
}

fn sample_axis(axis: &AxisMixture, unit: SpreadUnit, limit: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = axis.components.last().expect("validated mixture is non-empty");
    for c in &axis.components {
        acc += c.weight;
        if u < acc {
            chosen = c;
            break;
        }
    }
    let sigma = match unit {
        SpreadUnit::StdDev => chosen.spread,
        SpreadUnit::Variance => chosen.spread.sqrt(),
    };
    if sigma == 0.0 {
        return chosen.mean;
    }
    let normal = Normal::new(chosen.mean, sigma).expect("finite nonnegative sigma");
    // Validation keeps the mean inside the limit, so some draw is accepted.
    loop {
        let v = normal.sample(rng);
        if v.abs() <= limit {
            return v;
        }
    }
}

pub(crate) fn sample_pose_with(dist: &PoseDistribution, rng: &mut ChaCha8Rng) -> Pose {
    let [yaw, pitch, roll] = POSE_LIMITS;
    Pose {
        yaw: sample_axis(&dist.yaw, dist.spread_unit, yaw, rng),
        pitch: sample_axis(&dist.pitch, dist.spread_unit, pitch, rng),
        roll: sample_axis(&dist.roll, dist.spread_unit, roll, rng),
    }
}

/// Draws `(yaw, pitch, roll)` with each axis independent, truncated to [`POSE_LIMITS`].
pub fn sample_pose(dist: &PoseDistribution, seed: u64) -> Pose {
    sample_pose_with(dist, &mut seed::rng(seed))
}

fn uniform_in(range: Interval, rng: &mut ChaCha8Rng) -> f64 {
    if range.lo() == range.hi() {
        return range.lo();
    }
    rng.random_range(range.lo()..range.hi())
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// Samples one scene for `identity`.
///
/// Draw order is fixed: resolution, batch, head pose, camera pose, HDRI,
/// expression, gaze, hair color, accessories. The batch-1 branch picks at
/// most one of makeup/occlusion/hat from a single uniform draw; the batch-2
/// branch draws each of them (and the randomized expression) independently.
pub fn sample_scene_config(
    identity: &IdentityRecord,
    index: u32,
    cfg: &SamplerConfig,
    seed: u64,
) -> SceneConfig {
    let mut rng = seed::rng(seed);
    let acc = &cfg.accessories;

    let resolution = if rng.random_bool(cfg.resolution_512_prob) { 512 } else { 256 };
    let batch2 = rng.random_bool(acc.batch2_fraction);
    let head_pose = sample_pose_with(&cfg.head_pose, &mut rng);
    let camera_pose = sample_pose_with(&cfg.camera_pose, &mut rng);

    let u: f64 = rng.random();
    let mut hdri_period = HdriPeriod::Night;
    let mut cum = 0.0;
    for (period, w) in HdriPeriod::ALL.iter().zip(cfg.hdri_weights) {
        cum += w;
        if u < cum {
            hdri_period = *period;
            break;
        }
    }
    let hdri_rotation = rng.random_range(0.0..360.0);

    let mut accessories = Accessories::default();
    let mut random_expression = false;
    if batch2 {
        accessories.makeup = rng.random_bool(acc.batch2.makeup);
        accessories.occlusion = rng.random_bool(acc.batch2.occlusion);
        accessories.hat = rng.random_bool(acc.batch2.hat);
        random_expression = rng.random_bool(acc.batch2.random_expression);
    } else {
        let u: f64 = rng.random();
        let b1 = &acc.batch1;
        if u < b1.makeup {
            accessories.makeup = true;
        } else if u < b1.makeup + b1.occlusion {
            accessories.occlusion = true;
        } else if u < b1.makeup + b1.occlusion + b1.hat {
            accessories.hat = true;
        }
    }

    let expression = if random_expression {
        let aus = &cfg.action_units;
        // One or two units with equal probability; a single unit is an eye
        // or a mouth unit with equal probability.
        let two = rng.random_bool(0.5);
        let eye_only = rng.random_bool(0.5);
        let eye = pick(&aus.eye, &mut rng).clone();
        let mouth = pick(&aus.mouth, &mut rng).clone();
        if two {
            Expression::ActionUnits {
                eye: Some(eye),
                mouth: Some(mouth),
            }
        } else if eye_only {
            Expression::ActionUnits {
                eye: Some(eye),
                mouth: None,
            }
        } else {
            Expression::ActionUnits {
                eye: None,
                mouth: Some(mouth),
            }
        }
    } else {
        Expression::Preset(*pick(&ExpressionPreset::ALL, &mut rng))
    };

    let gaze = Gaze {
        horizontal: uniform_in(cfg.gaze.horizontal, &mut rng),
        vertical: uniform_in(cfg.gaze.vertical, &mut rng),
        distance: uniform_in(cfg.gaze.distance, &mut rng),
    };
    let hair_range = cfg.hair_color.interval();
    let hair_color = HairColorDelta {
        melanin: uniform_in(hair_range, &mut rng),
        whiteness: uniform_in(hair_range, &mut rng),
        roughness: uniform_in(hair_range, &mut rng),
        redness: uniform_in(hair_range, &mut rng),
    };

    accessories.glasses = rng.random_bool(acc.glasses);
    let beard_draw = rng.random_bool(acc.beard_if_male);
    accessories.beard = identity.traits.gender == Gender::Male && beard_draw;

    SceneConfig {
        identity_id: identity.identity_id,
        sample_index: index,
        identity: identity.traits.clone(),
        resolution,
        variance_batch: if batch2 { 2 } else { 1 },
        head_pose,
        camera_pose,
        hdri_period,
        hdri_rotation,
        expression,
        expression_intensity: None,
        gaze,
        hair_color,
        hair_style: None,
        accessories,
        rng_seed: seed,
    }
}
