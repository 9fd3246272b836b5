use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 <= self.1) {
            return Err(Error::validation(format!(
                "{name}: range [{}, {}] must be finite with lo <= hi",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::validation(format!(
            "{name}: probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EthnicGroup {
    pub label: String,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicsSpec {
    pub groups: Vec<EthnicGroup>,
}

impl DemographicsSpec {
    pub fn single(label: &str) -> Self {
        Self {
            groups: vec![EthnicGroup {
                label: label.to_string(),
                proportion: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::validation("demographics: no groups"));
        }
        for g in &self.groups {
            if !(g.proportion.is_finite() && g.proportion >= 0.0) {
                return Err(Error::validation(format!(
                    "demographics: group '{}' has invalid proportion {}",
                    g.label, g.proportion
                )));
            }
        }
        let total: f64 = self.groups.iter().map(|g| g.proportion).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "demographics: proportions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

impl Default for DemographicsSpec {
    /// The published pool composition. The six listed groups add up to
    /// 99.99%; the remaining 0.01% is carried by an explicit `unspecified`
    /// group so proportions sum to one without rescaling the listed values.
    fn default() -> Self {
        let groups = [
            ("north_european", 0.6882),
            ("african", 0.0852),
            ("hispanic", 0.0794),
            ("mediterranean", 0.0638),
            ("southeast_asian", 0.0501),
            ("south_asian", 0.0332),
            ("unspecified", 0.0001),
        ];
        Self {
            groups: groups
                .iter()
                .map(|(label, proportion)| EthnicGroup {
                    label: label.to_string(),
                    proportion: *proportion,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: f64,
    pub spread: f64,
}

/// Gaussian mixture for one rotation axis, in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisMixture {
    pub components: Vec<GaussianComponent>,
}

impl AxisMixture {
    pub fn normal(mean: f64, spread: f64) -> Self {
        Self {
            components: vec![GaussianComponent {
                weight: 1.0,
                mean,
                spread,
            }],
        }
    }

    fn validate(&self, name: &str, limit: f64) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::validation(format!("{name}: empty mixture")));
        }
        let mut total = 0.0;
        for c in &self.components {
            if !(c.weight >= 0.0 && c.mean.is_finite() && c.spread.is_finite() && c.spread >= 0.0)
            {
                return Err(Error::validation(format!(
                    "{name}: invalid component {c:?}"
                )));
            }
            if c.mean.abs() > limit {
                return Err(Error::validation(format!(
                    "{name}: component mean {} outside [-{limit}, {limit}]",
                    c.mean
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "{name}: component weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Largest absolute yaw, pitch and roll in degrees. Draws outside are rejected and redrawn.
pub const POSE_LIMITS: [f64; 3] = [180.0, 90.0, 180.0];

/// How the `spread` of a pose component is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadUnit {
    /// Spread is a standard deviation in degrees.
    #[default]
    StdDev,
    /// Spread is a variance in squared degrees.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDistribution {
    pub yaw: AxisMixture,
    pub pitch: AxisMixture,
    pub roll: AxisMixture,
    #[serde(default)]
    pub spread_unit: SpreadUnit,
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            yaw: AxisMixture::normal(0.0, 25.0),
            pitch: AxisMixture::normal(0.0, 10.0),
            roll: AxisMixture::normal(0.0, 2.5),
            spread_unit: SpreadUnit::StdDev,
        }
    }
}

impl PoseDistribution {
    pub fn validate(&self, name: &str) -> Result<()> {
        let [yaw, pitch, roll] = POSE_LIMITS;
        self.yaw.validate(&format!("{name}.yaw"), yaw)?;
        self.pitch.validate(&format!("{name}.pitch"), pitch)?;
        self.roll.validate(&format!("{name}.roll"), roll)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeSpec {
    pub horizontal: Interval,
    pub vertical: Interval,
    pub distance: Interval,
}

impl Default for GazeSpec {
    fn default() -> Self {
        Self {
            horizontal: Interval(-0.5, 0.5),
            vertical: Interval(0.85, 1.0),
            distance: Interval(0.3, 6.0),
        }
    }
}

impl GazeSpec {
    pub fn validate(&self) -> Result<()> {
        self.horizontal.check("gaze.horizontal")?;
        self.vertical.check("gaze.vertical")?;
        self.distance.check("gaze.distance")
    }
}

/// Batch-1 probabilities; at most one of the three fires per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusiveProbs {
    pub makeup: f64,
    pub occlusion: f64,
    pub hat: f64,
}

/// Batch-2 probabilities; each fires independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndependentProbs {
    pub makeup: f64,
    pub occlusion: f64,
    pub hat: f64,
    pub random_expression: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessoryPolicy {
    pub batch2_fraction: f64,
    pub batch1: ExclusiveProbs,
    pub batch2: IndependentProbs,
    pub beard_if_male: f64,
    pub glasses: f64,
}

impl Default for AccessoryPolicy {
    fn default() -> Self {
        Self {
            batch2_fraction: 0.17,
            batch1: ExclusiveProbs {
                makeup: 0.03,
                occlusion: 0.025,
                hat: 0.035,
            },
            batch2: IndependentProbs {
                makeup: 0.15,
                occlusion: 0.50,
                hat: 0.70,
                random_expression: 0.50,
            },
            beard_if_male: 0.15,
            glasses: 0.15,
        }
    }
}

impl AccessoryPolicy {
    /// Every probability forced to `p`, in both batches.
    pub fn uniform(batch2_fraction: f64, p: f64) -> Self {
        Self {
            batch2_fraction,
            batch1: ExclusiveProbs {
                makeup: p,
                occlusion: p,
                hat: p,
            },
            batch2: IndependentProbs {
                makeup: p,
                occlusion: p,
                hat: p,
                random_expression: p,
            },
            beard_if_male: p,
            glasses: p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b1 = &self.batch1;
        let b2 = &self.batch2;
        for (name, p) in [
            ("accessories.batch2_fraction", self.batch2_fraction),
            ("accessories.batch1.makeup", b1.makeup),
            ("accessories.batch1.occlusion", b1.occlusion),
            ("accessories.batch1.hat", b1.hat),
            ("accessories.batch2.makeup", b2.makeup),
            ("accessories.batch2.occlusion", b2.occlusion),
            ("accessories.batch2.hat", b2.hat),
            ("accessories.batch2.random_expression", b2.random_expression),
            ("accessories.beard_if_male", self.beard_if_male),
            ("accessories.glasses", self.glasses),
        ] {
            check_probability(name, p)?;
        }
        let total = b1.makeup + b1.occlusion + b1.hat;
        if total > 1.0 + 1e-12 {
            return Err(Error::validation(format!(
                "accessories.batch1: exclusive probabilities sum to {total} > 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HairColorPolicy {
    /// Multipliers are drawn uniformly from `[1 - r, 1 + r]`.
    pub relative_range: f64,
}

impl Default for HairColorPolicy {
    fn default() -> Self {
        Self {
            relative_range: 0.25,
        }
    }
}

impl HairColorPolicy {
    pub fn interval(&self) -> Interval {
        Interval(1.0 - self.relative_range, 1.0 + self.relative_range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdriPeriod {
    Daytime,
    Evening,
    Night,
}

impl HdriPeriod {
    pub const ALL: [HdriPeriod; 3] = [HdriPeriod::Daytime, HdriPeriod::Evening, HdriPeriod::Night];

    pub fn name(&self) -> &'static str {
        match self {
            HdriPeriod::Daytime => "daytime",
            HdriPeriod::Evening => "evening",
            HdriPeriod::Night => "night",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionUnitVocabulary {
    pub eye: Vec<String>,
    pub mouth: Vec<String>,
}

impl Default for ActionUnitVocabulary {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            eye: s(&["AU05", "AU07", "AU43", "AU45", "AU46"]),
            mouth: s(&["AU12", "AU15", "AU18", "AU20", "AU25", "AU26"]),
        }
    }
}

/// Vocabulary for the per-identity traits that are drawn once and kept fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityTraitSpace {
    pub male_fraction: f64,
    pub eye_colors: Vec<String>,
    pub iris_textures: u32,
    pub eyebrow_styles: u32,
}

impl Default for IdentityTraitSpace {
    fn default() -> Self {
        Self {
            male_fraction: 0.5,
            eye_colors: ["brown", "dark_brown", "hazel", "green", "blue", "gray", "amber"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            iris_textures: 100,
            eyebrow_styles: 25,
        }
    }
}

/// Every knob of the scene sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub demographics: DemographicsSpec,
    pub traits: IdentityTraitSpace,
    pub head_pose: PoseDistribution,
    pub camera_pose: PoseDistribution,
    /// Weight of each HDRI period, in `HdriPeriod::ALL` order.
    pub hdri_weights: [f64; 3],
    /// Probability that a sample renders at 512 rather than 256.
    pub resolution_512_prob: f64,
    pub gaze: GazeSpec,
    pub hair_color: HairColorPolicy,
    pub accessories: AccessoryPolicy,
    pub action_units: ActionUnitVocabulary,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            identities: 30_000,
            samples_per_identity: 20,
            demographics: DemographicsSpec::default(),
            traits: IdentityTraitSpace::default(),
            head_pose: PoseDistribution::default(),
            camera_pose: PoseDistribution::default(),
            hdri_weights: [1.0 / 3.0; 3],
            resolution_512_prob: 0.5,
            gaze: GazeSpec::default(),
            hair_color: HairColorPolicy::default(),
            accessories: AccessoryPolicy::default(),
            action_units: ActionUnitVocabulary::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_identity == 0 {
            return Err(Error::validation("samples_per_identity must be >= 1"));
        }
        self.demographics.validate()?;
        check_probability("traits.male_fraction", self.traits.male_fraction)?;
        if self.traits.eye_colors.is_empty()
            || self.traits.iris_textures == 0
            || self.traits.eyebrow_styles == 0
        {
            return Err(Error::validation("traits: empty trait vocabulary"));
        }
        self.head_pose.validate("head_pose")?;
        self.camera_pose.validate("camera_pose")?;
        let hdri_total: f64 = self.hdri_weights.iter().sum();
        if self.hdri_weights.iter().any(|w| !(*w >= 0.0)) || (hdri_total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "hdri_weights {:?} must be nonnegative and sum to 1",
                self.hdri_weights
            )));
        }
        check_probability("resolution_512_prob", self.resolution_512_prob)?;
        self.gaze.validate()?;
        if !(self.hair_color.relative_range >= 0.0 && self.hair_color.relative_range < 1.0) {
            return Err(Error::validation(format!(
                "hair_color.relative_range {} outside [0, 1)",
                self.hair_color.relative_range
            )));
        }
        self.accessories.validate()?;
        if self.action_units.eye.is_empty() || self.action_units.mouth.is_empty() {
            return Err(Error::validation("action_units: empty vocabulary"));
        }
        Ok(())
    }
}
