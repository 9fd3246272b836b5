//! Variance-swap dataset construction, the face-part sensitivity probe,
//! the fine-tuning sweep and report assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::AugmentationConfig;
use crate::data::{FaceDataset, InMemoryDataset};
use crate::error::{Error, Result};
use crate::margin::MarginConfig;
use crate::sampler::{DatasetManifest, Expression, ExpressionPreset, Gender, SceneConfig};
use crate::seed;
use crate::trainer::{self, Checkpoint, EpochMetrics, TrainConfig};
use crate::verifier::{self, AccuracyReport, EmbeddingSource, Metric, Sweep, VerificationPair};

/// Dotted paths of the leaves where two JSON values differ.
pub fn diff_fields(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

fn scene_json(s: &SceneConfig) -> Result<Value> {
    serde_json::to_value(s).map_err(|e| Error::json("scene", e))
}

/// Changed fields between two scenes, each reported at the declared axis
/// granularity: a path counts as covered when an axis equals it or is a
/// prefix of it.
pub fn scene_diff(a: &SceneConfig, b: &SceneConfig) -> Result<Vec<String>> {
    Ok(diff_fields(&scene_json(a)?, &scene_json(b)?))
}

fn covered(path: &str, axes: &[String]) -> bool {
    axes.iter().any(|a| path == a || path.starts_with(&format!("{a}.")))
}

/// The single scene attribute a variant manifest alters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VariantAxis {
    Hat,
    Makeup,
    Occlusion,
    Glasses,
    /// Male identities only.
    Beard,
    /// Replaces the expression with a uniformly drawn non-neutral preset.
    Expression,
    /// Assigns one of the given hair-cut labels.
    HairStyle(Vec<String>),
}

impl VariantAxis {
    pub fn fields(&self) -> Vec<String> {
        let f = match self {
            VariantAxis::Hat => "accessories.hat",
            VariantAxis::Makeup => "accessories.makeup",
            VariantAxis::Occlusion => "accessories.occlusion",
            VariantAxis::Glasses => "accessories.glasses",
            VariantAxis::Beard => "accessories.beard",
            VariantAxis::Expression => "expression",
            VariantAxis::HairStyle(_) => "hair_style",
        };
        vec![f.to_string()]
    }

    /// Variant of `s`, or `None` when the attribute cannot be added.
    fn apply(&self, s: &SceneConfig, seed_value: u64) -> Option<SceneConfig> {
        let mut v = s.clone();
        let flag = |b: &mut bool| {
            if *b {
                false
            } else {
                *b = true;
                true
            }
        };
        let changed = match self {
            VariantAxis::Hat => flag(&mut v.accessories.hat),
            VariantAxis::Makeup => flag(&mut v.accessories.makeup),
            VariantAxis::Occlusion => flag(&mut v.accessories.occlusion),
            VariantAxis::Glasses => flag(&mut v.accessories.glasses),
            VariantAxis::Beard => s.identity.gender == Gender::Male && flag(&mut v.accessories.beard),
            VariantAxis::Expression => {
                let choices: Vec<ExpressionPreset> = ExpressionPreset::ALL
                    .iter()
                    .copied()
                    .filter(|p| Expression::Preset(*p) != s.expression && *p != ExpressionPreset::Neutral)
                    .collect();
                let mut rng = seed::rng(seed_value);
                let p = *choices.choose(&mut rng)?;
                v.expression = Expression::Preset(p);
                true
            }
            VariantAxis::HairStyle(labels) => {
                let choices: Vec<&String> = labels.iter().filter(|l| Some(*l) != s.hair_style.as_ref()).collect();
                let mut rng = seed::rng(seed_value);
                v.hair_style = Some((*choices.choose(&mut rng)?).clone());
                true
            }
        };
        changed.then_some(v)
    }
}

/// Variant manifest for `axis`: one altered copy of each eligible baseline
/// record, sharing its identity and sample index, at most `per_identity`
/// per identity (chosen uniformly with the seed).
pub fn derive_variants(
    baseline: &DatasetManifest,
    axis: &VariantAxis,
    per_identity: Option<usize>,
    seed_value: u64,
) -> Result<DatasetManifest> {
    if let VariantAxis::HairStyle(l) = axis {
        if l.is_empty() {
            return Err(Error::validation("hair-style axis needs at least one label"));
        }
    }
    let mut records = Vec::new();
    for (id, scenes) in baseline.by_identity() {
        let mut eligible: Vec<SceneConfig> = scenes
            .iter()
            .filter_map(|s| {
                let k = seed::derive_index(seed::derive(seed_value, "variant"), u64::from(id) << 32 | u64::from(s.sample_index));
                axis.apply(s, k)
            })
            .collect();
        if let Some(k) = per_identity {
            let mut rng = seed::rng(seed::derive_index(seed::derive(seed_value, "variant-pick"), u64::from(id)));
            eligible.shuffle(&mut rng);
            eligible.truncate(k);
            eligible.sort_by_key(|s| s.sample_index);
        }
        records.extend(eligible);
    }
    let mut header = baseline.header.clone();
    header.records = records.len();
    Ok(DatasetManifest { header, records })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwapPolicy {
    /// Target fraction of all baseline samples to replace.
    pub fraction: f64,
    /// Fields a variant may differ in from its baseline record.
    pub axes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEntry {
    pub identity_id: u32,
    /// Shared by the replaced baseline record and its variant.
    pub sample_index: u32,
    pub changed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub seed: u64,
    pub fraction: f64,
    pub axes: Vec<String>,
    pub total: usize,
    pub target: usize,
    pub swapped: usize,
    pub swaps: Vec<SwapEntry>,
}

impl SwapPlan {
    pub fn per_identity(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for s in &self.swaps {
            *m.entry(s.identity_id).or_insert(0) += 1;
        }
        m
    }
}

/// Per-identity quotas summing to `target`: an even split, the remainder
/// dealt to seeded-random identities, then any quota above an identity's
/// capacity moved to identities with room.
fn quotas(capacity: &BTreeMap<u32, usize>, target: usize, seed_value: u64) -> Result<BTreeMap<u32, usize>> {
    let total_cap: usize = capacity.values().sum();
    if target > total_cap {
        return Err(Error::validation(format!(
            "requested {target} swaps but only {total_cap} variants are available"
        )));
    }
    let ids: Vec<u32> = capacity.keys().copied().collect();
    let n = ids.len().max(1);
    let mut order = ids.clone();
    order.shuffle(&mut seed::rng(seed::derive(seed_value, "swap-remainder")));
    let mut q: BTreeMap<u32, usize> = ids.iter().map(|i| (*i, target / n)).collect();
    for i in order.iter().take(target % n) {
        *q.get_mut(i).expect("known id") += 1;
    }
    let mut excess = 0;
    for (id, v) in q.iter_mut() {
        let cap = capacity[id];
        if *v > cap {
            excess += *v - cap;
            *v = cap;
        }
    }
    while excess > 0 {
        let before = excess;
        for id in &order {
            if excess == 0 {
                break;
            }
            let v = q.get_mut(id).expect("known id");
            if *v < capacity[id] {
                *v += 1;
                excess -= 1;
            }
        }
        if before == excess {
            return Err(Error::validation("cannot place all swaps"));
        }
    }
    Ok(q)
}

/// Replaces a seeded selection of baseline samples with their variants.
pub fn swap_variants(
    baseline: &DatasetManifest,
    variants: &DatasetManifest,
    policy: &SwapPolicy,
    seed_value: u64,
) -> Result<(DatasetManifest, SwapPlan)> {
    if !(0.0..=1.0).contains(&policy.fraction) {
        return Err(Error::validation(format!("swap fraction {} outside [0, 1]", policy.fraction)));
    }
    let base = baseline.by_identity();
    let var = variants.by_identity();
    let base_ids: BTreeSet<u32> = base.keys().copied().collect();
    let var_ids: BTreeSet<u32> = var.keys().copied().collect();
    if let Some(id) = var_ids.difference(&base_ids).next() {
        return Err(Error::validation(format!("variant identity {id} is not in the baseline")));
    }
    if policy.fraction > 0.0 {
        if let Some(id) = base_ids.difference(&var_ids).next() {
            return Err(Error::validation(format!("baseline identity {id} has no variants")));
        }
    }

    // Index variants by sample and check each against its baseline record.
    let mut by_key: BTreeMap<(u32, u32), (&SceneConfig, Vec<String>)> = BTreeMap::new();
    for (id, scenes) in &var {
        for v in scenes {
            let b = base[id]
                .iter()
                .find(|b| b.sample_index == v.sample_index)
                .ok_or_else(|| Error::validation(format!("variant {id}/{} has no baseline sample", v.sample_index)))?;
            let changed = scene_diff(b, v)?;
            if let Some(f) = changed.iter().find(|f| !covered(f, &policy.axes)) {
                return Err(Error::validation(format!(
                    "variant {id}/{} changes undeclared field {f}",
                    v.sample_index
                )));
            }
            if changed.is_empty() {
                return Err(Error::validation(format!("variant {id}/{} equals its baseline", v.sample_index)));
            }
            if by_key.insert((*id, v.sample_index), (v, changed)).is_some() {
                return Err(Error::validation(format!("duplicate variant {id}/{}", v.sample_index)));
            }
        }
    }

    let total = baseline.records.len();
    let target = (policy.fraction * total as f64).round() as usize;
    let capacity: BTreeMap<u32, usize> = base_ids
        .iter()
        .map(|id| (*id, var.get(id).map_or(0, Vec::len)))
        .collect();
    let q = quotas(&capacity, target, seed_value)?;

    let mut swaps = Vec::new();
    for (id, k) in &q {
        let Some(scenes) = var.get(id) else { continue };
        let mut idx: Vec<u32> = scenes.iter().map(|s| s.sample_index).collect();
        idx.shuffle(&mut seed::rng(seed::derive_index(seed::derive(seed_value, "swap-pick"), u64::from(*id))));
        let mut chosen: Vec<u32> = idx.into_iter().take(*k).collect();
        chosen.sort_unstable();
        for s in chosen {
            swaps.push(SwapEntry { identity_id: *id, sample_index: s, changed: by_key[&(*id, s)].1.clone() });
        }
    }
    let picked: BTreeSet<(u32, u32)> = swaps.iter().map(|s| (s.identity_id, s.sample_index)).collect();
    let records = baseline
        .records
        .iter()
        .map(|r| {
            if picked.contains(&(r.identity_id, r.sample_index)) {
                by_key[&(r.identity_id, r.sample_index)].0.clone()
            } else {
                r.clone()
            }
        })
        .collect();
    let plan = SwapPlan {
        seed: seed_value,
        fraction: policy.fraction,
        axes: policy.axes.clone(),
        total,
        target,
        swapped: swaps.len(),
        swaps,
    };
    Ok((DatasetManifest { header: baseline.header.clone(), records }, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCondition {
    pub label: String,
    /// Curve the condition belongs to, e.g. `baseline` or `altered`.
    pub group: String,
    /// Position along the swept axis (degrees, intensity), if any.
    #[serde(default)]
    pub parameter: Option<f64>,
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub label: String,
    pub group: String,
    pub parameter: Option<f64>,
    pub image_refs: Vec<String>,
    pub distances: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSeries {
    pub parameters: Vec<f64>,
    /// `altered.mean - baseline.mean` at each shared parameter.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub reference: String,
    pub conditions: Vec<ConditionStats>,
    pub difference: Option<DifferenceSeries>,
}

/// Mean and population standard deviation. The mean is accumulated first and
/// the spread from the centered values, matching the two-pass definition.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Distance of every condition image to the reference embedding, with
/// per-condition statistics sorted by group then parameter.
pub fn sensitivity_probe(
    reference: &str,
    conditions: &[ProbeCondition],
    source: &dyn EmbeddingSource,
) -> Result<ProbeReport> {
    let r = source.embedding(reference)?;
    let mut stats = Vec::with_capacity(conditions.len());
    for c in conditions {
        if c.image_refs.is_empty() {
            return Err(Error::validation(format!("probe condition {:?} has no images", c.label)));
        }
        let distances = c
            .image_refs
            .iter()
            .map(|i| verifier::distance(&r, &source.embedding(i)?, Metric::L2))
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&distances);
        stats.push(ConditionStats {
            label: c.label.clone(),
            group: c.group.clone(),
            parameter: c.parameter,
            image_refs: c.image_refs.clone(),
            distances,
            mean,
            std,
        });
    }
    stats.sort_by(|a, b| {
        a.group
            .cmp(&b.group)
            .then(a.parameter.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.parameter.unwrap_or(f64::NEG_INFINITY)))
    });
    let difference = difference_series(&stats);
    Ok(ProbeReport { reference: reference.to_string(), conditions: stats, difference })
}

fn difference_series(stats: &[ConditionStats]) -> Option<DifferenceSeries> {
    let curve = |g: &str| -> BTreeMap<u64, f64> {
        stats
            .iter()
            .filter(|s| s.group == g)
            .filter_map(|s| s.parameter.map(|p| (p.to_bits(), s.mean)))
            .collect()
    };
    let (base, alt) = (curve("baseline"), curve("altered"));
    let mut pairs: Vec<(f64, f64)> = base
        .iter()
        .filter_map(|(p, b)| alt.get(p).map(|a| (f64::from_bits(*p), a - b)))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let values: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (mean, std) = mean_std(&values);
    Some(DifferenceSeries { parameters: pairs.iter().map(|p| p.0).collect(), values, mean, std })
}

/// Probe sweep definition: yaw 0..45 degrees and intensity 0..0.9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub yaw_degrees: Vec<f64>,
    pub intensities: Vec<f64>,
    pub intensity_preset: ExpressionPreset,
    /// Replacement styles or eye textures per swap condition.
    pub swaps: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            yaw_degrees: (0..10).map(|i| f64::from(i) * 5.0).collect(),
            intensities: (0..10).map(|i| f64::from(i) / 10.0).collect(),
            intensity_preset: ExpressionPreset::Happiness,
            swaps: 8,
        }
    }
}

/// Conditions sharing a reference scene; only `varied` fields may differ
/// across `scenes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub name: String,
    pub varied: Vec<String>,
    pub conditions: Vec<ProbeCondition>,
    pub scenes: BTreeMap<String, SceneConfig>,
}

impl ConditionSet {
    /// Fails naming the first field outside `varied` that differs between
    /// two scenes of the set.
    pub fn check_controlled(&self) -> Result<()> {
        let mut it = self.scenes.iter();
        let Some((first_ref, first)) = it.next() else { return Ok(()) };
        for (r, s) in it {
            for f in scene_diff(first, s)? {
                if !covered(&f, &self.varied) {
                    return Err(Error::validation(format!(
                        "probe set {}: {r} differs from {first_ref} in {f}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Frontal, neutral version of `scene` used as the probe reference.
pub fn probe_reference(scene: &SceneConfig, spec: &ProbeSpec) -> SceneConfig {
    let mut r = scene.clone();
    r.head_pose.yaw = 0.0;
    r.head_pose.pitch = 0.0;
    r.head_pose.roll = 0.0;
    r.expression = Expression::Preset(spec.intensity_preset);
    r.expression_intensity = Some(0.0);
    r.accessories.occlusion = false;
    r.accessories.hat = false;
    r.accessories.glasses = false;
    r
}

/// Builds the yaw and expression sweeps for the reference identity and the
/// same sweeps with swapped eyebrows, plus eyebrow-swap and eye-swap sets.
/// Returns the reference ref and the sets; every scene carries the
/// reference's own render seed.
pub fn build_probe_sets(
    reference: &SceneConfig,
    spec: &ProbeSpec,
    eyebrow_styles: u32,
    iris_textures: u32,
    eye_colors: &[String],
) -> Result<(String, Vec<ConditionSet>)> {
    if spec.swaps == 0 || eyebrow_styles < 2 || iris_textures < 2 || eye_colors.len() < 2 {
        return Err(Error::validation("probe swaps need at least two styles, textures and colors"));
    }
    let ref_name = "probe_reference".to_string();
    let other_brow = |k: usize| (reference.identity.eyebrow_style + 1 + k as u32) % eyebrow_styles;
    let mut sets = Vec::new();

    let mut sweep = |name: &str, values: &[f64], field: &str, set: &dyn Fn(&mut SceneConfig, f64)| {
        for altered in [false, true] {
            let mut scenes = BTreeMap::new();
            let mut conditions = Vec::new();
            scenes.insert(ref_name.clone(), reference.clone());
            for (i, v) in values.iter().enumerate() {
                let mut refs = Vec::new();
                let copies = if altered { spec.swaps } else { 1 };
                for k in 0..copies {
                    let mut s = reference.clone();
                    set(&mut s, *v);
                    if altered {
                        s.identity.eyebrow_style = other_brow(k);
                    }
                    let r = format!("probe_{name}{}_{i:02}_{k:02}", if altered { "_brow" } else { "" });
                    scenes.insert(r.clone(), s);
                    refs.push(r);
                }
                conditions.push(ProbeCondition {
                    label: format!("{name}={v}"),
                    group: if altered { "altered" } else { "baseline" }.into(),
                    parameter: Some(*v),
                    image_refs: refs,
                });
            }
            let mut varied = vec![field.to_string()];
            if altered {
                varied.push("identity.eyebrow_style".into());
            }
            sets.push(ConditionSet {
                name: format!("{name}{}", if altered { "+eyebrow" } else { "" }),
                varied,
                conditions,
                scenes,
            });
        }
    };
    sweep("yaw", &spec.yaw_degrees, "head_pose.yaw", &|s, v| s.head_pose.yaw = v);
    sweep("intensity", &spec.intensities, "expression_intensity", &|s, v| s.expression_intensity = Some(v));

    let mut swap_set = |name: &str, varied: Vec<String>, edit: &dyn Fn(&mut SceneConfig, usize)| {
        let mut scenes = BTreeMap::new();
        scenes.insert(ref_name.clone(), reference.clone());
        let mut refs = Vec::new();
        for k in 0..spec.swaps {
            let mut s = reference.clone();
            edit(&mut s, k);
            let r = format!("probe_{name}_{k:02}");
            scenes.insert(r.clone(), s);
            refs.push(r);
        }
        sets.push(ConditionSet {
            name: name.to_string(),
            varied,
            conditions: vec![ProbeCondition { label: name.to_string(), group: name.to_string(), parameter: None, image_refs: refs }],
            scenes,
        });
    };
    swap_set("eyebrow-swap", vec!["identity.eyebrow_style".into()], &|s, k| s.identity.eyebrow_style = other_brow(k));
    let colors: Vec<&String> = eye_colors.iter().filter(|c| **c != reference.identity.eye_color).collect();
    swap_set(
        "eye-swap",
        vec!["identity.eye_color".into(), "identity.iris_texture".into()],
        &|s, k| {
            s.identity.eye_color = colors[k % colors.len()].clone();
            s.identity.iris_texture = (reference.identity.iris_texture + 1 + k as u32) % iris_textures;
        },
    );
    for s in &sets {
        s.check_controlled()?;
    }
    Ok((ref_name, sets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub identities: usize,
    pub finetuned: AccuracyReport,
    /// Same identities trained from scratch; absent for the empty batch.
    pub scratch: Option<AccuracyReport>,
}

/// Evaluation set shared by every row of a sweep.
pub struct EvalSet<'a> {
    pub pairs: &'a [VerificationPair],
    /// Builds an embedding source for a trained encoder.
    pub source: &'a (dyn Fn(&crate::nn::Encoder) -> Box<dyn EmbeddingSource + 'a> + Sync),
    pub metric: Metric,
    pub sweep: Sweep,
}

fn evaluate(enc: &crate::nn::Encoder, eval: &EvalSet) -> Result<AccuracyReport> {
    let src = (eval.source)(enc);
    Ok(verifier::evaluate_pairs(eval.pairs, src.as_ref(), eval.metric, &eval.sweep)?.0)
}

/// For each requested identity count, fine-tunes the pretrained encoder on
/// that many randomly chosen real identities and trains a scratch model on
/// the same subset; a count of 0 evaluates the pretrained encoder as is.
/// Subsets depend only on the seed and the count.
pub fn finetune_sweep(
    pretrained: &Checkpoint,
    real: &InMemoryDataset,
    batches: &[usize],
    cfg: &TrainConfig,
    margin: &MarginConfig,
    augmentation: &AugmentationConfig,
    eval: &EvalSet,
    run_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if let Some(b) = batches.iter().find(|b| **b > real.num_classes()) {
        return Err(Error::validation(format!(
            "requested {b} identities, only {} available",
            real.num_classes()
        )));
    }
    let mut rows = Vec::new();
    for &b in batches {
        if b == 0 {
            rows.push(SweepRow { identities: 0, finetuned: evaluate(&pretrained.encoder()?, eval)?, scratch: None });
            continue;
        }
        let mut classes: Vec<usize> = (0..real.num_classes()).collect();
        classes.shuffle(&mut seed::rng(seed::derive_index(seed::derive(cfg.seed, "sweep-subset"), b as u64)));
        classes.truncate(b);
        classes.sort_unstable();
        let subset = real.select_classes(&classes)?;
        let dir = |kind: &str| run_dir.map(|d| d.join(format!("sweep_{b}_{kind}")));
        let ft_dir = dir("finetune");
        let ft = trainer::finetune(pretrained, &subset, cfg, margin, augmentation, ft_dir.as_deref())?;
        let sc_cfg = TrainConfig { encoder: pretrained.state.encoder.clone(), ..cfg.clone() };
        let sc_dir = dir("scratch");
        let sc = trainer::fit(&subset, &sc_cfg, margin, augmentation, sc_dir.as_deref())?;
        rows.push(SweepRow {
            identities: b,
            finetuned: evaluate(&ft.model.encoder, eval)?,
            scratch: Some(evaluate(&sc.model.encoder, eval)?),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub metrics: BTreeMap<String, Vec<EpochMetrics>>,
    pub accuracy: BTreeMap<String, AccuracyReport>,
    pub sweep: Option<Vec<SweepRow>>,
    pub probe: Option<ProbeReport>,
    pub swap: Option<SwapPlan>,
    pub warnings: Vec<String>,
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else { return };
    let mut entries: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n == "checkpoints") {
                continue;
            }
            find_files(&p, name, out);
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
}

fn rel(root: &Path, p: &Path) -> String {
    let parent = p.parent().unwrap_or(root);
    let r = parent.strip_prefix(root).unwrap_or(parent).display().to_string();
    if r.is_empty() {
        ".".into()
    } else {
        r
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let raw = std::fs::read(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::json(p.display().to_string(), e))
}

/// Collects `metrics.jsonl`, `report.json`, `sweep.json`, `probe.json` and
/// `swap_plan.json` under `run_dir` into `summary.md`, `results.json` and
/// tab-separated curve files. Unreadable inputs become warnings.
pub fn emit_report(run_dir: &Path) -> Result<ReportSummary> {
    if !run_dir.is_dir() {
        return Err(Error::Missing(format!("run directory {} not found", run_dir.display())));
    }
    let mut s = ReportSummary::default();
    let found = |name: &str| {
        let mut v = Vec::new();
        find_files(run_dir, name, &mut v);
        v
    };
    for p in found("metrics.jsonl") {
        let parsed: Result<Vec<EpochMetrics>> = std::fs::read_to_string(&p)
            .map_err(|e| Error::io(&p, e))
            .and_then(|t| {
                t.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| serde_json::from_str(l).map_err(|e| Error::json(p.display().to_string(), e)))
                    .collect()
            });
        match parsed {
            Ok(m) => {
                s.metrics.insert(rel(run_dir, &p), m);
            }
            Err(e) => s.warnings.push(e.to_string()),
        }
    }
    for p in found("report.json") {
        match read_json::<AccuracyReport>(&p) {
            Ok(r) => {
                s.accuracy.insert(rel(run_dir, &p), r);
            }
            Err(e) => s.warnings.push(e.to_string()),
        }
    }
    let single = |name: &str, warnings: &mut Vec<String>| -> Option<PathBuf> {
        let mut v = Vec::new();
        find_files(run_dir, name, &mut v);
        if v.len() > 1 {
            warnings.push(format!("several {name} files; using {}", v[0].display()));
        }
        v.into_iter().next()
    };
    if let Some(p) = single("sweep.json", &mut s.warnings) {
        match read_json(&p) {
            Ok(r) => s.sweep = Some(r),
            Err(e) => s.warnings.push(e.to_string()),
        }
    }
    if let Some(p) = single("probe.json", &mut s.warnings) {
        match read_json(&p) {
            Ok(r) => s.probe = Some(r),
            Err(e) => s.warnings.push(e.to_string()),
        }
    }
    if let Some(p) = single("swap_plan.json", &mut s.warnings) {
        match read_json(&p) {
            Ok(r) => s.swap = Some(r),
            Err(e) => s.warnings.push(e.to_string()),
        }
    }
    if s.metrics.is_empty() && s.accuracy.is_empty() && s.sweep.is_none() && s.probe.is_none() && s.swap.is_none() {
        s.warnings.push(format!("no results found under {}", run_dir.display()));
    }
    write_outputs(run_dir, &s)?;
    Ok(s)
}

fn write_outputs(dir: &Path, s: &ReportSummary) -> Result<()> {
    let write = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    let mut md = String::from("# Run summary\n\n");
    if !s.warnings.is_empty() {
        md.push_str("## Warnings\n\n");
        for w in &s.warnings {
            md.push_str(&format!("- {w}\n"));
        }
        md.push('\n');
    }
    if !s.accuracy.is_empty() {
        md.push_str("## Verification accuracy\n\n| source | mean | std | folds |\n|---|---|---|---|\n");
        for (k, r) in &s.accuracy {
            md.push_str(&format!("| {k} | {:.4} | {:.4} | {} |\n", r.mean, r.std, r.folds.len()));
        }
        md.push('\n');
    }
    for (k, m) in &s.metrics {
        md.push_str(&format!("## Training ({k})\n\n| epoch | lr | loss | train acc |\n|---|---|---|---|\n"));
        for e in m {
            md.push_str(&format!("| {} | {:e} | {:.5} | {:.4} |\n", e.epoch, e.lr, e.loss, e.train_accuracy));
        }
        md.push('\n');
        let mut tsv = String::from("epoch\tlr\thead_lr\tloss\ttrain_accuracy\n");
        for e in m {
            tsv.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.epoch, e.lr, e.head_lr, e.loss, e.train_accuracy));
        }
        let name = if k == "." { "loss.tsv".to_string() } else { format!("loss_{}.tsv", k.replace(['/', '\\'], "_")) };
        write(&name, tsv)?;
    }
    if let Some(rows) = &s.sweep {
        md.push_str("## Fine-tuning sweep\n\n| identities | finetuned | scratch |\n|---|---|---|\n");
        let mut tsv = String::from("identities\tfinetuned_mean\tfinetuned_std\tscratch_mean\tscratch_std\n");
        for r in rows {
            let (sm, ss) = r.scratch.as_ref().map_or((f64::NAN, f64::NAN), |x| (x.mean, x.std));
            md.push_str(&format!("| {} | {:.4} | {} |\n", r.identities, r.finetuned.mean, if sm.is_nan() { "-".into() } else { format!("{sm:.4}") }));
            tsv.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.identities, r.finetuned.mean, r.finetuned.std, sm, ss));
        }
        md.push('\n');
        write("sweep.tsv", tsv)?;
    }
    if let Some(p) = &s.probe {
        md.push_str(&format!("## Sensitivity probe (reference {})\n\n| condition | group | parameter | mean | std | n |\n|---|---|---|---|---|---|\n", p.reference));
        let mut tsv = String::from("condition\tgroup\tparameter\tmean\tstd\tn\n");
        for c in &p.conditions {
            let param = c.parameter.map_or(String::from("-"), |v| v.to_string());
            md.push_str(&format!("| {} | {} | {param} | {:.4} | {:.4} | {} |\n", c.label, c.group, c.mean, c.std, c.distances.len()));
            tsv.push_str(&format!("{}\t{}\t{param}\t{}\t{}\t{}\n", c.label, c.group, c.mean, c.std, c.distances.len()));
        }
        if let Some(d) = &p.difference {
            md.push_str(&format!("\nAltered minus baseline: {:.4} ± {:.4} over {} points\n", d.mean, d.std, d.values.len()));
        }
        md.push('\n');
        write("probe.tsv", tsv)?;
    }
    if let Some(plan) = &s.swap {
        md.push_str(&format!(
            "## Variance swap\n\n{} of {} samples swapped (target {}, fraction {}) along {}\n\n",
            plan.swapped,
            plan.total,
            plan.target,
            plan.fraction,
            plan.axes.join(", ")
        ));
    }
    write("summary.md", md)?;
    write("results.json", serde_json::to_string_pretty(s).map_err(|e| Error::json("results", e))?)
}
