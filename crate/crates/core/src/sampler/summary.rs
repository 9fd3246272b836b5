use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use super::manifest::DatasetManifest;
use super::scene::Expression;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FieldStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl FieldStats {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// A Bernoulli flag's empirical rate over `count` eligible records.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Rate {
    pub hits: usize,
    pub count: usize,
    pub rate: f64,
}

impl Rate {
    fn new(hits: usize, count: usize) -> Self {
        Self {
            hits,
            count,
            rate: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ManifestSummary {
    pub records: usize,
    pub identities: usize,
    pub fields: BTreeMap<String, FieldStats>,
    pub rates: BTreeMap<String, Rate>,
    /// Identities per ethnicity label.
    pub ethnicity_counts: BTreeMap<String, usize>,
    pub hdri_counts: BTreeMap<String, usize>,
    pub resolution_counts: BTreeMap<u32, usize>,
    pub expression_counts: BTreeMap<String, usize>,
}

/// Read-only aggregation over every record.
///
/// Rates are computed over the records where the flag can fire: batch-1 flags
/// over batch-1 records, batch-2 flags over batch-2 records, beard over male
/// records, and glasses over everything.
pub fn summarize_manifest(manifest: &DatasetManifest) -> ManifestSummary {
    let recs = &manifest.records;
    let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut push = |k: &'static str, v: f64| columns.entry(k).or_default().push(v);
    for r in recs {
        push("head_pose.yaw", r.head_pose.yaw);
        push("head_pose.pitch", r.head_pose.pitch);
        push("head_pose.roll", r.head_pose.roll);
        push("camera_pose.yaw", r.camera_pose.yaw);
        push("camera_pose.pitch", r.camera_pose.pitch);
        push("camera_pose.roll", r.camera_pose.roll);
        push("hdri_rotation", r.hdri_rotation);
        push("gaze.horizontal", r.gaze.horizontal);
        push("gaze.vertical", r.gaze.vertical);
        push("gaze.distance", r.gaze.distance);
        push("hair_color.melanin", r.hair_color.melanin);
        push("hair_color.whiteness", r.hair_color.whiteness);
        push("hair_color.roughness", r.hair_color.roughness);
        push("hair_color.redness", r.hair_color.redness);
    }
    let fields = columns
        .into_iter()
        .map(|(k, v)| (k.to_string(), FieldStats::from_values(&v)))
        .collect();

    let count = |pred: &dyn Fn(&crate::sampler::SceneConfig) -> bool| recs.iter().filter(|r| pred(r)).count();
    let b1 = count(&|r| r.variance_batch == 1);
    let b2 = count(&|r| r.variance_batch == 2);
    let males = count(&|r| r.identity.gender == crate::sampler::Gender::Male);
    let mut rates = BTreeMap::new();
    let mut rate = |name: &str, hits: usize, n: usize| {
        rates.insert(name.to_string(), Rate::new(hits, n));
    };
    rate("batch2", b2, recs.len());
    rate("batch1.makeup", count(&|r| r.variance_batch == 1 && r.accessories.makeup), b1);
    rate("batch1.occlusion", count(&|r| r.variance_batch == 1 && r.accessories.occlusion), b1);
    rate("batch1.hat", count(&|r| r.variance_batch == 1 && r.accessories.hat), b1);
    rate("batch2.makeup", count(&|r| r.variance_batch == 2 && r.accessories.makeup), b2);
    rate("batch2.occlusion", count(&|r| r.variance_batch == 2 && r.accessories.occlusion), b2);
    rate("batch2.hat", count(&|r| r.variance_batch == 2 && r.accessories.hat), b2);
    rate(
        "batch2.random_expression",
        count(&|r| r.variance_batch == 2 && matches!(r.expression, Expression::ActionUnits { .. })),
        b2,
    );
    rate("beard_if_male", count(&|r| r.accessories.beard), males);
    rate("glasses", count(&|r| r.accessories.glasses), recs.len());
    rate("hat", count(&|r| r.accessories.hat), recs.len());
    rate("makeup", count(&|r| r.accessories.makeup), recs.len());
    rate("occlusion", count(&|r| r.accessories.occlusion), recs.len());

    let mut ethnicity_counts = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut hdri_counts = BTreeMap::new();
    let mut resolution_counts = BTreeMap::new();
    let mut expression_counts = BTreeMap::new();
    for r in recs {
        if seen.insert(r.identity_id) {
            *ethnicity_counts.entry(r.identity.ethnicity.clone()).or_insert(0) += 1;
        }
        *hdri_counts.entry(r.hdri_period.name().to_string()).or_insert(0) += 1;
        *resolution_counts.entry(r.resolution).or_insert(0) += 1;
        let key = match &r.expression {
            Expression::Preset(p) => p.name().to_string(),
            Expression::ActionUnits { .. } => "action_units".to_string(),
        };
        *expression_counts.entry(key).or_insert(0) += 1;
    }

    ManifestSummary {
        records: recs.len(),
        identities: seen.len(),
        fields,
        rates,
        ethnicity_counts,
        hdri_counts,
        resolution_counts,
        expression_counts,
    }
}

impl ManifestSummary {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "records     {}", self.records);
        let _ = writeln!(s, "identities  {}", self.identities);
        if self.records == 0 {
            let _ = writeln!(s, "(empty manifest: all statistics undefined)");
        }
        let _ = writeln!(s, "\n{:<24} {:>10} {:>10} {:>10} {:>10}", "field", "mean", "std", "min", "max");
        for (k, f) in &self.fields {
            let _ = writeln!(s, "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", k, f.mean, f.std, f.min, f.max);
        }
        let _ = writeln!(s, "\n{:<26} {:>8} {:>8} {:>8}", "flag", "hits", "of", "rate");
        for (k, r) in &self.rates {
            let _ = writeln!(s, "{:<26} {:>8} {:>8} {:>8.4}", k, r.hits, r.count, r.rate);
        }
        let _ = writeln!(s, "\nethnicity (identities)");
        for (k, v) in &self.ethnicity_counts {
            let _ = writeln!(s, "  {k:<22} {v}");
        }
        let _ = writeln!(s, "hdri period");
        for (k, v) in &self.hdri_counts {
            let _ = writeln!(s, "  {k:<22} {v}");
        }
        let _ = writeln!(s, "resolution");
        for (k, v) in &self.resolution_counts {
            let _ = writeln!(s, "  {k:<22} {v}");
        }
        let _ = writeln!(s, "expression");
        for (k, v) in &self.expression_counts {
            let _ = writeln!(s, "  {k:<22} {v}");
        }
        s
    }
}
