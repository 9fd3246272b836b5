use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{SamplerConfig, POSE_LIMITS};
use super::pool::{sample_identity_pool, Gender, IdentityRecord, IdentityTraits};
use super::scene::{sample_scene_config, Expression, SceneConfig};
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_FORMAT: &str = "synthface-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub identities: usize,
    pub samples_per_identity: usize,
    pub records: usize,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<SceneConfig>,
}

/// Samples every identity and scene for `cfg` under `seed`.
///
/// Identity `i` samples scene `j` from `derive_index(derive_index(scene_seed, i), j)`,
/// so identities are sampled in parallel and merged back in id order.
pub fn build_manifest(cfg: &SamplerConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let pool = sample_identity_pool(
        cfg.identities,
        &cfg.demographics,
        &cfg.traits,
        seed::derive(seed, "identity-pool"),
    )?;
    let scene_seed = seed::derive(seed, "scene");
    let per_identity: Vec<Vec<SceneConfig>> = pool
        .par_iter()
        .map(|identity| sample_identity_scenes(identity, cfg, scene_seed))
        .collect();
    let records: Vec<SceneConfig> = per_identity.into_iter().flatten().collect();
    Ok(DatasetManifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            seed,
            identities: cfg.identities,
            samples_per_identity: cfg.samples_per_identity,
            records: records.len(),
            sampler: cfg.clone(),
        },
        records,
    })
}

pub fn sample_identity_scenes(
    identity: &IdentityRecord,
    cfg: &SamplerConfig,
    scene_seed: u64,
) -> Vec<SceneConfig> {
    let id_seed = seed::derive_index(scene_seed, u64::from(identity.identity_id));
    (0..cfg.samples_per_identity as u32)
        .map(|j| sample_scene_config(identity, j, cfg, seed::derive_index(id_seed, u64::from(j))))
        .collect()
}

impl DatasetManifest {
    /// Header line then one record per line, `\n`-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)
            .map_err(|e| Error::json("manifest header", e))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::json("manifest record", e))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(file), &path.display().to_string())
    }

    pub fn parse<R: BufRead>(reader: R, name: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: name.to_string(),
            line,
            message,
        };
        let mut lines = reader.lines().enumerate();
        let header: ManifestHeader = loop {
            match lines.next() {
                None => return Err(parse_err(1, "empty manifest: missing header line".into())),
                Some((i, line)) => {
                    let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line)
                        .map_err(|e| parse_err(i + 1, format!("bad header: {e}")))?;
                }
            }
        };
        if header.format != MANIFEST_FORMAT {
            return Err(parse_err(1, format!("unknown manifest format '{}'", header.format)));
        }
        let mut records = Vec::with_capacity(header.records);
        for (i, line) in lines {
            let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SceneConfig =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            records.push(rec);
        }
        Ok(Self { header, records })
    }

    /// Records grouped by identity, identities in ascending id order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<&SceneConfig>> {
        let mut map: BTreeMap<u32, Vec<&SceneConfig>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.identity_id).or_default().push(r);
        }
        map
    }
}

/// One invariant breach, located by record position when it concerns a record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// 0-based record index; the file line is `record + 2`.
    pub record: Option<usize>,
    pub identity_id: Option<u32>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.record, self.identity_id) {
            (Some(r), Some(id)) => write!(f, "record {r} (line {}, identity {id}): {}", r + 2, self.message),
            (None, Some(id)) => write!(f, "identity {id}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

/// Every invariant violation in `manifest`; empty iff the manifest is valid.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let h = &manifest.header;
    let cfg = &h.sampler;
    let global = |out: &mut Vec<Violation>, message: String| {
        out.push(Violation {
            record: None,
            identity_id: None,
            message,
        })
    };

    if let Err(e) = cfg.validate() {
        global(&mut out, format!("header sampler config: {e}"));
    }
    if h.version != MANIFEST_VERSION {
        global(&mut out, format!("unsupported version {}", h.version));
    }
    if h.records != manifest.records.len() {
        global(
            &mut out,
            format!("header declares {} records, found {}", h.records, manifest.records.len()),
        );
    }
    if h.identities * h.samples_per_identity != manifest.records.len() {
        global(
            &mut out,
            format!(
                "record count {} != identities {} x samples_per_identity {}",
                manifest.records.len(),
                h.identities,
                h.samples_per_identity
            ),
        );
    }

    let pose_limits = ["yaw", "pitch", "roll"].into_iter().zip(POSE_LIMITS);
    let hair = cfg.hair_color.interval();
    let mut per_identity: BTreeMap<u32, (usize, Vec<u32>, &IdentityTraits)> = BTreeMap::new();

    for (i, r) in manifest.records.iter().enumerate() {
        let mut bad = |message: String| {
            out.push(Violation {
                record: Some(i),
                identity_id: Some(r.identity_id),
                message,
            })
        };
        let entry = per_identity
            .entry(r.identity_id)
            .or_insert((i, Vec::new(), &r.identity));
        entry.1.push(r.sample_index);
        if entry.2 != &r.identity {
            bad(format!(
                "identity traits differ from the first record of this identity (record {})",
                entry.0
            ));
        }

        if r.sample_index as usize >= h.samples_per_identity {
            bad(format!(
                "sample_index {} >= samples_per_identity {}",
                r.sample_index, h.samples_per_identity
            ));
        }
        if r.resolution != 256 && r.resolution != 512 {
            bad(format!("resolution {} not in {{256, 512}}", r.resolution));
        }
        for (block, pose) in [("head_pose", &r.head_pose), ("camera_pose", &r.camera_pose)] {
            for ((axis, limit), v) in pose_limits.clone().zip([pose.yaw, pose.pitch, pose.roll]) {
                if !(v.is_finite() && v.abs() <= limit) {
                    bad(format!("{block}.{axis} = {v} outside [-{limit}, {limit}]"));
                }
            }
        }
        if !(r.hdri_rotation >= 0.0 && r.hdri_rotation < 360.0) {
            bad(format!("hdri_rotation {} outside [0, 360)", r.hdri_rotation));
        }
        for (name, range, v) in [
            ("gaze.horizontal", cfg.gaze.horizontal, r.gaze.horizontal),
            ("gaze.vertical", cfg.gaze.vertical, r.gaze.vertical),
            ("gaze.distance", cfg.gaze.distance, r.gaze.distance),
        ] {
            if !range.contains(v) {
                bad(format!("{name} = {v} outside [{}, {}]", range.lo(), range.hi()));
            }
        }
        for (name, v) in ["melanin", "whiteness", "roughness", "redness"]
            .iter()
            .zip(r.hair_color.values())
        {
            if !hair.contains(v) {
                bad(format!("hair_color.{name} = {v} outside [{}, {}]", hair.lo(), hair.hi()));
            }
        }
        if let Some(v) = r.expression_intensity {
            if !(0.0..=1.0).contains(&v) {
                bad(format!("expression_intensity {v} outside [0, 1]"));
            }
        }
        if let Expression::ActionUnits { eye, mouth } = &r.expression {
            if eye.is_none() && mouth.is_none() {
                bad("action-unit expression without any unit".into());
            }
            if let Some(e) = eye {
                if !cfg.action_units.eye.contains(e) {
                    bad(format!("unknown eye action unit '{e}'"));
                }
            }
            if let Some(m) = mouth {
                if !cfg.action_units.mouth.contains(m) {
                    bad(format!("unknown mouth action unit '{m}'"));
                }
            }
        }
        let a = &r.accessories;
        if a.beard && r.identity.gender != Gender::Male {
            bad("beard on a non-male identity".into());
        }
        match r.variance_batch {
            1 => {
                let n = [a.makeup, a.occlusion, a.hat].iter().filter(|x| **x).count();
                if n > 1 {
                    bad(format!("batch-1 record has {n} exclusive additions"));
                }
                if matches!(r.expression, Expression::ActionUnits { .. }) {
                    bad("batch-1 record has a randomized expression".into());
                }
            }
            2 => {}
            b => bad(format!("variance_batch {b} not in {{1, 2}}")),
        }
    }

    if per_identity.len() != h.identities {
        global(
            &mut out,
            format!("header declares {} identities, found {}", h.identities, per_identity.len()),
        );
    }
    for (id, (_, mut indices, _)) in per_identity {
        let count = indices.len();
        if count != h.samples_per_identity {
            out.push(Violation {
                record: None,
                identity_id: Some(id),
                message: format!("{count} records, expected {}", h.samples_per_identity),
            });
        }
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            out.push(Violation {
                record: None,
                identity_id: Some(id),
                message: "duplicate sample_index".into(),
            });
        }
    }
    out
}

/// Identity ids mapped to their traits, as recorded in `manifest`.
pub fn identity_traits(manifest: &DatasetManifest) -> HashMap<u32, IdentityTraits> {
    manifest
        .records
        .iter()
        .map(|r| (r.identity_id, r.identity.clone()))
        .collect()
}
