use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::Image;
use super::similarity::{estimate_similarity_transform, LandmarkSet, DEFAULT_TEMPLATE};
use super::warp::{warp_and_crop, AlignedFace, Provenance};
use crate::error::{Error, Result};

/// Source of 5-point landmarks for an image reference.
pub trait LandmarkProvider {
    fn landmarks(&self, image_ref: &str) -> Result<LandmarkSet>;
}

/// Landmarks read from a CSV with header `path,x1,y1,...,x5,y5`.
#[derive(Debug, Clone, Default)]
pub struct CsvLandmarks {
    /// Rows in file order.
    pub rows: Vec<(String, LandmarkSet)>,
    index: HashMap<String, usize>,
    base_dir: PathBuf,
}

pub const LANDMARK_CSV_HEADER: [&str; 11] =
    ["path", "x1", "y1", "x2", "y2", "x3", "y3", "x4", "y4", "x5", "y5"];

impl CsvLandmarks {
    pub fn from_rows(rows: Vec<(String, LandmarkSet)>) -> Self {
        let index = rows.iter().enumerate().map(|(i, (p, _))| (p.clone(), i)).collect();
        Self {
            rows,
            index,
            base_dir: PathBuf::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Parse { path: name.clone(), line: 1, message: e.to_string() })?;
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse { path: name.clone(), line: 1, message: e.to_string() })?
            .clone();
        if header.iter().map(str::trim).ne(LANDMARK_CSV_HEADER) {
            return Err(Error::Parse {
                path: name,
                line: 1,
                message: format!("header must be `{}`", LANDMARK_CSV_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { path: name.clone(), line, message: e.to_string() })?;
            if rec.len() != 11 {
                return Err(Error::Parse {
                    path: name,
                    line,
                    message: format!("expected 11 fields, found {}", rec.len()),
                });
            }
            let mut points = [[0.0; 2]; 5];
            for k in 0..10 {
                let v: f64 = rec[k + 1].trim().parse().map_err(|_| Error::Parse {
                    path: name.clone(),
                    line,
                    message: format!("field {} is not a number: '{}'", LANDMARK_CSV_HEADER[k + 1], &rec[k + 1]),
                })?;
                points[k / 2][k % 2] = v;
            }
            rows.push((rec[0].trim().to_string(), LandmarkSet::new(points)));
        }
        let mut out = Self::from_rows(rows);
        out.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let io = |e: csv::Error| Error::Image { path: path.display().to_string(), message: e.to_string() };
        w.write_record(LANDMARK_CSV_HEADER).map_err(io)?;
        for (p, set) in &self.rows {
            let mut rec = vec![p.clone()];
            rec.extend(set.points.iter().flatten().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Image path resolved against the CSV's directory when relative.
    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

impl LandmarkProvider for CsvLandmarks {
    fn landmarks(&self, image_ref: &str) -> Result<LandmarkSet> {
        self.index
            .get(image_ref)
            .map(|i| self.rows[*i].1)
            .ok_or_else(|| Error::Missing(format!("no landmarks for '{image_ref}'")))
    }
}

/// Fits the similarity transform onto `template` and warps the crop.
pub fn align_image(
    image: &Image,
    landmarks: &LandmarkSet,
    template: &LandmarkSet,
    source: &str,
) -> Result<AlignedFace> {
    let transform = estimate_similarity_transform(landmarks, template)?;
    let mut face = warp_and_crop(image, &transform)?;
    face.provenance = Some(Provenance {
        source: source.to_string(),
        transform,
    });
    Ok(face)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub template: LandmarkSet,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE,
        }
    }
}

/// One aligned crop in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedEntry {
    pub source: String,
    pub identity: String,
    pub cache_file: String,
    pub reused: bool,
}

/// Content key of an aligned crop: hash of the source bytes, landmarks and template.
pub fn crop_key(source_bytes: &[u8], landmarks: &LandmarkSet, template: &LandmarkSet) -> String {
    let mut h = Sha256::new();
    h.update(source_bytes);
    for v in landmarks.points.iter().chain(&template.points).flatten() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..12])
}

/// Identity label of a rendered image path `<identity>/<file>`.
pub fn identity_of(image_ref: &str) -> String {
    Path::new(image_ref)
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Aligns every row of `landmarks` into `out/<identity>/<content-key>.png`.
///
/// Crops already present under their key are reused, not recomputed. When
/// `allowed` is given, a row whose identity is not in it is an error.
pub fn align_dataset(
    landmarks: &CsvLandmarks,
    cfg: &AlignConfig,
    out: &Path,
    allowed: Option<&BTreeMap<String, usize>>,
) -> Result<Vec<AlignedEntry>> {
    let mut entries = Vec::with_capacity(landmarks.rows.len());
    for (image_ref, set) in &landmarks.rows {
        let identity = identity_of(image_ref);
        if let Some(allowed) = allowed {
            if !allowed.contains_key(&identity) {
                return Err(Error::validation(format!(
                    "'{image_ref}': identity '{identity}' is not in the manifest"
                )));
            }
        }
        let path = landmarks.resolve(image_ref);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let key = crop_key(&bytes, set, &cfg.template);
        let rel = format!("{identity}/{key}.png");
        let dest = out.join(&rel);
        let reused = dest.exists();
        if !reused {
            let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let face = align_image(&Image::from_rgb8(&img.to_rgb8()), set, &cfg.template, image_ref)?;
            let tmp = dest.with_extension("png.tmp");
            face.image.save_png(&tmp)?;
            fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
        }
        entries.push(AlignedEntry {
            source: image_ref.clone(),
            identity,
            cache_file: rel,
            reused,
        });
    }
    let index = out.join("index.csv");
    let mut w = csv::Writer::from_path(&index).map_err(|e| Error::Image {
        path: index.display().to_string(),
        message: e.to_string(),
    })?;
    for e in &entries {
        w.serialize(e).map_err(|err| Error::Image {
            path: index.display().to_string(),
            message: err.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::SimilarityTransform;

    #[test]
    fn csv_roundtrip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.csv");
        let set = SimilarityTransform::from_params(2.0, 0.1, 10.0, 20.0).apply_set(&DEFAULT_TEMPLATE);
        CsvLandmarks::from_rows(vec![("7/03.png".into(), set)]).write(&p).unwrap();
        let back = CsvLandmarks::read(&p).unwrap();
        assert_eq!(back.landmarks("7/03.png").unwrap(), set);
        assert!(back.landmarks("nope.png").is_err());
        assert_eq!(back.resolve("7/03.png"), dir.path().join("7/03.png"));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.csv");
        fs::write(&p, "path,x1,y1,x2,y2,x3,y3,x4,y4,x5,y5\na.png,1,2,3,4,5,6,7,8,9,10\nb.png,1,2,3,x,5,6,7,8,9,10\n").unwrap();
        match CsvLandmarks::read(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "file,a\n").unwrap();
        assert!(matches!(CsvLandmarks::read(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn aligned_crop_is_cached_by_content() {
        let dir = tempfile::tempdir().unwrap();
        let src_dir = dir.path().join("render/12");
        fs::create_dir_all(&src_dir).unwrap();
        let mut img = Image::new(200, 200);
        for y in 0..200 {
            for x in 0..200 {
                img.put_pixel(x, y, [x as f32 / 200.0, y as f32 / 200.0, 0.5]);
            }
        }
        img.save_png(&src_dir.join("00.png")).unwrap();
        let set = SimilarityTransform::from_params(1.5, 0.05, 20.0, 15.0).apply_set(&DEFAULT_TEMPLATE);
        let csv_path = dir.path().join("render/landmarks.csv");
        CsvLandmarks::from_rows(vec![("12/00.png".into(), set)]).write(&csv_path).unwrap();
        let lm = CsvLandmarks::read(&csv_path).unwrap();
        let out = dir.path().join("aligned");
        let first = align_dataset(&lm, &AlignConfig::default(), &out, None).unwrap();
        assert_eq!(first.len(), 1);
        assert!(!first[0].reused);
        assert_eq!(first[0].identity, "12");
        let crop = Image::load(&out.join(&first[0].cache_file)).unwrap();
        assert_eq!((crop.width(), crop.height()), (112, 112));
        let second = align_dataset(&lm, &AlignConfig::default(), &out, None).unwrap();
        assert!(second[0].reused);
        assert_eq!(second[0].cache_file, first[0].cache_file);

        let mut allowed = BTreeMap::new();
        allowed.insert("3".to_string(), 20);
        assert!(align_dataset(&lm, &AlignConfig::default(), &out, Some(&allowed)).is_err());
    }
}
