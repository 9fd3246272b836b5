//! Open-set verification: pairs files, embedding distances and the 10-fold
//! threshold protocol.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{Image, ALIGNED_SIZE};
use crate::error::{Error, Result};
use crate::nn::Encoder;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: String,
    pub b: String,
    pub same: bool,
    pub fold: usize,
}

/// Image reference used by pairs files: `Alice 1` names `Alice_0001`.
pub fn image_ref(name: &str, index: usize) -> String {
    format!("{name}_{index:04}")
}

/// Parses the standard pairs format: a `<folds> <n>` header, then per fold
/// `2n` lines. Three-token lines are genuine, four-token lines impostor.
pub fn parse_pairs<R: BufRead>(reader: R, name: &str) -> Result<(usize, usize, Vec<VerificationPair>)> {
    let parse_err = |line: usize, message: String| Error::Parse { path: name.to_string(), line, message };
    let mut lines = reader.lines().enumerate();
    let (folds, per_class) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(parse_err(1, "missing header".into()));
        };
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let nums: Option<Vec<usize>> = t.iter().map(|s| s.parse().ok()).collect();
        match nums.as_deref() {
            Some([f, n]) if *f > 0 && *n > 0 => break (*f, *n),
            _ => return Err(parse_err(i + 1, format!("bad header {line:?}, expected `<folds> <pairs>`"))),
        }
    };
    let index = |s: &str, line: usize| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| parse_err(line, format!("bad image index {s:?}")))
    };
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ln = i + 1;
        let t: Vec<&str> = line.split_whitespace().collect();
        let fold = pairs.len() / (2 * per_class);
        let pair = match t.as_slice() {
            [n, i1, i2] => VerificationPair {
                a: image_ref(n, index(i1, ln)?),
                b: image_ref(n, index(i2, ln)?),
                same: true,
                fold,
            },
            [n1, i1, n2, i2] => VerificationPair {
                a: image_ref(n1, index(i1, ln)?),
                b: image_ref(n2, index(i2, ln)?),
                same: false,
                fold,
            },
            _ => return Err(parse_err(ln, format!("expected 3 or 4 fields, got {}", t.len()))),
        };
        pairs.push(pair);
    }
    if pairs.len() != folds * 2 * per_class {
        return Err(Error::validation(format!(
            "{name}: header declares {folds} x {} pairs, body has {}",
            2 * per_class,
            pairs.len()
        )));
    }
    for f in 0..folds {
        let genuine = pairs.iter().filter(|p| p.fold == f && p.same).count();
        if genuine != per_class {
            return Err(Error::validation(format!(
                "{name}: fold {f} has {genuine} genuine pairs, expected {per_class}"
            )));
        }
    }
    Ok((folds, per_class, pairs))
}

pub fn parse_pairs_file(path: &Path) -> Result<Vec<VerificationPair>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_pairs(BufReader::new(f), &path.display().to_string())?.2)
}

/// Writes pairs in the standard format. References must look like
/// `<name>_<index>`; pairs are emitted fold by fold, genuine first.
pub fn write_pairs_file(path: &Path, folds: usize, pairs: &[VerificationPair]) -> Result<()> {
    let split = |r: &str| -> Result<(String, usize)> {
        let (n, i) = r
            .rsplit_once('_')
            .ok_or_else(|| Error::validation(format!("image ref {r:?} lacks an _<index> suffix")))?;
        let i = i
            .parse()
            .map_err(|_| Error::validation(format!("image ref {r:?} has a non-numeric index")))?;
        Ok((n.to_string(), i))
    };
    let per_class = pairs.iter().filter(|p| p.same && p.fold == 0).count();
    let mut out = format!("{folds}\t{per_class}\n");
    for f in 0..folds {
        for same in [true, false] {
            for p in pairs.iter().filter(|p| p.fold == f && p.same == same) {
                let (na, ia) = split(&p.a)?;
                let (nb, ib) = split(&p.b)?;
                if same {
                    if na != nb {
                        return Err(Error::validation(format!("genuine pair {} / {} names differ", p.a, p.b)));
                    }
                    out.push_str(&format!("{na}\t{ia}\t{ib}\n"));
                } else {
                    out.push_str(&format!("{na}\t{ia}\t{nb}\t{ib}\n"));
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Euclidean distance of unit-normalized embeddings.
    #[default]
    L2,
    /// `1 - cos`.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            o => Err(Error::validation(format!("unknown metric {o:?} (expected l2 or cosine)"))),
        }
    }
}

pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::validation(format!("cannot normalize embedding with norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Distance between two embeddings after unit normalization.
pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!("embedding dims differ: {} vs {}", a.len(), b.len())));
    }
    let (a, b) = (normalized(a)?, normalized(b)?);
    Ok(match metric {
        Metric::L2 => a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => 1.0 - a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub pair: VerificationPair,
    pub distance: f64,
}

/// Source of embeddings keyed by image reference.
pub trait EmbeddingSource: Sync {
    fn embedding(&self, image_ref: &str) -> Result<Vec<f64>>;
}

pub fn pair_distances(
    pairs: &[VerificationPair],
    source: &dyn EmbeddingSource,
    metric: Metric,
) -> Result<Vec<DistanceRecord>> {
    pairs
        .iter()
        .map(|p| {
            let d = distance(&source.embedding(&p.a)?, &source.embedding(&p.b)?, metric)?;
            if !d.is_finite() {
                return Err(Error::validation(format!("non-finite distance for {} / {}", p.a, p.b)));
            }
            Ok(DistanceRecord { pair: p.clone(), distance: d.max(0.0) })
        })
        .collect()
}

/// Fraction of records where `distance < threshold` agrees with the label.
pub fn threshold_accuracy(records: &[DistanceRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("threshold_accuracy on an empty record list"));
    }
    let ok = records
        .iter()
        .filter(|r| (r.distance < threshold) == r.pair.same)
        .count();
    Ok(ok as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    /// `lo, lo + step, ...` up to `hi` inclusive.
    Grid { lo: f64, hi: f64, step: f64 },
    /// Smallest training distance, every midpoint between consecutive
    /// distinct training distances, and the largest plus one.
    Midpoints,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep::Grid { lo: 0.0, hi: 2.0, step: 0.001 }
    }
}

impl Sweep {
    fn candidates(&self, train: &[f64]) -> Result<Vec<f64>> {
        match *self {
            Sweep::Grid { lo, hi, step } => {
                if !(step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::validation(format!("bad sweep grid [{lo}, {hi}] step {step}")));
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                Ok((0..=n).map(|i| lo + i as f64 * step).collect())
            }
            Sweep::Midpoints => {
                let mut v = train.to_vec();
                v.sort_by(f64::total_cmp);
                v.dedup();
                let mut out = Vec::with_capacity(v.len() + 1);
                if let Some(first) = v.first() {
                    out.push(*first);
                }
                out.extend(v.windows(2).map(|w| (w[0] + w[1]) / 2.0));
                if let Some(last) = v.last() {
                    out.push(last + 1.0);
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub threshold: f64,
    /// Accuracy on the held-out fold.
    pub accuracy: f64,
    /// Accuracy of the chosen threshold on the other folds.
    pub train_accuracy: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

/// Counts of genuine and impostor distances in sorted order, for
/// logarithmic-time accuracy at any threshold.
struct Sorted {
    same: Vec<f64>,
    diff: Vec<f64>,
}

impl Sorted {
    fn new<'a>(records: impl Iterator<Item = &'a DistanceRecord>) -> Self {
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        for r in records {
            if r.pair.same {
                same.push(r.distance);
            } else {
                diff.push(r.distance);
            }
        }
        same.sort_by(f64::total_cmp);
        diff.sort_by(f64::total_cmp);
        Self { same, diff }
    }

    fn correct(&self, t: f64) -> usize {
        let same_below = self.same.partition_point(|d| *d < t);
        let diff_below = self.diff.partition_point(|d| *d < t);
        same_below + self.diff.len() - diff_below
    }

    fn len(&self) -> usize {
        self.same.len() + self.diff.len()
    }
}

/// k-fold threshold protocol over the folds `0..k` named in the records.
pub fn k_fold_accuracy(records: &[DistanceRecord], k: usize, sweep: &Sweep) -> Result<AccuracyReport> {
    if k < 2 {
        return Err(Error::validation(format!("cross-validation needs at least two folds, got {k}")));
    }
    if let Some(r) = records.iter().find(|r| r.pair.fold >= k) {
        return Err(Error::validation(format!("pair in fold {} but only {k} folds", r.pair.fold)));
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<DistanceRecord> = records.iter().filter(|r| r.pair.fold == f).cloned().collect();
        if test.is_empty() {
            return Err(Error::validation(format!("fold {f} has no pairs")));
        }
        let train = Sorted::new(records.iter().filter(|r| r.pair.fold != f));
        if train.len() == 0 {
            return Err(Error::validation("no training folds"));
        }
        let train_d: Vec<f64> = train.same.iter().chain(&train.diff).copied().collect();
        let mut best = (f64::NAN, 0usize);
        for t in sweep.candidates(&train_d)? {
            let c = train.correct(t);
            // Strict improvement keeps the smallest threshold on ties.
            if best.0.is_nan() || c > best.1 {
                best = (t, c);
            }
        }
        folds.push(FoldResult {
            fold: f,
            threshold: best.0,
            accuracy: threshold_accuracy(&test, best.0)?,
            train_accuracy: best.1 as f64 / train.len() as f64,
            pairs: test.len(),
        });
    }
    let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / k as f64;
    let var = folds.iter().map(|f| (f.accuracy - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(AccuracyReport { folds, mean, std: var.sqrt() })
}

pub fn ten_fold_accuracy(records: &[DistanceRecord], sweep: &Sweep) -> Result<AccuracyReport> {
    k_fold_accuracy(records, 10, sweep)
}

/// Maps an aligned 112x112 `[0, 1]` crop to an embedding.
pub trait Embedder: Sync {
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

impl Embedder for Encoder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        self.embed_image(image)
    }
}

/// Concatenates the embeddings of the crop and its mirror image.
pub struct FlipConcat<E>(pub E);

impl<E: Embedder> Embedder for FlipConcat<E> {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let mut v = self.0.embed(image)?;
        v.extend(self.0.embed(&image.flip_horizontal())?);
        Ok(v)
    }
}

/// Finds `<dir>/<ref>.<ext>` or, for `Name_0001` refs, `<dir>/Name/Name_0001.<ext>`.
pub fn resolve_image(dir: &Path, image_ref: &str) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    let direct = dir.join(image_ref);
    if direct.extension().is_some() {
        candidates.push(direct.clone());
    }
    for ext in ["png", "jpg", "jpeg"] {
        candidates.push(dir.join(format!("{image_ref}.{ext}")));
        if let Some((name, _)) = image_ref.rsplit_once('_') {
            candidates.push(dir.join(name).join(format!("{image_ref}.{ext}")));
        }
    }
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Missing(format!("no image for {image_ref:?} under {}", dir.display())))
}

/// Embeds images from a directory on demand.
pub struct ImageDirSource<'a> {
    pub dir: PathBuf,
    pub embedder: &'a dyn Embedder,
}

impl EmbeddingSource for ImageDirSource<'_> {
    fn embedding(&self, image_ref: &str) -> Result<Vec<f64>> {
        let path = resolve_image(&self.dir, image_ref)?;
        let img = Image::load(&path)?;
        if img.width() != ALIGNED_SIZE || img.height() != ALIGNED_SIZE {
            return Err(Error::validation(format!(
                "{} is {}x{}, expected an aligned {ALIGNED_SIZE}x{ALIGNED_SIZE} crop",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        self.embedder
            .embed(&img)
            .map_err(|e| Error::validation(format!("embedding {image_ref}: {e}")))
    }
}

/// In-memory embedding table with a binary on-disk form: a binary file of
/// `(id, D f64)` records and a `<file>.idx` text index of `id<TAB>offset`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
}

const STORE_MAGIC: &[u8; 8] = b"SFEMB\x00\x01\x00";

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::validation(format!("{id}: embedding dim {} != {}", v.len(), self.dim)));
        }
        match self.index.get(id) {
            Some(i) => self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(v),
            None => {
                self.index.insert(id.to_string(), self.ids.len());
                self.ids.push(id.to_string());
                self.vectors.extend_from_slice(v);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Embeds every reference in parallel; failures name the image.
    pub fn build(refs: &[String], source: &dyn EmbeddingSource) -> Result<Self> {
        let mut unique = refs.to_vec();
        unique.sort();
        unique.dedup();
        let vecs: Vec<Vec<f64>> = unique
            .par_iter()
            .map(|r| source.embedding(r))
            .collect::<Result<_>>()?;
        let mut store = Self::new(vecs.first().map_or(0, Vec::len));
        for (r, v) in unique.iter().zip(&vecs) {
            store.insert(r, v)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bin = Vec::new();
        bin.extend_from_slice(STORE_MAGIC);
        bin.extend_from_slice(&(self.dim as u32).to_le_bytes());
        bin.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        let mut idx = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            idx.push_str(&format!("{id}\t{}\n", bin.len()));
            bin.extend_from_slice(&(id.len() as u32).to_le_bytes());
            bin.extend_from_slice(id.as_bytes());
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bin).map_err(|e| Error::io(path, e))?;
        let ip = index_path(path);
        std::fs::write(&ip, idx).map_err(|e| Error::io(&ip, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bin = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bin))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::validation(format!("{}: {m}", path.display()));
        if bin.len() < 20 || &bin[..8] != STORE_MAGIC {
            return Err(bad("not an embedding store"));
        }
        let dim = u32::from_le_bytes(bin[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bin[12..20].try_into().expect("8 bytes")) as usize;
        let mut store = Self::new(dim);
        let mut pos = 20;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bin.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("id is not UTF-8"))?;
            let v: Vec<f64> = take(8 * dim)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(&id, &v)?;
        }
        Ok(store)
    }
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

impl EmbeddingSource for EmbeddingStore {
    fn embedding(&self, image_ref: &str) -> Result<Vec<f64>> {
        self.get(image_ref)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Missing(format!("no embedding for image {image_ref:?}")))
    }
}

/// Distances and the k-fold report for a pairs list, k being the number of
/// folds it names.
pub fn evaluate_pairs(
    pairs: &[VerificationPair],
    source: &dyn EmbeddingSource,
    metric: Metric,
    sweep: &Sweep,
) -> Result<(AccuracyReport, Vec<DistanceRecord>)> {
    let records = pair_distances(pairs, source, metric)?;
    let folds = pairs.iter().map(|p| p.fold + 1).max().unwrap_or(0);
    Ok((k_fold_accuracy(&records, folds, sweep)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(d: f64, same: bool, fold: usize) -> DistanceRecord {
        DistanceRecord {
            pair: VerificationPair { a: "x_0001".into(), b: "y_0001".into(), same, fold },
            distance: d,
        }
    }

    #[test]
    fn pairs_file_parsing() {
        let text = "2 1\nAlice 1 4\nAlice 1 Bob 2\nCarol 2 3\nDan 1 Eve 1\n";
        let (f, n, pairs) = parse_pairs(text.as_bytes(), "p").unwrap();
        assert_eq!((f, n, pairs.len()), (2, 1, 4));
        assert_eq!(pairs[0], VerificationPair { a: "Alice_0001".into(), b: "Alice_0004".into(), same: true, fold: 0 });
        assert!(!pairs[1].same);
        assert_eq!(pairs[3].fold, 1);
        let err = parse_pairs("2 1\nAlice 1 4\nAlice x Bob 2\n".as_bytes(), "p").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_pairs("2 1\nAlice 1 4\nAlice 1 Bob 2\n".as_bytes(), "p").unwrap_err();
        assert!(err.is_validation());
        let err = parse_pairs("1 1\nA 1 2 3 4 5\nB 1 2\n".as_bytes(), "p").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn header_of_ten_by_three_hundred() {
        let mut text = String::from("10 300\n");
        for f in 0..10 {
            for i in 0..300 {
                text.push_str(&format!("P{f}x{i} 1 2\n"));
            }
            for i in 0..300 {
                text.push_str(&format!("Q{f}x{i} 1 R{i} 3\n"));
            }
        }
        assert_eq!(parse_pairs(text.as_bytes(), "p").unwrap().2.len(), 6000);
    }

    #[test]
    fn pairs_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = "2 1\nAlice 1 4\nAlice 1 Bob 2\nCarol 2 3\nDan 1 Eve 1\n";
        let pairs = parse_pairs(text.as_bytes(), "p").unwrap().2;
        let p = dir.path().join("pairs.txt");
        write_pairs_file(&p, 2, &pairs).unwrap();
        assert_eq!(parse_pairs_file(&p).unwrap(), pairs);
    }

    #[test]
    fn geometric_distances() {
        assert_eq!(distance(&[1.0, 0.0], &[2.0, 0.0], Metric::L2).unwrap(), 0.0);
        assert!((distance(&[1.0, 0.0], &[0.0, 3.0], Metric::L2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((distance(&[1.0, 0.0], &[-1.0, 0.0], Metric::L2).unwrap() - 2.0).abs() < 1e-15);
        assert!((distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Cosine).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_embedding_names_image() {
        let store = EmbeddingStore::new(2);
        let pairs = [VerificationPair { a: "Zed_0001".into(), b: "Zed_0002".into(), same: true, fold: 0 }];
        let err = pair_distances(&pairs, &store, Metric::L2).unwrap_err();
        assert!(err.to_string().contains("Zed_0001"));
    }

    #[test]
    fn degenerate_thresholds() {
        let rs = vec![rec(0.1, true, 0), rec(0.9, false, 0), rec(0.9, false, 0), rec(0.2, true, 0), rec(0.5, false, 0)];
        assert_eq!(threshold_accuracy(&rs, 0.5).unwrap(), 1.0);
        assert_eq!(threshold_accuracy(&rs, 0.0).unwrap(), 3.0 / 5.0);
        assert_eq!(threshold_accuracy(&rs, f64::INFINITY).unwrap(), 2.0 / 5.0);
        assert!(threshold_accuracy(&[], 0.5).is_err());
    }

    #[test]
    fn separable_folds_are_perfect() {
        let rs: Vec<_> = (0..10)
            .flat_map(|f| (0..6).map(move |i| rec(if i < 3 { 0.1 } else { 0.9 }, i < 3, f)))
            .collect();
        let r = ten_fold_accuracy(&rs, &Sweep::default()).unwrap();
        assert_eq!((r.mean, r.std), (1.0, 0.0));
        assert!(r.folds.iter().all(|f| (f.threshold - 0.101).abs() < 1e-12));
    }

    #[test]
    fn all_equal_distances() {
        // 4 genuine and 2 impostor pairs per fold.
        let rs: Vec<_> = (0..10).flat_map(|f| (0..6).map(move |i| rec(0.7, i < 4, f))).collect();
        for sweep in [Sweep::default(), Sweep::Midpoints] {
            let r = ten_fold_accuracy(&rs, &sweep).unwrap();
            assert!((r.mean - 4.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_fold_is_an_error() {
        let rs: Vec<_> = (0..9).map(|f| rec(0.5, true, f)).collect();
        assert!(ten_fold_accuracy(&rs, &Sweep::default()).is_err());
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = EmbeddingStore::new(3);
        s.insert("a_0001", &[1.0, 2.0, 3.0]).unwrap();
        s.insert("b_0002", &[-1.0, 0.5, f64::MIN_POSITIVE]).unwrap();
        let p = dir.path().join("emb.bin");
        s.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p).unwrap(), s);
        let idx = std::fs::read_to_string(index_path(&p)).unwrap();
        assert_eq!(idx.lines().count(), 2);
        assert!(s.insert("c", &[1.0]).is_err());
    }

    fn random_records(seed: u64, folds: usize, per: usize) -> Vec<DistanceRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..folds)
            .flat_map(|f| (0..per).map(move |i| (f, i)))
            .map(|(f, i)| {
                let same = i % 2 == 0;
                let d = rng.random_range(0.0..1.2) + if same { 0.0 } else { 0.4 };
                rec(d, same, f)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn fold_relabeling_permutes_results(seed in 0u64..500, shift in 1usize..10) {
            let rs = random_records(seed, 10, 8);
            let moved: Vec<_> = rs.iter().map(|r| {
                let mut r = r.clone();
                r.pair.fold = (r.pair.fold + shift) % 10;
                r
            }).collect();
            let a = ten_fold_accuracy(&rs, &Sweep::Midpoints).unwrap();
            let b = ten_fold_accuracy(&moved, &Sweep::Midpoints).unwrap();
            for f in 0..10 {
                let g = (f + shift) % 10;
                prop_assert_eq!(a.folds[f].accuracy, b.folds[g].accuracy);
                prop_assert_eq!(a.folds[f].threshold, b.folds[g].threshold);
            }
            prop_assert!((a.mean - b.mean).abs() < 1e-15);
        }

        #[test]
        fn l2_and_cosine_give_the_same_report(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = EmbeddingStore::new(6);
            let ids: Vec<String> = (0..40).map(|i| image_ref("id", i)).collect();
            for id in &ids {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                store.insert(id, &v).unwrap();
            }
            // Distinct ends only: a self-pair is an exact L2 zero but cosine rounding noise.
            let pairs: Vec<_> = (0..60).map(|i| {
                let a = rng.random_range(0..40);
                let b = (a + rng.random_range(1..40)) % 40;
                VerificationPair { a: ids[a].clone(), b: ids[b].clone(), same: i % 2 == 0, fold: i / 6 }
            }).collect();
            let l2 = pair_distances(&pairs, &store, Metric::L2).unwrap();
            let cos = pair_distances(&pairs, &store, Metric::Cosine).unwrap();
            // |a - b|^2 = 2 (1 - cos) for unit vectors, so L2 threshold t
            // corresponds to cosine threshold t^2 / 2.
            for _ in 0..50 {
                let t: f64 = rng.random_range(0.0..2.0);
                prop_assert_eq!(threshold_accuracy(&l2, t).unwrap(), threshold_accuracy(&cos, t * t / 2.0).unwrap());
            }
            let a = ten_fold_accuracy(&l2, &Sweep::Midpoints).unwrap();
            let b = ten_fold_accuracy(&cos, &Sweep::Midpoints).unwrap();
            for (fa, fb) in a.folds.iter().zip(&b.folds) {
                prop_assert_eq!(fa.train_accuracy, fb.train_accuracy);
            }
        }

        #[test]
        fn halving_the_grid_step_moves_at_most_one_pair(seed in 0u64..300) {
            let rs = random_records(seed, 10, 6);
            let coarse = ten_fold_accuracy(&rs, &Sweep::Grid { lo: 0.0, hi: 2.0, step: 0.002 }).unwrap();
            let fine = ten_fold_accuracy(&rs, &Sweep::default()).unwrap();
            for (c, f) in coarse.folds.iter().zip(&fine.folds) {
                prop_assert!(((c.accuracy - f.accuracy) * f.pairs as f64).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
