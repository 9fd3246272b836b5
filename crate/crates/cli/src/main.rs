use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use synthface_core::align::{self, CsvLandmarks, Image, LandmarkProvider};
use synthface_core::config::RunConfig;
use synthface_core::data::{FaceDataset, InMemoryDataset};
use synthface_core::experiments::{self, ProbeCondition, SwapPolicy, VariantAxis};
use synthface_core::nn::Encoder;
use synthface_core::sampler::{self, DatasetManifest};
use synthface_core::trainer::{self, Checkpoint, Trainer};
use synthface_core::verifier::{self, EmbeddingSource, EmbeddingStore, Embedder, FlipConcat, ImageDirSource};
use synthface_core::{toy, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "synthface", version, about = "Synthetic face recognition experiments")]
struct Cli {
    /// TOML run configuration; defaults to $SYNTHFACE_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set margin.margin=0.3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Global seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a scene manifest from the sampler config.
    SampleManifest {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Check every manifest invariant; exits 2 when any fails.
    ValidateManifest { manifest: PathBuf },
    /// Print distribution statistics of a manifest.
    SummarizeManifest {
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Render a manifest with the built-in procedural face generator.
    RenderToy {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render side in pixels; defaults to each scene's resolution.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Deal fold-disjoint verification pairs over a manifest's identities.
    MakePairs {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Genuine and impostor pairs per fold.
        #[arg(long, default_value_t = 300)]
        per_fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align images listed in a landmark CSV into an identity-per-folder cache.
    Align {
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reject images whose identity folder is not in this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train an encoder and margin head from scratch.
    Train(TrainArgs),
    /// Fine-tune a pretrained encoder with a new head.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Ten-fold verification accuracy on a pairs file.
    Evaluate {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also store every embedding used.
        #[arg(long)]
        save_embeddings: Option<PathBuf>,
    },
    /// Copy baseline records with one attribute changed.
    DeriveVariants {
        #[arg(long)]
        baseline: PathBuf,
        /// hat, makeup, occlusion, glasses, beard, expression or hair_style.
        #[arg(long)]
        axis: String,
        /// Hair-cut labels for the hair_style axis.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        per_identity: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a fraction of baseline samples with their variants.
    Swap {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        variants: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        /// Fields variants may change, e.g. `accessories.hat`.
        #[arg(long, value_delimiter = ',')]
        axes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render controlled probe condition sets for one manifest record.
    MakeProbe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        identity: u32,
        #[arg(long, default_value_t = 0)]
        sample: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distances of probe conditions to a reference image.
    Probe {
        #[arg(long)]
        reference: String,
        /// JSON list of conditions.
        #[arg(long)]
        conditions: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune and train from scratch on growing real-identity subsets.
    FinetuneSweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Identity-per-folder tree of aligned crops.
        #[arg(long)]
        real: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        batches: Vec<usize>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Aligned crops referenced by the pairs file.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Landmark CSV of the unaligned pair images.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect run outputs into summary.md, results.json and curve files.
    Report { run_dir: PathBuf },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Identity-per-folder tree of aligned 112x112 crops.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the latest checkpoint under the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Encoder checkpoint used to embed images.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Precomputed embedding store; replaces --ckpt.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Aligned crops, `<dir>/<name>/<name>_0001.png`.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Landmark CSV of unaligned images; crops are aligned on the fly.
    #[arg(long)]
    landmarks: Option<PathBuf>,
}

/// Module a command's errors are attributed to.
fn module_of(cmd: &Command) -> &'static str {
    match cmd {
        Command::SampleManifest { .. } | Command::ValidateManifest { .. } | Command::SummarizeManifest { .. } => "sampler",
        Command::RenderToy { .. } | Command::MakePairs { .. } => "toy",
        Command::Align { .. } => "align",
        Command::Train(_) | Command::Finetune { .. } => "trainer",
        Command::Evaluate { .. } => "verifier",
        Command::DeriveVariants { .. }
        | Command::Swap { .. }
        | Command::MakeProbe { .. }
        | Command::Probe { .. }
        | Command::FinetuneSweep { .. }
        | Command::Report { .. } => "experiments",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let module = module_of(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = if e.is_validation() { (2, "validation") } else { (3, "runtime") };
            eprintln!("error[{module}/{kind}]: {e}");
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let body = serde_json::to_string_pretty(v).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

/// Snapshot next to a file output: `<file>.config.toml`.
fn snapshot_for_file(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    let p = out.with_file_name(name);
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))
}

/// `flag`, else `paths.<key>`, else an error naming both.
fn pick(flag: &Option<PathBuf>, cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None => cfg.require(key).map(Path::to_path_buf),
    }
}

fn read_manifest(p: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(p)
}

/// Landmark rows indexed by file stem, for aligning crops on demand.
struct LandmarkIndex {
    landmarks: CsvLandmarks,
    by_stem: HashMap<String, String>,
    template: align::LandmarkSet,
}

impl LandmarkIndex {
    fn read(path: &Path, template: align::LandmarkSet) -> Result<Self> {
        let landmarks = CsvLandmarks::read(path)?;
        let by_stem = landmarks
            .rows
            .iter()
            .filter_map(|(p, _)| Path::new(p).file_stem().map(|s| (s.to_string_lossy().into_owned(), p.clone())))
            .collect();
        Ok(Self { landmarks, by_stem, template })
    }

    fn crop(&self, image_ref: &str) -> Result<Image> {
        let row = self
            .by_stem
            .get(image_ref)
            .ok_or_else(|| Error::Missing(format!("no landmark row for image {image_ref:?}")))?;
        let img = Image::load(&self.landmarks.resolve(row))?;
        Ok(align::align_image(&img, &self.landmarks.landmarks(row)?, &self.template, row)?.image)
    }
}

/// Where evaluation crops come from: an aligned directory, or raw images
/// aligned through their landmarks.
#[derive(Clone)]
enum Crops {
    Dir(PathBuf),
    Landmarks(Arc<LandmarkIndex>),
}

enum Embed {
    Plain(Encoder),
    Flip(FlipConcat<Encoder>),
}

impl Embed {
    fn new(enc: Encoder, flip: bool) -> Self {
        if flip {
            Embed::Flip(FlipConcat(enc))
        } else {
            Embed::Plain(enc)
        }
    }

    fn as_dyn(&self) -> &dyn Embedder {
        match self {
            Embed::Plain(e) => e,
            Embed::Flip(e) => e,
        }
    }
}

struct EncoderSource {
    crops: Crops,
    embed: Embed,
}

impl EmbeddingSource for EncoderSource {
    fn embedding(&self, image_ref: &str) -> Result<Vec<f64>> {
        match &self.crops {
            Crops::Dir(dir) => ImageDirSource { dir: dir.clone(), embedder: self.embed.as_dyn() }.embedding(image_ref),
            Crops::Landmarks(index) => self
                .embed
                .as_dyn()
                .embed(&index.crop(image_ref)?)
                .map_err(|e| Error::validation(format!("embedding {image_ref}: {e}"))),
        }
    }
}

/// `--images`, else `--landmarks`, else the same keys under `paths`.
fn resolve_crops(images: &Option<PathBuf>, landmarks: &Option<PathBuf>, cfg: &RunConfig) -> Result<Crops> {
    let lm = |p: &Path| Ok(Crops::Landmarks(Arc::new(LandmarkIndex::read(p, cfg.align.template)?)));
    match (images, landmarks) {
        (Some(d), _) => Ok(Crops::Dir(d.clone())),
        (None, Some(p)) => lm(p),
        (None, None) => match (&cfg.paths.images, &cfg.paths.landmarks) {
            (Some(d), _) => Ok(Crops::Dir(d.clone())),
            (None, Some(p)) => lm(p),
            (None, None) => Err(Error::validation(
                "crops need --images or --landmarks (or paths.images / paths.landmarks)",
            )),
        },
    }
}

fn build_source(args: &SourceArgs, cfg: &RunConfig) -> Result<Box<dyn EmbeddingSource>> {
    if let Some(store) = &args.embeddings {
        return Ok(Box::new(EmbeddingStore::load(store)?));
    }
    let ckpt = args
        .ckpt
        .as_ref()
        .ok_or_else(|| Error::validation("either --ckpt or --embeddings is required"))?;
    let embed = Embed::new(Checkpoint::load(ckpt)?.encoder()?, cfg.eval.flip);
    Ok(Box::new(EncoderSource { crops: resolve_crops(&args.images, &args.landmarks, cfg)?, embed }))
}

fn train_data(args: &TrainArgs, cfg: &RunConfig) -> Result<(InMemoryDataset, PathBuf)> {
    let data = pick(&args.data, cfg, "images")?;
    let out = pick(&args.out, cfg, "output")?;
    let ds = InMemoryDataset::from_folders(&data, None)?;
    eprintln!("loaded {} crops of {} identities from {}", ds.len(), ds.num_classes(), data.display());
    Ok((ds, out))
}

fn resume_or(out: &Path, resume: bool, fresh: impl FnOnce() -> Result<Trainer>) -> Result<Trainer> {
    if resume {
        if let Some(p) = trainer::latest_checkpoint(out) {
            eprintln!("resuming from {}", p.display());
            return Trainer::from_checkpoint(Checkpoint::load(&p)?);
        }
    }
    fresh()
}

fn finish_training(t: &mut Trainer, data: &InMemoryDataset, out: &Path) -> Result<()> {
    t.run(data, Some(out))?;
    if let Some(m) = t.history().last() {
        println!("epoch {} loss {:.5} train accuracy {:.4}", m.epoch, m.loss, m.train_accuracy);
    }
    println!("checkpoint {}", trainer::checkpoint_path(out, t.progress().epoch).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::SampleManifest { out, identities, samples } => {
            let mut sc = cfg.sampler.clone();
            if let Some(n) = identities {
                sc.identities = *n;
            }
            if let Some(n) = samples {
                sc.samples_per_identity = *n;
            }
            let m = sampler::build_manifest(&sc, cfg.module_seed("sampler"))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            m.write(out)?;
            snapshot_for_file(&cfg, out)?;
            println!("{} records for {} identities -> {}", m.records.len(), m.header.identities, out.display());
        }
        Command::ValidateManifest { manifest } => {
            let m = read_manifest(manifest)?;
            let v = sampler::validate_manifest(&m);
            if v.is_empty() {
                println!("{}: {} records valid", manifest.display(), m.records.len());
            } else {
                for x in &v {
                    println!("{x}");
                }
                return Err(Error::validation(format!("{}: {} violations", manifest.display(), v.len())));
            }
        }
        Command::SummarizeManifest { manifest, json } => {
            let s = sampler::summarize_manifest(&read_manifest(manifest)?);
            if *json {
                println!("{}", serde_json::to_string_pretty(&s).map_err(|e| Error::json("summary", e))?);
            } else {
                print!("{}", s.to_table());
            }
        }
        Command::RenderToy { manifest, out, size } => {
            let m = read_manifest(manifest)?;
            create_dir(out)?;
            let n = toy::write_renders(&m, out, *size)?;
            cfg.write_snapshot(out)?;
            println!("rendered {n} images into {}", out.display());
        }
        Command::MakePairs { manifest, folds, per_fold, out } => {
            let m = read_manifest(manifest)?;
            let samples: BTreeMap<String, usize> =
                m.by_identity().into_iter().map(|(id, v)| (toy::identity_name(id), v.len())).collect();
            let pairs = toy::make_pairs(&samples, *folds, *per_fold, cfg.module_seed("pairs"))?;
            verifier::write_pairs_file(out, *folds, &pairs)?;
            snapshot_for_file(&cfg, out)?;
            println!("{} pairs in {folds} folds -> {}", pairs.len(), out.display());
        }
        Command::Align { landmarks, out, manifest } => {
            let lm = CsvLandmarks::read(&pick(landmarks, &cfg, "landmarks")?)?;
            let out = pick(out, &cfg, "output")?;
            create_dir(&out)?;
            let allowed: Option<BTreeMap<String, usize>> = match manifest.clone().or_else(|| cfg.paths.manifest.clone()) {
                Some(p) => Some(
                    read_manifest(&p)?
                        .by_identity()
                        .into_iter()
                        .map(|(id, v)| (toy::identity_name(id), v.len()))
                        .collect(),
                ),
                None => None,
            };
            let entries = align::align_dataset(&lm, &cfg.align, &out, allowed.as_ref())?;
            cfg.write_snapshot(&out)?;
            let reused = entries.iter().filter(|e| e.reused).count();
            println!("aligned {} images ({reused} reused) into {}", entries.len(), out.display());
        }
        Command::Train(args) => {
            let (data, out) = train_data(args, &cfg)?;
            cfg.write_snapshot(&out)?;
            let mut t = resume_or(&out, args.resume, || {
                let tc = &cfg.train;
                tc.validate()?;
                let model = trainer::Model::new(&tc.encoder, data.num_classes(), tc.seed)?;
                let groups = trainer::standard_param_groups(tc.base_lr, &model);
                Trainer::new(model, groups, tc.clone(), cfg.margin, cfg.augmentation.clone())
            })?;
            finish_training(&mut t, &data, &out)?;
        }
        Command::Finetune { ckpt, train } => {
            let pre = Checkpoint::load(ckpt)?;
            let (data, out) = train_data(train, &cfg)?;
            cfg.write_snapshot(&out)?;
            let mut t = resume_or(&out, train.resume, || {
                let encoder = pre.encoder()?;
                let tc = trainer::TrainConfig { encoder: encoder.spec().clone(), ..cfg.train.clone() };
                tc.validate()?;
                let model = trainer::Model::with_fresh_head(encoder, data.num_classes(), tc.seed);
                let groups = trainer::make_finetune_param_groups(tc.base_lr, &model);
                Trainer::new(model, groups, tc, cfg.margin, cfg.augmentation.clone())
            })?;
            finish_training(&mut t, &data, &out)?;
        }
        Command::Evaluate { source, pairs, out, save_embeddings } => {
            let pairs = verifier::parse_pairs_file(&pick(pairs, &cfg, "pairs")?)?;
            let out = pick(out, &cfg, "output")?;
            let src = build_source(source, &cfg)?;
            let (report, records) = if let Some(p) = save_embeddings {
                let mut refs: Vec<String> = pairs.iter().flat_map(|p| [p.a.clone(), p.b.clone()]).collect();
                refs.sort();
                refs.dedup();
                let store = EmbeddingStore::build(&refs, src.as_ref())?;
                store.save(p)?;
                verifier::evaluate_pairs(&pairs, &store, cfg.eval.metric, &cfg.eval.sweep)?
            } else {
                verifier::evaluate_pairs(&pairs, src.as_ref(), cfg.eval.metric, &cfg.eval.sweep)?
            };
            cfg.write_snapshot(&out)?;
            write_json(&out.join("report.json"), &report)?;
            let mut tsv = String::from("a\tb\tsame\tfold\tdistance\n");
            for r in &records {
                tsv.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.pair.a, r.pair.b, r.pair.same, r.pair.fold, r.distance));
            }
            let p = out.join("distances.tsv");
            fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
            for f in &report.folds {
                println!("fold {:2} threshold {:.4} accuracy {:.4}", f.fold + 1, f.threshold, f.accuracy);
            }
            println!("accuracy {:.4} +- {:.4}", report.mean, report.std);
        }
        Command::DeriveVariants { baseline, axis, labels, per_identity, out } => {
            let axis = parse_axis(axis, labels)?;
            let m = experiments::derive_variants(&read_manifest(baseline)?, &axis, *per_identity, cfg.module_seed("variants"))?;
            m.write(out)?;
            snapshot_for_file(&cfg, out)?;
            println!("{} variant records ({}) -> {}", m.records.len(), axis.fields().join(","), out.display());
        }
        Command::Swap { baseline, variants, fraction, axes, out } => {
            let policy = SwapPolicy {
                fraction: fraction.unwrap_or(cfg.swap.fraction),
                axes: if axes.is_empty() { cfg.swap.axes.clone() } else { axes.clone() },
            };
            if policy.axes.is_empty() {
                return Err(Error::validation("swap needs --axes or swap.axes"));
            }
            let (m, plan) = experiments::swap_variants(
                &read_manifest(baseline)?,
                &read_manifest(variants)?,
                &policy,
                cfg.module_seed("swap"),
            )?;
            m.write(out)?;
            snapshot_for_file(&cfg, out)?;
            write_json(&out.with_file_name("swap_plan.json"), &plan)?;
            println!("swapped {} of {} samples (target {})", plan.swapped, plan.total, plan.target);
        }
        Command::MakeProbe { manifest, identity, sample, out } => {
            let m = read_manifest(manifest)?;
            let scene = m
                .records
                .iter()
                .find(|s| s.identity_id == *identity && s.sample_index == *sample)
                .ok_or_else(|| Error::validation(format!("no record for identity {identity} sample {sample}")))?;
            let reference = experiments::probe_reference(scene, &cfg.probe);
            let traits = &m.header.sampler.traits;
            let (ref_name, sets) = experiments::build_probe_sets(
                &reference,
                &cfg.probe,
                traits.eyebrow_styles,
                traits.iris_textures,
                &traits.eye_colors,
            )?;
            write_probe(&ref_name, &sets, out)?;
            cfg.write_snapshot(out)?;
        }
        Command::Probe { reference, conditions, source, out } => {
            let raw = fs::read(conditions).map_err(|e| Error::io(conditions, e))?;
            let conds: Vec<ProbeCondition> =
                serde_json::from_slice(&raw).map_err(|e| Error::json(conditions.display().to_string(), e))?;
            let out = pick(out, &cfg, "output")?;
            let report = experiments::sensitivity_probe(reference, &conds, build_source(source, &cfg)?.as_ref())?;
            cfg.write_snapshot(&out)?;
            write_json(&out.join("probe.json"), &report)?;
            for c in &report.conditions {
                println!("{:<24} {:<10} {:.4} +- {:.4}", c.label, c.group, c.mean, c.std);
            }
            if let Some(d) = &report.difference {
                println!("altered - baseline {:.4} +- {:.4}", d.mean, d.std);
            }
        }
        Command::FinetuneSweep { ckpt, real, batches, pairs, images, landmarks, out } => {
            let pre = Checkpoint::load(ckpt)?;
            let pairs = verifier::parse_pairs_file(&pick(pairs, &cfg, "pairs")?)?;
            let crops = resolve_crops(images, landmarks, &cfg)?;
            let out = pick(out, &cfg, "output")?;
            let data = InMemoryDataset::from_folders(real, None)?;
            cfg.write_snapshot(&out)?;
            let flip = cfg.eval.flip;
            let make = move |enc: &Encoder| -> Box<dyn EmbeddingSource> {
                Box::new(EncoderSource { crops: crops.clone(), embed: Embed::new(enc.clone(), flip) })
            };
            let eval = experiments::EvalSet { pairs: &pairs, source: &make, metric: cfg.eval.metric, sweep: cfg.eval.sweep };
            let tc = trainer::TrainConfig { seed: cfg.module_seed("finetune-sweep"), ..cfg.train.clone() };
            let rows = experiments::finetune_sweep(&pre, &data, batches, &tc, &cfg.margin, &cfg.augmentation, &eval, Some(&out))?;
            write_json(&out.join("sweep.json"), &rows)?;
            for r in &rows {
                let sc = r.scratch.as_ref().map_or("-".to_string(), |s| format!("{:.4}", s.mean));
                println!("{:>6} identities finetuned {:.4} scratch {sc}", r.identities, r.finetuned.mean);
            }
        }
        Command::Report { run_dir } => {
            let s = experiments::emit_report(run_dir)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", run_dir.join("summary.md").display());
        }
    }
    Ok(())
}

fn parse_axis(name: &str, labels: &[String]) -> Result<VariantAxis> {
    Ok(match name {
        "hat" => VariantAxis::Hat,
        "makeup" => VariantAxis::Makeup,
        "occlusion" => VariantAxis::Occlusion,
        "glasses" => VariantAxis::Glasses,
        "beard" => VariantAxis::Beard,
        "expression" => VariantAxis::Expression,
        "hair_style" => VariantAxis::HairStyle(labels.to_vec()),
        other => return Err(Error::validation(format!("unknown variant axis {other:?}"))),
    })
}

/// Renders aligned crops of every probe scene into `out/images` and writes
/// one conditions file per probe plus the scene metadata of each set.
fn write_probe(reference: &str, sets: &[experiments::ConditionSet], out: &Path) -> Result<()> {
    let images = out.join("images");
    create_dir(&images)?;
    let mut rendered = std::collections::BTreeSet::new();
    for set in sets {
        for (r, scene) in &set.scenes {
            if rendered.insert(r.clone()) {
                toy::render_aligned(scene, None)?.save_png(&images.join(format!("{r}.png")))?;
            }
        }
    }
    // Sweeps pair each baseline set with its eyebrow-swapped counterpart.
    let mut files: BTreeMap<String, Vec<ProbeCondition>> = BTreeMap::new();
    for set in sets {
        let key = set.name.split('+').next().unwrap_or(&set.name).to_string();
        files.entry(key).or_default().extend(set.conditions.iter().cloned());
    }
    for (name, conds) in &files {
        write_json(&out.join(format!("{name}.json")), conds)?;
    }
    write_json(&out.join("sets.json"), &sets)?;
    println!("reference {reference}; {} images, condition files: {}", rendered.len(), files.keys().cloned().collect::<Vec<_>>().join(", "));
    Ok(())
}
