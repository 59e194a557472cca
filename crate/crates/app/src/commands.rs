//! The `synth`, `train`, `detect`, `eval` and `ablate` workflows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use msn::corpus::{generate_corpus, Corpus, CorpusConfig, ANNOTATION_FILE};
use msn::decoder::CellDecoder;
use msn::detector::{
    build_pairs_with, decode_stream, detect, fuse_streams, pair_tensors, ModelSet, PostprocessConfig, StreamResult,
    StreamSelection,
};
use msn::encoder::FeatureExtractor;
use msn::evalharness::{evaluate_dataset, image_metrics, pixel_metrics, EvalLayout, MetricReport, Prf};
use msn::forgegen::{build_dataset, direction_bin, Dataset, DatasetConfig, ForgeConfig, MANIFEST_FILE};
use msn::imaging::{overlay, Image, Rotation, FIDUCIAL_SIZE};
use msn::trainer::{load_canonical, train_direction, train_scale_stream, FeatureCache, TrainRunRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Family, RunConfig};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Files produced by one command invocation, relative to its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub files: Vec<String>,
}

pub fn write_run_manifest(dir: &Path, command: &str, files: &[PathBuf]) -> anyhow::Result<PathBuf> {
    let mut rel: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/"))
        .collect();
    rel.sort();
    rel.dedup();
    let manifest = RunManifest { command: command.to_string(), version: env!("CARGO_PKG_VERSION").to_string(), files: rel };
    let path = dir.join(RUN_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Default)]
pub struct SynthArgs {
    pub count: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub out: PathBuf,
    pub records: usize,
    pub per_direction: BTreeMap<String, usize>,
    pub warnings: usize,
    pub manifest_sha256: String,
}

/// Opens the corpus, generating a procedural one first when allowed.
pub fn open_or_generate_corpus(root: &Path, images: usize, seed: u64) -> anyhow::Result<Corpus> {
    if !root.join(ANNOTATION_FILE).exists() {
        if images == 0 {
            bail!("no corpus at {} (missing {ANNOTATION_FILE})", root.display());
        }
        log::info!("generating a {images}-image procedural corpus in {}", root.display());
        generate_corpus(root, &CorpusConfig { count: images, seed, ..CorpusConfig::default() })?;
    }
    Corpus::open(root).with_context(|| format!("opening corpus {}", root.display()))
}

pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> anyhow::Result<SynthSummary> {
    let count = args.count.unwrap_or(cfg.synth.count);
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let corpus_root = args.corpus.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    let corpus = open_or_generate_corpus(&corpus_root, cfg.synth.corpus_images, cfg.seed)?;
    let dataset_cfg = DatasetConfig {
        count,
        seed,
        forge: ForgeConfig {
            rotation_range: cfg.synth.rotation_range,
            scale_range: cfg.synth.scale_range,
            ..ForgeConfig::default()
        },
        shape_decoupled_fraction: cfg.synth.shape_decoupled_fraction,
        ..DatasetConfig::default()
    };
    let manifest = build_dataset(&corpus, &dataset_cfg, &out)?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    let mut per_direction = BTreeMap::new();
    for r in &manifest.records {
        *per_direction.entry(direction_bin(r.rotation_angle).to_string()).or_insert(0) += 1;
    }
    let mut files = vec![out.join(MANIFEST_FILE)];
    for r in &manifest.records {
        files.push(out.join(&r.file));
        files.push(out.join(&r.mask_file));
    }
    write_run_manifest(&out, "synth", &files)?;
    Ok(SynthSummary {
        manifest_sha256: sha256_file(&out.join(MANIFEST_FILE))?,
        out,
        records: manifest.records.len(),
        per_direction,
        warnings: manifest.warnings.len(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub family: Family,
    pub epochs: Option<usize>,
    pub directions: Option<Vec<u32>>,
    pub scale_stream: Option<bool>,
    pub dataset: Option<PathBuf>,
}

impl Default for TrainArgs {
    fn default() -> Self {
        Self { family: Family::SimilarityMaps, epochs: None, directions: None, scale_stream: None, dataset: None }
    }
}

/// Trains the configured directions, then continues the upright decoder on
/// the scale stream. Existing epoch states in the output directory resume.
pub fn train(cfg: &RunConfig, args: &TrainArgs) -> anyhow::Result<Vec<TrainRunRecord>> {
    let dataset_root = args.dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    if !dataset_root.join(MANIFEST_FILE).exists() {
        bail!("no dataset manifest at {}", dataset_root.join(MANIFEST_FILE).display());
    }
    let dataset = Dataset::open(&dataset_root)?;
    let encoder = cfg.encoder()?;
    let cache = FeatureCache::new(&encoder, cfg.paths.feature_cache.clone())?;
    let mut config = cfg.train.clone();
    config.decoder = args.family.decoder(&config.decoder);
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    let out_dir = cfg.family_dir(args.family);
    fs::create_dir_all(&out_dir)?;
    let mut schedule = cfg.schedule.clone();
    if let Some(d) = &args.directions {
        schedule.directions = d.clone();
    }
    let mut records = Vec::new();
    let mut upright = None;
    for theta in schedule.rotations()? {
        log::info!("training direction {theta} ({})", config.decoder.label());
        let (decoder, record) = train_direction(theta, &dataset, &cache, &config, &out_dir)?;
        if theta == Rotation::R0 {
            upright = Some(decoder);
        }
        records.push(record);
    }
    if args.scale_stream.unwrap_or(schedule.scale_stream) {
        let decoder = match upright {
            Some(d) => d,
            None => {
                let path = out_dir.join(ModelSet::checkpoint_name(Rotation::R0));
                CellDecoder::load(&path).with_context(|| format!("the scale stream needs {}", path.display()))?
            }
        };
        let scale_config = msn::trainer::TrainConfig {
            epochs: schedule.scale_epochs,
            max_samples: schedule.scale_max_samples,
            ..config.clone()
        };
        log::info!("training the scale stream");
        records.push(train_scale_stream(decoder, &dataset, &cache, &scale_config, &out_dir)?.1);
    }
    let summary = out_dir.join("train_runs.json");
    fs::write(&summary, serde_json::to_string_pretty(&records)?)?;
    let mut files: Vec<PathBuf> = records.iter().map(|r| r.checkpoint.clone()).collect();
    files.push(summary);
    for log_file in [msn::trainer::TRAIN_LOG, msn::trainer::SCALE_LOG] {
        if out_dir.join(log_file).exists() {
            files.push(out_dir.join(log_file));
        }
    }
    write_run_manifest(&out_dir, "train", &files)?;
    Ok(records)
}

/// Decoders for the directions `selection` needs.
pub fn load_models(cfg: &RunConfig, family: Family, selection: &StreamSelection) -> anyhow::Result<ModelSet> {
    let dir = cfg.family_dir(family);
    let mut set = ModelSet::default();
    let mut directions: Vec<Rotation> = selection.transforms().iter().map(|t| t.direction()).collect();
    directions.sort();
    directions.dedup();
    for r in directions {
        let key = format!("theta_{}", r.degrees());
        let path = match (family, cfg.weights.directions.get(&key)) {
            (Family::SimilarityMaps, Some(p)) => p.clone(),
            _ => dir.join(ModelSet::checkpoint_name(r)),
        };
        if !path.exists() {
            bail!("missing decoder checkpoint {}", path.display());
        }
        let dec = CellDecoder::load(&path).with_context(|| format!("loading {}", path.display()))?;
        if dec.direction() != r {
            bail!("{} holds direction {}, expected {r}", path.display(), dec.direction());
        }
        set.insert(dec);
    }
    Ok(set)
}

#[derive(Clone, Debug, Default)]
pub struct DetectArgs {
    pub input: PathBuf,
    pub out: Option<PathBuf>,
    pub dump_similarity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectSummary {
    pub out: PathBuf,
    /// `(image, latency in ms)` per processed image.
    pub processed: Vec<(String, f64)>,
    pub failed: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

fn list_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!("input {} does not exist", input.display());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(input)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `masks/<stem>.png`, `overlays/<stem>.png` and `records/<stem>.json`
/// per input image under the output directory.
pub fn detect_cmd(cfg: &RunConfig, args: &DetectArgs) -> anyhow::Result<DetectSummary> {
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.run_dir.join("detect"));
    let inputs = list_inputs(&args.input)?;
    if inputs.is_empty() {
        bail!("no images found in {}", args.input.display());
    }
    let options = cfg.detect.options(None);
    let models = load_models(cfg, Family::SimilarityMaps, &options.selection)?;
    let encoder = cfg.encoder()?;
    for sub in ["masks", "overlays", "records"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let mut files = Vec::new();
    let mut summary = DetectSummary { out: out.clone(), processed: Vec::new(), failed: Vec::new() };
    for path in inputs {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let img = match Image::load(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                summary.failed.push(name);
                continue;
            }
        };
        let mut opts = options.clone();
        if args.dump_similarity {
            opts.dump_similarity = Some(out.join("similarity").join(&stem));
        }
        let result = match detect(&img, &encoder, &models, &opts) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("detection failed on {name}: {e}");
                summary.failed.push(name);
                continue;
            }
        };
        log::info!(
            "{name}: {}x{} in {:.1} ms, verdict {}, tampered fraction {:.4}",
            img.height(),
            img.width(),
            result.latency_ms,
            if result.verdict { "forged" } else { "pristine" },
            result.tampered_pixel_fraction()
        );
        let mask_path = out.join("masks").join(format!("{stem}.png"));
        result.binary.save_png(&mask_path)?;
        let overlay_path = out.join("overlays").join(format!("{stem}.png"));
        overlay(&img, &result.binary)?.save(&overlay_path)?;
        let record_path = out.join("records").join(format!("{stem}.json"));
        fs::write(&record_path, serde_json::to_string_pretty(&result.record())?)?;
        files.extend([mask_path, overlay_path, record_path]);
        if let Some(dir) = &opts.dump_similarity {
            for entry in fs::read_dir(dir)? {
                files.push(entry?.path());
            }
        }
        summary.processed.push((name, result.latency_ms));
    }
    if summary.processed.is_empty() {
        bail!("every input failed ({} images)", summary.failed.len());
    }
    let latency = out.join("latency.json");
    fs::write(&latency, serde_json::to_string_pretty(&summary.processed)?)?;
    files.push(latency);
    write_run_manifest(&out, "detect", &files)?;
    Ok(summary)
}

pub fn eval_cmd(pred: &Path, gt: &Path, layout: &EvalLayout, out: &Path) -> anyhow::Result<MetricReport> {
    for dir in [pred, gt] {
        if !dir.is_dir() {
            bail!("{} is not a directory", dir.display());
        }
    }
    let report = evaluate_dataset(pred, gt, layout)?;
    let (json, csv) = report.write(out)?;
    write_run_manifest(out, "eval", &[json, csv])?;
    Ok(report)
}

/// One ablation configuration: a decoder family and its active streams.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub family: Family,
    pub selection: StreamSelection,
}

/// The four ablation rows: sorted-percentile decoding with the upright stream,
/// then rotation streams, then zoom streams; finally the 2-D decoder with all
/// eight streams.
pub fn table_variants() -> Vec<Variant> {
    let v = |name: &str, family, selection| Variant { name: name.to_string(), family, selection };
    vec![
        v("baseline", Family::SortedPercentiles, StreamSelection::upright_only()),
        v("+rotation", Family::SortedPercentiles, StreamSelection::rotations_only()),
        v("+rotation+scaling", Family::SortedPercentiles, StreamSelection::full()),
        v("+SMC", Family::SimilarityMaps, StreamSelection::full()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub decoder: String,
    pub streams: usize,
    pub available: bool,
    pub note: Option<String>,
    pub pixel: Option<Prf>,
    pub image: Option<Prf>,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: PathBuf,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = String::from("| variant | decoder | streams | Prec. | Rec. | F1 |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            match &r.pixel {
                Some(p) => s += &format!(
                    "| {} | {} | {} | {:.4} | {:.4} | {:.4} |\n",
                    r.name, r.decoder, r.streams, p.precision, p.recall, p.f1
                ),
                None => s += &format!("| {} | {} | {} | unavailable | | |\n", r.name, r.decoder, r.streams),
            }
        }
        s
    }
}

/// Scores every variant whose models are available on the given records.
/// Encoder features are computed once per image and shared by all variants;
/// stream decodes are shared between variants of one family.
pub fn evaluate_variants(
    dataset: &Dataset,
    records: &[usize],
    extractor: &dyn FeatureExtractor,
    variants: &[(Variant, Option<ModelSet>)],
    post: &PostprocessConfig,
    similarity_scale: f32,
) -> anyhow::Result<Vec<AblationRow>> {
    let mut union = StreamSelection { rotations: Vec::new(), zoom: false };
    for (v, models) in variants {
        if models.is_some() {
            union.rotations.extend(v.selection.rotations.iter().copied());
            union.zoom |= v.selection.zoom;
        }
    }
    union.rotations.sort();
    union.rotations.dedup();
    let mut scores: Vec<(Vec<Prf>, Vec<(bool, bool)>)> = vec![(Vec::new(), Vec::new()); variants.len()];
    if variants.iter().any(|(_, m)| m.is_some()) {
        for &record in records {
            let (img, gt) = load_canonical(dataset, record)?;
            let pairs = build_pairs_with(&img, extractor, &union)?;
            let mut decoded: HashMap<(usize, String), StreamResult> = HashMap::new();
            for (k, (variant, models)) in variants.iter().enumerate() {
                let Some(models) = models else { continue };
                let family_key = variants.iter().position(|(v, m)| v.family == variant.family && m.is_some()).unwrap();
                let mut results = Vec::new();
                for t in variant.selection.transforms() {
                    let key = (family_key, t.to_string());
                    if !decoded.contains_key(&key) {
                        let pair = pairs.iter().find(|p| p.transform == t).expect("pair built for every transform");
                        let (rows, cols) = pair_tensors(pair, similarity_scale)?;
                        decoded.insert(key.clone(), decode_stream(models.get(t.direction())?, &rows, &cols, t)?);
                    }
                    results.push(decoded[&key].clone());
                }
                if results.len() != variant.selection.stream_count() {
                    bail!("variant {} decoded {} streams, expected {}", variant.name, results.len(), variant.selection.stream_count());
                }
                let fused = fuse_streams(results, variant.selection.stream_count(), FIDUCIAL_SIZE, gt.size(), post)?;
                let forged = gt.count_positive() > 0;
                if let Some(m) = pixel_metrics(&fused.binary, &gt)? {
                    scores[k].0.push(m);
                }
                scores[k].1.push((fused.verdict, forged));
            }
        }
    }
    Ok(variants
        .iter()
        .zip(scores)
        .map(|((v, models), (pixel, verdicts))| {
            let decoder = match v.family {
                Family::SimilarityMaps => "2-D similarity maps",
                Family::SortedPercentiles => "1-D sorted percentiles",
            };
            AblationRow {
                name: v.name.clone(),
                decoder: decoder.to_string(),
                streams: v.selection.stream_count(),
                available: models.is_some(),
                note: None,
                pixel: models.as_ref().map(|_| Prf::mean(&pixel)),
                image: if verdicts.is_empty() { None } else { image_metrics(&verdicts).ok() },
                images: verdicts.len(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, Default)]
pub struct AblateArgs {
    pub dataset: Option<PathBuf>,
    pub limit: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn ablate(cfg: &RunConfig, args: &AblateArgs) -> anyhow::Result<AblationReport> {
    let root = args.dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let dataset = Dataset::open(&root).with_context(|| format!("opening dataset {}", root.display()))?;
    let encoder = cfg.encoder()?;
    let mut variants = Vec::new();
    let mut notes = Vec::new();
    for v in table_variants() {
        match load_models(cfg, v.family, &v.selection) {
            Ok(m) => {
                variants.push((v, Some(m)));
                notes.push(None);
            }
            Err(e) => {
                log::warn!("ablation row {} unavailable: {e:#}", v.name);
                variants.push((v, None));
                notes.push(Some(format!("{e:#}")));
            }
        }
    }
    let n = args.limit.unwrap_or(dataset.manifest.records.len()).min(dataset.manifest.records.len());
    let records: Vec<usize> = (0..n).collect();
    let mut rows = evaluate_variants(
        &dataset,
        &records,
        &encoder,
        &variants,
        &cfg.detect.postprocess(),
        cfg.detect.similarity_scale,
    )?;
    for (row, note) in rows.iter_mut().zip(notes) {
        row.note = note;
    }
    let report = AblationReport { dataset: root, rows };
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.run_dir.join("ablate"));
    fs::create_dir_all(&out)?;
    let json = out.join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&report)?)?;
    let md = out.join("ablation.md");
    fs::write(&md, report.table())?;
    write_run_manifest(&out, "ablate", &[json, md])?;
    Ok(report)
}
