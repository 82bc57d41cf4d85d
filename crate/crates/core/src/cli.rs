//! Command-line entry point.
//!
//! Every run resolves a [`RunConfig`] (defaults, then the `--config` TOML
//! file, then flags), executes one subcommand into `--out`, and writes
//! `manifest.json` there with the resolved config, input digests and output
//! digests. `replay --manifest` re-executes a manifest and compares digests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    merge_rare_levels, read_csv, read_instances_jsonl, read_jsonl, write_instances_jsonl, AggregatedInstance,
    Aggregator, AuxSchema, EmbeddingStore, LevelMerge, ReadReport, DEFAULT_MERGE_THRESHOLD, LOGNORMAL_SHAPE,
};
use crate::model::{
    evaluate_model, format_table, gradient_suite, predict_dataset, run_rows, split_indices, train, Dataset, HeadKind,
    M2fn, ModelConfig, Preset, StageSpec, Toggles, TrainConfig, GRAD_TOLERANCE,
};
use crate::objectives::LossKind;
use crate::stats::{ctr_bars, select_attributes, DEFAULT_ALPHA};
use crate::synth::{generate, load_images, GenConfig};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const EVAL_CHUNK: usize = 256;

#[derive(Parser, Debug)]
#[command(name = "m2fn", version, about = "Multi-step modality fusion network for ad-image CTR")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalFlags {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// realad-100, realad-500 or ava-like.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    min_impressions: Option<u64>,
    /// wmse, kld or emd.
    #[arg(long, global = true)]
    loss: Option<String>,
    /// Comma list out of aux,low,att,high (or `none`).
    #[arg(long, global = true)]
    toggles: Option<String>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic ad log with planted effects.
    Datagen,
    /// Group impression records into CTR instances.
    Aggregate {
        /// Records as JSON Lines, or CSV when the name ends in `.csv`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Attributes whose rare levels are merged (needs --schema).
        #[arg(long, value_delimiter = ',')]
        #[serde(default)]
        merge: Vec<String>,
    },
    /// Attribute selection with ANOVA and logistic regression.
    Stats {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        schema: PathBuf,
    },
    /// Train a model on a seeded split and evaluate the held-out part.
    Train {
        #[command(flatten)]
        data: DataPaths,
    },
    /// Evaluate a saved model on instances.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataPaths,
    },
    /// Train the eight Aux/Low/Att/High rows and tabulate SPRC and LCC.
    Ablate {
        #[command(flatten)]
        data: DataPaths,
    },
    /// Finite-difference checks of every primitive and the full model.
    Gradcheck,
    /// Re-execute a manifest into --out and compare output digests.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    #[arg(long)]
    pub instances: PathBuf,
    /// Image checkpoint as written by `datagen`.
    #[arg(long)]
    pub images: PathBuf,
    /// Aux schema; without it the model sees images only.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    /// Output channels per backbone stage.
    pub backbone: Option<Vec<usize>>,
    /// Defaults to the side of the input images.
    pub image_size: Option<usize>,
    pub cbn_hidden: Option<usize>,
    pub attn_hidden: Option<usize>,
    pub high_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub merge_threshold: u64,
    pub eval_fraction: f64,
    /// Log-normal shape used to bucketize CTR for distribution heads.
    pub dist_shape: f64,
    pub alpha: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            eval_fraction: 0.2,
            dist_shape: LOGNORMAL_SHAPE,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Fully resolved settings of one run. `seed` drives every stage (data
/// generation, split, initialization, batching).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    /// Overrides the preset threshold when set.
    pub min_impressions: Option<u64>,
    #[serde(with = "toggles_str")]
    pub toggles: Toggles,
    pub gen: GenConfig,
    pub data: DataConfig,
    pub model: ModelOverrides,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::RealAd100,
            min_impressions: None,
            toggles: Toggles::ALL_ON,
            gen: GenConfig::default(),
            data: DataConfig::default(),
            model: ModelOverrides::default(),
            train: TrainConfig::default(),
        }
    }
}

mod toggles_str {
    use super::Toggles;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Toggles, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(t)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Toggles, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl RunConfig {
    pub fn threshold(&self) -> u64 {
        self.min_impressions.or(self.preset.min_impressions()).unwrap_or(1)
    }

    pub fn head(&self) -> HeadKind {
        match self.train.loss {
            LossKind::Wmse => HeadKind::Scalar,
            LossKind::Kld | LossKind::Emd => HeadKind::Distribution,
        }
    }

    /// Propagates the global seed and checks ranges.
    fn finish(mut self) -> Result<Self> {
        self.gen.seed = self.seed;
        self.train.seed = self.seed;
        self.toggles.validate()?;
        if !(self.data.eval_fraction > 0.0 && self.data.eval_fraction < 1.0) {
            return Err(Error::Config(format!("data.eval_fraction {} outside (0, 1)", self.data.eval_fraction)));
        }
        if !(self.data.alpha > 0.0 && self.data.alpha < 1.0) {
            return Err(Error::Config(format!("data.alpha {} outside (0, 1)", self.data.alpha)));
        }
        if !(self.data.dist_shape > 0.0) {
            return Err(Error::Config("data.dist_shape must be positive".into()));
        }
        Ok(self)
    }

    pub fn model_config(&self, dim_aux: usize, image_size: usize, toggles: Toggles) -> Result<ModelConfig> {
        let mut mc = ModelConfig::new(dim_aux).with_preset(self.preset).with_toggles(toggles);
        let o = &self.model;
        if let Some(b) = &o.backbone {
            mc.backbone = b.iter().copied().map(StageSpec::new).collect();
        }
        mc.image_size = o.image_size.unwrap_or(image_size);
        mc.cbn_hidden = o.cbn_hidden.unwrap_or(mc.cbn_hidden);
        mc.attn_hidden = o.attn_hidden.unwrap_or(mc.attn_hidden);
        mc.high_dim = o.high_dim.unwrap_or(mc.high_dim);
        mc.head = self.head();
        mc.seed = self.seed;
        mc.validate()?;
        Ok(mc)
    }
}

fn resolve(flags: &GlobalFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(p) = &flags.preset {
        cfg.preset = p.parse()?;
    }
    if let Some(m) = flags.min_impressions {
        cfg.min_impressions = Some(m);
    }
    if let Some(l) = &flags.loss {
        cfg.train.loss = l.parse().map_err(Error::Config)?;
    }
    if let Some(t) = &flags.toggles {
        cfg.toggles = t.parse()?;
    }
    cfg.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub config: RunConfig,
    pub seed: u64,
    /// Input path → sha256 (directories hash their sorted file list).
    pub inputs: BTreeMap<String, String>,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// sha256 of a file, or of `name\0digest\n` lines over a directory's files
/// in sorted relative-path order.
pub fn digest_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let d = digest_path(&path.join(&rel))?;
        h.update(format!("{rel}\0{d}\n"));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

impl Command {
    fn inputs(&self) -> Vec<&PathBuf> {
        fn paths(d: &DataPaths) -> Vec<&PathBuf> {
            let mut v = vec![&d.instances, &d.images];
            v.extend(d.schema.iter().chain(d.embeddings.iter()));
            v
        }
        match self {
            Command::Datagen | Command::Gradcheck | Command::Replay { .. } => vec![],
            Command::Aggregate { input, schema, .. } => std::iter::once(input).chain(schema.iter()).collect(),
            Command::Stats { instances, schema } => vec![instances, schema],
            Command::Train { data } | Command::Ablate { data } => paths(data),
            Command::Eval { model, data } => std::iter::once(model).chain(paths(data)).collect(),
        }
    }

    /// Same command with every input path made absolute, so the manifest
    /// replays from any working directory.
    fn absolutized(&self) -> Result<Command> {
        let abs_data = |d: &DataPaths| -> Result<DataPaths> {
            Ok(DataPaths {
                instances: absolute(&d.instances)?,
                images: absolute(&d.images)?,
                schema: d.schema.as_deref().map(absolute).transpose()?,
                embeddings: d.embeddings.as_deref().map(absolute).transpose()?,
            })
        };
        Ok(match self {
            Command::Aggregate { input, schema, merge } => Command::Aggregate {
                input: absolute(input)?,
                schema: schema.as_deref().map(absolute).transpose()?,
                merge: merge.clone(),
            },
            Command::Stats { instances, schema } => Command::Stats {
                instances: absolute(instances)?,
                schema: absolute(schema)?,
            },
            Command::Train { data } => Command::Train { data: abs_data(data)? },
            Command::Ablate { data } => Command::Ablate { data: abs_data(data)? },
            Command::Eval { model, data } => Command::Eval {
                model: absolute(model)?,
                data: abs_data(data)?,
            },
            other => other.clone(),
        })
    }
}

/// Outcome of a subcommand: exit status plus the files it wrote into the
/// output directory.
struct Outcome {
    code: i32,
    files: Vec<String>,
}

impl Outcome {
    fn ok(files: Vec<String>) -> Self {
        Self { code: 0, files }
    }
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))? + "\n";
        self.text(name, &text)
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut text = String::new();
        for r in rows {
            text += &serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?;
            text.push('\n');
        }
        self.text(name, &text)
    }

    fn done(self) -> Outcome {
        Outcome::ok(self.files)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_instances(path: &Path) -> Result<Vec<AggregatedInstance>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_instances_jsonl(BufReader::new(f))
}

fn datagen(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let data = generate(&cfg.gen)?;
    data.write(out)?;
    let mut o = Out::new(out)?;
    o.json("gen_config.json", &cfg.gen)?;
    let mut files = o.files;
    files.extend(
        ["records.jsonl", "images.json", "truth.json", "schema.json", "embeddings"]
            .map(String::from),
    );
    Ok(Outcome::ok(files))
}

#[derive(Serialize)]
struct AggregateSummary {
    records: u64,
    rejected: usize,
    groups: usize,
    min_impressions: u64,
    instances: usize,
    merges: usize,
}

fn aggregate_cmd(cfg: &RunConfig, input: &Path, schema: Option<&Path>, merge: &[String], out: &Path) -> Result<Outcome> {
    let schema: Option<AuxSchema> = schema.map(read_json).transpose()?;
    if let Some(s) = &schema {
        s.validate()?;
    }
    if !merge.is_empty() && schema.is_none() {
        return Err(Error::Config("--merge needs --schema".into()));
    }
    let mut agg = Aggregator::new();
    let f = fs::File::open(input).map_err(|e| Error::io(input, e))?;
    let is_csv = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let report: ReadReport = if is_csv {
        read_csv(BufReader::new(f), schema.as_ref(), |r| agg.add(r))?
    } else {
        read_jsonl(BufReader::new(f), schema.as_ref(), |r| agg.add(r))?
    };
    let threshold = cfg.threshold();
    let mut instances = agg.finish(threshold);
    let mut merges: Vec<LevelMerge> = Vec::new();
    if let Some(s) = &schema {
        for attr in merge {
            let (next, m) = merge_rare_levels(instances, s, attr, cfg.data.merge_threshold)?;
            instances = next;
            merges.extend(m);
        }
    }
    let mut o = Out::new(out)?;
    let p = o.path("instances.jsonl");
    let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    let mut w = BufWriter::new(f);
    write_instances_jsonl(&mut w, &instances)?;
    w.flush().map_err(|e| Error::io(&p, e))?;
    o.jsonl("rejects.jsonl", &report.rejects)?;
    o.json("merges.json", &merges)?;
    o.json(
        "summary.json",
        &AggregateSummary {
            records: agg.records(),
            rejected: report.rejects.len(),
            groups: agg.groups(),
            min_impressions: threshold,
            instances: instances.len(),
            merges: merges.len(),
        },
    )?;
    Ok(o.done())
}

fn stats_cmd(cfg: &RunConfig, instances: &Path, schema: &Path, out: &Path) -> Result<Outcome> {
    let schema: AuxSchema = read_json(schema)?;
    schema.validate()?;
    let instances = read_instances(instances)?;
    let report = select_attributes(&instances, &schema, cfg.data.alpha)?;
    let mut bars = BTreeMap::new();
    for t in &report.attributes {
        bars.insert(t.attribute.clone(), ctr_bars(&instances, &schema, &t.attribute)?);
    }
    let mut o = Out::new(out)?;
    o.text("selection.json", &(report.to_json() + "\n"))?;
    o.text("selection.txt", &report.to_table())?;
    o.json("ctr_bars.json", &bars)?;
    Ok(o.done())
}

struct Loaded {
    instances: Vec<AggregatedInstance>,
    dataset: Dataset,
    dim_aux: usize,
    image_size: usize,
}

fn load_data(cfg: &RunConfig, d: &DataPaths) -> Result<Loaded> {
    let instances = read_instances(&d.instances)?;
    let images = load_images(&d.images)?;
    let schema: Option<AuxSchema> = d.schema.as_deref().map(read_json).transpose()?;
    let store = d.embeddings.as_deref().map(EmbeddingStore::load).transpose()?;
    let dist = (cfg.head() == HeadKind::Distribution).then_some(cfg.data.dist_shape);
    let dataset = Dataset::from_instances(&instances, &images, schema.as_ref(), store.as_ref(), dist)?;
    let image_size = dataset.images.first().map_or(0, |t| t.shape()[2]);
    Ok(Loaded {
        instances,
        dataset,
        dim_aux: schema.as_ref().map_or(0, AuxSchema::dim_aux),
        image_size,
    })
}

/// Toggles of the run, with aux-dependent modules dropped when there is no
/// schema.
fn effective_toggles(cfg: &RunConfig, dim_aux: usize) -> Result<Toggles> {
    if dim_aux == 0 && cfg.toggles.aux {
        return Err(Error::Config(format!(
            "toggles `{}` use aux data; pass --schema or --toggles none",
            cfg.toggles
        )));
    }
    Ok(cfg.toggles)
}

#[derive(Serialize)]
struct Split<'a> {
    seed: u64,
    eval_fraction: f64,
    train: Vec<(&'a str, usize)>,
    eval: Vec<(&'a str, usize)>,
}

fn split<'a>(cfg: &RunConfig, l: &'a Loaded) -> Result<(Dataset, Dataset, Split<'a>)> {
    let (tr, ev) = split_indices(l.instances.len(), cfg.data.eval_fraction, cfg.seed);
    if tr.is_empty() || ev.is_empty() {
        return Err(Error::Config(format!("{} instances are too few to split", l.instances.len())));
    }
    let label = |idx: &[usize]| idx.iter().map(|&i| (l.instances[i].image_id.as_str(), i)).collect();
    let s = Split {
        seed: cfg.seed,
        eval_fraction: cfg.data.eval_fraction,
        train: label(&tr),
        eval: label(&ev),
    };
    Ok((l.dataset.select(&tr)?, l.dataset.select(&ev)?, s))
}

fn train_cmd(cfg: &RunConfig, d: &DataPaths, out: &Path) -> Result<Outcome> {
    let l = load_data(cfg, d)?;
    let (tr, ev, s) = split(cfg, &l)?;
    let mc = cfg.model_config(l.dim_aux, l.image_size, effective_toggles(cfg, l.dim_aux)?)?;
    let mut model = M2fn::build(mc)?;
    let report = train(&mut model, &tr, Some(&ev), &cfg.train)?;
    let metrics = report
        .final_eval()
        .cloned()
        .ok_or_else(|| Error::Config("training ran no epochs".into()))?;
    let mut o = Out::new(out)?;
    let p = o.path("model.json");
    model.save(&p)?;
    o.text("train_log.jsonl", &report.to_jsonl())?;
    o.json("metrics.json", &metrics)?;
    o.json("split.json", &s)?;
    Ok(o.done())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    image_id: &'a str,
    attributes: &'a BTreeMap<String, String>,
    y: f64,
    w: u64,
    prediction: &'a [f64],
}

fn eval_cmd(cfg: &RunConfig, model: &Path, d: &DataPaths, out: &Path) -> Result<Outcome> {
    let m = M2fn::load(model)?;
    let mut cfg = cfg.clone();
    // the saved head decides how targets are prepared
    if m.config().head != cfg.head() {
        cfg.train.loss = match m.config().head {
            HeadKind::Scalar => LossKind::Wmse,
            HeadKind::Distribution => LossKind::Kld,
        };
    }
    let l = load_data(&cfg, d)?;
    if l.dim_aux != m.config().dim_aux && m.config().toggles.aux {
        return Err(Error::Config(format!(
            "model expects dim_aux {}, schema gives {}",
            m.config().dim_aux,
            l.dim_aux
        )));
    }
    let metrics = evaluate_model(&m, &l.dataset, EVAL_CHUNK)?;
    let pred = predict_dataset(&m, &l.dataset, EVAL_CHUNK)?;
    let k = pred.shape()[1];
    let mut o = Out::new(out)?;
    o.json("metrics.json", &metrics)?;
    o.jsonl(
        "predictions.jsonl",
        l.instances.iter().enumerate().map(|(i, inst)| PredictionRow {
            image_id: &inst.image_id,
            attributes: &inst.attributes,
            y: inst.y,
            w: inst.w,
            prediction: &pred.data()[i * k..(i + 1) * k],
        }),
    )?;
    Ok(o.done())
}

fn ablate_cmd(cfg: &RunConfig, d: &DataPaths, out: &Path) -> Result<Outcome> {
    let l = load_data(cfg, d)?;
    if l.dim_aux == 0 {
        return Err(Error::Config("ablate needs --schema".into()));
    }
    let (tr, ev, s) = split(cfg, &l)?;
    let base = cfg.model_config(l.dim_aux, l.image_size, Toggles::ALL_ON)?;
    let rows = run_rows(&base, &cfg.train, &tr, &ev, &Toggles::grid())?;
    let mut o = Out::new(out)?;
    o.jsonl("ablation.jsonl", &rows)?;
    o.text("ablation.txt", &format_table(&rows))?;
    o.json("split.json", &s)?;
    Ok(o.done())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let entries = gradient_suite(cfg.seed)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    for e in &entries {
        log::info!("{:<40} {:.3e} {}", e.name, e.max_rel_error, if e.passed { "ok" } else { "FAIL" });
    }
    let mut o = Out::new(out)?;
    o.json(
        "gradcheck.json",
        &serde_json::json!({ "tolerance": GRAD_TOLERANCE, "checks": entries }),
    )?;
    let mut outcome = o.done();
    if !failed.is_empty() {
        eprintln!("gradcheck: {} check(s) above {GRAD_TOLERANCE:e}: {}", failed.len(), failed.join(", "));
        outcome.code = 1;
    }
    Ok(outcome)
}

fn dispatch(command: &Command, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    match command {
        Command::Datagen => datagen(cfg, out),
        Command::Aggregate { input, schema, merge } => aggregate_cmd(cfg, input, schema.as_deref(), merge, out),
        Command::Stats { instances, schema } => stats_cmd(cfg, instances, schema, out),
        Command::Train { data } => train_cmd(cfg, data, out),
        Command::Eval { model, data } => eval_cmd(cfg, model, data, out),
        Command::Ablate { data } => ablate_cmd(cfg, data, out),
        Command::Gradcheck => gradcheck_cmd(cfg, out),
        Command::Replay { .. } => Err(Error::Config("replay cannot be nested".into())),
    }
}

/// Runs `command` and writes its manifest. Inputs are hashed before the
/// run and checked again after it, so a subcommand that touched its inputs
/// is reported as an error.
pub fn execute(command: &Command, cfg: &RunConfig, out: &Path) -> Result<(i32, Manifest)> {
    let command = command.absolutized()?;
    let digest_inputs = || -> Result<BTreeMap<String, String>> {
        command
            .inputs()
            .into_iter()
            .map(|p| Ok((p.display().to_string(), digest_path(p)?)))
            .collect()
    };
    let inputs = digest_inputs()?;
    let outcome = dispatch(&command, cfg, out)?;
    if digest_inputs()? != inputs {
        return Err(Error::Config("inputs changed during the run".into()));
    }
    let mut outputs = BTreeMap::new();
    for f in &outcome.files {
        outputs.insert(f.clone(), digest_path(&out.join(f))?);
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        config: cfg.clone(),
        seed: cfg.seed,
        inputs,
        outputs,
    };
    let p = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))? + "\n";
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok((outcome.code, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub manifest: String,
    pub matched: Vec<String>,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

/// Re-executes a manifest into `out` and compares output digests.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayReport> {
    let m = Manifest::load(manifest_path)?;
    for (path, digest) in &m.inputs {
        let now = digest_path(Path::new(path))?;
        if &now != digest {
            return Err(Error::Config(format!("input {path} changed since the manifest was written")));
        }
    }
    let (_, fresh) = execute(&m.command, &m.config, out)?;
    let mut report = ReplayReport {
        manifest: manifest_path.display().to_string(),
        matched: vec![],
        mismatched: vec![],
        missing: vec![],
    };
    for (name, digest) in &m.outputs {
        match fresh.outputs.get(name) {
            Some(d) if d == digest => report.matched.push(name.clone()),
            Some(_) => report.mismatched.push(name.clone()),
            None => report.missing.push(name.clone()),
        }
    }
    let p = out.join("replay.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))? + "\n";
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

fn run_parsed(cli: Cli) -> Result<i32> {
    if let Command::Replay { manifest } = &cli.command {
        let report = replay(manifest, &cli.global.out)?;
        if !report.ok() {
            eprintln!(
                "replay: {} mismatched, {} missing: {}",
                report.mismatched.len(),
                report.missing.len(),
                report.mismatched.iter().chain(&report.missing).cloned().collect::<Vec<_>>().join(", ")
            );
            return Ok(1);
        }
        println!("replay: {} outputs reproduced", report.matched.len());
        return Ok(0);
    }
    let cfg = resolve(&cli.global)?;
    let (code, m) = execute(&cli.command, &cfg, &cli.global.out)?;
    println!("wrote {} file(s) and {MANIFEST} to {}", m.outputs.len(), cli.global.out.display());
    Ok(code)
}

/// Parses `argv` (program name first) and runs it. Returns 0 on success,
/// 2 on usage errors and 1 on any other failure; errors go to stderr.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_parsed(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
