//! Synthetic ad logs with a known click-through function.
//!
//! Each image is a procedural color field, optionally carrying a striped
//! high-contrast block standing in for typography. Every image is shown in a
//! few exposure contexts (gender, age, time, position); each record picks an
//! image and context and draws a click from the planted CTR:
//!
//! ```text
//! ctr = base + image offset + age_slope·age + time[t] + gender[g]
//!       + position[p] + color[c] + title·q + text effect
//! ```
//!
//! The text effect is `±saliency·(1 + interaction·d)`, with the sign set by
//! the ink of the block and `d ∈ [-1, 1]` the ad position scaled to its
//! range, so the image and the auxiliary data interact.
//!
//! Record `i` is drawn from its own ChaCha stream, so any split of the index
//! range reproduces the same log.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_jsonl, AggregatedInstance, AttrKind, AttributeSpec, AuxSchema, EmbeddingStore, ImpressionRecord, PALETTE,
};
use crate::metrics::sprc;
use crate::tensor::{seeded_rng, Checkpoint, Tensor};
use crate::{Error, Result};

const GENDERS: usize = 2;
const AGES: usize = 7;
const TIMES: usize = 6;
const POSITIONS: usize = 10;
const COLORS: usize = PALETTE.len();

/// Ink colors of the text block: red raises CTR, blue lowers it.
const INKS: [[f64; 3]; 2] = [[0.85, 0.1, 0.1], [0.1, 0.2, 0.85]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Effects {
    /// Per age level.
    pub age_slope: f64,
    /// Empty, or one entry per level.
    pub time_profile: Vec<f64>,
    pub gender: Vec<f64>,
    pub position: Vec<f64>,
    /// Per background palette color.
    pub color: Vec<f64>,
    /// Magnitude of the text-block effect.
    pub text_saliency: f64,
    /// How strongly ad position scales the text effect.
    pub text_position_interaction: f64,
    /// Multiplier on the title quality `q ∈ [-1, 1]`.
    pub title: f64,
    /// Half-width of the uniform per-image offset.
    pub image_spread: f64,
}

impl Default for Effects {
    fn default() -> Self {
        Self {
            age_slope: 0.015,
            time_profile: vec![-0.03, -0.015, 0.0, 0.015, 0.03, 0.0],
            gender: vec![0.0, 0.02],
            position: (0..POSITIONS).map(|p| 0.04 - 0.008 * p as f64).collect(),
            color: vec![0.0, 0.0, 0.02, 0.01, 0.01, 0.0, 0.0, -0.01, 0.0, -0.02],
            text_saliency: 0.02,
            text_position_interaction: 3.0,
            title: 0.02,
            image_spread: 0.01,
        }
    }
}

impl Effects {
    /// No effect of any kind; every CTR equals the base rate.
    pub fn flat() -> Self {
        Self {
            age_slope: 0.0,
            time_profile: vec![],
            gender: vec![],
            position: vec![],
            color: vec![],
            text_saliency: 0.0,
            text_position_interaction: 0.0,
            title: 0.0,
            image_spread: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_images: usize,
    pub n_records: u64,
    pub seed: u64,
    pub base_ctr: f64,
    pub image_size: usize,
    pub contexts_per_image: usize,
    /// Probability that an image carries a text block.
    pub text_prob: f64,
    /// Width of the pseudo title embeddings.
    pub embedding_dim: usize,
    pub effects: Effects,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_images: 500,
            n_records: 500_000,
            seed: 0,
            base_ctr: 0.3,
            image_size: 32,
            contexts_per_image: 2,
            text_prob: 0.7,
            embedding_dim: 16,
            effects: Effects::default(),
        }
    }
}

fn check_len(name: &str, v: &[f64], n: usize) -> Result<()> {
    if !v.is_empty() && v.len() != n {
        return Err(Error::Config(format!("effects.{name} has {} entries, expected {n}", v.len())));
    }
    Ok(())
}

/// Smallest and largest entry; an empty vector contributes nothing.
fn range(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

impl GenConfig {
    /// Checks shapes and that the worst-case combination of effects keeps
    /// every CTR inside (0, 1).
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.contexts_per_image == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("n_images, contexts_per_image and embedding_dim must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is below 8", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.text_prob) {
            return Err(Error::Config(format!("text_prob {} outside [0, 1]", self.text_prob)));
        }
        let e = &self.effects;
        check_len("time_profile", &e.time_profile, TIMES)?;
        check_len("gender", &e.gender, GENDERS)?;
        check_len("position", &e.position, POSITIONS)?;
        check_len("color", &e.color, COLORS)?;
        let age = (e.age_slope * (AGES - 1) as f64).min(0.0)..=(e.age_slope * (AGES - 1) as f64).max(0.0);
        let text = e.text_saliency.abs() * (1.0 + e.text_position_interaction.abs());
        let mut lo = self.base_ctr + age.start() - e.image_spread.abs() - e.title.abs() - text;
        let mut hi = self.base_ctr + age.end() + e.image_spread.abs() + e.title.abs() + text;
        for v in [&e.time_profile, &e.gender, &e.position, &e.color] {
            let (a, b) = range(v);
            lo += a;
            hi += b;
        }
        if !(lo > 0.0 && hi < 1.0) {
            return Err(Error::Config(format!(
                "effects allow CTRs in [{lo:.4}, {hi:.4}], which leaves (0, 1)"
            )));
        }
        Ok(())
    }
}

/// Schema of the synthetic log: four exposure attributes, the background
/// color, and a title embedding slot.
pub fn synth_schema(embedding_dim: usize) -> AuxSchema {
    let levels = |name: &str, n: usize| (0..n).map(|i| format!("{name}_{i}")).collect::<Vec<_>>();
    let cat = |name: &str, levels: Vec<String>, ordinal: bool| AttributeSpec {
        name: name.to_string(),
        kind: AttrKind::Categorical { levels, ordinal },
    };
    AuxSchema {
        attributes: vec![
            cat("gender", vec!["female".into(), "male".into()], false),
            cat("age", levels("age", AGES), true),
            cat("time", levels("time", TIMES), true),
            cat("position", levels("position", POSITIONS), false),
            cat("dominant_color", PALETTE.iter().map(|(n, _)| n.to_string()).collect(), false),
            AttributeSpec {
                name: "title".into(),
                kind: AttrKind::Embedding { dim: embedding_dim },
            },
        ],
    }
}

/// Where the text block sits, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBlock {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Index into the ink colors; 0 raises CTR, 1 lowers it.
    pub ink: usize,
}

impl TextBlock {
    fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.top + self.height).contains(&r) && (self.left..self.left + self.width).contains(&c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_id: String,
    pub color: usize,
    pub text: Option<TextBlock>,
    pub title: String,
    pub title_quality: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextTruth {
    pub image_id: String,
    pub attributes: BTreeMap<String, String>,
    pub ctr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GenConfig,
    pub images: Vec<ImageTruth>,
    /// `contexts_per_image` entries per image, image-major.
    pub contexts: Vec<ContextTruth>,
}

impl GroundTruth {
    pub fn ctr_of(&self, image_id: &str, attributes: &BTreeMap<String, String>) -> Option<f64> {
        self.contexts
            .iter()
            .find(|c| c.image_id == image_id && &c.attributes == attributes)
            .map(|c| c.ctr)
    }

    /// Pixel mask of the text block, row-major `[S, S]`.
    pub fn text_mask(&self, image: usize) -> Vec<bool> {
        let s = self.config.image_size;
        let block = self.images[image].text;
        (0..s * s).map(|i| block.is_some_and(|b| b.contains(i / s, i % s))).collect()
    }

    /// Cells of a `grid × grid` map at least half covered by the text block.
    pub fn text_mask_on_grid(&self, image: usize, grid: usize) -> Vec<bool> {
        let s = self.config.image_size;
        let px = self.text_mask(image);
        let mut out = Vec::with_capacity(grid * grid);
        for gr in 0..grid {
            for gc in 0..grid {
                let (r0, r1) = (gr * s / grid, (gr + 1) * s / grid);
                let (c0, c1) = (gc * s / grid, (gc + 1) * s / grid);
                let total = (r1 - r0) * (c1 - c0);
                let hit = (r0..r1).flat_map(|r| (c0..c1).map(move |c| (r, c))).filter(|&(r, c)| px[r * s + c]).count();
                out.push(2 * hit >= total && total > 0);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// A generated corpus. Records are produced on demand.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub schema: AuxSchema,
    pub images: BTreeMap<String, Tensor>,
    pub embeddings: EmbeddingStore,
    pub truth: GroundTruth,
    records_rng: ChaCha8Rng,
}

fn render(cfg: &GenConfig, truth: &ImageTruth, rng: &mut ChaCha8Rng) -> Tensor {
    let s = cfg.image_size;
    let bg = PALETTE[truth.color].1;
    // smooth shading plus a couple of small distractor patches in ink colors
    let (fx, fy, ph): (f64, f64, f64) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.3));
    let patches: Vec<(usize, usize, usize)> = (0..2)
        .map(|_| (rng.random_range(0..s - s / 8), rng.random_range(0..s - s / 8), rng.random_range(0..2)))
        .collect();
    let mut data = vec![0.0; 3 * s * s];
    for r in 0..s {
        for c in 0..s {
            let shade = 0.06 * ((fx * r as f64 / s as f64 + fy * c as f64 / s as f64) * 6.3 + ph).sin();
            let mut px = bg.map(|v| v + shade);
            for &(pr, pc, ink) in &patches {
                if (pr..pr + s / 8).contains(&r) && (pc..pc + s / 8).contains(&c) {
                    px = INKS[ink];
                }
            }
            if let Some(b) = truth.text.filter(|b| b.contains(r, c)) {
                // ink strokes on a white plate: rows alternate, with letter gaps
                let stroke = (r - b.top) % 2 == 0 && (c - b.left) % 3 != 2;
                px = if stroke { INKS[b.ink] } else { [1.0, 1.0, 1.0] };
            }
            for ch in 0..3 {
                data[ch * s * s + r * s + c] = px[ch].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, s, s], data).expect("shape matches data")
}

fn planted_ctr(cfg: &GenConfig, img: &ImageTruth, attrs: &[usize; 4]) -> f64 {
    let e = &cfg.effects;
    let [g, a, t, p] = *attrs;
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let mut ctr = cfg.base_ctr + img.offset + e.age_slope * a as f64;
    ctr += at(&e.time_profile, t) + at(&e.gender, g) + at(&e.position, p) + at(&e.color, img.color);
    ctr += e.title * img.title_quality;
    if let Some(b) = img.text {
        let d = (p as f64 - (POSITIONS - 1) as f64 / 2.0) / ((POSITIONS - 1) as f64 / 2.0);
        let sign = if b.ink == 0 { 1.0 } else { -1.0 };
        ctr += sign * e.text_saliency * (1.0 + e.text_position_interaction * d);
    }
    ctr
}

/// Builds images, contexts, embeddings and the truth table. Records come
/// from [`SynthData::record`] / [`SynthData::records`].
pub fn generate(cfg: &GenConfig) -> Result<SynthData> {
    cfg.validate()?;
    let s = cfg.image_size;
    let schema = synth_schema(cfg.embedding_dim);
    let mut rng = seeded_rng(cfg.seed, "synth.images");
    let mut images = BTreeMap::new();
    let mut truths = Vec::with_capacity(cfg.n_images);
    let mut contexts = Vec::new();
    let mut embeddings = EmbeddingStore::new(cfg.embedding_dim);
    let width = (cfg.n_images - 1).to_string().len();
    for i in 0..cfg.n_images {
        let image_id = format!("img{i:0width$}");
        let text = rng.random_bool(cfg.text_prob).then(|| {
            let height = rng.random_range(s / 5..=s / 3);
            let width = rng.random_range(s / 3..=s / 2);
            TextBlock {
                top: rng.random_range(0..=s - height),
                left: rng.random_range(0..=s - width),
                height,
                width,
                ink: rng.random_range(0..INKS.len()),
            }
        });
        let title = format!("title {image_id}");
        let truth = ImageTruth {
            image_id: image_id.clone(),
            color: rng.random_range(0..COLORS),
            text,
            title: title.clone(),
            title_quality: rng.random_range(-1.0..=1.0),
            offset: rng.random_range(-1.0..=1.0) * cfg.effects.image_spread,
        };
        // pseudo embedding: noise plus the title quality on the first axis
        let mut erng = seeded_rng(cfg.seed, &format!("synth.embedding.{title}"));
        let mut v: Vec<f64> = (0..cfg.embedding_dim)
            .map(|_| StandardNormal.sample(&mut erng))
            .map(|x: f64| 0.3 * x)
            .collect();
        v[0] = truth.title_quality;
        embeddings.insert(title.clone(), v)?;

        let image = render(cfg, &truth, &mut rng);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < cfg.contexts_per_image {
            let a = [
                rng.random_range(0..GENDERS),
                rng.random_range(0..AGES),
                rng.random_range(0..TIMES),
                rng.random_range(0..POSITIONS),
            ];
            if !seen.insert(a) {
                continue;
            }
            let attributes: BTreeMap<String, String> = [
                ("gender", ["female", "male"][a[0]].to_string()),
                ("age", format!("age_{}", a[1])),
                ("time", format!("time_{}", a[2])),
                ("position", format!("position_{}", a[3])),
                ("dominant_color", PALETTE[truth.color].0.to_string()),
                ("title", title.clone()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            contexts.push(ContextTruth {
                image_id: image_id.clone(),
                attributes,
                ctr: planted_ctr(cfg, &truth, &a),
            });
        }
        images.insert(image_id, image);
        truths.push(truth);
    }
    Ok(SynthData {
        schema,
        images,
        embeddings,
        truth: GroundTruth {
            config: cfg.clone(),
            images: truths,
            contexts,
        },
        records_rng: seeded_rng(cfg.seed, "synth.records"),
    })
}

impl SynthData {
    pub fn config(&self) -> &GenConfig {
        &self.truth.config
    }

    /// Record `i`, independent of every other record.
    pub fn record(&self, i: u64) -> ImpressionRecord {
        let mut rng = self.records_rng.clone();
        rng.set_stream(i);
        let cfg = self.config();
        let img = rng.random_range(0..cfg.n_images);
        let ctx = &self.truth.contexts[img * cfg.contexts_per_image + rng.random_range(0..cfg.contexts_per_image)];
        ImpressionRecord {
            image_id: ctx.image_id.clone(),
            attributes: ctx.attributes.clone(),
            clicked: rng.random::<f64>() < ctx.ctr,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = ImpressionRecord> + '_ {
        self.records_range(0..self.config().n_records)
    }

    pub fn records_range(&self, range: std::ops::Range<u64>) -> impl Iterator<Item = ImpressionRecord> + '_ {
        range.map(|i| self.record(i))
    }

    pub fn image_order(&self) -> Vec<&str> {
        self.images.keys().map(String::as_str).collect()
    }

    /// Writes `records.jsonl`, `images.json`, `truth.json`, `schema.json`
    /// and the `embeddings/` store into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("records.jsonl");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for chunk_start in (0..self.config().n_records).step_by(10_000) {
            let end = (chunk_start + 10_000).min(self.config().n_records);
            let recs: Vec<_> = self.records_range(chunk_start..end).collect();
            write_jsonl(&mut w, &recs)?;
        }
        std::io::Write::flush(&mut w).map_err(|e| Error::io(&path, e))?;
        save_images(&self.images, &dir.join("images.json"))?;
        self.truth.save(&dir.join("truth.json"))?;
        let path = dir.join("schema.json");
        let text = serde_json::to_string_pretty(&self.schema).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.embeddings.save(&dir.join("embeddings"))
    }
}

pub fn save_images(images: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::default();
    for (k, t) in images {
        ck.insert(k.clone(), t);
    }
    ck.save(path)
}

pub fn load_images(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let ck = Checkpoint::load(path)?;
    ck.tensors.keys().map(|k| Ok((k.clone(), ck.tensor(k)?))).collect()
}

/// Spearman correlation between planted and empirical CTR over the
/// instances found in the truth table: the best rank agreement any model
/// could reach from these counts.
pub fn oracle_eval(truth: &GroundTruth, instances: &[AggregatedInstance]) -> Result<f64> {
    let index: BTreeMap<(&str, &BTreeMap<String, String>), f64> = truth
        .contexts
        .iter()
        .map(|c| ((c.image_id.as_str(), &c.attributes), c.ctr))
        .collect();
    let (planted, observed): (Vec<f64>, Vec<f64>) = instances
        .iter()
        .filter_map(|i| index.get(&(i.image_id.as_str(), &i.attributes)).map(|&t| (t, i.y)))
        .unzip();
    Ok(sprc(&planted, &observed)?)
}
