//! End-to-end driver: configuration, content-addressed stage cache, run
//! records and parameter sweeps.
//!
//! Stages run in order: synthesize (synthetic data only), patchify
//! (optional), neighbors, train-pc, embed, relate (skipped in oracle mode)
//! and eval-zsl. Each stage's artifacts live in
//! `<cache>/<stage>-<key>/`, where the key hashes the stage parameters and
//! the checksums of its input files. A stage whose artifacts already exist
//! is skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::class_relation::{self, CRConfig, RelationMode};
use crate::container::write_bytes;
use crate::embeddings::{self, ClassEmbeddingTable};
use crate::error::{Error, Result};
use crate::features::{read_features, FeatureMatrix};
use crate::manifest::{self, DatasetManifest, Split};
use crate::neighbors::{self, NeighborIndex};
use crate::patchgen;
use crate::pc_trainer::{self, ClusterHeadParams, TrainConfig, TrainingSet};
use crate::synthetic::{self, SyntheticConfig};
use crate::zsl_eval::{self, EvalReport, SjeConfig};

/// Environment variable naming the shared artifact cache.
pub const CACHE_ENV: &str = "VGSE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Image manifest; the class file sits next to it.
    pub manifest: PathBuf,
    pub patch_features: PathBuf,
    pub image_features: PathBuf,
    /// Replacement class vectors (`{"class","w2v"}` lines) for the relation
    /// stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_vectors: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchifyConfig {
    pub images_dir: PathBuf,
    #[serde(default = "default_segments")]
    pub n_segments: usize,
    #[serde(default = "default_compactness")]
    pub compactness: f64,
}

fn default_segments() -> usize {
    patchgen::DEFAULT_SEGMENTS
}

fn default_compactness() -> f64 {
    patchgen::DEFAULT_COMPACTNESS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seeds the trainer and the evaluator.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patchify: Option<PatchifyConfig>,
    /// Keep at most this many patches per image.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_patches: Option<usize>,
    /// Embed unseen classes from their own test images instead of
    /// predicting them. Diagnostic only.
    pub oracle: bool,
    pub train: TrainConfig,
    pub relation: CRConfig,
    pub eval: SjeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            data: None,
            synthetic: None,
            patchify: None,
            max_patches: None,
            oracle: false,
            train: TrainConfig::default(),
            relation: CRConfig::default(),
            eval: SjeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply a `dotted.key=value` override. Values parse as TOML scalars
    /// when possible and as strings otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = parse_scalar(raw.trim());
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    fn effective_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    fn effective_eval(&self) -> SjeConfig {
        SjeConfig { seed: self.seed, ..self.eval }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("set either [data] or [synthetic], not both".into())),
            (None, None) => return Err(Error::Config("no data source: set [data] or [synthetic]".into())),
            _ => {}
        }
        if let Some(d) = &self.data {
            for p in [&d.manifest, &d.patch_features, &d.image_features]
                .into_iter()
                .chain(d.class_vectors.as_ref())
            {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
        }
        if let Some(p) = &self.patchify {
            if !p.images_dir.is_dir() {
                return Err(Error::Config(format!("{} is not a directory", p.images_dir.display())));
            }
        }
        self.effective_train().validate()
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {raw}")) {
        Ok(p) => p.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of the stage parameters and input checksums.
    pub key: String,
    /// Input file checksums, recorded before the stage runs.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<Artifact>,
    pub skipped: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
    pub metrics: EvalReport,
    pub seconds: f64,
}

impl RunRecord {
    pub fn skipped_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.skipped).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_dir(dir: &Path) -> Result<String> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut h = Sha256::new();
    for p in entries {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(sha256_file(&p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// The cache directory: `$VGSE_CACHE_DIR`, else `<output_dir>/cache`.
pub fn default_cache_dir(config: &RunConfig) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| config.output_dir.join("cache"))
}

struct Runner {
    cache: PathBuf,
    stages: Vec<StageRecord>,
}

impl Runner {
    /// Run `body` unless the artifacts for this key already exist.
    fn stage(
        &mut self,
        name: &str,
        params: serde_json::Value,
        inputs: &[(&str, &Path)],
        outputs: &[&str],
        body: impl FnOnce(&[PathBuf]) -> Result<()>,
    ) -> Result<Vec<PathBuf>> {
        let wrap = |e: Error| Error::Stage { stage: name.to_string(), source: Box::new(e) };
        let start = Instant::now();
        let mut checksums = BTreeMap::new();
        for (label, path) in inputs {
            let sum = if path.is_dir() { sha256_dir(path) } else { sha256_file(path) };
            checksums.insert(label.to_string(), sum.map_err(wrap)?);
        }
        let material = json!({ "stage": name, "params": params, "inputs": checksums });
        let key = hex::encode(Sha256::digest(material.to_string().as_bytes()));
        let dir = self.cache.join(format!("{name}-{}", &key[..16]));
        let paths: Vec<PathBuf> = outputs.iter().map(|o| dir.join(o)).collect();
        let marker = dir.join(".complete");
        let skipped = marker.exists() && paths.iter().all(|p| p.exists());
        if skipped {
            info!("{name}: cached ({})", &key[..16]);
        } else {
            info!("{name}: running");
            fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
            body(&paths).map_err(wrap)?;
            write_bytes(&marker, key.as_bytes()).map_err(wrap)?;
        }
        let outputs = paths
            .iter()
            .map(|p| Ok(Artifact { path: p.clone(), sha256: sha256_file(p)? }))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        self.stages.push(StageRecord {
            name: name.to_string(),
            key,
            inputs: checksums,
            outputs,
            skipped,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(paths)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
}

fn load_patches(path: &Path, manifest: &DatasetManifest, max_patches: Option<usize>) -> Result<FeatureMatrix> {
    let f = read_features(path)?;
    f.validate_against(manifest, None)?;
    Ok(match max_patches {
        Some(m) => f.limit_patches(m),
        None => f,
    })
}

/// Run every stage with the cache from `$VGSE_CACHE_DIR` (or the output
/// directory).
pub fn run_pipeline(config: &RunConfig) -> Result<RunRecord> {
    run_pipeline_with_cache(config, &default_cache_dir(config))
}

pub fn run_pipeline_with_cache(config: &RunConfig, cache: &Path) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let mut runner = Runner { cache: cache.to_path_buf(), stages: Vec::new() };

    let data = match (&config.data, &config.synthetic) {
        (Some(d), _) => d.clone(),
        (None, Some(s)) => {
            let out = runner.stage(
                "synthesize",
                json!(s),
                &[],
                &["manifest.jsonl", "manifest.classes.jsonl", "patches.vgsf", "images.vgsf"],
                |p| synthetic::generate(s)?.write(&p[0], &p[2], &p[3]),
            )?;
            DataConfig {
                manifest: out[0].clone(),
                patch_features: out[2].clone(),
                image_features: out[3].clone(),
                class_vectors: None,
            }
        }
        (None, None) => unreachable!("validated"),
    };
    let classes_path = manifest::companion_classes_path(&data.manifest);
    let manifest = manifest::load_manifest(&data.manifest).map_err(|e| Error::Stage { stage: "load".into(), source: Box::new(e) })?;
    let base_inputs = [("manifest", data.manifest.as_path()), ("classes", classes_path.as_path()), ("patches", data.patch_features.as_path())];

    if let Some(p) = &config.patchify {
        runner.stage(
            "patchify",
            json!({ "n_segments": p.n_segments, "compactness": p.compactness }),
            &[("images", p.images_dir.as_path())],
            &["boxes.jsonl"],
            |out| {
                let dir = out[0].parent().unwrap();
                patchgen::patchify_dir(&p.images_dir, p.n_segments, p.compactness, dir).map(|_| ())
            },
        )?;
    }

    let train_cfg = config.effective_train();
    let knn = runner.stage(
        "neighbors",
        json!({ "k": train_cfg.neighbor_k, "max_patches": config.max_patches }),
        &base_inputs,
        &["knn.bin"],
        |out| {
            let train = load_patches(&data.patch_features, &manifest, config.max_patches)?.filter_split(&manifest, Split::Train);
            let k = train_cfg.neighbor_k.min(train.n_rows().saturating_sub(1));
            neighbors::build_knn(&train, k)?.save(&out[0])
        },
    )?;

    let mut train_inputs = base_inputs.to_vec();
    train_inputs.push(("knn", knn[0].as_path()));
    let heads = runner.stage(
        "train-pc",
        json!({ "train": train_cfg, "max_patches": config.max_patches }),
        &train_inputs,
        &["heads.vgsp", "train_log.json"],
        |out| {
            let train = load_patches(&data.patch_features, &manifest, config.max_patches)?.filter_split(&manifest, Split::Train);
            let set = TrainingSet::from_manifest(&train, &manifest)?;
            let index = NeighborIndex::load(&knn[0])?;
            let (params, log) = pc_trainer::train_pc(&set, &index, &train_cfg)?;
            params.save(&out[0])?;
            write_json(&out[1], &log)
        },
    )?;

    let mut embed_inputs = base_inputs.to_vec();
    embed_inputs.push(("heads", heads[0].as_path()));
    let seen = runner.stage(
        "embed",
        json!({ "oracle": config.oracle, "max_patches": config.max_patches }),
        &embed_inputs,
        &["phi_seen.vgsf"],
        |out| {
            let params = ClusterHeadParams::load(&heads[0])?;
            let patches = load_patches(&data.patch_features, &manifest, config.max_patches)?;
            let mut table = embeddings::seen_table(&params, &patches, &manifest)?;
            if config.oracle {
                table = table.merge(&embeddings::oracle_unseen_embedding(&params, &patches, &manifest, true)?)?;
            }
            table.save(&out[0])
        },
    )?;

    let full_table = if config.oracle {
        seen[0].clone()
    } else {
        let mut inputs = vec![("manifest", data.manifest.as_path()), ("classes", classes_path.as_path()), ("phi_seen", seen[0].as_path())];
        if let Some(cv) = &data.class_vectors {
            inputs.push(("class_vectors", cv.as_path()));
        }
        let out = runner.stage("relate", json!(config.relation), &inputs, &["phi_full.vgsf", "relations.jsonl"], |out| {
            let table = ClassEmbeddingTable::load(&seen[0])?;
            let knowledge = match &data.class_vectors {
                Some(cv) => manifest.with_class_vectors(cv)?,
                None => manifest.clone(),
            };
            let (full, weights) = class_relation::relate(&table, &knowledge, &config.relation)?;
            full.save(&out[0])?;
            write_relations(&out[1], &weights)
        })?;
        out[0].clone()
    };

    let eval_cfg = config.effective_eval();
    let report = runner.stage(
        "eval-zsl",
        json!(eval_cfg),
        &[
            ("manifest", data.manifest.as_path()),
            ("classes", classes_path.as_path()),
            ("images", data.image_features.as_path()),
            ("table", full_table.as_path()),
        ],
        &["report.json"],
        |out| {
            let table = embeddings::l2_normalize(&ClassEmbeddingTable::load(&full_table)?)?;
            let images = read_features(&data.image_features)?;
            images.validate_against(&manifest, Some(1))?;
            write_json(&out[0], &zsl_eval::evaluate(&images, &manifest, &table, &eval_cfg)?)
        },
    )?;

    let metrics: EvalReport = read_json(&report[0])?;
    let record = RunRecord { config: config.clone(), stages: runner.stages, metrics, seconds: start.elapsed().as_secs_f64() };
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (src, name) in [(&full_table, "phi_full.vgsf"), (&report[0], "report.json")] {
        fs::copy(src, out.join(name)).map_err(|e| Error::io(out.join(name), e))?;
    }
    write_json(&out.join("run.json"), &record)?;
    Ok(record)
}

/// Write relation weights as `{"unseen_class","r","residual"}` lines.
pub fn write_relations(path: &Path, weights: &[class_relation::RelationWeights]) -> Result<()> {
    let mut text = String::new();
    for w in weights {
        text.push_str(&serde_json::to_string(w).map_err(|e| Error::Internal(e.to_string()))?);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

/// Re-run the configuration stored in a record.
pub fn replay(record: &RunRecord) -> Result<RunRecord> {
    run_pipeline(&record.config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Cluster count.
    Dv,
    /// Patches kept per image.
    Patches,
    /// `wavg`, `smo` or `oracle`.
    Mode,
    /// `w2v` (manifest vectors) or a path to replacement class vectors.
    Knowledge,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dv" => Ok(SweepAxis::Dv),
            "patches" => Ok(SweepAxis::Patches),
            "mode" => Ok(SweepAxis::Mode),
            "knowledge" => Ok(SweepAxis::Knowledge),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::Dv => "dv",
            SweepAxis::Patches => "patches",
            SweepAxis::Mode => "mode",
            SweepAxis::Knowledge => "knowledge",
        }
    }

    /// Configuration for one sweep value.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = base.clone();
        let bad = |what: &str| Error::InvalidArgument(format!("{what} {value:?} for sweep axis {}", self.name()));
        match self {
            SweepAxis::Dv => c.train.clusters = value.parse().map_err(|_| bad("cluster count"))?,
            SweepAxis::Patches => c.max_patches = Some(value.parse().map_err(|_| bad("patch count"))?),
            SweepAxis::Mode => match value {
                "oracle" => c.oracle = true,
                other => {
                    c.oracle = false;
                    c.relation.mode = other.parse::<RelationMode>().map_err(|_| bad("mode"))?;
                }
            },
            SweepAxis::Knowledge => {
                let data = c
                    .data
                    .as_mut()
                    .ok_or_else(|| Error::Config("the knowledge axis needs a [data] source".into()))?;
                data.class_vectors = match value {
                    "w2v" | "default" => None,
                    path => Some(PathBuf::from(path)),
                };
            }
        }
        let slug: String = value.chars().map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' }).collect();
        c.output_dir = base.output_dir.join(format!("sweep-{}-{slug}", self.name()));
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub t1: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub skipped_stages: usize,
    pub total_stages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Internal(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | T1 | u | s | H | cached stages |\n|---|---|---|---|---|---|\n", self.axis.name());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.1} | {:.1} | {:.1} | {:.1} | {}/{} |",
                r.value, r.t1, r.u, r.s, r.h, r.skipped_stages, r.total_stages
            );
        }
        s
    }
}

/// One run per value, sharing the cache so coinciding stages are reused.
/// Writes `sweep-<axis>.csv` and `sweep-<axis>.md` to the output directory.
pub fn sweep(config: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<SweepTable> {
    sweep_with_cache(config, axis, values, &default_cache_dir(config))
}

pub fn sweep_with_cache(config: &RunConfig, axis: SweepAxis, values: &[String], cache: &Path) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let c = axis.apply(config, v)?;
        let rec = run_pipeline_with_cache(&c, cache)?;
        rows.push(SweepRow {
            value: v.clone(),
            t1: rec.metrics.t1,
            u: rec.metrics.u,
            s: rec.metrics.s,
            h: rec.metrics.h,
            skipped_stages: rec.skipped_stages(),
            total_stages: rec.stages.len(),
        });
    }
    let table = SweepTable { axis, rows };
    let out = &config.output_dir;
    write_bytes(&out.join(format!("sweep-{}.csv", axis.name())), table.to_csv()?.as_bytes())?;
    write_bytes(&out.join(format!("sweep-{}.md", axis.name())), table.to_markdown().as_bytes())?;
    Ok(table)
}

/// Markdown summary of a run.
pub fn render_report(record: &RunRecord) -> String {
    let m = &record.metrics;
    let mut s = String::new();
    let _ = writeln!(s, "## Metrics\n");
    let _ = writeln!(s, "| T1 | u | s | H |\n|---|---|---|---|");
    let _ = writeln!(s, "| {:.2} | {:.2} | {:.2} | {:.2} |\n", m.t1, m.u, m.s, m.h);
    let _ = writeln!(s, "## Stages\n\n| stage | cached | seconds | key |\n|---|---|---|---|");
    for st in &record.stages {
        let _ = writeln!(s, "| {} | {} | {:.2} | {} |", st.name, st.skipped, st.seconds, &st.key[..16]);
    }
    let _ = writeln!(s, "\n## Per class\n\n| class | ZSL | GZSL |\n|---|---|---|");
    for (name, acc) in &m.per_class {
        let zsl = acc.zsl.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        let _ = writeln!(s, "| {name} | {zsl} | {:.1} |", acc.gzsl);
    }
    s
}
