use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use vgse::class_relation::{self, CRConfig, RelationMode};
use vgse::embeddings::{self, ClassEmbeddingTable};
use vgse::features::{load_features, read_features};
use vgse::manifest::{load_manifest, Split};
use vgse::neighbors::{self, NeighborIndex};
use vgse::patchgen;
use vgse::pc_trainer::{self, ClusterHeadParams, TrainConfig, TrainingSet};
use vgse::pipeline::{self, RunConfig, RunRecord, SweepAxis};
use vgse::synthetic::{self, SyntheticConfig};
use vgse::zsl_eval::{self, EvalReport, SjeConfig};
use vgse::{Error, Result};

/// Visually grounded semantic embeddings for zero-shot learning.
#[derive(Parser)]
#[command(name = "vgse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment images into patches and write the crops plus boxes.jsonl.
    Patchify {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = patchgen::DEFAULT_SEGMENTS)]
        n_segments: usize,
        #[arg(long, default_value_t = patchgen::DEFAULT_COMPACTNESS)]
        compactness: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact k-nearest-neighbour index over patch features.
    Neighbors {
        #[arg(long)]
        features: PathBuf,
        /// Keep only training-split rows of this manifest first.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = neighbors::DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the patch clustering heads.
    TrainPc(TrainArgs),
    /// Aggregate class embeddings from the trained heads.
    Embed {
        #[arg(long)]
        heads: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also embed unseen classes from their test images (diagnostic).
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-image cluster assignment CSV.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Predict unseen class embeddings from seen ones.
    Relate(RelateArgs),
    /// Train the compatibility model and report ZSL / GZSL accuracy.
    EvalZsl {
        #[arg(long)]
        image_features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value_t = SjeConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = SjeConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = SjeConfig::default().margin)]
        margin: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip L2 normalisation of table rows.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = SyntheticConfig::default().seed)]
        seed: u64,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        images: PathBuf,
    },
    /// Run every stage from a TOML config.
    Run(RunArgs),
    /// One run per value along an axis (dv, patches, mode, knowledge).
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Markdown summary of a run.json or report.json.
    Report {
        path: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    knn: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().clusters)]
    dv: usize,
    #[arg(long, default_value_t = TrainConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta)]
    beta: f64,
    #[arg(long, default_value_t = TrainConfig::default().gamma)]
    gamma: f64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RelateArgs {
    #[arg(long, default_value = "smo")]
    mode: RelationMode,
    #[arg(long)]
    seen: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Replacement class vectors, one {"class","w2v"} object per line.
    #[arg(long)]
    class_vectors: Option<PathBuf>,
    #[arg(long, default_value_t = CRConfig::default().alpha, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = CRConfig::default().eta)]
    eta: f64,
    #[arg(long, default_value_t = CRConfig::default().n_neighbors)]
    neighbors: usize,
    #[arg(long, default_value_t = CRConfig::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = CRConfig::default().max_iter)]
    max_iter: usize,
    /// L2-normalise word vectors before relating.
    #[arg(long)]
    normalize_words: bool,
    #[arg(long)]
    out: PathBuf,
    /// Relation weights JSONL; defaults to <out>.relations.jsonl.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=value` overrides, e.g. `--set train.clusters=12`.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        // Relative paths in the file are relative to the file.
        let base = self.config.parent().unwrap_or(Path::new("."));
        c.output_dir = base.join(&c.output_dir);
        if let Some(d) = c.data.as_mut() {
            for p in [&mut d.manifest, &mut d.patch_features, &mut d.image_features] {
                *p = base.join(&*p);
            }
            if let Some(cv) = d.class_vectors.as_mut() {
                *cv = base.join(&*cv);
            }
        }
        if let Some(p) = c.patchify.as_mut() {
            p.images_dir = base.join(&p.images_dir);
        }
        for o in &self.overrides {
            c.set(o)?;
        }
        if let Some(o) = &self.output_dir {
            c.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn print_metrics(r: &EvalReport) {
    println!("T1 {:.2}  u {:.2}  s {:.2}  H {:.2}", r.t1, r.u, r.s, r.h);
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Patchify { images, n_segments, compactness, out } => {
            let boxes = patchgen::patchify_dir(&images, n_segments, compactness, &out)?;
            println!("{} patches written to {}", boxes.len(), out.display());
        }
        Command::Neighbors { features, manifest, k, out } => {
            let mut f = read_features(&features)?;
            if let Some(m) = manifest {
                f = f.filter_split(&load_manifest(&m)?, Split::Train);
            }
            neighbors::build_knn(&f, k)?.save(&out)?;
            println!("{} rows, k = {k}", f.n_rows());
        }
        Command::TrainPc(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let features = load_features(&a.features, &manifest)?.filter_split(&manifest, Split::Train);
            let knn = NeighborIndex::load(&a.knn)?;
            let config = TrainConfig {
                clusters: a.dv,
                lambda: a.lambda,
                beta: a.beta,
                gamma: a.gamma,
                learning_rate: a.lr,
                batch_size: a.batch_size,
                epochs: a.epochs,
                seed: a.seed,
                neighbor_k: knn.k(),
            };
            let set = TrainingSet::from_manifest(&features, &manifest)?;
            let (params, report) = pc_trainer::train_pc(&set, &knn, &config)?;
            params.save(&a.out)?;
            if let Some(log) = a.log {
                write_json(&log, &report)?;
            }
            if let Some(last) = report.epochs.last() {
                println!("final loss {:.4} after {} steps", last.total, report.steps);
            }
        }
        Command::Embed { heads, features, manifest, oracle, out, assignments } => {
            let manifest = load_manifest(&manifest)?;
            let params = ClusterHeadParams::load(&heads)?;
            let features = load_features(&features, &manifest)?;
            let mut table = embeddings::seen_table(&params, &features, &manifest)?;
            if oracle {
                table = table.merge(&embeddings::oracle_unseen_embedding(&params, &features, &manifest, true)?)?;
            }
            table.save(&out)?;
            if let Some(path) = assignments {
                embeddings::write_assignments_csv(&path, &params, &features)?;
            }
            println!("{} class embeddings of dimension {}", table.len(), table.dim());
        }
        Command::Relate(a) => {
            let mut manifest = load_manifest(&a.manifest)?;
            if let Some(cv) = &a.class_vectors {
                manifest = manifest.with_class_vectors(cv)?;
            }
            let config = CRConfig {
                mode: a.mode,
                eta: a.eta,
                n_neighbors: a.neighbors,
                alpha: a.alpha,
                tol: a.tol,
                max_iter: a.max_iter,
                normalize_word_embeddings: a.normalize_words,
            };
            let seen = ClassEmbeddingTable::load(&a.seen)?;
            let (full, weights) = class_relation::relate(&seen, &manifest, &config)?;
            full.save(&a.out)?;
            let wpath = a.weights.unwrap_or_else(|| a.out.with_extension("relations.jsonl"));
            pipeline::write_relations(&wpath, &weights)?;
            println!("{} unseen classes related ({})", weights.len(), config.mode);
        }
        Command::EvalZsl { image_features, manifest, table, epochs, lr, margin, seed, raw, report } => {
            let manifest = load_manifest(&manifest)?;
            let images = read_features(&image_features)?;
            images.validate_against(&manifest, Some(1))?;
            let mut table = ClassEmbeddingTable::load(&table)?;
            if !raw {
                table = embeddings::l2_normalize(&table)?;
            }
            let config = SjeConfig { learning_rate: lr, margin, epochs, seed };
            let r = zsl_eval::evaluate(&images, &manifest, &table, &config)?;
            write_json(&report, &r)?;
            print_metrics(&r);
        }
        Command::Synth { seed, manifest, patches, images } => {
            let data = synthetic::generate(&SyntheticConfig { seed, ..Default::default() })?;
            data.write(&manifest, &patches, &images)?;
            println!("{} classes, {} images", data.manifest.n_classes(), data.manifest.images().len());
        }
        Command::Run(a) => {
            let record = pipeline::run_pipeline(&a.config()?)?;
            for s in &record.stages {
                info!("{}: {}", s.name, if s.skipped { "cached" } else { "ran" });
            }
            print_metrics(&record.metrics);
        }
        Command::Sweep { run, axis, values } => {
            let table = pipeline::sweep(&run.config()?, axis, &values)?;
            print!("{}", table.to_markdown());
        }
        Command::Report { path } => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let parse = |e: serde_json::Error| Error::Parse { path: path.clone(), line: e.line(), message: e.to_string() };
            let value: serde_json::Value = serde_json::from_str(&text).map_err(parse)?;
            if value.get("stages").is_some() {
                let record: RunRecord = serde_json::from_value(value).map_err(parse)?;
                print!("{}", pipeline::render_report(&record));
            } else {
                let r: EvalReport = serde_json::from_value(value).map_err(parse)?;
                print_metrics(&r);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
