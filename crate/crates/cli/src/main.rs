//! `personvit`: synthetic data, pre-training, fine-tuning, evaluation and
//! visualization exports driven by one layered JSON config.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use personvit::checkpoint::Checkpoint;
use personvit::config::{parse_config, Dtype, RunConfig};
use personvit::data::{decode_ppm, generate_synth_dataset, write_manifest, Dataset, Image, Split};
use personvit::eval::{evaluate_reid, extract_embeddings, knn_probe, save_embeddings, Embedder, ExtractMode};
use personvit::finetune::run_finetune;
use personvit::pretrain::{combined_loss_gradcheck, run_pretrain, CombinedCheck, RunOptions};
use personvit::viz::{render_correspondence_csv, VizModel};

const OUT_ENV: &str = "PERSONVIT_OUT";
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "personvit", version, about = "Self-supervised ViT pre-training and person re-identification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set pretrain.mask_ratio=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Threads for data preparation; results do not depend on it.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic person dataset and its manifest.
    GenData,
    /// Self-supervised pre-training on the `pretrain` split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised re-identification fine-tuning on the `train` split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pre-training checkpoint whose teacher backbone initializes the model.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Query/gallery retrieval evaluation (mAP, CMC).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cosine kNN identity probe (memory = gallery, test = query).
    KnnProbe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe the memory against itself (diagnostic).
        #[arg(long)]
        self_match: bool,
    },
    /// Cls-row attention heatmaps as PGM.
    VizAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
    },
    /// k-means over projected patch features, written as CSV.
    VizClusters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
    },
    /// Mutual-nearest patch correspondences between two images.
    VizCorr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
    },
    /// Finite-difference check of the full pre-training objective.
    Gradcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Pretrain { .. } => "pretrain",
            Self::Finetune { .. } => "finetune",
            Self::Eval { .. } => "eval",
            Self::KnnProbe { .. } => "knn-probe",
            Self::VizAttn { .. } => "viz-attn",
            Self::VizClusters { .. } => "viz-clusters",
            Self::VizCorr { .. } => "viz-corr",
            Self::Gradcheck => "gradcheck",
        }
    }
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    workers: usize,
}

impl Run {
    fn metrics(&self, record: serde_json::Value) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        let mut f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(f, "{record}")?;
        Ok(())
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn gen_data(run: &Run) -> Result<()> {
    let entries = generate_synth_dataset(&run.cfg.synth, &run.dir)?;
    let manifest = run.dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    info!("wrote {} images and {}", entries.len(), manifest.display());
    run.metrics(json!({ "images": entries.len(), "manifest": manifest }))
}

fn pretrain(run: &Run, data: &Path, resume: Option<PathBuf>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let opts = RunOptions { workers: run.workers, resume };
    let c = &run.cfg;
    let summary = match c.dtype {
        Dtype::F32 => run_pretrain::<f32>(&c.model, &c.pretrain, c.seed, &dataset, &run.dir, &opts)?,
        Dtype::F64 => run_pretrain::<f64>(&c.model, &c.pretrain, c.seed, &dataset, &run.dir, &opts)?,
    };
    println!("{}", summary.final_checkpoint.display());
    Ok(())
}

fn finetune(run: &mut Run, data: &Path, backbone: Option<PathBuf>) -> Result<()> {
    if let Some(b) = backbone {
        run.cfg.finetune.backbone_checkpoint = Some(b);
        run.cfg.write_resolved(&run.dir)?;
    }
    if let Some(b) = &run.cfg.finetune.backbone_checkpoint {
        if !b.is_file() {
            bail!("backbone checkpoint {} does not exist", b.display());
        }
    }
    let dataset = load_dataset(data)?;
    let c = &run.cfg;
    let summary = match c.dtype {
        Dtype::F32 => run_finetune::<f32>(&c.model, &c.finetune, c.seed, &dataset, &run.dir)?,
        Dtype::F64 => run_finetune::<f64>(&c.model, &c.finetune, c.seed, &dataset, &run.dir)?,
    };
    println!("{}", summary.checkpoint.display());
    Ok(())
}

fn embedder(run: &Run, ckpt_path: &Path, mode: ExtractMode) -> Result<Embedder> {
    let ckpt = load_checkpoint(ckpt_path)?;
    Embedder::from_checkpoint(&ckpt, &run.cfg.model, mode)
        .with_context(|| format!("checkpoint {} does not fit mode {mode:?}", ckpt_path.display()))
}

fn eval(run: &Run, data: &Path, ckpt: &Path) -> Result<()> {
    let emb = embedder(run, ckpt, run.cfg.eval.mode)?;
    let dataset = load_dataset(data)?;
    let bs = run.cfg.eval.batch_size;
    let query = extract_embeddings(&emb, &dataset, &dataset.split(Split::Query), bs)?;
    let gallery = extract_embeddings(&emb, &dataset, &dataset.split(Split::Gallery), bs)?;
    save_embeddings(&query, &run.dir.join("query_embeddings.pvit"))?;
    save_embeddings(&gallery, &run.dir.join("gallery_embeddings.pvit"))?;
    let result = evaluate_reid(&query, &gallery)?;
    if result.excluded_queries > 0 {
        warn!("{} queries have no valid cross-camera match and were excluded", result.excluded_queries);
    }
    let report = result.report();
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(run.dir.join("report.json"), format!("{text}\n"))?;
    run.metrics(serde_json::to_value(&report)?)?;
    println!("{text}");
    Ok(())
}

fn knn(run: &Run, data: &Path, ckpt: &Path, self_match: bool) -> Result<()> {
    let emb = embedder(run, ckpt, ExtractMode::PretrainCls)?;
    let dataset = load_dataset(data)?;
    let bs = run.cfg.eval.batch_size;
    let memory = extract_embeddings(&emb, &dataset, &dataset.split(Split::Gallery), bs)?;
    let test = if self_match { memory.clone() } else { extract_embeddings(&emb, &dataset, &dataset.split(Split::Query), bs)? };
    let k = run.cfg.eval.knn_k;
    let r = knn_probe(&memory, &test, k)?;
    if r.self_match {
        warn!("kNN probe ran against its own memory; accuracy is a diagnostic only");
    }
    let record = json!({ "k": k, "accuracy": r.accuracy, "self_match": r.self_match, "test_size": test.len() });
    std::fs::write(run.dir.join("knn.json"), format!("{}\n", serde_json::to_string_pretty(&record)?))?;
    run.metrics(record.clone())?;
    println!("{record}");
    Ok(())
}

fn viz_model(run: &Run, ckpt: &Path) -> Result<VizModel> {
    let ckpt_data = load_checkpoint(ckpt)?;
    VizModel::from_checkpoint(&ckpt_data, &run.cfg.pretrain.network(&run.cfg.model))
        .with_context(|| format!("checkpoint {} is not a compatible pre-training checkpoint", ckpt.display()))
}

fn viz_attn(run: &Run, ckpt: &Path, images: &[PathBuf]) -> Result<()> {
    let model = viz_model(run, ckpt)?;
    let layer = run.cfg.viz.layer.unwrap_or(run.cfg.model.depth - 1);
    let mut written = Vec::new();
    for path in images {
        let img = load_image(path)?;
        written.extend(model.export_attention_pgm(&img, layer, run.cfg.viz.head_reduce, &run.dir, &stem(path))?);
    }
    for p in &written {
        println!("{}", p.display());
    }
    run.metrics(json!({ "layer": layer, "files": written }))
}

fn viz_clusters(run: &Run, ckpt: &Path, images: &[PathBuf]) -> Result<()> {
    let model = viz_model(run, ckpt)?;
    let named = images.iter().map(|p| Ok((stem(p), load_image(p)?))).collect::<Result<Vec<_>>>()?;
    let k = run.cfg.viz.clusters;
    let assignment = model.cluster_patch_tokens(&named, k, run.cfg.seed)?;
    let path = run.dir.join("clusters.csv");
    std::fs::write(&path, assignment.to_csv())?;
    println!("{}", path.display());
    run.metrics(json!({ "k": k, "inertia": assignment.result.inertia, "iterations": assignment.result.history.len() }))
}

fn viz_corr(run: &Run, ckpt: &Path, a: &Path, b: &Path) -> Result<()> {
    let model = viz_model(run, ckpt)?;
    let pairs = model.correspondence_pairs(&load_image(a)?, &load_image(b)?, run.cfg.viz.top_n)?;
    let path = run.dir.join("correspondence.csv");
    std::fs::write(&path, render_correspondence_csv(&pairs))?;
    println!("{}", path.display());
    run.metrics(json!({ "pairs": pairs.len(), "top_n": run.cfg.viz.top_n }))
}

fn gradcheck(run: &Run) -> Result<bool> {
    let report = combined_loss_gradcheck(&CombinedCheck { seed: run.cfg.seed, ..CombinedCheck::default() })?;
    println!("max relative error: {:.3e} ({} elements)", report.max_rel_error, report.checked);
    run.metrics(json!({ "max_rel_error": report.max_rel_error, "checked": report.checked, "tolerance": GRADCHECK_TOL }))?;
    Ok(report.max_rel_error < GRADCHECK_TOL)
}

fn execute(cli: Cli) -> Result<bool> {
    let mut cfg = parse_config(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(root) = std::env::var_os(OUT_ENV) {
        cfg.output_dir = PathBuf::from(root);
    }
    if cli.common.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let dir = cfg.output_dir.join(cli.command.name());
    let resolved = cfg.write_resolved(&dir)?;
    info!("resolved config written to {}", resolved.display());
    let mut run = Run { cfg, dir, workers: cli.common.workers };
    match cli.command {
        Command::GenData => gen_data(&run)?,
        Command::Pretrain { data, resume } => pretrain(&run, &data, resume)?,
        Command::Finetune { data, backbone } => finetune(&mut run, &data, backbone)?,
        Command::Eval { data, checkpoint } => eval(&run, &data, &checkpoint)?,
        Command::KnnProbe { data, checkpoint, self_match } => knn(&run, &data, &checkpoint, self_match)?,
        Command::VizAttn { checkpoint, images } => viz_attn(&run, &checkpoint, &images)?,
        Command::VizClusters { checkpoint, images } => viz_clusters(&run, &checkpoint, &images)?,
        Command::VizCorr { checkpoint, image_a, image_b } => viz_corr(&run, &checkpoint, &image_a, &image_b)?,
        Command::Gradcheck => return gradcheck(&run),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
