//! End-to-end criteria: bitwise determinism and the synthetic pre-training experiment.

use std::path::Path;

use personvit::checkpoint::Checkpoint;
use personvit::data::{generate_synth_dataset, write_manifest, Dataset, Split, SynthConfig};
use personvit::eval::{evaluate_reid, extract_embeddings, Embedder, EvalReport, ExtractMode};
use personvit::finetune::{run_finetune, FinetuneConfig};
use personvit::head::HeadConfig;
use personvit::pretrain::{run_pretrain, PretrainConfig, RunOptions};
use personvit::vit::VitConfig;

use super::Check;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn dataset(cfg: &SynthConfig, dir: &Path) -> Result<Dataset, String> {
    let entries = generate_synth_dataset(cfg, &dir.join("data")).map_err(err)?;
    let manifest = dir.join("data/manifest.csv");
    write_manifest(&manifest, &entries).map_err(err)?;
    Dataset::load(&manifest).map_err(err)
}

fn evaluate(model: &VitConfig, ckpt: &Path, mode: ExtractMode, ds: &Dataset) -> Result<EvalReport, String> {
    let emb = Embedder::from_checkpoint(&Checkpoint::load(ckpt).map_err(err)?, model, mode).map_err(err)?;
    let q = extract_embeddings(&emb, ds, &ds.split(Split::Query), 64).map_err(err)?;
    let g = extract_embeddings(&emb, ds, &ds.split(Split::Gallery), 64).map_err(err)?;
    Ok(evaluate_reid(&q, &g).map_err(err)?.report())
}

// ---------------------------------------------------------------- 7

pub fn criterion_7() -> Check {
    let root = tempfile::tempdir().map_err(err)?;
    let synth = SynthConfig { pretrain_identities: 8, train_identities: 4, test_identities: 4, images_per_identity: 4, seed: 7, ..Default::default() };
    let ds = dataset(&synth, root.path())?;
    let model = VitConfig { dim: 32, depth: 2, heads: 2, ..VitConfig::micro() };
    let mut pre = PretrainConfig { epochs: 2, batch_size: 8, head: HeadConfig { hidden_dim: 32, bottleneck_dim: 16, out_dim: 32 }, ..Default::default() };
    pre.crops.local_crops = 2;
    let mut bytes = Vec::new();
    for (run, workers) in [(0, 1), (1, 2)] {
        let out = root.path().join(format!("pre{run}"));
        let s = run_pretrain::<f32>(&model, &pre, 11, &ds, &out, &RunOptions { workers, resume: None }).map_err(err)?;
        bytes.push(std::fs::read(&s.final_checkpoint).map_err(err)?);
    }
    if bytes[0] != bytes[1] {
        return Err("two pre-training runs with the same seed wrote different checkpoints".into());
    }
    let backbone = root.path().join("pre0").join(personvit::pretrain::checkpoint_name(2));
    let fine = FinetuneConfig {
        epochs: 2,
        warmup_epochs: 1,
        identities_per_batch: 4,
        images_per_identity: 2,
        backbone_checkpoint: Some(backbone),
        ..Default::default()
    };
    let mut reports = Vec::new();
    for run in 0..2 {
        let out = root.path().join(format!("ft{run}"));
        let s = run_finetune::<f32>(&model, &fine, 11, &ds, &out).map_err(err)?;
        let r = evaluate(&model, &s.checkpoint, ExtractMode::FinetunedNeck, &ds)?;
        reports.push((std::fs::read(&s.checkpoint).map_err(err)?, serde_json::to_string(&r).map_err(err)?));
    }
    if reports[0] != reports[1] {
        return Err("two fine-tuning runs with the same seed differ".into());
    }
    Ok(format!(
        "pretrain checkpoints identical across 1 and 2 workers ({} bytes); fine-tune checkpoint and report identical: {}",
        bytes[0].len(),
        reports[0].1
    ))
}

// ---------------------------------------------------------------- 8

/// Desk-scale schedule for the 200-identity synthetic experiment.
pub fn toy_pretrain(lambda_mim: f64) -> PretrainConfig {
    let mut p = PretrainConfig {
        epochs: 30,
        batch_size: 64,
        lr_coefficient: 0.004,
        warmup_epochs: 3,
        teacher_temp_warmup_epochs: 10,
        checkpoint_interval: 1000,
        head: HeadConfig { hidden_dim: 256, bottleneck_dim: 64, out_dim: 512 },
        lambda_mim,
        ..Default::default()
    };
    p.crops.local_crops = 2;
    p
}

pub fn toy_finetune(backbone: Option<std::path::PathBuf>) -> FinetuneConfig {
    FinetuneConfig { epochs: 30, warmup_epochs: 5, lr_coefficient: 0.02, backbone_checkpoint: backbone, ..Default::default() }
}

pub const SEEDS: [u64; 3] = [0, 1, 2];

pub fn criterion_8() -> Check {
    let root = tempfile::tempdir().map_err(err)?;
    let model = VitConfig::micro();
    let mut map = [[0.0f64; 3]; 3];
    for (si, &seed) in SEEDS.iter().enumerate() {
        let dir = root.path().join(format!("s{seed}"));
        let ds = dataset(&SynthConfig { seed, ..Default::default() }, &dir)?;
        let random = run_finetune::<f32>(&model, &toy_finetune(None), seed, &ds, &dir.join("ft_random")).map_err(err)?;
        map[si][0] = evaluate(&model, &random.checkpoint, ExtractMode::FinetunedNeck, &ds)?.map;
        for (arm, lambda) in [(1, 1.0), (2, 0.0)] {
            let pre = run_pretrain::<f32>(&model, &toy_pretrain(lambda), seed, &ds, &dir.join(format!("pre_{arm}")), &RunOptions { workers: 1, resume: None })
                .map_err(err)?;
            let ft = run_finetune::<f32>(&model, &toy_finetune(Some(pre.final_checkpoint)), seed, &ds, &dir.join(format!("ft_{arm}"))).map_err(err)?;
            map[si][arm] = evaluate(&model, &ft.checkpoint, ExtractMode::FinetunedNeck, &ds)?.map;
        }
        eprintln!("criterion 8 seed {seed}: random {:.4} lambda_mim=1 {:.4} lambda_mim=0 {:.4}", map[si][0], map[si][1], map[si][2]);
    }
    let mean = |arm: usize| map.iter().map(|m| m[arm]).sum::<f64>() / map.len() as f64;
    let (random, full, dino_only) = (mean(0), mean(1), mean(2));
    let detail = format!("mean mAP random {random:.4}, lambda_mim=1 {full:.4}, lambda_mim=0 {dino_only:.4}");
    if full < random + 0.05 {
        return Err(format!("{detail}; pre-training gain {:.4} < 0.05", full - random));
    }
    if full < dino_only {
        return Err(format!("{detail}; masked modeling did not help"));
    }
    Ok(detail)
}
