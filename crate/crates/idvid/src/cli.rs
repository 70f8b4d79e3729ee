//! Command-line entry point: dataset generation, tower pretraining,
//! training, sampling, evaluation, ablations, spectrum analysis, and
//! detection-stream curation. One command per process; everything is
//! deterministic given the config and seed.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure, 3 divergence-flagged run (partial outputs are kept).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::analysis::{
    band_energy, build_eval_set, fourier_spectrum, plan_csv_header, run_identity_eval,
    run_injection_ablation, run_steps_ablation, steps_csv_header, EvalPair,
};
use crate::checkpoint::{load_checkpoint, save_params};
use crate::config::{load_config, RunConfig};
use crate::curation::{curate, CurationParams};
use crate::error::{IdvidError, Result};
use crate::generate::generate_video;
use crate::injection::InjectionPlan;
use crate::nn::ParamStore;
use crate::pretrain::pretrain_towers;
use crate::report::{report_meta, write_csv, write_jsonl, write_pgm, write_ppm_sequence, write_video_tensor};
use crate::synthdata::{build_dataset, load_dataset, save_dataset, VideoSample};
use crate::trainer::{run_training, ModelConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "idvid",
    version,
    about = "Identity-preserving video diffusion at desk scale"
)]
struct Cli {
    /// JSON config file layered over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set train.alpha=0.7. Repeatable; applied
    /// after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (shorthand for --set out_dir=...).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed overriding every module seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic identity-video dataset to a file.
    GenData,
    /// Pretrain the frozen towers: face, semantic, text, metric encoders.
    TrainTowers,
    /// Train the conditioned denoiser; writes checkpoints and a step log.
    Train,
    /// Generate one clip from a held-out reference and caption.
    Sample,
    /// Score a checkpoint on held-out pairs; writes metric reports.
    Evaluate,
    /// Train and score one model per injection plan.
    AblateInjection,
    /// Score one checkpoint across a ladder of sampling step counts.
    AblateSteps,
    /// Radial log-amplitude spectrum of a packed video tensor file.
    Spectrum,
    /// Filter and id-assign a detection stream (stdin to stdout).
    Curate {
        /// Curation parameter file (JSON); defaults to the config's
        /// curation section.
        #[arg(long, value_name = "FILE")]
        params: Option<PathBuf>,
    },
}

/// Entry point; returns the process exit code.
pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| match s.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
            _ => Err(IdvidError::Config(format!(
                "--set expects KEY=VALUE, got '{s}'"
            ))),
        })
        .collect()
}

fn run(cli: Cli) -> Result<i32> {
    let sets = parse_sets(&cli.set)?;
    let mut cfg = load_config(cli.config.as_deref(), &sets)?;
    if let Some(out) = cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg),
        Cmd::TrainTowers => train_towers(&cfg),
        Cmd::Train => train(&cfg),
        Cmd::Sample => sample(&cfg),
        Cmd::Evaluate => evaluate(&cfg),
        Cmd::AblateInjection => ablate_injection(&cfg),
        Cmd::AblateSteps => ablate_steps(&cfg),
        Cmd::Spectrum => spectrum(&cfg),
        Cmd::Curate { params } => run_curate(&cfg, params.as_deref()),
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| IdvidError::io(path, e))
}

fn gen_data(cfg: &RunConfig) -> Result<i32> {
    let data = build_dataset(&cfg.dataset)?;
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    save_dataset(&data, &path)?;
    println!(
        "{}",
        serde_json::json!({
            "op": "gen-data",
            "samples": data.len(),
            "path": path.display().to_string(),
        })
    );
    Ok(0)
}

fn load_data(cfg: &RunConfig) -> Result<Vec<VideoSample>> {
    load_dataset(&cfg.dataset_path())
}

fn load_towers(cfg: &RunConfig) -> Result<ParamStore> {
    let ckpt = load_checkpoint(&cfg.towers_path())?;
    let (params, _) = ckpt.into_parts();
    Ok(params)
}

fn train_towers(cfg: &RunConfig) -> Result<i32> {
    let data = load_data(cfg)?;
    let (towers, report) = pretrain_towers(&cfg.model.extract, &data, &cfg.pretrain)?;
    let path = cfg.towers_path();
    if let Some(dir) = path.parent() {
        mkdir(dir)?;
    }
    let meta = serde_json::json!({
        "kind": "tower-checkpoint",
        "format_version": 1,
        "report": report,
        "pretrain": cfg.pretrain,
        "extract": cfg.model.extract,
    });
    save_params(&path, &meta.to_string(), &towers)?;
    println!(
        "{}",
        serde_json::json!({
            "op": "train-towers",
            "path": path.display().to_string(),
            "report": report,
        })
    );
    Ok(0)
}

fn train(cfg: &RunConfig) -> Result<i32> {
    let data = load_data(cfg)?;
    let towers = load_towers(cfg)?;
    let out_dir = cfg.train_dir();
    mkdir(&out_dir)?;
    let outcome = run_training(&cfg.model, &cfg.train, &data, &towers, Some(&out_dir))?;
    let last_loss = outcome.records.last().map(|r| r.loss);
    println!(
        "{}",
        serde_json::json!({
            "op": "train",
            "steps_run": outcome.steps_run,
            "final_loss": last_loss,
            "diverged": outcome.diverged,
            "out_dir": out_dir.display().to_string(),
        })
    );
    if outcome.diverged.is_some() {
        eprintln!("training flagged unstable; checkpoints and logs kept");
        return Ok(3);
    }
    Ok(0)
}

/// Load a model checkpoint plus the configs it embeds; the effective plan
/// honors the component flags the model was trained with.
fn load_model_checkpoint(
    path: &Path,
) -> Result<(ParamStore, ModelConfig, TrainConfig, InjectionPlan)> {
    let ckpt = load_checkpoint(path)?;
    let meta: Value = serde_json::from_str(&ckpt.meta).map_err(|e| {
        IdvidError::CorruptFile(format!("checkpoint {} meta: {e}", path.display()))
    })?;
    let model: ModelConfig = serde_json::from_value(meta["model"].clone()).map_err(|e| {
        IdvidError::CorruptFile(format!("checkpoint {} model config: {e}", path.display()))
    })?;
    let train_cfg: TrainConfig = serde_json::from_value(meta["train"].clone()).map_err(|e| {
        IdvidError::CorruptFile(format!("checkpoint {} train config: {e}", path.display()))
    })?;
    let plan = model.effective_plan(&train_cfg.components);
    let (params, _) = ckpt.into_parts();
    Ok((params, model, train_cfg, plan))
}

fn eval_pairs_for(cfg: &RunConfig, model: &ModelConfig, n: usize) -> Result<Vec<EvalPair>> {
    build_eval_set(
        model.dit.frames,
        model.dit.height,
        model.dit.width,
        model.extract.s,
        n,
        cfg.eval.seed,
        cfg.eval.identity_offset,
    )
}

fn sample(cfg: &RunConfig) -> Result<i32> {
    let path = cfg
        .sample
        .checkpoint
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.final_checkpoint_path());
    let (params, model, _, plan) = load_model_checkpoint(&path)?;
    let pairs = eval_pairs_for(cfg, &model, cfg.sample.pair_index + 1)?;
    let pair = &pairs[cfg.sample.pair_index];
    let frames = generate_video(
        &params,
        &model,
        &plan,
        &pair.ref_crop,
        Some(&pair.ref_kps_image),
        &pair.caption,
        &cfg.sampler,
    )?;
    let dir = cfg.out_root().join("samples");
    mkdir(&dir)?;
    let stem = format!("pair-{:03}", cfg.sample.pair_index);
    let video_path = dir.join(format!("{stem}.idvf"));
    write_video_tensor(&video_path, &frames, model.dit.height, model.dit.width)?;
    if cfg.sample.write_ppm {
        write_ppm_sequence(&dir.join(&stem), "frame", &frames, model.dit.height, model.dit.width)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "op": "sample",
            "video": video_path.display().to_string(),
            "frames": frames.len(),
            "caption": pair.caption,
            "identity": pair.identity.identity_id,
        })
    );
    Ok(0)
}

fn evaluate(cfg: &RunConfig) -> Result<i32> {
    let path = cfg
        .eval
        .checkpoint
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.final_checkpoint_path());
    let (params, model, _, plan) = load_model_checkpoint(&path)?;
    let towers = load_towers(cfg)?;
    let pairs = eval_pairs_for(cfg, &model, cfg.eval.n_pairs)?;
    let outcome = run_identity_eval(&params, &model, &plan, &towers, &pairs, &cfg.sampler)?;
    let dir = cfg.out_root().join("eval");
    mkdir(&dir)?;
    let meta = report_meta(serde_json::to_value(cfg)?);
    let mut records = vec![serde_json::json!({
        "kind": "summary",
        "report": outcome.report,
        "checkpoint": path.display().to_string(),
    })];
    for (i, fa) in outcome.per_pair_face_sim_a.iter().enumerate() {
        records.push(serde_json::json!({
            "kind": "pair",
            "pair": i,
            "face_sim_a": fa,
            "low_band": outcome.per_pair_low_band[i],
            "high_band": outcome.per_pair_high_band[i],
        }));
    }
    write_jsonl(&dir.join("report.jsonl"), &meta, &records)?;
    let m = &outcome.report;
    write_csv(
        &dir.join("report.csv"),
        &meta,
        &[
            "face_sim_a",
            "face_sim_b",
            "clip_score",
            "fid",
            "fid_ridged",
            "low_band",
            "high_band",
        ],
        &[vec![
            format!("{:.6}", m.face_sim_a),
            format!("{:.6}", m.face_sim_b),
            format!("{:.6}", m.clip_score),
            format!("{:.6}", m.fid),
            m.fid_ridged.to_string(),
            format!("{:.6}", m.low_band),
            format!("{:.6}", m.high_band),
        ]],
    )?;
    println!("{}", serde_json::to_string(&outcome.report)?);
    Ok(0)
}

fn ablate_injection(cfg: &RunConfig) -> Result<i32> {
    let data = load_data(cfg)?;
    let towers = load_towers(cfg)?;
    let pairs = eval_pairs_for(cfg, &cfg.model, cfg.eval.n_pairs)?;
    let plans: Vec<char> = cfg.ablation.plans.chars().collect();
    let dir = cfg.out_root().join("ablations");
    mkdir(&dir)?;
    let rows = run_injection_ablation(
        &plans,
        &cfg.model,
        &cfg.train,
        &data,
        &towers,
        &pairs,
        &cfg.sampler,
        Some(&dir.join("injection")),
    )?;
    let meta = report_meta(serde_json::to_value(cfg)?);
    let records: Vec<Value> = rows
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<_, _>>()?;
    write_jsonl(&dir.join("injection.jsonl"), &meta, &records)?;
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.csv_cells()).collect();
    write_csv(&dir.join("injection.csv"), &meta, &plan_csv_header(), &cells)?;
    let unstable: Vec<char> = rows
        .iter()
        .filter(|r| r.status == "unstable")
        .map(|r| r.plan)
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "op": "ablate-injection",
            "rows": rows.len(),
            "unstable": unstable,
            "table": dir.join("injection.csv").display().to_string(),
        })
    );
    if !unstable.is_empty() {
        eprintln!(
            "plans {:?} flagged unstable; reports and per-plan outputs kept",
            unstable
        );
        return Ok(3);
    }
    Ok(0)
}

fn ablate_steps(cfg: &RunConfig) -> Result<i32> {
    let path = cfg
        .eval
        .checkpoint
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.final_checkpoint_path());
    let (params, model, _, plan) = load_model_checkpoint(&path)?;
    let towers = load_towers(cfg)?;
    let pairs = eval_pairs_for(cfg, &model, cfg.eval.n_pairs)?;
    let rows = run_steps_ablation(
        &params,
        &model,
        &plan,
        &towers,
        &pairs,
        &cfg.sampler,
        &cfg.ablation.steps_ladder,
    )?;
    let dir = cfg.out_root().join("ablations");
    mkdir(&dir)?;
    let meta = report_meta(serde_json::to_value(cfg)?);
    let records: Vec<Value> = rows
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<_, _>>()?;
    write_jsonl(&dir.join("steps.jsonl"), &meta, &records)?;
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.csv_cells()).collect();
    write_csv(&dir.join("steps.csv"), &meta, &steps_csv_header(), &cells)?;
    println!(
        "{}",
        serde_json::json!({
            "op": "ablate-steps",
            "rows": rows.len(),
            "table": dir.join("steps.csv").display().to_string(),
        })
    );
    Ok(0)
}

fn spectrum(cfg: &RunConfig) -> Result<i32> {
    let video = cfg.spectrum.video.as_ref().ok_or_else(|| {
        IdvidError::Config("spectrum.video not set (path to a packed video tensor file)".into())
    })?;
    let (frames, h, w) = crate::report::read_video_tensor(Path::new(video))?;
    let (map, profile) = fourier_spectrum(&frames, h, w, None)?;
    let (low, high) = band_energy(&profile, cfg.eval.band_split)?;
    let dir = cfg.out_root().join("spectrum");
    mkdir(&dir)?;
    let meta = report_meta(serde_json::to_value(cfg)?);
    let record = serde_json::json!({
        "kind": "spectrum",
        "video": video,
        "profile": profile,
        "low_band": low,
        "high_band": high,
    });
    write_jsonl(&dir.join("profile.jsonl"), &meta, &[record])?;
    write_pgm(&dir.join("map.pgm"), &map)?;
    println!(
        "{}",
        serde_json::json!({
            "op": "spectrum",
            "low_band": low,
            "high_band": high,
            "profile": dir.join("profile.jsonl").display().to_string(),
            "map": dir.join("map.pgm").display().to_string(),
        })
    );
    Ok(0)
}

fn run_curate(cfg: &RunConfig, params_path: Option<&Path>) -> Result<i32> {
    let params: CurationParams = match params_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| IdvidError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| IdvidError::Config(format!("params file {}: {e}", p.display())))?
        }
        None => cfg.curation.clone(),
    };
    params.validate()?;
    let stdin = std::io::stdin().lock();
    let mut stdout = std::io::stdout().lock();
    let summary = curate(stdin, &mut stdout, &params)?;
    eprintln!("{}", serde_json::to_string(&summary)?);
    Ok(0)
}
