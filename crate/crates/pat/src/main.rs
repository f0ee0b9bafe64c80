use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use pat::checkpoint;
use pat::data::{self, SyntheticSpec};
use pat::error::{PatError, Result};
use pat::loss::LossParams;
use pat::model::{EncodingMode, PatModel, Structure};
use pat::optim::ParamSet;
use pat::train::{self, RunConfig};
use pat::verify;

#[derive(Parser)]
#[command(name = "pat", about = "Dense multi-label temporal action detection on feature sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a spec file.
    GenData {
        /// JSON spec; omit to use the built-in desk-scale spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON file for per-epoch losses.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory (per-frame mAP).
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory or a path to its manifest.json.
        #[arg(long, visible_alias = "manifest")]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Override the fine-head fusion weight (coarse gets 1 - value).
        #[arg(long)]
        alpha_fine: Option<f64>,
        /// Optional JSON report path; the report also prints to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the built-in verification suites.
    Verify {
        /// Inject a known fault the verifier must catch (self-test).
        /// Supported mode: relpos-sign.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Train the same data under ablated configurations and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset for mAP; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// One of: encoding, structure, loss, modules.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct EvalReport {
    map: f64,
    per_class_ap: Vec<Option<f64>>,
    n_frames: usize,
    config_hash: String,
}

#[derive(Serialize)]
struct AblateRow {
    variant: String,
    seed: u64,
    map: f64,
    initial_loss: f64,
    final_loss: f64,
}

fn config_hash(cfg: &RunConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_slice(&fs::read(path)?)?;
    cfg.model.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let mut spec = match spec {
                Some(p) => serde_json::from_slice::<SyntheticSpec>(&fs::read(p)?)?,
                None => SyntheticSpec::desk(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let seqs = data::save_dataset(&out, &spec)?;
            println!(
                "wrote {} sequences ({} frames x {} dims, {} classes) to {}",
                seqs.len(),
                seqs.first().map_or(0, |s| s.len()),
                spec.d,
                spec.c,
                out.display()
            );
            Ok(true)
        }
        Command::Train { config, data: data_dir, out, log } => {
            let cfg = load_config(&config)?;
            let dataset = data::load_dataset(&data_dir)?;
            let model = PatModel::new(cfg.model.clone())?;
            let mut params: ParamSet<f32> = model.init_params(cfg.train.seed)?;
            let stats = train::train_model(&model, &mut params, &dataset, &cfg.train, |s, _| {
                println!("epoch {:>3}  loss {:.6}  lr {:.2e}", s.epoch, s.mean_loss, s.lr);
                Ok(())
            })?;
            checkpoint::save(&out, &params)?;
            println!("checkpoint written to {}", out.display());
            if let Some(log_path) = log {
                fs::write(&log_path, serde_json::to_vec_pretty(&stats)?)?;
            }
            Ok(true)
        }
        Command::Eval { config, data: data_dir, ckpt, alpha_fine, report } => {
            let cfg = load_config(&config)?;
            let dataset = data::load_dataset(&data_dir)?;
            let model = PatModel::new(cfg.model.clone())?;
            let mut params: ParamSet<f32> = model.init_params(0)?;
            checkpoint::load_into(&ckpt, &mut params)?;
            let map = match alpha_fine {
                Some(af) => train::eval_map_with_alpha(&model, &params, &dataset, (af, 1.0 - af))?,
                None => train::eval_map(&model, &params, &dataset)?,
            };
            let out = EvalReport {
                map: map.map,
                per_class_ap: map.per_class_ap,
                n_frames: map.n_frames,
                config_hash: config_hash(&cfg)?,
            };
            let json = serde_json::to_string_pretty(&out)?;
            println!("{json}");
            if let Some(p) = report {
                fs::write(&p, json)?;
            }
            Ok(true)
        }
        Command::Verify { fault } => {
            let inject = match fault.as_deref() {
                None => false,
                Some("relpos-sign") => true,
                Some(other) => {
                    return Err(PatError::Config(format!(
                        "unknown fault mode `{other}` (supported: relpos-sign)"
                    )))
                }
            };
            let results = verify::run_all(inject)?;
            let mut all_ok = true;
            for r in &results {
                println!("{} {:<35} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                all_ok &= r.passed;
            }
            Ok(all_ok)
        }
        Command::Ablate { config, data: data_dir, eval_data, axis, seeds, report } => {
            let base = load_config(&config)?;
            let dataset = data::load_dataset(&data_dir)?;
            let eval_set = match eval_data {
                Some(p) => data::load_dataset(&p)?,
                None => dataset.clone(),
            };
            let variants: Vec<(String, RunConfig)> = match axis.as_str() {
                "encoding" => [EncodingMode::Relative, EncodingMode::Absolute, EncodingMode::None]
                    .into_iter()
                    .map(|enc| {
                        let mut c = base.clone();
                        c.model.encoding = enc;
                        (format!("{enc:?}").to_lowercase(), c)
                    })
                    .collect(),
                "structure" => {
                    [Structure::Full, Structure::V1Hierarchical, Structure::V2FromTokens]
                        .into_iter()
                        .map(|s| {
                            let mut c = base.clone();
                            c.model.structure = s;
                            (format!("{s:?}"), c)
                        })
                        .collect()
                }
                "modules" => {
                    [Structure::Full, Structure::FdmOnly, Structure::CdmOnly, Structure::TokensOnly]
                        .into_iter()
                        .map(|s| {
                            let mut c = base.clone();
                            c.model.structure = s;
                            (format!("{s:?}"), c)
                        })
                        .collect()
                }
                "loss" => {
                    let mut asym = base.clone();
                    asym.model.loss = LossParams::default();
                    let mut bce = base.clone();
                    bce.model.loss = LossParams::bce();
                    vec![("asymmetric".into(), asym), ("bce".into(), bce)]
                }
                other => {
                    return Err(PatError::Config(format!(
                        "unknown ablation axis `{other}` (use encoding|structure|loss|modules)"
                    )))
                }
            };
            let mut rows = Vec::new();
            for (name, cfg) in &variants {
                for seed in 0..seeds {
                    let model = PatModel::new(cfg.model.clone())?;
                    let mut params: ParamSet<f32> = model.init_params(seed)?;
                    let clip = cfg.train.clip_len.unwrap_or(cfg.model.t);
                    let initial = train::mean_loss(&model, &params, &dataset, clip, 1234)?;
                    let mut tp = cfg.train.clone();
                    tp.seed = seed;
                    train::train_model(&model, &mut params, &dataset, &tp, |_, _| Ok(()))?;
                    let final_loss = train::mean_loss(&model, &params, &dataset, clip, 1234)?;
                    let map = train::eval_map(&model, &params, &eval_set)?;
                    println!(
                        "{name:<16} seed {seed}  mAP {:.4}  loss {initial:.4} -> {final_loss:.4}",
                        map.map
                    );
                    rows.push(AblateRow {
                        variant: name.clone(),
                        seed,
                        map: map.map,
                        initial_loss: initial,
                        final_loss,
                    });
                }
            }
            if let Some(p) = report {
                fs::write(&p, serde_json::to_vec_pretty(&rows)?)?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                PatError::Io(_) => 3,
                PatError::Json(_) => 2,
                PatError::BadMagic { .. }
                | PatError::VersionMismatch { .. }
                | PatError::Truncated { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
