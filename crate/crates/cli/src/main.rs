use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use usaid_core::checkpoint::{load_checkpoint, save_checkpoint, usa_tensors};
use usaid_core::data::{generate_shapes_corpus, load_corpus_dir, save_corpus, Corpus};
use usaid_core::experiments::{
    self, model_from_checkpoint, plots, run_denoising_eval, run_downstream_seg, run_k_ablation,
    run_permutation_experiment, run_significance, test_items, train_segmenter, ExperimentResult, NamedRestorer,
    Pipeline, ResultRow,
};
use usaid_core::metrics::{fit_niqe_with, NiqeModel, NiqeOptions};
use usaid_core::trainer::{init_model, train, Mode, TrainConfig};
use usaid_core::usa::UsaModule;

#[derive(Parser)]
#[command(name = "usaid", version, about = "Segmentation-aware denoising experiments")]
struct Cli {
    /// TOML or JSON file with training-config keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Denoise,
    DownstreamSeg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled toy shapes corpus into <out>/data.
    GenData {
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 0)]
        n_val: usize,
    },
    /// Train one model and write its checkpoint and history.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Checkpoint file stem (defaults to the mode name).
        #[arg(long)]
        name: Option<String>,
    },
    /// PSNR/SSIM/NIQE/entropy of checkpoints and the noisy input.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "ckpt")]
        ckpts: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "15,25,35")]
        sigmas: Vec<f64>,
        /// NIQE model checkpoint from `niqe-fit`.
        #[arg(long)]
        niqe: Option<PathBuf>,
    },
    /// Train and evaluate one segmentation-aware denoiser per K.
    AblateK {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,12")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long)]
        niqe: Option<PathBuf>,
    },
    /// Convergence on true vs block- vs pixel-permuted targets.
    PermuteExp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Loss thresholds; defaults to half of ln K.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
    },
    /// mIoU of a clean-trained segmenter on denoised noisy test images.
    DownstreamSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "ckpt")]
        ckpts: Vec<PathBuf>,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
    },
    /// Repeated-noise paired t-tests between methods.
    Significance {
        #[arg(long, value_enum, default_value = "denoise")]
        pipeline: PipelineArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "ckpt")]
        ckpts: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        n_noise: usize,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        /// Segmenter checkpoint for the downstream pipeline (trained when absent).
        #[arg(long)]
        segmenter: Option<PathBuf>,
    },
    /// Fit a NIQE model on the pristine images of a corpus.
    NiqeFit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 0.75)]
        keep_fraction: f64,
        #[arg(long, default_value_t = 50)]
        min_patches: usize,
        /// Keep at most this many patches after sharpness selection.
        #[arg(long)]
        max_patches: Option<usize>,
    },
}

struct Ctx {
    cfg: TrainConfig,
    out: PathBuf,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ckpt_path(&self, stem: &str) -> Result<PathBuf> {
        let dir = self.out.join("ckpt");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir.join(format!("{stem}.usaid")))
    }

    fn write_meta(&self, command: &str, extra: Value) -> Result<()> {
        let meta = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed(),
            "config": self.cfg,
            "details": extra,
        });
        let path = self.path("meta.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).with_context(|| format!("writing {}", path.display()))
    }

    fn write_result(&self, r: &ExperimentResult) -> Result<()> {
        r.save(&self.out).context("writing results")?;
        log::info!("wrote {}", self.path("results.csv").display());
        Ok(())
    }
}

fn load_data(path: &Path) -> Result<Corpus> {
    load_corpus_dir(path).with_context(|| format!("loading corpus from {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

/// Denoisers from checkpoints plus the segmentation module of the first
/// one (used for the entropy column).
fn load_restorers(paths: &[PathBuf]) -> Result<(Vec<NamedRestorer>, Option<UsaModule<f32>>)> {
    let mut restorers = Vec::new();
    let mut usa = None;
    for p in paths {
        let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
        let loaded = model_from_checkpoint(&ckpt).with_context(|| format!("reading model from {}", p.display()))?;
        let Some(d) = loaded.model.denoiser else {
            bail!("{} holds no denoiser", p.display());
        };
        usa.get_or_insert(loaded.model.usa);
        restorers.push(NamedRestorer::net(stem(p), d));
    }
    Ok((restorers, usa))
}

fn load_niqe(path: Option<&PathBuf>) -> Result<Option<NiqeModel>> {
    path.map(|p| {
        let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
        NiqeModel::from_checkpoint(&ckpt).context("reading NIQE model")
    })
    .transpose()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx { cfg, out: cli.out };

    match cli.command {
        Command::GenData { n, size, k, n_train, n_val } => {
            let mut corpus = generate_shapes_corpus(n, (size, size), k, ctx.seed())?;
            corpus.assign_splits(n_train, n_val);
            let dir = ctx.path("data");
            save_corpus(&corpus, &dir)?;
            ctx.write_meta("gen-data", json!({ "n": n, "size": size, "k": k, "n_train": n_train, "n_val": n_val, "dir": dir }))?;
            println!("wrote {n} images to {}", dir.display());
        }
        Command::Train { data, mode, name } => {
            let corpus = load_data(&data)?;
            let mut cfg = ctx.cfg.clone();
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let outcome = train(&cfg, &corpus)?;
            let path = ctx.ckpt_path(name.as_deref().unwrap_or(cfg.mode.name()))?;
            save_checkpoint(&path, &outcome.checkpoint.tensors, &outcome.checkpoint.meta)?;
            outcome.history.save_csv(ctx.path("history.csv"))?;
            let last = outcome.history.epochs.last();
            let row = ResultRow {
                psnr: last.map(|r| r.val_psnr),
                entropy: last.map(|r| r.val_entropy),
                ..ResultRow::new("train", cfg.mode.name(), cfg.seed, Some(cfg.val_sigma))
            };
            ctx.write_result(&ExperimentResult::new("train", vec![row]))?;
            let ctx = Ctx { cfg, ..ctx };
            ctx.write_meta("train", json!({ "checkpoint": path, "embedding_hash": outcome.embedding_hash.1 }))?;
            println!("saved {}", path.display());
        }
        Command::Eval { data, ckpts, sigmas, niqe } => {
            let corpus = load_data(&data)?;
            let (nets, usa) = load_restorers(&ckpts)?;
            let usa = match usa {
                Some(u) => u,
                None => init_model(&ctx.cfg)?.usa,
            };
            let niqe = load_niqe(niqe.as_ref())?;
            let mut restorers = vec![NamedRestorer::identity()];
            restorers.extend(nets);
            let r = run_denoising_eval(&restorers, &test_items(&corpus), &sigmas, ctx.seed(), &usa, niqe.as_ref())?;
            ctx.write_result(&r)?;
            ctx.write_meta("eval", json!({ "checkpoints": ckpts, "sigmas": sigmas }))?;
        }
        Command::AblateK { data, ks, sigma, niqe } => {
            let corpus = load_data(&data)?;
            let niqe = load_niqe(niqe.as_ref())?;
            let r = run_k_ablation(&ks, &ctx.cfg, &corpus, sigma, ctx.seed(), niqe.as_ref())?;
            let psnrs: Vec<f64> = r.rows.iter().map(|row| row.psnr.unwrap_or(f64::NAN)).collect();
            plots::bar_plot(ctx.path("psnr_by_k.png"), &psnrs)?;
            ctx.write_result(&r)?;
            ctx.write_meta("ablate-k", json!({ "ks": ks, "sigma": sigma }))?;
        }
        Command::PermuteExp { data, seeds, thresholds } => {
            let corpus = load_data(&data)?;
            let k = corpus.k_classes.unwrap_or(ctx.cfg.k_classes);
            let mut cfg = ctx.cfg.clone();
            cfg.k_classes = k;
            let thresholds = if thresholds.is_empty() { vec![0.5 * (k as f64).ln()] } else { thresholds };
            let rep = run_permutation_experiment(&cfg, &corpus, &thresholds, &seeds)?;
            ctx.write_result(&rep.result)?;
            rep.write_steps_csv(fs::File::create(ctx.path("steps_to_threshold.csv"))?)?;
            rep.write_curves_csv(fs::File::create(ctx.path("curves.csv"))?)?;
            let curves: Vec<Vec<f64>> = experiments::Arm::ALL
                .iter()
                .filter_map(|a| rep.curve(*a, seeds[0]).map(<[f64]>::to_vec))
                .collect();
            plots::line_plot(ctx.path("curves.png"), &curves)?;
            let medians: Vec<Value> = thresholds
                .iter()
                .map(|&t| {
                    let m: Vec<String> = experiments::Arm::ALL
                        .iter()
                        .map(|a| format!("{a}={}", rep.median_steps(*a, t)))
                        .collect();
                    json!({ "tau": t, "median_steps": m })
                })
                .collect();
            for m in &medians {
                println!("{m}");
            }
            let ctx = Ctx { cfg, ..ctx };
            ctx.write_meta("permute-exp", json!({ "seeds": seeds, "medians": medians }))?;
        }
        Command::DownstreamSeg { data, ckpts, sigma } => {
            let corpus = load_data(&data)?;
            let (nets, _) = load_restorers(&ckpts)?;
            let mut seg_cfg = ctx.cfg.clone();
            seg_cfg.k_classes = corpus.k_classes.unwrap_or(seg_cfg.k_classes);
            let rep = run_downstream_seg(&nets, &seg_cfg, &corpus, sigma, ctx.seed())?;
            let path = ctx.ckpt_path("segmenter")?;
            save_checkpoint(&path, &usa_tensors(&rep.segmenter), &json!({ "kind": "segmenter", "config": seg_cfg }))?;
            let mious: Vec<f64> = rep.result.rows.iter().map(|r| r.miou.unwrap_or(f64::NAN)).collect();
            plots::bar_plot(ctx.path("miou.png"), &mious)?;
            ctx.write_result(&rep.result)?;
            ctx.write_meta("downstream-seg", json!({ "checkpoints": ckpts, "sigma": sigma, "segmenter": path }))?;
        }
        Command::Significance { pipeline, data, ckpts, n_noise, sigma, segmenter } => {
            let corpus = load_data(&data)?;
            let test = test_items(&corpus);
            let (nets, usa) = load_restorers(&ckpts)?;
            let mut restorers = vec![NamedRestorer::identity()];
            restorers.extend(nets);
            let report = match pipeline {
                PipelineArg::Denoise => {
                    let usa = match usa {
                        Some(u) => u,
                        None => init_model(&ctx.cfg)?.usa,
                    };
                    run_significance(&Pipeline::Denoise { restorers: &restorers, testset: &test, sigma, usa: &usa }, n_noise, ctx.seed())?
                }
                PipelineArg::DownstreamSeg => {
                    let k = corpus.k_classes.unwrap_or(ctx.cfg.k_classes);
                    let seg = match segmenter {
                        Some(p) => {
                            let ckpt = load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?;
                            let e = ckpt.tensor("usa.embed.conv1.weight").context("segmenter lacks embedding")?;
                            let mut u = UsaModule::random(ctx.cfg.channels, e.shape[3], k, 0)?;
                            u.load_tensors(&ckpt.tensors)?;
                            u
                        }
                        None => train_segmenter(&TrainConfig { k_classes: k, ..ctx.cfg.clone() }, &corpus)?,
                    };
                    let p = Pipeline::DownstreamSeg { restorers: &restorers, segmenter: &seg, testset: &test, sigma };
                    run_significance(&p, n_noise, ctx.seed())?
                }
            };
            ctx.write_result(&report.to_result())?;
            report.write_summary_csv(fs::File::create(ctx.path("significance.csv"))?)?;
            for p in &report.pairs {
                println!("{} vs {}: diff {:.4} p {:.4}{}", p.a, p.b, p.mean_diff, p.p_value, if p.degenerate { " (degenerate)" } else { "" });
            }
            ctx.write_meta("significance", serde_json::to_value(&report)?)?;
        }
        Command::NiqeFit { data, patch, keep_fraction, min_patches, max_patches } => {
            let corpus = load_data(&data)?;
            let model = fit_niqe_with(&corpus, &NiqeOptions { patch, keep_fraction, min_patches, max_patches })?;
            let ckpt = model.to_checkpoint();
            let path = ctx.ckpt_path("niqe")?;
            save_checkpoint(&path, &ckpt.tensors, &ckpt.meta)?;
            ctx.write_meta("niqe-fit", json!({ "patch": patch, "n_patches": model.n_patches, "checkpoint": path }))?;
            println!("fitted on {} patches; saved {}", model.n_patches, path.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
