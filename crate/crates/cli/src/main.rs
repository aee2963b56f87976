use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use modseg_core::config::ExperimentConfig;
use modseg_core::data::{gen_synthetic, Split, SyntheticSpec};
use modseg_core::eval::{RunReport, WindowConfig};
use modseg_core::pipeline::{self, AblationReport};
use modseg_core::prompts::PromptTemplate;
use modseg_core::training::TrainMode;

#[derive(Parser)]
#[command(name = "modseg", version, about = "Text-conditioned CT/MR volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Embed every (modality, class) prompt of a manifest into a cache file.
    PrecomputeEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Encoder id (`hash:<dim>` or `cmd:<program>`); overrides text.encoder.
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        template: Option<PromptTemplate>,
        /// Output path; defaults to the config's `embeddings`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an unpaired synthetic CT/MR dataset and its manifest.
    GenSynthetic {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 6)]
        n_ct: usize,
        #[arg(long, default_value_t = 6)]
        n_mr: usize,
        /// Scans per modality held out as the test split.
        #[arg(long, default_value_t = 2)]
        n_test: usize,
        /// Edge length of the cubic volumes.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// `nii.gz`, `nii` or `mmvol`.
        #[arg(long, default_value = "nii.gz")]
        format: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model into the config's output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the run directory's checkpoint if present.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train the vision-only baseline head.
        #[arg(long)]
        no_text: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with sliding-window inference.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Prompt each volume with the other modality's text vectors.
        #[arg(long)]
        mistaken_prompts: bool,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Config supplying preprocessing and window settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        roi: Option<usize>,
        #[arg(long)]
        overlap: Option<f64>,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the text on/off x schedule matrix.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render saved reports (report.json or ablation.json) as tables.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend(extra);
    Ok(ExperimentConfig::load(&args.config, &overrides)?)
}

fn write_json(path: &Path, value: &RunReport) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PrecomputeEmbeddings { cfg, encoder, template, out } => {
            let mut extra = Vec::new();
            if let Some(e) = encoder {
                extra.push(format!("text.encoder={:?}", e));
            }
            if let Some(t) = template {
                extra.push(format!("text.template={:?}", t.to_string()));
            }
            let config = load_config(&cfg, extra)?;
            let out = out.or_else(|| config.embeddings.clone()).context("no output path: pass --out or set `embeddings`")?;
            let table = pipeline::precompute_embeddings(&config, &out)?;
            let h = table.header();
            println!("wrote {} ({} classes x 2 modalities, d_txt {}, encoder {})", out.display(), h.num_classes, h.d_txt, h.encoder_id);
        }
        Command::GenSynthetic { classes, n_ct, n_mr, n_test, size, format, seed, out } => {
            let spec = SyntheticSpec {
                num_classes: classes,
                n_ct,
                n_mr,
                test_per_modality: n_test,
                dims: [size; 3],
                format,
                ..Default::default()
            };
            let m = gen_synthetic(&spec, seed, &out)?;
            println!("wrote {} scans and {}", m.entries.len(), out.join("manifest.jsonl").display());
        }
        Command::Train { cfg, resume, epochs, mode, seed, no_text, output } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(format!("train.epochs={e}"));
            }
            if let Some(m) = mode {
                let key = serde_json::to_string(&m)?;
                extra.push(format!("train.mode={key}"));
            }
            if let Some(s) = seed {
                extra.push(format!("seed={s}"));
            }
            if no_text {
                extra.push("text_embedding=false".into());
            }
            let mut config = load_config(&cfg, extra)?;
            if let Some(o) = output {
                config.output_dir = o;
            }
            let outcome = pipeline::run_train(&config, resume)?;
            if let Some(last) = outcome.history.last() {
                println!("epoch {} mean loss {:.5}", last.epoch, last.mean_loss);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Evaluate { ckpt, manifest, embeddings, mistaken_prompts, split, config, roi, overlap, out } => {
            let config = match config {
                Some(p) => ExperimentConfig::load(&p, &[])?,
                None => {
                    let (_, header) = modseg_core::training::load_model::<f32>(&ckpt)?;
                    let mut c = ExperimentConfig::default();
                    let p = header.model.backbone.patch_size;
                    c.preprocess.patch = p;
                    c.eval.window = WindowConfig { roi: p, ..c.eval.window };
                    c
                }
            };
            let mut eval = config.eval.clone();
            if let Some(r) = roi {
                eval.window.roi = r;
            }
            if let Some(o) = overlap {
                eval.window.overlap = o;
            }
            let report = pipeline::run_evaluate(
                &ckpt,
                &manifest,
                embeddings.as_deref(),
                &config.preprocess,
                &eval,
                split,
                mistaken_prompts,
            )?;
            print!("{}", report.render_table());
            if let Some(o) = out {
                write_json(&o, &report)?;
            }
        }
        Command::Ablate { cfg } => {
            let config = load_config(&cfg, Vec::new())?;
            let report = pipeline::run_ablation(&config)?;
            print!("{}", report.render_table());
        }
        Command::Report { files } => {
            for f in files {
                let text = std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
                if let Ok(r) = serde_json::from_str::<RunReport>(&text) {
                    r.verify()?;
                    print!("{}", r.render_table());
                } else if let Ok(a) = serde_json::from_str::<AblationReport>(&text) {
                    print!("{}", a.render_table());
                } else {
                    anyhow::bail!("{}: neither a run report nor an ablation report", f.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<modseg_core::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
