use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hourglass_core::costmodel::{cost_table, module_flops, render_jsonl, render_table, CostInput, LayerDesc};
use hourglass_core::data::{evaluate, load_dataset, run_training, save_dataset};
use hourglass_core::numerics::gradcheck::{check_param_gradient, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use hourglass_core::numerics::RngStream;
use hourglass_core::{AVBatch, Checkpoint, Graph, HourglassModel, Mode, ModelConfig, RunConfig, Sample};

#[derive(Parser)]
#[command(name = "hourglass", version, about = "Down-up sampled audio-visual speech recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    FullScale,
    Desk,
    Tiny,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::FullScale => ModelConfig::full_scale(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/valid/test splits of a run config as feature files.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes manifest, metrics and checkpoints to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory from `generate-data`; generated in memory when
        /// omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Audio-only checkpoint whose shared weights initialize the model.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Greedy recognition of a dataset split; reports token error rate.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A split directory written by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Write the full report (including hypotheses) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic FLOP counts per module.
    Flops {
        #[arg(long, value_enum, default_value_t = Preset::FullScale)]
        preset: Preset,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
        d: Vec<usize>,
        /// Write `flops.txt` and `flops.jsonl` here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Count a single layer instead, e.g. '{"kind":"linear","d_in":256,"d_out":256}'.
        #[arg(long)]
        layer: Option<String>,
        /// Input shape for `--layer`, e.g. 25 or 25,56,56.
        #[arg(long, value_delimiter = ',')]
        shape: Vec<usize>,
    },
    /// Finite-difference check of the full joint loss gradient.
    GradCheck {
        #[arg(long, value_enum, default_value_t = Preset::Tiny)]
        preset: Preset,
        #[arg(long, value_parser = parse_mode, default_value = "avsr_full")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 1)]
        per_param: usize,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(load_dataset(&path).with_context(|| format!("loading {}", path.display()))?.1)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let cfg = read_config(&config)?;
            let mut offset = 0u64;
            for name in ["train", "valid", "test"] {
                let samples = cfg.split(name)?;
                if !samples.is_empty() {
                    save_dataset(&out.join(name), &cfg.corpus, offset, &samples)?;
                }
                println!("{name}: {} samples", samples.len());
                offset += samples.len() as u64;
            }
        }
        Command::Train {
            config,
            out,
            data,
            init_from,
        } => {
            let cfg = read_config(&config)?;
            let (train_set, valid_set) = match &data {
                Some(dir) => (load_split(dir, "train")?, load_split(dir, "valid")?),
                None => (cfg.split("train")?, cfg.split("valid")?),
            };
            if train_set.is_empty() {
                bail!("no training samples");
            }
            let res = run_training(&cfg, &train_set, &valid_set, &out, init_from.as_deref())?;
            if let Some(report) = &res.partial_load {
                println!(
                    "initialized {} blobs from checkpoint, {} skipped, {} fresh",
                    report.copied.len(),
                    report.skipped.len(),
                    report.fresh.len()
                );
            }
            let last = res.outcome.metrics.last().expect("at least one step");
            println!(
                "mode {} | {} steps | final loss {:.4} (ce {:.4}, ctc {:.4}, va_align {:.4})",
                cfg.mode.name(),
                last.step,
                last.total,
                last.ce,
                last.ctc,
                last.va_align
            );
            if let Some(v) = res.outcome.best_valid_loss {
                println!("best validation loss {v:.4} at step {}", res.outcome.best.step);
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            batch_size,
            out,
        } => {
            let model = Checkpoint::load(&checkpoint)?.to_model()?;
            let (_, samples) = load_dataset(&data)?;
            let report = evaluate(&model, &samples, batch_size)?;
            println!("samples {} | TER {:.4}", samples.len(), report.ter);
            if let Some(m) = report.within_window_attention_mass {
                println!("within-window attention mass {m:.4}");
            }
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Flops {
            preset,
            d,
            out,
            layer,
            shape,
        } => {
            if let Some(json) = layer {
                let desc = LayerDesc::from_json(&json)?;
                println!("{}", module_flops(&desc, &shape)?);
                return Ok(true);
            }
            let reports = cost_table(&preset.config(), &d, CostInput::reference())?;
            let table = render_table(&reports);
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("flops.txt"), &table)?;
                fs::write(dir.join("flops.jsonl"), render_jsonl(&reports)?)?;
            }
        }
        Command::GradCheck {
            preset,
            mode,
            seed,
            per_param,
        } => {
            let cfg = mode.apply(&preset.config());
            let model = HourglassModel::new(cfg.clone(), seed)?;
            let batch = demo_batch(&cfg, seed)?;
            let mut rng = RngStream::new(seed);
            let coords: Vec<(usize, usize)> = model
                .store()
                .iter()
                .flat_map(|(id, _, t)| {
                    (0..per_param)
                        .map(|_| (id, rng.int_range(0, t.numel() - 1)))
                        .collect::<Vec<_>>()
                })
                .collect();
            let report = check_param_gradient(
                model.store(),
                |g: &mut Graph| Ok(model.loss(g, &batch)?.0),
                DEFAULT_EPSILON,
                Some(&coords),
            )?;
            println!(
                "checked {} coordinates | max relative error {:.3e} (tolerance {:.0e})",
                report.checked, report.max_relative_error, DEFAULT_TOLERANCE
            );
            for (p, c, a, n) in report.failing_coordinates.iter().take(10) {
                println!("  {}[{c}]: analytic {a:.6e}, numeric {n:.6e}", model.store().name(*p));
            }
            return Ok(report.max_relative_error <= DEFAULT_TOLERANCE);
        }
    }
    Ok(true)
}

/// Two random utterances matching the model's geometry.
fn demo_batch(cfg: &ModelConfig, seed: u64) -> Result<AVBatch> {
    let mut rng = RngStream::new(seed ^ 0x5eed);
    let geo = &cfg.video;
    let (mut audio, mut video, mut tokens) = (Vec::new(), Vec::new(), Vec::new());
    for n in [4usize, 6] {
        audio.push(rng.normal_tensor(&[4 * n, cfg.audio_features], 1.0));
        video.push(rng.normal_tensor(&[n, geo.height, geo.width, geo.channels], 1.0));
        tokens.push((0..n / 2).map(|_| rng.int_range(1, cfg.vocab_size - 2)).collect());
    }
    Ok(AVBatch::from_sequences(
        &audio,
        &video,
        &tokens,
        cfg.vocab_size,
        0,
    )?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
