use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tlrc_core::codec::{self, CodecError};
use tlrc_core::container::Container;
use tlrc_core::eval::{self, EvalError};
use tlrc_core::jpeg::parse_jpeg;
use tlrc_core::model::{Model, ModelConfig, MODEL_MAGIC};
use tlrc_core::train::{self, Phase, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "tlrc", version, about = "Lossless JPEG transcoder with learned lossy and residual coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Lossy,
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Transcode a baseline JPEG into a .tlrc container.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Rebuild the original JPEG from a container.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Re-parse the output and compare every coefficient.
        #[arg(long)]
        verify: bool,
    },
    /// Train a model on a directory of JPEG files.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model to continue from (the pretrained model for --phase joint).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 0.03)]
        lambda: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Tile edge in DCT sites (multiple of 16).
        #[arg(long, default_value_t = 32)]
        tile: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 1e-5)]
        lr_decayed: f64,
        /// Joint training without --resume.
        #[arg(long)]
        from_scratch: bool,
        /// Code coefficients with the residual network alone.
        #[arg(long)]
        direct: bool,
        #[arg(long, default_value_t = 32)]
        latent_channels: usize,
        #[arg(long, default_value_t = 32)]
        hyper_channels: usize,
        #[arg(long, default_value_t = 5)]
        mixtures: usize,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Transcode a corpus, check every round trip and report BPP.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Output path; `.json` or `.csv`.
        #[arg(long)]
        report: PathBuf,
        /// JSON file of externally measured sizes per method.
        #[arg(long)]
        baseline_sizes: Option<PathBuf>,
    },
    /// Evaluate one model on pre-encoded corpora per JPEG quality.
    QpSweep {
        #[arg(long)]
        model: PathBuf,
        /// Directory with one subdirectory per quality (q55, q65, ...).
        #[arg(long)]
        corpus_root: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_QPS)]
        qps: Vec<u8>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print container or model metadata as JSON.
    Inspect { file: PathBuf },
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if matches!(cause.downcast_ref::<CodecError>(), Some(CodecError::LosslessViolation(_)))
            || matches!(cause.downcast_ref::<EvalError>(), Some(EvalError::LosslessViolation { .. }))
        {
            return 3;
        }
    }
    2
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::from_bytes(&read(path)?).with_context(|| format!("loading model {}", path.display()))?)
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Encode { input, output, model } => {
            let model = load_model(&model)?;
            let jpeg = read(&input)?;
            let enc = codec::encode(&jpeg, &model).with_context(|| format!("encoding {}", input.display()))?;
            write(&output, &enc.bytes)?;
            log::info!(
                "{} -> {}: {} -> {} bytes ({:.2}% smaller){}",
                input.display(),
                output.display(),
                jpeg.len(),
                enc.bytes.len(),
                eval::bit_saving_pct(jpeg.len() as f64, enc.bytes.len() as f64),
                if enc.byte_exact { "" } else { ", raw scan stored" }
            );
        }
        Command::Decode { input, output, model, verify } => {
            let model = load_model(&model)?;
            let dec = codec::decode(&read(&input)?, &model).with_context(|| format!("decoding {}", input.display()))?;
            if verify {
                let reparsed = parse_jpeg(&dec.jpeg).context("re-parsing the decoded file")?;
                if reparsed.coeff_planes != dec.planes {
                    return Err(CodecError::LosslessViolation("decoded file does not carry the decoded coefficients".into()).into());
                }
                log::info!("verified: digest and {} coefficient planes match", dec.planes.len());
            }
            write(&output, &dec.jpeg)?;
        }
        Command::Train {
            phase,
            data,
            out,
            resume,
            seed,
            steps,
            lambda,
            batch,
            tile,
            lr,
            lr_decayed,
            from_scratch,
            direct,
            latent_channels,
            hyper_channels,
            mixtures,
            checkpoint_every,
        } => {
            let phase = match phase {
                PhaseArg::Lossy => Phase::LossyPretrain,
                PhaseArg::Joint => Phase::Joint,
            };
            let cfg = TrainConfig {
                lambda,
                batch_size: batch,
                tile_sites: tile,
                steps,
                lr_initial: lr,
                lr_decayed,
                seed,
                from_scratch,
                checkpoint: Some(out.clone()),
                checkpoint_every,
                ..TrainConfig::new(phase)
            };
            let model_config = ModelConfig {
                latent_channels,
                hyper_channels,
                mixtures,
                lambda,
                direct,
                ..ModelConfig::desk(Vec::new())
            };
            let init = resume.as_deref().map(load_model).transpose()?;
            let dataset = train::ingest_corpus(&data)?;
            log::info!("{} training files, {} skipped", dataset.files.len(), dataset.skipped);
            let outcome = match train::train(&cfg, &model_config, &dataset, init) {
                Err(TrainError::MissingPretrain) => {
                    return Err(UsageError("--phase joint needs --resume <pretrained.tlrm> or --from-scratch".into()).into())
                }
                Err(TrainError::NonFiniteLoss { step, last_good }) => {
                    last_good.save(&out)?;
                    bail!("non-finite loss at step {step}; last good model written to {}", out.display());
                }
                other => other?,
            };
            outcome.model.save(&out)?;
            log::info!("wrote {}", out.display());
        }
        Command::Eval { model, corpus, report, baseline_sizes } => {
            let ext = report.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("json" | "csv")) {
                return Err(UsageError("--report must end in .json or .csv".into()).into());
            }
            let model = load_model(&model)?;
            let baselines = baseline_sizes.as_deref().map(eval::load_baselines).transpose()?;
            let r = eval::evaluate(&model, &corpus, baselines.as_ref())?;
            let text = if ext.as_deref() == Some("csv") { r.to_csv()? } else { r.to_json()? };
            write(&report, text.as_bytes())?;
            let s = &r.summary;
            println!(
                "{} images: jpeg {:.4} bpp, tlrc {:.4} bpp, saving {:.2}%, residual share {:.2}%",
                s.images, s.jpeg_bpp, s.tlrc_bpp, s.bit_saving_pct, s.res_share_pct
            );
        }
        Command::QpSweep { model, corpus_root, qps, report } => {
            let model = load_model(&model)?;
            let sweep = eval::qp_sweep(&model, &corpus_root, &qps)?;
            let text = serde_json::to_string_pretty(&sweep)?;
            match report {
                Some(p) => write(&p, text.as_bytes())?,
                None => println!("{text}"),
            }
        }
        Command::Inspect { file } => {
            let bytes = read(&file)?;
            let v = if bytes.starts_with(MODEL_MAGIC) { inspect_model(&bytes)? } else { inspect_container(&bytes)? };
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(())
}

fn inspect_container(bytes: &[u8]) -> Result<serde_json::Value> {
    let c = Container::from_bytes(bytes)?;
    let g = &c.geometry;
    Ok(json!({
        "format": "tlrc",
        "flags": c.flags.names(),
        "width": g.width,
        "height": g.height,
        "components": g.components.iter().map(|c| json!({"id": c.id, "h": c.h_sampling, "v": c.v_sampling})).collect::<Vec<_>>(),
        "units": c.units.iter().map(|u| json!({
            "kind": u.kind.name(),
            "z_bytes": u.z.len(),
            "y_bytes": u.y.len(),
            "residual_bytes": u.residual.len(),
        })).collect::<Vec<_>>(),
        "sizes": c.sizes(),
        "file_bytes": bytes.len(),
        "bpp": eval::bits_per_pixel(bytes.len(), g.pixels()),
        "model_hash": hex(&c.model_hash),
        "stats_hash": hex(&c.stats_hash),
        "original_sha256": hex(&c.original_digest),
    }))
}

fn inspect_model(bytes: &[u8]) -> Result<serde_json::Value> {
    let m = Model::from_bytes(bytes)?;
    let params: usize = m.store.params().iter().map(|p| p.value.len()).sum();
    Ok(json!({
        "format": "tlrm",
        "config": m.config,
        "training": m.meta,
        "hash": hex(&m.hash()?),
        "parameters": params,
        "tensors": m.store.params().iter().map(|p| json!({"name": p.name, "shape": p.value.shape})).collect::<Vec<_>>(),
    }))
}
