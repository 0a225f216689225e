use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use perspectivenet::datamodel::{parse_manifest, serialize_manifest, Manifest};
use perspectivenet::featurestore::{cache_path, encode_sample, write_cache_file, StubEncoder};
use perspectivenet::metrics::{combined_score, evaluate, EvalPair};
use perspectivenet::model::ModelConfig;
use perspectivenet::synth::{gen_dataset, gen_overfit_fixture, load_views, write_dataset};
use perspectivenet::trainer::{fit, load_checkpoint, CacheDir, FeatureSource, FitOptions, TrainConfig, TrainState};
use perspectivenet::Error;

#[derive(Parser)]
#[command(name = "perspectivenet", version, about = "Multi-view video captioning pipeline")]
struct Cli {
    /// Single-threaded numerics and reproducible output files.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (the 8-sample overfit fixture without --n).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Validate a manifest and write it back in canonical form.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode frames and write one feature cache per sample.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Train(TrainArgs),
    /// Greedy captions for every manifest sample, as JSON lines.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against manifest captions.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combined score from the four metric values.
    Score {
        #[arg(long)]
        bleu4: f64,
        #[arg(long)]
        meteor: f64,
        #[arg(long = "rouge-l")]
        rouge_l: f64,
        #[arg(long)]
        cider: f64,
    },
}

/// Train the connector, visual projection and adapters.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TrainConfig as a JSON file or inline object; flags below override it.
    #[arg(long)]
    config: Option<String>,
    /// ModelConfig as a JSON file or inline object.
    #[arg(long)]
    model_config: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_matching_loss: bool,
    /// Train on every sample instead of holding out ~10%.
    #[arg(long)]
    no_holdout: bool,
    /// Training log path; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    if err.is_data_error() {
        2
    } else {
        3
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_manifest(path: &Path) -> Result<Manifest, Error> {
    parse_manifest(&read_text(path)?)
}

/// A JSON object given inline or as a path to a file.
fn json_arg<T: serde::de::DeserializeOwned>(arg: &str) -> Result<T, Error> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        read_text(Path::new(arg))?
    };
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))
}

fn create_parent(path: &Path) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Value, Error> {
    match cli.command {
        Command::Synth { seed, out, n } => {
            let data = match n {
                Some(n) => gen_dataset(seed, n)?,
                None => gen_overfit_fixture(seed),
            };
            write_dataset(&data, &out)?;
            Ok(json!({
                "samples": data.samples.len(),
                "manifest": out.join("manifest.json"),
            }))
        }
        Command::Preprocess { manifest, out } => {
            let m = read_manifest(&manifest)?;
            create_parent(&out)?;
            fs::write(&out, serialize_manifest(&m))?;
            Ok(json!({ "samples": m.len(), "out": out }))
        }
        Command::Extract { manifest, frames, out } => {
            let m = read_manifest(&manifest)?;
            let encoder = StubEncoder::default();
            fs::create_dir_all(&out)?;
            let mut bytes = 0;
            for sample in &m.samples {
                let views = load_views(sample, &frames)?;
                let tensor = encode_sample(&encoder, &views).map_err(|e| Error::InSample {
                    sample: sample.id.clone(),
                    source: Box::new(e),
                })?;
                bytes += write_cache_file(&tensor, &cache_path(&out, &sample.id))?;
            }
            Ok(json!({ "samples": m.len(), "bytes": bytes, "out": out }))
        }
        Command::Train(args) => train(args, cli.deterministic),
        Command::Generate {
            ckpt,
            features,
            manifest,
            out,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let m = read_manifest(&manifest)?;
            let source = CacheDir(features);
            create_parent(&out)?;
            let mut w = BufWriter::new(fs::File::create(&out)?);
            for sample in &m.samples {
                let tensor = source.features(sample)?;
                let caption = state
                    .model
                    .caption(&state.store, &tensor, sample)
                    .map_err(|e| Error::InSample {
                        sample: sample.id.clone(),
                        source: Box::new(e),
                    })?;
                writeln!(w, "{}", json!({ "id": sample.id, "caption": caption }))?;
            }
            w.flush()?;
            Ok(json!({ "predictions": m.len(), "out": out }))
        }
        Command::Eval { pred, manifest, out } => {
            let m = read_manifest(&manifest)?;
            let mut pairs = Vec::new();
            for (i, line) in read_text(&pred)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
                    offset: i,
                    message: format!("prediction line {}: {e}", i + 1),
                })?;
                let (Some(id), Some(caption)) = (v["id"].as_str(), v["caption"].as_str()) else {
                    return Err(Error::Format(format!("prediction line {} needs string `id` and `caption`", i + 1)));
                };
                let sample = m.get(id).ok_or_else(|| Error::Validation {
                    sample: id.to_string(),
                    field: "id".into(),
                    message: "prediction id not found in manifest".into(),
                })?;
                pairs.push(EvalPair::new(id, caption, sample.caption.clone()));
            }
            let report = evaluate(&pairs).map_err(|e| Error::Format(e.to_string()))?;
            create_parent(&out)?;
            fs::write(&out, report.to_json())?;
            Ok(serde_json::to_value(&report.corpus).expect("scores serialize"))
        }
        Command::Score {
            bleu4,
            meteor,
            rouge_l,
            cider,
        } => {
            if ![bleu4, meteor, rouge_l, cider].iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidInput("metric values must be finite".into()));
            }
            let s = combined_score(bleu4, meteor, rouge_l, cider);
            println!("S = {s:.2}");
            Ok(json!({ "score_s": s }))
        }
    }
}

fn train(args: TrainArgs, deterministic: bool) -> Result<Value, Error> {
    let mut config: TrainConfig = match &args.config {
        Some(c) => json_arg(c)?,
        None => TrainConfig::default(),
    };
    let model: ModelConfig = match &args.model_config {
        Some(c) => json_arg(c)?,
        None => ModelConfig::default(),
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.batch {
        config.batch_size = v;
    }
    if let Some(v) = args.accum {
        config.accumulation = v;
    }
    if let Some(v) = args.eval_every {
        config.eval_every = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.max_steps.is_some() {
        config.max_steps = args.max_steps;
    }
    if args.no_matching_loss {
        config.matching_loss = false;
    }
    if args.no_holdout {
        config.holdout = false;
    }
    config.deterministic |= deterministic;

    let manifest = read_manifest(&args.manifest)?;
    let mut state = TrainState::for_manifest(&manifest, model, config)?;
    create_parent(&args.out)?;
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let report = fit(
        &mut state,
        &manifest,
        &CacheDir(args.features),
        FitOptions {
            checkpoint: Some(&args.out),
            log: Some(&mut log),
        },
    )?;
    log.flush()?;
    let last = report.evals.last().expect("fit always evaluates at the end");
    Ok(json!({
        "steps": state.step,
        "clipped_steps": report.clipped_steps(),
        "train_samples": report.train_ids.len(),
        "eval_samples": report.eval_ids.len(),
        "final": { "l_m": last.l_m, "l_g": last.l_g, "l": last.l },
        "checkpoint": args.out,
        "log": log_path,
    }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(result) => {
            println!("RESULT {result}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
