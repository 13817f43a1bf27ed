//! Command-line entry point: dataset generation, training, evaluation,
//! gradient checking, vocabulary consistency, and head-mode ablation.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use triplet_harness::config::RunConfig;
use triplet_harness::error::{HarnessError, Result};
use triplet_harness::study::run_variant;
use triplet_harness::synth::{dump_split, generate_dataset};
use triplet_harness::train::{evaluate_split, train};
use triplet_harness::gradsuite;
use triplet_core::metrics::EvalReport;
use triplet_core::model::{Model, Variant};
use triplet_core::tensor::checkpoint::Checkpoint;
use triplet_core::vocab::{CountTable, TripletVocabulary};

#[derive(Parser)]
#[command(name = "triplet-harness", about = "Synthetic triplet-recognition experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadsArg {
    SelfOnly,
    Mixed,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and write it as JSON lines per split.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write checkpoint + loss log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split and write the report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Use the tiny configuration (the only one wired up).
        #[arg(long, default_value_t = true)]
        tiny: bool,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Check a triplet vocabulary against published component counts.
    VocabCheck {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        counts: PathBuf,
    },
    /// Train the decoder ablation (self-only vs mixed heads) and report both.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        heads: HeadsArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_path(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialization is infallible")
}

/// Top predicted-class AP rows from a report, best first.
fn top_class_table(report: &EvalReport, vocab: &TripletVocabulary, n: usize) -> serde_json::Value {
    let mut rows: Vec<(usize, f64)> = report
        .per_class
        .ivt
        .iter()
        .enumerate()
        .filter_map(|(i, ap)| ap.map(|a| (i, a)))
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    rows.truncate(n);
    serde_json::Value::Array(
        rows.into_iter()
            .map(|(i, ap)| {
                serde_json::json!({
                    "class": i,
                    "name": vocab.triplets()[i].name,
                    "ap": ap,
                })
            })
            .collect(),
    )
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let data = generate_dataset(&cfg.data, cfg.model.img_h, cfg.model.img_w, cfg.seed)?;
            std::fs::create_dir_all(&out)?;
            write(&out.join("train.jsonl"), &dump_split(&data.train))?;
            write(&out.join("val.jsonl"), &dump_split(&data.val))?;
            write(&out.join("test.jsonl"), &dump_split(&data.test))?;
            let names: Vec<&str> = data.vocab.triplets().iter().map(|t| t.name.as_str()).collect();
            write(&out.join("vocab.json"), &to_json(&names))?;
            println!(
                "{}",
                serde_json::json!({
                    "train_frames": data.train.len(),
                    "val_frames": data.val.len(),
                    "test_frames": data.test.len(),
                    "triplets": data.vocab.num_triplets(),
                })
            );
            Ok(())
        }
        Cmd::Train { config, variant, epochs, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = variant {
                cfg.variant = Variant::parse(&v).map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let data = generate_dataset(&cfg.data, cfg.model.img_h, cfg.model.img_w, cfg.seed)?;
            let mut outcome = train(&cfg, &data)?;
            std::fs::create_dir_all(&out)?;
            write(&out.join("loss_log.csv"), &outcome.log_csv())?;
            write(&out.join("config.json"), &to_json(&cfg))?;
            outcome
                .checkpoint(&cfg)
                .save(&out.join("checkpoint.json"))
                .map_err(HarnessError::Core)?;
            let last = outcome.log.last().expect("at least one epoch");
            println!(
                "{}",
                serde_json::json!({
                    "variant": cfg.variant.name(),
                    "epochs": cfg.epochs,
                    "final_total_loss": last.l_total,
                    "selected_epoch": outcome.selected_epoch,
                })
            );
            Ok(())
        }
        Cmd::Eval { config, checkpoint, split, out } => {
            let ckpt = Checkpoint::load(&checkpoint).map_err(HarnessError::Core)?;
            let cfg = match &config {
                Some(p) => RunConfig::from_path(p)?,
                None => serde_json::from_value(
                    ckpt.manifest
                        .get("config")
                        .cloned()
                        .ok_or_else(|| HarnessError::format("checkpoint manifest has no config"))?,
                )
                .map_err(|e| HarnessError::format(format!("checkpoint config: {}", e)))?,
            };
            cfg.validate()?;
            let manifest_variant = ckpt.manifest.get("variant").and_then(|v| v.as_str());
            if manifest_variant != Some(cfg.variant.name()) {
                return Err(HarnessError::format(format!(
                    "checkpoint was trained as {:?}, config requests {}",
                    manifest_variant,
                    cfg.variant.name()
                )));
            }
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let mut model = Model::new(cfg.variant, &cfg.model, &mut rng)
                .map_err(HarnessError::Core)?;
            model.load_checkpoint(&ckpt).map_err(HarnessError::Core)?;
            let data = generate_dataset(&cfg.data, cfg.model.img_h, cfg.model.img_w, cfg.seed)?;
            let scenes = match split {
                SplitArg::Train => &data.train,
                SplitArg::Val => &data.val,
                SplitArg::Test => &data.test,
            };
            let report = evaluate_split(&model, &data.vocab, scenes)?;
            let map_ivt = report.map.ivt;
            let top = top_class_table(&report, &data.vocab, 10);
            let rendered = serde_json::json!({ "report": report, "top_classes": top });
            write(&out, &serde_json::to_string_pretty(&rendered).expect("serializable"))?;
            println!("{}", serde_json::json!({ "map_ivt": map_ivt }));
            Ok(())
        }
        Cmd::Gradcheck { tiny, seeds, tolerance } => {
            if !tiny {
                return Err(HarnessError::config(
                    "only the tiny gradient-check configuration is supported",
                ));
            }
            let report = gradsuite::run_suite(seeds, tolerance)?;
            println!("{}", to_json(&report));
            if !report.pass {
                return Err(HarnessError::check(format!(
                    "gradient suite max relative error {} exceeds {}",
                    report.max_rel_err, tolerance
                )));
            }
            Ok(())
        }
        Cmd::VocabCheck { vocab, counts } => {
            let v = TripletVocabulary::from_path(&vocab).map_err(HarnessError::Core)?;
            let c = CountTable::from_path(&counts).map_err(HarnessError::Core)?;
            let report = v.consistency_check(&c);
            println!("{}", to_json(&report));
            if !report.all_ok {
                return Err(HarnessError::check("vocabulary counts are inconsistent"));
            }
            Ok(())
        }
        Cmd::Ablate { config, heads, out } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let data = generate_dataset(&cfg.data, cfg.model.img_h, cfg.model.img_w, cfg.seed)?;
            let variants: &[Variant] = match heads {
                HeadsArg::SelfOnly => &[Variant::RdvSelfOnly],
                HeadsArg::Mixed => &[Variant::Rdv],
                HeadsArg::Both => &[Variant::RdvSelfOnly, Variant::Rdv],
            };
            std::fs::create_dir_all(&out)?;
            let mut summary = Vec::new();
            for &variant in variants {
                let result = run_variant(&cfg, variant, &data)?;
                write(&out.join(format!("{}.json", variant.name())), &to_json(&result))?;
                summary.push(result);
            }
            println!("{}", to_json(&summary));
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
