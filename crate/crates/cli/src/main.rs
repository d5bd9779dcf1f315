use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tcrbind_autograd::{operator_suite, GradCheckOptions};
use tcrbind_core::contact::ContactMap;
use tcrbind_core::diagnostics::{variant_gradcheck, CHECKED_VARIANTS};
use tcrbind_core::features::{FeatureBank, FeatureSources};
use tcrbind_core::model::{count_parameters, load_checkpoint, EmbeddingMode, ModelConfig, Variant};
use tcrbind_core::negatives::sample_negatives;
use tcrbind_core::pairs::{read_pairs, read_sequences, write_pairs};
use tcrbind_core::physchem::{feature_names, featurize};
use tcrbind_core::report::MetricName;
use tcrbind_core::split::{make_splits, SplitPlan, DEFAULT_FOLDS};
use tcrbind_core::store::{mock_embed, read_store, write_store, MatrixRecord, StoreKind};
use tcrbind_core::train::{evaluate_external, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tcrbind",
    version,
    about = "Multimodal TCR-epitope binding prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the 88 physicochemical features of each sequence as CSV.
    Featurize {
        /// One sequence per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack per-residue embeddings into a binary store.
    PackEmbeddings {
        /// JSON lines with `key`, `rows`, `cols` and row-major `data`.
        #[arg(long, conflicts_with = "mock_sequences")]
        input: Option<PathBuf>,
        /// Generate mock embeddings for these sequences instead.
        #[arg(long)]
        mock_sequences: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        dim: usize,
        #[arg(long, default_value_t = 22)]
        context: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack contact maps into a binary store.
    PackCmaps {
        /// JSON lines with `key`, `rows`, `cols` and row-major `data`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an epitope-disjoint fold plan as JSON.
    Split {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add one decoy negative per positive pair.
    SampleNegatives {
        #[arg(long)]
        positives: PathBuf,
        /// One decoy TCR per line.
        #[arg(long)]
        decoys: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a model config file.
    InitConfig {
        #[arg(long, value_parser = parse_variant, default_value = "pcf-cm")]
        variant: Variant,
        #[arg(long, value_enum, default_value_t = Scale::Full)]
        scale: Scale,
        /// Embedding source; defaults to the store at full scale and mock at tiny scale.
        #[arg(long, value_enum)]
        embeddings: Option<EmbeddingSource>,
        /// Write plain JSON instead of the length-prefixed form.
        #[arg(long)]
        plain: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an external pair file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        stores: StoreArgs,
        #[arg(long, default_value_t = 1024)]
        eval_batch: usize,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every operator and model variant.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Print parameter counts per block.
    ParamCount {
        /// Config file; the full-scale all-modality model when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a grid of variants over folds and summarize test scores at the
    /// best validation epoch.
    Benchmark {
        /// Base config; fusion, modalities and embedding mode are overridden per variant.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', value_parser = parse_variant,
              default_value = "text-only,text-only-wpe,pcf-ec,pcf-lc,cm-ec,cm-lc,pcf-cm")]
        variants: Vec<Variant>,
        /// Number of folds to run, starting at fold 0.
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Full,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingSource {
    Store,
    Mock,
}

#[derive(Args)]
struct StoreArgs {
    /// Embedding store; required unless the config uses mock or trained embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Contact-map store; sequences without a map fall back to a separation map
    /// unless the config uses the embedding store.
    #[arg(long)]
    cmaps: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Labelled pairs CSV (`epitope,tcr,label`).
    #[arg(long)]
    pairs: PathBuf,
    /// Fold plan from `split`; computed from `--seed` when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    stores: StoreArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
}

impl RunArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!(
            "unknown variant {s:?}; expected one of {}",
            names.join(", ")
        )
    })
}

#[derive(Deserialize)]
struct JsonMatrix {
    key: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn read_json_matrices(path: &Path) -> Result<Vec<JsonMatrix>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn load_sources(args: &StoreArgs) -> Result<FeatureSources> {
    let load = |p: &Option<PathBuf>, kind| -> Result<_> {
        p.as_ref()
            .map(|p| {
                read_store(p)
                    .and_then(|s| s.expect_kind(kind))
                    .map(Arc::new)
                    .with_context(|| format!("loading {}", p.display()))
            })
            .transpose()
    };
    Ok(FeatureSources {
        embeddings: load(&args.embeddings, StoreKind::Embeddings)?,
        contact_maps: load(&args.cmaps, StoreKind::ContactMaps)?,
    })
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ModelConfig::from_file_bytes(&bytes)?)
}

fn load_plan(
    data: &DataArgs,
    pairs: &[tcrbind_core::pairs::PairExample],
    seed: u64,
) -> Result<SplitPlan> {
    match &data.split {
        Some(p) => Ok(serde_json::from_reader(BufReader::new(File::open(p)?))
            .with_context(|| format!("parsing {}", p.display()))?),
        None => Ok(make_splits(pairs, DEFAULT_FOLDS, seed)?),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct BenchmarkRow {
    variant: &'static str,
    folds: usize,
    test_mcc_mean: f64,
    test_mcc_sd: f64,
    test_auc_mean: f64,
    test_auc_sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize { input, out } => {
            let seqs = read_sequences(&input)?;
            let mut w = BufWriter::new(File::create(&out)?);
            writeln!(w, "sequence,{}", feature_names().join(","))?;
            for s in &seqs {
                let values: Vec<String> = featurize(s)
                    .combined()
                    .iter()
                    .map(|v| format!("{v:.17e}"))
                    .collect();
                writeln!(w, "{s},{}", values.join(","))?;
            }
            eprintln!("featurized {} sequences", seqs.len());
        }
        Command::PackEmbeddings {
            input,
            mock_sequences,
            dim,
            context,
            seed,
            out,
        } => {
            let records: Vec<MatrixRecord> = match (input, mock_sequences) {
                (Some(input), None) => read_json_matrices(&input)?
                    .into_iter()
                    .map(|m| {
                        MatrixRecord::new(
                            m.key,
                            m.rows,
                            m.cols,
                            m.data.iter().map(|&v| v as f32).collect(),
                        )
                    })
                    .collect::<Result<_, _>>()?,
                (None, Some(seqs)) => {
                    let mut seqs = read_sequences(&seqs)?;
                    seqs.sort();
                    seqs.dedup();
                    seqs.iter()
                        .map(|s| {
                            let mut r = mock_embed(&s.shape(context), dim, seed);
                            r.key = s.to_string();
                            r
                        })
                        .collect()
                }
                _ => bail!("pass exactly one of --input or --mock-sequences"),
            };
            write_store(&out, StoreKind::Embeddings, &records)?;
            eprintln!("packed {} embedding records", records.len());
        }
        Command::PackCmaps { input, out } => {
            let records: Vec<MatrixRecord> = read_json_matrices(&input)?
                .into_iter()
                .map(|m| {
                    let map = ContactMap::from_row_major(m.rows, m.cols, &m.data)
                        .with_context(|| format!("contact map {:?}", m.key))?;
                    Ok(MatrixRecord::from_contact_map(m.key, &map))
                })
                .collect::<Result<_>>()?;
            write_store(&out, StoreKind::ContactMaps, &records)?;
            eprintln!("packed {} contact maps", records.len());
        }
        Command::Split {
            pairs,
            folds,
            seed,
            out,
        } => {
            let pairs = read_pairs(&pairs)?;
            let plan = make_splits(&pairs, folds, seed)?;
            write_json(&out, &plan)?;
            let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
            eprintln!(
                "{} epitopes in {folds} folds, test sizes {sizes:?}",
                plan.assignments.len()
            );
        }
        Command::SampleNegatives {
            positives,
            decoys,
            seed,
            out,
        } => {
            let positives = read_pairs(&positives)?;
            let decoys = read_sequences(&decoys)?;
            let all = sample_negatives(&positives, &decoys, seed)?;
            write_pairs(&out, &all)?;
            eprintln!("wrote {} pairs", all.len());
        }
        Command::InitConfig {
            variant,
            scale,
            embeddings,
            plain,
            out,
        } => {
            let mut base = match scale {
                Scale::Full => ModelConfig::full_scale(),
                Scale::Tiny => ModelConfig::tiny(),
            };
            match embeddings {
                Some(EmbeddingSource::Store) => {
                    base.embedding_mode = EmbeddingMode::PretrainedStore
                }
                Some(EmbeddingSource::Mock) => base.embedding_mode = EmbeddingMode::Mock,
                None => {}
            }
            let cfg = variant.apply(&base);
            let bytes = if plain {
                cfg.to_json().into_bytes()
            } else {
                cfg.to_prefixed_bytes()
            };
            std::fs::write(&out, bytes)?;
        }
        Command::Train {
            config,
            data,
            fold,
            run,
            out,
        } => {
            let cfg = load_config(&config)?;
            let pairs = read_pairs(&data.pairs)?;
            let plan = load_plan(&data, &pairs, run.seed)?;
            let mut bank = FeatureBank::new(&cfg, load_sources(&data.stores)?);
            let outcome = train(
                &cfg,
                &pairs,
                plan.fold(fold)?,
                &mut bank,
                &run.train_config(),
            )?;
            outcome.save(&out)?;
            write_json(&out.join("split.json"), &plan)?;
            for s in &outcome.report.summaries {
                println!(
                    "best valid {:?} at epoch {}: valid {:.4}, test {}",
                    s.summary,
                    s.best_epoch,
                    s.valid,
                    s.test.map_or("n/a".into(), |t| format!("{t:.4}"))
                );
            }
        }
        Command::Evaluate {
            checkpoint,
            pairs,
            stores,
            eval_batch,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let pairs = read_pairs(&pairs)?;
            let mut bank = FeatureBank::new(&model.config, load_sources(&stores)?);
            let report = evaluate_external(&model, &pairs, &mut bank, eval_batch)?;
            match out {
                Some(path) => write_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Gradcheck { seed, samples } => {
            let opts = GradCheckOptions {
                samples_per_tensor: samples,
                seed,
                ..GradCheckOptions::default()
            };
            let mut failed = 0;
            let mut line = |name: &str, passed: bool, err: f64, n: usize| {
                failed += usize::from(!passed);
                println!(
                    "{:<22} {:<4} max rel error {err:.3e} ({n} coordinates)",
                    name,
                    if passed { "ok" } else { "FAIL" }
                );
            };
            for op in operator_suite(seed, &opts)? {
                line(
                    op.name,
                    op.report.passed,
                    op.report.max_rel_error,
                    op.report.coordinates_checked,
                );
            }
            for v in CHECKED_VARIANTS {
                let r = variant_gradcheck(v, &ModelConfig::tiny(), 4, &opts)?;
                line(v.name(), r.passed, r.max_rel_error, r.coordinates_checked);
            }
            ensure!(failed == 0, "{failed} gradient checks failed");
        }
        Command::ParamCount { config } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ModelConfig::full_scale(),
            };
            let c = count_parameters(&cfg);
            for (name, n) in [
                ("token embedding (per encoder)", c.token_embedding),
                ("PCF projection (per encoder)", c.pcf_projection),
                ("CMAP projection (per encoder)", c.cmap_projection),
                ("self-attention (per encoder)", c.self_attention),
                ("FFN (per encoder)", c.ffn),
                ("final projection", c.head),
                ("total", c.total),
            ] {
                println!("{name:<32} {n:>12}");
            }
        }
        Command::Benchmark {
            config,
            data,
            variants,
            folds,
            run,
            out,
        } => {
            let base = load_config(&config)?;
            let pairs = read_pairs(&data.pairs)?;
            let plan = load_plan(&data, &pairs, run.seed)?;
            ensure!(
                folds <= plan.fold_count,
                "plan has only {} folds",
                plan.fold_count
            );
            let sources = load_sources(&data.stores)?;
            std::fs::create_dir_all(&out)?;
            let mut rows = Vec::new();
            for variant in variants {
                let cfg = variant.apply(&base);
                let mut bank = FeatureBank::new(&cfg, sources.clone());
                let (mut mccs, mut aucs) = (Vec::new(), Vec::new());
                for fold in 0..folds {
                    let outcome = train(
                        &cfg,
                        &pairs,
                        plan.fold(fold)?,
                        &mut bank,
                        &run.train_config(),
                    )?;
                    outcome.report.write_json_lines(
                        out.join(format!("{}-fold{fold}.jsonl", variant.name())),
                    )?;
                    let test = |m| outcome.report.summary(m).and_then(|s| s.test);
                    mccs.extend(test(MetricName::Mcc));
                    aucs.extend(test(MetricName::Auc));
                    log::info!("{} fold {fold} done", variant.name());
                }
                let (test_mcc_mean, test_mcc_sd) = mean_sd(&mccs);
                let (test_auc_mean, test_auc_sd) = mean_sd(&aucs);
                println!(
                    "{:<14} MCC {test_mcc_mean:.4} ± {test_mcc_sd:.4}  AUC {test_auc_mean:.4} ± {test_auc_sd:.4}",
                    variant.name()
                );
                rows.push(BenchmarkRow {
                    variant: variant.name(),
                    folds,
                    test_mcc_mean,
                    test_mcc_sd,
                    test_auc_mean,
                    test_auc_sd,
                });
            }
            write_json(&out.join("benchmark.json"), &rows)?;
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
