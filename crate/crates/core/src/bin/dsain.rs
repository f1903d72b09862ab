use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsain::checkpoint;
use dsain::config::Variant;
use dsain::data::{ingest_path, write_jsonl, Generator, Schema, SynthSpec};
use dsain::embedding::Batch;
use dsain::flops::flop_estimate;
use dsain::model::{init_params, loss, param_count, param_report, Mode};
use dsain::numerics::{grad_check, Coordinates};
use dsain::train::{evaluate, prepare, train, DataSource, TrainConfig};
use dsain::{Error, Result};

#[derive(Parser)]
#[command(name = "dsain", version, about = "Train and evaluate a situation-aware CTR model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Key-value config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds model init, shuffling, Gumbel noise and the synthetic world.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant id, e.g. `no-bdm` or `cfm-behavior-only`.
    #[arg(long)]
    variant: Option<Variant>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// JSONL training (or evaluation) records; synthetic data when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSONL test records used with --data.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Situational fields of the JSONL files, e.g. `behavior:3,hour,period`.
    #[arg(long)]
    schema: Option<String>,
    /// Abort on the first malformed line instead of skipping it.
    #[arg(long)]
    strict_ingest: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train and test records as JSONL.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output file for training records.
        #[arg(long)]
        out: PathBuf,
        /// Output file for test records.
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Train a model; writes model.ckpt, report.json and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Evaluate on the test set every this many steps.
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Score records with a checkpoint and print metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the full model; prints the max relative error.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Sampled coordinates.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Print parameter and multiply-add accounting.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Train every ablation variant on synthetic data and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant ids; all variants when absent.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn build_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(&fs::read_to_string(path)?)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
        if let DataSource::Synth(spec) = &mut cfg.data {
            spec.seed = seed;
        }
    }
    if let Some(v) = &common.variant {
        cfg.model.ablation = v.ablation();
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn synth_spec(cfg: &TrainConfig) -> SynthSpec {
    match &cfg.data {
        DataSource::Synth(s) => s.clone(),
        DataSource::Files { .. } => SynthSpec::default(),
    }
}

fn schema_for(cfg: &TrainConfig, data: &DataArgs) -> Result<Schema> {
    match &data.schema {
        Some(s) => Schema::parse(s),
        None => Ok(synth_spec(cfg).schema()),
    }
}

fn use_files(cfg: &mut TrainConfig, data: &DataArgs) -> Result<()> {
    if let Some(train) = &data.data {
        let schema = schema_for(cfg, data)?;
        if data.schema.is_none() {
            // records written by `synth` share the synthetic vocabularies
            synth_spec(cfg).apply_vocab(&mut cfg.model);
        }
        cfg.data = DataSource::Files {
            train: train.clone(),
            test: data.test_data.clone(),
            schema,
            strict: data.strict_ingest,
        };
    }
    Ok(())
}

fn write_records(path: &Path, records: &[dsain::data::TrainRecord], schema: &Schema) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), records, schema)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, test_out } => {
            let cfg = build_config(&common)?;
            let spec = synth_spec(&cfg);
            let g = Generator::new(&spec)?;
            let schema = spec.schema();
            let train = g.train_set(cfg.model.seq_len);
            write_records(&out, &train, &schema)?;
            println!("wrote {} records to {}", train.len(), out.display());
            if let Some(path) = test_out {
                let test = g.test_set(cfg.model.seq_len);
                write_records(&path, &test, &schema)?;
                println!("wrote {} records to {}", test.len(), path.display());
            }
            println!("schema {schema}");
        }
        Command::Train {
            common,
            data,
            out,
            steps,
            eval_every,
        } => {
            let mut cfg = build_config(&common)?;
            cfg.max_steps = steps.or(cfg.max_steps);
            cfg.eval_every = eval_every.or(cfg.eval_every);
            use_files(&mut cfg, &data)?;
            let (report, params) = train(&cfg)?;
            fs::create_dir_all(&out)?;
            checkpoint::save(&params, &out.join("model.ckpt"))?;
            let json = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?;
            fs::write(out.join("report.json"), json)?;
            let mut resolved = cfg.clone();
            resolved.resolve_vocab();
            fs::write(out.join("config.txt"), resolved.to_kv())?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {} loss {l:.6}", i + 1);
            }
            if let Some(m) = &report.test {
                println!("{}", m.to_json());
            }
        }
        Command::Eval {
            common,
            data,
            checkpoint: ckpt,
        } => {
            let mut cfg = build_config(&common)?;
            let path = data
                .data
                .clone()
                .ok_or_else(|| Error::InvalidArgument("eval needs --data".into()))?;
            let schema = schema_for(&cfg, &data)?;
            // a saved config.txt already carries the training vocabularies
            if common.config.is_none() {
                synth_spec(&cfg).apply_vocab(&mut cfg.model);
            }
            schema.apply_vocab(&mut cfg.model);
            let params = checkpoint::load(&ckpt, &cfg.model)?;
            let (records, report) = ingest_path(&path, &schema, &cfg.model, data.strict_ingest)?;
            for (line, why) in &report.skipped {
                eprintln!("skipped line {line}: {why}");
            }
            let records = prepare(&cfg.model, records);
            let m = evaluate(&params, &records, &cfg.model, cfg.batch_size)?;
            println!("{}", m.to_json());
        }
        Command::Gradcheck { common, coords, step } => {
            let mut cfg = build_config(&common)?;
            let m = &mut cfg.model;
            m.seq_len = 8;
            m.window = 4;
            m.d_common = 4;
            m.micro_depth = 2;
            m.mixer_depth = 2;
            let spec = SynthSpec {
                users: 5,
                min_len: 3,
                max_len: 10,
                seed: cfg.seed,
                ..SynthSpec::default()
            };
            spec.apply_vocab(m);
            let recs = Generator::new(&spec)?.records(0, 2, m.seq_len);
            let model = cfg.model.clone();
            let params = init_params(&model)?;
            let batch = Batch::from_records(&recs, &model)?;
            let seed = cfg.seed;
            let r = grad_check(
                &params,
                |t, p| Ok(loss(t, p, &batch, &model, Mode::Train { seed })?.0),
                step,
                Coordinates::Sample { count: coords, seed },
            )?;
            println!("{:e}", r.max_relative_error);
        }
        Command::Bench { common } => {
            let cfg = build_config(&common)?;
            let m = &cfg.model;
            m.validate()?;
            print!("{}", param_report(m));
            let b = param_count(m);
            println!("parameters {}", b.total());
            println!();
            println!("multiply-adds per example (L = {})", m.seq_len);
            print!("{}", flop_estimate(m).table());
        }
        Command::Ablate {
            common,
            variants,
            steps,
        } => {
            let base = build_config(&common)?;
            let variants = if variants.is_empty() { Variant::all() } else { variants };
            println!("{:<22} {:>8} {:>9} {:>7} {:>9}", "variant", "auc", "logloss", "steps", "seconds");
            for v in variants {
                let mut cfg = base.clone();
                cfg.model.ablation = v.ablation();
                cfg.max_steps = steps.or(cfg.max_steps);
                let (r, _) = train(&cfg)?;
                let m = r.test.ok_or_else(|| Error::InvalidArgument("ablation needs test records".into()))?;
                println!(
                    "{:<22} {:>8.4} {:>9.4} {:>7} {:>9.1}",
                    v.to_string(),
                    m.auc,
                    m.logloss,
                    r.steps,
                    r.wall_seconds
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
