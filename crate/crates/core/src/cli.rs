//! The `tm` command line.
//!
//! Exit codes: 0 success; 1 configuration, checkpoint or index error;
//! 2 data error; 3 numerical abort or failed verification.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::LoadedConfig;
use crate::data::{self, Prepared};
use crate::error::{Error, Result};
use crate::model::TimeMachine;
use crate::train::{self, Checkpoint, RunMeta, EPOCH_LOG_HEADER};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "tm", version, about = "TimeMachine forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, epoch log and metrics.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the validation or test windows.
    Eval(CommonArgs),
    /// Run the gradient, oracle and invariant checks.
    Verify(CommonArgs),
    /// Export one test window's forecast as CSV.
    Predict(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Data(_) => EXIT_DATA,
        Error::NonFinite(_) | Error::Diverged(_) => EXIT_NUMERIC,
        Error::Shape { .. }
        | Error::Config(_)
        | Error::Contract(_)
        | Error::Checkpoint(_)
        | Error::Io(_) => EXIT_CONFIG,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => load(&a, true).and_then(cmd_train),
        Command::Eval(a) => load(&a, true).and_then(cmd_eval),
        Command::Predict(a) => load(&a, true).and_then(cmd_predict),
        Command::Verify(a) => load(&a, false).and_then(|c| cmd_verify(&c)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load(args: &CommonArgs, required: bool) -> Result<LoadedConfig> {
    match &args.config {
        Some(p) => LoadedConfig::load(p, &args.set),
        None if required => Err(Error::Config("--config <path> is required".into())),
        None => {
            let env = std::env::var(crate::config::SEED_ENV).ok();
            LoadedConfig::parse("", &args.set, env.as_deref())
        }
    }
}

fn prepare_data(lc: &mut LoadedConfig, lookback: usize, horizon: usize) -> Result<Prepared> {
    let path = lc.config.data.require_path()?.to_path_buf();
    let series = data::load_csv(&path)?;
    lc.resolve_for_data(series.channels())?;
    data::prepare(series, lc.config.data.split_rule(), lookback, horizon)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json encoding");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_train(mut lc: LoadedConfig) -> Result<i32> {
    let (l, t) = (lc.config.model.lookback, lc.config.model.horizon);
    let prepared = prepare_data(&mut lc, l, t)?;
    let cfg = lc.config.clone();
    let out = &cfg.output.dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.source.toml"), &lc.source)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let mut model = TimeMachine::new(cfg.model.clone())?;
    log::info!(
        "{} parameters, {} mode, {} train / {} val / {} test windows",
        model.num_params(),
        model.mode(),
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len()
    );
    let mut log_file = fs::File::create(out.join("epochs.csv"))?;
    writeln!(log_file, "{EPOCH_LOG_HEADER}")?;
    let mut log_err = None;
    let outcome = train::train_loop(
        &mut model,
        &prepared.train,
        &prepared.val,
        &cfg.train,
        |r| {
            if let Err(e) = writeln!(log_file, "{}", r.csv_row()).and_then(|_| log_file.flush()) {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e.into());
    }

    let run = RunMeta {
        seed: cfg.train.seed,
        epoch: outcome.best_epoch,
        val_mse: Some(outcome.best_val_mse),
        dataset: Some(prepared.series.name.clone()),
        batch_size: cfg.train.batch_size,
    };
    Checkpoint::from_model(&model, run, Some(outcome.optimizer.clone()))
        .save(&cfg.checkpoint_path())?;

    let bs = cfg.train.batch_size;
    let test = train::evaluate(&model, &prepared.test, bs)?;
    let baseline = train::persistence_baseline(&prepared.test, bs)?;
    let report = json!({
        "dataset": prepared.series.name,
        "channels": cfg.model.channels,
        "channel_mode": model.mode().to_string(),
        "parameters": model.num_params(),
        "lookback": l,
        "horizon": t,
        "batch_size": bs,
        "dropout": cfg.model.dropout,
        "epochs_run": outcome.records.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_mse": outcome.best_val_mse,
        "test": test,
        "persistence": baseline,
    });
    write_json(&out.join("metrics.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(EXIT_OK)
}

fn load_checkpoint(lc: &LoadedConfig, explicit: Option<&PathBuf>) -> Result<Checkpoint> {
    let path = explicit
        .cloned()
        .unwrap_or_else(|| lc.config.checkpoint_path());
    Checkpoint::load(&path)
}

fn cmd_eval(mut lc: LoadedConfig) -> Result<i32> {
    let ck = load_checkpoint(&lc, lc.config.eval.checkpoint.as_ref())?;
    let path = lc.config.data.require_path()?.to_path_buf();
    let series = data::load_csv(&path)?;
    ck.ensure_channels(series.channels())?;
    lc.resolve_for_data(series.channels())?;
    let (l, t) = (ck.config.lookback, ck.config.horizon);
    let prepared = data::prepare(series, lc.config.data.split_rule(), l, t)?;
    let split = lc
        .config
        .eval
        .split
        .clone()
        .unwrap_or_else(|| "test".into());
    let ds = match split.as_str() {
        "test" => &prepared.test,
        "val" => &prepared.val,
        other => {
            return Err(Error::Config(format!(
                "eval.split must be val or test, got {other:?}"
            )))
        }
    };
    let bs = ck.run.batch_size.max(1);
    let model = ck.into_model()?;
    let metrics = train::evaluate(&model, ds, bs)?;
    let mut report = json!({
        "split": split,
        "horizon": t,
        "mse": metrics.mse,
        "mae": metrics.mae,
        "windows": metrics.windows,
    });
    if lc.config.eval.persistence {
        report["persistence"] =
            serde_json::to_value(train::persistence_baseline(ds, bs)?).expect("json");
    }
    let out = &lc.config.output.dir;
    fs::create_dir_all(out)?;
    write_json(&out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(EXIT_OK)
}

fn cmd_predict(mut lc: LoadedConfig) -> Result<i32> {
    let ck = load_checkpoint(&lc, lc.config.predict.checkpoint.as_ref())?;
    let path = lc.config.data.require_path()?.to_path_buf();
    let series = data::load_csv(&path)?;
    ck.ensure_channels(series.channels())?;
    lc.resolve_for_data(series.channels())?;
    let (l, t) = (ck.config.lookback, ck.config.horizon);
    let prepared = data::prepare(series, lc.config.data.split_rule(), l, t)?;
    let w = lc.config.predict.window;
    if w >= prepared.test.len() {
        return Err(Error::Config(format!(
            "window index {w} out of range: the test split has {} windows",
            prepared.test.len()
        )));
    }
    let model = ck.into_model()?;
    let (x, y) = prepared.test.batch(&[w])?;
    let pred = model.predict(&x)?;
    let (_, (t0, _)) = prepared.test.indices(w);

    let out = &lc.config.output.dir;
    fs::create_dir_all(out)?;
    let file = out.join(format!("predictions_w{w}.csv"));
    let mut csv = String::from("channel,t,timestamp,truth,prediction\n");
    for (c, name) in prepared.series.columns.iter().enumerate() {
        for s in 0..t {
            let k = c * t + s;
            csv.push_str(&format!(
                "{name},{},{},{:e},{:e}\n",
                s + 1,
                prepared.series.timestamps[t0 + s].format("%Y-%m-%d %H:%M:%S"),
                y.data()[k],
                pred.data()[k]
            ));
        }
    }
    fs::write(&file, csv)?;
    println!("{}", file.display());
    Ok(EXIT_OK)
}

fn cmd_verify(lc: &LoadedConfig) -> Result<i32> {
    let results = verify::run_all(&lc.config.verify);
    print!("{}", verify::format_table(&results));
    if verify::all_passed(&results) {
        println!("all {} checks passed", results.len());
        Ok(EXIT_OK)
    } else {
        let failed = results.iter().filter(|r| !r.passed).count();
        println!("{failed} of {} checks failed", results.len());
        Ok(EXIT_NUMERIC)
    }
}
