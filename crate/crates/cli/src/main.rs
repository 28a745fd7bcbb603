//! Command-line entry point: fixture generation, training, evaluation,
//! gradient checking, and ablation sweeps, all reproducible from a flat
//! key-value config file plus a seed.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use phqtrack_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use phqtrack_core::config::{
    config_fingerprint, generator_config_from_kv, model_config_from_kv, train_config_from_kv,
    ConfigError, KvFile,
};
use phqtrack_core::data::{load_dataset, save_dataset, DataError, Split, SplitManifest};
use phqtrack_core::eval::{
    evaluate_split, run_ablation, run_tasks, AblationAxis, EvalError, EvalReport, SeedEval,
    TargetKind,
};
use phqtrack_core::gradcheck::run_standard_check;
use phqtrack_core::model::Mode;
use phqtrack_core::synth::{generate_corpus, SynthError};
use phqtrack_core::train::{train, TrainError};

const VERSION: &str = env!("CARGO_PKG_VERSION");

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Usage(c.to_string()),
            TrainError::NanGradient { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownAxis(_) | EvalError::BadGridPoint { .. } => {
                CliError::Usage(e.to_string())
            }
            EvalError::Train(t) => CliError::from(t),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Parsed `--flag value` arguments.
struct Args {
    flags: BTreeMap<String, String>,
}

impl Args {
    fn parse(raw: &[String]) -> Result<Self, CliError> {
        let mut flags = BTreeMap::new();
        let mut i = 0;
        while i < raw.len() {
            let key = raw[i]
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("expected a --flag, got `{}`", raw[i])))?;
            let value = raw
                .get(i + 1)
                .ok_or_else(|| CliError::Usage(format!("--{key} requires a value")))?;
            if flags.insert(key.to_string(), value.clone()).is_some() {
                return Err(CliError::Usage(format!("--{key} given twice")));
            }
            i += 2;
        }
        Ok(Args { flags })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.flags.get(key).map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }

    fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require(key)?))
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("--{key}: not an integer: `{v}`"))),
        }
    }

    fn seeds(&self) -> Result<Option<Vec<u64>>, CliError> {
        match (self.get("seed"), self.get("seeds")) {
            (Some(_), Some(_)) => {
                Err(CliError::Usage("use either --seed or --seeds, not both".into()))
            }
            (Some(s), None) => {
                let v = s
                    .parse()
                    .map_err(|_| CliError::Usage(format!("--seed: not an integer: `{s}`")))?;
                Ok(Some(vec![v]))
            }
            (None, Some(list)) => {
                let mut seeds = Vec::new();
                for part in list.split(',') {
                    seeds.push(part.trim().parse().map_err(|_| {
                        CliError::Usage(format!("--seeds: not an integer: `{part}`"))
                    })?);
                }
                Ok(Some(seeds))
            }
            (None, None) => Ok(None),
        }
    }
}

fn load_kv(args: &Args) -> Result<(KvFile, Option<String>), CliError> {
    match args.get("config") {
        None => Ok((KvFile::empty(), None)),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("--config {path}: {e}")))?;
            Ok((KvFile::parse(&text)?, Some(path.to_string())))
        }
    }
}

fn ensure_out_dir(args: &Args) -> Result<PathBuf, CliError> {
    let out = args.path("out")?;
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Usage(format!("--out {}: {e}", out.display())))?;
    Ok(out)
}

/// The replayable run manifest, written before any outputs.
fn write_run_manifest(
    out: &Path,
    command: &str,
    config_path: Option<&str>,
    config_snapshot: &str,
    seeds: &[u64],
    inputs: &BTreeMap<String, String>,
    outputs: &[String],
) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "tool_version": VERSION,
        "command": command,
        "config_path": config_path,
        "config": config_snapshot,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
    });
    let path = out.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap() + "\n")
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn usage() -> String {
    [
        "usage: phqtrack <command> [--flag value ...]",
        "",
        "commands:",
        "  gen-fixtures  --out DIR [--config FILE] [--seed N]",
        "  train         --data FILE --manifest FILE --out DIR [--config FILE]",
        "                [--seed N | --seeds A,B,..] [--jobs N]",
        "  eval          --checkpoint FILE[,FILE..] --data FILE --manifest FILE --out DIR",
        "  gradcheck     [--seed N] [--corrupt OP] [--out DIR]",
        "  ablate        --axis AXIS --grid P1,P2,.. --data FILE --manifest FILE --out DIR",
        "                [--config FILE] [--seeds A,B,..] [--jobs N]",
    ]
    .join("\n")
}

fn cmd_gen_fixtures(args: &Args) -> Result<(), CliError> {
    let out = ensure_out_dir(args)?;
    let (mut kv, config_path) = load_kv(args)?;
    if let Some(seeds) = args.seeds()? {
        if seeds.len() != 1 {
            return Err(CliError::Usage("gen-fixtures takes a single --seed".into()));
        }
        kv.set("gen.seed", &seeds[0].to_string());
    }
    let cfg = generator_config_from_kv(&kv)?;
    let corpus_path = out.join("corpus.jsonl");
    let splits_path = out.join("splits.json");
    write_run_manifest(
        &out,
        "gen-fixtures",
        config_path.as_deref(),
        &kv.canonical(),
        &[cfg.seed],
        &BTreeMap::new(),
        &[corpus_path.display().to_string(), splits_path.display().to_string()],
    )?;
    let (corpus, manifest) = generate_corpus(&cfg)?;
    save_dataset(&corpus, &corpus_path)?;
    manifest.save(&splits_path)?;
    println!(
        "wrote {} trajectories ({} sessions) to {}",
        corpus.trajectories.len(),
        corpus.n_sessions(),
        corpus_path.display()
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), CliError> {
    let out = ensure_out_dir(args)?;
    let data_path = args.path("data")?;
    let manifest_path = args.path("manifest")?;
    let (kv, config_path) = load_kv(args)?;
    let jobs = args.u64_or("jobs", 1)? as usize;

    let corpus = load_dataset(&data_path)?;
    let manifest = SplitManifest::load(&manifest_path)?;
    let model_cfg = model_config_from_kv(&kv, corpus.d_e)?;
    let base_train = train_config_from_kv(&kv)?;
    let seeds = args.seeds()?.unwrap_or_else(|| vec![base_train.seed]);

    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), data_path.display().to_string());
    inputs.insert("manifest".to_string(), manifest_path.display().to_string());
    let outputs: Vec<String> = seeds
        .iter()
        .flat_map(|s| {
            [
                out.join(format!("checkpoint_seed{s}.ckpt")).display().to_string(),
                out.join(format!("train_log_seed{s}.jsonl")).display().to_string(),
            ]
        })
        .collect();
    write_run_manifest(
        &out,
        "train",
        config_path.as_deref(),
        &kv.canonical(),
        &seeds,
        &inputs,
        &outputs,
    )?;

    let results = run_tasks(jobs, &seeds, |&seed| {
        let mut cfg = base_train.clone();
        cfg.seed = seed;
        train(&corpus, &manifest, &model_cfg, &cfg).map(|outcome| (seed, outcome))
    });
    for result in results {
        let (seed, outcome) = result?;
        let ckpt = out.join(format!("checkpoint_seed{seed}.ckpt"));
        save_checkpoint(&ckpt, &outcome.model, &outcome.stats, seed)?;
        let log_path = out.join(format!("train_log_seed{seed}.jsonl"));
        let mut log_text = String::new();
        for entry in &outcome.log {
            log_text.push_str(&serde_json::to_string(entry).unwrap());
            log_text.push('\n');
        }
        fs::write(&log_path, log_text)
            .map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
        println!(
            "seed {seed}: best epoch {} (val loss {:.6}) -> {}",
            outcome.best_epoch,
            outcome.best_val_loss,
            ckpt.display()
        );
    }
    Ok(())
}

fn test_target(corpus: &phqtrack_core::data::Corpus, manifest: &SplitManifest) -> Result<TargetKind, CliError> {
    let pairs = phqtrack_core::data::sessions_with_history(corpus, manifest, Split::Test);
    if pairs.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    if pairs.iter().all(|(s, _)| s.latent_items.is_some()) {
        Ok(TargetKind::Latent)
    } else {
        Ok(TargetKind::Label)
    }
}

fn cmd_eval(args: &Args) -> Result<(), CliError> {
    let out = ensure_out_dir(args)?;
    let data_path = args.path("data")?;
    let manifest_path = args.path("manifest")?;
    let ckpt_list = args.require("checkpoint")?.to_string();

    let corpus = load_dataset(&data_path)?;
    let manifest = SplitManifest::load(&manifest_path)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), data_path.display().to_string());
    inputs.insert("manifest".to_string(), manifest_path.display().to_string());
    inputs.insert("checkpoints".to_string(), ckpt_list.clone());
    let report_path = out.join("report.json");
    write_run_manifest(&out, "eval", None, "", &[], &inputs, &[report_path.display().to_string()])?;

    let mut seed_evals: Vec<SeedEval> = Vec::new();
    let mut fingerprint = String::new();
    for part in ckpt_list.split(',') {
        let loaded = load_checkpoint(Path::new(part.trim()))?;
        fingerprint = config_fingerprint(&serde_json::to_string(&loaded.model.config).unwrap());
        seed_evals.push(evaluate_split(
            &loaded.model,
            &loaded.stats,
            &corpus,
            &manifest,
            Split::Test,
            loaded.seed,
        )?);
    }
    let report =
        EvalReport::from_seeds(test_target(&corpus, &manifest)?, fingerprint, seed_evals)?;
    fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap() + "\n")
        .map_err(|e| CliError::Data(format!("{}: {e}", report_path.display())))?;
    match report.std_mae {
        Some(std) => println!(
            "test MAE = {:.4} ± {:.4} over {} seeds",
            report.mean_mae,
            std,
            report.seeds.len()
        ),
        None => println!("test MAE = {:.4}", report.mean_mae),
    }
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<(), CliError> {
    let seed = args.u64_or("seed", 0)?;
    let corrupt = args.get("corrupt").map(|s| s.to_string());
    let report = run_standard_check(5, seed, Mode::Eval, corrupt);
    println!(
        "checked {} parameters at step 1e-5, tolerance {:.0e}",
        report.n_params, report.tolerance
    );
    if let Some(op) = &report.corrupted_op {
        println!("negative control: backward of `{op}` corrupted");
    }
    println!(
        "worst: {} [{}] analytic {:.6e} fd {:.6e} rel {:.3e}",
        report.worst.param,
        report.worst.index,
        report.worst.analytic,
        report.worst.fd,
        report.worst.rel_err
    );
    if let Some(out) = args.get("out") {
        let out = PathBuf::from(out);
        fs::create_dir_all(&out)
            .map_err(|e| CliError::Usage(format!("--out {}: {e}", out.display())))?;
        let json = serde_json::json!({
            "n_params": report.n_params,
            "n_failed": report.n_failed,
            "tolerance": report.tolerance,
            "corrupted_op": report.corrupted_op,
            "worst": {
                "param": report.worst.param,
                "index": report.worst.index,
                "analytic": report.worst.analytic,
                "fd": report.worst.fd,
                "rel_err": report.worst.rel_err,
            },
        });
        let path = out.join("gradcheck.json");
        fs::write(&path, serde_json::to_string_pretty(&json).unwrap() + "\n")
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    if report.passed() {
        println!("gradcheck PASS ({} parameters)", report.n_params);
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradcheck FAIL: {}/{} parameters exceed tolerance; worst `{}` rel {:.3e}{}",
            report.n_failed,
            report.n_params,
            report.worst.param,
            report.worst.rel_err,
            report
                .corrupted_op
                .map(|op| format!(" (corrupted op: {op})"))
                .unwrap_or_default()
        )))
    }
}

fn cmd_ablate(args: &Args) -> Result<(), CliError> {
    let out = ensure_out_dir(args)?;
    let data_path = args.path("data")?;
    let manifest_path = args.path("manifest")?;
    let axis: AblationAxis = args
        .require("axis")?
        .parse()
        .map_err(|e: EvalError| CliError::Usage(e.to_string()))?;
    let grid: Vec<String> =
        args.require("grid")?.split(',').map(|s| s.trim().to_string()).collect();
    let (kv, config_path) = load_kv(args)?;
    let jobs = args.u64_or("jobs", 1)? as usize;

    let corpus = load_dataset(&data_path)?;
    let manifest = SplitManifest::load(&manifest_path)?;
    let model_cfg = model_config_from_kv(&kv, corpus.d_e)?;
    let train_cfg = train_config_from_kv(&kv)?;
    let seeds = args.seeds()?.unwrap_or_else(|| vec![0, 1, 2, 3, 4]);

    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), data_path.display().to_string());
    inputs.insert("manifest".to_string(), manifest_path.display().to_string());
    inputs.insert("axis".to_string(), axis.name().to_string());
    inputs.insert("grid".to_string(), grid.join(","));
    let json_path = out.join("ablation.json");
    let csv_path = out.join("ablation.csv");
    write_run_manifest(
        &out,
        "ablate",
        config_path.as_deref(),
        &kv.canonical(),
        &seeds,
        &inputs,
        &[json_path.display().to_string(), csv_path.display().to_string()],
    )?;

    let table =
        run_ablation(&corpus, &manifest, &model_cfg, &train_cfg, axis, &grid, &seeds, jobs)?;
    fs::write(&json_path, serde_json::to_string_pretty(&table).unwrap() + "\n")
        .map_err(|e| CliError::Data(format!("{}: {e}", json_path.display())))?;
    fs::write(&csv_path, table.to_csv())
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    for row in &table.rows {
        match row.std_mae {
            Some(std) => println!("{}: {:.4} ± {:.4}", row.point, row.mean_mae, std),
            None => println!("{}: {:.4}", row.point, row.mean_mae),
        }
    }
    Ok(())
}

fn dispatch() -> Result<(), CliError> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = raw.first() else {
        return Err(CliError::Usage(usage()));
    };
    let args = Args::parse(&raw[1..])?;
    match command.as_str() {
        "gen-fixtures" => cmd_gen_fixtures(&args),
        "train" => cmd_train(&args),
        "eval" => cmd_eval(&args),
        "gradcheck" => cmd_gradcheck(&args),
        "ablate" => cmd_ablate(&args),
        other => Err(CliError::Usage(format!("unknown command `{other}`\n\n{}", usage()))),
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
