//! Command-line interface: dataset synthesis, training, evaluation, band
//! decomposition, and adjacency export.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 1 any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use afcn::checkpoint;
use afcn::config::TrainConfig;
use afcn::data::{load_dataset, synth_band_dataset, write_dataset, Dataset};
use afcn::decompose::decompose;
use afcn::error::{Error, Result};
use afcn::model::{bind, forward_subject, init_model};
use afcn::tensor::{Tape, Tensor};
use afcn::trainer::{accuracy, auroc, cv_summary_csv, metrics_csv, run_cv, score_subjects};

#[derive(Parser)]
#[command(name = "afcn", about = "frequency-coupled connectivity networks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// dotted-path override, e.g. --set losses.lambda1=0 (repeatable; beats the file)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// dataset manifest JSON
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// in-memory synthetic dataset, e.g. "n=40,N=16,T=128,c=2" (optional keys: noise, seed)
    #[arg(long, value_name = "SPEC")]
    synthetic: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with band-specific planted coupling
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        #[arg(long, default_value_t = 16)]
        roi: usize,
        #[arg(long, default_value_t = 128)]
        t_len: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train with k-fold cross-validation; writes metrics, summary, and checkpoints
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write one subject's learned sub-band signals as CSVs
    Decompose {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// trained checkpoint; omit with --init-only to use untrained kernels
        #[arg(long, required_unless_present = "init_only")]
        checkpoint: Option<PathBuf>,
        /// use noise-free initial kernels instead of a checkpoint
        #[arg(long)]
        init_only: bool,
        /// subject id (defaults to the first subject)
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export class-averaged unified adjacency matrices from a checkpoint
    ExportAdjacency {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for spec in &args.set {
        cfg.apply_override(spec)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_synthetic_spec(spec: &str) -> Result<Dataset> {
    let (mut n, mut roi, mut t, mut c) = (40usize, 16usize, 128usize, 2usize);
    let mut noise = 0.3;
    let mut seed = 42u64;
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad synthetic spec item {part:?}")))?;
        let bad = |_| Error::Config(format!("bad synthetic value {part:?}"));
        match key.trim() {
            "n" => n = value.parse().map_err(bad)?,
            "N" => roi = value.parse().map_err(bad)?,
            "T" => t = value.parse().map_err(bad)?,
            "c" => c = value.parse().map_err(bad)?,
            "noise" => noise = value.parse().map_err(|_| Error::Config(format!("bad synthetic value {part:?}")))?,
            "seed" => seed = value.parse().map_err(|_| Error::Config(format!("bad synthetic value {part:?}")))?,
            other => return Err(Error::Config(format!("unknown synthetic key {other:?}"))),
        }
    }
    let (ds, _) = synth_band_dataset(n, roi, t, c, noise, seed)?;
    Ok(ds)
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    match (&args.data, &args.synthetic) {
        (Some(path), None) => load_dataset(path),
        (None, Some(spec)) => parse_synthetic_spec(spec),
        _ => Err(Error::Config("provide exactly one of --data or --synthetic".to_string())),
    }
}

fn run_train(data: &DataArgs, config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = build_config(config)?;
    let ds = load_data(data)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved_config.json"), cfg.resolved_json())?;

    let summary = run_cv(&ds, &cfg)?;
    for fold in &summary.folds {
        let dir = out.join(format!("fold{}", fold.fold));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&fold.epochs))?;
        checkpoint::save(&dir.join("model.afcn"), &fold.params, &cfg, ds.atlas_size, ds.n_classes)?;
        println!(
            "fold {}: test_acc {:.2} test_auroc {:.2} (best epoch {})",
            fold.fold, fold.test_acc, fold.test_auroc, fold.best_epoch
        );
    }
    std::fs::write(out.join("cv_summary.csv"), cv_summary_csv(&summary))?;
    println!(
        "cv mean test_acc {:.2} ± {:.2}, test_auroc {:.2} ± {:.2}",
        summary.mean_acc, summary.std_acc, summary.mean_auroc, summary.std_auroc
    );
    Ok(())
}

fn run_eval(data: &DataArgs, config: &ConfigArgs, ckpt: &Path) -> Result<()> {
    let cfg = build_config(config)?;
    let ds = load_data(data)?;
    let params = checkpoint::load(ckpt, &cfg, ds.atlas_size, ds.n_classes)?;
    let idx: Vec<usize> = (0..ds.subjects.len()).collect();
    let (scores, labels) = score_subjects(&ds, &idx, &params, &cfg)?;
    println!("accuracy {:.2}", accuracy(&scores, &labels));
    println!("auroc {:.2}", auroc(&scores, &labels)?);
    Ok(())
}

fn band_names(k: usize) -> Vec<String> {
    (1..=k).flat_map(|i| [format!("L{i}"), format!("H{i}")]).collect()
}

fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = String::new();
    for i in 0..rows {
        let row: Vec<String> = (0..cols).map(|j| m.get2(i, j).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn run_decompose(
    data: &DataArgs,
    config: &ConfigArgs,
    ckpt: Option<&Path>,
    init_only: bool,
    subject: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut cfg = build_config(config)?;
    if cfg.model.single_band {
        return Err(Error::Config("decompose needs a multi-band model".to_string()));
    }
    let ds = load_data(data)?;
    let params = if init_only {
        // deterministic noise-free kernels: pure box low-pass + residual high-pass
        cfg.model.init_noise = 0.0;
        init_model(&cfg.model, ds.atlas_size, ds.n_classes, cfg.seed)?
    } else {
        checkpoint::load(ckpt.unwrap(), &cfg, ds.atlas_size, ds.n_classes)?
    };

    let s = match subject {
        Some(id) => ds
            .subjects
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| Error::Data(format!("subject {id:?} not in dataset")))?,
        None => &ds.subjects[0],
    };

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &params);
    let xv = tape.constant(s.x.clone());
    let bands = decompose(&mut tape, xv, &bound.decomposer)?;

    std::fs::create_dir_all(out)?;
    for (name, band) in band_names(cfg.model.k_levels).iter().zip(&bands) {
        write_matrix_csv(&out.join(format!("{}_{name}.csv", s.subject_id)), tape.value(*band))?;
    }
    println!("wrote {} band CSVs for subject {} to {}", bands.len(), s.subject_id, out.display());
    Ok(())
}

fn run_export_adjacency(data: &DataArgs, config: &ConfigArgs, ckpt: &Path, out: &Path) -> Result<()> {
    let cfg = build_config(config)?;
    let ds = load_data(data)?;
    let params = checkpoint::load(ckpt, &cfg, ds.atlas_size, ds.n_classes)?;
    let weights = cfg.weights();

    let n_bands = params.n_bands();
    let side = n_bands * ds.atlas_size;
    let mut sums: Vec<Tensor> = (0..ds.n_classes).map(|_| Tensor::zeros(vec![side, side])).collect();
    let mut counts = vec![0usize; ds.n_classes];
    for s in &ds.subjects {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let fwd = forward_subject(&mut tape, &bound, &cfg.model, &weights, &s.x, s.label, 1.0, None)?;
        let a = tape.value(fwd.a_unified);
        for (dst, src) in sums[s.label].data_mut().iter_mut().zip(a.data()) {
            *dst += src;
        }
        counts[s.label] += 1;
    }

    std::fs::create_dir_all(out)?;
    for (c, (mut sum, count)) in sums.into_iter().zip(counts).enumerate() {
        for v in sum.data_mut() {
            *v /= count as f64;
        }
        write_matrix_csv(&out.join(format!("adjacency_class{c}.csv")), &sum)?;
    }
    // block legend: which node rows belong to which band
    let legend: Vec<String> = band_names(cfg.model.k_levels)
        .iter()
        .take(n_bands)
        .enumerate()
        .map(|(b, name)| {
            format!("{name},{},{}", b * ds.atlas_size, (b + 1) * ds.atlas_size - 1)
        })
        .collect();
    std::fs::write(
        out.join("blocks.csv"),
        format!("band,row_start,row_end\n{}\n", legend.join("\n")),
    )?;
    println!("wrote {} class-averaged adjacency matrices to {}", ds.n_classes, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, subjects, roi, t_len, classes, noise, seed } => {
            let (ds, truth) = synth_band_dataset(subjects, roi, t_len, classes, noise, seed)?;
            let manifest = write_dataset(&out, &ds, Some(&truth))?;
            println!("wrote {} subjects to {}", ds.subjects.len(), manifest.display());
            Ok(())
        }
        Command::Train { data, config, out } => run_train(&data, &config, &out),
        Command::Eval { data, config, checkpoint } => run_eval(&data, &config, &checkpoint),
        Command::Decompose { data, config, checkpoint, init_only, subject, out } => run_decompose(
            &data,
            &config,
            checkpoint.as_deref(),
            init_only,
            subject.as_deref(),
            &out,
        ),
        Command::ExportAdjacency { data, config, checkpoint, out } => {
            run_export_adjacency(&data, &config, &checkpoint, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
