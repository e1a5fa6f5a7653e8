use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avdtec::checkpoint;
use avdtec::config::ExperimentConfig;
use avdtec::dataset::{generate_dataset, write_json, Dataset, Manifest, Split};
use avdtec::model::Variant;
use avdtec::plot;
use avdtec::pseudo_label::{label_sequence, read_labels, write_labels, RejectReason, TrajectoryLabel};
use avdtec::train::{
    self, ablation_suite, build_model, evaluate, format_ablation, format_metrics, label_errors, parse_metrics,
    read_records, training_items, write_records, EvalReport, LabelSource,
};
use avdtec::Error;

#[derive(Parser, Debug)]
#[command(name = "avdtec", version, about = "Audio-visual drone trajectory estimation and classification")]
struct Cli {
    /// Preset name (default, demo, paper) or path to a TOML config.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Overrides both the simulation and the training seed.
    #[arg(long, global = true, env = "AVDTEC_SEED")]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, global = true, env = "AVDTEC_OUT_DIR", default_value = "avdtec-out")]
    out_dir: PathBuf,
    /// Reference-scale training and model sizes.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate,
    /// Produce LiDAR pseudo-labels for a dataset.
    Label(DataArgs),
    /// Train one model variant.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Brightness factors; defaults to the light and dark settings.
        #[arg(long)]
        brightness: Vec<f64>,
    },
    /// Train and evaluate the ablation variants.
    Ablate(DataArgs),
    /// Render figures from run artifacts in the output directory.
    Plot {
        /// Dataset used for the label error histogram.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory; defaults to `<out-dir>/dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Pseudo-label CSV; defaults to `<dataset>/labels.csv`.
    #[arg(long)]
    labels: Option<PathBuf>,
}

/// Error with its process exit code.
struct Failure {
    code: u8,
    err: Error,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, err }
    }
}

fn usage(err: Error) -> Failure {
    Failure { code: 2, err }
}

type Run<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Run {
    let mut cfg = ExperimentConfig::resolve(&cli.config).map_err(usage)?;
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate().map_err(usage)?;
    if cli.show_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = cli.out_dir.clone();
    let Some(command) = cli.command else {
        return Err(usage(Error::Config("no subcommand given; see --help".into())));
    };
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    match command {
        Command::Simulate => simulate(&cfg, &out),
        Command::Label(d) => label(&cfg, &d.dataset_dir(&out), d.labels.as_deref()),
        Command::Train { data, variant } => train_cmd(&cfg, &out, &data, variant),
        Command::Eval {
            data,
            checkpoint,
            brightness,
        } => eval_cmd(&cfg, &out, &data, &checkpoint, &brightness),
        Command::Ablate(d) => ablate(&cfg, &out, &d),
        Command::Plot { dataset } => plot_cmd(&out, dataset.as_deref()),
    }
}

impl DataArgs {
    fn dataset_dir(&self, out: &Path) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| out.join("dataset"))
    }

    fn labels_path(&self, out: &Path) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.dataset_dir(out).join("labels.csv"))
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Run {
    let dir = out.join("dataset");
    let m = generate_dataset(&dir, &cfg.sim, &cfg.spectrogram, cfg.seed)?;
    let (tr, trf) = m.count(Split::Train);
    let (te, tef) = m.count(Split::Test);
    println!("dataset: {}", dir.display());
    println!("scenes: {} ({tr} train, {te} test)", m.scenes.len());
    println!("frames: {} ({trf} train, {tef} test)", m.frame_count());
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Run<(Manifest, Dataset)> {
    let (m, data) = Dataset::load(dir)?;
    if m.sim.image_size != cfg.model.vision.image_size {
        return Err(usage(Error::Config(format!(
            "dataset images are {} px, model expects {} px",
            m.sim.image_size, cfg.model.vision.image_size
        ))));
    }
    if m.spectrogram != cfg.spectrogram {
        log::warn!("dataset spectrogram settings differ from the config; using the dataset's");
    }
    Ok((m, data))
}

fn run_labeler(cfg: &ExperimentConfig, data: &Dataset) -> Run<(Vec<TrajectoryLabel>, BTreeMap<String, usize>, usize)> {
    let mut labels = Vec::new();
    let mut rejected: BTreeMap<String, usize> = BTreeMap::new();
    let mut tracks = 0;
    for (scene, clouds) in data.clouds.iter().enumerate() {
        let seq = label_sequence(scene, clouds, &cfg.labels)?;
        tracks += seq.outcome.tracks.len();
        for r in &seq.outcome.rejections {
            let key = match r.reason {
                RejectReason::TooFewPoints => "too few points",
                RejectReason::TooManyPoints => "too many points",
                RejectReason::TooLarge => "too large",
                RejectReason::ShortTrack => "short track",
            };
            *rejected.entry(key.to_string()).or_default() += 1;
        }
        labels.extend(seq.labels);
    }
    Ok((labels, rejected, tracks))
}

fn label(cfg: &ExperimentConfig, dir: &Path, path: Option<&Path>) -> Run {
    let (_, data) = Dataset::load(dir)?;
    let (labels, rejected, tracks) = run_labeler(cfg, &data)?;
    let path = path.map_or_else(|| dir.join("labels.csv"), Path::to_path_buf);
    write_labels(&path, &labels)?;
    println!("labels: {} ({} tracks) -> {}", labels.len(), tracks, path.display());
    for (k, n) in &rejected {
        println!("rejected ({k}): {n}");
    }
    let errs = label_errors(&data, &labels);
    if !errs.is_empty() {
        let within = errs.iter().filter(|&&e| e <= 1.0).count();
        println!(
            "within 1 m of truth: {within}/{} ({:.1}%)",
            errs.len(),
            100.0 * within as f64 / errs.len() as f64
        );
        fs::write(
            dir.join("label_errors.txt"),
            errs.iter().map(|e| format!("{e}\n")).collect::<String>(),
        )
        .map_err(|e| Error::Io { path: dir.join("label_errors.txt"), source: e })?;
    }
    Ok(())
}

fn items_for(cfg: &ExperimentConfig, out: &Path, d: &DataArgs, data: &Dataset) -> Run<Vec<train::TrainItem>> {
    let labels = match cfg.train.label_source {
        LabelSource::Truth => None,
        LabelSource::Pseudo => {
            let p = d.labels_path(out);
            Some(if p.exists() {
                read_labels(&p)?
            } else {
                log::info!("{} not found, labeling in memory", p.display());
                run_labeler(cfg, data)?.0
            })
        }
    };
    Ok(training_items(data, cfg.train.label_source, labels.as_deref())?)
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path, d: &DataArgs, variant: Variant) -> Run {
    let (_, data) = load_dataset(cfg, &d.dataset_dir(out))?;
    let items = items_for(cfg, out, d, &data)?;
    let mut model = build_model(&cfg.model, variant, &data, cfg.train.seed)?;
    log::info!("{variant}: {} parameters, {} training frames", model.parameter_count(), items.len());
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Io { path: ckpt_dir.clone(), source: e })?;
    let every = cfg.train.checkpoint_every;
    let result = train::train_with(&mut model, &data, &items, &cfg.train, &cfg.loss, |m, epoch, step| {
        if every > 0 && (epoch + 1) % every == 0 {
            checkpoint::save(&ckpt_dir.join(format!("{variant}-epoch{:03}.ckpt", epoch + 1)), m, cfg, step)?;
        }
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Divergence(msg)) => {
            let dump = out.join("nan_dump.txt");
            let _ = fs::write(&dump, &msg);
            eprintln!("diagnostic dump: {}", dump.display());
            return Err(Error::Divergence(msg).into());
        }
        Err(e) => return Err(e.into()),
    };
    let log_path = out.join(format!("metrics-{variant}.log"));
    fs::write(&log_path, format_metrics(&outcome.log)).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    let ckpt = ckpt_dir.join(format!("{variant}.ckpt"));
    checkpoint::save(&ckpt, &model, cfg, outcome.steps)?;
    println!("steps: {}  final loss: {:.6}", outcome.steps, outcome.final_loss);
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", log_path.display());
    Ok(())
}

fn eval_cmd(cfg: &ExperimentConfig, out: &Path, d: &DataArgs, ckpt: &Path, brightness: &[f64]) -> Run {
    let (header, model) = checkpoint::load(ckpt)?;
    let (_, data) = load_dataset(&header.config, &d.dataset_dir(out))?;
    let levels: Vec<(String, f64)> = if brightness.is_empty() {
        vec![
            ("light".into(), cfg.train.light_brightness),
            ("dark".into(), cfg.train.dark_brightness),
        ]
    } else {
        brightness.iter().map(|&b| (tag_for(cfg, b), b)).collect()
    };
    for (tag, b) in levels {
        if !(b > 0.0 && b <= 1.0) {
            return Err(usage(Error::Config(format!("brightness {b} outside (0, 1]"))));
        }
        let ev = evaluate(&model, &data, Split::Test, b, &tag, header.seed)?;
        println!("{}  {}", header.variant.label(), ev.report);
        write_json(&out.join(format!("eval-{tag}.json")), &ev.report)?;
        write_records(&out.join(format!("predictions-{tag}.csv")), &ev.records)?;
    }
    Ok(())
}

fn tag_for(cfg: &ExperimentConfig, b: f64) -> String {
    if b == cfg.train.light_brightness {
        "light".into()
    } else if b == cfg.train.dark_brightness {
        "dark".into()
    } else {
        format!("b{b}")
    }
}

fn ablate(cfg: &ExperimentConfig, out: &Path, d: &DataArgs) -> Run {
    let (_, data) = load_dataset(cfg, &d.dataset_dir(out))?;
    let items = items_for(cfg, out, d, &data)?;
    let rows = ablation_suite(&data, &items, &cfg.model, &cfg.train, &cfg.loss, &Variant::ABLATION)?;
    let table = format_ablation(&rows);
    print!("{table}");
    let path = out.join("ablation.md");
    fs::write(&path, table).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn plot_cmd(out: &Path, dataset: Option<&Path>) -> Run {
    let fig = out.join("figures");
    fs::create_dir_all(&fig).map_err(|e| Error::Io { path: fig.clone(), source: e })?;
    let mut written = Vec::new();
    let entries = fs::read_dir(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let mut names: Vec<String> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    let labels_path = dataset.map(|d| d.join("labels.csv"));
    let labels = match &labels_path {
        Some(p) if p.exists() => read_labels(p)?,
        _ => Vec::new(),
    };
    for name in &names {
        let path = out.join(name);
        if let Some(stem) = name.strip_prefix("metrics-").and_then(|n| n.strip_suffix(".log")) {
            let file = fs::File::open(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let dst = fig.join(format!("loss-{stem}.svg"));
            plot::loss_curves(&dst, &parse_metrics(file)?)?;
            written.push(dst);
        } else if let Some(tag) = name.strip_prefix("eval-").and_then(|n| n.strip_suffix(".json")) {
            let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            let dst = fig.join(format!("confusion-{tag}.svg"));
            plot::confusion_matrix(&dst, &report)?;
            written.push(dst);
        } else if let Some(tag) = name.strip_prefix("predictions-").and_then(|n| n.strip_suffix(".csv")) {
            let recs = read_records(&path)?;
            let mut scenes: Vec<usize> = recs.iter().map(|r| r.scene).collect();
            scenes.sort_unstable();
            scenes.dedup();
            for s in scenes {
                let dst = fig.join(format!("trajectory-{tag}-scene{s:03}.svg"));
                plot::trajectory_overlay(&dst, s, &recs, &labels)?;
                written.push(dst);
            }
        }
    }
    if let Some(d) = dataset {
        let (_, data) = Dataset::load(d)?;
        if !labels.is_empty() {
            let dst = fig.join("label-errors.svg");
            plot::error_histogram(&dst, &label_errors(&data, &labels), 30)?;
            written.push(dst);
        }
    }
    if written.is_empty() {
        return Err(Error::InvalidInput(format!("no plottable artifacts in {}", out.display())).into());
    }
    for w in written {
        println!("{}", w.display());
    }
    Ok(())
}
