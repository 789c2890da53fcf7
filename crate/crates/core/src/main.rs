//! Command-line entry point wiring corpus generation, task sampling,
//! training, evaluation, the eta sweep, and the CCA analysis.
//!
//! Exit codes: 0 success, 2 config schema violation, 3 missing input file,
//! 1 anything else. Errors print one line to stderr.

use clap::{Args, Parser, Subcommand};
use pudnet::config::ExperimentConfig;
use pudnet::data::{
    load_corpus, load_task_groups, make_synthetic_corpus, sample_task_groups, save_corpus,
    save_task_groups, PatternFamily,
};
use pudnet::error::Error;
use pudnet::hypernet::PudNetParams;
use pudnet::infer::{compare, mean_std, predict_and_eval, predict_and_eval_clustered};
use pudnet::losses::FullHead;
use pudnet::train::{train_class_set, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pudnet",
    about = "Predict ConvNet parameters for unseen image datasets in one forward pass",
    version
)]
struct Cli {
    /// Cap on rayon worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                if !path.exists() {
                    return Err(CliError::missing(path));
                }
                ExperimentConfig::load(path).map_err(CliError::schema)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image corpus.
    GenCorpus {
        #[command(flatten)]
        config: ConfigArg,
        /// Pattern family override: gratings or rings.
        #[arg(long)]
        family: Option<String>,
        /// Keep only these classes (comma-separated global indices).
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample task groups from a corpus into a self-contained task file.
    GenTasks {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n_way: Option<usize>,
        #[arg(long)]
        support: Option<usize>,
        #[arg(long)]
        query: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        /// Output directory; writes tasks.pudt plus the config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train the hypernetwork on a task directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory containing tasks.pudt (from gen-tasks).
        #[arg(long)]
        tasks: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint against the from-scratch baseline.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Baseline epoch budgets, e.g. 1,30,50.
        #[arg(long, value_delimiter = ',')]
        baseline_epochs: Option<Vec<usize>>,
        /// Use the k-means clustering sketch with this many centroids per class.
        #[arg(long)]
        clustered_sketch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run only the from-scratch baseline over a task directory.
    Baseline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_delimiter = ',')]
        epochs: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per eta value; emit accuracy vs eta.
    SweepEta {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        tasks: PathBuf,
        /// Held-out tasks for evaluation.
        #[arg(long)]
        eval_tasks: PathBuf,
        #[arg(long, value_delimiter = ',')]
        etas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Canonical correlation analysis: learned vs random parameters.
    Cca {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List tensor names and shapes inside a checkpoint.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn schema(e: Error) -> Self {
        CliError { code: 2, message: format!("{e}") }
    }

    fn missing(path: &Path) -> Self {
        CliError { code: 3, message: format!("missing file: {}", path.display()) }
    }

    fn other(e: Error) -> Self {
        CliError { code: 1, message: format!("{e}") }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config(_) => CliError::schema(e),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError { code: 3, message: format!("{e}") }
            }
            _ => CliError::other(e),
        }
    }
}

fn require_exists(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

fn load_tasks_dir(dir: &Path) -> Result<Vec<pudnet::data::TaskGroup>, CliError> {
    let file = if dir.is_dir() { dir.join("tasks.pudt") } else { dir.to_path_buf() };
    require_exists(&file)?;
    Ok(load_task_groups(&file)?)
}

fn build_model(
    cfg: &ExperimentConfig,
    tasks: &[pudnet::data::TaskGroup],
) -> Result<(PudNetParams<f32>, FullHead<f32>, pudnet::targetnet::TargetSpec), CliError> {
    let spec = cfg.target_spec()?;
    let hp = cfg.hypernet_config();
    let pud = PudNetParams::<f32>::new(&hp, &spec, cfg.corpus.channels, cfg.seed)?;
    let head = FullHead::new(spec.embedding_dim, train_class_set(tasks), cfg.seed ^ 0x9E37);
    Ok((pud, head, spec))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError { code: 1, message: format!("thread pool: {e}") })?;
    }
    match cli.command {
        Command::GenCorpus { config, family, classes, out } => {
            let cfg = config.resolve()?;
            let family = match family.as_deref() {
                Some("gratings") => PatternFamily::Gratings,
                Some("rings") => PatternFamily::Rings,
                Some(other) => {
                    return Err(CliError {
                        code: 2,
                        message: format!("corpus.family: unknown family '{other}'"),
                    })
                }
                None => cfg.corpus.family,
            };
            let corpus = make_synthetic_corpus(
                cfg.corpus.n_classes,
                cfg.corpus.per_class,
                (cfg.corpus.channels, cfg.corpus.height, cfg.corpus.width),
                family,
                cfg.seed,
            )?;
            let corpus = match classes {
                Some(keep) => pudnet::data::subset_classes(&corpus, &keep)?,
                None => corpus,
            };
            save_corpus(&corpus, &out)?;
            cfg.write_echo(&out)?;
            println!(
                "wrote corpus: {} samples, {} classes -> {}",
                corpus.n(),
                corpus.n_classes(),
                out.display()
            );
            Ok(())
        }
        Command::GenTasks { config, corpus, n_way, support, query, count, out } => {
            let mut cfg = config.resolve()?;
            if let Some(v) = n_way {
                cfg.tasks.n_way = v;
            }
            if let Some(v) = support {
                cfg.tasks.support = v;
            }
            if let Some(v) = query {
                cfg.tasks.query = v;
            }
            if let Some(v) = count {
                cfg.tasks.count = v;
            }
            require_exists(&corpus)?;
            let corpus = load_corpus(&corpus)?;
            let groups = sample_task_groups(
                &corpus,
                cfg.tasks.n_way,
                cfg.tasks.support,
                cfg.tasks.query,
                cfg.tasks.count,
                cfg.seed,
            )?;
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            save_task_groups(&groups, &out.join("tasks.pudt"))?;
            cfg.write_echo(&out)?;
            println!("wrote {} task groups -> {}", groups.len(), out.display());
            Ok(())
        }
        Command::Train { config, tasks, out, resume } => {
            let cfg = config.resolve()?;
            let groups = load_tasks_dir(&tasks)?;
            let (pud, head, spec) = build_model(&cfg, &groups)?;
            let mut trainer = Trainer::new(pud, head, spec, cfg.train.lr);
            if let Some(ckpt) = resume {
                require_exists(&ckpt)?;
                trainer.load_checkpoint(&ckpt)?;
            }
            let tcfg = cfg.train_config();
            let log = trainer.run(&groups, &tcfg, Some(&out))?;
            let mut losses_name = out.file_name().unwrap_or_default().to_os_string();
            losses_name.push(".losses.csv");
            let losses_path = out.with_file_name(losses_name);
            std::fs::write(&losses_path, log.to_csv()).map_err(Error::from)?;
            cfg.write_echo(&out)?;
            if trainer.clip_events > 0 {
                eprintln!("note: gradient clipping fired {} times", trainer.clip_events);
            }
            println!(
                "trained {} steps -> {} (losses: {})",
                trainer.step,
                out.display(),
                losses_path.display()
            );
            Ok(())
        }
        Command::Eval { config, ckpt, tasks, baseline_epochs, clustered_sketch, out } => {
            let cfg = config.resolve()?;
            let groups = load_tasks_dir(&tasks)?;
            require_exists(&ckpt)?;
            let (pud, head, spec) = build_model(&cfg, &groups)?;
            let mut trainer = Trainer::new(pud, head, spec.clone(), cfg.train.lr);
            trainer.load_checkpoint(&ckpt)?;
            let epochs = baseline_epochs.unwrap_or_else(|| cfg.eval.baseline_epochs.clone());
            let report = if let Some(k) = clustered_sketch {
                let mut accs = Vec::new();
                let mut times = Vec::new();
                for g in &groups {
                    let (a, t) = predict_and_eval_clustered(
                        &trainer.pud,
                        &spec,
                        g,
                        cfg.model.shots,
                        k,
                        cfg.seed,
                    )?;
                    accs.push(a);
                    times.push(t);
                }
                let (acc_mean, acc_std) = mean_std(&accs);
                let (sec, _) = mean_std(&times);
                let mut report = compare(
                    &trainer.pud,
                    &spec,
                    &groups,
                    &epochs,
                    cfg.model.shots,
                    cfg.eval.baseline_lr,
                    cfg.model.tau,
                    cfg.seed,
                )?;
                report.rows.insert(
                    0,
                    pudnet::infer::ReportRow {
                        method: format!("pudnet_clustered_k{k}"),
                        epochs: 0,
                        acc_mean,
                        acc_std,
                        seconds: sec,
                    },
                );
                report
            } else {
                compare(
                    &trainer.pud,
                    &spec,
                    &groups,
                    &epochs,
                    cfg.model.shots,
                    cfg.eval.baseline_lr,
                    cfg.model.tau,
                    cfg.seed,
                )?
            };
            std::fs::write(&out, report.to_csv()).map_err(Error::from)?;
            cfg.write_echo(&out)?;
            for row in &report.rows {
                println!(
                    "{:<22} epochs {:>3}: acc {:.3} +/- {:.3}, {:.4}s",
                    row.method, row.epochs, row.acc_mean, row.acc_std, row.seconds
                );
            }
            if let Some(s) = report.speedup(*epochs.iter().max().unwrap_or(&1)) {
                println!("speedup vs longest baseline: {s:.1}x");
            }
            Ok(())
        }
        Command::Baseline { config, tasks, epochs, out } => {
            let cfg = config.resolve()?;
            let groups = load_tasks_dir(&tasks)?;
            let spec = cfg.target_spec()?;
            let mut report = pudnet::infer::EvalReport::default();
            for &e in &epochs {
                let mut accs = Vec::new();
                let mut times = Vec::new();
                for (i, g) in groups.iter().enumerate() {
                    let (a, t) = pudnet::infer::baseline_scratch(
                        &spec,
                        g,
                        e,
                        cfg.eval.baseline_lr,
                        cfg.model.shots,
                        cfg.model.tau,
                        cfg.seed.wrapping_add(i as u64),
                    )?;
                    accs.push(a);
                    times.push(t);
                }
                let (acc_mean, acc_std) = mean_std(&accs);
                let (sec, _) = mean_std(&times);
                report.rows.push(pudnet::infer::ReportRow {
                    method: "adam_scratch".into(),
                    epochs: e,
                    acc_mean,
                    acc_std,
                    seconds: sec,
                });
            }
            std::fs::write(&out, report.to_csv()).map_err(Error::from)?;
            cfg.write_echo(&out)?;
            println!("wrote baseline report -> {}", out.display());
            Ok(())
        }
        Command::SweepEta { config, tasks, eval_tasks, etas, out } => {
            let cfg = config.resolve()?;
            if etas.is_empty() {
                return Err(CliError { code: 2, message: "sweep-eta: empty eta list".into() });
            }
            let train_groups = load_tasks_dir(&tasks)?;
            let eval_groups = load_tasks_dir(&eval_tasks)?;
            let mut csv = String::from("eta,acc_mean,acc_std\n");
            for &eta in &etas {
                let mut run_cfg = cfg.clone();
                run_cfg.model.eta = eta;
                run_cfg.validate().map_err(CliError::schema)?;
                let (pud, head, spec) = build_model(&run_cfg, &train_groups)?;
                let mut trainer = Trainer::new(pud, head, spec.clone(), run_cfg.train.lr);
                let tcfg = run_cfg.train_config();
                trainer.run(&train_groups, &tcfg, None)?;
                let mut accs = Vec::new();
                for g in &eval_groups {
                    let (a, _) =
                        predict_and_eval(&trainer.pud, &spec, g, run_cfg.model.shots)?;
                    accs.push(a);
                }
                let (mean, std) = mean_std(&accs);
                println!("eta {eta:.2}: acc {mean:.3} +/- {std:.3}");
                csv.push_str(&format!("{eta:.4},{mean:.6},{std:.6}\n"));
            }
            std::fs::write(&out, csv).map_err(Error::from)?;
            cfg.write_echo(&out)?;
            Ok(())
        }
        Command::Cca { config, corpus, reps, out } => {
            let mut cfg = config.resolve()?;
            if let Some(r) = reps {
                cfg.cca.reps = r;
            }
            require_exists(&corpus)?;
            let corpus = load_corpus(&corpus)?;
            let spec = cfg.target_spec()?;
            let (learned, random) =
                pudnet::analysis::learned_vs_random(&corpus, &spec, &cfg.cca_config())?;
            let mut csv = String::from("component,rho_learned,rho_random\n");
            for (i, (l, r)) in
                learned.correlations.iter().zip(&random.correlations).enumerate()
            {
                csv.push_str(&format!("{i},{l:.6},{r:.6}\n"));
            }
            std::fs::write(&out, csv).map_err(Error::from)?;
            cfg.write_echo(&out)?;
            println!(
                "mean rho learned {:.3} vs random {:.3} ({} components)",
                learned.mean(),
                random.mean(),
                learned.correlations.len()
            );
            Ok(())
        }
        Command::InspectCkpt { ckpt } => {
            require_exists(&ckpt)?;
            let tensors: Vec<(String, pudnet::Tensor<f32>)> =
                pudnet::tensor::load_named_tensors(&ckpt)?;
            for (name, t) in &tensors {
                println!("{name}  {:?}", t.shape());
            }
            println!("{} tensors", tensors.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
