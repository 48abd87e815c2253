use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use picnet_core::data::{load_bundle, save_bundle, synth_generate, DatasetBundle, Difficulty, Preprocessor, Split, SynthSpec};
use picnet_core::gradcheck::run_suite;
use picnet_core::model::{ModelConfig, PicnetModel, DEFAULT_LAMBDA};
use picnet_core::train::{
    check_scene, evaluate, predict_map, render_map, write_history, Checkpoint, MapCoverage, TrainConfig, Trainer,
};
use picnet_core::Error;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const HISTORY_FILE: &str = "history.jsonl";
const EVAL_BATCH: usize = 256;
const GRADCHECK_SEEDS: usize = 20;

#[derive(Parser, Debug)]
#[command(name = "picnet", version, about = "Hyperspectral + SAR/LiDAR patch classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene bundle.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Side length of the square raster.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        bands: usize,
        #[arg(long, default_value_t = 2)]
        aux_channels: usize,
        /// easy or complementary
        #[arg(long, default_value_t = Difficulty::Easy)]
        difficulty: Difficulty,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.bin and history.jsonl into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        patch_size: usize,
        #[arg(long, default_value_t = 30)]
        pca_components: usize,
        #[arg(long, default_value_t = 4)]
        fim_blocks: usize,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda1: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda2: f64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report OA, AA, kappa and per-class accuracy on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train or test
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Classify every pixel and write a PPM map.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_map: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print bundle statistics.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Prints every argument of the chosen subcommand, defaults included.
fn echo_config(name: &str, matches: &ArgMatches) {
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    println!("picnet {name}");
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        if matches!(id, "help" | "version") {
            continue;
        }
        let value = matches
            .get_raw(id)
            .map(|vals| vals.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        println!("  --{} {value}", arg.get_long().unwrap_or(id));
    }
    let threads = std::env::var("PICNET_THREADS").ok();
    match threads {
        Some(t) => println!("  threads 1 (PICNET_THREADS={t} noted; execution is single-threaded)"),
        None => println!("  threads 1"),
    }
}

/// Validation problems and numeric failures map to different exit codes.
enum Failure {
    Core(Error),
    Mismatch(String),
    Gradients(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn synth(spec: SynthSpec, out: &Path) -> CmdResult {
    let bundle = synth_generate(&spec)?;
    save_bundle(&bundle, out)?;
    println!(
        "wrote {}: {}x{}, {} bands, {} SAR/LiDAR channels, {} train / {} test labeled pixels",
        out.display(),
        bundle.height(),
        bundle.width(),
        bundle.meta.bands,
        bundle.meta.aux_channels,
        bundle.labels_train.labeled_count(),
        bundle.labels_test.labeled_count()
    );
    Ok(())
}

fn train(data: &Path, out: &Path, model_config: ModelConfig, config: TrainConfig) -> CmdResult {
    model_config.validate()?;
    config.validate()?;
    let raw = load_bundle(data)?;
    if raw.meta.bands < model_config.n_pca {
        return Err(Error::Config(format!(
            "--pca-components {} exceeds the {} bands in {}",
            model_config.n_pca,
            raw.meta.bands,
            data.display()
        ))
        .into());
    }
    let prep = Preprocessor::fit(&raw, model_config.n_pca)?;
    let scene = prep.apply(&raw)?;
    let model_config = ModelConfig {
        n_classes: scene.n_classes(),
        aux_channels: scene.meta.aux_channels,
        ..model_config
    };
    let mut trainer = Trainer::new(model_config, config)?;
    println!("parameters: {}", trainer.model.param_count());
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;

    let t0 = Instant::now();
    let history = trainer.fit(&scene, |_, r| {
        println!(
            "epoch {:>4}  ce {:.6}  cyc_x {:.6}  cyc_h {:.6}  total {:.6}  train_oa {:.4}",
            r.epoch, r.l_ce, r.l_cyc_x, r.l_cyc_h, r.total, r.train_oa
        );
        Ok(())
    })?;
    trainer.checkpoint(Some(prep)).save(out.join(CHECKPOINT_FILE))?;
    write_history(out.join(HISTORY_FILE), &history)?;
    println!(
        "trained {} epochs in {:.1}s; wrote {} and {}",
        history.len(),
        t0.elapsed().as_secs_f64(),
        out.join(CHECKPOINT_FILE).display(),
        out.join(HISTORY_FILE).display()
    );
    Ok(())
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_else(|e| format!("<unprintable: {e}>"))
}

/// Loads a checkpoint and a bundle, preprocesses the bundle the way the
/// model was trained and checks that the two agree.
fn load_pair(data: &Path, checkpoint: &Path) -> Result<(PicnetModel, DatasetBundle), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let raw = load_bundle(data)?;
    let model = ck.model;
    let mismatch = |why: String| {
        Failure::Mismatch(format!(
            "{why}\ncheckpoint model config:\n{}\ndataset meta:\n{}",
            pretty(model.config()),
            serde_json::to_string(&raw.meta).unwrap_or_default()
        ))
    };
    let scene = match &ck.preprocessor {
        Some(prep) if prep.pca.bands() != raw.meta.bands => {
            return Err(mismatch(format!(
                "checkpoint was fitted on {} bands, dataset has {}",
                prep.pca.bands(),
                raw.meta.bands
            )))
        }
        Some(prep) => prep.apply(&raw)?,
        None => raw.clone(),
    };
    if let Err(e) = check_scene(model.config(), &scene) {
        return Err(mismatch(e.to_string()));
    }
    Ok((model, scene))
}

fn eval(data: &Path, checkpoint: &Path, split: Split) -> CmdResult {
    let (model, scene) = load_pair(data, checkpoint)?;
    let e = evaluate(&model, &scene, split, EVAL_BATCH)?;
    let width = scene.meta.classes.iter().map(|c| c.len()).max().unwrap_or(0).max(8);
    println!("{:<width$}  {:>8}  {:>8}", "class", "pixels", "acc (%)");
    for (i, name) in scene.meta.classes.iter().enumerate() {
        let acc = e.per_class[i].map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        println!("{name:<width$}  {:>8}  {acc:>8}", e.confusion.row_sum(i));
    }
    println!("{:<width$}  {:>8}  {:>8.2}", "OA", e.confusion.total(), 100.0 * e.oa);
    println!("{:<width$}  {:>8}  {:>8.2}", "AA", "", 100.0 * e.aa);
    println!("{:<width$}  {:>8}  {:>8.4}", "Kappa", "", e.kappa);
    Ok(())
}

fn predict(data: &Path, checkpoint: &Path, out_map: &Path) -> CmdResult {
    let (model, scene) = load_pair(data, checkpoint)?;
    let map = predict_map(&model, &scene, MapCoverage::All, EVAL_BATCH)?;
    let ppm = render_map(&map, &scene.meta.palette)?;
    std::fs::write(out_map, ppm).map_err(|e| Error::Io { path: out_map.to_path_buf(), source: e })?;
    let counts = map.histogram(scene.n_classes());
    println!("wrote {} ({}x{})", out_map.display(), map.width, map.height);
    for (name, n) in scene.meta.classes.iter().zip(counts) {
        println!("  {name}: {n} pixels");
    }
    Ok(())
}

fn gradcheck(seed: u64) -> CmdResult {
    let t0 = Instant::now();
    let outcomes = run_suite(seed, GRADCHECK_SEEDS)?;
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed());
        println!("{tag}  {:<28} max rel err {:.3e}  (tol {:.0e}, {} seeds)", o.name, o.rel_err, o.tol, o.seeds);
    }
    println!("{} of {} checks passed in {:.1}s", outcomes.len() - failed, outcomes.len(), t0.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::Gradients(failed));
    }
    Ok(())
}

fn inspect(data: &Path) -> CmdResult {
    let b = load_bundle(data)?;
    println!("raster {}x{}, {} bands, {} SAR/LiDAR channels", b.height(), b.width(), b.meta.bands, b.meta.aux_channels);
    for (label, t) in [("hyperspectral", &b.hsi), ("SAR/LiDAR", &b.aux)] {
        let (lo, hi) = t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mean = t.data().iter().sum::<f64>() / t.data().len() as f64;
        println!("{label}: min {lo:.4}  max {hi:.4}  mean {mean:.4}");
    }
    let k = b.n_classes();
    let (train, test) = (b.labels_train.histogram(k), b.labels_test.histogram(k));
    let width = b.meta.classes.iter().map(|c| c.len()).max().unwrap_or(0).max(5);
    println!("{:<width$}  {:>7}  {:>7}", "class", "train", "test");
    for (i, name) in b.meta.classes.iter().enumerate() {
        println!("{name:<width$}  {:>7}  {:>7}", train[i], test[i]);
    }
    println!(
        "{:<width$}  {:>7}  {:>7}",
        "total",
        b.labels_train.labeled_count(),
        b.labels_test.labeled_count()
    );
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth { seed, classes, size, bands, aux_channels, difficulty, out } => {
            let spec = SynthSpec {
                seed,
                classes,
                height: size,
                width: size,
                bands,
                aux_channels,
                difficulty,
                ..SynthSpec::default()
            };
            synth(spec, &out)
        }
        Command::Train {
            data,
            out,
            patch_size,
            pca_components,
            fim_blocks,
            lambda1,
            lambda2,
            lr,
            epochs,
            batch,
            seed,
        } => {
            // Class and channel counts are filled in from the data.
            let model_config = ModelConfig {
                n_pca: pca_components,
                patch: patch_size,
                n_fim: fim_blocks,
                lambda1,
                lambda2,
                ..ModelConfig::new(2, 1)
            };
            let config = TrainConfig { lr, epochs, batch, seed, ..TrainConfig::default() };
            train(&data, &out, model_config, config)
        }
        Command::Eval { data, checkpoint, split } => eval(&data, &checkpoint, split),
        Command::Predict { data, checkpoint, out_map } => predict(&data, &checkpoint, &out_map),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Inspect { data } => inspect(&data),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Some((name, sub)) = matches.subcommand() {
        echo_config(name, sub);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e @ Error::Numeric(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Mismatch(msg)) => {
            eprintln!("error: checkpoint does not match the dataset: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Gradients(n)) => {
            eprintln!("error: {n} gradient checks failed");
            ExitCode::from(2)
        }
    }
}
