//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::gradsuite::{run_suite, CHECKS};
use super::metrics::ConfusionMatrix;
use super::predict::predict_with_voting;
use super::train::{calibrate_neighbors, prepare_cloud, train, TrainOptions};
use crate::cloud::{read_cloud, synth, write_cloud, CloudFormat, DatasetManifest, ManifestFile, Split};
use crate::error::{Error, Result};
use crate::kernel::init_kernel_points;
use crate::segment::segment_cloud;

#[derive(Parser, Debug)]
#[command(name = "lgenet", version, about = "Hybrid kernel point convolution network for ALS point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic tile.
    Synth(SynthArgs),
    /// Partition a cloud and write its segment column.
    Segment(SegmentArgs),
    /// Subsample and partition training clouds; calibrate neighbor caps.
    Preprocess(PreprocessArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Label a cloud with vote-averaged predictions.
    Predict(PredictArgs),
    /// Precision, recall, F1 and overall accuracy.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print kernel point layouts.
    DumpKernels(DumpArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    extent: f64,
    #[arg(long, default_value_t = 5.0)]
    density: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also add the tile to this manifest (created when missing).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "train", value_parser = ["train", "test"])]
    split: String,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.03)]
    reg: f64,
    #[arg(long, default_value_t = 10)]
    knn: usize,
    #[arg(long, default_value_t = 255.0)]
    intensity_max: f64,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `desk`, `paper` or a config file.
    #[arg(long, default_value = "desk")]
    config: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "desk")]
    config: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    min_votes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Confusion-matrix file: class names, then one row of counts per class.
    #[arg(long, conflicts_with_all = ["predicted", "truth"])]
    confusion: Option<PathBuf>,
    #[arg(long, requires = "truth")]
    predicted: Option<PathBuf>,
    #[arg(long, requires = "predicted")]
    truth: Option<PathBuf>,
    /// Class names for label-based evaluation.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    save_confusion: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "check")]
    all: bool,
    #[arg(long, value_parser = CHECKS)]
    check: Vec<String>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    kernels: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run_cli<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DumpKernels(a) => cmd_dump(a),
    }
}

fn split_of(s: &str) -> Split {
    if s == "test" {
        Split::Test
    } else {
        Split::Train
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cloud = synth::synth_scene(a.seed, a.extent, a.density)?;
    write_cloud(&cloud, &a.out, CloudFormat::from_path(&a.out))?;
    println!("wrote {} points to {}", cloud.len(), a.out.display());
    if let Some(mp) = a.manifest {
        let mut m = if mp.exists() {
            DatasetManifest::load(&mp)?
        } else {
            let classes = synth::SynthClass::NAMES.iter().map(|s| s.to_string()).collect();
            let mut m = DatasetManifest::new(classes, synth::INTENSITY_MAX);
            m.name = "synthetic".into();
            m
        };
        let base = mp.parent().unwrap_or(Path::new(".")).to_path_buf();
        let abs_out = fs::canonicalize(&a.out).map_err(|e| Error::io("resolve output", e))?;
        let abs_base = fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { &base })
            .map_err(|e| Error::io("resolve manifest dir", e))?;
        let path = abs_out.strip_prefix(&abs_base).map(Path::to_path_buf).unwrap_or(abs_out);
        let split = split_of(&a.split);
        m.files.retain(|f| f.path != path);
        m.files.push(ManifestFile { path, split });
        m.save(&mp)?;
    }
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let mut cloud = read_cloud(&a.input)?;
    let n = segment_cloud(&mut cloud, a.intensity_max, a.reg, a.knn)?;
    write_cloud(&cloud, &a.output, CloudFormat::from_path(&a.output))?;
    println!("segments={n} points={}", cloud.len());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut config = Config::resolve(&a.config)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(format!("create {}", a.out_dir.display()), e))?;
    let mut out = manifest.clone();
    out.files.clear();
    let mut train_clouds = Vec::new();
    for (i, f) in manifest.files.iter().enumerate() {
        let src = manifest.resolve(&f.path);
        let abs = fs::canonicalize(&src).map_err(|e| Error::io(format!("resolve {}", src.display()), e))?;
        if f.split == Split::Test {
            out.files.push(ManifestFile {
                path: abs,
                split: Split::Test,
            });
            continue;
        }
        let raw = manifest.load_cloud(&src)?;
        let prepared = prepare_cloud(&raw, &config, manifest.intensity_max)?;
        let name = PathBuf::from(format!("train_{i:03}.bin"));
        write_cloud(&prepared, &a.out_dir.join(&name), CloudFormat::Binary)?;
        println!("{} -> {} ({} -> {} points)", src.display(), name.display(), raw.len(), prepared.len());
        out.files.push(ManifestFile {
            path: name,
            split: Split::Train,
        });
        train_clouds.push(prepared);
    }
    calibrate_neighbors(&mut config, &train_clouds);
    config.save(&a.out_dir.join("config.toml"))?;
    out.save(&a.out_dir.join("manifest.toml"))?;
    println!("wrote {}", a.out_dir.join("manifest.toml").display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut config = Config::resolve(&a.config)?;
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(i) = a.iterations {
        config.train.iterations_per_epoch = i;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let opts = TrainOptions {
        checkpoint_path: Some(a.out.clone()),
        resume: a.resume,
    };
    let ck = train(&manifest, config, &opts, |r| {
        println!(
            "epoch={} lr={:.6} loss={:.5} seconds={:.1}",
            r.epoch + 1,
            r.lr,
            r.mean_loss,
            r.seconds
        );
    })?;
    ck.save(&a.out)?;
    println!("saved {} after {} epochs", a.out.display(), ck.epoch);
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let cloud = read_cloud(&a.input)?;
    let min_votes = a.min_votes.unwrap_or(ck.config.inference.min_votes);
    let p = predict_with_voting(&ck, &cloud, min_votes, a.seed)?;
    let mut out = cloud.clone();
    out.label = p.labels.clone();
    write_cloud(&out, &a.output, CloudFormat::from_path(&a.output))?;
    println!(
        "passes={} min_votes={} points={} subsampled={}",
        p.forward_passes,
        p.votes.iter().min().unwrap_or(&0),
        cloud.len(),
        p.subsampled.len()
    );
    if p.subsampled.has_labels() {
        let m = ConfusionMatrix::from_labels(ck.classes.clone(), &p.subsampled.label, &p.subsampled_labels)?;
        print!("{}", m.evaluate()?.report("subsampled"));
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (matrix, mode) = if let Some(path) = &a.confusion {
        (ConfusionMatrix::load(path)?, "confusion-file")
    } else {
        let (Some(pp), Some(tp)) = (&a.predicted, &a.truth) else {
            return Err(Error::InvalidArgument(
                "pass --confusion FILE or both --predicted and --truth".into(),
            ));
        };
        let pred = read_cloud(pp)?;
        let truth = read_cloud(tp)?;
        let classes = match &a.manifest {
            Some(m) => DatasetManifest::load(m)?.classes,
            None => {
                let max = truth
                    .label
                    .iter()
                    .chain(&pred.label)
                    .filter(|&&l| l != crate::cloud::UNLABELED)
                    .max()
                    .copied()
                    .unwrap_or(0);
                (0..=max).map(|c| format!("class{c}")).collect()
            }
        };
        (ConfusionMatrix::from_labels(classes, &truth.label, &pred.label)?, "raw")
    };
    if let Some(p) = &a.save_confusion {
        matrix.save(p)?;
    }
    print!("{}", matrix.evaluate()?.report(mode));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let names: Vec<&'static str> = if a.all || a.check.is_empty() {
        CHECKS.to_vec()
    } else {
        CHECKS.iter().copied().filter(|c| a.check.iter().any(|n| n == c)).collect()
    };
    let results = run_suite(&names, a.seeds.max(1));
    let mut failed = 0;
    for r in &results {
        match &r.outcome {
            Ok(o) => println!(
                "PASS {:<24} seed={} max_rel_error={:.3e} coords={}",
                r.name, r.seed, o.max_rel_error, o.coordinates
            ),
            Err(e) => {
                failed += 1;
                println!("FAIL {:<24} seed={} {e}", r.name, r.seed);
            }
        }
    }
    if failed > 0 {
        return Err(Error::GradCheck {
            location: format!("{failed} of {} checks", results.len()),
            error: f64::NAN,
            tolerance: super::gradsuite::TOLERANCE,
        });
    }
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    if let Some(p) = a.checkpoint {
        let ck = Checkpoint::<f32>::load(&p)?;
        for l in [&ck.network.layout3, &ck.network.layout2] {
            println!("# dim={} kernels={} energy={:.6}", l.dim, l.len(), l.energy);
            print!("{}", l.to_ascii());
        }
    } else {
        let l = init_kernel_points(a.kernels, a.dim, a.seed)?;
        println!("# dim={} kernels={} energy={:.6}", l.dim, l.len(), l.energy);
        print!("{}", l.to_ascii());
    }
    Ok(())
}
