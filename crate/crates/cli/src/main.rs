//! Command-line front end: data generation, training, inference, evaluation
//! and diagnostics.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use partgroup::data::{generate_synthetic, load_dataset, write_dataset, SynthSpec};
use partgroup::evaluation::evaluate;
use partgroup::harness::objective::prepare_samples;
use partgroup::harness::selftest::run_all;
use partgroup::harness::{
    dump_attention, evaluate_split, infer_split, load_checkpoint, save_checkpoint, TrainConfig, Trainer,
};
use partgroup::inference::{read_predictions, write_predictions};

#[derive(Parser)]
#[command(name = "partgroup", version, about = "Social interaction triplet detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic split (images and annotations).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
    /// Train on a split and write checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Score the training split after the last step.
        #[arg(long)]
        eval: bool,
    },
    /// Write ranked triplet predictions for a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a prediction file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// A split JSON file or a prediction-format file.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        per_class: bool,
        /// Key-value report path; defaults to `<pred>.metrics`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Class count when `--gt` is a prediction-format file.
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Run every oracle suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write per-part attention maps of one scene as grayscale PNGs.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, base: Option<&str>) -> Result<TrainConfig> {
        let cfg = match (&self.config, base) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                TrainConfig::from_kv(&text, &path.display().to_string())?
            }
            (None, Some(text)) => TrainConfig::from_kv(text, "checkpoint")?,
            (None, None) => TrainConfig::desk(),
        };
        Ok(cfg.with_overrides(&self.set)?)
    }
}

fn gen_data(out: &Path, spec: &SynthSpec) -> Result<()> {
    let (split, images) = generate_synthetic(spec)?;
    let path = write_dataset(out, &split, &images)?;
    let triplets: usize = split.ground_truth().iter().map(|g| g.triplets.len()).sum();
    println!("wrote {} scenes ({triplets} triplets) to {}", split.scenes.len(), path.display());
    Ok(())
}

fn train(data: &Path, out: &Path, config: &ConfigArgs, resume: Option<&Path>, eval: bool) -> Result<()> {
    let cfg = config.resolve(None)?;
    let (split, images) = load_dataset(data)?;
    let samples = prepare_samples(&split, &images, &cfg.model)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_kv())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), samples, load_checkpoint(p, Some(&cfg.model))?)?,
        None => Trainer::new(cfg.clone(), samples)?,
    };
    let log_path = out.join("train.log");
    let mut log = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?,
    );
    let cfg_text = cfg.to_kv();
    let save = |t: &Trainer, name: &str| -> partgroup::Result<()> {
        let state = t.optimizer_state();
        save_checkpoint(&out.join(name), &t.config().model, t.params(), Some(&state), Some(&cfg_text))
    };
    let start = Instant::now();
    let total = trainer.total_steps();
    trainer.run(|t, rec| {
        writeln!(log, "{rec}").map_err(|e| partgroup::Error::io(&log_path, e))?;
        let done = t.steps_taken();
        if cfg.log_every > 0 && (done % cfg.log_every as u64 == 0 || done == total) {
            eprintln!("[{:>7.1}s] {rec}", start.elapsed().as_secs_f64());
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 {
            save(t, &format!("step-{done:06}.safetensors"))?;
        }
        Ok(())
    })?;
    log.flush()?;
    save(&trainer, "final.safetensors")?;
    println!("trained {} steps in {:.1}s", trainer.steps_taken(), start.elapsed().as_secs_f64());
    if eval {
        let report = evaluate_split(trainer.model(), trainer.params(), &split, &images, &cfg)?;
        print!("{}", report.to_table(false));
        fs::write(out.join("train_split.metrics"), report.to_kv(true))?;
    }
    Ok(())
}

fn infer(checkpoint: &Path, data: &Path, out: &Path, config: &ConfigArgs) -> Result<()> {
    let ck = load_checkpoint(checkpoint, None)?;
    let mut cfg = config.resolve(ck.train_config.as_deref())?;
    cfg.model = ck.model.clone();
    let (split, images) = load_dataset(data)?;
    let (model, _) = partgroup::network::Model::init::<f32>(&ck.model, 0)?;
    let preds = infer_split(&model, &ck.params, &split, &images, &cfg)?;
    write_predictions(out, &preds)?;
    println!("wrote predictions for {} images to {}", preds.len(), out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, per_class: bool, report: Option<&Path>, num_classes: Option<usize>) -> Result<()> {
    let preds = read_predictions(pred)?;
    let (gts, classes) = if gt.extension().is_some_and(|e| e == "json") {
        let split = partgroup::data::load_split(gt)?;
        let n = split.num_classes();
        (split.ground_truth(), n)
    } else {
        let gts = read_predictions(gt)?;
        let inferred = gts.iter().flat_map(|g| &g.triplets).map(|t| t.class_id + 1).max().unwrap_or(1);
        (gts, num_classes.unwrap_or(inferred))
    };
    let r = evaluate(&preds, &gts, classes)?;
    print!("{}", r.to_table(per_class));
    let path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = pred.as_os_str().to_owned();
        p.push(".metrics");
        PathBuf::from(p)
    });
    fs::write(&path, r.to_kv(per_class)).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn selftest(seed: u64) -> Result<()> {
    let mut failed = 0;
    for r in run_all(seed) {
        println!("{:<24} {:>4} cases  {}", r.name, r.cases, if r.passed() { "ok" } else { "FAILED" });
        for f in r.failures.iter().take(10) {
            println!("    {f}");
        }
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        bail!("{failed} suite(s) failed");
    }
    Ok(())
}

fn dump_attn(checkpoint: &Path, data: &Path, image_id: Option<&str>, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint, None)?;
    let (split, images) = load_dataset(data)?;
    let index = match image_id {
        Some(id) => split.scenes.iter().position(|s| s.image_id == id).with_context(|| format!("no scene `{id}`"))?,
        None => 0,
    };
    let image = images.get(index).context("split has no scenes")?;
    let (model, _) = partgroup::network::Model::init::<f32>(&ck.model, 0)?;
    let written = dump_attention(&model, &ck.params, image, out)?;
    println!("wrote {} attention maps for {} to {}", written.len(), split.scenes[index].image_id, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { out, scenes, seed, width, height } => gen_data(
            out,
            &SynthSpec { num_scenes: *scenes, seed: *seed, width: *width, height: *height, ..Default::default() },
        ),
        Command::Train { data, out, config, resume, eval } => train(data, out, config, resume.as_deref(), *eval),
        Command::Infer { checkpoint, data, out, config } => infer(checkpoint, data, out, config),
        Command::Eval { pred, gt, per_class, report, num_classes } => {
            eval(pred, gt, *per_class, report.as_deref(), *num_classes)
        }
        Command::Selftest { seed } => selftest(*seed),
        Command::DumpAttn { checkpoint, data, image_id, out } => dump_attn(checkpoint, data, image_id.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

