use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cmta::checkpoint::Checkpoint;
use cmta::config::{self, SynthConfig, TrainConfig};
use cmta::embeddings::{load_manifest, read_clip, split, Label, Manifest};
use cmta::metrics::{per_subset_report, ScoredPrediction};
use cmta::parallel::Execution;
use cmta::synthetic::gen_dataset;
use cmta::trainer::{clip_features, epoch_log_csv, score_clips, train, EvalSampling};
use cmta::{AblationVariant, CmtaError, Result};

#[derive(Parser)]
#[command(name = "cmta", version, about = "Cross-modal temporal artifact detector for generated video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (.cmta files plus manifest.csv).
    GenSynthetic {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector and write checkpoint, epoch log and effective config.
    Train {
        train_manifest: PathBuf,
        /// Separate validation manifest; otherwise a random `--val-split` fraction is held out.
        val_manifest: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0.1, conflicts_with = "val_manifest")]
        val_split: f64,
        #[arg(long)]
        variant: Option<AblationVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-subset AP/AUC/ACC report.
    Eval {
        #[command(flatten)]
        io: ScoreArgs,
    },
    /// Per-clip fake probability.
    Predict {
        #[command(flatten)]
        io: ScoreArgs,
    },
    /// Per-clip fused features from just before the classification head.
    DumpFeatures {
        #[command(flatten)]
        io: ScoreArgs,
    },
    /// Parse every file of a manifest and summarize it.
    ValidateData { manifest: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML file of `key = value` settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set hidden=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    checkpoint: PathBuf,
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Uniformly random clip windows instead of the centered one.
    #[arg(long)]
    random_eval: bool,
    /// Seed for `--random-eval`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScoreArgs {
    fn sampling(&self) -> EvalSampling {
        if self.random_eval {
            EvalSampling::Random { seed: self.seed }
        } else {
            EvalSampling::Center
        }
    }
}

fn resolve<T>(args: &ConfigArgs) -> Result<T>
where
    T: Default + serde::Serialize + serde::de::DeserializeOwned,
{
    let base: T = match &args.config {
        Some(p) => config::load(p)?,
        None => T::default(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    config::apply_overrides(&base, &overrides)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CmtaError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CmtaError::io(path, e))
}

fn gen_synthetic(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let synth: SynthConfig = resolve(cfg)?;
    synth.validate()?;
    let manifest = gen_dataset(&synth, out, Execution::Parallel)?;
    write(&out.join("synth_config.toml"), &config::to_toml(&synth)?)?;
    eprintln!(
        "wrote {} clips ({} real, {} fake) to {}",
        manifest.len(),
        manifest.count(Label::Real),
        manifest.count(Label::Fake),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    train_path: &Path,
    val_path: Option<&Path>,
    cfg: &ConfigArgs,
    val_split: f64,
    variant: Option<AblationVariant>,
    out: &Path,
) -> Result<()> {
    let mut tc: TrainConfig = resolve(cfg)?;
    if let Some(v) = variant {
        tc.variant = v;
    }
    tc.validate()?;
    let manifest = load_manifest(train_path)?;
    let (train_m, val_m) = match val_path {
        Some(p) => (manifest, load_manifest(p)?),
        None => split(&manifest, val_split, &mut ChaCha8Rng::seed_from_u64(tc.seed))?,
    };
    eprintln!("split: {} train / {} validation", train_m.len(), val_m.len());
    let train_clips = train_m.load_clips(tc.execution)?;
    let val_clips = val_m.load_clips(tc.execution)?;

    fs::create_dir_all(out).map_err(|e| CmtaError::io(out, e))?;
    let outcome = train::<f32>(&tc, &train_clips, &val_clips, |e| {
        eprintln!(
            "epoch {:>4}  loss {:.6}  val {:.6}  lr {:e}",
            e.epoch, e.train_loss, e.val_metric, e.lr
        )
    })?;
    outcome.best.save(&out.join("checkpoint.cmck"))?;
    write(&out.join("epochs.csv"), &epoch_log_csv(&outcome.log))?;

    let mut record = String::new();
    let _ = writeln!(record, "# train_manifest = {:?}", train_path.display().to_string());
    match val_path {
        Some(p) => {
            let _ = writeln!(record, "# val_manifest = {:?}", p.display().to_string());
        }
        None => {
            let _ = writeln!(record, "# val_split = {val_split} (shuffled with `seed`)");
        }
    }
    record.push_str(&config::to_toml(&tc)?);
    write(&out.join("effective_config.toml"), &record)?;
    eprintln!(
        "best epoch {} (val {:.6}) saved to {}",
        outcome.best.epoch,
        outcome.best.best_metric,
        out.join("checkpoint.cmck").display()
    );
    Ok(())
}

fn load_scored(io: &ScoreArgs) -> Result<(Checkpoint<f32>, Manifest, Vec<cmta::embeddings::EmbeddingClip>)> {
    let ck = Checkpoint::<f32>::load(&io.checkpoint)?;
    let manifest = load_manifest(&io.manifest)?;
    let clips = manifest.load_clips(ck.train_config.execution)?;
    Ok((ck, manifest, clips))
}

fn cmd_eval(io: &ScoreArgs) -> Result<()> {
    let (ck, manifest, clips) = load_scored(io)?;
    let preds = score_clips(&ck.model, &clips, io.sampling(), ck.train_config.execution)?;
    let tagged: Vec<(String, ScoredPrediction)> =
        manifest.entries.iter().map(|e| e.subset.clone()).zip(preds).collect();
    let report = per_subset_report(&tagged);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let csv = report.to_csv();
    write(&io.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_predict(io: &ScoreArgs) -> Result<()> {
    let (ck, _, clips) = load_scored(io)?;
    let preds = score_clips(&ck.model, &clips, io.sampling(), ck.train_config.execution)?;
    let mut out = String::from("clip_id,label,p_fake\n");
    for p in preds {
        let _ = writeln!(out, "{},{},{:.9}", p.clip_id, p.label.as_u8(), p.score);
    }
    write(&io.out, &out)
}

fn cmd_dump_features(io: &ScoreArgs) -> Result<()> {
    let (ck, _, clips) = load_scored(io)?;
    let feats = clip_features(&ck.model, &clips, io.sampling(), ck.train_config.execution)?;
    let width = ck.model.config.fusion_dim();
    let mut out = String::from("clip_id,label");
    for j in 0..width {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (clip, f) in clips.iter().zip(feats) {
        let _ = write!(out, "{},{}", clip.clip_id, clip.label.as_u8());
        for x in f {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    write(&io.out, &out)
}

/// Returns whether every file parsed.
fn cmd_validate_data(path: &Path) -> Result<bool> {
    let manifest = load_manifest(path)?;
    let mut labels = [0usize; 2];
    let mut dims: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut frames: BTreeMap<usize, usize> = BTreeMap::new();
    let mut failed = 0;
    for e in &manifest.entries {
        match read_clip(&e.path) {
            Ok(clip) if clip.label != e.label => {
                failed += 1;
                println!(
                    "FAIL {}: manifest label {} but file label {}",
                    e.path.display(),
                    e.label.as_u8(),
                    clip.label.as_u8()
                );
            }
            Ok(clip) => {
                labels[clip.label.as_u8() as usize] += 1;
                *dims.entry((clip.visual_dim(), clip.textual_dim())).or_default() += 1;
                *frames.entry(clip.frames()).or_default() += 1;
            }
            Err(err) => {
                failed += 1;
                println!("FAIL {err}");
            }
        }
    }
    println!("files: {} ok, {failed} failed", manifest.len() - failed);
    println!("labels: {} real, {} fake", labels[0], labels[1]);
    for ((dv, de), n) in &dims {
        println!("dims: d_v={dv} d_e={de} ({n} files)");
    }
    if dims.len() > 1 {
        println!("warning: inconsistent embedding dimensions across files");
    }
    println!("frames histogram:");
    for (n, count) in &frames {
        println!("  {n:>6} frames: {count}");
    }
    Ok(failed == 0)
}

fn exit_code(err: &CmtaError, training: bool) -> u8 {
    match err {
        CmtaError::Config(_) => 2,
        CmtaError::Io { .. } => 3,
        CmtaError::Load { .. } | CmtaError::Data(_) if training => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let training = matches!(cli.command, Command::Train { .. });
    let result = match &cli.command {
        Command::GenSynthetic { cfg, out } => gen_synthetic(cfg, out).map(|_| true),
        Command::Train {
            train_manifest,
            val_manifest,
            cfg,
            val_split,
            variant,
            out,
        } => cmd_train(train_manifest, val_manifest.as_deref(), cfg, *val_split, *variant, out).map(|_| true),
        Command::Eval { io } => cmd_eval(io).map(|_| true),
        Command::Predict { io } => cmd_predict(io).map(|_| true),
        Command::DumpFeatures { io } => cmd_dump_features(io).map(|_| true),
        Command::ValidateData { manifest } => cmd_validate_data(manifest),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e, training))
        }
    }
}
