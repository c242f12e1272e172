use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use corrtalk::train::{
    ablation_csv, default_variants, epoch_log_csv, read_checkpoint, run_ablation_suite, step_log_csv, write_checkpoint,
    Config, Dataset, Trainer,
};
use corrtalk::{
    analyze, encode, evaluate_metrics, features_for_motion, load_wav, mask_from_init, melspectrogram, read_neutral,
    read_regions, read_sequence, write_sequence, Branch, MaskInit, Model, ParamStore64, StftConfig, StyleVector,
    SyntheticConfig, Tensor64,
};

#[derive(Parser)]
#[command(name = "corrtalk", version, about = "Speech-driven 3D facial animation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory (WAV + FMSQ pairs, neutral, regions).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 100)]
        vertices: usize,
        #[arg(long, default_value_t = 8)]
        subjects: usize,
    },
    /// Train on a dataset directory; writes a checkpoint and loss logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Animate a neutral face from speech.
    Synthesize {
        wav: PathBuf,
        neutral: PathBuf,
        #[arg(long, default_value_t = 0)]
        style: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output FMSQ; per-branch sequences are written next to it.
        #[arg(long, default_value = "synth.fmsq")]
        out: PathBuf,
    },
    /// Lip vertex error and FDD of a prediction against ground truth.
    Evaluate { pred: PathBuf, gt: PathBuf, neutral: PathBuf, regions: PathBuf },
    Fai {
        #[command(subcommand)]
        command: FaiCommand,
    },
    /// Dump hierarchical features, level weights and branch features as CSV.
    Encode {
        wav: PathBuf,
        /// Trained weights; a freshly initialized model from `--config` is used otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "encoded")]
        out: PathBuf,
    },
    /// Train the baseline and every ablation variant with a shared seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
}

#[derive(Subcommand)]
enum FaiCommand {
    /// Per-vertex mask initializer, fundamental-band map and a PGM heatmap.
    Analyze {
        seq: PathBuf,
        neutral: PathBuf,
        #[arg(long, default_value = "fai")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Log filterbank features of a WAV file as CSV.
    Extract {
        wav: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { out, seed, sequences, frames, vertices, subjects } => {
            let mut syn = SyntheticConfig::new(seed, sequences, frames, vertices, 30.0, 16000);
            syn.n_subjects = subjects;
            let data: Dataset<f64> = Dataset::synthetic(&syn)?;
            data.save(&out)?;
            println!("wrote {} sequences to {}", data.samples.len(), out.display());
        }
        Command::Train { config, data, out, resume } => train(config, &data, &out, resume)?,
        Command::Synthesize { wav, neutral, style, checkpoint, out } => {
            synthesize(&wav, &neutral, style, &checkpoint, &out)?
        }
        Command::Evaluate { pred, gt, neutral, regions } => {
            let report = evaluate_metrics(
                &read_sequence::<f64>(&pred)?,
                &read_sequence(&gt)?,
                &read_neutral(&neutral)?,
                &read_regions(&regions)?,
            )?;
            println!("lip_vertex_error,fdd");
            println!("{:e},{:e}", report.lip_vertex_error, report.fdd);
            println!();
            println!("{:<18}{:>16}", "metric", "value");
            println!("{:<18}{:>16.6e}", "lip_vertex_error", report.lip_vertex_error);
            println!("{:<18}{:>16.6e}", "fdd", report.fdd);
        }
        Command::Fai { command: FaiCommand::Analyze { seq, neutral, out } } => fai_analyze(&seq, &neutral, &out)?,
        Command::Encode { wav, checkpoint, config, out } => encode_wav(&wav, checkpoint, config, &out)?,
        Command::Ablate { config, data, out } => {
            let config = load_config(config)?;
            let dataset: Dataset<f64> = Dataset::load(&data)?;
            let rows = run_ablation_suite(&default_variants(&config), &dataset)?;
            let csv = ablation_csv(&rows);
            fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            print!("{csv}");
        }
        Command::Features { command: FeaturesCommand::Extract { wav, config, out } } => {
            let config = load_config(config)?;
            let clip = load_wav::<f64>(&wav)?;
            let feats = melspectrogram(&clip, &config.frontend())?;
            emit(out.as_deref(), &matrix_csv(&feats.values, "f")?)?;
        }
    }
    Ok(())
}

fn load_config(path: Option<PathBuf>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(&p)?,
        None => Config::default(),
    })
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Rows of a 2-D tensor with columns `{prefix}0..`.
fn matrix_csv(t: &Tensor64, prefix: &str) -> Result<String> {
    let (rows, cols) = t.dims2()?;
    let mut out = String::from("frame");
    for c in 0..cols {
        let _ = write!(out, ",{prefix}{c}");
    }
    out.push('\n');
    for r in 0..rows {
        let _ = write!(out, "{r}");
        for v in &t.data()[r * cols..(r + 1) * cols] {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn train(config: Option<PathBuf>, data: &Path, out: &Path, resume: Option<PathBuf>) -> Result<()> {
    let config = load_config(config)?;
    let dataset: Dataset<f64> = Dataset::load(data)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(&read_checkpoint(&p, Some(&config))?, &dataset)?;
            t.config.epochs = config.epochs;
            t.config.max_steps = config.max_steps;
            t
        }
        None => Trainer::new(&config, &dataset)?,
    };
    trainer.train()?;
    fs::create_dir_all(out)?;
    write_checkpoint(&trainer.checkpoint(), out.join("model.ckpt"))?;
    fs::write(out.join("steps.csv"), step_log_csv(&trainer.log))?;
    fs::write(out.join("epochs.csv"), epoch_log_csv(&trainer.log))?;
    let losses = trainer.dataset_losses()?;
    println!(
        "trained {} steps; dataset L_rec {:e} L_vel {:e} L_total {:e}; checkpoint {}",
        trainer.progress.global_step,
        losses.l_rec,
        losses.l_vel,
        losses.l_total,
        out.join("model.ckpt").display()
    );
    Ok(())
}

/// Model with the checkpoint's architecture and weights.
fn restore_model(checkpoint: &Path, n_vertices: usize) -> Result<(Config, Model, ParamStore64)> {
    let ck = read_checkpoint::<f64>(checkpoint, None)?;
    let config = ck.config()?;
    let model_config = config.model_config(n_vertices);
    let mut store = ParamStore64::new();
    let placeholder = (!config.single_branch).then(|| mask_from_init(&MaskInit { m0: vec![0.5; n_vertices] }));
    let model = Model::register(&mut store, &mut ChaCha8Rng::seed_from_u64(config.seed), &model_config, placeholder)?;
    ck.restore_params(&mut store).context("checkpoint does not match the neutral geometry")?;
    Ok((config, model, store))
}

fn acoustic_for_wav(config: &Config, wav: &Path) -> Result<Tensor64> {
    let clip = load_wav::<f64>(wav)?;
    if clip.sample_rate != config.sample_rate {
        bail!("{} is sampled at {} Hz, the model expects {} Hz", wav.display(), clip.sample_rate, config.sample_rate);
    }
    let frames = (clip.duration_secs() * config.fps).round() as usize;
    if frames == 0 {
        bail!("{} is shorter than one animation frame", wav.display());
    }
    Ok(features_for_motion(&clip, &config.frontend(), config.fps, config.n, frames)?.values)
}

fn synthesize(wav: &Path, neutral: &Path, style: usize, checkpoint: &Path, out: &Path) -> Result<()> {
    let neutral = read_neutral::<f64>(neutral)?;
    let (config, model, store) = restore_model(checkpoint, neutral.num_vertices())?;
    let acoustic = acoustic_for_wav(&config, wav)?;
    let style = StyleVector::new(style, config.n_subjects)?;
    let decoded = model.synthesize(&store, &acoustic, &neutral, style, config.fps as f32)?;
    write_sequence(&decoded.motion, out)?;
    println!("wrote {} ({} frames)", out.display(), decoded.motion.frames());
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("synth");
    for (branch, seq) in &decoded.branches {
        let path = out.with_file_name(format!("{stem}.{}.fmsq", branch_name(*branch)));
        write_sequence(seq, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Strong => "strong",
        Branch::Weak => "weak",
    }
}

fn fai_analyze(seq: &Path, neutral: &Path, out: &Path) -> Result<()> {
    let seq = read_sequence::<f64>(seq)?;
    let neutral = read_neutral::<f64>(neutral)?;
    let (map, init) = analyze(&seq, &neutral, &StftConfig::for_fps(seq.fps))?;
    fs::create_dir_all(out)?;
    let mut m0 = String::from("vertex,m0\n");
    for (v, x) in init.m0.iter().enumerate() {
        let _ = writeln!(m0, "{v},{x:e}");
    }
    fs::write(out.join("m0.csv"), m0)?;
    let i0 = map.fundamental();
    fs::write(out.join("i0.csv"), matrix_csv(&i0, "v")?)?;
    fs::write(out.join("i0.pgm"), pgm_heatmap(&i0)?)?;
    println!("wrote m0.csv, i0.csv and i0.pgm to {}", out.display());
    Ok(())
}

/// Binary PGM with one row per vertex and one column per frame, scaled to the map maximum.
fn pgm_heatmap(i0: &Tensor64) -> Result<Vec<u8>> {
    let (frames, vertices) = i0.dims2()?;
    let max = i0.data().iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{frames} {vertices}\n255\n").into_bytes();
    for v in 0..vertices {
        for t in 0..frames {
            let x = i0.data()[t * vertices + v];
            out.push(if max > 0.0 { (x / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 });
        }
    }
    Ok(out)
}

fn encode_wav(wav: &Path, checkpoint: Option<PathBuf>, config: Option<PathBuf>, out: &Path) -> Result<()> {
    let (config, model, store) = match checkpoint {
        Some(ck) => {
            let ck_data = read_checkpoint::<f64>(&ck, None)?;
            let n_vertices = ck_data.params.get("dec.s.motion.b").map(|b| b.data().len() / 3);
            restore_model(&ck, n_vertices.context("checkpoint has no strong decoder motion head")?)?
        }
        None => {
            let config = load_config(config)?;
            let mut store = ParamStore64::new();
            let mask = (!config.single_branch).then(|| mask_from_init(&MaskInit { m0: vec![0.5; 1] }));
            let model = Model::register(
                &mut store,
                &mut ChaCha8Rng::seed_from_u64(config.seed),
                &config.model_config(1),
                mask,
            )?;
            (config, model, store)
        }
    };
    let acoustic = acoustic_for_wav(&config, wav)?;
    let encoded = encode(&model.encoder, &store, &acoustic, &model.config.branches())?;
    fs::create_dir_all(out)?;
    for (i, level) in encoded.levels.iter().enumerate() {
        fs::write(out.join(format!("h{}.csv", i + 1)), matrix_csv(level, "c")?)?;
    }
    for (branch, w) in &encoded.weights {
        fs::write(out.join(format!("weights_{}.csv", branch_name(*branch))), matrix_csv(w, "level")?)?;
    }
    for (branch, f) in &encoded.features {
        fs::write(out.join(format!("features_{}.csv", branch_name(*branch))), matrix_csv(f, "c")?)?;
    }
    println!(
        "wrote {} levels and {} branch outputs to {}",
        encoded.levels.len(),
        encoded.features.len(),
        out.display()
    );
    Ok(())
}
