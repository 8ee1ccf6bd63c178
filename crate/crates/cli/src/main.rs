//! `dial`: enhance images, train, evaluate and gradient-check.

mod palette;
mod plot;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dial_core::checkpoint::Checkpoint;
use dial_core::config::{load_model_config, model_to_toml, RunConfig};
use dial_core::dataio::{
    pair_by_key, read_rgb, synth_dataset, write_atomic, write_rgb_png, DatasetManifest, Role, CLASS_NAMES,
};
use dial_core::dif::{apply_dif_stages, DifConfig, FilterParams};
use dial_core::gradsuite::{run_suite, SuiteModule};
use dial_core::trainer::{evaluate, DifMode, LossRecord, ModelConfig, Trainer};
use dial_core::{DialError, Image, LabelMap, Model32};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dial", version, about = "Image-adaptive filters and learnable guided filtering for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the filter pipeline on every image of a directory.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint whose predictor chooses the parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Fixed `E,G,alpha,lambda` instead of predicted ones.
        #[arg(long, value_parser = parse_params)]
        params: Option<[f64; 4]>,
        /// Model configuration; defaults to the sidecar next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model from a configuration file.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-category IoU of a checkpoint on a labeled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the learnable guided filter.
        #[arg(long)]
        no_lgf: bool,
        /// Skip the image-adaptive filters.
        #[arg(long)]
        no_iapm: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients in double precision.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        /// Scale one op's analytic gradient to check that failures surface.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic day/night set with manifests and a desk config.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Supervised,
    Uda,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Dif,
    Lgf,
    Losses,
    Nets,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Core(DialError),
    /// Already reported on stdout.
    Check,
}

impl From<DialError> for Failure {
    fn from(e: DialError) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn parse_params(s: &str) -> std::result::Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 4 values, got {}", v.len()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Enhance {
            input,
            checkpoint,
            output,
            params,
            config,
        } => cmd_enhance(&input, checkpoint.as_deref(), &output, params, config.as_deref()),
        Command::Train { mode, config, out } => cmd_train(mode, &config, &out),
        Command::Eval {
            checkpoint,
            manifest,
            out,
            no_lgf,
            no_iapm,
            config,
        } => cmd_eval(&checkpoint, &manifest, &out, no_lgf, no_iapm, config.as_deref()),
        Command::Gradcheck { module, corrupt } => cmd_gradcheck(module, corrupt.as_deref()),
        Command::Synth { count, seed, out } => cmd_synth(count, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Check) => ExitCode::from(3),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                DialError::InvalidArgument(_) => 1,
                DialError::NumericFailure(_) => 3,
                _ => 2,
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), DialError> {
    fs::create_dir_all(dir).map_err(|source| DialError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// `--config`, else `model.toml` beside the checkpoint or one level up.
fn model_config(config: Option<&Path>, checkpoint: &Path) -> Result<ModelConfig, DialError> {
    if let Some(p) = config {
        return load_model_config(p);
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    for d in [Some(dir), dir.parent()].into_iter().flatten() {
        let side = d.join("model.toml");
        if side.is_file() {
            return load_model_config(&side);
        }
    }
    warn!("no model.toml next to {}, assuming the desk preset", checkpoint.display());
    Ok(ModelConfig::desk())
}

fn load_model(cfg: ModelConfig, checkpoint: &Path) -> Result<Model32, DialError> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = Model32::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_checkpoint(&ck)?;
    Ok(model)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, DialError> {
    let rd = fs::read_dir(dir).map_err(|source| DialError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DialError::Data(format!("no png/ppm images in {}", dir.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_enhance(
    input: &Path,
    checkpoint: Option<&Path>,
    output: &Path,
    params: Option<[f64; 4]>,
    config: Option<&Path>,
) -> CmdResult {
    let model = match (params, checkpoint) {
        (None, None) => return Err(Failure::Usage("enhance needs --checkpoint or --params".into())),
        (Some(_), _) => None,
        (None, Some(ck)) => {
            let mut cfg = model_config(config, ck)?;
            cfg.dif_mode = DifMode::Adaptive;
            Some(load_model(cfg, ck)?)
        }
    };
    let dif_cfg = match (&model, config) {
        (Some(m), _) => m.cfg.dif.clone(),
        (None, Some(p)) => load_model_config(p)?.dif,
        (None, None) => DifConfig::default(),
    };
    let fixed = params.map(|p| FilterParams::from_array(p.map(|v| v as f32)));
    if let Some(p) = &fixed {
        dif_cfg.ranges.check(p)?;
    }
    create_dir(output)?;
    let mut report = String::from("image\texposure\tgamma\tcontrast\tsharpen\n");
    for path in image_files(input)? {
        let img = read_rgb::<f32>(&path)?;
        let (p, stages) = match (&model, fixed) {
            (_, Some(p)) => (p, apply_dif_stages(&img, &p, &dif_cfg)?),
            (Some(m), None) => {
                let pred = m.predict(&img)?;
                (pred.params.expect("adaptive filtering"), pred.stages)
            }
            (None, None) => unreachable!("checked above"),
        };
        let name = stem(&path);
        for (i, (kind, s)) in stages.iter().enumerate() {
            write_rgb_png(s, &output.join(format!("{name}_{}_{kind}.png", i + 1)))?;
        }
        write_rgb_png(&stages.last().expect("four stages").1, &output.join(format!("{name}.png")))?;
        let a = p.to_array();
        report.push_str(&format!("{name}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n", a[0], a[1], a[2], a[3]));
        info!("{} -> E={:.3} G={:.3} alpha={:.3} lambda={:.3}", path.display(), a[0], a[1], a[2], a[3]);
    }
    write_atomic(&output.join("params.tsv"), report.as_bytes())?;
    Ok(())
}

type Samples = Vec<(Image<f32>, LabelMap)>;

fn labeled(manifest: &DatasetManifest) -> Result<Samples, DialError> {
    (0..manifest.len())
        .map(|i| {
            let (img, lab) = manifest.load_sample(i)?;
            let lab = lab.ok_or_else(|| {
                DialError::Data(format!("{} has no label", manifest.entries[i].image.display()))
            })?;
            Ok((img, lab))
        })
        .collect()
}

fn manifest_path(p: &Option<PathBuf>, what: &str) -> Result<PathBuf, DialError> {
    p.clone()
        .ok_or_else(|| DialError::Config(format!("[data] {what} is required for this mode")))
}

fn cmd_train(mode: Mode, config: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let src_manifest = DatasetManifest::load(&manifest_path(&cfg.data.source, "source")?, Role::Source)?;
    let src = labeled(&src_manifest)?;
    let pairs = match mode {
        Mode::Supervised => Vec::new(),
        Mode::Uda => {
            let day = DatasetManifest::load(&manifest_path(&cfg.data.target_day, "target_day")?, Role::TargetDay)?;
            let night =
                DatasetManifest::load(&manifest_path(&cfg.data.target_night, "target_night")?, Role::TargetNight)?;
            pair_by_key(&day, &night)?
                .into_iter()
                .map(|(d, n)| Ok((day.load_sample::<f32>(d)?.0, night.load_sample::<f32>(n)?.0)))
                .collect::<Result<Vec<_>, DialError>>()?
        }
    };
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    write_atomic(&out.join("model.toml"), model_to_toml(&cfg.model).as_bytes())?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;

    let log_path = out.join("metrics.log");
    let file = fs::File::create(&log_path).map_err(|source| DialError::Io {
        path: log_path.clone(),
        source,
    })?;
    let mut log = BufWriter::new(file);
    let every = cfg.train.checkpoint_every;
    let max_steps = cfg.train.max_steps;
    let mut trainer = Trainer::<f32>::new(cfg.model.clone(), cfg.train.clone())?;
    let on_step = |t: &Trainer<f32>, r: &LossRecord| -> dial_core::Result<()> {
        writeln!(log, "{r}").map_err(|source| DialError::Io {
            path: log_path.clone(),
            source,
        })?;
        let done = r.step + 1;
        if done % 100 == 0 || done == max_steps {
            info!("{r}");
        }
        if every > 0 && done % every == 0 && done < max_steps {
            t.to_checkpoint()?.save(&ck_dir.join(format!("step_{done:06}.ckpt")))?;
        }
        Ok(())
    };
    let records = match mode {
        Mode::Supervised => trainer.train_supervised(&src, on_step)?,
        Mode::Uda => trainer.train_uda(&src, &pairs, on_step)?,
    };
    log.flush().map_err(|source| DialError::Io {
        path: log_path.clone(),
        source,
    })?;
    trainer.to_checkpoint()?.save(&ck_dir.join("final.ckpt"))?;
    write_rgb_png(&plot::loss_curve(&records)?, &out.join("loss_curve.png"))?;
    info!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    no_lgf: bool,
    no_iapm: bool,
    config: Option<&Path>,
) -> CmdResult {
    let mut cfg = model_config(config, checkpoint)?;
    let mut model = load_model(cfg.clone(), checkpoint)?;
    // The ablation flags swap the named module for the identity after loading,
    // so the same checkpoint serves every row.
    if no_lgf {
        cfg.use_lgf = false;
    }
    if no_iapm {
        cfg.dif_mode = DifMode::Off;
    }
    model.cfg = cfg;
    let m = DatasetManifest::load(manifest, Role::Source)?;
    let samples = labeled(&m)?;
    let (report, preds) = evaluate(&model, &samples)?;
    create_dir(&out.join("overlays"))?;
    // Manifest position keeps names unique when day and night share stems.
    for (i, ((entry, (img, _)), pred)) in m.entries.iter().zip(&samples).zip(&preds).enumerate() {
        write_rgb_png(
            &palette::overlay(img, pred)?,
            &out.join("overlays").join(format!("{i:05}_{}.png", stem(&entry.image))),
        )?;
    }
    let mut table = String::new();
    for (name, iou) in CLASS_NAMES.iter().zip(&report.iou) {
        match iou {
            Some(v) => table.push_str(&format!("{name:<14} {:.4}\n", v)),
            None => table.push_str(&format!("{name:<14} -\n")),
        }
    }
    table.push_str(&format!("{:<14} {:.4}\n", "mIoU", report.mean));
    print!("{table}");
    write_atomic(&out.join("miou.txt"), table.as_bytes())?;
    write_atomic(&out.join("palette.txt"), palette::legend().as_bytes())?;
    Ok(())
}

fn cmd_gradcheck(module: ModuleArg, corrupt: Option<&str>) -> CmdResult {
    let module = match module {
        ModuleArg::All => SuiteModule::All,
        ModuleArg::Dif => SuiteModule::Dif,
        ModuleArg::Lgf => SuiteModule::Lgf,
        ModuleArg::Losses => SuiteModule::Losses,
        ModuleArg::Nets => SuiteModule::Nets,
    };
    let reports = run_suite(module, corrupt)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{r}");
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        println!("all {} operations passed", reports.len());
        Ok(())
    } else {
        println!("FAILED: {}", failed.join(", "));
        Err(Failure::Check)
    }
}

fn cmd_synth(count: usize, seed: u64, out: &Path) -> CmdResult {
    let m = synth_dataset(count, seed, out)?;
    // A desk-scale run config pointing at the new manifests.
    let mut cfg = RunConfig::desk();
    cfg.data.source = Some("mixed.tsv".into());
    cfg.data.target_day = Some("day.tsv".into());
    cfg.data.target_night = Some("night.tsv".into());
    write_atomic(&out.join("desk.toml"), cfg.to_toml().as_bytes())?;
    info!(
        "wrote {} pairs to {} (mixed.tsv, day.tsv, night.tsv, desk.toml)",
        m.day.len(),
        out.display()
    );
    Ok(())
}
