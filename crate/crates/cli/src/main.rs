use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use cascade_inv::cascade::{
    generate_cascade, invert_cascade_through, reconstruct_cascade, BaseMethod, CascadeConfig, CascadeModels,
    SrMethod,
};
use cascade_inv::editing::{edit_image, EditRequest};
use cascade_inv::harness::{run_eval_grid, write_testbed, GridFamily, RunManifest};
use cascade_inv::inversion::{load_trace, save_trace};
use cascade_inv::io::{read_image, write_atomic, write_image, write_mask};
use cascade_inv::trainer::{generate_shapes, train_stage, TrainConfig};
use cascade_inv::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "cascade-inv", version, about = "Inversion, reconstruction and editing for a toy cascaded pixel diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// DDIM at every stage.
    Ddim,
    /// Null-text inversion at stage 1, DDIM above.
    Nti,
    /// Null-text inversion at stage 1, iterative inversion above.
    Iterinv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stages {
    #[value(name = "1")]
    One,
    #[value(name = "12")]
    OneTwo,
    #[value(name = "123")]
    All,
}

impl Stages {
    fn last(self) -> usize {
        match self {
            Stages::One => 1,
            Stages::OneTwo => 2,
            Stages::All => 3,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the three toy denoisers on the shapes dataset.
    TrainToy {
        /// Training config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a directory of rendered test images for `eval-grid`.
    Testbed {
        /// Training config JSON whose resolutions and classes are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Invert an image and store traces and reconstructions.
    Invert {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class id of the image.
        #[arg(long)]
        prompt: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long, value_enum, default_value = "123")]
        stages: Stages,
        /// Seed for conditioning noise and for generated stages.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Replay stored traces.
    Reconstruct {
        #[arg(long)]
        model_dir: PathBuf,
        /// Directory holding `stage{1,2,3}.trace` from `invert`.
        #[arg(long)]
        trace_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mask-guided prompt edit at stage 1, upsampled through stages 2 and 3.
    Edit {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        src: u32,
        #[arg(long)]
        tgt: u32,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 3.0)]
        guidance: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Binary mask at stage-1 resolution, written as PGM.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Sample a class through all three stages.
    Generate {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        prompt: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the DDIM / IterInv comparison grid over a testbed directory.
    EvalGrid {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to one family of rows; both run when omitted.
        #[arg(long, value_enum)]
        method: Option<Family>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Ddim,
    Iterinv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Usage) => 2,
        Some(ErrorClass::Numerical) => 4,
        _ => 3,
    }
}

fn command_line() -> Vec<String> {
    std::env::args().collect()
}

fn cascade_config(path: Option<&Path>) -> anyhow::Result<CascadeConfig> {
    Ok(match path {
        Some(p) => CascadeConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => CascadeConfig::default(),
    })
}

fn train_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => TrainConfig::default(),
    };
    Ok(cfg)
}

fn finish_manifest(mut m: RunManifest, outputs: &[PathBuf], dir: &Path) -> anyhow::Result<()> {
    m.finish(outputs, dir)?;
    let p = m.write(dir)?;
    info!("wrote {}", p.display());
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::TrainToy { config, seed, out_dir } => {
            let mut cfg = train_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let mut manifest = RunManifest::start(command_line(), &cfg)?;
            manifest.seeds.insert("train_seed".into(), cfg.seed);
            let data = generate_shapes(cfg.dataset_size, cfg.num_classes, cfg.resolutions, cfg.seed)?;
            let schedule = cascade_inv::schedule::NoiseSchedule::default();
            let mut nets = Vec::new();
            let mut reports = Vec::new();
            for stage in 1..=3 {
                let (net, report) = train_stage(stage, &data, &schedule, &cfg)?;
                info!("stage {stage}: loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
                nets.push(net.into());
                reports.push(report);
            }
            let [a, b, c]: [_; 3] = nets.try_into().map_err(|_| anyhow::anyhow!("three stages"))?;
            let models = CascadeModels::new(a, b, c);
            models.save_dir(&out_dir)?;
            let report_path = out_dir.join("train_report.json");
            write_atomic(&report_path, serde_json::to_string_pretty(&reports)?.as_bytes())?;
            let mut outputs: Vec<PathBuf> = (1..=3).map(|s| out_dir.join(CascadeModels::file_name(s))).collect();
            outputs.push(report_path);
            manifest.record_models(&out_dir)?;
            finish_manifest(manifest, &outputs, &out_dir)
        }
        Command::Testbed {
            config,
            count,
            seed,
            out_dir,
        } => {
            let cfg = train_config(config.as_deref())?;
            cfg.validate()?;
            if count == 0 {
                return Err(Error::InvalidRange("testbed count must be positive".into()).into());
            }
            let mut manifest = RunManifest::start(command_line(), &cfg)?;
            manifest.seeds.insert("testbed_seed".into(), seed);
            let samples = generate_shapes(count, cfg.num_classes, cfg.resolutions, seed)?;
            let outputs = write_testbed(&out_dir, &samples)?;
            finish_manifest(manifest, &outputs, &out_dir)
        }
        Command::Invert {
            model_dir,
            image,
            prompt,
            config,
            method,
            stages,
            seed,
            out_dir,
        } => {
            let mut cfg = cascade_config(config.as_deref())?;
            match method {
                Some(Method::Ddim) => (cfg.stage1_method, cfg.sr_method) = (BaseMethod::Ddim, SrMethod::Ddim),
                Some(Method::Nti) => (cfg.stage1_method, cfg.sr_method) = (BaseMethod::Nti, SrMethod::Ddim),
                Some(Method::Iterinv) => (cfg.stage1_method, cfg.sr_method) = (BaseMethod::Nti, SrMethod::IterInv),
                None => {}
            }
            if let Some(s) = seed {
                cfg.iterinv.noise_seed = s;
                cfg.generation_seed = s;
            }
            cfg.validate()?;
            let r3 = cfg.resolutions[2];
            let img = read_image(&image, Some((r3, r3)))?;
            let mut manifest = RunManifest::start(command_line(), &cfg)?;
            manifest.record_models(&model_dir)?;
            manifest.seeds.insert("noise_seed".into(), cfg.iterinv.noise_seed);
            manifest.seeds.insert("generation_seed".into(), cfg.generation_seed);
            let models = CascadeModels::load_dir(&model_dir)?;
            let result = invert_cascade_through(&models, &img, prompt, &cfg, stages.last())?;
            let mut outputs = Vec::new();
            for (tr, rec) in result.traces.iter().zip(&result.reconstructions) {
                let t = out_dir.join(format!("stage{}.trace", tr.stage));
                save_trace(&t, tr)?;
                let r = out_dir.join(format!("recon_s{}.ppm", tr.stage));
                write_image(rec, &r)?;
                outputs.extend([t, r]);
            }
            let metrics = out_dir.join("metrics.json");
            write_atomic(&metrics, serde_json::to_string_pretty(&result.metrics)?.as_bytes())?;
            outputs.push(metrics);
            for m in &result.metrics {
                println!("stage {} ({}): psnr {:.3} dB, ssim {:.4}", m.stage, m.method, m.psnr_db, m.ssim);
            }
            finish_manifest(manifest, &outputs, &out_dir)
        }
        Command::Reconstruct {
            model_dir,
            trace_dir,
            config,
            out_dir,
        } => {
            let cfg = cascade_config(config.as_deref())?;
            let mut manifest = RunManifest::start(command_line(), &cfg)?;
            manifest.record_models(&model_dir)?;
            let models = CascadeModels::load_dir(&model_dir)?;
            let mut traces = Vec::new();
            for stage in 1..=3 {
                let p = trace_dir.join(format!("stage{stage}.trace"));
                if p.exists() {
                    traces.push(load_trace(&p)?);
                }
            }
            if traces.is_empty() {
                bail!(Error::Format(format!("no stage traces in {}", trace_dir.display())));
            }
            let recons = reconstruct_cascade(&models, &cfg.schedule()?, &traces)?;
            let mut outputs = Vec::new();
            for (tr, rec) in traces.iter().zip(&recons) {
                let p = out_dir.join(format!("recon_s{}.ppm", tr.stage));
                write_image(rec, &p)?;
                outputs.push(p);
            }
            finish_manifest(manifest, &outputs, &out_dir)
        }
        Command::Edit {
            model_dir,
            image,
            src,
            tgt,
            ratio,
            threshold,
            guidance,
            config,
            seed,
            out,
            mask_out,
        } => {
            let cfg = cascade_config(config.as_deref())?;
            let img = read_image(&image, None)?;
            let request = EditRequest {
                encode_ratio: ratio,
                mask_threshold: threshold,
                guidance,
                seed,
                ..EditRequest::new(img, src, tgt)
            };
            request.validate()?;
            let mut manifest = RunManifest::start(command_line(), &cfg)?;
            manifest.record_models(&model_dir)?;
            manifest.seeds.insert("edit_seed".into(), seed);
            let models = CascadeModels::load_dir(&model_dir)?;
            let result = edit_image(&models, &request, &cfg)?;
            if result.mask.is_empty() {
                warn!("empty edit mask");
            }
            write_image(result.top(), &out)?;
            let mut outputs = vec![out.clone()];
            if let Some(m) = &mask_out {
                write_mask(&result.mask.mask, m)?;
                outputs.push(m.clone());
            }
            println!("mask covers {} of {} pixels", result.mask.area(), result.mask.mask.len());
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            manifest.finish(&outputs, dir)?;
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            write_atomic(&dir.join(name), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
            Ok(())
        }
        Command::Generate {
            model_dir,
            prompt,
            config,
            seed,
            out_dir,
        } => {
            let cfg = cascade_config(config.as_deref())?;
            let mut manifest = RunManifest::start(command_line(), &cfg)?;
            manifest.record_models(&model_dir)?;
            manifest.seeds.insert("seed".into(), seed);
            let models = CascadeModels::load_dir(&model_dir)?;
            let gen = generate_cascade(&models, prompt, seed, &cfg)?;
            let mut outputs = Vec::new();
            for (i, img) in gen.images.iter().enumerate() {
                let p = out_dir.join(format!("gen_s{}.ppm", i + 1));
                write_image(img, &p)?;
                outputs.push(p);
            }
            finish_manifest(manifest, &outputs, &out_dir)
        }
        Command::EvalGrid {
            model_dir,
            dataset_dir,
            config,
            method,
            seed,
            out_dir,
        } => {
            let mut cfg = cascade_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.iterinv.noise_seed = s;
                cfg.generation_seed = s;
            }
            let families = match method {
                Some(Family::Ddim) => vec![GridFamily::Ddim],
                Some(Family::Iterinv) => vec![GridFamily::IterInv],
                None => vec![GridFamily::Ddim, GridFamily::IterInv],
            };
            let run = run_eval_grid(&dataset_dir, &model_dir, &families, &cfg, &out_dir, command_line())?;
            print!("{}", run.report.to_table());
            Ok(())
        }
    }
}
