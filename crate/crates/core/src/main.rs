//! `gaitlu` command-line entry point.
//!
//! Every subcommand resolves a [`RunConfig`] from an optional TOML file plus
//! flags, writes it into the output directory, and exits with 0 on success,
//! 2 on configuration errors, 3 on data errors and 4 on numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gaitlu::config::RunConfig;
use gaitlu::dataio::{load_dataset, save_dataset, DatasetManifest, GaitSample, Provenance};
use gaitlu::error::{Error, Result};
use gaitlu::eval::{rank1_matrix, report, report_table, EvalProtocol};
use gaitlu::geometry::CameraRig;
use gaitlu::hgc::adjacency_set;
use gaitlu::lugan::{evaluate_generation, load_lugan, lugan_log_csv, save_lugan, train_lugan, LuganViews};
use gaitlu::plot::{plot_adjacency, plot_curves, plot_pose_strip};
use gaitlu::recognizer::{
    load_recognizer, read_train_log, save_recognizer, train_log_csv, train_recognizer, OracleViews, ViewMode, ViewSource,
};
use gaitlu::skeleton::{canonical_hypergraphs, SkeletonTopology};
use gaitlu::synth::make_dataset;

#[derive(Parser)]
#[command(name = "gaitlu", version, about = "Complete-view pose-based gait recognition pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $GAITLU_OUT/<subcommand> or ./out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rig preset: casia-like, ou-like, acceptance or cocentered-<k>.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Default output root.
    #[arg(long, env = "GAITLU_OUT", global = true, hide_env_values = true)]
    out_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Views {
    None,
    Oracle,
    Lugan,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Curves,
    Adjacency,
    Poses,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view gait dataset.
    Synth {
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        runs: Option<u32>,
    },
    /// Train the cross-view pose generator on the training identities.
    TrainLugan {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Add generated sequences for every rig view missing from each record.
    GenViews {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        lugan: Option<PathBuf>,
        /// Target the views of the rig stored in the checkpoint instead of the dataset's rig.
        #[arg(long)]
        rig_from_checkpoint: bool,
    },
    /// Train the recognizer on the training identities.
    TrainRecognizer {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        views: Option<Views>,
        #[arg(long)]
        lugan: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rank-1 evaluation on the held-out identities.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        recognizer: Option<PathBuf>,
        #[arg(long, value_enum)]
        views: Option<Views>,
        #[arg(long)]
        lugan: Option<PathBuf>,
    },
    /// Write SVG figures.
    Plot {
        #[arg(value_enum)]
        kind: PlotKind,
        /// Training log (curves) or dataset (poses).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Record key `<identity>_v<view>` for pose strips, e.g. id003_v90.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long, default_value_t = 6)]
        frames: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainLugan { .. } => "train-lugan",
            Command::GenViews { .. } => "gen-views",
            Command::TrainRecognizer { .. } => "train-recognizer",
            Command::Eval { .. } => "eval",
            Command::Plot { .. } => "plot",
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("no {what} given (flag or [paths] in the config)")))
}

fn rig_of(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<CameraRig> {
    match &manifest.rig {
        Some(r) => Ok(r.clone()),
        None => cfg.synth.rig(),
    }
}

fn view_source(mode: ViewMode, rig: &CameraRig, lugan: Option<&Path>) -> Result<Option<Box<dyn ViewSource>>> {
    Ok(match mode {
        ViewMode::None => None,
        ViewMode::Oracle => Some(Box::new(OracleViews::new(rig.clone())?)),
        ViewMode::Lugan => {
            let path = lugan.ok_or_else(|| Error::Config("--views lugan needs a generator checkpoint (--lugan)".into()))?;
            Some(Box::new(LuganViews { model: load_lugan(path)?.0 }))
        }
    })
}

/// Source-branch-only recognizers never call the view source.
struct NoViews;

impl ViewSource for NoViews {
    fn generate(&self, _: &GaitSample, _: &[f64]) -> Result<Vec<gaitlu::skeleton::PoseSequence>> {
        Err(Error::Config("no view source configured".into()))
    }
}

fn to_mode(v: Views) -> ViewMode {
    match v {
        Views::None => ViewMode::None,
        Views::Oracle => ViewMode::Oracle,
        Views::Lugan => ViewMode::Lugan,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.common.preset {
        cfg.synth.preset = p.clone();
    }
    let out = match &cli.common.out {
        Some(o) => o.clone(),
        None => cli.common.out_root.clone().unwrap_or_else(|| PathBuf::from("out")).join(cli.command.name()),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    match cli.command {
        Command::Synth { ids, frames, runs } => {
            if let Some(v) = ids {
                cfg.synth.identities = v;
            }
            if let Some(v) = frames {
                cfg.synth.frames = v;
            }
            if let Some(v) = runs {
                cfg.synth.runs = v;
            }
            let path = out.join("dataset.jsonl");
            cfg.paths.dataset = Some(path.clone());
            cfg.save_resolved(&out)?;
            let m = make_dataset(&cfg.synth.spec(cfg.seed)?, &path)?;
            println!("wrote {} records ({} identities, {} views) to {}", m.record_count, m.identity_count, m.view_list.len(), path.display());
        }
        Command::TrainLugan { dataset, epochs } => {
            let dataset = required(dataset.or(cfg.paths.dataset.clone()), "dataset")?;
            if let Some(e) = epochs {
                cfg.lugan_train.epochs = e;
            }
            cfg.paths.dataset = Some(dataset.clone());
            let ckpt = out.join("lugan.json");
            cfg.paths.lugan_checkpoint = Some(ckpt.clone());
            cfg.save_resolved(&out)?;
            let (records, manifest) = load_dataset(&dataset)?;
            let rig = rig_of(&manifest, &cfg)?;
            let (train, held_out) = cfg.split.split(&records)?;
            let (model, log) = train_lugan(&train, &rig.yaws(), &cfg.lugan, &cfg.lugan_train, cfg.seed)?;
            save_lugan(&model, &rig, cfg.seed, &ckpt)?;
            write(&out.join("lugan_log.csv"), &lugan_log_csv(&log))?;
            let rep = evaluate_generation(&model, &held_out, &rig.yaws(), 0, cfg.seed);
            match rep {
                Ok(r) => {
                    write(&out.join("generation.json"), &serde_json::to_string_pretty(&r).expect("report serializes"))?;
                    println!(
                        "held-out MPJPE generated {:.3} vs identity {:.3} (ratio {:.3}, {} pairs)",
                        r.mpjpe_generated,
                        r.mpjpe_identity,
                        r.ratio(),
                        r.pairs
                    );
                }
                Err(Error::Config(m)) => println!("generation quality not evaluated: {m}"),
                Err(e) => return Err(e),
            }
            println!("wrote {}", ckpt.display());
        }
        Command::GenViews { dataset, lugan, rig_from_checkpoint } => {
            let dataset = required(dataset.or(cfg.paths.dataset.clone()), "dataset")?;
            let lugan = required(lugan.or(cfg.paths.lugan_checkpoint.clone()), "generator checkpoint")?;
            cfg.paths.dataset = Some(dataset.clone());
            cfg.paths.lugan_checkpoint = Some(lugan.clone());
            cfg.save_resolved(&out)?;
            let (records, manifest) = load_dataset(&dataset)?;
            let (model, ck_rig, _) = load_lugan(&lugan)?;
            let targets = if rig_from_checkpoint { ck_rig.yaws() } else { rig_of(&manifest, &cfg)?.yaws() };
            let mut outputs = Vec::with_capacity(records.len() * targets.len());
            for r in &records {
                outputs.push(r.clone());
                for &v in targets.iter().filter(|&&v| v != r.view_degrees) {
                    let (seq, _) = model.generate_pose(&r.sequence, v)?;
                    outputs.push(GaitSample {
                        view_degrees: v,
                        sequence: seq,
                        provenance: Some(Provenance { source_view: r.view_degrees, target_view: v }),
                        ..r.clone()
                    });
                }
            }
            let path = out.join("augmented.jsonl");
            let m = save_dataset(&outputs, &path, Some(DatasetManifest { rig: None, ..manifest }))?;
            println!("wrote {} records ({} generated) to {}", m.record_count, outputs.len() - records.len(), path.display());
        }
        Command::TrainRecognizer { dataset, views, lugan, epochs } => {
            let dataset = required(dataset.or(cfg.paths.dataset.clone()), "dataset")?;
            if let Some(v) = views {
                cfg.views = to_mode(v);
            }
            if let Some(e) = epochs {
                cfg.recognizer_train.epochs = e;
            }
            if lugan.is_some() {
                cfg.paths.lugan_checkpoint = lugan;
            }
            cfg.paths.dataset = Some(dataset.clone());
            let (records, manifest) = load_dataset(&dataset)?;
            let rig = rig_of(&manifest, &cfg)?;
            cfg.recognizer.view_list = if cfg.views == ViewMode::None { Vec::new() } else { rig.yaws() };
            let ckpt = out.join("recognizer.json");
            cfg.paths.recognizer_checkpoint = Some(ckpt.clone());
            cfg.save_resolved(&out)?;
            let source = view_source(cfg.views, &rig, cfg.paths.lugan_checkpoint.as_deref())?;
            let views: &dyn ViewSource = source.as_deref().unwrap_or(&NoViews);
            let (train, held_out) = cfg.split.split(&records)?;
            let hypergraphs = canonical_hypergraphs(&SkeletonTopology::coco17())?.to_vec();
            let (model, log) = train_recognizer(
                &train,
                Some((&held_out, &rig.yaws())),
                views,
                &cfg.recognizer,
                &cfg.recognizer_train,
                hypergraphs,
                cfg.seed,
            )?;
            save_recognizer(&model, cfg.seed, &ckpt)?;
            write(&out.join("train_log.csv"), &train_log_csv(&log))?;
            if let Some(last) = log.last() {
                println!("final held-out rank-1 {:.1}%", 100.0 * last.val_rank1);
            }
            println!("wrote {}", ckpt.display());
        }
        Command::Eval { dataset, recognizer, views, lugan } => {
            let dataset = required(dataset.or(cfg.paths.dataset.clone()), "dataset")?;
            let ckpt = required(recognizer.or(cfg.paths.recognizer_checkpoint.clone()), "recognizer checkpoint")?;
            if let Some(v) = views {
                cfg.views = to_mode(v);
            }
            if lugan.is_some() {
                cfg.paths.lugan_checkpoint = lugan;
            }
            let (model, _) = load_recognizer(&ckpt)?;
            if model.config.has_generative_branch() && cfg.views == ViewMode::None {
                return Err(Error::Config("this recognizer has a generative branch; pass --views oracle or lugan".into()));
            }
            cfg.paths.dataset = Some(dataset.clone());
            cfg.paths.recognizer_checkpoint = Some(ckpt);
            cfg.recognizer = model.config.clone();
            cfg.save_resolved(&out)?;
            let (records, manifest) = load_dataset(&dataset)?;
            let rig = rig_of(&manifest, &cfg)?;
            let source = view_source(cfg.views, &rig, cfg.paths.lugan_checkpoint.as_deref())?;
            let views: &dyn ViewSource = source.as_deref().unwrap_or(&NoViews);
            let (_, held_out) = cfg.split.split(&records)?;
            let embs = held_out.iter().map(|r| model.embed(r, views)).collect::<Result<Vec<_>>>()?;
            let mut proto = EvalProtocol::synthetic(rig.yaws());
            proto.same_view_policy = cfg.protocol.same_view_policy;
            let rep = rank1_matrix(&embs, &proto)?;
            report(&rep, &out.join("report.csv"))?;
            print!("{}", report_table(&rep));
        }
        Command::Plot { kind, input, sample, frames } => {
            cfg.save_resolved(&out)?;
            let files = match kind {
                PlotKind::Curves => {
                    let input = required(input, "training log (--input)")?;
                    plot_curves(&read_train_log(&input)?, &out)?
                }
                PlotKind::Adjacency => {
                    let adj = adjacency_set(&canonical_hypergraphs(&SkeletonTopology::coco17())?)?;
                    plot_adjacency(&adj, &out)?
                }
                PlotKind::Poses => {
                    let input = required(input.or(cfg.paths.dataset.clone()), "dataset (--input)")?;
                    let key = required(sample.map(PathBuf::from), "sample key (--sample)")?;
                    let key = key.to_string_lossy().to_string();
                    let (records, _) = load_dataset(&input)?;
                    let r = records
                        .iter()
                        .find(|r| format!("{}_v{}", r.identity, r.view_degrees) == key)
                        .ok_or_else(|| Error::Config(format!("no record matches {key:?}")))?;
                    let path = out.join(format!("poses_{key}.svg"));
                    plot_pose_strip(&r.sequence, frames, &key, &path)?;
                    vec![path]
                }
            };
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
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
