//! `agm` command-line front end.
//!
//! Every option can also be given as `key = value` in a `--config` file.
//! Precedence, lowest first: built-in defaults, the config file, the
//! `AGM_SEED` environment variable, explicit flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agm_core::backbone::write_embeddings;
use agm_core::datapipe::{self, generate_synthetic, ImageSet, Layout, SynthConfig, SYNTH_KEYS};
use agm_core::ganstyle::{self, GanConfig, GanModel, GAN_KEYS};
use agm_core::harness::config::TRAIN_KEYS;
use agm_core::harness::{self, ReidCheckpoint, TrainConfig, TrainOutputs};
use agm_core::imaging::{self, GrayscaleCoeffs, Image, Modality};
use agm_core::kv::KeyValues;
use agm_core::{AgmError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agm", version, about = "Visible-infrared person re-identification in an aligned grayscale space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file overriding built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural two-modality dataset in the id_dirs layout.
    SynthData {
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long)]
        per_id: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Convert every PNG below a directory to luminance grayscale.
    Gray {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the infrared-to-grayscale translation model.
    GanTrain {
        #[arg(long)]
        gray_dir: PathBuf,
        #[arg(long)]
        ir_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Translate every infrared PNG below a directory into grayscale.
    GanApply {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the re-identification model; writes per-epoch checkpoints,
    /// `model.ckpt` and the `train.jsonl` log under `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gan_ckpt: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// rgb-ir, rgb-ir+gn, gray-ir or gray-ir+gn (alias agm).
        #[arg(long)]
        mode: Option<String>,
        /// sysu, regdb or desk.
        #[arg(long)]
        profile: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint: infrared queries against a visible gallery by
    /// default.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        query_dir: PathBuf,
        #[arg(long)]
        gallery_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write query.emb and gallery.emb with JSON sidecars here.
        #[arg(long)]
        export_dir: Option<PathBuf>,
        /// Drop gallery images from the query's camera.
        #[arg(long)]
        exclude_same_camera: bool,
        #[command(flatten)]
        common: Common,
    },
}

const GAN_TRAIN_EXTRA_KEYS: &[&str] = &["height", "width"];
const EVAL_KEYS: &[&str] = &["query_modality", "gallery_modality", "exclude_same_camera"];

/// Config file, then `AGM_SEED`, then flags, checked against `known`.
fn settings(common: &Common, known: &[&[&str]], seeded: bool, flags: &[(&str, Option<String>)]) -> Result<KeyValues> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.check_known(&known.concat())?;
    if seeded {
        if let Ok(s) = std::env::var("AGM_SEED") {
            s.trim()
                .parse::<u64>()
                .map_err(|_| AgmError::Config(format!("AGM_SEED must be an unsigned integer, got {s:?}")))?;
            kv.insert("seed", s.trim());
        }
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.insert(k, v);
        }
    }
    Ok(kv)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

/// Reads every PNG below `dir` as `modality`, paired with its path relative
/// to `dir`.
fn read_tree(dir: &Path, modality: Modality) -> Result<Vec<(PathBuf, Image)>> {
    let paths = datapipe::collect_pngs(dir)?;
    if paths.is_empty() {
        return Err(AgmError::Data(format!("no PNG images under {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let img = imaging::read_png(&p, modality, 0)?;
            let rel = p.strip_prefix(dir).expect("collected below dir").to_path_buf();
            Ok((rel, img))
        })
        .collect()
}

fn write_tree(out_dir: &Path, items: &[(PathBuf, Image)]) -> Result<()> {
    for (rel, img) in items {
        imaging::write_png(img, &out_dir.join(rel))?;
    }
    Ok(())
}

fn load_images(root: &Path) -> Result<ImageSet> {
    ImageSet::load(datapipe::load_dataset(root, Layout::detect(root), false)?)
}

/// Keeps records of `modality`, or everything for `any`.
fn restrict(set: ImageSet, modality: &str) -> Result<ImageSet> {
    if modality.trim() == "any" {
        return Ok(set);
    }
    let m: Modality = modality
        .parse()
        .map_err(|_| AgmError::Config(format!("unknown modality {modality:?}")))?;
    let picked = set.select(|r| r.modality == m);
    if picked.is_empty() {
        return Err(AgmError::Data(format!(
            "no {m} images under {}",
            set.index.root.display()
        )));
    }
    Ok(picked)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            ids,
            per_id,
            out,
            seed,
            common,
        } => {
            let kv = settings(
                &common,
                &[SYNTH_KEYS],
                true,
                &[("ids", opt(&ids)), ("per_id", opt(&per_id)), ("seed", opt(&seed))],
            )?;
            let mut cfg = SynthConfig::default();
            cfg.apply(&kv)?;
            let index = generate_synthetic(&cfg, &out)?;
            log::info!("wrote {} images to {}", index.len(), out.display());
        }
        Command::Gray { in_dir, out_dir, common } => {
            settings(&common, &[], false, &[])?;
            let coeffs = GrayscaleCoeffs::default();
            let items = read_tree(&in_dir, Modality::Visible)?
                .into_iter()
                .map(|(rel, img)| Ok((rel, imaging::to_grayscale(&img, &coeffs)?)))
                .collect::<Result<Vec<_>>>()?;
            write_tree(&out_dir, &items)?;
            log::info!("converted {} images", items.len());
        }
        Command::GanTrain {
            gray_dir,
            ir_dir,
            out,
            epochs,
            seed,
            common,
        } => {
            let kv = settings(
                &common,
                &[GAN_KEYS, GAN_TRAIN_EXTRA_KEYS],
                true,
                &[("epochs", opt(&epochs)), ("seed", opt(&seed))],
            )?;
            let mut cfg = GanConfig::default();
            cfg.apply(&kv)?;
            let h = kv.get_parsed::<usize>("height")?.unwrap_or(72);
            let w = kv.get_parsed::<usize>("width")?.unwrap_or(36);
            let load = |dir: &Path, m| -> Result<Vec<Image>> {
                read_tree(dir, m)?.iter().map(|(_, img)| imaging::resize(img, h, w)).collect()
            };
            let gray = load(&gray_dir, Modality::Grayscale)?;
            let ir = load(&ir_dir, Modality::Infrared)?;
            let run = ganstyle::train_gn(&gray, &ir, &cfg)?;
            run.model.save(&out, &cfg)?;
            log::info!("saved translation model to {}", out.display());
        }
        Command::GanApply {
            ckpt,
            in_dir,
            out_dir,
            common,
        } => {
            settings(&common, &[], false, &[])?;
            let model = GanModel::load(&ckpt)?;
            let (rels, imgs): (Vec<PathBuf>, Vec<Image>) = read_tree(&in_dir, Modality::Infrared)?.into_iter().unzip();
            let translated = ganstyle::apply_gn(&model, &imgs)?;
            write_tree(&out_dir, &rels.into_iter().zip(translated).collect::<Vec<_>>())?;
        }
        Command::Train {
            data,
            out,
            gan_ckpt,
            epochs,
            seed,
            mode,
            profile,
            common,
        } => {
            let kv = settings(
                &common,
                &[TRAIN_KEYS],
                true,
                &[
                    ("profile", profile),
                    ("gan_ckpt", gan_ckpt.map(|p| p.display().to_string())),
                    ("epochs", opt(&epochs)),
                    ("seed", opt(&seed)),
                    ("mode", mode),
                ],
            )?;
            let mut cfg = TrainConfig::default();
            cfg.apply(&kv)?;
            cfg.validate()?;
            let gn = match (&cfg.gan_checkpoint, cfg.mode.needs_gn()) {
                (Some(p), true) => Some(GanModel::load(p)?),
                (None, true) => {
                    return Err(AgmError::Config(format!("mode {} needs --gan-ckpt", cfg.mode)));
                }
                (_, false) => None,
            };
            let set = ImageSet::load(datapipe::load_dataset(&data, Layout::detect(&data), true)?)?;
            let outputs = TrainOutputs {
                checkpoint_dir: Some(out.clone()),
                log_path: Some(out.join("train.jsonl")),
            };
            let run = harness::train(&set, &cfg, gn, &outputs)?;
            run.checkpoint().save(&out.join("model.ckpt"))?;
            log::info!("trained {} epochs; model at {}", run.epochs_completed, out.join("model.ckpt").display());
        }
        Command::Eval {
            ckpt,
            query_dir,
            gallery_dir,
            out,
            export_dir,
            exclude_same_camera,
            common,
        } => {
            let kv = settings(
                &common,
                &[EVAL_KEYS],
                false,
                &[("exclude_same_camera", exclude_same_camera.then(|| "true".to_string()))],
            )?;
            let checkpoint = ReidCheckpoint::load(&ckpt)?;
            let query = restrict(
                load_images(&query_dir)?,
                kv.get("query_modality").unwrap_or("infrared"),
            )?;
            let gallery = restrict(
                load_images(&gallery_dir)?,
                kv.get("gallery_modality").unwrap_or("visible"),
            )?;
            let mask = kv
                .get_parsed::<bool>("exclude_same_camera")?
                .unwrap_or(false)
                .then(|| harness::same_camera_mask(&query, &gallery));
            let eval = harness::evaluate(&checkpoint, &query, &gallery, mask.as_ref())?;
            harness::write_metrics(&eval.report, &out)?;
            if let Some(dir) = export_dir {
                let meta = |split: &str| {
                    serde_json::json!({
                        "split": split,
                        "checkpoint": ckpt.display().to_string(),
                        "config_hash": checkpoint.config.hash(),
                    })
                };
                write_embeddings(&eval.query, &dir.join("query.emb"), &meta("query"))?;
                write_embeddings(&eval.gallery, &dir.join("gallery.emb"), &meta("gallery"))?;
            }
            println!("{}", serde_json::to_string(&eval.report).expect("metrics serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
