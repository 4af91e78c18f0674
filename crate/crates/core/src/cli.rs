//! Command-line entry point.
//!
//! Settings resolve in order: built-in defaults, `--config` file,
//! `CONTEXT_MAPS_DATA`, then flags. Exit status is 0 on success, 2 on usage
//! errors and 1 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::{RunConfig, DATA_ENV};
use crate::data::{
    load_prepared, prepare_raw_scene, save_label_png, save_rgb_png, write_prepared, Dataset, LabelRaster, LabelType,
    RgbRaster, Splits,
};
use crate::eval::{evaluate, predict_batch, render_overlay, EvalReport, Predictor};
use crate::nets::{Batch, ModelConfig, Variant};
use crate::synth::{build_bench, run_ablation, Family};
use crate::tensor::Tensor;
use crate::train::{train, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "context-maps", version, about = "Trajectory forecasting with learned per-scene context maps")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// linear, sgan, sgan-p, ours, ours-no-pooling or ours-no-labels.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated scene ids.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    scenes: Option<Vec<String>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert raw scenes (or generate synthetic ones) into windows and splits.
    Prepare {
        /// Generate this synthetic family (mirror, uniform, corridors) instead.
        #[arg(long, value_name = "FAMILY")]
        synthetic: Option<String>,
    },
    /// Train one variant on prepared scenes.
    Train,
    /// Score a checkpoint or the linear baseline on the test splits.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Run the synthetic ablation.
    Bench,
    /// Decode trained maps into images and label rasters.
    ExportMaps {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Draw observed, true and predicted test trajectories on the reference images.
    Plot {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Samples drawn per scene.
        #[arg(long, default_value_t = 12)]
        samples: usize,
    },
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(root) = std::env::var_os(DATA_ENV) {
        cfg.data_root = PathBuf::from(root);
    }
    if let Some(v) = &common.variant {
        v.parse::<Variant>()?;
        cfg.variant = v.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = &common.scenes {
        cfg.scenes = s.iter().filter(|x| !x.is_empty()).cloned().collect();
    }
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            1
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Prepare { synthetic } => {
            if synthetic.is_some() {
                cfg.synthetic = synthetic;
            }
            prepare(&cfg)
        }
        Command::Train => train_cmd(&cfg),
        Command::Eval { checkpoint } => {
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            eval_cmd(&cfg)
        }
        Command::Bench => bench(&cfg),
        Command::ExportMaps { checkpoint } => {
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            export_maps(&cfg)
        }
        Command::Plot { checkpoint, samples } => {
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            plot(&cfg, samples)
        }
    }
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<()> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let scenes = if let Some(family) = &cfg.synthetic {
        let family: Family = family.parse()?;
        let data = build_bench(family, &cfg.bench_config(), cfg.seed)?;
        data.prepared_scenes()
    } else {
        let root = &cfg.data_root;
        let names = if cfg.scenes.is_empty() {
            let mut v: Vec<String> = fs::read_dir(root)
                .with_context(|| format!("reading {}", root.display()))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().to_str().map(String::from))
                .collect();
            v.sort();
            v
        } else {
            cfg.scenes.clone()
        };
        if names.is_empty() {
            bail!("no scene directories under {}", root.display());
        }
        names
            .iter()
            .map(|n| prepare_raw_scene(&root.join(n), n, &cfg.prepare_options()).with_context(|| format!("scene {n}")))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    for s in &scenes {
        write_prepared(out, s)?;
        let count = |g: &[crate::data::WindowGroup]| Splits::flatten(g).len();
        println!(
            "prepared scene={} detections={} train={} val={} test={}",
            s.assets.scene_id,
            s.detections.len(),
            count(&s.splits.train),
            count(&s.splits.val),
            count(&s.splits.test)
        );
    }
    cfg.write_resolved(out)?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    load_prepared(&cfg.data_root, &cfg.scenes).with_context(|| format!("loading prepared data from {}", cfg.data_root.display()))
}

fn train_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let variant = cfg.variant()?;
    if !variant.is_learned() {
        bail!("the linear baseline has nothing to train");
    }
    let data = load_data(cfg)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let outcome = train(
        cfg.model_config()?,
        cfg.train_config()?,
        &data.splits.train,
        &data.splits.val,
        &data.assets,
        Some(&cfg.out_dir),
    )?;
    println!(
        "trained variant={} best_epoch={} val_ade={} val_fde={} checkpoint={}",
        variant,
        outcome.best.epoch,
        outcome.best.val_ade,
        outcome.best.val_fde,
        cfg.out_dir.join("best.cmar").display()
    );
    Ok(())
}

/// The variant whose switches match a trained model.
fn variant_of(cfg: &ModelConfig) -> Option<Variant> {
    Variant::ALL.into_iter().filter(|v| v.is_learned()).find(|v| {
        let a = v.apply(cfg.clone());
        a.use_maps == cfg.use_maps && a.pooling == cfg.pooling && a.use_labels == cfg.use_labels
    })
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = cfg.checkpoint_path();
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let trained = variant_of(&ckpt.model.cfg);
    let wanted = cfg.variant()?;
    if trained != Some(wanted) {
        bail!(
            "checkpoint {} was trained as {}, not {wanted}",
            path.display(),
            trained.map_or("an unknown variant", |v| v.name())
        );
    }
    Ok(ckpt)
}

fn eval_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = load_data(cfg)?;
    let variant = cfg.variant()?;
    let report: EvalReport = if variant.is_learned() {
        let ckpt = load_checkpoint(cfg)?;
        let predictor = Predictor::Learned { model: &ckpt.model, maps: &ckpt.maps };
        evaluate(predictor, variant.name(), &data.splits.test, cfg.batch_size, cfg.eval_seed)?
    } else {
        evaluate(Predictor::Kalman(cfg.kalman_config()), variant.name(), &data.splits.test, cfg.batch_size, cfg.eval_seed)?
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("report-{}.txt", variant.name()));
    report.write(&path)?;
    cfg.write_resolved(&cfg.out_dir)?;
    print!("{}", report.to_table());
    println!("report={}", path.display());
    Ok(())
}

fn bench(cfg: &RunConfig) -> anyhow::Result<()> {
    let family: Family = cfg.bench_family.parse()?;
    let variants = cfg
        .bench_variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<crate::Result<Vec<_>>>()?;
    let data = build_bench(family, &cfg.bench_config(), cfg.seed)?;
    let data_dir = cfg.out_dir.join("data");
    for s in data.prepared_scenes() {
        write_prepared(&data_dir, &s)?;
    }
    let report = run_ablation(&data, &variants, &cfg.model_config()?, &cfg.train_config()?, family)?;
    for row in &report.rows {
        row.report.write(&cfg.out_dir.join(format!("report-{}.txt", row.variant.name())))?;
    }
    let table = report.to_table();
    fs::write(cfg.out_dir.join("ablation.txt"), &table)?;
    cfg.write_resolved(&cfg.out_dir)?;
    print!("{table}");
    Ok(())
}

fn to_rgb(t: &Tensor, h: usize, w: usize) -> RgbRaster {
    let data = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbRaster::new(h, w, data).expect("decoded image")
}

fn export_maps(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(cfg)?;
    if !ckpt.model.cfg.use_maps {
        bail!("variant {} has no maps", cfg.variant);
    }
    let codecs = &ckpt.model.codecs;
    for (id, map) in &ckpt.maps.maps {
        if !cfg.scenes.is_empty() && !cfg.scenes.contains(id) {
            continue;
        }
        let dir = cfg.out_dir.join("maps").join(id);
        fs::create_dir_all(&dir)?;
        let (h, w, f) = (map.height(), map.width(), map.f_map());
        let g = Graph::new();
        let p = codecs.params.bind(&g, false);
        let input = g.constant(map.tensor.clone().reshape(&[1, h, w, f])?);
        save_rgb_png(&dir.join("image.png"), &to_rgb(&codecs.decode_image(&p, input).value(), h, w))?;
        let scores = codecs.decode_labels(&p, input).value();
        for (k, ty) in LabelType::ALL.iter().enumerate() {
            let values = (0..h * w).map(|i| if scores.data()[i * 2 + k] > 0.0 { 1 } else { -1 }).collect();
            save_label_png(&dir.join(format!("{}.png", ty.name())), &LabelRaster::new(h, w, values)?)?;
        }
        for c in 0..f {
            let vals: Vec<f64> = (0..h * w).map(|i| map.tensor.data()[i * f + c]).collect();
            let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let gray: Vec<u8> = vals
                .iter()
                .flat_map(|v| {
                    let g = ((v - lo) / span * 255.0).round() as u8;
                    [g, g, g]
                })
                .collect();
            save_rgb_png(&dir.join(format!("channel{c}.png")), &RgbRaster::new(h, w, gray)?)?;
        }
        println!("exported scene={id} dir={}", dir.display());
    }
    Ok(())
}

fn plot(cfg: &RunConfig, per_scene: usize) -> anyhow::Result<()> {
    let data = load_data(cfg)?;
    let variant = cfg.variant()?;
    let ckpt = if variant.is_learned() { Some(load_checkpoint(cfg)?) } else { None };
    let dir = cfg.out_dir.join("plots");
    fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    for assets in &data.assets {
        let mut groups = Vec::new();
        let mut count = 0;
        for g in data.splits.test.iter().filter(|g| g.scene_id == assets.scene_id) {
            if count >= per_scene {
                break;
            }
            count += g.samples.len();
            groups.push(g);
        }
        if groups.is_empty() {
            continue;
        }
        let batch = Batch::from_groups(groups)?;
        let pred = match &ckpt {
            Some(c) => predict_batch(&c.model, &c.maps, &batch, &mut rng)?,
            None => crate::eval::kalman_batch(&batch, &cfg.kalman_config())?,
        };
        let samples = &batch.samples[..per_scene.min(batch.len())];
        let p = batch.pred_len();
        let tracks: Vec<Vec<[f64; 2]>> = pred.data().chunks(2 * p).map(|r| r.chunks(2).map(|c| [c[0], c[1]]).collect()).collect();
        let longest = assets.height().max(assets.width()).max(1);
        let scale = (512 / longest).max(1) as u32;
        let img = render_overlay(&assets.reference_image, samples, &tracks, scale);
        let path = dir.join(format!("{}-{}.png", assets.scene_id, variant.name()));
        img.save(&path)?;
        println!("plotted scene={} file={}", assets.scene_id, path.display());
    }
    Ok(())
}

/// Path of the snapshot a run writes into `dir`.
pub fn resolved_config_path(dir: &Path) -> PathBuf {
    dir.join(crate::config::RESOLVED_NAME)
}
