//! Executes a [`RunConfig`]: builds the model, prior and data, dispatches
//! to an engine and writes artifacts into `out_dir/<run_id>`.
//!
//! Outputs are staged in a hidden sibling directory and renamed into place
//! once complete. A failed run's staging directory is moved under
//! `out_dir/.quarantine/`, so the final directory either holds a complete
//! run or does not exist.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde_json::json;

use crate::blackbox::{
    build_inverter_with, collect_queries_with_text, run_inverter_batch, run_inverter_with_text, train_inverter,
    train_inverter_with_text, InverterOptions, QueryDataset, TrainedInverter,
};
use crate::config::{AttackVariant, DataSource, FrameCoupling, RunConfig};
use crate::data::{synthetic_dataset, translated_sequences, LabeledImage};
use crate::defense::{tradeoff_csv, tradeoff_sweep, SweepSpec};
use crate::error::{Error, IoContext, Result};
use crate::image::{image_grid, Image};
use crate::io::write_atomic;
use crate::manifest::{deterministic_requested, scan_artifacts, RunManifest, RunStatus};
use crate::metrics::{evaluate, MetricsReport, ModelClassifier};
use crate::priors::{embed_text, load_prior, text_encoder_for, GenerativePrior, TextEmbedding};
use crate::splitnet::{split, zoo, SplitModel, TargetModel};
use crate::whitebox::{invert_batch, invert_multiframe, AttackResult, AttackStatus, FrameGroup};

/// What a single invocation does.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    /// The engine selected by `attack.variant`.
    Attack,
    BlackboxCollect,
    BlackboxTrain,
    BlackboxRun,
    Defend,
}

impl Command {
    pub fn name(self, cfg: &RunConfig) -> &'static str {
        match self {
            Command::Attack => match cfg.attack.variant {
                AttackVariant::Whitebox => "whitebox",
                AttackVariant::WhiteboxText => "whitebox-text",
                AttackVariant::Multiframe => "multiframe",
                AttackVariant::Blackbox => "blackbox",
            },
            Command::BlackboxCollect => "blackbox-collect",
            Command::BlackboxTrain => "blackbox-train",
            Command::BlackboxRun => "blackbox-run",
            Command::Defend => "defend",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

/// Run the engine chosen by `cfg.attack.variant`.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    run_command(cfg, Command::Attack)
}

pub fn run_command(cfg: &RunConfig, command: Command) -> Result<RunOutcome> {
    cfg.validate()?;
    let name = command.name(cfg);
    let hash = cfg.hash();
    let run_id = cfg.run_id.clone().unwrap_or_else(|| format!("{name}-{}", &hash[..12]));
    let final_dir = cfg.out_dir.join(&run_id);
    if final_dir.exists() {
        return Err(Error::input(format!(
            "output directory {} already exists",
            final_dir.display()
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir).at(&cfg.out_dir)?;
    let staging = cfg.out_dir.join(format!(".{run_id}.partial-{}", std::process::id()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).at(&staging)?;
    }
    std::fs::create_dir_all(&staging).at(&staging)?;

    let mut rec = Recorder::default();
    let result = execute(cfg, command, &staging, &mut rec);
    match result {
        Ok(()) => {
            let artifacts = scan_artifacts(&staging)?;
            let manifest = RunManifest {
                toolkit_version: crate::manifest::TOOLKIT_VERSION.to_string(),
                command: name.to_string(),
                run_id: run_id.clone(),
                config_hash: hash,
                config: cfg.clone(),
                seeds: rec.seeds,
                deterministic: deterministic_requested(),
                timing_seconds: rec.timing,
                status: if rec.aborted { RunStatus::Aborted } else { RunStatus::Completed },
                artifacts,
                details: serde_json::Value::Object(rec.details),
            };
            manifest.save(&staging.join("manifest.json"))?;
            std::fs::rename(&staging, &final_dir).at(&final_dir)?;
            Ok(RunOutcome {
                dir: final_dir,
                manifest,
            })
        }
        Err(e) => {
            let q = cfg.out_dir.join(".quarantine");
            let _ = std::fs::create_dir_all(&q);
            let _ = std::fs::rename(&staging, q.join(format!("{run_id}-{}", std::process::id())));
            Err(e)
        }
    }
}

/// Re-execute the run a manifest describes into `out_dir` and list the
/// artifacts whose checksums differ.
pub fn replay(manifest: &RunManifest, out_dir: &Path) -> Result<(RunOutcome, Vec<String>)> {
    let mut cfg = manifest.config.clone();
    cfg.out_dir = out_dir.to_path_buf();
    cfg.run_id = Some(manifest.run_id.clone());
    let command = match manifest.command.as_str() {
        "blackbox-collect" => Command::BlackboxCollect,
        "blackbox-train" => Command::BlackboxTrain,
        "blackbox-run" => Command::BlackboxRun,
        "defend" => Command::Defend,
        _ => Command::Attack,
    };
    let outcome = run_command(&cfg, command)?;
    let diff = manifest.checksum_differences(&outcome.manifest);
    Ok((outcome, diff))
}

#[derive(Default)]
struct Recorder {
    seeds: BTreeMap<String, u64>,
    timing: BTreeMap<String, f64>,
    details: serde_json::Map<String, serde_json::Value>,
    aborted: bool,
}

impl Recorder {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        *self.timing.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64();
        Ok(out)
    }
}

pub fn load_split_model(cfg: &RunConfig) -> Result<SplitModel> {
    let model = zoo::load_model(&cfg.model.name, cfg.model.weights_path.as_deref())?;
    split(Arc::new(model), cfg.model.split_index)
}

pub fn load_run_prior(cfg: &RunConfig, sm: &SplitModel) -> Result<Arc<dyn GenerativePrior>> {
    load_prior(&cfg.prior.spec(), sm.input_shape())
}

/// PNG files of a directory in file-name order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, Image::load_png(&p)?))
        })
        .collect()
}

/// Attack targets. Directory images get the clean prediction as label.
pub fn load_targets(cfg: &RunConfig, sm: &SplitModel) -> Result<Vec<LabeledImage>> {
    match cfg.data.source {
        DataSource::Synthetic => Ok(synthetic_dataset(cfg.data.count, cfg.data.seed)),
        DataSource::Directory => {
            let dir = cfg.data.images_dir.as_deref().expect("validated");
            let mut imgs = load_image_dir(dir)?;
            if imgs.is_empty() {
                return Err(Error::input(format!("no PNG images in {}", dir.display())));
            }
            imgs.truncate(cfg.data.count);
            let images: Vec<Image> = imgs.into_iter().map(|(_, im)| im).collect();
            let labels = sm.base().predict(&images)?;
            Ok(images
                .into_iter()
                .zip(labels)
                .map(|(image, label)| LabeledImage {
                    image,
                    label,
                    caption: String::new(),
                })
                .collect())
        }
    }
}

fn target_groups(cfg: &RunConfig, sm: &SplitModel) -> Result<Vec<Vec<LabeledImage>>> {
    let k = cfg.data.frames;
    match cfg.data.source {
        DataSource::Synthetic => Ok(translated_sequences(cfg.data.count, k, cfg.data.shift, cfg.data.seed)),
        DataSource::Directory => {
            let mut c = cfg.clone();
            c.data.count = cfg.data.count * k;
            let flat = load_targets(&c, sm)?;
            if flat.len() % k != 0 {
                return Err(Error::input(format!("{} images do not form groups of {k}", flat.len())));
            }
            Ok(flat.chunks(k).map(<[LabeledImage]>::to_vec).collect())
        }
    }
}

fn classifier_model(cfg: &RunConfig) -> Result<TargetModel> {
    zoo::load_model(&cfg.metrics.classifier, cfg.metrics.classifier_weights.as_deref())
}

fn id(i: usize) -> String {
    format!("{i:04}")
}

fn write_images(dir: &Path, prefix: &str, images: &[Image]) -> Result<()> {
    for (i, im) in images.iter().enumerate() {
        im.save_png(&dir.join(format!("{prefix}_{}.png", id(i))))?;
    }
    Ok(())
}

fn write_metrics(dir: &Path, cfg: &RunConfig, originals: &[Image], recons: &[Image]) -> Result<MetricsReport> {
    let model = classifier_model(cfg)?;
    let clf = ModelClassifier { model: &model };
    let o: Vec<(String, Image)> = originals.iter().enumerate().map(|(i, x)| (id(i), x.clone())).collect();
    let r: Vec<(String, Image)> = recons.iter().enumerate().map(|(i, x)| (id(i), x.clone())).collect();
    let report = evaluate(&o, &r, Some(&clf))?;
    report.save(&dir.join("metrics.json"))?;
    Ok(report)
}

fn loss_trace_csv(results: &[(usize, usize, &AttackResult)]) -> String {
    let mut s = String::from("image,group,frame,iteration,total,reconstruction,tv,negentropy,temporal\n");
    for (i, (g, f, r)) in results.iter().enumerate() {
        for (it, b) in r.loss_trace.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{g},{f},{it},{},{},{},{},{}",
                id(i),
                b.total,
                b.reconstruction,
                b.tv,
                b.negentropy,
                b.temporal
            );
        }
    }
    s
}

fn prompt(cfg: &RunConfig, prior: &dyn GenerativePrior) -> Result<Option<TextEmbedding>> {
    match &cfg.attack.text {
        Some(t) => Ok(Some(embed_text(text_encoder_for(prior).as_ref(), t)?)),
        None => Ok(None),
    }
}

fn execute(cfg: &RunConfig, command: Command, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let sm = rec.time("load model", || load_split_model(cfg))?;
    match command {
        Command::Attack => match cfg.attack.variant {
            AttackVariant::Whitebox | AttackVariant::WhiteboxText => whitebox(cfg, &sm, dir, rec),
            AttackVariant::Multiframe => multiframe(cfg, &sm, dir, rec),
            AttackVariant::Blackbox => {
                let ds = bb_collect(cfg, &sm, dir, rec)?;
                let prior = rec.time("load prior", || load_run_prior(cfg, &sm))?;
                let inv = bb_train(cfg, &ds, prior.as_ref(), dir, rec)?;
                bb_run(cfg, &sm, &inv, prior.as_ref(), dir, rec)
            }
        },
        Command::BlackboxCollect => bb_collect(cfg, &sm, dir, rec).map(|_| ()),
        Command::BlackboxTrain => {
            let path = cfg
                .blackbox
                .dataset_dir
                .as_deref()
                .ok_or_else(|| Error::config("blackbox.dataset_dir", "required to train an inverter"))?;
            let ds = rec.time("load queries", || QueryDataset::load(path))?;
            if ds.split != sm.descriptor() {
                return Err(Error::input(format!(
                    "query dataset was collected at {:?}, config selects {:?}",
                    ds.split,
                    sm.descriptor()
                )));
            }
            let prior = rec.time("load prior", || load_run_prior(cfg, &sm))?;
            bb_train(cfg, &ds, prior.as_ref(), dir, rec).map(|_| ())
        }
        Command::BlackboxRun => {
            let path = cfg
                .blackbox
                .inverter_path
                .as_deref()
                .ok_or_else(|| Error::config("blackbox.inverter_path", "required to run an inverter"))?;
            let inv = rec.time("load inverter", || TrainedInverter::load(path))?;
            let prior = rec.time("load prior", || load_run_prior(cfg, &sm))?;
            bb_run(cfg, &sm, &inv, prior.as_ref(), dir, rec)
        }
        Command::Defend => defend(cfg, &sm, dir, rec),
    }
}

fn record_attacks(rec: &mut Recorder, results: &[AttackResult]) {
    rec.aborted |= results.iter().any(|r| matches!(r.manifest.status, AttackStatus::Aborted { .. }));
    let list: Vec<serde_json::Value> = results.iter().map(|r| json!(r.manifest)).collect();
    rec.details.insert("attacks".into(), json!(list));
}

fn whitebox(cfg: &RunConfig, sm: &SplitModel, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let inv_cfg = cfg.attack.inversion(cfg.seed);
    rec.seeds.insert("attack".into(), inv_cfg.seed);
    rec.seeds.insert("data".into(), cfg.data.seed);
    let prior = rec.time("load prior", || load_run_prior(cfg, sm))?;
    let text = prompt(cfg, prior.as_ref())?;
    if cfg.attack.variant == AttackVariant::WhiteboxText && text.is_none() {
        return Err(Error::config("attack.text", "the whitebox-text variant needs a prompt"));
    }
    let targets = rec.time("load data", || load_targets(cfg, sm))?;
    let originals: Vec<Image> = targets.into_iter().map(|t| t.image).collect();
    let zs = sm.extract_batch(&originals)?;
    let results = rec.time("invert", || invert_batch(sm, &zs, prior.as_ref(), text.as_ref(), &inv_cfg))?;
    let recons: Vec<Image> = results.iter().map(|r| r.image.clone()).collect();
    write_images(dir, "original", &originals)?;
    write_images(dir, "recon", &recons)?;
    let rows: Vec<(usize, usize, &AttackResult)> = results.iter().enumerate().map(|(i, r)| (i, 0, r)).collect();
    write_atomic(&dir.join("loss_trace.csv"), loss_trace_csv(&rows).as_bytes())?;
    rec.time("metrics", || write_metrics(dir, cfg, &originals, &recons))?;
    record_attacks(rec, &results);
    Ok(())
}

fn multiframe(cfg: &RunConfig, sm: &SplitModel, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let inv_cfg = cfg.attack.inversion(cfg.seed);
    rec.seeds.insert("attack".into(), inv_cfg.seed);
    rec.seeds.insert("data".into(), cfg.data.seed);
    let prior = rec.time("load prior", || load_run_prior(cfg, sm))?;
    let groups = rec.time("load data", || target_groups(cfg, sm))?;
    let mut originals = Vec::new();
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let imgs: Vec<Image> = group.iter().map(|t| t.image.clone()).collect();
        let zs = sm.extract_batch(&imgs)?;
        let out = rec.time("invert", || match cfg.attack.coupling {
            FrameCoupling::Joint => invert_multiframe(sm, &FrameGroup::new(zs)?, prior.as_ref(), &inv_cfg),
            FrameCoupling::Independent => invert_batch(sm, &zs, prior.as_ref(), None, &inv_cfg),
        })?;
        for f in 0..out.len() {
            rows.push((g, f));
        }
        originals.extend(imgs);
        results.extend(out);
    }
    let recons: Vec<Image> = results.iter().map(|r| r.image.clone()).collect();
    write_images(dir, "original", &originals)?;
    write_images(dir, "recon", &recons)?;
    let trace: Vec<(usize, usize, &AttackResult)> = rows.iter().zip(&results).map(|(&(g, f), r)| (g, f, r)).collect();
    write_atomic(&dir.join("loss_trace.csv"), loss_trace_csv(&trace).as_bytes())?;
    rec.time("metrics", || write_metrics(dir, cfg, &originals, &recons))?;
    record_attacks(rec, &results);
    Ok(())
}

fn bb_collect(cfg: &RunConfig, sm: &SplitModel, dir: &Path, rec: &mut Recorder) -> Result<QueryDataset> {
    rec.seeds.insert("queries".into(), cfg.blackbox.query_seed);
    let ds = rec.time("collect queries", || {
        let data = synthetic_dataset(cfg.blackbox.queries, cfg.blackbox.query_seed);
        let images: Vec<Image> = data.iter().map(|d| d.image.clone()).collect();
        let captions: Vec<String> = data.into_iter().map(|d| d.caption).collect();
        collect_queries_with_text(sm, &images, Some(&captions))
    })?;
    ds.save(&dir.join("queries"))?;
    Ok(ds)
}

fn bb_train(
    cfg: &RunConfig,
    ds: &QueryDataset,
    prior: &dyn GenerativePrior,
    dir: &Path,
    rec: &mut Recorder,
) -> Result<TrainedInverter> {
    rec.seeds.insert("training".into(), cfg.blackbox.train.seed);
    let opts = InverterOptions {
        fusion: cfg.blackbox.fusion,
        normalize_output: prior.expects_normalized_latent(),
        width: cfg.blackbox.width,
        unet_depth: None,
    };
    let spec = rec.time("build inverter", || {
        build_inverter_with(ds.feature_shape(), prior.latent_shape(), 1, cfg.blackbox.param_budget, &opts)
    })?;
    let with_text = cfg.attack.text.is_some();
    let inv = rec.time("train inverter", || {
        if with_text {
            train_inverter_with_text(ds, &spec, prior, &cfg.blackbox.train)
        } else {
            train_inverter(ds, &spec, prior, &cfg.blackbox.train)
        }
    })?;
    inv.save(&dir.join("inverter.finv"))?;
    rec.details.insert("training".into(), json!(inv.manifest));
    Ok(inv)
}

fn bb_run(
    cfg: &RunConfig,
    sm: &SplitModel,
    inv: &TrainedInverter,
    prior: &dyn GenerativePrior,
    dir: &Path,
    rec: &mut Recorder,
) -> Result<()> {
    rec.seeds.insert("data".into(), cfg.data.seed);
    let targets = rec.time("load data", || load_targets(cfg, sm))?;
    let originals: Vec<Image> = targets.into_iter().map(|t| t.image).collect();
    let zs = sm.extract_batch(&originals)?;
    let text = prompt(cfg, prior)?;
    let recons = rec.time("invert", || match &text {
        Some(e) => zs.iter().map(|z| run_inverter_with_text(inv, prior, z, e)).collect(),
        None => run_inverter_batch(inv, prior, &zs),
    })?;
    write_images(dir, "original", &originals)?;
    write_images(dir, "recon", &recons)?;
    rec.time("metrics", || write_metrics(dir, cfg, &originals, &recons))?;
    Ok(())
}

fn defend(cfg: &RunConfig, sm: &SplitModel, dir: &Path, rec: &mut Recorder) -> Result<()> {
    let inv_cfg = cfg.attack.inversion(cfg.seed);
    rec.seeds.insert("attack".into(), inv_cfg.seed);
    rec.seeds.insert("data".into(), cfg.data.seed);
    rec.seeds.insert("defense".into(), cfg.defense.seed);
    let prior = rec.time("load prior", || load_run_prior(cfg, sm))?;
    let text = prompt(cfg, prior.as_ref())?;
    let targets = rec.time("load data", || load_targets(cfg, sm))?;
    let spec = SweepSpec {
        sigmas: cfg.defense.sigmas.clone(),
        noise_kind: cfg.defense.noise_kind,
        seed: cfg.defense.seed,
        attack_count: cfg.defense.attack_count,
    };
    let mut attack = |m: &SplitModel, zs: &[crate::splitnet::FeatureTensor]| -> Result<Vec<Image>> {
        Ok(invert_batch(m, zs, prior.as_ref(), text.as_ref(), &inv_cfg)?
            .into_iter()
            .map(|r| r.image)
            .collect())
    };
    let rows = rec.time("sweep", || tradeoff_sweep(sm, &targets, &mut attack, &spec))?;
    write_atomic(&dir.join("tradeoff.csv"), tradeoff_csv(&rows).as_bytes())?;
    rec.details.insert("tradeoff".into(), json!(rows));
    Ok(())
}

/// Evaluate reconstructions against originals; files are paired in
/// file-name order and reported under the reconstruction's name.
pub fn evaluate_dirs(originals: &Path, recons: &Path, classifier: Option<&TargetModel>) -> Result<MetricsReport> {
    let o = load_image_dir(originals)?;
    let r = load_image_dir(recons)?;
    if o.len() != r.len() {
        return Err(Error::input(format!(
            "{} originals in {} but {} reconstructions in {}",
            o.len(),
            originals.display(),
            r.len(),
            recons.display()
        )));
    }
    let o: Vec<(String, Image)> = o.into_iter().zip(&r).map(|((_, im), (id, _))| (id.clone(), im)).collect();
    let clf = classifier.map(|m| ModelClassifier { model: m });
    evaluate(&o, &r, clf.as_ref().map(|c| c as &dyn crate::metrics::Classifier))
}

/// Summary table (Markdown) and comparison figure over finished runs.
/// The figure has one originals row followed by one row per run.
pub fn build_report(run_dirs: &[PathBuf], max_images: usize) -> Result<(String, Option<Image>)> {
    let mut table = String::from(
        "| run | command | model | split | prior | status | mean PSNR | mean SSIM | IS | classifier |\n|---|---|---|---|---|---|---|---|---|---|\n",
    );
    let mut rows: Vec<Vec<Image>> = Vec::new();
    for d in run_dirs {
        let m = RunManifest::load(&d.join("manifest.json"))?;
        let metrics = d.join("metrics.json");
        let report = if metrics.exists() { Some(MetricsReport::load(&metrics)?) } else { None };
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let a = report.as_ref().map(|r| &r.aggregate);
        let _ = writeln!(
            table,
            "| {} | {} | {} | {} | {} | {:?} | {} | {} | {} | {} |",
            m.run_id,
            m.command,
            m.config.model.name,
            m.config.model.split_index,
            m.config.prior.name,
            m.status,
            fmt(a.map(|a| a.mean_psnr)),
            fmt(a.map(|a| a.mean_ssim)),
            fmt(a.and_then(|a| a.inception_score)),
            report.as_ref().and_then(|r| r.classifier_name.clone()).unwrap_or_else(|| "-".into()),
        );
        let pick = |prefix: &str| -> Result<Vec<Image>> {
            let mut v = Vec::new();
            for i in 0..max_images {
                let p = d.join(format!("{prefix}_{}.png", id(i)));
                if !p.exists() {
                    break;
                }
                v.push(Image::load_png(&p)?);
            }
            Ok(v)
        };
        if rows.is_empty() {
            let o = pick("original")?;
            if !o.is_empty() {
                rows.push(o);
            }
        }
        let r = pick("recon")?;
        if !r.is_empty() {
            rows.push(r);
        }
    }
    let width = rows.iter().map(Vec::len).min().unwrap_or(0);
    let figure = if width > 0 {
        let trimmed: Vec<Vec<Image>> = rows.into_iter().map(|mut r| {
            r.truncate(width);
            r
        }).collect();
        Some(image_grid(&trimmed, 2)?)
    } else {
        None
    };
    Ok((table, figure))
}
