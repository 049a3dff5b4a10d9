use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mcvi_core::explain::{channel_weights, gradcam, render, Attribution};
use mcvi_core::io::{self, PlotMeta, LABELS_FILE};
use mcvi_core::net::{Model, ENCODER};
use mcvi_core::partition::{partition, GrowthRecord, SplitAssignment, Subset};
use mcvi_core::spectral::{compute_vi_stack, texture_features, BandStack, VIStack, VegIndex};
use mcvi_core::ssl::{pretrain, save_pretrained, write_pretrain_log};
use mcvi_core::synthgen::generate_dataset;
use mcvi_core::trainer::{evaluate, finetune, predict, write_train_log, Sample, Target, TrainConfig};
use mcvi_numcore::{checkpoint, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{Command, Common};

pub const TRAIN_DOC: &str = "train.json";

fn setup(common: &Common) -> Result<(RunConfig, bool)> {
    let (mut cfg, lr_explicit) = RunConfig::load(common.config.as_deref(), common.desk_scale)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    if !lr_explicit {
        cfg.train.lr = cfg.train.target.default_lr();
    }
    let paths = &mut cfg.paths;
    for (slot, flag) in [
        (&mut paths.corpus, &common.input),
        (&mut paths.labels, &common.labels),
        (&mut paths.vi_cache, &common.vi_cache),
        (&mut paths.out, &common.out),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    Ok((cfg, lr_explicit))
}

fn need<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| anyhow!("missing --{flag}"))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = need(&cfg.paths.out, "out")?.to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn labels_path(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.paths.labels {
        Some(p) => Ok(p.clone()),
        None => Ok(need(&cfg.paths.corpus, "input")?.join(LABELS_FILE)),
    }
}

fn read_labels(cfg: &RunConfig) -> Result<Vec<GrowthRecord>> {
    let path = labels_path(cfg)?;
    io::read_labels(&path).with_context(|| format!("reading labels {}", path.display()))
}

struct Plot {
    vi: VIStack,
    meta: PlotMeta,
    bands: Option<BandStack>,
}

/// Every plot of the corpus, from the VI cache when one is configured.
fn load_plots(cfg: &RunConfig, keep_bands: bool) -> Result<Vec<Plot>> {
    let mut plots = Vec::new();
    if let Some(cache) = &cfg.paths.vi_cache {
        for dir in io::plot_dirs(cache)? {
            let (vi, meta) = io::read_vi_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
            plots.push(Plot { vi, meta, bands: None });
        }
        if keep_bands {
            if let Some(corpus) = &cfg.paths.corpus {
                for p in &mut plots {
                    let dir = corpus.join(io::PLOTS_DIR).join(&p.meta.plot_id);
                    p.bands = Some(io::read_band_dir(&dir)?.0);
                }
            }
        }
    } else {
        let corpus = need(&cfg.paths.corpus, "input")?;
        for dir in io::plot_dirs(corpus)? {
            let (bands, meta) = io::read_band_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
            let vi = compute_vi_stack(&bands);
            plots.push(Plot {
                vi,
                meta,
                bands: keep_bands.then_some(bands),
            });
        }
    }
    if plots.is_empty() {
        bail!("corpus has no plots");
    }
    Ok(plots)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of every file under `root` (relative paths, sorted), skipping `skip`.
fn manifest(root: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            if skip.contains(&rel.as_str()) {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, sha256_hex(&fs::read(&path)?));
            }
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            n_labeled,
            n_unlabeled,
            size,
            common,
        } => {
            let (mut cfg, _) = setup(&common)?;
            if let Some(n) = n_labeled {
                cfg.synth.n_labeled = n;
            }
            if let Some(n) = n_unlabeled {
                cfg.synth.n_unlabeled = n;
            }
            if let Some(s) = size {
                cfg.synth.size = s;
            }
            synth(&cfg)
        }
        Command::Vi { common } => vi(&setup(&common)?.0),
        Command::Texture { bins, common } => {
            let (mut cfg, _) = setup(&common)?;
            if let Some(b) = bins {
                cfg.texture.bins = b;
            }
            texture(&cfg)
        }
        Command::Partition {
            k_clusters,
            n_runs,
            common,
        } => {
            let (mut cfg, _) = setup(&common)?;
            if let Some(k) = k_clusters {
                cfg.partition.k_clusters = k;
            }
            if let Some(n) = n_runs {
                cfg.partition.n_runs = n;
            }
            split(&cfg)
        }
        Command::Pretrain { epochs, common } => {
            let (mut cfg, _) = setup(&common)?;
            if let Some(e) = epochs {
                cfg.vicreg.epochs = e;
            }
            pretrain_cmd(&cfg)
        }
        Command::Finetune {
            target,
            freeze_encoder,
            init,
            split,
            epochs,
            common,
        } => {
            let (mut cfg, lr_explicit) = setup(&common)?;
            if let Some(t) = target {
                cfg.train.target = t;
                if !lr_explicit {
                    cfg.train.lr = t.default_lr();
                }
            }
            if freeze_encoder {
                cfg.train.freeze_encoder = true;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if init.is_some() {
                cfg.paths.init = init;
            }
            if split.is_some() {
                cfg.paths.split = split;
            }
            finetune_cmd(&cfg)
        }
        Command::Eval {
            model,
            split,
            subset,
            common,
        } => {
            let (mut cfg, _) = setup(&common)?;
            if model.is_some() {
                cfg.paths.model = model;
            }
            if split.is_some() {
                cfg.paths.split = split;
            }
            eval_cmd(&cfg, subset.parse()?)
        }
        Command::Predict { model, common } => {
            let (mut cfg, _) = setup(&common)?;
            if model.is_some() {
                cfg.paths.model = model;
            }
            predict_cmd(&cfg)
        }
        Command::Explain {
            model,
            split,
            subset,
            common,
        } => {
            let (mut cfg, _) = setup(&common)?;
            if model.is_some() {
                cfg.paths.model = model;
            }
            if split.is_some() {
                cfg.paths.split = split;
            }
            explain_cmd(&cfg, subset.parse()?)
        }
        Command::Report { runs, common } => report(&runs, common.out.as_deref()),
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let plots = generate_dataset(&cfg.synth)?;
    io::write_corpus(&out, &plots)?;
    let truth: Vec<GrowthRecord> = plots.iter().map(|p| p.truth.clone()).collect();
    io::write_labels(&out.join("truth.csv"), &truth)?;
    cfg.write_effective(&out)?;
    let files = manifest(&out, &["manifest.json", "config_effective.json"])?;
    let digest = sha256_hex(serde_json::to_string(&files)?.as_bytes());
    write_json(&out.join("manifest.json"), &serde_json::json!({ "digest": digest, "files": files }))?;
    println!("synth plots={} labeled={} digest={digest}", plots.len(), cfg.synth.n_labeled);
    Ok(())
}

fn vi(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let plots = load_plots(cfg, false)?;
    for p in &plots {
        io::write_vi_dir(&out.join(io::PLOTS_DIR).join(&p.meta.plot_id), &p.vi, &p.meta)?;
    }
    cfg.write_effective(&out)?;
    println!("vi plots={} channels={}", plots.len(), VegIndex::ALL.len());
    Ok(())
}

fn texture(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let plots = load_plots(cfg, false)?;
    let mut w = csv::Writer::from_path(out.join("texture.csv"))?;
    w.write_record(["plot_id", "index", "mean", "std", "smoothness", "third_moment", "uniformity", "entropy"])?;
    for p in &plots {
        for index in VegIndex::ALL {
            let t = texture_features(p.vi.channel(index), cfg.texture.bins)?;
            let mut row = vec![p.meta.plot_id.clone(), index.name().to_string()];
            row.extend([t.mean, t.std, t.smoothness, t.third_moment, t.uniformity, t.entropy].map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    cfg.write_effective(&out)?;
    println!("texture plots={} bins={}", plots.len(), cfg.texture.bins);
    Ok(())
}

fn split(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let records = read_labels(cfg)?;
    let assignment = partition(&records, &cfg.partition, cfg.seed)?;
    io::write_split(&out.join("split.json"), &assignment)?;
    cfg.write_effective(&out)?;
    println!(
        "partition n={} train={} val={} test={}",
        records.len(),
        assignment.count(Subset::Train),
        assignment.count(Subset::Val),
        assignment.count(Subset::Test)
    );
    Ok(())
}

fn pretrain_cmd(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let labeled: BTreeSet<String> = match labels_path(cfg) {
        Ok(p) if p.exists() => read_labels(cfg)?.into_iter().map(|r| r.plot_id).collect(),
        _ => BTreeSet::new(),
    };
    let plots = load_plots(cfg, false)?;
    let xs: Vec<Tensor> = plots
        .iter()
        .filter(|p| !labeled.contains(&p.meta.plot_id))
        .map(|p| p.vi.to_tensor())
        .collect();
    let mut model = Model::new(cfg.net.clone(), cfg.seed)?;
    let outcome = pretrain(&mut model, &xs, &cfg.vicreg, cfg.seed)?;
    save_pretrained(&out.join("pretrained.ckpt"), &model, &cfg.vicreg)?;
    write_pretrain_log(&out.join("pretrain_log.csv"), &outcome.log)?;
    write_json(&out.join("collapse.json"), &outcome.collapse)?;
    cfg.write_effective(&out)?;
    let last = outcome.log.last().map(|l| l.losses.total).unwrap_or(f64::NAN);
    println!(
        "pretrain samples={} epochs={} final_loss={last:.6} collapsed_dims={}",
        xs.len(),
        outcome.log.len(),
        outcome.collapse.n_collapsed_dims
    );
    Ok(())
}

fn read_split(cfg: &RunConfig) -> Result<SplitAssignment> {
    let path = need(&cfg.paths.split, "split")?;
    io::read_split(path).with_context(|| format!("reading split {}", path.display()))
}

fn samples(plots: &[Plot], records: &[GrowthRecord], ids: &[String], target: Target) -> Result<Vec<Sample>> {
    let by_id: BTreeMap<&str, &GrowthRecord> = records.iter().map(|r| (r.plot_id.as_str(), r)).collect();
    let by_plot: BTreeMap<&str, &Plot> = plots.iter().map(|p| (p.meta.plot_id.as_str(), p)).collect();
    ids.iter()
        .map(|id| {
            let rec = by_id.get(id.as_str()).ok_or_else(|| anyhow!("no label for plot {id}"))?;
            let plot = by_plot.get(id.as_str()).ok_or_else(|| anyhow!("no imagery for plot {id}"))?;
            Ok(Sample {
                plot_id: id.clone(),
                x: plot.vi.to_tensor(),
                y: target.value(rec),
            })
        })
        .collect()
}

fn finetune_cmd(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let assignment = read_split(cfg)?;
    let records = read_labels(cfg)?;
    let plots = load_plots(cfg, false)?;
    let target = cfg.train.target;
    let train = samples(&plots, &records, &assignment.ids(Subset::Train), target)?;
    let val = samples(&plots, &records, &assignment.ids(Subset::Val), target)?;
    let mut model = match &cfg.paths.init {
        Some(path) => {
            let ck = checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
            let arch = ck
                .documents
                .get("arch.json")
                .ok_or_else(|| anyhow!("{}: missing arch.json", path.display()))?;
            let value: serde_json::Value = serde_json::from_str(arch)?;
            let net = serde_json::from_value(value["config"].clone())?;
            let mut model = Model::new(net, cfg.train.seed)?;
            ck.apply(&mut model.store, ENCODER)?;
            model
        }
        None => Model::new(cfg.net.clone(), cfg.train.seed)?,
    };
    let history = finetune(&mut model, &train, &val, &cfg.train)?;
    model.save(&out.join("model.ckpt"), &[(TRAIN_DOC, serde_json::to_string_pretty(&cfg.train)?)])?;
    write_train_log(&out.join("train_log.csv"), &history)?;
    write_json(&out.join("history.json"), &history)?;
    cfg.write_effective(&out)?;
    println!(
        "finetune target={target} train={} val={} best_epoch={} best_val_rmse={:.6}",
        train.len(),
        val.len(),
        history.best_epoch,
        history.best_val_rmse
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(Model, TrainConfig)> {
    let path = need(&cfg.paths.model, "model")?;
    let (model, ck) = Model::load(path).with_context(|| format!("reading {}", path.display()))?;
    let train: TrainConfig = match ck.documents.get(TRAIN_DOC) {
        Some(doc) => serde_json::from_str(doc)?,
        None => bail!("{} is not a fine-tuned checkpoint (no {TRAIN_DOC})", path.display()),
    };
    Ok((model, train))
}

#[derive(Serialize, Deserialize)]
struct PlotPrediction {
    plot_id: String,
    y: f64,
    prediction: f64,
}

#[derive(Serialize, Deserialize)]
pub struct EvalFile {
    pub target: Target,
    pub subset: Subset,
    pub freeze_encoder: bool,
    pub r2: f64,
    pub rmse: f64,
    pub n: usize,
    plots: Vec<PlotPrediction>,
}

fn eval_cmd(cfg: &RunConfig, subset: Subset) -> Result<()> {
    let out = out_dir(cfg)?;
    let (mut model, train) = load_model(cfg)?;
    let assignment = read_split(cfg)?;
    let records = read_labels(cfg)?;
    let plots = load_plots(cfg, false)?;
    let set = samples(&plots, &records, &assignment.ids(subset), train.target)?;
    let report = evaluate(&mut model, &set)?;
    let file = EvalFile {
        target: train.target,
        subset,
        freeze_encoder: train.freeze_encoder,
        r2: report.r2,
        rmse: report.rmse,
        n: report.n,
        plots: set
            .iter()
            .zip(&report.predictions)
            .map(|(s, p)| PlotPrediction {
                plot_id: s.plot_id.clone(),
                y: s.y,
                prediction: *p,
            })
            .collect(),
    };
    write_json(&out.join("eval.json"), &file)?;
    cfg.write_effective(&out)?;
    println!("eval target={} subset={} n={} r2={:.6} rmse={:.6}", train.target, subset.name(), report.n, report.r2, report.rmse);
    Ok(())
}

fn predict_cmd(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let (mut model, train) = load_model(cfg)?;
    let plots = load_plots(cfg, false)?;
    let xs: Vec<Tensor> = plots.iter().map(|p| p.vi.to_tensor()).collect();
    let preds = predict(&mut model, &xs.iter().collect::<Vec<_>>())?;
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    w.write_record(["plot_id", "target", "prediction"])?;
    for (p, y) in plots.iter().zip(&preds) {
        w.write_record([p.meta.plot_id.as_str(), &train.target.to_string(), &y.to_string()])?;
    }
    w.flush()?;
    cfg.write_effective(&out)?;
    println!("predict target={} n={}", train.target, preds.len());
    Ok(())
}

fn explain_cmd(cfg: &RunConfig, subset: Subset) -> Result<()> {
    let out = out_dir(cfg)?;
    let (mut model, _) = load_model(cfg)?;
    let mut plots = load_plots(cfg, true)?;
    if cfg.paths.split.is_some() {
        let keep: BTreeSet<String> = read_split(cfg)?.ids(subset).into_iter().collect();
        plots.retain(|p| keep.contains(&p.meta.plot_id));
    }
    let mut summary = Vec::with_capacity(plots.len());
    for p in &plots {
        let cam = gradcam(&mut model, &p.vi.to_tensor())?;
        let weights = channel_weights(&p.vi, &cam.heatmap)?;
        render(&out, &p.meta.plot_id, &cam, &weights, p.bands.as_ref(), cfg.explain.alpha)?;
        summary.push(Attribution {
            plot_id: p.meta.plot_id.clone(),
            degenerate: cam.degenerate,
            channel_weights: VegIndex::ALL.iter().map(|i| i.name().to_string()).zip(weights).collect(),
        });
    }
    write_json(&out.join("attributions.json"), &summary)?;
    cfg.write_effective(&out)?;
    println!(
        "explain plots={} degenerate={}",
        summary.len(),
        summary.iter().filter(|a| a.degenerate).count()
    );
    Ok(())
}

fn find_evals(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_evals(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "eval.json") {
            found.push(path);
        }
    }
    Ok(())
}

fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut found = Vec::new();
    for r in runs {
        find_evals(r, &mut found)?;
    }
    if found.is_empty() {
        bail!("no eval.json found under the given directories");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "target", "subset", "freeze_encoder", "n", "r2", "rmse"])?;
    for path in &found {
        let e: EvalFile = serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?;
        let run = path.parent().map(|p| p.display().to_string()).unwrap_or_default();
        w.write_record([
            run,
            e.target.to_string(),
            e.subset.name().to_string(),
            e.freeze_encoder.to_string(),
            e.n.to_string(),
            format!("{:.4}", e.r2),
            format!("{:.4}", e.rmse),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, &bytes)?;
            println!("report runs={} out={}", found.len(), p.display());
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}
