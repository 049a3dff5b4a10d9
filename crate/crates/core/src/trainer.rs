//! Supervised fine-tuning, early stopping and R²/RMSE evaluation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use mcvi_numcore::init::{derive_seed, rng};
use mcvi_numcore::{Adam, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{ForwardMode, Model};
use crate::partition::GrowthRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Lai,
    Spad,
}

impl Target {
    pub fn default_lr(self) -> f64 {
        match self {
            Target::Lai => 5e-4,
            Target::Spad => 5e-5,
        }
    }

    pub fn value(self, r: &GrowthRecord) -> f64 {
        match self {
            Target::Lai => r.lai,
            Target::Spad => r.spad,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Lai => "lai",
            Target::Spad => "spad",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lai" => Ok(Target::Lai),
            "spad" => Ok(Target::Spad),
            other => Err(invalid(format!("unknown target '{other}' (expected lai or spad)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub target: Target,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub freeze_encoder: bool,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_target(target: Target) -> Self {
        Self {
            target,
            lr: target.default_lr(),
            epochs: 200,
            batch: 32,
            freeze_encoder: false,
            patience: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.patience == 0 || self.batch == 0 {
            return Err(invalid("lr must be positive, patience and batch at least 1"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_target(Target::Lai)
    }
}

/// One model input `[1, C, H, W]` with its label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub plot_id: String,
    pub x: Tensor,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored value has not improved for `patience` observations.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Decision {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since = 0;
            Decision::Improved
        } else {
            self.since += 1;
            if self.since >= self.patience {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2: f64,
    pub rmse: f64,
    pub n: usize,
    pub predictions: Vec<f64>,
}

/// Coefficient of determination and root-mean-square error.
pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<(f64, f64)> {
    if y.len() != yhat.len() {
        return Err(invalid("label and prediction counts differ"));
    }
    if y.len() < 2 {
        return Err(invalid("metrics need at least 2 samples"));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("labels have zero variance; R² is undefined".into()));
    }
    Ok((1.0 - ss_res / ss_tot, (ss_res / n).sqrt()))
}

fn rmse(y: &[f64], yhat: &[f64]) -> f64 {
    (y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

fn stack(samples: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack_batch(samples)?)
}

const INFER_BATCH: usize = 64;

/// Eval-mode predictions in input order.
pub fn predict(model: &mut Model, xs: &[&Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(INFER_BATCH) {
        out.extend(model.predict_batch(&stack(chunk)?)?);
    }
    Ok(out)
}

/// Eval-mode embeddings, one row per input.
pub fn embed(model: &mut Model, xs: &[&Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(INFER_BATCH) {
        let e = model.embed_batch(&stack(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| e.select_batch(i)));
    }
    Ok(out)
}

pub fn evaluate(model: &mut Model, samples: &[Sample]) -> Result<EvalReport> {
    let xs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.y).collect();
    let predictions = predict(model, &xs)?;
    let (r2, rmse) = metrics(&y, &predictions)?;
    Ok(EvalReport {
        r2,
        rmse,
        n: samples.len(),
        predictions,
    })
}

/// Shuffled mini-batches; a trailing singleton joins the previous batch so
/// batch statistics stay defined.
fn batches(n: usize, size: usize, r: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn snapshot(store: &ParamStore) -> ParamStore {
    store.clone()
}

fn check_loss(v: f64, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite training loss at epoch {epoch}")))
    }
}

/// Mean-squared-error fine-tuning with early stopping on validation RMSE.
/// The best-on-validation weights are restored before returning.
pub fn finetune(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid("fine-tuning needs non-empty train and validation subsets"));
    }
    if !cfg.freeze_encoder && train.len() < 2 {
        return Err(invalid("training the encoder needs at least 2 samples for batch statistics"));
    }
    let y_train: Vec<f64> = train.iter().map(|s| s.y).collect();
    let y_val: Vec<f64> = val.iter().map(|s| s.y).collect();
    model.set_output_bias(y_train.iter().sum::<f64>() / y_train.len() as f64);

    // a frozen encoder in inference mode is a fixed feature map
    let frozen = if cfg.freeze_encoder {
        let tr: Vec<&Tensor> = train.iter().map(|s| &s.x).collect();
        let va: Vec<&Tensor> = val.iter().map(|s| &s.x).collect();
        Some((embed(model, &tr)?, embed(model, &va)?))
    } else {
        None
    };

    let mut opt = Adam::new(cfg.lr);
    let mut r = rng(derive_seed(cfg.seed, 0xF1));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = snapshot(&model.store);
    let mut records = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let mut sq_sum = 0.0;
        for batch in batches(train.len(), cfg.batch, &mut r) {
            let targets = Tensor::new(&[batch.len(), 1], batch.iter().map(|&i| y_train[i]).collect())?;
            let mut g = Graph::new();
            let pred = match &frozen {
                Some((emb, _)) => {
                    let parts: Vec<&Tensor> = batch.iter().map(|&i| &emb[i]).collect();
                    let e = g.constant(stack(&parts)?)?;
                    model.regress(&mut g, e, ForwardMode::frozen_encoder())?
                }
                None => {
                    let parts: Vec<&Tensor> = batch.iter().map(|&i| &train[i].x).collect();
                    let x = g.constant(stack(&parts)?)?;
                    model.forward(&mut g, x, ForwardMode::train())?.0
                }
            };
            let t = g.constant(targets)?;
            let diff = g.sub(pred, t)?;
            let sq = g.square(diff)?;
            let loss = g.mean(sq)?;
            let lv = g.value(loss).item();
            check_loss(lv, epoch)?;
            sq_sum += lv * batch.len() as f64;
            let grads = g.backward(loss)?;
            g.accumulate_param_grads(&grads, &mut model.store);
            opt.step(&mut model.store);
        }
        let val_pred = match &frozen {
            Some((_, emb)) => {
                let parts: Vec<&Tensor> = emb.iter().collect();
                let mut out = Vec::with_capacity(parts.len());
                for chunk in parts.chunks(INFER_BATCH) {
                    let mut g = Graph::new();
                    let e = g.constant(stack(chunk)?)?;
                    let p = model.regress(&mut g, e, ForwardMode::eval())?;
                    out.extend_from_slice(g.value(p).data());
                }
                out
            }
            None => {
                let xs: Vec<&Tensor> = val.iter().map(|s| &s.x).collect();
                predict(model, &xs)?
            }
        };
        let val_rmse = rmse(&y_val, &val_pred);
        check_loss(val_rmse, epoch)?;
        records.push(EpochRecord {
            epoch,
            train_rmse: (sq_sum / train.len() as f64).sqrt(),
            val_rmse,
        });
        match stopper.observe(epoch, val_rmse) {
            Decision::Improved => best = snapshot(&model.store),
            Decision::Continue => {}
            Decision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    model.store = best;
    Ok(History {
        epochs: records,
        best_epoch: stopper.best_epoch,
        best_val_rmse: stopper.best,
        stopped_early,
    })
}

pub fn write_train_log(path: &Path, history: &History) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,train_rmse,val_rmse")?;
    for e in &history.epochs {
        writeln!(f, "{},{},{}", e.epoch, e.train_rmse, e.val_rmse)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use rand::Rng;

    #[test]
    fn hand_evaluated_metrics() {
        let (r2, rmse) = metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((rmse - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let y = [0.3, 1.7, 2.2, 5.0];
        assert_eq!(metrics(&y, &y).unwrap(), (1.0, 0.0));
        let m = y.iter().sum::<f64>() / 4.0;
        assert_eq!(metrics(&y, &[m; 4]).unwrap().0, 0.0);
    }

    #[test]
    fn constant_labels_are_an_error() {
        assert!(matches!(metrics(&[2.0; 3], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(metrics(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn rmse_is_translation_covariant() {
        let y = [1.0, 4.0, 2.5];
        let p = [1.5, 3.0, 2.0];
        let shift = |v: &[f64]| v.iter().map(|x| x + 7.25).collect::<Vec<_>>();
        let a = metrics(&y, &p).unwrap().1;
        let b = metrics(&shift(&y), &shift(&p)).unwrap().1;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_on_a_plateau() {
        let mut s = EarlyStopping::new(3);
        assert_eq!(s.observe(0, 1.0), Decision::Improved);
        assert_eq!(s.observe(1, 0.5), Decision::Improved);
        assert_eq!(s.observe(2, 0.5), Decision::Continue);
        assert_eq!(s.observe(3, 0.7), Decision::Continue);
        assert_eq!(s.observe(4, 0.6), Decision::Stop);
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn singleton_batches_are_merged() {
        let b = batches(33, 32, &mut rng(0));
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 33);
        let b = batches(34, 32, &mut rng(0));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 2]);
    }

    #[test]
    fn target_parsing() {
        assert_eq!("LAI".parse::<Target>().unwrap(), Target::Lai);
        assert!("height".parse::<Target>().is_err());
    }

    fn tiny() -> NetConfig {
        NetConfig {
            ce_channels: 8,
            irb_channels: vec![8, 12],
            regressor_hidden: 8,
            ..NetConfig::default()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut r = rng(seed);
        (0..n)
            .map(|i| Sample {
                plot_id: format!("s{i}"),
                x: Tensor::from_fn(&[1, 11, 8, 8], |_| r.gen_range(-1.0..1.0)),
                y: r.gen_range(0.0..5.0),
            })
            .collect()
    }

    #[test]
    fn frozen_encoder_is_untouched() {
        let mut m = Model::new(tiny(), 0).unwrap();
        let before = m.store.clone();
        let data = samples(6, 1);
        let cfg = TrainConfig {
            epochs: 5,
            freeze_encoder: true,
            ..TrainConfig::default()
        };
        finetune(&mut m, &data[..4], &data[4..], &cfg).unwrap();
        for (a, b) in m.store.params().iter().zip(before.params()) {
            if a.name.starts_with("encoder.") {
                assert_eq!(a.value, b.value, "{}", a.name);
                assert!(a.grad.is_none());
            }
        }
        for ((na, a), (_, b)) in m.store.buffers().zip(before.buffers()) {
            assert_eq!(a, b, "{na}");
        }
    }

    #[test]
    fn overfits_five_samples() {
        let mut m = Model::new(tiny(), 2).unwrap();
        let data = samples(5, 3);
        let cfg = TrainConfig {
            lr: 3e-3,
            epochs: 200,
            batch: 5,
            patience: 200,
            ..TrainConfig::default()
        };
        let hist = finetune(&mut m, &data, &data, &cfg).unwrap();
        let y: Vec<f64> = data.iter().map(|s| s.y).collect();
        let mean = y.iter().sum::<f64>() / 5.0;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        let last = hist.epochs.last().unwrap().train_rmse;
        assert!(last < 0.1 * std, "train rmse {last} vs label std {std}");
    }

    #[test]
    fn finetune_is_reproducible_and_batch_invariant() {
        let data = samples(8, 4);
        let run = || {
            let mut m = Model::new(tiny(), 5).unwrap();
            let cfg = TrainConfig { epochs: 3, batch: 4, ..TrainConfig::default() };
            finetune(&mut m, &data[..6], &data[6..], &cfg).unwrap();
            m
        };
        let mut a = run();
        let b = run();
        for (p, q) in a.store.params().iter().zip(b.store.params()) {
            assert_eq!(p.value, q.value);
        }
        let xs: Vec<&Tensor> = data.iter().map(|s| &s.x).collect();
        let batch = predict(&mut a, &xs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let single = predict(&mut a, &[x]).unwrap()[0];
            assert!((single - batch[i]).abs() < 1e-12);
        }
        assert_eq!(predict(&mut a, &xs).unwrap(), batch);
    }

    #[test]
    fn empty_validation_is_rejected() {
        let mut m = Model::new(tiny(), 0).unwrap();
        let data = samples(4, 1);
        assert!(finetune(&mut m, &data, &[], &TrainConfig::default()).is_err());
    }
}
