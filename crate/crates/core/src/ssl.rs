//! VICReg pretraining of the encoder on unlabeled plots.

use std::io::Write;
use std::path::Path;

use mcvi_numcore::init::{derive_seed, rng, uniform_fan_in};
use mcvi_numcore::{checkpoint, Adam, BnMode, BnOptions, BufferId, Graph, ParamId, ParamStore, RunningStats, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{ForwardMode, Model, ENCODER, EXPANDER};

pub const COLLAPSE_THRESHOLD: f64 = 1e-3;
pub const STABLE_REL_CHANGE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VICRegConfig {
    pub lambda_sim: f64,
    pub lambda_var: f64,
    pub lambda_cov: f64,
    pub gamma: f64,
    pub eps: f64,
    /// Expander output dimension D.
    pub dim: usize,
    pub batch: usize,
    pub epochs: usize,
    /// Initial learning rate.
    pub lr: f64,
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }
}

impl Default for VICRegConfig {
    fn default() -> Self {
        Self {
            lambda_sim: 25.0,
            lambda_var: 25.0,
            lambda_cov: 1.0,
            gamma: 1.0,
            eps: 1e-4,
            dim: 256,
            batch: 100,
            epochs: 500,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl VICRegConfig {
    pub fn desk_scale() -> Self {
        Self {
            dim: 64,
            batch: 16,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_sim, self.lambda_var, self.lambda_cov];
        if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|w| *w == 0.0) {
            return Err(invalid("VICReg weights must be non-negative and not all zero"));
        }
        if self.dim < 2 || self.batch < 2 {
            return Err(invalid("VICReg needs D >= 2 and B >= 2"));
        }
        if !(self.lr > 0.0) || !(self.gamma > 0.0) || !(self.eps > 0.0) {
            return Err(invalid("lr, gamma and eps must be positive"));
        }
        Ok(())
    }
}

/// One of the 8 symmetries of the square: `k % 4` quarter turns after an
/// optional horizontal flip (`k >= 4`).
pub fn dihedral(x: &Tensor, k: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 {
        return Err(invalid("dihedral transform needs at least 2 dims"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h != w {
        return Err(invalid(format!("dihedral transform needs a square raster, got {h}x{w}")));
    }
    let n = h;
    let (flip, turns) = (k >= 4, k % 4);
    let plane = n * n;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(plane).zip(out.chunks_mut(plane)) {
        for y in 0..n {
            for xx in 0..n {
                // undo the rotation, then the flip
                let (mut sy, mut sx) = (y, xx);
                for _ in 0..turns {
                    let (ny, nx) = (sx, n - 1 - sy);
                    sy = ny;
                    sx = nx;
                }
                if flip {
                    sx = n - 1 - sx;
                }
                dst[y * n + xx] = src[sy * n + sx];
            }
        }
    }
    Ok(Tensor::new(&shape, out)?)
}

/// A uniformly drawn dihedral transform of `x`.
pub fn augment(x: &Tensor, seed: u64) -> Result<Tensor> {
    dihedral(x, rng(seed).gen_range(0..8))
}

/// FC → BN → ReLU → FC projection head used only during pretraining.
#[derive(Clone, Debug)]
pub struct Expander {
    fc1_w: ParamId,
    fc1_b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: BufferId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    pub dim: usize,
}

impl Expander {
    pub fn new(store: &mut ParamStore, input: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng(derive_seed(seed, 0xE4));
        let add = |store: &mut ParamStore, name: &str, t: Tensor| -> Result<ParamId> { Ok(store.add(format!("{EXPANDER}{name}"), t)?) };
        let fc1_w = add(store, "fc1.w", uniform_fan_in(&[dim, input], input, &mut r))?;
        let fc1_b = add(store, "fc1.b", uniform_fan_in(&[dim], input, &mut r))?;
        let gamma = add(store, "bn.gamma", Tensor::full(&[dim], 1.0))?;
        let beta = add(store, "bn.beta", Tensor::zeros(&[dim]))?;
        let fc2_w = add(store, "fc2.w", uniform_fan_in(&[dim, dim], dim, &mut r))?;
        let fc2_b = add(store, "fc2.b", uniform_fan_in(&[dim], dim, &mut r))?;
        let stats = store.add_buffer(format!("{EXPANDER}bn"), RunningStats::new(dim))?;
        Ok(Self {
            fc1_w,
            fc1_b,
            gamma,
            beta,
            stats,
            fc2_w,
            fc2_b,
            dim,
        })
    }

    /// Embedding `[B, E]` to `Z: [B, D]`.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, embedding: Var, bn: BnMode) -> Result<Var> {
        let w1 = g.param(store, self.fc1_w, true)?;
        let b1 = g.param(store, self.fc1_b, true)?;
        let h = g.linear(embedding, w1, Some(b1))?;
        if bn == BnMode::Train {
            let (rows, cols) = g.value(h).dims2()?;
            let d = g.value(h).data();
            let constant = (1..rows).all(|r| d[r * cols..(r + 1) * cols] == d[..cols]);
            if constant {
                return Err(Error::Degenerate("expander batch has zero variance in every feature".into()));
            }
        }
        let gamma = g.param(store, self.gamma, true)?;
        let beta = g.param(store, self.beta, true)?;
        let opts = BnOptions { mode: bn, ..BnOptions::train() };
        let h = g.batch_norm(h, gamma, beta, store.buffer_mut(self.stats), opts)?;
        let h = g.relu(h)?;
        let w2 = g.param(store, self.fc2_w, true)?;
        let b2 = g.param(store, self.fc2_b, true)?;
        Ok(g.linear(h, w2, Some(b2))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub sim: Var,
    pub var: Var,
    pub cov: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub sim: f64,
    pub var: f64,
    pub cov: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            sim: g.value(self.sim).item(),
            var: g.value(self.var).item(),
            cov: g.value(self.cov).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Unbiased per-dimension variance `[1, D]` and centered batch.
fn centered_variance(g: &mut Graph, z: Var) -> Result<(Var, Var)> {
    let (b, _) = g.value(z).dims2()?;
    let zc = g.center_columns(z)?;
    let sq = g.square(zc)?;
    let m = g.mean_rows(sq)?;
    let var = g.scale(m, b as f64 / (b as f64 - 1.0))?;
    Ok((zc, var))
}

fn variance_term(g: &mut Graph, var: Var, cfg: &VICRegConfig) -> Result<Var> {
    let v = g.add_scalar(var, cfg.eps)?;
    let std = g.sqrt(v)?;
    let gap = g.affine(std, -1.0, cfg.gamma)?;
    let hinge = g.relu(gap)?;
    Ok(g.mean(hinge)?)
}

fn covariance_term(g: &mut Graph, zc: Var) -> Result<Var> {
    let (b, d) = g.value(zc).dims2()?;
    let t = g.transpose(zc)?;
    let c = g.matmul(t, zc)?;
    let c = g.scale(c, 1.0 / (b as f64 - 1.0))?;
    let mask = g.constant(Tensor::from_fn(&[d, d], |i| if i / d == i % d { 0.0 } else { 1.0 }))?;
    let off = g.mul(c, mask)?;
    let sq = g.square(off)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / d as f64)?)
}

/// Invariance, variance and covariance terms and their weighted sum.
pub fn vicreg_losses(g: &mut Graph, z: Var, z2: Var, cfg: &VICRegConfig) -> Result<LossVars> {
    let (b, d) = g.value(z).dims2()?;
    if g.shape(z2) != [b, d] {
        return Err(invalid(format!("paired embeddings differ in shape: {:?} vs {:?}", g.shape(z), g.shape(z2))));
    }
    if b < 2 {
        return Err(invalid("VICReg needs at least 2 samples per batch"));
    }
    let diff = g.sub(z, z2)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    let sim = g.scale(s, 1.0 / b as f64)?;

    let (zc1, v1) = centered_variance(g, z)?;
    let (zc2, v2) = centered_variance(g, z2)?;
    let var1 = variance_term(g, v1, cfg)?;
    let var2 = variance_term(g, v2, cfg)?;
    let var = g.add(var1, var2)?;
    let var = g.scale(var, 0.5)?;
    let cov1 = covariance_term(g, zc1)?;
    let cov2 = covariance_term(g, zc2)?;
    let cov = g.add(cov1, cov2)?;
    let cov = g.scale(cov, 0.5)?;

    let ws = g.scale(sim, cfg.lambda_sim)?;
    let wv = g.scale(var, cfg.lambda_var)?;
    let wc = g.scale(cov, cfg.lambda_cov)?;
    let total = g.add(ws, wv)?;
    let total = g.add(total, wc)?;
    Ok(LossVars { sim, var, cov, total })
}

/// Unbiased per-column variance of a `[B, D]` matrix.
pub fn column_variances(z: &Tensor) -> Result<Vec<f64>> {
    let (b, d) = z.dims2()?;
    if b < 2 {
        return Err(invalid("variance needs at least 2 rows"));
    }
    let data = z.data();
    Ok((0..d)
        .map(|j| {
            let mean = (0..b).map(|i| data[i * d + j]).sum::<f64>() / b as f64;
            (0..b).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / (b as f64 - 1.0)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
    pub min_dim_var: f64,
    pub n_collapsed: usize,
    /// Mean over steps of each embedding dimension's batch variance.
    pub dim_vars: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub n_collapsed_dims: usize,
    pub min_var: f64,
    /// First epoch from which every later epoch changes the variance vector by
    /// less than 5% (relative L2).
    pub epoch_stabilized: Option<usize>,
    pub collapsed_per_epoch: Vec<usize>,
}

pub fn collapse_report(variances: &[Vec<f64>], threshold: f64) -> Result<CollapseReport> {
    let last = variances.last().ok_or_else(|| invalid("empty variance log"))?;
    let collapsed_per_epoch = variances
        .iter()
        .map(|v| v.iter().filter(|&&x| x < threshold).count())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel_change = |e: usize| {
        let prev = &variances[e - 1];
        let diff: Vec<f64> = variances[e].iter().zip(prev).map(|(a, b)| a - b).collect();
        let base = norm(prev);
        if base > 0.0 {
            norm(&diff) / base
        } else if norm(&diff) == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let mut stabilized = None;
    for e in (1..variances.len()).rev() {
        if rel_change(e) < STABLE_REL_CHANGE {
            stabilized = Some(e);
        } else {
            break;
        }
    }
    Ok(CollapseReport {
        n_collapsed_dims: last.iter().filter(|&&x| x < threshold).count(),
        min_var: last.iter().cloned().fold(f64::INFINITY, f64::min),
        epoch_stabilized: stabilized,
        collapsed_per_epoch,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub log: Vec<EpochLog>,
    pub collapse: CollapseReport,
    pub expander: Expander,
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Num(mcvi_numcore::NumError::NonFinite { op }) => {
            Error::Diverged(format!("non-finite value in {op} at epoch {epoch}, step {step}"))
        }
        other => other,
    }
}

/// VICReg pretraining. `samples` are `[1, C, H, W]` tensors; the expander is
/// added to `model.store` under `expander.`.
pub fn pretrain(model: &mut Model, samples: &[Tensor], cfg: &VICRegConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if samples.len() < cfg.batch {
        return Err(invalid(format!("pretraining needs at least B={} samples, got {}", cfg.batch, samples.len())));
    }
    let expander = match model.store.id(&format!("{EXPANDER}fc1.w")) {
        Some(_) => return Err(invalid("model already carries an expander")),
        None => Expander::new(&mut model.store, model.cfg.embedding_dim(), cfg.dim, seed)?,
    };
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffler = rng(derive_seed(seed, 0x5EED));
    let steps = samples.len() / cfg.batch;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut shuffler);
        let mut acc = LossValues::default();
        let mut dim_vars = vec![0.0; cfg.dim];
        for step in 0..steps {
            let idx = &order[step * cfg.batch..(step + 1) * cfg.batch];
            let aug_seed = derive_seed(seed, ((epoch * steps + step) as u64) << 1);
            let mut views = [Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len())];
            for (v, views) in views.iter_mut().enumerate() {
                for (j, &i) in idx.iter().enumerate() {
                    views.push(augment(&samples[i], derive_seed(aug_seed + v as u64, j as u64))?);
                }
            }
            let stack = |v: &[Tensor]| -> Result<Tensor> {
                let refs: Vec<&Tensor> = v.iter().collect();
                Ok(Tensor::stack_batch(&refs)?)
            };
            let x1 = stack(&views[0])?;
            let x2 = stack(&views[1])?;
            let mut g = Graph::new();
            let run = |g: &mut Graph, model: &mut Model| -> Result<(LossVars, Var, Var)> {
                let a = g.constant(x1)?;
                let b = g.constant(x2)?;
                let e1 = model.encode(g, a, ForwardMode::train())?.embedding;
                let z1 = expander.forward(g, &mut model.store, e1, BnMode::Train)?;
                let e2 = model.encode(g, b, ForwardMode::train())?.embedding;
                let z2 = expander.forward(g, &mut model.store, e2, BnMode::Train)?;
                Ok((vicreg_losses(g, z1, z2, cfg)?, z1, z2))
            };
            let (loss, z1, z2) = run(&mut g, model).map_err(|e| diverged(epoch, step, e))?;
            let grads = g.backward(loss.total).map_err(|e| diverged(epoch, step, e.into()))?;
            g.accumulate_param_grads(&grads, &mut model.store);
            opt.step(&mut model.store);

            let v = loss.values(&g);
            acc.sim += v.sim;
            acc.var += v.var;
            acc.cov += v.cov;
            acc.total += v.total;
            for z in [z1, z2] {
                for (d, x) in dim_vars.iter_mut().zip(column_variances(g.value(z))?) {
                    *d += x;
                }
            }
        }
        let n = steps as f64;
        let losses = LossValues {
            sim: acc.sim / n,
            var: acc.var / n,
            cov: acc.cov / n,
            total: acc.total / n,
        };
        if !losses.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}: {losses:?}")));
        }
        dim_vars.iter_mut().for_each(|d| *d /= 2.0 * n);
        let min_dim_var = dim_vars.iter().cloned().fold(f64::INFINITY, f64::min);
        let n_collapsed = dim_vars.iter().filter(|&&v| v < COLLAPSE_THRESHOLD).count();
        log.push(EpochLog {
            epoch,
            losses,
            min_dim_var,
            n_collapsed,
            dim_vars,
        });
    }
    let collapse = collapse_report(&log.iter().map(|l| l.dim_vars.clone()).collect::<Vec<_>>(), COLLAPSE_THRESHOLD)?;
    Ok(PretrainOutcome { log, collapse, expander })
}

pub fn write_pretrain_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,L_sim,L_var,L_cov,L_total,min_dim_var,n_collapsed")?;
    for l in log {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            l.epoch, l.losses.sim, l.losses.var, l.losses.cov, l.losses.total, l.min_dim_var, l.n_collapsed
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Encoder plus expander weights, the architecture echo and the VICReg settings.
pub fn save_pretrained(path: &Path, model: &Model, cfg: &VICRegConfig) -> Result<()> {
    let docs = [
        ("arch.json", model.arch_json()?),
        ("vicreg.json", serde_json::to_string_pretty(cfg)?),
    ];
    checkpoint::save(path, &model.store, &[ENCODER, EXPANDER], &docs)?;
    Ok(())
}
