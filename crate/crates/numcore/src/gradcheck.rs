//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward implementation it checks.

use rand::seq::index::sample;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::init::rng;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative error with a floor so that near-zero gradients are compared absolutely:
/// `|a - n| / max(|a|, |n|, 1e-2)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = err;
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }
}

/// Compare d(loss)/d(input) for every element of every input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input_with_grad(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = perturbed
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("input {k}[{i}]"), analytic[k].data()[i], numeric);
        }
    }
    Ok(report)
}

/// Compare parameter gradients. `build` must insert parameters with
/// `trainable = true`; it receives a scratch copy of the store each call
/// (batch-norm running statistics may be mutated freely).
///
/// With `max_per_param = Some(k)`, at most `k` seeded-random elements of each
/// parameter tensor are checked; every tensor is always covered.
pub fn check_params<F>(
    store: &ParamStore,
    h: f64,
    max_per_param: Option<usize>,
    seed: u64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &mut ParamStore) -> Result<Var>,
{
    let mut scratch = store.clone();
    scratch.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, &mut scratch)?;
    let grads = g.backward(loss)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    g.accumulate_param_grads(&grads, &mut analytic_store);

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut local = s.clone();
        let mut g = Graph::new();
        let loss = build(&mut g, &mut local)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut rng = rng(seed);
    let mut work = store.clone();
    for id in store.ids() {
        let numel = store.get(id).value.numel();
        let picks: Vec<usize> = match max_per_param {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for i in picks {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = analytic_store
                .get(id)
                .grad
                .as_ref()
                .map_or(0.0, |t| t.data()[i]);
            let name = &store.get(id).name;
            report.record(|| format!("{name}[{i}]"), analytic, numeric);
        }
    }
    Ok(report)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(y), seed))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Step used by [`op_suite`].
pub const SUITE_STEP: f64 = 1e-5;

/// Finite-difference check of every differentiable op on small random inputs,
/// one named report per case. ReLU inputs are kept 0.1 away from the kink.
pub fn op_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    use crate::graph::{Activation, BnOptions};
    use crate::params::RunningStats;
    const H: f64 = SUITE_STEP;
    let mut out = Vec::new();

    out.push((
        "conv2d",
        check_inputs(&[random(&[1, 3, 4, 4], 1), random(&[2, 3, 3, 3], 2), random(&[2], 3)], H, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(g, y, 4)
        })?,
    ));
    out.push((
        "conv2d stride 2",
        check_inputs(&[random(&[2, 3, 6, 6], 5), random(&[4, 3, 3, 3], 6)], H, |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1)?;
            weighted_sum(g, y, 7)
        })?,
    ));
    out.push((
        "conv2d 1x1",
        check_inputs(&[random(&[2, 4, 3, 3], 8), random(&[5, 4, 1, 1], 9)], H, |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0)?;
            weighted_sum(g, y, 10)
        })?,
    ));
    out.push((
        "depthwise_conv2d",
        check_inputs(&[random(&[2, 3, 5, 5], 11), random(&[3, 1, 3, 3], 12), random(&[3], 13)], H, |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weighted_sum(g, y, 14)
        })?,
    ));
    out.push((
        "batch_norm train",
        check_inputs(&[random(&[4, 3, 5, 5], 15), random(&[3], 16), random(&[3], 17)], H, |g, v| {
            let mut rs = RunningStats::new(3);
            let y = g.batch_norm(v[0], v[1], v[2], &mut rs, BnOptions::train())?;
            weighted_sum(g, y, 18)
        })?,
    ));
    out.push((
        "batch_norm eval",
        check_inputs(&[random(&[2, 3, 4, 4], 19), random(&[3], 20), random(&[3], 21)], H, |g, v| {
            let mut rs = RunningStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            let y = g.batch_norm(v[0], v[1], v[2], &mut rs, BnOptions::eval())?;
            weighted_sum(g, y, 22)
        })?,
    ));
    out.push((
        "batch_norm 1d",
        check_inputs(&[random(&[6, 4], 23), random(&[4], 24), random(&[4], 25)], H, |g, v| {
            let mut rs = RunningStats::new(4);
            let y = g.batch_norm(v[0], v[1], v[2], &mut rs, BnOptions::train())?;
            weighted_sum(g, y, 26)
        })?,
    ));
    let reference = Tensor::new(&[5], vec![-5.0, -1.0, 0.0, 1.0, 5.0])?;
    out.push((
        "mish reference points",
        check_inputs(&[reference], H, |g, v| {
            let y = g.mish(v[0])?;
            g.sum(y)
        })?,
    ));
    for (name, kind) in [("sigmoid", Activation::Sigmoid), ("tanh", Activation::Tanh), ("mish", Activation::Mish)] {
        out.push((
            name,
            check_inputs(&[random(&[3, 7], 27)], H, |g, v| {
                let y = g.activation(v[0], kind)?;
                weighted_sum(g, y, 28)
            })?,
        ));
    }
    let away = random(&[4, 5], 29).map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
    out.push((
        "relu",
        check_inputs(&[away], H, |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 30)
        })?,
    ));
    out.push((
        "linear",
        check_inputs(&[random(&[3, 16], 31), random(&[8, 16], 32), random(&[8], 33)], H, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, 34)
        })?,
    ));
    out.push((
        "pooling and channel scale",
        check_inputs(&[random(&[2, 3, 4, 4], 35), random(&[2, 3], 36)], H, |g, v| {
            let scaled = g.channel_scale(v[0], v[1])?;
            let pooled = g.adaptive_avg_pool_1x1(scaled)?;
            let gap = g.global_avg_pool(v[0])?;
            let a = weighted_sum(g, pooled, 37)?;
            let b = weighted_sum(g, gap, 38)?;
            g.add(a, b)
        })?,
    ));
    out.push((
        "matrix and elementwise",
        check_inputs(&[random(&[5, 3], 39), random(&[5, 3], 40)], H, |g, v| {
            let centered = g.center_columns(v[0])?;
            let t = g.transpose(centered)?;
            let cov = g.matmul(t, v[1])?;
            let sq = g.square(cov)?;
            let m = g.mean_rows(v[1])?;
            let pos = g.add_scalar(m, 3.0)?;
            let rt = g.sqrt(pos)?;
            let cat = g.concat_cols(rt, rt)?;
            let prod = g.mul(cat, cat)?;
            let aff = g.affine(prod, 0.3, -1.0)?;
            let flat = g.reshape(aff, &[6])?;
            let a = g.sum(sq)?;
            let b = weighted_sum(g, flat, 41)?;
            let diff = g.sub(a, b)?;
            let sc = g.scale(diff, 0.5)?;
            g.mean(sc)
        })?,
    ));
    Ok(out)
}
