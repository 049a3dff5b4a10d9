//! MCVI-SANet: VI-SABlock front end, inverted-residual backbone and a small
//! regression head.
//!
//! Parameters live in a [`ParamStore`] under `encoder.` and `regressor.`
//! prefixes; the self-supervised expander adds its own `expander.` entries to
//! the same store.

use std::collections::BTreeMap;
use std::path::Path;

use mcvi_numcore::init::{derive_seed, kaiming_uniform, rng, uniform_fan_in};
use mcvi_numcore::{checkpoint, Activation, BnMode, BnOptions, BufferId, Graph, ParamId, ParamStore, RunningStats, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const ENCODER: &str = "encoder.";
pub const REGRESSOR: &str = "regressor.";
pub const EXPANDER: &str = "expander.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub fre_reduction: usize,
    pub ce_channels: usize,
    pub ce_stride: usize,
    pub ce_kernel: usize,
    pub eps_std: f64,
    /// Output channels of each inverted residual block.
    pub irb_channels: Vec<usize>,
    pub irb_activation: Activation,
    pub regressor_hidden: usize,
    pub regressor_activation: Activation,
    pub use_vi_sablock: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        let mut irb_channels = vec![64; 4];
        irb_channels.extend([96; 8]);
        Self {
            in_channels: 11,
            fre_reduction: 2,
            ce_channels: 64,
            ce_stride: 2,
            ce_kernel: 3,
            eps_std: 1e-10,
            irb_channels,
            irb_activation: Activation::Relu,
            regressor_hidden: 32,
            regressor_activation: Activation::Relu,
            use_vi_sablock: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels / self.fre_reduction.max(1) == 0 || self.fre_reduction == 0 {
            return Err(invalid("FRE hidden width C / r must be at least 1"));
        }
        if self.ce_stride == 0 || self.ce_kernel % 2 == 0 {
            return Err(invalid("CE needs a positive stride and an odd kernel"));
        }
        if self.irb_channels.is_empty() || self.irb_channels.contains(&0) {
            return Err(invalid("backbone needs at least one block with positive width"));
        }
        Ok(())
    }

    pub fn fre_hidden(&self) -> usize {
        self.in_channels / self.fre_reduction
    }

    pub fn embedding_dim(&self) -> usize {
        *self.irb_channels.last().expect("validated")
    }
}

#[derive(Clone, Copy, Debug)]
struct BnHandles {
    gamma: ParamId,
    beta: ParamId,
    stats: BufferId,
}

#[derive(Clone, Debug)]
struct ViSaHandles {
    bn: BnHandles,
    fre1_w: ParamId,
    fre1_b: ParamId,
    fre2_w: ParamId,
    fre2_b: ParamId,
    dsam_w: ParamId,
    dsam_b: ParamId,
}

#[derive(Clone, Debug)]
struct IrbHandles {
    dw: ParamId,
    bn1: BnHandles,
    pw: ParamId,
    bn2: BnHandles,
    residual: bool,
}

#[derive(Clone, Debug)]
struct LinearHandles {
    w: ParamId,
    b: ParamId,
}

/// How a forward pass treats batch norm and which parameters it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub bn: BnMode,
    pub train_encoder: bool,
    pub train_head: bool,
    /// Keep gradients of the tapped intermediates (needed for Grad-CAM).
    pub retain_taps: bool,
}

impl ForwardMode {
    pub fn train() -> Self {
        Self {
            bn: BnMode::Train,
            train_encoder: true,
            train_head: true,
            retain_taps: false,
        }
    }

    /// Encoder frozen in inference mode, head trainable.
    pub fn frozen_encoder() -> Self {
        Self {
            bn: BnMode::Eval,
            train_encoder: false,
            ..Self::train()
        }
    }

    pub fn eval() -> Self {
        Self {
            bn: BnMode::Eval,
            train_encoder: false,
            train_head: false,
            retain_taps: false,
        }
    }
}

/// Intermediates exposed for inspection and attribution.
#[derive(Clone, Debug, Default)]
pub struct Taps {
    pub a_channel: Option<Var>,
    pub a_spatial: Option<Var>,
    pub x_c: Option<Var>,
    pub x_s: Option<Var>,
    pub ce_pre: Option<Var>,
    pub ce_out: Option<Var>,
    pub irb_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub embedding: Var,
    pub final_map: Var,
    pub taps: Taps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub per_module: BTreeMap<String, usize>,
    pub size_mb: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: NetConfig,
    pub store: ParamStore,
    visa: Option<ViSaHandles>,
    ce_w: ParamId,
    ce_bn: BnHandles,
    irbs: Vec<IrbHandles>,
    fc1: LinearHandles,
    fc2: LinearHandles,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    counter: u64,
}

impl Builder<'_> {
    fn next_rng(&mut self) -> rand_chacha::ChaCha8Rng {
        self.counter += 1;
        rng(derive_seed(self.seed, self.counter))
    }

    fn conv(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let fan_in = shape[1..].iter().product();
        let value = kaiming_uniform(shape, fan_in, &mut self.next_rng());
        Ok(self.store.add(name, value)?)
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<LinearHandles> {
        let w = uniform_fan_in(&[out, inp], inp, &mut self.next_rng());
        let b = uniform_fan_in(&[out], inp, &mut self.next_rng());
        Ok(LinearHandles {
            w: self.store.add(format!("{name}.w"), w)?,
            b: self.store.add(format!("{name}.b"), b)?,
        })
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<BnHandles> {
        Ok(BnHandles {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            stats: self.store.add_buffer(name, RunningStats::new(channels))?,
        })
    }
}

/// Per-sample, per-channel spatial standard deviation `sqrt(E[x²] − E[x]² + eps)`.
pub fn std_descriptor(g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
    let mu = g.adaptive_avg_pool_1x1(x)?;
    let sq = g.square(x)?;
    let m2 = g.adaptive_avg_pool_1x1(sq)?;
    let mu2 = g.square(mu)?;
    let var = g.sub(m2, mu2)?;
    let var = g.add_scalar(var, eps)?;
    Ok(g.sqrt(var)?)
}

impl Model {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            seed,
            counter: 0,
        };
        let c = cfg.in_channels;
        let visa = if cfg.use_vi_sablock {
            let h = cfg.fre_hidden();
            let bn = b.bn("encoder.visa.bn", c)?;
            let fre1 = b.linear("encoder.visa.fre1", h, 2 * c)?;
            let fre2 = b.linear("encoder.visa.fre2", c, h)?;
            let dsam_w = b.conv("encoder.visa.dsam.w", &[c, 1, 3, 3])?;
            let dsam_b = b.store.add("encoder.visa.dsam.b", Tensor::zeros(&[c]))?;
            Some(ViSaHandles {
                bn,
                fre1_w: fre1.w,
                fre1_b: fre1.b,
                fre2_w: fre2.w,
                fre2_b: fre2.b,
                dsam_w,
                dsam_b,
            })
        } else {
            None
        };
        let k = cfg.ce_kernel;
        let ce_w = b.conv("encoder.ce.w", &[cfg.ce_channels, c, k, k])?;
        let ce_bn = b.bn("encoder.ce.bn", cfg.ce_channels)?;
        let mut irbs = Vec::with_capacity(cfg.irb_channels.len());
        let mut cin = cfg.ce_channels;
        for (i, &cout) in cfg.irb_channels.iter().enumerate() {
            let p = format!("encoder.irb{}", i + 1);
            irbs.push(IrbHandles {
                dw: b.conv(&format!("{p}.dw"), &[cin, 1, 3, 3])?,
                bn1: b.bn(&format!("{p}.bn1"), cin)?,
                pw: b.conv(&format!("{p}.pw"), &[cout, cin, 1, 1])?,
                bn2: b.bn(&format!("{p}.bn2"), cout)?,
                residual: cin == cout,
            });
            cin = cout;
        }
        let fc1 = b.linear("regressor.fc1", cfg.regressor_hidden, cin)?;
        let fc2 = b.linear("regressor.fc2", 1, cfg.regressor_hidden)?;
        Ok(Self {
            cfg,
            store,
            visa,
            ce_w,
            ce_bn,
            irbs,
            fc1,
            fc2,
        })
    }

    fn p(&self, g: &mut Graph, id: ParamId, trainable: bool) -> Result<Var> {
        Ok(g.param(&self.store, id, trainable)?)
    }

    fn bn(&mut self, g: &mut Graph, x: Var, h: BnHandles, mode: ForwardMode, trainable: bool) -> Result<Var> {
        let gamma = self.p(g, h.gamma, trainable)?;
        let beta = self.p(g, h.beta, trainable)?;
        let opts = BnOptions {
            mode: mode.bn,
            ..BnOptions::train()
        };
        Ok(g.batch_norm(x, gamma, beta, self.store.buffer_mut(h.stats), opts)?)
    }

    fn linear(&self, g: &mut Graph, x: Var, h: &LinearHandles, trainable: bool) -> Result<Var> {
        let w = self.p(g, h.w, trainable)?;
        let b = self.p(g, h.b, trainable)?;
        Ok(g.linear(x, w, Some(b))?)
    }

    /// VI-SABlock followed by the channel-expansion layer.
    pub fn front_forward(&mut self, g: &mut Graph, x: Var, mode: ForwardMode, taps: &mut Taps) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(invalid(format!("expected [N, {}, H, W] input, got {shape:?}", self.cfg.in_channels)));
        }
        if shape[2] % self.cfg.ce_stride != 0 || shape[3] % self.cfg.ce_stride != 0 {
            return Err(invalid(format!("input {}x{} not divisible by CE stride {}", shape[2], shape[3], self.cfg.ce_stride)));
        }
        let t = mode.train_encoder;
        let (n, c) = (shape[0], shape[1]);
        let mut h = x;
        if let Some(v) = self.visa.clone() {
            let xp = self.bn(g, x, v.bn, mode, t)?;
            let mu = g.adaptive_avg_pool_1x1(xp)?;
            let sigma = std_descriptor(g, xp, self.cfg.eps_std)?;
            let mu = g.reshape(mu, &[n, c])?;
            let sigma = g.reshape(sigma, &[n, c])?;
            let desc = g.concat_cols(mu, sigma)?;
            let w1 = self.p(g, v.fre1_w, t)?;
            let b1 = self.p(g, v.fre1_b, t)?;
            let z = g.linear(desc, w1, Some(b1))?;
            let z = g.mish(z)?;
            let w2 = self.p(g, v.fre2_w, t)?;
            let b2 = self.p(g, v.fre2_b, t)?;
            let z = g.linear(z, w2, Some(b2))?;
            let a_channel = g.sigmoid(z)?;
            let x_c = g.channel_scale(xp, a_channel)?;
            let dw = self.p(g, v.dsam_w, t)?;
            let db = self.p(g, v.dsam_b, t)?;
            let s = g.depthwise_conv2d(x_c, dw, Some(db), 1, 1)?;
            let a_spatial = g.tanh(s)?;
            let gated = g.mul(x_c, a_spatial)?;
            let x_s = g.add(x_c, gated)?;
            taps.a_channel = Some(a_channel);
            taps.a_spatial = Some(a_spatial);
            taps.x_c = Some(x_c);
            taps.x_s = Some(x_s);
            h = x_s;
        }
        let w = self.p(g, self.ce_w, t)?;
        let pad = self.cfg.ce_kernel / 2;
        let ce_pre = g.conv2d(h, w, None, self.cfg.ce_stride, pad)?;
        if mode.retain_taps {
            g.retain_grad(ce_pre);
        }
        let y = self.bn(g, ce_pre, self.ce_bn, mode, t)?;
        let y = g.mish(y)?;
        taps.ce_pre = Some(ce_pre);
        taps.ce_out = Some(y);
        Ok(y)
    }

    fn irb_forward(&mut self, g: &mut Graph, x: Var, i: usize, mode: ForwardMode) -> Result<Var> {
        let h = self.irbs[i].clone();
        let t = mode.train_encoder;
        let dw = self.p(g, h.dw, t)?;
        let y = g.depthwise_conv2d(x, dw, None, 1, 1)?;
        let y = self.bn(g, y, h.bn1, mode, t)?;
        let y = g.activation(y, self.cfg.irb_activation)?;
        let pw = self.p(g, h.pw, t)?;
        let y = g.conv2d(y, pw, None, 1, 0)?;
        let y = self.bn(g, y, h.bn2, mode, t)?;
        if h.residual {
            Ok(g.add(x, y)?)
        } else {
            Ok(y)
        }
    }

    /// Input `[N, C, H, W]` to embedding `[N, D]`.
    pub fn encode(&mut self, g: &mut Graph, x: Var, mode: ForwardMode) -> Result<EncoderOutput> {
        let mut taps = Taps::default();
        let mut h = self.front_forward(g, x, mode, &mut taps)?;
        for i in 0..self.irbs.len() {
            h = self.irb_forward(g, h, i, mode)?;
            taps.irb_outputs.push(h);
        }
        let embedding = g.global_avg_pool(h)?;
        Ok(EncoderOutput {
            embedding,
            final_map: h,
            taps,
        })
    }

    /// Embedding `[N, D]` to prediction `[N, 1]`.
    pub fn regress(&self, g: &mut Graph, embedding: Var, mode: ForwardMode) -> Result<Var> {
        let y = self.linear(g, embedding, &self.fc1, mode.train_head)?;
        let y = g.activation(y, self.cfg.regressor_activation)?;
        self.linear(g, y, &self.fc2, mode.train_head)
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: ForwardMode) -> Result<(Var, EncoderOutput)> {
        let enc = self.encode(g, x, mode)?;
        let y = self.regress(g, enc.embedding, mode)?;
        Ok((y, enc))
    }

    /// Eval-mode predictions for a batch tensor.
    pub fn predict_batch(&mut self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let (y, _) = self.forward(&mut g, xv, ForwardMode::eval())?;
        Ok(g.value(y).data().to_vec())
    }

    /// Eval-mode embeddings `[N, D]` for a batch tensor.
    pub fn embed_batch(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let out = self.encode(&mut g, xv, ForwardMode::eval())?;
        Ok(g.value(out.embedding).clone())
    }

    /// Set the output bias, e.g. to the training label mean.
    pub fn set_output_bias(&mut self, value: f64) {
        self.store.get_mut(self.fc2.b).value = Tensor::new(&[1], vec![value]).expect("shape [1]");
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.store)
    }

    pub fn arch_json(&self) -> Result<String> {
        let count = self.param_count();
        let table: Vec<serde_json::Value> = self
            .store
            .params()
            .iter()
            .filter(|p| !p.name.starts_with(EXPANDER))
            .map(|p| serde_json::json!({"name": p.name, "shape": p.value.shape(), "count": p.value.numel()}))
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "config": self.cfg,
            "parameters": table,
            "total": count.total,
            "per_module": count.per_module,
        }))?)
    }

    /// Encoder and regressor weights plus `arch.json`, with optional extra documents.
    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut docs = vec![("arch.json", self.arch_json()?)];
        docs.extend(extra.iter().cloned());
        checkpoint::save(path, &self.store, &[ENCODER, REGRESSOR], &docs)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<(Self, checkpoint::Checkpoint)> {
        let ck = checkpoint::load(path)?;
        let arch = ck
            .documents
            .get("arch.json")
            .ok_or_else(|| Error::Invalid(format!("{}: missing arch.json", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(arch)?;
        let cfg: NetConfig = serde_json::from_value(value["config"].clone())?;
        let mut model = Self::new(cfg, 0)?;
        ck.apply(&mut model.store, ENCODER)?;
        ck.apply(&mut model.store, REGRESSOR)?;
        Ok((model, ck))
    }

    /// Copy encoder weights and statistics from another model.
    pub fn load_encoder_from(&mut self, other: &ParamStore) -> Result<()> {
        self.store.copy_from(other, ENCODER)?;
        Ok(())
    }
}

fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    let top = parts.next().unwrap_or("");
    match top {
        "encoder" => {
            let m = parts.next().unwrap_or("");
            match m {
                "visa" => "vi_sablock".into(),
                other => other.into(),
            }
        }
        other => other.into(),
    }
}

/// Parameter totals over encoder and regressor entries (the expander is excluded).
pub fn param_count(store: &ParamStore) -> ParamCount {
    let mut per_module: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for p in store.params().iter().filter(|p| !p.name.starts_with(EXPANDER)) {
        *per_module.entry(module_of(&p.name)).or_default() += p.value.numel();
        total += p.value.numel();
    }
    ParamCount {
        total,
        per_module,
        size_mb: total as f64 * 4.0 / 1e6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let m = Model::new(NetConfig::default(), 0).unwrap();
        let c = m.param_count();
        assert_eq!(c.per_module["regressor"], 96 * 32 + 32 + 32 + 1);
        assert_eq!(c.per_module["vi_sablock"], 22 + (22 * 5 + 5) + (5 * 11 + 11) + (99 + 11));
        assert_eq!(c.per_module["ce"], 64 * 11 * 9 + 128);
        assert_eq!(c.per_module["irb1"], 576 + 128 + 4096 + 128);
        assert_eq!(c.per_module["irb5"], 576 + 128 + 6144 + 192);
        assert_eq!(c.total, 109_914);
        assert!((c.size_mb - 109_914.0 * 4.0 / 1e6).abs() < 1e-12);
    }

    #[test]
    fn ablation_removes_exactly_the_block() {
        let on = Model::new(NetConfig::default(), 0).unwrap().param_count();
        let off = Model::new(NetConfig { use_vi_sablock: false, ..NetConfig::default() }, 0)
            .unwrap()
            .param_count();
        assert_eq!(on.total - off.total, on.per_module["vi_sablock"]);
    }

    #[test]
    fn wider_backbone_has_more_parameters() {
        let base = Model::new(NetConfig::default(), 0).unwrap().param_count().total;
        let mut cfg = NetConfig::default();
        cfg.irb_channels.iter_mut().for_each(|c| *c *= 2);
        assert!(Model::new(cfg, 0).unwrap().param_count().total > base);
    }

    #[test]
    fn std_descriptor_hand_cases() {
        let mut g = Graph::new();
        let mut data = vec![3.0; 16];
        data.extend((0..16).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }));
        let x = g.constant(Tensor::new(&[1, 2, 4, 4], data).unwrap()).unwrap();
        let s = std_descriptor(&mut g, x, 1e-10).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1e-5).abs() < 1e-9, "{}", v[0]);
        assert!((v[1] - (1.0f64 + 1e-10).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn std_descriptor_matches_population_std() {
        let x = random(&[2, 3, 5, 5], 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let s = std_descriptor(&mut g, xv, 1e-10).unwrap();
        for (k, chunk) in x.data().chunks(25).enumerate() {
            let m = chunk.iter().sum::<f64>() / 25.0;
            let var = chunk.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 25.0;
            assert!((g.value(s).data()[k] - (var + 1e-10).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn regressor_with_zero_weights_predicts_its_bias() {
        let mut m = Model::new(NetConfig::default(), 1).unwrap();
        for name in ["regressor.fc2.w"] {
            let id = m.store.id(name).unwrap();
            let shape = m.store.get(id).value.shape().to_vec();
            m.store.get_mut(id).value = Tensor::zeros(&shape);
        }
        m.set_output_bias(2.5);
        let preds = m.predict_batch(&random(&[3, 11, 8, 8], 2)).unwrap();
        assert_eq!(preds, vec![2.5; 3]);
    }

    #[test]
    fn rejects_wrong_channel_count_and_odd_size() {
        let mut m = Model::new(NetConfig::default(), 0).unwrap();
        assert!(m.predict_batch(&Tensor::zeros(&[1, 5, 8, 8])).is_err());
        assert!(m.predict_batch(&Tensor::zeros(&[1, 11, 7, 8])).is_err());
    }
}
