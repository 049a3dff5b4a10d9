use mcvi_numcore::checkpoint;
use mcvi_numcore::init::rng;
use mcvi_numcore::{BnOptions, Graph, ParamStore, RunningStats, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

#[test]
fn identity_pointwise_kernel_reproduces_input() {
    let x = random(&[2, 3, 5, 5], 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let w = g.constant(eye).unwrap();
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn zero_weights_give_zero_output() {
    let mut g = Graph::new();
    let xv = g.constant(random(&[1, 3, 4, 4], 2)).unwrap();
    let w = g.constant(Tensor::zeros(&[2, 3, 3, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2])).unwrap();
    let y = g.conv2d(xv, w, Some(b), 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let w = g.constant(Tensor::zeros(&[2, 4, 3, 3])).unwrap();
    assert!(g.conv2d(xv, w, None, 1, 1).is_err());
}

#[test]
fn depthwise_center_kernel_is_identity() {
    let x = random(&[2, 4, 6, 6], 3);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let w = g.constant(Tensor::from_fn(&[4, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 })).unwrap();
    let y = g.depthwise_conv2d(xv, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn depthwise_channel_count_mismatch_is_an_error() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let w = g.constant(Tensor::zeros(&[4, 1, 3, 3])).unwrap();
    assert!(g.depthwise_conv2d(xv, w, None, 1, 1).is_err());
}

#[test]
fn batch_norm_train_standardizes_each_channel() {
    let x = random(&[4, 3, 5, 5], 4).map(|v| 3.0 * v + 2.0);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let gamma = g.constant(Tensor::full(&[3], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[3])).unwrap();
    let mut rs = RunningStats::new(3);
    let y = g.batch_norm(xv, gamma, beta, &mut rs, BnOptions::train()).unwrap();
    let yv = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| yv.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        // eps = 1e-5 shrinks the variance by var/(var + eps)
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
    // running stats moved toward the batch stats
    assert!(rs.mean.iter().all(|&m| m > 0.0));
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let x = random(&[1, 3, 4, 4], 5);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let gamma = g.constant(Tensor::full(&[3], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[3])).unwrap();
    let mut rs = RunningStats::new(3);
    let opts = BnOptions { eps: 0.0, ..BnOptions::eval() };
    let y = g.batch_norm(xv, gamma, beta, &mut rs, opts).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-15);
    assert_eq!(rs, RunningStats::new(3));
}

#[test]
fn mish_reference_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, -20.0, 30.0]).unwrap()).unwrap();
    let y = g.mish(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    // -20 * tanh(ln(1 + e^-20)) ≈ -20 * e^-20 ≈ -4.1e-8
    assert!(v[1] < 0.0 && v[1] > -1e-7, "{}", v[1]);
    assert!((v[2] - 30.0).abs() < 1e-12);
}

#[test]
fn sigmoid_and_tanh_at_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1])).unwrap();
    let s = g.sigmoid(x).unwrap();
    let t = g.tanh(x).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn pooling_a_constant_channel_returns_the_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 4, 4], 1.75)).unwrap();
    let p = g.adaptive_avg_pool_1x1(x).unwrap();
    assert_eq!(g.shape(p), &[2, 3, 1, 1]);
    assert!(g.value(p).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
}

#[test]
fn finite_inputs_give_finite_outputs_through_every_op() {
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 3, 6, 6], 6).map(|v| v * 50.0)).unwrap();
    let w = g.constant(random(&[4, 3, 3, 3], 7)).unwrap();
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    let y = g.mish(y).unwrap();
    let y = g.sigmoid(y).unwrap();
    let p = g.global_avg_pool(y).unwrap();
    assert!(g.value(p).is_finite());
}

#[test]
fn checkpoint_round_trip_and_byte_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    store.add("enc.w", random(&[3, 2, 3, 3], 8)).unwrap();
    store.add("head.b", random(&[4], 9)).unwrap();
    let id = store
        .add_buffer("enc.bn", RunningStats { mean: vec![0.5, -0.25], var: vec![2.0, 3.0] })
        .unwrap();
    let a = dir.path().join("a.zip");
    let b = dir.path().join("b.zip");
    let docs = [("arch.json", "{\"k\":1}".to_string())];
    checkpoint::save(&a, &store, &["enc.", "head."], &docs).unwrap();
    checkpoint::save(&b, &store, &["enc.", "head."], &docs).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let ck = checkpoint::load(&a).unwrap();
    assert_eq!(ck.documents["arch.json"], "{\"k\":1}");
    let mut fresh = store.clone();
    for p in fresh.ids().collect::<Vec<_>>() {
        fresh.get_mut(p).value = Tensor::zeros(store.get(p).value.shape());
    }
    *fresh.buffer_mut(id) = RunningStats::new(2);
    assert_eq!(ck.apply(&mut fresh, "enc.").unwrap(), 1);
    let w = fresh.id("enc.w").unwrap();
    let orig = &store.get(w).value;
    assert!(fresh.get(w).value.max_abs_diff(orig) < 1e-6);
    assert_eq!(fresh.buffer(id).mean, vec![0.5, -0.25]);
    // head was not applied
    assert!(fresh.get(fresh.id("head.b").unwrap()).value.data().iter().all(|&v| v == 0.0));
}

#[test]
fn same_seed_gives_bit_identical_tensors() {
    assert_eq!(random(&[3, 4, 5], 77), random(&[3, 4, 5], 77));
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3, 5, 5], 10)).unwrap();
        let w = g.constant(random(&[2, 3, 3, 3], 11)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn depthwise_output_channel_ignores_other_input_channels(
        delta in -5.0f64..5.0, pos in 0usize..25, seed in 0u64..1000,
    ) {
        let x = random(&[1, 3, 5, 5], seed);
        let w = random(&[3, 1, 3, 3], seed + 1);
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x).unwrap();
            let wv = g.constant(w.clone()).unwrap();
            let y = g.depthwise_conv2d(xv, wv, None, 1, 1).unwrap();
            g.value(y).clone()
        };
        let base = run(x.clone());
        let mut pert = x;
        pert.data_mut()[pos] += delta; // channel 0
        let out = run(pert);
        prop_assert_eq!(&base.data()[25..], &out.data()[25..]);
    }

    #[test]
    fn checkpoint_preserves_f32_values(values in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        let n = values.len();
        store.add("p", Tensor::new(&[n], values.clone()).unwrap()).unwrap();
        let path = dir.path().join("c.zip");
        checkpoint::save(&path, &store, &[""], &[]).unwrap();
        let ck = checkpoint::load(&path).unwrap();
        for (a, b) in ck.params["p"].data().iter().zip(&values) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}
