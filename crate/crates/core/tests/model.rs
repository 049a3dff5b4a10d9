use mcvi_core::net::{ForwardMode, Model, NetConfig};
use mcvi_numcore::gradcheck::{check_inputs, check_params};
use mcvi_numcore::init::rng;
use mcvi_numcore::{Graph, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn small() -> NetConfig {
    NetConfig {
        ce_channels: 8,
        irb_channels: vec![8, 8, 12, 12],
        regressor_hidden: 6,
        ..NetConfig::default()
    }
}

#[test]
fn table_shapes_at_full_resolution() {
    let mut m = Model::new(NetConfig::default(), 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 11, 192, 192], 1)).unwrap();
    let (y, enc) = m.forward(&mut g, x, ForwardMode::eval()).unwrap();
    let t = &enc.taps;
    assert_eq!(g.shape(t.a_channel.unwrap()), [1, 11]);
    assert_eq!(g.shape(t.x_s.unwrap()), [1, 11, 192, 192]);
    assert_eq!(g.shape(t.ce_out.unwrap()), [1, 64, 96, 96]);
    for (i, v) in t.irb_outputs.iter().enumerate() {
        let c = if i < 4 { 64 } else { 96 };
        assert_eq!(g.shape(*v), [1, c, 96, 96], "IRB{}", i + 1);
    }
    assert_eq!(g.shape(enc.final_map), [1, 96, 96, 96]);
    assert_eq!(g.shape(enc.embedding), [1, 96]);
    assert_eq!(g.shape(y), [1, 1]);
}

fn end_to_end_check(cfg: NetConfig, h: f64) -> mcvi_numcore::gradcheck::GradCheckReport {
    let mut m = Model::new(cfg, 2).unwrap();
    let x = random(&[2, 11, 48, 48], 3);
    let target = Tensor::new(&[2, 1], vec![0.7, -0.4]).unwrap();
    let store = m.store.clone();
    check_params(&store, h, Some(3), 4, |g, st| {
        m.store = st.clone();
        let xv = g.constant(x.clone())?;
        let (y, _) = m.forward(g, xv, ForwardMode::train()).unwrap();
        let t = g.constant(target.clone())?;
        let d = g.sub(y, t)?;
        let sq = g.square(d)?;
        g.sum(sq)
    })
    .unwrap()
}

#[test]
fn end_to_end_parameter_gradients() {
    // a step this small rarely moves a ReLU input across zero
    let rep = end_to_end_check(NetConfig::default(), 1e-8);
    assert!(rep.checked > 200, "{rep:?}");
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn end_to_end_parameter_gradients_smooth_activation() {
    let cfg = NetConfig { irb_activation: mcvi_numcore::Activation::Mish, ..NetConfig::default() };
    let rep = end_to_end_check(cfg, 1e-6);
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn input_gradients_through_the_whole_model() {
    let mut m = Model::new(small(), 5).unwrap();
    let rep = check_inputs(&[random(&[2, 11, 6, 6], 6)], 1e-6, |g, v| {
        let (y, _) = m.forward(g, v[0], ForwardMode::train()).unwrap();
        let sq = g.square(y)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn eval_forward_is_deterministic_and_batch_invariant() {
    let mut m = Model::new(small(), 7).unwrap();
    let a = random(&[1, 11, 8, 8], 8);
    let b = random(&[1, 11, 8, 8], 9);
    let both = Tensor::stack_batch(&[&a, &b]).unwrap();
    let joint = m.predict_batch(&both).unwrap();
    let pa = m.predict_batch(&a).unwrap();
    assert_eq!(pa, m.predict_batch(&a).unwrap());
    assert_eq!(joint[0], pa[0]);
    assert_eq!(joint[1], m.predict_batch(&b).unwrap()[0]);
}

#[test]
fn attention_maps_stay_in_range() {
    let mut m = Model::new(small(), 10).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random(&[3, 11, 8, 8], 11).map(|v| 5.0 * v)).unwrap();
    let enc = m.encode(&mut g, x, ForwardMode::train()).unwrap();
    let a = g.value(enc.taps.a_channel.unwrap());
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let s = g.value(enc.taps.a_spatial.unwrap());
    assert!(s.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = Model::new(small(), 12).unwrap();
    let x = random(&[2, 11, 8, 8], 13);
    m.save(&path, &[("note.txt", "hello".into())]).unwrap();
    let (mut back, ck) = Model::load(&path).unwrap();
    assert_eq!(ck.documents["note.txt"], "hello");
    let (p, q) = (m.predict_batch(&x).unwrap(), back.predict_batch(&x).unwrap());
    for (a, b) in p.iter().zip(&q) {
        // weights are stored as float32
        assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
    }
    let bytes = std::fs::read(&path).unwrap();
    back.save(&path, &[("note.txt", "hello".into())]).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
