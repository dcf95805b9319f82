use super::*;
use crate::rng;

fn randn(shape: [usize; 4], seed: u64) -> TensorGrid {
    let n = shape.iter().product();
    let v = rng::normal_vec(&mut rng::seeded(seed), n).into_iter().map(|x| x as Real).collect();
    TensorGrid::new(shape, v).unwrap()
}

const F64: bool = std::mem::size_of::<Real>() == 8;
const FD_EPS: f64 = if F64 { 1e-6 } else { 1e-3 };
const FD_TOL: f64 = if F64 { 1e-4 } else { 1e-2 };

fn weighted_loss(net: &Network, x: &TensorGrid, t: Option<usize>, r: &TensorGrid) -> f64 {
    let y = net.forward(x, t).unwrap();
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Relative error `|a - n| / |n|` between the analytic and central-difference
/// gradient vectors, over a strided subset of parameters and input voxels.
/// Elementwise ratios are meaningless for entries that are zero up to f32
/// round-off, so the comparison is made on whole vectors.
fn grad_check(net: &Network, x: &TensorGrid, t: Option<usize>) -> f64 {
    let y = net.forward(x, t).unwrap();
    let r = randn(y.shape(), 99);
    let tape = net.trace(x, t).unwrap();
    let mut g = vec![0.0 as Real; net.param_count()];
    let gx = net.backprop(&tape, &r, &mut g).unwrap();
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    let mut push = |a: Real, n: f64| {
        diff += (a as f64 - n).powi(2);
        norm += n * n;
    };
    let stride = (net.param_count() / 150).max(1);
    for i in (0..net.param_count()).step_by(stride) {
        let mut p = net.clone();
        let orig = p.params[i];
        p.params[i] = (orig as f64 + FD_EPS) as Real;
        let lp = weighted_loss(&p, x, t, &r);
        p.params[i] = (orig as f64 - FD_EPS) as Real;
        let lm = weighted_loss(&p, x, t, &r);
        push(g[i], (lp - lm) / (2.0 * FD_EPS));
    }
    let stride = (x.len() / 60).max(1);
    for i in (0..x.len()).step_by(stride) {
        let mut xp = x.clone();
        xp.data_mut()[i] = (x.data()[i] as f64 + FD_EPS) as Real;
        let lp = weighted_loss(net, &xp, t, &r);
        xp.data_mut()[i] = (x.data()[i] as f64 - FD_EPS) as Real;
        let lm = weighted_loss(net, &xp, t, &r);
        push(gx.data()[i], (lp - lm) / (2.0 * FD_EPS));
    }
    assert!(norm > 0.0, "gradient vanished");
    (diff / norm).sqrt()
}

fn randomize(net: &mut Network, seed: u64) {
    let n = net.param_count();
    let v = rng::normal_vec(&mut rng::seeded(seed), n);
    for (p, r) in net.params_mut().iter_mut().zip(v) {
        *p += 0.1 * r as Real;
    }
}

fn single_op_net(cin: usize, f: impl FnOnce(&mut GraphBuilder, usize) -> usize) -> Network {
    let mut b = GraphBuilder::new(cin);
    let x = b.input();
    f(&mut b, x);
    let mut net = Network::from_graph(ArchSpec::custom(), b.finish(), 5).unwrap();
    randomize(&mut net, 17);
    net
}

#[test]
fn every_layer_type_matches_finite_differences() {
    let x = randn([2, 4, 4, 4], 1);
    let cases: Vec<(&str, Network)> = vec![
        ("conv3", single_op_net(2, |b, x| b.conv(x, 3, 3, 1))),
        ("conv3 stride2", single_op_net(2, |b, x| b.conv(x, 3, 3, 2))),
        ("conv1", single_op_net(2, |b, x| b.conv(x, 2, 1, 1))),
        ("groupnorm", single_op_net(2, |b, x| b.group_norm(x))),
        ("silu", single_op_net(2, |b, x| b.silu(x))),
        ("upsample", single_op_net(2, |b, x| b.upsample(x))),
        ("add", single_op_net(2, |b, x| {
            let c = b.conv(x, 2, 3, 1);
            b.add(x, c)
        })),
        ("timebias", single_op_net(2, |b, x| b.time_bias(x))),
        ("pool+dense", single_op_net(2, |b, x| {
            let p = b.global_pool(x);
            b.dense(p, 3, false)
        })),
    ];
    for (name, net) in cases {
        let err = grad_check(&net, &x, Some(37));
        assert!(err < FD_TOL, "{name}: relative error {err}");
    }
}

#[test]
fn pipeline_architectures_match_finite_differences() {
    let specs = [
        (ArchSpec::denoiser(2, 4, 2), [2, 8, 8, 8], Some(120)),
        (ArchSpec::encoder(2, 2, 1), [1, 4, 4, 4], None),
        (ArchSpec::decoder(2, 2, 1), [2, 2, 2, 2], None),
        (ArchSpec::classifier(2, 4, 1), [2, 4, 4, 4], Some(10)),
    ];
    for (spec, shape, t) in specs {
        let mut net = Network::build(spec, 3).unwrap();
        randomize(&mut net, 4);
        let err = grad_check(&net, &randn(shape, 8), t);
        assert!(err < FD_TOL, "{spec:?}: relative error {err}");
    }
}

#[test]
fn zero_head_outputs_zero() {
    let net = Network::build(ArchSpec::denoiser(3, 4, 1), 1).unwrap();
    let y = net.forward(&randn([3, 4, 4, 4], 2), Some(500)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_eq!(y.shape(), [3, 4, 4, 4]);
}

#[test]
fn batch_has_no_cross_sample_coupling() {
    let mut net = Network::build(ArchSpec::denoiser(2, 4, 1), 1).unwrap();
    randomize(&mut net, 2);
    let a = randn([2, 4, 4, 4], 3);
    let b = randn([2, 4, 4, 4], 4);
    let single = net.forward_batch(&[a.clone(), b.clone()], Some(9)).unwrap();
    let doubled = net.forward_batch(&[a.clone(), b.clone(), a, b], Some(9)).unwrap();
    assert_eq!(&doubled[..2], &single[..]);
    assert_eq!(&doubled[2..], &single[..]);
}

#[test]
fn forward_is_bitwise_repeatable() {
    let net = Network::build(ArchSpec::encoder(4, 4, 2), 7).unwrap();
    let x = randn([1, 8, 8, 8], 1);
    assert_eq!(net.forward(&x, None).unwrap(), net.forward(&x, None).unwrap());
}

#[test]
fn unit_conv_is_affine() {
    let mut b = GraphBuilder::new(1);
    let x = b.input();
    b.conv(x, 1, 1, 1);
    let net = Network::with_params(ArchSpec::custom(), b.finish(), vec![2.5, -0.5]).unwrap();
    let x = TensorGrid::new([1, 1, 1, 1], vec![3.0]).unwrap();
    assert_eq!(net.forward(&x, None).unwrap().data(), &[2.5 * 3.0 - 0.5]);
}

#[test]
fn identity_network_gradient_is_ones() {
    let g = GraphBuilder::new(2).finish();
    let mut net = Network::from_graph(ArchSpec::custom(), g, 0).unwrap();
    let x = randn([2, 3, 3, 3], 1);
    let y = net.forward_train(&x, None).unwrap();
    assert_eq!(y, x);
    let gx = net.backward(&TensorGrid::filled(x.shape(), 1.0)).unwrap();
    assert!(gx.data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_requires_forward() {
    let mut net = Network::build(ArchSpec::encoder(2, 2, 1), 0).unwrap();
    assert!(net.backward(&TensorGrid::zeros([2, 2, 2, 2])).is_err());
}

#[test]
fn gradients_are_linear_in_loss_scale() {
    let mut net = Network::build(ArchSpec::classifier(2, 4, 1), 0).unwrap();
    randomize(&mut net, 1);
    let x = randn([2, 4, 4, 4], 2);
    let y = net.forward_train(&x, Some(3)).unwrap();
    let r = randn(y.shape(), 3);
    let g1 = net.backward(&r).unwrap();
    let p1 = net.grads().to_vec();
    net.zero_grads();
    let g3 = net.backward(&r.scale(3.0)).unwrap();
    for (a, b) in g1.data().iter().zip(g3.data()) {
        assert!((3.0 * a - b).abs() <= 1e-4 * (1.0 + b.abs()));
    }
    for (a, b) in p1.iter().zip(net.grads()) {
        assert!((3.0 * a - b).abs() <= 1e-4 * (1.0 + b.abs()));
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let net = Network::build(ArchSpec::denoiser(2, 4, 1), 0).unwrap();
    assert!(net.forward(&randn([3, 4, 4, 4], 0), Some(1)).is_err());
    assert!(net.forward(&randn([2, 4, 4, 4], 0), None).is_err());
    assert!(net.forward(&randn([2, 3, 4, 4], 0), Some(1)).is_err());
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut net = Network::build(ArchSpec::encoder(2, 2, 1), 0).unwrap();
    let before = net.params().to_vec();
    net.adam_step(&TrainConfig::default());
    assert_eq!(net.params(), &before[..]);
    assert_eq!(net.adam().step, 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut b = GraphBuilder::new(1);
    let x = b.input();
    b.conv(x, 1, 1, 1);
    let mut net = Network::with_params(ArchSpec::custom(), b.finish(), vec![1.0, 0.0]).unwrap();
    let cfg = TrainConfig { learning_rate: 0.01, ..Default::default() };
    net.accumulate(&[0.5, -2.0]);
    net.adam_step(&cfg);
    // m_hat = g, v_hat = g^2 => step = lr * g / (|g| + eps)
    let want_w = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
    let want_b = 0.0 + 0.01 * 2.0 / (2.0 + 1e-8);
    assert!((net.params()[0] as f64 - want_w).abs() < 1e-6);
    assert!((net.params()[1] as f64 - want_b).abs() < 1e-6);
    assert!(net.grads().iter().all(|&g| g == 0.0));
}

#[test]
fn adam_is_deterministic() {
    let mut a = Network::build(ArchSpec::encoder(2, 2, 1), 4).unwrap();
    let mut b = a.clone();
    let g: Vec<Real> = rng::normal_vec(&mut rng::seeded(1), a.param_count()).into_iter().map(|v| v as Real).collect();
    a.accumulate(&g);
    b.accumulate(&g);
    a.adam_step(&TrainConfig::default());
    b.adam_step(&TrainConfig::default());
    assert_eq!(a.params(), b.params());
}

#[test]
fn denoiser_training_smoke() {
    // two-layer denoiser on a fixed batch, full-batch Adam
    let mut bld = GraphBuilder::new(2);
    let x = bld.input();
    let h = bld.conv(x, 4, 3, 1);
    let h = bld.time_bias(h);
    let h = bld.silu(h);
    bld.conv(h, 2, 3, 1);
    let mut net = Network::from_graph(ArchSpec::custom(), bld.finish(), 11).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-3, ..Default::default() };
    let xs: Vec<TensorGrid> = (0..4).map(|i| randn([2, 4, 4, 4], 100 + i)).collect();
    let eps: Vec<TensorGrid> = (0..4).map(|i| randn([2, 4, 4, 4], 200 + i)).collect();
    let mut losses = Vec::new();
    for _ in 0..=50 {
        let mut loss = 0.0;
        for (x, e) in xs.iter().zip(&eps) {
            let y = net.forward_train(x, Some(250)).unwrap();
            let n = y.len() as f64;
            loss += y.data().iter().zip(e.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n;
            let g = y.zip_map(e, |a, b| 2.0 * (a - b) / (n as Real) / 4.0).unwrap();
            net.backward(&g).unwrap();
        }
        losses.push(loss / 4.0);
        net.adam_step(&cfg);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut net = Network::build(ArchSpec::classifier(2, 4, 1), 2).unwrap();
    net.accumulate(&vec![0.1; net.param_count()]);
    net.adam_step(&TrainConfig::default());
    let mut buf = Vec::new();
    NetCodec::encode(&net, true, &mut buf);
    let (back, used) = NetCodec::decode(&buf).unwrap();
    assert_eq!(used, buf.len());
    let as_f32 = |v: &[Real]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    assert_eq!(back.graph(), net.graph());
    assert_eq!(as_f32(back.params()), as_f32(net.params()));
    assert_eq!(as_f32(&back.adam().m), as_f32(&net.adam().m));
    assert_eq!(back.adam().step, net.adam().step);
    let mut lite = Vec::new();
    NetCodec::encode(&net, false, &mut lite);
    let (back, _) = NetCodec::decode(&lite).unwrap();
    assert_eq!(as_f32(back.params()), as_f32(net.params()));
    assert_eq!(back.adam().step, 0);

    let mut wrong = buf.clone();
    wrong[0] = b'M';
    assert!(NetCodec::decode(&wrong).is_err());
    assert!(NetCodec::decode(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn custom_graph_checkpoint() {
    let net = single_op_net(2, |b, x| {
        let p = b.global_pool(x);
        b.dense(p, 3, false)
    });
    let mut buf = Vec::new();
    NetCodec::encode(&net, false, &mut buf);
    let back = NetCodec::decode(&buf).unwrap().0;
    for (a, b) in back.params().iter().zip(net.params()) {
        assert_eq!(*a as f32, *b as f32);
    }
}

#[test]
fn architecture_shapes() {
    let enc = Network::build(ArchSpec::encoder(8, 4, 2), 0).unwrap();
    let z = enc.forward(&randn([1, 16, 16, 16], 0), None).unwrap();
    assert_eq!(z.shape(), [8, 4, 4, 4]);
    let dec = Network::build(ArchSpec::decoder(8, 4, 2), 0).unwrap();
    assert_eq!(dec.forward(&z, None).unwrap().shape(), [1, 16, 16, 16]);
    let clf = Network::build(ArchSpec::classifier(8, 4, 2), 0).unwrap();
    assert_eq!(clf.forward(&z, Some(3)).unwrap().shape(), [2, 1, 1, 1]);
}
