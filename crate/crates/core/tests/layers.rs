use cfsim::layers::*;
use cfsim_tensor::gradcheck::check;
use cfsim_tensor::{Graph, ParamKind, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar evaluation of the routing function for one sample.
fn routing_oracle(f: &Tensor<f64>, sample: usize, t: f64, r: &Tensor<f64>) -> Vec<f64> {
    let (c, k) = (f.shape()[1], r.shape()[0]);
    let p: usize = f.shape()[2..].iter().product();
    let mut z = Vec::new();
    for ch in 0..c {
        let base = (sample * c + ch) * p;
        let mut s = 0.0;
        for i in 0..p {
            s += f.data()[base + i];
        }
        z.push(s / p as f64);
    }
    z.push(t);
    (0..k)
        .map(|e| sigmoid((0..=c).map(|j| z[j] * r.data()[e * (c + 1) + j]).sum()))
        .collect()
}

#[test]
fn zero_routing_gives_half() {
    let f = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64 * 0.1);
    let a = route_weights_value(&f, Task::Remove, &Tensor::zeros(&[5, 4])).unwrap();
    assert_eq!(a.shape(), &[2, 5]);
    assert!(a.data().iter().all(|&v| v == 0.5));
}

#[test]
fn routing_hand_example() {
    let f = Tensor::full(&[1, 1, 3, 3], 1.0);
    let r = Tensor::new(vec![1, 2], vec![2.0, -2.0]).unwrap();
    let a = route_weights_value(&f, Task::Remove, &r).unwrap();
    assert_eq!(a.data(), &[0.5]);
}

#[test]
fn routing_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for task in [Task::Inject, Task::Remove] {
        let f = random(&[3, 4, 5, 6], &mut rng);
        let r = random(&[3, 5], &mut rng).scale(3.0);
        let a = route_weights_value(&f, task, &r).unwrap();
        for s in 0..3 {
            let oracle = routing_oracle(&f, s, task.label(), &r);
            for (k, o) in oracle.iter().enumerate() {
                assert!((a.get(&[s, k]) - o).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn routing_rejects_wrong_channels() {
    let f = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    assert!(route_weights_value(&f, Task::Inject, &Tensor::zeros(&[2, 2])).is_err());
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = CondConvLayer::new(&mut store, "c", 2, 3, 1, 3, 2, Activation::Identity, &mut rng).unwrap();
    assert!(condconv_forward(&store, &layer, &f, Task::Inject).is_err());
}

#[test]
fn routing_rejects_zero_experts() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(RoutingParams::new(&mut store, "r", 2, 0, &mut rng).is_err());
}

fn plain_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv(xv, wv, None);
    g.value(y).clone()
}

fn layer_with(
    dims: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    experts: usize,
    activation: Activation,
    seed: u64,
) -> (ParamStore<f64>, CondConvLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = CondConvLayer::new(&mut store, "c", dims, c_in, c_out, kernel, experts, activation, &mut rng).unwrap();
    (store, layer)
}

#[test]
fn single_expert_zero_routing_halves_kernel() {
    let (mut store, layer) = layer_with(2, 2, 3, 3, 1, Activation::Relu, 1);
    *store.get_mut(layer.routing.weight) = Tensor::zeros(&[1, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random(&[2, 2, 6, 5], &mut rng);
    let out = condconv_forward(&store, &layer, &f, Task::Inject).unwrap();
    let w = store.get(layer.experts).clone().reshape(&[3, 2, 3, 3]).unwrap();
    let expected = plain_conv(&f, &w.scale(0.5)).map(|v| v.max(0.0));
    for (a, b) in out.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mixed_kernel_equals_weighted_expert_sum() {
    let (store, layer) = layer_with(2, 3, 2, 3, 4, Activation::Identity, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = random(&[3, 3, 7, 6], &mut rng);
    for task in [Task::Inject, Task::Remove] {
        let out = condconv_forward(&store, &layer, &f, task).unwrap();
        let alpha = route_weights_value(&f, task, store.get(layer.routing.weight)).unwrap();
        let experts = store.get(layer.experts);
        for s in 0..3 {
            let x = f.index_outer(s).reshape(&[1, 3, 7, 6]).unwrap();
            let mut acc = Tensor::zeros(&[1, 2, 7, 6]);
            for k in 0..4 {
                let w = experts.index_outer(k);
                acc.add_assign(&plain_conv(&x, &w).scale(alpha.get(&[s, k])));
            }
            let got = out.index_outer(s);
            for (a, b) in got.data().iter().zip(acc.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn two_unit_experts_average() {
    let (mut store, layer) = layer_with(2, 1, 1, 1, 2, Activation::Identity, 0);
    *store.get_mut(layer.routing.weight) = Tensor::zeros(&[2, 2]);
    *store.get_mut(layer.experts) = Tensor::new(vec![2, 1, 1, 1, 1], vec![2.0, 4.0]).unwrap();
    let out = condconv_forward(&store, &layer, &Tensor::full(&[1, 1, 3, 3], 1.0), Task::Inject).unwrap();
    assert!(out.data().iter().all(|&v| v == 3.0));
}

#[test]
fn condconv_gradients_match_finite_differences() {
    let (store, layer) = layer_with(2, 2, 2, 3, 3, Activation::LeakyRelu(0.01), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = random(&[2, 2, 5, 5], &mut rng);
    let probe = random(&[2, 2, 5, 5], &mut rng);
    let loss = |store: &ParamStore<f64>, f: &Tensor<f64>| -> f64 {
        let y = condconv_forward(store, &layer, f, Task::Remove).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let fv = g.variable(f.clone());
    let y = layer.forward(&mut g, &bound, fv, Task::Remove).unwrap();
    let p = g.constant(probe.clone());
    let prod = g.mul(y, p);
    let l = g.sum(prod);
    let grads = g.backward(l);
    let report = check(|x| loss(&store, x), &f, &grads.get_or_zeros(&g, fv), None, 1e-5, 1e-3);
    assert!(report.passes(1e-4), "input: {report:?}");
    for id in [layer.experts, layer.routing.weight] {
        let analytic = grads.get_or_zeros(&g, bound[id]);
        let report = check(
            |w| {
                let mut s = store.clone();
                *s.get_mut(id) = w.clone();
                loss(&s, &f)
            },
            store.get(id),
            &analytic,
            None,
            1e-5,
            1e-3,
        );
        assert!(report.passes(1e-4), "{}: {report:?}", store.param(id).name);
    }
}

/// Parameters of a conv / ReLU / pool classifier counted from its description.
fn classifier_param_oracle(channels: &[usize], kernel_volume: usize, flat: usize, hidden: usize) -> usize {
    let mut total = 0;
    let mut c_in = 1;
    for &c in channels {
        total += c * c_in * kernel_volume + c;
        c_in = c;
    }
    total + flat * hidden + hidden + hidden + 1
}

#[test]
fn classifier_2d_layout() {
    let model = build_classifier_2d(0).unwrap();
    assert_eq!(model.arch.flat_features(), 128);
    assert_eq!(model.param_count(), classifier_param_oracle(&[2, 4, 8], 9, 128, 16));
    let batch = Tensor::from_fn(&[3, 1, 32, 32], |i| (i % 17) as f32 * 0.1);
    assert_eq!(model.logits(&batch).len(), 3);
}

#[test]
fn classifier_3d_flatten_for_cubic_input() {
    let arch = ClassifierArch::default_3d(64);
    // four pool-2 stages on 64^3 leave 4^3 voxels of 16 channels
    assert_eq!(arch.pooled_shape(), vec![4, 4, 4]);
    assert_eq!(arch.flat_features(), 1024);
    let model = LogitClassifier::<f32>::new(arch, 0).unwrap();
    assert_eq!(model.param_count(), classifier_param_oracle(&[16, 32, 64, 16], 27, 1024, 64));
}

#[test]
fn classifier_3d_single_logit_on_small_volume() {
    let model = build_classifier_3d(16, 1).unwrap();
    assert_eq!(model.arch.flat_features(), 16);
    let x = Tensor::from_fn(&[16, 16, 16], |i| ((i * 7) % 13) as f32 * 0.05);
    let p = model.classify(&x).unwrap();
    assert!(p.is_finite());
    assert!(model.classify(&Tensor::zeros(&[8, 8, 8])).is_err());
}

#[test]
fn classify_is_deterministic() {
    let model = build_classifier_2d(4).unwrap();
    let x = Tensor::from_fn(&[32, 32], |i| (i as f32 * 0.37).sin());
    assert_eq!(model.classify(&x).unwrap().to_bits(), model.classify(&x).unwrap().to_bits());
}

fn randomize_output_layer(model: &mut LogitClassifier<f64>, rng: &mut ChaCha8Rng) {
    let id = model.store.id_of("fc2.weight").unwrap();
    let shape = model.store.get(id).shape().to_vec();
    *model.store.get_mut(id) = random(&shape, rng);
}

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let mut model = build_classifier_2d(2).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    randomize_output_layer(&mut model, &mut rng);
    let x = random(&[1, 1, 32, 32], &mut rng);
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let t = model.trace(&mut g, xv);
    let p = g.sum(t.logits);
    let grads = g.backward(p);
    let idx: Vec<usize> = (0..1024).step_by(7).collect();
    let report = check(|xi| model.logits(xi)[0], &x, &grads.get_or_zeros(&g, xv), Some(&idx), 1e-5, 1e-3);
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn classifier_parameter_gradients_match_finite_differences() {
    let mut model = build_classifier_2d(5).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    randomize_output_layer(&mut model, &mut rng);
    let x = random(&[2, 1, 32, 32], &mut rng);
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let t = model.forward(&mut g, &bound, xv);
    let p = g.sum(t.logits);
    let grads = g.backward(p);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let value = model.store.get(id).clone();
        let idx: Vec<usize> = (0..value.len()).step_by((value.len() / 12).max(1)).collect();
        let report = check(
            |w| {
                let mut m = model.clone();
                *m.store.get_mut(id) = w.clone();
                m.logits(&x).iter().sum()
            },
            &value,
            &grads.get_or_zeros(&g, bound[id]),
            Some(&idx),
            1e-5,
            1e-3,
        );
        assert!(report.passes(1e-4), "{}: {report:?}", model.store.param(id).name);
    }
}

#[test]
fn simulator_encoder_channels() {
    let sim = build_simulator(OutputMode::DirectImage, 2, 0).unwrap();
    assert_eq!(sim.encoder_channels(), vec![1, 2, 4, 8]);
    assert_eq!(sim.arch.bottleneck_features(), 32);
    assert_eq!(sim.network_count(), 1);
    let sim3 = CoupledSimulator::<f32>::new(SimulatorArch::default_3d(OutputMode::WarpField, 32), 0).unwrap();
    assert_eq!(sim3.encoder_channels(), vec![16, 32, 64, 16, 16]);
    assert_eq!(sim3.arch.output_channels(), 3);
}

#[test]
fn zero_head_is_identity_in_both_modes() {
    let x = Tensor::from_fn(&[2, 1, 32, 32], |i| ((i * 31) % 97) as f32 * 0.03);
    for mode in [OutputMode::WarpField, OutputMode::DirectImage] {
        let sim = build_simulator(mode, 2, 3).unwrap();
        for task in [Task::Inject, Task::Remove] {
            let (y, fields) = sim.simulate(&x, task).unwrap();
            assert_eq!(y.data(), x.data());
            if mode == OutputMode::WarpField {
                let fields = fields.unwrap();
                assert_eq!(fields.len(), 2);
                assert!(fields.iter().all(|f| f.displacement().max_abs() == 0.0));
            }
        }
    }
}

fn randomize_head<T: cfsim_tensor::Real>(sim: &mut CoupledSimulator<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = sim
        .store
        .iter()
        .filter(|(_, p)| p.name.contains("head") && p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = sim.store.get(id).shape().to_vec();
        *sim.store.get_mut(id) = random(&shape, rng).scale(0.3).cast();
    }
}

#[test]
fn task_label_changes_output() {
    let mut sim = build_simulator(OutputMode::DirectImage, 2, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    randomize_head(&mut sim, &mut rng);
    let x = random(&[2, 1, 32, 32], &mut rng).cast::<f32>();
    let (a, _) = sim.simulate(&x, Task::Inject).unwrap();
    let (b, _) = sim.simulate(&x, Task::Remove).unwrap();
    let diff = a.zip_map(&b, |p, q| p - q).max_abs();
    assert!(diff > 0.0);
}

#[test]
fn separate_encoders_share_nothing() {
    let mut arch = SimulatorArch::default_2d(OutputMode::DirectImage);
    arch.coupling = Coupling::SeparateEncoders;
    let sim = CoupledSimulator::<f32>::new(arch, 0).unwrap();
    assert_eq!(sim.network_count(), 2);
    let names: Vec<&str> = sim.store.iter().map(|(_, p)| p.name.as_str()).collect();
    assert!(names.iter().all(|n| n.starts_with("g1.") || n.starts_with("g2.")));
    assert!(!names.iter().any(|n| n.contains("routing")));
    let half = names.iter().filter(|n| n.starts_with("g1.")).count();
    assert_eq!(2 * half, names.len());
}

#[test]
fn simulator_gradients_match_finite_differences() {
    for (mode, coupling) in [
        (OutputMode::DirectImage, Coupling::Condconv),
        (OutputMode::WarpField, Coupling::Condconv),
        (OutputMode::DirectImage, Coupling::SeparateEncoders),
    ] {
        let mut arch = SimulatorArch::default_2d(mode);
        arch.input_shape = vec![16, 16];
        arch.coupling = coupling;
        let mut sim = CoupledSimulator::<f32>::new(arch, 21).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        randomize_head(&mut sim, &mut rng);
        let x = random(&[3, 1, 16, 16], &mut rng).map(|v| v + 1.0);
        let probe = random(&[3, 1, 16, 16], &mut rng);
        let loss = |s: &CoupledSimulator<f64>| -> f64 {
            let mut g = Graph::new();
            let b = s.store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let out = s.forward(&mut g, &b, xv, Task::Remove, BnMode::Train).unwrap();
            g.value(out.image).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let bound = sim.store.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let out = sim.forward(&mut g, &bound, xv, Task::Remove, BnMode::Train).unwrap();
        let p = g.constant(probe.clone());
        let prod = g.mul(out.image, p);
        let l = g.sum(prod);
        let grads = g.backward(l);
        let ids: Vec<_> = sim
            .store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable && !p.name.starts_with("g1."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let value = sim.store.get(id).clone();
            let idx: Vec<usize> = (0..value.len()).step_by((value.len() / 4).max(1)).collect();
            let report = check(
                |w| {
                    let mut s = sim.clone();
                    *s.store.get_mut(id) = w.clone();
                    loss(&s)
                },
                &value,
                &grads.get_or_zeros(&g, bound[id]),
                Some(&idx),
                1e-5,
                1e-3,
            );
            assert!(report.passes(1e-4), "{mode:?} {}: {report:?}", sim.store.param(id).name);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut sim = build_simulator(OutputMode::WarpField, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    randomize_head(&mut sim, &mut rng);
    let hash = sim.save(dir.path()).unwrap();
    let (back, h2) = CoupledSimulator::load(dir.path()).unwrap();
    assert_eq!(hash, h2);
    assert_eq!(back, sim);
    for ((_, a), (_, b)) in sim.store.iter().zip(back.store.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 2);

    let clf = build_classifier_2d(1).unwrap();
    let cdir = dir.path().join("clf");
    clf.save(&cdir).unwrap();
    let (loaded, _) = LogitClassifier::load(&cdir).unwrap();
    assert!(loaded.is_frozen());
    assert_eq!(loaded.store, clf.store);
}

#[test]
fn checkpoint_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let clf = build_classifier_2d(1).unwrap();
    clf.save(dir.path()).unwrap();
    let path = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(LogitClassifier::load(dir.path()), Err(cfsim::Error::HashMismatch { .. })));
    assert!(CoupledSimulator::load(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn routing_weights_stay_in_unit_interval(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random(&[2, 3, 4, 4], &mut rng);
        let r = random(&[4, 4], &mut rng).scale(scale);
        let a = route_weights_value(&f, Task::Inject, &r).unwrap();
        prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
