use cfsim::layers::{ClassifierArch, LogitClassifier, LogitModel, ModelTrace};
use cfsim::saliency::*;
use cfsim::synthdata::{gen_dataset, Group, Split};
use cfsim_tensor::gradcheck::check;
use cfsim_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `p = <w, X>`; the only target layer is the input itself.
struct Linear {
    w: Tensor<f64>,
}

impl LogitModel<f64> for Linear {
    fn input_shape(&self) -> &[usize] {
        self.w.shape()
    }

    fn trace(&self, g: &mut Graph<f64>, x: Var) -> ModelTrace {
        let n = g.shape(x)[0];
        let p = self.w.len();
        let flat = g.reshape(x, &[n, p]);
        let w = g.constant(self.w.clone().reshape(&[1, p]).unwrap());
        let out = g.linear(flat, w, None);
        let logits = g.reshape(out, &[n]);
        ModelTrace { logits, layers: vec![x] }
    }
}

/// `p = v . act(W x + b)` on a flattened image, with `act` ReLU or identity.
struct TwoLayer {
    shape: Vec<usize>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    v: Tensor<f64>,
    relu: bool,
}

impl LogitModel<f64> for TwoLayer {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn trace(&self, g: &mut Graph<f64>, x: Var) -> ModelTrace {
        let n = g.shape(x)[0];
        let flat = g.reshape(x, &[n, self.w.shape()[1]]);
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let mut h = g.linear(flat, w, Some(b));
        if self.relu {
            h = g.relu(h);
        }
        let v = g.constant(self.v.clone().reshape(&[1, self.v.len()]).unwrap());
        let out = g.linear(h, v, None);
        let logits = g.reshape(out, &[n]);
        ModelTrace { logits, layers: vec![x] }
    }
}

/// Channel `c` of the target layer is `a_c * maxpool(X)`; the logit is
/// `sum_c u_c * mean(A_c)`.
struct PooledCam {
    shape: Vec<usize>,
    a: Vec<f64>,
    u: Vec<f64>,
}

impl LogitModel<f64> for PooledCam {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn trace(&self, g: &mut Graph<f64>, x: Var) -> ModelTrace {
        let n = g.shape(x)[0];
        let c = self.a.len();
        let k = g.constant(Tensor::new(vec![c, 1, 1, 1], self.a.clone()).unwrap());
        let pooled = g.max_pool2(x);
        let act = g.conv(pooled, k, None);
        let gap = g.global_avg_pool(act);
        let gap = g.reshape(gap, &[n, c]);
        let u = g.constant(Tensor::new(vec![1, c], self.u.clone()).unwrap());
        let out = g.linear(gap, u, None);
        let logits = g.reshape(out, &[n]);
        ModelTrace { logits, layers: vec![act] }
    }
}

fn two_layer(relu: bool, seed: u64) -> TwoLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TwoLayer {
        shape: vec![3, 3],
        w: random(&[5, 9], &mut rng),
        b: random(&[5], &mut rng),
        v: random(&[5], &mut rng),
        relu,
    }
}

#[test]
fn linear_model_saliency_is_its_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Linear { w: random(&[6, 5], &mut rng) };
    let x = random(&[6, 5], &mut rng);
    assert_eq!(saliency_bp(&model, &x).unwrap(), model.w);
    assert_eq!(saliency_bp(&model, &x).unwrap(), saliency_bp(&model, &x).unwrap());
    assert!(saliency_bp(&model, &random(&[5, 6], &mut rng)).is_err());
}

#[test]
fn bp_matches_finite_differences_on_trained_architecture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = ClassifierArch {
        input_shape: vec![8, 8],
        ..ClassifierArch::default_2d()
    };
    let mut model = LogitClassifier::<f64>::new(arch, 3).unwrap();
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for p in ids {
        if model.store.get(p).max_abs() == 0.0 {
            *model.store.get_mut(p) = random(model.store.get(p).shape(), &mut rng);
        }
    }
    let x = random(&[8, 8], &mut rng);
    let bp = saliency_bp(&model, &x).unwrap();
    let r = check(|x| model.classify(x).unwrap(), &x, &bp, None, 1e-6, 1e-6);
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn guided_bp_equals_bp_without_relus() {
    let model = two_layer(false, 3);
    let x = random(&[3, 3], &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(saliency_guided_bp(&model, &x).unwrap(), saliency_bp(&model, &x).unwrap());
}

#[test]
fn guided_bp_matches_hand_trace() {
    for seed in 0..20 {
        let model = two_layer(true, seed);
        let x = random(&[3, 3], &mut ChaCha8Rng::seed_from_u64(100 + seed));
        let mut bp = [0.0; 9];
        let mut guided = [0.0; 9];
        for j in 0..5 {
            let pre: f64 = (0..9).map(|i| model.w.data()[j * 9 + i] * x.data()[i]).sum::<f64>() + model.b.data()[j];
            let up = model.v.data()[j];
            let through = if pre > 0.0 { up } else { 0.0 };
            let guided_through = if pre > 0.0 && up > 0.0 { up } else { 0.0 };
            for i in 0..9 {
                bp[i] += model.w.data()[j * 9 + i] * through;
                guided[i] += model.w.data()[j * 9 + i] * guided_through;
            }
        }
        let got_bp = saliency_bp(&model, &x).unwrap();
        let got_guided = saliency_guided_bp(&model, &x).unwrap();
        for i in 0..9 {
            assert!((got_bp.data()[i] - bp[i]).abs() < 1e-10);
            assert!((got_guided.data()[i] - guided[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn dead_unit_contributes_nothing() {
    let mut model = two_layer(true, 5);
    // unit 0 sees only pixel 0 and is pushed far below zero
    for i in 0..9 {
        model.w.data_mut()[i] = if i == 0 { 1.0 } else { 0.0 };
    }
    model.b.data_mut()[0] = -100.0;
    for j in 1..5 {
        model.w.data_mut()[j * 9] = 0.0;
    }
    let x = random(&[3, 3], &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(saliency_guided_bp(&model, &x).unwrap().data()[0], 0.0);
    assert_eq!(saliency_bp(&model, &x).unwrap().data()[0], 0.0);
}

#[test]
fn grad_cam_identity_case() {
    let model = Linear { w: Tensor::full(&[5, 4], 1.0) };
    let x = random(&[5, 4], &mut ChaCha8Rng::seed_from_u64(7));
    let cam = grad_cam(&model, &x, 0).unwrap();
    // weight = mean gradient = 1, so the map is ReLU(X)
    for (c, v) in cam.data().iter().zip(x.data()) {
        assert!((c - v.max(0.0)).abs() < 1e-12);
    }
    assert!(grad_cam(&model, &x, 1).is_err());
    let neg = Linear { w: Tensor::full(&[5, 4], -1.0) };
    let pos = Tensor::from_fn(&[5, 4], |i| 1.0 + i as f64);
    assert!(grad_cam(&neg, &pos, 0).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_cam_matches_manual_computation() {
    let model = PooledCam {
        shape: vec![4, 4],
        a: vec![2.0, -1.0, 0.5],
        u: vec![0.3, 0.8, -1.2],
    };
    let x = random(&[4, 4], &mut ChaCha8Rng::seed_from_u64(8));
    // max-pooled input
    let mut m = [[0.0f64; 2]; 2];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| x.data()[(2 * r + i) * 4 + 2 * c + j])
                .fold(f64::MIN, f64::max);
        }
    }
    // dp/dA_c(v) = u_c / 4, so weight_c = u_c / 4
    let k: f64 = model.a.iter().zip(&model.u).map(|(a, u)| a * u / 4.0).sum();
    let coarse = [[(k * m[0][0]).max(0.0), (k * m[0][1]).max(0.0)], [(k * m[1][0]).max(0.0), (k * m[1][1]).max(0.0)]];
    let got = grad_cam_coarse(&model, &x, 0).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert!((got.data()[r * 2 + c] - coarse[r][c]).abs() < 1e-10);
        }
    }
    // half-pixel aligned linear up-sampling, clamped at the border
    let taps = [(0, 0, 1.0), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 1.0)];
    let lerp = |row: [f64; 2], i: usize| {
        let (lo, hi, t) = taps[i];
        let (a, b) = (row[lo], row[hi]);
        if lo == hi { a } else { (1.0 - t) * a + t * b }
    };
    let full = grad_cam(&model, &x, 0).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let top = lerp(coarse[0], c);
            let bottom = lerp(coarse[1], c);
            let want = lerp([top, bottom], r);
            assert!((full.data()[r * 4 + c] - want).abs() < 1e-10, "({r},{c})");
        }
    }
}

#[test]
fn guided_grad_cam_is_the_product() {
    let model = PooledCam {
        shape: vec![4, 4],
        a: vec![1.5, 0.7],
        u: vec![0.9, 0.4],
    };
    let x = random(&[4, 4], &mut ChaCha8Rng::seed_from_u64(9));
    let cam = grad_cam(&model, &x, 0).unwrap();
    let gbp = saliency_guided_bp(&model, &x).unwrap();
    let ggc = guided_grad_cam(&model, &x, 0).unwrap();
    for ((g, c), b) in ggc.data().iter().zip(cam.data()).zip(gbp.data()) {
        assert!((g - c * b).abs() < 1e-12);
    }
    // an all-negative cam annihilates the product
    let model = PooledCam { u: vec![-0.9, -0.4], ..model };
    let pos = Tensor::from_fn(&[4, 4], |i| 0.5 + i as f64);
    assert!(guided_grad_cam(&model, &pos, 0).unwrap().data().iter().all(|&v| v == 0.0));
    // a unit cam leaves guided BP unchanged
    let ident = Linear { w: Tensor::full(&[3, 3], 1.0) };
    let ones = Tensor::full(&[3, 3], 1.0);
    assert_eq!(guided_grad_cam(&ident, &ones, 0).unwrap(), saliency_guided_bp(&ident, &ones).unwrap());
}

#[test]
fn grad_cam_is_nonnegative_and_deterministic() {
    let data = gen_dataset(4, &[32, 32], 1).unwrap();
    let model = LogitClassifier::<f32>::new(ClassifierArch::default_2d(), 1).unwrap();
    let layer = default_cam_layer(&model);
    assert_eq!(layer, 2);
    for s in &data.samples {
        let a = grad_cam(&model, &s.pixels, layer).unwrap();
        assert!(a.data().iter().all(|&v| v >= 0.0));
        assert_eq!(a, grad_cam(&model, &s.pixels, layer).unwrap());
    }
}

/// Classifier reading only the top-left 8x8 corner.
fn corner_model() -> Linear {
    Linear {
        w: Tensor::from_fn(&[32, 32], |i| if i / 32 < 8 && i % 32 < 8 { 1.0 } else { 0.0 }),
    }
}

impl LogitModel<f32> for Linear {
    fn input_shape(&self) -> &[usize] {
        self.w.shape()
    }

    fn trace(&self, g: &mut Graph<f32>, x: Var) -> ModelTrace {
        let n = g.shape(x)[0];
        let p = self.w.len();
        let flat = g.reshape(x, &[n, p]);
        let w = g.constant(self.w.cast::<f32>().reshape(&[1, p]).unwrap());
        let out = g.linear(flat, w, None);
        let out = g.add_scalar(out, -1.0);
        let logits = g.reshape(out, &[n]);
        ModelTrace { logits, layers: vec![x] }
    }
}

#[test]
fn occluding_irrelevant_regions_costs_nothing() {
    let data = gen_dataset(10, &[32, 32], 2).unwrap();
    let idx = data.indices(Split::Test, None);
    let model = corner_model();
    let occ = occlusion_map(&model, &data, &idx, &[8, 8], 4, 0.0).unwrap();
    assert_eq!(occ.grid_shape(), vec![7, 7]);
    for flat in 0..occ.drops.len() {
        let c = occ.center(flat);
        if c[0] >= 12 || c[1] >= 12 {
            assert_eq!(occ.drops[flat], 0.0, "window centered at {c:?}");
        }
    }
    assert_eq!(occ.full_resolution(&[32, 32]).shape(), &[32, 32]);
}

/// Mean intensity minus a threshold.
struct MeanAbove(Linear, f32);

impl LogitModel<f32> for MeanAbove {
    fn input_shape(&self) -> &[usize] {
        self.0.w.shape()
    }

    fn trace(&self, g: &mut Graph<f32>, x: Var) -> ModelTrace {
        let t = LogitModel::<f32>::trace(&self.0, g, x);
        let logits = g.add_scalar(t.logits, 1.0 - self.1);
        ModelTrace { logits, ..t }
    }
}

#[test]
fn no_op_occlusion_has_zero_drop() {
    let fill = 2.5;
    let mut data = gen_dataset(6, &[16, 16], 3).unwrap();
    for s in &mut data.samples {
        s.pixels = Tensor::full(&[16, 16], fill as f32);
    }
    let model = MeanAbove(Linear { w: Tensor::full(&[16, 16], 1.0 / 256.0) }, 2.0);
    let all: Vec<usize> = (0..data.samples.len()).collect();
    let occ = occlusion_map(&model, &data, &all, &[4, 4], 4, fill).unwrap();
    assert_eq!(occ.baseline_accuracy, 0.5);
    assert!(occ.drops.iter().all(|&d| d == 0.0));
    let cases = data.indices(Split::Train, Some(Group::Case));
    assert!(occlusion_map(&model, &data, &cases, &[4, 4], 4, fill).is_err());
}

#[test]
fn occlusion_rejects_bad_windows() {
    let data = gen_dataset(4, &[16, 16], 4).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let model = Linear { w: Tensor::full(&[16, 16], 1.0) };
    assert!(occlusion_map(&model, &data, &idx, &[17, 4], 4, 0.0).is_err());
    assert!(occlusion_map(&model, &data, &idx, &[4, 4], 0, 0.0).is_err());
    assert!(occlusion_map(&model, &data, &idx, &[4, 4, 4], 4, 0.0).is_err());
}
