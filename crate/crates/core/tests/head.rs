use dmha::autodiff::{GradCheck, Graph, NormMode, Var, BN_EPS};
use dmha::config::RunConfig;
use dmha::features::FeatureExtractor;
use dmha::head::{am_softmax_loss, cosine_logits, Head, HeadConfig};
use dmha::model::SpeakerModel;
use dmha::params::ParamStore;
use dmha::pooling::{PoolingConfig, PoolingKind};
use dmha::{rng, Error, Tensor};
use proptest::prelude::*;

fn tiny_head() -> (Head, ParamStore) {
    let head = Head::new(HeadConfig::new(8, 4, 3)).unwrap();
    let mut p = ParamStore::new();
    head.init_params(&mut p, &mut rng::stream(1, "head"));
    (head, p)
}

fn matvec(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| b[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

#[test]
fn eval_forward_matches_hand_rolled_oracle() {
    let (head, mut p) = tiny_head();
    // non-trivial running statistics and affine terms
    for (name, seed) in [("head.bn1.running_mean", 1), ("head.bn2.running_mean", 2), ("head.bn1.beta", 3), ("head.bn2.gamma", 4)] {
        *p.get_mut(name).unwrap() = Tensor::randn(&[4], 0.5, &mut rng::indexed_stream(seed, "bn", 0));
    }
    for name in ["head.bn1.running_var", "head.bn2.running_var"] {
        *p.get_mut(name).unwrap() = Tensor::uniform(&[4], 0.5, 2.0, &mut rng::stream(9, name));
    }
    let x = Tensor::randn(&[2, 8], 1.0, &mut rng::stream(2, "x"));

    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = head.forward(&mut g, &b, xv, NormMode::Eval).unwrap();

    let t = |n: &str| p.get(n).unwrap().clone();
    let bn = |v: Vec<f64>, l: &str| -> Vec<f64> {
        let (m, var, ga, be) = (
            t(&format!("{l}.running_mean")),
            t(&format!("{l}.running_var")),
            t(&format!("{l}.gamma")),
            t(&format!("{l}.beta")),
        );
        (0..4)
            .map(|i| ga.data()[i] * (v[i] - m.data()[i]) / (var.data()[i] + BN_EPS).sqrt() + be.data()[i])
            .collect()
    };
    let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
    let classes = t("head.classes");
    for n in 0..2 {
        let row = &x.data()[n * 8..(n + 1) * 8];
        let h1 = relu(bn(matvec(row, &t("head.fc1.weight"), t("head.fc1.bias").data()), "head.bn1"));
        let emb = relu(bn(matvec(&h1, &t("head.fc2.weight"), t("head.fc2.bias").data()), "head.bn2"));
        let proj = matvec(&emb, &t("head.fc3.weight"), t("head.fc3.bias").data());
        let pn = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| classes.data()[i * 3 + c]).collect();
            let cn = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = proj.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>() / (pn * cn);
            let got = g.value(out.cos_logits).data()[n * 3 + c];
            assert!((got - cos).abs() < 1e-12, "{got} vs {cos}");
        }
        for i in 0..4 {
            assert!((g.value(out.embedding).data()[n * 4 + i] - emb[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn all_zero_affine_gives_zero_embedding() {
    let (head, mut p) = tiny_head();
    for n in ["head.bn1.gamma", "head.bn2.gamma", "head.bn1.beta", "head.bn2.beta"] {
        *p.get_mut(n).unwrap() = Tensor::zeros(&[4]);
    }
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[3, 8]));
    let out = head.forward(&mut g, &b, x, NormMode::Train).unwrap();
    assert!(g.value(out.embedding).data().iter().all(|&v| v == 0.0));
}

#[test]
fn head_rejects_wrong_input_width() {
    let (head, p) = tiny_head();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[2, 7]));
    assert!(matches!(head.forward(&mut g, &b, x, NormMode::Eval), Err(Error::Shape { .. })));
}

#[test]
fn loss_examples() {
    let uniform = Tensor::full(&[2, 4], -0.2);
    assert!((am_softmax_loss(&uniform, &[0, 3], 1.0, 0.0).unwrap() - 4f64.ln()).abs() < 1e-12);

    for c in [2usize, 5, 10] {
        let mut row = vec![-1.0; c];
        row[0] = 1.0;
        let cos = Tensor::new(&[1, c], row).unwrap();
        let got = am_softmax_loss(&cos, &[0], 30.0, 0.4).unwrap();
        let t: f64 = 30.0 * (1.0 - 0.4);
        let expect = -(t.exp() / (t.exp() + (c - 1) as f64 * (-30f64).exp())).ln();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        assert!(got < 1e-15);
    }
    assert!(am_softmax_loss(&uniform, &[4, 0], 30.0, 0.4).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    // keep probabilities away from saturation so the numeric side is not rounding noise
    for (range, s) in [(0.2, 30.0), (1.0, 5.0)] {
        for seed in 0..5 {
            let cos = Tensor::uniform(&[3, 5], -range, range, &mut rng::stream(seed, "cos"));
            let labels = [seed as usize % 5, 2, 4];
            let errs = GradCheck::new(1e-5)
                .run(&[cos], |g: &mut Graph, v: &[Var]| g.am_softmax_loss(v[0], &labels, s, 0.4))
                .unwrap();
            let worst = errs.iter().cloned().fold(0.0, f64::max);
            assert!(worst <= 1e-4, "s {s} seed {seed}: {worst:e}");
        }
    }
}

#[test]
fn full_head_gradients_match_finite_differences() {
    let (head, mut store) = tiny_head();
    // zero biases can leave a projection exactly at the origin, where normalization is singular
    for (i, name) in ["head.fc1.bias", "head.fc2.bias", "head.fc3.bias"].iter().enumerate() {
        *store.get_mut(name).unwrap() = Tensor::randn(&[4], 0.5, &mut rng::indexed_stream(2, "bias", i as u64));
    }
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for seed in 0..5 {
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng::indexed_stream(seed, "hx", 0));
        let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        inputs.push(x);
        let f = |g: &mut Graph, v: &[Var]| {
            let mut all_names = names.clone();
            let mut vars = v[..names.len()].to_vec();
            for p in store.iter().filter(|p| !p.trainable) {
                all_names.push(p.name.clone());
                vars.push(g.constant(p.tensor.clone()));
            }
            let b = dmha::params::Bound::from_vars(all_names, vars);
            let out = head.forward(g, &b, v[names.len()], NormMode::Train)?;
            g.am_softmax_loss(out.cos_logits, &[0, 1, 2, 1], 30.0, 0.4)
        };
        let errs = GradCheck::new(1e-6).run(&inputs, f).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, name) in names.iter().enumerate() {
            if name == "head.fc1.bias" || name == "head.fc2.bias" {
                // batch normalization in training mode removes any per-feature shift
                assert!(grads.get(vars[i]).data().iter().all(|d| d.abs() < 1e-9), "{name}");
            } else {
                assert!(errs[i] <= 1e-4, "seed {seed} {name}: {:e}", errs[i]);
            }
        }
        assert!(errs[names.len()] <= 1e-4, "seed {seed} input: {:e}", errs[names.len()]);
    }
}

fn loss_and_grad(cos: &Tensor, labels: &[usize], s: f64, m: f64) -> (f64, Tensor) {
    let mut g = Graph::new();
    let c = g.leaf(cos.clone().with_grad(true));
    let l = g.am_softmax_loss(c, labels, s, m).unwrap();
    let grads = g.backward(l).unwrap();
    (g.value(l).item(), grads.get(c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_margin_is_scaled_cross_entropy(n in 1usize..5, c in 2usize..8, seed in 0u64..1000, s in 1.0f64..40.0) {
        let cos = Tensor::uniform(&[n, c], -1.0, 1.0, &mut rng::stream(seed, "ce"));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % c).collect();
        let got = am_softmax_loss(&cos, &labels, s, 0.0).unwrap();
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = cos.row(i).iter().map(|v| s * v).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            ce += lse - z[y];
        }
        prop_assert!((got - ce / n as f64).abs() <= 1e-12);
    }

    #[test]
    fn loss_gradient_signs(c in 2usize..8, seed in 0u64..1000, y in 0usize..8) {
        let y = y % c;
        let cos = Tensor::uniform(&[1, c], -1.0, 1.0, &mut rng::stream(seed, "sign"));
        let (_, grad) = loss_and_grad(&cos, &[y], 30.0, 0.4);
        for j in 0..c {
            if j == y {
                prop_assert!(grad.data()[j] < 0.0);
            } else {
                prop_assert!(grad.data()[j] > 0.0);
            }
        }
    }

    #[test]
    fn cosine_argmax_ignores_positive_scale(seed in 0u64..1000, alpha in 1e-3f64..1e3) {
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng::stream(seed, "x"));
        let w = Tensor::randn(&[6, 5], 1.0, &mut rng::stream(seed, "w"));
        let logits = |x: Tensor| {
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x), g.constant(w.clone()));
            let c = cosine_logits(&mut g, xv, wv).unwrap();
            g.value(c).clone()
        };
        let a = logits(x.clone());
        let b = logits(x.map(|v| alpha * v));
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        for r in 0..3 {
            let am = |t: &Tensor| (0..5).max_by(|&i, &j| t.row(r)[i].total_cmp(&t.row(r)[j])).unwrap();
            prop_assert_eq!(am(&a), am(&b));
        }
    }
}

#[test]
fn full_scale_embedding_has_400_dims() {
    let run = RunConfig::default();
    let model = SpeakerModel::init(run.model.clone(), 0).unwrap();
    let fx = FeatureExtractor::new(run.model.features.clone()).unwrap();
    let audio = Tensor::uniform(&[run.model.min_samples()], -0.3, 0.3, &mut rng::stream(0, "a")).into_data();
    let e = model.extract_embedding(&fx, &audio, 16000, "u").unwrap();
    assert_eq!(e.vector.len(), 400);
    assert!(e.vector.iter().all(|v| v.is_finite()));
    let short = &audio[..run.model.min_samples() - 1];
    let err = model.extract_embedding(&fx, short, 16000, "u").unwrap_err();
    assert!(matches!(err, Error::TooShort(_)));
    assert!(err.to_string().contains(&run.model.min_samples().to_string()));
}

#[test]
fn extraction_is_deterministic_and_k1_pooling_agrees() {
    let mut run = RunConfig::desk();
    run.model.encoder.channels = [2, 4, 8, 8];
    run.model.pooling = PoolingConfig::new(PoolingKind::DoubleMha, 1);
    let dm = SpeakerModel::init(run.model.clone(), 4).unwrap();
    run.model.pooling = PoolingConfig::new(PoolingKind::Attention, 1);
    let sa = SpeakerModel::init(run.model.clone(), 4).unwrap();
    let fx = FeatureExtractor::new(run.model.features.clone()).unwrap();
    let audio = Tensor::uniform(&[8000], -0.3, 0.3, &mut rng::stream(1, "a")).into_data();
    let e1 = dm.extract_embedding(&fx, &audio, 16000, "u").unwrap();
    let e2 = dm.extract_embedding(&fx, &audio, 16000, "u").unwrap();
    let e3 = sa.extract_embedding(&fx, &audio, 16000, "u").unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1, e3);
}
