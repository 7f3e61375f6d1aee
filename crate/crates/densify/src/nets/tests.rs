use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::check::{max_rel_err, rel_err};
use crate::tensor::{Graph, ReduceKind, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn small_cfg(dropout: f64) -> NetConfig {
    NetConfig {
        layers: 3,
        hidden: 8,
        dropout,
        heads: 4,
        reduce: ReduceKind::Max,
    }
}

fn deep_sets_model(d: usize, dropout: f64, seed: u64) -> Model {
    let cfg = small_cfg(dropout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learner = TaskLearner::new(d, &cfg, &mut rng).unwrap();
    let mixer = SetMixer::deep_sets(cfg.hidden, cfg.hidden, &mut rng);
    Model::Composed(ComposedModel::new(learner, mixer, 2).unwrap())
}

fn set_transformer_model(d: usize, dropout: f64, seed: u64) -> Model {
    let cfg = small_cfg(dropout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learner = TaskLearner::new(d, &cfg, &mut rng).unwrap();
    let mixer = SetMixer::set_transformer(cfg.hidden, cfg.hidden, cfg.heads, &mut rng).unwrap();
    Model::Composed(ComposedModel::new(learner, mixer, 2).unwrap())
}

fn forward_values(model: &Model, x: &Tensor, ctx: Option<&Tensor>, mode: Mode, seed: u64) -> Vec<f64> {
    let g = Graph::new();
    let binding = model.bind(&g);
    let xv = g.leaf(x.clone());
    let cv = ctx.map(|c| g.leaf(c.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.forward(&g, &binding, xv, cv, mode, &mut rng).unwrap();
    g.value(out.pred).data().to_vec()
}

#[test]
fn empty_context_matches_test_path_exactly() {
    let model = deep_sets_model(5, 0.5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 1, 5]);
    let empty = Tensor::zeros(&[3, 0, 5]);
    // Eval mode: dropout is the identity, so the paths agree bit-for-bit.
    let with_empty = forward_values(&model, &x, Some(&empty), Mode::Eval, 7);
    let with_none = forward_values(&model, &x, None, Mode::Eval, 8);
    let (test_pred, _) = model.predict(&x).unwrap();
    assert_eq!(with_empty, with_none);
    assert_eq!(with_empty, test_pred);
}

#[test]
fn empty_context_matches_test_path_in_train_mode_without_dropout() {
    let model = deep_sets_model(5, 0.0, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 1, 5]);
    let train = forward_values(&model, &x, None, Mode::Train, 9);
    let (test_pred, _) = model.predict(&x).unwrap();
    assert_eq!(train, test_pred);
}

#[test]
fn repeated_test_forward_is_bit_identical() {
    let model = set_transformer_model(6, 0.5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let (a, za) = model.predict(&x).unwrap();
    let (b, zb) = model.predict(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(za, zb);
}

#[test]
fn penultimate_width_is_hidden_dim_under_default_config() {
    let cfg = NetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let learner = TaskLearner::new(10, &cfg, &mut rng).unwrap();
    let mixer = SetMixer::deep_sets(cfg.hidden, cfg.hidden, &mut rng);
    let model = Model::Composed(ComposedModel::new(learner, mixer, 2).unwrap());
    let x = rand_tensor(&mut rng, &[3, 10]);
    let (_, z) = model.predict(&x).unwrap();
    assert_eq!(z.shape(), &[3, 1, 64]);
}

fn permuted_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    // Permute the set axis (axis 1) of a [B, m, D] tensor.
    let (b, m, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert_eq!(perm.len(), m);
    let mut out = vec![0.0; t.numel()];
    for bi in 0..b {
        for (j, &pj) in perm.iter().enumerate() {
            let dst = (bi * m + j) * d;
            let src = (bi * m + pj) * d;
            out[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

#[test]
fn context_permutation_leaves_prediction_unchanged() {
    for (name, model) in [
        ("deepsets", deep_sets_model(5, 0.0, 11)),
        ("settransformer", set_transformer_model(5, 0.0, 12)),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[3, 1, 5]);
        let c = rand_tensor(&mut rng, &[3, 6, 5]);
        let perm = vec![4, 0, 5, 2, 1, 3];
        let cp = permuted_rows(&c, &perm);
        let base = forward_values(&model, &x, Some(&c), Mode::Eval, 1);
        let permuted = forward_values(&model, &x, Some(&cp), Mode::Eval, 1);
        for (a, b) in base.iter().zip(&permuted) {
            assert!(rel_err(*a, *b) <= 1e-9, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn linear_reduce_mixup_with_alpha_one_equals_plain_mlp() {
    // α forced to 1 with mean reduction: the mixed input is exactly the
    // anchor, so the composed forward must agree with the bare task learner.
    let cfg = small_cfg(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let learner = TaskLearner::new(5, &cfg, &mut rng).unwrap();
    let plain = Model::Plain(learner.clone());
    let mixer = SetMixer::linear_reduce(ReduceKind::Mean, 5, cfg.hidden, false, &mut rng);
    let mixed_model = ComposedModel::new(learner, mixer, 1).unwrap();

    let x = rand_tensor(&mut rng, &[3, 1, 5]);
    let c = rand_tensor(&mut rng, &[3, 4, 5]);

    let g = Graph::new();
    let model = Model::Composed(mixed_model);
    let binding = model.bind(&g);
    let (xv, cv) = (g.leaf(x.clone()), g.leaf(c));
    let Model::Composed(cm) = &model else { unreachable!() };
    let alpha = Tensor::filled(&[3, 1, 1], 1.0);
    let mixed = cm
        .mixer
        .mix_with_alpha(&g, binding.lambda(), xv, cv, &alpha)
        .unwrap();
    let mut rng2 = ChaCha8Rng::seed_from_u64(0);
    let out = apply_layers(&g, &cm.learner, &binding, mixed, 0, 3, Mode::Eval, &mut rng2).unwrap();

    let (plain_pred, _) = plain.predict(&x).unwrap();
    assert_eq!(g.value(out.pred).data(), plain_pred.as_slice());
}

#[test]
fn linear_reduce_singleton_test_path_equals_plain_mlp() {
    let cfg = small_cfg(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let learner = TaskLearner::new(4, &cfg, &mut rng).unwrap();
    let plain = Model::Plain(learner.clone());
    let mixer = SetMixer::linear_reduce(ReduceKind::Mean, 4, cfg.hidden, false, &mut rng);
    let model = Model::Composed(ComposedModel::new(learner, mixer, 1).unwrap());
    let x = rand_tensor(&mut rng, &[5, 4]);
    let (a, _) = model.predict(&x).unwrap();
    let (b, _) = plain.predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn deep_sets_on_duplicated_element_is_rho_of_doubled_phi() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mixer = SetMixer::deep_sets(5, 8, &mut rng);
    let v = rand_tensor(&mut rng, &[1, 1, 5]);

    let g = Graph::new();
    let vars: Vec<_> = mixer.params().iter().map(|(_, t)| g.leaf((*t).clone())).collect();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let xv = g.leaf(v.clone());
    let cv = g.leaf(v.clone());
    let got = mixer.mix(&g, &vars, xv, Some(cv), &mut r).unwrap();

    // Oracle: ρ(2·φ(v)) composed by hand from the same weights.
    let SetMixer::DeepSets(ds) = &mixer else { unreachable!() };
    let g2 = Graph::new();
    let xv2 = g2.leaf(v);
    let phi0w = g2.leaf(ds.phi[0].weight.clone());
    let phi0b = g2.leaf(ds.phi[0].bias.clone());
    let phi1w = g2.leaf(ds.phi[1].weight.clone());
    let phi1b = g2.leaf(ds.phi[1].bias.clone());
    let rho0w = g2.leaf(ds.rho[0].weight.clone());
    let rho0b = g2.leaf(ds.rho[0].bias.clone());
    let rho1w = g2.leaf(ds.rho[1].weight.clone());
    let rho1b = g2.leaf(ds.rho[1].bias.clone());
    let phi = linear(&g2, g2.relu(linear(&g2, xv2, phi0w, phi0b).unwrap()), phi1w, phi1b).unwrap();
    let doubled = g2.scale(phi, 2.0);
    let rho = linear(&g2, g2.relu(linear(&g2, doubled, rho0w, rho0b).unwrap()), rho1w, rho1b).unwrap();

    assert!(max_rel_err(g.value(got).data(), g2.value(rho).data()) < 1e-12);
}

#[test]
fn linear_reduce_alpha_zero_singleton_returns_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mixer = SetMixer::linear_reduce(ReduceKind::Max, 4, 8, false, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 1, 4]);
    let c = rand_tensor(&mut rng, &[2, 1, 4]);
    let g = Graph::new();
    let (xv, cv) = (g.leaf(x), g.leaf(c.clone()));
    let out = mixer
        .mix_with_alpha(&g, &[], xv, cv, &Tensor::zeros(&[2, 1, 1]))
        .unwrap();
    assert_eq!(g.value(out).data(), c.data());
}

#[test]
fn linear_reduce_alpha_one_is_identity_for_mean_and_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor(&mut rng, &[3, 1, 6]);
    for kind in [ReduceKind::Mean, ReduceKind::Max] {
        // m = 4 keeps the mean of identical elements exact in f64.
        let c = rand_tensor(&mut rng, &[3, 4, 6]);
        let g = Graph::new();
        let (xv, cv) = (g.leaf(x.clone()), g.leaf(c));
        let out = interpolate_reduce(&g, xv, cv, &Tensor::filled(&[3, 1, 1], 1.0), kind).unwrap();
        assert_eq!(g.value(out).data(), x.data(), "{kind:?}");
    }
}

#[test]
fn prediction_is_row_independent() {
    let model = deep_sets_model(5, 0.5, 43);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let r1 = rand_tensor(&mut rng, &[1, 5]);
    let r2 = rand_tensor(&mut rng, &[1, 5]);
    let mut both = r1.data().to_vec();
    both.extend_from_slice(r2.data());
    let batch = Tensor::new(vec![2, 5], both).unwrap();
    let (pred_batch, _) = model.predict(&batch).unwrap();
    let (pred_single, _) = model.predict(&r1).unwrap();
    assert_eq!(pred_batch[0], pred_single[0]);
}

#[test]
fn feature_width_mismatch_is_reported() {
    let model = deep_sets_model(5, 0.0, 47);
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let x = rand_tensor(&mut rng, &[2, 1, 5]);
    let c = rand_tensor(&mut rng, &[2, 3, 4]);
    let g = Graph::new();
    let binding = model.bind(&g);
    let err = model
        .forward(&g, &binding, g.leaf(x), Some(g.leaf(c)), Mode::Eval, &mut rng)
        .unwrap_err();
    assert!(matches!(err, NetError::FeatureWidth { anchor: 5, context: 4 }));
}

#[test]
fn gradients_of_composed_models_match_finite_differences() {
    for model in [deep_sets_model(4, 0.0, 51), set_transformer_model(4, 0.0, 52)] {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let x = rand_tensor(&mut rng, &[3, 1, 4]);
        let c = rand_tensor(&mut rng, &[3, 2, 4]);
        let y = rand_tensor(&mut rng, &[3, 1, 1]);

        let loss_of = |m: &Model| -> f64 {
            let g = Graph::new();
            let binding = m.bind(&g);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = m
                .forward(&g, &binding, g.leaf(x.clone()), Some(g.leaf(c.clone())), Mode::Train, &mut r)
                .unwrap();
            g.value(g.mse(out.pred, g.leaf(y.clone())).unwrap()).item()
        };

        let g = Graph::new();
        let binding = model.bind(&g);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .forward(&g, &binding, g.leaf(x.clone()), Some(g.leaf(c.clone())), Mode::Train, &mut r)
            .unwrap();
        let loss = g.mse(out.pred, g.leaf(y.clone())).unwrap();
        let grads = g.grad(loss, binding.all(), false).unwrap();

        let h = 1e-4;
        let mut probe = model.clone();
        let n_params = probe.params().len();
        for pi in 0..n_params {
            let numel = probe.params()[pi].1.numel();
            for j in (0..numel).step_by((numel / 4).max(1)) {
                let base = probe.params()[pi].1.data()[j];
                probe.params_mut()[pi].1.data_mut()[j] = base + h;
                let up = loss_of(&probe);
                probe.params_mut()[pi].1.data_mut()[j] = base - h;
                let down = loss_of(&probe);
                probe.params_mut()[pi].1.data_mut()[j] = base;
                let fd = (up - down) / (2.0 * h);
                let ad = g.value(grads[pi]).data()[j];
                assert!(
                    rel_err(ad, fd) < 1e-5,
                    "param {pi} coord {j}: ad {ad} vs fd {fd}"
                );
            }
        }
    }
}

#[test]
fn checkpoint_round_trips_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = set_transformer_model(6, 0.5, 61);
    model.save(&path).unwrap();

    let mut reloaded = set_transformer_model(6, 0.5, 62);
    // Different seed, different parameters.
    assert_ne!(
        model.params()[0].1.data(),
        reloaded.params()[0].1.data()
    );
    reloaded.load(&path).unwrap();
    for ((na, ta), (nb, tb)) in model.params().iter().zip(reloaded.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }

    // Wrong architecture: shape mismatch must be reported by name.
    let mut wrong = set_transformer_model(7, 0.5, 63);
    let err = wrong.load(&path).unwrap_err();
    assert!(matches!(err, NetError::ParamShape { .. }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = small_cfg(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let learner = TaskLearner::new(5, &cfg, &mut rng).unwrap();
    // l_mix out of range.
    let mixer = SetMixer::deep_sets(cfg.hidden, cfg.hidden, &mut rng);
    assert!(ComposedModel::new(learner.clone(), mixer, 3).is_err());
    // Head count must divide hidden width.
    assert!(SetMixer::set_transformer(5, 8, 3, &mut rng).is_err());
    // Interpolation above the input slot requires the linear head.
    let bare = SetMixer::linear_reduce(ReduceKind::Max, cfg.hidden, cfg.hidden, false, &mut rng);
    assert!(ComposedModel::new(learner, bare, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn deep_sets_invariant_under_any_permutation(seed in 0u64..1000, m in 2usize..7) {
        let model = deep_sets_model(4, 0.0, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 1, 4]);
        let c = rand_tensor(&mut rng, &[2, m, 4]);
        let mut perm: Vec<usize> = (0..m).collect();
        // Fisher-Yates with the same stream.
        for i in (1..m).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let cp = permuted_rows(&c, &perm);
        let base = forward_values(&model, &x, Some(&c), Mode::Eval, 1);
        let permuted = forward_values(&model, &x, Some(&cp), Mode::Eval, 1);
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!(rel_err(*a, *b) <= 1e-9);
        }
    }
}
