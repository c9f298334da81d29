use super::*;
use crate::data::{generate_shapes_corpus, Corpus, SegMap};
use crate::denoiser::Denoiser;
use crate::error::Error;
use crate::tensor::FeatureMap;
use crate::usa::UsaModule;
use rand::{Rng, SeedableRng};

fn tiny_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        k_classes: 2,
        depth: 2,
        width: 4,
        f_emb: 4,
        batch_size: 2,
        patch: 8,
        epochs: 2,
        steps_per_epoch: Some(3),
        decay_epochs: vec![1],
        ..TrainConfig::default()
    }
}

fn f64_model(cfg: &TrainConfig, seed: u64) -> Model<f64> {
    // larger head weights than the default init so the entropy and CE terms
    // have gradients well above finite-difference noise
    let mut usa = UsaModule::<f64>::random(3, cfg.f_emb, cfg.k_classes, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 7);
    for w in usa.head.conv.weight.iter_mut() {
        *w = rng.random_range(-0.5..0.5);
    }
    Model {
        denoiser: cfg.mode.has_denoiser().then(|| Denoiser::init(cfg.depth, cfg.width, 3, seed).unwrap()),
        usa,
    }
}

fn random_batch(n: usize, size: usize, k: usize, seed: u64) -> Vec<TrainSample<f64>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let clean: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
            let noisy = clean.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
            let labels = (0..size * size).map(|_| rng.random_range(0..k as u32)).collect();
            TrainSample {
                clean: FeatureMap::from_vec(3, size, size, clean),
                noisy: FeatureMap::from_vec(3, size, size, noisy),
                target: Some(SegMap::new(size, size, k, labels).unwrap()),
            }
        })
        .collect()
}

fn check_gradients(cfg: &TrainConfig) {
    let model = f64_model(cfg, 11);
    let batch = random_batch(2, 8, cfg.k_classes, 5);
    let tr = Trainability::for_config(cfg);
    let (_, grads) = loss_and_grads(&model, &batch, cfg).unwrap();
    let names = model.trainable_names(tr);
    assert_eq!(grads.keys().cloned().collect::<Vec<_>>(), {
        let mut n = names.clone();
        n.sort();
        n
    });
    let h = 1e-6;
    let mut checked = 0;
    for (li, (prefix, layer, trainable)) in model.layers(tr).into_iter().enumerate() {
        if !trainable {
            continue;
        }
        for (suffix, len) in [("weight", layer.weight.len()), ("bias", layer.bias.len())] {
            let g = &grads[&format!("{prefix}.{suffix}")];
            for idx in (0..len).step_by((len / 8).max(1)) {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let (_, l, _) = &mut m.layers_mut(tr)[li];
                    let p = if suffix == "weight" { &mut l.weight } else { &mut l.bias };
                    p[idx] += delta;
                    loss_and_grads(&m, &batch, cfg).unwrap().0.total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "{} {prefix}.{suffix}[{idx}]: analytic {an} vs fd {fd}", cfg.mode);
                checked += 1;
            }
        }
    }
    assert!(checked >= 10);
}

#[test]
fn gradients_match_finite_differences() {
    check_gradients(&tiny_cfg(Mode::MseOnly));
    check_gradients(&tiny_cfg(Mode::Usaid));
    check_gradients(&TrainConfig { gamma: 3.0, train_head: true, ..tiny_cfg(Mode::Usaid) });
    check_gradients(&tiny_cfg(Mode::Ssaid));
    check_gradients(&tiny_cfg(Mode::SegSupervised));
    check_gradients(&TrainConfig { train_embedding: true, ..tiny_cfg(Mode::SegSupervised) });
}

#[test]
fn composite_gradient_is_sum_of_parts() {
    let usaid = TrainConfig { gamma: 2.0, ..tiny_cfg(Mode::Usaid) };
    let mse = tiny_cfg(Mode::MseOnly);
    let model = f64_model(&usaid, 3);
    let batch = random_batch(2, 8, 2, 9);
    let (l_u, g_u) = loss_and_grads(&model, &batch, &usaid).unwrap();
    let (l_m, g_m) = loss_and_grads(&model, &batch, &mse).unwrap();
    assert!((l_u.total - (l_m.mse + 2.0 * l_u.usa)).abs() < 1e-12);
    assert!((l_u.total - l_u.recombine()).abs() < 1e-12);
    // the entropy term contributes to the denoiser gradient
    let key = "denoiser.conv0.weight";
    let diff: f64 = g_u[key].iter().zip(&g_m[key]).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
}

#[test]
fn zero_gamma_matches_mse_only_bitwise() {
    let corpus = generate_shapes_corpus(2, (24, 24), 2, 1).unwrap();
    let a = train(&TrainConfig { gamma: 0.0, ..tiny_cfg(Mode::Usaid) }, &corpus).unwrap();
    let b = train(&tiny_cfg(Mode::MseOnly), &corpus).unwrap();
    let da = a.model.denoiser.unwrap();
    let db = b.model.denoiser.unwrap();
    for (la, lb) in da.layers.iter().zip(&db.layers) {
        assert!(la.weight.iter().zip(&lb.weight).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(la.bias.iter().zip(&lb.bias).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for (ra, rb) in a.history.epochs.iter().zip(&b.history.epochs) {
        assert_eq!(ra.loss.mse.to_bits(), rb.loss.mse.to_bits());
    }
}

#[test]
fn frozen_tensors_get_no_gradient_and_do_not_move() {
    let cfg = tiny_cfg(Mode::Usaid);
    let model = f64_model(&cfg, 1);
    let (_, g) = loss_and_grads(&model, &random_batch(1, 8, 2, 1), &cfg).unwrap();
    assert!(g.keys().all(|k| k.starts_with("denoiser.")));
    let corpus = generate_shapes_corpus(2, (24, 24), 2, 1).unwrap();
    let out = train(&cfg, &corpus).unwrap();
    assert_eq!(out.embedding_hash.0, out.embedding_hash.1);
    let init = init_model(&cfg).unwrap();
    assert_eq!(init.usa, out.model.usa);

    let seg = TrainConfig { train_embedding: false, ..tiny_cfg(Mode::SegSupervised) };
    let out = train(&seg, &corpus).unwrap();
    assert_eq!(out.embedding_hash.0, out.embedding_hash.1);
    assert_ne!(init_model(&seg).unwrap().usa.head, out.model.usa.head);
}

#[test]
fn training_is_deterministic() {
    let corpus = generate_shapes_corpus(2, (24, 24), 2, 1).unwrap();
    let cfg = TrainConfig { record_steps: true, ..tiny_cfg(Mode::Usaid) };
    let a = train(&cfg, &corpus).unwrap();
    let b = train(&cfg, &corpus).unwrap();
    assert_eq!(a.checkpoint.meta["param_hash"], b.checkpoint.meta["param_hash"]);
    assert_eq!(a.history.step_losses, b.history.step_losses);
    assert_eq!(a.history.step_losses.len(), 6);
    let c = train(&TrainConfig { seed: 1, ..cfg }, &corpus).unwrap();
    assert_ne!(a.checkpoint.meta["param_hash"], c.checkpoint.meta["param_hash"]);
}

#[test]
fn zero_epochs_returns_initial_model() {
    let corpus = generate_shapes_corpus(1, (24, 24), 2, 1).unwrap();
    let cfg = TrainConfig { epochs: 0, ..tiny_cfg(Mode::Usaid) };
    let out = train(&cfg, &corpus).unwrap();
    assert!(out.history.epochs.is_empty());
    assert_eq!(out.model, init_model(&cfg).unwrap());
}

#[test]
fn labels_are_required_where_used() {
    let mut corpus = generate_shapes_corpus(1, (24, 24), 2, 1).unwrap();
    for it in &mut corpus.items {
        it.labels = None;
    }
    corpus.k_classes = None;
    for mode in [Mode::Ssaid, Mode::SegSupervised, Mode::SegPermutedBlocks] {
        assert!(matches!(train(&tiny_cfg(mode), &corpus), Err(Error::MissingLabels(_))));
    }
    assert!(train(&tiny_cfg(Mode::Usaid), &corpus).is_ok());
    assert!(matches!(train(&tiny_cfg(Mode::Usaid), &Corpus { items: vec![], ..corpus }), Err(Error::EmptyCorpus(_))));
}

#[test]
fn history_and_checkpoint_are_written() {
    let corpus = generate_shapes_corpus(2, (24, 24), 2, 1).unwrap();
    let out = train(&tiny_cfg(Mode::Ssaid), &corpus).unwrap();
    let mut buf = Vec::new();
    out.history.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("epoch,lr,mse,usa,ce,total"));
    assert_eq!(out.history.epochs[1].lr, 1e-4);
    for r in &out.history.epochs {
        assert!((r.loss.total - r.loss.recombine()).abs() < 1e-9);
    }
    let names: Vec<_> = out.checkpoint.tensors.iter().map(|t| t.name.as_str()).collect();
    assert!(names.contains(&"denoiser.conv0.weight") && names.contains(&"usa.head.weight"));
}

#[test]
fn noise_in_batches_follows_sigma_range() {
    let corpus = generate_shapes_corpus(1, (24, 24), 2, 1).unwrap();
    let cfg = TrainConfig { sigma_range: [0.0, 0.0], ..tiny_cfg(Mode::MseOnly) };
    let b = make_batch(&cfg, &corpus, 0).unwrap();
    assert!(b.iter().all(|s| s.clean == s.noisy));
    let cfg = TrainConfig { sigma_range: [25.0, 25.0], ..cfg };
    let b = make_batch(&cfg, &corpus, 0).unwrap();
    let n = b[0].clean.data.len() as f64;
    let var: f64 = b[0].clean.data.iter().zip(&b[0].noisy.data).map(|(c, x)| ((x - c) as f64).powi(2)).sum::<f64>() / n;
    assert!((var.sqrt() * 255.0 - 25.0).abs() < 5.0);
}
