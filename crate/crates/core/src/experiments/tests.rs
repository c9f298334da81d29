use super::*;
use crate::checkpoint::{decode_checkpoint, encode_checkpoint, usa_tensors};
use crate::data::{generate_shapes_corpus, SegMap};
use crate::metrics::miou;
use crate::trainer::Mode;
use crate::usa::downsample_labels;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn small_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        k_classes: 3,
        depth: 2,
        width: 4,
        f_emb: 4,
        batch_size: 2,
        patch: 16,
        epochs: 1,
        steps_per_epoch: Some(4),
        decay_epochs: vec![],
        ..TrainConfig::default()
    }
}

fn corpus() -> Corpus {
    let mut c = generate_shapes_corpus(6, (32, 32), 3, 2).unwrap();
    c.assign_splits(4, 0);
    c
}

fn usa() -> UsaModule<f32> {
    UsaModule::random(3, 4, 3, 1).unwrap()
}

fn csv_bytes(r: &ExperimentResult) -> Vec<u8> {
    let mut b = Vec::new();
    r.write_csv(&mut b).unwrap();
    b
}

#[test]
fn identity_at_zero_noise_is_infinite_and_rows_are_deterministic() {
    let c = corpus();
    let test = test_items(&c);
    let run = || {
        run_denoising_eval(&[NamedRestorer::identity(), NamedRestorer::oracle()], &test, &[0.0, 25.0], 3, &usa(), None)
            .unwrap()
    };
    let r = run();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.rows[0].psnr, Some(f64::INFINITY));
    assert_eq!(r.rows[3].psnr, Some(f64::INFINITY));
    let p25 = r.rows[1].psnr.unwrap();
    assert!(p25 > 19.0 && p25 < 24.0, "{p25}");
    let bytes = csv_bytes(&r);
    assert_eq!(bytes, csv_bytes(&run()));
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.starts_with("experiment,condition,seed,sigma,psnr,ssim,niqe,entropy,miou,p_value\n"));
    assert!(text.contains(",inf,"));
}

#[test]
fn aggregates_recompute_from_rows() {
    let rows: Vec<ResultRow> = (0..5)
        .map(|i| ResultRow {
            psnr: Some(20.0 + i as f64 * 0.37),
            miou: if i == 2 { None } else { Some(0.1 * i as f64) },
            ..ResultRow::new("x", if i % 2 == 0 { "a" } else { "b" }, i, Some(25.0))
        })
        .collect();
    let r = ExperimentResult::new("x", rows.clone());
    for cond in ["a", "b"] {
        let ps: Vec<f64> = rows.iter().filter(|r| r.condition == cond).map(|r| r.psnr.unwrap()).collect();
        let n = ps.len() as f64;
        let mean = ps.iter().sum::<f64>() / n;
        let var = ps.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0);
        let agg = r.aggregate_of(cond, "psnr").unwrap();
        assert!((agg.mean - mean).abs() < 1e-9 && (agg.variance - var).abs() < 1e-9);
    }
    assert_eq!(r.aggregate_of("a", "miou").unwrap().n, 2);
    assert!(r.aggregate_of("a", "ssim").is_none());
}

#[test]
fn checkpoint_models_reload_for_evaluation() {
    let c = corpus();
    let out = train(&small_cfg(Mode::Usaid), &c).unwrap();
    let bytes = encode_checkpoint(&out.checkpoint.tensors, &out.checkpoint.meta).unwrap();
    let loaded = model_from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(loaded.model.denoiser, out.model.denoiser);
    assert_eq!(usa_tensors(&loaded.model.usa), usa_tensors(&out.model.usa));
    assert_eq!(loaded.config, small_cfg(Mode::Usaid));
}

#[test]
fn k_ablation_rows_and_failures() {
    let c = corpus();
    let r = run_k_ablation(&[2], &small_cfg(Mode::Usaid), &c, 25.0, 0, None).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.rows[0].entropy.unwrap() <= 2f64.ln() + 1e-12);
    let bad = TrainConfig { batch_norm: true, ..small_cfg(Mode::Usaid) };
    let r = run_k_ablation(&[2, 3], &bad, &c, 25.0, 0, None).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!(r.rows.iter().all(|row| row.condition.ends_with(":failed") && row.psnr.is_none()));
    assert!(run_k_ablation(&[1], &small_cfg(Mode::Usaid), &c, 25.0, 0, None).is_err());
}

#[test]
fn permutation_arms_share_initialization() {
    let c = corpus();
    let k = 3.0f64;
    let cfg = small_cfg(Mode::SegSupervised);
    let rep = run_permutation_experiment(&cfg, &c, &[0.5 * k.ln(), 0.0], &[0, 1, 2]).unwrap();
    assert_eq!(rep.curves.len(), 9);
    for seed in 0..3 {
        let first: Vec<f64> = Arm::ALL.iter().map(|a| rep.curve(*a, seed).unwrap()[0]).collect();
        for f in &first {
            assert!((f - k.ln()).abs() < 0.05, "{first:?}");
        }
    }
    assert!(rep.steps.iter().filter(|s| s.tau == 0.0).all(|s| s.steps.is_none()));
    assert_eq!(rep.median_steps(Arm::True, 0.0), f64::INFINITY);
    assert!(run_permutation_experiment(&cfg, &c, &[1.0], &[0, 1]).is_err());
}

#[test]
fn constant_targets_give_identical_arms() {
    let mut c = corpus();
    for it in &mut c.items {
        let (h, w) = (it.image.height, it.image.width);
        it.labels = Some(SegMap::constant(h, w, 3, 1));
    }
    let rep = run_permutation_experiment(&small_cfg(Mode::SegSupervised), &c, &[0.5], &[0, 1, 2]).unwrap();
    for seed in 0..3 {
        let t = rep.curve(Arm::True, seed).unwrap();
        assert_eq!(t, rep.curve(Arm::Blocks, seed).unwrap());
        assert_eq!(t, rep.curve(Arm::Pixels, seed).unwrap());
    }
}

#[test]
fn downstream_oracle_row_equals_clean_segmentation() {
    let c = corpus();
    let seg_cfg = small_cfg(Mode::SegSupervised);
    let rep = run_downstream_seg(&[], &seg_cfg, &c, 25.0, 4).unwrap();
    let test = test_items(&c);
    let mut clean = 0.0;
    for it in &test.items {
        let pred = usa_forward(&rep.segmenter, &it.image).unwrap().argmax();
        clean += miou(&pred, &downsample_labels(it.labels.as_ref().unwrap(), 4).unwrap(), 3).unwrap();
    }
    clean /= test.len() as f64;
    let oracle = rep.result.condition("oracle").next().unwrap().miou.unwrap();
    assert_eq!(oracle, clean);
    assert!(rep.result.condition("noisy").next().unwrap().miou.is_some());
}

#[test]
fn paired_t_test_matches_integrated_density() {
    let a = [3.0, 5.0, 4.0, 8.0, 6.5];
    let b = [2.0, 3.0, 1.0, 4.0, 4.0];
    let t = paired_t_test(&a, &b).unwrap();
    // d = [1, 2, 3, 4, 2.5]
    let d = [1.0, 2.0, 3.0, 4.0, 2.5];
    let mean = d.iter().sum::<f64>() / 5.0;
    let sd = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0).sqrt();
    let t_ref = mean / (sd / 5f64.sqrt());
    assert!((t.t - t_ref).abs() < 1e-12);
    // two-sided tail of Student's t with 4 dof by Simpson integration of the
    // density from |t| to a far cutoff
    let nu = 4.0f64;
    let c = (statrs::function::gamma::ln_gamma((nu + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(nu / 2.0))
    .exp()
        / (nu * std::f64::consts::PI).sqrt();
    let pdf = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let (lo, hi, n) = (t_ref, 2000.0, 2_000_000);
    let hstep = (hi - lo) / n as f64;
    let mut s = pdf(lo) + pdf(hi);
    for i in 1..n {
        s += pdf(lo + i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let p_ref = 2.0 * s * hstep / 3.0;
    assert!((t.p_value - p_ref).abs() < 1e-6, "{} vs {p_ref}", t.p_value);
    assert_eq!(t.a_at_least_b, 5);
}

#[test]
fn self_comparison_is_degenerate() {
    let a = [1.0, 2.0, 3.0];
    let t = paired_t_test(&a, &a).unwrap();
    assert!(t.degenerate && t.p_value == 1.0 && t.mean_diff == 0.0);
    let b = [0.0, 1.0, 2.0];
    let t = paired_t_test(&a, &b).unwrap();
    assert!(t.degenerate && t.p_value == 0.0);
    assert!(paired_t_test(&a[..1], &b[..1]).is_err());
    assert!(paired_t_test(&a, &b[..2]).is_err());
}

/// Streams share a per-item base level (the paired structure); each adds
/// its own measurement noise of 0.2σ, and `b` is shifted by `effect`·σ.
fn rejection_rate(effect: f64, trials: usize, seed: u64) -> f64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, 0.2).unwrap();
    let mut hits = 0;
    for _ in 0..trials {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..10 {
            let m: f64 = base.sample(&mut rng);
            a.push(m + noise.sample(&mut rng));
            b.push(m + effect + noise.sample(&mut rng));
        }
        if paired_t_test(&a, &b).unwrap().p_value < 0.05 {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

#[test]
fn t_test_power_and_size() {
    assert!(rejection_rate(0.5, 100, 1) >= 0.95);
    let null = rejection_rate(0.0, 500, 2);
    assert!((null - 0.05).abs() <= 0.03, "{null}");
}

#[test]
fn significance_over_noise_runs() {
    let c = corpus();
    let test = test_items(&c);
    let u = usa();
    let net = Denoiser::init(2, 4, 3, 5).unwrap();
    let restorers = [NamedRestorer::identity(), NamedRestorer::identity(), NamedRestorer::net("net", net)];
    let p = Pipeline::Denoise { restorers: &restorers, testset: &test, sigma: 25.0, usa: &u };
    let rep = run_significance(&p, 3, 9).unwrap();
    assert_eq!(rep.methods.len(), 3);
    assert_eq!(rep.pairs.len(), 3);
    assert!(rep.pairs[0].degenerate && rep.pairs[0].p_value == 1.0);
    assert!(rep.methods[0].variance > 0.0);
    assert!(rep.pairs.iter().all(|t| (0.0..=1.0).contains(&t.p_value)));
    let r = rep.to_result();
    assert_eq!(r.rows.len(), 9 + 3);
    let mut buf = Vec::new();
    rep.write_summary_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().contains("variance_a_over_noise_runs"));
    assert!(run_significance(&p, 1, 9).is_err());
}

#[test]
fn plots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    plots::line_plot(dir.path().join("l.png"), &[vec![1.0, 0.5, 0.2], vec![1.0, f64::INFINITY, 0.9]]).unwrap();
    plots::bar_plot(dir.path().join("b.png"), &[0.3, 0.7, -0.1]).unwrap();
    assert!(dir.path().join("l.png").exists() && dir.path().join("b.png").exists());
}

#[test]
fn results_save_to_directory() {
    let dir = tempfile::tempdir().unwrap();
    let r = ExperimentResult::new("x", vec![ResultRow::new("x", "a", 0, None)]);
    r.save(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "x,a,0,,,,,,,");
}

#[test]
fn threshold_uses_trailing_mean() {
    use permutation::{first_below, SMOOTHING_WINDOW};
    let w = SMOOTHING_WINDOW;
    // one lucky batch does not count
    let mut c = vec![1.0; 3 * w];
    c[5] = 0.0;
    assert_eq!(first_below(&c, 0.5), None);
    // a step down to 0 is reached once half the window has passed it
    let c: Vec<f64> = (0..3 * w).map(|i| if i < w { 1.0 } else { 0.0 }).collect();
    assert_eq!(first_below(&c, 0.5), Some(w + w / 2 - 1));
    assert_eq!(first_below(&c[..w - 1], 10.0), None);
    assert_eq!(first_below(&c, 10.0), Some(w - 1));
}
