//! Acceptance suite: one test per criterion (ac1 .. ac9), each printing a
//! PASS line with its measured numbers under `--nocapture`.
//!
//! The training-based criteria (ac5, ac6, ac7) share one desk-scale
//! benchmark: 32 synthetic 64x64 scenes (even indices train, odd test),
//! 2000 optimizer steps, K experts with the default temperature schedule.
//! Trained models are cached across tests keyed by (experts, entropy
//! weight, seed), so shared runs train once.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::Rng;

use moedepth::cloud::{
    confidence_mask, detect_flying_points, nn_brute, nn_bucketed, recon_metrics, unproject,
    PointCloud,
};
use moedepth::eval::{boundary_metrics, depth_metrics, extract_edges, EdgeConfig};
use moedepth::grid::{Grid, GridStack, MaskGrid};
use moedepth::mixture::{
    combine, gating_entropy, hard_limit_check, mixture_nll, total_loss, GateField, LossConfig,
    MixtureOutput,
};
use moedepth::net::{backward, forward, NetConfig, ParamStore, TemperatureSchedule};
use moedepth::rng::stream;
use moedepth::scene::{make_dataset, split_train_test, Intrinsics, Scene, SceneSpec};
use moedepth::train::{train, TrainConfig, TrainResult};

// ---------------------------------------------------------------------------
// Shared desk-scale benchmark
// ---------------------------------------------------------------------------

const BENCH_SCENES: usize = 32;
const BENCH_SIZE: usize = 64;
const BENCH_STEPS: usize = 2000;
const BENCH_FEATURES: usize = 8;
/// Constant-rate AdamW leaves a parameter random walk whose amplitude
/// scales with the rate; above ~2e-3 the induced high-frequency depth
/// jitter sits right at the Sobel threshold and drowns the boundary
/// comparison for every model. 5e-4 converges within the 2000-step budget
/// with a low jitter floor.
const BENCH_LR: f64 = 5e-4;
const BENCH_NOISE: f64 = 0.05;
/// Seeds for the entropy ablation (ac5).
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
/// Seeds for the K=4 vs K=1 comparisons (ac6, ac7).
const COMPARE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn bench_spec() -> SceneSpec {
    SceneSpec {
        height: BENCH_SIZE,
        width: BENCH_SIZE,
        noise_std: BENCH_NOISE,
        ..SceneSpec::default()
    }
}

fn bench_dataset(seed: u64) -> Arc<(Vec<Scene>, Vec<Scene>)> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<(Vec<Scene>, Vec<Scene>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(seed)
        .or_insert_with(|| {
            let scenes = make_dataset(&bench_spec(), BENCH_SCENES, seed).expect("bench dataset");
            let (train_refs, test_refs) = split_train_test(&scenes);
            Arc::new((
                train_refs.into_iter().cloned().collect(),
                test_refs.into_iter().cloned().collect(),
            ))
        })
        .clone()
}

fn bench_trained(experts: usize, lambda_e: f64, seed: u64) -> Arc<TrainResult> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64, u64), Arc<TrainResult>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (experts, lambda_e.to_bits(), seed);
    let mut guard = cache.lock().unwrap();
    guard
        .entry(key)
        .or_insert_with(|| {
            let data = bench_dataset(seed);
            let mut cfg = TrainConfig {
                net: NetConfig {
                    feature_channels: BENCH_FEATURES,
                    num_experts: experts,
                    seed,
                    ..NetConfig::default()
                },
                steps: BENCH_STEPS,
                lr: BENCH_LR,
                seed,
                ..TrainConfig::default()
            };
            cfg.loss.lambda_e = lambda_e;
            Arc::new(train(&cfg, &data.0).expect("benchmark training"))
        })
        .clone()
}

/// Hard-argmax prediction on one scene plus the forward trace.
fn hard_predict(result: &TrainResult, scene: &Scene) -> (Grid, moedepth::net::ForwardTrace) {
    let trace = forward(&result.params, &scene.input, result.final_tau).expect("forward");
    let pred = combine(trace.output().expert_depths(), trace.output().gate(), true).expect("combine");
    (pred, trace)
}

fn random_stack(rng: &mut impl Rng, k: usize, h: usize, w: usize, lo: f64, hi: f64) -> GridStack {
    GridStack::new(
        (0..k)
            .map(|_| Grid::from_fn(h, w, |_, _| rng.random_range(lo..hi)))
            .collect(),
    )
    .unwrap()
}

fn one_hot_gate(rng: &mut impl Rng, k: usize, h: usize, w: usize) -> GateField {
    let mut chans = vec![Grid::zeros(h, w); k];
    for y in 0..h {
        for x in 0..w {
            chans[rng.random_range(0..k)].set(y, x, 1.0);
        }
    }
    GateField::from_weights(GridStack::new(chans).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// AC-1: hard-assignment collapse of the mixture likelihood
// ---------------------------------------------------------------------------

#[test]
fn ac1_hard_assignment_collapse() {
    let start = Instant::now();
    let mut rng = stream(101, "ac1");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..6);
        let (h, w) = (rng.random_range(2..8), rng.random_range(2..8));
        let depths = random_stack(&mut rng, k, h, w, -5.0, 5.0);
        let gate = one_hot_gate(&mut rng, k, h, w);
        let output = MixtureOutput::new(depths, gate).unwrap();
        let gt = Grid::from_fn(h, w, |_, _| rng.random_range(-5.0..5.0));
        let sigma = rng.random_range(0.3..2.5);
        let (nll, scaled) = hard_limit_check(&output, &gt, sigma).unwrap();
        worst = worst.max((nll - scaled).abs());
        assert!(
            (nll - scaled).abs() < 1e-9,
            "one-hot NLL must equal the scaled squared error: {nll} vs {scaled}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "runtime budget: {elapsed:?}");
    println!("PASS ac1: 100 instances, max |nll - scaled_sq_err| = {worst:.3e} in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// AC-2: analytic gradients match central finite differences
// ---------------------------------------------------------------------------

#[test]
fn ac2_gradient_exactness() {
    let start = Instant::now();
    let step = 1e-6;
    let mut worst_overall: f64 = 0.0;

    for &k in &[1usize, 2, 4] {
        let mut rng = stream(200 + k as u64, "ac2");
        // Mixture NLL and entropy gradients on random fields: probe every
        // pixel of a 4x4 problem (16 probes per channel per field).
        let (h, w) = (4, 4);
        let depths = random_stack(&mut rng, k, h, w, -2.0, 2.0);
        let logits = random_stack(&mut rng, k, h, w, -2.0, 2.0);
        let tau = rng.random_range(0.4..1.5);
        let gt = Grid::from_fn(h, w, |_, _| rng.random_range(-2.0..2.0));
        let cfg = LossConfig::default();

        let nll_of = |d: &GridStack, l: &GridStack| {
            let gate = GateField::softmax(l, tau).unwrap();
            mixture_nll(&MixtureOutput::new(d.clone(), gate).unwrap(), &gt, &cfg)
                .unwrap()
                .0
        };
        let ent_of = |l: &GridStack| {
            gating_entropy(&GateField::softmax(l, tau).unwrap(), None).unwrap().0
        };
        let gate = GateField::softmax(&logits, tau).unwrap();
        let output = MixtureOutput::new(depths.clone(), gate.clone()).unwrap();
        let (_, nll_grads) = mixture_nll(&output, &gt, &cfg).unwrap();
        let (_, ent_grad) = gating_entropy(&gate, None).unwrap();

        let mut worst: f64 = 0.0;
        for c in 0..k {
            for i in 0..h * w {
                let mut probe = |plus: f64, minus: f64, analytic: f64| {
                    let num = (plus - minus) / (2.0 * step);
                    let rel = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-4);
                    worst = worst.max(rel);
                };
                let mut dp = depths.clone();
                dp.channel_mut(c).data_mut()[i] += step;
                let mut dm = depths.clone();
                dm.channel_mut(c).data_mut()[i] -= step;
                probe(nll_of(&dp, &logits), nll_of(&dm, &logits), nll_grads.expert_means.channel(c).data()[i]);

                let mut lp = logits.clone();
                lp.channel_mut(c).data_mut()[i] += step;
                let mut lm = logits.clone();
                lm.channel_mut(c).data_mut()[i] -= step;
                probe(nll_of(&depths, &lp), nll_of(&depths, &lm), nll_grads.logits.channel(c).data()[i]);
                probe(ent_of(&lp), ent_of(&lm), ent_grad.channel(c).data()[i]);
            }
        }
        assert!(worst < 1e-4, "K={k} mixture/entropy gradients: max rel {worst}");
        worst_overall = worst_overall.max(worst);

        // Full network loss: 20 probes per parameter segment on a 6x6 input.
        let net_cfg = NetConfig {
            input_channels: 3,
            feature_channels: 4,
            num_experts: k,
            kernel_size: 3,
            encoder_layers: 2,
            seed: 31 + k as u64,
        };
        let mut params = ParamStore::init(&net_cfg).unwrap();
        let input = random_stack(&mut rng, 3, 6, 6, -1.0, 1.0);
        let gt = Grid::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let loss_cfg = LossConfig {
            lambda_e: 0.01,
            ..LossConfig::default()
        };
        let eval_loss = |p: &ParamStore| {
            let trace = forward(p, &input, 0.8).unwrap();
            total_loss(trace.output(), &gt, &loss_cfg).unwrap().0.total
        };
        let trace = forward(&params, &input, 0.8).unwrap();
        let (_, grads) = total_loss(trace.output(), &gt, &loss_cfg).unwrap();
        backward(&mut params, &trace, &grads.expert_means, &grads.logits).unwrap();
        let analytic = params.grads().to_vec();

        let mut worst: f64 = 0.0;
        let segments: Vec<_> = params.segments().to_vec();
        for seg in &segments {
            for probe_idx in 0..20 {
                let idx = seg.offset + (probe_idx * 7919) % seg.len;
                let mut p = params.clone();
                p.values_mut()[idx] += step;
                let plus = eval_loss(&p);
                let mut m = params.clone();
                m.values_mut()[idx] -= step;
                let minus = eval_loss(&m);
                let num = (plus - minus) / (2.0 * step);
                let rel = (num - analytic[idx]).abs() / num.abs().max(analytic[idx].abs()).max(1e-5);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "K={k} network gradients: max rel {worst}");
        worst_overall = worst_overall.max(worst);
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "runtime budget: {elapsed:?}");
    println!("PASS ac2: max relative gradient error {worst_overall:.3e} over K in {{1,2,4}} in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// AC-3: entropy bounds and extremes
// ---------------------------------------------------------------------------

#[test]
fn ac3_entropy_bounds() {
    let mut rng = stream(300, "ac3");
    for _ in 0..1000 {
        let k = rng.random_range(1..7);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let logits = random_stack(&mut rng, k, h, w, -30.0, 30.0);
        let tau = rng.random_range(0.05..3.0);
        let gate = GateField::softmax(&logits, tau).unwrap();
        let (entropy, _) = gating_entropy(&gate, None).unwrap();
        assert!(entropy >= 0.0, "entropy must be non-negative, got {entropy}");
        assert!(
            entropy <= (k as f64).ln() + 1e-12,
            "entropy {entropy} above ln {k}"
        );
    }

    for k in 1..=6 {
        let uniform = GateField::from_weights(
            GridStack::new((0..k).map(|_| Grid::constant(3, 3, 1.0 / k as f64)).collect()).unwrap(),
        )
        .unwrap();
        let (entropy, _) = gating_entropy(&uniform, None).unwrap();
        assert!(
            (entropy - (k as f64).ln()).abs() < 1e-12,
            "uniform K={k}: {entropy}"
        );

        let mut rng2 = stream(k as u64, "ac3-onehot");
        let one_hot = one_hot_gate(&mut rng2, k, 3, 3);
        let (entropy, _) = gating_entropy(&one_hot, None).unwrap();
        assert!(entropy.abs() < 1e-12, "one-hot K={k}: {entropy}");
    }
    println!("PASS ac3: 1000 random gates within [0, ln K]; uniform and one-hot exact");
}

// ---------------------------------------------------------------------------
// AC-4: metric oracles
// ---------------------------------------------------------------------------

fn mask_of(bits: &[u8], h: usize, w: usize) -> MaskGrid {
    MaskGrid::new(h, w, bits.iter().map(|&b| b != 0).collect()).unwrap()
}

#[test]
fn ac4_metric_oracles() {
    // boundary_metrics examples.
    let a = mask_of(&[1, 1, 0, 0], 2, 2);
    let r = boundary_metrics(&a, &a).unwrap();
    assert_eq!((r.miou, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
    let b = mask_of(&[0, 0, 1, 1], 2, 2);
    let r = boundary_metrics(&a, &b).unwrap();
    assert_eq!((r.miou, r.precision, r.recall, r.f1), (0.0, 0.0, 0.0, 0.0));
    let mut pred = vec![0u8; 20];
    let mut gt = vec![0u8; 20];
    pred[..10].fill(1);
    gt[5..15].fill(1);
    let r = boundary_metrics(&mask_of(&pred, 4, 5), &mask_of(&gt, 4, 5)).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);

    // depth_metrics examples.
    let gt = Grid::from_fn(4, 4, |y, x| 1.0 + 0.5 * (y * 4 + x) as f64);
    let r = depth_metrics(&gt, &gt, false).unwrap();
    assert_eq!((r.abs_rel, r.delta_1, r.delta_2, r.delta_3), (0.0, 1.0, 1.0, 1.0));
    let doubled = Grid::from_fn(4, 4, |y, x| 2.0 * gt.at(y, x));
    let r = depth_metrics(&doubled, &gt, true).unwrap();
    assert_eq!(r.abs_rel, 0.0);
    let scaled13 = Grid::from_fn(4, 4, |y, x| 1.3 * gt.at(y, x));
    let r = depth_metrics(&scaled13, &gt, false).unwrap();
    assert_eq!(r.delta_1, 0.0);
    assert_eq!(r.delta_2, 1.0);

    // recon_metrics examples.
    let depth = Grid::from_fn(8, 8, |y, x| 3.0 + 0.02 * (y as f64) - 0.01 * (x as f64));
    let intr = Intrinsics {
        fx: 8.0,
        fy: 8.0,
        cx: 3.5,
        cy: 3.5,
    };
    let cloud =
        moedepth::cloud::estimate_normals(&unproject(&depth, &intr).unwrap()).unwrap();
    let r = recon_metrics(&cloud, &cloud).unwrap();
    assert_eq!((r.acc_mean, r.comp_mean), (0.0, 0.0));
    assert_eq!((r.nc_mean, r.nc_median), (Some(1.0), Some(1.0)));

    let single_a = PointCloud::from_points(vec![[0.0, 0.0, 0.0]]);
    let single_b = PointCloud::from_points(vec![[0.0, 3.0, 4.0]]);
    let r = recon_metrics(&single_a, &single_b).unwrap();
    assert_eq!((r.acc_mean, r.comp_mean), (5.0, 5.0));

    let mut rng = stream(400, "ac4-translate");
    let pts: Vec<[f64; 3]> = (0..80)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
        .collect();
    let t = 4.5;
    let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0], p[1], t]).collect();
    let r = recon_metrics(
        &PointCloud::from_points(moved),
        &PointCloud::from_points(pts),
    )
    .unwrap();
    assert!((r.acc_mean - t).abs() < 1e-12);
    assert!((r.comp_mean - t).abs() < 1e-12);

    // Bucketed nearest neighbor equals brute force on 50 random clouds.
    let mut rng = stream(401, "ac4-nn");
    for trial in 0..50 {
        let nt = rng.random_range(1..=2000);
        let nq = rng.random_range(1..200);
        let planar = trial % 5 == 0;
        let point = |rng: &mut rand_chacha::ChaCha8Rng| -> [f64; 3] {
            [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                if planar { 1.5 } else { rng.random_range(-4.0..4.0) },
            ]
        };
        let targets: Vec<[f64; 3]> = (0..nt).map(|_| point(&mut rng)).collect();
        let queries: Vec<[f64; 3]> = (0..nq).map(|_| point(&mut rng)).collect();
        let brute = nn_brute(&queries, &targets);
        let bucketed = nn_bucketed(&queries, &targets);
        for (x, y) in brute.iter().zip(&bucketed) {
            assert!((x.0 - y.0).abs() < 1e-12, "trial {trial}: {x:?} vs {y:?}");
            assert_eq!(x.1, y.1, "trial {trial}: tie-break must match");
        }
    }
    println!("PASS ac4: boundary/depth/recon oracles exact; bucketed NN equals brute force on 50 clouds");
}

// ---------------------------------------------------------------------------
// AC-5: entropy ablation behavior at desk scale
// ---------------------------------------------------------------------------

#[test]
fn ac5_entropy_ablation_behavior() {
    let start = Instant::now();
    let lambdas = [0.0, 1e-4, 1e-3, 1e-2];
    // Ordering clause: mean (over seeds and held-out scenes) of the
    // unit-temperature gate entropy — the annealed floor sharpens every
    // gate toward one-hot, so the regularizer's graded imprint on the
    // learned logits is measured at the canonical temperature instead.
    // Collapse clause: per-pixel effective experts in the state the gate
    // actually ends training in, i.e. at the floor temperature.
    let mut mean_entropy = [0.0f64; 4];
    let mut collapse_fraction = 0.0f64;
    let mut collapse_samples = 0usize;

    for &seed in &ABLATION_SEEDS {
        let data = bench_dataset(seed);
        for (li, &lambda) in lambdas.iter().enumerate() {
            let result = bench_trained(4, lambda, seed);
            let mut ent_sum = 0.0;
            for scene in &data.1 {
                let trace = forward(&result.params, &scene.input, result.final_tau).unwrap();
                let reference = GateField::softmax(trace.output().gate().logits(), 1.0).unwrap();
                let (entropy, _) = gating_entropy(&reference, None).unwrap();
                ent_sum += entropy;
                if lambda == 1e-2 {
                    let trained_gate = trace.output().gate();
                    let n = trained_gate.height() * trained_gate.width();
                    let mut collapsed = 0usize;
                    for i in 0..n {
                        let mut hp = 0.0;
                        for c in 0..trained_gate.channels() {
                            let w = trained_gate.weights().channel(c).data()[i];
                            if w > 0.0 {
                                hp -= w * w.ln();
                            }
                        }
                        // exp(hp) <= 2 effective experts.
                        if hp <= 2.0f64.ln() {
                            collapsed += 1;
                        }
                    }
                    collapse_fraction += collapsed as f64 / n as f64;
                    collapse_samples += 1;
                }
            }
            mean_entropy[li] += ent_sum / data.1.len() as f64 / ABLATION_SEEDS.len() as f64;
        }
    }

    println!(
        "ac5: mean held-out gate entropy by lambda {{0, 1e-4, 1e-3, 1e-2}}: \
         {:.4} {:.4} {:.4} {:.4}",
        mean_entropy[0], mean_entropy[1], mean_entropy[2], mean_entropy[3]
    );
    for i in 1..4 {
        assert!(
            mean_entropy[i] <= mean_entropy[i - 1] + 1e-12,
            "mean gate entropy must be non-increasing in lambda: {mean_entropy:?}"
        );
    }
    collapse_fraction /= collapse_samples as f64;
    println!("ac5: lambda=1e-2 collapse fraction (eff experts <= 2): {collapse_fraction:.4}");
    assert!(
        collapse_fraction >= 0.90,
        "lambda=1e-2 must collapse >= 90% of pixels to <= 2 effective experts, got {collapse_fraction}"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 900.0, "runtime budget 15 min: {elapsed:?}");
    println!("PASS ac5: entropy non-increasing in lambda; collapse at 1e-2 ({elapsed:?})");
}

// ---------------------------------------------------------------------------
// AC-6: boundary-sharpness gain of the mixture head
// ---------------------------------------------------------------------------

fn mean_f1(result: &TrainResult, tests: &[Scene], edge_cfg: &EdgeConfig) -> f64 {
    let mut sum = 0.0;
    for scene in tests {
        let (pred, _) = hard_predict(result, scene);
        let pred_edges = extract_edges(&pred, edge_cfg).unwrap();
        let gt_edges = extract_edges(&scene.gt_depth, edge_cfg).unwrap();
        sum += boundary_metrics(&pred_edges, &gt_edges).unwrap().f1;
    }
    sum / tests.len() as f64
}

#[test]
fn ac6_boundary_sharpness_gain() {
    let edge_cfg = EdgeConfig::default();
    let mut moe_mean = 0.0;
    let mut single_mean = 0.0;
    let mut per_seed = Vec::new();
    for &seed in &COMPARE_SEEDS {
        let data = bench_dataset(seed);
        let moe = mean_f1(&bench_trained(4, 1e-4, seed), &data.1, &edge_cfg);
        let single = mean_f1(&bench_trained(1, 1e-4, seed), &data.1, &edge_cfg);
        per_seed.push((seed, moe, single));
        moe_mean += moe / COMPARE_SEEDS.len() as f64;
        single_mean += single / COMPARE_SEEDS.len() as f64;
    }
    for (seed, moe, single) in &per_seed {
        println!("ac6: seed {seed}: F1 K=4 {moe:.4} vs K=1 {single:.4} (gap {:+.4})", moe - single);
    }
    println!(
        "ac6: mean F1 over {} seeds: K=4 {moe_mean:.4} vs K=1 {single_mean:.4} (gap {:+.4})",
        COMPARE_SEEDS.len(),
        moe_mean - single_mean
    );
    assert!(
        moe_mean > single_mean,
        "mixture head must beat the single-expert baseline on mean boundary F1: \
         {moe_mean} vs {single_mean}"
    );
    println!("PASS ac6: boundary F1 gain {:+.4}", moe_mean - single_mean);
}

// ---------------------------------------------------------------------------
// AC-7: flying-point reduction and masking monotonicity
// ---------------------------------------------------------------------------

fn flying_counts(result: &TrainResult, tests: &[Scene]) -> (f64, Vec<(usize, usize)>) {
    let mut mean = 0.0;
    let mut pairs = Vec::new();
    for scene in tests {
        let (pred, trace) = hard_predict(result, scene);
        let cloud = unproject(&pred, &scene.intrinsics).unwrap();
        let (mask, count) = detect_flying_points(&cloud, 8, 3.0).unwrap();
        let confidence = trace.output().gate().max_weight();
        let masked_depth = confidence_mask(&pred, &confidence, 1.0).unwrap();
        let source = cloud.source().unwrap();
        let masked_count = mask
            .iter()
            .enumerate()
            .filter(|&(i, &f)| f && !masked_depth.data()[source.pixel_index[i]].is_nan())
            .count();
        mean += count as f64 / tests.len() as f64;
        pairs.push((count, masked_count));
    }
    (mean, pairs)
}

#[test]
fn ac7_flying_point_reduction() {
    let mut moe_mean = 0.0;
    let mut single_mean = 0.0;
    for &seed in &COMPARE_SEEDS {
        let data = bench_dataset(seed);
        let (moe, moe_pairs) = flying_counts(&bench_trained(4, 1e-4, seed), &data.1);
        let (single, single_pairs) = flying_counts(&bench_trained(1, 1e-4, seed), &data.1);
        println!("ac7: seed {seed}: mean flying K=4 {moe:.1} vs K=1 {single:.1}");
        moe_mean += moe / COMPARE_SEEDS.len() as f64;
        single_mean += single / COMPARE_SEEDS.len() as f64;
        // Confidence masking never increases the count, on either model.
        for (raw, masked) in moe_pairs.iter().chain(&single_pairs) {
            assert!(
                masked <= raw,
                "1% confidence masking must never increase the flying count: {raw} -> {masked}"
            );
        }
    }
    println!(
        "ac7: mean flying count over {} seeds: K=4 {moe_mean:.1} vs K=1 {single_mean:.1}",
        COMPARE_SEEDS.len()
    );
    assert!(
        moe_mean <= single_mean,
        "mixture head must not produce more flying points: {moe_mean} vs {single_mean}"
    );
    println!("PASS ac7: flying-point reduction {:+.1}", single_mean - moe_mean);
}

// ---------------------------------------------------------------------------
// AC-8: temperature schedule floor crossing
// ---------------------------------------------------------------------------

#[test]
fn ac8_temperature_schedule() {
    let mut schedule = TemperatureSchedule::default();
    let mut steps = 0usize;
    while schedule.current() > 0.1 {
        let tau = schedule.step();
        steps += 1;
        assert!(tau >= 0.1);
        assert!(steps < 100_000);
    }
    // Under once-per-optimizer-step decay the floor is reached exactly at
    // step 460 (ceil(ln 0.1 / ln 0.995)). A schedule ticking twice per
    // step — e.g. once per view with two views — would need ~920 ticks,
    // which is the regime a "roughly 900 iterations" figure describes;
    // the two are intentionally not reconciled here (documented open
    // question), and this suite pins the per-step behavior.
    assert_eq!(steps, 460, "per-step decay must reach the floor at step 460");
    let per_view_ticks = 2 * steps;
    assert!((850..=950).contains(&per_view_ticks));
    println!("PASS ac8: floor reached at step 460 (per-view ticking would need {per_view_ticks})");
}

// ---------------------------------------------------------------------------
// AC-9: CLI determinism
// ---------------------------------------------------------------------------

#[test]
fn ac9_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_moedepth");
    let data = tmp.path().join("data");
    let run_cli = |args: &[&str]| {
        let status = std::process::Command::new(bin).args(args).status().unwrap();
        assert!(status.success(), "command failed: {args:?}");
    };
    run_cli(&[
        "gen", "--count", "6", "--seed", "11", "--height", "32", "--width", "32", "--out",
        data.to_str().unwrap(),
    ]);

    let (run_a, run_b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&run_a, &run_b] {
        run_cli(&[
            "train", "--data", data.to_str().unwrap(), "--steps", "120", "--experts", "4",
            "--feature-channels", "4", "--lambda-e", "1e-4", "--seed", "5", "--out",
            out.to_str().unwrap(),
        ]);
    }
    let ckpt_a = std::fs::read(run_a.join("checkpoint.mdc")).unwrap();
    let ckpt_b = std::fs::read(run_b.join("checkpoint.mdc")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "identical train invocations must produce identical checkpoints");
    assert_eq!(
        std::fs::read(run_a.join("train_log.tsv")).unwrap(),
        std::fs::read(run_b.join("train_log.tsv")).unwrap()
    );

    let (eval_a, eval_b) = (tmp.path().join("ea"), tmp.path().join("eb"));
    for out in [&eval_a, &eval_b] {
        run_cli(&[
            "eval", "--ckpt", run_a.join("checkpoint.mdc").to_str().unwrap(), "--data",
            data.to_str().unwrap(), "--confidence-mask", "1", "--out", out.to_str().unwrap(),
        ]);
    }
    let summary_a = std::fs::read(eval_a.join("eval_summary.tsv")).unwrap();
    let summary_b = std::fs::read(eval_b.join("eval_summary.tsv")).unwrap();
    assert_eq!(summary_a, summary_b, "identical eval invocations must produce identical reports");
    for entry in std::fs::read_dir(&eval_a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(eval_a.join(&name)).unwrap(),
            std::fs::read(eval_b.join(&name)).unwrap(),
            "report {name:?} differs between runs"
        );
    }
    println!("PASS ac9: checkpoints and reports byte-identical across reruns");
}
