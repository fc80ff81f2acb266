//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! Positional arguments select criteria by id (`cargo test --test
//! acceptance -- C3 C9`); with none, all eleven run. Exits non-zero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mr2pet::bert::BertConfig;
use mr2pet::generator::{tanhshrink, tanhshrink_derivative, GeneratorConfig, GeneratorModel, OutputActivation};
use mr2pet::metrics::{psnr, rmse, ssim, SSIM_WINDOW};
use mr2pet::synth::{synth_pair, DataConfig};
use mr2pet::tokenizer::{
    assemble, dequantize, plan_mask, quantize_detailed, Fold, BEGIN, END_POS, MASK, MRI_MASKED, MRI_OFFSET,
    PET_MASKED, PET_OFFSET, SEP_POS, SUMMARY_LEN, VALUE_MAX, VALUE_MIN,
};
use mr2pet::train::{
    batch_indices, discriminator_gradients, discriminator_update, evaluate, generate, generator_gradients, mean_l1,
    nsp_accuracy, prepare_all, train_step, LossWeights, Models, PreparedPair, TrainConfig, TrainState,
};
use mr2pet::volume::{normalize_pet, restore_pet, NormalizationStats};
use mr2pet::{Float, Modality, Tensor, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets, as stated by the criteria.
const C1_VALUES: usize = 1_000_000;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_VALUES: usize = 10_000;
const C2_TOL: f64 = 5e-4;
const C3_TOL: f64 = 1e-4;
const C4_PLANS: u64 = 1000;
const C6_TANHSHRINK_TOL: f64 = 1e-6;
const C6_FD_TOL: f64 = 1e-3;
const C7_STEPS: u64 = 200;
const C7_MIN_ACC: f64 = 0.9;
const C7_BUDGET: Duration = Duration::from_secs(45 * 60);
const C8_STEPS: u64 = 300;
const C8_MIN_L1_DROP: f64 = 0.8;
const C8_MIN_PSNR_GAIN: f64 = 6.0;
const C9_TOL: f64 = 1e-6;
const C10_TOL: f64 = 1e-5;
const C11_STEPS: u64 = 50;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 11] = [
        ("C1", "tokenizer range safety", c1_range_safety),
        ("C2", "quantization round trip", c2_quantization_round_trip),
        ("C3", "normalization round trip", c3_normalization_round_trip),
        ("C4", "mask-plan exactness", c4_mask_plans),
        ("C5", "shape contract", c5_shapes),
        ("C6", "gradient checks", c6_gradients),
        ("C7", "discriminator sanity", c7_discriminator),
        ("C8", "overfit smoke", c8_overfit),
        ("C9", "metric oracles", c9_metric_oracles),
        ("C10", "accumulation equivalence", c10_accumulation),
        ("C11", "end-to-end determinism", c11_determinism),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|s| s.eq_ignore_ascii_case(id)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared configuration

fn desk_pairs<T: Float>(seeds: impl Iterator<Item = u64>) -> Vec<PreparedPair<T>> {
    let cfg = DataConfig::default();
    let raw: Vec<_> = seeds.map(|i| synth_pair(cfg.sample_seed(i), &cfg).unwrap()).collect();
    prepare_all(&raw).unwrap()
}

/// Reduced transformer used by the training criteria (see the decisions
/// ledger for why the default desk model is not used here).
fn small_bert() -> BertConfig {
    BertConfig {
        layers: 1,
        hidden: 32,
        heads: 2,
        feedforward: 64,
        ..Default::default()
    }
}

fn small_generator(base_channels: usize) -> GeneratorConfig {
    GeneratorConfig {
        base_channels,
        decoder_grid: 16,
        ..Default::default()
    }
}

fn rel_diff<T: Float>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            num += (p.f64() - q.f64()).powi(2);
            den += q.f64().powi(2);
        }
    }
    (num / den).sqrt()
}

// ---------------------------------------------------------------------------

fn c1_range_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values: Vec<f64> = (0..C1_VALUES).map(|_| rng.random_range(-200.0..=2000.0)).collect();
    let t = Instant::now();
    let out = quantize_detailed(&values).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let (mut neg, mut over, mut bad) = (0usize, 0usize, 0usize);
    for (&(id, fold), &v) in out.iter().zip(&values) {
        let ok = (VALUE_MIN..=VALUE_MAX).contains(&id)
            && match fold {
                Fold::Negative => {
                    neg += 1;
                    (1..500).contains(&id)
                }
                Fold::Overflow => {
                    over += 1;
                    (500..=1000).contains(&id)
                }
                Fold::None => true,
            };
        if !ok {
            bad += 1;
            if bad == 1 {
                eprintln!("C1: {v} -> {id} ({fold:?})");
            }
        }
    }
    ensure!(out.len() == C1_VALUES, "{} outputs", out.len());
    ensure!(bad == 0, "{bad} ids out of range");
    ensure!(neg > 0 && over > 0, "folds not exercised: {neg} negative, {over} overflow");
    ensure!(elapsed < C1_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{C1_VALUES} values, {neg} negative folds, {over} overflow folds, 0 violations, {:.3}s",
        elapsed.as_secs_f64()
    ))
}

fn c2_quantization_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let values: Vec<f64> = (0..C2_VALUES).map(|_| rng.random_range(0.001..=10.0)).collect();
    let ids: Vec<u32> = quantize_detailed(&values)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    let back = dequantize(&ids).map_err(|e| e.to_string())?;
    let worst = values
        .iter()
        .zip(&back)
        .map(|(&v, &b)| (b as f64 - v).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= C2_TOL, "max error {worst:e}");
    Ok(format!("max |dequantize(quantize(v)) - v| = {worst:.3e} over {C2_VALUES} values"))
}

fn c3_normalization_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut values: Vec<f32> = vec![-100.0, 0.0, 1000.0];
    values.extend((0..20_000).map(|_| rng.random_range(-100.0f32..=1000.0)));
    let n = values.len();
    let pet = Volume::new(Modality::Pet, vec![1, 1, 1, n], values).map_err(|e| e.to_string())?;
    let cfg = DataConfig::default();
    // MRI statistics from a few synthetic subjects plus two extreme cases
    let mut stats: Vec<NormalizationStats> = (0..4)
        .map(|i| synth_pair(cfg.sample_seed(i), &cfg).unwrap().mri_stats)
        .collect();
    stats.push(NormalizationStats { mean: 0.0, std: 1.0 });
    stats.push(NormalizationStats { mean: 250.0, std: 3.0 });
    let mut worst = 0.0f64;
    for s in &stats {
        let back = restore_pet(&normalize_pet(&pet, s).map_err(|e| e.to_string())?, s).map_err(|e| e.to_string())?;
        for (&v, &r) in pet.values().iter().zip(back.values()) {
            worst = worst.max((r as f64 - v as f64).abs() / (v as f64).abs().max(1.0));
        }
    }
    ensure!(worst <= C3_TOL, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.3e} over {n} values x {} stats", stats.len()))
}

fn c4_mask_plans() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0usize;
    for seed in 0..C4_PLANS {
        let mri: Vec<u32> = (0..SUMMARY_LEN).map(|_| rng.random_range(VALUE_MIN..=VALUE_MAX)).collect();
        let pet: Vec<u32> = (0..SUMMARY_LEN).map(|_| rng.random_range(VALUE_MIN..=VALUE_MAX)).collect();
        let seq = assemble(&mri, &pet).map_err(|e| e.to_string())?;
        let (masked, plan) = plan_mask(&seq, seed);
        let in_mri = |p: usize| (MRI_OFFSET..MRI_OFFSET + SUMMARY_LEN).contains(&p);
        let in_pet = |p: usize| (PET_OFFSET..PET_OFFSET + SUMMARY_LEN).contains(&p);
        let n_mri = plan.masked_positions.iter().filter(|&&p| in_mri(p)).count();
        let n_pet = plan.masked_positions.iter().filter(|&&p| in_pet(p)).count();
        let mut sorted = plan.masked_positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let specials_intact = masked.ids[0] == BEGIN && masked.ids[SEP_POS] == seq.ids[SEP_POS] && masked.ids[END_POS] == seq.ids[END_POS];
        let masks_applied = (0..seq.len()).all(|p| {
            if plan.masked_positions.contains(&p) {
                masked.ids[p] == MASK
            } else {
                masked.ids[p] == seq.ids[p]
            }
        });
        let originals = plan
            .masked_positions
            .iter()
            .zip(&plan.original_ids)
            .all(|(&p, &id)| seq.ids[p] == id);
        if n_mri != MRI_MASKED
            || n_pet != PET_MASKED
            || sorted.len() != MRI_MASKED + PET_MASKED
            || plan.masked_positions.len() != sorted.len()
            || !specials_intact
            || !masks_applied
            || !originals
        {
            violations += 1;
        }
    }
    ensure!(violations == 0, "{violations} violating plans");
    Ok(format!("{C4_PLANS} plans, {MRI_MASKED} MRI + {PET_MASKED} PET each, 0 violations"))
}

fn c5_shapes() -> Outcome {
    let mut lines = Vec::new();
    for (label, cfg) in [("desk", GeneratorConfig::default()), ("full", GeneratorConfig::full_scale())] {
        let model = GeneratorModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
        let [d, h, w] = cfg.input_dims;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mri = Volume::new(
            Modality::Mri,
            vec![d, h, w],
            (0..d * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let out = model.forward(&mri).map_err(|e| e.to_string())?;
        ensure!(out.dims() == cfg.output_dims, "{label}: {:?} != {:?}", out.dims(), cfg.output_dims);
        lines.push(format!("{label} {:?} -> {:?}", cfg.input_dims, out.dims()));
    }
    Ok(lines.join(", "))
}

fn c6_gradients() -> Outcome {
    // (a) tanhshrink derivative
    let h = 1e-5;
    let mut worst_t = 0.0f64;
    for x in [-2.5, -0.7, 0.3, 1.0, 3.0] {
        let fd = (tanhshrink(x + h) - tanhshrink(x - h)) / (2.0 * h);
        let an = tanhshrink_derivative(x);
        worst_t = worst_t.max((fd - an).abs() / an.abs());
    }
    ensure!(worst_t <= C6_TANHSHRINK_TOL, "tanhshrink derivative rel error {worst_t:e}");

    // (b) each generator loss component reaches the generator at random init
    let data = desk_pairs::<f32>(0..2);
    let models = Models::<f32>::new(GeneratorConfig::default(), BertConfig::default(), None).map_err(|e| e.to_string())?;
    let mut norms = Vec::new();
    for (name, w) in [("nsp", (1.0, 0.0, 0.0)), ("mlm", (0.0, 1.0, 0.0)), ("l1", (0.0, 0.0, 1.0))] {
        let cfg = TrainConfig {
            weights: LossWeights {
                lambda_nsp: w.0,
                lambda_mlm: w.1,
                lambda_l1: w.2,
            },
            ..Default::default()
        };
        let (g, _) = generator_gradients(&models, &data, &[0, 1], 1, &cfg, 2).map_err(|e| e.to_string())?;
        let norm = g.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        ensure!(norm > 0.0 && norm.is_finite(), "{name} gradient norm {norm}");
        norms.push(format!("{name} {norm:.2e}"));
    }

    // (c) finite-difference spot checks on the discriminator loss, in f64
    let data = desk_pairs::<f64>(0..2);
    let mut models = Models::<f32>::new(small_generator(4), small_bert(), None)
        .map_err(|e| e.to_string())?
        .cast::<f64>();
    let cfg = TrainConfig::default();
    let idx = [0, 1];
    let loss = |m: &Models<f64>| {
        let (_, _, l) = discriminator_gradients(m, &data, &idx, 1, &cfg, 2).unwrap();
        l.nsp + cfg.d_mlm_weight * l.mlm
    };
    let (grads, _, _) = discriminator_gradients(&models, &data, &idx, 1, &cfg, 2).map_err(|e| e.to_string())?;
    let names: Vec<String> = models.discriminator.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checks = Vec::new();
    let eps = 1e-5;
    while checks.len() < 3 {
        let pi = rng.random_range(0..names.len());
        let g = &grads[pi];
        let gmax = g.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        // skip elements whose analytic gradient is structurally zero
        let candidates: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i].abs() > 1e-3 * gmax).collect();
        if gmax == 0.0 || candidates.is_empty() {
            continue;
        }
        let ei = candidates[rng.random_range(0..candidates.len())];
        let name = &names[pi];
        let orig = models.discriminator.params.iter().nth(pi).unwrap().1.clone();
        let mut bump = |delta: f64| {
            let mut t = orig.clone();
            t.data_mut()[ei] += delta;
            models.discriminator.params.set(name, t).unwrap();
            loss(&models)
        };
        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
        models.discriminator.params.set(name, orig).unwrap();
        let an = g.data()[ei];
        let rel = (fd - an).abs() / fd.abs().max(an.abs());
        ensure!(rel <= C6_FD_TOL, "{name}[{ei}]: analytic {an:e}, finite difference {fd:e}, rel {rel:e}");
        checks.push(format!("{name}[{ei}] rel {rel:.1e}"));
    }
    Ok(format!(
        "tanhshrink max rel {worst_t:.1e}; generator grad norms {}; discriminator {}",
        norms.join(", "),
        checks.join(", ")
    ))
}

fn c7_discriminator() -> Outcome {
    let t = Instant::now();
    let train = desk_pairs::<f32>(0..32);
    let held_out = desk_pairs::<f32>(1000..1016);
    let cfg = TrainConfig {
        base_lr: 1e-2,
        total_steps: C7_STEPS,
        d_mlm_weight: 0.0,
        ..Default::default()
    };
    let models = Models::new(small_generator(4), small_bert(), None).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(models, cfg.adam);
    let g0 = state.models.generator.params.clone();
    let mut last = 0.0;
    for step in 1..=C7_STEPS {
        last = discriminator_update(&mut state, &train, &cfg, step).map_err(|e| e.to_string())?.nsp;
    }
    ensure!(state.models.generator.params.bit_equal(&g0), "generator moved");
    let acc = nsp_accuracy(&state.models, &held_out, 77).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    ensure!(acc >= C7_MIN_ACC, "held-out accuracy {acc:.3} (final NSP loss {last:.4})");
    ensure!(elapsed < C7_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "held-out accuracy {acc:.3} on {} sequences, final NSP loss {last:.4}, {:.0}s on CPU",
        2 * held_out.len(),
        elapsed.as_secs_f64()
    ))
}

struct OverfitRun {
    l1_first: f64,
    l1_last: f64,
    l1_set_before: f64,
    l1_set_after: f64,
    psnr_before: f64,
    psnr_after: f64,
    max_abs: f32,
}

fn overfit_run(activation: OutputActivation) -> Result<OverfitRun, String> {
    let data = desk_pairs::<f32>(0..4);
    let gcfg = GeneratorConfig {
        output_activation: activation,
        ..small_generator(8)
    };
    let cfg = TrainConfig {
        base_lr: 1e-2,
        total_steps: C8_STEPS,
        ste_scale: 0.1,
        ..Default::default()
    };
    let models = Models::new(gcfg, small_bert(), None).map_err(|e| e.to_string())?;
    let before = evaluate(&models.generator, &data).map_err(|e| e.to_string())?;
    let l1_set_before = mean_l1(&models.generator, &data);
    let mut state = TrainState::new(models, cfg.adam);
    for _ in 0..C8_STEPS {
        train_step(&mut state, &data, &cfg).map_err(|e| e.to_string())?;
    }
    let after = evaluate(&state.models.generator, &data).map_err(|e| e.to_string())?;
    let max_abs = data
        .iter()
        .map(|p| generate(&state.models.generator, p).data().iter().fold(0.0f32, |a, &b| a.max(b.abs())))
        .fold(0.0, f32::max);
    Ok(OverfitRun {
        l1_first: state.history[0].g_l1,
        l1_last: state.history.last().unwrap().g_l1,
        l1_set_before,
        l1_set_after: mean_l1(&state.models.generator, &data),
        psnr_before: before.psnr,
        psnr_after: after.psnr,
        max_abs,
    })
}

fn c8_overfit() -> Outcome {
    let r = overfit_run(OutputActivation::Tanhshrink)?;
    let drop = 1.0 - r.l1_last / r.l1_first;
    let set_drop = 1.0 - r.l1_set_after / r.l1_set_before;
    let gain = r.psnr_after - r.psnr_before;
    ensure!(drop >= C8_MIN_L1_DROP, "L1 {:.4} -> {:.4}, drop {:.1}%", r.l1_first, r.l1_last, 100.0 * drop);
    ensure!(gain >= C8_MIN_PSNR_GAIN, "PSNR {:.2} -> {:.2} dB", r.psnr_before, r.psnr_after);
    ensure!(r.max_abs > 1.0, "tanhshrink max |v| {}", r.max_abs);
    let t = overfit_run(OutputActivation::Tanh)?;
    ensure!(t.max_abs <= 1.0, "tanh output reached |v| = {}", t.max_abs);
    Ok(format!(
        "L1 {:.4} -> {:.4} (-{:.1}%; train set after training -{:.1}%), PSNR {:.2} -> {:.2} dB (+{gain:.2}), \
         max |v| {:.1} with tanhshrink vs {:.4} with tanh",
        r.l1_first,
        r.l1_last,
        100.0 * drop,
        100.0 * set_drop,
        r.psnr_before,
        r.psnr_after,
        r.max_abs,
        t.max_abs
    ))
}

// brute-force definitions for C9
fn oracle_mse(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s / a.len() as f64
}

fn oracle_range(a: &[f32]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    hi - lo
}

fn oracle_ssim(real: &[f32], gen: &[f32], frames: usize, n: usize, range: f64) -> f64 {
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let w = SSIM_WINDOW;
    let at = |v: &[f32], f: usize, z: usize, y: usize, x: usize| v[f * n * n * n + (z * n + y) * n + x] as f64;
    let mut frame_total = 0.0;
    for f in 0..frames {
        let mut sum = 0.0;
        let mut count = 0;
        for z0 in 0..=n - w {
            for y0 in 0..=n - w {
                for x0 in 0..=n - w {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for z in z0..z0 + w {
                        for y in y0..y0 + w {
                            for x in x0..x0 + w {
                                xs.push(at(real, f, z, y, x));
                                ys.push(at(gen, f, z, y, x));
                            }
                        }
                    }
                    let k = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / k;
                    let my = ys.iter().sum::<f64>() / k;
                    let vx = xs.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / k;
                    let vy = ys.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / k;
                    let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / k;
                    sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        frame_total += sum / count as f64;
    }
    frame_total / frames as f64
}

fn c9_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 8;
    let mut worst = [0.0f64; 3];
    for _ in 0..10 {
        let frames = rng.random_range(1..=2);
        let len = frames * n * n * n;
        let scale = rng.random_range(1.0f32..500.0);
        let real: Vec<f32> = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
        // generated = real + noise, so SSIM lands away from 0
        let gen: Vec<f32> = real.iter().map(|&v| v + rng.random_range(-0.3 * scale..0.3 * scale)).collect();
        let dims = vec![frames, n, n, n];
        let rv = Volume::new(Modality::Pet, dims.clone(), real.clone()).map_err(|e| e.to_string())?;
        let gv = Volume::new(Modality::Pet, dims, gen.clone()).map_err(|e| e.to_string())?;
        let mse = oracle_mse(&real, &gen);
        let range = oracle_range(&real);
        let expect = [
            10.0 * (range * range / mse).log10(),
            oracle_ssim(&real, &gen, frames, n, range),
            mse.sqrt(),
        ];
        let got = [
            psnr(&rv, &gv).map_err(|e| e.to_string())?,
            ssim(&rv, &gv).map_err(|e| e.to_string())?,
            rmse(&rv, &gv).map_err(|e| e.to_string())?,
        ];
        for k in 0..3 {
            worst[k] = worst[k].max((got[k] - expect[k]).abs());
        }
    }
    ensure!(worst.iter().all(|&w| w <= C9_TOL), "max abs error psnr/ssim/rmse {worst:?}");
    Ok(format!(
        "10 pairs, max abs error psnr {:.1e}, ssim {:.1e}, rmse {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn c10_accumulation() -> Outcome {
    let data = desk_pairs::<f32>(0..4);
    let models = Models::<f32>::new(small_generator(4), small_bert(), None).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let idx = batch_indices(cfg.seed, data.len(), 1, 4);
    let (a, _) = generator_gradients(&models, &data, &idx, 1, &cfg, 2).map_err(|e| e.to_string())?;
    let (b, _) = generator_gradients(&models, &data, &idx, 1, &cfg, 4).map_err(|e| e.to_string())?;
    let g = rel_diff(&a, &b);
    let (a, _, _) = discriminator_gradients(&models, &data, &idx, 1, &cfg, 2).map_err(|e| e.to_string())?;
    let (b, _, _) = discriminator_gradients(&models, &data, &idx, 1, &cfg, 4).map_err(|e| e.to_string())?;
    let d = rel_diff(&a, &b);
    ensure!(g <= C10_TOL && d <= C10_TOL, "relative difference generator {g:e}, discriminator {d:e}");
    Ok(format!("2x2 vs 1x4 relative difference: generator {g:.1e}, discriminator {d:.1e}"))
}

const C11_CONFIG: &str = r#"
[data]
mri_dims = [32, 32, 32]
pet_dims = [2, 12, 10, 9]

[generator]
input_dims = [32, 32, 32]
output_dims = [2, 12, 10, 9]
base_channels = 2

[bert]
layers = 1
hidden = 16
heads = 2
feedforward = 32

[train]
base_lr = 0.001
"#;

fn cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mr2pet"))
        .args(args)
        .current_dir(dir)
        .env_clear()
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "`mr2pet {}` failed ({}): {}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    std::fs::write(dir.join("config.toml"), C11_CONFIG).map_err(|e| e.to_string())?;
    let steps = C11_STEPS.to_string();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let data = format!("data_{run}");
        let out = format!("run_{run}");
        cli(&["--config", "config.toml", "synth-data", "--n", "4", "--seed", "11", "--out", &data], dir)?;
        cli(
            &["--config", "config.toml", "train", "--data", &data, "--out", &out, "--seed", "11", "--steps", &steps],
            dir,
        )?;
        csvs.push(std::fs::read(dir.join(&out).join("loss.csv")).map_err(|e| e.to_string())?);
    }
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count() - 1;
    ensure!(rows as u64 == C11_STEPS, "{rows} loss rows");
    ensure!(csvs[0] == csvs[1], "loss.csv differs between runs");
    Ok(format!("two runs, {rows} rows, {} identical bytes", csvs[0].len()))
}
