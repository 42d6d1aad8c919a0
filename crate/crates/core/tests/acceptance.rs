//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runs without the libtest harness.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ealm::meter::{counter_delta, integrate, Domain, EnergyReport, Meter, MeterConfig, PowerSample};
use ealm::metrics::{bleu, cosine, meteor, rouge_l, rouge_n, tokenize, TfEmbedder};
use ealm::pipeline::{generate_synthetic_corpus, TIMESTAMP_FIELDS};
use ealm::prune::{magnitude_mask, nm_mask, prune_bundle, sparsity, PruneSpec};
use ealm::quant::{f32_to_f16_bits, quantize, quantize_bundle, QuantSpec};
use ealm::rank::{rank_score, sort_ranked, CandidateRecord};
use ealm::metrics::MetricScores;
use ealm::tensors::{Lineage, Precision, StoredTensor, TargetFilter, Tensor};
use ealm::tinylm::tokenizer::{encode_completion, encode_prompt};
use ealm::tinylm::{
    greedy_decode, init_model, loss_and_gradients, train_epoch, Example, LmConfig, LoraAdapters, LoraConfig,
    LoraPair,
};

// Pinned tolerances and budgets.
const RANK_TOL: f64 = 1e-12;
const RANK_TRIPLES: usize = 1000;
const RANK_BUDGET: Duration = Duration::from_secs(1);

const QUANT_TENSORS: usize = 1000;
const F16_SAMPLES: usize = 10_000;
const QUANT_BUDGET: Duration = Duration::from_secs(10);

const PRUNE_TENSORS: usize = 200;
const PRUNE_BUDGET: Duration = Duration::from_secs(10);

const GRAD_H: f32 = 1e-3;
const GRAD_REL_TOL: f64 = 1e-2;
const GRAD_MIN_COORDS: usize = 20;
/// The f32 forward pass leaves up to ~3e-5 absolute noise in a central
/// difference at h = 1e-3, so smaller gradients are not sampled.
const GRAD_MIN_MAGNITUDE: f64 = 5e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

const METRIC_TOL: f64 = 1e-6;
const METRIC_PAIRS: usize = 10_000;
const METRIC_BUDGET: Duration = Duration::from_secs(10);

const RAMP_REL_TOL: f64 = 1e-9;
const COUNTER_PAIRS: usize = 1000;

const MEMO_RECORDS: usize = 16;
const MEMO_EPOCHS: u32 = 30;
const MEMO_MIN_CORRECT: usize = 12;
const MEMO_BUDGET: Duration = Duration::from_secs(180);

const R_TOL: f64 = 1e-9;
const SMOKE_BUDGET: Duration = Duration::from_secs(300);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let result = match (result, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.2}s, budget {:.0}s", elapsed.as_secs_f64(), b.as_secs_f64())),
        (r, _) => r,
    };
    let secs = elapsed.as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {id} [{name}]: PASS ({detail}; {secs:.2}s)"),
        Err(detail) => println!("criterion {id} [{name}]: FAIL ({detail}; {secs:.2}s)"),
    }
    result.is_ok()
}

fn record(id: &str, phi: f64, rho: f64, w: f64, joules: f64) -> CandidateRecord {
    CandidateRecord {
        id: id.into(),
        lineage: Lineage::default(),
        scores: MetricScores::default(),
        energy: EnergyReport::new([joules, 0.0, 0.0], 1.0, 0.475),
        rho,
        phi,
        r: rank_score(phi, rho, w).expect("in range"),
    }
}

fn ids(records: &[CandidateRecord]) -> Vec<String> {
    records.iter().map(|r| r.id.clone()).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..RANK_TRIPLES {
        let (phi, rho, w): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let got = rank_score(phi, rho, w).map_err(|e| e.to_string())?;
        worst = worst.max((got - (w * phi + (1.0 - w) * rho)).abs());
    }
    ensure(worst <= RANK_TOL, || format!("max deviation {worst:e}"))?;

    let pool: Vec<(f64, f64)> = (0..50).map(|_| (rng.random(), rng.random())).collect();
    for (w, key) in [(1.0, 0usize), (0.0, 1)] {
        let mut ranked: Vec<CandidateRecord> = pool
            .iter()
            .enumerate()
            .map(|(i, (p, r))| record(&format!("c{i:02}"), *p, *r, w, 1.0))
            .collect();
        sort_ranked(&mut ranked);
        let mut expected: Vec<(usize, f64)> = pool
            .iter()
            .enumerate()
            .map(|(i, pr)| (i, if key == 0 { pr.0 } else { pr.1 }))
            .collect();
        expected.sort_by(|a, b| b.1.total_cmp(&a.1));
        let expected: Vec<String> = expected.iter().map(|(i, _)| format!("c{i:02}")).collect();
        ensure(ids(&ranked) == expected, || format!("w = {w} order differs from single-criterion order"))?;
    }

    for _ in 0..RANK_TRIPLES {
        let (phi, rho, w): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let (dphi, drho): (f64, f64) = (rng.random::<f64>() * (1.0 - phi), rng.random::<f64>() * (1.0 - rho));
        let base = rank_score(phi, rho, w).map_err(|e| e.to_string())?;
        let up_phi = rank_score(phi + dphi, rho, w).map_err(|e| e.to_string())?;
        let up_rho = rank_score(phi, rho + drho, w).map_err(|e| e.to_string())?;
        ensure(up_phi >= base && up_rho >= base, || {
            format!("not monotone at phi {phi} rho {rho} w {w}")
        })?;
        let mut pair = vec![record("lo", phi, rho, w, 1.0), record("hi", phi + dphi, rho + drho, w, 1.0)];
        sort_ranked(&mut pair);
        ensure(pair[0].r >= pair[1].r, || "sorted order not descending in R".into())?;
    }
    Ok(format!("max |dR| {worst:.1e} over {RANK_TRIPLES} triples, boundaries and monotonicity hold"))
}

fn random_tensor(rng: &mut ChaCha8Rng) -> Tensor {
    let rows = rng.random_range(1..=8);
    let cols = 2 * rng.random_range(1..=16);
    let scale = 10f32.powf(rng.random_range(-3.0..2.0));
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
    Tensor::new(vec![rows, cols], data).expect("finite")
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    for _ in 0..QUANT_TENSORS {
        let t = random_tensor(&mut rng);
        for bits in [Precision::Int4, Precision::Int8] {
            for spec in [QuantSpec::new(bits), QuantSpec::per_tensor(bits)] {
                let StoredTensor::Quantized(q) = quantize(&t, &spec).map_err(|e| e.to_string())? else {
                    return Err(format!("{bits:?} did not produce integer codes"));
                };
                let back = StoredTensor::Quantized(q.clone()).to_dense();
                let codes = q.codes();
                for (i, x) in t.data().iter().enumerate() {
                    let scale = f64::from(q.scale_for(i));
                    let x = f64::from(*x);
                    let exact = f64::from(codes[i]) * scale;
                    ensure((x - exact).abs() <= scale / 2.0, || {
                        format!("{bits:?} element {i}: |{x} - {exact}| > scale/2 = {}", scale / 2.0)
                    })?;
                    // the f32 dequantized value adds at most half an ulp
                    let y = back.data()[i];
                    let half_ulp = f64::from(f32::from_bits(y.abs().to_bits() + 1) - y.abs()) / 2.0;
                    ensure((x - f64::from(y)).abs() <= scale / 2.0 + half_ulp, || {
                        format!("{bits:?} element {i}: dequantized {y} too far from {x}")
                    })?;
                    checked += 1;
                }
                if bits == Precision::Int4 {
                    ensure(q.code_bytes() * 8 == 4 * t.numel() as u64, || {
                        format!("4-bit code bytes {} vs 32-bit payload {}", q.code_bytes(), 4 * t.numel())
                    })?;
                }
            }
        }
    }

    let mut mismatches = 0usize;
    let specials = [0.0f32, -0.0, 65504.0, 65519.99, 6.1e-5, 5.96e-8, 2.98e-8, 1.0 + 1.0 / 2048.0];
    let mut samples: Vec<f32> = specials.to_vec();
    while samples.len() < F16_SAMPLES {
        let v = match samples.len() % 3 {
            0 => f32::from_bits(rng.random::<u32>()),
            1 => rng.random_range(-70000.0f32..70000.0),
            _ => rng.random_range(-1e-4f32..1e-4),
        };
        if v.is_finite() {
            samples.push(v);
        }
    }
    for v in &samples {
        if f32_to_f16_bits(*v) != half::f16::from_f32(*v).to_bits() {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} of {F16_SAMPLES} binary16 conversions differ"))?;
    Ok(format!(
        "{checked} elements within scale/2, {F16_SAMPLES} binary16 values bit-exact, 4-bit codes = 1/8 of 32-bit"
    ))
}

/// Element `i` is pruned when fewer than `k` elements rank below it, where
/// rank is by magnitude with the higher index counting as smaller on ties.
fn magnitude_oracle(values: &[f32], ratio: f64) -> Vec<bool> {
    let k = ((ratio * values.len() as f64) + 1e-9).floor() as usize;
    (0..values.len())
        .map(|i| {
            let below = (0..values.len())
                .filter(|&j| {
                    let (a, b) = (values[j].abs(), values[i].abs());
                    a < b || (a == b && j > i)
                })
                .count();
            below >= k
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..PRUNE_TENSORS {
        let rows = rng.random_range(1..=6);
        let cols = 4 * rng.random_range(1..=6);
        let tied = n % 2 == 0;
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| {
                if tied {
                    f32::from(rng.random_range(-3i8..=3)) * 0.25
                } else {
                    rng.random_range(-1.0f32..1.0)
                }
            })
            .collect();
        let t = Tensor::new(vec![rows, cols], data).expect("finite");
        for ratio in [0.1, 0.25, 0.3, 0.5, 0.7, 0.9] {
            let got = magnitude_mask(&t, ratio).map_err(|e| e.to_string())?;
            ensure(got == magnitude_oracle(t.data(), ratio), || {
                format!("tensor {n} ratio {ratio}: mask differs from full-sort oracle")
            })?;
        }
        for (nn, m) in [(1, 2), (2, 4), (1, 4), (3, 4)] {
            let keep = nm_mask(&t, nn, m).map_err(|e| e.to_string())?;
            for (g, group) in keep.chunks(m).enumerate() {
                let kept = group.iter().filter(|k| **k).count();
                ensure(kept == nn, || format!("tensor {n} {nn}:{m} group {g} keeps {kept}"))?;
            }
        }
    }

    let lm = LmConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq: 32,
        ..LmConfig::default()
    };
    let base = init_model(&lm).map_err(|e| e.to_string())?;
    let int4 = quantize_bundle(&base, &QuantSpec::new(Precision::Int4)).map_err(|e| e.to_string())?;
    for (label, b) in [("fp32", &base), ("int4", &int4)] {
        let pruned = prune_bundle(b, &PruneSpec::nm(2, 4)).map_err(|e| e.to_string())?;
        ensure(pruned.lineage.sparsity == Some(0.5), || {
            format!("{label} 2:4 sparsity {:?}", pruned.lineage.sparsity)
        })?;
        if label == "fp32" {
            let s = sparsity(&pruned, &TargetFilter::Projections);
            ensure(s == 0.5, || format!("fp32 2:4 zero fraction {s}"))?;
        }
    }
    Ok(format!("{PRUNE_TENSORS} tensors match the oracle, N:M groups exact, 2:4 sparsity = 0.5"))
}

fn small_lm() -> LmConfig {
    LmConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 32,
        init_seed: 4,
        ..LmConfig::default()
    }
}

fn with_factor(adapters: &LoraAdapters, pair: usize, in_a: bool, index: usize, delta: f32) -> LoraAdapters {
    let mut out = adapters.clone();
    let p: &mut LoraPair = &mut out.pairs[pair];
    let t = if in_a { &mut p.a } else { &mut p.b };
    let mut data = t.data().to_vec();
    data[index] += delta;
    *t = Tensor::new(t.shape().to_vec(), data).expect("finite");
    out
}

fn criterion_4() -> Outcome {
    let bundle = init_model(&small_lm()).map_err(|e| e.to_string())?;
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        seed: 4,
        ..LoraConfig::default()
    };
    let mut adapters = LoraAdapters::init(&bundle, &lora).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for p in &mut adapters.pairs {
        let data = (0..p.b.numel()).map(|_| rng.random_range(-0.3f32..0.3)).collect();
        p.b = Tensor::new(p.b.shape().to_vec(), data).expect("finite");
    }
    let data: Vec<Example> = generate_synthetic_corpus(4, 3, 3)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| Example::from_text(&r.prompt, &r.reference))
        .collect();
    let (_, grads) = loss_and_gradients(&bundle, &adapters, &data).map_err(|e| e.to_string())?;

    let mut checked = [0usize; 2];
    let mut worst = 0.0f64;
    for (class, in_a) in [(0, true), (1, false)] {
        let mut coords: Vec<(usize, usize)> = Vec::new();
        for (pi, g) in grads.pairs.iter().enumerate() {
            let t = if in_a { &g.a } else { &g.b };
            coords.extend(
                t.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| f64::from(v.abs()) >= GRAD_MIN_MAGNITUDE)
                    .map(|(i, _)| (pi, i)),
            );
        }
        let mut picked = HashSet::new();
        while picked.len() < GRAD_MIN_COORDS.min(coords.len()) {
            picked.insert(coords[rng.random_range(0..coords.len())]);
        }
        let mut picked: Vec<_> = picked.into_iter().collect();
        picked.sort_unstable();
        for (pi, i) in picked {
            let loss = |d: f32| {
                let a = with_factor(&adapters, pi, in_a, i, d);
                loss_and_gradients(&bundle, &a, &data).map(|(l, _)| l)
            };
            let numeric = (loss(GRAD_H).map_err(|e| e.to_string())? - loss(-GRAD_H).map_err(|e| e.to_string())?)
                / (2.0 * f64::from(GRAD_H));
            let g = &grads.pairs[pi];
            let analytic = f64::from(if in_a { g.a.data()[i] } else { g.b.data()[i] });
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            ensure(rel <= GRAD_REL_TOL, || {
                format!(
                    "{} of {}[{i}]: analytic {analytic:e} numeric {numeric:e} rel {rel:.3e}",
                    if in_a { "A" } else { "B" },
                    g.target
                )
            })?;
            checked[class] += 1;
        }
    }
    ensure(checked.iter().all(|c| *c >= GRAD_MIN_COORDS), || {
        format!("only {checked:?} coordinates above {GRAD_MIN_MAGNITUDE:e}")
    })?;
    Ok(format!(
        "{} A and {} B coordinates, worst rel err {worst:.2e}",
        checked[0], checked[1]
    ))
}

fn criterion_5() -> Outcome {
    let t = tokenize;
    let vectors = [
        ("bleu brevity", bleu(&t("the cat sat"), &[t("the cat sat on the mat")], 4).map_err(|e| e.to_string())?, (-1.0f64).exp()),
        ("rouge-1 f1", rouge_n(&t("the cat"), &t("the cat sat"), 1).map_err(|e| e.to_string())?, 0.8),
        ("meteor identical", meteor(&t("a b c"), &t("a b c")), 0.981_481_481_481_481_5),
        ("meteor swapped", meteor(&t("b a"), &t("a b")), 0.5),
        ("tf cosine", cosine(&t("a a b"), &t("a b"), &TfEmbedder).map_err(|e| e.to_string())?, 3.0 / 10f64.sqrt()),
    ];
    for (name, got, want) in vectors {
        ensure((got - want).abs() <= METRIC_TOL, || format!("{name}: {got} vs {want}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let words = ["a", "b", "c", "d", "the", "cat"];
    let mut sentence = |min: usize| -> Vec<String> {
        let n = rng.random_range(min..=10);
        (0..n).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    for i in 0..METRIC_PAIRS {
        let (c, r) = (sentence(0), sentence(1));
        let mut scores = vec![
            rouge_n(&c, &r, 1).map_err(|e| e.to_string())?,
            rouge_n(&c, &r, 2).map_err(|e| e.to_string())?,
            rouge_l(&c, &r),
            meteor(&c, &r),
            cosine(&c, &r, &TfEmbedder).map_err(|e| e.to_string())?,
        ];
        if !c.is_empty() {
            scores.push(bleu(&c, &[&r], 4).map_err(|e| e.to_string())?);
        }
        ensure(scores.iter().all(|s| (0.0..=1.0).contains(s)), || {
            format!("pair {i} {c:?} / {r:?} out of range: {scores:?}")
        })?;
    }
    Ok(format!("5 reference vectors within {METRIC_TOL:e}, {METRIC_PAIRS} random pairs in [0, 1]"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b): (f64, f64) = (rng.random_range(0.0..100.0), rng.random_range(-5.0..5.0));
        let t0: f64 = rng.random_range(0.0..10.0);
        let t1 = t0 + rng.random_range(0.1..20.0);
        let n = rng.random_range(2..200);
        let samples: Vec<PowerSample> = (0..n)
            .map(|k| {
                let t = if k == n - 1 { t1 } else { t0 + (t1 - t0) * k as f64 / (n - 1) as f64 };
                PowerSample {
                    timestamp: t,
                    watts: a + b * t,
                    domain: Domain::Cpu,
                }
            })
            .collect();
        let closed = a * (t1 - t0) + 0.5 * b * (t1 * t1 - t0 * t0);
        let got = integrate(&samples).map_err(|e| e.to_string())?;
        worst = worst.max((got - closed).abs() / closed.abs());
    }
    ensure(worst <= RAMP_REL_TOL, || format!("ramp rel err {worst:e}"))?;

    for i in 0..COUNTER_PAIRS {
        let max: u64 = rng.random_range(1_000..=u64::from(u32::MAX) * 64);
        let prev = rng.random_range(0..=max);
        let true_delta = rng.random_range(0..max);
        let curr = if prev + true_delta <= max { prev + true_delta } else { prev + true_delta - max };
        let d = counter_delta(prev, curr, max);
        ensure(d == true_delta, || format!("pair {i}: delta {d} for true {true_delta} (max {max})"))?;
    }

    let watts = [65.0, 10.0, 3.0];
    for _ in 0..100 {
        let x = f64::from(rng.random_range(1u32..1 << 20)) / 1024.0;
        let y = f64::from(rng.random_range(1u32..1 << 20)) / 1024.0;
        let mut split = Meter::new(MeterConfig::constant(watts[0], watts[1], watts[2])).map_err(|e| e.to_string())?;
        let (_, r1) = split.measure(|m| m.advance(x)).map_err(|e| e.to_string())?;
        let (_, r2) = split.measure(|m| m.advance(y)).map_err(|e| e.to_string())?;
        let mut whole = Meter::new(MeterConfig::constant(watts[0], watts[1], watts[2])).map_err(|e| e.to_string())?;
        let (_, r) = whole
            .measure(|m| {
                m.advance(x);
                m.advance(y)
            })
            .map_err(|e| e.to_string())?;
        for d in Domain::ALL {
            ensure(r1.joules(d) + r2.joules(d) == r.joules(d), || {
                format!("{d:?}: {} + {} != {}", r1.joules(d), r2.joules(d), r.joules(d))
            })?;
        }
        ensure(r1.total_joules + r2.total_joules == r.total_joules, || "total not additive".into())?;
    }
    Ok(format!(
        "ramp rel err {worst:.1e}, {COUNTER_PAIRS} wrapped deltas exact, constant spans additive"
    ))
}

fn criterion_7() -> Outcome {
    let lm = LmConfig::default();
    let records = generate_synthetic_corpus(7, MEMO_RECORDS, 3).map_err(|e| e.to_string())?;
    let data: Vec<Example> = records.iter().map(|r| Example::from_text(&r.prompt, &r.reference)).collect();
    let base32 = init_model(&lm).map_err(|e| e.to_string())?;
    let base16 = quantize_bundle(&base32, &QuantSpec::new(Precision::Fp16)).map_err(|e| e.to_string())?;
    let mut meter = Meter::new(MeterConfig::default()).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();

    for (label, base) in [("fp32", &base32), ("fp16", &base16)] {
        // five epochs at the default adapter settings
        let lora = LoraConfig::default();
        let mut adapters = LoraAdapters::init(base, &lora).map_err(|e| e.to_string())?;
        let mut losses = Vec::new();
        for epoch in 1..=5 {
            let (next, rec) = train_epoch(base, &adapters, &data, lora.lr, lora.batch_size, epoch, &mut meter)
                .map_err(|e| e.to_string())?;
            adapters = next;
            losses.push(rec.mean_loss);
        }
        ensure(losses[4] < losses[0], || format!("{label}: epoch-5 loss {} >= epoch-1 {}", losses[4], losses[0]))?;

        let lora = LoraConfig {
            rank: 8,
            batch_size: 1,
            ..LoraConfig::default()
        };
        let mut adapters = LoraAdapters::init(base, &lora).map_err(|e| e.to_string())?;
        for epoch in 1..=MEMO_EPOCHS {
            adapters = train_epoch(base, &adapters, &data, lora.lr, lora.batch_size, epoch, &mut meter)
                .map_err(|e| e.to_string())?
                .0;
        }
        let mut correct = 0;
        for r in &records {
            let prompt = encode_prompt(&r.prompt);
            let out = greedy_decode(base, Some(&adapters), &prompt, 40).map_err(|e| e.to_string())?;
            if out[prompt.len()..] == encode_completion(&r.reference)[..] {
                correct += 1;
            }
        }
        ensure(correct >= MEMO_MIN_CORRECT, || {
            format!("{label}: {correct}/{MEMO_RECORDS} references reproduced")
        })?;
        notes.push(format!("{label} loss {:.3} -> {:.3}, {correct}/{MEMO_RECORDS} reproduced", losses[0], losses[4]));
    }
    Ok(notes.join(", "))
}

const SMOKE_CONFIG: &str = "bits_grid = [4, 16, 32]
epochs_grid = [2]
k = 2
prune_ratios = [0.3, 0.5]
nm_patterns = [[2, 4]]
";

fn run_all(dir: &Path, meter: &str) -> Result<(), String> {
    let config = dir.join("smoke.toml");
    std::fs::write(&config, SMOKE_CONFIG).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_ealm"))
        .args(["run-all", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .args(["--meter", meter])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("run-all exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_all(dir.path(), "constant")?;
    let out = dir.path().join("out");
    for f in ["report.json", "candidates.csv", "summary.md"] {
        ensure(out.join(f).is_file(), || format!("{f} missing"))?;
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let stages: Vec<&str> = report["candidates"]
        .as_array()
        .ok_or("no candidates array")?
        .iter()
        .map(|c| c["stage"].as_str().unwrap_or(""))
        .collect();
    let loop1 = stages.iter().filter(|s| **s == "finetune").count();
    let loop2 = stages.iter().filter(|s| **s == "retained" || **s == "pruned").count();
    ensure(loop1 == 3 && loop2 == 2 * (2 + 1) + 2, || format!("{loop1} loop-1 and {loop2} loop-2 records"))?;

    let mut reader = csv::Reader::from_path(out.join("candidates.csv")).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("no {name} column"));
    let (ci_w, ci_phi, ci_rho, ci_r, ci_base) = (col("w")?, col("phi")?, col("rho")?, col("R")?, col("baseline")?);
    let mut rows = 0;
    let mut baselines = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let num = |i: usize| row[i].parse::<f64>().map_err(|e| e.to_string());
        let (w, phi, rho, r) = (num(ci_w)?, num(ci_phi)?, num(ci_rho)?, num(ci_r)?);
        ensure((w * phi + (1.0 - w) * rho - r).abs() <= R_TOL, || format!("row {rows}: R {r} not w*phi+(1-w)*rho"))?;
        if &row[ci_base] == "true" {
            baselines.push(phi);
        }
        rows += 1;
    }
    ensure(rows == 11, || format!("{rows} CSV rows"))?;
    ensure(baselines == [0.0], || format!("baseline phi values {baselines:?}"))?;
    Ok(format!("{loop1} + {loop2} records, 3 report files, R recomputed on {rows} rows, one baseline with phi = 0"))
}

fn stripped_report(path: &Path) -> Result<String, String> {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("report is not an object")?;
    for f in TIMESTAMP_FIELDS {
        obj.remove(f).ok_or(format!("report has no {f}"))?;
    }
    serde_json::to_string_pretty(&v).map_err(|e| e.to_string())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trace = dir.path().join("power.csv");
    let mut csv = String::from("timestamp_s,domain,watts\n");
    for k in 0..=200 {
        let t = f64::from(k) * 0.5;
        csv.push_str(&format!("{t},cpu,{}\n", 40.0 + 25.0 * (f64::from(k) * 0.3).sin()));
        csv.push_str(&format!("{t},ram,{}\n", 8.0 + f64::from(k % 7)));
    }
    std::fs::write(&trace, csv).map_err(|e| e.to_string())?;
    let meter = format!("trace:{}", trace.display());
    run_all(dir.path(), &meter)?;
    let first = stripped_report(&dir.path().join("out/report.json"))?;
    run_all(dir.path(), &meter)?;
    let second = stripped_report(&dir.path().join("out/report.json"))?;
    ensure(first == second, || "reports differ outside timestamp fields".into())?;
    ensure(first.contains("trace-replay"), || "report does not name the trace source".into())?;
    Ok(format!("two trace-replay runs identical modulo {TIMESTAMP_FIELDS:?}"))
}

fn main() -> ExitCode {
    let results = [
        run(1, "rank score", Some(RANK_BUDGET), criterion_1),
        run(2, "quantization oracle", Some(QUANT_BUDGET), criterion_2),
        run(3, "pruning oracle", Some(PRUNE_BUDGET), criterion_3),
        run(4, "adapter gradient check", Some(GRAD_BUDGET), criterion_4),
        run(5, "metric oracles", Some(METRIC_BUDGET), criterion_5),
        run(6, "energy integration", None, criterion_6),
        run(7, "training sanity", Some(MEMO_BUDGET), criterion_7),
        run(8, "end-to-end smoke", Some(SMOKE_BUDGET), criterion_8),
        run(9, "determinism", None, criterion_9),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
