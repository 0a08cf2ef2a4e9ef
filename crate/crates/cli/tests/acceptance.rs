//! End-to-end acceptance checks over synthetic corpora. Prints one PASS or
//! FAIL line per criterion. Set `ACCEPTANCE_STRICT=1` to exit nonzero when
//! any criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdet::alignment::fsa_loss;
use specdet::data::{build_split, synth_generate, EmbeddingRecord, SplitData, SynthConfig};
use specdet::model::gradcheck::check_gradients;
use specdet::model::{prepared_from_vector, DetectorModel, Params, PipelineConfig, PreparedSample};
use specdet::numerics::{dft, dft_fast, idft};
use specdet::perturb::{mae_shift_table, DonorPool, PerturbOptions, PerturbationKind};
use specdet::spectral::compute_band_partition;
use specdet::trainer::{ablation_run, band_grid, module_grid, split_mae_report, AblationRow, TrainConfig, Trainer};

type Outcome = Result<(bool, String), String>;

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

fn lengths() -> Vec<usize> {
    (1..=64).chain([385, 768]).collect()
}

fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ls = lengths();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let x = random_signal(&mut rng, ls[i % ls.len()]);
        let back = idft(&dft_fast(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for (a, b) in x.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    let t = start.elapsed();
    Ok((
        worst < 1e-9 && t < Duration::from_secs(2),
        format!("max abs error {worst:.3e}, {:.3}s", t.as_secs_f64()),
    ))
}

fn parseval_hermitian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ls = lengths();
    let (mut parseval, mut hermitian) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let x = random_signal(&mut rng, ls[i % ls.len()]);
        let spec = dft(&x).map_err(|e| e.to_string())?;
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = spec.re.iter().zip(&spec.im).map(|(r, i)| r * r + i * i).sum::<f64>() / x.len() as f64;
        parseval = parseval.max((time - freq).abs() / time);
        let peak = spec.re.iter().zip(&spec.im).map(|(r, i)| r.hypot(*i)).fold(f64::MIN_POSITIVE, f64::max);
        hermitian = hermitian.max(spec.hermitian_deviation() / peak);
    }
    Ok((
        parseval < 1e-9 && hermitian < 1e-9,
        format!("Parseval rel {parseval:.3e}, Hermitian rel {hermitian:.3e}"),
    ))
}

fn band_boundaries() -> Outcome {
    let p = compute_band_partition(385, 412, 28, 0.6).map_err(|e| e.to_string())?;
    let ok = p.low() == (0..=1) && p.mid() == (2..163) && p.high() == (163..385);
    Ok((
        ok,
        format!(
            "low {}..{}, mid {}..{}, high {}..{}",
            p.low().start(),
            p.low().end(),
            p.mid().start,
            p.mid().end - 1,
            p.high().start,
            p.high().end - 1
        ),
    ))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (d, b) = (8, 4);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for mask in 0..8u8 {
        let cfg = PipelineConfig {
            xi: 0.5,
            ..PipelineConfig::with_modules(mask & 1 != 0, mask & 2 != 0, mask & 4 != 0)
        };
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 131 + mask as u64);
            seed += 1;
            let mut p = Params::identity(d);
            for block in p.blocks_mut() {
                block.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
            let model = DetectorModel::from_params(p, cfg).map_err(|e| e.to_string())?;
            let samples: Vec<PreparedSample> = (0..b)
                .map(|i| {
                    let x = random_signal(&mut rng, d).iter().map(|v| v / 10.0).collect();
                    prepared_from_vector(x, (i % 2) as u8, rng.random_range(2..20), rng.random_range(1..4))
                })
                .collect();
            let refs: Vec<&PreparedSample> = samples.iter().collect();
            let stats = model.compute_stats(&samples).map_err(|e| e.to_string())?;
            let gc = check_gradients(&model, &refs, &stats, 1.0, 1e-6).map_err(|e| e.to_string())?;
            if gc.kink_margin < 1e-4 {
                skipped += 1;
                continue;
            }
            worst = worst.max(gc.max_relative());
            checked += 1;
        }
    }
    let t = start.elapsed();
    Ok((
        worst < 1e-5 && t < Duration::from_secs(30),
        format!(
            "8 configs x 20 seeds, max rel {worst:.3e}, {skipped} near-kink draws redrawn, {:.2}s",
            t.as_secs_f64()
        ),
    ))
}

fn experiment_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 32,
        lr: 2e-5,
        fsa_weight: 1.0,
        pipeline: PipelineConfig {
            xi: 200.0,
            ..PipelineConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn synth_split(seed: u64) -> specdet::Result<SplitData> {
    let corpus = synth_generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    let mut plan = corpus.split_plan();
    plan.train_cap = 400;
    plan.valid_cap = 200;
    plan.test_cap = 400;
    build_split(&corpus.records, &plan, seed)
}

fn fsr_postcondition(split: &SplitData) -> Outcome {
    let cfg = experiment_config();
    let probe = DetectorModel::new(split.train[0].dim(), cfg.pipeline).map_err(|e| e.to_string())?;
    let train = probe.prepare_all(&split.train).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg, probe.d(), &train).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut batches = 0;
    for _ in 0..3 {
        for chunk in train.chunks(cfg.batch_size) {
            let refs: Vec<&PreparedSample> = chunk.iter().collect();
            let loss = trainer.step(&refs).map_err(|e| e.to_string())?;
            let (m, h) = loss.reconstructed_mu;
            worst = worst
                .max((m - trainer.stats.mu_bar_mid).abs())
                .max((h - trainer.stats.mu_bar_high).abs());
            batches += 1;
        }
    }
    Ok((worst < 1e-9, format!("{batches} batches, max deviation {worst:.3e}")))
}

fn fsa_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xi = 1.0;
    let mut notes = Vec::new();
    let mut ok = true;
    for _ in 0..200 {
        let b = rng.random_range(2..9);
        let m: Vec<Vec<f64>> = (0..b).map(|_| (0..6).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let base = fsa_loss(&m, &labels, xi).map_err(|e| e.to_string())?.loss;
        let mut order: Vec<usize> = (0..b).collect();
        order.shuffle(&mut rng);
        let pm: Vec<Vec<f64>> = order.iter().map(|&i| m[i].clone()).collect();
        let pl: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
        let swapped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let permuted = fsa_loss(&pm, &pl, xi).map_err(|e| e.to_string())?.loss;
        let flipped = fsa_loss(&m, &swapped, xi).map_err(|e| e.to_string())?.loss;
        ok &= base >= 0.0 && permuted == base && flipped == base;
    }
    if !ok {
        notes.push("random-batch property violated".to_string());
    }
    let saturated = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![3.0, 3.0], vec![3.0, 3.0]];
    let sat = fsa_loss(&saturated, &[0, 0, 1, 1], xi).map_err(|e| e.to_string())?.loss;
    let hand = vec![vec![0.0, 0.0], vec![0.4, 0.0], vec![0.3, 0.7]];
    let h = fsa_loss(&hand, &[0, 0, 1], xi).map_err(|e| e.to_string())?;
    ok &= sat == 0.0 && h.loss == 0.75;
    notes.push(format!("saturated {sat}, B=3 hand value {} (pos {}, neg {})", h.loss, h.l_pos, h.l_neg));
    Ok((ok, notes.join("; ")))
}

fn mae_direction() -> Outcome {
    let start = Instant::now();
    let corpus = synth_generate(&SynthConfig {
        per_domain: 50,
        seed: 0,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let all: Vec<EmbeddingRecord> = corpus.records.iter().map(|r| r.record.clone()).collect();
    let records = &all[..100];
    let donors = DonorPool::from_records(&all).map_err(|e| e.to_string())?;
    let tau = PipelineConfig::default().tau;
    let table = mae_shift_table(
        records,
        &PerturbationKind::ALL,
        0.15,
        0,
        Some(&donors),
        PerturbOptions::default(),
        tau,
    )
    .map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut notes = Vec::new();
    for row in &table {
        let med = row.median();
        if PerturbationKind::TOKEN_LEVEL.contains(&row.kind) {
            ok &= med.high > med.low;
            notes.push(format!("{}: high {:.3} low {:.3}", row.kind, med.high, med.low));
        }
        if row.kind == PerturbationKind::ThemeShift {
            let exact = row.shifts.iter().all(|s| s.mid == 0.0 && s.high == 0.0);
            ok &= exact && row.shifts.iter().all(|s| s.low > 0.0);
            notes.push(format!("theme: mid/high zero on all records {exact}, median low {:.3}", med.low));
        }
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(60);
    notes.push(format!("{:.2}s", t.as_secs_f64()));
    Ok((ok, notes.join("; ")))
}

fn paired(a: &AblationRow, b: &AblationRow) -> (f64, f64) {
    let d: Vec<f64> = a.f1.iter().zip(&b.f1).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn modules(row: &AblationRow) -> u8 {
    row.pipeline.lff as u8 | (row.pipeline.fsr as u8) << 1 | (row.pipeline.fsa as u8) << 2
}

fn dg(rows: &[AblationRow], elapsed: Duration) -> Outcome {
    let by_mask = |m: u8| rows.iter().find(|r| modules(r) == m).ok_or(format!("missing row {m:03b}"));
    let base = by_mask(0)?;
    let full = by_mask(7)?;
    let mut ok = full.mean_f1() - base.mean_f1() >= 0.05;
    let mut notes = vec![format!(
        "baseline {:.4}, full {:.4}",
        base.mean_f1(),
        full.mean_f1()
    )];
    for row in rows {
        let m = modules(row);
        for sub in 0..8u8 {
            if sub == m || sub & !m != 0 {
                continue;
            }
            let (mean, se) = paired(row, by_mask(sub)?);
            if mean < -2.0 * se {
                ok = false;
                notes.push(format!("{} below {sub:03b} by {:.4} (2SE {:.4})", row.label, -mean, 2.0 * se));
            }
        }
    }
    ok &= elapsed < Duration::from_secs(300);
    notes.push(format!("{:.1}s", elapsed.as_secs_f64()));
    Ok((ok, notes.join("; ")))
}

fn single_band(rows: &[AblationRow]) -> Outcome {
    let f = |label: &str| {
        rows.iter()
            .find(|r| r.label == label)
            .map(AblationRow::mean_f1)
            .ok_or(format!("missing row {label}"))
    };
    let (low, mid, high) = (f("keep=low")?, f("keep=mid")?, f("keep=high")?);
    Ok((
        mid > low && high > low,
        format!("low {low:.4}, mid {mid:.4}, high {high:.4}"),
    ))
}

fn split_mae(splits: &[SplitData]) -> Outcome {
    let cfg = experiment_config();
    let mut trained = [0.0f64; 4];
    let mut untrained = [0.0f64; 4];
    let mut names = Vec::new();
    let mut same = Vec::new();
    for (split, &seed) in splits.iter().zip(&SEEDS) {
        let run = TrainConfig { seed, ..cfg };
        let out = specdet::trainer::train(&run, &split.train, &split.valid).map_err(|e| e.to_string())?;
        let init = DetectorModel::new(out.model.d(), cfg.pipeline).map_err(|e| e.to_string())?;
        let init_stats = init
            .compute_stats(&init.prepare_all(&split.train).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let after = split_mae_report(&split.train, &split.test, &out.model, &out.stats, 32, 50_000, seed)
            .map_err(|e| e.to_string())?;
        let before = split_mae_report(&split.train, &split.test, &init, &init_stats, 32, 50_000, seed)
            .map_err(|e| e.to_string())?;
        for (i, (a, b)) in after.iter().zip(&before).enumerate() {
            trained[i] += a.mae / splits.len() as f64;
            untrained[i] += b.mae / splits.len() as f64;
        }
        if names.is_empty() {
            names = after.iter().map(|c| c.cell.clone()).collect();
            same = after.iter().map(|c| c.same_label).collect();
        }
    }
    let mut ok = true;
    let mut notes = Vec::new();
    for i in 0..names.len() {
        let holds = if same[i] {
            trained[i] < untrained[i]
        } else {
            trained[i] >= untrained[i]
        };
        ok &= holds;
        notes.push(format!(
            "{} {:.2}->{:.2}{}",
            names[i],
            untrained[i],
            trained[i],
            if holds { "" } else { " (violated)" }
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_specdet");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    run(&["synth", "--out", "corpus", "--per-domain", "100", "--seed", "5"])?;
    let mut histories = Vec::new();
    for name in ["a", "b"] {
        run(&[
            "train",
            "--manifest",
            "corpus/manifest.json",
            "--held-out",
            "d3",
            "--train-cap",
            "200",
            "--valid-cap",
            "60",
            "--test-cap",
            "100",
            "--epochs",
            "3",
            "--xi",
            "200",
            "--seed",
            "7",
            "--out",
            name,
        ])?;
        histories.push(std::fs::read(dir.path().join(name).join("history.jsonl")).map_err(|e| e.to_string())?);
    }
    let lines = String::from_utf8_lossy(&histories[0]).lines().count();
    Ok((histories[0] == histories[1], format!("{lines} lines, byte-identical {}", histories[0] == histories[1])))
}

fn report(name: &str, outcome: Outcome, failures: &mut usize) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    if !ok {
        *failures += 1;
    }
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut failures = 0;
    report("dft round trip", round_trip(), &mut failures);
    report("parseval and hermitian symmetry", parseval_hermitian(), &mut failures);
    report("band boundaries", band_boundaries(), &mut failures);
    report("gradient check", gradients(), &mut failures);
    report("fsa properties", fsa_properties(), &mut failures);
    report("mae-shift direction", mae_direction(), &mut failures);

    let splits: Result<Vec<SplitData>, String> = SEEDS.iter().map(|&s| synth_split(s).map_err(|e| e.to_string())).collect();
    match splits {
        Ok(splits) => {
            report("fsr post-condition", fsr_postcondition(&splits[0]), &mut failures);
            let data = |s: u64| Ok(splits[s as usize].clone());
            let cfg = experiment_config();
            let start = Instant::now();
            let modules = ablation_run(&cfg, &module_grid(cfg.pipeline), &SEEDS, data, threads);
            let elapsed = start.elapsed();
            report(
                "domain generalization",
                modules.map_err(|e| e.to_string()).and_then(|rows| dg(&rows, elapsed)),
                &mut failures,
            );
            let bands = ablation_run(&cfg, &band_grid(cfg.pipeline), &SEEDS, data, threads);
            report(
                "single-band ablation",
                bands.map_err(|e| e.to_string()).and_then(|rows| single_band(&rows)),
                &mut failures,
            );
            report("split-mae direction", split_mae(&splits), &mut failures);
        }
        Err(e) => {
            for name in ["fsr post-condition", "domain generalization", "single-band ablation", "split-mae direction"] {
                report(name, Err(e.clone()), &mut failures);
            }
        }
    }
    report("train determinism", determinism(), &mut failures);

    println!("{failures} of 11 criteria failed");
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
