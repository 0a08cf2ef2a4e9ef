use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use specdet::data::{
    build_split, load_pool, read_records, synth_generate, write_records, EmbeddingRecord, PoolRecord,
    RecordFlags, RecordHeader, Scenario, SplitData, SplitPlan, SynthConfig,
};
use specdet::model::{load_checkpoint, save_checkpoint, DetectorModel, FsrInference, PreparedSample};
use specdet::numerics::modulus;
use specdet::perturb::{mae_shift_table, perturb_corpus, DonorPool, PerturbOptions, PerturbationKind};
use specdet::spectral::GlobalSpectrumStats;
use specdet::trainer::{
    ablation_run, band_grid, evaluate, history_jsonl, inference_mode, module_grid, tau_sweep, train,
    AblationRow, TrainConfig,
};
use specdet::{Error, Result};

use crate::settings::Settings;
use crate::{Command, Common, DataArgs, PipelineArgs, TrainArgs};

pub fn init_threads(n: usize) -> std::result::Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

pub fn run(command: Command, mut s: Settings) -> Result<()> {
    match command {
        Command::Stats {
            common,
            data,
            pipeline,
            out,
        } => {
            push_common(&mut s, &common);
            push_data(&mut s, &data);
            push_pipeline(&mut s, &pipeline);
            stats_cmd(s, &out)
        }
        Command::Train {
            common,
            data,
            train,
            out,
        } => {
            push_common(&mut s, &common);
            push_data(&mut s, &data);
            push_train(&mut s, &train);
            train_cmd(s, &out)
        }
        Command::Evaluate {
            common,
            data,
            checkpoint,
            stats,
            batch_size,
            fsr_inference,
        } => {
            push_common(&mut s, &common);
            push_data(&mut s, &data);
            s.flag("batch_size", batch_size);
            s.flag("fsr_inference", fsr_inference);
            evaluate_cmd(s, &checkpoint, &stats)
        }
        Command::Perturb {
            common,
            input,
            kind,
            rate,
            donors,
            theme_offset,
            out,
        } => {
            push_common(&mut s, &common);
            s.flag("kind", kind);
            s.flag("rate", rate);
            s.flag("donors", donors.map(|p| p.display().to_string()));
            s.flag("theme_offset", theme_offset);
            perturb_cmd(s, &input, &out)
        }
        Command::MaeShift {
            common,
            input,
            kind,
            rate,
            tau,
            donors,
            theme_offset,
            limit,
            out,
        } => {
            push_common(&mut s, &common);
            s.flag("kind", kind);
            s.flag("rate", rate);
            s.flag("tau", tau);
            s.flag("donors", donors.map(|p| p.display().to_string()));
            s.flag("theme_offset", theme_offset);
            s.flag("limit", limit);
            mae_shift_cmd(s, &input, out.as_deref())
        }
        Command::Ablate {
            common,
            data,
            train,
            grid,
            seeds,
            out,
        } => {
            push_common(&mut s, &common);
            push_data(&mut s, &data);
            push_train(&mut s, &train);
            s.flag("grid", grid);
            s.flag("seeds", seeds);
            ablate_cmd(s, common.threads, out.as_deref())
        }
        Command::SweepTau {
            common,
            data,
            train,
            taus,
            seeds,
            out,
        } => {
            push_common(&mut s, &common);
            push_data(&mut s, &data);
            push_train(&mut s, &train);
            s.flag("taus", taus);
            s.flag("seeds", seeds);
            sweep_cmd(s, common.threads, out.as_deref())
        }
        Command::Synth {
            common,
            dim,
            n_domains,
            per_domain,
            amplitude,
            out,
        } => {
            push_common(&mut s, &common);
            s.flag("dim", dim);
            s.flag("n_domains", n_domains);
            s.flag("per_domain", per_domain);
            s.flag("amplitude", amplitude);
            synth_cmd(s, &out)
        }
        Command::DumpFeatures {
            common,
            checkpoint,
            stats,
            input,
            batch_size,
            out,
        } => {
            push_common(&mut s, &common);
            s.flag("batch_size", batch_size);
            dump_cmd(s, &checkpoint, &stats, &input, out.as_deref())
        }
        Command::Validate { common, files } => {
            push_common(&mut s, &common);
            let _ = seed(&mut s)?;
            s.finish()?;
            validate_cmd(&files)
        }
    }
}

fn push_common(s: &mut Settings, c: &Common) {
    s.flag("seed", c.seed);
}

fn push_data(s: &mut Settings, d: &DataArgs) {
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    s.flag("manifest", path(&d.manifest));
    s.flag("scenario", d.scenario.clone());
    s.flag("held_out", d.held_out.clone());
    s.flag("train_cap", d.train_cap);
    s.flag("valid_cap", d.valid_cap);
    s.flag("test_cap", d.test_cap);
    s.flag("train", path(&d.train));
    s.flag("valid", path(&d.valid));
    s.flag("test", path(&d.test));
}

fn push_pipeline(s: &mut Settings, p: &PipelineArgs) {
    s.flag("tau", p.tau);
    s.flag("xi", p.xi);
    s.switch("lff", p.no_lff, "false");
    s.switch("fsr", p.no_fsr, "false");
    s.switch("fsa", p.no_fsa, "false");
    s.flag("band_keep", p.band_keep.clone());
    s.flag("fsr_inference", p.fsr_inference.clone());
    s.flag("band_source", p.band_source.clone());
    s.flag("spectral_axis", p.spectral_axis.clone());
    s.flag("max_tokens", p.max_tokens);
}

fn push_train(s: &mut Settings, t: &TrainArgs) {
    s.flag("epochs", t.epochs);
    s.flag("lr", t.lr);
    s.flag("weight_decay", t.weight_decay);
    s.flag("batch_size", t.batch_size);
    s.flag("fsa_weight", t.fsa_weight);
    s.flag("eval_interval", t.eval_interval);
    s.switch("refresh_stats", t.refresh_stats, "true");
    push_pipeline(s, &t.pipeline);
}

fn train_config(s: &mut Settings) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let keys: Vec<&str> = cfg.pairs().into_iter().map(|(k, _)| k).collect();
    for (k, v) in s.take_all(&keys) {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed(s: &mut Settings) -> Result<u64> {
    Ok(s.take_parsed("seed")?.unwrap_or(0))
}

fn read(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let (_, records) = read_records(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

enum Source {
    Pool(Vec<PoolRecord>, SplitPlan),
    Files(SplitData),
}

impl Source {
    fn from_settings(s: &mut Settings) -> Result<Self> {
        if let Some(m) = s.take("manifest") {
            let pool = load_pool(Path::new(&m))?;
            let scenario: Scenario = s.take("scenario").as_deref().unwrap_or("cross_domain").parse()?;
            let held_out = s
                .take("held_out")
                .map(|v| v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
                .unwrap_or_default();
            let mut plan = SplitPlan::new(scenario, held_out);
            if let Some(c) = s.take_parsed("train_cap")? {
                plan.train_cap = c;
            }
            if let Some(c) = s.take_parsed("valid_cap")? {
                plan.valid_cap = c;
            }
            if let Some(c) = s.take_parsed("test_cap")? {
                plan.test_cap = c;
            }
            return Ok(Source::Pool(pool, plan));
        }
        let mut file = |k: &str| -> Result<Vec<EmbeddingRecord>> {
            match s.take(k) {
                Some(p) => read(Path::new(&p)),
                None => Ok(Vec::new()),
            }
        };
        Ok(Source::Files(SplitData {
            train: file("train")?,
            valid: file("valid")?,
            test: file("test")?,
        }))
    }

    fn split(&self, seed: u64) -> Result<SplitData> {
        match self {
            Source::Pool(pool, plan) => build_split(pool, plan, seed),
            Source::Files(d) => Ok(d.clone()),
        }
    }
}

fn need(records: &[EmbeddingRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config(format!(
            "no {what} records: pass --manifest or --{what}"
        )));
    }
    Ok(())
}

/// Effective settings as `# key=value` comment lines.
fn echo(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn effective(s: &Settings, cfg: &TrainConfig) -> Vec<(String, String)> {
    with_defaults(s, cfg.pairs())
}

/// Used settings with the resolved values of `resolved` filled in.
fn with_defaults(s: &Settings, resolved: Vec<(&str, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = s.used().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    for (k, v) in resolved {
        match out.iter_mut().find(|(key, _)| key == k) {
            Some(slot) => slot.1 = v,
            None => out.push((k.to_string(), v)),
        }
    }
    out.sort();
    out
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn stats_cmd(mut s: Settings, out: &Path) -> Result<()> {
    let seed = seed(&mut s)?;
    let cfg = train_config(&mut s)?;
    let source = Source::from_settings(&mut s)?;
    s.finish()?;
    let split = source.split(seed)?;
    need(&split.train, "train")?;
    let model = DetectorModel::new(split.train[0].dim(), cfg.pipeline)?;
    let stats = model.compute_stats(&model.prepare_all(&split.train)?)?;
    let text = echo(&effective(&s, &cfg)) + &stats.to_text();
    fs::write(out, text)?;
    Ok(())
}

fn train_cmd(mut s: Settings, out: &Path) -> Result<()> {
    let cfg = train_config(&mut s)?;
    let source = Source::from_settings(&mut s)?;
    s.finish()?;
    let split = source.split(cfg.seed)?;
    need(&split.train, "train")?;
    let outcome = train(&cfg, &split.train, &split.valid)?;
    fs::create_dir_all(out)?;
    save_checkpoint(&out.join("model.ckpt"), &outcome.model, None)?;
    let settings = effective(&s, &cfg);
    fs::write(out.join("stats.txt"), echo(&settings) + &outcome.stats.to_text())?;
    let header: serde_json::Map<String, serde_json::Value> = settings
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect();
    let mut history = serde_json::to_string(&serde_json::json!({ "config": header }))?;
    history.push('\n');
    history.push_str(&history_jsonl(&outcome.history)?);
    fs::write(out.join("history.jsonl"), history)?;
    match outcome.best_epoch {
        Some(e) => println!("best epoch {e}"),
        None => println!("no validation data; kept the final model"),
    }
    Ok(())
}

fn load_model(s: &mut Settings, checkpoint: &Path, stats: &Path) -> Result<(DetectorModel, GlobalSpectrumStats)> {
    let (mut model, _) = load_checkpoint(checkpoint)?;
    if let Some(v) = s.take("fsr_inference") {
        let mut cfg = *model.config();
        cfg.fsr_inference = v.parse::<FsrInference>()?;
        model = model.with_config(cfg)?;
    }
    let stats = GlobalSpectrumStats::from_text(&fs::read_to_string(stats)?)?;
    Ok((model, stats))
}

fn evaluate_cmd(mut s: Settings, checkpoint: &Path, stats: &Path) -> Result<()> {
    let seed = seed(&mut s)?;
    let (model, stats) = load_model(&mut s, checkpoint, stats)?;
    let batch: usize = s.take_parsed("batch_size")?.unwrap_or(32);
    let source = Source::from_settings(&mut s)?;
    s.finish()?;
    let split = source.split(seed)?;
    need(&split.test, "test")?;
    let report = evaluate(&model, &split.test, &stats, batch)?;
    let mut pairs = with_defaults(&s, vec![("seed", seed.to_string()), ("batch_size", batch.to_string())]);
    pairs.extend(model.config().pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
    let config: serde_json::Map<String, serde_json::Value> =
        pairs.into_iter().map(|(k, v)| (k, serde_json::Value::String(v))).collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({ "config": config, "report": report }))?
    );
    Ok(())
}

fn perturb_options(s: &mut Settings) -> Result<PerturbOptions> {
    let mut o = PerturbOptions::default();
    if let Some(c) = s.take_parsed("theme_offset")? {
        o.theme_offset = c;
    }
    Ok(o)
}

fn perturb_cmd(mut s: Settings, input: &Path, out: &Path) -> Result<()> {
    let seed = seed(&mut s)?;
    let kind: PerturbationKind = s.require("kind")?.parse()?;
    let rate: f64 = s.take_parsed("rate")?.unwrap_or(0.15);
    let donors_path = s.take("donors");
    let opts = perturb_options(&mut s)?;
    s.finish()?;
    let records = read(input)?;
    let donor_records = match &donors_path {
        Some(p) => read(Path::new(p))?,
        None => records.clone(),
    };
    let donors = if kind.needs_donors() {
        Some(DonorPool::from_records(&donor_records)?)
    } else {
        None
    };
    let perturbed = perturb_corpus(&records, kind, rate, seed, donors.as_ref(), opts)?;
    let dim = records.first().map_or(0, |r| r.dim()) as u32;
    let header = RecordHeader {
        hidden_dim: dim,
        flags: RecordFlags::for_records(&perturbed),
    };
    write_records(out, header, &perturbed)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".config");
    let pairs = with_defaults(
        &s,
        vec![
            ("seed", seed.to_string()),
            ("kind", kind.to_string()),
            ("rate", format!("{rate:?}")),
            ("theme_offset", format!("{:?}", opts.theme_offset)),
        ],
    );
    fs::write(PathBuf::from(sidecar), echo(&pairs))?;
    Ok(())
}

fn mae_shift_cmd(mut s: Settings, input: &Path, out: Option<&Path>) -> Result<()> {
    let seed = seed(&mut s)?;
    let kinds: Vec<PerturbationKind> = match s.take("kind") {
        Some(v) => v.split(',').map(|k| k.trim().parse()).collect::<Result<_>>()?,
        None => PerturbationKind::ALL.to_vec(),
    };
    let rate: f64 = s.take_parsed("rate")?.unwrap_or(0.15);
    let tau: f64 = s.take_parsed("tau")?.unwrap_or(0.6);
    let limit: Option<usize> = s.take_parsed("limit")?;
    let donors_path = s.take("donors");
    let opts = perturb_options(&mut s)?;
    s.finish()?;
    let mut records = read(input)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    let donor_records = match &donors_path {
        Some(p) => read(Path::new(p))?,
        None => records.clone(),
    };
    let donors = if kinds.iter().any(|k| k.needs_donors()) {
        Some(DonorPool::from_records(&donor_records)?)
    } else {
        None
    };
    let rows = mae_shift_table(&records, &kinds, rate, seed, donors.as_ref(), opts, tau)?;
    let kind_list: Vec<String> = kinds.iter().map(|k| k.to_string()).collect();
    let mut text = echo(&with_defaults(
        &s,
        vec![
            ("seed", seed.to_string()),
            ("kind", kind_list.join(",")),
            ("rate", format!("{rate:?}")),
            ("tau", format!("{tau:?}")),
            ("theme_offset", format!("{:?}", opts.theme_offset)),
        ],
    ));
    text.push_str("kind,rate,records,mean_low,mean_mid,mean_high,median_low,median_mid,median_high\n");
    for r in &rows {
        let (m, md) = (r.mean(), r.median());
        let _ = writeln!(
            text,
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.kind,
            r.rate,
            r.shifts.len(),
            m.low,
            m.mid,
            m.high,
            md.low,
            md.mid,
            md.high
        );
    }
    emit(out, &text)
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("seeds: expected a list like 0,1,2 or a range like 0..10, got {v:?}"));
    if let Some((a, b)) = v.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    v.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn ablation_csv(settings: &[(String, String)], rows: &[AblationRow], first: &str) -> String {
    let mut text = echo(settings);
    let seeds = rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
    text.push_str(first);
    text.push_str(",lff,fsr,fsa,band_keep,tau,mean_f1,mean_accuracy");
    for sd in &seeds {
        let _ = write!(text, ",f1_seed{sd}");
    }
    text.push('\n');
    for r in rows {
        let p = r.pipeline;
        let _ = write!(
            text,
            "{},{},{},{},{},{:?},{:?},{:?}",
            r.label.replace(',', ";"),
            p.lff,
            p.fsr,
            p.fsa,
            p.band_keep.to_string().replace(',', ";"),
            p.tau,
            r.mean_f1(),
            r.mean_accuracy()
        );
        for f in &r.f1 {
            let _ = write!(text, ",{f:?}");
        }
        text.push('\n');
    }
    text
}

fn ablate_cmd(mut s: Settings, threads: usize, out: Option<&Path>) -> Result<()> {
    let base = train_config(&mut s)?;
    let grid = match s.take("grid").as_deref().unwrap_or("modules") {
        "modules" => module_grid(base.pipeline),
        "bands" => band_grid(base.pipeline),
        other => return Err(Error::Config(format!("unknown grid {other:?} (modules or bands)"))),
    };
    let seeds = parse_seeds(&s.take("seeds").unwrap_or_else(|| "0..10".into()))?;
    let source = Source::from_settings(&mut s)?;
    s.finish()?;
    let rows = ablation_run(&base, &grid, &seeds, |sd| source.split(sd), threads)?;
    emit(out, &ablation_csv(&effective(&s, &base), &rows, "config"))
}

fn sweep_cmd(mut s: Settings, threads: usize, out: Option<&Path>) -> Result<()> {
    let base = train_config(&mut s)?;
    let taus: Vec<f64> = s
        .take("taus")
        .unwrap_or_else(|| "0,0.2,0.4,0.6,0.8,1".into())
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("taus: bad value {t:?}")))
        })
        .collect::<Result<_>>()?;
    let seeds = parse_seeds(&s.take("seeds").unwrap_or_else(|| "0..10".into()))?;
    let source = Source::from_settings(&mut s)?;
    s.finish()?;
    let rows = tau_sweep(&base, &taus, &seeds, |sd| source.split(sd), threads)?;
    emit(out, &ablation_csv(&effective(&s, &base), &rows, "tau_label"))
}

fn synth_cmd(mut s: Settings, out: &Path) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: seed(&mut s)?,
        ..SynthConfig::default()
    };
    if let Some(v) = s.take_parsed("dim")? {
        cfg.d = v;
    }
    if let Some(v) = s.take_parsed("n_domains")? {
        cfg.n_domains = v;
    }
    if let Some(v) = s.take_parsed("per_domain")? {
        cfg.per_domain = v;
    }
    if let Some(v) = s.take_parsed("amplitude")? {
        cfg.amplitude = v;
    }
    s.finish()?;
    let corpus = synth_generate(&cfg)?;
    fs::create_dir_all(out)?;
    let manifest = corpus.write(out)?;
    let pairs = with_defaults(
        &s,
        vec![
            ("seed", cfg.seed.to_string()),
            ("dim", cfg.d.to_string()),
            ("n_domains", cfg.n_domains.to_string()),
            ("per_domain", cfg.per_domain.to_string()),
            ("amplitude", format!("{:?}", cfg.amplitude)),
        ],
    );
    fs::write(out.join("synth.config"), echo(&pairs))?;
    println!(
        "wrote {} records in {} files; held-out domain {}",
        corpus.records.len(),
        manifest.entries.len(),
        corpus.held_out_domain()
    );
    Ok(())
}

fn band_means(spectra: &[specdet::numerics::OneSidedSpectrum], p: &specdet::spectral::BandPartition) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for s in spectra {
        let m = modulus(s);
        for (i, range) in [(0, p.low().collect::<Vec<_>>()), (1, p.mid().collect()), (2, p.high().collect())] {
            for k in range {
                sums[i] += m[k];
                counts[i] += 1;
            }
        }
    }
    let mut out = [0.0; 3];
    for i in 0..3 {
        if counts[i] > 0 {
            out[i] = sums[i] / counts[i] as f64;
        }
    }
    out
}

fn dump_cmd(mut s: Settings, checkpoint: &Path, stats: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let _ = seed(&mut s)?;
    let (model, stats) = load_model(&mut s, checkpoint, stats)?;
    let batch: usize = s.take_parsed("batch_size")?.unwrap_or(32);
    s.finish()?;
    let records = read(input)?;
    let samples = model.prepare_all(&records)?;
    let mode = inference_mode(&model);
    let mut pairs = with_defaults(&s, vec![("batch_size", batch.to_string())]);
    pairs.extend(model.config().pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
    let mut text = echo(&pairs);
    text.push_str("id,label,domain,generator,prediction");
    for j in 0..model.signal_len() {
        let _ = write!(text, ",f{j}");
    }
    text.push_str(",modulus_low,modulus_mid,modulus_high\n");
    let mut idx = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let fwd = model.forward_batch(&refs, &stats, mode)?;
        for tape in &fwd.tapes {
            let r = &records[idx];
            idx += 1;
            let pred = specdet::model::predict(tape.logits);
            let _ = write!(text, "{},{},{},{},{pred}", r.id, r.label, r.domain, r.generator);
            for v in &tape.features {
                let _ = write!(text, ",{v:?}");
            }
            let [lo, mid, hi] = band_means(&tape.reconstructed, &tape.partition);
            let _ = writeln!(text, ",{lo:?},{mid:?},{hi:?}");
        }
    }
    emit(out, &text)
}

fn validate_cmd(files: &[PathBuf]) -> Result<()> {
    let mut first_error = None;
    for f in files {
        match read(f) {
            Ok(records) => println!("{}: ok, {} records", f.display(), records.len()),
            Err(e) => {
                eprintln!("{}: {e}", f.display());
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
