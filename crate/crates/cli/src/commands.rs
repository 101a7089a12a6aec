use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use cardio_core::data::{checksum_dir, generate_benchmark, write_record, BenchmarkConfig};
use cardio_core::metrics::{auroc_gap, reports_csv, reports_table, stratify, StratumKey};
use cardio_core::model::{Components, ModelConfig};
use cardio_core::prepare::{PrepConfig, PreparedRecord};
use cardio_core::scoring::score_map_csv;
use cardio_core::signal::synth::{synthesize_ecg, SynthesisSpec};
use cardio_core::signal::{bandpass_filter, EcgRecord};
use cardio_core::training::{
    calibrate, curve_csv, evaluate, finetune_frozen, joint_train, par_map, prepare_all, pretrain, score_records,
    train_from_scratch, EvalOptions, Evaluation, RunConfig, ScoredRecord, Stage, TrainedModel, MANIFEST_FILE,
};
use cardio_core::CoreError;
use clap::Parser;

use crate::dataset::{is_normal, DataDir};
use crate::plot::{grouped_bars_svg, score_map_svg};
use crate::run::{file_checksum, load_manifest, replay_args, replay_outputs, OutputRun};
use crate::{
    AblateArgs, Cli, Command, EvaluateArgs, FairnessArgs, FinetuneArgs, GenerateArgs, GlobalOpts, JointArgs,
    PreprocessArgs, ReplayArgs, ScoreArgs, TrainArgs, SEED_ENV,
};

pub fn dispatch(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Generate(a) => generate(&g, &a, argv),
        Command::Preprocess(a) => preprocess(&g, &a, argv),
        Command::Pretrain(a) => pretrain_cmd(&g, &a, argv),
        Command::Finetune(a) => finetune_cmd(&g, &a, argv),
        Command::JointTrain(a) => joint_cmd(&g, &a, argv),
        Command::Score(a) => score_cmd(&g, &a, argv),
        Command::Evaluate(a) => evaluate_cmd(&g, &a, argv),
        Command::FairnessReport(a) => fairness_cmd(&g, &a, argv),
        Command::Ablate(a) => ablate_cmd(&g, &a, argv),
        Command::Replay(a) => replay_cmd(&a),
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CoreError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(g: &GlobalOpts, fallback: u64) -> anyhow::Result<u64> {
    Ok(match g.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(fallback),
    })
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
}

fn run_config(g: &GlobalOpts, stage: Stage) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_toml(&read_text(p)?).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.stage = stage;
    cfg.seed = resolve_seed(g, cfg.seed)?;
    Ok(cfg)
}

fn record_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

fn generate(g: &GlobalOpts, a: &GenerateArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let mut run = OutputRun::create(&a.out, "generate", argv)?;
    if a.benchmark {
        let mut cfg = match &g.config {
            Some(p) => BenchmarkConfig::from_toml(&read_text(p)?)?,
            None => BenchmarkConfig::default(),
        };
        cfg.seed = resolve_seed(g, cfg.seed)?;
        run.manifest.seed = Some(cfg.seed);
        run.manifest.config = Some(cfg.to_toml());
        if let Some(s) = a.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(CoreError::Config(format!("--scale must be positive, got {s}")).into());
            }
            cfg = cfg.scaled(s);
        }
        let bench = generate_benchmark(&cfg)?;
        bench.write(&a.out)?;
        for f in ["split.toml", "schema.txt", "benchmark.toml"] {
            run.track(f)?;
        }
        run.manifest.outputs.insert("records".into(), checksum_dir(&a.out.join("records"))?);
        println!("wrote {} benchmark records to {}", bench.records.len(), a.out.display());
    } else {
        let spec = match g.config.as_ref().or(a.spec.as_ref()) {
            Some(p) => SynthesisSpec::load(p)?,
            None => SynthesisSpec::default(),
        };
        let seed = resolve_seed(g, 0)?;
        run.manifest.seed = Some(seed);
        run.manifest.config = Some(spec.to_toml());
        for i in 0..a.count {
            let mut rec = synthesize_ecg(&spec, record_seed(seed, i))?.record;
            rec.record_id = format!("syn{i:05}");
            write_record(&a.out, &rec)?;
        }
        run.manifest.outputs.insert("records".into(), checksum_dir(&a.out)?);
        println!("wrote {} records to {}", a.count, a.out.display());
    }
    run.finish()?;
    Ok(())
}

fn preprocess(g: &GlobalOpts, a: &PreprocessArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let cfg = run_config(g, Stage::Pretrain)?;
    let data = DataDir::load(&a.records)?;
    let mut run = OutputRun::create(&a.out, "preprocess", argv)?;
    run.manifest.config = Some(cfg.to_toml());
    run.input("records", data.checksum());
    let filtered = par_map(&data.records, g.jobs, |r| bandpass_filter(r, &cfg.prep.filter))?;
    let nested = data.root.join("records").is_dir();
    let rec_dir = if nested { a.out.join("records") } else { a.out.clone() };
    for r in &filtered {
        write_record(&rec_dir, r)?;
    }
    if nested {
        for f in ["split.toml", "schema.txt", "benchmark.toml"] {
            let src = data.root.join(f);
            if src.is_file() {
                run.write(f, std::fs::read(&src).map_err(|e| CoreError::io(&src, e))?)?;
            }
        }
    }
    run.manifest.outputs.insert("records".into(), checksum_dir(&rec_dir)?);
    run.finish()?;
    println!(
        "filtered {} records into {} (set prep.apply_filter = false when training on them)",
        filtered.len(),
        rec_dir.display()
    );
    Ok(())
}

fn prep_records(records: &[&EcgRecord], (model, prep): (&ModelConfig, &PrepConfig), jobs: usize) -> anyhow::Result<Vec<PreparedRecord>> {
    Ok(prepare_all(records, model, prep, jobs)?)
}

/// Calibrate on validation records when there are any, then save the final
/// and best checkpoints and the learning curve.
fn finish_training(mut run: OutputRun, mut tm: TrainedModel, val: &[PreparedRecord], jobs: usize) -> anyhow::Result<()> {
    let mut best = tm.best.take().map(|store| TrainedModel {
        store,
        ..tm.clone()
    });
    if val.iter().any(|r| is_normal(&r.record)) {
        let scored = score_records(&tm, val, jobs)?;
        calibrate(&mut tm, &scored)?;
        if let Some(b) = best.as_mut() {
            let scored = score_records(b, val, jobs)?;
            calibrate(b, &scored)?;
        }
    }
    run.save_model("model.ckpt", &tm)?;
    if let Some(b) = &best {
        run.save_model("best.ckpt", b)?;
    }
    run.write("curve.csv", curve_csv(&tm.curve))?;
    run.manifest.curve = tm.curve.clone();
    if let Some(last) = tm.curve.last() {
        println!(
            "{}: {} epochs, final train loss {:.6e}{}",
            tm.meta.stage.name(),
            tm.curve.len(),
            last.train_loss,
            last.val_loss.map_or(String::new(), |v| format!(", val loss {v:.6e}"))
        );
    }
    let out = run.dir.clone();
    run.finish()?;
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

fn pretrain_cmd(g: &GlobalOpts, a: &TrainArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let mut cfg = run_config(g, Stage::Pretrain)?;
    let data = DataDir::load(&a.data)?;
    let classes = data.schema.names().to_vec();
    cfg.model.n_classes = classes.len();
    let mut run = OutputRun::create(&a.out, "pretrain", argv)?;
    run.manifest.seed = Some(cfg.seed);
    run.manifest.config = Some(cfg.to_toml());
    run.input("data", data.checksum());
    let train = prep_records(&data.pretrain()?, (&cfg.model, &cfg.prep), g.jobs)?;
    let val = prep_records(&data.val()?, (&cfg.model, &cfg.prep), g.jobs)?;
    let tm = pretrain(&cfg, &classes, &train, &val)?;
    finish_training(run, tm, &val, g.jobs)
}

fn finetune_cmd(g: &GlobalOpts, a: &FinetuneArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let stage = if a.scratch { Stage::Scratch } else { Stage::FinetuneFrozen };
    let mut cfg = run_config(g, stage)?;
    cfg.init_checkpoint = a.init.clone();
    let data = DataDir::load(&a.data)?;
    let mut run = OutputRun::create(&a.out, "finetune", argv)?;
    run.manifest.seed = Some(cfg.seed);
    run.input("data", data.checksum());
    if a.scratch {
        let classes = data.schema.names().to_vec();
        cfg.model.n_classes = classes.len();
        run.manifest.config = Some(cfg.to_toml());
        let lab = prep_records(&data.labeled()?, (&cfg.model, &cfg.prep), g.jobs)?;
        let val = prep_records(&data.val()?, (&cfg.model, &cfg.prep), g.jobs)?;
        let tm = train_from_scratch(&cfg, &classes, &lab, &val)?;
        return finish_training(run, tm, &val, g.jobs);
    }
    let init = a.init.as_ref().expect("clap requires --init without --scratch");
    let base = TrainedModel::load(init)?;
    run.input("init", file_checksum(init)?);
    run.manifest.config = Some(cfg.to_toml());
    data.check_schema(&base.meta.class_names)?;
    let lab = prep_records(&data.labeled()?, (&base.model.config, &base.meta.prep), g.jobs)?;
    let val = prep_records(&data.val()?, (&base.model.config, &base.meta.prep), g.jobs)?;
    let tm = finetune_frozen(&cfg, &base, &lab, &val)?;
    finish_training(run, tm, &val, g.jobs)
}

fn joint_cmd(g: &GlobalOpts, a: &JointArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let mut cfg = run_config(g, Stage::Joint)?;
    cfg.init_checkpoint = Some(a.init.clone());
    let data = DataDir::load(&a.data)?;
    let base = TrainedModel::load(&a.init)?;
    data.check_schema(&base.meta.class_names)?;
    let mut run = OutputRun::create(&a.out, "joint-train", argv)?;
    run.manifest.seed = Some(cfg.seed);
    run.manifest.config = Some(cfg.to_toml());
    run.input("data", data.checksum());
    run.input("init", file_checksum(&a.init)?);
    let lab = prep_records(&data.labeled()?, (&base.model.config, &base.meta.prep), g.jobs)?;
    let val = prep_records(&data.val()?, (&base.model.config, &base.meta.prep), g.jobs)?;
    let tm = joint_train(&cfg, &base, &lab, &val)?;
    finish_training(run, tm, &val, g.jobs)
}

fn top_classes(names: &[String], probs: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (names[i].clone(), probs[i])).collect()
}

fn score_cmd(g: &GlobalOpts, a: &ScoreArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let tm = TrainedModel::load(&a.model)?;
    let data = DataDir::load(&a.records)?;
    data.check_schema(&tm.meta.class_names)?;
    let mut run = OutputRun::create(&a.out, "score", argv)?;
    run.input("model", file_checksum(&a.model)?);
    run.input("records", data.checksum());
    let records = data.all();
    let prepared = prep_records(&records, (&tm.model.config, &tm.meta.prep), g.jobs)?;
    let scored = score_records(&tm, &prepared, g.jobs)?;
    let mut summary = String::from("record_id,anomaly_score,detected,beat_count,unsegmentable,top5\n");
    for (s, p) in scored.iter().zip(&prepared) {
        run.write(&format!("maps/{}.csv", s.record_id), score_map_csv(&s.map, s.truth_mask.as_deref()))?;
        if a.plot {
            let svg = score_map_svg(
                &format!("{}  A = {:.4}", s.record_id, s.map.anomaly_score),
                &p.global.values,
                &s.map.values,
                s.truth_mask.as_deref(),
                tm.meta.localization_threshold,
            );
            run.write(&format!("plots/{}.svg", s.record_id), svg)?;
        }
        let detected = tm
            .meta
            .detection_threshold
            .map_or(String::new(), |t| (s.map.anomaly_score >= t).to_string());
        let top: Vec<String> = top_classes(&tm.meta.class_names, &s.class_probs, 5)
            .into_iter()
            .map(|(n, p)| format!("{n}:{p:.4}"))
            .collect();
        let _ = writeln!(
            summary,
            "{},{:e},{detected},{},{},{}",
            s.record_id,
            s.map.anomaly_score,
            s.map.beat_count,
            s.map.unsegmentable,
            top.join(";")
        );
    }
    run.write("scores.csv", &summary)?;
    let n_unseg = scored.iter().filter(|s| s.map.unsegmentable).count();
    if n_unseg > 0 {
        eprintln!("warning: {n_unseg} records had no detectable beats and were scored with the global term only");
    }
    run.finish()?;
    println!("scored {} records into {}", scored.len(), a.out.display());
    Ok(())
}

/// Load, prepare and score the evaluation records of `data`, calibrating
/// on its validation split when the checkpoint carries no thresholds.
fn score_for_eval<'a>(tm: &mut TrainedModel, data: &'a DataDir, jobs: usize) -> anyhow::Result<(Vec<&'a EcgRecord>, Vec<ScoredRecord>)> {
    data.check_schema(&tm.meta.class_names)?;
    if tm.meta.localization_threshold.is_none() {
        let val = data.val()?;
        if val.iter().any(|r| is_normal(r)) {
            let vp = prep_records(&val, (&tm.model.config, &tm.meta.prep), jobs)?;
            let vs = score_records(tm, &vp, jobs)?;
            calibrate(tm, &vs)?;
        }
    }
    let test = data.test()?;
    let prepared = prep_records(&test, (&tm.model.config, &tm.meta.prep), jobs)?;
    let scored = score_records(tm, &prepared, jobs)?;
    Ok((test, scored))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x}"))
}

fn summary_text(ev: &Evaluation, names: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "detection_auroc = {}", fmt_opt(ev.detection.auroc));
    if let Some((lo, hi)) = ev.detection.auroc_ci {
        let _ = writeln!(s, "detection_auroc_ci = [{lo}, {hi}]");
    }
    let _ = writeln!(s, "macro_auroc = {}", fmt_opt(ev.macro_auroc));
    if let Some(l) = &ev.localization {
        let _ = writeln!(s, "localization_threshold = {}", l.threshold);
        let _ = writeln!(s, "mean_dice = {}", l.mean_dice);
        let _ = writeln!(s, "mean_top_decile_enrichment = {}", l.mean_enrichment);
        let _ = writeln!(s, "localization_records = {}", l.n_records);
    }
    let _ = writeln!(s, "\n[per_class_auroc]");
    for (n, v) in names.iter().zip(&ev.per_class_auroc) {
        let _ = writeln!(s, "{n} = {}", fmt_opt(*v));
    }
    s
}

fn evaluate_cmd(g: &GlobalOpts, a: &EvaluateArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let mut tm = TrainedModel::load(&a.model)?;
    let data = DataDir::load(&a.data)?;
    let seed = resolve_seed(g, 0)?;
    let mut run = OutputRun::create(&a.out, "evaluate", argv)?;
    run.manifest.seed = Some(seed);
    run.input("model", file_checksum(&a.model)?);
    run.input("data", data.checksum());
    let (test, scored) = score_for_eval(&mut tm, &data, g.jobs)?;
    let opts = EvalOptions {
        strata: StratumKey::parse_list(&a.by)?,
        bootstrap: a.bootstrap,
        seed,
    };
    let ev = evaluate(&tm, &scored, &test, &data.tiers(), &opts)?;
    let reports = ev.all_reports();
    run.write("reports.csv", reports_csv(&reports))?;
    run.write("summary.toml", summary_text(&ev, &tm.meta.class_names))?;
    run.finish()?;
    print!("{}", reports_table(&reports));
    print!("{}", summary_text(&ev, &tm.meta.class_names));
    Ok(())
}

fn fairness_cmd(g: &GlobalOpts, a: &FairnessArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let mut tm = TrainedModel::load(&a.model)?;
    let data = DataDir::load(&a.records)?;
    let keys = StratumKey::parse_list(&a.by)?;
    let mut run = OutputRun::create(&a.out, "fairness-report", argv)?;
    run.input("model", file_checksum(&a.model)?);
    run.input("records", data.checksum());
    let (test, scored) = score_for_eval(&mut tm, &data, g.jobs)?;
    let scores: Vec<f64> = scored.iter().map(|s| s.map.anomaly_score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.abnormal == Some(true)).collect();
    if !labels.iter().any(|l| *l) || labels.iter().all(|l| *l) {
        return Err(CoreError::Data("fairness report needs both normal and abnormal labelled records".into()).into());
    }
    let attrs: Vec<&_> = test.iter().map(|r| &r.attributes).collect();
    let mut all = Vec::new();
    let mut groups = Vec::new();
    let mut gaps = String::new();
    for key in keys {
        let reports = stratify(key, &attrs, &scores, &labels);
        let gap = auroc_gap(&reports);
        let _ = writeln!(gaps, "gap {} = {}", key.name(), fmt_opt(gap));
        groups.push((
            key.name().to_string(),
            reports
                .iter()
                .filter_map(|r| Some((r.stratum.clone()?, r.auroc?)))
                .collect::<Vec<_>>(),
        ));
        all.extend(reports);
    }
    run.write("fairness.csv", reports_csv(&all))?;
    run.write("fairness.svg", grouped_bars_svg("AUROC by stratum", &groups))?;
    run.write("gaps.txt", &gaps)?;
    run.finish()?;
    print!("{}", reports_table(&all));
    print!("{gaps}");
    Ok(())
}

fn ablate_cmd(g: &GlobalOpts, a: &AblateArgs, argv: Vec<String>) -> anyhow::Result<()> {
    let base_cfg = run_config(g, Stage::Pretrain)?;
    let order: Vec<String> = a
        .components
        .split(',')
        .map(|s| s.trim().to_ascii_lowercase())
        .filter(|s| !s.is_empty())
        .collect();
    for c in &order {
        Components::parse(c)?;
    }
    let data = DataDir::load(&a.data)?;
    let classes = data.schema.names().to_vec();
    let mut run = OutputRun::create(&a.out, "ablate", argv)?;
    run.manifest.seed = Some(base_cfg.seed);
    run.manifest.config = Some(base_cfg.to_toml());
    run.input("data", data.checksum());
    let mut table = String::from("stage,components,auroc,mean_dice,mean_enrichment\n");
    for k in 0..=order.len() {
        let mut cfg = base_cfg.clone();
        cfg.model.n_classes = classes.len();
        cfg.model.components = Components::parse(&order[..k].join(","))?;
        let label = if k == 0 { "none".to_string() } else { order[..k].join("+") };
        let train = prep_records(&data.pretrain()?, (&cfg.model, &cfg.prep), g.jobs)?;
        let val = prep_records(&data.val()?, (&cfg.model, &cfg.prep), g.jobs)?;
        let mut tm = pretrain(&cfg, &classes, &train, &val)?;
        let vs = score_records(&tm, &val, g.jobs)?;
        if !vs.is_empty() {
            calibrate(&mut tm, &vs)?;
        }
        let test = data.test()?;
        let tp = prep_records(&test, (&cfg.model, &cfg.prep), g.jobs)?;
        let ts = score_records(&tm, &tp, g.jobs)?;
        let ev = evaluate(
            &tm,
            &ts,
            &test,
            &data.tiers(),
            &EvalOptions {
                strata: Vec::new(),
                bootstrap: 0,
                seed: cfg.seed,
            },
        )?;
        let (dice, enr) = ev
            .localization
            .as_ref()
            .map_or((None, None), |l| (Some(l.mean_dice), Some(l.mean_enrichment)));
        let _ = writeln!(
            table,
            "{k},{label},{},{},{}",
            fmt_opt(ev.detection.auroc),
            fmt_opt(dice),
            fmt_opt(enr)
        );
        println!("stage {k} ({label}): AUROC {}", fmt_opt(ev.detection.auroc));
        run.write(&format!("stage{k}/config.toml"), cfg.to_toml())?;
        run.save_model(&format!("stage{k}/model.ckpt"), &tm)?;
    }
    run.write("ablation.csv", &table)?;
    run.finish()?;
    print!("{table}");
    Ok(())
}

fn replay_cmd(a: &ReplayArgs) -> anyhow::Result<()> {
    let original = load_manifest(&a.manifest)?;
    if a.out.join(MANIFEST_FILE) == a.manifest {
        bail!("replay output directory must differ from the original");
    }
    let args = replay_args(&original, &a.out)?;
    let mut full = vec!["cardio".to_string()];
    full.extend(args.iter().cloned());
    let cli = Cli::try_parse_from(&full).map_err(|e| CoreError::Config(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!("cannot replay a replay");
    }
    dispatch(cli, args)?;
    let rerun = load_manifest(&a.out.join(MANIFEST_FILE))?;
    let diff = replay_outputs(&original, &rerun);
    if diff.is_empty() {
        println!("replay identical: {} outputs match", original.outputs.len());
        Ok(())
    } else {
        for (k, (a, b)) in &diff {
            eprintln!("differs: {k} {} -> {}", a.as_deref().unwrap_or("-"), b.as_deref().unwrap_or("-"));
        }
        bail!("{} outputs differ from the manifest", diff.len())
    }
}
