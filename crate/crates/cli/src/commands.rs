use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use netfound_core::dataset::{load_dataset, save_dataset};
use netfound_core::flow::{composition_stats, FilterConfig, Flow, DEFAULT_GAP_THRESHOLD_US};
use netfound_core::pipeline::{flows_from_pcap, label_index, ExtractedFlows, LabelIndex};
use netfound_core::synthgen::{generate_corpus, labels_from_csv, CorpusOptions, Emission, ScenarioSpec};
use netfound_core::tokenizer::{tokenize_flow, CompositionConfig, TokenizeError, TokenizedFlow, MAX_BURSTS, MAX_PACKETS_PER_BURST};
use netfound_model::attention::{extract_attention, LayerKind};
use netfound_model::finetune::{evaluate, finetune, TaskConfig};
use netfound_model::io::{load_model, save_model};
use netfound_model::masking::MaskingConfig;
use netfound_model::noise::{inject_label_noise, NoiseConfig};
use netfound_model::pretrain::{evaluate_mlm, load_training, loss_csv, pretrain, save_training, TrainConfig};
use netfound_model::{Model, ModelConfig, NormStats, TaskLevel};

use crate::manifest::RunManifest;
use crate::settings::Settings;
use crate::{Cli, CliError, Command, FilterArgs, SECTIONS};

struct Ctx {
    seed: u64,
    threads: usize,
    toy: bool,
    dir: PathBuf,
}

#[derive(Default)]
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let clock = Instant::now();
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let name = cli.command.name();
    let mut s = Settings::load(cli.config.as_deref(), name)?;
    let seed = s.value("seed", cli.seed, 0u64)?;
    let threads = s.value("threads", cli.threads, 1usize)?;
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let toy = s.switch("toy", cli.toy)?;
    let dir = s.path("run-dir", cli.run_dir)?.unwrap_or_else(|| PathBuf::from("run"));
    let ctx = Ctx { seed, threads, toy, dir };
    let out = match cli.command {
        Command::Generate {
            per_class,
            emission,
            span_us,
        } => generate(&mut s, &ctx, per_class, emission, span_us)?,
        Command::Preprocess { pcap, labels, filter } => preprocess(&mut s, &ctx, pcap, labels, filter)?,
        Command::Stats { pcap, filter } => stats(&mut s, &ctx, pcap, filter)?,
        Command::Tokenize { input, out, filter } => tokenize(&mut s, &ctx, input, out, filter)?,
        Command::Pretrain {
            data,
            epochs,
            lr,
            batch_size,
            mask_rate,
            checkpoint_every,
            resume,
            model_config,
        } => {
            let data = s.required_path("data", data)?;
            let cfg = TrainConfig {
                epochs: s.value("epochs", epochs, 1)?,
                lr: s.value("lr", lr, if ctx.toy { 2e-3 } else { 2e-5 })?,
                batch_size: s.value("batch-size", batch_size, 32)?,
                checkpoint_every: s.value("checkpoint-every", checkpoint_every, 0)?,
                masking: MaskingConfig {
                    select_rate: s.value("mask-rate", mask_rate, 0.3)?,
                    ..Default::default()
                },
                seed: ctx.seed,
                ..Default::default()
            };
            let resume = s.path("resume", resume)?;
            let model_config = s.path("model-config", model_config)?;
            s.finish(&SECTIONS)?;
            run_pretrain(&ctx, data, cfg, resume, model_config)?
        }
        Command::EvaluateMlm {
            model,
            data,
            mask_rate,
            batch_size,
        } => {
            let model = s.required_path("model", model)?;
            let data = s.required_path("data", data)?;
            let rate = s.value("mask-rate", mask_rate, 0.3)?;
            let batch = s.value("batch-size", batch_size, 64)?;
            s.finish(&SECTIONS)?;
            run_evaluate_mlm(&ctx, model, data, rate, batch)?
        }
        Command::Finetune {
            data,
            model,
            classes,
            epochs,
            lr,
            batch_size,
            freeze,
            noise_rate,
            level,
            patience,
            val_fraction,
        } => {
            let data_path = s.required_path("data", data)?;
            let model_path = s.path("model", model)?;
            let classes_flag = s.optional("classes", classes)?;
            let mut cfg = TaskConfig {
                level: parse_level(&s.value("level", level, "flow".to_string())?)?,
                lr: s.value("lr", lr, if ctx.toy { 3e-4 } else { 1e-5 })?,
                max_epochs: s.value("epochs", epochs, 30)?,
                batch_size: s.value("batch-size", batch_size, 32)?,
                freeze_backbone: s.switch("freeze", freeze)?,
                patience: s.value("patience", patience, 2)?,
                val_fraction: s.value("val-fraction", val_fraction, 0.1)?,
                seed: ctx.seed,
                ..TaskConfig::new(2)
            };
            let noise = s.value("noise-rate", noise_rate, 0.0)?;
            s.finish(&SECTIONS)?;
            prepare(&ctx)?;
            let flows = load_dataset(&data_path)?;
            let labels = labels_of(&flows)?;
            let max = labels.iter().copied().max().unwrap_or(0);
            cfg.classes = s.value("classes", classes_flag, max + 1)?;
            run_finetune(&ctx, &flows, labels, model_path.as_deref(), cfg, noise)?;
            Outcome {
                inputs: [Some(data_path), model_path].into_iter().flatten().collect(),
                outputs: names(&["model.nfck", "model.toml", "history.csv", "finetune.txt"]),
            }
        }
        Command::Evaluate {
            model,
            data,
            level,
            top_k,
            batch_size,
        } => {
            let model = s.required_path("model", model)?;
            let data = s.required_path("data", data)?;
            let level = parse_level(&s.value("level", level, "flow".to_string())?)?;
            let k = s.value("top-k", top_k, 1)?;
            let batch = s.value("batch-size", batch_size, 64)?;
            s.finish(&SECTIONS)?;
            run_evaluate(&ctx, model, data, level, k, batch)?
        }
        Command::InspectAttention {
            model,
            data,
            flow,
            round,
            layer,
            head,
            top,
        } => {
            let model = s.required_path("model", model)?;
            let data = s.required_path("data", data)?;
            let flow = s.value("flow", flow, 0)?;
            let round = s.value("round", round, 0)?;
            let layer = parse_layer(&s.value("layer", layer, "flow".to_string())?)?;
            let head = s.value("head", head, 0)?;
            let top = s.value("top", top, 5)?;
            s.finish(&SECTIONS)?;
            run_inspect(&ctx, model, data, flow, round, layer, head, top)?
        }
        Command::Rerun { .. } => unreachable!("handled by dispatch"),
    };
    let manifest = RunManifest {
        subcommand: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: ctx.seed,
        threads: ctx.threads,
        argv: s.argv(&["run-dir"]),
        config: s.resolved(),
        inputs: out.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: out.outputs,
        started_unix_s: started,
        wall_clock_s: clock.elapsed().as_secs_f64(),
    };
    manifest.save(&ctx.dir)
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn prepare(ctx: &Ctx) -> Result<(), CliError> {
    fs::create_dir_all(&ctx.dir)
        .map_err(|e| CliError::Data(format!("cannot create run directory {}: {e}", ctx.dir.display())))
}

fn model_config(toy: bool) -> ModelConfig {
    if toy {
        ModelConfig::toy()
    } else {
        ModelConfig::default()
    }
}

fn parse_level(s: &str) -> Result<TaskLevel, CliError> {
    match s {
        "flow" => Ok(TaskLevel::Flow),
        "burst" => Ok(TaskLevel::Burst),
        _ => Err(CliError::Usage(format!("level must be `flow` or `burst`, not `{s}`"))),
    }
}

fn parse_layer(s: &str) -> Result<LayerKind, CliError> {
    if s == "flow" {
        return Ok(LayerKind::Flow);
    }
    s.strip_prefix("burst:")
        .and_then(|n| n.parse().ok())
        .map(LayerKind::Burst)
        .ok_or_else(|| CliError::Usage(format!("layer must be `flow` or `burst:<slot>`, not `{s}`")))
}

fn labels_of(flows: &[TokenizedFlow]) -> Result<Vec<usize>, CliError> {
    flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.label
                .map(|l| l as usize)
                .ok_or_else(|| CliError::Data(format!("flow {i} has no label")))
        })
        .collect()
}

/// Order-preserving map over `items` on up to `threads` scoped workers.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let workers: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("worker panicked"))
            .collect()
    })
}

fn filter_settings(s: &mut Settings, f: FilterArgs) -> Result<(FilterConfig, CompositionConfig), CliError> {
    let filter = FilterConfig {
        min_packets: s.value("min-packets", f.min_packets, FilterConfig::default().min_packets)?,
        require_burst_depth: s.switch("burst-depth", f.burst_depth)?,
        gap_threshold_us: s.value("gap-us", f.gap_us, DEFAULT_GAP_THRESHOLD_US)?,
    };
    let comp = CompositionConfig {
        bursts: s.value("bursts", f.bursts, MAX_BURSTS)?,
        packets: s.value("packets", f.packets, MAX_PACKETS_PER_BURST)?,
    };
    if !(1..=MAX_BURSTS).contains(&comp.bursts) || !(1..=MAX_PACKETS_PER_BURST).contains(&comp.packets) {
        return Err(CliError::Usage(format!(
            "composition must be within 1..={MAX_BURSTS} bursts and 1..={MAX_PACKETS_PER_BURST} packets"
        )));
    }
    Ok((filter, comp))
}

fn read_flows(path: &Path, filter: &FilterConfig) -> Result<ExtractedFlows, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let extracted = flows_from_pcap(&bytes, filter)?;
    for w in &extracted.warnings {
        eprintln!("warning: {w:?}");
    }
    Ok(extracted)
}

fn tokenize_all(
    flows: &[Flow],
    comp: &CompositionConfig,
    gap_us: u64,
    labels: Option<&LabelIndex>,
    threads: usize,
) -> Result<Vec<TokenizedFlow>, CliError> {
    let grids = par_map(flows, threads, |f| -> Result<TokenizedFlow, TokenizeError> {
        let mut tf = tokenize_flow(f, comp, gap_us)?;
        if let Some(index) = labels {
            tf.label = index.get(&(f.key, f.first_timestamp_us())).copied();
        }
        Ok(tf)
    });
    Ok(grids.into_iter().collect::<Result<_, _>>()?)
}

fn generate(
    s: &mut Settings,
    ctx: &Ctx,
    per_class: Option<usize>,
    emission: Option<String>,
    span_us: Option<u64>,
) -> Result<Outcome, CliError> {
    let per_class = s.value("per-class", per_class, 1000)?;
    let emission = match s.value("emission", emission, "interleaved".to_string())?.as_str() {
        "interleaved" => Emission::Interleaved,
        "sequential" => Emission::Sequential,
        other => return Err(CliError::Usage(format!("emission must be interleaved or sequential, not `{other}`"))),
    };
    let span_us = s.value("span-us", span_us, CorpusOptions::default().span_us)?;
    s.finish(&SECTIONS)?;
    prepare(ctx)?;
    let opts = CorpusOptions {
        emission,
        span_us,
        seed: ctx.seed,
    };
    let specs = ScenarioSpec::standard_classes(per_class, ctx.seed);
    let summary = generate_corpus(&specs, &opts, &ctx.dir.join("corpus.pcap"), &ctx.dir.join("labels.csv"))?;
    println!("generated {} flows, {} packets", summary.flows, summary.packets);
    Ok(Outcome {
        inputs: Vec::new(),
        outputs: names(&["corpus.pcap", "labels.csv"]),
    })
}

fn preprocess(
    s: &mut Settings,
    ctx: &Ctx,
    pcap: Option<PathBuf>,
    labels: Option<PathBuf>,
    filter: FilterArgs,
) -> Result<Outcome, CliError> {
    let pcap = s.required_path("pcap", pcap)?;
    let labels = s.path("labels", labels)?;
    let (filter, comp) = filter_settings(s, filter)?;
    s.finish(&SECTIONS)?;
    prepare(ctx)?;
    let extracted = read_flows(&pcap, &filter)?;
    let index = match &labels {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
            Some(label_index(&labels_from_csv(&text).map_err(CliError::Data)?))
        }
        None => None,
    };
    let stats = composition_stats(&extracted.flows, filter.gap_threshold_us, true)?;
    let grids = tokenize_all(&extracted.flows, &comp, filter.gap_threshold_us, index.as_ref(), ctx.threads)?;
    save_dataset(&ctx.dir.join("dataset.nfnd"), &grids)?;
    fs::write(ctx.dir.join("stats.txt"), stats.to_text())?;
    let labelled = grids.iter().filter(|g| g.label.is_some()).count();
    println!(
        "{} flows assembled, {} kept, {} labelled, {} packets skipped",
        extracted.assembled,
        grids.len(),
        labelled,
        extracted.skips.total()
    );
    println!(
        "median_packets_per_burst={} median_bursts_per_flow={}",
        stats.median_packets_per_burst, stats.median_bursts_per_flow
    );
    Ok(Outcome {
        inputs: [Some(pcap), labels].into_iter().flatten().collect(),
        outputs: names(&["dataset.nfnd", "stats.txt"]),
    })
}

fn stats(s: &mut Settings, ctx: &Ctx, pcap: Option<PathBuf>, filter: FilterArgs) -> Result<Outcome, CliError> {
    let pcap = s.required_path("pcap", pcap)?;
    let (filter, _) = filter_settings(s, filter)?;
    s.finish(&SECTIONS)?;
    prepare(ctx)?;
    let extracted = read_flows(&pcap, &filter)?;
    let stats = composition_stats(&extracted.flows, filter.gap_threshold_us, true)?;
    fs::write(ctx.dir.join("stats.txt"), stats.to_text())?;
    println!("median_packets_per_burst={}", stats.median_packets_per_burst);
    println!("median_bursts_per_flow={}", stats.median_bursts_per_flow);
    Ok(Outcome {
        inputs: vec![pcap],
        outputs: names(&["stats.txt"]),
    })
}

fn tokenize(
    s: &mut Settings,
    ctx: &Ctx,
    input: Option<PathBuf>,
    out: Option<String>,
    filter: FilterArgs,
) -> Result<Outcome, CliError> {
    let input = s.required_path("in", input)?;
    let out = s.value("out", out, "flows.nfnd".to_string())?;
    let (filter, comp) = filter_settings(s, filter)?;
    s.finish(&SECTIONS)?;
    if Path::new(&out).components().count() != 1 {
        return Err(CliError::Usage("--out is a file name inside the run directory".into()));
    }
    prepare(ctx)?;
    let extracted = read_flows(&input, &filter)?;
    let grids = tokenize_all(&extracted.flows, &comp, filter.gap_threshold_us, None, ctx.threads)?;
    save_dataset(&ctx.dir.join(&out), &grids)?;
    println!("{} flows tokenized", grids.len());
    Ok(Outcome {
        inputs: vec![input],
        outputs: vec![out],
    })
}

fn run_pretrain(
    ctx: &Ctx,
    data_path: PathBuf,
    cfg: TrainConfig,
    resume: Option<PathBuf>,
    config_path: Option<PathBuf>,
) -> Result<Outcome, CliError> {
    prepare(ctx)?;
    let data = load_dataset(&data_path)?;
    let (mut model, state) = match &resume {
        Some(dir) => {
            let (m, st) = load_training(dir)?;
            (m, Some(st))
        }
        None => {
            let config = match &config_path {
                Some(p) => ModelConfig::load(p)?,
                None => model_config(ctx.toy),
            };
            (Model::new(config, NormStats::fit(&data), ctx.seed)?, None)
        }
    };
    let (report, state) = pretrain(&mut model, &data, &cfg, state, Some(&ctx.dir), |r| {
        if r.step % 50 == 0 {
            eprintln!("step {} loss {:.4}", r.step, r.loss);
        }
    })?;
    if report.steps.is_empty() {
        save_training(&ctx.dir, &model, &state)?;
    }
    fs::write(ctx.dir.join("loss.csv"), loss_csv(&report.steps))?;
    for (e, m) in report.epoch_means.iter().enumerate() {
        println!("epoch {} mean loss {m:.4}", e + 1);
    }
    Ok(Outcome {
        inputs: [Some(data_path), resume, config_path].into_iter().flatten().collect(),
        outputs: names(&["model.nfck", "model.toml", "optimizer.nfck", "state.toml", "loss.csv"]),
    })
}

fn run_evaluate_mlm(ctx: &Ctx, model_path: PathBuf, data_path: PathBuf, rate: f64, batch: usize) -> Result<Outcome, CliError> {
    prepare(ctx)?;
    let model = load_model(&model_path)?;
    let data = load_dataset(&data_path)?;
    let report = evaluate_mlm(&model, &data, rate, ctx.seed, batch)?;
    fs::write(ctx.dir.join("mlm.csv"), report.to_csv())?;
    let summary = format!(
        "masked={}\naccuracy={:.6}\nmajority_baseline={:.6}\n",
        report.masked,
        report.accuracy(),
        report.majority_baseline
    );
    fs::write(ctx.dir.join("mlm_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(Outcome {
        inputs: vec![data_path, model_path],
        outputs: names(&["mlm.csv", "mlm_summary.txt"]),
    })
}

fn run_finetune(
    ctx: &Ctx,
    flows: &[TokenizedFlow],
    labels: Vec<usize>,
    model_path: Option<&Path>,
    cfg: TaskConfig,
    noise: f64,
) -> Result<(), CliError> {
    let labels = if noise > 0.0 {
        inject_label_noise(&labels, cfg.classes, &NoiseConfig { rate: noise, seed: ctx.seed })?
    } else {
        labels
    };
    let mut model = match model_path {
        Some(p) => load_model(p)?,
        None => Model::new(model_config(ctx.toy), NormStats::fit(flows), ctx.seed)?,
    };
    let report = finetune(&mut model, flows, &labels, &cfg, |r| {
        eprintln!("epoch {} loss {:.4} val F1 {:.4}", r.epoch, r.train_loss, r.val_weighted_f1);
    })?;
    save_model(&model, &ctx.dir.join("model.nfck"))?;
    let mut history = String::from("epoch,train_loss,val_weighted_f1\n");
    for r in &report.history {
        history.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_weighted_f1));
    }
    fs::write(ctx.dir.join("history.csv"), history)?;
    let summary = format!(
        "convergence_epoch={}\nbest_val_weighted_f1={:.6}\ntrainable_params={}\n",
        report.convergence_epoch, report.best_val_f1, report.trainable_params
    );
    fs::write(ctx.dir.join("finetune.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn run_evaluate(
    ctx: &Ctx,
    model_path: PathBuf,
    data_path: PathBuf,
    level: TaskLevel,
    k: usize,
    batch: usize,
) -> Result<Outcome, CliError> {
    prepare(ctx)?;
    let model = load_model(&model_path)?;
    let flows = load_dataset(&data_path)?;
    let labels = labels_of(&flows)?;
    let refs: Vec<&TokenizedFlow> = flows.iter().collect();
    let m = evaluate(&model, &refs, &labels, level, k, batch)?;
    fs::write(ctx.dir.join("metrics.csv"), m.to_csv())?;
    println!("{}", m.summary());
    Ok(Outcome {
        inputs: vec![data_path, model_path],
        outputs: names(&["metrics.csv"]),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_inspect(
    ctx: &Ctx,
    model_path: PathBuf,
    data_path: PathBuf,
    flow: usize,
    round: usize,
    layer: LayerKind,
    head: usize,
    top: usize,
) -> Result<Outcome, CliError> {
    prepare(ctx)?;
    let model = load_model(&model_path)?;
    let flows = load_dataset(&data_path)?;
    let tf = flows
        .get(flow)
        .ok_or_else(|| CliError::Usage(format!("flow {flow} out of range ({} flows)", flows.len())))?;
    let map = extract_attention(&model, tf, round, layer, head)?;
    fs::write(ctx.dir.join("attention.csv"), map.to_csv())?;
    println!("keys attended by {}:", map.labels[0]);
    for (k, w) in map.top_keys(&[0], top) {
        println!("  {:<24} {w:.4}", map.labels[k]);
    }
    Ok(Outcome {
        inputs: vec![data_path, model_path],
        outputs: names(&["attention.csv"]),
    })
}
