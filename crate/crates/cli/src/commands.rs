use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use layersep::arrays::write_atomic;
use layersep::checkpoint::Checkpoint;
use layersep::corpus::{encode_image, load_corpus, load_sample, make_corpus, read_manifest};
use layersep::debs::{DebsConfig, StrategyRegistry};
use layersep::denoiser::{
    denoiser_from_checkpoint, denoiser_vae_hash, train_denoiser, CallLedger, DenoiserModel, DenoiserTrainState, FlowCorpus, PromptInit,
};
use layersep::depthnet::{depthnet_from_checkpoint, train_depthnet, DepthNet, DepthTrainState};
use layersep::evaluate::{format_table, sample_metrics, MetricReport, Pipeline};
use layersep::revae::{train_revae, vae_from_checkpoint, Vae, VaeTrainState};
use layersep::rng::{fnv1a, split_seed};
use layersep::scorer::{ScorerInputs, ScorerKind, ScorerRegistry};
use layersep::{Image, LayeredSample};
use serde::Serialize;

use crate::cli::{EvalArgs, GenDataArgs, SampleArgs, TrainOpts, TrainTarget};
use crate::config::{RunConfig, VaeVariant};
use crate::error::{CliError, CliResult};
use crate::pngio::write_png;
use crate::rundir::{write_json, JsonLog, RunDir};

const PROGRESS_EVERY: u64 = 100;

pub fn split_seed_for(data_seed: u64, split: &str) -> u64 {
    split_seed(data_seed, if split == "train" { 0 } else { 1 })
}

pub fn gen_data(run: &RunDir, cfg: &mut RunConfig, args: &GenDataArgs) -> CliResult<()> {
    if let Some(n) = args.n {
        cfg.data.train_n = n;
    }
    if let Some(n) = args.test_n {
        cfg.data.test_n = n;
    }
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let mut outputs = Vec::new();
    for (split, n) in [("train", cfg.data.train_n), ("test", cfg.data.test_n)] {
        let dir = run.data(split);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let m = make_corpus(n, split_seed_for(cfg.data.seed, split), &cfg.data.scene, &dir)?;
        println!("{split}: {} samples in {}", m.samples.len(), dir.display());
        outputs.push(dir.join(layersep::corpus::MANIFEST_FILE));
    }
    run.record(cfg, "gen-data", &outputs, true)
}

fn load_split(run: &RunDir, split: &str) -> CliResult<Vec<LayeredSample>> {
    let dir = run.data(split);
    if !dir.join(layersep::corpus::MANIFEST_FILE).exists() {
        return Err(CliError::Dependency(format!("no {split} data in {}; run gen-data first", run.root.display())));
    }
    Ok(load_corpus(&dir)?.1)
}

fn load_checkpoint(path: &Path, hint: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Dependency(format!("{} not found; run `{hint}` first", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Identity of a trained autoencoder, stored in denoiser checkpoints.
pub fn vae_identity(vae: &Vae<f32>) -> u64 {
    let bytes: Vec<u8> = vae.params.iter().flat_map(|v| v.to_le_bytes()).collect();
    split_seed(fnv1a(&bytes), vae.arch.fingerprint())
}

fn vae_name(v: VaeVariant) -> String {
    format!("vae-{}", v.as_str())
}

fn prompt_str(p: PromptInit) -> &'static str {
    match p {
        PromptInit::Fix => "fix",
        PromptInit::Learned => "learned",
        PromptInit::Random => "random",
    }
}

fn denoiser_name(v: VaeVariant, p: PromptInit) -> String {
    format!("denoiser-{}-{}", v.as_str(), prompt_str(p))
}

fn train_hint(v: VaeVariant) -> &'static str {
    match v {
        VaeVariant::Equiv => "layersep train vae",
        VaeVariant::Recon => "layersep train vae --no-equiv",
    }
}

fn load_vae(run: &RunDir, v: VaeVariant) -> CliResult<Vae<f32>> {
    Ok(vae_from_checkpoint(&load_checkpoint(&run.checkpoint(&vae_name(v)), train_hint(v))?)?)
}

fn load_denoiser(run: &RunDir, v: VaeVariant, p: PromptInit, vae: &Vae<f32>) -> CliResult<DenoiserModel> {
    let hint = format!("layersep train denoiser --vae {} --prompt {}", v.as_str(), prompt_str(p));
    let ckpt = load_checkpoint(&run.checkpoint(&denoiser_name(v, p)), &hint)?;
    if denoiser_vae_hash(&ckpt) != Some(vae_identity(vae)) {
        return Err(CliError::Dependency(format!("{} was trained against a different autoencoder; rerun `{hint}`", denoiser_name(v, p))));
    }
    Ok(denoiser_from_checkpoint(&ckpt)?)
}

fn load_depth(run: &RunDir) -> CliResult<DepthNet<f32>> {
    Ok(depthnet_from_checkpoint(&load_checkpoint(&run.checkpoint("depth"), "layersep train depth")?)?)
}

fn apply_opts(opts: &TrainOpts, steps: &mut u64, seed: &mut u64, lr: &mut f64, batch: &mut usize) {
    if let Some(s) = opts.steps {
        *steps = s;
    }
    if let Some(s) = opts.seed {
        *seed = s;
    }
    if let Some(l) = opts.lr {
        *lr = l;
    }
    if let Some(b) = opts.batch_size {
        *batch = b;
    }
}

/// Trains in chunks that end on multiples of `every`, checkpointing after each.
fn chunked<S, R: Serialize>(
    label: &str,
    total: u64,
    every: u64,
    mut state: S,
    step_of: impl Fn(&S) -> u64,
    mut train_to: impl FnMut(S, u64, &mut dyn FnMut(&R)) -> layersep::Result<S>,
    mut save: impl FnMut(&S, u64) -> CliResult<()>,
    log: &mut JsonLog,
    loss_of: impl Fn(&R) -> (u64, f64),
) -> CliResult<S> {
    loop {
        let step = step_of(&state);
        if step >= total {
            save(&state, total)?;
            return Ok(state);
        }
        let target = total.min((step / every + 1) * every);
        let mut failed = None;
        let mut on_step = |r: &R| {
            if failed.is_none() {
                failed = log.push(r).err();
            }
            let (s, loss) = loss_of(r);
            if (s + 1) % PROGRESS_EVERY == 0 || s + 1 == total {
                eprintln!("{label}: step {}/{total} loss {loss:.6}", s + 1);
            }
        };
        state = train_to(state, target, &mut on_step)?;
        if let Some(e) = failed {
            return Err(e);
        }
        save(&state, target)?;
    }
}

fn resume_state(run: &RunDir, name: &str, resume: bool) -> CliResult<Option<Checkpoint>> {
    if !resume {
        return Ok(None);
    }
    load_checkpoint(&run.checkpoint(name), "training without --resume").map(Some)
}

pub fn train(run: &RunDir, cfg: &mut RunConfig, target: &TrainTarget) -> CliResult<()> {
    let every = target.opts().checkpoint_every.unwrap_or(cfg.eval.checkpoint_every);
    if every == 0 {
        return Err(CliError::Validation("--checkpoint-every must be positive".into()));
    }
    match target {
        TrainTarget::Vae { opts, no_equiv } => {
            let t = &mut cfg.vae.train;
            apply_opts(opts, &mut t.steps, &mut t.seed, &mut t.adam.lr, &mut t.batch_size);
            cfg.validate()?;
            let variant = if *no_equiv { VaeVariant::Recon } else { VaeVariant::Equiv };
            let mut weights = cfg.vae.weights;
            if *no_equiv {
                weights.equiv = 0.0;
            }
            weights.validate()?;
            let name = vae_name(variant);
            let corpus = load_split(run, "train")?;
            let tc = cfg.vae.train.clone();
            let state = match resume_state(run, &name, opts.resume)? {
                Some(c) => VaeTrainState::from_checkpoint(&c, tc.adam)?,
                None => VaeTrainState::fresh(&tc)?,
            };
            let mut log = JsonLog::open(&run.log(&name), state.step)?;
            let ckpt = run.checkpoint(&name);
            chunked(
                &name,
                tc.steps,
                every,
                state,
                |s| s.step,
                |s, to, cb| {
                    let c = layersep::revae::VaeTrainConfig { steps: to, ..tc.clone() };
                    train_revae(&corpus, &c, &weights, Some(s), cb).map(|r| r.0)
                },
                |s, _| Ok(s.to_checkpoint(&tc, &weights).save(&ckpt)?),
                &mut log,
                |r: &layersep::revae::VaeLogRecord| (r.step, r.loss.total),
            )?;
            run.record(cfg, &format!("train.{name}"), &[ckpt, run.log(&name)], true)
        }
        TrainTarget::Denoiser { opts, prompt, vae } => {
            let d = &mut cfg.denoiser;
            apply_opts(opts, &mut d.steps, &mut d.seed, &mut d.adam.lr, &mut d.batch_size);
            if let Some(p) = prompt {
                d.prompt = *p;
            }
            cfg.validate()?;
            let variant = vae.unwrap_or(cfg.models.vae);
            let name = denoiser_name(variant, cfg.denoiser.prompt);
            let corpus = load_split(run, "train")?;
            let vae = load_vae(run, variant)?;
            let vae_hash = vae_identity(&vae);
            let flow = FlowCorpus::encode(&vae, &corpus)?;
            let tc = cfg.denoiser.clone();
            let state = match resume_state(run, &name, opts.resume)? {
                Some(c) => {
                    if denoiser_vae_hash(&c) != Some(vae_hash) {
                        return Err(CliError::Dependency(format!("{name} was trained against a different autoencoder")));
                    }
                    DenoiserTrainState::from_checkpoint(&c, tc.adam)?
                }
                None => DenoiserTrainState::fresh(&tc, flow.stats.clone())?,
            };
            let mut log = JsonLog::open(&run.log(&name), state.step)?;
            let ckpt = run.checkpoint(&name);
            chunked(
                &name,
                tc.steps,
                every,
                state,
                |s| s.step,
                |s, to, cb| {
                    let c = layersep::denoiser::DenoiserTrainConfig { steps: to, ..tc.clone() };
                    train_denoiser(&flow, &c, Some(s), cb).map(|r| r.0)
                },
                |s, _| Ok(s.to_checkpoint(&tc, vae_hash).save(&ckpt)?),
                &mut log,
                |r: &layersep::denoiser::DenoiserLogRecord| (r.step, r.loss),
            )?;
            run.record(cfg, &format!("train.{name}"), &[ckpt, run.log(&name)], true)
        }
        TrainTarget::Depth { opts } => {
            let d = &mut cfg.depth;
            apply_opts(opts, &mut d.steps, &mut d.seed, &mut d.adam.lr, &mut d.batch_size);
            cfg.validate()?;
            let corpus = load_split(run, "train")?;
            let tc = cfg.depth.clone();
            let state = match resume_state(run, "depth", opts.resume)? {
                Some(c) => DepthTrainState::from_checkpoint(&c, tc.adam)?,
                None => DepthTrainState::fresh(&tc)?,
            };
            let mut log = JsonLog::open(&run.log("depth"), state.step)?;
            let ckpt = run.checkpoint("depth");
            let state = chunked(
                "depth",
                tc.steps,
                every,
                state,
                |s| s.step,
                |s, to, cb| {
                    let c = layersep::depthnet::DepthTrainConfig { steps: to, ..tc.clone() };
                    train_depthnet(&corpus, &c, Some(s), cb).map(|r| r.0)
                },
                |s, _| Ok(s.to_checkpoint(&tc).save(&ckpt)?),
                &mut log,
                |r: &layersep::depthnet::DepthLogRecord| (r.step, r.loss),
            )?;
            if state.net.params.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Numeric("depth network parameters became non-finite".into()));
            }
            run.record(cfg, "train.depth", &[ckpt, run.log("depth")], true)
        }
    }
}

fn apply_sampling(cfg: &mut DebsConfig, k: Option<usize>, steps: Option<usize>, scorer: Option<ScorerKind>, seed: Option<u64>) -> CliResult<()> {
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = scorer {
        cfg.scorer = s;
    }
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    Ok(cfg.validate()?)
}

fn strategy_for(explicit: Option<&str>, k: usize) -> String {
    explicit.map(str::to_string).unwrap_or_else(|| if k == 1 { "plain".into() } else { "debs".into() })
}

/// The depth network is loaded only when a depth-scored search will run.
fn maybe_depth(run: &RunDir, strategy: &str, scorer: ScorerKind) -> CliResult<Option<DepthNet<f32>>> {
    if strategy != "plain" && scorer == ScorerKind::Depth {
        load_depth(run).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Serialize)]
struct Timing {
    wall_time_s: f64,
}

#[derive(Serialize)]
struct SampleReport<'a> {
    source: String,
    vae: &'a str,
    prompt: &'a str,
    #[serde(flatten)]
    scores: layersep::debs::ScoreReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<layersep::evaluate::SampleMetrics>,
}

fn write_image_pair(dir: &Path, stem: &str, img: &Image, outputs: &mut Vec<PathBuf>) -> CliResult<()> {
    let png = dir.join(format!("{stem}.png"));
    write_png(&png, img)?;
    let raw = dir.join(format!("{stem}.lsc"));
    write_atomic(&raw, &encode_image(img))?;
    outputs.push(png);
    outputs.push(raw);
    Ok(())
}

pub fn sample(run: &RunDir, cfg: &mut RunConfig, args: &SampleArgs) -> CliResult<()> {
    apply_sampling(&mut cfg.sampling, args.k, args.steps, args.scorer, args.seed)?;
    cfg.validate()?;
    let variant = args.vae.unwrap_or(cfg.models.vae);
    let prompt = args.prompt.unwrap_or(cfg.models.prompt);
    let (observed, truth, source) = match (&args.input, args.index) {
        (Some(path), None) => {
            let img = crate::pngio::read_png(path)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
            (img, None, stem)
        }
        (None, Some(i)) => {
            let dir = run.data(&args.split);
            if !dir.join(layersep::corpus::MANIFEST_FILE).exists() {
                return Err(CliError::Dependency(format!("no {} data; run gen-data first", args.split)));
            }
            let m = read_manifest(&dir)?;
            if i >= m.samples.len() {
                return Err(CliError::Validation(format!("index {i} out of range for {} {} samples", m.samples.len(), args.split)));
            }
            let s = load_sample(&dir, &m, i)?;
            (s.observed.clone(), Some(s), format!("{}{i:05}", args.split))
        }
        _ => return Err(CliError::Validation("give exactly one of --input or --index".into())),
    };
    let size = cfg.vae.train.arch.image_size;
    if observed.height() != size || observed.width() != size {
        return Err(CliError::Validation(format!("input is {}x{}, models expect {size}x{size}", observed.width(), observed.height())));
    }
    let strategy_name = strategy_for(args.strategy.as_deref(), cfg.sampling.k);
    let strategies = StrategyRegistry::default();
    let strategy = strategies.get(&strategy_name)?;
    if cfg.sampling.scorer == ScorerKind::Oracle && truth.is_none() && strategy_name != "plain" {
        return Err(CliError::Validation("the oracle scorer needs ground truth; use --index".into()));
    }
    let vae = load_vae(run, variant)?;
    let model = load_denoiser(run, variant, prompt, &vae)?;
    let depth = maybe_depth(run, &strategy_name, cfg.sampling.scorer)?;
    let inputs = ScorerInputs {
        depthnet: depth.as_ref(),
        statistic: cfg.depth.statistic,
        reference: truth.as_ref().map(|s| &s.background),
        seed: cfg.sampling.base_seed,
    };
    let scorer_name = if strategy_name == "plain" { ScorerKind::Random } else { cfg.sampling.scorer };
    let scorer = ScorerRegistry::default().build(scorer_name.as_str(), &inputs)?;

    let start = Instant::now();
    let outcome = strategy.run(&model, &vae, &observed, &cfg.sampling, scorer.as_ref())?;
    let wall_time_s = start.elapsed().as_secs_f64();

    let name = args.out.clone().unwrap_or_else(|| match strategy_name.as_str() {
        "plain" => format!("{source}-plain-s{}", cfg.sampling.base_seed),
        s => format!("{source}-{s}-k{}-{}-s{}", cfg.sampling.k, cfg.sampling.scorer, cfg.sampling.base_seed),
    });
    let dir = run.outputs().join(&name);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let previews = dir.join("previews");
    fs::create_dir_all(&previews).map_err(|e| CliError::io(&previews, e))?;
    let mut outputs = Vec::new();
    write_image_pair(&dir, "output", &outcome.image, &mut outputs)?;
    for (i, p) in outcome.previews.iter().enumerate() {
        write_image_pair(&previews, &format!("preview-{i:02}"), p, &mut outputs)?;
    }
    let metrics = truth.as_ref().map(|s| sample_metrics(args.index.unwrap_or(0), &outcome.image, s)).transpose()?;
    let report = SampleReport { source, vae: variant.as_str(), prompt: prompt_str(prompt), scores: outcome.report.without_timing(), metrics };
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    outputs.push(report_path.clone());
    write_json(&dir.join("timing.json"), &Timing { wall_time_s })?;
    println!(
        "{}: chose branch {} of {} ({} evaluations, {:.3}s)",
        dir.display(),
        outcome.report.chosen,
        outcome.report.k,
        outcome.report.ledger.denoiser_evals,
        wall_time_s
    );
    run.record(cfg, &format!("sample.{name}"), &outputs, false)
}

#[derive(Serialize)]
struct EvalFile<'a> {
    config_hash: String,
    vae: &'a str,
    sampling: &'a DebsConfig,
    rows: Vec<MetricReport>,
    ledgers: BTreeMap<String, CallLedger>,
}

struct Row {
    label: String,
    prompt: PromptInit,
    k: usize,
}

pub fn eval(run: &RunDir, cfg: &mut RunConfig, args: &EvalArgs) -> CliResult<()> {
    apply_sampling(&mut cfg.sampling, args.k, args.steps, args.scorer, args.seed)?;
    if let Some(n) = args.n {
        cfg.eval.n = n;
    }
    cfg.validate()?;
    let variant = args.vae.unwrap_or(cfg.models.vae);
    let prompt = args.prompt.unwrap_or(cfg.models.prompt);
    let (base, rows): (&str, Vec<Row>) = if !args.ablate_k.is_empty() {
        ("ablate-k", args.ablate_k.iter().map(|&k| Row { label: format!("k={k}"), prompt, k }).collect())
    } else if !args.ablate_prompt.is_empty() {
        ("ablate-prompt", args.ablate_prompt.iter().map(|&p| Row { label: format!("prompt={}", prompt_str(p)), prompt: p, k: cfg.sampling.k }).collect())
    } else {
        let k = cfg.sampling.k;
        let s = strategy_for(args.strategy.as_deref(), k);
        let label = if s == "plain" { "plain".to_string() } else { format!("{s} k={k} {}", cfg.sampling.scorer) };
        ("eval", vec![Row { label, prompt, k }])
    };
    for r in &rows {
        DebsConfig { k: r.k, ..cfg.sampling.clone() }.validate()?;
    }
    let mut samples = load_split(run, "test")?;
    if cfg.eval.n > 0 {
        samples.truncate(cfg.eval.n);
    }
    let vae = load_vae(run, variant)?;
    let strategies = StrategyRegistry::default();
    let needs_depth = rows.iter().any(|r| strategy_for(args.strategy.as_deref(), r.k) != "plain");
    let depth = if needs_depth { maybe_depth(run, "search", cfg.sampling.scorer)? } else { None };
    let scorers = ScorerRegistry::default();

    let mut reports = vec![MetricReport::input_baseline(&samples)?];
    let mut ledgers = BTreeMap::new();
    let mut models: BTreeMap<&str, DenoiserModel> = BTreeMap::new();
    for r in &rows {
        let key = prompt_str(r.prompt);
        if !models.contains_key(key) {
            models.insert(key, load_denoiser(run, variant, r.prompt, &vae)?);
        }
        let strategy = strategies.get(&strategy_for(args.strategy.as_deref(), r.k))?;
        let pipeline = Pipeline {
            vae: &vae,
            model: &models[key],
            strategy,
            sampling: DebsConfig { k: r.k, ..cfg.sampling.clone() },
            depthnet: depth.as_ref(),
            statistic: cfg.depth.statistic,
            scorers: &scorers,
        };
        let ev = pipeline.evaluate(&r.label, &samples)?;
        eprintln!("{}: {} samples done", r.label, samples.len());
        ledgers.insert(r.label.clone(), ev.ledger);
        reports.push(ev.report);
    }

    let table = format_table(&reports);
    print!("{table}");
    let json_path = run.reports().join(format!("{base}.json"));
    let txt_path = run.reports().join(format!("{base}.txt"));
    let file = EvalFile { config_hash: cfg.hash(), vae: variant.as_str(), sampling: &cfg.sampling, rows: reports.clone(), ledgers };
    write_json(&json_path, &file)?;
    write_atomic(&txt_path, table.as_bytes())?;
    let mut outputs = vec![json_path, txt_path];
    if args.csv {
        for r in &reports {
            let slug: String = r.label.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
            let p = run.reports().join(format!("{base}-{slug}.csv"));
            write_atomic(&p, r.to_csv().as_bytes())?;
            outputs.push(p);
        }
    }
    run.record(cfg, &format!("eval.{base}"), &outputs, false)
}
