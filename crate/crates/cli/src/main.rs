use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};
use nested_attn::baselines::MechanismKind;
use nested_attn::checkpoint::{self, param_checksum};
use nested_attn::config::{RunConfig, Stage};
use nested_attn::denoiser::{CaptureLog, PromptEmbedding};
use nested_attn::experiments::{
    ablate_alpha, ablate_queries, alpha_ablation_csv, capture_csv, capture_heatmaps, capture_rows,
    compare_mechanisms, parse_capture_csv, qformer_heatmaps, qformer_peaks, query_ablation_csv, sweep_lambda,
    trace_probes, EvalSet,
};
use nested_attn::image_io::RgbImage;
use nested_attn::metrics::{emit_csv, parse_csv, scatter_ppm, MetricRecord, TradeoffCurve};
use nested_attn::model::{Model, SubjectRequest};
use nested_attn::synth::{build_dataset, dataset_checksum, write_dataset, PromptAttributes};
use nested_attn::train::{loss_csv, personalize_from_host, train, TrainingSet};
use nested_attn::Error;

const OUT_ROOT_ENV: &str = "NESTEDATTN_OUT";

#[derive(Parser, Debug)]
#[command(name = "nestedattn", version, about = "Nested attention toy pipeline")]
struct Cli {
    /// Default root for outputs when a command gets no --out.
    #[arg(long, env = OUT_ROOT_ENV, global = true)]
    out_root: Option<PathBuf>,
    /// Worker threads for generation jobs.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset (PPM pairs + manifest).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train stage A (host) or B (personalization).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage-A checkpoint (overrides paths.host_checkpoint).
        #[arg(long)]
        host: Option<PathBuf>,
    },
    /// Generate images from a personalized checkpoint.
    Sample(SampleArgs),
    /// Identity/prompt scores across a λ grid.
    SweepLambda {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1..)]
        lambdas: Vec<f64>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Tradeoff curves of several mechanisms under one budget.
    CompareMechanisms {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Identity score per learned-query count.
    AblateQueries {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Scores and value-norm ratios per α setting.
    AblateAlpha {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Heatmaps from a `sample --capture` directory.
    VizAttn {
        #[arg(long)]
        capture_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Query rows whose nested maps are exported.
        #[arg(long, num_args = 1.., default_values_t = [27usize, 28, 35, 36])]
        probes: Vec<usize>,
    },
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt words separated by spaces, e.g. "subj on white plain center".
    #[arg(long)]
    prompt: String,
    /// Reference images of the prompt's subject word; tokens are concatenated.
    #[arg(long, num_args = 1..)]
    ref_images: Vec<PathBuf>,
    /// Extra subjects as WORD:IMG[,IMG...]; each runs its own encoder pass.
    #[arg(long)]
    subject: Vec<String>,
    #[arg(long, num_args = 1.., default_values_t = [1.0])]
    lambda: Vec<f64>,
    /// Inject into this word instead of the prompt's subject word.
    #[arg(long)]
    retarget_word: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write attention internals of the first λ to this directory.
    #[arg(long)]
    capture: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling seeds (default: the checkpoint config's eval seeds).
    #[arg(long, num_args = 1..)]
    seeds: Vec<u64>,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    match s {
        "A" | "a" => Ok(Stage::A),
        "B" | "b" => Ok(Stage::B),
        _ => Err(format!("stage must be A or B, got {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invariant(_) | Error::NonFinite(_) | Error::ZeroNormValue { .. } => Failure::Invariant(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn invariant(ok: bool, msg: impl Into<String>) -> CmdResult {
    if ok {
        Ok(())
    } else {
        Err(Failure::Invariant(msg.into()))
    }
}

fn resolve_out(out: Option<PathBuf>, root: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    match (out, root) {
        (Some(p), _) => Ok(p),
        (None, Some(r)) => Ok(r.join(name)),
        (None, None) => usage(format!("--out not given and {OUT_ROOT_ENV} not set")),
    }
}

/// Timestamps and host details live only in this sidecar file.
fn sidecar(out: &Path, line: &str) {
    let secs = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let host = std::env::var("HOSTNAME").unwrap_or_default();
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(out.join("run.log")) {
        let _ = writeln!(f, "[{secs}] {host} {line}");
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    if !path.exists() {
        return usage(format!("config {} not found", path.display()));
    }
    Ok(RunConfig::load(path)?)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Ok(checkpoint::load::<f64>(path)?.model)
}

fn with_config_echo(model: &Model, body: &str) -> String {
    let mut s = String::new();
    for line in model.config.canonical().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(body);
    s
}

fn eval_inputs(model: &Model, args: &EvalArgs) -> Result<(EvalSet, Vec<u64>), Failure> {
    let samples = build_dataset(model.config.data.samples, model.config.data.seed)?;
    let ids: Vec<_> = samples.iter().map(|s| s.identity).collect();
    let seeds = if args.seeds.is_empty() {
        model.config.eval.seeds.clone()
    } else {
        args.seeds.clone()
    };
    if seeds.is_empty() {
        return usage("no evaluation seeds");
    }
    Ok((EvalSet::new(&ids, model.config.data.seed), seeds))
}

/// Scores in range, λ strictly increasing, CSV round trip exact.
fn check_records(records: &[MetricRecord], csv: &str) -> CmdResult {
    for r in records {
        invariant(
            (0.0..=1.0).contains(&r.identity_score) && (0.0..=1.0).contains(&r.prompt_score),
            format!("score out of [0,1] in {r:?}"),
        )?;
    }
    invariant(parse_csv(csv)? == records, "CSV round trip changed the records")
}

fn cmd_gen_data(config: &Path, out: PathBuf, force: bool) -> CmdResult {
    let cfg = load_config(config)?;
    if out.exists() && fs::read_dir(&out)?.next().is_some() {
        if !force {
            return usage(format!("{} is not empty (use --force)", out.display()));
        }
        fs::remove_dir_all(&out)?;
    }
    fs::create_dir_all(&out)?;
    let samples = build_dataset(cfg.data.samples, cfg.data.seed)?;
    write_dataset(&out, &samples)?;
    fs::write(out.join("config.toml"), cfg.canonical())?;
    let sum = dataset_checksum(&samples)?;
    fs::write(out.join("checksum.txt"), format!("{sum}\n"))?;
    sidecar(&out, &format!("gen-data {} samples", samples.len()));
    println!("{sum}");
    Ok(())
}

fn cmd_train(config: &Path, stage: Stage, out: PathBuf, host: Option<PathBuf>) -> CmdResult {
    let mut cfg = load_config(config)?;
    cfg.train.stage = stage;
    fs::create_dir_all(&out)?;
    let (mut model, lineage, steps) = match stage {
        Stage::A => (Model::new(&cfg)?, String::from("root"), cfg.train.steps_a),
        Stage::B => {
            let path = host.or_else(|| (!cfg.paths.host_checkpoint.is_empty()).then(|| PathBuf::from(&cfg.paths.host_checkpoint)));
            let Some(path) = path else {
                return usage("stage B needs a stage-A checkpoint (--host or paths.host_checkpoint)");
            };
            let host = load_model(&path)?;
            if host.trained != Some(Stage::A) {
                return usage(format!("{} is not a stage-A checkpoint", path.display()));
            }
            let lineage = format!("host:{}", param_checksum(&host));
            (personalize_from_host(&cfg, &host)?, lineage, cfg.train.steps_b)
        }
    };
    let samples = build_dataset(cfg.data.samples, cfg.data.seed)?;
    let data = TrainingSet::new(samples, &model)?;
    sidecar(&out, &format!("train stage {stage:?} start, {steps} steps"));
    let out_log = out.clone();
    let log = train(&mut model, &data, stage, steps, |r| {
        if (r.step + 1) % 500 == 0 {
            sidecar(&out_log, &format!("step {} loss {}", r.step + 1, r.loss));
        }
    })?;
    checkpoint::save(&model, &lineage, &out.join("checkpoint.bin"))?;
    fs::write(out.join("loss.csv"), with_config_echo(&model, &loss_csv(&log)))?;
    sidecar(&out, "train done");
    println!("{}", param_checksum(&model));
    Ok(())
}

fn load_ref(path: &Path, size: usize) -> Result<RgbImage, Failure> {
    let img = RgbImage::load(path)?;
    if img.width != size || img.height != size {
        return usage(format!(
            "{}: reference must be {size}×{size}, got {}×{}",
            path.display(),
            img.width,
            img.height
        ));
    }
    Ok(img)
}

fn cmd_sample(args: SampleArgs, out: PathBuf) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let size = model.config.model.image_size;
    let words: Vec<&str> = args.prompt.split_whitespace().collect();
    let mut prompt = PromptEmbedding::from_words(&model.vocab, &words)?;
    if let Some(w) = &args.retarget_word {
        prompt = prompt.retarget_subject(&model.vocab, w)?;
    }
    let mut subjects = Vec::new();
    if !args.ref_images.is_empty() {
        let images = args.ref_images.iter().map(|p| load_ref(p, size)).collect::<Result<Vec<_>, _>>()?;
        subjects.push(SubjectRequest {
            token_index: prompt.subject_word_index(),
            images,
        });
    }
    for group in &args.subject {
        let Some((word, imgs)) = group.split_once(':') else {
            return usage(format!("--subject expects WORD:IMG[,IMG...], got {group:?}"));
        };
        let Some(idx) = words.iter().position(|w| *w == word) else {
            return usage(format!("subject word {word:?} not in prompt"));
        };
        let images = imgs
            .split(',')
            .map(|p| load_ref(Path::new(p), size))
            .collect::<Result<Vec<_>, _>>()?;
        subjects.push(SubjectRequest { token_index: idx, images });
    }
    if !subjects.is_empty() && model.trained != Some(Stage::B) {
        return usage("reference images need a stage-B checkpoint");
    }
    fs::create_dir_all(&out)?;
    let bindings = model.bindings(&subjects, 1.0)?;
    for (k, &lambda) in args.lambda.iter().enumerate() {
        let b: Vec<_> = bindings
            .iter()
            .cloned()
            .map(|b| b.with_lambda(nested_attn::Scalar::lit(lambda)))
            .collect();
        let mut log = CaptureLog::default();
        let capture = (k == 0 && args.capture.is_some()).then_some(&mut log);
        let img = model.generate_with(&prompt, &b, args.seed, capture)?;
        let name = format!("sample_seed{}_lambda{lambda}.ppm", args.seed);
        img.save_ppm(&out.join(&name))?;
        println!("{}", out.join(name).display());
        if k == 0 {
            if let Some(dir) = &args.capture {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("capture.csv"), capture_csv(&capture_rows(&log)))?;
                let mut meta = format!(
                    "checkpoint = {:?}\nprompt = {:?}\ngrid = {}\n",
                    args.checkpoint.canonicalize()?.display().to_string(),
                    args.prompt,
                    size / model.config.model.patch
                );
                if let Some(first) = subjects.first() {
                    first.images[0].save_ppm(&dir.join("reference.ppm"))?;
                    meta.push_str("reference = \"reference.ppm\"\n");
                }
                fs::write(dir.join("meta.toml"), meta)?;
            }
        }
    }
    sidecar(&out, &format!("sample {} image(s)", args.lambda.len()));
    Ok(())
}

fn write_curves(out: &Path, model: &Model, curves: &[TradeoffCurve], stem: &str) -> CmdResult {
    let records: Vec<MetricRecord> = curves.iter().flat_map(|c| c.records.clone()).collect();
    let csv = emit_csv(&records, Some(&model.config.budget_echo()));
    check_records(&records, &csv)?;
    fs::write(out.join(format!("{stem}.csv")), &csv)?;
    scatter_ppm(curves, 256).save_ppm(&out.join(format!("{stem}.ppm")))?;
    print!("{}", emit_csv(&records, None));
    Ok(())
}

fn cmd_sweep(checkpoint: &Path, lambdas: Vec<f64>, eval: EvalArgs, root: &Option<PathBuf>, jobs: usize) -> CmdResult {
    let model = load_model(checkpoint)?;
    let out = resolve_out(eval.out.clone(), root, "sweep-lambda")?;
    fs::create_dir_all(&out)?;
    let grid = if !lambdas.is_empty() {
        lambdas
    } else if !model.config.eval.lambdas.is_empty() {
        model.config.eval.lambdas.clone()
    } else {
        model.mechanism().lambda_grid()
    };
    let (set, seeds) = eval_inputs(&model, &eval)?;
    let curve = sweep_lambda(&model, &grid, &set, &seeds, jobs)?;
    invariant(curve.len() == grid.len(), "curve length differs from the grid")?;
    write_curves(&out, &model, &[curve], "lambda_sweep")?;
    sidecar(&out, "sweep-lambda done");
    Ok(())
}

fn cmd_compare(checkpoints: &[PathBuf], eval: EvalArgs, root: &Option<PathBuf>, jobs: usize) -> CmdResult {
    let models = checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let out = resolve_out(eval.out.clone(), root, "compare-mechanisms")?;
    fs::create_dir_all(&out)?;
    let refs: Vec<&Model> = models.iter().collect();
    let (set, seeds) = eval_inputs(&models[0], &eval)?;
    let curves = compare_mechanisms(&refs, |k: MechanismKind| k.lambda_grid(), &set, &seeds, jobs)?;
    invariant(curves.len() == models.len(), "one curve per checkpoint")?;
    for c in &curves {
        if c.mechanism == MechanismKind::SimpleAdapter {
            invariant(c.len() == 1, "simple adapter must have a single row")?;
        }
    }
    write_curves(&out, &models[0], &curves, "compare")?;
    sidecar(&out, "compare-mechanisms done");
    Ok(())
}

fn cmd_ablate_queries(checkpoints: &[PathBuf], lambda: f64, eval: EvalArgs, root: &Option<PathBuf>, jobs: usize) -> CmdResult {
    let models = checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let out = resolve_out(eval.out.clone(), root, "ablate-queries")?;
    fs::create_dir_all(&out)?;
    let (set, seeds) = eval_inputs(&models[0], &eval)?;
    let refs: Vec<&Model> = models.iter().collect();
    let rows = ablate_queries(&refs, lambda, &set, &seeds, jobs)?;
    invariant(rows.len() == models.len(), "one row per checkpoint")?;
    for r in &rows {
        invariant((0.0..=1.0).contains(&r.identity_score), "identity score out of range")?;
    }
    let csv = with_config_echo(&models[0], &query_ablation_csv(&rows));
    fs::write(out.join("queries.csv"), &csv)?;
    print!("{}", query_ablation_csv(&rows));
    sidecar(&out, "ablate-queries done");
    Ok(())
}

fn cmd_ablate_alpha(checkpoints: &[PathBuf], lambda: f64, eval: EvalArgs, root: &Option<PathBuf>, jobs: usize) -> CmdResult {
    let models = checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let out = resolve_out(eval.out.clone(), root, "ablate-alpha")?;
    fs::create_dir_all(&out)?;
    let (set, seeds) = eval_inputs(&models[0], &eval)?;
    let refs: Vec<&Model> = models.iter().collect();
    let rows = ablate_alpha(&refs, lambda, &set, &seeds, jobs)?;
    invariant(rows.len() == models.len(), "one row per checkpoint")?;
    for r in &rows {
        invariant(
            (0.0..=1.0).contains(&r.identity_score) && (0.0..=1.0).contains(&r.prompt_score),
            "score out of range",
        )?;
        if let Some(a) = r.alpha.value() {
            invariant((r.norm_ratio - a).abs() < 1e-6, format!("α={a} run has norm ratio {}", r.norm_ratio))?;
        }
    }
    let csv = with_config_echo(&models[0], &alpha_ablation_csv(&rows));
    fs::write(out.join("alpha.csv"), &csv)?;
    print!("{}", alpha_ablation_csv(&rows));
    sidecar(&out, "ablate-alpha done");
    Ok(())
}

#[derive(serde::Deserialize)]
struct CaptureMeta {
    checkpoint: String,
    prompt: String,
    grid: usize,
    reference: Option<String>,
}

fn cmd_viz(capture_dir: &Path, out: PathBuf, probes: &[usize]) -> CmdResult {
    let csv_path = capture_dir.join("capture.csv");
    if !csv_path.exists() {
        return usage(format!("{} holds no capture.csv", capture_dir.display()));
    }
    let rows = parse_capture_csv(&fs::read_to_string(&csv_path)?)?;
    if rows.is_empty() {
        return usage("capture is empty");
    }
    let meta: CaptureMeta = toml::from_str(&fs::read_to_string(capture_dir.join("meta.toml"))?)
        .map_err(|e| Failure::Usage(format!("meta.toml: {e}")))?;
    fs::create_dir_all(&out)?;
    let maps = capture_heatmaps(&rows, meta.grid, probes)?;
    for (name, img) in &maps {
        img.upscale(8).save_pgm(&out.join(name))?;
    }
    let mut report = format!("heatmaps = {}\n", maps.len());
    if let Some(reference) = &meta.reference {
        let model = load_model(Path::new(&meta.checkpoint))?;
        let image = RgbImage::load(&capture_dir.join(reference))?;
        let qmaps = qformer_heatmaps(&model, &image)?;
        invariant(qmaps.len() == model.encoder.qformer.num_queries(), "one Q-Former map per learned query")?;
        for (i, m) in qmaps.iter().enumerate() {
            m.upscale(8).save_pgm(&out.join(format!("qformer_query{i:04}.pgm")))?;
        }
        let words: Vec<&str> = meta.prompt.split_whitespace().collect();
        let attrs = PromptAttributes::from_words(&words);
        let peaks = qformer_peaks(&model, &image)?;
        let probe = trace_probes(&model, &rows, &peaks, attrs.position);
        report.push_str(&format!(
            "qformer_maps = {}\nprobes = {}\nprobes_inside = {}\nprobe_fraction = {}\n",
            qmaps.len(),
            probe.probes,
            probe.inside,
            probe.fraction()
        ));
    }
    fs::write(out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let root = cli.out_root.clone();
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::GenData { config, out, force } => cmd_gen_data(&config, resolve_out(out, &root, "data")?, force),
        Command::Train { config, stage, out, host } => {
            let name = match stage {
                Stage::A => "stage-a",
                Stage::B => "stage-b",
            };
            cmd_train(&config, stage, resolve_out(out, &root, name)?, host)
        }
        Command::Sample(args) => {
            let out = resolve_out(args.out.clone(), &root, "samples")?;
            cmd_sample(args, out)
        }
        Command::SweepLambda { checkpoint, lambdas, eval } => cmd_sweep(&checkpoint, lambdas, eval, &root, jobs),
        Command::CompareMechanisms { checkpoints, eval } => cmd_compare(&checkpoints, eval, &root, jobs),
        Command::AblateQueries { checkpoints, lambda, eval } => cmd_ablate_queries(&checkpoints, lambda, eval, &root, jobs),
        Command::AblateAlpha { checkpoints, lambda, eval } => cmd_ablate_alpha(&checkpoints, lambda, eval, &root, jobs),
        Command::VizAttn { capture_dir, out, probes } => cmd_viz(&capture_dir, resolve_out(out, &root, "viz")?, &probes),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant check failed: {m}");
            ExitCode::from(2)
        }
    }
}
