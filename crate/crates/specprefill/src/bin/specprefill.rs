//! Command-line front end: model initialization, prompt speculation,
//! generation with and without speculation, TTFT benchmarking, the QPS
//! simulator, the analytical FLOPS model, and synthetic retention evals.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O, 4 validation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use specprefill::analytic::{
    flops_profile, overhead, relative_flops, speedup_quadratic, speedup_upper_bound, FlopsProfile,
};
use specprefill::config::ModelConfig;
use specprefill::error::{Error, Result};
use specprefill::harness::{
    gen_needle, read_requests, retention_rate, spotlight_model, text_to_tokens, tokens_to_text,
    write_results, ResultRow, SPOTLIGHT_VOCAB,
};
use specprefill::math::argmax;
use specprefill::model::{init_model, load_checkpoint, save_checkpoint, Model};
use specprefill::serving_sim::{sweep_qps, CostModel};
use specprefill::speculation::{
    generate_baseline, generate_with_spec, speculate_prompt, SpecConfig,
};

const CONFIG_ENV: &str = "SPECPREFILL_CONFIG";

#[derive(Parser)]
#[command(name = "specprefill", version, about = "Speculative prefill toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a deterministic toy checkpoint.
    InitModel(InitModelArgs),
    /// Show which tokens and positions a speculator keeps for a prompt.
    Speculate(SpeculateArgs),
    /// Greedy generation, speculated or baseline, single prompt or JSONL batch.
    Generate(GenerateArgs),
    /// Wall-clock TTFT over a batch-size x sequence-length grid.
    BenchTtft(BenchTtftArgs),
    /// Constant-QPS serving simulation over a qps grid.
    SimulateQps(SimulateQpsArgs),
    /// Analytical FLOPS breakdown, overhead, and speedup bound.
    Flops(FlopsArgs),
    /// Needle-retention evaluation on generated synthetic tasks.
    EvalSynthetic(EvalSyntheticArgs),
}

/// Speculation knobs shared by several subcommands. Values resolve in layers:
/// defaults, then a config file named by `SPECPREFILL_CONFIG`, then flags.
#[derive(Args, Debug)]
struct SpecFlags {
    /// Fraction of context chunks to keep, in (0, 1].
    #[arg(long)]
    keep_rate: Option<f64>,
    /// Contiguous chunk size for Top-K selection.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Odd window for 1D average pooling of importance scores.
    #[arg(long)]
    pool_window: Option<usize>,
    /// Extra greedy speculator decode steps.
    #[arg(long = "look-ahead")]
    look_ahead: Option<usize>,
    /// Token id treated as end-of-sequence.
    #[arg(long)]
    eos_token: Option<u32>,
}

impl SpecFlags {
    fn resolve(&self) -> Result<SpecConfig> {
        let mut cfg = match std::env::var_os(CONFIG_ENV) {
            Some(path) => SpecConfig::from_file(PathBuf::from(path))?,
            None => SpecConfig::default(),
        };
        if let Some(v) = self.keep_rate {
            cfg.keep_rate = v;
        }
        if let Some(v) = self.chunk_size {
            cfg.chunk_size = v;
        }
        if let Some(v) = self.pool_window {
            cfg.pool_window = v;
        }
        if let Some(v) = self.look_ahead {
            cfg.look_ahead_steps = v;
        }
        if let Some(v) = self.eos_token {
            cfg.eos_token_id = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct InitModelArgs {
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Size preset: toy-speculator (2x32) or toy-base (4x256).
    #[arg(long, conflicts_with_all = ["layers", "hidden", "intermediate", "heads", "kv_heads", "vocab"])]
    preset: Option<String>,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    intermediate: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 10_000.0)]
    rope_theta: f64,
    #[arg(long, default_value_t = 8192)]
    max_position: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PromptArgs {
    /// Comma-separated token ids.
    #[arg(long, conflicts_with = "text")]
    tokens: Option<String>,
    /// Text tokenized byte-per-token (needs vocab >= 256).
    #[arg(long)]
    text: Option<String>,
}

impl PromptArgs {
    fn resolve(&self) -> Result<Vec<u32>> {
        match (&self.tokens, &self.text) {
            (Some(t), None) => parse_token_list(t),
            (None, Some(text)) => Ok(text_to_tokens(text)),
            _ => Err(Error::InvalidArgument(
                "exactly one of --tokens or --text is required".into(),
            )),
        }
    }
}

#[derive(Args)]
struct SpeculateArgs {
    /// Speculator checkpoint.
    #[arg(long)]
    speculator: PathBuf,
    #[command(flatten)]
    prompt: PromptArgs,
    #[command(flatten)]
    spec: SpecFlags,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Base model checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Speculator checkpoint; omit (or pass --no-spec) for the baseline path.
    #[arg(long)]
    speculator: Option<PathBuf>,
    /// Skip speculation even when a speculator is given.
    #[arg(long, default_value_t = false)]
    no_spec: bool,
    #[command(flatten)]
    prompt: PromptArgs,
    /// JSONL request file for batch mode.
    #[arg(long, requires = "results", conflicts_with_all = ["tokens", "text"])]
    requests: Option<PathBuf>,
    /// Results CSV path for batch mode.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: usize,
    #[command(flatten)]
    spec: SpecFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchTtftArgs {
    /// Base model checkpoint.
    #[arg(long)]
    base: PathBuf,
    /// Speculator checkpoint.
    #[arg(long)]
    speculator: PathBuf,
    /// Grid of BATCHxSEQ cells, e.g. 1x512,4x512,1x2048.
    #[arg(long)]
    grid: String,
    #[command(flatten)]
    spec: SpecFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateQpsArgs {
    /// Cost-model JSON; defaults to the built-in llama8b cost model.
    #[arg(long)]
    cost_model: Option<PathBuf>,
    /// Comma-separated qps grid; defaults to a grid around the saturation point.
    #[arg(long)]
    qps_grid: Option<String>,
    /// Client timeout in seconds; defaults to 2.5x the query service time.
    #[arg(long)]
    timeout: Option<f64>,
    /// Queries per grid point.
    #[arg(long, default_value_t = 200)]
    queries: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Speculator preset: llama8b, llama70b, llama405b.
    #[arg(long)]
    spec: String,
    /// Base model preset; enables ratio/overhead/speedup outputs.
    #[arg(long)]
    base: Option<String>,
    #[arg(long, default_value_t = 32768)]
    seq_len: u64,
    #[arg(long, default_value_t = 1)]
    batch: u64,
    /// Keep rate for overhead and speedup.
    #[arg(long)]
    keep_rate: Option<f64>,
    /// Also report the quadratic-attention-aware speedup variant.
    #[arg(long, default_value_t = false)]
    quadratic: bool,
    /// Output format: json or csv.
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSyntheticArgs {
    /// Speculator checkpoint; defaults to the built-in spotlight model.
    #[arg(long)]
    speculator: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    #[arg(long, default_value_t = 640)]
    total_len: usize,
    /// Fixed needle position fraction; varies per task when omitted.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    spec: SpecFlags,
    /// Per-task CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_token_list(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| Error::InvalidArgument(format!("bad token id `{t}`")))
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|cell| {
            let (b, s) = cell
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::InvalidArgument(format!("bad grid cell `{cell}`, want BATCHxSEQ")))?;
            let batch = b
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad batch in `{cell}`")))?;
            let seq = s
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad seq len in `{cell}`")))?;
            if batch == 0 || seq == 0 {
                return Err(Error::InvalidArgument(format!("grid cell `{cell}` must be positive")));
            }
            Ok((batch, seq))
        })
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{t}`")))
        })
        .collect()
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
            Ok(())
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
            if !content.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path)
}

/// Deterministic filler prompt over the model's vocab.
fn bench_prompt(vocab: usize, seq_len: usize, seed: u64) -> Vec<u32> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    (0..seq_len)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % vocab as u64) as u32
        })
        .collect()
}

fn run_init_model(args: InitModelArgs) -> Result<()> {
    let config = match args.preset.as_deref() {
        Some("toy-speculator") => {
            let mut c = ModelConfig::new(2, 32, 64, 2, 1, 512)?;
            c.max_position = 8192;
            c
        }
        Some("toy-base") => {
            let mut c = ModelConfig::new(4, 256, 512, 4, 2, 512)?;
            c.max_position = 8192;
            c
        }
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (toy-speculator, toy-base)"
            )))
        }
        None => {
            let mut c = ModelConfig::new(
                args.layers,
                args.hidden,
                args.intermediate,
                args.heads,
                args.kv_heads,
                args.vocab,
            )?;
            c.rope_theta = args.rope_theta;
            c.max_position = args.max_position;
            c.validate()?;
            c
        }
    };
    let model = init_model(&config, args.seed)?;
    save_checkpoint(&model, &args.out)?;
    #[derive(Serialize)]
    struct Report<'a> {
        checkpoint: String,
        seed: u64,
        config: &'a ModelConfig,
    }
    let report = Report {
        checkpoint: args.out.display().to_string(),
        seed: args.seed,
        config: &config,
    };
    emit(&None, &serde_json::to_string_pretty(&report).expect("serializable"))
}

fn run_speculate(args: SpeculateArgs) -> Result<()> {
    let spec = args.spec.resolve()?;
    let tokens = args.prompt.resolve()?;
    let speculator = load_model(&args.speculator)?;
    let prompt = speculate_prompt(&speculator, &tokens, &spec)?;
    #[derive(Serialize)]
    struct Report {
        original_context_len: usize,
        kept_count: usize,
        kept_position_ids: Vec<usize>,
        kept_token_ids: Vec<u32>,
        first_decode_position: usize,
    }
    let report = Report {
        original_context_len: prompt.original_context_len,
        kept_count: prompt.kept_token_ids.len(),
        kept_position_ids: prompt.kept_position_ids.clone(),
        kept_token_ids: prompt.kept_token_ids.clone(),
        first_decode_position: prompt.first_decode_position,
    };
    emit(&args.out, &serde_json::to_string_pretty(&report).expect("serializable"))
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let spec = args.spec.resolve()?;
    let base = load_model(&args.base)?;
    let speculator = match (&args.speculator, args.no_spec) {
        (Some(path), false) => Some(load_model(path)?),
        _ => None,
    };

    if let Some(requests_path) = &args.requests {
        let results_path = args.results.as_ref().expect("clap enforces --results");
        let batch = read_requests(requests_path)?;
        let mut rows = Vec::with_capacity(batch.requests.len());
        for req in &batch.requests {
            let started = Instant::now();
            let (kept, output) = match &speculator {
                Some(sp) => {
                    let g = generate_with_spec(&base, sp, &req.tokens, &spec, req.max_new_tokens)?;
                    (g.speculated.kept_token_ids.len(), g.tokens)
                }
                None => {
                    let out =
                        generate_baseline(&base, &req.tokens, spec.eos_token_id, req.max_new_tokens)?;
                    (req.tokens.len(), out)
                }
            };
            rows.push(ResultRow {
                id: req.id.clone(),
                kept_tokens: kept,
                original_tokens: req.tokens.len(),
                output_tokens: output.len(),
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        write_results(results_path, &rows)?;
        return Ok(());
    }

    let tokens = args.prompt.resolve()?;
    #[derive(Serialize)]
    struct Report {
        original_tokens: usize,
        kept_tokens: usize,
        output_tokens: Vec<u32>,
        output_text: String,
    }
    let (kept, output) = match &speculator {
        Some(sp) => {
            let g = generate_with_spec(&base, sp, &tokens, &spec, args.max_new_tokens)?;
            (g.speculated.kept_token_ids.len(), g.tokens)
        }
        None => (
            tokens.len(),
            generate_baseline(&base, &tokens, spec.eos_token_id, args.max_new_tokens)?,
        ),
    };
    let report = Report {
        original_tokens: tokens.len(),
        kept_tokens: kept,
        output_text: tokens_to_text(&output),
        output_tokens: output,
    };
    emit(&args.out, &serde_json::to_string_pretty(&report).expect("serializable"))
}

/// TTFT = speculation (if any) + base prefill + one decode step.
fn measure_ttft(
    base: &Model,
    speculator: Option<(&Model, &SpecConfig)>,
    prompts: &[Vec<u32>],
) -> Result<f64> {
    let started = Instant::now();
    for prompt in prompts {
        let (kept_tokens, kept_positions) = match speculator {
            Some((sp, spec)) => {
                let s = speculate_prompt(sp, prompt, spec)?;
                (s.kept_token_ids, s.kept_position_ids)
            }
            None => (prompt.clone(), (0..prompt.len()).collect()),
        };
        let mut cache = base.new_cache(kept_tokens.len() + 1);
        let (logits, _) = base.prefill(&kept_tokens, &kept_positions, &mut cache, false)?;
        let first = argmax(&logits) as u32;
        base.decode_step(first, prompt.len(), &mut cache, false)?;
    }
    Ok(started.elapsed().as_secs_f64())
}

fn run_bench_ttft(args: BenchTtftArgs) -> Result<()> {
    let spec = args.spec.resolve()?;
    let grid = parse_grid(&args.grid)?;
    let base = load_model(&args.base)?;
    let speculator = load_model(&args.speculator)?;
    let vocab = base.config().vocab_size.min(speculator.config().vocab_size);

    let mut csv = String::from("batch,seq_len,baseline_ttft_ms,spec_ttft_ms,speedup\n");
    for (cell, (batch, seq_len)) in grid.iter().enumerate() {
        let prompts: Vec<Vec<u32>> = (0..*batch)
            .map(|i| bench_prompt(vocab, *seq_len, args.seed ^ ((cell * 131 + i) as u64)))
            .collect();
        let baseline_s = measure_ttft(&base, None, &prompts)?;
        let spec_s = measure_ttft(&base, Some((&speculator, &spec)), &prompts)?;
        csv.push_str(&format!(
            "{},{},{:.3},{:.3},{:.4}\n",
            batch,
            seq_len,
            baseline_s * 1e3,
            spec_s * 1e3,
            baseline_s / spec_s
        ));
    }
    emit(&args.out, &csv)
}

fn run_simulate_qps(args: SimulateQpsArgs) -> Result<()> {
    let cost: CostModel = match &args.cost_model {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => CostModel::default(),
    };
    cost.validate()?;
    let service = cost.service_time()?;
    let timeout = args.timeout.unwrap_or(2.5 * service);
    let grid: Vec<f64> = match &args.qps_grid {
        Some(s) => parse_f64_list(s)?,
        None => [0.3, 0.5, 0.7, 0.85, 0.95, 1.001, 1.005, 1.01, 1.05, 1.2, 1.5]
            .iter()
            .map(|rho| rho / service)
            .collect(),
    };
    let sweep = sweep_qps(&grid, &cost, timeout, args.queries)?;

    let mut csv = String::from("qps,mean_latency_s,completion_fraction,stage\n");
    for p in &sweep.points {
        let mean = p
            .mean_latency
            .map(|m| format!("{m:.6}"))
            .unwrap_or_else(|| "nan".to_string());
        csv.push_str(&format!(
            "{:.6},{},{:.4},{}\n",
            p.qps,
            mean,
            p.completion_fraction,
            p.stage.as_str()
        ));
    }
    if let Some(b) = &sweep.boundaries {
        csv.push_str(&format!(
            "# last_flat_qps={:.6} first_timeout_qps={:.6} flat_floor_s={:.6}\n",
            b.last_flat_qps, b.first_timeout_qps, sweep.flat_floor
        ));
    }
    emit(&args.out, &csv)
}

#[derive(Serialize)]
struct FlopsSide {
    preset: String,
    mlp: u128,
    qkvo: u128,
    self_attention: u128,
    lm_head: u128,
    total: u128,
}

impl FlopsSide {
    fn new(preset: &str, p: &FlopsProfile) -> Self {
        FlopsSide {
            preset: preset.to_string(),
            mlp: p.mlp,
            qkvo: p.qkvo,
            self_attention: p.self_attention,
            lm_head: p.lm_head,
            total: p.total(),
        }
    }
}

fn run_flops(args: FlopsArgs) -> Result<()> {
    let spec_cfg = ModelConfig::preset(&args.spec)?;
    let spec_profile = flops_profile(&spec_cfg, args.batch, args.seq_len)?;

    #[derive(Serialize)]
    struct Report {
        batch: u64,
        seq_len: u64,
        spec: FlopsSide,
        #[serde(skip_serializing_if = "Option::is_none")]
        base: Option<FlopsSide>,
        #[serde(skip_serializing_if = "Option::is_none")]
        relative_flops: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        keep_rate: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        overhead: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        speedup_upper_bound: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        speedup_quadratic: Option<f64>,
    }
    let mut report = Report {
        batch: args.batch,
        seq_len: args.seq_len,
        spec: FlopsSide::new(&args.spec, &spec_profile),
        base: None,
        relative_flops: None,
        keep_rate: args.keep_rate,
        overhead: None,
        speedup_upper_bound: None,
        speedup_quadratic: None,
    };
    if let Some(base_name) = &args.base {
        let base_cfg = ModelConfig::preset(base_name)?;
        let base_profile = flops_profile(&base_cfg, args.batch, args.seq_len)?;
        let ratio = relative_flops(&spec_cfg, &base_cfg, args.batch, args.seq_len)?;
        report.base = Some(FlopsSide::new(base_name, &base_profile));
        report.relative_flops = Some(ratio);
        if let Some(keep) = args.keep_rate {
            report.overhead = Some(overhead(ratio, keep)?);
            report.speedup_upper_bound = Some(speedup_upper_bound(ratio, keep)?);
            if args.quadratic {
                report.speedup_quadratic = Some(speedup_quadratic(
                    &spec_cfg,
                    &base_cfg,
                    args.batch,
                    args.seq_len,
                    keep,
                )?);
            }
        }
    }

    match args.format.as_str() {
        "json" => emit(&args.out, &serde_json::to_string_pretty(&report).expect("serializable")),
        "csv" => {
            let mut csv = String::from("metric,spec,base\n");
            let base = report.base.as_ref();
            let cell = |v: Option<u128>| v.map(|x| x.to_string()).unwrap_or_default();
            csv.push_str(&format!("mlp,{},{}\n", report.spec.mlp, cell(base.map(|b| b.mlp))));
            csv.push_str(&format!("qkvo,{},{}\n", report.spec.qkvo, cell(base.map(|b| b.qkvo))));
            csv.push_str(&format!(
                "self_attention,{},{}\n",
                report.spec.self_attention,
                cell(base.map(|b| b.self_attention))
            ));
            csv.push_str(&format!(
                "lm_head,{},{}\n",
                report.spec.lm_head,
                cell(base.map(|b| b.lm_head))
            ));
            csv.push_str(&format!("total,{},{}\n", report.spec.total, cell(base.map(|b| b.total))));
            if let Some(r) = report.relative_flops {
                csv.push_str(&format!("relative_flops,{r:.6},\n"));
            }
            if let Some(o) = report.overhead {
                csv.push_str(&format!("overhead,{o:.6},\n"));
            }
            if let Some(s) = report.speedup_upper_bound {
                csv.push_str(&format!("speedup_upper_bound,{s:.4},\n"));
            }
            if let Some(s) = report.speedup_quadratic {
                csv.push_str(&format!("speedup_quadratic,{s:.4},\n"));
            }
            emit(&args.out, &csv)
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown format `{other}` (json, csv)"
        ))),
    }
}

fn run_eval_synthetic(args: EvalSyntheticArgs) -> Result<()> {
    let mut spec = args.spec.resolve()?;
    let (speculator, vocab) = match &args.speculator {
        Some(path) => {
            let m = load_model(path)?;
            let v = m.config().vocab_size as u32;
            (m, v)
        }
        None => {
            // Built-in spotlight model; keep its EOS out of the filler range.
            if args.spec.eos_token.is_none() {
                spec.eos_token_id = SPOTLIGHT_VOCAB - 1;
            }
            (spotlight_model()?, SPOTLIGHT_VOCAB)
        }
    };
    if args.tasks == 0 {
        return Err(Error::InvalidArgument("need at least one task".into()));
    }

    let mut tasks = Vec::with_capacity(args.tasks);
    let mut prompts = Vec::with_capacity(args.tasks);
    let mut csv = String::from("task,needle_start,needle_end,kept_tokens,needle_retained\n");
    for i in 0..args.tasks {
        let task_seed = args.seed.wrapping_add(i as u64);
        let fraction = args
            .fraction
            .unwrap_or(((i as f64) * 0.6180339887498949) % 1.0);
        let task = gen_needle(task_seed, args.total_len, fraction, vocab)?;
        let prompt = speculate_prompt(&speculator, &task.prompt_tokens, &spec)?;
        let retained = (task.needle_span.0..task.needle_span.1)
            .all(|t| prompt.kept_position_ids.binary_search(&t).is_ok());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            task.needle_span.0,
            task.needle_span.1,
            prompt.kept_token_ids.len(),
            retained
        ));
        tasks.push(task);
        prompts.push(prompt);
    }
    let rate = retention_rate(&tasks, &prompts)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &csv)?;
    }
    #[derive(Serialize)]
    struct Summary {
        tasks: usize,
        total_len: usize,
        keep_rate: f64,
        retention_rate: f64,
    }
    let summary = Summary {
        tasks: args.tasks,
        total_len: args.total_len,
        keep_rate: spec.keep_rate,
        retention_rate: rate,
    };
    emit(&None, &serde_json::to_string_pretty(&summary).expect("serializable"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel(args) => run_init_model(args),
        Command::Speculate(args) => run_speculate(args),
        Command::Generate(args) => run_generate(args),
        Command::BenchTtft(args) => run_bench_ttft(args),
        Command::SimulateQps(args) => run_simulate_qps(args),
        Command::Flops(args) => run_flops(args),
        Command::EvalSynthetic(args) => run_eval_synthetic(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("specprefill: {e}");
        std::process::exit(e.exit_code());
    }
}
