//! `matforge` command-line entry point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use matforge::corpus::{build_corpus, load_corpus, CorpusConfig};
use matforge::graph::{validate_graph, NodeGraph};
use matforge::matching::{encode_prompt, optimize_params, rank, OptimizeConfig, RankConfig};
use matforge::model::{train_stack, ModelConfig, ModelStack, TrainConfig};
use matforge::ops::OpLibrary;
use matforge::sampler::{sample_candidates, SamplerConfig};
use matforge::tokenizer::{decode, encode_with, NodeOrder, TokenizedGraph};
use matforge::{evaluate, render, Error, ImagePlane};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const RUN_FORMAT: &str = "matforge-run/1";
const RANK_FORMAT: &str = "matforge-rank/1";

#[derive(Parser)]
#[command(name = "matforge", version, about = "Procedural material graph toolkit")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `train.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Worker threads for all parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Where to write the run manifest instead of the default location.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus construction.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train the node, edge and parameter models on a built corpus.
    Train(TrainArgs),
    /// Sample graphs for an image prompt or unconditionally.
    Generate(GenerateArgs),
    /// Complete a partial graph toward an image prompt.
    Autocomplete(GenerateArgs),
    /// Rank candidate graphs against a prompt.
    Rank(RankArgs),
    /// Fit continuous parameters of a graph to a target image.
    Optimize(OptimizeArgs),
    /// Evaluate and render a graph.
    Render(RenderArgs),
    /// Check structural rules of a graph.
    Validate(ValidateArgs),
    /// Convert a graph into token sequences.
    Encode(EncodeArgs),
    /// Convert token sequences back into a graph.
    Decode(DecodeArgs),
}

#[derive(Subcommand)]
enum CorpusCommand {
    Build(CorpusBuildArgs),
}

#[derive(Args)]
struct CorpusBuildArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_graphs: Option<usize>,
    #[arg(long)]
    variants: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_order)]
    order: Option<NodeOrder>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Prompt image (PNG).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Partial graph to extend.
    #[arg(long)]
    partial: Option<PathBuf>,
    /// Sample with a zero condition vector.
    #[arg(long)]
    uncond: bool,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    prompt: PathBuf,
    /// Directory of candidate graph JSON files.
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resolution: Option<usize>,
    /// Also write the four material maps into this directory.
    #[arg(long)]
    maps: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    graph: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    graph: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_order)]
    order: Option<NodeOrder>,
}

#[derive(Args)]
struct DecodeArgs {
    tokens: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_order(s: &str) -> Result<NodeOrder, String> {
    match s {
        "back_to_front" | "back-to-front" => Ok(NodeOrder::BackToFront),
        "front_to_back" | "front-to-back" => Ok(NodeOrder::FrontToBack),
        _ => Err(format!("unknown node order `{s}`")),
    }
}

/// Every tunable of a run. Loaded from `--config`, then patched by `--set`
/// and finally by explicit flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Overrides the seeds of the corpus, model, train and sample blocks.
    seed: Option<u64>,
    corpus: CorpusConfig,
    model: ModelConfig,
    train: TrainConfig,
    sample: SamplerConfig,
    rank: RankConfig,
    optimize: OptimizeConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, Failure> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
            }
            None => json!({}),
        };
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Failure::config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.sample.seed = seed;
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON and falls back to a
/// plain string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("malformed key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::config(format!("`{key}` descends into a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| Failure::config(format!("`{key}` descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug)]
struct Failure {
    kind: String,
    message: String,
}

impl Failure {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure::new("config-parse-error", message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn log(event: &str, fields: Value) {
    let mut obj = serde_json::Map::new();
    obj.insert("event".into(), event.into());
    if let Value::Object(m) = fields {
        obj.extend(m);
    }
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{}", Value::Object(obj));
}

#[derive(Serialize)]
struct Manifest {
    format: &'static str,
    command: String,
    version: &'static str,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    config: RunConfig,
    #[serde(skip_serializing_if = "Value::is_null")]
    summary: Value,
}

/// What a subcommand produced; turned into the run manifest.
struct Outcome {
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    /// Default manifest location, if the command has a natural one.
    manifest: Option<PathBuf>,
    summary: Value,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn read_graph(path: &Path, lib: &OpLibrary) -> Result<NodeGraph, Failure> {
    Ok(NodeGraph::from_json(&read_text(path)?, lib)?)
}

/// `dir/run_manifest.json` for directory outputs, `x.manifest.json` next to
/// file outputs.
fn manifest_beside(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        out.with_extension("manifest.json")
    }
}

fn run_corpus_build(a: &CorpusBuildArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = a.base_graphs {
        cfg.corpus.base_graphs = n;
    }
    if let Some(v) = a.variants {
        cfg.corpus.augment.variants_per_graph = v;
    }
    let manifest = build_corpus(&cfg.corpus, lib, &a.out)?;
    log("corpus", serde_json::to_value(&manifest.counts)?);
    Ok(Outcome {
        seed: cfg.corpus.seed,
        inputs: vec![],
        outputs: vec![a.out.clone()],
        manifest: Some(manifest_beside(&a.out, true)),
        summary: json!({"counts": manifest.counts, "retained_fraction": manifest.retained_fraction}),
    })
}

fn run_train(a: &TrainArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = a.order {
        cfg.train.order = o;
    }
    let (train, val) = load_corpus(&a.corpus)?;
    log("train-data", json!({"train_records": train.len(), "val_records": val.len()}));
    let mut stack = ModelStack::new(cfg.model.clone(), cfg.train.order, lib);
    let reports = train_stack(&mut stack, &train, &val, &cfg.train, lib, |kind, e| {
        log(
            "epoch",
            json!({"model": kind.name(), "epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss, "grad_norm": e.grad_norm}),
        )
    })?;
    stack.save_dir(&a.out)?;
    let summary: serde_json::Map<String, Value> = reports
        .iter()
        .map(|(k, r)| (k.name().to_string(), json!({"best_epoch": r.best_epoch, "best_val_loss": r.best_val_loss})))
        .collect();
    Ok(Outcome {
        seed: cfg.train.seed,
        inputs: vec![a.corpus.clone()],
        outputs: ["node.json", "edge.json", "param.json"].iter().map(|f| a.out.join(f)).collect(),
        manifest: Some(manifest_beside(&a.out, true)),
        summary: Value::Object(summary),
    })
}

fn run_generate(a: &GenerateArgs, cfg: &mut RunConfig, lib: &OpLibrary, complete: bool) -> Result<Outcome, Failure> {
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = a.n {
        cfg.sample.candidates = n;
    }
    if complete && a.partial.is_none() {
        return Err(Failure::config("autocomplete requires --partial"));
    }
    let stack = ModelStack::load_dir(&a.ckpt, lib)?;
    let mut inputs = vec![a.ckpt.clone()];
    let cond = match (&a.image, a.uncond) {
        (Some(_), true) => return Err(Failure::config("--image and --uncond are exclusive")),
        (None, false) => return Err(Failure::config("either --image or --uncond is required")),
        (None, true) => stack.unconditional(),
        (Some(p), false) => {
            inputs.push(p.clone());
            stack.condition(&encode_prompt(&ImagePlane::read_png(p)?))
        }
    };
    let partial = match &a.partial {
        Some(p) => {
            inputs.push(p.clone());
            if stack.order != NodeOrder::FrontToBack {
                log("warning", json!({"message": "partial graphs extend best with a front_to_back checkpoint"}));
            }
            Some(read_graph(p, lib)?)
        }
        None => None,
    };
    let graphs = sample_candidates(&stack, &cond, &cfg.sample, partial.as_ref(), cfg.sample.candidates, lib)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let previews: Vec<Result<ImagePlane, Error>> = {
        use rayon::prelude::*;
        graphs
            .par_iter()
            .map(|g| Ok(render(&evaluate(g, lib, cfg.corpus.resolution, cfg.corpus.seed)?, &cfg.corpus.render)))
            .collect()
    };
    let mut outputs = Vec::new();
    for (i, (g, img)) in graphs.iter().zip(previews).enumerate() {
        let json_path = a.out.join(format!("g{i:03}.json"));
        write_file(&json_path, g.to_json(lib))?;
        outputs.push(json_path);
        let png_path = a.out.join(format!("g{i:03}.png"));
        img?.write_png(&png_path, None)?;
        outputs.push(png_path);
    }
    log("generated", json!({"count": graphs.len()}));
    Ok(Outcome {
        seed: cfg.sample.seed,
        inputs,
        outputs,
        manifest: Some(manifest_beside(&a.out, true)),
        summary: json!({"candidates": graphs.len(), "conditional": !a.uncond}),
    })
}

fn run_rank(a: &RankArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    let prompt = ImagePlane::read_png(&a.prompt)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.graphs)
        .map_err(|e| Error::io(&a.graphs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with("manifest.json")
        })
        .collect();
    files.sort();
    let mut graphs = Vec::new();
    let mut names = Vec::new();
    let mut excluded = Vec::new();
    for f in &files {
        match read_graph(f, lib) {
            Ok(g) => {
                graphs.push(g);
                names.push(path_str(f));
            }
            Err(e) => excluded.push(json!({"file": path_str(f), "reason": e.message})),
        }
    }
    let report = rank(&graphs, &prompt, lib, &cfg.rank);
    for (i, reason) in &report.excluded {
        excluded.push(json!({"file": names[*i], "reason": reason}));
    }
    let ranked: Vec<Value> = report
        .ranked
        .iter()
        .map(|e| json!({"file": names[e.index], "style": e.style, "swd": e.swd}))
        .collect();
    let top: Vec<&str> = report.top(a.k).iter().map(|e| names[e.index].as_str()).collect();
    let doc = json!({
        "format": RANK_FORMAT,
        "prompt": path_str(&a.prompt),
        "k": a.k,
        "top_k": top,
        "top_k_mean_style": report.mean_top(a.k),
        "ranked": ranked,
        "excluded": excluded,
    });
    write_file(&a.report, serde_json::to_string_pretty(&doc)? + "\n")?;
    let mut inputs = vec![a.prompt.clone()];
    inputs.extend(files);
    Ok(Outcome {
        seed: cfg.rank.seed,
        inputs,
        outputs: vec![a.report.clone()],
        manifest: Some(manifest_beside(&a.report, false)),
        summary: json!({"ranked": report.ranked.len(), "top_k_mean_style": report.mean_top(a.k)}),
    })
}

fn run_optimize(a: &OptimizeArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    if let Some(i) = a.iters {
        cfg.optimize.iters = i;
    }
    if let Some(s) = a.seed {
        cfg.optimize.seed = s;
    }
    let g = read_graph(&a.graph, lib)?;
    let target = ImagePlane::read_png(&a.target)?;
    let res = optimize_params(&g, &target, lib, &cfg.optimize)?;
    write_file(&a.out, res.graph.to_json(lib))?;
    log("optimized", json!({"initial_score": res.initial_score, "best_score": res.best_score}));
    Ok(Outcome {
        seed: cfg.optimize.seed,
        inputs: vec![a.graph.clone(), a.target.clone()],
        outputs: vec![a.out.clone()],
        manifest: Some(manifest_beside(&a.out, false)),
        summary: json!({"initial_score": res.initial_score, "best_score": res.best_score, "history": res.history}),
    })
}

fn run_render(a: &RenderArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    let res = a.resolution.unwrap_or(cfg.corpus.resolution);
    let g = read_graph(&a.graph, lib)?;
    let maps = evaluate(&g, lib, res, cfg.corpus.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    render(&maps, &cfg.corpus.render).write_png(&a.out, None)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(dir) = &a.maps {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        maps.write_pngs(dir.join("map"), cfg.corpus.render.gamma)?;
        outputs.push(dir.clone());
    }
    Ok(Outcome {
        seed: cfg.corpus.seed,
        inputs: vec![a.graph.clone()],
        outputs,
        manifest: Some(manifest_beside(&a.out, false)),
        summary: json!({"resolution": res}),
    })
}

fn run_validate(a: &ValidateArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    let g = read_graph(&a.graph, lib)?;
    let report = validate_graph(&g, lib);
    println!("{}", serde_json::to_string(&report)?);
    if !report.ok {
        let first: Vec<String> = report.violations.iter().take(3).map(|v| format!("{}: {}", v.rule, v.message)).collect();
        return Err(Failure::new(
            "invalid-graph",
            format!("{} violation(s): {}", report.violations.len(), first.join("; ")),
        ));
    }
    Ok(Outcome {
        seed: cfg.seed.unwrap_or(0),
        inputs: vec![a.graph.clone()],
        outputs: vec![],
        manifest: None,
        summary: json!({"ok": true}),
    })
}

fn emit(out: Option<&Path>, text: String) -> Result<Vec<PathBuf>, Failure> {
    match out {
        Some(p) => {
            write_file(p, text)?;
            Ok(vec![p.to_path_buf()])
        }
        None => {
            print!("{text}");
            Ok(vec![])
        }
    }
}

fn run_encode(a: &EncodeArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    let g = read_graph(&a.graph, lib)?;
    let t = encode_with(&g, lib, a.order.unwrap_or(cfg.train.order))?;
    let outputs = emit(a.out.as_deref(), serde_json::to_string(&t)? + "\n")?;
    Ok(Outcome {
        seed: cfg.seed.unwrap_or(0),
        inputs: vec![a.graph.clone()],
        manifest: a.out.as_ref().map(|p| manifest_beside(p, false)),
        outputs,
        summary: json!({"node_len": t.node_seq.len(), "edge_len": t.edge_seq.len(), "param_len": t.param_seq.len()}),
    })
}

/// State of one token stream in a possibly truncated token file.
enum StreamState {
    Complete,
    Partial(usize),
}

fn stream_state(text: &str, key: &str) -> StreamState {
    let Some(pos) = text.find(&format!("\"{key}\"")) else {
        return StreamState::Partial(0);
    };
    let rest = &text[pos + key.len() + 2..];
    let Some((_, body)) = rest.split_once('[') else {
        return StreamState::Partial(0);
    };
    match body.split_once(']') {
        Some(_) => StreamState::Complete,
        None => {
            // The last number may itself be cut short, so only count tokens
            // followed by a separator.
            let n = body.matches(',').count();
            StreamState::Partial(n)
        }
    }
}

/// First stream a truncated token file leaves incomplete, with the number
/// of tokens that were read intact.
fn truncation_point(text: &str) -> Option<(&'static str, usize)> {
    [("node_seq", "node"), ("edge_seq", "edge"), ("param_seq", "param")]
        .into_iter()
        .find_map(|(key, name)| match stream_state(text, key) {
            StreamState::Complete => None,
            StreamState::Partial(n) => Some((name, n)),
        })
}

/// Recovers the three streams from a token file whose trailing auxiliary
/// data was cut off.
fn streams_only(text: &str) -> Option<TokenizedGraph> {
    let grab = |key: &str| -> Option<Vec<usize>> {
        let pos = text.find(&format!("\"{key}\""))?;
        let body = text[pos..].split_once('[')?.1.split_once(']')?.0;
        body.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse().ok())
            .collect()
    };
    Some(TokenizedGraph {
        node_seq: grab("node_seq")?,
        slot_list: vec![],
        edge_seq: grab("edge_seq")?,
        param_seq: grab("param_seq")?,
        aux: Default::default(),
    })
}

fn run_decode(a: &DecodeArgs, cfg: &mut RunConfig, lib: &OpLibrary) -> Result<Outcome, Failure> {
    let text = read_text(&a.tokens)?;
    let t: TokenizedGraph = match serde_json::from_str(&text) {
        Ok(t) => t,
        Err(e) if e.is_eof() || e.is_syntax() => match truncation_point(&text) {
            Some((stream, offset)) => {
                return Err(Error::MalformedSequence {
                    stream,
                    offset,
                    reason: format!("token file ends early ({e})"),
                }
                .into())
            }
            None => match streams_only(&text) {
                Some(t) => {
                    log("warning", json!({"message": "auxiliary sequences unreadable; decoding streams only"}));
                    t
                }
                None => return Err(e.into()),
            },
        },
        Err(e) => return Err(e.into()),
    };
    let g = decode(&t, lib)?;
    let outputs = emit(a.out.as_deref(), g.to_json(lib))?;
    Ok(Outcome {
        seed: cfg.seed.unwrap_or(0),
        inputs: vec![a.tokens.clone()],
        manifest: a.out.as_ref().map(|p| manifest_beside(p, false)),
        outputs,
        summary: json!({"nodes": g.nodes.len(), "edges": g.edges.len()}),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Corpus(CorpusCommand::Build(_)) => "corpus build",
        Command::Train(_) => "train",
        Command::Generate(_) => "generate",
        Command::Autocomplete(_) => "autocomplete",
        Command::Rank(_) => "rank",
        Command::Optimize(_) => "optimize",
        Command::Render(_) => "render",
        Command::Validate(_) => "validate",
        Command::Encode(_) => "encode",
        Command::Decode(_) => "decode",
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::config("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    let lib = OpLibrary::standard();
    let name = command_name(&cli.command);
    let started = Instant::now();
    log("start", json!({"command": name}));
    let outcome = match &cli.command {
        Command::Corpus(CorpusCommand::Build(a)) => run_corpus_build(a, &mut cfg, lib),
        Command::Train(a) => run_train(a, &mut cfg, lib),
        Command::Generate(a) => run_generate(a, &mut cfg, lib, false),
        Command::Autocomplete(a) => run_generate(a, &mut cfg, lib, true),
        Command::Rank(a) => run_rank(a, &mut cfg, lib),
        Command::Optimize(a) => run_optimize(a, &mut cfg, lib),
        Command::Render(a) => run_render(a, &mut cfg, lib),
        Command::Validate(a) => run_validate(a, &mut cfg, lib),
        Command::Encode(a) => run_encode(a, &mut cfg, lib),
        Command::Decode(a) => run_decode(a, &mut cfg, lib),
    }?;
    let mut inputs: Vec<String> = outcome.inputs.iter().map(|p| path_str(p)).collect();
    if let Some(c) = &cli.config {
        inputs.insert(0, path_str(c));
    }
    let manifest = Manifest {
        format: RUN_FORMAT,
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        seed: outcome.seed,
        inputs,
        outputs: outcome.outputs.iter().map(|p| path_str(p)).collect(),
        config: cfg,
        summary: outcome.summary,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    match cli.manifest.or(outcome.manifest) {
        Some(path) => {
            write_file(&path, &text)?;
            log("manifest", json!({"path": path_str(&path)}));
        }
        None => log("manifest", serde_json::to_value(&manifest)?),
    }
    log("done", json!({"command": name, "elapsed_ms": started.elapsed().as_millis() as u64}));
    Ok(())
}

fn fail(f: &Failure) -> ExitCode {
    let line = json!({"error": {"kind": f.kind, "message": f.message}});
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::InvalidSubcommand => fail(&Failure::new("unknown-subcommand", first_line(&e.to_string()))),
                _ => fail(&Failure::new("usage-error", first_line(&e.to_string()))),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").trim_start_matches("error: ").to_string()
}
