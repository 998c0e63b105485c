mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use gmnn_core::ablation::{ablate_ccm, k_set_cases, layer_count_cases, render_table};
use gmnn_core::bench::{bench_graphs, bench_timing};
use gmnn_core::checkpoint::{load_checkpoint, save_checkpoint};
use gmnn_core::event::{parse_event_stream, serialize_events, window_events, ClassId};
use gmnn_core::knn::knn_pyramid;
use gmnn_core::metrics::MetricReport;
use gmnn_core::synth::{grid_objects, overfit_fixture, scene_graphs, synth_scene, MotionKind};
use gmnn_core::train::train_with;
use gmnn_core::{build_graph, ErrorKind, EventGraph, GmnnError, ModelParams, Result, WindowSpec};

use config::{ms_to_us, parse_layer_range, parse_usize_list, RunConfig};
use manifest::RunManifest;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "gmnn", version, about = "Event-camera segmentation with graph mixer networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labelled event stream.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on labelled events.
    Eval(EvalArgs),
    /// Sweep CCM depth and neighbourhood sizes on the synthetic benchmark.
    Ablate(AblateArgs),
    /// Time sequential against batched inference.
    Bench(BenchArgs),
    /// Dump one window's graph and its kNN maps.
    Graph(GraphArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for artifacts and the run manifest.
    #[arg(long, default_value = "gmnn-out")]
    out_dir: PathBuf,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct WindowArgs {
    /// Window length [default: 100].
    #[arg(long)]
    window_ms: Option<f64>,
    /// Distance between window starts [default: window length].
    #[arg(long)]
    stride_ms: Option<f64>,
    /// Most recent events kept per window [default: 10000].
    #[arg(long)]
    n_max: Option<usize>,
    /// Sensor width in pixels [default: 346].
    #[arg(long)]
    width: Option<u32>,
    /// Sensor height in pixels [default: 260].
    #[arg(long)]
    height: Option<u32>,
    /// The event file starts with a header line.
    #[arg(long)]
    has_header: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Number of classes [default: 10].
    #[arg(long)]
    classes: Option<usize>,
    /// Encoder widths, comma separated [default: 32,64,128,256].
    #[arg(long, value_parser = parse_usize_list)]
    widths: Option<std::vec::Vec<usize>>,
    /// CCM neighbourhood sizes, comma separated [default: 16,32,48,64].
    #[arg(long, value_parser = parse_usize_list)]
    k_set: Option<std::vec::Vec<usize>>,
}

#[derive(Args)]
struct OptimArgs {
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// [default: 0.0001]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Graphs per step [default: 4].
    #[arg(long)]
    batch: Option<usize>,
    /// Rotating training subsets; iteration t trains on subset t mod L [default: 1].
    #[arg(long)]
    subsets: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of objects, placed on a grid [default: the benchmark scene's three].
    #[arg(long)]
    objects: Option<usize>,
    /// linear, rotational or partial_rotational [default: rotational].
    #[arg(long)]
    motion: Option<MotionKind>,
    /// Background noise events per second [default: 300].
    #[arg(long)]
    noise_rate: Option<f64>,
    /// Contour events per object and second [default: 1200].
    #[arg(long)]
    event_rate: Option<f64>,
    /// [default: 800]
    #[arg(long)]
    duration_ms: Option<f64>,
    /// Sensor width in pixels [default: 346].
    #[arg(long)]
    width: Option<u32>,
    /// Sensor height in pixels [default: 260].
    #[arg(long)]
    height: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Labelled event files.
    #[arg(long = "events", required_unless_present = "fixture")]
    events: Vec<PathBuf>,
    /// Train on the built-in two-class overfitting scene (implies --classes 2).
    #[arg(long, conflicts_with = "events")]
    fixture: bool,
    /// Report training accuracy every this many iterations [default: 0, never].
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop once training accuracy reaches this fraction.
    #[arg(long)]
    stop_at_accuracy: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled event files.
    #[arg(long = "events", required_unless_present = "fixture")]
    events: Vec<PathBuf>,
    /// Evaluate on the built-in two-class overfitting scene.
    #[arg(long, conflicts_with = "events")]
    fixture: bool,
    /// Radius for boundary false positives [default: 2].
    #[arg(long)]
    boundary_radius_px: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Level counts to sweep, `a..b` inclusive or comma separated [default: 1..7].
    #[arg(long, value_parser = parse_layer_range)]
    layers: Option<std::vec::Vec<usize>>,
    /// Skip the fixed-depth neighbourhood-size sweep.
    #[arg(long)]
    no_k_sets: bool,
    /// [default: 12]
    #[arg(long)]
    train_graphs: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    eval_graphs: Option<usize>,
    /// Window length of the sweep graphs [default: 50].
    #[arg(long)]
    graph_ms: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// [default: 40]
    #[arg(long)]
    graphs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    graph_ms: Option<f64>,
    /// [default: 5]
    #[arg(long)]
    repetitions: Option<usize>,
    /// Contour events per object and second in the timing scene [default: 5000].
    #[arg(long)]
    event_rate: Option<f64>,
    /// Time this model instead of a freshly initialized one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    win: WindowArgs,
    #[arg(long)]
    events: PathBuf,
    /// Window index.
    #[arg(long, default_value_t = 0)]
    window: usize,
    /// Neighbourhood sizes to dump [default: 16,32,48,64].
    #[arg(long, value_parser = parse_usize_list)]
    k_set: Option<std::vec::Vec<usize>>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        set(&mut cfg.seed, self.seed);
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        Ok(cfg)
    }
}

impl WindowArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let w = &mut cfg.window;
        set(&mut w.window_ms, self.window_ms);
        if self.stride_ms.is_some() {
            w.stride_ms = self.stride_ms;
        }
        set(&mut w.n_max, self.n_max);
        set(&mut w.width, self.width);
        set(&mut w.height, self.height);
        w.has_header |= self.has_header;
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        set(&mut m.classes, self.classes);
        set(&mut m.widths, self.widths.clone());
        if let Some(k) = &self.k_set {
            m.k_set = k.clone();
            m.level_weights = None;
        }
    }
}

impl OptimArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.lr, self.lr);
        set(&mut t.momentum, self.momentum);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.batch, self.batch);
        set(&mut t.subsets, self.subsets);
        set(&mut t.iterations, self.iterations);
    }
}

fn setup(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(GmnnError::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| GmnnError::Config(format!("worker pool: {e}")))?;
    }
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

/// Labelled or unlabelled graphs over every non-empty window of each file.
fn load_graphs(paths: &[PathBuf], cfg: &RunConfig, manifest: &mut RunManifest) -> Result<Vec<EventGraph>> {
    let geometry = cfg.window.geometry()?;
    let spec = cfg.window.spec()?;
    let mut graphs = Vec::new();
    for path in paths {
        let text = read_text(path)?;
        manifest.input(path)?;
        let events = parse_event_stream(&text, geometry, cfg.window.parse_options())?;
        for w in window_events(&events, spec)? {
            if !w.is_empty() {
                graphs.push(build_graph(&w, geometry)?);
            }
        }
    }
    if graphs.is_empty() {
        return Err(GmnnError::EmptyGraph);
    }
    Ok(graphs)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn class_histogram(labels: impl Iterator<Item = ClassId>) -> Vec<(ClassId, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.into_iter().collect()
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    let mut scene = cfg.scene();
    set(&mut scene.width, args.width);
    set(&mut scene.height, args.height);
    if let Some(n) = args.objects {
        scene.objects = grid_objects(n, scene.width, scene.height);
    }
    set(&mut scene.motion.kind, args.motion);
    set(&mut scene.noise_rate, args.noise_rate);
    set(&mut scene.event_rate, args.event_rate);
    if let Some(ms) = args.duration_ms {
        scene.duration_us = ms_to_us(ms)?;
    }
    cfg.scene = Some(scene.clone());
    setup(&cfg, &args.common.out_dir)?;

    let events = synth_scene(&scene, cfg.seed)?;
    let mut manifest = RunManifest::new("synth", &cfg);
    let path = args.common.out_dir.join("events.txt");
    manifest.write_artifact(&path, serialize_events(&events).as_bytes())?;
    println!("{} events -> {}", events.len(), path.display());
    for (class, n) in class_histogram(events.iter().filter_map(|e| e.label)) {
        println!("class {class:<3} {n}");
    }
    manifest.save(&args.common.out_dir)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.window.apply(&mut cfg);
    if args.fixture {
        cfg.model.classes = 2;
    }
    args.model.apply(&mut cfg);
    args.optim.apply(&mut cfg);
    set(&mut cfg.train.eval_every, args.eval_every);
    if args.stop_at_accuracy.is_some() {
        cfg.train.stop_at_accuracy = args.stop_at_accuracy;
    }
    cfg.model.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    setup(&cfg, &args.common.out_dir)?;

    let mut manifest = RunManifest::new("train", &cfg);
    let graphs = if args.fixture {
        overfit_fixture(cfg.seed)?
    } else {
        load_graphs(&args.events, &cfg, &mut manifest)?
    };
    let mut model = ModelParams::new(cfg.model.clone())?;
    let report = train_with(&mut model, &graphs, &cfg.train, |r| {
        match r.train_accuracy {
            Some(a) => eprintln!("iter {:>5} subset {} loss {:.6} acc {:.4}", r.iteration, r.subset, r.loss, a),
            None => eprintln!("iter {:>5} subset {} loss {:.6}", r.iteration, r.subset, r.loss),
        }
    })?;

    let out = &args.common.out_dir;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    manifest.artifact(&ckpt)?;
    manifest.write_artifact(&out.join("loss.txt"), report.loss_curve().as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    manifest.write_artifact(&out.join("train_report.json"), json.as_bytes())?;
    manifest.save(out)?;
    println!(
        "{} graphs, {} iterations in {:.1} s, final loss {:.6}",
        graphs.len(),
        report.iterations_run,
        report.seconds,
        report.history.last().map_or(f64::NAN, |r| gmnn_core::tensor::widen(r.loss))
    );
    if let Some(a) = report.final_accuracy {
        println!("training accuracy {a:.4}");
    }
    if let Some(i) = report.reached_target_at {
        println!("accuracy target reached at iteration {i}");
    }
    println!("checkpoint -> {}", ckpt.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.window.apply(&mut cfg);
    set(&mut cfg.eval.boundary_radius_px, args.boundary_radius_px);
    let model = load_checkpoint(&args.checkpoint)?;
    cfg.model = model.config.clone();
    setup(&cfg, &args.common.out_dir)?;

    let mut manifest = RunManifest::new("eval", &cfg);
    manifest.input(&args.checkpoint)?;
    let graphs = if args.fixture {
        overfit_fixture(cfg.seed)?
    } else {
        load_graphs(&args.events, &cfg, &mut manifest)?
    };
    if let Some(i) = graphs.iter().position(|g| g.labels.is_none()) {
        return Err(GmnnError::Label(format!("window {i} has unlabelled events")));
    }
    let preds: Vec<Vec<ClassId>> = graphs
        .par_iter()
        .map(|g| {
            let logits = model.predict(&model.structure(g)?)?;
            Ok(logits.argmax_rows().into_iter().map(|c| c as ClassId).collect())
        })
        .collect::<Result<_>>()?;
    let (w, h) = (cfg.window.width as f64, cfg.window.height as f64);
    let pred: Vec<ClassId> = preds.concat();
    let truth: Vec<ClassId> = graphs.iter().flat_map(|g| g.labels.clone().unwrap()).collect();
    let pixels: Vec<[f64; 3]> = graphs
        .iter()
        .flat_map(|g| g.positions.iter().map(|p| [p[0] * w, p[1] * h, p[2]]))
        .collect();
    let report = MetricReport::compute(
        &pred,
        &truth,
        &pixels,
        model.config.classes,
        cfg.eval.boundary_radius_px,
        cfg.eval.background,
    )?;

    let out = &args.common.out_dir;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    manifest.write_artifact(&out.join("metrics.json"), json.as_bytes())?;
    let text = report.render();
    manifest.write_artifact(&out.join("metrics.txt"), text.as_bytes())?;
    manifest.save(out)?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.model.apply(&mut cfg);
    args.optim.apply(&mut cfg);
    let a = &mut cfg.ablate;
    set(&mut a.layers, args.layers.clone());
    a.k_sets &= !args.no_k_sets;
    set(&mut a.train_graphs, args.train_graphs);
    set(&mut a.eval_graphs, args.eval_graphs);
    set(&mut a.graph_ms, args.graph_ms);
    let scene = cfg.scene();
    if args.model.classes.is_none() {
        let top = scene.objects.iter().map(|o| o.class).max().unwrap_or(0);
        cfg.model.classes = cfg.model.classes.max(top as usize + 1);
    }
    cfg.model.seed = cfg.seed;
    setup(&cfg, &args.common.out_dir)?;

    let a = &cfg.ablate;
    let wanted = a.train_graphs + a.eval_graphs;
    let spec = WindowSpec::tumbling(ms_to_us(a.graph_ms)?, cfg.window.n_max);
    let scene = gmnn_core::synth::SceneConfig {
        duration_us: scene.duration_us.max(spec.duration * wanted as u64),
        ..scene
    };
    let graphs = scene_graphs(&scene, cfg.seed, spec)?;
    if graphs.len() < wanted || a.train_graphs == 0 || a.eval_graphs == 0 {
        return Err(GmnnError::Config(format!(
            "scene yields {} graphs, {} train + {} eval requested",
            graphs.len(),
            a.train_graphs,
            a.eval_graphs
        )));
    }
    let (train_set, eval_set) = graphs[..wanted].split_at(a.train_graphs);
    let mut cases = layer_count_cases(&a.layers);
    if a.k_sets {
        cases.extend(k_set_cases());
    }
    let rows = ablate_ccm(&cfg.model, &cfg.train, train_set, eval_set, &cases)?;

    let mut manifest = RunManifest::new("ablate", &cfg);
    let out = &args.common.out_dir;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    manifest.write_artifact(&out.join("ablation.json"), json.as_bytes())?;
    let table = render_table(&rows);
    manifest.write_artifact(&out.join("ablation.txt"), table.as_bytes())?;
    manifest.save(out)?;
    print!("{table}");
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.model.apply(&mut cfg);
    let b = &mut cfg.bench;
    set(&mut b.graphs, args.graphs);
    set(&mut b.graph_ms, args.graph_ms);
    set(&mut b.repetitions, args.repetitions);
    set(&mut b.event_rate, args.event_rate);
    let mut manifest = RunManifest::new("bench", &cfg);
    let model = match &args.checkpoint {
        Some(p) => {
            manifest.input(p)?;
            load_checkpoint(p)?
        }
        None => {
            cfg.model.seed = cfg.seed;
            ModelParams::new(cfg.model.clone())?
        }
    };
    cfg.model = model.config.clone();
    manifest.config = cfg.clone();
    setup(&cfg, &args.common.out_dir)?;

    let b = &cfg.bench;
    let scene = gmnn_core::synth::SceneConfig {
        event_rate: b.event_rate,
        ..cfg.scene()
    };
    let graphs = bench_graphs(&scene, cfg.seed, b.graphs, ms_to_us(b.graph_ms)?)?;
    let report = bench_timing(&model, &graphs, b.repetitions)?;

    let out = &args.common.out_dir;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    manifest.write_artifact(&out.join("bench.json"), json.as_bytes())?;
    let text = report.render();
    manifest.write_artifact(&out.join("bench.txt"), text.as_bytes())?;
    manifest.save(out)?;
    print!("{text}");
    Ok(())
}

fn cmd_graph(args: &GraphArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.win.apply(&mut cfg);
    if let Some(k) = &args.k_set {
        cfg.model.k_set = k.clone();
    }
    setup(&cfg, &args.common.out_dir)?;

    let mut manifest = RunManifest::new("graph", &cfg);
    let geometry = cfg.window.geometry()?;
    let text = read_text(&args.events)?;
    manifest.input(&args.events)?;
    let events = parse_event_stream(&text, geometry, cfg.window.parse_options())?;
    let windows = window_events(&events, cfg.window.spec()?)?;
    let window = windows.get(args.window).ok_or_else(|| {
        GmnnError::Config(format!("window {} requested, stream has {}", args.window, windows.len()))
    })?;
    let graph = build_graph(window, geometry)?;
    let pyramid = knn_pyramid(&graph, &cfg.model.k_set)?;
    let path = args.common.out_dir.join(format!("graph_{}.txt", args.window));
    manifest.write_artifact(&path, graph.dump(Some(&pyramid)).as_bytes())?;
    manifest.save(&args.common.out_dir)?;
    println!("{} nodes -> {}", graph.len(), path.display());
    Ok(())
}

fn exit_code(e: &GmnnError) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Graph(a) => cmd_graph(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
