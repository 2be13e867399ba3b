//! Command-line interface. `main` only parses arguments and reports errors;
//! every subcommand lives here so tests can drive it in-process.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sparsevos_core::corpus::{generate, SceneSpec, Video};
use sparsevos_core::distill::{train_shortcut_with, TrainConfig};
use sparsevos_core::pipeline::{Mode, ModelWeights, PipelineConfig};
use sparsevos_core::smr::temporal_consistency;
use sparsevos_core::swr::RoutingDecision;
use sparsevos_core::Error as CoreError;

use crate::bench::{
    build_report, dense_oracle, report_csv, run_modes, run_scene, s_csv, s_sweep, summary_csv, tau_csv, tau_sweep,
    SceneRun,
};
use crate::config::{load_pipeline_config, parse_corpus_spec, read_text};
use crate::corpus_io::{frame_name, read_corpus, write_corpus, Scene};
use crate::error::{Error, Result};
use crate::format::{load_weights, save_weights};
use crate::netpbm::{encode_heat, encode_mask};
use crate::plot::{accuracy_vs_speedup, s_plot, tau_plot};

#[derive(Debug, Parser)]
#[command(name = "sparsevos", version, about = "Sparse streaming video object segmentation on synthetic scenes")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (frames as PPM, masks as PGM) from a spec file.
    Gen {
        /// Scene spec, or a random-corpus spec with a `scenes` key.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly initialised model weights.
    InitWeights {
        /// Model config file.
        #[arg(long)]
        config: PathBuf,
        /// Output weights archive.
        #[arg(long)]
        out: PathBuf,
        /// Initialisation seed; defaults to the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill the window shortcut branches against the dense teacher.
    TrainShortcut(TrainArgs),
    /// Stream a corpus through the pipeline and write per-frame report rows.
    Run(RunArgs),
    /// Run all modes plus the tau and s sweeps; write CSVs and SVG plots.
    Bench(BenchArgs),
    /// Dump attention maps, saliency patterns, routing and bank contents at one frame.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Weights archive.
    #[arg(long)]
    pub weights: PathBuf,
    /// Model config file.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
#[group(multiple = false)]
pub struct ModeFlags {
    /// Dense pipeline, no acceleration.
    #[arg(long)]
    pub dense: bool,
    /// Sparse window routing only.
    #[arg(long)]
    pub swr: bool,
    /// Sparse memory retrieval only.
    #[arg(long)]
    pub smr: bool,
    /// Both accelerations.
    #[arg(long)]
    pub both: bool,
}

impl ModeFlags {
    pub fn mode(&self, default: Mode) -> Mode {
        match (self.dense, self.swr, self.smr, self.both) {
            (true, ..) => Mode::Dense,
            (_, true, ..) => Mode::Swr,
            (_, _, true, _) => Mode::Smr,
            (.., true) => Mode::Both,
            _ => default,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output weights archive (teacher weights with the trained shortcuts).
    #[arg(long)]
    pub out: PathBuf,
    /// Training corpus; synthetic random streams when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Held-out corpus; synthetic random streams when omitted.
    #[arg(long)]
    pub held_out_corpus: Option<PathBuf>,
    /// Number of synthetic training streams.
    #[arg(long, default_value_t = 30)]
    pub streams: usize,
    /// Frames per synthetic training stream.
    #[arg(long, default_value_t = 160)]
    pub frames: usize,
    /// Number of synthetic held-out streams.
    #[arg(long, default_value_t = 5)]
    pub held_out: usize,
    /// Frames per synthetic held-out stream.
    #[arg(long, default_value_t = 60)]
    pub held_out_frames: usize,
    /// Seed of the synthetic streams.
    #[arg(long, default_value_t = 1000)]
    pub data_seed: u64,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-step loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Corpus directory (one scene or a directory of scenes).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Per-frame report CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub mode: ModeFlags,
    /// Directory for predicted masks, one PGM per frame under each scene name.
    #[arg(long)]
    pub masks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for CSVs and plots.
    #[arg(long)]
    pub out: PathBuf,
    /// Tau values of the window-routing sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7,0.9")]
    pub taus: Vec<f64>,
    /// Sparsity values of the memory sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.9,0.95")]
    pub sparsities: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Scene name within the corpus; the first scene when omitted.
    #[arg(long)]
    pub scene: Option<String>,
    /// Frame to inspect.
    #[arg(long)]
    pub frame: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub mode: ModeFlags,
    /// One PGM heat map per memory-attention layer, queries × memory tokens.
    #[arg(long)]
    pub dump_attention: bool,
    /// Saliency pattern queue after the frame, as text.
    #[arg(long)]
    pub dump_patterns: bool,
    /// Routing decision of the frame, as CSV.
    #[arg(long)]
    pub dump_routing: bool,
    /// Memory bank contents after the frame, as CSV.
    #[arg(long)]
    pub dump_bank: bool,
    /// Cosine similarity of each memory frame's first and second recollection.
    #[arg(long)]
    pub dump_consistency: bool,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => gen(&spec, &out),
        Command::InitWeights { config, out, seed } => init_weights(&config, &out, seed),
        Command::TrainShortcut(a) => train(&a),
        Command::Run(a) => run(&a),
        Command::Bench(a) => bench(&a),
        Command::Diagnose(a) => diagnose(&a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen(spec: &Path, out: &Path) -> Result<()> {
    let spec = parse_corpus_spec(&read_text(spec, "spec")?)?;
    let dirs = write_corpus(out, &spec)?;
    log::info!("wrote {} scene(s) to {}", dirs.len(), out.display());
    Ok(())
}

fn init_weights(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_pipeline_config(config)?;
    let w = ModelWeights::init(&cfg, seed.unwrap_or(cfg.seed))?;
    save_weights(&w, out)
}

/// Config first, then weights, so neither failure reads any frame.
fn load_model(m: &ModelArgs) -> Result<(PipelineConfig, ModelWeights)> {
    let cfg = load_pipeline_config(&m.config)?;
    let w = load_weights(&m.weights, &cfg)?;
    Ok((cfg, w))
}

fn synthetic(n: usize, frames: usize, seed: u64) -> Result<Vec<Video>> {
    (0..n).map(|i| Ok(generate(&SceneSpec::random(i as u64, seed, frames))?)).collect()
}

fn videos(dir: &Path) -> Result<Vec<Video>> {
    Ok(read_corpus(dir)?.iter().map(Scene::video).collect())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (cfg, mut w) = load_model(&a.model)?;
    let mut tcfg = TrainConfig::default();
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        tcfg.lr = lr;
    }
    tcfg.validate()?;
    let train = match &a.corpus {
        Some(d) => videos(d)?,
        None => synthetic(a.streams, a.frames, a.data_seed)?,
    };
    let held = match &a.held_out_corpus {
        Some(d) => videos(d)?,
        None => synthetic(a.held_out, a.held_out_frames, a.data_seed + 1)?,
    };
    let (shortcuts, record) = train_shortcut_with(&train, &held, &cfg, &w, &tcfg, &mut |s| {
        log::debug!("step {} epoch {} loss {:.6e}", s.step, s.epoch, s.loss)
    })?;
    log::info!(
        "{} steps, held-out loss {:.6e} -> {:?}",
        record.steps.len(),
        record.initial_held_out,
        record.final_held_out
    );
    w.encoder.shortcuts = shortcuts;
    save_weights(&w, &a.out)?;
    if let Some(log) = &a.log {
        write(log, record.csv())?;
    }
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let (cfg, w) = load_model(&a.model)?;
    let mode = a.mode.mode(Mode::Both);
    let scenes = read_corpus(&a.corpus)?;
    let dense = dense_oracle(&scenes, &cfg, &w)?;
    let fresh;
    let runs: &[SceneRun] = if mode == Mode::Dense {
        &dense
    } else {
        let mcfg = cfg.clone().with_mode(mode);
        fresh = scenes.iter().map(|s| run_scene(s, &mcfg, &w)).collect::<Result<Vec<_>>>()?;
        &fresh
    };
    let report = build_report(mode, &scenes, &dense, runs)?;
    write(&a.out, report_csv(&[report]))?;
    if let Some(dir) = &a.masks_out {
        for (scene, run) in scenes.iter().zip(runs) {
            for (o, gt) in run.outputs.iter().zip(&scene.masks) {
                let m = o.prediction.choose_output().resize_nearest(gt.height(), gt.width());
                write(&dir.join(&scene.name).join(frame_name(o.t, "pgm")), encode_mask(&m))?;
            }
        }
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let (cfg, w) = load_model(&a.model)?;
    let scenes = read_corpus(&a.corpus)?;
    let dense = dense_oracle(&scenes, &cfg, &w)?;
    let reports = run_modes(&scenes, &dense, &cfg, &w, &Mode::ALL)?;
    let taus = tau_sweep(&scenes, &dense, &cfg, &w, &a.taus)?;
    let ss = s_sweep(&scenes, &dense, &cfg, &w, &a.sparsities)?;
    write(&a.out.join("report.csv"), report_csv(&reports))?;
    write(&a.out.join("summary.csv"), summary_csv(&reports))?;
    write(&a.out.join("tau_sweep.csv"), tau_csv(&taus))?;
    write(&a.out.join("s_sweep.csv"), s_csv(&ss))?;
    let plots = a.out.join("plots");
    write(&plots.join("accuracy_vs_speedup.svg"), accuracy_vs_speedup(&reports))?;
    write(&plots.join("tau_sweep.svg"), tau_plot(&taus))?;
    write(&plots.join("s_sweep.svg"), s_plot(&ss))?;
    Ok(())
}

/// `(frame, layer, cosine)` for every memory frame recalled at least twice.
pub fn consistency_trace(run: &SceneRun, layers: usize) -> Vec<(usize, usize, f64)> {
    let outs = &run.outputs;
    let mut rows = Vec::new();
    for f in 1..outs.len() {
        let (Some(first), Some(second)) = (outs.get(f + 1), outs.get(f + 2)) else { break };
        for l in 0..layers {
            if let Ok(c) = temporal_consistency(&first.record, &second.record, f, l) {
                rows.push((f, l, c));
            }
        }
    }
    rows
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let (cfg, w) = load_model(&a.model)?;
    let cfg = cfg.with_mode(a.mode.mode(Mode::Dense));
    let scenes = read_corpus(&a.corpus)?;
    let scene = match &a.scene {
        Some(name) => scenes
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| Error::NotFound(format!("scene {name} not in corpus")))?,
        None => &scenes[0],
    };
    let n = scene.frames.len();
    if a.frame >= n {
        return Err(CoreError::Argument(format!("frame {} out of range (scene has {n} frames)", a.frame)).into());
    }
    let all = !(a.dump_attention || a.dump_patterns || a.dump_routing || a.dump_bank || a.dump_consistency);
    let prefix = Scene { frames: scene.frames[..=a.frame].to_vec(), masks: scene.masks[..=a.frame].to_vec(), ..scene.clone() };
    let consistency = a.dump_consistency || all;
    let run = run_scene(if consistency { scene } else { &prefix }, &cfg, &w)?;
    let out = &run.outputs[a.frame];

    if a.dump_attention || all {
        for (l, rec) in out.record.layers.iter().enumerate() {
            write(&a.out.join(format!("attention_layer{l}.pgm")), encode_heat(&rec.probs))?;
        }
    }
    // Replay to the frame so the bank and pattern queue reflect that point.
    let state = if a.dump_patterns || a.dump_bank || all { Some(replay(&prefix, &cfg, &w)?) } else { None };
    if let Some(state) = state.as_ref().filter(|_| a.dump_patterns || all) {
        let mut s = String::new();
        for e in state.patterns.entries() {
            for p in &e.layers {
                let idx: Vec<String> = p.indices.iter().map(|i| i.to_string()).collect();
                let _ = writeln!(s, "frame {} layer {}: {}", p.frame, p.layer, idx.join(" "));
            }
        }
        write(&a.out.join("patterns.txt"), s)?;
    }
    if a.dump_routing || all {
        write(&a.out.join("routing.csv"), format!("{}\n{}\n", RoutingDecision::CSV_HEADER, out.plan.csv_row()))?;
    }
    if let Some(state) = state.as_ref().filter(|_| a.dump_bank || all) {
        let mut s = String::from("frame,prompt,tokens,mean_norm\n");
        for f in state.bank.frames() {
            let k = f.k();
            let norm: f64 = (0..k)
                .map(|r| f.tokens.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / k.max(1) as f64;
            let _ = writeln!(s, "{},{},{},{:.6}", f.t, f.is_prompt, k, norm);
        }
        write(&a.out.join("bank.csv"), s)?;
    }
    if consistency {
        let mut s = String::from("frame,layer,cosine\n");
        for (f, l, c) in consistency_trace(&run, cfg.memory.layers) {
            let _ = writeln!(s, "{f},{l},{c:.6}");
        }
        write(&a.out.join("consistency.csv"), s)?;
    }
    Ok(())
}

fn replay(scene: &Scene, cfg: &PipelineConfig, w: &ModelWeights) -> Result<sparsevos_core::pipeline::StreamState> {
    use sparsevos_core::pipeline::{init_stream, step};
    let (mut state, _) = init_stream(&scene.frames[0], Some(&scene.masks[0]), cfg, w)?;
    for f in &scene.frames[1..] {
        step(&mut state, f, cfg, w)?;
    }
    Ok(state)
}
