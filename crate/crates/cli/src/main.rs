use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use isp_align::harness::{
    evaluate_split, fit, infer_raw, load_pairs, run_ablation, AblationSuite, Checkpoint, Split, TrainConfig,
};
use isp_align::metrics::{lpips_plugin, Protocol};
use isp_align::rawdata::io::{read_rawp, write_dataset, write_png};
use isp_align::rawdata::{generate_dataset, FlowKind};
use isp_align::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "isp-align",
    version,
    about = "Learned raw-to-sRGB mapping trained on misaligned pairs"
)]
struct Cli {
    /// JSON training config (defaults to the `desk` preset).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `infer` and `eval`).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    SynthData(SynthArgs),
    /// Train the GCM and mapping network.
    Train(TrainArgs),
    /// Score a checkpoint under an evaluation protocol (JSON lines).
    Eval(EvalArgs),
    /// Map one raw file to a PNG.
    Infer(InferArgs),
    /// Train and compare the variants of an ablation suite.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of pairs.
    #[arg(long)]
    n: Option<usize>,
    /// Side length of the square target images.
    #[arg(long)]
    size: Option<usize>,
    /// zero | translate | affine | smooth
    #[arg(long)]
    flow: Option<String>,
    /// Largest per-axis displacement in pixels.
    #[arg(long)]
    max_shift: Option<f32>,
    /// Vignette strength `s` in `1 − s·r²`.
    #[arg(long)]
    vignette: Option<f32>,
    /// Read-noise standard deviation.
    #[arg(long)]
    noise_std: Option<f32>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitSel {
    Train,
    Val,
    Test,
    Held,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// original | align_gt_with_raw | align_gt_with_result
    #[arg(long, default_value = "align_gt_with_raw")]
    protocol: String,
    /// Dataset directory; defaults to the one in the checkpoint's config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pairs to score; `held` is validation plus test.
    #[arg(long, value_enum, default_value = "held")]
    split: SplitSel,
    /// LPIPS plugin manifest; LPIPS is omitted when absent.
    #[arg(long)]
    lpips: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.rawp` file with its JSON sidecar.
    #[arg(long)]
    raw: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// alignment | gcm_components | rcab_count
    #[arg(long)]
    suite: String,
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optimizer steps per variant.
    #[arg(long)]
    steps: Option<usize>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run `isp-align --help` for usage.");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.cmd {
        Cmd::SynthData(a) => synth_data(cli, a),
        Cmd::Train(a) => train(cli, a),
        Cmd::Eval(a) => eval(cli, a),
        Cmd::Infer(a) => infer(cli, a),
        Cmd::Ablate(a) => ablate(cli, a),
    }
}

fn load_config(cli: &Cli) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_out(cli: &Cli) -> std::result::Result<&Path, Failure> {
    cli.out
        .as_deref()
        .ok_or_else(|| Failure::Config("--out is required for this command".into()))
}

fn synth_data(cli: &Cli, a: &SynthArgs) -> Outcome {
    let out = require_out(cli)?;
    let mut s = load_config(cli)?.data.synth;
    if let Some(v) = a.n {
        s.n = v;
    }
    if let Some(v) = a.size {
        s.size = v;
    }
    if let Some(f) = &a.flow {
        s.flow = FlowKind::parse(f)?;
    }
    if let Some(v) = a.max_shift {
        s.max_shift = v;
    }
    if let Some(v) = a.vignette {
        s.vignette = v;
    }
    if let Some(v) = a.noise_std {
        s.noise_std = v;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    let pairs = generate_dataset(&s)?;
    write_dataset(out, &pairs)?;
    std::fs::write(
        out.join("synth.json"),
        serde_json::to_string_pretty(&s).map_err(Error::from)?,
    )?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let mut cfg = load_config(cli)?;
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(s) = a.steps {
        cfg.optimizer.max_steps = Some(s);
    }
    if let Some(e) = a.epochs {
        cfg.optimizer.epochs = e;
    }
    cfg.out = Some(require_out(cli)?.to_path_buf());
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_default();
    let result = fit(&cfg)?;
    if let Some(last) = result.history.last() {
        println!("step {} epoch {} loss {:.5}", last.step, last.epoch, last.loss);
    }
    // Held-out scores under the protocol that needs no GCM, so `infer` output
    // can be checked against them directly.
    let pairs = load_pairs(&cfg.data)?;
    let held = result.split.held_out();
    if !held.is_empty() {
        let est = cfg.flow.build()?;
        let e = evaluate_split(
            &result.checkpoint.models,
            &cfg,
            &pairs,
            &held,
            est.as_ref(),
            Protocol::Original,
            &lpips_plugin(None),
        )?;
        let mut f = BufWriter::new(File::create(out.join("held_out.jsonl"))?);
        e.report.write_json_lines(&mut f)?;
        f.flush()?;
        println!("held-out PSNR {:.3} dB ({} pairs)", e.report.mean_psnr, held.len());
    }
    println!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome {
    let protocol = Protocol::parse(&a.protocol)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = match &cli.config {
        Some(_) => load_config(cli)?,
        None => ck.config.clone(),
    };
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    let pairs = load_pairs(&cfg.data)?;
    let split = Split::new(pairs.len(), cfg.data.split, cli.seed.unwrap_or(cfg.seed))?;
    let indices = match a.split {
        SplitSel::Train => split.train,
        SplitSel::Val => split.val,
        SplitSel::Test => split.test,
        SplitSel::Held => split.held_out(),
        SplitSel::All => (0..pairs.len()).collect(),
    };
    let est = cfg.flow.build()?;
    let lpips = lpips_plugin(a.lpips.as_deref());
    let e = evaluate_split(&ck.models, &cfg, &pairs, &indices, est.as_ref(), protocol, &lpips)?;
    match &cli.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut f = BufWriter::new(File::create(p)?);
            e.report.write_json_lines(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            e.report.write_json_lines(&mut stdout.lock())?;
        }
    }
    Ok(())
}

fn infer(cli: &Cli, a: &InferArgs) -> Outcome {
    let out = require_out(cli)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (raw, _) = read_rawp(&a.raw)?;
    let img = infer_raw(&ck.models, &ck.config, &raw)?;
    write_png(out, &img.clamp01())?;
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Outcome {
    let suite = AblationSuite::parse(&a.suite)?;
    let mut cfg = load_config(cli)?;
    if let Some(d) = &a.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(s) = a.steps {
        cfg.optimizer.max_steps = Some(s);
    }
    cfg.out = cli.out.clone();
    let report = run_ablation(suite, &cfg)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("ablation.txt"), &table)?;
        std::fs::write(
            out.join("ablation.json"),
            serde_json::to_string_pretty(&report).map_err(Error::from)?,
        )?;
    }
    Ok(())
}
