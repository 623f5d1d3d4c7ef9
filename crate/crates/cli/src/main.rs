//! `pvmdnn`: dataset synthesis, training, simulation, entrainment, ERS,
//! gradient checks and analysis over the shared file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use pvmdnn_core::analysis::{
    activation_pca, classify_inferred_intent, dump_frames, error_metrics, initial_states_csv,
    intent_csv, metrics_csv, project_initial_states, projection_csv, PcaBasis,
};
use pvmdnn_core::checkpoint::load_checkpoint;
use pvmdnn_core::ers::{
    inferred_sidecar, predictions_sidecar, read_inferred_sidecar, read_predictions_sidecar,
    run_ers, stream_observations, trace_csv, ErsConfig, ErsRun, Modality,
};
use pvmdnn_core::gesture::{
    build_dataset, build_stream, home_input, load_dataset, load_stream, save_dataset, save_stream,
    subset, CodingConfig, ObservationStream, DEFAULT_STEPS,
};
use pvmdnn_core::network::{generate_closed_loop, Layer};
use pvmdnn_core::train::{grad_check, train_to_dir, GradCheckOptions, TrainConfig};
use pvmdnn_core::{Error, HiddenState, NetworkConfig, Parameters};

const OUT_DIR_ENV: &str = "PVMDNN_OUT_DIR";
const THREADS_ENV: &str = "PVMDNN_THREADS";

#[derive(Parser)]
#[command(
    name = "pvmdnn",
    version,
    about = "Visuo-proprioceptive predictive-coding network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the gesture primitives into a dataset file.
    Synth(SynthArgs),
    /// Concatenate dataset sequences into a jittered observation stream.
    Stream(StreamArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Closed-loop generation from learned initial states.
    Simulate(SimulateArgs),
    /// Open-loop sensory entrainment over a stream.
    Entrain(EntrainArgs),
    /// Online error regression over a stream.
    Ers(ErsArgs),
    /// Compare BPTT gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// PCA, error metrics and intent classification.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset file to write (default `$PVMDNN_OUT_DIR/dataset.pvmd`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    /// Keep only the first N primitives of the subset order.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated dataset indices (default: every sequence in order).
    #[arg(long, value_delimiter = ',')]
    order: Vec<usize>,
    /// Standard deviation of the joint noise as a fraction of the joint range.
    #[arg(long, default_value_t = 0.02)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stream file to write (default `$PVMDNN_OUT_DIR/stream.pvmd`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NetArgs {
    /// Built-in preset: table1, desk or tiny.
    #[arg(long, default_value = "desk", conflicts_with = "config")]
    preset: String,
    /// JSON network config instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl NetArgs {
    fn resolve(&self) -> Result<NetworkConfig, Error> {
        match &self.config {
            Some(p) => NetworkConfig::from_json(&fs::read_to_string(p)?),
            None => NetworkConfig::preset(&self.preset),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 40_000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a checkpoint every N epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_interval: usize,
    /// Leave the wall_seconds column empty so reruns are byte-identical.
    #[arg(long)]
    no_wall_clock: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Sequence index to generate (default: all).
    #[arg(long)]
    primitive: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Visual,
    Proprio,
    Both,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Visual => Modality::Visual,
            ModalityArg::Proprio => Modality::Proprio,
            ModalityArg::Both => Modality::Both,
        }
    }
}

#[derive(Args)]
struct EntrainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, alias = "data")]
    stream: PathBuf,
    #[arg(long, value_enum, default_value = "visual")]
    modality: ModalityArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ErsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, alias = "data")]
    stream: PathBuf,
    #[arg(long, value_enum, default_value = "visual")]
    modality: ModalityArg,
    #[arg(long, default_value_t = 30)]
    window: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    net: GradcheckNet,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    sequences: usize,
    #[arg(long, default_value_t = 5)]
    steps: usize,
}

#[derive(Args)]
struct GradcheckNet {
    #[arg(long, default_value = "tiny")]
    preset: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pca,
    Metrics,
    Intent,
    Activations,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Train,
    Joint,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory of an `ers` or `entrain` run.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Steps excluded from the intent accuracy.
    #[arg(long, default_value_t = 30)]
    burn_in: usize,
    /// Rows the activation PCA is fitted on.
    #[arg(long, value_enum, default_value = "train")]
    basis: BasisArg,
    /// Closed-loop steps per training primitive for the activation PCA.
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Shape(_) | Error::MissingInput { .. } => 2,
            Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Divergence { .. }
            | Error::WindowLoss { .. } => 3,
            Error::Format(_) | Error::Version { .. } | Error::Checksum { .. } | Error::Io(_) => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn out_dir(arg: &Option<PathBuf>) -> PathBuf {
    arg.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn out_file(arg: &Option<PathBuf>, name: &str) -> PathBuf {
    match arg {
        Some(p) => p.clone(),
        None => out_dir(&None).join(name),
    }
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn configure_threads() -> CmdResult {
    if let Some(v) = std::env::var_os(THREADS_ENV) {
        let n: usize = v
            .to_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let mut d = build_dataset(a.seed, a.steps)?;
    if let Some(n) = a.subset {
        d = subset(&d, n)?;
    }
    let path = out_file(&a.out, "dataset.pvmd");
    ensure_parent(&path)?;
    save_dataset(&path, &d)?;
    println!(
        "{}: {} sequences x {} steps, {}x{} frames, {} code units",
        path.display(),
        d.len(),
        a.steps,
        d.height,
        d.width,
        d.coding.code_len()
    );
    for s in &d.sequences {
        println!(
            "  id {:2}  lead {:5}  amps {:.1}/{:.1}",
            s.id,
            s.spec.lead.name(),
            s.spec.amp_left,
            s.spec.amp_right
        );
    }
    Ok(())
}

fn cmd_stream(a: &StreamArgs) -> CmdResult {
    let d = load_dataset(&a.data)?;
    let order: Vec<usize> = if a.order.is_empty() {
        (0..d.len()).collect()
    } else {
        a.order.clone()
    };
    let s = build_stream(&d, &order, a.jitter, a.seed)?;
    let path = out_file(&a.out, "stream.pvmd");
    ensure_parent(&path)?;
    save_stream(&path, &s)?;
    println!(
        "{}: {} steps from sequences {:?}",
        path.display(),
        s.len(),
        order
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let net = a.net.resolve()?;
    let d = load_dataset(&a.data)?;
    if (d.height, d.width) != (net.image_height, net.image_width)
        || d.coding.code_len() != net.proprio_len()
    {
        return Err(usage(format!(
            "dataset of {}x{} frames and {} code units does not fit the network",
            d.height,
            d.width,
            d.coding.code_len()
        )));
    }
    let mut cfg = TrainConfig::new(a.epochs, a.lr, a.seed);
    cfg.checkpoint_interval = a.checkpoint_interval;
    let dir = out_dir(&a.out);
    let (outcome, files) = train_to_dir(&d.sequences, &cfg, &net, &dir, !a.no_wall_clock)?;
    let first = &outcome.records[0];
    let last = outcome.records.last().expect("at least one record");
    println!(
        "E {:.6} -> {:.6} after {} epochs; wrote {} and {}",
        first.total,
        last.total,
        last.epoch,
        files.loss_csv.display(),
        files.final_checkpoint.display()
    );
    Ok(())
}

fn load_params(path: &Path) -> Result<Parameters, Failure> {
    Ok(load_checkpoint(path)?.0)
}

fn coding_for(cfg: &NetworkConfig) -> Result<CodingConfig, Failure> {
    let coding = CodingConfig::default();
    if coding.code_len() != cfg.proprio_len() {
        return Err(usage(
            "the network's proprioceptive width does not match the joint coding",
        ));
    }
    Ok(coding)
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let params = load_params(&a.ckpt)?;
    let cfg = &params.config;
    let coding = coding_for(cfg)?;
    let (frame, code) = home_input(&coding);
    if frame.len() != cfg.image_len() {
        return Err(usage(
            "the network's image size does not match the renderer",
        ));
    }
    let which: Vec<usize> = match a.primitive {
        Some(i) if i >= params.initial.len() => {
            return Err(usage(format!(
                "checkpoint has {} initial states, no primitive {i}",
                params.initial.len()
            )))
        }
        Some(i) => vec![i],
        None => (0..params.initial.len()).collect(),
    };
    let dir = out_dir(&a.out);
    for i in which {
        let init = params.initial_state(i)?;
        let r = generate_closed_loop(&params, &init, (&frame, &code), a.steps)?;
        let sub = dir.join(format!("primitive_{i:02}"));
        let frames: Vec<Vec<f64>> = r.steps.iter().map(|s| s.v_out.clone()).collect();
        dump_frames(&frames, cfg.image_height, cfg.image_width, &sub)?;
        let mut csv = String::from("t,left,right\n");
        for (t, s) in r.steps.iter().enumerate() {
            let j = coding.decode(&s.p_out);
            writeln!(csv, "{},{:.9},{:.9}", t + 1, j[0], j[1]).unwrap();
        }
        fs::write(sub.join("joints.csv"), csv)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

/// Writes the files shared by `entrain` and `ers`.
fn write_run(dir: &Path, run: &ErsRun, stream: &ObservationStream) -> CmdResult {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.csv"), trace_csv(run))?;
    fs::write(dir.join("inferred.f32"), inferred_sidecar(run))?;
    fs::write(dir.join("predictions.f32"), predictions_sidecar(run))?;
    let c = &stream.coding;
    let mut csv = String::from("t,true_left,true_right,pred_left,pred_right\n");
    for (t, p) in run
        .predictions
        .iter()
        .enumerate()
        .take(stream.len().saturating_sub(1))
    {
        let truth = stream.joints[t + 1];
        let j = c.decode(&p.1);
        writeln!(
            csv,
            "{},{:.9},{:.9},{:.9},{:.9}",
            t + 1,
            truth[0],
            truth[1],
            j[0],
            j[1]
        )
        .unwrap();
    }
    fs::write(dir.join("joints.csv"), csv)?;
    Ok(())
}

fn run_stream(ckpt: &Path, stream: &Path, cfg: &ErsConfig, out: &Option<PathBuf>) -> CmdResult {
    let params = load_params(ckpt)?;
    let s = load_stream(stream)?;
    let run = run_ers(&params, &stream_observations(&s), cfg, None)?;
    let dir = out_dir(out);
    write_run(&dir, &run, &s)?;
    let last = run.trace.last().map_or(0.0, |r| r.loss_final);
    println!(
        "{} steps, {} mode, final window loss {:.6}; wrote {}",
        s.len(),
        cfg.modality.name(),
        last,
        dir.display()
    );
    Ok(())
}

fn cmd_entrain(a: &EntrainArgs) -> CmdResult {
    let cfg = ErsConfig {
        iterations: 0,
        ..ErsConfig::new(a.modality.into())
    };
    run_stream(&a.ckpt, &a.stream, &cfg, &a.out)
}

fn cmd_ers(a: &ErsArgs) -> CmdResult {
    let mut cfg = ErsConfig::new(a.modality.into());
    cfg.window = a.window;
    cfg.iterations = a.iters;
    cfg.adam.learning_rate = a.lr;
    run_stream(&a.ckpt, &a.stream, &cfg, &a.out)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let net = NetworkConfig::preset(&a.net.preset)?;
    let opts = GradCheckOptions {
        epsilon: a.eps,
        tolerance: a.tol,
        sequences: a.sequences,
        steps: a.steps,
        mutate: None,
    };
    let report = grad_check(&net, a.seed, &opts)?;
    for t in &report.tensors {
        println!(
            "{:16} {:7} values  max rel {:.3e}  max abs {:.3e}",
            t.name, t.count, t.max_rel_error, t.max_abs_error
        );
    }
    println!(
        "{}: max relative error {:.3e} (tolerance {:.1e})",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.tolerance
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: "gradient check failed".into(),
        })
    }
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, Failure> {
    v.as_ref()
        .ok_or_else(|| usage(format!("this mode needs --{flag}")))
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let dir = out_dir(&a.out);
    fs::create_dir_all(&dir)?;
    match a.mode {
        Mode::Pca => {
            let params = load_params(need(&a.ckpt, "ckpt")?)?;
            let p = project_initial_states(&params)?;
            fs::write(dir.join("initial_pca.csv"), initial_states_csv(&p))?;
        }
        Mode::Metrics => {
            let params = load_params(need(&a.ckpt, "ckpt")?)?;
            let trace = need(&a.trace, "trace")?;
            let s = load_stream(need(&a.stream, "stream")?)?;
            let preds = read_predictions_sidecar(
                &params.config,
                &fs::read(trace.join("predictions.f32"))?,
            )?;
            let n = preds.len().min(s.len()).saturating_sub(1);
            let targets: Vec<_> = (1..=n)
                .map(|t| (s.frames[t].clone(), s.coding.encode(&s.joints[t])))
                .collect();
            let m = error_metrics(&preds[..n], &targets, &s.coding)?;
            fs::write(dir.join("metrics.csv"), metrics_csv(&m))?;
        }
        Mode::Intent => {
            let params = load_params(need(&a.ckpt, "ckpt")?)?;
            let trace = need(&a.trace, "trace")?;
            let s = load_stream(need(&a.stream, "stream")?)?;
            let inferred =
                read_inferred_sidecar(&params.config, &fs::read(trace.join("inferred.f32"))?)?;
            if inferred.len() != s.len() {
                return Err(usage("trace and stream differ in length"));
            }
            let r = classify_inferred_intent(&inferred, &params.initial, &s.labels, a.burn_in)?;
            fs::write(dir.join("intent.csv"), intent_csv(&r, &s.labels))?;
            println!("accuracy {:.4} after {} steps", r.accuracy, a.burn_in);
        }
        Mode::Activations => {
            let params = load_params(need(&a.ckpt, "ckpt")?)?;
            let trace = need(&a.trace, "trace")?;
            let s = load_stream(need(&a.stream, "stream")?)?;
            let inferred =
                read_inferred_sidecar(&params.config, &fs::read(trace.join("inferred.f32"))?)?;
            let coding = coding_for(&params.config)?;
            let (frame, code) = home_input(&coding);
            let mut train = Vec::new();
            let mut train_labels = Vec::new();
            for i in 0..params.initial.len() {
                let init = params.initial_state(i)?;
                let r = generate_closed_loop(&params, &init, (&frame, &code), a.steps)?;
                for (t, st) in r.steps.iter().enumerate() {
                    train.push(st.state.hidden());
                    train_labels.push(format!("train:{i}:{}", t + 1));
                }
            }
            let test_labels: Vec<String> = s
                .labels
                .iter()
                .enumerate()
                .map(|(t, l)| format!("test:{l}:{t}"))
                .collect();
            let basis = match a.basis {
                BasisArg::Train => PcaBasis::Train,
                BasisArg::Joint => PcaBasis::Joint,
            };
            for l in [Layer::VS, Layer::PS, Layer::PF] {
                let rows =
                    |hs: &[HiddenState]| hs.iter().map(|h| h.layer(l).to_vec()).collect::<Vec<_>>();
                let r = activation_pca(&rows(&train), &rows(&inferred), basis, 2)?;
                let labels = [train_labels.clone(), test_labels.clone()].concat();
                let points = [r.train, r.test].concat();
                fs::write(
                    dir.join(format!("activations_{}.csv", l.name())),
                    projection_csv(&labels, &points),
                )?;
            }
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Stream(a) => cmd_stream(a),
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Entrain(a) => cmd_entrain(a),
        Command::Ers(a) => cmd_ers(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Analyze(a) => cmd_analyze(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pvmdnn: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
