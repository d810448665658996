use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vtfpar_core::config::CONFIG_FILE;
use vtfpar_core::data::{generate_to_disk, load_dataset, Split, MANIFEST_FILE};
use vtfpar_core::text::{split_expand, AttributeSchema};
use vtfpar_core::train::{evaluate, train};
use vtfpar_core::verify::{run_gradcheck, GradcheckConfig};
use vtfpar_core::{Dataset, Error, ErrorKind, OpKind, Result, RunConfig, SyntheticSpec, VtfModel};

const CHECKPOINT_FILE: &str = "model.vtfpar";
const LOG_FILE: &str = "train_log.tsv";

#[derive(Parser)]
#[command(name = "vtfpar", version, about = "Visual-text fusion for video pedestrian attribute recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tracklet dataset on disk.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint, config and log.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Train and score once per frame count.
    AblateFrames(AblateArgs),
    /// Check every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print raw label, expanded phrase and sentence for every class.
    DumpPrompts(DumpArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Attribute schema (TOML); the built-in 43-class schema otherwise.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    tracklets: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    occlusion: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    /// Side in pixels of the tile each class pattern repeats over.
    #[arg(long)]
    period: Option<usize>,
    /// Fraction of tracklets in the training split.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prototype_seed: Option<u64>,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML with [vision], [text], [fusion], [train]).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Frames sampled per tracklet.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Replace the fusion transformer with a per-token linear layer.
    #[arg(long)]
    no_fusion: bool,
    /// Train the encoders too.
    #[arg(long)]
    unfreeze_encoders: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let t = &mut run.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.frames = self.frames.unwrap_or(t.frames);
        t.seed = self.seed.unwrap_or(t.seed);
        t.lr = self.lr.unwrap_or(t.lr);
        t.weight_decay = self.weight_decay.unwrap_or(t.weight_decay);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.max_steps = self.max_steps.or(t.max_steps);
        t.freeze_encoders &= !self.unfreeze_encoders;
        run.fusion.no_fusion |= self.no_fusion;
        if run.train.lr.is_nan() || run.train.lr <= 0.0 {
            return Err(Error::Usage(format!("learning rate must be positive, got {}", run.train.lr)));
        }
        run.train.validate()?;
        run.model().validate()?;
        Ok(run)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or its manifest.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Also write a checkpoint every k epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Write the freshly initialised model without training.
    #[arg(long)]
    init_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Run configuration; defaults to the config.toml next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    frames: Option<usize>,
    /// Report path prefix; `.tsv` and `.toml` are appended.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,6")]
    frame_counts: Vec<usize>,
    #[command(flatten)]
    run: RunArgs,
    /// Summary TSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Parameter coordinates differenced in the full-model check.
    #[arg(long, default_value_t = 600)]
    coordinates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    schema: Option<PathBuf>,
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_schema(path: Option<&Path>) -> Result<AttributeSchema> {
    path.map_or_else(|| Ok(AttributeSchema::default_mars()), AttributeSchema::load)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        tracklets: args.tracklets.unwrap_or(d.tracklets),
        frames: args.frames.unwrap_or(d.frames),
        height: args.height.unwrap_or(d.height),
        width: args.width.unwrap_or(d.width),
        noise: args.noise.unwrap_or(d.noise),
        occlusion: args.occlusion.unwrap_or(d.occlusion),
        amplitude: args.amplitude.unwrap_or(d.amplitude),
        period: args.period.unwrap_or(d.period),
        train_fraction: args.split.unwrap_or(d.train_fraction),
        seed: args.seed.unwrap_or(d.seed),
        prototype_seed: args.prototype_seed.unwrap_or(d.prototype_seed),
    };
    spec.validate()?;
    let schema = load_schema(args.schema.as_deref())?;
    let manifest = generate_to_disk(&spec, &schema, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn fit(data: &Dataset, run: &RunConfig, mut on_epoch: impl FnMut(usize, &VtfModel<f32>) -> Result<()>) -> Result<(VtfModel<f32>, String)> {
    let mut model = VtfModel::<f32>::new(run.model(), data.schema.clone(), run.train.seed)?;
    let log = train(&mut model, &data.train, Some(&data.test), &run.train, &mut on_epoch)?;
    Ok((model, log.to_tsv()))
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let run = args.run.resolve()?;
    if args.checkpoint_every == Some(0) {
        return Err(Error::Usage("--checkpoint-every must be at least 1".into()));
    }
    let data = load_dataset(&manifest_path(&args.data))?;
    create_dir(&args.out)?;
    run.save(&args.out.join(CONFIG_FILE))?;
    let checkpoint = args.out.join(CHECKPOINT_FILE);
    if args.init_only {
        VtfModel::<f32>::new(run.model(), data.schema.clone(), run.train.seed)?.save(&checkpoint)?;
        println!("{}", checkpoint.display());
        return Ok(());
    }
    let start = Instant::now();
    let (model, log) = fit(&data, &run, |epoch, model| match args.checkpoint_every {
        Some(k) if epoch % k == 0 => model.save(&args.out.join(format!("epoch_{epoch:03}.vtfpar"))),
        _ => Ok(()),
    })?;
    model.save(&checkpoint)?;
    write(&args.out.join(LOG_FILE), &log)?;
    print!("{log}");
    eprintln!("trained in {:.1}s; checkpoint {}", start.elapsed().as_secs_f64(), checkpoint.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let config_path = args.config.clone().unwrap_or_else(|| {
        args.checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
    });
    let run = RunConfig::load(&config_path)?;
    let data = load_dataset(&manifest_path(&args.data))?;
    let mut model = VtfModel::<f32>::new(run.model(), data.schema.clone(), 0)?;
    model.load_params(&args.checkpoint)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let frames = args.frames.unwrap_or(run.train.frames);
    if frames == 0 {
        return Err(Error::Usage("--frames must be at least 1".into()));
    }
    let report = evaluate(&model, data.split(split), frames)?;
    let prefix = args.out.clone().unwrap_or_else(|| {
        args.checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval_{}", split.as_str()))
    });
    let tsv = report.to_tsv();
    write(&prefix.with_extension("tsv"), &tsv)?;
    write(&prefix.with_extension("toml"), &report.to_toml())?;
    print!("{tsv}");
    Ok(())
}

fn ablate_cmd(args: &AblateArgs) -> Result<()> {
    if args.frame_counts.is_empty() || args.frame_counts.contains(&0) {
        return Err(Error::Usage("frame counts must be positive".into()));
    }
    let base = args.run.resolve()?;
    let data = load_dataset(&manifest_path(&args.data))?;
    let mut out = String::from("frames\tprecision\trecall\tf1\n");
    print!("{out}");
    for &frames in &args.frame_counts {
        let mut run = base;
        run.train.frames = frames;
        let (model, _) = fit(&data, &run, |_, _| Ok(()))?;
        let r = evaluate(&model, &data.test, frames)?;
        let row = format!("{frames}\t{:.4}\t{:.4}\t{:.4}\n", r.macro_precision, r.macro_recall, r.macro_f1);
        print!("{row}");
        out.push_str(&row);
    }
    if let Some(path) = &args.out {
        write(path, &out)?;
    }
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<()> {
    let fault = match &args.corrupt_op {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Usage(format!("unknown op kind {name:?}")))?),
        None => None,
    };
    let cfg = GradcheckConfig {
        trials: args.trials,
        model_coordinates: args.coordinates,
        seed: args.seed,
        fault,
    };
    if cfg.trials == 0 {
        return Err(Error::Usage("--trials must be at least 1".into()));
    }
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.to_tsv());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        Err(Error::Verification(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn dump_prompts(args: &DumpArgs) -> Result<()> {
    let schema = load_schema(args.schema.as_deref())?;
    let mut out = String::new();
    for (_, class) in schema.classes() {
        let phrase = split_expand(&class.raw)?;
        let sentence = schema.template().apply(&phrase);
        out.push_str(&format!("{} → {phrase} → {sentence}\n", class.raw));
    }
    print!("{out}");
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("VTFPAR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("VTFPAR_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size the worker pool: {e}")))
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AblateFrames(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::DumpPrompts(a) => dump_prompts(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
