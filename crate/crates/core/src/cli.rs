//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::augment::{augment_pipeline, SynthConfig};
use crate::bench::{run_bench, BenchConfig};
use crate::error::{Error, Result};
use crate::io::{downsample_record, generate_synthetic_dataset, Dataset, Split, VolumeRecord};
use crate::mesh::{DeviceMesh, Layout, MeshShape, DEFAULT_TIMEOUT};
use crate::tensor::{DType, Real};
use crate::training::{
    batch_quantum, evaluate, latest_checkpoint, load_checkpoint, restore, train_loop, Adam, DiceClasses, LossConfig,
    Optimizer, SgdMomentum, TrainConfig, Trainer,
};
use crate::unet::{build, init_params, recipe_for_resolution, LayerGraph, ParamStore, UNetConfig};

#[derive(Parser, Debug)]
#[command(name = "halomesh", version, about = "Spatially partitioned 3D U-Net on a simulated device mesh")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic liver/tumour dataset.
    SynthData(SynthDataArgs),
    /// Train a U-Net.
    Train(TrainArgs),
    /// Score a trained model on a dataset split.
    Eval(EvalArgs),
    /// Write a tumour-augmented copy of a dataset.
    Augment(AugmentArgs),
    /// Time training steps per layer and phase.
    Bench(BenchArgs),
    /// Run the equivalence and gradient checks.
    Verify(VerifyArgs),
}

fn parse_mesh(s: &str) -> std::result::Result<MeshShape, String> {
    MeshShape::parse(s).map_err(|e| e.to_string())
}

fn parse_layout(s: &str) -> std::result::Result<Layout, String> {
    Layout::parse(s).map_err(|e| e.to_string())
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> std::result::Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("`{s}` is not MIN,MAX"))?;
    let p = |v: &str| v.trim().parse::<T>().map_err(|_| format!("bad number `{v}`"));
    Ok((p(a)?, p(b)?))
}

#[derive(Args, Debug, Clone)]
pub struct MeshArgs {
    /// Mesh axes, e.g. `b=2,x=2,y=2,z=2`.
    #[arg(long, default_value = "x=1", value_parser = parse_mesh)]
    pub mesh: MeshShape,
    /// Tensor dimension to mesh axis map, e.g. `batch=b,dimx=x`. Defaults to
    /// mapping axes b, x, y, z onto batch, dimx, dimy, dimz.
    #[arg(long, value_parser = parse_layout)]
    pub layout: Option<Layout>,
    /// Seconds a worker waits on a message before reporting a deadlock.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT.as_secs())]
    pub timeout: u64,
}

impl MeshArgs {
    fn layout(&self) -> Layout {
        self.layout.clone().unwrap_or_else(|| Layout::conventional(&self.mesh))
    }

    fn create(&self) -> Result<DeviceMesh> {
        DeviceMesh::new(self.mesh.clone(), Duration::from_secs(self.timeout.max(1)))
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Filter multiplier applied to the resolution recipe.
    #[arg(long, default_value_t = 0.03125)]
    pub scale: f64,
    /// Explicit encoder filters, e.g. `8,16`, instead of the recipe.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
    #[arg(long, default_value_t = 4)]
    pub convs_per_block: usize,
    /// Model description in TOML; overrides the other model flags.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Print the layer table and exit.
    #[arg(long)]
    pub print_graph: bool,
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
}

impl ModelArgs {
    fn config(&self, extent: usize) -> Result<UNetConfig> {
        if let Some(p) = &self.model_config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            return UNetConfig::from_toml(&text);
        }
        let mut cfg = match &self.blocks {
            Some(b) => UNetConfig::new(extent, b.clone()),
            None => recipe_for_resolution(extent, self.scale)?,
        };
        cfg.convs_per_block = self.convs_per_block;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub extent: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    Sgd,
    Adam,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input side; must match the data (after `--downsample`).
    #[arg(long)]
    pub extent: Option<usize>,
    #[arg(long)]
    pub data: PathBuf,
    /// Train and validate on half-resolution copies of the records.
    #[arg(long)]
    pub downsample: bool,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Global batch; defaults to the size of the batch mesh axis.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0.003)]
    pub lr: f64,
    /// Momentum of `sgd`; ignored by `adam`.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Sgd)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "foreground")]
    pub dice_classes: DiceClasses,
    /// Apply tumour synthesis to training samples on the fly.
    #[arg(long)]
    pub augment: bool,
    #[arg(long, default_value_t = 0.5)]
    pub augment_prob: f64,
    /// Blur of synthesized tumours; 0 keeps their edges sharp.
    #[arg(long, default_value_t = 1.5)]
    pub augment_sigma: f64,
    #[arg(long, default_value_t = 50)]
    pub checkpoint_every: usize,
    /// Run directory for the config echo, metrics and checkpoints.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint directory; defaults to the latest one in the run.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub downsample: bool,
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "1,3", value_parser = parse_pair::<usize>)]
    pub n_tumors: (usize, usize),
    #[arg(long, default_value = "1.5,4.0", value_parser = parse_pair::<f64>)]
    pub radius: (f64, f64),
    #[arg(long, default_value_t = 1.5)]
    pub sigma: f64,
    #[arg(long)]
    pub no_blur: bool,
    #[arg(long, default_value_t = 0.5)]
    pub default_delta: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 32)]
    pub extent: usize,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the `layer,phase,wall_ms,bytes` table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run_from<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a parsed command; `Ok(false)` reports failed checks.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => match a.model.dtype {
            DType::F64 => train::<f64>(a),
            _ => train::<f32>(a),
        },
        Command::Eval(a) => match a.dtype {
            DType::F64 => eval::<f64>(a),
            _ => eval::<f32>(a),
        },
        Command::Augment(a) => augment(a),
        Command::Bench(a) => match a.model.dtype {
            DType::F64 => bench::<f64>(a),
            _ => bench::<f32>(a),
        },
        Command::Verify(a) => verify(a),
    }
}

fn synth_data(a: SynthDataArgs) -> Result<bool> {
    let ds = generate_synthetic_dataset(&a.out, a.n, a.extent, a.seed)?;
    println!(
        "wrote {} train + {} val records of {}^3 to {} (seed {})",
        ds.ids(Split::Train).len(),
        ds.ids(Split::Val).len(),
        a.extent,
        a.out.display(),
        a.seed
    );
    Ok(true)
}

fn load_records(data: &Path, split: Split, downsample: bool) -> Result<Vec<VolumeRecord>> {
    let ds = Dataset::open(data)?;
    let recs = ds.load_split(split)?;
    if downsample {
        recs.iter().map(downsample_record).collect()
    } else {
        Ok(recs)
    }
}

fn record_extent(recs: &[VolumeRecord]) -> Result<usize> {
    let first = recs
        .first()
        .ok_or_else(|| Error::Config("dataset split is empty".into()))?;
    let s = first.image.shape();
    if s[0] != s[1] || s[1] != s[2] {
        return Err(Error::Config(format!("records must be cubic, found {s:?}")));
    }
    Ok(s[0])
}

fn graph_for(mesh: &MeshArgs, cfg: &UNetConfig) -> Result<Arc<LayerGraph>> {
    Ok(Arc::new(build(cfg, Arc::new(mesh.mesh.clone()), &mesh.layout())?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train<T: Real>(a: TrainArgs) -> Result<bool> {
    let train_recs = load_records(&a.data, Split::Train, a.downsample)?;
    let val_recs = load_records(&a.data, Split::Val, a.downsample)?;
    let extent = record_extent(&train_recs)?;
    if let Some(e) = a.extent {
        if e != extent {
            return Err(Error::Config(format!("--extent {e} but the records are {extent}^3")));
        }
    }
    let model = a.model.config(extent)?;
    let graph = graph_for(&a.mesh, &model)?;
    let batch = a.batch.unwrap_or_else(|| batch_quantum(&graph));
    if a.model.print_graph {
        print!("{}", graph.describe(batch, T::DTYPE)?);
        return Ok(true);
    }
    let loss = LossConfig {
        dice_classes: a.dice_classes,
        ..LossConfig::default()
    };
    let mut cfg = TrainConfig {
        steps: a.steps,
        batch,
        lr: a.lr,
        momentum: a.momentum,
        seed: a.seed,
        loss,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: Some(a.out.join("checkpoints")),
        metrics_csv: Some(a.out.join("metrics.csv")),
        ..TrainConfig::default()
    };
    if a.augment {
        let synth = SynthConfig {
            blur: a.augment_sigma != 0.0,
            blur_sigma: a.augment_sigma,
            ..SynthConfig::default()
        };
        cfg = cfg.with_augment(synth, a.augment_prob);
    }
    let mut echo = String::new();
    let _ = writeln!(echo, "# halomesh train");
    let _ = writeln!(echo, "data = {:?}", a.data.display().to_string());
    let _ = writeln!(echo, "downsample = {}", a.downsample);
    let _ = writeln!(echo, "mesh = \"{}\"", a.mesh.mesh);
    let _ = writeln!(echo, "layout = \"{}\"", a.mesh.layout());
    let _ = writeln!(echo, "dtype = \"{}\"", T::DTYPE.name());
    let _ = writeln!(echo, "scale = {}", a.model.scale);
    let _ = writeln!(echo, "steps = {}", a.steps);
    let _ = writeln!(echo, "batch = {batch}");
    let _ = writeln!(echo, "lr = {}", a.lr);
    let _ = writeln!(echo, "momentum = {}", a.momentum);
    let _ = writeln!(echo, "optimizer = \"{:?}\"", a.optimizer);
    let _ = writeln!(echo, "seed = {}", a.seed);
    let _ = writeln!(echo, "dice_classes = \"{:?}\"", a.dice_classes);
    let _ = writeln!(echo, "augment = {}", a.augment);
    let _ = writeln!(echo, "augment_prob = {}", a.augment_prob);
    let _ = writeln!(echo, "augment_sigma = {}", a.augment_sigma);
    write_file(&a.out.join("run.toml"), &echo)?;
    write_file(&a.out.join("model.toml"), &model.to_toml())?;
    print!("{echo}");

    let mesh = a.mesh.create()?;
    let params = init_params::<T>(&graph, a.seed);
    let run = Fit {
        a: &a,
        mesh: &mesh,
        graph: &graph,
        cfg: &cfg,
        train_recs,
        val_recs,
    };
    match a.optimizer {
        OptimizerKind::Sgd => run.go(params.clone(), SgdMomentum::new(a.lr, a.momentum, &params)),
        OptimizerKind::Adam => run.go(params.clone(), Adam::new(a.lr, &params)),
    }
}

struct Fit<'a> {
    a: &'a TrainArgs,
    mesh: &'a DeviceMesh,
    graph: &'a Arc<LayerGraph>,
    cfg: &'a TrainConfig,
    train_recs: Vec<VolumeRecord>,
    val_recs: Vec<VolumeRecord>,
}

impl Fit<'_> {
    fn go<T: Real, O: Optimizer<T>>(self, params: ParamStore<T>, opt: O) -> Result<bool> {
        let (a, mesh, graph, loss) = (self.a, self.mesh, self.graph, self.cfg.loss);
        let mut trainer = match latest_checkpoint(&a.out.join("checkpoints"))? {
            Some(dir) if a.resume => {
                let ckpt = load_checkpoint(&dir, &params)?;
                if ckpt.seed != a.seed {
                    return Err(Error::Config(format!(
                        "checkpoint was written with seed {}, not {}",
                        ckpt.seed, a.seed
                    )));
                }
                println!("resuming from {} (step {})", dir.display(), ckpt.step);
                restore(mesh, graph.clone(), ckpt, opt, loss)?
            }
            _ => Trainer::new(mesh, graph.clone(), params, opt, loss, 0)?,
        };
        println!("step,loss,dice_loss,ce_loss,lr,wall_ms");
        train_loop(&mut trainer, Arc::new(self.train_recs), self.cfg, |r| println!("{}", r.csv_row()))?;
        if !self.val_recs.is_empty() {
            let m = evaluate(mesh, graph, trainer.params(), &self.val_recs, self.cfg.batch, &loss)?;
            println!(
                "validation: dice_per_case {:.4} dice_global {:.4} mean_loss {:.5} ({} cases)",
                m.dice_per_case, m.dice_global, m.mean_loss, m.cases
            );
        }
        Ok(true)
    }
}

fn eval<T: Real>(a: EvalArgs) -> Result<bool> {
    let path = a.run.join("model.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let model = UNetConfig::from_toml(&text)?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        s => return Err(Error::Config(format!("unknown split `{s}`"))),
    };
    let recs = load_records(&a.data, split, a.downsample)?;
    let graph = graph_for(&a.mesh, &model)?;
    let like = init_params::<T>(&graph, 0);
    let dir = match a.checkpoint {
        Some(d) => d,
        None => latest_checkpoint(&a.run.join("checkpoints"))?
            .ok_or_else(|| Error::Config(format!("no checkpoints under {}", a.run.display())))?,
    };
    let ckpt = load_checkpoint(&dir, &like)?;
    let mesh = a.mesh.create()?;
    let m = evaluate(&mesh, &graph, &ckpt.params, &recs, batch_quantum(&graph), &LossConfig::default())?;
    println!("checkpoint = \"{}\"", dir.display());
    println!("split = \"{}\"", a.split);
    println!("dice_per_case = {:.6}", m.dice_per_case);
    println!("dice_global = {:.6}", m.dice_global);
    println!("mean_loss = {:.6}", m.mean_loss);
    Ok(true)
}

fn augment(a: AugmentArgs) -> Result<bool> {
    let src = Dataset::open(&a.input)?;
    let base = SynthConfig {
        n_tumors: a.n_tumors,
        radius: a.radius,
        blur_sigma: a.sigma,
        blur: !a.no_blur,
        seed: a.seed,
        default_delta: a.default_delta,
        ..SynthConfig::default()
    };
    base.validate()?;
    let mut out = Vec::with_capacity(src.entries().len());
    for (i, (id, split)) in src.entries().iter().enumerate() {
        let rec = src.load(id)?;
        let rec = if *split == Split::Train {
            let cfg = SynthConfig {
                seed: a.seed.wrapping_add(i as u64),
                ..base.clone()
            };
            augment_pipeline(&rec, &cfg)?
        } else {
            rec
        };
        out.push((rec, *split));
    }
    Dataset::create(&a.output, &out)?;
    println!(
        "augmented {} training records into {}",
        out.iter().filter(|(_, s)| *s == Split::Train).count(),
        a.output.display()
    );
    Ok(true)
}

fn bench<T: Real>(a: BenchArgs) -> Result<bool> {
    let model = a.model.config(a.extent)?;
    let graph = graph_for(&a.mesh, &model)?;
    let batch = a.batch.unwrap_or_else(|| batch_quantum(&graph));
    if a.model.print_graph {
        print!("{}", graph.describe(batch, T::DTYPE)?);
        return Ok(true);
    }
    let mesh = a.mesh.create()?;
    let cfg = BenchConfig {
        steps: a.steps,
        warmup: a.warmup,
        batch,
        seed: a.seed,
    };
    println!("mesh = \"{}\" layout = \"{}\" seed = {}", a.mesh.mesh, a.mesh.layout(), a.seed);
    let report = run_bench::<T>(&mesh, graph, &cfg)?;
    let csv = report.to_csv();
    match &a.csv {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    print!("{}", report.summary());
    Ok(report.bytes_match())
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let mesh = a.mesh.create()?;
    let ok = crate::verify::run_suite(&mesh, a.seeds, |c| {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    })?;
    println!("{}", if ok { "all checks passed" } else { "checks FAILED" });
    Ok(ok)
}
