use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gmsrf_core::checkpoint;
use gmsrf_core::data::synth::{generate_center, CenterSpec};
use gmsrf_core::data::{load_folder, save_folder, split, Dataset, SplitTag};
use gmsrf_core::engine::{self, TrainConfig, TrainOutputs};
use gmsrf_core::gradsuite::{self, Scope};

/// Environment variable that takes precedence over `--threads`.
const THREADS_ENV: &str = "GMSRF_THREADS";

#[derive(Parser)]
#[command(name = "gmsrf", version, about = "Multi-scale residual fusion segmentation on the CPU")]
struct Cli {
    /// Worker threads for data generation and augmentation (GMSRF_THREADS wins).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic center into images/, masks/ and dataset.json.
    GenerateData {
        /// CenterSpec JSON file.
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// Use a built-in center instead of a spec file.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// train,val,test fractions recorded in the manifest.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
        /// Split seed; defaults to the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes the final checkpoint to --out.
    Train {
        /// TrainConfig JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Per-image metrics of a checkpoint on a dataset folder.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output stem; `.csv` and `.json` are written next to it.
        #[arg(long)]
        report: PathBuf,
        /// Restrict to one split of the manifest.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Segment one PPM image into a PGM mask.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source vs unseen table for two models trained on two centers.
    Report {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        data_a: PathBuf,
        #[arg(long)]
        data_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: ScopeArg,
        #[arg(long, hide = true)]
        corrupt_conv_grad: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Model,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
            Ok(Some(n))
        }
        Err(_) => Ok(flag),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad split {s:?}"))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("split needs three comma-separated fractions, got {s:?}"),
    }
}

fn concat(parts: [Dataset; 3]) -> Dataset {
    Dataset::new(parts.into_iter().flat_map(|d| d.samples).collect())
}

fn generate(spec: CenterSpec, n: usize, out: &Path, size: usize, ratios: &str, seed: Option<u64>) -> Result<()> {
    let ds = generate_center(&spec, n, size)?;
    let (tr, va, te) = split(&ds, parse_ratios(ratios)?, seed.unwrap_or(spec.seed))?;
    println!("center {}: {} samples ({}/{}/{})", spec.center_id, n, tr.len(), va.len(), te.len());
    save_folder(&concat([tr, va, te]), out)?;
    Ok(())
}

fn train(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    epochs: Option<usize>,
    max_steps: Option<usize>,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.max_steps = max_steps.or(cfg.max_steps);
    let ds = load_folder(data_dir, cfg.model.input_size)?;
    let (tr, va) = if ds.samples.iter().any(|s| s.split == SplitTag::Train) {
        (ds.subset(SplitTag::Train), ds.subset(SplitTag::Val))
    } else {
        let (tr, va, _) = split(&ds, (0.8, 0.1, 0.1), cfg.seed)?;
        (tr, va)
    };
    println!("training on {} samples, validating on {}", tr.len(), va.len());
    let outputs = TrainOutputs {
        best: Some(out.with_extension("best.ckpt")),
        last: Some(out.to_path_buf()),
        log: Some(out.with_extension("log.csv")),
    };
    let t0 = Instant::now();
    let r = engine::train(&cfg, &tr, &va, &outputs)?;
    for row in &r.log {
        let val = row.val_dsc.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("epoch {:>3}  steps {:>5}  loss {:.4}  val dsc {val}", row.epoch, row.steps, row.train_loss);
    }
    println!("wrote {} in {:.1}s", out.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

fn eval(ckpt: &Path, data_dir: &Path, report: &Path, only: Option<SplitArg>) -> Result<()> {
    let size = checkpoint::read_config(ckpt)?.input_size;
    let mut ds = load_folder(data_dir, size)?;
    if let Some(s) = only {
        ds = ds.subset(match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Val => SplitTag::Val,
            SplitArg::Test => SplitTag::Test,
        });
    }
    let r = engine::evaluate(ckpt, &ds, report)?;
    let m = r.means;
    println!(
        "{} images: dsc {:.4}  miou {:.4}  recall {:.4}  precision {:.4}",
        r.rows.len(),
        m.dsc,
        m.miou,
        m.recall,
        m.precision
    );
    Ok(())
}

fn gradcheck(scope: ScopeArg, corrupt: bool) -> Result<bool> {
    let scope = match scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Model => Scope::Model,
    };
    gmsrf_core::tensor::kernels::set_conv_grad_corruption(corrupt);
    let t0 = Instant::now();
    let results = gradsuite::run(scope)?;
    let mut ok = true;
    for r in &results {
        let tag = if r.passed() { "ok  " } else { "FAIL" };
        ok &= r.passed();
        println!("{tag} {:<28} {:.3e}  (tol {:e}, {} coords)", r.name, r.max_rel_error, r.tolerance, r.checked);
    }
    println!("{} targets in {:.1}s", results.len(), t0.elapsed().as_secs_f64());
    Ok(ok)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenerateData { spec, preset, n, out, size, split, seed } => {
            let spec = match (spec, preset) {
                (Some(p), _) => read_json(&p)?,
                (None, Some(Preset::A)) => CenterSpec::preset_a(),
                (None, Some(Preset::B)) => CenterSpec::preset_b(),
                (None, None) => unreachable!("clap requires --spec or --preset"),
            };
            generate(spec, n, &out, size, &split, seed)?;
        }
        Command::Train { config, data, out, epochs, max_steps } => {
            train(config.as_deref(), &data, &out, epochs, max_steps)?;
        }
        Command::Eval { ckpt, data, report, split } => eval(&ckpt, &data, &report, split)?,
        Command::Predict { ckpt, image, out } => {
            engine::predict(&ckpt, &image, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Report { ckpt_a, ckpt_b, data_a, data_b, out } => {
            let r = engine::report_files(&ckpt_a, &ckpt_b, &data_a, &data_b, &out)?;
            print!("{}", r.to_csv());
        }
        Command::Gradcheck { scope, corrupt_conv_grad } => {
            if !gradcheck(scope, corrupt_conv_grad)? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
