//! Command-line front end. [`run`] returns the process exit code:
//! 0 on success, 1 when a check fails or a command errors at run time,
//! 2 for usage and configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::autodiff::Graph;
use crate::config::{parse_config, write_echo, SEED_ENV};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, Variant};
use crate::params::{Ctx, Mode};
use crate::synth::{generate_dataset, Dataset};
use crate::train::{evaluate, sweep_csv, sweep_theta, train, write_report, RunConfig};
use crate::verify::{self, grad, Scale};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "orient-attn",
    version,
    about = "Learnable-orientation line attention: training, checks and exports"
)]
pub struct Cli {
    /// JSON run config; `{}` gives every default.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `model.variant=C`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory; must not exist or be empty. Defaults to a
    /// timestamped directory under `runs/`.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1, global = true)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every gradient.
    Gradcheck,
    /// Generate the synthetic dataset described by the config.
    GenData,
    /// LOSO training; writes metrics, summary and checkpoints.
    Train {
        /// Dataset directory from `gen-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Subjects to score, comma separated; all if absent.
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<usize>,
    },
    /// Accuracy of θ-frozen models over a grid of orientations.
    SweepTheta {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.01,0.7853981633974483,1.5707963267948966,2.356194490192345"
        )]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Parameter counts per group for all four variants.
    ParamCount,
    /// Attention vectors of one sample as CSV.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Run the acceptance checks and report each.
    Verify {
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::SweepTheta { .. } => "sweep-theta",
            Command::ParamCount => "param-count",
            Command::DumpAttn { .. } => "dump-attn",
            Command::Verify { .. } => "verify",
        }
    }
}

enum Failure {
    Usage(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Failed(other.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            EXIT_USAGE
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            EXIT_FAILED
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Gradcheck => gradcheck(),
        Command::GenData => gen_data(cli),
        Command::Train { data } => train_cmd(cli, data.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            subjects,
        } => eval(checkpoint, data, subjects),
        Command::SweepTheta { grid, seeds, data } => sweep(cli, grid, seeds, data.as_deref()),
        Command::ParamCount => param_count(cli),
        Command::DumpAttn {
            checkpoint,
            data,
            sample,
        } => dump_attn(cli, checkpoint, data, *sample),
        Command::Verify { epochs, seeds } => verify_cmd(cli, *epochs, seeds),
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage(format!("`{}` needs --config <FILE>", cli.command.name())))?;
    if !path.is_file() {
        return Err(Failure::Usage(format!(
            "config file {} not found",
            path.display()
        )));
    }
    let env = std::env::var(SEED_ENV).ok();
    parse_config(path, &cli.overrides, env.as_deref()).map_err(|e| match e {
        Error::Io { .. } | Error::Config { .. } | Error::Json(_) => Failure::Usage(e.to_string()),
        other => Failure::Failed(other.to_string()),
    })
}

/// Creates the output directory: `--out`, else the config's `output_dir`,
/// else `runs/<command>-<UTC timestamp>`. An existing directory must be empty.
fn output_dir(cli: &Cli, configured: Option<&str>) -> std::result::Result<PathBuf, Failure> {
    let dir = match (&cli.out, configured) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            PathBuf::from("runs").join(format!("{}-{stamp}", cli.command.name()))
        }
    };
    if dir.exists() {
        let empty = dir.is_dir()
            && std::fs::read_dir(&dir)
                .map(|mut d| d.next().is_none())
                .unwrap_or(false);
        if !empty {
            return Err(Failure::Usage(format!(
                "output directory {} already exists and is not empty",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Failed(Error::io(&dir, e).to_string()))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gradcheck() -> CmdResult {
    let cases = grad::run_suite()?;
    print!("{}", grad::format_table(&cases));
    let failed: Vec<&str> = cases
        .iter()
        .filter(|c| !c.passes())
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", cases.len());
        Ok(())
    } else {
        Err(Failure::Failed(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn gen_data(cli: &Cli) -> CmdResult {
    let run = load_config(cli)?;
    let dir = output_dir(cli, run.output_dir.as_deref())?;
    let data = generate_dataset(&run.data)?;
    data.save(&dir)?;
    write_echo(&run, &dir)?;
    println!(
        "{} samples from {} subjects written to {}",
        data.samples.len(),
        data.subjects().len(),
        dir.display()
    );
    Ok(())
}

fn dataset_for(run: &mut RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(d) => {
            let ds = Dataset::load(d)?;
            run.data = ds.spec.clone();
            run.validate()?;
            Ok(ds)
        }
        None => generate_dataset(&run.data),
    }
}

fn train_cmd(cli: &Cli, data: Option<&Path>) -> CmdResult {
    let mut run = load_config(cli)?;
    let dataset = dataset_for(&mut run, data)?;
    let dir = output_dir(cli, run.output_dir.as_deref())?;
    write_echo(&run, &dir)?;
    let report = train(&run, &dataset, cli.jobs)?;
    write_report(&report, &dir)?;
    let s = &report.summary;
    println!(
        "variant {} seed {}: mean fold accuracy {:.4}, macro-F1 {:.4}, overall accuracy {:.4} ({} folds, {} diverged)",
        s.variant, s.seed, s.mean_fold_accuracy, s.mean_fold_macro_f1, s.overall_accuracy, s.completed_folds, s.diverged_folds
    );
    if let Some(t) = &s.theta {
        println!("final θ mean {:.4} ± {:.4} rad", t.mean, t.std);
    }
    println!("written to {}", dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, subjects: &[usize]) -> CmdResult {
    let model = Model::load(checkpoint)?;
    let dataset = Dataset::load(data)?;
    let subjects = if subjects.is_empty() {
        dataset.subjects()
    } else {
        subjects.to_vec()
    };
    let idx = dataset.indices_of(&subjects);
    if idx.is_empty() {
        return Err(Failure::Usage(format!(
            "no samples for subjects {subjects:?}"
        )));
    }
    let e = evaluate(&model, &dataset, &idx, 32)?;
    let json = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "subjects": subjects,
        "loss": e.loss,
        "metrics": e.metrics,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&json).map_err(Error::from)?
    );
    Ok(())
}

fn sweep(cli: &Cli, grid: &[f64], seeds: &[u64], data: Option<&Path>) -> CmdResult {
    let mut run = load_config(cli)?;
    let dataset = dataset_for(&mut run, data)?;
    let dir = output_dir(cli, run.output_dir.as_deref())?;
    write_echo(&run, &dir)?;
    let rows = sweep_theta(&run, &dataset, grid, seeds, cli.jobs)?;
    let csv = sweep_csv(&rows);
    write_file(&dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn param_count(cli: &Cli) -> CmdResult {
    let base = match &cli.config {
        Some(_) => load_config(cli)?.model,
        None => ModelConfig::default(),
    };
    let mut out = std::io::stdout().lock();
    let groups = crate::params::ParamGroup::ALL;
    let mut header = format!("{:<8}", "variant");
    for g in groups {
        header.push_str(&format!(" {:>12}", g.name()));
    }
    header.push_str(&format!(
        " {:>12} {:>12}  bottleneck per block",
        "trainable", "stored"
    ));
    let _ = writeln!(out, "{header}");
    for v in Variant::ALL {
        let counts = Model::build(&ModelConfig {
            variant: v,
            ..base.clone()
        })?
        .param_count();
        let mut line = format!("{:<8}", v.to_string());
        for g in groups {
            line.push_str(&format!(" {:>12}", counts.trainable[&g]));
        }
        line.push_str(&format!(
            " {:>12} {:>12}  {:?}",
            counts.total_trainable, counts.total_stored, counts.bottleneck_per_block
        ));
        let _ = writeln!(out, "{line}");
    }
    Ok(())
}

/// Header of the attention dump.
pub const ATTN_HEADER: &str = "block_index,channel,line_index,value";

/// Attention vectors of one sample. For an oriented block blending two line
/// steps, the branch with the larger blend weight is written.
pub fn attention_csv(
    model: &Model,
    x: &crate::tensor::Tensor,
    au: Option<&crate::tensor::Tensor>,
) -> Result<String> {
    let mut g = Graph::new();
    let bound = model.store.bind_constants(&mut g);
    let xi = g.constant(x.clone());
    let ai = au.map(|a| g.constant(a.clone()));
    let mut ctx = Ctx::new(&mut g, &model.store, &bound, Mode::Eval);
    let out = model.forward_with(&mut ctx, xi, ai, ForwardOptions::default())?;
    let thetas: Vec<f64> = out.thetas.iter().map(|&t| g.value(t).data()[0]).collect();

    let mut csv = String::from(ATTN_HEADER);
    csv.push('\n');
    for (b, att) in out.attention.iter().enumerate() {
        let pick = if att.vectors.len() == 2 {
            let theta = match &model.blocks[b].attention {
                crate::model::Attention::Oriented { theta, .. } => thetas[*theta],
                crate::model::Attention::Vertical(_) => std::f64::consts::FRAC_PI_2,
            };
            let s = crate::orient::cot_magnitude(theta);
            usize::from(s - s.floor() >= 0.5)
        } else {
            0
        };
        let v = g.value(att.vectors[pick].1);
        let [_, c, _, l] = v.dims4()?;
        for ch in 0..c {
            for j in 0..l {
                csv.push_str(&format!("{b},{ch},{j},{}\n", v.data()[ch * l + j]));
            }
        }
    }
    Ok(csv)
}

fn dump_attn(cli: &Cli, checkpoint: &Path, data: &Path, sample: usize) -> CmdResult {
    let model = Model::load(checkpoint)?;
    let dataset = Dataset::load(data)?;
    if sample >= dataset.samples.len() {
        return Err(Failure::Usage(format!(
            "sample {sample} out of range, dataset has {}",
            dataset.samples.len()
        )));
    }
    let (x, au, _) = dataset.batch(&[sample])?;
    let csv = attention_csv(&model, &x, model.config.use_au.then_some(&au))?;
    let dir = output_dir(cli, None)?;
    let path = dir.join(format!("attention_sample{sample}.csv"));
    write_file(&path, &csv)?;
    println!(
        "{} rows written to {}",
        csv.lines().count() - 1,
        path.display()
    );
    Ok(())
}

fn verify_cmd(cli: &Cli, epochs: usize, seeds: &[u64]) -> CmdResult {
    let scale = Scale {
        epochs,
        seeds: seeds.to_vec(),
        jobs: cli.jobs,
        ..Scale::default()
    };
    let dir = output_dir(cli, None)?;
    let results = verify::run_all(&scale, &dir, |r| println!("{}", r.line()));
    let json = serde_json::to_string_pretty(&results).map_err(Error::from)?;
    write_file(&dir.join("verify.json"), &(json + "\n"))?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({})", r.id, r.name))
        .collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
        Ok(())
    } else {
        Err(Failure::Failed(format!(
            "failed criteria: {}",
            failed.join(", ")
        )))
    }
}
