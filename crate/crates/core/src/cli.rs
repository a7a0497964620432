//! Command-line front end. Every subcommand resolves a flat configuration
//! (defaults, then `--from-manifest`, then `--config`, then `--set`, then
//! dedicated flags), writes its artifacts into `--out` and finishes with a
//! `manifest.json` listing the resolved values and artifact hashes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, DType};
use crate::condition::Condition;
use crate::config::Config;
use crate::diffusion::{sample, sample_ancestral, Corruption, Guided};
use crate::error::{Error, Result};
use crate::eval::{nfe_report, BinSpec, EvalReport, RewardFn, RewardKind};
use crate::manifest::{NfeCounters, RunManifest};
use crate::nn::{Arch, ScoreNet};
use crate::npo::{mix_negative, reward_finetune, RewardTuneConfig, WeightOffsets};
use crate::oracle::GaussianMixture;
use crate::plot;
use crate::schedule::{NoiseSchedule, ScheduleKind, StepGrid};
use crate::tdft::{self_npo_train, FineTuneConfig, LossWeighting, PlanMode};
use crate::train::{train_base, BaseTrainConfig};
use crate::validate::{run_suite, SuiteConfig};

/// Golden-ratio increment used to derive per-chain seeds.
const CHAIN_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Parser)]
#[command(
    name = "selfnpo",
    version,
    about = "Self-NPO truncated diffusion fine-tuning on toy 2-D data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a class-conditional base model with condition dropout.
    TrainBase(Common),
    /// Fine-tune a copy of the base model on its own truncated generations.
    SelfNpo {
        #[command(flatten)]
        common: Common,
        /// Generate every record with the full sampler (t' = T, landing at 0).
        #[arg(long)]
        degenerate_plan: bool,
    },
    /// Fine-tune on fully simulated generations.
    BaselineFinetune(Common),
    /// Draw samples, optionally with a separate negative model.
    Sample(Common),
    /// Compare two sample files drawn with paired seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Samples scored as method A.
        #[arg(long)]
        a: PathBuf,
        /// Samples scored as method B.
        #[arg(long)]
        b: PathBuf,
        /// Run manifests to tabulate generation NFE for.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Run the oracle-based checks of the re-noising rule and the linear student.
    ValidateTheorems(Common),
    /// Produce a positive offset by a few steps of reward ascent.
    RewardFinetune(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from the resolved configuration of an earlier run.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    #[arg(long)]
    pub base_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub pos_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub neg_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Condition of the negative branch: a class index or `null`.
    #[arg(long)]
    pub neg_cond: Option<String>,
}

/// What a finished subcommand reports back to `main`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
    /// False when a validation suite ran but did not pass.
    pub passed: bool,
}

const SHARED: &[(&str, &str)] = &[
    ("seed", "0"),
    ("schedule", "cosine"),
    ("t_max", "1000"),
    ("data", "ring"),
];

const TRAIN_BASE: &[(&str, &str)] = &[
    ("iterations", "3000"),
    ("batch_size", "256"),
    ("lr", "0.001"),
    ("cond_dropout", "0.1"),
    ("eval_batch", "4096"),
    ("hidden", "128,128,128"),
    ("time_embed_dim", "32"),
    ("cond_embed_dim", "32"),
    ("dtype", "f64"),
];

const FINETUNE: &[(&str, &str)] = &[
    ("base_ckpt", ""),
    ("iterations", "1000"),
    ("batch_size", "80"),
    ("lr", "0.0001"),
    ("mode", "truncated"),
    ("k", "5"),
    ("full_k", "25"),
    ("real_data", "true"),
    ("t_prime_frac", "0.5,1.0"),
    ("t_frac", "0.1,0.6"),
    ("omega", "2"),
    ("neg_cond", "null"),
    ("corruption", "none"),
    ("clip_x0", "2"),
    ("cond_dropout", "0.1"),
    ("weighting", "snr"),
    ("dtype", "f64"),
];

const SAMPLE: &[(&str, &str)] = &[
    ("base_ckpt", ""),
    ("pos_ckpt", ""),
    ("neg_ckpt", ""),
    ("alpha", "0"),
    ("beta", "1"),
    ("omega", "2"),
    ("neg_cond", "null"),
    ("n", "2000"),
    ("k", "25"),
    ("cond", "all"),
    ("sampler", "ddim"),
    ("corruption", "none"),
    ("clip_x0", "2"),
    ("plot", "true"),
];

const EVAL: &[(&str, &str)] = &[
    ("reward", "mode-proximity"),
    ("kl_lo", "-1.6"),
    ("kl_hi", "1.6"),
    ("kl_bins", "64"),
    ("kl_eps", "1e-9"),
    ("kl_beta", "0.1"),
];

const VALIDATE: &[(&str, &str)] = &[("moment_samples", "100000"), ("linear_samples", "1000000")];

const REWARD_TUNE: &[(&str, &str)] = &[
    ("base_ckpt", ""),
    ("reward", "mode-proximity"),
    ("iterations", "20"),
    ("batch_size", "128"),
    ("lr", "0.0001"),
    ("t_frac", "0.05,0.5"),
    ("dtype", "f64"),
];

fn defaults(specific: &[(&'static str, &'static str)]) -> Config {
    let all: Vec<(&str, &str)> = SHARED.iter().chain(specific).copied().collect();
    Config::with_defaults(&all)
}

fn resolve(mut cfg: Config, common: &Common) -> Result<Config> {
    if let Some(path) = &common.from_manifest {
        let m = RunManifest::load(path)?;
        cfg.merge_known(&m.config);
    }
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    cfg.merge_overrides(common.set.iter().map(String::as_str))?;
    let flags: [(&str, Option<String>); 8] = [
        ("seed", common.seed.map(|v| v.to_string())),
        (
            "base_ckpt",
            common.base_ckpt.as_ref().map(|p| p.display().to_string()),
        ),
        (
            "pos_ckpt",
            common.pos_ckpt.as_ref().map(|p| p.display().to_string()),
        ),
        (
            "neg_ckpt",
            common.neg_ckpt.as_ref().map(|p| p.display().to_string()),
        ),
        ("alpha", common.alpha.map(|v| v.to_string())),
        ("beta", common.beta.map(|v| v.to_string())),
        ("omega", common.omega.map(|v| v.to_string())),
        ("neg_cond", common.neg_cond.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|_| {
                Error::config(format!(
                    "--{} does not apply to this command",
                    key.replace('_', "-")
                ))
            })?;
        }
    }
    Ok(cfg)
}

fn pair(cfg: &Config, key: &str) -> Result<(f64, f64)> {
    match cfg.list::<f64>(key)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::config(format!(
            "`{key}` needs two comma-separated numbers"
        ))),
    }
}

fn parse_dtype(cfg: &Config) -> Result<DType> {
    match cfg.raw("dtype")? {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        other => Err(Error::config(format!(
            "unknown dtype `{other}` (f32 | f64)"
        ))),
    }
}

fn schedule(cfg: &Config) -> Result<NoiseSchedule> {
    NoiseSchedule::new(cfg.get::<ScheduleKind>("schedule")?, cfg.get("t_max")?)
}

/// `ring`, `ring:MODES:RADIUS:STD`, or a mixture file.
fn mixture(cfg: &Config) -> Result<GaussianMixture> {
    let spec = cfg.raw("data")?;
    if spec == "ring" {
        return Ok(GaussianMixture::default_ring());
    }
    if let Some(rest) = spec.strip_prefix("ring:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Error::config(format!("bad ring spec `{spec}` (ring:MODES:RADIUS:STD)"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let modes = parts[0].parse().map_err(|_| bad())?;
        let radius = parts[1].parse().map_err(|_| bad())?;
        let std = parts[2].parse().map_err(|_| bad())?;
        return GaussianMixture::ring(modes, radius, std);
    }
    let text = fs::read_to_string(spec)
        .map_err(|e| Error::config(format!("cannot read data file {spec}: {e}")))?;
    GaussianMixture::from_text(&text)
}

fn load_required(cfg: &Config, key: &str) -> Result<ScoreNet> {
    match cfg.optional::<String>(key)? {
        Some(path) => load_ckpt(&path),
        None => Err(Error::config(format!(
            "--{} is required",
            key.replace('_', "-")
        ))),
    }
}

fn load_ckpt(path: &str) -> Result<ScoreNet> {
    let p = Path::new(path);
    if !p.exists() {
        return Err(Error::config(format!("checkpoint {path} does not exist")));
    }
    checkpoint::load_net(p)
}

fn check_net(net: &ScoreNet, schedule: &NoiseSchedule, data: &GaussianMixture) -> Result<()> {
    if net.arch().t_max != schedule.t_max() {
        return Err(Error::config(format!(
            "checkpoint trained for T={}, configuration has t_max={}",
            net.arch().t_max,
            schedule.t_max()
        )));
    }
    if net.arch().input_dim != data.dim() {
        return Err(Error::config("checkpoint and data dimensions differ"));
    }
    Ok(())
}

fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(command));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    fs::write(path, s)?;
    Ok(())
}

fn save_checkpoint(m: &mut RunManifest, path: &Path, net: &ScoreNet, dtype: DType) -> Result<()> {
    checkpoint::save_net(path, net, dtype)?;
    m.add_artifact("checkpoint", path)?;
    m.add_artifact("checkpoint_blob", &checkpoint::blob_path(path))?;
    Ok(())
}

fn finish(mut m: RunManifest, dir: &Path, passed: bool) -> Result<RunSummary> {
    let path = dir.join("manifest.json");
    m.write_atomic(&path)?;
    Ok(RunSummary {
        manifest_path: path,
        manifest: m,
        passed,
    })
}

pub fn run(cli: Cli) -> Result<RunSummary> {
    match cli.command {
        Command::TrainBase(common) => cmd_train_base(&common),
        Command::SelfNpo {
            common,
            degenerate_plan,
        } => cmd_finetune("self-npo", &common, degenerate_plan),
        Command::BaselineFinetune(common) => cmd_finetune("baseline-finetune", &common, false),
        Command::Sample(common) => cmd_sample(&common),
        Command::Eval {
            common,
            a,
            b,
            manifests,
        } => cmd_eval(&common, &a, &b, &manifests),
        Command::ValidateTheorems(common) => cmd_validate(&common),
        Command::RewardFinetune(common) => cmd_reward_finetune(&common),
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run_from<I, T>(args: I) -> Result<RunSummary>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::config(e.to_string()))?;
    run(cli)
}

fn cmd_train_base(common: &Common) -> Result<RunSummary> {
    let cfg = resolve(defaults(TRAIN_BASE), common)?;
    let sched = schedule(&cfg)?;
    let data = mixture(&cfg)?;
    let seed: u64 = cfg.get("seed")?;
    let arch = Arch {
        input_dim: data.dim(),
        hidden: cfg.list("hidden")?,
        time_embed_dim: cfg.get("time_embed_dim")?,
        cond_embed_dim: cfg.get("cond_embed_dim")?,
        num_classes: data.num_classes(),
        t_max: sched.t_max(),
    };
    let train_cfg = BaseTrainConfig {
        iterations: cfg.get("iterations")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        seed,
        cond_dropout: cfg.get("cond_dropout")?,
        eval_batch: cfg.get("eval_batch")?,
    };
    let dir = out_dir(common, "train-base")?;
    let mut m = RunManifest::new("train-base", seed, cfg.values().clone());
    let out = train_base(arch, &data, &sched, &train_cfg)?;
    if let Some(reason) = &out.divergence {
        return Err(Error::TrainingDivergence(format!(
            "{reason} after {} iterations",
            out.losses.len()
        )));
    }
    save_checkpoint(
        &mut m,
        &dir.join("model.json"),
        &out.net,
        parse_dtype(&cfg)?,
    )?;
    let losses = dir.join("losses.csv");
    write_losses(&losses, &out.losses)?;
    m.add_artifact("losses", &losses)?;
    m.metrics
        .insert("initial_eval_loss".into(), out.initial_eval_loss);
    m.metrics
        .insert("final_eval_loss".into(), out.final_eval_loss);
    m.nfe = Some(NfeCounters {
        training: (train_cfg.iterations * train_cfg.batch_size) as u64,
        ..NfeCounters::default()
    });
    finish(m, &dir, true)
}

fn cmd_finetune(command: &str, common: &Common, degenerate_plan: bool) -> Result<RunSummary> {
    let mut cfg = resolve(defaults(FINETUNE), common)?;
    if degenerate_plan || command == "baseline-finetune" {
        cfg.set("mode", PlanMode::FullSimulation.to_string())?;
    }
    let sched = schedule(&cfg)?;
    let data = mixture(&cfg)?;
    let base = load_required(&cfg, "base_ckpt")?;
    check_net(&base, &sched, &data)?;
    let seed: u64 = cfg.get("seed")?;
    let ft = FineTuneConfig {
        iterations: cfg.get("iterations")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        seed,
        mode: cfg.get("mode")?,
        k: cfg.get("k")?,
        full_k: cfg.get("full_k")?,
        real_data: cfg.get("real_data")?,
        t_prime_frac: pair(&cfg, "t_prime_frac")?,
        t_frac: pair(&cfg, "t_frac")?,
        omega: cfg.get("omega")?,
        neg_condition: cfg.get("neg_cond")?,
        corruption: cfg.get::<Corruption>("corruption")?,
        clip_x0: cfg.optional("clip_x0")?,
        cond_dropout: cfg.get("cond_dropout")?,
        weighting: cfg.get::<LossWeighting>("weighting")?,
    };
    let dir = out_dir(common, command)?;
    let mut m = RunManifest::new(command, seed, cfg.values().clone());
    let out = self_npo_train(&base, &data, &sched, &ft)?;
    if let Some(reason) = &out.divergence {
        return Err(Error::TrainingDivergence(format!(
            "{reason} after {} iterations",
            out.iterations
        )));
    }
    save_checkpoint(
        &mut m,
        &dir.join("model.json"),
        &out.student,
        parse_dtype(&cfg)?,
    )?;
    let losses = dir.join("losses.csv");
    write_losses(&losses, &out.losses)?;
    m.add_artifact("losses", &losses)?;
    let offsets = WeightOffsets::from_checkpoints(base.params(), None, out.student.params())?;
    m.metrics.insert(
        "delta_max_abs".into(),
        offsets
            .delta()
            .max_abs_diff(&offsets.delta().zeros_like())?,
    );
    if let Some(last) = out.losses.last() {
        m.metrics.insert("final_loss".into(), *last);
    }
    m.nfe = Some(NfeCounters {
        generation: out.generation_nfe,
        training: out.training_nfe,
        sampling: 0,
    });
    finish(m, &dir, true)
}

fn parse_conditions(spec: &str, n: usize, classes: &[usize]) -> Result<Vec<Condition>> {
    if spec == "all" {
        if classes.is_empty() {
            return Err(Error::config("data has no classes to cycle through"));
        }
        return Ok((0..n)
            .map(|i| Condition::Class(classes[i % classes.len()]))
            .collect());
    }
    let list: Vec<Condition> = spec
        .split(',')
        .map(|s| s.trim().parse::<Condition>())
        .collect::<Result<_>>()
        .map_err(|e| Error::config(format!("bad cond `{spec}`: {e}")))?;
    if list.is_empty() {
        return Err(Error::config("empty cond list"));
    }
    Ok((0..n).map(|i| list[i % list.len()]).collect())
}

/// Seed of chain `i` of a run seeded with `seed`.
pub fn chain_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_mul(CHAIN_SEED_MIX)
}

fn cmd_sample(common: &Common) -> Result<RunSummary> {
    let cfg = resolve(defaults(SAMPLE), common)?;
    let sched = schedule(&cfg)?;
    let data = mixture(&cfg)?;
    let seed: u64 = cfg.get("seed")?;
    let base = load_required(&cfg, "base_ckpt")?;
    check_net(&base, &sched, &data)?;
    let pos_ckpt = cfg
        .optional::<String>("pos_ckpt")?
        .map(|p| load_ckpt(&p))
        .transpose()?;
    let neg_ckpt = cfg
        .optional::<String>("neg_ckpt")?
        .map(|p| load_ckpt(&p))
        .transpose()?;
    let (alpha, beta): (f64, f64) = (cfg.get("alpha")?, cfg.get("beta")?);
    let pos = pos_ckpt.clone().unwrap_or_else(|| base.clone());
    if pos.arch() != base.arch() {
        return Err(Error::config(
            "positive and base checkpoints have different architectures",
        ));
    }
    let neg = match &neg_ckpt {
        Some(neg) => {
            let offsets = WeightOffsets::from_checkpoints(
                base.params(),
                pos_ckpt.as_ref().map(|p| p.params()),
                neg.params(),
            )?;
            base.with_params(mix_negative(&offsets, alpha, beta)?)?
        }
        None => pos.clone(),
    };
    let omega: f64 = cfg.get("omega")?;
    let neg_condition: Condition = cfg.get("neg_cond")?;
    neg_condition.check(base.arch().num_classes)?;
    let n: usize = cfg.get("n")?;
    let cond = parse_conditions(cfg.raw("cond")?, n, &data.classes())?;
    for c in &cond {
        c.check(base.arch().num_classes)?;
    }
    let grid = StepGrid::full(&sched, cfg.get("k")?)?;
    let guide = Guided {
        pos: &pos,
        neg: &neg,
        omega,
        neg_condition,
        clip_x0: cfg.optional("clip_x0")?,
    };
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(Error::config("omega must be >= 0"));
    }
    let seeds: Vec<u64> = (0..n).map(|i| chain_seed(seed, i)).collect();
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s))
        .collect();
    let corruption: Corruption = cfg.get("corruption")?;
    let out = match cfg.raw("sampler")? {
        "ddim" => sample(&sched, &guide, &grid, &cond, corruption, &mut rngs)?,
        "ancestral" => {
            if corruption != Corruption::None {
                return Err(Error::config("corruption applies to the ddim sampler only"));
            }
            sample_ancestral(&sched, &guide, &grid, &cond, &mut rngs)?
        }
        other => {
            return Err(Error::config(format!(
                "unknown sampler `{other}` (ddim | ancestral)"
            )))
        }
    };
    let dir = out_dir(common, "sample")?;
    let mut m = RunManifest::new("sample", seed, cfg.values().clone());
    let csv = dir.join("samples.csv");
    write_samples(&csv, &out.x0, &cond, &seeds, out.nfe)?;
    m.add_artifact("samples", &csv)?;
    if cfg.get::<bool>("plot")? && data.dim() == 2 {
        let marks: Vec<Vec<f64>> = data.components().iter().map(|c| c.mean.clone()).collect();
        let img = plot::scatter(out.x0.view(), &cond, &marks, -1.6, 1.6, 512)?;
        let png = dir.join("samples.png");
        plot::save_png(&img, &png)?;
        m.add_artifact("plot", &png)?;
    }
    m.nfe = Some(NfeCounters {
        sampling: out.nfe * n as u64,
        ..NfeCounters::default()
    });
    m.metrics.insert("nfe_per_sample".into(), out.nfe as f64);
    finish(m, &dir, true)
}

/// Rows of a sample file.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub x: Array2<f64>,
    pub cond: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub nfe: Vec<u64>,
}

fn write_samples(
    path: &Path,
    x: &Array2<f64>,
    cond: &[Condition],
    seeds: &[u64],
    nfe: u64,
) -> Result<()> {
    let mut s = String::new();
    for d in 0..x.ncols() {
        let _ = write!(s, "x{d},");
    }
    s.push_str("cond,seed,nfe\n");
    for ((row, c), seed) in x.rows().into_iter().zip(cond).zip(seeds) {
        for v in row {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{c},{seed},{nfe}");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<SampleFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::config(format!("{} is empty", path.display())))?
        .split(',')
        .collect();
    let dim = header.iter().take_while(|h| h.starts_with('x')).count();
    if dim == 0 || header[dim..] != ["cond", "seed", "nfe"] {
        return Err(Error::config(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let bad = |no: usize| Error::config(format!("{}: bad row {no}", path.display()));
    let (mut xs, mut cond, mut seeds, mut nfe) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dim + 3 {
            return Err(bad(no + 2));
        }
        for v in &f[..dim] {
            xs.push(v.parse::<f64>().map_err(|_| bad(no + 2))?);
        }
        cond.push(f[dim].parse::<Condition>().map_err(|_| bad(no + 2))?);
        seeds.push(f[dim + 1].parse().map_err(|_| bad(no + 2))?);
        nfe.push(f[dim + 2].parse().map_err(|_| bad(no + 2))?);
    }
    let x =
        Array2::from_shape_vec((cond.len(), dim), xs).map_err(|e| Error::config(e.to_string()))?;
    Ok(SampleFile {
        x,
        cond,
        seeds,
        nfe,
    })
}

fn cmd_eval(common: &Common, a: &Path, b: &Path, manifests: &[PathBuf]) -> Result<RunSummary> {
    let cfg = resolve(defaults(EVAL), common)?;
    let data = mixture(&cfg)?;
    let seed: u64 = cfg.get("seed")?;
    let fa = read_samples(a)?;
    let fb = read_samples(b)?;
    if fa.cond != fb.cond || fa.seeds != fb.seeds {
        return Err(Error::config(
            "sample files are not paired (conditions or seeds differ)",
        ));
    }
    let r = match cfg.get::<RewardKind>("reward")? {
        RewardKind::ModeProximity => RewardFn::mode_proximity(data.clone()),
        RewardKind::TargetLoglik => RewardFn::target_loglik(data.clone()),
    };
    let bins = BinSpec {
        eps_bin: cfg.get("kl_eps")?,
        ..BinSpec::square(
            cfg.get("kl_lo")?,
            cfg.get("kl_hi")?,
            cfg.get("kl_bins")?,
            data.dim(),
        )
    };
    let nfe_of = |f: &SampleFile| f.nfe.first().copied().unwrap_or(0);
    let report = EvalReport::compute(
        &r,
        fa.x.view(),
        fb.x.view(),
        &fa.cond,
        &bins,
        cfg.get("kl_beta")?,
        seed,
        (nfe_of(&fa), nfe_of(&fb)),
    )?;
    let loaded = manifests
        .iter()
        .map(|p| RunManifest::load(p))
        .collect::<Result<Vec<_>>>()?;
    let nfe = if loaded.is_empty() {
        None
    } else {
        Some(nfe_report(&loaded)?)
    };

    let dir = out_dir(common, "eval")?;
    let mut m = RunManifest::new("eval", seed, cfg.values().clone());
    m.artifacts
        .insert("input_a".into(), a.display().to_string());
    m.artifacts
        .insert("input_b".into(), b.display().to_string());
    let json = serde_json::json!({ "comparison": report, "nfe": nfe.as_ref().map(|r| &r.rows) });
    let json_path = dir.join("report.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&json)?)?;
    m.add_artifact("report_json", &json_path)?;
    let mut text = report.to_table();
    if let Some(nfe) = &nfe {
        text.push('\n');
        text.push_str(&nfe.to_table());
    }
    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, &text)?;
    m.add_artifact("report_txt", &txt_path)?;
    for (k, v) in [
        ("mean_reward_a", report.mean_reward_a),
        ("mean_reward_b", report.mean_reward_b),
        ("winning_ratio", report.winning_ratio),
        ("kl", report.kl),
    ] {
        m.metrics.insert(k.into(), v);
    }
    finish(m, &dir, true)
}

fn cmd_validate(common: &Common) -> Result<RunSummary> {
    let cfg = resolve(defaults(VALIDATE), common)?;
    let sched = schedule(&cfg)?;
    let data = mixture(&cfg)?;
    let seed: u64 = cfg.get("seed")?;
    let suite = SuiteConfig {
        seed,
        moment_samples: cfg.get("moment_samples")?,
        linear_samples: cfg.get("linear_samples")?,
        ..SuiteConfig::default()
    };
    let report = run_suite(&data, &sched, &suite)?;
    let dir = out_dir(common, "validate-theorems")?;
    let mut m = RunManifest::new("validate-theorems", seed, cfg.values().clone());
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    m.add_artifact("report", &path)?;
    m.metrics
        .insert("passed".into(), if report.passed { 1.0 } else { 0.0 });
    finish(m, &dir, report.passed)
}

fn cmd_reward_finetune(common: &Common) -> Result<RunSummary> {
    let cfg = resolve(defaults(REWARD_TUNE), common)?;
    let sched = schedule(&cfg)?;
    let data = mixture(&cfg)?;
    let base = load_required(&cfg, "base_ckpt")?;
    check_net(&base, &sched, &data)?;
    let seed: u64 = cfg.get("seed")?;
    let r = match cfg.get::<RewardKind>("reward")? {
        RewardKind::ModeProximity => RewardFn::mode_proximity(data.clone()),
        RewardKind::TargetLoglik => {
            return Err(Error::config(
                "reward ascent needs the differentiable mode-proximity reward",
            ))
        }
    };
    let tune = RewardTuneConfig {
        iterations: cfg.get("iterations")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        seed,
        t_frac: pair(&cfg, "t_frac")?,
    };
    let out = reward_finetune(&base, &data, &sched, &r, &tune)?;
    let dir = out_dir(common, "reward-finetune")?;
    let mut m = RunManifest::new("reward-finetune", seed, cfg.values().clone());
    save_checkpoint(
        &mut m,
        &dir.join("model.json"),
        &out.net,
        parse_dtype(&cfg)?,
    )?;
    let rewards = dir.join("rewards.csv");
    let mut s = String::from("iteration,reward\n");
    for (i, v) in out.rewards.iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    fs::write(&rewards, s)?;
    m.add_artifact("rewards", &rewards)?;
    finish(m, &dir, true)
}

/// Resolved configuration of `command` with no file or overrides applied,
/// in config-file form.
pub fn default_config_text(command: &str) -> Result<String> {
    let specific = match command {
        "train-base" => TRAIN_BASE,
        "self-npo" | "baseline-finetune" => FINETUNE,
        "sample" => SAMPLE,
        "eval" => EVAL,
        "validate-theorems" => VALIDATE,
        "reward-finetune" => REWARD_TUNE,
        other => return Err(Error::config(format!("unknown command `{other}`"))),
    };
    Ok(defaults(specific).to_text())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_seeds_are_distinct() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| chain_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_eq!(chain_seed(7, 0), 7);
    }

    #[test]
    fn condition_lists() {
        let c = parse_conditions("all", 5, &[0, 1, 2]).unwrap();
        assert_eq!(c[3], Condition::Class(0));
        let c = parse_conditions("2,null", 3, &[0]).unwrap();
        assert_eq!(
            c,
            vec![Condition::Class(2), Condition::Null, Condition::Class(2)]
        );
        assert!(parse_conditions("x", 3, &[0]).is_err());
    }

    #[test]
    fn flags_override_file_and_set() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.cfg");
        fs::write(&file, "omega = 3\nk = 10\n").unwrap();
        let common = Common {
            config: Some(file),
            set: vec!["k=12".into(), "omega=4".into()],
            omega: Some(0.5),
            ..Common::default()
        };
        let cfg = resolve(defaults(SAMPLE), &common).unwrap();
        assert_eq!(cfg.get::<f64>("omega").unwrap(), 0.5);
        assert_eq!(cfg.get::<usize>("k").unwrap(), 12);
    }

    #[test]
    fn inapplicable_flag_is_rejected() {
        let common = Common {
            alpha: Some(0.5),
            ..Common::default()
        };
        assert!(matches!(
            resolve(defaults(TRAIN_BASE), &common),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn sample_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let x = ndarray::array![[0.25, -1.5], [1e-17, 3.0]];
        let cond = [Condition::Class(3), Condition::Null];
        write_samples(&path, &x, &cond, &[5, 9], 50).unwrap();
        let back = read_samples(&path).unwrap();
        assert_eq!(back.x, x);
        assert_eq!(back.cond, cond);
        assert_eq!(back.seeds, vec![5, 9]);
        assert_eq!(back.nfe, vec![50, 50]);
    }

    #[test]
    fn defaults_render_for_every_command() {
        for c in [
            "train-base",
            "self-npo",
            "sample",
            "eval",
            "validate-theorems",
            "reward-finetune",
        ] {
            assert!(default_config_text(c).unwrap().contains("seed = 0"));
        }
        assert!(default_config_text("nope").is_err());
    }
}
