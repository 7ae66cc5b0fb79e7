//! `handfit`: synthesize datasets, fit, deform, render, evaluate, and
//! check gradients from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 bad data or configuration,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use handfit::correctives::{apply_correctives, CorrectiveNets, IdentityCode};
use handfit::fit::{
    self, evaluate, fit_with, load_checkpoint, save_checkpoint, training_metrics, CheckpointPolicy, FitConfig,
    FitState,
};
use handfit::gradcheck::{run_gradcheck, GradcheckConfig};
use handfit::kinematics::{forward_kinematics, PoseVector, RigidAlignment};
use handfit::model::{load_model, HandModel};
use handfit::obj::{read_obj, write_obj};
use handfit::render::{read_cameras, render_depth, write_pfm};
use handfit::skinning::lbs_deform;
use handfit::synth::{generate_dataset, generate_subject, read_dataset, write_dataset, SynthConfig};
use handfit::Error;

#[derive(Parser, Debug)]
#[command(name = "handfit", version, about = "Weakly-supervised parametric hand mesh fitting")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with optional `synth`, `fit`, and `gradcheck` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic subject and its multi-view dataset.
    Synth(SynthArgs),
    /// Fit correctives and per-frame poses to a dataset.
    Fit(FitArgs),
    /// Export the refined, posed mesh as OBJ.
    Deform(DeformArgs),
    /// Render a mesh to depth maps (PFM), one per camera.
    Render(RenderArgs),
    /// Report P_err and M_err of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference check of every loss term's gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vertex_budget: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Relative bone-length perturbation of the subject.
    #[arg(long)]
    bone_perturbation: Option<f64>,
    /// Square image side in pixels.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory: checkpoint.hfc, loss.csv, fit_config.json.
    #[arg(long)]
    out: PathBuf,
    /// Start from the full-size defaults instead of the desk-scale schedule.
    #[arg(long)]
    full_schedule: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    pose_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    lambda_lap: Option<f64>,
    #[arg(long)]
    lambda_nr: Option<f64>,
    /// Loss terms to switch off.
    #[arg(long, value_enum, value_delimiter = ',')]
    disable: Vec<LossFlag>,
    /// Corrective heads to switch off.
    #[arg(long, value_enum, value_delimiter = ',')]
    disable_head: Vec<HeadFlag>,
    /// Save a checkpoint every N iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossFlag {
    Pose,
    Depth,
    Penetration,
    Laplacian,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadFlag {
    Skeleton,
    IdentityVertices,
    PoseVertices,
    Skinning,
}

#[derive(Args, Debug)]
struct DeformArgs {
    /// Model OBJ with its JSON sidecar (a dataset's model.obj works).
    #[arg(long)]
    model: PathBuf,
    /// Checkpoint whose correctives to apply; without one the template is posed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `zero`, `frame:N` (a fitted training pose), or a JSON file holding
    /// the active joint angles in radians.
    #[arg(long, default_value = "zero")]
    pose: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Camera rig JSON.
    #[arg(long)]
    cameras: PathBuf,
    /// Output directory for view_C.pfm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Output directory for metrics.json and metrics.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Dataset to check against; a small default subject is synthesized
    /// when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    configs: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    /// Also write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    synth: Option<SynthConfig>,
    /// Kept raw so that it can be layered over the chosen schedule.
    fit: Option<serde_json::Value>,
    gradcheck: Option<GradcheckConfig>,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.chain().find_map(|e| e.downcast_ref::<Error>()) {
            Some(Error::NonFinite { .. } | Error::Degenerate(_)) => 3,
            _ => 2,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ConfigFile>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(a, file, cli.seed),
        Command::Fit(a) => fit_cmd(a, file, cli.seed),
        Command::Deform(a) => deform(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a, cli.seed),
        Command::Gradcheck(a) => gradcheck(a, file, cli.seed),
    }
}

fn synth(a: SynthArgs, file: ConfigFile, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = file.synth.unwrap_or_default();
    set(&mut cfg.seed, seed);
    set(&mut cfg.vertex_budget, a.vertex_budget);
    set(&mut cfg.n_cameras, a.cameras);
    set(&mut cfg.n_train, a.train);
    set(&mut cfg.n_test, a.test);
    set(&mut cfg.bone_length_perturbation, a.bone_perturbation);
    set(&mut cfg.image_width, a.image_size);
    set(&mut cfg.image_height, a.image_size);
    let subject = generate_subject(&cfg)?;
    let ds = generate_dataset(&subject, &cfg)?;
    write_dataset(&a.out, &subject.model, &ds)?;
    println!(
        "wrote {} train and {} test frames over {} views to {}",
        ds.train.len(),
        ds.test.len(),
        ds.cameras.len(),
        a.out.display()
    );
    Ok(())
}

fn fit_cmd(a: FitArgs, file: ConfigFile, seed: Option<u64>) -> Result<(), Failure> {
    let (model, ds) = read_dataset(&a.data)?;
    let base = if a.full_schedule { FitConfig::default() } else { FitConfig::desk_scale() };
    let mut cfg = match &file.fit {
        Some(section) => layer_fit(&base, section)?,
        None => base,
    };
    set(&mut cfg.seed, seed);
    if let Some(e) = a.epochs {
        rescale_epochs(&mut cfg, e);
    }
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.pose_lr, a.pose_lr);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.views_per_frame, a.views);
    set(&mut cfg.lambda_lap, a.lambda_lap);
    set(&mut cfg.lambda_nr, a.lambda_nr);
    for l in a.disable {
        match l {
            LossFlag::Pose => cfg.losses.pose = false,
            LossFlag::Depth => cfg.losses.depth = false,
            LossFlag::Penetration => cfg.losses.penetration = false,
            LossFlag::Laplacian => cfg.losses.laplacian = false,
        }
    }
    for h in a.disable_head {
        match h {
            HeadFlag::Skeleton => cfg.correctives.skeleton = false,
            HeadFlag::IdentityVertices => cfg.correctives.identity_vertices = false,
            HeadFlag::PoseVertices => cfg.correctives.pose_vertices = false,
            HeadFlag::Skinning => cfg.correctives.skinning = false,
        }
    }
    let mut state = match &a.resume {
        Some(p) => load_checkpoint(p, &model)?,
        None => FitState::new(&model, ds.train.len(), &cfg)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("checkpoint.hfc");
    fs::write(a.out.join("fit_config.json"), serde_json::to_string_pretty(&state.config).map_err(Error::from)?)
        .context("writing fit_config.json")?;
    let total = state.config.total_iterations(ds.train.len());
    let policy = CheckpointPolicy {
        path: &ckpt,
        every: a.checkpoint_every,
    };
    let result = fit_with(&mut state, &model, &ds, Some(policy), |s, b| {
        if s.iteration % 50 == 0 || s.iteration == total {
            eprintln!("iter {}/{total}: {b}", s.iteration);
        }
    });
    fs::write(a.out.join("loss.csv"), fit::history_csv(&state.history)).context("writing loss.csv")?;
    result?;
    save_checkpoint(&state, &ckpt)?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn deform(a: DeformArgs) -> Result<(), Failure> {
    let model = load_model(&a.model)?;
    let (nets, beta, state) = match &a.checkpoint {
        Some(p) => {
            let s = load_checkpoint(p, &model)?;
            (s.nets.clone(), s.beta.clone(), Some(s))
        }
        None => {
            let cfg = FitConfig::default();
            let nets = CorrectiveNets::zeros(&model, &cfg.correctives);
            let beta = IdentityCode {
                beta: vec![0.0; cfg.correctives.identity_dim],
            };
            (nets, beta, None)
        }
    };
    let pose = parse_pose(&a.pose, &model, state.as_ref())?;
    let refined = apply_correctives(&model, &nets, &beta, &pose)?;
    let order = state.as_ref().map_or(FitConfig::default().euler_order, |s| s.config.euler_order);
    let transforms = forward_kinematics(&pose, &refined.offsets, &model.hierarchy, order)?;
    let verts = lbs_deform(&refined.vertices, &refined.weights, &transforms, &RigidAlignment::identity())?;
    write_obj(&a.out, &verts, &model.faces)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn parse_pose(spec: &str, model: &HandModel, state: Option<&FitState>) -> Result<PoseVector, Failure> {
    let mask = model.dof_mask.clone();
    if spec == "zero" {
        return Ok(PoseVector::zero(mask));
    }
    if let Some(f) = spec.strip_prefix("frame:") {
        let f: usize = f.parse().map_err(|_| anyhow!("bad frame index in --pose {spec}"))?;
        let s = state.ok_or_else(|| anyhow!("--pose frame:N needs --checkpoint"))?;
        if f >= s.poses.len() {
            return Err(anyhow!("checkpoint has {} frames, asked for {f}", s.poses.len()).into());
        }
        return Ok(s.pose(f, model)?);
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading pose file {spec}"))?;
    let theta: Vec<f64> = serde_json::from_str(&text).with_context(|| format!("parsing pose file {spec}"))?;
    Ok(PoseVector::from_theta(&theta, mask)?)
}

fn render(a: RenderArgs) -> Result<(), Failure> {
    let mesh = read_obj(&a.mesh)?;
    let cameras = read_cameras(&a.cameras)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (c, cam) in cameras.iter().enumerate() {
        let map = render_depth(&mesh.vertices, &mesh.faces, cam)?;
        write_pfm(&a.out.join(format!("view_{c}.pfm")), &map)?;
    }
    println!("wrote {} views to {}", cameras.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs, seed: Option<u64>) -> Result<(), Failure> {
    let (model, ds) = read_dataset(&a.data)?;
    let mut state = load_checkpoint(&a.checkpoint, &model)?;
    set(&mut state.config.seed, seed);
    let report = match a.split {
        Split::Train => training_metrics(&state, &model, &ds)?,
        Split::Test => evaluate(&state, &model, &ds, &ds.test)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join("metrics.json"), &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    write_text(&a.out.join("metrics.csv"), &report.to_csv())?;
    if let Some(p) = &report.p_err {
        println!("P_err mean {:.3} mm (median {:.3}, p90 {:.3})", p.mean, p.median, p.p90);
    }
    if let Some(m) = &report.m_err {
        println!("M_err mean {:.3} mm (median {:.3}, p90 {:.3})", m.mean, m.median, m.p90);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, file: ConfigFile, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = file.gradcheck.unwrap_or_default();
    set(&mut cfg.seed, seed);
    set(&mut cfg.configs, a.configs);
    set(&mut cfg.step, a.step);
    let (model, ds) = match &a.data {
        Some(d) => read_dataset(d)?,
        None => {
            let sc = SynthConfig {
                n_train: 4,
                n_test: 0,
                ..file.synth.unwrap_or_default()
            };
            let subject = generate_subject(&sc)?;
            let ds = generate_dataset(&subject, &sc)?;
            (subject.model, ds)
        }
    };
    let report = run_gradcheck(&model, &ds, &cfg)?;
    print!("{}", report.table());
    if let Some(p) = &a.out {
        write_text(p, &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            error: anyhow!("gradient check failed"),
        })
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

/// Applies the keys of a config file's `fit` section on top of `base`.
/// Setting `epochs` without `lr_drop_epochs` moves the drops with it.
fn layer_fit(base: &FitConfig, section: &serde_json::Value) -> Result<FitConfig, Failure> {
    let serde_json::Value::Object(keys) = section else {
        return Err(anyhow!("the fit section of the config file must be an object").into());
    };
    let mut merged = serde_json::to_value(base).map_err(Error::from)?;
    if let serde_json::Value::Object(m) = &mut merged {
        for (k, v) in keys {
            m.insert(k.clone(), v.clone());
        }
    }
    let mut cfg: FitConfig = serde_json::from_value(merged).context("parsing the fit section of the config file")?;
    if keys.contains_key("epochs") && !keys.contains_key("lr_drop_epochs") {
        let e = cfg.epochs;
        cfg.epochs = base.epochs;
        rescale_epochs(&mut cfg, e);
    }
    Ok(cfg)
}

/// Changes the epoch count, keeping the drops at the same fraction of the
/// schedule.
fn rescale_epochs(cfg: &mut FitConfig, epochs: usize) {
    let old = cfg.epochs.max(1);
    cfg.lr_drop_epochs = cfg.lr_drop_epochs.iter().map(|d| d * epochs / old).collect();
    cfg.epochs = epochs;
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
