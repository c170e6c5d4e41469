use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use splathead::container::Container;
use splathead::image::Image;
use splathead::metrics::{config_hash, evaluate, foreground_mask, table, EvalFrame, MetricSlots};
use splathead::pipeline::{
    drive, enroll, neutral_views, sequence_frames, Avatar, EnrollConfig, EnrollmentResult, Prior, SplatChain,
    TrainConfig, Trainer, CHECKPOINT_DIR, LATEST_CHECKPOINT,
};
use splathead::render::{render, RenderSettings};
use splathead::splat::GaussianSet;
use splathead::synthetic::{generate_dataset, CameraRole, LoadedDataset, Split, SyntheticConfig};

const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(name = "splathead", version, about = "Few-shot 3D Gaussian head avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Serialize)]
struct Common {
    /// TOML file with optional [data], [train] and [enroll] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,
    /// Bit-reproducible execution (single worker, fixed summation order).
    #[arg(long)]
    deterministic: bool,
    /// Run directory for outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize)]
struct SubjectArgs {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Subject index within the split.
    #[arg(long, default_value_t = 0)]
    subject: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-view dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train (or resume) a prior on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Enroll a subject from its neutral captures.
    Enroll {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArgs,
        /// Prior checkpoint.
        #[arg(long)]
        prior: PathBuf,
        /// Camera indices of the enrollment views (training cameras when empty).
        #[arg(long, value_delimiter = ',')]
        cameras: Vec<usize>,
    },
    /// Drive an enrolled avatar with a dataset sequence.
    Drive {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subject: SubjectArgs,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        enrollment: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Camera of the driving video.
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Camera to render from (the driving camera when absent).
        #[arg(long)]
        render_camera: Option<usize>,
    },
    /// Render one frame of an avatar (exporting its Gaussians) or a saved
    /// Gaussian set.
    Render {
        #[command(flatten)]
        common: Common,
        /// Dataset providing cameras (and tracking for avatar renders).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Saved Gaussian set to render instead of an avatar.
        #[arg(long, conflicts_with_all = ["prior", "enrollment"])]
        gaussians: Option<PathBuf>,
        #[arg(long, requires = "enrollment")]
        prior: Option<PathBuf>,
        #[arg(long, requires = "prior")]
        enrollment: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
    /// Compare predicted frames with ground truth and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// `none`, `head` (non-background ground-truth pixels) or a directory
        /// of mask PNGs named like the frames.
        #[arg(long, default_value = "head")]
        mask: String,
        /// Optional directory of region (e.g. mouth) mask PNGs.
        #[arg(long)]
        region: Option<PathBuf>,
        /// Row name in the report table.
        #[arg(long, default_value = "run")]
        name: String,
    },
}

/// Contents of the `--config` file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: SyntheticConfig,
    train: TrainConfig,
    enroll: EnrollConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        cfg.enroll.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    deterministic: bool,
    config_hash: String,
    config: &'a C,
    inputs: serde_json::Value,
    outputs: Vec<String>,
}

fn write_manifest<C: Serialize>(
    common: &Common,
    command: &str,
    config: &C,
    inputs: serde_json::Value,
    outputs: Vec<String>,
) -> Result<()> {
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: common.seed,
        deterministic: common.deterministic,
        config_hash: config_hash(config)?,
        config,
        inputs,
        outputs,
    };
    fs::write(common.out.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn load_split(args: &SubjectArgs) -> Result<LoadedDataset> {
    let data = LoadedDataset::load(&args.data, Some(args.split.into()))?;
    if args.subject >= data.subjects.len() {
        bail!("split has {} subjects, asked for {}", data.subjects.len(), args.subject);
    }
    Ok(data)
}

fn camera_index(data: &LoadedDataset, c: usize) -> Result<usize> {
    if c >= data.cameras.len() {
        bail!("camera {c} out of range (rig has {})", data.cameras.len());
    }
    Ok(c)
}

fn gen_data(common: &Common) -> Result<()> {
    let mut cfg = FileConfig::load(common.config.as_deref())?.data;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let manifest = generate_dataset(&common.out, &cfg)?;
    log::info!("wrote {} files under {}", manifest.files().len(), common.out.display());
    write_manifest(common, "gen-data", &cfg, serde_json::json!({}), vec!["manifest.json".into()])
}

fn train(common: &Common, data_dir: &Path) -> Result<()> {
    let mut cfg = FileConfig::load(common.config.as_deref())?.train;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let data = LoadedDataset::load(data_dir, Some(Split::Train))?;
    fs::create_dir_all(&common.out)?;
    let latest = common.out.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT);
    let mut trainer = if latest.exists() {
        let t = Trainer::resume(&data, &Container::load(&latest)?)?;
        if t.config != cfg {
            bail!("{} holds a run with a different configuration", common.out.display());
        }
        log::info!("resuming from iteration {}", t.iteration);
        t
    } else {
        Trainer::new(&data, cfg.clone())?
    };
    write_manifest(
        common,
        "train",
        &cfg,
        serde_json::json!({ "data": data_dir }),
        vec![format!("{CHECKPOINT_DIR}/{LATEST_CHECKPOINT}"), splathead::pipeline::TRAIN_LOG.into()],
    )?;
    trainer.run(Some(&common.out))?;
    log::info!("trained {} iterations", trainer.iteration);
    Ok(())
}

fn enroll_cmd(common: &Common, args: &SubjectArgs, prior_path: &Path, cameras: &[usize]) -> Result<()> {
    let cfg = FileConfig::load(common.config.as_deref())?.enroll;
    let data = load_split(args)?;
    let prior = Prior::load(prior_path)?;
    let views = neutral_views(&data, args.subject, cameras)?;
    let result = enroll(&prior, &views, &data.model, &data.chart, &cfg)?;
    fs::create_dir_all(&common.out)?;
    result.save(common.out.join("enrollment.safetensors"))?;
    let log: Vec<String> = result.log.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    fs::write(common.out.join("enroll_log.jsonl"), log.join("\n") + "\n")?;
    log::info!(
        "enrolled from {} views: loss {:.5} -> {:.5}",
        views.len(),
        result.provenance.initial_loss,
        result.provenance.final_loss
    );
    write_manifest(
        common,
        "enroll",
        &cfg,
        serde_json::json!({ "subject": args, "prior": prior_path, "cameras": cameras }),
        vec!["enrollment.safetensors".into(), "enroll_log.jsonl".into()],
    )
}

#[allow(clippy::too_many_arguments)]
fn drive_cmd(
    common: &Common,
    args: &SubjectArgs,
    prior_path: &Path,
    enrollment_path: &Path,
    sequence: usize,
    camera: usize,
    render_camera: Option<usize>,
) -> Result<()> {
    let data = load_split(args)?;
    let prior = Prior::load(prior_path)?;
    let enrollment = EnrollmentResult::load(enrollment_path)?;
    let cam = camera_index(&data, camera)?;
    let rcam = camera_index(&data, render_camera.unwrap_or(camera))?;
    let frames = sequence_frames(&data, args.subject, sequence, cam)?;
    let (images, manifest) =
        drive(&prior, &enrollment, &data.model, &data.chart, &frames, &data.cameras[cam], &data.cameras[rcam])?;
    let dir = common.out.join("frames");
    fs::create_dir_all(&dir)?;
    for (i, img) in images.iter().enumerate() {
        if let Some(img) = img {
            img.save_png(dir.join(format!("{i:04}.png")))?;
        }
    }
    fs::write(common.out.join("drive_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("rendered {} of {} frames", manifest.rendered.len(), manifest.frames);
    write_manifest(
        common,
        "drive",
        &serde_json::json!({ "sequence": sequence, "camera": cam, "render_camera": rcam }),
        serde_json::json!({ "subject": args, "prior": prior_path, "enrollment": enrollment_path }),
        vec!["frames/".into(), "drive_manifest.json".into()],
    )
}

#[allow(clippy::too_many_arguments)]
fn render_cmd(
    common: &Common,
    data_dir: &Path,
    camera: usize,
    gaussians: Option<&Path>,
    avatar: Option<(&Path, &Path)>,
    split: SplitArg,
    subject: usize,
    sequence: usize,
    frame: usize,
) -> Result<()> {
    let data = LoadedDataset::load(data_dir, Some(split.into()))?;
    let cam = &data.cameras[camera_index(&data, camera)?];
    fs::create_dir_all(&common.out)?;
    let mut outputs = vec!["render.png".to_string()];
    let image = match (gaussians, avatar) {
        (Some(path), _) => render(&GaussianSet::from_container(&Container::load(path)?)?, cam, &RenderSettings::default())?.image,
        (None, Some((prior_path, enrollment_path))) => {
            let prior = Prior::load(prior_path)?;
            let enrollment = EnrollmentResult::load(enrollment_path)?;
            let s = data.subjects.get(subject).context("subject out of range")?;
            let q = s.sequences.get(sequence).context("sequence out of range")?;
            if frame >= q.len() {
                bail!("sequence has {} frames", q.len());
            }
            let driving = data.camera_indices(CameraRole::Train)[0];
            let avatar = Avatar::new(&prior, &enrollment, &data.model, &data.chart)?;
            let params = &q.params[frame];
            let raw = avatar.decode(Some(&q.frames[frame][driving].image()), params, &data.cameras[driving])?;
            let chain = SplatChain::new(&data.model, &data.chart, avatar.generator.config.activation);
            let pass = chain.forward(&raw, chain.transports(params)?, cam)?;
            pass.set.to_container()?.save(common.out.join("gaussians.safetensors"))?;
            outputs.push("gaussians.safetensors".into());
            enrollment.color.apply(&pass.rendered.image)
        }
        (None, None) => bail!("render needs --gaussians or --prior with --enrollment"),
    };
    image.save_png(common.out.join("render.png"))?;
    write_manifest(
        common,
        "render",
        &serde_json::json!({ "camera": camera, "subject": subject, "sequence": sequence, "frame": frame }),
        serde_json::json!({ "data": data_dir, "gaussians": gaussians, "avatar": avatar }),
        outputs,
    )
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn mask_png(path: &Path) -> Result<Vec<bool>> {
    Ok(foreground_mask(&Image::load_png(path)?))
}

fn eval_cmd(common: &Common, pred: &Path, gt: &Path, mask: &str, region: Option<&Path>, name: &str) -> Result<()> {
    let names = png_names(pred)?;
    if names.is_empty() {
        bail!("no PNG frames in {}", pred.display());
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut gts = Vec::with_capacity(names.len());
    let mut masks = Vec::with_capacity(names.len());
    let mut regions = Vec::with_capacity(names.len());
    for n in &names {
        let p = Image::load_png(pred.join(n))?;
        let g = Image::load_png(gt.join(n)).with_context(|| format!("ground truth for {n}"))?;
        masks.push(match mask {
            "none" => None,
            "head" => Some(foreground_mask(&g)),
            dir => Some(mask_png(&Path::new(dir).join(n))?),
        });
        regions.push(region.map(|d| mask_png(&d.join(n))).transpose()?);
        preds.push(p);
        gts.push(g);
    }
    let frames: Vec<EvalFrame> = (0..names.len())
        .map(|i| EvalFrame {
            name: names[i].trim_end_matches(".png").to_string(),
            pred: &preds[i],
            gt: &gts[i],
            mask: masks[i].as_deref(),
            region: regions[i].as_deref(),
        })
        .collect();
    let slice = format!("{} vs {} (mask {mask})", pred.display(), gt.display());
    let hash = config_hash(&serde_json::json!({ "mask": mask, "region": region }))?;
    let report = evaluate(name, &hash, &slice, &frames, &MetricSlots::default())?;
    report.save(&common.out)?;
    println!("{}", table(std::slice::from_ref(&report)));
    write_manifest(
        common,
        "eval",
        &serde_json::json!({ "mask": mask, "name": name }),
        serde_json::json!({ "pred": pred, "gt": gt, "region": region }),
        vec![splathead::metrics::REPORT_FILE.into()],
    )
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common, data } => train(&common, &data),
        Command::Enroll { common, subject, prior, cameras } => enroll_cmd(&common, &subject, &prior, &cameras),
        Command::Drive { common, subject, prior, enrollment, sequence, camera, render_camera } => {
            drive_cmd(&common, &subject, &prior, &enrollment, sequence, camera, render_camera)
        }
        Command::Render { common, data, camera, gaussians, prior, enrollment, split, subject, sequence, frame } => {
            let avatar = prior.as_deref().zip(enrollment.as_deref());
            render_cmd(&common, &data, camera, gaussians.as_deref(), avatar, split, subject, sequence, frame)
        }
        Command::Eval { common, pred, gt, mask, region, name } => {
            fs::create_dir_all(&common.out)?;
            eval_cmd(&common, &pred, &gt, &mask, region.as_deref(), &name)
        }
    }
}
