use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chain::SplatChain;
use crate::conditioning::Augmentation;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::generator::{expression_input, identity_input, Generator, GeneratorConfig, CHANNELS};
use crate::head_model::FlameParams;
use crate::image::Image;
use crate::losses::{
    images_to_tensor, Discriminator, FeatureNet, ImageCritics, LossComponents, LossWeights, Perceptual, INPUT_SHIFT,
};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::synthetic::{CameraRole, LoadedDataset};

pub const CHECKPOINT_FORMAT: &str = "splathead_checkpoint";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.safetensors";

/// Prior-training settings (TOML/JSON, every key optional).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last iteration as a fraction of the initial one
    /// (exponential decay in between).
    pub final_lr_fraction: f64,
    pub discriminator_lr: f64,
    /// Fraction of iterations after which the adversarial term and the
    /// discriminator updates start.
    pub gan_start: f64,
    /// Adversarial training on/off.
    pub gan: bool,
    pub weights: LossWeights,
    pub augmentation: bool,
    /// Feed `M_mouth` to the expression encoder (zeros when off).
    pub mouth_conditioning: bool,
    /// Probability of conditioning a sample on the all-views identity bake
    /// instead of the frontal one.
    pub identity_mix: f64,
    /// Restricts training to these subject indices (all when empty).
    pub subjects: Vec<usize>,
    /// Restricts training to these camera indices (all training cameras
    /// when empty).
    pub cameras: Vec<usize>,
    pub checkpoint_every: usize,
    /// Checkpoints kept on disk besides `latest`.
    pub keep_checkpoints: usize,
    pub seed: u64,
    /// Seed of the fixed perceptual/discriminator feature backbone.
    pub feature_seed: u64,
    /// Generator widths, coarsest level first; model defaults when empty.
    pub widths: Vec<usize>,
    pub head_width: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 2,
            learning_rate: 2.5e-4,
            final_lr_fraction: 0.1,
            discriminator_lr: 2.5e-4,
            gan_start: 0.5,
            gan: true,
            weights: LossWeights::default(),
            augmentation: true,
            mouth_conditioning: true,
            identity_mix: 0.5,
            subjects: Vec::new(),
            cameras: Vec::new(),
            checkpoint_every: 1000,
            keep_checkpoints: 2,
            seed: 0,
            feature_seed: 7,
            widths: Vec::new(),
            head_width: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("iterations, batch_size and checkpoint_every must be positive".into()));
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.learning_rate) || !pos(self.discriminator_lr) || !pos(self.final_lr_fraction) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gan_start) || !(0.0..=1.0).contains(&self.identity_mix) {
            return Err(Error::Config("gan_start and identity_mix must lie in [0, 1]".into()));
        }
        self.weights.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Learning rate used at `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.final_lr_fraction.powf(iteration as f64 / self.iterations as f64)
    }

    pub fn gan_active(&self, iteration: usize) -> bool {
        self.gan && self.weights.gan > 0.0 && iteration as f64 >= self.gan_start * self.iterations as f64
    }

    pub fn generator_config(&self, base: GeneratorConfig) -> GeneratorConfig {
        let mut g = base;
        if !self.widths.is_empty() {
            g.widths = self.widths.clone();
        }
        if let Some(h) = self.head_width {
            g.head_width = h;
        }
        g
    }
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: LossComponents,
    pub d_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let bad = |what: &str| Error::Container(format!("checkpoint rng {what}"));
    let seed: [u8; 32] = hex::decode(&s.seed).map_err(|_| bad("seed"))?.try_into().map_err(|_| bad("seed length"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().map_err(|_| bad("position"))?);
    Ok(rng)
}

/// A trained generator plus the settings it was trained with.
#[derive(Clone, Debug)]
pub struct Prior {
    pub generator: Generator<f32>,
    pub config: TrainConfig,
    pub iteration: usize,
}

impl Prior {
    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_format(CHECKPOINT_FORMAT)?;
        let config: TrainConfig = serde_json::from_str(c.meta("train_config")?)?;
        let iteration = c.meta("iteration")?.parse().map_err(|_| Error::Container("checkpoint iteration".into()))?;
        Ok(Prior { generator: Generator::read(c, "gen.")?, config, iteration })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn perceptual(&self) -> Perceptual<f32> {
        Perceptual::new(FeatureNet::random(self.config.feature_seed))
    }
}

/// Picks a training sample's conditioning and target.
struct Sample {
    identity: Tensor<f32>,
    expression: Tensor<f32>,
    params: FlameParams,
    camera: usize,
    target: Image,
}

/// Prior training state: generator, discriminator, optimisers and the
/// sampling rng.
pub struct Trainer<'d> {
    pub data: &'d LoadedDataset,
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub iteration: usize,
    adam: Adam<f32>,
    discriminator: Discriminator<f32>,
    disc_adam: Adam<f32>,
    perceptual: Perceptual<f32>,
    rng: ChaCha8Rng,
    subjects: Vec<usize>,
    cameras: Vec<usize>,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d LoadedDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gen_cfg = config.generator_config(GeneratorConfig::for_model(&data.model, &data.chart));
        let generator = Generator::new(gen_cfg, &mut rng)?;
        Self::assemble(data, config, generator, rng, 0)
    }

    fn assemble(
        data: &'d LoadedDataset,
        config: TrainConfig,
        generator: Generator<f32>,
        rng: ChaCha8Rng,
        iteration: usize,
    ) -> Result<Self> {
        let subjects: Vec<usize> =
            if config.subjects.is_empty() { (0..data.subjects.len()).collect() } else { config.subjects.clone() };
        let cameras = if config.cameras.is_empty() { data.camera_indices(CameraRole::Train) } else { config.cameras.clone() };
        if subjects.is_empty() || subjects.iter().any(|&s| s >= data.subjects.len()) {
            return Err(Error::Config(format!("training subjects {subjects:?} not in the dataset")));
        }
        if cameras.is_empty() || cameras.iter().any(|&c| c >= data.cameras.len()) {
            return Err(Error::Config(format!("training cameras {cameras:?} not in the dataset")));
        }
        if subjects.iter().any(|&s| data.subjects[s].sequences.iter().all(|q| q.is_empty())) {
            return Err(Error::Config("a training subject has no frames".into()));
        }
        if generator.config.resolution != data.chart.resolution {
            return Err(Error::Config("generator and dataset UV resolutions differ".into()));
        }
        let adam = Adam::new(&generator.store, AdamConfig::default());
        let backbone = FeatureNet::random(config.feature_seed);
        let discriminator = Discriminator::new(backbone.clone(), config.seed.wrapping_add(1));
        let disc_adam = Adam::new(&discriminator.heads, AdamConfig::default());
        Ok(Trainer {
            data,
            generator,
            iteration,
            adam,
            discriminator,
            disc_adam,
            perceptual: Perceptual::new(backbone),
            rng,
            subjects,
            cameras,
            config,
        })
    }

    pub fn chain(&self) -> SplatChain<'d> {
        SplatChain::new(&self.data.model, &self.data.chart, self.generator.config.activation)
    }

    fn sample(&mut self) -> Sample {
        let rng = &mut self.rng;
        let si = self.subjects[rng.random_range(0..self.subjects.len())];
        let subject = &self.data.subjects[si];
        let seqs: Vec<usize> = (0..subject.sequences.len()).filter(|&q| !subject.sequences[q].is_empty()).collect();
        let q = seqs[rng.random_range(0..seqs.len())];
        let f = rng.random_range(0..subject.sequences[q].len());
        let camera = self.cameras[rng.random_range(0..self.cameras.len())];
        let all_views = rng.random_bool(self.config.identity_mix);
        let aug = if self.config.augmentation { Augmentation::sample(rng) } else { None };
        let mut bundle = subject.bundle(&self.data.chart, q, f, all_views, self.config.mouth_conditioning);
        let mut target = subject.sequences[q].frames[f][camera].image();
        if let Some(a) = aug {
            bundle.m_id = a.blur(&a.jitter(&bundle.m_id, Some(&bundle.id_valid)));
            bundle.enforce_masks();
            let head: Vec<bool> = target.data.chunks_exact(3).map(|p| p.iter().any(|&v| v > 0.0)).collect();
            target = a.blur(&a.jitter(&target, Some(&head)));
        }
        Sample {
            identity: identity_input(&bundle),
            expression: expression_input(&bundle, self.generator.config.offset_scale),
            params: subject.sequences[q].params[f].clone(),
            camera,
            target,
        }
    }

    /// One optimisation step (generator, then discriminator when active).
    pub fn step(&mut self) -> Result<StepLog> {
        let it = self.iteration;
        let lr = self.config.lr_at(it);
        let gan_on = self.config.gan_active(it);
        let batch: Vec<Sample> = (0..self.config.batch_size).map(|_| self.sample()).collect();
        let mut g = Graph::<f32>::new();
        let id = g.input(Tensor::stack(&batch.iter().map(|s| &s.identity).collect::<Vec<_>>())?);
        let exp = g.input(Tensor::stack(&batch.iter().map(|s| &s.expression).collect::<Vec<_>>())?);
        let raw = self.generator.forward(&mut g, id, exp)?;
        let raw_map = g.value(raw);
        if !raw_map.all_finite() {
            return Err(Error::NonFiniteLoss { step: it, last_good: None });
        }
        let per = CHANNELS * self.generator.config.resolution * self.generator.config.resolution;
        let chain = self.chain();
        let critics = ImageCritics {
            perceptual: Some(&self.perceptual),
            discriminator: gan_on.then_some(&self.discriminator),
        };
        let k = 1.0 / batch.len() as f64;
        let mut seed = vec![0.0f32; raw_map.len()];
        let mut comp = LossComponents::default();
        let mut renders = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            let item = &raw_map.data[b * per..(b + 1) * per];
            let cam = &self.data.cameras[s.camera];
            let out = chain.loss_step(item, &s.params, cam, &s.target, &self.config.weights, &critics, None)?;
            comp.add(&out.components);
            for (d, v) in seed[b * per..(b + 1) * per].iter_mut().zip(&out.d_raw) {
                *d = (*v as f64 * k) as f32;
            }
            renders.push(out.render);
        }
        comp.scale(k);
        let loss = comp.training_total(&self.config.weights);
        if !loss.is_finite() || seed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: it, last_good: None });
        }
        let grads = g.backward(&[(raw, seed)]);
        let pg = grads.params(&g, self.generator.store.len());
        self.adam.step(&mut self.generator.store, &pg, lr);
        let d_loss = if gan_on {
            let targets: Vec<&Image> = batch.iter().map(|s| &s.target).collect();
            let fakes: Vec<&Image> = renders.iter().collect();
            let mut dg = Graph::<f32>::new();
            let real = dg.input(images_to_tensor(&targets, INPUT_SHIFT)?);
            let fake = dg.input(images_to_tensor(&fakes, INPUT_SHIFT)?);
            let l = self.discriminator.discriminator_loss(&mut dg, real, fake);
            let dl = dg.scalar(l) as f64;
            let grads = dg.backward(&[(l, vec![1.0])]);
            let pg = grads.params(&dg, self.discriminator.heads.len());
            self.disc_adam.step(&mut self.discriminator.heads, &pg, self.config.discriminator_lr);
            Some(dl)
        } else {
            None
        };
        self.iteration += 1;
        Ok(StepLog { iteration: it + 1, lr, loss, components: comp, d_loss })
    }

    /// Full training state as a container.
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_FORMAT);
        c.set_meta("train_config", serde_json::to_string(&self.config)?);
        c.set_meta("iteration", self.iteration.to_string());
        c.set_meta("rng", serde_json::to_string(&rng_state(&self.rng))?);
        self.generator.write(&mut c, "gen.")?;
        self.adam.write(&mut c, "adam.")?;
        self.discriminator.heads.write(&mut c, "disc.")?;
        self.disc_adam.write(&mut c, "dadam.")?;
        Ok(c)
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output.
    pub fn resume(data: &'d LoadedDataset, c: &Container) -> Result<Self> {
        let prior = Prior::from_container(c)?;
        let state: RngState = serde_json::from_str(c.meta("rng")?)?;
        let mut t = Self::assemble(data, prior.config, prior.generator, restore_rng(&state)?, prior.iteration)?;
        t.adam.read(c, "adam.")?;
        t.discriminator.heads.read(c, "disc.")?;
        t.disc_adam.read(c, "dadam.")?;
        Ok(t)
    }

    /// Trains until `config.iterations`, writing JSON-lines logs and
    /// checkpoints under `run_dir` when given.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        self.run_until(self.config.iterations, run_dir)
    }

    /// Like [`Trainer::run`] but pauses after iteration `stop`; the schedule
    /// still follows `config.iterations`.
    pub fn run_until(&mut self, stop: usize, run_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        let stop = stop.min(self.config.iterations);
        let mut log_file = match run_dir {
            Some(dir) => {
                fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(TRAIN_LOG);
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        let mut last_good = run_dir.map(|d| d.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT)).filter(|p| p.exists());
        let mut logs = Vec::new();
        while self.iteration < stop {
            let entry = match self.step() {
                Ok(e) => e,
                Err(Error::NonFiniteLoss { step, .. }) => return Err(Error::NonFiniteLoss { step, last_good }),
                Err(e) => return Err(e),
            };
            if let Some((path, f)) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if entry.iteration % 100 == 0 {
                log::info!("iteration {} loss {:.5} l1 {:.5}", entry.iteration, entry.loss, entry.components.l1);
            }
            logs.push(entry);
            let done = self.iteration == stop;
            if let Some(dir) = run_dir {
                if self.iteration % self.config.checkpoint_every == 0 || done {
                    self.save_checkpoint(dir)?;
                    last_good = Some(dir.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT));
                }
            }
        }
        Ok(logs)
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let c = self.checkpoint()?;
        let ckpt_dir = dir.join(CHECKPOINT_DIR);
        let path = ckpt_dir.join(format!("ckpt_{:07}.safetensors", self.iteration));
        c.save(&path)?;
        c.save(ckpt_dir.join(LATEST_CHECKPOINT))?;
        let mut old: Vec<PathBuf> = fs::read_dir(&ckpt_dir)
            .map_err(|e| Error::io(&ckpt_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_")))
            .collect();
        old.sort();
        let excess = old.len().saturating_sub(self.config.keep_checkpoints.max(1));
        for p in &old[..excess] {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
        Ok(path)
    }

    pub fn prior(&self) -> Prior {
        Prior { generator: self.generator.clone(), config: self.config.clone(), iteration: self.iteration }
    }
}

/// Trains a prior on a loaded dataset.
pub fn train_prior(data: &LoadedDataset, config: TrainConfig, run_dir: Option<&Path>) -> Result<(Prior, Vec<StepLog>)> {
    let mut t = Trainer::new(data, config)?;
    let logs = t.run(run_dir)?;
    Ok((t.prior(), logs))
}
