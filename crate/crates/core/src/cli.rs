//! Experiment harness: `train`, `infer`, `compare`, and `schedule-dump`
//! subcommands over a single JSON run configuration.
//!
//! Exit codes: 0 success, 2 configuration/compatibility error, 3 numeric
//! failure (non-finite loss).

use crate::checkpoint;
use crate::data::{self, SynthTask};
use crate::error::{Error, Result};
use crate::eval::{self, HdMode};
use crate::infer::{self, Sampler};
use crate::model::{UNet, UNetConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Elem, Tensor};
use crate::train::{self, Strategy, TrainConfig, Trainer};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Element type used by the CLI; tests exercise f64 through the library.
type E = f32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// Directory of a saved dataset; generated on the fly when absent.
    pub path: Option<PathBuf>,
    pub size: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub difficulty: f64,
    pub augment: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            path: None,
            size: 32,
            classes: 3,
            train: 200,
            val: 20,
            test: 50,
            difficulty: 0.4,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub sampler: Sampler,
    /// Reverse-process step count K (variance-resampled sub-schedule).
    pub steps: usize,
    pub seeds: Vec<u64>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::Ddpm,
            steps: 5,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Apply the muscle morphology pipeline to binary predictions.
    pub postprocess: bool,
    /// Use max-of-directed HD95 instead of the pooled percentile.
    pub hd_max_directed: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            postprocess: false,
            hd_max_directed: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/run"),
            task: TaskConfig::default(),
            model: UNetConfig {
                image_channels: 1,
                classes: 3,
                ..UNetConfig::default()
            },
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validated()
    }

    /// Cross-field consistency; also aligns the model's self-cond input
    /// with the strategy.
    pub fn validated(mut self) -> Result<Self> {
        self.model.classes = self.task.classes;
        self.model.with_self_cond = self.train.strategy.wants_self_cond_input();
        self.model.validate()?;
        if self.infer.steps < 2 {
            return Err(Error::Config("infer.steps must be at least 2".into()));
        }
        if self.infer.seeds.is_empty() {
            return Err(Error::Config("infer.seeds must be non-empty".into()));
        }
        Ok(self)
    }
}

#[derive(Parser)]
#[command(name = "diffseg", about = "Diffusion segmentation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy and write logs and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample segmentations from a checkpoint and write traces.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sampler: Option<String>,
        /// Reverse-process step count; overrides the config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all strategies plus the non-diffusion baseline and emit a
    /// comparison report.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the noise-schedule table as CSV.
    ScheduleDump {
        /// Resample to this many steps first.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run() -> i32 {
    match main_inner() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => 3,
                _ => 2,
            }
        }
    }
}

fn main_inner() -> Result<()> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap handles --help/--version by "erroring"; print and succeed.
        let _ = e.print();
        Error::Config("invalid arguments".into())
    })?;
    match cli.command {
        Command::Train {
            config,
            seed,
            strategy,
            out,
        } => {
            let mut cfg = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            if let Some(s) = strategy {
                cfg.train.strategy = s.parse()?;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let cfg = cfg.validated()?;
            cmd_train(&cfg)?;
            println!("run directory: {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Infer {
            config,
            checkpoint,
            seed,
            sampler,
            steps,
            out,
        } => {
            let mut cfg = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.infer.seeds = vec![s];
            }
            if let Some(s) = sampler {
                cfg.infer.sampler = s.parse()?;
            }
            if let Some(k) = steps {
                cfg.infer.steps = k;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let cfg = cfg.validated()?;
            cmd_infer(&cfg, &checkpoint)?;
            println!("run directory: {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Compare { config, seed, out } => {
            let mut cfg = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let cfg = cfg.validated()?;
            cmd_compare(&cfg)?;
            println!("run directory: {}", cfg.out_dir.display());
            Ok(())
        }
        Command::ScheduleDump { steps, out } => {
            let path = out.unwrap_or_else(|| PathBuf::from("schedule.csv"));
            cmd_schedule_dump(&path, steps)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Files written during a run, for the run manifest.
struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn note(&mut self, name: impl Into<String>) {
        self.files.push(name.into());
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.note(name);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.files.sort();
        let manifest = serde_json::json!({ "files": self.files });
        std::fs::write(
            self.dir.join("run_manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

fn load_task_splits(cfg: &RunConfig) -> Result<(Vec<SynthTask<E>>, Vec<SynthTask<E>>, Vec<SynthTask<E>>)> {
    if let Some(path) = &cfg.task.path {
        Ok((
            data::load_split(path, "train")?,
            data::load_split(path, "val")?,
            data::load_split(path, "test")?,
        ))
    } else {
        let t = &cfg.task;
        let total = t.train + t.val + t.test;
        let mut all = data::gen_dataset::<E>(cfg.seed, total, t.size, t.classes, t.difficulty)?;
        let test = all.split_off(t.train + t.val);
        let val = all.split_off(t.train);
        Ok((all, val, test))
    }
}

fn tensors_of(tasks: &[SynthTask<E>]) -> (Vec<Tensor<E>>, Vec<Tensor<E>>) {
    (
        tasks.iter().map(|t| t.image.clone()).collect(),
        tasks.iter().map(|t| t.x0()).collect(),
    )
}

/// Train one strategy per the config; returns the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let mut artifacts = Artifacts::new(&cfg.out_dir)?;
    artifacts.write("config.json", &serde_json::to_vec_pretty(cfg)?)?;

    let (train_tasks, val_tasks, _) = load_task_splits(cfg)?;
    let (train_images, train_masks) = tensors_of(&train_tasks);
    let (val_images, val_masks) = tensors_of(&val_tasks);

    let net = UNet::<E>::new(cfg.model.clone(), cfg.seed)?;
    let schedule = NoiseSchedule::default_linear();
    let mut trainer = Trainer::new(net, schedule, cfg.train.clone());
    let report = trainer.train(
        &train_images,
        &train_masks,
        &val_images,
        &val_masks,
        Some(&cfg.out_dir),
    )?;
    artifacts.write("report.json", &serde_json::to_vec_pretty(&report)?)?;
    for entry in std::fs::read_dir(&cfg.out_dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with("ckpt_") || name.starts_with("best") || name.starts_with("final")
            || name == "train_log.csv"
        {
            artifacts.note(name);
        }
    }
    artifacts.finish()?;
    Ok(cfg.out_dir.clone())
}

/// Per-step quality summary of a sampling trace.
#[derive(Debug, Serialize)]
struct StepQuality {
    k: usize,
    label: usize,
    mean_dice: f64,
    mean_hd95: f64,
}

/// Run sampling over the test split from a checkpoint; writes per-image
/// step CSVs, final masks as PGM, and a summary JSON.
pub fn cmd_infer(cfg: &RunConfig, ckpt: &Path) -> Result<PathBuf> {
    let mut artifacts = Artifacts::new(&cfg.out_dir)?;
    artifacts.write("config.json", &serde_json::to_vec_pretty(cfg)?)?;

    let (_, _, test_tasks) = load_task_splits(cfg)?;
    let mut net = UNet::<E>::new(cfg.model.clone(), cfg.seed)?;
    load_into(&mut net, ckpt)?;
    let schedule = NoiseSchedule::default_linear();
    let sub = schedule.resample(&schedule.uniform_indices(cfg.infer.steps)?)?;

    let mut per_step: Vec<Vec<(f64, f64)>> = vec![Vec::new(); sub.len()];
    for (i, task) in test_tasks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.infer.seeds[0] ^ (i as u64) << 17);
        let trace = infer::sample(&net, &sub, &task.image, cfg.infer.sampler, None, &mut rng)?;
        let mut csv = String::from("step,k,label,dice,hd95,hd_sentinel\n");
        for (si, step) in trace.steps.iter().enumerate() {
            let (dice, hd) = score_probs(cfg, &step.probs, task)?;
            per_step[si].push((dice, hd.value));
            csv.push_str(&format!(
                "{si},{},{},{dice},{},{}\n",
                step.k, step.label, hd.value, hd.sentinel
            ));
        }
        artifacts.write(&format!("trace_{i:04}.csv", ), csv.as_bytes())?;
        let pred = eval::argmax_labels(trace.final_probs())?;
        let bytes: Vec<u8> = pred.labels.iter().map(|&l| l as u8).collect();
        let name = format!("mask_{i:04}.pgm");
        data::write_pgm(&cfg.out_dir.join(&name), pred.h, pred.w, &bytes)?;
        artifacts.note(name);
    }

    let summary: Vec<StepQuality> = per_step
        .iter()
        .enumerate()
        .map(|(si, rows)| {
            let n = rows.len().max(1) as f64;
            StepQuality {
                k: sub.len() - si,
                label: sub.label(sub.len() - si),
                mean_dice: rows.iter().map(|r| r.0).sum::<f64>() / n,
                mean_hd95: rows.iter().map(|r| r.1).sum::<f64>() / n,
            }
        })
        .collect();
    artifacts.write("summary.json", &serde_json::to_vec_pretty(&summary)?)?;
    artifacts.finish()?;
    Ok(cfg.out_dir.clone())
}

fn hd_mode(cfg: &RunConfig) -> HdMode {
    if cfg.eval.hd_max_directed {
        HdMode::MaxDirected
    } else {
        HdMode::Pooled
    }
}

fn load_into(net: &mut UNet<E>, ckpt: &Path) -> Result<()> {
    let params = checkpoint::load::<E>(ckpt)?;
    if params.names() != net.params.names() {
        return Err(Error::Checkpoint(
            "checkpoint parameters do not match the model configuration".into(),
        ));
    }
    for name in params.names() {
        let loaded = params.get(name).expect("name listed");
        let slot = net.params.get_mut(name).expect("name checked");
        if loaded.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
        }
        *slot = loaded.clone();
    }
    Ok(())
}

/// Mean foreground Dice and HD95 of a probability map against a task's
/// labels, honoring the post-processing toggle for binary tasks.
fn score_probs(cfg: &RunConfig, probs: &Tensor<E>, task: &SynthTask<E>) -> Result<(f64, eval::Hd95)> {
    let mut pred = eval::argmax_labels(probs)?;
    if cfg.eval.postprocess && pred.classes == 2 {
        let cleaned = eval::postprocess_muscle(&pred.class_mask(1));
        pred = cleaned.to_label_map();
    }
    let classes = task.labels.classes;
    let mut dice = 0.0;
    let mut hd_sum = 0.0;
    let mut sentinel = false;
    for c in 1..classes {
        dice += eval::dice_score(&pred, &task.labels, c)?;
        let hd = eval::hausdorff95(&pred, &task.labels, c, hd_mode(cfg))?;
        hd_sum += hd.value;
        sentinel |= hd.sentinel;
    }
    let fg = (classes - 1) as f64;
    Ok((
        dice / fg,
        eval::Hd95 {
            value: hd_sum / fg,
            sentinel,
        },
    ))
}

/// Train a plain (non-diffusion) segmentation network: the same U-net
/// fed a zero mask signal at t = 1, optimized with the same loss and
/// budget.
pub fn train_baseline(
    cfg: &RunConfig,
    train_images: &[Tensor<E>],
    train_masks: &[Tensor<E>],
) -> Result<UNet<E>> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.with_self_cond = false;
    let mut net = UNet::<E>::new(model_cfg, cfg.seed)?;
    let mut opt = train::AdamW::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xba5e);
    let tc = {
        let mut t = cfg.train.clone();
        t.strategy = Strategy::Standard;
        t
    };
    for step in 0..tc.steps {
        use rand::Rng as _;
        let n = tc.batch_size.min(train_images.len());
        let mut imgs = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.gen_range(0..train_images.len());
            imgs.push(train_images[i].clone());
            masks.push(train_masks[i].clone());
        }
        let images = train::stack(&imgs)?;
        let x0 = train::stack(&masks)?;

        let tape = crate::tensor::tape::Tape::new();
        let vars = net.bind(&tape);
        let image_v = tape.leaf(images);
        let zeros = tape.leaf(Tensor::zeros(x0.shape()));
        let input = net.assemble_input(&tape, image_v, zeros, None)?;
        let logits = net.forward(&tape, &vars, input, &vec![1; n])?;
        let target = tape.leaf(train::signal_to_probs(&x0));
        let loss = train::seg_loss(&tape, logits, target, &tc)?;
        if !Elem::to_f64(tape.value(loss).item()).is_finite() {
            return Err(Error::NonFinite("baseline training loss".into()));
        }
        let grads = tape.backward(loss)?;
        let mut named = HashMap::new();
        for (name, var) in vars.iter() {
            if let Some(g) = grads.get(var) {
                named.insert(name.to_string(), g.clone());
            }
        }
        opt.update(&mut net.params, &named, tc.lr.lr(step), &tc)?;
    }
    Ok(net)
}

/// Predict with the baseline network (no sampler involved).
pub fn baseline_probs(net: &UNet<E>, image: &Tensor<E>) -> Result<Tensor<E>> {
    let tape = crate::tensor::tape::Tape::new();
    let vars = net.bind(&tape);
    let image = if image.shape().len() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(image.shape());
        image.reshaped(&s)?
    } else {
        image.clone()
    };
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let image_v = tape.leaf(image);
    let zeros = tape.leaf(Tensor::zeros(&[1, net.config.classes, h, w]));
    let input = net.assemble_input(&tape, image_v, zeros, None)?;
    let logits = net.forward(&tape, &vars, input, &[1])?;
    tape.value(logits).softmax(1)
}

#[derive(Debug, Serialize)]
struct CompareRow {
    strategy: String,
    sampler: String,
    mean_dice: f64,
    mean_hd95: f64,
    p_vs_standard: Option<f64>,
}

/// Train all five strategies plus the non-diffusion baseline under one
/// budget and seed; evaluate under both samplers; emit the comparison
/// CSV, t-tests, Bland-Altman files, and the ensemble row.
pub fn cmd_compare(cfg: &RunConfig) -> Result<PathBuf> {
    let mut artifacts = Artifacts::new(&cfg.out_dir)?;
    artifacts.write("config.json", &serde_json::to_vec_pretty(cfg)?)?;

    let (train_tasks, val_tasks, test_tasks) = load_task_splits(cfg)?;
    let (train_images, train_masks) = tensors_of(&train_tasks);
    let (val_images, val_masks) = tensors_of(&val_tasks);

    let schedule = NoiseSchedule::default_linear();
    let sub = schedule.resample(&schedule.uniform_indices(cfg.infer.steps)?)?;

    // strategy name -> sampler name -> per-sample dice (and hd).
    let mut dice_cols: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut hd_cols: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut recycle_probs: Vec<Tensor<E>> = Vec::new();

    for strategy in Strategy::ALL {
        let mut run_cfg = cfg.clone();
        run_cfg.train.strategy = strategy;
        let run_cfg = run_cfg.validated()?;
        let net = UNet::<E>::new(run_cfg.model.clone(), run_cfg.seed)?;
        let mut trainer = Trainer::new(net, schedule.clone(), run_cfg.train.clone());
        trainer.train(&train_images, &train_masks, &val_images, &val_masks, None)?;

        for sampler in [Sampler::Ddpm, Sampler::Ddim] {
            let sampler_name = match sampler {
                Sampler::Ddpm => "ddpm",
                Sampler::Ddim => "ddim",
            };
            let mut dices = Vec::new();
            let mut hds = Vec::new();
            for (i, task) in test_tasks.iter().enumerate() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(cfg.infer.seeds[0] ^ (i as u64) << 17);
                let trace =
                    infer::sample(&trainer.net, &sub, &task.image, sampler, None, &mut rng)?;
                let (d, hd) = score_probs(cfg, trace.final_probs(), task)?;
                dices.push(d);
                hds.push(hd.value);
                if strategy == Strategy::RecycleMaxT && sampler == Sampler::Ddpm {
                    recycle_probs.push(trace.final_probs().clone());
                }
            }
            dice_cols.insert((strategy.name().into(), sampler_name.into()), dices);
            hd_cols.insert((strategy.name().into(), sampler_name.into()), hds);
        }
    }

    // Non-diffusion baseline: sampler-independent, so both sampler
    // columns are the same numbers.
    let baseline = train_baseline(cfg, &train_images, &train_masks)?;
    let mut base_probs = Vec::new();
    {
        let mut dices = Vec::new();
        let mut hds = Vec::new();
        for task in &test_tasks {
            let probs = baseline_probs(&baseline, &task.image)?;
            let (d, hd) = score_probs(cfg, &probs, task)?;
            dices.push(d);
            hds.push(hd.value);
            base_probs.push(probs);
        }
        for sampler in ["ddpm", "ddim"] {
            dice_cols.insert(("baseline".into(), sampler.into()), dices.clone());
            hd_cols.insert(("baseline".into(), sampler.into()), hds.clone());
        }
    }

    // Ensemble row: probability average of recycling diffusion (DDPM)
    // and the baseline.
    {
        let mut dices = Vec::new();
        let mut hds = Vec::new();
        for (i, task) in test_tasks.iter().enumerate() {
            let avg = infer::ensemble_probs(&[recycle_probs[i].clone(), base_probs[i].clone()])?;
            let (d, hd) = score_probs(cfg, &avg, task)?;
            dices.push(d);
            hds.push(hd.value);
        }
        for sampler in ["ddpm", "ddim"] {
            dice_cols.insert(("ensemble".into(), sampler.into()), dices.clone());
            hd_cols.insert(("ensemble".into(), sampler.into()), hds.clone());
        }
    }

    // Report rows and companion statistics files.
    let mut rows = Vec::new();
    let mut order: Vec<String> = Strategy::ALL.iter().map(|s| s.name().to_string()).collect();
    order.push("baseline".into());
    order.push("ensemble".into());
    let standard_ddpm = dice_cols[&("standard".to_string(), "ddpm".to_string())].clone();
    let mut csv = String::from("strategy,sampler,mean_dice,mean_hd95,p_vs_standard\n");
    for name in &order {
        for sampler in ["ddpm", "ddim"] {
            let key = (name.clone(), sampler.to_string());
            let dices = &dice_cols[&key];
            let hds = &hd_cols[&key];
            let mean_dice = dices.iter().sum::<f64>() / dices.len() as f64;
            let mean_hd = hds.iter().sum::<f64>() / hds.len() as f64;
            let p = if name != "standard" {
                Some(eval::paired_t_test(dices, &standard_ddpm)?.p)
            } else {
                None
            };
            csv.push_str(&format!(
                "{name},{sampler},{mean_dice},{mean_hd},{}\n",
                p.map_or(String::new(), |v| v.to_string())
            ));
            rows.push(CompareRow {
                strategy: name.clone(),
                sampler: sampler.into(),
                mean_dice,
                mean_hd95: mean_hd,
                p_vs_standard: p,
            });

            // Per-sample Dice columns, so every p-value in the report
            // can be recomputed from stored data.
            let col_csv: String = std::iter::once("dice\n".to_string())
                .chain(dices.iter().map(|d| format!("{d}\n")))
                .collect();
            artifacts.write(&format!("dice_{name}_{sampler}.csv"), col_csv.as_bytes())?;

            if name != "standard" {
                let ba = eval::bland_altman(dices, &standard_ddpm)?;
                artifacts.write(
                    &format!("bland_altman_{name}_{sampler}.json"),
                    &serde_json::to_vec_pretty(&ba)?,
                )?;
            }
        }
    }
    artifacts.write("comparison.csv", csv.as_bytes())?;
    artifacts.write("comparison.json", &serde_json::to_vec_pretty(&rows)?)?;
    artifacts.finish()?;
    Ok(cfg.out_dir.clone())
}

/// Dump the (optionally K-step resampled) default schedule as CSV.
pub fn cmd_schedule_dump(out: &Path, steps: Option<usize>) -> Result<()> {
    let schedule = NoiseSchedule::default_linear();
    let csv = match steps {
        Some(k) => schedule
            .resample(&schedule.uniform_indices(k)?)?
            .dump_csv(),
        None => schedule.dump_csv(),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(out)?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}
