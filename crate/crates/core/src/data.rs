//! Synthetic 2D segmentation tasks, signed one-hot mask encoding,
//! geometric augmentation, the x_t-information diagnostic, and on-disk
//! dataset storage (binary PGM images plus a JSON manifest).

use crate::error::{Error, Result};
use crate::eval::LabelMap;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Elem, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Encode a label map as a {-1, +1} per-class channel tensor
/// [classes, h, w]: +1 on the pixel's class channel, -1 elsewhere.
pub fn encode_mask<E: Elem>(labels: &LabelMap) -> Tensor<E> {
    let (h, w, c) = (labels.h, labels.w, labels.classes);
    let neg = E::from_f64(-1.0);
    let pos = E::one();
    let mut data = vec![neg; c * h * w];
    for (i, &l) in labels.labels.iter().enumerate() {
        data[l * h * w + i] = pos;
    }
    Tensor::new(vec![c, h, w], data).expect("encode shape is consistent")
}

/// Decode a (possibly noise-corrupted) mask tensor by per-pixel argmax
/// over channels. Accepts [c, h, w] or [1, c, h, w].
pub fn decode_mask<E: Elem>(x: &Tensor<E>) -> Result<LabelMap> {
    crate::eval::argmax_labels(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMeta {
    pub seed: u64,
    pub size: usize,
    pub classes: usize,
    pub difficulty: f64,
}

/// One synthetic sample: a single-channel intensity image and its label
/// map.
#[derive(Debug, Clone)]
pub struct SynthTask<E: Elem> {
    /// [1, h, w] intensities.
    pub image: Tensor<E>,
    pub labels: LabelMap,
    pub meta: TaskMeta,
}

impl<E: Elem> SynthTask<E> {
    /// Ground-truth mask signal [classes, h, w] in {-1, +1}.
    pub fn x0(&self) -> Tensor<E> {
        encode_mask(&self.labels)
    }
}

/// Class mean intensities: evenly spaced in [0.1, 0.9], pulled together
/// as difficulty rises.
fn class_mean(c: usize, classes: usize, difficulty: f64) -> f64 {
    let spread = 0.8 * (1.0 - 0.6 * difficulty.min(1.0));
    0.1 + spread * c as f64 / (classes - 1) as f64
}

/// Pixel-noise half-width: uniform noise with strictly separable
/// intensities at difficulty 0.
fn noise_halfwidth(classes: usize, difficulty: f64) -> f64 {
    let gap = 0.8 / (classes - 1) as f64;
    0.45 * gap * (0.2 + 0.8 * difficulty.min(1.0))
}

fn render_task<E: Elem>(
    seed: u64,
    size: usize,
    classes: usize,
    difficulty: f64,
) -> Result<SynthTask<E>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0usize; size * size];
    for c in 1..classes {
        let shapes = rng.gen_range(1..=3);
        for _ in 0..shapes {
            let rect = rng.gen_bool(0.5);
            let cy = rng.gen_range(0.15..0.85) * size as f64;
            let cx = rng.gen_range(0.15..0.85) * size as f64;
            let ry = rng.gen_range(0.08..0.22) * size as f64;
            let rx = rng.gen_range(0.08..0.22) * size as f64;
            for y in 0..size {
                for x in 0..size {
                    let dy = (y as f64 - cy) / ry;
                    let dx = (x as f64 - cx) / rx;
                    let inside = if rect {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    } else {
                        dy * dy + dx * dx <= 1.0
                    };
                    if inside {
                        labels[y * size + x] = c;
                    }
                }
            }
        }
    }
    let half = noise_halfwidth(classes, difficulty);
    let mut image = Vec::with_capacity(size * size);
    for &l in &labels {
        let v = class_mean(l, classes, difficulty) + rng.gen_range(-half..half);
        image.push(E::from_f64(v));
    }
    Ok(SynthTask {
        image: Tensor::new(vec![1, size, size], image)?,
        labels: LabelMap::new(size, size, classes, labels)?,
        meta: TaskMeta {
            seed,
            size,
            classes,
            difficulty,
        },
    })
}

/// Generate `n` deterministic synthetic tasks. Each task has 1-3 random
/// ellipses/rectangles per foreground class with class-dependent
/// intensity plus bounded pixel noise; at difficulty 0 the class
/// intensities are strictly separable by thresholds.
pub fn gen_dataset<E: Elem>(
    seed: u64,
    n: usize,
    size: usize,
    classes: usize,
    difficulty: f64,
) -> Result<Vec<SynthTask<E>>> {
    if size < 16 {
        return Err(Error::Config("task size must be at least 16".into()));
    }
    if classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Config("difficulty must lie in [0, 1]".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Derive one seed per task; redraw if a task violates the
        // background-and-foreground contract.
        let mut task_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
        loop {
            let task = render_task::<E>(task_seed, size, classes, difficulty)?;
            let fg = task.labels.labels.iter().filter(|&&l| l != 0).count();
            if fg > 0 && fg < size * size {
                out.push(task);
                break;
            }
            task_seed = task_seed.wrapping_add(0x01_0001);
        }
    }
    Ok(out)
}

/// Apply one geometric transform (rotation in degrees about the center,
/// translation in pixels, uniform scale) to image and labels alike via
/// inverse mapping. The image is sampled bilinearly, labels
/// nearest-neighbor; out-of-canvas regions become background/zero.
pub fn augment_with<E: Elem>(
    task: &SynthTask<E>,
    rot_deg: f64,
    translate: (f64, f64),
    scale: f64,
) -> Result<SynthTask<E>> {
    let (h, w) = (task.labels.h, task.labels.w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = rot_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    // Inverse of translate(t) . rotate(theta) . scale(s) about center.
    let inv = |y: f64, x: f64| -> (f64, f64) {
        let (vy, vx) = (y - cy - translate.0, x - cx - translate.1);
        let (ry, rx) = (cos * vy + sin * vx, -sin * vy + cos * vx);
        (ry / scale + cy, rx / scale + cx)
    };

    let mut image = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = inv(y as f64, x as f64);
            image.push(E::from_f64(bilinear(&task.image, h, w, sy, sx)));
            labels.push(nearest_label(&task.labels, sy, sx));
        }
    }
    Ok(SynthTask {
        image: Tensor::new(vec![1, h, w], image)?,
        labels: LabelMap::new(h, w, task.labels.classes, labels)?,
        meta: task.meta.clone(),
    })
}

/// Random augmentation: rotation +-15 degrees, translation +-10% of the
/// extent, scale in [0.9, 1.1].
pub fn augment<E: Elem>(task: &SynthTask<E>, rng: &mut ChaCha8Rng) -> Result<SynthTask<E>> {
    let rot = rng.gen_range(-15.0..=15.0);
    let max_t = 0.1 * task.labels.h as f64;
    let ty = rng.gen_range(-max_t..=max_t);
    let tx = rng.gen_range(-max_t..=max_t);
    let scale = rng.gen_range(0.9..=1.1);
    augment_with(task, rot, (ty, tx), scale)
}

fn bilinear<E: Elem>(image: &Tensor<E>, h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| image.data()[yy * w + xx].to_f64();
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x1) * (1.0 - fy) * fx
        + at(y1, x0) * fy * (1.0 - fx)
        + at(y1, x1) * fy * fx
}

fn nearest_label(labels: &LabelMap, y: f64, x: f64) -> usize {
    let (yy, xx) = (y.round(), x.round());
    if yy < 0.0 || xx < 0.0 || yy >= labels.h as f64 || xx >= labels.w as f64 {
        return 0;
    }
    labels.labels[yy as usize * labels.w + xx as usize]
}

#[derive(Debug, Clone, Serialize)]
pub struct XtInfoRow {
    pub t: usize,
    /// Mean cross entropy of softmax(x_t) against the clean labels.
    pub ce: f64,
    /// Mean foreground Dice of the decoded x_t against the clean labels.
    pub dice: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct XtInformation {
    pub rows: Vec<XtInfoRow>,
    /// Same statistics for pure N(0, 1) noise in place of x_t.
    pub noise_ce: f64,
    pub noise_dice: f64,
    /// Standard error of the per-draw Dice at the largest grid t, and of
    /// the noise baseline, for indistinguishability checks.
    pub last_t_dice_se: f64,
    pub noise_dice_se: f64,
}

/// Appendix-D style diagnostic: how much label information survives in
/// `x_t` as `t` grows, measured by decoding `x_t` directly.
pub fn xt_information<E: Elem>(
    labels: &LabelMap,
    schedule: &NoiseSchedule,
    t_grid: &[usize],
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<XtInformation> {
    if draws == 0 {
        return Err(Error::Config("xt_information needs draws >= 1".into()));
    }
    let x0 = encode_mask::<E>(labels);
    let mut rows = Vec::with_capacity(t_grid.len());
    let mut last_se = 0.0;
    for &t in t_grid {
        schedule.check_step(t)?;
        let mut dices = Vec::with_capacity(draws);
        let mut ces = Vec::with_capacity(draws);
        for _ in 0..draws {
            let eps = Tensor::randn(x0.shape(), rng);
            let x_t = crate::diffusion::q_sample(&x0, t, &eps, schedule)?;
            let (ce, dice) = score_decoded(&x_t, labels)?;
            ces.push(ce);
            dices.push(dice);
        }
        let (dice, se) = mean_se(&dices);
        let (ce, _) = mean_se(&ces);
        rows.push(XtInfoRow { t, ce, dice });
        last_se = se;
    }

    let mut noise_dices = Vec::with_capacity(draws);
    let mut noise_ces = Vec::with_capacity(draws);
    for _ in 0..draws {
        let noise = Tensor::<E>::randn(x0.shape(), rng);
        let (ce, dice) = score_decoded(&noise, labels)?;
        noise_ces.push(ce);
        noise_dices.push(dice);
    }
    let (noise_dice, noise_se) = mean_se(&noise_dices);
    let (noise_ce, _) = mean_se(&noise_ces);
    Ok(XtInformation {
        rows,
        noise_ce,
        noise_dice,
        last_t_dice_se: last_se,
        noise_dice_se: noise_se,
    })
}

fn score_decoded<E: Elem>(x: &Tensor<E>, labels: &LabelMap) -> Result<(f64, f64)> {
    let probs = x.softmax(0)?;
    let (h, w) = (labels.h, labels.w);
    let mut ce = 0.0;
    for (i, &l) in labels.labels.iter().enumerate() {
        ce -= probs.data()[l * h * w + i].to_f64().max(1e-300).ln();
    }
    ce /= (h * w) as f64;
    let decoded = decode_mask(x)?;
    let mut dice = 0.0;
    for c in 1..labels.classes {
        dice += crate::eval::dice_score(&decoded, labels, c)?;
    }
    Ok((ce, dice / (labels.classes - 1) as f64))
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Write a binary (P5) PGM, maxval 255.
pub fn write_pgm(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != h * w {
        return Err(Error::shape("PGM byte count must equal h * w"));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| bad_pgm())?.to_string());
    }
    pos += 1; // single whitespace after maxval
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(bad_pgm());
    }
    let w: usize = fields[1].parse().map_err(|_| bad_pgm())?;
    let h: usize = fields[2].parse().map_err(|_| bad_pgm())?;
    if raw.len() < pos + h * w {
        return Err(bad_pgm());
    }
    Ok((h, w, raw[pos..pos + h * w].to_vec()))
}

fn bad_pgm() -> Error {
    Error::Config("not a maxval-255 binary PGM".into())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: usize,
    pub size: usize,
    pub difficulty: f64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Save tasks as `<id>_img.pgm` / `<id>_lab.pgm` pairs plus a manifest
/// with split membership. Image intensities are quantized to 8 bits;
/// label PGMs store raw class ids.
pub fn save_dataset<E: Elem>(
    dir: &Path,
    splits: &[(&str, &[SynthTask<E>])],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let first = splits
        .iter()
        .flat_map(|(_, t)| t.iter())
        .next()
        .ok_or_else(|| Error::Config("cannot save an empty dataset".into()))?;
    let mut manifest = DatasetManifest {
        classes: first.meta.classes,
        size: first.meta.size,
        difficulty: first.meta.difficulty,
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for (split, tasks) in splits {
        for (i, task) in tasks.iter().enumerate() {
            let id = format!("{split}_{i:04}");
            let (h, w) = (task.labels.h, task.labels.w);
            let img: Vec<u8> = task
                .image
                .data()
                .iter()
                .map(|&v| (Elem::to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            write_pgm(&dir.join(format!("{id}_img.pgm")), h, w, &img)?;
            let lab: Vec<u8> = task.labels.labels.iter().map(|&l| l as u8).collect();
            write_pgm(&dir.join(format!("{id}_lab.pgm")), h, w, &lab)?;
            match *split {
                "train" => manifest.train.push(id),
                "val" => manifest.val.push(id),
                "test" => manifest.test.push(id),
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            }
        }
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load one split of a saved dataset.
pub fn load_split<E: Elem>(dir: &Path, split: &str) -> Result<Vec<SynthTask<E>>> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let ids = match split {
        "train" => &manifest.train,
        "val" => &manifest.val,
        "test" => &manifest.test,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (h, w, img) = read_pgm(&dir.join(format!("{id}_img.pgm")))?;
        let (lh, lw, lab) = read_pgm(&dir.join(format!("{id}_lab.pgm")))?;
        if (h, w) != (lh, lw) {
            return Err(Error::shape("image/label PGM size mismatch"));
        }
        let image: Vec<E> = img.iter().map(|&b| E::from_f64(b as f64 / 255.0)).collect();
        let labels: Vec<usize> = lab.iter().map(|&b| b as usize).collect();
        out.push(SynthTask {
            image: Tensor::new(vec![1, h, w], image)?,
            labels: LabelMap::new(h, w, manifest.classes, labels)?,
            meta: TaskMeta {
                seed: 0,
                size: manifest.size,
                classes: manifest.classes,
                difficulty: manifest.difficulty,
            },
        });
    }
    Ok(out)
}
