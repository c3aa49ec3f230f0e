//! Inference: reverse-process sampling with per-step traces, sliding
//! patch inference with overlap averaging, probability ensembles, and
//! across-seed variance maps.

use crate::diffusion;
use crate::error::{Error, Result};
use crate::model::UNet;
use crate::schedule::NoiseSchedule;
use crate::tensor::tape::Tape;
use crate::tensor::{Elem, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Sampler::Ddpm),
            "ddim" => Ok(Sampler::Ddim),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// One reverse step of a sampling run.
#[derive(Debug, Clone)]
pub struct StepRecord<E: Elem> {
    /// Schedule position before the step.
    pub k: usize,
    /// Original timestep label fed to the network.
    pub label: usize,
    /// Network input `x_k`.
    pub x_k: Tensor<E>,
    /// Class probabilities derived from the network logits.
    pub probs: Tensor<E>,
    /// `x0_hat` signal passed to the sampler step.
    pub x0_hat: Tensor<E>,
    /// Self-conditioning input used for this step, if the model takes one.
    pub self_cond: Option<Tensor<E>>,
}

/// Full trajectory of one sampling run, coarsest step first.
#[derive(Debug, Clone)]
pub struct SampleTrace<E: Elem> {
    pub steps: Vec<StepRecord<E>>,
    /// Final denoised signal `x_0`.
    pub x0: Tensor<E>,
}

impl<E: Elem> SampleTrace<E> {
    /// Probabilities predicted at the last (least noisy) step.
    pub fn final_probs(&self) -> &Tensor<E> {
        &self.steps.last().expect("trace has at least one step").probs
    }
}

/// Run the network once (no gradients) and return class probabilities.
fn predict_probs<E: Elem>(
    net: &UNet<E>,
    image: &Tensor<E>,
    x_k: &Tensor<E>,
    label: usize,
    self_cond: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let tape = Tape::new();
    let vars = net.bind(&tape);
    let image_v = tape.leaf(image.clone());
    let x_v = tape.leaf(x_k.clone());
    let sc = self_cond.map(|t| tape.leaf(t.clone()));
    let n = image.shape()[0];
    let input = net.assemble_input(&tape, image_v, x_v, sc)?;
    let logits = net.forward(&tape, &vars, input, &vec![label; n])?;
    tape.value(logits).softmax(1)
}

/// Sample a segmentation for `image` ([1, c, h, w] or [c, h, w]) by
/// running the reverse process over every position of `schedule`
/// (typically a K-step resampled sub-schedule). If the model takes a
/// self-conditioning input, each step receives the previous step's
/// estimate (zeros at the first step).
///
/// `init` overrides the starting noise; by default `x_K ~ N(0, I)`.
pub fn sample<E: Elem>(
    net: &UNet<E>,
    schedule: &NoiseSchedule,
    image: &Tensor<E>,
    sampler: Sampler,
    init: Option<Tensor<E>>,
    rng: &mut ChaCha8Rng,
) -> Result<SampleTrace<E>> {
    let image = as_batched(image)?;
    let (n, h, w) = (image.shape()[0], image.shape()[2], image.shape()[3]);
    let mask_shape = vec![n, net.config.classes, h, w];
    let mut x = match init {
        Some(x) => {
            if x.shape() != mask_shape.as_slice() {
                return Err(Error::shape(format!(
                    "init noise shape {:?}, expected {mask_shape:?}",
                    x.shape()
                )));
            }
            x
        }
        None => Tensor::randn(&mask_shape, rng),
    };

    let mut steps = Vec::with_capacity(schedule.len());
    let mut prev_estimate: Option<Tensor<E>> = None;
    for k in (1..=schedule.len()).rev() {
        let label = schedule.label(k);
        let sc = if net.config.with_self_cond {
            Some(match &prev_estimate {
                Some(e) => e.clone(),
                None => Tensor::zeros(&mask_shape),
            })
        } else {
            None
        };
        let probs = predict_probs(net, &image, &x, label, sc.as_ref())?;
        let x0_hat = diffusion::probs_to_signal(&probs);
        steps.push(StepRecord {
            k,
            label,
            x_k: x.clone(),
            probs: probs.clone(),
            x0_hat: x0_hat.clone(),
            self_cond: sc,
        });
        x = match sampler {
            Sampler::Ddpm => diffusion::ddpm_step(&x, &x0_hat, k, schedule, rng)?,
            Sampler::Ddim => diffusion::ddim_step(&x, &x0_hat, k, schedule)?,
        };
        prev_estimate = Some(x0_hat);
    }

    Ok(SampleTrace { steps, x0: x })
}

fn as_batched<E: Elem>(t: &Tensor<E>) -> Result<Tensor<E>> {
    match t.shape().len() {
        4 => Ok(t.clone()),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshaped(&shape)
        }
        r => Err(Error::shape(format!("expected rank 3 or 4 image, got {r}"))),
    }
}

/// Mean of several probability maps (an ensemble over runs or seeds).
pub fn ensemble_probs<E: Elem>(members: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = members
        .first()
        .ok_or_else(|| Error::shape("ensemble needs at least one member"))?;
    let mut acc = Tensor::zeros(first.shape());
    for m in members {
        acc = acc.add(m)?;
    }
    Ok(acc.scale(1.0 / members.len() as f64))
}

/// Per-pixel variance of the foreground probability across seeds, plus
/// the mean probability map. Variance is the population variance.
pub struct SeedVariance<E: Elem> {
    pub mean: Tensor<E>,
    pub variance: Tensor<E>,
}

pub fn seed_variance<E: Elem>(members: &[Tensor<E>]) -> Result<SeedVariance<E>> {
    let mean = ensemble_probs(members)?;
    let mut var = Tensor::zeros(mean.shape());
    for m in members {
        let d = m.sub(&mean)?;
        var = var.add(&d.mul(&d)?)?;
    }
    Ok(SeedVariance {
        mean,
        variance: var.scale(1.0 / members.len() as f64),
    })
}

/// Run `sample` for each seed and return every member's final
/// probability map.
pub fn sample_seeds<E: Elem>(
    net: &UNet<E>,
    schedule: &NoiseSchedule,
    image: &Tensor<E>,
    sampler: Sampler,
    seeds: &[u64],
) -> Result<Vec<Tensor<E>>> {
    use rand::SeedableRng;
    seeds
        .iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            Ok(sample(net, schedule, image, sampler, None, &mut rng)?
                .final_probs()
                .clone())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Square patch edge length.
    pub patch: usize,
    /// Stride between patch origins; `stride < patch` gives overlap.
    pub stride: usize,
}

/// Segment an image larger than the network's native resolution by
/// sliding a patch window, averaging probabilities where patches
/// overlap. The last row/column of patches is flushed to the image
/// border so every pixel is covered.
pub fn patch_infer<E: Elem>(
    net: &UNet<E>,
    schedule: &NoiseSchedule,
    image: &Tensor<E>,
    sampler: Sampler,
    config: &PatchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>> {
    if config.stride == 0 || config.stride > config.patch {
        return Err(Error::Config(
            "patch stride must be in 1..=patch".into(),
        ));
    }
    let image = as_batched(image)?;
    let (n, c, h, w) = (
        image.shape()[0],
        image.shape()[1],
        image.shape()[2],
        image.shape()[3],
    );
    if n != 1 {
        return Err(Error::shape("patch inference handles one image at a time"));
    }
    let p = config.patch;
    if p > h || p > w {
        return Err(Error::Config(format!(
            "patch {p} exceeds image extent {h}x{w}"
        )));
    }

    let origins = |extent: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..).map(|i| i * config.stride).take_while(|&o| o + p < extent).collect();
        v.push(extent - p); // flush the final patch to the border
        v
    };

    let classes = net.config.classes;
    let mut acc = vec![0.0f64; classes * h * w];
    let mut weight = vec![0.0f64; h * w];
    for &oy in &origins(h) {
        for &ox in &origins(w) {
            let patch_img = crop(&image, c, h, w, oy, ox, p)?;
            let trace = sample(net, schedule, &patch_img, sampler, None, rng)?;
            let probs = trace.final_probs();
            for cc in 0..classes {
                for py in 0..p {
                    for px in 0..p {
                        let src = (cc * p + py) * p + px;
                        let dst = (cc * h + oy + py) * w + ox + px;
                        acc[dst] += probs.data()[src].to_f64();
                    }
                }
            }
            for py in 0..p {
                for px in 0..p {
                    weight[(oy + py) * w + ox + px] += 1.0;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(classes * h * w);
    for cc in 0..classes {
        for i in 0..h * w {
            out.push(E::from_f64(acc[cc * h * w + i] / weight[i]));
        }
    }
    Tensor::new(vec![1, classes, h, w], out)
}

fn crop<E: Elem>(
    image: &Tensor<E>,
    c: usize,
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    p: usize,
) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(c * p * p);
    for cc in 0..c {
        for py in 0..p {
            let row = (cc * h + oy + py) * w + ox;
            data.extend_from_slice(&image.data()[row..row + p]);
        }
    }
    Tensor::new(vec![1, c, p, p], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;
    use crate::schedule::NoiseSchedule;
    use rand::SeedableRng;

    fn tiny_net(with_self_cond: bool) -> UNet<f64> {
        let config = UNetConfig {
            image_channels: 1,
            classes: 2,
            widths: vec![2, 3],
            time_embed_dim: 4,
            with_transformer: false,
            with_self_cond,
        };
        let mut net = UNet::new(config, 7).unwrap();
        // Non-zero head so predictions depend on the input.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["head.w", "head.b"] {
            let t = net.params.get_mut(name).unwrap();
            *t = Tensor::randn(t.shape(), &mut rng).scale(0.3);
        }
        net
    }

    fn sub_schedule(k: usize) -> NoiseSchedule {
        let parent = NoiseSchedule::linear(20, 1e-4, 2e-2).unwrap();
        parent.resample(&parent.uniform_indices(k).unwrap()).unwrap()
    }

    #[test]
    fn ddim_is_bit_reproducible_given_initial_noise() {
        let net = tiny_net(false);
        let s = sub_schedule(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let init = Tensor::randn(&[1, 2, 4, 4], &mut rng);

        // Different RNG streams: DDIM must not consult them after x_K.
        let mut rng_a = ChaCha8Rng::seed_from_u64(100);
        let mut rng_b = ChaCha8Rng::seed_from_u64(200);
        let a = sample(&net, &s, &image, Sampler::Ddim, Some(init.clone()), &mut rng_a).unwrap();
        let b = sample(&net, &s, &image, Sampler::Ddim, Some(init), &mut rng_b).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.final_probs(), b.final_probs());
    }

    #[test]
    fn ddpm_depends_on_rng_but_is_seed_deterministic() {
        let net = tiny_net(false);
        let s = sub_schedule(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            sample(&net, &s, &image, Sampler::Ddpm, None, &mut r).unwrap().x0
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn trace_records_every_step_in_reverse_order() {
        let net = tiny_net(false);
        let s = sub_schedule(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Tensor::randn(&[1, 4, 4], &mut rng); // rank-3 accepted
        let trace = sample(&net, &s, &image, Sampler::Ddpm, None, &mut rng).unwrap();
        assert_eq!(trace.steps.len(), 4);
        for (i, step) in trace.steps.iter().enumerate() {
            assert_eq!(step.k, 4 - i);
            assert_eq!(step.label, s.label(step.k));
            // Probabilities sum to one per pixel.
            let p = &step.probs;
            for px in 0..16 {
                let total: f64 = (0..2).map(|c| p.data()[c * 16 + px]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_cond_chains_previous_estimate() {
        let net = tiny_net(true);
        let s = sub_schedule(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let trace = sample(&net, &s, &image, Sampler::Ddpm, None, &mut rng).unwrap();
        let first_sc = trace.steps[0].self_cond.as_ref().unwrap();
        assert!(first_sc.data().iter().all(|&v| v == 0.0));
        for w in trace.steps.windows(2) {
            assert_eq!(w[1].self_cond.as_ref().unwrap(), &w[0].x0_hat);
        }
    }

    #[test]
    fn ensemble_is_member_mean_and_variance_matches() {
        let a = Tensor::<f64>::full(&[1, 2, 2, 2], 0.2);
        let b = Tensor::<f64>::full(&[1, 2, 2, 2], 0.6);
        let mean = ensemble_probs(&[a.clone(), b.clone()]).unwrap();
        assert!(mean.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let sv = seed_variance(&[a.clone(), b]).unwrap();
        assert!(sv.variance.data().iter().all(|&v| (v - 0.04).abs() < 1e-12));
        let sv0 = seed_variance(&[a.clone(), a.clone(), a]).unwrap();
        assert!(sv0.variance.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn sample_seeds_is_deterministic_per_seed() {
        let net = tiny_net(false);
        let s = sub_schedule(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let a = sample_seeds(&net, &s, &image, Sampler::Ddpm, &[1, 2, 3]).unwrap();
        let b = sample_seeds(&net, &s, &image, Sampler::Ddpm, &[1, 2, 3]).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn patch_covering_whole_image_matches_direct_sampling() {
        let net = tiny_net(false);
        let s = sub_schedule(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let config = PatchConfig { patch: 4, stride: 4 };
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let patched = patch_infer(&net, &s, &image, Sampler::Ddpm, &config, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let direct = sample(&net, &s, &image, Sampler::Ddpm, None, &mut r2).unwrap();
        assert!(patched.max_abs_diff(direct.final_probs()) < 1e-12);
    }

    #[test]
    fn patch_overlap_average_stays_a_distribution() {
        let net = tiny_net(false);
        let s = sub_schedule(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = Tensor::randn(&[1, 1, 6, 6], &mut rng);
        let config = PatchConfig { patch: 4, stride: 2 };
        let probs = patch_infer(&net, &s, &image, Sampler::Ddpm, &config, &mut rng).unwrap();
        assert_eq!(probs.shape(), &[1, 2, 6, 6]);
        for px in 0..36 {
            let total: f64 = (0..2).map(|c| probs.data()[c * 36 + px]).sum();
            assert!((total - 1.0).abs() < 1e-12, "pixel {px} sums to {total}");
        }
    }

    #[test]
    fn patch_config_validation() {
        let net = tiny_net(false);
        let s = sub_schedule(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = Tensor::<f64>::randn(&[1, 1, 6, 6], &mut rng);
        for config in [
            PatchConfig { patch: 4, stride: 0 },
            PatchConfig { patch: 4, stride: 5 },
            PatchConfig { patch: 8, stride: 2 },
        ] {
            assert!(patch_infer(&net, &s, &image, Sampler::Ddpm, &config, &mut rng).is_err());
        }
    }

    #[test]
    fn sampler_parses_from_str() {
        assert_eq!("ddpm".parse::<Sampler>().unwrap(), Sampler::Ddpm);
        assert_eq!("ddim".parse::<Sampler>().unwrap(), Sampler::Ddim);
        assert!("other".parse::<Sampler>().is_err());
    }
}
