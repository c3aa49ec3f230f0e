//! Variance schedules for the forward diffusion process: the
//! {beta, alpha, alpha-bar, tilde-beta} family, SNR, resampled
//! sub-schedules, and loss-driven importance sampling over timesteps.

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::VecDeque;

/// Noise schedule over `T` steps. Arrays are indexed by schedule position
/// `k` in `1..=T`; `bar_alpha(0) == 1` by convention so that
/// `tilde_beta(1) == 0` and the final reverse step adds no noise.
///
/// A resampled sub-schedule keeps the parent's timestep labels (for the
/// network's time embedding) in [`NoiseSchedule::label`].
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    bar_alphas: Vec<f64>, // length T + 1, bar_alphas[0] = 1
    tilde_betas: Vec<f64>,
    labels: Vec<usize>,
}

impl NoiseSchedule {
    /// Build a schedule from raw beta increments and timestep labels.
    fn from_betas(betas: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if betas.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::Config("beta values must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut bar_alphas = Vec::with_capacity(betas.len() + 1);
        bar_alphas.push(1.0);
        for &a in &alphas {
            bar_alphas.push(bar_alphas.last().unwrap() * a);
        }
        let tilde_betas: Vec<f64> = (1..=betas.len())
            .map(|t| (1.0 - bar_alphas[t - 1]) / (1.0 - bar_alphas[t]) * betas[t - 1])
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            bar_alphas,
            tilde_betas,
            labels,
        })
    }

    /// Linear beta schedule: `beta_t = beta_min + (t-1)/(T-1) (beta_max - beta_min)`.
    pub fn linear(t_count: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::Config("schedule needs T >= 2".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (1..=t_count)
            .map(|t| beta_min + (t - 1) as f64 / (t_count - 1) as f64 * (beta_max - beta_min))
            .collect();
        Self::from_betas(betas, (1..=t_count).collect())
    }

    /// The paper-scale default: linear beta in [1e-4, 2e-2], T = 1001.
    pub fn default_linear() -> Self {
        Self::linear(1001, 1e-4, 2e-2).expect("valid default schedule")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// Cumulative product of alphas; `bar_alpha(0) == 1`.
    pub fn bar_alpha(&self, k: usize) -> f64 {
        self.bar_alphas[k]
    }

    pub fn tilde_beta(&self, k: usize) -> f64 {
        self.tilde_betas[k - 1]
    }

    pub fn sqrt_bar_alpha(&self, k: usize) -> f64 {
        self.bar_alphas[k].sqrt()
    }

    pub fn sqrt_one_minus_bar_alpha(&self, k: usize) -> f64 {
        (1.0 - self.bar_alphas[k]).sqrt()
    }

    /// Original timestep label for schedule position `k`, used for the
    /// network's time embedding.
    pub fn label(&self, k: usize) -> usize {
        self.labels[k - 1]
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k < 1 || k > self.len() {
            Err(Error::TimestepRange {
                t: k,
                max: self.len(),
            })
        } else {
            Ok(())
        }
    }

    /// `SNR(k) = bar_alpha_k / (1 - bar_alpha_k)`, strictly decreasing in k.
    pub fn snr(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.bar_alphas[k] / (1.0 - self.bar_alphas[k]))
    }

    /// Sub-schedule over strictly increasing positions `indices` with
    /// `beta_k = 1 - bar_alpha_{t_k} / bar_alpha_{t_{k-1}}`, so the
    /// sub-schedule's own alpha-bar matches the parent's at each index.
    pub fn resample(&self, indices: &[usize]) -> Result<NoiseSchedule> {
        if indices.is_empty() {
            return Err(Error::Config("resample needs at least one index".into()));
        }
        let mut prev = 0usize;
        for &t in indices {
            if t < 1 || t > self.len() {
                return Err(Error::TimestepRange {
                    t,
                    max: self.len(),
                });
            }
            if t <= prev && prev != 0 {
                return Err(Error::Config("resample indices must be strictly increasing".into()));
            }
            prev = t;
        }
        let mut betas = Vec::with_capacity(indices.len());
        let mut prev_bar = 1.0;
        for &t in indices {
            let bar = self.bar_alphas[t];
            betas.push(1.0 - bar / prev_bar);
            prev_bar = bar;
        }
        let labels = indices.iter().map(|&t| self.labels[t - 1]).collect();
        NoiseSchedule::from_betas(betas, labels)
    }

    /// Uniformly spaced resample indices including both endpoints; for
    /// T=1001, K=5 this is {1, 251, 501, 751, 1001}.
    pub fn uniform_indices(&self, k_count: usize) -> Result<Vec<usize>> {
        if k_count == 0 || k_count > self.len() {
            return Err(Error::Config(format!(
                "cannot downsample T={} to K={}",
                self.len(),
                k_count
            )));
        }
        if k_count == 1 {
            return Ok(vec![self.len()]);
        }
        let t = self.len();
        Ok((0..k_count)
            .map(|i| 1 + i * (t - 1) / (k_count - 1))
            .collect())
    }

    /// CSV rows for the `schedule-dump` command.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,bar_alpha,tilde_beta,sqrt_bar_alpha,snr\n");
        for k in 1..=self.len() {
            out.push_str(&format!(
                "{},{:.12},{:.12},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                self.label(k),
                self.beta(k),
                self.alpha(k),
                self.bar_alpha(k),
                self.tilde_beta(k),
                self.sqrt_bar_alpha(k),
                self.snr(k).unwrap()
            ));
        }
        out
    }
}

/// Loss-driven importance sampling over timesteps: `t` is drawn with
/// probability proportional to the recent mean loss of its bucket, with
/// a uniform fallback while any bucket still lacks history.
#[derive(Debug, Clone)]
pub struct ImportanceState {
    t_max: usize,
    history: usize,
    buckets: Vec<VecDeque<f64>>,
}

impl ImportanceState {
    pub const DEFAULT_BUCKETS: usize = 100;
    pub const DEFAULT_HISTORY: usize = 10;

    pub fn new(t_max: usize, bucket_count: usize, history: usize) -> Self {
        let b = bucket_count.min(t_max).max(1);
        ImportanceState {
            t_max,
            history: history.max(1),
            buckets: vec![VecDeque::new(); b],
        }
    }

    pub fn with_defaults(t_max: usize) -> Self {
        Self::new(t_max, Self::DEFAULT_BUCKETS, Self::DEFAULT_HISTORY)
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    fn bucket_of(&self, t: usize) -> usize {
        ((t - 1) * self.buckets.len() / self.t_max).min(self.buckets.len() - 1)
    }

    /// Timestep range `[lo, hi]` covered by a bucket.
    fn bucket_range(&self, b: usize) -> (usize, usize) {
        let n = self.buckets.len();
        let lo = b * self.t_max / n + 1;
        let hi = (b + 1) * self.t_max / n;
        (lo, hi.max(lo))
    }

    pub fn is_warm(&self) -> bool {
        self.buckets.iter().all(|q| q.len() >= self.history)
    }

    pub fn bucket_mean(&self, b: usize) -> f64 {
        let q = &self.buckets[b];
        if q.is_empty() {
            0.0
        } else {
            q.iter().sum::<f64>() / q.len() as f64
        }
    }

    pub fn record_loss(&mut self, t: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::NonFinite(format!("importance loss record {loss}")));
        }
        if t < 1 || t > self.t_max {
            return Err(Error::TimestepRange { t, max: self.t_max });
        }
        let b = self.bucket_of(t);
        let q = &mut self.buckets[b];
        if q.len() == self.history {
            q.pop_front();
        }
        q.push_back(loss);
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.sample_bounded(rng, self.t_max)
    }

    /// Sample `t` restricted to `[1, upper]`; rejection on the bucket draw
    /// keeps determinism with a seeded stream.
    pub fn sample_bounded<R: Rng>(&self, rng: &mut R, upper: usize) -> usize {
        let upper = upper.min(self.t_max).max(1);
        if !self.is_warm() {
            return rng.gen_range(1..=upper);
        }
        let weights: Vec<f64> = (0..self.buckets.len()).map(|b| self.bucket_mean(b)).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return rng.gen_range(1..=upper);
        }
        loop {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = self.buckets.len() - 1;
            for (b, w) in weights.iter().enumerate() {
                if u < *w {
                    chosen = b;
                    break;
                }
                u -= w;
            }
            let (lo, hi) = self.bucket_range(chosen);
            if lo > upper {
                continue;
            }
            return rng.gen_range(lo..=hi.min(upper));
        }
    }
}
