//! Forward noising and ancestral sampling with separate accelerometer and
//! gyroscope noise schedules.
//!
//! The schedule follows the usual discrete-time formulation: at step t the
//! signal is shrunk by sqrt(1 - beta_t) and perturbed with Gaussian noise of
//! variance beta_t. Because the two sensor types respond differently to the
//! same diffusion rate, each spectrogram channel is noised with the schedule
//! of its sensor group.

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward, DenoiserModel};
use crate::rng::substream;
use crate::spectral::{Spectrogram, CHANNELS, FRAMES, FREQ_BINS};
use crate::types::AXES;

/// Sensor group of a spectrogram channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensorGroup {
    Acc,
    Gyro,
}

impl SensorGroup {
    pub const ALL: [SensorGroup; 2] = [SensorGroup::Acc, SensorGroup::Gyro];

    fn index(self) -> usize {
        match self {
            SensorGroup::Acc => 0,
            SensorGroup::Gyro => 1,
        }
    }
}

/// Channels 0-2 and 6-8 are the real/imaginary parts of the accelerometer
/// axes; 3-5 and 9-11 belong to the gyroscope.
pub fn channel_group(channel: usize) -> SensorGroup {
    debug_assert!(channel < CHANNELS);
    if channel % AXES < 3 {
        SensorGroup::Acc
    } else {
        SensorGroup::Gyro
    }
}

/// Parameters a schedule is rebuilt from; the derived arrays are recomputed
/// on load rather than persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_steps: usize,
    pub beta_end_acc: f64,
    pub beta_end_gyro: f64,
    /// beta at t=0 as a fraction of the end value; 1.0 gives a constant rate.
    pub beta_start_fraction: f64,
}

impl ScheduleSpec {
    /// Paper-scale defaults: T = 3000, beta_acc = 9e-4, beta_gyro = 6e-4.
    pub fn full() -> ScheduleSpec {
        ScheduleSpec {
            t_steps: 3000,
            beta_end_acc: 9e-4,
            beta_end_gyro: 6e-4,
            beta_start_fraction: 0.01,
        }
    }
}

/// Per-group beta/alpha/alpha-bar arrays over T diffusion steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub spec: ScheduleSpec,
    beta: [Vec<f64>; 2],
    alpha: [Vec<f64>; 2],
    alpha_bar: [Vec<f64>; 2],
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.spec.t_steps
    }

    pub fn beta(&self, group: SensorGroup, t: usize) -> f64 {
        self.beta[group.index()][t]
    }

    pub fn alpha(&self, group: SensorGroup, t: usize) -> f64 {
        self.alpha[group.index()][t]
    }

    pub fn alpha_bar(&self, group: SensorGroup, t: usize) -> f64 {
        self.alpha_bar[group.index()][t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.spec.t_steps {
            return Err(Error::Domain(format!(
                "diffusion step {t} out of range [0, {})",
                self.spec.t_steps
            )));
        }
        Ok(())
    }
}

/// Build the linear schedule: beta ramps from `fraction * beta_end` at t=0
/// to `beta_end` at t=T-1, independently per sensor group.
pub fn build_linear_schedule(spec: ScheduleSpec) -> Result<NoiseSchedule> {
    if spec.t_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(spec.beta_start_fraction > 0.0 && spec.beta_start_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "beta_start_fraction must be in (0, 1], got {}",
            spec.beta_start_fraction
        )));
    }
    for (name, end) in [("acc", spec.beta_end_acc), ("gyro", spec.beta_end_gyro)] {
        if !(end > 0.0 && end < 1.0) {
            return Err(Error::Config(format!(
                "beta_end_{name} must be in (0, 1), got {end}"
            )));
        }
    }
    let ramp = |end: f64| -> Vec<f64> {
        let start = spec.beta_start_fraction * end;
        (0..spec.t_steps)
            .map(|t| {
                if spec.t_steps == 1 {
                    end
                } else {
                    start + (end - start) * t as f64 / (spec.t_steps - 1) as f64
                }
            })
            .collect()
    };
    let beta = [ramp(spec.beta_end_acc), ramp(spec.beta_end_gyro)];
    let alpha = [
        beta[0].iter().map(|b| 1.0 - b).collect::<Vec<_>>(),
        beta[1].iter().map(|b| 1.0 - b).collect::<Vec<_>>(),
    ];
    let cumprod = |a: &[f64]| {
        let mut acc = 1.0;
        a.iter()
            .map(|&v| {
                acc *= v;
                acc
            })
            .collect::<Vec<_>>()
    };
    let alpha_bar = [cumprod(&alpha[0]), cumprod(&alpha[1])];
    Ok(NoiseSchedule {
        spec,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Draw a spectrogram-shaped standard normal tensor from `rng`.
pub fn standard_normal_tensor<R: Rng>(rng: &mut R) -> Spectrogram {
    let data = Array3::from_shape_simple_fn((CHANNELS, FREQ_BINS, FRAMES), || {
        rng.sample(StandardNormal)
    });
    Spectrogram { data }
}

fn per_channel<F: FnMut(usize) -> (f64, f64)>(
    a: &Spectrogram,
    b: &Spectrogram,
    mut coeffs: F,
) -> Spectrogram {
    let mut out = Spectrogram::zeros();
    for c in 0..CHANNELS {
        let (ca, cb) = coeffs(c);
        for k in 0..FREQ_BINS {
            for m in 0..FRAMES {
                out.data[[c, k, m]] = ca * a.data[[c, k, m]] + cb * b.data[[c, k, m]];
            }
        }
    }
    out
}

/// One forward noising step:
/// x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * noise, per sensor group.
pub fn forward_diffuse_step(
    x_prev: &Spectrogram,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Spectrogram,
) -> Result<Spectrogram> {
    schedule.check_step(t)?;
    Ok(per_channel(x_prev, noise, |c| {
        let g = channel_group(c);
        let b = schedule.beta(g, t);
        ((1.0 - b).sqrt(), b.sqrt())
    }))
}

/// Closed form of t+1 iterated forward steps:
/// x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * noise.
pub fn forward_diffuse_closed(
    x0: &Spectrogram,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Spectrogram,
) -> Result<Spectrogram> {
    schedule.check_step(t)?;
    Ok(per_channel(x0, noise, |c| {
        let g = channel_group(c);
        let ab = schedule.alpha_bar(g, t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }))
}

/// One ancestral denoising step from x_t to x_{t-1}:
/// x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
///           + sigma_t * noise,  sigma_t = sqrt(beta_t), sigma_0 = 0.
pub fn reverse_step(
    x_t: &Spectrogram,
    t: usize,
    eps_hat: &Spectrogram,
    schedule: &NoiseSchedule,
    noise: &Spectrogram,
) -> Result<Spectrogram> {
    schedule.check_step(t)?;
    let mean = per_channel(x_t, eps_hat, |c| {
        let g = channel_group(c);
        let alpha = schedule.alpha(g, t);
        let beta = schedule.beta(g, t);
        let ab = schedule.alpha_bar(g, t);
        let inv = 1.0 / alpha.sqrt();
        (inv, -inv * beta / (1.0 - ab).sqrt())
    });
    if t == 0 {
        return Ok(mean);
    }
    Ok(per_channel(&mean, noise, |c| {
        let g = channel_group(c);
        (1.0, schedule.beta(g, t).sqrt())
    }))
}

/// Ancestral sampling: run the reverse process from pure noise for `n`
/// independent chains. Chains derive their random streams from
/// (seed, chain index), so parallel and serial execution agree bit for bit.
pub fn sample(
    model: &DenoiserModel,
    n: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Spectrogram>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if model.t_steps != schedule.t_steps() {
        return Err(Error::Config(format!(
            "model was trained for T={} but the schedule has T={}",
            model.t_steps,
            schedule.t_steps()
        )));
    }
    (0..n)
        .into_par_iter()
        .map(|chain| {
            let mut rng = substream(seed, &["sample", &format!("chain={chain}")]);
            let mut x = standard_normal_tensor(&mut rng);
            for t in (0..schedule.t_steps()).rev() {
                let eps_hat = forward(model, &x, t)?;
                let noise = if t == 0 {
                    Spectrogram::zeros()
                } else {
                    standard_normal_tensor(&mut rng)
                };
                x = reverse_step(&x, t, &eps_hat, schedule, &noise)?;
            }
            if !x.all_finite() {
                return Err(Error::Numerical(format!(
                    "sampling chain {chain} produced non-finite values"
                )));
            }
            x.zero_structural_rows();
            Ok(x)
        })
        .collect()
}
