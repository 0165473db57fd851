//! The time-frequency representation the diffusion model operates on.
//!
//! Each 160x6 window is padded symmetrically with 10 zeros per side, sliced
//! into 22-sample Hann frames at hop 2 (exactly 80 frames), and transformed
//! with a 22-point DFT kept one-sided (12 bins). Real and imaginary parts of
//! the six axes form the 12 channels of a 12x12x80 tensor. The inverse applies
//! per-frame inverse DFTs with windowed overlap-add and squared-window
//! normalization, then discards the padding; on valid spectrograms the
//! round trip is exact to double precision.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Window, AXES, WINDOW_LEN};

/// STFT frame length (and DFT size).
pub const FFT_LEN: usize = 22;
/// Hop between frames (overlap 20).
pub const HOP: usize = 2;
/// Zero padding on each side of the 160-sample signal.
pub const PAD: usize = 10;
/// One-sided bin count: 22/2 + 1.
pub const FREQ_BINS: usize = 12;
/// Frame count: floor((180 - 22)/2) + 1.
pub const FRAMES: usize = 80;
/// Spectrogram channels: real and imaginary parts of the six axes.
pub const CHANNELS: usize = 2 * AXES;

const PADDED_LEN: usize = WINDOW_LEN + 2 * PAD;

/// The 12-channel x 12-bin x 80-frame tensor the diffusion model sees.
///
/// Channels 0..6 hold real parts of axes 0..6, channels 6..12 the imaginary
/// parts. For spectrograms produced by [`stft`] the imaginary DC row (bin 0)
/// and Nyquist row (bin 11) are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Shape [channel, freq, frame].
    pub data: Array3<f64>,
}

impl Spectrogram {
    pub fn zeros() -> Spectrogram {
        Spectrogram {
            data: Array3::zeros((CHANNELS, FREQ_BINS, FRAMES)),
        }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Spectrogram> {
        if data.dim() != (CHANNELS, FREQ_BINS, FRAMES) {
            return Err(Error::Shape(format!(
                "spectrogram must be {CHANNELS}x{FREQ_BINS}x{FRAMES}, got {:?}",
                data.dim()
            )));
        }
        Ok(Spectrogram { data })
    }

    /// True for cells that are structurally zero in any real-input STFT:
    /// the imaginary parts of the DC and Nyquist bins.
    pub fn is_structural_cell(channel: usize, freq: usize) -> bool {
        channel >= AXES && (freq == 0 || freq == FREQ_BINS - 1)
    }

    /// Zero the structurally-zero rows (applied to generated tensors).
    pub fn zero_structural_rows(&mut self) {
        for c in AXES..CHANNELS {
            for m in 0..FRAMES {
                self.data[[c, 0, m]] = 0.0;
                self.data[[c, FREQ_BINS - 1, m]] = 0.0;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Periodic Hann window of length 22.
fn hann() -> [f64; FFT_LEN] {
    let mut w = [0.0; FFT_LEN];
    for (n, v) in w.iter_mut().enumerate() {
        *v = 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / FFT_LEN as f64).cos());
    }
    w
}

/// DFT twiddle tables: cos/sin(2 pi k n / 22) for k in 0..12, n in 0..22.
/// Angles that are exact multiples of pi are pinned to exact values so the
/// DC and Nyquist bins of real input have identically zero imaginary parts.
fn twiddles() -> (Vec<[f64; FFT_LEN]>, Vec<[f64; FFT_LEN]>) {
    let mut cos_t = vec![[0.0; FFT_LEN]; FREQ_BINS];
    let mut sin_t = vec![[0.0; FFT_LEN]; FREQ_BINS];
    for k in 0..FREQ_BINS {
        for n in 0..FFT_LEN {
            match (k * n) % FFT_LEN {
                0 => {
                    cos_t[k][n] = 1.0;
                    sin_t[k][n] = 0.0;
                }
                r if r == FFT_LEN / 2 => {
                    cos_t[k][n] = -1.0;
                    sin_t[k][n] = 0.0;
                }
                _ => {
                    let arg = std::f64::consts::TAU * (k * n) as f64 / FFT_LEN as f64;
                    cos_t[k][n] = arg.cos();
                    sin_t[k][n] = arg.sin();
                }
            }
        }
    }
    (cos_t, sin_t)
}

/// Forward transform of one standardized window.
pub fn stft(window: &Array2<f64>) -> Result<Spectrogram> {
    if window.nrows() != WINDOW_LEN || window.ncols() != AXES {
        return Err(Error::Shape(format!(
            "stft input must be {WINDOW_LEN}x{AXES}, got {}x{}",
            window.nrows(),
            window.ncols()
        )));
    }
    if !window.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("stft input contains non-finite values".into()));
    }
    let w = hann();
    let (cos_t, sin_t) = twiddles();
    let mut spec = Spectrogram::zeros();
    let mut padded = [0.0; PADDED_LEN];
    let mut frame = [0.0; FFT_LEN];
    for axis in 0..AXES {
        padded.fill(0.0);
        for t in 0..WINDOW_LEN {
            padded[PAD + t] = window[[t, axis]];
        }
        for m in 0..FRAMES {
            let start = m * HOP;
            for n in 0..FFT_LEN {
                frame[n] = w[n] * padded[start + n];
            }
            for k in 0..FREQ_BINS {
                let mut re = 0.0;
                let mut im = 0.0;
                for n in 0..FFT_LEN {
                    re += frame[n] * cos_t[k][n];
                    im -= frame[n] * sin_t[k][n];
                }
                spec.data[[axis, k, m]] = re;
                spec.data[[axis + AXES, k, m]] = im;
            }
        }
    }
    Ok(spec)
}

/// Inverse transform back to a 160x6 window.
///
/// Frames are rebuilt by an inverse 22-point DFT of the Hermitian extension
/// of the 12 one-sided bins, then combined by windowed overlap-add with
/// squared-window normalization before the 10-sample pads are discarded.
pub fn istft(spec: &Spectrogram) -> Result<Array2<f64>> {
    if spec.data.dim() != (CHANNELS, FREQ_BINS, FRAMES) {
        return Err(Error::Shape(format!(
            "istft input must be {CHANNELS}x{FREQ_BINS}x{FRAMES}, got {:?}",
            spec.data.dim()
        )));
    }
    let w = hann();
    let (cos_t, sin_t) = twiddles();

    // Squared-window normalization is shared by every axis.
    let mut denom = [0.0; PADDED_LEN];
    for m in 0..FRAMES {
        let start = m * HOP;
        for n in 0..FFT_LEN {
            denom[start + n] += w[n] * w[n];
        }
    }

    let mut out = Array2::zeros((WINDOW_LEN, AXES));
    let mut numer = [0.0; PADDED_LEN];
    let mut frame = [0.0; FFT_LEN];
    for axis in 0..AXES {
        numer.fill(0.0);
        for m in 0..FRAMES {
            // Real inverse DFT: bins 1..11 are doubled by Hermitian symmetry,
            // DC and Nyquist contribute their real parts once.
            let dc = spec.data[[axis, 0, m]];
            let nyq = spec.data[[axis, FREQ_BINS - 1, m]];
            for (n, f) in frame.iter_mut().enumerate() {
                let mut acc = dc + if n % 2 == 0 { nyq } else { -nyq };
                for k in 1..FREQ_BINS - 1 {
                    let re = spec.data[[axis, k, m]];
                    let im = spec.data[[axis + AXES, k, m]];
                    acc += 2.0 * (re * cos_t[k][n] - im * sin_t[k][n]);
                }
                *f = acc / FFT_LEN as f64;
            }
            let start = m * HOP;
            for n in 0..FFT_LEN {
                numer[start + n] += w[n] * frame[n];
            }
        }
        for t in 0..WINDOW_LEN {
            let pos = PAD + t;
            if denom[pos] <= 0.0 {
                return Err(Error::Numerical(format!(
                    "overlap-add normalization vanished at sample {t}"
                )));
            }
            out[[t, axis]] = numer[pos] / denom[pos];
        }
    }
    Ok(out)
}

/// Transform a batch of windows, keeping labels.
pub fn stft_windows(windows: &[Window]) -> Result<Vec<Spectrogram>> {
    windows.iter().map(|w| stft(&w.data)).collect()
}

// ---------------------------------------------------------------------------
// Per-channel scaling
// ---------------------------------------------------------------------------

/// Per-channel standardization statistics for spectrogram tensors.
///
/// The structurally-zero rows (imaginary DC/Nyquist) are excluded from the
/// statistics and pass through [`scale`]/[`unscale`] unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralScaler {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

/// Cells of one channel that participate in scaling.
fn active_freqs(channel: usize) -> std::ops::Range<usize> {
    if channel >= AXES {
        1..FREQ_BINS - 1
    } else {
        0..FREQ_BINS
    }
}

/// Fit per-channel mean/std over all non-structural cells of all spectrograms.
pub fn fit_scaler(specs: &[Spectrogram]) -> Result<SpectralScaler> {
    if specs.is_empty() {
        return Err(Error::InsufficientData("no spectrograms to fit scaler on".into()));
    }
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        let freqs = active_freqs(c);
        let count = (specs.len() * freqs.len() * FRAMES) as f64;
        let mut sum = 0.0;
        for s in specs {
            for k in freqs.clone() {
                for m in 0..FRAMES {
                    sum += s.data[[c, k, m]];
                }
            }
        }
        let mu = sum / count;
        let mut sq = 0.0;
        for s in specs {
            for k in freqs.clone() {
                for m in 0..FRAMES {
                    let d = s.data[[c, k, m]] - mu;
                    sq += d * d;
                }
            }
        }
        let sigma = (sq / count).sqrt();
        if sigma < 1e-9 {
            return Err(Error::DegenerateChannel {
                channel: c,
                std: sigma,
            });
        }
        mean[c] = mu;
        std[c] = sigma;
    }
    Ok(SpectralScaler { mean, std })
}

/// Standardize every non-structural cell per channel.
pub fn scale(spec: &Spectrogram, scaler: &SpectralScaler) -> Spectrogram {
    let mut out = spec.clone();
    for c in 0..CHANNELS {
        for k in active_freqs(c) {
            for m in 0..FRAMES {
                out.data[[c, k, m]] = (spec.data[[c, k, m]] - scaler.mean[c]) / scaler.std[c];
            }
        }
    }
    out
}

/// Inverse of [`scale`].
pub fn unscale(spec: &Spectrogram, scaler: &SpectralScaler) -> Spectrogram {
    let mut out = spec.clone();
    for c in 0..CHANNELS {
        for k in active_freqs(c) {
            for m in 0..FRAMES {
                out.data[[c, k, m]] = spec.data[[c, k, m]] * scaler.std[c] + scaler.mean[c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::types::SAMPLE_RATE_HZ;
    use rand::Rng;

    fn random_window(seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, &["spectral-test"]);
        Array2::from_shape_fn((WINDOW_LEN, AXES), |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn stft_shape_is_12x12x80() {
        let spec = stft(&random_window(1)).unwrap();
        assert_eq!(spec.data.dim(), (CHANNELS, FREQ_BINS, FRAMES));
    }

    #[test]
    fn zero_window_maps_to_zero_spectrogram_and_back() {
        let zero = Array2::zeros((WINDOW_LEN, AXES));
        let spec = stft(&zero).unwrap();
        assert!(spec.data.iter().all(|&v| v == 0.0));
        let back = istft(&Spectrogram::zeros()).unwrap();
        assert!(back.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn structural_rows_are_zero() {
        let spec = stft(&random_window(2)).unwrap();
        for c in AXES..CHANNELS {
            for m in 0..FRAMES {
                assert_eq!(spec.data[[c, 0, m]], 0.0);
                assert_eq!(spec.data[[c, FREQ_BINS - 1, m]], 0.0);
            }
        }
    }

    /// Independent textbook DFT of one frame: window, pad and transform are
    /// all re-derived here rather than shared with the implementation.
    fn oracle_frame_dft(window: &Array2<f64>, axis: usize, frame: usize) -> Vec<(f64, f64)> {
        let mut padded = vec![0.0; WINDOW_LEN + 2 * PAD];
        for t in 0..WINDOW_LEN {
            padded[PAD + t] = window[[t, axis]];
        }
        let start = frame * HOP;
        (0..FREQ_BINS)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for n in 0..FFT_LEN {
                    let taper =
                        0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / FFT_LEN as f64).cos());
                    let x = taper * padded[start + n];
                    let arg = -std::f64::consts::TAU * (k * n) as f64 / FFT_LEN as f64;
                    re += x * arg.cos();
                    im += x * arg.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn bin_aligned_cosine_concentrates_in_its_bin() {
        // Pure cosine at 50*k/22 Hz lands exactly on bin k.
        for target_bin in [1usize, 3, 5] {
            let freq = SAMPLE_RATE_HZ as f64 * target_bin as f64 / FFT_LEN as f64;
            let mut window = Array2::zeros((WINDOW_LEN, AXES));
            for t in 0..WINDOW_LEN {
                let phase = std::f64::consts::TAU * freq * t as f64 / SAMPLE_RATE_HZ as f64;
                for a in 0..AXES {
                    window[[t, a]] = phase.cos();
                }
            }
            let spec = stft(&window).unwrap();
            // Compare against the brute-force DFT oracle on every frame.
            for m in 0..FRAMES {
                let oracle = oracle_frame_dft(&window, 0, m);
                for (k, &(re, im)) in oracle.iter().enumerate() {
                    assert!((spec.data[[0, k, m]] - re).abs() < 1e-9);
                    assert!((spec.data[[AXES, k, m]] - im).abs() < 1e-9);
                }
            }
            // Fully interior frames see an unbroken sinusoid: the energy peak
            // must sit exactly on the target bin.
            for m in (PAD / HOP + 1)..(FRAMES - PAD / HOP - 1) {
                let power: Vec<f64> = (0..FREQ_BINS)
                    .map(|k| {
                        spec.data[[0, k, m]].powi(2) + spec.data[[AXES, k, m]].powi(2)
                    })
                    .collect();
                let max_bin = power
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert_eq!(max_bin, target_bin, "frame {m}");
            }
        }
    }

    #[test]
    fn round_trip_is_exact_to_1e8() {
        let mut max_err: f64 = 0.0;
        for seed in 0..50 {
            let window = random_window(seed);
            let back = istft(&stft(&window).unwrap()).unwrap();
            for (a, b) in window.iter().zip(back.iter()) {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err <= 1e-8, "round-trip error {max_err:e}");
    }

    #[test]
    fn stft_and_istft_are_linear() {
        let x = random_window(10);
        let y = random_window(11);
        let (a, b) = (1.75, -0.4);
        let combo = &x * a + &y * b;
        let sx = stft(&x).unwrap();
        let sy = stft(&y).unwrap();
        let s_combo = stft(&combo).unwrap();
        let lin = &sx.data * a + &sy.data * b;
        for (u, v) in s_combo.data.iter().zip(lin.iter()) {
            assert!((u - v).abs() < 1e-8);
        }
        let inv_combo =
            istft(&Spectrogram::from_array(lin).unwrap()).unwrap();
        let ix = istft(&sx).unwrap();
        let iy = istft(&sy).unwrap();
        for ((u, vx), vy) in inv_combo.iter().zip(ix.iter()).zip(iy.iter()) {
            assert!((u - (a * vx + b * vy)).abs() < 1e-8);
        }
    }

    #[test]
    fn scaler_round_trip_and_population_stats() {
        let specs: Vec<Spectrogram> = (0..8)
            .map(|s| stft(&random_window(100 + s)).unwrap())
            .collect();
        let scaler = fit_scaler(&specs).unwrap();
        let scaled: Vec<Spectrogram> = specs.iter().map(|s| scale(s, &scaler)).collect();

        // Identity round trip.
        for (orig, s) in specs.iter().zip(&scaled) {
            let back = unscale(s, &scaler);
            for (a, b) in orig.data.iter().zip(back.data.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // Scaled population mean ~0 per channel over active cells.
        for c in 0..CHANNELS {
            let freqs = active_freqs(c);
            let mut sum = 0.0;
            let mut count = 0usize;
            for s in &scaled {
                for k in freqs.clone() {
                    for m in 0..FRAMES {
                        sum += s.data[[c, k, m]];
                        count += 1;
                    }
                }
            }
            assert!((sum / count as f64).abs() < 1e-9);
        }
        // Structural rows pass through unchanged (still exactly zero).
        for s in &scaled {
            for c in AXES..CHANNELS {
                for m in 0..FRAMES {
                    assert_eq!(s.data[[c, 0, m]], 0.0);
                    assert_eq!(s.data[[c, FREQ_BINS - 1, m]], 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let mut specs: Vec<Spectrogram> = (0..3)
            .map(|s| stft(&random_window(200 + s)).unwrap())
            .collect();
        for s in &mut specs {
            for k in 0..FREQ_BINS {
                for m in 0..FRAMES {
                    s.data[[2, k, m]] = 7.5;
                }
            }
        }
        match fit_scaler(&specs).unwrap_err() {
            Error::DegenerateChannel { channel, .. } => assert_eq!(channel, 2),
            other => panic!("expected degenerate channel, got {other:?}"),
        }
    }
}
