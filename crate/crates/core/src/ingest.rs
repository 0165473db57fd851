//! Recording ingestion: parsing, sliding-window segmentation, per-axis
//! standardization and fold construction.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::types::{
    Activity, AxisStats, FoldSpec, RawRecording, Window, AXES, RETAINED_PIDS, SAMPLE_RATE_HZ,
    WINDOW_LEN, WINDOW_SHIFT,
};

/// Minimum per-axis standard deviation accepted by [`fit_stats`].
pub const DEGENERATE_STD: f64 = 1e-9;

/// Windows selected per (participant, activity) for diffusion training.
pub const TRAIN_SUBSET_SIZE: usize = 22;

/// Parse a recording from whitespace-separated text: one sample per line,
/// six decimal fields in order acc_x acc_y acc_z gyro_x gyro_y gyro_z.
pub fn parse_recording<R: BufRead>(
    source: R,
    participant_id: u32,
    activity: Activity,
) -> Result<RawRecording> {
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = 0usize;
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("non-numeric field {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("non-finite value {v}"),
                });
            }
            values.push(v);
            fields += 1;
        }
        if fields != AXES {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {AXES} fields, got {fields}"),
            });
        }
        rows += 1;
    }
    if rows < WINDOW_LEN {
        return Err(Error::TooShort {
            got: rows,
            need: WINDOW_LEN,
        });
    }
    let samples = Array2::from_shape_vec((rows, AXES), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let recording = RawRecording {
        participant_id,
        activity,
        samples,
        sample_rate: SAMPLE_RATE_HZ,
    };
    recording.validate()?;
    Ok(recording)
}

/// Expected number of windows for a recording of `n` samples.
pub fn window_count(n: usize) -> usize {
    if n < WINDOW_LEN {
        0
    } else {
        (n - WINDOW_LEN) / WINDOW_SHIFT + 1
    }
}

/// Cut a recording into 160-sample windows shifted by 40 samples
/// (120-sample overlap between neighbours).
pub fn segment(recording: &RawRecording) -> Result<Vec<Window>> {
    let n = recording.samples.nrows();
    if n < WINDOW_LEN {
        return Err(Error::TooShort {
            got: n,
            need: WINDOW_LEN,
        });
    }
    let mut windows = Vec::with_capacity(window_count(n));
    let mut start = 0usize;
    while start + WINDOW_LEN <= n {
        let data = recording
            .samples
            .slice(ndarray::s![start..start + WINDOW_LEN, ..])
            .to_owned();
        windows.push(Window::new(
            recording.participant_id,
            recording.activity,
            data,
            start,
        )?);
        start += WINDOW_SHIFT;
    }
    debug_assert_eq!(windows.len(), window_count(n));
    Ok(windows)
}

/// Per-axis mean and population standard deviation over all samples of all
/// windows. Axes with std below [`DEGENERATE_STD`] are rejected.
pub fn fit_stats(windows: &[Window]) -> Result<AxisStats> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no windows to fit stats on".into()));
    }
    let n = (windows.len() * WINDOW_LEN) as f64;
    let mut mean = [0.0; AXES];
    let mut std = [0.0; AXES];
    for axis in 0..AXES {
        let mut sum = 0.0;
        for w in windows {
            sum += w.data.column(axis).sum();
        }
        let mu = sum / n;
        let mut sq = 0.0;
        for w in windows {
            for &v in w.data.column(axis) {
                let d = v - mu;
                sq += d * d;
            }
        }
        let sigma = (sq / n).sqrt();
        if sigma < DEGENERATE_STD {
            return Err(Error::DegenerateAxis { axis, std: sigma });
        }
        mean[axis] = mu;
        std[axis] = sigma;
    }
    Ok(AxisStats { mean, std })
}

/// Standardize each axis: (x - mean) / std.
pub fn standardize(windows: &[Window], stats: &AxisStats) -> Vec<Window> {
    windows
        .iter()
        .map(|w| {
            let mut out = w.clone();
            for axis in 0..AXES {
                out.data
                    .column_mut(axis)
                    .mapv_inplace(|v| (v - stats.mean[axis]) / stats.std[axis]);
            }
            out
        })
        .collect()
}

/// Inverse of [`standardize`].
pub fn destandardize(windows: &[Window], stats: &AxisStats) -> Vec<Window> {
    windows
        .iter()
        .map(|w| {
            let mut out = w.clone();
            for axis in 0..AXES {
                out.data
                    .column_mut(axis)
                    .mapv_inplace(|v| v * stats.std[axis] + stats.mean[axis]);
            }
            out
        })
        .collect()
}

/// How the diffusion-training subset is positioned within the available
/// windows of one (participant, activity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetSelection {
    /// The first n windows (the default).
    First,
    /// A contiguous run starting at a seed-derived offset.
    SeededOffset,
}

/// Select `n` windows for diffusion training as a contiguous run. The run
/// offset is 0 for [`SubsetSelection::First`] and seed-derived otherwise;
/// either way the result is deterministic in (windows, n, seed).
pub fn select_training_subset(
    windows: &[Window],
    n: usize,
    selection: SubsetSelection,
    seed: u64,
) -> Result<Vec<Window>> {
    if windows.len() < n {
        return Err(Error::InsufficientData(format!(
            "need {n} windows per (participant, activity), found {}",
            windows.len()
        )));
    }
    let max_offset = windows.len() - n;
    let offset = match selection {
        SubsetSelection::First => 0,
        SubsetSelection::SeededOffset => {
            if max_offset == 0 {
                0
            } else {
                let pid = windows[0].participant_id;
                let act = windows[0].activity.name();
                let mut rng = substream(
                    seed,
                    &["subset-offset", &format!("pid={pid}"), &format!("class={act}")],
                );
                rng.random_range(0..=max_offset)
            }
        }
    };
    Ok(windows[offset..offset + n].to_vec())
}

/// Build the 12 leave-one-subject-out folds.
pub fn make_folds(pids: &[u32]) -> Result<Vec<FoldSpec>> {
    let unique: BTreeSet<u32> = pids.iter().copied().collect();
    if unique.len() != pids.len() {
        return Err(Error::Config("duplicate participant id in fold set".into()));
    }
    if unique != RETAINED_PIDS.iter().copied().collect() {
        return Err(Error::Config(format!(
            "fold construction expects participants {RETAINED_PIDS:?}, got {pids:?}"
        )));
    }
    Ok(pids
        .iter()
        .map(|&held| FoldSpec {
            held_out_pid: held,
            train_pids: pids.iter().copied().filter(|&p| p != held).collect(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Maps every (participant, activity) pair to a recording file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub recordings: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pid: u32,
    pub activity: Activity,
    pub path: PathBuf,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Manifest> {
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        Manifest::from_toml(&text)
    }

    /// Check the full 12-participant x 4-activity grid is present exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for entry in &self.recordings {
            if !RETAINED_PIDS.contains(&entry.pid) {
                return Err(Error::Config(format!(
                    "manifest lists participant {} outside the retained set",
                    entry.pid
                )));
            }
            if !seen.insert((entry.pid, entry.activity)) {
                return Err(Error::Config(format!(
                    "manifest lists ({}, {}) twice",
                    entry.pid,
                    entry.activity.name()
                )));
            }
        }
        let mut missing = Vec::new();
        for &pid in &RETAINED_PIDS {
            for act in Activity::ALL {
                if !seen.contains(&(pid, act)) {
                    missing.push(format!("({pid}, {})", act.name()));
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "manifest incomplete, missing: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    pub fn entry(&self, pid: u32, activity: Activity) -> Option<&ManifestEntry> {
        self.recordings
            .iter()
            .find(|e| e.pid == pid && e.activity == activity)
    }
}
