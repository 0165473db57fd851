//! Core domain types: recordings, windows, per-axis statistics and folds.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per training window.
pub const WINDOW_LEN: usize = 160;
/// Sensor axes per sample: acc x/y/z then gyro x/y/z.
pub const AXES: usize = 6;
/// Shift between consecutive windows (overlap 120).
pub const WINDOW_SHIFT: usize = 40;
/// Recording sample rate in Hz.
pub const SAMPLE_RATE_HZ: u32 = 50;

/// Participant IDs retained after dropping participants with missing
/// activities.
pub const RETAINED_PIDS: [u32; 12] = [1, 2, 3, 5, 8, 9, 10, 11, 12, 13, 14, 16];

/// The four target activities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Activity {
    Walking,
    Running,
    JumpUp,
    Cycling,
}

impl Activity {
    pub const ALL: [Activity; 4] = [
        Activity::Walking,
        Activity::Running,
        Activity::JumpUp,
        Activity::Cycling,
    ];

    /// Stable class index in [0, 4).
    pub fn index(self) -> usize {
        match self {
            Activity::Walking => 0,
            Activity::Running => 1,
            Activity::JumpUp => 2,
            Activity::Cycling => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Activity> {
        Activity::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Activity::Walking => "Walking",
            Activity::Running => "Running",
            Activity::JumpUp => "JumpUp",
            Activity::Cycling => "Cycling",
        }
    }

    pub fn parse(s: &str) -> Result<Activity> {
        match s {
            "Walking" => Ok(Activity::Walking),
            "Running" => Ok(Activity::Running),
            "JumpUp" => Ok(Activity::JumpUp),
            "Cycling" => Ok(Activity::Cycling),
            other => Err(Error::Config(format!("unknown activity {other:?}"))),
        }
    }
}

/// A full single-IMU recording of one participant performing one activity.
#[derive(Debug, Clone)]
pub struct RawRecording {
    pub participant_id: u32,
    pub activity: Activity,
    /// N x 6 samples: acc_x acc_y acc_z [m/s^2], gyro_x gyro_y gyro_z [rad/s].
    pub samples: Array2<f64>,
    pub sample_rate: u32,
}

impl RawRecording {
    pub fn validate(&self) -> Result<()> {
        if self.samples.ncols() != AXES {
            return Err(Error::Shape(format!(
                "recording must have {AXES} columns, got {}",
                self.samples.ncols()
            )));
        }
        if self.samples.nrows() < WINDOW_LEN {
            return Err(Error::TooShort {
                got: self.samples.nrows(),
                need: WINDOW_LEN,
            });
        }
        if self.sample_rate != SAMPLE_RATE_HZ {
            return Err(Error::Config(format!(
                "expected {SAMPLE_RATE_HZ} Hz recording, got {} Hz",
                self.sample_rate
            )));
        }
        if !self.samples.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("recording contains non-finite values".into()));
        }
        Ok(())
    }
}

/// One 160x6 sensor sequence, the unit of classification and DTW analysis.
#[derive(Debug, Clone)]
pub struct Window {
    pub participant_id: u32,
    pub activity: Activity,
    /// 160 x 6 matrix, same axis order as the recording.
    pub data: Array2<f64>,
    /// Sample index of the window start in its source recording; for synthetic
    /// windows this carries the generation-order index instead.
    pub source_offset: usize,
    pub synthetic: bool,
}

impl Window {
    pub fn new(
        participant_id: u32,
        activity: Activity,
        data: Array2<f64>,
        source_offset: usize,
    ) -> Result<Window> {
        if data.nrows() != WINDOW_LEN || data.ncols() != AXES {
            return Err(Error::Shape(format!(
                "window must be {WINDOW_LEN}x{AXES}, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("window contains non-finite values".into()));
        }
        Ok(Window {
            participant_id,
            activity,
            data,
            source_offset,
            synthetic: false,
        })
    }
}

/// Per-axis mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean: [f64; AXES],
    pub std: [f64; AXES],
}

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub held_out_pid: u32,
    pub train_pids: Vec<u32>,
}
