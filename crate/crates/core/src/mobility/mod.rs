//! Region grid, trajectories and labeled users; dataset files, splitting and
//! the synthetic mobility generator.

mod context;
mod io;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use context::{context_features, day_of_week, is_weekend, CONTEXT_DIM};
pub use io::{
    load_dataset, read_grid, write_dataset, GRID_FILE, LABEL_FILE, SYNTH_META_FILE,
    TRAJECTORY_FILE,
};
pub use split::{split_users, DatasetSplit, SplitFractions};
pub use synth::{generate_synthetic, write_synth_meta, SynthConfig, SynthMeta, SyntheticDataset};

/// Hourly slots per day.
pub const SLOTS_PER_DAY: u8 = 24;

/// Index of a grid cell, `row * cols + col`.
pub type RegionId = usize;
pub type UserId = u64;

/// Equal-size partition of the study area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    rows: usize,
    cols: usize,
    cell_km: f64,
}

impl RegionGrid {
    pub fn new(rows: usize, cols: usize, cell_km: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least one cell, got {rows}x{cols}"
            )));
        }
        if !(cell_km.is_finite() && cell_km > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_km}"
            )));
        }
        Ok(RegionGrid {
            rows,
            cols,
            cell_km,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_km(&self) -> f64 {
        self.cell_km
    }

    pub fn region_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn region(&self, row: usize, col: usize) -> Option<RegionId> {
        (row < self.rows && col < self.cols).then(|| row * self.cols + col)
    }

    pub fn coords(&self, r: RegionId) -> (usize, usize) {
        (r / self.cols, r % self.cols)
    }

    pub fn chebyshev(&self, a: RegionId, b: RegionId) -> usize {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        ra.abs_diff(rb).max(ca.abs_diff(cb))
    }

    /// Euclidean distance between cell centers in km.
    pub fn center_distance_km(&self, a: RegionId, b: RegionId) -> f64 {
        let (ra, ca) = self.coords(a);
        let (rb, cb) = self.coords(b);
        let dr = ra as f64 - rb as f64;
        let dc = ca as f64 - cb as f64;
        (dr * dr + dc * dc).sqrt() * self.cell_km
    }

    /// 8-neighborhood of `r`, in row-major order.
    pub fn neighbors(&self, r: RegionId) -> Vec<RegionId> {
        self.within(r, 1)
            .into_iter()
            .filter(|&n| n != r)
            .collect()
    }

    /// Every region within Chebyshev distance `radius` of `r` (including `r`).
    pub fn within(&self, r: RegionId, radius: usize) -> Vec<RegionId> {
        let (row, col) = self.coords(r);
        let r0 = row.saturating_sub(radius);
        let r1 = (row + radius).min(self.rows - 1);
        let c0 = col.saturating_sub(radius);
        let c1 = (col + radius).min(self.cols - 1);
        let mut out = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                out.push(rr * self.cols + cc);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub slot: u8,
    pub region: RegionId,
}

/// One user's visited regions during one day, ordered by slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: UserId,
    pub day: u32,
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn new(user_id: UserId, day: u32, visits: Vec<Visit>, grid: &RegionGrid) -> Result<Self> {
        if visits.is_empty() {
            return Err(Error::Data(format!(
                "user {user_id} day {day}: empty trajectory"
            )));
        }
        for w in visits.windows(2) {
            if w[1].slot <= w[0].slot {
                return Err(Error::Data(format!(
                    "user {user_id} day {day}: slots not strictly increasing"
                )));
            }
        }
        for v in &visits {
            if v.slot >= SLOTS_PER_DAY || v.region >= grid.region_count() {
                return Err(Error::Data(format!(
                    "user {user_id} day {day}: visit {v:?} outside grid or day"
                )));
            }
        }
        Ok(Trajectory {
            user_id,
            day,
            visits,
        })
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn regions(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.visits.iter().map(|v| v.region)
    }
}

/// A labeled user. `label == 1` marks low credit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub label: u8,
    pub trajectories: Vec<Trajectory>,
}

impl UserRecord {
    pub fn new(user_id: UserId, label: u8, trajectories: Vec<Trajectory>) -> Result<Self> {
        if label > 1 {
            return Err(Error::Data(format!("user {user_id}: label {label} not in {{0,1}}")));
        }
        if trajectories.is_empty() {
            return Err(Error::Data(format!("user {user_id}: no trajectories")));
        }
        Ok(UserRecord {
            user_id,
            label,
            trajectories,
        })
    }

    pub fn is_low_credit(&self) -> bool {
        self.label == 1
    }
}
