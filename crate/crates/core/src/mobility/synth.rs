//! Seeded synthetic mobility generator.
//!
//! Regions carry a latent credit propensity (smoothed noise, rank-normalized
//! to `(0, 1)`). Each user's home, work and leisure regions are drawn from a
//! mixture: with probability `signal_strength` from a label-matched
//! distribution (`p^4` for low-credit users, `(1 - p)^4` otherwise), else
//! uniformly. Days are hourly walks between those anchors that move at most
//! one cell per hour, so the label lives in *where* users go. How much they
//! move is label-independent unless `manual_feature_signal > 0`, which raises
//! the wander rate of low-credit users.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::SYNTH_META_FILE;
use super::{is_weekend, RegionGrid, RegionId, Trajectory, UserRecord, Visit};
use crate::error::{Error, Result};

const AFFINITY_POWER: i32 = 4;
const DAY_RECORD_PROB: f64 = 0.9;
const BASE_WANDER: f64 = 0.1;
const EXTRA_WANDER: f64 = 0.15;
const DROP_PROB: f64 = 0.35;
const MAX_COMMUTE: usize = 3;
const LEISURE_RADIUS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub users: usize,
    pub low_credit_fraction: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cell_km: f64,
    pub days: u32,
    /// How strongly home/work/leisure choice follows the label, in `[0, 1]`.
    pub signal_strength: f64,
    /// How strongly wandering volume follows the label, in `[0, 1]`.
    pub manual_feature_signal: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            users: 500,
            low_credit_fraction: 0.3,
            grid_rows: 12,
            grid_cols: 12,
            cell_km: 1.0,
            days: 28,
            signal_strength: 1.0,
            manual_feature_signal: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config {
                    key: key.into(),
                    msg: format!("{v} not in [0, 1]"),
                })
            }
        };
        let positive = |key: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    key: key.into(),
                    msg: "must be positive".into(),
                })
            }
        };
        unit("synth.low_credit_fraction", self.low_credit_fraction)?;
        unit("synth.signal_strength", self.signal_strength)?;
        unit("synth.manual_feature_signal", self.manual_feature_signal)?;
        positive("synth.users", self.users > 0)?;
        positive("synth.grid_rows", self.grid_rows > 0)?;
        positive("synth.grid_cols", self.grid_cols > 0)?;
        positive("synth.days", self.days > 0)?;
        positive("synth.cell_km", self.cell_km.is_finite() && self.cell_km > 0.0)
    }

    pub fn grid(&self) -> Result<RegionGrid> {
        RegionGrid::new(self.grid_rows, self.grid_cols, self.cell_km)
    }
}

/// Generator configuration plus the planted ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub propensity: Vec<f64>,
    pub homes: Vec<RegionId>,
    pub works: Vec<RegionId>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub users: Vec<UserRecord>,
    pub grid: RegionGrid,
    pub meta: SynthMeta,
}

pub fn write_synth_meta(dir: &Path, meta: &SynthMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SYNTH_META_FILE);
    let mut body = serde_json::to_string_pretty(meta).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    body.push('\n');
    fs::write(&path, body).map_err(|e| Error::io(path, e))
}

fn propensity_field(grid: &RegionGrid, rng: &mut impl Rng) -> Vec<f64> {
    let b = grid.region_count();
    let mut field: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
    for _ in 0..2 {
        field = (0..b)
            .map(|r| {
                let hood = grid.within(r, 1);
                hood.iter().map(|&n| field[n]).sum::<f64>() / hood.len() as f64
            })
            .collect();
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&x, &y| field[x].total_cmp(&field[y]).then(x.cmp(&y)));
    let mut ranked = vec![0.0; b];
    for (rank, r) in order.into_iter().enumerate() {
        ranked[r] = (rank as f64 + 0.5) / b as f64;
    }
    ranked
}

struct Chooser<'a> {
    propensity: &'a [f64],
    low_credit: bool,
    strength: f64,
}

impl Chooser<'_> {
    fn affinity(&self, r: RegionId) -> f64 {
        let p = self.propensity[r];
        if self.low_credit {
            p.powi(AFFINITY_POWER)
        } else {
            (1.0 - p).powi(AFFINITY_POWER)
        }
    }

    fn pick(&self, rng: &mut impl Rng, candidates: &[RegionId]) -> RegionId {
        debug_assert!(!candidates.is_empty());
        if rng.gen_bool(self.strength) {
            let weights: Vec<f64> = candidates.iter().map(|&r| self.affinity(r)).collect();
            if let Ok(dist) = WeightedIndex::new(&weights) {
                return candidates[dist.sample(rng)];
            }
        }
        *candidates.choose(rng).expect("non-empty candidates")
    }
}

fn step_toward(grid: &RegionGrid, from: RegionId, to: RegionId) -> RegionId {
    let (r0, c0) = grid.coords(from);
    let (r1, c1) = grid.coords(to);
    let step = |a: usize, b: usize| match a.cmp(&b) {
        std::cmp::Ordering::Less => a + 1,
        std::cmp::Ordering::Greater => a - 1,
        std::cmp::Ordering::Equal => a,
    };
    step(r0, r1) * grid.cols() + step(c0, c1)
}

struct Anchors {
    home: RegionId,
    work: RegionId,
    leisure: [RegionId; 2],
}

fn simulate_day(
    grid: &RegionGrid,
    anchors: &Anchors,
    chooser: &Chooser<'_>,
    day: u32,
    wander: f64,
    rng: &mut impl Rng,
) -> Vec<Visit> {
    let home = anchors.home;
    let mut plan = [home; 24];
    if is_weekend(day) {
        let start = rng.gen_range(10..=12);
        let len = rng.gen_range(3..=5);
        let spot = if rng.gen_bool(0.3) {
            let near: Vec<RegionId> = grid.within(home, LEISURE_RADIUS);
            chooser.pick(rng, &near)
        } else {
            anchors.leisure[rng.gen_range(0..2)]
        };
        plan[start..start + len].iter_mut().for_each(|p| *p = spot);
    } else {
        let leave = 9 - grid.chebyshev(home, anchors.work);
        plan[leave..18].iter_mut().for_each(|p| *p = anchors.work);
        if rng.gen_bool(0.25) {
            let spot = anchors.leisure[rng.gen_range(0..2)];
            plan[19..21].iter_mut().for_each(|p| *p = spot);
        }
    }

    let mut hourly = [home; 24];
    let mut pos = home;
    for (h, &target) in plan.iter().enumerate() {
        if pos != target {
            pos = step_toward(grid, pos, target);
        } else if rng.gen_bool(wander) {
            if let Some(&n) = grid.neighbors(pos).choose(rng) {
                pos = n;
            }
        }
        hourly[h] = pos;
    }

    let wake: usize = rng.gen_range(6..=8);
    let sleep: usize = rng.gen_range(20..=23);
    let mut visits = vec![Visit {
        slot: wake as u8,
        region: hourly[wake],
    }];
    for h in wake + 1..sleep {
        let last = visits.last().expect("non-empty").region;
        let droppable = grid.chebyshev(last, hourly[h + 1]) <= 1;
        if droppable && rng.gen_bool(DROP_PROB) {
            continue;
        }
        visits.push(Visit {
            slot: h as u8,
            region: hourly[h],
        });
    }
    visits.push(Visit {
        slot: sleep as u8,
        region: hourly[sleep],
    });
    visits
}

/// Pure function of the config: the same seed yields the same dataset.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let grid = config.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let propensity = propensity_field(&grid, &mut rng);
    let all: Vec<RegionId> = (0..grid.region_count()).collect();

    let mut users = Vec::with_capacity(config.users);
    let mut homes = Vec::with_capacity(config.users);
    let mut works = Vec::with_capacity(config.users);
    for uid in 0..config.users as u64 {
        let low_credit = rng.gen_bool(config.low_credit_fraction);
        let chooser = Chooser {
            propensity: &propensity,
            low_credit,
            strength: config.signal_strength,
        };
        let home = chooser.pick(&mut rng, &all);
        let wanted = rng.gen_range(1..=MAX_COMMUTE);
        let work = (1..=wanted)
            .rev()
            .map(|d| {
                grid.within(home, d)
                    .into_iter()
                    .filter(|&r| grid.chebyshev(home, r) == d)
                    .collect::<Vec<_>>()
            })
            .find(|c| !c.is_empty())
            .map_or(home, |c| chooser.pick(&mut rng, &c));
        let near: Vec<RegionId> = grid
            .within(home, LEISURE_RADIUS)
            .into_iter()
            .filter(|&r| r != home)
            .collect();
        let leisure = if near.is_empty() {
            [home; 2]
        } else {
            [chooser.pick(&mut rng, &near), chooser.pick(&mut rng, &near)]
        };
        let anchors = Anchors {
            home,
            work,
            leisure,
        };
        let wander = BASE_WANDER + EXTRA_WANDER * config.manual_feature_signal * f64::from(u8::from(low_credit));

        let mut recorded: Vec<bool> = (0..config.days).map(|_| rng.gen_bool(DAY_RECORD_PROB)).collect();
        if !recorded.iter().any(|&r| r) {
            let d = rng.gen_range(0..recorded.len());
            recorded[d] = true;
        }
        let mut trajectories = Vec::new();
        for day in 0..config.days {
            let visits = simulate_day(&grid, &anchors, &chooser, day, wander, &mut rng);
            if recorded[day as usize] {
                trajectories.push(Trajectory::new(uid, day, visits, &grid)?);
            }
        }
        users.push(UserRecord::new(uid, u8::from(low_credit), trajectories)?);
        homes.push(home);
        works.push(work);
    }

    Ok(SyntheticDataset {
        users,
        grid,
        meta: SynthMeta {
            config: config.clone(),
            propensity,
            homes,
            works,
        },
    })
}
