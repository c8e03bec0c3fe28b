//! Hand-crafted mobility features, the manual-feature baselines and the
//! region-input plumbing of the two ablation variants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graphs::RegionCreditTable;
use crate::mobility::{is_weekend, RegionGrid, RegionId, Trajectory, UserId, UserRecord};

pub const MANUAL_DIM: usize = 6;

pub const MANUAL_FEATURE_NAMES: [&str; MANUAL_DIM] = [
    "num_daily_region",
    "std_daily_region",
    "region_entropy",
    "turning_radius",
    "weekday_weekend_diff",
    "num_record_days",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManualFeatures {
    /// Mean distinct regions per recorded day.
    pub num_daily_region: f64,
    /// Population std of the daily distinct-region count.
    pub std_daily_region: f64,
    /// Entropy (nats) of region visit frequencies.
    pub region_entropy: f64,
    /// Mean km from each distinct visited region to the most visited one.
    pub turning_radius: f64,
    /// Mean weekday minus mean weekend daily distinct count.
    pub weekday_weekend_diff: f64,
    pub num_record_days: f64,
}

impl ManualFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.num_daily_region,
            self.std_daily_region,
            self.region_entropy,
            self.turning_radius,
            self.weekday_weekend_diff,
            self.num_record_days,
        ]
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn manual_features(u: &UserRecord, grid: &RegionGrid) -> Result<ManualFeatures> {
    // one record per (day, slot); the first one wins on duplicates
    let mut records: BTreeMap<(u32, u8), RegionId> = BTreeMap::new();
    for t in &u.trajectories {
        for v in &t.visits {
            records.entry((t.day, v.slot)).or_insert(v.region);
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("user {}: no visits", u.user_id)));
    }
    let mut per_day: BTreeMap<u32, BTreeSet<RegionId>> = BTreeMap::new();
    let mut freq: BTreeMap<RegionId, usize> = BTreeMap::new();
    for (&(day, _), &r) in &records {
        per_day.entry(day).or_default().insert(r);
        *freq.entry(r).or_default() += 1;
    }

    let daily: Vec<f64> = per_day.values().map(|s| s.len() as f64).collect();
    let mu = mean(&daily);
    let var = daily.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / daily.len() as f64;

    let total = records.len() as f64;
    let region_entropy = freq
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0);

    // BTreeMap iterates ascending, so strict `>` keeps the lowest index on ties
    let mut modal = (0, 0);
    for (&r, &c) in &freq {
        if c > modal.1 {
            modal = (r, c);
        }
    }
    let turning_radius = mean(
        &freq
            .keys()
            .map(|&r| grid.center_distance_km(r, modal.0))
            .collect::<Vec<_>>(),
    );

    let (mut wd, mut we) = (Vec::new(), Vec::new());
    for (&day, s) in &per_day {
        if is_weekend(day) {
            we.push(s.len() as f64);
        } else {
            wd.push(s.len() as f64);
        }
    }
    let weekday_weekend_diff = if wd.is_empty() || we.is_empty() {
        0.0
    } else {
        mean(&wd) - mean(&we)
    };

    Ok(ManualFeatures {
        num_daily_region: mu,
        std_daily_region: var.sqrt(),
        region_entropy,
        turning_radius,
        weekday_weekend_diff,
        num_record_days: per_day.len() as f64,
    })
}

pub fn manual_feature_table(users: &[UserRecord], grid: &RegionGrid) -> Result<BTreeMap<UserId, ManualFeatures>> {
    users
        .iter()
        .map(|u| Ok((u.user_id, manual_features(u, grid)?)))
        .collect()
}

/// `user_id` plus the six raw feature columns.
pub fn write_features_csv(path: &Path, table: &BTreeMap<UserId, ManualFeatures>) -> Result<()> {
    let mut out = String::from("user_id");
    for n in MANUAL_FEATURE_NAMES {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (id, f) in table {
        write!(out, "{id}").unwrap();
        for v in f.to_vec() {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Column means and standard deviations fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population std; constant columns get 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot standardize zero rows".into()))?;
        let k = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; k];
        for r in rows {
            if r.len() != k {
                return Err(Error::InvalidArgument("ragged feature rows".into()));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; k];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Standardizes every user's manual features with statistics from `train`.
pub fn standardized_manual_table(
    raw: &BTreeMap<UserId, ManualFeatures>,
    train: &[UserId],
) -> Result<(Standardizer, BTreeMap<UserId, Vec<f64>>)> {
    let rows: Vec<Vec<f64>> = train
        .iter()
        .map(|id| {
            raw.get(id)
                .map(ManualFeatures::to_vec)
                .ok_or_else(|| Error::Data(format!("user {id}: missing manual features")))
        })
        .collect::<Result<_>>()?;
    let st = Standardizer::fit(&rows)?;
    let table = raw.iter().map(|(&id, f)| (id, st.apply(&f.to_vec()))).collect();
    Ok((st, table))
}

/// Rows of `table` for `ids`, as a matrix.
pub fn feature_matrix(table: &BTreeMap<UserId, Vec<f64>>, ids: &[UserId]) -> Result<Matrix> {
    let k = table.values().next().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(ids.len() * k);
    for id in ids {
        let row = table
            .get(id)
            .ok_or_else(|| Error::Data(format!("user {id}: missing features")))?;
        data.extend_from_slice(row);
    }
    Matrix::from_vec(ids.len(), k, data)
}

fn check_classes(labels: &[u8]) -> Result<()> {
    for class in 0..=1u8 {
        let n = labels.iter().filter(|&&y| y == class).count();
        if n < 2 {
            return Err(Error::Data(format!(
                "baseline fit needs at least 2 users per class; class {class} has {n}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// Coefficient of `0.5 * ||w||^2`; the intercept is not penalized.
    pub l2: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-3,
            learning_rate: 0.5,
            max_iters: 20_000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Matrix,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = x.matmul(&self.weights)?;
        Ok(z.data().iter().map(|&v| crate::autodiff::sigmoid(v + self.intercept)).collect())
    }
}

/// Mean cross-entropy plus `0.5 * l2 * ||w||^2`.
pub fn logistic_objective(tape: &mut Tape, x: Var, w: Var, b: Var, labels: &[u8], l2: f64) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    let p = tape.sigmoid(z);
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let ce = tape.bce(p, Rc::from(y))?;
    if l2 == 0.0 {
        return Ok(ce);
    }
    let ww = tape.hadamard(w, w)?;
    let pen = tape.sum(ww);
    let pen = tape.scale(pen, 0.5 * l2);
    tape.add(ce, pen)
}

/// Full-batch gradient descent on the L2-regularized logistic loss.
pub fn fit_logistic(x: &Matrix, labels: &[u8], config: &LogisticConfig) -> Result<LogisticModel> {
    if x.rows() != labels.len() {
        return Err(Error::dim("fit_logistic", x.shape(), (labels.len(), 1)));
    }
    check_classes(labels)?;
    let mut w = Matrix::zeros(x.cols(), 1);
    let mut b = Matrix::scalar(0.0);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let loss = logistic_objective(&mut tape, xv, wv, bv, labels, config.l2)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::Divergence("logistic loss is not finite".into()));
        }
        tape.backward(loss)?;
        let (gw, gb) = (tape.grad(wv), tape.grad(bv));
        let norm = (gw.frobenius_norm().powi(2) + gb.data()[0].powi(2)).sqrt();
        if norm < config.grad_tol {
            converged = true;
            break;
        }
        for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= config.learning_rate * g;
        }
        b.data_mut()[0] -= config.learning_rate * gb.data()[0];
        iterations += 1;
    }
    Ok(LogisticModel {
        weights: w,
        intercept: b.data()[0],
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 16,
            learning_rate: 1e-2,
            max_epochs: 1000,
            patience: 50,
            seed: 0,
        }
    }
}

/// One ReLU hidden layer and a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl MlpModel {
    /// Glorot hidden layer, zero output layer (initial predictions 0.5).
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpModel {
            w1: Matrix::glorot(input_dim, hidden, &mut rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, 1),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn params(&self) -> Vec<Matrix> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ps: Vec<Var> = self.params().into_iter().map(|p| tape.constant(p)).collect();
        let xv = tape.constant(x.clone());
        let p = mlp_forward(&mut tape, &ps, xv)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// `sigmoid(relu(x w1 + b1) w2 + b2)` with `params = [w1, b1, w2, b2]`.
pub fn mlp_forward(tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
    let h = tape.matmul(x, params[0])?;
    let h = tape.add_row(h, params[1])?;
    let h = tape.relu(h);
    let o = tape.matmul(h, params[2])?;
    let o = tape.add_row(o, params[3])?;
    Ok(tape.sigmoid(o))
}

fn bce_value(p: &[f64], y: &[u8]) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            -(f64::from(y) * p.ln() + (1.0 - f64::from(y)) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / y.len() as f64
}

/// Full-batch Adam with early stopping on validation cross-entropy.
pub fn fit_manual_nn(
    x: &Matrix,
    labels: &[u8],
    val_x: &Matrix,
    val_labels: &[u8],
    config: &MlpConfig,
) -> Result<MlpModel> {
    if x.rows() != labels.len() || val_x.rows() != val_labels.len() {
        return Err(Error::dim("fit_manual_nn", x.shape(), (labels.len(), 1)));
    }
    check_classes(labels)?;
    let mut model = MlpModel::new(x.cols(), config.hidden, config.seed);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut adam = Adam::new(config.learning_rate);
    let y: Rc<[f64]> = labels.iter().map(|&l| f64::from(l)).collect();
    for epoch in 0..config.max_epochs {
        let val = if val_labels.is_empty() {
            bce_value(&model.predict(x)?, labels)
        } else {
            bce_value(&model.predict(val_x)?, val_labels)
        };
        if !val.is_finite() {
            return Err(Error::Divergence(format!("manual network loss {val} at epoch {epoch}")));
        }
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
        let mut tape = Tape::new();
        let ps: Vec<Var> = model.params().into_iter().map(|p| tape.param(p)).collect();
        let xv = tape.constant(x.clone());
        let p = mlp_forward(&mut tape, &ps, xv)?;
        let loss = tape.bce(p, y.clone())?;
        tape.backward(loss)?;
        let grads: Vec<Matrix> = ps.iter().map(|&v| tape.grad(v)).collect();
        adam.update(&mut model.params_mut(), &grads)?;
    }
    Ok(best)
}

/// Region inputs of the without-REN variant: each region's score as a
/// single feature (`b x 1`). Unvisited regions carry the table's mean score.
pub fn score_region_features(table: &RegionCreditTable) -> Matrix {
    Matrix::col_vector(&table.scores)
}

/// Per-visit `[s_r]` sequences of a user's trajectories.
pub fn variant_without_ren_features(u: &UserRecord, table: &RegionCreditTable) -> Result<Vec<Vec<f64>>> {
    u.trajectories
        .iter()
        .map(|t| {
            t.regions()
                .map(|r| {
                    table.scores.get(r).copied().ok_or_else(|| {
                        Error::Data(format!("user {}: region {r} has no score", u.user_id))
                    })
                })
                .collect()
        })
        .collect()
}

/// Mean of a trajectory's region embedding rows (before the dense layer).
pub fn variant_without_ten(t: &Trajectory, embeddings: &Matrix) -> Result<Vec<f64>> {
    let mut out = vec![0.0; embeddings.cols()];
    for r in t.regions() {
        if r >= embeddings.rows() {
            return Err(Error::Data(format!(
                "user {} day {}: region {r} has no embedding",
                t.user_id, t.day
            )));
        }
        for (o, v) in out.iter_mut().zip(embeddings.row(r)) {
            *o += v;
        }
    }
    let n = t.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::Visit;

    fn grid() -> RegionGrid {
        RegionGrid::new(3, 3, 1.0).unwrap()
    }

    fn user(days: &[(u32, &[usize])]) -> UserRecord {
        let g = grid();
        let trajs = days
            .iter()
            .map(|(d, rs)| {
                let visits = rs
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| Visit { slot: i as u8, region: r })
                    .collect();
                Trajectory::new(7, *d, visits, &g).unwrap()
            })
            .collect();
        UserRecord::new(7, 0, trajs).unwrap()
    }

    #[test]
    fn single_region_user() {
        let u = user(&[(0, &[4, 4]), (1, &[4]), (2, &[4]), (3, &[4]), (4, &[4])]);
        let f = manual_features(&u, &grid()).unwrap();
        assert_eq!(f.region_entropy, 0.0);
        assert_eq!(f.turning_radius, 0.0);
        assert_eq!(f.std_daily_region, 0.0);
        assert_eq!(f.num_record_days, 5.0);
        assert_eq!(f.num_daily_region, 1.0);
    }

    #[test]
    fn entropy_examples() {
        let u = user(&[(0, &[0, 1, 2, 3])]);
        let f = manual_features(&u, &grid()).unwrap();
        assert!((f.region_entropy - 4f64.ln()).abs() < 1e-15);
        let u = user(&[(0, &[0, 0, 0, 1])]);
        let f = manual_features(&u, &grid()).unwrap();
        let want = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((f.region_entropy - want).abs() < 1e-15);
        assert!((want - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn turning_radius_and_weekday_diff() {
        // region 0 visited most; distinct {0, 2, 8}
        let u = user(&[(0, &[0, 0, 2]), (5, &[8, 0])]);
        let f = manual_features(&u, &grid()).unwrap();
        let want = (0.0 + 2.0 + 8f64.sqrt()) / 3.0;
        assert!((f.turning_radius - want).abs() < 1e-15);
        assert_eq!(f.weekday_weekend_diff, 0.0);
        assert_eq!(f.num_daily_region, 2.0);
        let u = user(&[(0, &[0, 1, 2]), (1, &[0]), (6, &[3])]);
        let f = manual_features(&u, &grid()).unwrap();
        assert_eq!(f.weekday_weekend_diff, 1.0);
        // regions 3 and 5 once each; the tie goes to 3
        let u = user(&[(0, &[5, 3])]);
        let f = manual_features(&u, &grid()).unwrap();
        assert!((f.turning_radius - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standardizer_uses_given_rows() {
        let s = Standardizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[4.0, 6.0]), vec![2.0, 1.0]);
    }

    #[test]
    fn logistic_separable_and_base_rate() {
        let x = Matrix::from_rows(&[vec![-1.0], vec![-0.8], vec![1.0], vec![0.9]]);
        let m = fit_logistic(&x, &[0, 0, 1, 1], &LogisticConfig::default()).unwrap();
        let p = m.predict(&x).unwrap();
        assert!(p[0] < 0.5 && p[1] < 0.5 && p[2] > 0.5 && p[3] > 0.5);

        let z = Matrix::zeros(10, 3);
        let y = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let m = fit_logistic(&z, &y, &LogisticConfig::default()).unwrap();
        assert!(m.converged);
        assert!(m.weights.max_abs() < 1e-12);
        assert!((m.intercept - (0.3f64 / 0.7).ln()).abs() < 1e-5);
        assert!(fit_logistic(&z, &[0; 10], &LogisticConfig::default()).is_err());
    }

    #[test]
    fn mlp_starts_at_half_and_is_deterministic() {
        let m = MlpModel::new(3, 16, 5);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 3.0]]);
        assert_eq!(m.predict(&x).unwrap(), vec![0.5, 0.5]);
        let xs = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.9, 0.1, 0.0], vec![-1.0, 0.0, 0.2], vec![-0.7, 0.3, 0.0]]);
        let cfg = MlpConfig { max_epochs: 30, ..MlpConfig::default() };
        let a = fit_manual_nn(&xs, &[1, 1, 0, 0], &xs, &[1, 1, 0, 0], &cfg).unwrap();
        let b = fit_manual_nn(&xs, &[1, 1, 0, 0], &xs, &[1, 1, 0, 0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_inputs() {
        let mut table = RegionCreditTable {
            low_visitors: vec![0; 3],
            visitors: vec![0; 3],
            scores: vec![0.3, 0.45, 0.1],
            labels: vec![0; 3],
            visited: vec![true, false, true],
            dynamic: vec![vec![0.0; 24]; 3],
            median: 0.2,
            mean_score: 0.45,
        };
        table.scores[1] = table.mean_score;
        let u = user(&[(0, &[0, 1, 2])]);
        assert_eq!(variant_without_ren_features(&u, &table).unwrap(), vec![vec![0.3, 0.45, 0.1]]);
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 4.0]]);
        let t = &user(&[(0, &[0, 2])]).trajectories[0];
        assert_eq!(variant_without_ten(t, &emb).unwrap(), vec![2.0, 2.0]);
        let t = &user(&[(0, &[2, 0])]).trajectories[0];
        assert_eq!(variant_without_ten(t, &emb).unwrap(), vec![2.0, 2.0]);
    }
}
