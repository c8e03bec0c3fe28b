//! Trajectory-based credit assessment network.
//!
//! Each daily trajectory becomes a sequence of (frozen) region feature rows.
//! An attention-gated GRU folds the sequence into its last hidden state and a
//! tanh dense layer maps that to the trajectory embedding. A user's
//! trajectory embeddings are pooled with context-aware attention and, with the
//! standardized manual features, fed to a ReLU head that outputs the
//! probability of low credit.
//!
//! Training runs whole mini-batches of users on one tape: trajectories are
//! padded to the batch's longest one, and padded steps get zero attention so
//! they leave the hidden state untouched.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::rc::Rc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Matrix, Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::mobility::{context_features, Trajectory, UserId, UserRecord, CONTEXT_DIM};

/// How a trajectory's region sequence becomes a fixed-width vector before
/// the dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Attention-gated GRU.
    #[default]
    Gru,
    /// Arithmetic mean of the region rows (no recurrence).
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcanConfig {
    pub hidden_dim: usize,
    pub trajectory_dim: usize,
    pub head_hidden: usize,
    /// Weight of the trajectory similarity regularizer.
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    /// Cap on sampled intra-user trajectory pairs per user per step.
    pub pairs_per_user: usize,
    pub encoder: EncoderKind,
    pub seed: u64,
}

impl Default for TcanConfig {
    fn default() -> Self {
        TcanConfig {
            hidden_dim: 64,
            trajectory_dim: 128,
            head_hidden: 64,
            gamma: 0.1,
            batch_size: 32,
            max_epochs: 300,
            patience: 20,
            learning_rate: 1e-3,
            pairs_per_user: 16,
            encoder: EncoderKind::Gru,
            seed: 0,
        }
    }
}

/// Input-side `W` matrices are `d_in x h`, recurrent `U` matrices `h x h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub wq: Matrix,
    pub wg: Matrix,
    pub wh: Matrix,
    pub uq: Matrix,
    pub ug: Matrix,
    pub uh: Matrix,
}

impl GruParams {
    pub fn new<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            wq: Matrix::glorot(input_dim, hidden, rng),
            wg: Matrix::glorot(input_dim, hidden, rng),
            wh: Matrix::glorot(input_dim, hidden, rng),
            uq: Matrix::glorot(hidden, hidden, rng),
            ug: Matrix::glorot(hidden, hidden, rng),
            uh: Matrix::glorot(hidden, hidden, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.uq.rows()
    }

    fn params_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.wq,
            &mut self.wg,
            &mut self.wh,
            &mut self.uq,
            &mut self.ug,
            &mut self.uh,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> GruVars {
        GruVars {
            wq: tape.param(self.wq.clone()),
            wg: tape.param(self.wg.clone()),
            wh: tape.param(self.wh.clone()),
            uq: tape.param(self.uq.clone()),
            ug: tape.param(self.ug.clone()),
            uh: tape.param(self.uh.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wq: Var,
    pub wg: Var,
    pub wh: Var,
    pub uq: Var,
    pub ug: Var,
    pub uh: Var,
}

/// GRU plus its temporal attention vector `W_t` (`d_in x 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentEncoder {
    pub gru: GruParams,
    pub w_t: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcanModel {
    pub input_dim: usize,
    pub manual_dim: usize,
    /// `None` for the mean-pooling encoder.
    pub recurrent: Option<RecurrentEncoder>,
    pub dense_w: Matrix,
    pub dense_b: Matrix,
    /// `(trajectory_dim + context) x 1`.
    pub w_u: Matrix,
    pub head_w1: Matrix,
    pub head_b1: Matrix,
    pub head_w2: Matrix,
    pub head_b2: Matrix,
    pub config: TcanConfig,
}

#[derive(Debug, Clone)]
pub struct TcanVars {
    pub gru: Option<GruVars>,
    pub w_t: Option<Var>,
    pub dense_w: Var,
    pub dense_b: Var,
    pub w_u: Var,
    pub head_w1: Var,
    pub head_b1: Var,
    pub head_w2: Var,
    pub head_b2: Var,
    /// Every parameter, in [`TcanModel::params_mut`] order.
    pub all: Vec<Var>,
}

impl TcanModel {
    pub fn new(input_dim: usize, manual_dim: usize, config: TcanConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, d) = (config.hidden_dim, config.trajectory_dim);
        let (recurrent, dense_in) = match config.encoder {
            EncoderKind::Gru => (
                Some(RecurrentEncoder {
                    gru: GruParams::new(input_dim, h, &mut rng),
                    w_t: Matrix::glorot(input_dim, 1, &mut rng),
                }),
                h,
            ),
            EncoderKind::MeanPool => (None, input_dim),
        };
        TcanModel {
            input_dim,
            manual_dim,
            recurrent,
            dense_w: Matrix::glorot(dense_in, d, &mut rng),
            dense_b: Matrix::zeros(1, d),
            w_u: Matrix::glorot(d + CONTEXT_DIM, 1, &mut rng),
            head_w1: Matrix::glorot(d + manual_dim, config.head_hidden, &mut rng),
            head_b1: Matrix::zeros(1, config.head_hidden),
            head_w2: Matrix::glorot(config.head_hidden, 1, &mut rng),
            head_b2: Matrix::zeros(1, 1),
            config,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(rec) = self.recurrent.as_mut() {
            out.extend(rec.gru.params_mut());
            out.push(&mut rec.w_t);
        }
        out.extend([
            &mut self.dense_w,
            &mut self.dense_b,
            &mut self.w_u,
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
        ]);
        out
    }

    /// Copies of every parameter, in [`TcanModel::params_mut`] order.
    pub fn params(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        if let Some(rec) = &self.recurrent {
            let g = &rec.gru;
            out.extend([&g.wq, &g.wg, &g.wh, &g.uq, &g.ug, &g.uh, &rec.w_t].map(Matrix::clone));
        }
        out.extend(
            [
                &self.dense_w,
                &self.dense_b,
                &self.w_u,
                &self.head_w1,
                &self.head_b1,
                &self.head_w2,
                &self.head_b2,
            ]
            .map(Matrix::clone),
        );
        out
    }

    /// Names parameter nodes already on a tape, given in
    /// [`TcanModel::params`] order.
    pub fn vars_from(&self, all: &[Var]) -> Result<TcanVars> {
        let want = if self.recurrent.is_some() { 14 } else { 7 };
        if all.len() != want {
            return Err(Error::InvalidArgument(format!(
                "expected {want} parameter nodes, got {}",
                all.len()
            )));
        }
        let (gru, w_t, rest) = if self.recurrent.is_some() {
            let g = GruVars {
                wq: all[0],
                wg: all[1],
                wh: all[2],
                uq: all[3],
                ug: all[4],
                uh: all[5],
            };
            (Some(g), Some(all[6]), &all[7..])
        } else {
            (None, None, all)
        };
        Ok(TcanVars {
            gru,
            w_t,
            dense_w: rest[0],
            dense_b: rest[1],
            w_u: rest[2],
            head_w1: rest[3],
            head_b1: rest[4],
            head_w2: rest[5],
            head_b2: rest[6],
            all: all.to_vec(),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> TcanVars {
        let all: Vec<Var> = self.params().into_iter().map(|m| tape.param(m)).collect();
        self.vars_from(&all).expect("own parameter count")
    }
}

/// Gates, candidate and plain-GRU blend of one step.
#[derive(Debug, Clone, Copy)]
pub struct GruStep {
    pub q: Var,
    pub gamma: Var,
    pub h: Var,
    pub z: Var,
}

/// One GRU step for `n` rows at once: `x` is `n x d_in`, `z_prev` `n x h`.
pub fn gru_step(tape: &mut Tape, g: &GruVars, x: Var, z_prev: Var) -> Result<GruStep> {
    let (n, d_in) = tape.shape(x);
    let (h_dim, _) = tape.shape(g.uq);
    if tape.shape(g.wq).0 != d_in || tape.shape(z_prev) != (n, h_dim) {
        return Err(Error::dim("gru_step", tape.shape(x), tape.shape(z_prev)));
    }
    let gate = |tape: &mut Tape, w: Var, u: Var| -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let zu = tape.matmul(z_prev, u)?;
        let s = tape.add(xw, zu)?;
        Ok(tape.sigmoid(s))
    };
    let q = gate(tape, g.wq, g.uq)?;
    let gamma = gate(tape, g.wg, g.ug)?;
    let xw = tape.matmul(x, g.wh)?;
    let zg = tape.hadamard(z_prev, gamma)?;
    let zu = tape.matmul(zg, g.uh)?;
    let s = tape.add(xw, zu)?;
    let h = tape.tanh(s);
    // (1 - q) h + q z_prev = h + q (z_prev - h)
    let d = tape.sub(z_prev, h)?;
    let qd = tape.hadamard(q, d)?;
    let z = tape.add(h, qd)?;
    Ok(GruStep { q, gamma, h, z })
}

/// Softmax over positions of `X_{r_i} . W_t`; `m x 1`.
pub fn temporal_attention(tape: &mut Tape, w_t: Var, x_seq: Var) -> Result<Var> {
    if tape.shape(x_seq).0 == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let logits = tape.matmul(x_seq, w_t)?;
    tape.softmax_vector(logits)
}

/// Runs the recurrence `z_i = (1 - a_i) z_{i-1} + a_i h_i` from `z_0 = 0`
/// with the given `m x 1` attention column; returns `z_m` (`1 x h`).
pub fn attention_recurrence(tape: &mut Tape, g: &GruVars, x_seq: Var, attention: Var) -> Result<Var> {
    let (m, _) = tape.shape(x_seq);
    if tape.shape(attention) != (m, 1) {
        return Err(Error::dim("attention_recurrence", tape.shape(x_seq), tape.shape(attention)));
    }
    let h_dim = tape.shape(g.uq).0;
    let mut z = tape.constant(Matrix::zeros(1, h_dim));
    for i in 0..m {
        let x = tape.gather_rows(x_seq, Rc::from([i]))?;
        let step = gru_step(tape, g, x, z)?;
        let a = tape.element(attention, i)?;
        let neg = tape.scale(a, -1.0);
        let keep = tape.add_scalar(neg, 1.0);
        let kept = tape.scale_by(keep, z)?;
        let new = tape.scale_by(a, step.h)?;
        z = tape.add(kept, new)?;
    }
    Ok(z)
}

/// Embedding (`1 x D`) of one trajectory whose region rows are `x_seq`.
pub fn trajectory_embed(tape: &mut Tape, vars: &TcanVars, x_seq: Var) -> Result<Var> {
    let (m, _) = tape.shape(x_seq);
    if m == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let pooled = match (&vars.gru, vars.w_t) {
        (Some(g), Some(w_t)) => {
            let a = temporal_attention(tape, w_t, x_seq)?;
            attention_recurrence(tape, g, x_seq, a)?
        }
        _ => {
            let avg = tape.constant(Matrix::filled(1, m, 1.0 / m as f64));
            tape.matmul(avg, x_seq)?
        }
    };
    dense(tape, vars, pooled)
}

fn dense(tape: &mut Tape, vars: &TcanVars, x: Var) -> Result<Var> {
    let y = tape.matmul(x, vars.dense_w)?;
    let y = tape.add_row(y, vars.dense_b)?;
    Ok(tape.tanh(y))
}

/// Rows of `region_features` for the trajectory's visits.
pub fn trajectory_rows(region_features: &Matrix, t: &Trajectory) -> Result<Matrix> {
    let idx: Vec<usize> = t.regions().collect();
    if let Some(&r) = idx.iter().find(|&&r| r >= region_features.rows()) {
        return Err(Error::Data(format!(
            "user {} day {}: region {r} has no embedding ({} rows)",
            t.user_id,
            t.day,
            region_features.rows()
        )));
    }
    Ok(region_features.gather_rows(&idx))
}

/// Context-aware attention pooling of stacked trajectory embeddings `x`
/// (`n x D`) with contexts `c` (`n x 9`) into segments (one per user).
/// Returns the user embeddings and the `n x 1` attention column.
pub fn user_aggregate(tape: &mut Tape, w_u: Var, x: Var, c: Var, segs: Segments) -> Result<(Var, Var)> {
    let xc = tape.concat_cols(x, c)?;
    let scores = tape.matmul(xc, w_u)?;
    let a = tape.segment_softmax(scores, segs.clone())?;
    let pooled = tape.segment_weighted_sum(a, x, segs)?;
    Ok((pooled, a))
}

/// `sigmoid(head(Concat(X_Tu, manual)))`, `n x 1`.
pub fn predict_credit(tape: &mut Tape, vars: &TcanVars, x_tu: Var, manual: Option<Var>) -> Result<Var> {
    let input = match manual {
        Some(m) => tape.concat_cols(x_tu, m)?,
        None => x_tu,
    };
    let h = tape.matmul(input, vars.head_w1)?;
    let h = tape.add_row(h, vars.head_b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, vars.head_w2)?;
    let o = tape.add_row(o, vars.head_b2)?;
    Ok(tape.sigmoid(o))
}

pub fn tcan_credit_loss(tape: &mut Tape, p: Var, labels: &[u8]) -> Result<Var> {
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    tape.bce(p, Rc::from(y))
}

/// Intra-user trajectory pairs `(i, j, weight)`: up to `cap` distinct
/// unordered pairs per segment, weighted so that the weighted sum is the mean
/// over segments of the per-segment pair mean. Single-trajectory segments
/// contribute nothing but still count in the denominator.
pub fn sample_trajectory_pairs<R: Rng>(segs: &[Range<usize>], cap: usize, rng: &mut R) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let users = segs.len() as f64;
    for s in segs {
        let n = s.len();
        if n < 2 || cap == 0 {
            continue;
        }
        let total = n * (n - 1) / 2;
        let picks: Vec<usize> = if total <= cap {
            (0..total).collect()
        } else {
            let mut v = index::sample(rng, total, cap).into_vec();
            v.sort_unstable();
            v
        };
        let w = 1.0 / (picks.len() as f64 * users);
        for k in picks {
            let (i, j) = unrank_pair(k, n);
            out.push((s.start + i, s.start + j, w));
        }
    }
    out
}

/// k-th pair `(i, j)`, `i < j`, in row-major order over the upper triangle.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair index out of range")
}

/// Weighted sum over pairs of `log(1 / (1 + exp(<x_i, x_j>)))`. Zero without
/// pairs.
pub fn trajectory_similarity_loss(tape: &mut Tape, x: Var, pairs: &[(usize, usize, f64)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let w: Vec<f64> = pairs.iter().map(|p| -p.2).collect();
    let xa = tape.gather_rows(x, Rc::from(a))?;
    let xb = tape.gather_rows(x, Rc::from(b))?;
    let ip = tape.row_dot(xa, xb)?;
    let sp = tape.softplus(ip);
    let w = tape.constant(Matrix::col_vector(&w));
    let weighted = tape.hadamard(sp, w)?;
    Ok(tape.sum(weighted))
}

/// Standardized manual features per user, aligned with the model's
/// `manual_dim`.
pub type ManualTable = BTreeMap<UserId, Vec<f64>>;

/// A mini-batch of users laid out for the batched forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub user_ids: Vec<UserId>,
    pub labels: Vec<u8>,
    /// Trajectory rows per user.
    pub segments: Segments,
    pub lens: Rc<[usize]>,
    pub max_len: usize,
    /// `trajectories x max_len` region ids, padded with region 0.
    pub region_index: Vec<usize>,
    pub context: Matrix,
    pub manual: Option<Matrix>,
}

impl Batch {
    pub fn new(users: &[&UserRecord], manual: &ManualTable, manual_dim: usize, region_count: usize) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let trajs: Vec<&Trajectory> = users.iter().flat_map(|u| u.trajectories.iter()).collect();
        let max_len = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut segments = Vec::with_capacity(users.len());
        let mut start = 0;
        for u in users {
            if u.trajectories.is_empty() {
                return Err(Error::Data(format!("user {}: no trajectories", u.user_id)));
            }
            segments.push(start..start + u.trajectories.len());
            start += u.trajectories.len();
        }
        let mut region_index = vec![0; trajs.len() * max_len];
        let mut context = Vec::with_capacity(trajs.len() * CONTEXT_DIM);
        for (k, t) in trajs.iter().enumerate() {
            for (i, r) in t.regions().enumerate() {
                if r >= region_count {
                    return Err(Error::Data(format!(
                        "user {} day {}: region {r} has no embedding ({region_count} rows)",
                        t.user_id, t.day
                    )));
                }
                region_index[k * max_len + i] = r;
            }
            context.extend_from_slice(&context_features(t));
        }
        let manual = if manual_dim == 0 {
            None
        } else {
            let mut data = Vec::with_capacity(users.len() * manual_dim);
            for u in users {
                let row = manual.get(&u.user_id).ok_or_else(|| {
                    Error::Data(format!("user {}: missing manual features", u.user_id))
                })?;
                if row.len() != manual_dim {
                    return Err(Error::Data(format!(
                        "user {}: {} manual features, model expects {manual_dim}",
                        u.user_id,
                        row.len()
                    )));
                }
                data.extend_from_slice(row);
            }
            Some(Matrix::from_vec(users.len(), manual_dim, data)?)
        };
        Ok(Batch {
            user_ids: users.iter().map(|u| u.user_id).collect(),
            labels: users.iter().map(|u| u.label).collect(),
            segments: Rc::from(segments),
            lens: trajs.iter().map(|t| t.len()).collect(),
            max_len,
            region_index,
            context: Matrix::from_vec(trajs.len(), CONTEXT_DIM, context)?,
            manual,
        })
    }

    pub fn trajectory_count(&self) -> usize {
        self.lens.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    /// Trajectory embeddings, one row per trajectory.
    pub trajectories: Var,
    pub user_attention: Var,
    pub users: Var,
    pub probabilities: Var,
}

/// Batched TEN over all trajectories of a batch.
fn encode_batch(tape: &mut Tape, vars: &TcanVars, regions: Var, batch: &Batch) -> Result<Var> {
    let n = batch.trajectory_count();
    let m = batch.max_len;
    let pooled = match (&vars.gru, vars.w_t) {
        (Some(g), Some(w_t)) => {
            // Input projections are per region, so project the region table
            // once and gather rows per step.
            let logit_r = tape.matmul(regions, w_t)?;
            let logits = tape.gather_rows(logit_r, Rc::from(batch.region_index.as_slice()))?;
            let logits = tape.reshape(logits, n, m)?;
            let attn = tape.row_softmax_prefix(logits, batch.lens.clone())?;
            let pg = tape.matmul(regions, g.wg)?;
            let ph = tape.matmul(regions, g.wh)?;
            let h_dim = tape.shape(g.uq).0;
            let mut z = tape.constant(Matrix::zeros(n, h_dim));
            for t in 0..m {
                let idx: Rc<[usize]> = (0..n).map(|k| batch.region_index[k * m + t]).collect();
                let xg = tape.gather_rows(pg, idx.clone())?;
                let xh = tape.gather_rows(ph, idx)?;
                let a = tape.column(attn, t)?;
                let h = if t == 0 {
                    // z_0 = 0, so the recurrent terms vanish
                    tape.tanh(xh)
                } else {
                    let zu = tape.matmul(z, g.ug)?;
                    let s = tape.add(xg, zu)?;
                    let gamma = tape.sigmoid(s);
                    let zg = tape.hadamard(z, gamma)?;
                    let zu = tape.matmul(zg, g.uh)?;
                    let s = tape.add(xh, zu)?;
                    tape.tanh(s)
                };
                let d = tape.sub(h, z)?;
                let ad = tape.mul_col(a, d)?;
                z = tape.add(z, ad)?;
            }
            z
        }
        _ => {
            // mean of region rows per trajectory as a sparse averaging matmul
            let b = tape.shape(regions).0;
            let mut avg = Matrix::zeros(n, b);
            for (k, &len) in batch.lens.iter().enumerate() {
                for i in 0..len {
                    let r = batch.region_index[k * m + i];
                    avg.set(k, r, avg.get(k, r) + 1.0 / len as f64);
                }
            }
            let avg = tape.constant(avg);
            tape.matmul(avg, regions)?
        }
    };
    dense(tape, vars, pooled)
}

pub fn forward_batch(tape: &mut Tape, vars: &TcanVars, regions: Var, batch: &Batch) -> Result<BatchOutput> {
    let trajectories = encode_batch(tape, vars, regions, batch)?;
    let c = tape.constant(batch.context.clone());
    let (users, user_attention) = user_aggregate(tape, vars.w_u, trajectories, c, batch.segments.clone())?;
    let manual = batch.manual.as_ref().map(|m| tape.constant(m.clone()));
    let probabilities = predict_credit(tape, vars, users, manual)?;
    Ok(BatchOutput {
        trajectories,
        user_attention,
        users,
        probabilities,
    })
}

/// `L_c + gamma * L_t` for one batch; returns `(total, output)`.
pub fn tcan_objective<R: Rng>(
    tape: &mut Tape,
    vars: &TcanVars,
    regions: Var,
    batch: &Batch,
    config: &TcanConfig,
    rng: &mut R,
) -> Result<(Var, BatchOutput)> {
    let out = forward_batch(tape, vars, regions, batch)?;
    let credit = tcan_credit_loss(tape, out.probabilities, &batch.labels)?;
    if config.gamma == 0.0 {
        return Ok((credit, out));
    }
    let pairs = sample_trajectory_pairs(&batch.segments, config.pairs_per_user, rng);
    let sim = trajectory_similarity_loss(tape, out.trajectories, &pairs)?;
    let sim = tape.scale(sim, config.gamma);
    Ok((tape.add(credit, sim)?, out))
}

const EVAL_BATCH: usize = 64;

/// Probability of low credit for each user, in input order.
pub fn score_users(model: &TcanModel, region_features: &Matrix, users: &[&UserRecord], manual: &ManualTable) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk, manual, model.manual_dim, region_features.rows())?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let regions = tape.constant(region_features.clone());
        let o = forward_batch(&mut tape, &vars, regions, &batch)?;
        out.extend_from_slice(tape.value(o.probabilities).data());
    }
    Ok(out)
}

/// Trajectory embeddings grouped per user.
pub fn trajectory_embeddings(model: &TcanModel, region_features: &Matrix, users: &[&UserRecord], manual: &ManualTable) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk, manual, model.manual_dim, region_features.rows())?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let regions = tape.constant(region_features.clone());
        let x = encode_batch(&mut tape, &vars, regions, &batch)?;
        let x = tape.value(x);
        for s in batch.segments.iter() {
            out.push(x.gather_rows(&s.clone().collect::<Vec<_>>()));
        }
    }
    Ok(out)
}

/// Mean over users with at least two trajectories of the mean pairwise
/// cosine similarity of their trajectory embeddings.
pub fn mean_intra_user_cosine(per_user: &[Matrix]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut total = 0.0;
    let mut users = 0;
    for x in per_user {
        let n = x.rows();
        if n < 2 {
            continue;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += cos(x.row(i), x.row(j));
            }
        }
        total += s / (n * (n - 1) / 2) as f64;
        users += 1;
    }
    if users == 0 {
        0.0
    } else {
        total / users as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcanTrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    /// Validation AUC per epoch (negated validation loss when the validation
    /// users hold a single class).
    pub validation_score: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TcanOutcome {
    pub model: TcanModel,
    pub report: TcanTrainReport,
}

fn validation_score(model: &TcanModel, region_features: &Matrix, users: &[&UserRecord], manual: &ManualTable) -> Result<f64> {
    let p = score_users(model, region_features, users, manual)?;
    let y: Vec<u8> = users.iter().map(|u| u.label).collect();
    match auc(&p, &y) {
        Ok(a) => Ok(a),
        Err(_) => {
            let loss: f64 = p
                .iter()
                .zip(&y)
                .map(|(&p, &y)| {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    -(f64::from(y) * p.ln() + (1.0 - f64::from(y)) * (1.0 - p).ln())
                })
                .sum();
            Ok(-loss / y.len() as f64)
        }
    }
}

/// Mini-batch Adam on the T-CAN objective with early stopping on validation
/// AUC. Region features stay frozen. Returns the best parameters seen.
pub fn train_tcan(
    model: TcanModel,
    region_features: &Matrix,
    manual: &ManualTable,
    train: &[&UserRecord],
    validation: &[&UserRecord],
) -> Result<TcanOutcome> {
    if train.is_empty() {
        return Err(Error::Data("no training users".into()));
    }
    if region_features.cols() != model.input_dim {
        return Err(Error::dim(
            "train_tcan",
            region_features.shape(),
            (region_features.rows(), model.input_dim),
        ));
    }
    let config = model.config.clone();
    let batch_size = config.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7ca9));
    let mut order: Vec<&UserRecord> = train.to_vec();
    let mut model = model;
    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut adam = Adam::new(config.learning_rate);
    let mut train_loss = Vec::new();
    let mut scores = Vec::new();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = Batch::new(chunk, manual, model.manual_dim, region_features.rows())?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let regions = tape.constant(region_features.clone());
            let (loss, _) = tcan_objective(&mut tape, &vars, regions, &batch, &config, &mut rng)?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::Divergence(format!(
                    "credit network loss became {l} at epoch {epoch}"
                )));
            }
            epoch_loss += l * chunk.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Matrix> = vars.all.iter().map(|&v| tape.grad(v)).collect();
            adam.update(&mut model.params_mut(), &grads)?;
        }
        train_loss.push(epoch_loss / train.len() as f64);
        let score = if validation.is_empty() {
            -epoch_loss
        } else {
            validation_score(&model, region_features, validation, manual)?
        };
        scores.push(score);
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok(TcanOutcome {
        model: best,
        report: TcanTrainReport {
            epochs_run: train_loss.len(),
            best_epoch,
            train_loss,
            validation_score: scores,
        },
    })
}

/// `user_id,probability,label`.
pub fn scores_csv(users: &[&UserRecord], probabilities: &[f64]) -> String {
    let mut out = String::from("user_id,probability,label\n");
    for (u, p) in users.iter().zip(probabilities) {
        writeln!(out, "{},{p},{}", u.user_id, u.label).unwrap();
    }
    out
}

pub fn write_scores_csv(path: &Path, users: &[&UserRecord], probabilities: &[f64]) -> Result<()> {
    fs::write(path, scores_csv(users, probabilities)).map_err(|e| Error::io(path, e))
}

/// Parses a score file back into `(user_id, probability, label)` rows.
pub fn read_scores_csv(path: &Path) -> Result<Vec<(UserId, f64, u8)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected user_id,probability,label"));
        }
        let id = f[0].parse().map_err(|_| bad("bad user_id"))?;
        let p = f[1].parse().map_err(|_| bad("bad probability"))?;
        let y = f[2].parse().map_err(|_| bad("bad label"))?;
        out.push((id, p, y));
    }
    Ok(out)
}
