//! Credit-aware region embedding network.
//!
//! The normalized region graphs are blended with softmax attention weights,
//! then two sigmoid graph-convolution layers map per-region input features to
//! embeddings. Training minimizes a logistic region-label loss plus a
//! weighted inner-product regularizer over similar / dissimilar region pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graphs::{RegionCreditTable, RegionGraphSet};
use crate::mobility::RegionId;

/// How the dissimilar-pair term of the region regularizer is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityForm {
    /// `log s(<r, r_s>) + (1 - log s(<r, r_d>))` with `s(x) = 1 / (1 + e^x)`.
    #[default]
    Verbatim,
    /// Logistic negative sampling: `-log sigmoid(<r, r_s>) - log sigmoid(-<r, r_d>)`.
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenConfig {
    pub embed_dim: usize,
    /// Weight of the region similarity regularizer.
    pub gamma: f64,
    /// Score-difference threshold for pair sampling; `None` uses half the
    /// interquartile range of visited-region scores.
    pub delta: Option<f64>,
    pub pairs_per_anchor: usize,
    pub similarity_form: SimilarityForm,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of visited regions held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for RenConfig {
    fn default() -> Self {
        RenConfig {
            embed_dim: 32,
            gamma: 0.1,
            delta: None,
            pairs_per_anchor: 5,
            similarity_form: SimilarityForm::Verbatim,
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 20,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenModel {
    /// One attention logit per graph, `1 x M`.
    pub graph_logits: Matrix,
    /// `d_in x d`.
    pub w0: Matrix,
    /// `d x d`.
    pub w1: Matrix,
    /// Region-label classifier, `d x 1`.
    pub theta: Matrix,
    pub config: RenConfig,
}

/// Tape handles for a bound [`RenModel`].
#[derive(Debug, Clone, Copy)]
pub struct RenVars {
    pub graph_logits: Var,
    pub w0: Var,
    pub w1: Var,
    pub theta: Var,
}

impl RenModel {
    pub fn new(input_dim: usize, graph_count: usize, config: RenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        RenModel {
            graph_logits: Matrix::zeros(1, graph_count),
            w0: Matrix::glorot(input_dim, d, &mut rng),
            w1: Matrix::glorot(d, d, &mut rng),
            theta: Matrix::glorot(d, 1, &mut rng),
            config,
        }
    }

    pub fn params(&self) -> [&Matrix; 4] {
        [&self.graph_logits, &self.w0, &self.w1, &self.theta]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.graph_logits, &mut self.w0, &mut self.w1, &mut self.theta]
    }

    pub fn bind(&self, tape: &mut Tape) -> RenVars {
        RenVars {
            graph_logits: tape.param(self.graph_logits.clone()),
            w0: tape.param(self.w0.clone()),
            w1: tape.param(self.w1.clone()),
            theta: tape.param(self.theta.clone()),
        }
    }

    pub fn attention_weights(&self) -> Vec<f64> {
        let mut tape = Tape::new();
        let l = tape.constant(self.graph_logits.clone());
        let a = tape.softmax_vector(l).expect("non-empty logits");
        tape.value(a).data().to_vec()
    }

    pub fn merged_adjacency(&self, graphs: &RegionGraphSet) -> Result<Matrix> {
        let mut tape = Tape::new();
        let logits = tape.constant(self.graph_logits.clone());
        let gs = bind_graphs(&mut tape, graphs);
        let merged = merge_graphs(&mut tape, logits, &gs)?;
        Ok(tape.value(merged).clone())
    }

    /// Region embeddings for the given graphs and input features.
    pub fn embed(&self, graphs: &RegionGraphSet, h0: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let gs = bind_graphs(&mut tape, graphs);
        let merged = merge_graphs(&mut tape, vars.graph_logits, &gs)?;
        let h0 = tape.constant(h0.clone());
        let x = ren_forward(&mut tape, &vars, merged, h0)?;
        Ok(tape.value(x).clone())
    }
}

pub fn bind_graphs(tape: &mut Tape, graphs: &RegionGraphSet) -> Vec<Var> {
    graphs
        .normalized
        .iter()
        .map(|a| tape.constant(a.clone()))
        .collect()
}

/// `sum_g softmax(logits)_g * A_g`.
pub fn merge_graphs(tape: &mut Tape, logits: Var, graphs: &[Var]) -> Result<Var> {
    let (_, m) = tape.shape(logits);
    if graphs.is_empty() || m != graphs.len() {
        return Err(Error::InvalidArgument(format!(
            "{m} graph logits for {} graphs",
            graphs.len()
        )));
    }
    let shape = tape.shape(graphs[0]);
    for &g in &graphs[1..] {
        if tape.shape(g) != shape {
            return Err(Error::dim("merge_graphs", shape, tape.shape(g)));
        }
    }
    let weights = tape.softmax_vector(logits)?;
    let mut merged: Option<Var> = None;
    for (k, &g) in graphs.iter().enumerate() {
        let a = tape.element(weights, k)?;
        let term = tape.scale_by(a, g)?;
        merged = Some(match merged {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(merged.expect("at least one graph"))
}

/// Two graph-convolution layers `H' = sigmoid(A H W)`.
pub fn ren_forward(tape: &mut Tape, vars: &RenVars, merged: Var, h0: Var) -> Result<Var> {
    let (b, _) = tape.shape(merged);
    if tape.shape(h0).0 != b {
        return Err(Error::dim("ren_forward", tape.shape(merged), tape.shape(h0)));
    }
    let mut h = h0;
    for w in [vars.w0, vars.w1] {
        let ah = tape.matmul(merged, h)?;
        let z = tape.matmul(ah, w)?;
        h = tape.sigmoid(z);
    }
    Ok(h)
}

/// Mean logistic loss of `sigmoid(X_r . theta)` against region labels over
/// the listed regions.
pub fn ren_classification_loss(
    tape: &mut Tape,
    embeddings: Var,
    theta: Var,
    labels: &[u8],
    regions: &[RegionId],
) -> Result<Var> {
    if regions.is_empty() {
        return Err(Error::InvalidArgument("no regions to classify".into()));
    }
    let x = tape.gather_rows(embeddings, Rc::from(regions))?;
    let logits = tape.matmul(x, theta)?;
    let p = tape.sigmoid(logits);
    let y: Vec<f64> = regions.iter().map(|&r| f64::from(labels[r])).collect();
    tape.bce(p, Rc::from(y))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub anchor: RegionId,
    pub similar: Vec<RegionId>,
    pub dissimilar: Vec<RegionId>,
}

/// Half the interquartile range of visited-region scores.
pub fn default_delta(table: &RegionCreditTable) -> f64 {
    let mut s: Vec<f64> = table
        .visited_regions()
        .into_iter()
        .map(|r| table.scores[r])
        .collect();
    if s.is_empty() {
        return 0.0;
    }
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    0.5 * (q(0.75) - q(0.25))
}

/// For every candidate anchor, up to `per_anchor` same-label regions within
/// `delta` of its score and exactly as many opposite-label regions farther
/// than `delta`. Only visited regions listed in `pool` take part.
pub fn sample_pairs(
    table: &RegionCreditTable,
    pool: &[RegionId],
    delta: f64,
    per_anchor: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let pool: Vec<RegionId> = pool.iter().copied().filter(|&r| table.visited[r]).collect();
    for class in 0..=1u8 {
        if !pool.iter().any(|&r| table.labels[r] == class) {
            return Err(Error::Data(format!(
                "pair sampling needs both region labels; class {class} is empty"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &r in &pool {
        let (s, y) = (table.scores[r], table.labels[r]);
        let mut similar: Vec<RegionId> = pool
            .iter()
            .copied()
            .filter(|&o| o != r && table.labels[o] == y && (table.scores[o] - s).abs() < delta)
            .collect();
        let mut dissimilar: Vec<RegionId> = pool
            .iter()
            .copied()
            .filter(|&o| table.labels[o] != y && (table.scores[o] - s).abs() > delta)
            .collect();
        similar.shuffle(&mut rng);
        dissimilar.shuffle(&mut rng);
        let k = per_anchor.min(similar.len()).min(dissimilar.len());
        if k == 0 {
            continue;
        }
        similar.truncate(k);
        dissimilar.truncate(k);
        out.push(PairSample {
            anchor: r,
            similar,
            dissimilar,
        });
    }
    Ok(out)
}

fn pair_index(pairs: &[PairSample]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut anchors = Vec::new();
    let mut sims = Vec::new();
    let mut diss = Vec::new();
    for p in pairs {
        for (&s, &d) in p.similar.iter().zip(&p.dissimilar) {
            anchors.push(p.anchor);
            sims.push(s);
            diss.push(d);
        }
    }
    (anchors, sims, diss)
}

/// Mean over (anchor, similar, dissimilar) triples of the region similarity
/// regularizer. Zero when there are no pairs.
pub fn ren_similarity_loss(
    tape: &mut Tape,
    embeddings: Var,
    pairs: &[PairSample],
    form: SimilarityForm,
) -> Result<Var> {
    let (anchors, sims, diss) = pair_index(pairs);
    if anchors.is_empty() {
        let zero = tape.constant(Matrix::scalar(0.0));
        return Ok(zero);
    }
    let a = tape.gather_rows(embeddings, Rc::from(anchors))?;
    let s = tape.gather_rows(embeddings, Rc::from(sims))?;
    let d = tape.gather_rows(embeddings, Rc::from(diss))?;
    let ip_s = tape.row_dot(a, s)?;
    let ip_d = tape.row_dot(a, d)?;
    match form {
        SimilarityForm::Verbatim => {
            // log(1/(1+e^x)) = -softplus(x)
            let sp_s = tape.softplus(ip_s);
            let sp_d = tape.softplus(ip_d);
            let diff = tape.sub(sp_d, sp_s)?;
            let m = tape.mean(diff);
            Ok(tape.add_scalar(m, 1.0))
        }
        SimilarityForm::Logistic => {
            let neg_s = tape.scale(ip_s, -1.0);
            let sp_s = tape.softplus(neg_s);
            let sp_d = tape.softplus(ip_d);
            let sum = tape.add(sp_s, sp_d)?;
            Ok(tape.mean(sum))
        }
    }
}

/// Mean inner product over similar pairs minus mean over dissimilar pairs.
pub fn pair_separation(embeddings: &Matrix, pairs: &[PairSample]) -> f64 {
    let (anchors, sims, diss) = pair_index(pairs);
    if anchors.is_empty() {
        return 0.0;
    }
    let dot = |i: usize, j: usize| -> f64 {
        embeddings
            .row(i)
            .iter()
            .zip(embeddings.row(j))
            .map(|(a, b)| a * b)
            .sum()
    };
    let n = anchors.len() as f64;
    let s: f64 = anchors.iter().zip(&sims).map(|(&a, &s)| dot(a, s)).sum();
    let d: f64 = anchors.iter().zip(&diss).map(|(&a, &d)| dot(a, d)).sum();
    (s - d) / n
}

/// Train / held-out partition of visited regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSplit {
    pub train: Vec<RegionId>,
    pub validation: Vec<RegionId>,
}

pub fn split_regions(table: &RegionCreditTable, validation_fraction: f64, seed: u64) -> RegionSplit {
    let mut visited = table.visited_regions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_2e91);
    visited.shuffle(&mut rng);
    let n_val = if visited.len() >= 2 {
        ((visited.len() as f64 * validation_fraction).round() as usize).clamp(1, visited.len() - 1)
    } else {
        0
    };
    let mut validation = visited.split_off(visited.len() - n_val);
    visited.sort_unstable();
    validation.sort_unstable();
    RegionSplit {
        train: visited,
        validation,
    }
}

/// The training objective and its parts, built on `tape`.
pub struct RenObjective {
    pub total: Var,
    pub classification: Var,
    pub similarity: Var,
    pub embeddings: Var,
}

pub fn ren_objective(
    tape: &mut Tape,
    vars: &RenVars,
    graphs: &[Var],
    h0: Var,
    labels: &[u8],
    regions: &[RegionId],
    pairs: &[PairSample],
    config: &RenConfig,
) -> Result<RenObjective> {
    let merged = merge_graphs(tape, vars.graph_logits, graphs)?;
    let x = ren_forward(tape, vars, merged, h0)?;
    let classification = ren_classification_loss(tape, x, vars.theta, labels, regions)?;
    let similarity = ren_similarity_loss(tape, x, pairs, config.similarity_form)?;
    let total = if config.gamma == 0.0 {
        classification
    } else {
        let weighted = tape.scale(similarity, config.gamma);
        tape.add(classification, weighted)?
    };
    Ok(RenObjective {
        total,
        classification,
        similarity,
        embeddings: x,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenTrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub validation_accuracy: f64,
    pub delta: f64,
    /// Similar-minus-dissimilar mean inner product before and after training.
    pub initial_separation: f64,
    pub final_separation: f64,
    pub pairs: Vec<PairSample>,
    pub region_split: RegionSplit,
    pub attention_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RenOutcome {
    pub model: RenModel,
    pub embeddings: Matrix,
    pub report: RenTrainReport,
}

fn accuracy(embeddings: &Matrix, theta: &Matrix, labels: &[u8], regions: &[RegionId]) -> f64 {
    if regions.is_empty() {
        return f64::NAN;
    }
    let correct = regions
        .iter()
        .filter(|&&r| {
            let logit: f64 = embeddings.row(r).iter().zip(theta.data()).map(|(a, b)| a * b).sum();
            u8::from(logit > 0.0) == labels[r]
        })
        .count();
    correct as f64 / regions.len() as f64
}

/// Full-batch Adam on the combined region objective with early stopping on
/// the held-out regions' classification loss. Returns the best parameters.
pub fn train_ren(
    model: RenModel,
    graphs: &RegionGraphSet,
    h0: &Matrix,
    table: &RegionCreditTable,
) -> Result<RenOutcome> {
    let config = model.config.clone();
    let split = split_regions(table, config.validation_fraction, config.seed);
    let delta = config.delta.unwrap_or_else(|| default_delta(table));
    // Pairs are drawn even when the regularizer is off so that separation
    // can be compared across settings.
    let pairs = match sample_pairs(table, &split.train, delta, config.pairs_per_anchor, config.seed) {
        Ok(p) => p,
        Err(e) if config.gamma > 0.0 => return Err(e),
        Err(_) => Vec::new(),
    };
    let active: &[PairSample] = if config.gamma > 0.0 { &pairs } else { &[] };
    let initial_separation = pair_separation(&model.embed(graphs, h0)?, &pairs);

    let mut model = model;
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut adam = Adam::new(config.learning_rate);
    let mut train_loss = Vec::new();
    let mut validation_loss = Vec::new();

    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let gs = bind_graphs(&mut tape, graphs);
        let h = tape.constant(h0.clone());
        let obj = ren_objective(&mut tape, &vars, &gs, h, &table.labels, &split.train, active, &config)?;
        let loss = tape.value(obj.total).data()[0];
        let val = if split.validation.is_empty() {
            loss
        } else {
            let v = ren_classification_loss(&mut tape, obj.embeddings, vars.theta, &table.labels, &split.validation)?;
            tape.value(v).data()[0]
        };
        if !loss.is_finite() || !val.is_finite() {
            return Err(Error::Divergence(format!(
                "region network loss became {loss} at epoch {epoch}"
            )));
        }
        train_loss.push(loss);
        validation_loss.push(val);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }

        tape.backward(obj.total)?;
        let grads = [vars.graph_logits, vars.w0, vars.w1, vars.theta].map(|v| tape.grad(v));
        adam.update(&mut model.params_mut(), &grads)?;
    }

    let embeddings = best.embed(graphs, h0)?;
    let validation_accuracy = accuracy(&embeddings, &best.theta, &table.labels, &split.validation);
    let attention_weights = best.attention_weights();
    let final_separation = pair_separation(&embeddings, &pairs);
    Ok(RenOutcome {
        model: best,
        embeddings,
        report: RenTrainReport {
            epochs_run: train_loss.len(),
            best_epoch,
            train_loss,
            validation_loss,
            validation_accuracy,
            delta,
            initial_separation,
            final_separation,
            pairs,
            region_split: split,
            attention_weights,
        },
    })
}

/// `region,e0,...,e{d-1}` with shortest round-trip float formatting.
pub fn embeddings_csv(embeddings: &Matrix) -> String {
    let mut out = String::from("region");
    for k in 0..embeddings.cols() {
        write!(out, ",e{k}").unwrap();
    }
    out.push('\n');
    for r in 0..embeddings.rows() {
        write!(out, "{r}").unwrap();
        for v in embeddings.row(r) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings_csv(path: &Path, embeddings: &Matrix) -> Result<()> {
    fs::write(path, embeddings_csv(embeddings)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let cols = header.split(',').count().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 1 || fields[0].parse::<usize>().ok() != Some(rows) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: "malformed embedding row".into(),
            });
        }
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("bad value `{f}`"),
            })?);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols, data)
}
