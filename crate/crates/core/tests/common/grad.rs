//! Central-difference gradient checks for every trainable component on toy
//! instances (at most 6 regions, at most 2 users).

use std::collections::BTreeMap;
use std::rc::Rc;

use creditprint::autodiff::{finite_diff_check, Matrix, Segments, Tape, Var};
use creditprint::features::{logistic_objective, mlp_forward};
use creditprint::mobility::{RegionGrid, Trajectory, UserRecord, Visit};
use creditprint::ren::{ren_objective, PairSample, RenConfig, RenVars, SimilarityForm};
use creditprint::tcan::{
    forward_batch, gru_step, predict_credit, tcan_objective, trajectory_embed, user_aggregate, Batch,
    EncoderKind, GruVars, TcanConfig, TcanModel,
};
use creditprint::Result;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

pub type Checked = std::result::Result<(), String>;

fn rand_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Reduces `v` to a scalar against fixed random weights, so every entry of
/// the gradient is distinct.
fn project(tape: &mut Tape, v: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.hadamard(v, w)?;
    Ok(tape.sum(prod))
}

fn check<F>(name: &str, seed: u64, params: &[Matrix], f: F) -> Checked
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(f, params, STEP, TOL).map_err(|e| format!("{name} seed {seed}: {e}"))?;
    if report.passed() {
        Ok(())
    } else {
        Err(format!(
            "{name} seed {seed}: relative errors {:?} (worst entries {:?})",
            report.rel_err, report.max_entry_err
        ))
    }
}

/// ReLU is not differentiable at zero, so instances whose hidden
/// pre-activations sit closer than this to zero are redrawn: a `STEP`
/// perturbation could cross the kink and the central difference would
/// measure a one-sided slope.
const KINK_MARGIN: f64 = 0.02;

fn concat(a: &Matrix, b: &Matrix) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| [a.row(i), b.row(i)].concat()).collect();
    Matrix::from_rows(&rows)
}

/// Smallest `|x W + b|` over all entries.
fn kink_distance(x: &Matrix, w: &Matrix, b: &Matrix) -> f64 {
    let z = x.matmul(w).unwrap();
    (0..z.rows())
        .flat_map(|i| (0..z.cols()).map(move |j| (i, j)))
        .map(|(i, j)| (z.get(i, j) + b.get(0, j)).abs())
        .fold(f64::INFINITY, f64::min)
}

pub fn elementwise_and_linear_primitives(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_matrix(3, 4, 1.0, &mut rng);
        let b = rand_matrix(4, 2, 1.0, &mut rng);
        let c = rand_matrix(3, 4, 1.0, &mut rng);
        let row = rand_matrix(1, 4, 1.0, &mut rng);
        let s = rand_matrix(1, 1, 1.0, &mut rng);
        let col = rand_matrix(3, 1, 1.0, &mut rng);
        let w32 = rand_matrix(3, 2, 1.0, &mut rng);
        let w34 = rand_matrix(3, 4, 1.0, &mut rng);
        check("matmul", seed, &[a.clone(), b.clone()], |t, p| {
            let m = t.matmul(p[0], p[1])?;
            project(t, m, &w32)
        })?;
        check("add/sub/hadamard", seed, &[a.clone(), c.clone()], |t, p| {
            let x = t.add(p[0], p[1])?;
            let y = t.sub(p[0], p[1])?;
            let z = t.hadamard(x, y)?;
            project(t, z, &w34)
        })?;
        check("add_row/scale/add_scalar", seed, &[a.clone(), row.clone()], |t, p| {
            let x = t.add_row(p[0], p[1])?;
            let x = t.scale(x, -1.7);
            let x = t.add_scalar(x, 0.3);
            project(t, x, &w34)
        })?;
        check("scale_by/mul_col", seed, &[s.clone(), col.clone(), a.clone()], |t, p| {
            let x = t.scale_by(p[0], p[2])?;
            let x = t.mul_col(p[1], x)?;
            project(t, x, &w34)
        })?;
        check("sigmoid/tanh/softplus", seed, &[a.clone()], |t, p| {
            let x = t.sigmoid(p[0]);
            let y = t.tanh(p[0]);
            let z = t.softplus(p[0]);
            let xy = t.hadamard(x, y)?;
            let out = t.add(xy, z)?;
            project(t, out, &w34)
        })?;
        // keep pre-activations away from the kink
        let away = a.map(|v| if v.abs() < 0.05 { v.signum() * 0.2 + v } else { v });
        check("relu", seed, &[away], |t, p| {
            let x = t.relu(p[0]);
            project(t, x, &w34)
        })?;
        check("sum/mean/element", seed, &[a.clone()], |t, p| {
            let x = t.sum(p[0]);
            let y = t.mean(p[0]);
            let sq = t.hadamard(p[0], p[0])?;
            let e = t.element(sq, 5)?;
            let xy = t.hadamard(x, y)?;
            t.add(xy, e)
        })?;
    }
    Ok(())
}

pub fn shape_and_indexing_primitives(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = rand_matrix(4, 3, 1.0, &mut rng);
        let b = rand_matrix(4, 2, 1.0, &mut rng);
        let idx: Rc<[usize]> = Rc::from(vec![2, 0, 2, 3, 1]);
        let w53 = rand_matrix(5, 3, 1.0, &mut rng);
        let w26 = rand_matrix(2, 6, 1.0, &mut rng);
        let w41 = rand_matrix(4, 1, 1.0, &mut rng);
        check("gather_rows", seed, &[a.clone()], |t, p| {
            let g = t.gather_rows(p[0], idx.clone())?;
            project(t, g, &w53)
        })?;
        check("reshape", seed, &[a.clone()], |t, p| {
            let r = t.reshape(p[0], 2, 6)?;
            project(t, r, &w26)
        })?;
        check("column/concat_cols", seed, &[a.clone(), b.clone()], |t, p| {
            let c = t.column(p[0], 1)?;
            let cat = t.concat_cols(p[1], p[0])?;
            let cc = t.concat_cols(cat, c)?;
            let sq = t.hadamard(cc, cc)?;
            let w = rand_matrix(4, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            project(t, sq, &w)
        })?;
        check("row_dot/inner_product", seed, &[a.clone(), a.map(|v| v * 0.5 + 0.1)], |t, p| {
            let r = t.row_dot(p[0], p[1])?;
            let r = t.tanh(r);
            let c0 = t.column(p[0], 0)?;
            let c1 = t.column(p[1], 2)?;
            let ip = t.inner_product(c0, c1)?;
            let x = project(t, r, &w41)?;
            t.add(x, ip)
        })?;
    }
    Ok(())
}

pub fn softmax_primitives_and_bce(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let v = rand_matrix(1, 5, 2.0, &mut rng);
        let w15 = rand_matrix(1, 5, 1.0, &mut rng);
        check("softmax_vector", seed, &[v], |t, p| {
            let s = t.softmax_vector(p[0])?;
            project(t, s, &w15)
        })?;
        let logits = rand_matrix(3, 4, 2.0, &mut rng);
        let lens: Rc<[usize]> = Rc::from(vec![4, 1, 3]);
        let w34 = rand_matrix(3, 4, 1.0, &mut rng);
        check("row_softmax_prefix", seed, &[logits], |t, p| {
            let s = t.row_softmax_prefix(p[0], lens.clone())?;
            project(t, s, &w34)
        })?;
        let scores = rand_matrix(5, 1, 2.0, &mut rng);
        let x = rand_matrix(5, 3, 1.0, &mut rng);
        let segs: Segments = Rc::from(vec![0..3, 3..5]);
        let w23 = rand_matrix(2, 3, 1.0, &mut rng);
        check("segment_softmax/weighted_sum", seed, &[scores, x], |t, p| {
            let a = t.segment_softmax(p[0], segs.clone())?;
            let pooled = t.segment_weighted_sum(a, p[1], segs.clone())?;
            project(t, pooled, &w23)
        })?;
        let z = rand_matrix(4, 1, 2.0, &mut rng);
        let labels: Rc<[f64]> = Rc::from(vec![1.0, 0.0, 0.0, 1.0]);
        check("bce", seed, &[z], |t, p| {
            let pr = t.sigmoid(p[0]);
            t.bce(pr, labels.clone())
        })?;
    }
    Ok(())
}

/// Symmetric normalized adjacency of a random graph on `b` nodes.
fn random_normalized(b: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut a = Matrix::identity(b);
    for i in 0..b {
        for j in i + 1..b {
            if rng.gen_bool(0.5) {
                let w = rng.gen_range(0.2..1.0);
                a.set(i, j, w);
                a.set(j, i, w);
            }
        }
    }
    let d: Vec<f64> = (0..b).map(|i| a.row(i).iter().sum::<f64>().sqrt().recip()).collect();
    Matrix::from_vec(b, b, (0..b * b).map(|k| a.data()[k] * d[k / b] * d[k % b]).collect()).unwrap()
}

pub fn region_network_layers_and_graph_attention(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let b = 6;
        let graphs: Vec<Matrix> = (0..3).map(|_| random_normalized(b, &mut rng)).collect();
        let h0 = rand_matrix(b, 4, 1.0, &mut rng);
        let labels = [1u8, 0, 1, 0, 0, 1];
        let regions = [0usize, 1, 2, 3, 5];
        let pairs = vec![
            PairSample {
                anchor: 0,
                similar: vec![2],
                dissimilar: vec![1],
            },
            PairSample {
                anchor: 3,
                similar: vec![1, 4],
                dissimilar: vec![0, 5],
            },
        ];
        let params = [
            rand_matrix(1, 3, 1.0, &mut rng),
            rand_matrix(4, 3, 1.0, &mut rng),
            rand_matrix(3, 3, 1.0, &mut rng),
            rand_matrix(3, 1, 1.0, &mut rng),
        ];
        for form in [SimilarityForm::Verbatim, SimilarityForm::Logistic] {
            let config = RenConfig {
                embed_dim: 3,
                gamma: 0.5,
                similarity_form: form,
                ..RenConfig::default()
            };
            check(&format!("region network {form:?}"), seed, &params, |t, p| {
                let vars = RenVars {
                    graph_logits: p[0],
                    w0: p[1],
                    w1: p[2],
                    theta: p[3],
                };
                let gs: Vec<Var> = graphs.iter().map(|g| t.constant(g.clone())).collect();
                let h = t.constant(h0.clone());
                Ok(ren_objective(t, &vars, &gs, h, &labels, &regions, &pairs, &config)?.total)
            })?;
        }
    }
    Ok(())
}

fn gru_params(d_in: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    let mut v = Vec::new();
    for _ in 0..3 {
        v.push(rand_matrix(d_in, h, 0.8, rng));
    }
    for _ in 0..3 {
        v.push(rand_matrix(h, h, 0.8, rng));
    }
    v
}

fn gru_vars(p: &[Var]) -> GruVars {
    GruVars {
        wq: p[0],
        wg: p[1],
        wh: p[2],
        uq: p[3],
        ug: p[4],
        uh: p[5],
    }
}

pub fn gru_cell(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut params = gru_params(3, 4, &mut rng);
        params.push(rand_matrix(2, 3, 1.0, &mut rng));
        params.push(rand_matrix(2, 4, 0.9, &mut rng));
        let w = rand_matrix(2, 4, 1.0, &mut rng);
        check("gru step", seed, &params, |t, p| {
            let g = gru_vars(p);
            let step = gru_step(t, &g, p[6], p[7])?;
            project(t, step.z, &w)
        })?;
    }
    Ok(())
}

fn small_tcan(encoder: EncoderKind, seed: u64) -> TcanModel {
    let config = TcanConfig {
        hidden_dim: 4,
        trajectory_dim: 3,
        head_hidden: 3,
        encoder,
        seed,
        ..TcanConfig::default()
    };
    TcanModel::new(3, 2, config)
}

pub fn temporal_attention_and_trajectory_encoder(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let model = small_tcan(EncoderKind::Gru, seed);
        let x_seq = rand_matrix(4, 3, 1.0, &mut rng);
        let w = rand_matrix(1, 3, 1.0, &mut rng);
        let mut params = model.params();
        params.push(x_seq);
        let n = params.len();
        check("trajectory encoder", seed, &params, |t, p| {
            let vars = model.vars_from(&p[..n - 1])?;
            let e = trajectory_embed(t, &vars, p[n - 1])?;
            project(t, e, &w)
        })?;
    }
    Ok(())
}

pub fn user_attention_and_prediction_head(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let segs: Segments = Rc::from(vec![0..3, 3..5]);
        let x = rand_matrix(5, 3, 1.0, &mut rng);
        let c = rand_matrix(5, 9, 1.0, &mut rng);
        let w_u = rand_matrix(12, 1, 1.0, &mut rng);
        let w23 = rand_matrix(2, 3, 1.0, &mut rng);
        check("user attention", seed, &[w_u, x], |t, p| {
            let cv = t.constant(c.clone());
            let (pooled, _) = user_aggregate(t, p[0], p[1], cv, segs.clone())?;
            project(t, pooled, &w23)
        })?;

        let model = small_tcan(EncoderKind::MeanPool, seed);
        let (x_tu, manual) = loop {
            let x_tu = rand_matrix(2, 3, 1.0, &mut rng);
            let manual = rand_matrix(2, 2, 1.0, &mut rng);
            if kink_distance(&concat(&x_tu, &manual), &model.head_w1, &model.head_b1) > KINK_MARGIN {
                break (x_tu, manual);
            }
        };
        let mut params = model.params();
        params.push(x_tu);
        let n = params.len();
        let labels: Rc<[f64]> = Rc::from(vec![1.0, 0.0]);
        check("prediction head", seed, &params, |t, p| {
            let vars = model.vars_from(&p[..n - 1])?;
            let m = t.constant(manual.clone());
            let pr = predict_credit(t, &vars, p[n - 1], Some(m))?;
            t.bce(pr, labels.clone())
        })?;
    }
    Ok(())
}

fn toy_users(rng: &mut ChaCha8Rng, grid: &RegionGrid) -> Vec<UserRecord> {
    (0..2u64)
        .map(|id| {
            let trajs = (0..3u32)
                .map(|day| {
                    let len = rng.gen_range(1..=4);
                    let visits = (0..len)
                        .map(|k| Visit {
                            slot: (k * 5) as u8,
                            region: rng.gen_range(0..grid.region_count()),
                        })
                        .collect();
                    Trajectory::new(id, day, visits, grid).unwrap()
                })
                .collect();
            UserRecord::new(id, id as u8, trajs).unwrap()
        })
        .collect()
}

pub fn credit_network_end_to_end(seeds: u64) -> Checked {
    let grid = RegionGrid::new(2, 3, 1.0).unwrap();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let users = toy_users(&mut rng, &grid);
        let refs: Vec<&UserRecord> = users.iter().collect();
        let manual: BTreeMap<u64, Vec<f64>> = users
            .iter()
            .map(|u| (u.user_id, vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
            .collect();
        let batch = Batch::new(&refs, &manual, 2, grid.region_count()).unwrap();
        for encoder in [EncoderKind::Gru, EncoderKind::MeanPool] {
            let mut model = small_tcan(encoder, seed);
            model.config.gamma = 0.3;
            let regions = loop {
                let regions = rand_matrix(6, 3, 1.0, &mut rng);
                let mut t = Tape::new();
                let vars = model.bind(&mut t);
                let r = t.constant(regions.clone());
                let out = forward_batch(&mut t, &vars, r, &batch).unwrap();
                let input = concat(t.value(out.users), batch.manual.as_ref().unwrap());
                if kink_distance(&input, &model.head_w1, &model.head_b1) > KINK_MARGIN {
                    break regions;
                }
            };
            let mut params = model.params();
            params.push(regions.clone());
            let n = params.len();
            check(&format!("credit network {encoder:?}"), seed, &params, |t, p| {
                let vars = model.vars_from(&p[..n - 1])?;
                let mut pair_rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(tcan_objective(t, &vars, p[n - 1], &batch, &model.config, &mut pair_rng)?.0)
            })?;
            let w = rand_matrix(2, 1, 1.0, &mut rng);
            check(&format!("credit probabilities {encoder:?}"), seed, &params, |t, p| {
                let vars = model.vars_from(&p[..n - 1])?;
                let out = forward_batch(t, &vars, p[n - 1], &batch)?;
                project(t, out.probabilities, &w)
            })?;
        }
    }
    Ok(())
}

pub fn baselines(seeds: u64) -> Checked {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let x = rand_matrix(6, 3, 1.0, &mut rng);
        let labels = [1u8, 0, 0, 1, 1, 0];
        let params = [rand_matrix(3, 1, 1.0, &mut rng), rand_matrix(1, 1, 1.0, &mut rng)];
        check("logistic regression", seed, &params, |t, p| {
            let xv = t.constant(x.clone());
            logistic_objective(t, xv, p[0], p[1], &labels, 0.1)
        })?;

        let params = loop {
            let params = [
                rand_matrix(3, 4, 1.0, &mut rng),
                rand_matrix(1, 4, 1.0, &mut rng),
                rand_matrix(4, 1, 1.0, &mut rng),
                rand_matrix(1, 1, 1.0, &mut rng),
            ];
            if kink_distance(&x, &params[0], &params[1]) > KINK_MARGIN {
                break params;
            }
        };
        let y: Rc<[f64]> = labels.iter().map(|&l| f64::from(l)).collect();
        check("mlp", seed, &params, |t, p| {
            let xv = t.constant(x.clone());
            let pr = mlp_forward(t, p, xv)?;
            t.bce(pr, y.clone())
        })?;
    }
    Ok(())
}

/// Every group, in report order.
pub const GROUPS: [(&str, fn(u64) -> Checked); 9] = [
    ("elementwise and linear ops", elementwise_and_linear_primitives),
    ("shape and indexing ops", shape_and_indexing_primitives),
    ("softmax ops and cross-entropy", softmax_primitives_and_bce),
    ("region network (graph attention + GCN)", region_network_layers_and_graph_attention),
    ("GRU cell", gru_cell),
    ("temporal attention + trajectory encoder", temporal_attention_and_trajectory_encoder),
    ("user attention + prediction head", user_attention_and_prediction_head),
    ("credit network end to end", credit_network_end_to_end),
    ("LR and MLP baselines", baselines),
];
