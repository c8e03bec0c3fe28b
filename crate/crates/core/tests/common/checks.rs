//! Independent oracles and invariant checks.

use std::collections::BTreeMap;
use std::rc::Rc;

use creditprint::autodiff::{Matrix, Segments, Tape};
use creditprint::checkpoint;
use creditprint::eval::auc;
use creditprint::graphs::{normalize_adjacency, DegreeSource, GraphConfig, GraphKind, RegionGraphSet};
use creditprint::mobility::{generate_synthetic, split_users, RegionGrid, SynthConfig, UserRecord};
use creditprint::pipeline::{region_stage_inputs, run_stage_one, train_pipeline, PipelineConfig, Prepared};
use creditprint::ren::{embeddings_csv, RenConfig, RenModel};
use creditprint::tcan::{scores_csv, score_users, temporal_attention, user_aggregate, ManualTable, TcanConfig, TcanModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Checked = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn auc_by_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut np, mut nn) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            np += 1;
        } else {
            nn += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * np * nn) as f64
}

/// Random instance with both classes; `tied` draws scores from five levels.
pub fn auc_instance(rng: &mut ChaCha8Rng, tied: bool) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=80);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    labels[0] = 1;
    labels[1] = 0;
    labels.shuffle(rng);
    let scores = (0..n)
        .map(|_| {
            if tied {
                f64::from(rng.gen_range(0..5u8)) * 0.25
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    (scores, labels)
}

pub fn auc_oracle(instances: usize) -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
    let mut tied_with_ties = 0;
    for k in 0..instances {
        let (scores, labels) = auc_instance(&mut rng, k % 2 == 0);
        let got = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = auc_by_pairs(&scores, &labels);
        ensure(got == want, || format!("instance {k}: rank AUC {got} vs pair count {want}"))?;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied_with_ties += 1;
        }
    }
    Ok(format!("{instances} instances ({tied_with_ties} with ties) equal bit for bit"))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m[p][k], m[q][k]);
                    m[p][k] = c * pk - s * qk;
                    m[q][k] = s * pk + c * qk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

pub fn random_adjacency(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.4) {
                let w = if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.0..5.0) };
                a.set(i, j, w);
                a.set(j, i, w);
            }
        }
    }
    a
}

pub fn small_dataset(seed: u64, users: usize, side: usize, days: u32) -> (Vec<UserRecord>, RegionGrid) {
    let data = generate_synthetic(&SynthConfig {
        seed,
        users,
        grid_rows: side,
        grid_cols: side,
        days,
        ..SynthConfig::default()
    })
    .unwrap();
    (data.users, data.grid)
}

fn is_symmetric(m: &Matrix) -> bool {
    (0..m.rows()).all(|i| (0..i).all(|j| m.get(i, j) == m.get(j, i)))
}

fn spectrum_in_unit_interval(m: &Matrix) -> std::result::Result<f64, String> {
    let ev = symmetric_eigenvalues(m);
    let worst = ev.iter().map(|v| v.abs()).fold(0.0, f64::max);
    ensure(worst <= 1.0 + 1e-12, || format!("eigenvalue {worst} outside [-1, 1]"))?;
    Ok(worst)
}

/// Symmetry and spectrum of every graph built from synthetic data, plus
/// random adjacencies up to 10 x 10.
pub fn graph_invariants() -> Checked {
    let mut checked = 0;
    for seed in 0..5 {
        let (users, grid) = small_dataset(seed, 60, 3, 10);
        let refs: Vec<&UserRecord> = users.iter().collect();
        let config = GraphConfig {
            min_cooccurrence: 1,
            min_visits: 1,
            rho_threshold: 0.05,
            ..GraphConfig::default()
        };
        let (_, graphs) = region_stage_inputs(&refs, &grid, &PipelineConfig {
            graph: config,
            ..PipelineConfig::default()
        })
        .map_err(|e| e.to_string())?;
        for (k, kind) in graphs.kinds.iter().enumerate() {
            ensure(is_symmetric(&graphs.adjacency[k]), || format!("{kind} adjacency not symmetric"))?;
            ensure(is_symmetric(&graphs.normalized[k]), || format!("{kind} normalized not symmetric"))?;
            spectrum_in_unit_interval(&graphs.normalized[k]).map_err(|e| format!("{kind}: {e}"))?;
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=10);
        let a = random_adjacency(n, &mut rng);
        let norm = normalize_adjacency(&a, DegreeSource::WithSelfLoops).map_err(|e| e.to_string())?;
        ensure(is_symmetric(&norm), || "normalized random adjacency not symmetric".into())?;
        worst = worst.max(spectrum_in_unit_interval(&norm)?);
        checked += 1;
    }
    Ok(format!("{checked} graphs symmetric, max |eigenvalue| {worst:.15}"))
}

fn sums_to_one(values: &[f64], what: &str) -> std::result::Result<(), String> {
    let s: f64 = values.iter().sum();
    ensure((s - 1.0).abs() <= 1e-12, || format!("{what} sums to {s:e}"))
}

/// Every softmax in the models: graph attention, temporal attention, user
/// attention, and the raw tape ops.
pub fn softmax_sums() -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut count = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let scale = [0.1, 1.0, 30.0, 300.0][rng.gen_range(0..4)];
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut t = Tape::new();
        let v = t.constant(Matrix::row_vector(&logits));
        let s = t.softmax_vector(v).map_err(|e| e.to_string())?;
        sums_to_one(t.value(s).data(), "softmax_vector")?;

        let mut model = RenModel::new(2, n, RenConfig::default());
        model.graph_logits = Matrix::row_vector(&logits);
        sums_to_one(&model.attention_weights(), "graph attention")?;

        let d = 3;
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
        let w = Matrix::from_vec(d, 1, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let a = temporal_attention(&mut t, wv, xv).map_err(|e| e.to_string())?;
        sums_to_one(t.value(a).data(), "temporal attention")?;

        let cut = rng.gen_range(0..=n);
        let segs: Segments = if cut == 0 || cut == n { Rc::from(vec![0..n]) } else { Rc::from(vec![0..cut, cut..n]) };
        let c = t.constant(Matrix::zeros(n, 2));
        let wu = t.constant(Matrix::from_vec(d + 2, 1, vec![0.3; d + 2]).unwrap());
        let (_, ua) = user_aggregate(&mut t, wu, xv, c, segs.clone()).map_err(|e| e.to_string())?;
        for r in segs.iter() {
            sums_to_one(&t.value(ua).data()[r.clone()], "user attention")?;
        }

        let lens: Rc<[usize]> = (0..3).map(|_| rng.gen_range(1..=n)).collect();
        let l = t.constant(Matrix::from_vec(3, n, (0..3 * n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap());
        let p = t.row_softmax_prefix(l, lens.clone()).map_err(|e| e.to_string())?;
        for (i, &len) in lens.iter().enumerate() {
            sums_to_one(&t.value(p).row(i)[..len], "row_softmax_prefix")?;
        }
        count += 1;
    }
    Ok(format!("{count} random instances, all distributions within 1e-12 of 1"))
}

pub fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    // row perm[i] of the output is row i of the input
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(m.row(i));
    }
    out
}

pub fn permute_sym(m: &Matrix, perm: &[usize]) -> Matrix {
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(perm[i], perm[j], m.get(i, j));
        }
    }
    out
}

fn graph_set(normalized: Vec<Matrix>) -> RegionGraphSet {
    RegionGraphSet {
        kinds: GraphKind::ALL[..normalized.len()].to_vec(),
        adjacency: normalized.clone(),
        normalized,
    }
}

/// Four regions, two blocks, power-of-two weights: every row has at most
/// two nonzeros and every product is exact, so permuting the regions
/// reorders nothing but commutative two-term sums and the comparison can be
/// bitwise.
pub fn gcn_permutation_equivariance() -> Checked {
    let a = Matrix::from_rows(&[
        vec![0.5, 0.25, 0.0, 0.0],
        vec![0.25, 0.5, 0.0, 0.0],
        vec![0.0, 0.0, 0.25, 0.5],
        vec![0.0, 0.0, 0.5, 0.125],
    ]);
    let h0 = Matrix::from_rows(&[
        vec![0.5, -1.25, 2.0],
        vec![1.5, 0.75, -0.5],
        vec![-2.0, 0.25, 1.0],
        vec![0.125, 1.75, -1.5],
    ]);
    let model = RenModel::new(3, 1, RenConfig {
        embed_dim: 5,
        ..RenConfig::default()
    });
    let base = model.embed(&graph_set(vec![a.clone()]), &h0).map_err(|e| e.to_string())?;
    let perms = [[2, 0, 3, 1], [1, 0, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2]];
    for perm in perms {
        let moved = model
            .embed(&graph_set(vec![permute_sym(&a, &perm)]), &permute_rows(&h0, &perm))
            .map_err(|e| e.to_string())?;
        ensure(moved == permute_rows(&base, &perm), || format!("permutation {perm:?} changed embeddings"))?;
    }
    Ok(format!("{} permutations, bitwise equal", perms.len()))
}

/// Permuting a user's trajectories leaves the credit score unchanged.
pub fn aggregation_order_independence() -> Checked {
    let (users, grid) = small_dataset(3, 12, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let regions = Matrix::from_vec(
        grid.region_count(),
        4,
        (0..grid.region_count() * 4).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let manual: ManualTable = users.iter().map(|u| (u.user_id, vec![rng.gen_range(-1.0..1.0); 2])).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let model = TcanModel::new(4, 2, TcanConfig {
            hidden_dim: 6,
            trajectory_dim: 5,
            head_hidden: 4,
            seed,
            ..TcanConfig::default()
        });
        let refs: Vec<&UserRecord> = users.iter().collect();
        let base = score_users(&model, &regions, &refs, &manual).map_err(|e| e.to_string())?;
        let mut shuffled = users.clone();
        for u in &mut shuffled {
            u.trajectories.shuffle(&mut rng);
        }
        let refs: Vec<&UserRecord> = shuffled.iter().collect();
        let moved = score_users(&model, &regions, &refs, &manual).map_err(|e| e.to_string())?;
        for (a, b) in base.iter().zip(&moved) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("score moved by {worst:e}"))?;
    Ok(format!("max score change {worst:e}"))
}

pub fn sha(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes of everything stage one produces, plus the feature standardizer.
pub fn stage_one_hashes(users: &[UserRecord], grid: RegionGrid, config: &PipelineConfig) -> BTreeMap<&'static str, String> {
    let split = split_users(users, config.split, config.seed).unwrap();
    stage_one_hashes_with(users, grid, split, config)
}

pub fn stage_one_hashes_with(
    users: &[UserRecord],
    grid: RegionGrid,
    split: creditprint::mobility::DatasetSplit,
    config: &PipelineConfig,
) -> BTreeMap<&'static str, String> {
    let prepared = Prepared::with_split(users, grid, split).unwrap();
    let one = run_stage_one(&prepared.train(), &grid, config).unwrap();
    let json = |v: &dyn erased::Ser| v.to_json();
    BTreeMap::from([
        ("region_table", sha(json(&one.table).as_bytes())),
        ("graphs", sha(json(&one.graphs.export(&one.table)).as_bytes())),
        ("region_inputs", sha(json(&one.inputs).as_bytes())),
        ("ren_model", sha(json(&one.ren.model).as_bytes())),
        ("embeddings", sha(embeddings_csv(&one.ren.embeddings).as_bytes())),
        ("standardizer", sha(json(&prepared.standardizer).as_bytes())),
    ])
}

mod erased {
    pub trait Ser {
        fn to_json(&self) -> String;
    }

    impl<T: serde::Serialize> Ser for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).unwrap()
        }
    }
}

/// Stage-one artifacts are a function of the training users only.
pub fn leakage_guard(config: &PipelineConfig) -> Checked {
    let (users, grid) = small_dataset(21, 120, 5, 10);
    let split = split_users(&users, config.split, config.seed).unwrap();
    let base = stage_one_hashes_with(&users, grid, split.clone(), config);

    let is_test = |u: &UserRecord| split.test.binary_search(&u.user_id).is_ok();
    let mut flipped = users.clone();
    for u in flipped.iter_mut().filter(|u| is_test(u)) {
        u.label = 1 - u.label;
    }
    let after_labels = stage_one_hashes_with(&flipped, grid, split.clone(), config);
    ensure(after_labels == base, || format!("test labels leaked: {base:?} vs {after_labels:?}"))?;

    let mut truncated = users.clone();
    for u in truncated.iter_mut().filter(|u| is_test(u)) {
        u.trajectories.truncate(1);
    }
    let after_traj = stage_one_hashes_with(&truncated, grid, split.clone(), config);
    ensure(after_traj == base, || "test trajectories leaked into stage one or standardization".into())?;

    // the hashes do see training data
    let mut control = users.clone();
    let train_id = split.train[0];
    for u in control.iter_mut().filter(|u| u.user_id == train_id) {
        u.label = 1 - u.label;
    }
    let after_train = stage_one_hashes_with(&control, grid, split, config);
    ensure(after_train["region_table"] != base["region_table"], || {
        "flipping a training label did not change the region table".into()
    })?;
    Ok(format!(
        "{} artifacts unchanged under altered test labels and trajectories",
        base.len()
    ))
}

/// Trains the whole pipeline twice and compares checkpoint and score bytes.
pub fn determinism(users: &[UserRecord], grid: RegionGrid, config: &PipelineConfig) -> Checked {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut digests = Vec::new();
    for run in 0..2 {
        let prepared = Prepared::new(users, grid, config).map_err(|e| e.to_string())?;
        let trained = train_pipeline(&prepared, config).map_err(|e| e.to_string())?;
        let ren = dir.path().join(format!("ren{run}.json"));
        let tcan = dir.path().join(format!("tcan{run}.json"));
        checkpoint::save(&ren, "ren", &trained.stage_one.ren.model).map_err(|e| e.to_string())?;
        checkpoint::save(&tcan, "tcan", &trained.stage_two.tcan.model).map_err(|e| e.to_string())?;
        let scores = scores_csv(&prepared.test(), &trained.stage_two.test_probabilities);
        digests.push([
            sha(&std::fs::read(&ren).unwrap()),
            sha(&std::fs::read(&tcan).unwrap()),
            sha(scores.as_bytes()),
        ]);
    }
    ensure(digests[0] == digests[1], || format!("runs differ: {digests:?}"))?;
    Ok(format!("checkpoints and scores identical (scores sha {})", &digests[0][2][..12]))
}

/// Small enough for the leakage and determinism checks to run in seconds.
pub fn quick_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig {
        ren: RenConfig {
            embed_dim: 8,
            max_epochs: 60,
            ..RenConfig::default()
        },
        tcan: TcanConfig {
            hidden_dim: 8,
            trajectory_dim: 8,
            head_hidden: 8,
            max_epochs: 4,
            ..TcanConfig::default()
        },
        ..PipelineConfig::default()
    };
    c.graph.min_cooccurrence = 1;
    c.graph.min_visits = 2;
    c.seeded(seed)
}
