use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use creditprint::checkpoint;
use creditprint::config::RunConfig;
use creditprint::eval::{auc, emit_report, reference_values, run_experiment_matrix, EvalReport, Variant, VariantRun};
use creditprint::features::write_features_csv;
use creditprint::graphs::{RegionCreditTable, RegionGraphSet};
use creditprint::mobility::{
    generate_synthetic, load_dataset, read_grid, write_dataset, write_synth_meta, RegionGrid, UserRecord,
    GRID_FILE, LABEL_FILE, TRAJECTORY_FILE,
};
use creditprint::pipeline::{region_stage_inputs, run_stage_one, run_stage_two, Prepared, StageOne, StageTwo};
use creditprint::ren::{read_embeddings_csv, write_embeddings_csv};
use creditprint::tcan::{read_scores_csv, write_scores_csv};
use creditprint::{Error, Result};
use serde_json::{json, Map, Value};

use crate::{At, Command, Failure};

pub const MANIFEST: &str = "manifest.json";
pub const GRAPHS: &str = "graphs.json";
pub const FEATURES: &str = "features.csv";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const SCORES: &str = "scores.csv";
pub const REN_CHECKPOINT: &str = "ren.json";
pub const TCAN_CHECKPOINT: &str = "tcan.json";

/// Collects the manifest while a command runs.
struct Run<'a> {
    cfg: &'a RunConfig,
    command: &'static str,
    split_hash: Option<String>,
    files: Vec<String>,
    training: Map<String, Value>,
}

impl<'a> Run<'a> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.cfg.out_dir.join(name)
    }

    fn finish(self) -> Result<()> {
        let manifest = json!({
            "command": self.command,
            "seed": self.cfg.seed,
            "split_hash": self.split_hash,
            "config": self.cfg.resolved(),
            "files": self.files,
            "training": self.training,
        });
        let path = self.cfg.out_dir.join(MANIFEST);
        let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        body.push('\n');
        fs::write(&path, body).map_err(|e| Error::Io { path, source: e })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load(cfg: &RunConfig) -> Result<(Vec<UserRecord>, RegionGrid)> {
    let d = &cfg.data_dir;
    let grid = read_grid(&d.join(GRID_FILE))?;
    let users = load_dataset(&d.join(TRAJECTORY_FILE), &d.join(LABEL_FILE), &grid)?;
    Ok((users, grid))
}

pub fn run(command: &Command, cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let mut run = Run {
        cfg,
        command: command.name(),
        split_hash: None,
        files: Vec::new(),
        training: Map::new(),
    };
    if let Command::Generate = command {
        let data = generate_synthetic(&cfg.synth_config()).at("generate")?;
        ensure_dir(&cfg.out_dir).at("write")?;
        write_dataset(&cfg.out_dir, &data.users, &data.grid).at("write")?;
        write_synth_meta(&cfg.out_dir, &data.meta).at("write")?;
        for f in [TRAJECTORY_FILE, LABEL_FILE, GRID_FILE, creditprint::mobility::SYNTH_META_FILE] {
            run.files.push(f.to_string());
        }
        return run.finish().at("write");
    }

    let (users, grid) = load(cfg).at("ingest")?;
    let pc = cfg.pipeline_config();
    let prepared = Prepared::new(&users, grid, &pc).at("split")?;
    run.split_hash = Some(prepared.split.hash());

    match command {
        Command::Generate => unreachable!(),
        Command::BuildGraphs => {
            let (table, graphs) = region_stage_inputs(&prepared.train(), &grid, &pc).at("graphs")?;
            ensure_dir(&cfg.out_dir).at("write")?;
            write_region_stage(&mut run, &prepared, &table, &graphs).at("write")?;
        }
        Command::TrainRen => {
            let one = run_stage_one(&prepared.train(), &grid, &pc).at("ren")?;
            ensure_dir(&cfg.out_dir).at("write")?;
            write_stage_one(&mut run, &prepared, &one).at("write")?;
        }
        Command::TrainTcan { embeddings } => {
            let path = embeddings.clone().unwrap_or_else(|| cfg.out_dir.join(EMBEDDINGS));
            let regions = read_embeddings_csv(&path).at("ingest")?;
            if regions.rows() != grid.region_count() {
                return Err(Failure {
                    stage: "ingest",
                    error: Error::Data(format!(
                        "{}: {} region rows for a {}-region grid",
                        path.display(),
                        regions.rows(),
                        grid.region_count()
                    )),
                });
            }
            let two = run_stage_two(&prepared, &regions, &pc.tcan).at("tcan")?;
            ensure_dir(&cfg.out_dir).at("write")?;
            write_stage_two(&mut run, &prepared, &two).at("write")?;
        }
        Command::Train => {
            let one = run_stage_one(&prepared.train(), &grid, &pc).at("ren")?;
            let two = run_stage_two(&prepared, &one.ren.embeddings, &pc.tcan).at("tcan")?;
            ensure_dir(&cfg.out_dir).at("write")?;
            write_stage_one(&mut run, &prepared, &one).at("write")?;
            write_stage_two(&mut run, &prepared, &two).at("write")?;
        }
        Command::Evaluate => {
            let report = evaluate(cfg, &prepared)?;
            ensure_dir(&cfg.out_dir).at("write")?;
            emit_report(&report, &cfg.out_dir).at("write")?;
            add_report_files(&mut run);
        }
        Command::Ablate { .. } => {
            let report = run_experiment_matrix(&users, &grid, &cfg.experiment_config()).at("ablate")?;
            ensure_dir(&cfg.out_dir).at("write")?;
            emit_report(&report, &cfg.out_dir).at("write")?;
            add_report_files(&mut run);
        }
    }
    run.finish().at("write")
}

fn add_report_files(run: &mut Run<'_>) {
    use creditprint::eval::{REPORT_CSV, REPORT_JSON, SWEEP_CSV};
    for f in [REPORT_JSON, REPORT_CSV, SWEEP_CSV] {
        run.files.push(f.to_string());
    }
}

fn write_region_stage(
    run: &mut Run<'_>,
    prepared: &Prepared<'_>,
    table: &RegionCreditTable,
    graphs: &RegionGraphSet,
) -> Result<()> {
    graphs.export(table).write(&run.path(GRAPHS))?;
    write_features_csv(&run.path(FEATURES), &prepared.raw_manual)
}

fn write_stage_one(run: &mut Run<'_>, prepared: &Prepared<'_>, one: &StageOne) -> Result<()> {
    write_region_stage(run, prepared, &one.table, &one.graphs)?;
    checkpoint::save(&run.path(REN_CHECKPOINT), "ren", &one.ren.model)?;
    write_embeddings_csv(&run.path(EMBEDDINGS), &one.ren.embeddings)?;
    let r = &one.ren.report;
    run.training.insert(
        "ren".into(),
        json!({
            "epochs_run": r.epochs_run,
            "best_epoch": r.best_epoch,
            "validation_accuracy": r.validation_accuracy,
            "delta": r.delta,
            "attention_weights": r.attention_weights,
            "input_dim": one.inputs.cols(),
        }),
    );
    Ok(())
}

fn write_stage_two(run: &mut Run<'_>, prepared: &Prepared<'_>, two: &StageTwo) -> Result<()> {
    checkpoint::save(&run.path(TCAN_CHECKPOINT), "tcan", &two.tcan.model)?;
    write_scores_csv(&run.path(SCORES), &prepared.test(), &two.test_probabilities)?;
    let r = &two.tcan.report;
    run.training.insert(
        "tcan".into(),
        json!({"epochs_run": r.epochs_run, "best_epoch": r.best_epoch}),
    );
    Ok(())
}

/// Full-model test AUC. Reuses `scores.csv` from a previous `train` when it
/// covers exactly the test split, otherwise trains both stages.
fn evaluate(cfg: &RunConfig, prepared: &Prepared<'_>) -> std::result::Result<EvalReport, Failure> {
    let t = Instant::now();
    let test = prepared.test();
    let existing = cfg.out_dir.join(SCORES);
    let (scores, labels, source) = if existing.exists() {
        let rows = read_scores_csv(&existing).at("ingest")?;
        let got: BTreeSet<u64> = rows.iter().map(|r| r.0).collect();
        let want: BTreeSet<u64> = test.iter().map(|u| u.user_id).collect();
        if got != want {
            return Err(Failure {
                stage: "ingest",
                error: Error::Data(format!(
                    "{} does not cover the test split of this config",
                    existing.display()
                )),
            });
        }
        let label_of = |id: u64| test.iter().find(|u| u.user_id == id).map(|u| u.label).unwrap_or(0);
        let scores = rows.iter().map(|r| r.1).collect::<Vec<_>>();
        let labels = rows.iter().map(|r| label_of(r.0)).collect::<Vec<_>>();
        (scores, labels, 1.0)
    } else {
        let pc = cfg.pipeline_config();
        let one = run_stage_one(&prepared.train(), &prepared.grid, &pc).at("ren")?;
        let two = run_stage_two(prepared, &one.ren.embeddings, &pc.tcan).at("tcan")?;
        let labels = test.iter().map(|u| u.label).collect::<Vec<_>>();
        (two.test_probabilities, labels, 0.0)
    };
    let value = auc(&scores, &labels).at("evaluate")?;
    let hash = prepared.split.hash();
    let mut report = EvalReport {
        reference: reference_values(),
        ..EvalReport::default()
    };
    report.split_hashes.insert(cfg.seed, hash.clone());
    report.runs.push(VariantRun {
        variant: Variant::Full.name(),
        seed: cfg.seed,
        auc: Some(value),
        n_test: test.len(),
        wall_time_s: t.elapsed().as_secs_f64(),
        split_hash: hash,
        error: None,
        diagnostics: [("reused_scores".to_string(), source)].into_iter().collect(),
    });
    Ok(report)
}
