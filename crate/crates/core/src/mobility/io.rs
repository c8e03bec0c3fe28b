//! CSV dataset files and the grid manifest.
//!
//! * `trajectories.csv`: `user_id,day,slot,region_row,region_col`
//! * `labels.csv`: `user_id,label`
//! * `grid.txt`: `rows=<n> cols=<n> cell_km=<real>`

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{RegionGrid, Trajectory, UserId, UserRecord, Visit, SLOTS_PER_DAY};
use crate::error::{Error, Result};

pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const LABEL_FILE: &str = "labels.csv";
pub const GRID_FILE: &str = "grid.txt";
pub const SYNTH_META_FILE: &str = "synth_meta.json";

const TRAJECTORY_HEADER: &str = "user_id,day,slot,region_row,region_col";
const LABEL_HEADER: &str = "user_id,label";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Yields `(line_number, fields)` for every data row after checking the header.
fn csv_rows<'a>(
    path: &'a Path,
    text: &'a str,
    header: &str,
) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)> + 'a> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == header => {}
        Some(h) => return Err(parse_err(path, 1, format!("expected header `{header}`, got `{h}`"))),
        None => return Err(parse_err(path, 1, "empty file")),
    }
    Ok(lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 2, l.trim_end_matches('\r').split(',').collect())))
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, fields: &[&str], k: usize, name: &str) -> Result<T> {
    fields[k]
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {name} `{}`", fields[k])))
}

pub fn read_grid(path: &Path) -> Result<RegionGrid> {
    let text = read(path)?;
    let line = text.lines().next().unwrap_or("");
    let mut rows = None;
    let mut cols = None;
    let mut cell_km = None;
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, format!("expected key=value, got `{tok}`")))?;
        let bad = || parse_err(path, 1, format!("bad value for {k}: `{v}`"));
        match k {
            "rows" => rows = Some(v.parse::<usize>().map_err(|_| bad())?),
            "cols" => cols = Some(v.parse::<usize>().map_err(|_| bad())?),
            "cell_km" => cell_km = Some(v.parse::<f64>().map_err(|_| bad())?),
            _ => return Err(parse_err(path, 1, format!("unknown grid key `{k}`"))),
        }
    }
    match (rows, cols, cell_km) {
        (Some(r), Some(c), Some(km)) => {
            RegionGrid::new(r, c, km).map_err(|e| parse_err(path, 1, e.to_string()))
        }
        _ => Err(parse_err(path, 1, "grid manifest needs rows, cols and cell_km")),
    }
}

pub fn grid_manifest(grid: &RegionGrid) -> String {
    format!(
        "rows={} cols={} cell_km={}\n",
        grid.rows(),
        grid.cols(),
        grid.cell_km()
    )
}

/// Reads trajectory and label files into one record per labeled user, sorted
/// by user id, with trajectories sorted by day and visits by slot.
pub fn load_dataset(trajectory_file: &Path, label_file: &Path, grid: &RegionGrid) -> Result<Vec<UserRecord>> {
    let label_text = read(label_file)?;
    let mut labels: BTreeMap<UserId, u8> = BTreeMap::new();
    for (line, f) in csv_rows(label_file, &label_text, LABEL_HEADER)? {
        if f.len() != 2 {
            return Err(parse_err(label_file, line, format!("expected 2 fields, got {}", f.len())));
        }
        let user: UserId = field(label_file, line, &f, 0, "user_id")?;
        let label: u8 = field(label_file, line, &f, 1, "label")?;
        if label > 1 {
            return Err(parse_err(label_file, line, format!("label {label} not in {{0,1}}")));
        }
        if labels.insert(user, label).is_some() {
            return Err(parse_err(label_file, line, format!("duplicate label for user {user}")));
        }
    }

    let traj_text = read(trajectory_file)?;
    let mut days: BTreeMap<(UserId, u32), BTreeMap<u8, usize>> = BTreeMap::new();
    for (line, f) in csv_rows(trajectory_file, &traj_text, TRAJECTORY_HEADER)? {
        if f.len() != 5 {
            return Err(parse_err(trajectory_file, line, format!("expected 5 fields, got {}", f.len())));
        }
        let user: UserId = field(trajectory_file, line, &f, 0, "user_id")?;
        let day: u32 = field(trajectory_file, line, &f, 1, "day")?;
        let slot: u8 = field(trajectory_file, line, &f, 2, "slot")?;
        let row: i64 = field(trajectory_file, line, &f, 3, "region_row")?;
        let col: i64 = field(trajectory_file, line, &f, 4, "region_col")?;
        if slot >= SLOTS_PER_DAY {
            return Err(parse_err(trajectory_file, line, format!("slot {slot} not in [0,24)")));
        }
        let region = (row >= 0 && col >= 0)
            .then(|| grid.region(row as usize, col as usize))
            .flatten()
            .ok_or(Error::OutOfBounds {
                path: trajectory_file.to_path_buf(),
                line,
                row,
                col,
                rows: grid.rows(),
                cols: grid.cols(),
            })?;
        if !labels.contains_key(&user) {
            return Err(parse_err(trajectory_file, line, format!("user {user} has no label")));
        }
        match days.entry((user, day)).or_default().entry(slot) {
            Entry::Occupied(_) => {
                return Err(Error::Duplicate {
                    path: trajectory_file.to_path_buf(),
                    line,
                    user,
                    day,
                    slot,
                })
            }
            Entry::Vacant(e) => {
                e.insert(region);
            }
        }
    }

    let mut trajectories: BTreeMap<UserId, Vec<Trajectory>> = BTreeMap::new();
    for ((user, day), slots) in days {
        let visits = slots
            .into_iter()
            .map(|(slot, region)| Visit { slot, region })
            .collect();
        trajectories
            .entry(user)
            .or_default()
            .push(Trajectory::new(user, day, visits, grid)?);
    }
    labels
        .into_iter()
        .map(|(user, label)| {
            let ts = trajectories.remove(&user).unwrap_or_default();
            UserRecord::new(user, label, ts)
        })
        .collect()
}

/// Writes the three dataset files into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, users: &[UserRecord], grid: &RegionGrid) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: BTreeSet<UserId> = users.iter().map(|u| u.user_id).collect();
    if ids.len() != users.len() {
        return Err(Error::Data("duplicate user ids".into()));
    }

    let mut traj = String::from(TRAJECTORY_HEADER);
    traj.push('\n');
    let mut labels = String::from(LABEL_HEADER);
    labels.push('\n');
    for u in users {
        writeln!(labels, "{},{}", u.user_id, u.label).unwrap();
        for t in &u.trajectories {
            for v in &t.visits {
                let (row, col) = grid.coords(v.region);
                writeln!(traj, "{},{},{},{},{}", u.user_id, t.day, v.slot, row, col).unwrap();
            }
        }
    }
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write(TRAJECTORY_FILE, &traj)?;
    write(LABEL_FILE, &labels)?;
    write(GRID_FILE, &grid_manifest(grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(traj: &str, labels: &str) -> (tempfile::TempDir, RegionGrid) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(TRAJECTORY_FILE), traj).unwrap();
        fs::write(dir.path().join(LABEL_FILE), labels).unwrap();
        (dir, RegionGrid::new(2, 3, 1.0).unwrap())
    }

    fn load(dir: &tempfile::TempDir, grid: &RegionGrid) -> Result<Vec<UserRecord>> {
        load_dataset(&dir.path().join(TRAJECTORY_FILE), &dir.path().join(LABEL_FILE), grid)
    }

    #[test]
    fn two_rows_one_user() {
        let (dir, grid) = setup(
            "user_id,day,slot,region_row,region_col\n7,0,8,0,1\n7,0,9,1,2\n",
            "user_id,label\n7,1\n",
        );
        let users = load(&dir, &grid).unwrap();
        assert_eq!(users.len(), 1);
        assert_eq!(users[0].label, 1);
        assert_eq!(users[0].trajectories.len(), 1);
        assert_eq!(users[0].trajectories[0].visits.len(), 2);
        assert_eq!(users[0].trajectories[0].visits[1].region, 5);
    }

    #[test]
    fn region_out_of_grid() {
        let (dir, grid) = setup(
            "user_id,day,slot,region_row,region_col\n7,0,8,2,0\n",
            "user_id,label\n7,1\n",
        );
        let err = load(&dir, &grid).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { line: 2, .. }), "{err}");
    }

    #[test]
    fn unsorted_slots_are_sorted() {
        let (dir, grid) = setup(
            "user_id,day,slot,region_row,region_col\n1,0,14,0,0\n1,0,3,0,1\n1,0,9,0,2\n",
            "user_id,label\n1,0\n",
        );
        let users = load(&dir, &grid).unwrap();
        let slots: Vec<u8> = users[0].trajectories[0].visits.iter().map(|v| v.slot).collect();
        assert_eq!(slots, vec![3, 9, 14]);
    }

    #[test]
    fn malformed_row_reports_line() {
        let (dir, grid) = setup(
            "user_id,day,slot,region_row,region_col\n1,0,3,0,0\n1,x,4,0,0\n",
            "user_id,label\n1,0\n",
        );
        let err = load(&dir, &grid).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_slot_rejected() {
        let (dir, grid) = setup(
            "user_id,day,slot,region_row,region_col\n1,0,3,0,0\n1,0,3,0,1\n",
            "user_id,label\n1,0\n",
        );
        assert!(matches!(load(&dir, &grid).unwrap_err(), Error::Duplicate { .. }));
    }

    #[test]
    fn unlabeled_user_rejected() {
        let (dir, grid) = setup(
            "user_id,day,slot,region_row,region_col\n1,0,3,0,0\n2,0,3,0,0\n",
            "user_id,label\n1,0\n",
        );
        assert!(load(&dir, &grid).is_err());
    }

    #[test]
    fn grid_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = RegionGrid::new(12, 7, 0.5).unwrap();
        let p = dir.path().join(GRID_FILE);
        fs::write(&p, grid_manifest(&grid)).unwrap();
        assert_eq!(read_grid(&p).unwrap(), grid);
        fs::write(&p, "rows=2 cols=2").unwrap();
        assert!(read_grid(&p).is_err());
    }
}
