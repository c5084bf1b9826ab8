//! File formats the commands read and write.

use std::fs;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

use hipad_core::config::RunConfig;
use hipad_core::error::{Error, Result};
use hipad_core::scene::Scenario;
use hipad_core::trajectory::{read_gt_csv, Point2, Trajectory};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "file,id,family,seed,config_hash";
pub const TRAJECTORY_CSV_HEADER: &str = "t,x,y";

/// Reads a run config, or the defaults when no file is given, then applies
/// `key=value` overrides addressed by dotted paths such as `training.lr=1e-3`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => RunConfig::default().to_toml(),
    };
    apply_overrides(&text, overrides)
}

pub fn apply_overrides(toml_text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = toml_text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
    }
    RunConfig::from_toml_str(&toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?)
}

/// A TOML literal when the text parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn scenario_file_name(i: usize) -> String {
    format!("scenario_{i:04}.json")
}

/// Scenarios from a directory with a manifest, or from a single JSON file.
pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    if path.is_file() {
        return Ok(vec![load_scenario(path)?]);
    }
    let manifest = path.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let file = line.split(',').next().unwrap_or_default();
        out.push(load_scenario(&path.join(file))?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no scenarios", manifest.display())));
    }
    Ok(out)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Appends a `config_hash` column to every line of a CSV document.
pub fn with_hash_column(csv: &str, hash: &str) -> String {
    let mut out = String::with_capacity(csv.len() + csv.lines().count() * (hash.len() + 1));
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        out.push(',');
        out.push_str(if i == 0 { "config_hash" } else { hash });
        out.push('\n');
    }
    out
}

/// Reads either a `t,x,y` trajectory CSV or a waypoint CSV as written by
/// `resample`. Waypoints are in the ego frame, so the origin at t = 0 is
/// prepended. Padded temporal rows are dropped; padded spatial rows hold the
/// path's endpoint and are kept.
pub fn read_trajectory<R: BufRead>(mut r: R) -> Result<Trajectory> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let header = first.trim();
    if header == TRAJECTORY_CSV_HEADER {
        read_txy(r)
    } else if header == hipad_core::trajectory::GT_CSV_HEADER {
        let rows = read_gt_csv(std::io::Cursor::new(first.clone()).chain(r))?;
        waypoints_to_trajectory(&rows)
    } else {
        Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{TRAJECTORY_CSV_HEADER}` or a waypoint CSV header"),
        })
    }
}

fn read_txy<R: BufRead>(r: R) -> Result<Trajectory> {
    let mut points = Vec::new();
    let mut stamps = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 fields, found {}", f.len()),
            });
        }
        let mut v = [0.0; 3];
        for (slot, s) in v.iter_mut().zip(&f) {
            *slot = s.trim().parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad number `{s}`: {e}"),
            })?;
        }
        if let Some(&last) = stamps.last() {
            if !(v[0] > last) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("timestamp {} does not increase", v[0]),
                });
            }
        }
        stamps.push(v[0]);
        points.push([v[1], v[2]]);
    }
    if points.len() < 2 {
        return Err(Error::Data(format!("trajectory needs >= 2 rows, got {}", points.len())));
    }
    Trajectory::new(points, stamps)
}

fn waypoints_to_trajectory(rows: &[hipad_core::trajectory::GtRow]) -> Result<Trajectory> {
    let Some(first) = rows.first() else {
        return Err(Error::Data("waypoint file has no rows".into()));
    };
    if rows.iter().any(|r| r.granularity_id != first.granularity_id) {
        return Err(Error::Data("waypoint file holds more than one granularity".into()));
    }
    let freq = first
        .granularity_id
        .strip_prefix("temporal_")
        .and_then(|s| s.strip_suffix("hz"))
        .and_then(|s| s.replace('p', ".").parse::<f64>().ok());
    let mut points: Vec<Point2> = vec![[0.0, 0.0]];
    let mut stamps = vec![0.0];
    for r in rows.iter().filter(|r| !r.padded || freq.is_none()) {
        points.push([r.x, r.y]);
        // Spatial sets carry no time, so points are spaced one second apart.
        stamps.push(freq.map_or((r.index + 1) as f64, |f| (r.index + 1) as f64 / f));
    }
    if points.len() < 2 {
        return Err(Error::Data("waypoint file has no unpadded rows".into()));
    }
    Trajectory::new(points, stamps)
}
