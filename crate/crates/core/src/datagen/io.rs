//! CSV persistence of tasks and a JSON manifest for task sets.
//!
//! One CSV per task with header `x0,…,x{d-1},treat,y[,y1,y0][,m0,…]`.
//! Floats are written in shortest round-trip form, so reading back is
//! value-exact.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::datagen::task::{Task, TaskSet};
use crate::error::{Error, Result};

pub fn write_task_csv(task: &Task, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = task.d();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("treat".into());
    header.push("y".into());
    if task.potential.is_some() {
        header.push("y1".into());
        header.push("y0".into());
    }
    if task.mask.is_some() {
        header.extend((0..d).map(|j| format!("m{j}")));
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..task.n() {
        row.clear();
        row.extend(task.x.row(i).iter().map(|v| v.to_string()));
        row.push(task.treat[i].to_string());
        row.push(task.y[i].to_string());
        if let Some(po) = &task.potential {
            row.push(po.y1[i].to_string());
            row.push(po.y0[i].to_string());
        }
        if let Some(mask) = &task.mask {
            row.extend(mask.iter().map(|m| m.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, line: usize, column: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Schema(format!("line {line}: cannot parse column {column} value '{field}'")))
}

pub fn read_task_csv(path: &Path, id: usize) -> Result<Task> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    let pos = |name: &str| header.iter().position(|h| h == name);
    let (treat_col, y_col) = match (pos("treat"), pos("y")) {
        (Some(t), Some(y)) if t == d && y == d + 1 => (t, y),
        _ => return Err(Error::Schema(format!("{}: expected x0..x{{d-1}},treat,y header", path.display()))),
    };
    for (j, h) in header.iter().take(d).enumerate() {
        if *h != format!("x{j}") {
            return Err(Error::Schema(format!("unexpected covariate column '{h}'")));
        }
    }
    let has_po = pos("y1") == Some(d + 2) && pos("y0") == Some(d + 3);
    let mask_start = if has_po { d + 4 } else { d + 2 };
    let has_mask = header.len() > mask_start;
    if has_mask && header.len() != mask_start + d {
        return Err(Error::Schema("mask columns must cover every covariate".into()));
    }
    if !has_mask && header.len() != mask_start {
        return Err(Error::Schema(format!("unexpected columns in {}", path.display())));
    }

    let (mut xs, mut treat, mut y, mut y1, mut y0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut mask: Option<Vec<u8>> = None;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        if rec.len() != header.len() {
            return Err(Error::Schema(format!("line {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        for j in 0..d {
            xs.push(parse::<f64>(&rec[j], line, &header[j])?);
        }
        treat.push(parse::<u8>(&rec[treat_col], line, "treat")?);
        y.push(parse::<f64>(&rec[y_col], line, "y")?);
        if has_po {
            y1.push(parse::<f64>(&rec[d + 2], line, "y1")?);
            y0.push(parse::<f64>(&rec[d + 3], line, "y0")?);
        }
        if has_mask {
            let row = (0..d)
                .map(|j| parse::<u8>(&rec[mask_start + j], line, &header[mask_start + j]))
                .collect::<Result<Vec<_>>>()?;
            match &mask {
                None => mask = Some(row),
                Some(m) if *m != row => {
                    return Err(Error::Schema(format!("line {line}: mask differs from earlier rows")));
                }
                _ => {}
            }
        }
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, d), xs).map_err(|e| Error::Shape(e.to_string()))?;
    let mut task = Task::new(id, x, treat, Array1::from(y))?;
    if has_po {
        task = task.with_potential(y1.into(), y0.into())?;
    }
    if let Some(m) = mask {
        task = task.with_mask(m)?;
    }
    Ok(task)
}

/// Index of the files making up a task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSetManifest {
    pub tasks: Vec<String>,
    pub target: String,
    pub d_max: usize,
    pub generator: String,
    pub seed: u64,
}

pub const TASKSET_MANIFEST: &str = "taskset.json";

/// Writes `task_<id>.csv` files and `taskset.json` into `dir`.
pub fn write_taskset(set: &TaskSet, dir: &Path, generator: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(set.tasks.len());
    for (k, task) in set.tasks.iter().enumerate() {
        let name = format!("task_{:03}.csv", k + 1);
        write_task_csv(task, &dir.join(&name))?;
        names.push(name);
    }
    let target = "target.csv".to_string();
    write_task_csv(&set.target, &dir.join(&target))?;
    let manifest = TaskSetManifest { tasks: names, target, d_max: set.d_max, generator: generator.into(), seed };
    let path = dir.join(TASKSET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_taskset(manifest_path: &Path) -> Result<(TaskSet, TaskSetManifest)> {
    let manifest: TaskSetManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let tasks = manifest
        .tasks
        .iter()
        .enumerate()
        .map(|(k, name)| read_task_csv(&dir.join(name), k + 1))
        .collect::<Result<Vec<_>>>()?;
    let target = read_task_csv(&dir.join(&manifest.target), 0)?;
    let set = TaskSet::new(tasks, target)?;
    if set.d_max != manifest.d_max {
        return Err(Error::Schema(format!("manifest d_max {} but tasks have {}", manifest.d_max, set.d_max)));
    }
    Ok((set, manifest))
}
