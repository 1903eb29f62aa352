//! File plumbing: atomic writes, CSV series and artifact detection.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path as FsPath, PathBuf};

use sde_fim::datagen::{Dataset, DATASET_MAGIC};
use sde_fim::model::{Checkpoint, CHECKPOINT_MAGIC};
use sde_fim::{Path, PathBundle};

use crate::error::{CliError, CliResult};

/// Writes to a sibling temporary file and renames it into place, so a
/// failed command never leaves a partial primary output.
pub fn write_atomic(path: &FsPath, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| CliError::Config(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let res = (|| -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_file(path: &FsPath) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Holds an advisory exclusive lock on a checkpoint while it is read or
/// replaced.
pub struct CheckpointLock(#[allow(dead_code)] File);

pub fn lock_checkpoint(path: &FsPath) -> CliResult<CheckpointLock> {
    let lock_path = sibling(path, ".lock");
    let f = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", lock_path.display())))?;
    f.lock().map_err(|e| CliError::Io(format!("{}: {e}", lock_path.display())))?;
    Ok(CheckpointLock(f))
}

pub fn load_checkpoint(path: &FsPath) -> CliResult<Checkpoint> {
    Ok(Checkpoint::from_bytes(&read_file(path)?)?)
}

pub fn load_dataset(path: &FsPath) -> CliResult<Dataset> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(Dataset::read_from(&mut std::io::BufReader::new(f))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Dataset,
    Checkpoint,
    Other,
}

pub fn sniff(path: &FsPath) -> CliResult<FileKind> {
    let mut f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    let n = f.read(&mut magic).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(if n == 8 && &magic == DATASET_MAGIC {
        FileKind::Dataset
    } else if n == 8 && &magic == CHECKPOINT_MAGIC {
        FileKind::Checkpoint
    } else {
        FileKind::Other
    })
}

/// Reads series from CSV. The header is mandatory and must contain `time`
/// and `x1..xd`; an optional `series` (or `id`) column separates paths.
/// Rows of one series must be contiguous with strictly increasing times.
pub fn read_series_csv<R: Read>(reader: R) -> CliResult<PathBundle> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::Data(format!("csv header: {e}")))?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let time = find("time").ok_or_else(|| CliError::Data("csv needs a `time` column".into()))?;
    let series = find("series").or_else(|| find("id"));
    let mut cols = Vec::new();
    while let Some(c) = find(&format!("x{}", cols.len() + 1)) {
        cols.push(c);
    }
    if cols.is_empty() {
        return Err(CliError::Data("csv needs state columns x1..xd".into()));
    }
    let d = cols.len();
    let mut bundle = PathBundle::new(d);
    let mut current: Option<String> = None;
    let mut seen = std::collections::HashSet::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| CliError::Data(format!("csv row {}: {e}", line + 2)))?;
        let id = series.map(|s| row[s].to_string()).unwrap_or_default();
        if current.as_ref() != Some(&id) {
            if !seen.insert(id.clone()) {
                return Err(CliError::Data(format!("series `{id}` is not contiguous")));
            }
            bundle.paths.push(Path { times: Vec::new(), states: Vec::new(), diverged: false });
            current = Some(id);
        }
        let parse = |i: usize| -> CliResult<f64> {
            row[i].parse::<f64>().map_err(|_| CliError::Data(format!("csv row {}: `{}` is not a number", line + 2, &row[i])))
        };
        let p = bundle.paths.last_mut().expect("pushed above");
        p.times.push(parse(time)?);
        for &c in &cols {
            p.states.push(parse(c)?);
        }
    }
    if bundle.paths.is_empty() {
        return Err(CliError::Data("csv has no rows".into()));
    }
    bundle.validate().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(bundle)
}

pub fn series_csv(bundle: &PathBundle) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["series".to_string(), "time".to_string()];
    header.extend((1..=bundle.dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (k, p) in bundle.paths.iter().enumerate() {
        for l in 0..p.len() {
            let mut row = vec![k.to_string(), p.times[l].to_string()];
            row.extend(p.state(l, bundle.dim).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// Query locations from a CSV with columns `x1..xd`.
pub fn read_locations_csv<R: Read>(reader: R) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::Data(format!("csv header: {e}")))?.clone();
    let mut cols = Vec::new();
    while let Some(c) = headers.iter().position(|h| h.eq_ignore_ascii_case(&format!("x{}", cols.len() + 1))) {
        cols.push(c);
    }
    if cols.is_empty() {
        return Err(CliError::Data("locations csv needs columns x1..xd".into()));
    }
    rdr.records()
        .map(|row| {
            let row = row.map_err(|e| CliError::Data(e.to_string()))?;
            cols.iter()
                .map(|&c| row[c].parse::<f64>().map_err(|_| CliError::Data(format!("`{}` is not a number", &row[c]))))
                .collect()
        })
        .collect()
}

/// Context series from a dataset record (its corrupted observations) or a
/// CSV file.
pub fn load_context(path: &FsPath, record: usize) -> CliResult<PathBundle> {
    match sniff(path)? {
        FileKind::Dataset => {
            let ds = load_dataset(path)?;
            let n = ds.records.len();
            ds.records
                .into_iter()
                .nth(record)
                .map(|r| r.corrupted)
                .ok_or_else(|| CliError::Data(format!("record {record} out of range ({n} records)")))
        }
        FileKind::Checkpoint => Err(CliError::Data(format!("{} is a checkpoint, not a context", path.display()))),
        FileKind::Other => {
            let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            read_series_csv(f)
        }
    }
}

/// `<path><suffix>` as a sibling file.
pub fn sibling(path: &FsPath, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_validation() {
        let text = "series,time,x1,x2\n0,0.0,1,2\n0,0.1,1.5,2\n1,0.0,0,0\n1,0.5,1,1\n";
        let b = read_series_csv(text.as_bytes()).unwrap();
        assert_eq!((b.dim, b.paths.len(), b.paths[1].len()), (2, 2, 2));
        let again = read_series_csv(&series_csv(&b).unwrap()[..]).unwrap();
        assert_eq!(again, b);

        assert!(read_series_csv("time,x1\n0,1\n0,2\n".as_bytes()).is_err());
        assert!(read_series_csv("t,x1\n0,1\n".as_bytes()).is_err());
        assert!(read_series_csv("series,time,x1\na,0,1\nb,0,1\na,1,1\n".as_bytes()).is_err());
        let single = read_series_csv("time,x1\n0,1\n1,2\n2,3\n".as_bytes()).unwrap();
        assert_eq!(single.paths.len(), 1);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x.bin"), b"z").is_err());
    }
}
