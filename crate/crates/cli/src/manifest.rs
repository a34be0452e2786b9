use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{CliError, CliResult};

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct RunManifest {
    pub experiment: String,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub files: Vec<FileEntry>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files written by an experiment; removed again if the run fails.
pub struct Outputs {
    pub dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.dir.join(name);
        fs::write(&p, bytes)?;
        self.written.push(p);
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Fault(e.to_string()))?;
        self.write(name, &bytes)
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn discard(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
    }

    pub fn entries(&self) -> CliResult<Vec<FileEntry>> {
        self.written
            .iter()
            .map(|p| {
                let bytes = fs::read(p)?;
                Ok(FileEntry {
                    path: p.file_name().unwrap().to_string_lossy().into_owned(),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect()
    }
}

pub fn write_manifest(m: &RunManifest) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    fs::write(m.out_dir.join(MANIFEST_NAME), s)?;
    Ok(())
}

/// Re-hashes every listed file and checks cheap invariants; returns the number of files.
pub fn verify(path: &Path) -> CliResult<usize> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", manifest_path.display())))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad manifest: {e}")))?;
    let mut problems = Vec::new();
    for f in &m.files {
        match fs::read(dir.join(&f.path)) {
            Err(_) => problems.push(format!("{}: missing", f.path)),
            Ok(bytes) => {
                if sha256_hex(&bytes) != f.sha256 {
                    problems.push(format!("{}: hash mismatch", f.path));
                } else if f.path.ends_with(".csv") {
                    if let Err(msg) = check_csv(&bytes) {
                        problems.push(format!("{}: {msg}", f.path));
                    }
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(m.files.len())
    } else {
        Err(CliError::Fault(format!("verification failed:\n  {}", problems.join("\n  "))))
    }
}

/// `weight` columns form a probability vector, `density`/`var` columns are nonnegative and
/// generator files (`i,j,rate`) have zero row sums.
fn check_csv(bytes: &[u8]) -> Result<(), String> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let num = |rec: &csv::StringRecord, k: usize| rec[k].parse::<f64>().map_err(|e| e.to_string());
    if let Some(k) = col("weight") {
        let mut s = 0.0;
        for rec in &rows {
            let w = num(rec, k)?;
            if w < 0.0 {
                return Err("negative weight".into());
            }
            s += w;
        }
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("weights sum to {s}"));
        }
    }
    for name in ["density", "var"] {
        if let Some(k) = col(name) {
            for rec in &rows {
                if num(rec, k)? < 0.0 {
                    return Err(format!("negative {name}"));
                }
            }
        }
    }
    if let (Some(i), Some(_), Some(k)) = (col("i"), col("j"), col("rate")) {
        let mut sums = std::collections::BTreeMap::<String, f64>::new();
        let t = col("t");
        for rec in &rows {
            let key = format!("{}/{}", t.map_or("", |t| &rec[t]), &rec[i]);
            *sums.entry(key).or_default() += num(rec, k)?;
        }
        if let Some((key, s)) = sums.iter().find(|(_, s)| s.abs() > 1e-9) {
            return Err(format!("generator row {key} sums to {s}"));
        }
    }
    Ok(())
}
