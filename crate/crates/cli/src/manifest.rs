//! Run manifests: per-stage parameters plus SHA-256 digests of every input
//! and output file, so identical runs are verifiable byte-for-byte.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};
use zeroseg_core::{Error, Result};

pub fn hash_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Default)]
pub struct StageRecord {
    pub name: String,
    pub params: Vec<(String, String)>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

impl StageRecord {
    pub fn new(name: impl Into<String>) -> Self {
        StageRecord {
            name: name.into(),
            ..StageRecord::default()
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = hash_file(path)?;
        self.inputs.push((path.display().to_string(), digest));
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = hash_file(path)?;
        self.outputs.push((path.display().to_string(), digest));
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub run: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn new(run: impl Into<String>) -> Self {
        Manifest {
            run: run.into(),
            stages: Vec::new(),
        }
    }

    pub fn push(&mut self, record: StageRecord) {
        self.stages.push(record);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run = {}", self.run);
        for stage in &self.stages {
            let _ = writeln!(s, "\n[stage {}]", stage.name);
            for (k, v) in &stage.params {
                let _ = writeln!(s, "param {k} = {v}");
            }
            for (p, h) in &stage.inputs {
                let _ = writeln!(s, "input {p} = sha256:{h}");
            }
            for (p, h) in &stage.outputs {
                let _ = writeln!(s, "output {p} = sha256:{h}");
            }
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_stages_and_digests() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "payload").unwrap();
        let mut manifest = Manifest::new("demo");
        let mut rec = StageRecord::new("first");
        rec.param("seed", 7u64);
        rec.input(&input).unwrap();
        manifest.push(rec);
        let text = manifest.render();
        assert!(text.starts_with("run = demo"));
        assert!(text.contains("[stage first]"));
        assert!(text.contains("param seed = 7"));
        assert!(text.contains("input"));
        assert!(text.contains("sha256:"));
    }

    #[test]
    fn identical_files_hash_identically() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::write(&a, b"same bytes").unwrap();
        std::fs::write(&b, b"same bytes").unwrap();
        assert_eq!(hash_file(&a).unwrap(), hash_file(&b).unwrap());
    }
}
