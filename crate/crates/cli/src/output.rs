//! Staged output files, committed together or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).context("serializing report")?;
        bytes.push(b'\n');
        self.add(path, bytes);
        Ok(())
    }

    /// Renders CSV content through `write` into memory.
    pub fn add_csv<F>(&mut self, path: PathBuf, write: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> sia_core::Result<()>,
    {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(path, buf);
        Ok(())
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.files.iter().map(|(p, _)| p.clone()).collect()
    }

    /// Writes every file as `<name>.partial`, then renames them into place.
    /// On failure all staged and already renamed files are removed.
    pub fn commit(self) -> anyhow::Result<Vec<PathBuf>> {
        let mut staged = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            let tmp = partial_path(path);
            if let Err(e) = fs::write(&tmp, bytes) {
                let _ = fs::remove_file(&tmp);
                cleanup(&staged, &[]);
                return Err(e).with_context(|| format!("writing {}", path.display()));
            }
            staged.push(tmp);
        }
        let mut placed = Vec::with_capacity(self.files.len());
        for ((path, _), tmp) in self.files.iter().zip(&staged) {
            if let Err(e) = fs::rename(tmp, path) {
                cleanup(&staged, &placed);
                return Err(e).with_context(|| format!("moving {} into place", path.display()));
            }
            placed.push(path.clone());
        }
        Ok(placed)
    }
}

fn cleanup(staged: &[PathBuf], placed: &[PathBuf]) {
    for p in staged.iter().chain(placed) {
        let _ = fs::remove_file(p);
    }
}

/// Creates `dir` (and parents) for output.
pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}
