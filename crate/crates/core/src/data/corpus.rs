use std::fs;
use std::path::{Path, PathBuf};

use super::{Document, DocumentSource};
use crate::error::{Error, Result};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads documents from a newline-delimited text file (one document per
/// non-empty line) or from a directory of `.txt` files (one document per
/// file, in file-name order). Documents shorter than `min_len` bytes are
/// dropped. Ids continue from `first_id`.
pub fn read_documents(path: &Path, min_len: usize, first_id: u64) -> Result<Vec<Document>> {
    let mut texts = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for f in files {
            texts.push(fs::read_to_string(&f).map_err(|e| io_err(&f, e))?);
        }
    } else {
        let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        texts.extend(body.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned));
    }
    Ok(texts
        .into_iter()
        .filter(|t| !t.is_empty() && t.len() >= min_len)
        .enumerate()
        .map(|(i, t)| Document::from_text(first_id + i as u64, &t))
        .collect())
}

/// Corpus paths listed one per line; relative paths resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn load_manifest(manifest: &Path) -> Result<Vec<PathBuf>> {
    let body = fs::read_to_string(manifest).map_err(|e| io_err(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Loads every path in order, assigning globally unique document ids.
pub fn load_corpus(paths: &[PathBuf], min_len: usize) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for p in paths {
        let next = docs.len() as u64;
        docs.extend(read_documents(p, min_len, next)?);
    }
    Ok(docs)
}

/// Repeats a finite corpus indefinitely. Each pass gets fresh ids so no id
/// is ever handed to two lanes.
#[derive(Debug, Clone)]
pub struct CyclingSource {
    docs: Vec<Document>,
    pos: usize,
    epoch: u64,
}

impl CyclingSource {
    pub fn new(docs: Vec<Document>) -> Self {
        Self { docs, pos: 0, epoch: 0 }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl DocumentSource for CyclingSource {
    fn next_document(&mut self) -> Option<Document> {
        if self.docs.is_empty() {
            return None;
        }
        if self.pos == self.docs.len() {
            self.pos = 0;
            self.epoch += 1;
        }
        let mut doc = self.docs[self.pos].clone();
        doc.id += self.epoch * self.docs.len() as u64;
        self.pos += 1;
        Some(doc)
    }
}
