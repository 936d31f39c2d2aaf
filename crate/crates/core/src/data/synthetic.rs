use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Document, DocumentSource, NUM_SPECIAL};
use crate::error::{Error, Result};

/// Endless stream of documents made of uniformly random content tokens.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    rng: ChaCha8Rng,
    vocab: usize,
    doc_len: usize,
    next_id: u64,
    remaining: Option<usize>,
}

/// Documents of `seg_len · segs_per_doc` tokens drawn uniformly from the
/// non-reserved ids `NUM_SPECIAL..vocab`, deterministic under `seed`.
pub fn synthetic_copy_stream(vocab: usize, seg_len: usize, segs_per_doc: usize, seed: u64) -> Result<SyntheticStream> {
    if vocab <= NUM_SPECIAL {
        return Err(Error::Config(format!(
            "synthetic vocabulary {vocab} leaves no content tokens after {NUM_SPECIAL} reserved ids"
        )));
    }
    if seg_len == 0 || segs_per_doc == 0 {
        return Err(Error::Config("synthetic documents must be non-empty".into()));
    }
    Ok(SyntheticStream {
        rng: ChaCha8Rng::seed_from_u64(seed),
        vocab,
        doc_len: seg_len * segs_per_doc,
        next_id: 0,
        remaining: None,
    })
}

impl SyntheticStream {
    /// Stops after `n` documents.
    pub fn take_docs(mut self, n: usize) -> Self {
        self.remaining = Some(n);
        self
    }
}

impl Iterator for SyntheticStream {
    type Item = Document;

    fn next(&mut self) -> Option<Document> {
        if let Some(r) = self.remaining.as_mut() {
            if *r == 0 {
                return None;
            }
            *r -= 1;
        }
        let tokens = (0..self.doc_len).map(|_| self.rng.gen_range(NUM_SPECIAL..self.vocab)).collect();
        let doc = Document { id: self.next_id, tokens };
        self.next_id += 1;
        Some(doc)
    }
}

impl DocumentSource for SyntheticStream {
    fn next_document(&mut self) -> Option<Document> {
        self.next()
    }
}
