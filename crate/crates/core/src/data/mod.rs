//! Documents, segmentation, task construction and the temporal batch dispatcher.

mod corpus;
mod dispatcher;
mod segment;
mod synthetic;

pub use corpus::{load_corpus, load_manifest, read_documents, CyclingSource};
pub use dispatcher::{Dispatcher, DocumentSource, LaneTag, ResetFlags, StepBatch, TokenBatch};
pub use segment::{apply_denoising_mask, segment_document, text_recall_pairs, SegmentPlan, Task};
pub use synthetic::{synthetic_copy_stream, SyntheticStream};

/// Padding id; padded positions are always masked.
pub const PAD: usize = 0;
/// Replacement symbol for denoising masks.
pub const MASK: usize = 1;
/// Decoder start symbol.
pub const BOS: usize = 2;
/// End-of-sequence symbol.
pub const EOS: usize = 3;
/// Number of reserved ids below the first content token.
pub const NUM_SPECIAL: usize = 4;

/// Token id of a raw byte in byte-level vocabularies.
pub fn byte_token(b: u8) -> usize {
    b as usize + NUM_SPECIAL
}

/// Vocabulary size needed to represent every byte.
pub const BYTE_VOCAB: usize = 256 + NUM_SPECIAL;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: u64,
    pub tokens: Vec<usize>,
}

impl Document {
    pub fn from_text(id: u64, text: &str) -> Self {
        Self {
            id,
            tokens: text.bytes().map(byte_token).collect(),
        }
    }
}

/// One timestep of a document as seen by the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// Encoder input, possibly masked.
    pub source: Vec<usize>,
    /// Decoder target; empty when `scored` is false.
    pub target: Vec<usize>,
    /// Position of the segment in its document.
    pub index: usize,
    pub is_first: bool,
    /// Whether the segment contributes to the loss.
    pub scored: bool,
}
