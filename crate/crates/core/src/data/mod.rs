//! Tokenization, note concatenation, longitudinal examples and synthetic corpora.

mod concat;
mod examples;
pub mod jsonl;
mod notes;
pub mod synthetic;
mod taxonomy;
mod vocab;

pub use concat::{concatenate_notes, header_tokens, note_block, Concatenation};
pub use examples::{
    build_autoregressive_examples, build_examples, build_vocab, encode_example, read_examples, write_examples,
    BuildOptions, EncodedExample, LabeledExample, PatientSplit, RecordTarget, Task,
};
pub use notes::{group_histories, parse_timestamp, read_notes, write_notes, ClinicalNote, PatientHistory};
pub use taxonomy::{normalize_code, CancerSite, LabelTaxonomy};
pub use vocab::{split_words, Vocab};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const NOTE_SEP: usize = 3;
