use chrono::{Datelike, NaiveDateTime};

use super::notes::ClinicalNote;
use super::vocab::Vocab;
use super::{CLS, NOTE_SEP};
use crate::error::{Error, Result};

/// A concatenated note sequence with provenance for every token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Concatenation {
    pub ids: Vec<usize>,
    /// Source note of each position; `None` only for the leading CLS.
    pub note_index: Vec<Option<usize>>,
}

/// Zero-padded year, month and day tokens.
pub fn header_tokens(ts: &NaiveDateTime) -> [String; 3] {
    [
        format!("{:04}", ts.year()),
        format!("{:02}", ts.month()),
        format!("{:02}", ts.day()),
    ]
}

/// `NOTE_SEP`, the timestamp header, then the note's own tokens.
pub fn note_block(note: &ClinicalNote, vocab: &Vocab) -> Vec<usize> {
    let mut out = vec![NOTE_SEP];
    out.extend(header_tokens(&note.timestamp).iter().map(|t| vocab.id(t)));
    out.extend(vocab.encode(&note.text));
    out
}

/// Concatenates time-ordered notes behind a CLS token, keeping the most
/// recent `max_tokens - 1` content tokens.
///
/// Whole notes are dropped oldest first; the oldest surviving note may lose
/// its head (separator and header included).
pub fn concatenate_notes(notes: &[ClinicalNote], vocab: &Vocab, max_tokens: usize) -> Result<Concatenation> {
    if max_tokens < 2 {
        return Err(Error::Length(format!(
            "budget of {max_tokens} tokens cannot hold CLS plus content"
        )));
    }
    if notes.is_empty() {
        return Err(Error::Contract("no notes to concatenate".into()));
    }
    let blocks: Vec<Vec<usize>> = notes.iter().map(|n| note_block(n, vocab)).collect();
    Ok(concatenate_blocks(&blocks, max_tokens))
}

pub(crate) fn concatenate_blocks(blocks: &[Vec<usize>], max_tokens: usize) -> Concatenation {
    let mut remaining = max_tokens - 1;
    let mut start = blocks.len();
    let mut cut = 0;
    while start > 0 && remaining > 0 {
        let b = &blocks[start - 1];
        start -= 1;
        if b.len() <= remaining {
            remaining -= b.len();
        } else {
            cut = b.len() - remaining;
            remaining = 0;
        }
    }
    let mut ids = vec![CLS];
    let mut note_index = vec![None];
    for (i, b) in blocks.iter().enumerate().skip(start) {
        let from = if i == start { cut } else { 0 };
        ids.extend_from_slice(&b[from..]);
        note_index.extend(std::iter::repeat(Some(i)).take(b.len() - from));
    }
    Concatenation { ids, note_index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::notes::tests::note;

    fn vocab() -> Vocab {
        Vocab::build(["a b c d e f g h i j k l m n o p q r s t 2017 01 02 03"], 1)
    }

    #[test]
    fn single_note_untruncated() {
        let v = vocab();
        let c = concatenate_notes(&[note("p", "2017-01-02", "x", "a b c")], &v, 100).unwrap();
        let expect: Vec<usize> = [CLS, NOTE_SEP]
            .into_iter()
            .chain(["2017", "01", "02", "a", "b", "c"].iter().map(|t| v.id(t)))
            .collect();
        assert_eq!(c.ids, expect);
        assert_eq!(c.note_index[0], None);
        assert!(c.note_index[1..].iter().all(|&n| n == Some(0)));
    }

    #[test]
    fn budget_for_one_note_keeps_newer() {
        let v = vocab();
        let ten = "a b c d e f g h i j";
        let newer = "k l m n o p q r s t";
        let notes = [note("p", "2017-01-02", "x", ten), note("p", "2017-01-03", "x", newer)];
        // 1 CLS + 14-token block.
        let c = concatenate_notes(&notes, &v, 15).unwrap();
        assert_eq!(c.ids.len(), 15);
        assert!(c.note_index[1..].iter().all(|&n| n == Some(1)));
        assert_eq!(&c.ids[5..], &v.encode(newer)[..]);
    }

    #[test]
    fn head_truncates_oldest_survivor() {
        let v = vocab();
        let notes = [note("p", "2017-01-02", "x", "a b c"), note("p", "2017-01-03", "x", "d e")];
        // Blocks are 7 and 6 tokens; 9 content tokens keep the last 3 of the first.
        let c = concatenate_notes(&notes, &v, 10).unwrap();
        assert_eq!(c.ids[1..4], v.encode("a b c")[..]);
        assert_eq!(c.note_index.iter().filter(|&&n| n == Some(0)).count(), 3);
        assert_eq!(c.ids.len(), 10);
    }

    #[test]
    fn tiny_budget() {
        let v = vocab();
        let notes = [note("p", "2017-01-02", "x", "a b c")];
        assert!(matches!(concatenate_notes(&notes, &v, 1), Err(Error::Length(_))));
        let c = concatenate_notes(&notes, &v, 2).unwrap();
        assert_eq!(c.ids, vec![CLS, v.id("c")]);
    }
}
