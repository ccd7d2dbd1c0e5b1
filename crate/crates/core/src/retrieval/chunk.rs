use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A window of a document. `char_span` is a half-open range of character
/// (Unicode scalar) offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub char_span: (usize, usize),
}

/// Splits `text` into windows of at most `max_chars` characters, each
/// starting `overlap` characters before the previous one ended.
///
/// A window that does not reach the end of the document is cut at the
/// latest paragraph break inside its final 20%, else the latest sentence
/// end there, else exactly at `max_chars`.
pub fn chunk_document(doc_id: &str, text: &str, max_chars: usize, overlap: usize) -> Result<Vec<Chunk>> {
    if max_chars == 0 {
        return Err(Error::Parameter("max_chars must be positive".into()));
    }
    if overlap >= max_chars {
        return Err(Error::Parameter(format!(
            "overlap {overlap} must be smaller than max_chars {max_chars}"
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start < n {
        let hard_end = (start + max_chars).min(n);
        let end = if hard_end == n {
            n
        } else {
            snap_to_boundary(&chars, start, hard_end, max_chars, overlap).unwrap_or(hard_end)
        };
        chunks.push(Chunk {
            doc_id: doc_id.to_string(),
            ordinal: chunks.len(),
            text: chars[start..end].iter().collect(),
            char_span: (start, end),
        });
        if end == n {
            break;
        }
        start = end - overlap;
    }
    Ok(chunks)
}

fn snap_to_boundary(chars: &[char], start: usize, hard_end: usize, max_chars: usize, overlap: usize) -> Option<usize> {
    let earliest = (start + max_chars - max_chars / 5).max(start + overlap + 1);
    if earliest >= hard_end {
        return None;
    }
    let candidates = (earliest..hard_end).rev();
    let paragraph = candidates
        .clone()
        .find(|&p| p >= 2 && chars[p - 1] == '\n' && chars[p - 2] == '\n');
    paragraph.or_else(|| {
        candidates.into_iter().find(|&p| {
            p >= 2 && chars[p - 1].is_whitespace() && matches!(chars[p - 2], '.' | '!' | '?')
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| c.char_span).collect()
    }

    #[test]
    fn short_text_is_one_chunk() {
        let c = chunk_document("d", "0123456789", 20, 5).unwrap();
        assert_eq!(spans(&c), vec![(0, 10)]);
    }

    #[test]
    fn hard_cuts_follow_arithmetic() {
        let text = "a".repeat(100);
        let c = chunk_document("d", &text, 40, 10).unwrap();
        assert_eq!(spans(&c), vec![(0, 40), (30, 70), (60, 100)]);
    }

    #[test]
    fn empty_text_has_no_chunks() {
        assert!(chunk_document("d", "", 10, 2).unwrap().is_empty());
    }

    #[test]
    fn overlap_must_be_smaller_than_window() {
        assert!(matches!(chunk_document("d", "abc", 4, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn snaps_to_sentence_end_in_tail() {
        // sentence ends at char 18 ("... here. "), inside the last 20% of a 20-char window
        let text = "words words here. and the rest of it";
        let c = chunk_document("d", text, 20, 2).unwrap();
        assert_eq!(c[0].char_span, (0, 18));
        assert_eq!(c[0].text, "words words here. ");
        assert_eq!(c[1].char_span.0, 16);
    }

    #[test]
    fn paragraph_beats_sentence() {
        let text = format!("{}\n\nb. c{}", "x".repeat(16), "y".repeat(30));
        let c = chunk_document("d", &text, 22, 3).unwrap();
        assert_eq!(c[0].char_span, (0, 18));
    }

    #[test]
    fn multibyte_offsets_are_characters() {
        let text = "é".repeat(25);
        let c = chunk_document("d", &text, 10, 0).unwrap();
        assert_eq!(spans(&c), vec![(0, 10), (10, 20), (20, 25)]);
        assert_eq!(c[2].text.chars().count(), 5);
    }

    proptest::proptest! {
        #[test]
        fn spans_tile_the_document(
            text in "[a-z .\n]{0,300}",
            max in 1usize..60,
            overlap_seed in 0usize..60,
        ) {
            let overlap = overlap_seed % max;
            let chunks = chunk_document("d", &text, max, overlap).unwrap();
            let n = text.chars().count();
            if n == 0 {
                proptest::prop_assert!(chunks.is_empty());
                return Ok(());
            }
            proptest::prop_assert_eq!(chunks[0].char_span.0, 0);
            proptest::prop_assert_eq!(chunks.last().unwrap().char_span.1, n);
            let mut rebuilt = String::new();
            for (i, c) in chunks.iter().enumerate() {
                let (s, e) = c.char_span;
                proptest::prop_assert!(e > s && e - s <= max);
                proptest::prop_assert_eq!(c.ordinal, i);
                if i > 0 {
                    let prev = chunks[i - 1].char_span.1;
                    proptest::prop_assert_eq!(prev - s, overlap);
                    rebuilt.extend(c.text.chars().skip(overlap));
                } else {
                    rebuilt.push_str(&c.text);
                }
            }
            proptest::prop_assert_eq!(rebuilt, text);
        }
    }
}
