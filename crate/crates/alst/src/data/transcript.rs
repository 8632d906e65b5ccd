use crate::data::manifest::is_arpabet_label;
use crate::error::{Error, Result};

pub const DEFAULT_TRANSCRIPT: &str = include_str!("../../assets/transcript.txt");

/// Times the prompt is read within one recording.
pub const PROMPT_REPEATS: usize = 5;

/// One phoneme position of the prompt. More than one variant means the
/// speaker may realize it either way.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSlot {
    pub variants: Vec<String>,
}

/// Parses a transcript file: `#` comments, one word per line, phonemes
/// separated by whitespace, variants by `|`.
pub fn parse_transcript(text: &str) -> Result<Vec<PhonemeSlot>> {
    let mut slots = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        for token in line.split_whitespace() {
            let variants: Vec<String> = token.split('|').map(str::to_owned).collect();
            if let Some(bad) = variants.iter().find(|v| !is_arpabet_label(v)) {
                return Err(Error::Config(format!(
                    "transcript line {}: '{bad}' is not an ARPABET label",
                    n + 1
                )));
            }
            slots.push(PhonemeSlot { variants });
        }
    }
    if slots.is_empty() {
        return Err(Error::Config("transcript has no phonemes".into()));
    }
    Ok(slots)
}

/// Every label the transcript can produce, sorted.
pub fn transcript_labels(slots: &[PhonemeSlot]) -> Vec<String> {
    let mut labels: Vec<String> = slots.iter().flat_map(|s| s.variants.iter().cloned()).collect();
    labels.sort();
    labels.dedup();
    labels
}
