//! Deterministic sentence rendering of metadata records and the hash
//! tokenizer feeding the text encoder.
//!
//! Numeric timings enter the sentence as bin tokens rather than raw values,
//! so every record of a contrast group renders to the identical sentence and
//! the group's multi-positive structure is exact on the text side.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::MetadataRecord;
use crate::grouping::{assign_group_with, BinningScheme, GroupingOptions};
use crate::util::fnv1a64;

/// Default vocabulary size of the hash tokenizer.
pub const DEFAULT_VOCAB: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("cannot tokenize empty text")]
    EmptyText,
}

/// Token ids plus the sentence they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub source_text: String,
}

fn slot(s: &Option<String>) -> String {
    match s {
        Some(v) => v.to_lowercase(),
        None => "unknown".into(),
    }
}

fn slot2(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.2}"),
        None => "unknown".into(),
    }
}

/// Render the fixed sentence skeleton for a record. Absent fields render as
/// "unknown"; bins come from [`assign_group_with`] under the same options
/// used for grouping, so the sentence is constant within a contrast group.
pub fn render_template(
    record: &MetadataRecord,
    scheme: &BinningScheme,
    opts: GroupingOptions,
) -> String {
    let key = assign_group_with(record, scheme, opts);
    let plane = match record.imaging_plane {
        Some(p) => p.to_string().to_lowercase(),
        None => "unknown".into(),
    };
    let series = if opts.include_series_description {
        slot(&record.series_description)
    } else {
        slot(&None)
    };
    format!(
        "a {} tesla {} {} scan in {} plane sequence {} variant {} te bin {} tr bin {} ti bin {} flip angle {} series {}",
        slot2(record.field_strength_t),
        slot(&record.manufacturer),
        slot(&record.scanner_model),
        plane,
        slot(&record.sequence_type),
        slot(&record.sequence_variant),
        key.te_bin,
        key.tr_bin,
        key.ti_bin,
        slot2(record.flip_angle_deg),
        series,
    )
}

/// Whitespace-split hash tokenizer: each token id is the FNV-1a 64-bit hash
/// of the token bytes modulo the vocabulary size. Stable across runs and
/// platforms; no learned vocabulary.
pub fn tokenize(text: &str, vocab: usize) -> Result<TokenSequence, TemplateError> {
    assert!(vocab > 0 && vocab <= u32::MAX as usize, "vocab size out of range");
    let tokens: Vec<u32> = text
        .split_whitespace()
        .map(|t| (fnv1a64(t.as_bytes()) % vocab as u64) as u32)
        .collect();
    if tokens.is_empty() {
        return Err(TemplateError::EmptyText);
    }
    Ok(TokenSequence {
        tokens,
        source_text: text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::ImagingPlane;

    fn scheme() -> BinningScheme {
        let edges: Vec<f64> = (1..20).map(|k| k as f64 * 10.0).collect();
        BinningScheme {
            te_edges: edges.clone(),
            tr_edges: edges.clone(),
            ti_edges: edges,
            fitted_on: "test".into(),
        }
    }

    #[test]
    fn fully_absent_record_is_deterministic() {
        let r = MetadataRecord {
            volume_id: "v".into(),
            ..Default::default()
        };
        let s = render_template(&r, &scheme(), GroupingOptions::default());
        assert_eq!(
            s,
            "a unknown tesla unknown unknown scan in unknown plane sequence unknown variant \
             unknown te bin -1 tr bin -1 ti bin -1 flip angle unknown series unknown"
        );
        assert_eq!(s.matches("unknown").count(), 8);
        assert_eq!(s.matches("-1").count(), 3);
    }

    #[test]
    fn direct_substitution() {
        let r = MetadataRecord {
            volume_id: "v".into(),
            echo_time_ms: Some(35.0),
            repetition_time_ms: Some(75.0),
            field_strength_t: Some(1.5),
            manufacturer: Some("SIEMENS".into()),
            imaging_plane: Some(ImagingPlane::Axial),
            sequence_type: Some("SE".into()),
            ..Default::default()
        };
        let s = render_template(&r, &scheme(), GroupingOptions::default());
        assert!(s.starts_with("a 1.50 tesla siemens unknown scan in axial plane sequence se"));
        assert!(s.contains("te bin 3 tr bin 7"));
    }

    #[test]
    fn same_group_same_sentence() {
        let mk = |te: f64| MetadataRecord {
            volume_id: format!("v{te}"),
            echo_time_ms: Some(te),
            repetition_time_ms: Some(500.0),
            manufacturer: Some("GE".into()),
            ..Default::default()
        };
        let opts = GroupingOptions::default();
        let s = scheme();
        // 31 and 39 share te bin 3
        assert_eq!(render_template(&mk(31.0), &s, opts), render_template(&mk(39.0), &s, opts));
    }

    #[test]
    fn tokenize_repeats_and_determinism() {
        let seq = tokenize("a a a", 4096).unwrap();
        assert_eq!(seq.tokens.len(), 3);
        assert!(seq.tokens.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(tokenize("a a a", 4096).unwrap(), seq);
        assert!(seq.tokens.iter().all(|&t| t < 4096));
    }

    #[test]
    fn tokenize_differs_in_one_position() {
        let a = tokenize("te bin 3", 4096).unwrap();
        let b = tokenize("te bin 4", 4096).unwrap();
        assert_eq!(a.tokens.len(), b.tokens.len());
        let diff = a.tokens.iter().zip(&b.tokens).filter(|(x, y)| x != y).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn tokenize_empty_is_error() {
        assert_eq!(tokenize("", 4096), Err(TemplateError::EmptyText));
        assert_eq!(tokenize("   \t", 4096), Err(TemplateError::EmptyText));
    }
}
