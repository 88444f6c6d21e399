//! Contrast grouping: joint quantization of TE/TR/TI plus unique categorical
//! combinations. The resulting [`GroupKey`] defines which acquisitions count
//! as positives for the contrastive loss.
//!
//! TE and TR each get 20 quantile bins (their product is the quantization
//! grid); TI gets its own 20 bins plus a null bin for the frequently-absent
//! case and is appended to the key. Edges are placed at log-scale quantiles
//! because the timing parameters span orders of magnitude.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::MetadataRecord;
use crate::util::fnv1a64;

/// Number of bins per numeric field; edges per field is `BIN_COUNT - 1`.
pub const BIN_COUNT: usize = 20;

/// Minimum number of records carrying a field before its quantiles are fitted.
pub const MIN_FIT_RECORDS: usize = 20;

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("insufficient data to fit binning: {field} present in {have} records, need {need}")]
    InsufficientData {
        field: &'static str,
        have: usize,
        need: usize,
    },
}

/// Fitted quantile edges for the three timing fields.
///
/// Edges are strictly increasing; a value's bin is the count of edges
/// strictly below it, so bins range over `[0, 19]` and an absent value maps
/// to the sentinel bin `-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub te_edges: Vec<f64>,
    pub tr_edges: Vec<f64>,
    pub ti_edges: Vec<f64>,
    /// Fingerprint of the corpus the scheme was fitted on.
    pub fitted_on: String,
}

impl BinningScheme {
    /// Validate edge invariants: 19 strictly increasing positive finite
    /// values per field.
    pub fn validate(&self) -> Result<(), String> {
        for (name, edges) in [
            ("te_edges", &self.te_edges),
            ("tr_edges", &self.tr_edges),
            ("ti_edges", &self.ti_edges),
        ] {
            if edges.len() != BIN_COUNT - 1 {
                return Err(format!("{name}: expected {} edges, got {}", BIN_COUNT - 1, edges.len()));
            }
            for w in edges.windows(2) {
                if !(w[0] < w[1]) {
                    return Err(format!("{name}: edges not strictly increasing at {} >= {}", w[0], w[1]));
                }
            }
            if edges.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                return Err(format!("{name}: edges must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// The quantized + categorical identity of an acquisition.
///
/// Ordering (and therefore `label_index` assignment) is lexicographic over
/// `(te_bin, tr_bin, ti_bin, categorical_key)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub te_bin: i32,
    pub tr_bin: i32,
    pub ti_bin: i32,
    pub categorical_key: String,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "te:{}|tr:{}|ti:{}|{}",
            self.te_bin, self.tr_bin, self.ti_bin, self.categorical_key
        )
    }
}

/// One contrast class: a key, its members, and a dense label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastGroup {
    pub key: GroupKey,
    pub member_ids: Vec<String>,
    pub label_index: usize,
}

/// Grouping options. `include_series_description` defaults to true; the
/// CLI's `--exclude-series-description` switches it off, dropping the
/// inherently noisy field from both the key and the rendered template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingOptions {
    pub include_series_description: bool,
}

impl Default for GroupingOptions {
    fn default() -> Self {
        Self {
            include_series_description: true,
        }
    }
}

/// Interior quantile of sorted values at fraction `p`, interpolated linearly
/// in log space and mapped back to linear scale.
fn log_quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    let (a, b) = (sorted[lo].ln(), sorted[hi].ln());
    (a + frac * (b - a)).exp()
}

/// Next representable f64 above `x` (toward +inf).
fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    let bits = if x == 0.0 { 1 } else if x > 0.0 { x.to_bits() + 1 } else { x.to_bits() - 1 };
    f64::from_bits(bits)
}

fn fit_edges(values: &mut Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..BIN_COUNT)
        .map(|k| log_quantile(values, k as f64 / BIN_COUNT as f64))
        .collect();
    // duplicate quantiles are perturbed to strict ascent by the smallest
    // representable step
    for i in 1..edges.len() {
        if edges[i] <= edges[i - 1] {
            edges[i] = next_up(edges[i - 1]);
        }
    }
    edges
}

/// Deterministic fallback edges when a field has no observed values at all:
/// log-spaced interior points over a broad plausible millisecond range.
fn default_edges() -> Vec<f64> {
    let (lo, hi) = (1.0f64.ln(), 10_000.0f64.ln());
    (1..BIN_COUNT)
        .map(|k| (lo + (hi - lo) * k as f64 / BIN_COUNT as f64).exp())
        .collect()
}

fn fingerprint(records: &[MetadataRecord]) -> String {
    let mut ids: Vec<&str> = records.iter().map(|r| r.volume_id.as_str()).collect();
    ids.sort_unstable();
    let mut h: u64 = 0xcbf29ce484222325;
    for id in &ids {
        h ^= fnv1a64(id.as_bytes());
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("fnv1a:{h:016x}:n={}", records.len())
}

/// Fit per-field quantile edges on the corpus.
///
/// Requires at least [`MIN_FIT_RECORDS`] records carrying TE and TR. TI may
/// be sparse or absent; with zero observed values its edges fall back to a
/// fixed log-spaced grid.
pub fn fit_binning(records: &[MetadataRecord]) -> Result<BinningScheme, GroupingError> {
    let mut te: Vec<f64> = records.iter().filter_map(|r| r.echo_time_ms).collect();
    let mut tr: Vec<f64> = records.iter().filter_map(|r| r.repetition_time_ms).collect();
    let mut ti: Vec<f64> = records.iter().filter_map(|r| r.inversion_time_ms).collect();
    if te.len() < MIN_FIT_RECORDS {
        return Err(GroupingError::InsufficientData {
            field: "echo_time_ms",
            have: te.len(),
            need: MIN_FIT_RECORDS,
        });
    }
    if tr.len() < MIN_FIT_RECORDS {
        return Err(GroupingError::InsufficientData {
            field: "repetition_time_ms",
            have: tr.len(),
            need: MIN_FIT_RECORDS,
        });
    }
    let scheme = BinningScheme {
        te_edges: fit_edges(&mut te),
        tr_edges: fit_edges(&mut tr),
        ti_edges: if ti.is_empty() { default_edges() } else { fit_edges(&mut ti) },
        fitted_on: fingerprint(records),
    };
    debug_assert!(scheme.validate().is_ok());
    Ok(scheme)
}

/// Bin index of a value: the count of edges strictly below it. Absent maps
/// to the sentinel bin -1.
pub fn bin_index(value: Option<f64>, edges: &[f64]) -> i32 {
    match value {
        None => -1,
        Some(v) => edges.partition_point(|e| *e < v) as i32,
    }
}

fn fmt2(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.2}"),
        None => "NONE".into(),
    }
}

fn or_none(s: &Option<String>) -> &str {
    s.as_deref().unwrap_or("NONE")
}

/// Map a record to its group key under a fitted scheme. Total function:
/// absent numerics take the sentinel bin, absent categoricals render "NONE".
pub fn assign_group(record: &MetadataRecord, scheme: &BinningScheme) -> GroupKey {
    assign_group_with(record, scheme, GroupingOptions::default())
}

/// [`assign_group`] with explicit options.
///
/// The categorical key joins the eight fields in fixed order Manufacturer,
/// ScannerModel, ImagingPlane, FieldStrength, SequenceType, SequenceVariant,
/// SeriesDescription, FlipAngle; the two numeric categoricals are rendered
/// with two decimal places.
pub fn assign_group_with(
    record: &MetadataRecord,
    scheme: &BinningScheme,
    opts: GroupingOptions,
) -> GroupKey {
    let plane = record
        .imaging_plane
        .map(|p| p.to_string())
        .unwrap_or_else(|| "NONE".into());
    let series = if opts.include_series_description {
        or_none(&record.series_description).to_string()
    } else {
        "NONE".into()
    };
    let categorical_key = [
        or_none(&record.manufacturer),
        or_none(&record.scanner_model),
        &plane,
        &fmt2(record.field_strength_t),
        or_none(&record.sequence_type),
        or_none(&record.sequence_variant),
        &series,
        &fmt2(record.flip_angle_deg),
    ]
    .join("|");
    GroupKey {
        te_bin: bin_index(record.echo_time_ms, &scheme.te_edges),
        tr_bin: bin_index(record.repetition_time_ms, &scheme.tr_edges),
        ti_bin: bin_index(record.inversion_time_ms, &scheme.ti_edges),
        categorical_key,
    }
}

/// Partition records into contrast groups with dense labels assigned in
/// lexicographic key order. Deterministic in the input as a set.
pub fn build_groups(
    records: &[MetadataRecord],
    scheme: &BinningScheme,
    opts: GroupingOptions,
) -> Vec<ContrastGroup> {
    let mut by_key: BTreeMap<GroupKey, Vec<String>> = BTreeMap::new();
    for r in records {
        by_key
            .entry(assign_group_with(r, scheme, opts))
            .or_default()
            .push(r.volume_id.clone());
    }
    by_key
        .into_iter()
        .enumerate()
        .map(|(label_index, (key, mut member_ids))| {
            member_ids.sort_unstable();
            ContrastGroup {
                key,
                member_ids,
                label_index,
            }
        })
        .collect()
}

/// Serialized output of the grouping stage: the fitted scheme, the options
/// it was applied with, and the resulting groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingOutput {
    pub scheme: BinningScheme,
    pub options: GroupingOptions,
    pub groups: Vec<ContrastGroup>,
}

impl GroupingOutput {
    /// volume_id -> group label lookup.
    pub fn label_by_id(&self) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for g in &self.groups {
            for id in &g.member_ids {
                map.insert(id.clone(), g.label_index);
            }
        }
        map
    }
}
