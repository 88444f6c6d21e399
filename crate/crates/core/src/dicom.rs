//! Acquisition-metadata ingest: a restricted DICOM Part 10 reader, a
//! matching synthesis writer, and the JSON sidecar manifest.
//!
//! The reader handles explicit-VR little-endian data sets only and extracts
//! just the tags that back [`MetadataRecord`]; everything else is skipped by
//! its declared length. Implicit VR and undefined-length elements are
//! rejected. Pure functions over byte buffers, safe to call concurrently.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::normalize_text;

/// A DICOM tag address, printable as zero-padded hex `(GGGG,EEEE)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TagAddress {
    pub group: u16,
    pub element: u16,
}

impl TagAddress {
    pub const fn new(group: u16, element: u16) -> Self {
        Self { group, element }
    }
}

impl fmt::Display for TagAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.group, self.element)
    }
}

pub const TAG_MANUFACTURER: TagAddress = TagAddress::new(0x0008, 0x0070);
pub const TAG_SERIES_DESCRIPTION: TagAddress = TagAddress::new(0x0008, 0x103E);
pub const TAG_SCANNER_MODEL: TagAddress = TagAddress::new(0x0008, 0x1090);
pub const TAG_SEQUENCE_TYPE: TagAddress = TagAddress::new(0x0018, 0x0020);
pub const TAG_SEQUENCE_VARIANT: TagAddress = TagAddress::new(0x0018, 0x0021);
pub const TAG_REPETITION_TIME: TagAddress = TagAddress::new(0x0018, 0x0080);
pub const TAG_ECHO_TIME: TagAddress = TagAddress::new(0x0018, 0x0081);
pub const TAG_INVERSION_TIME: TagAddress = TagAddress::new(0x0018, 0x0082);
pub const TAG_FIELD_STRENGTH: TagAddress = TagAddress::new(0x0018, 0x0087);
pub const TAG_FLIP_ANGLE: TagAddress = TagAddress::new(0x0018, 0x1314);
pub const TAG_SERIES_INSTANCE_UID: TagAddress = TagAddress::new(0x0020, 0x000E);
pub const TAG_IMAGE_ORIENTATION: TagAddress = TagAddress::new(0x0020, 0x0037);

/// Imaging plane derived from the slice normal of ImageOrientationPatient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ImagingPlane {
    Axial,
    Coronal,
    Sagittal,
    Oblique,
    Unknown,
}

impl fmt::Display for ImagingPlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ImagingPlane::Axial => "AXIAL",
            ImagingPlane::Coronal => "CORONAL",
            ImagingPlane::Sagittal => "SAGITTAL",
            ImagingPlane::Oblique => "OBLIQUE",
            ImagingPlane::Unknown => "UNKNOWN",
        };
        f.write_str(s)
    }
}

/// Parsed acquisition parameters of one volume.
///
/// Numeric fields are either absent or strictly positive and finite; string
/// fields are stored normalized (uppercase, single interior spaces, trimmed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetadataRecord {
    pub volume_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub echo_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manufacturer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scanner_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imaging_plane: Option<ImagingPlane>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_strength_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_description: Option<String>,
}

impl MetadataRecord {
    /// Normalize all string fields in place (idempotent). Empty strings
    /// become absent fields.
    pub fn normalize(&mut self) {
        for field in [
            &mut self.manufacturer,
            &mut self.scanner_model,
            &mut self.sequence_type,
            &mut self.sequence_variant,
            &mut self.series_description,
        ] {
            if let Some(s) = field.as_deref() {
                let n = normalize_text(s);
                *field = if n.is_empty() { None } else { Some(n) };
            }
        }
    }

    /// Check the record invariants: non-empty id, positive finite numerics,
    /// normalization-canonical strings.
    pub fn validate(&self) -> Result<(), String> {
        if self.volume_id.is_empty() {
            return Err("volume_id is empty".into());
        }
        for (name, v) in [
            ("echo_time_ms", self.echo_time_ms),
            ("repetition_time_ms", self.repetition_time_ms),
            ("inversion_time_ms", self.inversion_time_ms),
            ("flip_angle_deg", self.flip_angle_deg),
            ("field_strength_t", self.field_strength_t),
        ] {
            if let Some(x) = v {
                if !(x.is_finite() && x > 0.0) {
                    return Err(format!("{name} must be strictly positive and finite, got {x}"));
                }
            }
        }
        for (name, s) in [
            ("manufacturer", &self.manufacturer),
            ("scanner_model", &self.scanner_model),
            ("sequence_type", &self.sequence_type),
            ("sequence_variant", &self.sequence_variant),
            ("series_description", &self.series_description),
        ] {
            if let Some(s) = s {
                if normalize_text(s) != *s || s.is_empty() {
                    return Err(format!("{name} is not normalization-canonical: {s:?}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DicomError {
    #[error("not a DICOM Part 10 file: missing DICM magic")]
    MissingMagic,
    #[error("truncated element at {tag} (offset {offset})")]
    TruncatedElement { tag: TagAddress, offset: usize },
    #[error("element {tag} has undefined length, which is unsupported")]
    UndefinedLength { tag: TagAddress },
    #[error("element {tag} does not carry an explicit VR")]
    ImplicitVr { tag: TagAddress },
    #[error("file has no SeriesInstanceUID (0020,000E) to use as volume_id")]
    MissingVolumeId,
    #[error("degenerate orientation cosines: {0}")]
    DegenerateOrientation(String),
}

/// Non-fatal parse issues; the affected field is left absent.
#[derive(Debug, Clone, PartialEq)]
pub enum ParseWarning {
    /// DS value could not be parsed as a strictly positive decimal.
    MalformedDecimal { tag: TagAddress, value: String },
    /// ImageOrientationPatient present but unusable.
    BadOrientation { detail: String },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::MalformedDecimal { tag, value } => {
                write!(f, "malformed decimal in {tag}: {value:?}")
            }
            ParseWarning::BadOrientation { detail } => {
                write!(f, "unusable image orientation: {detail}")
            }
        }
    }
}

/// Result of parsing one DICOM file: the record plus any field-level warnings.
#[derive(Debug, Clone)]
pub struct DicomParse {
    pub record: MetadataRecord,
    pub warnings: Vec<ParseWarning>,
}

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";

/// VRs encoded with a 2-byte reserved field and a 32-bit length.
fn is_long_vr(vr: [u8; 2]) -> bool {
    matches!(&vr, b"OB" | b"OW" | b"OF" | b"OD" | b"OL" | b"SQ" | b"UC" | b"UR" | b"UT" | b"UN")
}

fn read_u16(buf: &[u8], at: usize) -> Option<u16> {
    buf.get(at..at + 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(buf: &[u8], at: usize) -> Option<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parse acquisition metadata from an explicit-VR little-endian DICOM
/// Part 10 byte stream.
///
/// Unknown elements are skipped by their declared length; absent tags yield
/// absent fields. Malformed decimal values and unusable orientations are
/// reported as warnings rather than failing the parse.
pub fn parse_dicom_meta(bytes: &[u8]) -> Result<DicomParse, DicomError> {
    if bytes.len() < PREAMBLE_LEN + 4 || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(DicomError::MissingMagic);
    }

    let mut record = MetadataRecord::default();
    let mut warnings = Vec::new();
    let mut orientation: Option<Vec<f64>> = None;
    let mut pos = PREAMBLE_LEN + 4;

    while pos < bytes.len() {
        let tag = TagAddress::new(
            read_u16(bytes, pos).ok_or(DicomError::TruncatedElement {
                tag: TagAddress::new(0, 0),
                offset: pos,
            })?,
            read_u16(bytes, pos + 2).ok_or(DicomError::TruncatedElement {
                tag: TagAddress::new(0, 0),
                offset: pos,
            })?,
        );
        let vr: [u8; 2] = match bytes.get(pos + 4..pos + 6) {
            Some(b) => [b[0], b[1]],
            None => return Err(DicomError::TruncatedElement { tag, offset: pos }),
        };
        if !vr.iter().all(|c| c.is_ascii_uppercase()) {
            return Err(DicomError::ImplicitVr { tag });
        }
        let (len, header) = if is_long_vr(vr) {
            let l = read_u32(bytes, pos + 8)
                .ok_or(DicomError::TruncatedElement { tag, offset: pos })?;
            (l as usize, 12)
        } else {
            let l = read_u16(bytes, pos + 6)
                .ok_or(DicomError::TruncatedElement { tag, offset: pos })?;
            (l as usize, 8)
        };
        if is_long_vr(vr) && len == 0xFFFF_FFFF {
            return Err(DicomError::UndefinedLength { tag });
        }
        let start = pos + header;
        let end = start
            .checked_add(len)
            .ok_or(DicomError::TruncatedElement { tag, offset: pos })?;
        if end > bytes.len() {
            return Err(DicomError::TruncatedElement { tag, offset: pos });
        }
        let value = &bytes[start..end];

        match tag {
            TAG_ECHO_TIME => record.echo_time_ms = decimal_field(tag, value, &mut warnings),
            TAG_REPETITION_TIME => {
                record.repetition_time_ms = decimal_field(tag, value, &mut warnings)
            }
            TAG_INVERSION_TIME => {
                record.inversion_time_ms = decimal_field(tag, value, &mut warnings)
            }
            TAG_FLIP_ANGLE => record.flip_angle_deg = decimal_field(tag, value, &mut warnings),
            TAG_FIELD_STRENGTH => {
                record.field_strength_t = decimal_field(tag, value, &mut warnings)
            }
            TAG_MANUFACTURER => record.manufacturer = string_field(value),
            TAG_SCANNER_MODEL => record.scanner_model = string_field(value),
            TAG_SEQUENCE_TYPE => record.sequence_type = string_field(value),
            TAG_SEQUENCE_VARIANT => record.sequence_variant = string_field(value),
            TAG_SERIES_DESCRIPTION => record.series_description = string_field(value),
            TAG_SERIES_INSTANCE_UID => {
                record.volume_id = raw_string(value).trim().to_string();
            }
            TAG_IMAGE_ORIENTATION => {
                let parts: Result<Vec<f64>, _> = raw_string(value)
                    .split('\\')
                    .map(|p| p.trim().parse::<f64>())
                    .collect();
                match parts {
                    Ok(v) if v.len() == 6 => orientation = Some(v),
                    Ok(v) => warnings.push(ParseWarning::BadOrientation {
                        detail: format!("expected 6 values, got {}", v.len()),
                    }),
                    Err(e) => warnings.push(ParseWarning::BadOrientation {
                        detail: e.to_string(),
                    }),
                }
            }
            _ => {} // skip by declared length
        }
        pos = end;
    }

    if let Some(c) = orientation {
        let cos: [f64; 6] = [c[0], c[1], c[2], c[3], c[4], c[5]];
        match plane_from_orientation(&cos) {
            Ok(plane) => record.imaging_plane = Some(plane),
            Err(e) => warnings.push(ParseWarning::BadOrientation {
                detail: e.to_string(),
            }),
        }
    }

    if record.volume_id.is_empty() {
        return Err(DicomError::MissingVolumeId);
    }
    record.normalize();
    Ok(DicomParse { record, warnings })
}

/// First value of a (possibly multi-valued) DS element, or a warning.
fn decimal_field(tag: TagAddress, value: &[u8], warnings: &mut Vec<ParseWarning>) -> Option<f64> {
    let text = raw_string(value);
    let first = text.split('\\').next().unwrap_or("").trim();
    match first.parse::<f64>() {
        Ok(x) if x.is_finite() && x > 0.0 => Some(x),
        _ => {
            warnings.push(ParseWarning::MalformedDecimal {
                tag,
                value: first.to_string(),
            });
            None
        }
    }
}

fn raw_string(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_end_matches(['\0', ' '])
        .to_string()
}

fn string_field(value: &[u8]) -> Option<String> {
    let n = normalize_text(&raw_string(value));
    if n.is_empty() {
        None
    } else {
        Some(n)
    }
}

/// Unit-norm tolerance for orientation cosines. Wide enough to accept
/// cosines quoted to two decimals (e.g. 0.71 for sqrt(2)/2).
pub const ORIENTATION_NORM_TOL: f64 = 1e-2;

/// Dominance threshold: the slice normal must carry at least this much of
/// its magnitude on one axis to be called AXIAL/CORONAL/SAGITTAL.
pub const PLANE_DOMINANCE: f64 = 0.8;

/// Classify the imaging plane from the six ImageOrientationPatient cosines
/// (row direction then column direction).
///
/// The slice normal is `row x column`; the dominant absolute component picks
/// the plane when it reaches [`PLANE_DOMINANCE`], otherwise OBLIQUE.
pub fn plane_from_orientation(c: &[f64; 6]) -> Result<ImagingPlane, DicomError> {
    let row = [c[0], c[1], c[2]];
    let col = [c[3], c[4], c[5]];
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let rn = norm(&row);
    let cn = norm(&col);
    if !rn.is_finite() || !cn.is_finite() {
        return Err(DicomError::DegenerateOrientation("non-finite cosines".into()));
    }
    if (rn - 1.0).abs() > ORIENTATION_NORM_TOL || (cn - 1.0).abs() > ORIENTATION_NORM_TOL {
        return Err(DicomError::DegenerateOrientation(format!(
            "direction cosines are not unit vectors (norms {rn:.4}, {cn:.4})"
        )));
    }
    let mut normal = [
        row[1] * col[2] - row[2] * col[1],
        row[2] * col[0] - row[0] * col[2],
        row[0] * col[1] - row[1] * col[0],
    ];
    let nn = norm(&normal);
    if nn < 0.5 {
        return Err(DicomError::DegenerateOrientation(
            "row and column directions are nearly parallel".into(),
        ));
    }
    for x in &mut normal {
        *x /= nn;
    }
    let abs = [normal[0].abs(), normal[1].abs(), normal[2].abs()];
    let (axis, &max) = abs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("3 components");
    if max < PLANE_DOMINANCE {
        return Ok(ImagingPlane::Oblique);
    }
    Ok(match axis {
        0 => ImagingPlane::Sagittal,
        1 => ImagingPlane::Coronal,
        _ => ImagingPlane::Axial,
    })
}

/// Canonical orientation cosines emitted by the writer for each plane.
pub fn orientation_for_plane(plane: ImagingPlane) -> Option<[f64; 6]> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match plane {
        ImagingPlane::Axial => Some([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        ImagingPlane::Coronal => Some([1.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
        ImagingPlane::Sagittal => Some([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        ImagingPlane::Oblique => Some([1.0, 0.0, 0.0, 0.0, s, s]),
        ImagingPlane::Unknown => None,
    }
}

/// Synthesize a Part 10 byte stream for a record. Intended for tests, fuzz
/// seeds and generated corpora; emits exactly the tags the reader extracts.
pub fn write_dicom_meta(record: &MetadataRecord) -> Vec<u8> {
    let mut out = vec![0u8; PREAMBLE_LEN];
    out.extend_from_slice(MAGIC);

    let fmt_ds = |x: f64| format!("{x}");
    let mut elements: Vec<(TagAddress, [u8; 2], Vec<u8>)> = Vec::new();
    let mut push_str = |elements: &mut Vec<(TagAddress, [u8; 2], Vec<u8>)>,
                        tag: TagAddress,
                        vr: [u8; 2],
                        s: &str| {
        elements.push((tag, vr, s.as_bytes().to_vec()));
    };

    if let Some(v) = &record.manufacturer {
        push_str(&mut elements, TAG_MANUFACTURER, *b"LO", v);
    }
    if let Some(v) = &record.series_description {
        push_str(&mut elements, TAG_SERIES_DESCRIPTION, *b"LO", v);
    }
    if let Some(v) = &record.scanner_model {
        push_str(&mut elements, TAG_SCANNER_MODEL, *b"LO", v);
    }
    if let Some(v) = &record.sequence_type {
        push_str(&mut elements, TAG_SEQUENCE_TYPE, *b"CS", v);
    }
    if let Some(v) = &record.sequence_variant {
        push_str(&mut elements, TAG_SEQUENCE_VARIANT, *b"CS", v);
    }
    if let Some(x) = record.repetition_time_ms {
        push_str(&mut elements, TAG_REPETITION_TIME, *b"DS", &fmt_ds(x));
    }
    if let Some(x) = record.echo_time_ms {
        push_str(&mut elements, TAG_ECHO_TIME, *b"DS", &fmt_ds(x));
    }
    if let Some(x) = record.inversion_time_ms {
        push_str(&mut elements, TAG_INVERSION_TIME, *b"DS", &fmt_ds(x));
    }
    if let Some(x) = record.field_strength_t {
        push_str(&mut elements, TAG_FIELD_STRENGTH, *b"DS", &fmt_ds(x));
    }
    if let Some(x) = record.flip_angle_deg {
        push_str(&mut elements, TAG_FLIP_ANGLE, *b"DS", &fmt_ds(x));
    }
    push_str(&mut elements, TAG_SERIES_INSTANCE_UID, *b"UI", &record.volume_id);
    if let Some(cos) = record.imaging_plane.and_then(orientation_for_plane) {
        let text = cos.map(|x| format!("{x}")).join("\\");
        push_str(&mut elements, TAG_IMAGE_ORIENTATION, *b"DS", &text);
    }

    elements.sort_by_key(|(tag, _, _)| *tag);
    for (tag, vr, mut value) in elements {
        if value.len() % 2 != 0 {
            // UI pads with NUL, text VRs with space
            value.push(if &vr == b"UI" { 0x00 } else { b' ' });
        }
        out.extend_from_slice(&tag.group.to_le_bytes());
        out.extend_from_slice(&tag.element.to_le_bytes());
        out.extend_from_slice(&vr);
        if is_long_vr(vr) {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&(value.len() as u16).to_le_bytes());
        }
        out.extend_from_slice(&value);
    }
    out
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest schema violation: {0}")]
    SchemaViolation(String),
    #[error("duplicate volume_id {0:?}")]
    DuplicateVolumeId(String),
}

/// One manifest entry: a metadata record plus the path of its volume file
/// (relative paths are resolved against the manifest location by callers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub record: MetadataRecord,
    pub volume_path: String,
}

/// Parse a JSON manifest: an array of objects with `MetadataRecord` field
/// names plus `volume_path`. Records are normalized and validated; duplicate
/// volume ids are rejected.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(text)
        .map_err(|e| ManifestError::SchemaViolation(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for entry in &mut entries {
        entry.record.normalize();
        entry
            .record
            .validate()
            .map_err(ManifestError::SchemaViolation)?;
        if !seen.insert(entry.record.volume_id.clone()) {
            return Err(ManifestError::DuplicateVolumeId(entry.record.volume_id.clone()));
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> MetadataRecord {
        MetadataRecord {
            volume_id: "1.2.840.99.1".into(),
            echo_time_ms: Some(90.0),
            repetition_time_ms: Some(4000.0),
            inversion_time_ms: None,
            flip_angle_deg: Some(90.0),
            manufacturer: Some("SIEMENS".into()),
            scanner_model: Some("AVANTO".into()),
            imaging_plane: Some(ImagingPlane::Axial),
            field_strength_t: Some(1.5),
            sequence_type: Some("SE".into()),
            sequence_variant: Some("NONE".into()),
            series_description: Some("T2W BRAIN".into()),
        }
    }

    #[test]
    fn tag_display_is_zero_padded_hex() {
        assert_eq!(TAG_SERIES_DESCRIPTION.to_string(), "(0008,103E)");
        assert_eq!(TagAddress::new(0x20, 0xE).to_string(), "(0020,000E)");
    }

    #[test]
    fn te_direct_tag_copy() {
        let rec = MetadataRecord {
            volume_id: "v1".into(),
            echo_time_ms: Some(90.0),
            ..Default::default()
        };
        let parsed = parse_dicom_meta(&write_dicom_meta(&rec)).unwrap();
        assert_eq!(parsed.record.echo_time_ms, Some(90.0));
        // no (0018,0082) element was written
        assert_eq!(parsed.record.inversion_time_ms, None);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn missing_magic_rejected() {
        assert!(matches!(parse_dicom_meta(&[0u8; 200]), Err(DicomError::MissingMagic)));
        assert!(matches!(parse_dicom_meta(b"DICM"), Err(DicomError::MissingMagic)));
    }

    #[test]
    fn truncated_element_rejected() {
        let mut bytes = write_dicom_meta(&sample_record());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            parse_dicom_meta(&bytes),
            Err(DicomError::TruncatedElement { .. })
        ));
    }

    #[test]
    fn undefined_length_rejected() {
        let mut bytes = write_dicom_meta(&MetadataRecord {
            volume_id: "v".into(),
            ..Default::default()
        });
        // append an SQ element with undefined length
        bytes.extend_from_slice(&[0x40, 0x00, 0x00, 0x01]);
        bytes.extend_from_slice(b"SQ");
        bytes.extend_from_slice(&[0, 0]);
        bytes.extend_from_slice(&0xFFFF_FFFFu32.to_le_bytes());
        assert!(matches!(
            parse_dicom_meta(&bytes),
            Err(DicomError::UndefinedLength { .. })
        ));
    }

    #[test]
    fn malformed_decimal_is_warning_not_error() {
        let mut bytes = vec![0u8; 128];
        bytes.extend_from_slice(b"DICM");
        // (0018,0081) DS "abc " (malformed)
        bytes.extend_from_slice(&[0x18, 0x00, 0x81, 0x00]);
        bytes.extend_from_slice(b"DS");
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(b"abc ");
        // UID so the record is addressable
        bytes.extend_from_slice(&[0x20, 0x00, 0x0E, 0x00]);
        bytes.extend_from_slice(b"UI");
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(b"v1");
        let parsed = parse_dicom_meta(&bytes).unwrap();
        assert_eq!(parsed.record.echo_time_ms, None);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(matches!(
            parsed.warnings[0],
            ParseWarning::MalformedDecimal { tag, .. } if tag == TAG_ECHO_TIME
        ));
    }

    #[test]
    fn multivalued_ds_uses_first_value() {
        let mut bytes = vec![0u8; 128];
        bytes.extend_from_slice(b"DICM");
        bytes.extend_from_slice(&[0x18, 0x00, 0x81, 0x00]);
        bytes.extend_from_slice(b"DS");
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(b"12\\34\\5 ");
        bytes.extend_from_slice(&[0x20, 0x00, 0x0E, 0x00]);
        bytes.extend_from_slice(b"UI");
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(b"v1");
        let parsed = parse_dicom_meta(&bytes).unwrap();
        assert_eq!(parsed.record.echo_time_ms, Some(12.0));
    }

    #[test]
    fn plane_canonical_axes() {
        // axial: rows along x, columns along y
        assert_eq!(
            plane_from_orientation(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
            ImagingPlane::Axial
        );
        // coronal: slice normal along y
        assert_eq!(
            plane_from_orientation(&[1.0, 0.0, 0.0, 0.0, 0.0, -1.0]).unwrap(),
            ImagingPlane::Coronal
        );
        // sagittal: cross product = (1,0,0)
        assert_eq!(
            plane_from_orientation(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            ImagingPlane::Sagittal
        );
    }

    #[test]
    fn plane_in_plane_rotation_is_still_axial() {
        // 45-degree in-plane rotation: normal stays (0,0,1), dominance 1.0 >= 0.8
        assert_eq!(
            plane_from_orientation(&[0.71, 0.71, 0.0, -0.71, 0.71, 0.0]).unwrap(),
            ImagingPlane::Axial
        );
    }

    #[test]
    fn plane_tilted_is_oblique() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // normal = (0, -s, s): max component 0.707 < 0.8
        assert_eq!(
            plane_from_orientation(&[1.0, 0.0, 0.0, 0.0, s, s]).unwrap(),
            ImagingPlane::Oblique
        );
    }

    #[test]
    fn plane_degenerate_norm() {
        assert!(matches!(
            plane_from_orientation(&[2.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Err(DicomError::DegenerateOrientation(_))
        ));
        // parallel row/column
        assert!(matches!(
            plane_from_orientation(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            Err(DicomError::DegenerateOrientation(_))
        ));
    }

    #[test]
    fn roundtrip_full_record() {
        let rec = sample_record();
        let parsed = parse_dicom_meta(&write_dicom_meta(&rec)).unwrap();
        assert_eq!(parsed.record, rec);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn unknown_elements_are_skipped() {
        let rec = sample_record();
        let bytes = write_dicom_meta(&rec);
        // splice an unknown short-VR element and an unknown long-VR element
        // right after the magic
        let mut spliced = bytes[..132].to_vec();
        spliced.extend_from_slice(&[0x08, 0x00, 0x05, 0x00]); // (0008,0005)
        spliced.extend_from_slice(b"CS");
        spliced.extend_from_slice(&10u16.to_le_bytes());
        spliced.extend_from_slice(b"ISO_IR 100");
        spliced.extend_from_slice(&[0xE0, 0x7F, 0x10, 0x00]); // (7FE0,0010)
        spliced.extend_from_slice(b"OB");
        spliced.extend_from_slice(&[0, 0]);
        spliced.extend_from_slice(&4u32.to_le_bytes());
        spliced.extend_from_slice(&[1, 2, 3, 4]);
        spliced.extend_from_slice(&bytes[132..]);
        let parsed = parse_dicom_meta(&spliced).unwrap();
        assert_eq!(parsed.record, rec);
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let entries =
            parse_manifest(r#"[{"volume_id":"a","echo_time_ms":30,"volume_path":"a.vol"}]"#)
                .unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].record.echo_time_ms, Some(30.0));
        assert_eq!(entries[0].volume_path, "a.vol");

        assert!(parse_manifest("[]").unwrap().is_empty());

        let dup = parse_manifest(
            r#"[{"volume_id":"a","volume_path":"a.vol"},{"volume_id":"a","volume_path":"b.vol"}]"#,
        );
        assert!(matches!(dup, Err(ManifestError::DuplicateVolumeId(id)) if id == "a"));

        let bad = parse_manifest(r#"[{"volume_id":"a","echo_time_ms":"thirty","volume_path":"a.vol"}]"#);
        assert!(matches!(bad, Err(ManifestError::SchemaViolation(_))));

        let neg = parse_manifest(r#"[{"volume_id":"a","echo_time_ms":-3,"volume_path":"a.vol"}]"#);
        assert!(matches!(neg, Err(ManifestError::SchemaViolation(_))));
    }

    #[test]
    fn manifest_normalizes_strings() {
        let entries = parse_manifest(
            r#"[{"volume_id":"a","manufacturer":"  Siemens  Healthineers ","volume_path":"a.vol"}]"#,
        )
        .unwrap();
        assert_eq!(entries[0].record.manufacturer.as_deref(), Some("SIEMENS HEALTHINEERS"));
    }
}
