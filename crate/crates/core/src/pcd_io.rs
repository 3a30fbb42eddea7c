//! Point cloud ingestion and detection output.
//!
//! Binary clouds are consecutive little-endian `f32` records of 4
//! `(x, y, z, intensity)` or 5 `(x, y, z, intensity, ring)` fields. Text
//! clouds hold one point per line with comma or whitespace separated fields.
//! Records carrying a non-finite value are dropped and counted.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::DetectionBox;

const FIELD_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Points in source order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Scalar fields per record in the source (4 or 5; text clouds report 4).
    pub source_stride: usize,
    /// Records discarded at ingestion because a field was NaN or infinite.
    pub dropped: usize,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point>) -> Self {
        Self {
            points,
            source_stride: 4,
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of records present in the source, including dropped ones.
    pub fn records(&self) -> usize {
        self.points.len() + self.dropped
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 4 || stride == 5 {
        Ok(())
    } else {
        Err(Error::Param(format!("record stride must be 4 or 5, got {stride}")))
    }
}

pub fn decode_binary_cloud(bytes: &[u8], stride: usize) -> Result<PointCloud> {
    check_stride(stride)?;
    let record = stride * FIELD_BYTES;
    if bytes.len() % record != 0 {
        return Err(Error::Format(format!(
            "binary cloud of {} bytes is not a multiple of the {record}-byte record (stride {stride})",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / record);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(record) {
        let field = |k: usize| {
            let b = &rec[k * FIELD_BYTES..(k + 1) * FIELD_BYTES];
            f32::from_le_bytes([b[0], b[1], b[2], b[3]])
        };
        let p = Point::new(field(0), field(1), field(2), field(3));
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok(PointCloud {
        points,
        source_stride: stride,
        dropped,
    })
}

pub fn read_binary_cloud(path: impl AsRef<Path>, stride: usize) -> Result<PointCloud> {
    let path = path.as_ref();
    check_stride(stride)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_binary_cloud(&bytes, stride)
}

/// Stride-5 records get a zero ring index.
pub fn encode_binary_cloud(points: &[Point], stride: usize) -> Result<Vec<u8>> {
    check_stride(stride)?;
    let mut out = Vec::with_capacity(points.len() * stride * FIELD_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if stride == 5 {
            out.extend_from_slice(&0f32.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_binary_cloud(path: impl AsRef<Path>, points: &[Point], stride: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_binary_cloud(points, stride)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_text_cloud(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut dropped = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected at least 4 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0f32; 4];
        for (slot, field) in vals.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("`{field}` is not a decimal number"),
            })?;
        }
        let p = Point::new(vals[0], vals[1], vals[2], vals[3]);
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    Ok(PointCloud {
        points,
        source_stride: 4,
        dropped,
    })
}

pub fn read_text_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text_cloud(&text)
}

/// Picks the reader from the extension: `.txt`, `.csv` and `.xyz` are text,
/// anything else is binary with the given stride.
pub fn read_cloud(path: impl AsRef<Path>, stride: usize) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt" | "csv" | "xyz") => read_text_cloud(path),
        _ => read_binary_cloud(path, stride),
    }
}

/// Formats `v` with at least `sig` significant digits in plain decimal
/// notation.
fn fmt_sig(v: f64, sig: i32) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{:.*}", (sig - 1) as usize, if v.is_finite() { v } else { 0.0 });
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (sig - 1 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Detections sorted by descending score, ties by ascending `(x, y, class_id)`.
pub fn sort_detections(boxes: &mut [DetectionBox]) {
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.x.total_cmp(&b.x))
            .then(a.y.total_cmp(&b.y))
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Renders detections as JSON lines in output order.
pub fn format_detections(boxes: &[DetectionBox]) -> String {
    let mut sorted = boxes.to_vec();
    sort_detections(&mut sorted);
    let mut out = String::new();
    for b in &sorted {
        let name = serde_json::to_string(&b.class_name).expect("string serialization");
        let _ = writeln!(
            out,
            "{{\"class_id\":{},\"class_name\":{},\"score\":{},\"x\":{},\"y\":{},\"z\":{},\"l\":{},\"w\":{},\"h\":{},\"yaw\":{}}}",
            b.class_id,
            name,
            fmt_sig(b.score as f64, 7),
            fmt_sig(b.x as f64, 7),
            fmt_sig(b.y as f64, 7),
            fmt_sig(b.z as f64, 7),
            fmt_sig(b.l as f64, 7),
            fmt_sig(b.w as f64, 7),
            fmt_sig(b.h as f64, 7),
            fmt_sig(b.yaw as f64, 7),
        );
    }
    out
}

pub fn write_detections(boxes: &[DetectionBox], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_detections(boxes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f32, x: f32, y: f32) -> DetectionBox {
        DetectionBox {
            class_id,
            class_name: format!("c{class_id}"),
            score,
            x,
            y,
            z: 0.0,
            l: 1.0,
            w: 1.0,
            h: 1.0,
            yaw: 0.0,
        }
    }

    #[test]
    fn empty_binary_is_empty_cloud() {
        let cloud = decode_binary_cloud(&[], 5).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(cloud.source_stride, 5);
    }

    #[test]
    fn hand_encoded_stride5_record() {
        // 1.0 = 0x3F800000, 2.0 = 0x40000000, 3.0 = 0x40400000,
        // 0.5 = 0x3F000000, 7.0 = 0x40E00000, all little-endian.
        let bytes = [
            0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40, 0x40, 0x00, 0x00,
            0x00, 0x3F, 0x00, 0x00, 0xE0, 0x40,
        ];
        let cloud = decode_binary_cloud(&bytes, 5).unwrap();
        assert_eq!(cloud.points, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
        assert_eq!(cloud.dropped, 0);
    }

    #[test]
    fn length_mismatch_names_byte_count() {
        let err = decode_binary_cloud(&[0u8; 20], 4).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("20 bytes"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_stride_rejected() {
        assert!(matches!(decode_binary_cloud(&[], 3), Err(Error::Param(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_binary_cloud("/nonexistent/cloud.bin", 4).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn non_finite_records_dropped_and_counted() {
        let pts = [
            Point::new(1.0, 1.0, 1.0, 1.0),
            Point::new(f32::NAN, 0.0, 0.0, 0.0),
            Point::new(0.0, f32::INFINITY, 0.0, 0.0),
            Point::new(2.0, 2.0, 2.0, 2.0),
        ];
        let bytes = encode_binary_cloud(&pts, 4).unwrap();
        let cloud = decode_binary_cloud(&bytes, 4).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.dropped, 2);
        assert_eq!(cloud.records(), 4);
        assert_eq!(cloud.points[1], pts[3]);
    }

    #[test]
    fn text_cloud_cases() {
        assert_eq!(parse_text_cloud("1.0 2.0 3.0 0.5").unwrap().len(), 1);
        assert_eq!(parse_text_cloud("# header").unwrap().len(), 0);
        let cloud = parse_text_cloud("# x,y,z,i\n1,2,3,4,99\n\n  5 6\t7 8\n").unwrap();
        assert_eq!(
            cloud.points,
            vec![Point::new(1.0, 2.0, 3.0, 4.0), Point::new(5.0, 6.0, 7.0, 8.0)]
        );
        match parse_text_cloud("a b c d") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_text_cloud("1 2 3 4\n# c\n1 2 3") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detections_empty_and_schema() {
        assert_eq!(format_detections(&[]), "");
        let text = format_detections(&[det(3, 0.75, 1.5, -2.0)]);
        assert!(text.ends_with('\n'));
        let v: serde_json::Value = serde_json::from_str(text.trim_end()).unwrap();
        let obj = v.as_object().unwrap();
        for key in ["class_id", "class_name", "score", "x", "y", "z", "l", "w", "h", "yaw"] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert_eq!(obj.len(), 10);
        assert_eq!(obj["class_id"], 3);
        assert_eq!(obj["class_name"], "c3");
        assert_eq!(obj["score"].as_f64().unwrap(), 0.75);
    }

    #[test]
    fn floats_keep_seven_significant_digits() {
        let text = format_detections(&[det(0, 0.000123456, 0.0, 0.0)]);
        assert!(text.contains("\"score\":0.0001234560"), "{text}");
        assert_eq!(fmt_sig(0.5, 7), "0.5000000");
        assert_eq!(fmt_sig(-53.25, 7), "-53.25000");
    }

    #[test]
    fn ordering_by_score_then_x() {
        let boxes = [det(0, 0.5, 3.0, 0.0), det(1, 0.9, 9.0, 0.0), det(2, 0.5, -1.0, 0.0)];
        let text = format_detections(&boxes);
        let ids: Vec<u64> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["class_id"].as_u64().unwrap())
            .collect();
        assert_eq!(ids, vec![1, 2, 0]);
    }
}
