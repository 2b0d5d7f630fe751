//! Annotation CSV: `sample_id,x1,y1,x2,y2,class_id,instance_id` with
//! coordinates normalized to `[0, 1]` against the clip's width and height.

use std::fmt::Write as _;
use std::io::BufRead;

use crate::geometry::BBox;

use super::{Annotation, DataError, Origin};

pub const CSV_HEADER: &str = "sample_id,x1,y1,x2,y2,class_id,instance_id";

/// One parsed CSV row, coordinates still normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRecord {
    pub sample_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// `-1` marks an unlabeled detection.
    pub class_id: i64,
    pub instance_id: i64,
}

impl CsvRecord {
    pub fn from_annotation(sample_id: &str, ann: &Annotation, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        CsvRecord {
            sample_id: sample_id.to_string(),
            x1: ann.bbox.x1 / w,
            y1: ann.bbox.y1 / h,
            x2: ann.bbox.x2 / w,
            y2: ann.bbox.y2 / h,
            class_id: ann.class_id as i64,
            instance_id: ann.instance_id,
        }
    }

    /// Scale to pixel coordinates of a `width x height` frame.
    pub fn pixel_box(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        BBox::new(self.x1 * w, self.y1 * h, self.x2 * w, self.y2 * h)
    }

    pub fn to_annotation(
        &self,
        width: usize,
        height: usize,
        origin: Origin,
    ) -> Result<Annotation, DataError> {
        let class_id = usize::try_from(self.class_id)
            .map_err(|_| DataError::UnlabeledRecord(self.sample_id.clone()))?;
        Ok(Annotation {
            bbox: self.pixel_box(width, height),
            class_id,
            instance_id: self.instance_id,
            origin,
        })
    }
}

fn csv_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Csv { line, message: message.into() }
}

fn parse_line(line_no: usize, line: &str) -> Result<CsvRecord, DataError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 7 {
        return Err(csv_err(line_no, format!("expected 7 fields, found {}", fields.len())));
    }
    if fields[0].is_empty() {
        return Err(csv_err(line_no, "empty sample_id"));
    }
    let mut coords = [0.0f64; 4];
    for (slot, (name, raw)) in coords
        .iter_mut()
        .zip(["x1", "y1", "x2", "y2"].into_iter().zip(&fields[1..5]))
    {
        let v: f64 = raw
            .parse()
            .map_err(|_| csv_err(line_no, format!("{name} is not a number: {raw:?}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(csv_err(line_no, format!("{name}={v} outside [0,1]")));
        }
        *slot = v;
    }
    let [x1, y1, x2, y2] = coords;
    if x1 > x2 {
        return Err(csv_err(line_no, "x1>x2"));
    }
    if y1 > y2 {
        return Err(csv_err(line_no, "y1>y2"));
    }
    let class_id: i64 = fields[5]
        .parse()
        .map_err(|_| csv_err(line_no, format!("class_id is not an integer: {:?}", fields[5])))?;
    if class_id < -1 {
        return Err(csv_err(line_no, format!("class_id {class_id} < -1")));
    }
    let instance_id: i64 = fields[6]
        .parse()
        .map_err(|_| csv_err(line_no, format!("instance_id is not an integer: {:?}", fields[6])))?;
    Ok(CsvRecord { sample_id: fields[0].to_string(), x1, y1, x2, y2, class_id, instance_id })
}

/// Parse annotation rows. A leading header line and blank lines are skipped;
/// errors carry the 1-based physical line number.
pub fn parse_annotation_csv<R: BufRead>(reader: R) -> Result<Vec<CsvRecord>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line == CSV_HEADER) {
            continue;
        }
        out.push(parse_line(idx + 1, line)?);
    }
    Ok(out)
}

/// Serialize with a header and six-decimal coordinates.
pub fn write_annotation_csv(records: &[CsvRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.sample_id, r.x1, r.y1, r.x2, r.y2, r.class_id, r.instance_id
        );
    }
    s
}
