//! Text-side inputs: labels CSV and detections JSONL.
//!
//! Labels: header `id,landmark_id`, one row per labeled image. Detections:
//! one JSON object per line, `{"id": ..., "objects": [{"class", "score",
//! "box": [x0, y0, x1, y1]}, ...]}`. Both loaders reject duplicate ids and
//! any row violating the type invariants, naming the offending record.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detection, DetectionMap, ImageId, LabelMap};
use crate::error::{Error, Result};

/// Checks that a CSV header matches the expected column names exactly.
pub(crate) fn expect_csv_header(
    reader: &mut csv::Reader<std::fs::File>,
    path: &Path,
    expected: &[&str],
) -> Result<()> {
    let headers = reader.headers().map_err(|e| csv_error(path, &e))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::format(
            path,
            0,
            format!("bad header {:?}, expected {:?}", got.join(","), expected.join(",")),
        ));
    }
    Ok(())
}

pub(crate) fn csv_error(path: &Path, e: &csv::Error) -> Error {
    let offset = e.position().map_or(0, csv::Position::byte);
    Error::format(path, offset, e.to_string())
}

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Loads an `id,landmark_id` CSV. Labels must be nonempty; duplicate ids are
/// rejected.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let mut reader = open_csv(path)?;
    expect_csv_header(&mut reader, path, &["id", "landmark_id"])?;
    let mut map = LabelMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let offset = record.position().map_or(0, csv::Position::byte);
        if record.len() != 2 {
            return Err(Error::format(
                path,
                offset,
                format!("expected 2 fields, got {}", record.len()),
            ));
        }
        let id = ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        map.insert(id, &record[1])
            .map_err(|e| Error::format(path, offset, e.to_string()))?;
    }
    Ok(map)
}

pub fn save_labels(map: &LabelMap, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["id", "landmark_id"]).map_err(|e| csv_error(path, &e))?;
    for (id, label) in map.iter() {
        w.write_record([id.as_str(), label]).map_err(|e| csv_error(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    id: ImageId,
    objects: Vec<Detection>,
}

/// Loads detector output in JSONL form. An empty file yields an empty map;
/// blank lines are skipped.
pub fn load_detections(path: &Path) -> Result<DetectionMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut map = DetectionMap::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, line_start, e.to_string()))?;
        map.insert(record.id, record.objects)
            .map_err(|e| Error::format(path, line_start, e.to_string()))?;
    }
    Ok(map)
}

pub fn save_detections(map: &DetectionMap, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, objects) in map.iter() {
        let record = DetectionRecord {
            id: id.clone(),
            objects: objects.to_vec(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::validation(format!("cannot serialize detections for {id}: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
