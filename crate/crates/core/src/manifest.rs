//! JSONL region manifest: one image record per line.
//!
//! Line format:
//! `{"image_id": "...", "h": 32, "w": 32, "regions": [{"bbox": [x0,y0,x1,y1],
//! "kind": "object", "label": 3}, {"bbox": [...], "kind": "ocr",
//! "tokens": [5, 9]}]}`
//!
//! Parse failures report the 1-based line number. Invalid bboxes (empty,
//! inverted, or out of image bounds) are rejected, never clamped.

use crate::error::{Error, Result};
use crate::region::{BBox, ImageRecord, Region, RegionKind, DEFAULT_MAX_OCR_TOKENS};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    image_id: String,
    h: u32,
    w: u32,
    regions: Vec<RegionLine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionLine {
    bbox: [u32; 4],
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
}

fn region_from_line(line: RegionLine) -> Result<Region> {
    let [x0, y0, x1, y1] = line.bbox;
    let bbox = BBox::new(x0, y0, x1, y1);
    match line.kind.as_str() {
        "object" => {
            let label = line
                .label
                .ok_or_else(|| Error::validation("object region missing \"label\""))?;
            if line.tokens.is_some() {
                return Err(Error::validation("object region carries \"tokens\""));
            }
            Ok(Region::object(bbox, label))
        }
        "ocr" => {
            let tokens = line
                .tokens
                .ok_or_else(|| Error::validation("ocr region missing \"tokens\""))?;
            if line.label.is_some() {
                return Err(Error::validation("ocr region carries \"label\""));
            }
            Ok(Region::ocr(bbox, tokens))
        }
        other => Err(Error::validation(format!(
            "unknown region kind {other:?} (expected \"object\" or \"ocr\")"
        ))),
    }
}

fn region_to_line(region: &Region) -> RegionLine {
    let b = region.bbox;
    RegionLine {
        bbox: [b.x0, b.y0, b.x1, b.y1],
        kind: match region.kind {
            RegionKind::Object => "object".to_string(),
            RegionKind::Ocr => "ocr".to_string(),
        },
        label: region.object_label,
        tokens: region.ocr_labels.clone(),
    }
}

/// Parses a JSONL manifest. Every error names its 1-based source line.
pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        let regions = parsed
            .regions
            .into_iter()
            .map(region_from_line)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        let record = ImageRecord {
            image_id: parsed.image_id,
            h: parsed.h,
            w: parsed.w,
            regions,
        };
        record
            .validate(DEFAULT_MAX_OCR_TOKENS)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// Reads a manifest from a file path.
pub fn read_manifest_file(path: &Path) -> Result<Vec<ImageRecord>> {
    read_manifest(std::fs::File::open(path)?)
}

/// Writes records as JSONL, one record per line.
pub fn write_manifest<W: Write>(writer: &mut W, records: &[ImageRecord]) -> Result<()> {
    for record in records {
        let line = RecordLine {
            image_id: record.image_id.clone(),
            h: record.h,
            w: record.w,
            regions: record.regions.iter().map(region_to_line).collect(),
        };
        serde_json::to_writer(&mut *writer, &line)
            .map_err(|e| Error::format(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes a manifest to a file path, creating parent directories.
pub fn write_manifest_file(path: &Path, records: &[ImageRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_manifest(&mut file, records)?;
    file.flush()?;
    Ok(())
}
