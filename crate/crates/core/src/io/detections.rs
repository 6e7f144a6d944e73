use std::collections::BTreeMap;
use std::path::Path;

use super::read_text;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};

/// One line per detection, `image_id,x1,y1,w,h,score,category`, images in
/// id order. Categories are 1-based.
pub fn write_detections(dets: &BTreeMap<String, Vec<Detection>>) -> String {
    let mut out = String::new();
    for (id, list) in dets {
        for d in list {
            let b = &d.bbox;
            out.push_str(&format!(
                "{id},{},{},{},{},{},{}\n",
                b.x1,
                b.y1,
                b.width(),
                b.height(),
                d.score,
                d.class_id + 1
            ));
        }
    }
    out
}

fn parse_line(line: &str) -> std::result::Result<(String, Detection), String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 comma-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty image id".into());
    }
    let mut v = [0f64; 5];
    for (slot, (i, f)) in v.iter_mut().zip(fields[1..6].iter().enumerate()) {
        *slot = f.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| format!("field {} is not a number: {f:?}", i + 2))?;
    }
    let category: usize = fields[6].parse().map_err(|_| format!("category is not an integer: {:?}", fields[6]))?;
    if !(1..=10).contains(&category) {
        return Err(format!("category {category} outside 1..=10"));
    }
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err(format!("negative box size {}x{}", v[2], v[3]));
    }
    let det = Detection::new(BBox::from_xywh(v[0], v[1], v[2], v[3]), v[4], category - 1).map_err(|e| e.to_string())?;
    Ok((fields[0].to_string(), det))
}

/// Inverse of [`write_detections`]; blank lines are skipped.
pub fn parse_detections(text: &str, source: &str) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, det) = parse_line(line).map_err(|msg| Error::Parse { path: source.to_string(), line: i + 1, msg })?;
        out.entry(id).or_default().push(det);
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    parse_detections(&read_text(path)?, &path.display().to_string())
}
