use std::collections::BTreeMap;
use std::path::Path;

use super::{list_files, read_text};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox, NUM_CLASSES};

/// Category of ignored regions.
const IGNORED_REGION: u8 = 0;
/// Category of objects outside the evaluated classes.
const OTHERS: u8 = 11;

/// One line of a VisDrone-style annotation file:
/// `left,top,width,height,score,category,truncation,occlusion`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub left: i64,
    pub top: i64,
    pub width: i64,
    pub height: i64,
    pub score: i64,
    pub category: u8,
    pub truncation: i64,
    pub occlusion: i64,
}

fn parse_line(line: &str) -> std::result::Result<Annotation, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 comma-separated fields, found {}", fields.len()));
    }
    let mut v = [0i64; 8];
    for (slot, (i, f)) in v.iter_mut().zip(fields.iter().enumerate()) {
        *slot = f.parse().map_err(|_| format!("field {} is not an integer: {f:?}", i + 1))?;
    }
    if v[2] < 0 || v[3] < 0 {
        return Err(format!("negative box size {}x{}", v[2], v[3]));
    }
    let category = u8::try_from(v[5]).ok().filter(|&c| c <= OTHERS).ok_or_else(|| format!("unknown category {}", v[5]))?;
    Ok(Annotation {
        left: v[0],
        top: v[1],
        width: v[2],
        height: v[3],
        score: v[4],
        category,
        truncation: v[6],
        occlusion: v[7],
    })
}

/// Parses annotation text; blank lines are skipped. `source` names the
/// input in error messages.
pub fn parse_annotations(text: &str, source: &str) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l).map_err(|msg| Error::Parse { path: source.to_string(), line: i + 1, msg }))
        .collect()
}

pub fn write_annotations(anns: &[Annotation]) -> String {
    anns.iter()
        .map(|a| {
            format!(
                "{},{},{},{},{},{},{},{}\n",
                a.left, a.top, a.width, a.height, a.score, a.category, a.truncation, a.occlusion
            )
        })
        .collect()
}

/// Corner-form ground truth. Categories 1..=10 become classes 0..=9;
/// ignored regions and "others" become ignored boxes.
pub fn annotation_to_gt(a: &Annotation) -> GtBox {
    let (x, y) = (a.left as f64, a.top as f64);
    let bbox = BBox::new(x, y, x + a.width as f64, y + a.height as f64);
    match a.category {
        IGNORED_REGION | OTHERS => GtBox::ignored(bbox),
        c => GtBox::new(bbox, usize::from(c) - 1),
    }
}

/// Annotation line for an integer-aligned ground-truth box.
pub fn gt_to_annotation(g: &GtBox) -> Annotation {
    let category = if g.ignore { IGNORED_REGION } else { (g.class_id.min(NUM_CLASSES - 1) + 1) as u8 };
    Annotation {
        left: g.bbox.x1.round() as i64,
        top: g.bbox.y1.round() as i64,
        width: g.bbox.width().round() as i64,
        height: g.bbox.height().round() as i64,
        score: i64::from(!g.ignore),
        category,
        truncation: 0,
        occlusion: 0,
    }
}

pub fn load_annotations(path: &Path) -> Result<(Vec<GtBox>, Vec<Annotation>)> {
    let anns = parse_annotations(&read_text(path)?, &path.display().to_string())?;
    Ok((anns.iter().map(annotation_to_gt).collect(), anns))
}

/// Every `*.txt` annotation file in `dir`, keyed by file stem.
pub fn load_annotation_dir(dir: &Path) -> Result<BTreeMap<String, Vec<GtBox>>> {
    list_files(dir, "txt")?.into_iter().map(|(id, path)| Ok((id, load_annotations(&path)?.0))).collect()
}
