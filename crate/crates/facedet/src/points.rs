//! 68-point landmark benchmarks (AFW, AFLW-2000) reduced to five points.

use std::collections::BTreeMap;
use std::path::Path;

use facedet_core::annotation::{Annotation, Face};
use facedet_core::eval::PointReduction;
use facedet_core::geometry::{BBox, Point, NUM_LANDMARKS};

use crate::error::{Error, Result};
use crate::mat::read_mat;

const AFW_TABLE: &str = include_str!("../data/afw_68to5.txt");
const AFLW2000_TABLE: &str = include_str!("../data/aflw2000_68to5.txt");

const SLOTS: [&str; NUM_LANDMARKS] = ["left_eye", "right_eye", "nose", "mouth_left", "mouth_right"];

/// Parses a reduction table: `<slot> <index>...` lines, `#` comments.
pub fn parse_reduction(name: &str, text: &str) -> Result<PointReduction> {
    let mut sources: [Vec<usize>; NUM_LANDMARKS] = Default::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            file: name.into(),
            line: i + 1,
            msg,
        };
        let mut tok = line.split_whitespace();
        let slot = tok.next().expect("non-empty line");
        let k = SLOTS
            .iter()
            .position(|s| *s == slot)
            .ok_or_else(|| err(format!("unknown landmark slot {slot:?}")))?;
        sources[k] = tok
            .map(|t| t.parse().map_err(|_| err(format!("bad index {t:?}"))))
            .collect::<Result<_>>()?;
    }
    if let Some(k) = sources.iter().position(|s| s.is_empty()) {
        return Err(Error::Format(format!("{name}: no source points for {}", SLOTS[k])));
    }
    Ok(PointReduction {
        name: name.into(),
        sources,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkDataset {
    Afw,
    Aflw2000,
}

impl LandmarkDataset {
    pub fn name(self) -> &'static str {
        match self {
            LandmarkDataset::Afw => "AFW",
            LandmarkDataset::Aflw2000 => "AFLW-2000",
        }
    }

    pub fn reduction(self) -> PointReduction {
        let (name, text) = match self {
            LandmarkDataset::Afw => ("afw_68to5", AFW_TABLE),
            LandmarkDataset::Aflw2000 => ("aflw2000_68to5", AFLW2000_TABLE),
        };
        parse_reduction(name, text).expect("bundled reduction table is valid")
    }
}

/// `afw` or `aflw2000` (case-insensitive, dashes ignored).
pub fn parse_landmark_dataset(name: &str) -> Option<LandmarkDataset> {
    match name.to_ascii_lowercase().replace('-', "").as_str() {
        "afw" => Some(LandmarkDataset::Afw),
        "aflw2000" => Some(LandmarkDataset::Aflw2000),
        _ => None,
    }
}

/// Reads a 300-W style `.pts` file.
pub fn parse_pts(text: &str, file: &str) -> Result<Vec<Point>> {
    let body = text
        .split_once('{')
        .and_then(|(_, rest)| rest.split_once('}'))
        .map(|(b, _)| b)
        .ok_or_else(|| Error::Format(format!("{file}: missing {{ }} point block")))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if v.len() != 2 {
                return Err(Error::Format(format!("{file}: bad point line {l:?}")));
            }
            Ok(Point::new(v[0], v[1]))
        })
        .collect()
}

/// The points' bounding box, used as the face box when the benchmark has
/// none.
pub fn points_box(points: &[Point]) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        x1 = x1.min(p.x);
        y1 = y1.min(p.y);
        x2 = x2.max(p.x);
        y2 = y2.max(p.y);
    }
    BBox::new(x1, y1, x2, y2)
}

fn face_from_points(points: &[Point], reduction: &PointReduction) -> Result<Face> {
    Ok(Face::new(points_box(points)).with_landmarks(reduction.apply(points)?))
}

/// Loads a benchmark directory. AFW: `<image>.jpg` with one
/// `<image>_<k>.pts` per face. AFLW-2000: `<image>.jpg` with `<image>.mat`
/// holding `pt3d_68` (3 x 68).
pub fn load_landmark_set(dir: &Path, dataset: LandmarkDataset) -> Result<Vec<Annotation>> {
    let reduction = dataset.reduction();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut by_image: BTreeMap<String, Vec<Face>> = BTreeMap::new();
    for path in entries {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        match (dataset, path.extension().and_then(|e| e.to_str())) {
            (LandmarkDataset::Afw, Some("pts")) => {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let pts = parse_pts(&text, &path.display().to_string())?;
                let image = match stem.rsplit_once('_') {
                    Some((base, k)) if k.chars().all(|c| c.is_ascii_digit()) => base.to_string(),
                    _ => stem.clone(),
                };
                by_image
                    .entry(format!("{image}.jpg"))
                    .or_default()
                    .push(face_from_points(&pts, &reduction)?);
            }
            (LandmarkDataset::Aflw2000, Some("mat")) => {
                let vars = read_mat(&path)?;
                let m = vars
                    .get("pt3d_68")
                    .ok_or_else(|| Error::Format(format!("{}: no pt3d_68", path.display())))?;
                let n = m.dims().get(1).copied().unwrap_or(0);
                let pts = (0..n)
                    .map(|k| Ok(Point::new(m.at(0, k)?, m.at(1, k)?)))
                    .collect::<Result<Vec<_>>>()?;
                by_image
                    .entry(format!("{stem}.jpg"))
                    .or_default()
                    .push(face_from_points(&pts, &reduction)?);
            }
            _ => {}
        }
    }
    Ok(by_image
        .into_iter()
        .map(|(image, faces)| Annotation { image, faces })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tables() {
        let afw = LandmarkDataset::Afw.reduction();
        assert_eq!(afw.sources[0], vec![36, 39]);
        assert_eq!(afw.sources[2], vec![30]);
        let aflw = LandmarkDataset::Aflw2000.reduction();
        assert_eq!(aflw.sources[1], (42..48).collect::<Vec<_>>());
        assert_eq!(aflw.sources[4], vec![54]);
        assert!(parse_reduction("x", "nose 30\n").is_err());
        assert!(parse_reduction("x", "ear 1\n").is_err());
    }

    #[test]
    fn pts_file() {
        let text = "version: 1\nn_points: 3\n{\n1.5 2\n3 4\n5 6.25\n}\n";
        let p = parse_pts(text, "t").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(points_box(&p), BBox::new(1.5, 2.0, 5.0, 6.25));
    }
}
