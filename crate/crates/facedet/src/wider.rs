//! Official WIDER FACE evaluation ground truth: the attribute-bearing text
//! file or `wider_face_val.mat`, plus the easy/medium/hard index lists.

use std::collections::BTreeMap;
use std::path::Path;

use facedet_core::annotation::{Annotation, Difficulty, Face, FaceAttributes};
use facedet_core::geometry::BBox;

use crate::error::{Error, Result};
use crate::mat::{read_mat, MatValue};

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.into(),
        line,
        msg: msg.into(),
    }
}

/// Parses `wider_face_*_bbx_gt.txt`: image path, face count, then one
/// `x y w h blur expression illumination invalid occlusion pose` line per
/// face (images without faces carry a single all-zero line).
pub fn parse_bbx_gt(text: &str, file: &str) -> Result<Vec<Annotation>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some((_, name)) = lines.next() {
        let (ln, count) = lines
            .next()
            .ok_or_else(|| parse_err(file, 0, format!("missing face count after {name}")))?;
        let n: usize = count
            .trim()
            .parse()
            .map_err(|_| parse_err(file, ln + 1, format!("bad face count {count:?}")))?;
        let mut a = Annotation::new(name.trim());
        for _ in 0..n.max(1) {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(file, 0, format!("truncated face list of {name}")))?;
            let v = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|_| parse_err(file, ln + 1, "non-numeric face line"))?;
            if v.len() < 4 {
                return Err(parse_err(file, ln + 1, "face line needs at least x y w h"));
            }
            if n == 0 {
                break;
            }
            let mut face = Face::new(BBox::from_xywh(v[0], v[1], v[2], v[3]));
            if v.len() >= 10 {
                let b = |i: usize| v[i] as u8;
                face.attributes = Some(FaceAttributes {
                    blur: b(4),
                    expression: b(5),
                    illumination: b(6),
                    invalid: v[7] != 0.0,
                    occlusion: b(8),
                    pose: b(9),
                });
            }
            a.faces.push(face);
        }
        out.push(a);
    }
    Ok(out)
}

fn cell<'a>(vars: &'a BTreeMap<String, MatValue>, name: &str, file: &str) -> Result<&'a [MatValue]> {
    vars.get(name)
        .ok_or_else(|| Error::Format(format!("{file}: variable `{name}` missing")))?
        .as_cell()
}

/// Reads `wider_face_val.mat` (`event_list`, `file_list`, `face_bbx_list`).
pub fn read_wider_mat(path: &Path) -> Result<Vec<Annotation>> {
    let vars = read_mat(path)?;
    let f = path.display().to_string();
    let events = cell(&vars, "event_list", &f)?;
    let files = cell(&vars, "file_list", &f)?;
    let boxes = cell(&vars, "face_bbx_list", &f)?;
    let mut out = Vec::new();
    for ((ev, fl), bl) in events.iter().zip(files).zip(boxes) {
        let ev = ev.as_str()?;
        for (name, b) in fl.as_cell()?.iter().zip(bl.as_cell()?) {
            let mut a = Annotation::new(format!("{ev}/{}.jpg", name.as_str()?));
            let rows = b.dims().first().copied().unwrap_or(0);
            if !b.as_numeric()?.is_empty() {
                for r in 0..rows {
                    a.faces.push(Face::new(BBox::from_xywh(
                        b.at(r, 0)?,
                        b.at(r, 1)?,
                        b.at(r, 2)?,
                        b.at(r, 3)?,
                    )));
                }
            }
            out.push(a);
        }
    }
    Ok(out)
}

/// 1-based face indices per image from `wider_{easy,medium,hard}_val.mat`
/// (`gt_list`), in the event/file order of the ground truth.
pub fn read_set_list(path: &Path) -> Result<Vec<Vec<usize>>> {
    let vars = read_mat(path)?;
    let f = path.display().to_string();
    let mut out = Vec::new();
    for ev in cell(&vars, "gt_list", &f)? {
        for img in ev.as_cell()? {
            out.push(img.as_numeric()?.iter().map(|&i| i as usize).collect());
        }
    }
    Ok(out)
}

/// Marks set membership from per-image index lists.
pub fn apply_set_lists(gt: &mut [Annotation], lists: [&[Vec<usize>]; 3]) -> Result<()> {
    for (s, list) in lists.iter().enumerate() {
        if list.len() != gt.len() {
            return Err(Error::Format(format!(
                "{} set list covers {} images, ground truth has {}",
                Difficulty::ALL[s].name(),
                list.len(),
                gt.len()
            )));
        }
    }
    for (i, a) in gt.iter_mut().enumerate() {
        for f in &mut a.faces {
            f.sets = [false; 3];
        }
        for (s, list) in lists.iter().enumerate() {
            for &k in &list[i] {
                let face = a.faces.get_mut(k.wrapping_sub(1)).ok_or_else(|| {
                    Error::Format(format!("{}: face index {k} out of range", a.image))
                })?;
                face.sets[s] = true;
            }
        }
    }
    Ok(())
}

/// Size rule for data without official lists: every face is in `hard`,
/// faces at least `medium_min` px tall also in `medium`, at least `easy_min`
/// also in `easy`.
pub fn assign_sets_by_height(gt: &mut [Annotation], easy_min: f64, medium_min: f64) {
    for f in gt.iter_mut().flat_map(|a| a.faces.iter_mut()) {
        let h = f.bbox.height();
        f.sets = [h >= easy_min, h >= medium_min, true];
    }
}

/// Ground truth with set membership from the official files.
pub fn load_official(
    boxes: &Path,
    sets: Option<[&Path; 3]>,
) -> Result<Vec<Annotation>> {
    let mut gt = if boxes.extension().is_some_and(|e| e == "mat") {
        read_wider_mat(boxes)?
    } else {
        let text = std::fs::read_to_string(boxes).map_err(|e| Error::io(boxes, e))?;
        parse_bbx_gt(&text, &boxes.display().to_string())?
    };
    if let Some(paths) = sets {
        let lists = paths
            .iter()
            .map(|p| read_set_list(p))
            .collect::<Result<Vec<_>>>()?;
        apply_set_lists(&mut gt, [&lists[0], &lists[1], &lists[2]])?;
    }
    Ok(gt)
}
