//! Detection dumps in the WIDER FACE submission layout: one text file per
//! image holding the image name, the detection count and one
//! `x y w h score` line per detection. Lines may carry ten more values, the
//! five landmarks as `x y` pairs.

use std::path::{Path, PathBuf};

use facedet_core::geometry::{BBox, Landmarks, Point, NUM_LANDMARKS};
use facedet_core::postprocess::{Detection, TtaSource};

use crate::error::{Error, Result};

pub fn format_dump(image: &str, dets: &[Detection]) -> String {
    let mut s = format!("{image}\n{}\n", dets.len());
    for d in dets {
        let b = d.bbox;
        s.push_str(&format!("{} {} {} {} {}", b.x1, b.y1, b.width(), b.height(), d.score));
        if d.landmarks.all_valid() {
            for p in &d.landmarks.points {
                s.push_str(&format!(" {} {}", p.x, p.y));
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_dump(text: &str, file: &str) -> Result<(String, Vec<Detection>)> {
    let err = |line: usize, msg: String| Error::Parse {
        file: file.into(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let name = lines.next().ok_or_else(|| err(1, "empty dump".into()))?.trim().to_string();
    let count: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| err(2, "missing detection count".into()))?;
    let mut dets = Vec::with_capacity(count);
    for (i, l) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let v = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| err(i + 3, "non-numeric detection".into()))?;
        if v.len() != 5 && v.len() != 5 + 2 * NUM_LANDMARKS {
            return Err(err(i + 3, format!("expected 5 or 15 values, found {}", v.len())));
        }
        let mut landmarks = Landmarks::missing();
        if v.len() > 5 {
            for k in 0..NUM_LANDMARKS {
                landmarks.set(k, Some(Point::new(v[5 + 2 * k], v[6 + 2 * k])));
            }
        }
        dets.push(Detection {
            bbox: BBox::from_xywh(v[0], v[1], v[2], v[3]),
            landmarks,
            score: v[4],
            source: TtaSource::default(),
        });
    }
    if dets.len() != count {
        return Err(err(2, format!("count says {count}, found {} detections", dets.len())));
    }
    Ok((name, dets))
}

/// Dump path of `image` (a dataset-relative path) under `dir`.
pub fn dump_path(dir: &Path, image: &str) -> PathBuf {
    dir.join(Path::new(image).with_extension("txt"))
}

pub fn write_dump(dir: &Path, image: &str, dets: &[Detection]) -> Result<()> {
    let path = dump_path(dir, image);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, format_dump(image, dets)).map_err(|e| Error::io(&path, e))
}

/// Detections for each listed image; a missing dump means no detections.
pub fn read_dumps(dir: &Path, images: &[String]) -> Result<Vec<Vec<Detection>>> {
    images
        .iter()
        .map(|img| {
            let path = dump_path(dir, img);
            match std::fs::read_to_string(&path) {
                Ok(text) => Ok(parse_dump(&text, &path.display().to_string())?.1),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
                Err(e) => Err(Error::io(&path, e)),
            }
        })
        .collect()
}
