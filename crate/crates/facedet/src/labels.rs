//! Landmark-augmented WIDER FACE training labels.
//!
//! ```text
//! # 0--Parade/0_Parade_marchingband_1_849.jpg
//! 449 330 122 149 488.906 373.643 0.0 542.089 376.442 0.0 ... 0.82
//! ```
//!
//! A line `# <path>` opens an image block; every following line is one face:
//! `x y w h`, optionally followed by five `px py vis` triples and an optional
//! trailing confidence. A point with `px == -1` is missing; `vis` is kept but
//! not interpreted.

use facedet_core::annotation::{Annotation, Face};
use facedet_core::geometry::{BBox, Landmarks, Point, NUM_LANDMARKS};

use crate::error::{Error, Result};

/// One face line. `source` holds the text it was parsed from so untouched
/// lines serialize verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFace {
    pub values: Vec<f64>,
    source: Option<String>,
}

impl LabelFace {
    pub fn from_face(face: &Face) -> Self {
        let b = face.bbox;
        let mut values = vec![b.x1, b.y1, b.width(), b.height()];
        if let Some(l) = &face.landmarks {
            for i in 0..NUM_LANDMARKS {
                match l.get(i) {
                    Some(p) => values.extend([p.x, p.y, 0.0]),
                    None => values.extend([-1.0, -1.0, -1.0]),
                }
            }
        }
        Self {
            values,
            source: None,
        }
    }

    pub fn to_face(&self) -> Face {
        let v = &self.values;
        let mut face = Face::new(BBox::from_xywh(v[0], v[1], v[2], v[3]));
        if v.len() >= 4 + 3 * NUM_LANDMARKS {
            let mut l = Landmarks::missing();
            for i in 0..NUM_LANDMARKS {
                let (px, py) = (v[4 + 3 * i], v[5 + 3 * i]);
                if px != -1.0 {
                    l.set(i, Some(Point::new(px, py)));
                }
            }
            face.landmarks = Some(l);
        }
        face
    }

    fn render(&self) -> String {
        match &self.source {
            Some(s) => s.clone(),
            None => self
                .values
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelBlock {
    pub image: String,
    pub faces: Vec<LabelFace>,
}

/// A parsed label file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelFile {
    pub blocks: Vec<LabelBlock>,
}

impl LabelFile {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut blocks: Vec<LabelBlock> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                file: file.into(),
                line: i + 1,
                msg,
            };
            if let Some(path) = line.strip_prefix('#') {
                let path = path.trim();
                if path.is_empty() {
                    return Err(err("image header without a path".into()));
                }
                blocks.push(LabelBlock {
                    image: path.into(),
                    faces: Vec::new(),
                });
                continue;
            }
            let block = blocks
                .last_mut()
                .ok_or_else(|| err("face line before the first `# <image>` header".into()))?;
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            let full = 4 + 3 * NUM_LANDMARKS;
            if !matches!(values.len(), 4 | 5) && values.len() != full && values.len() != full + 1 {
                return Err(err(format!(
                    "expected 4, {full} or {} values, found {}",
                    full + 1,
                    values.len()
                )));
            }
            if values[2] < 0.0 || values[3] < 0.0 {
                return Err(err("negative box width or height".into()));
            }
            let canonical = line.split_whitespace().collect::<Vec<_>>().join(" ");
            block.faces.push(LabelFace {
                values,
                source: Some(canonical),
            });
        }
        Ok(Self { blocks })
    }

    pub fn from_annotations(annotations: &[Annotation]) -> Self {
        Self {
            blocks: annotations
                .iter()
                .map(|a| LabelBlock {
                    image: a.image.clone(),
                    faces: a.faces.iter().map(LabelFace::from_face).collect(),
                })
                .collect(),
        }
    }

    pub fn to_annotations(&self) -> Vec<Annotation> {
        self.blocks
            .iter()
            .map(|b| Annotation {
                image: b.image.clone(),
                faces: b.faces.iter().map(LabelFace::to_face).collect(),
            })
            .collect()
    }

    /// Canonical text: `# <path>` headers, single-space separated values,
    /// one trailing newline per line.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            s.push_str("# ");
            s.push_str(&b.image);
            s.push('\n');
            for f in &b.faces {
                s.push_str(&f.render());
                s.push('\n');
            }
        }
        s
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    Ok(LabelFile::parse(text, "<labels>")?.to_annotations())
}

pub fn serialize_annotations(annotations: &[Annotation]) -> String {
    LabelFile::from_annotations(annotations).serialize()
}

pub fn read_label_file(path: &std::path::Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(LabelFile::parse(&text, &path.display().to_string())?.to_annotations())
}
