//! Desk-scale synthetic face data: textured squares with five dark
//! keypoints on noise backgrounds. Annotations are exact by construction.

use std::path::Path;

use facedet_core::annotation::{Annotation, Face};
use facedet_core::geometry::{BBox, Landmarks, Point, NUM_LANDMARKS};
use facedet_core::image::Image;
use facedet_core::rng::indexed_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::save_png;
use crate::labels::serialize_annotations;

/// Smallest face side the generator accepts, in pixels.
pub const MIN_FACE: usize = 10;

/// Keypoint positions as fractions of the face side.
pub const TEMPLATE: [(f64, f64); NUM_LANDMARKS] =
    [(0.3, 0.35), (0.7, 0.35), (0.5, 0.55), (0.35, 0.75), (0.65, 0.75)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub faces_min: usize,
    pub faces_max: usize,
    /// Face side range in pixels (inclusive).
    pub face_min: usize,
    pub face_max: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 50,
            width: 160,
            height: 160,
            faces_min: 1,
            faces_max: 4,
            face_min: 16,
            face_max: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.face_min < MIN_FACE {
            return Err(Error::Config(format!(
                "synth.face_min: faces below {MIN_FACE} px are not generated (got {})",
                self.face_min
            )));
        }
        if self.face_max < self.face_min || self.faces_max < self.faces_min || self.faces_min == 0 {
            return Err(Error::Config("synth: ranges must be non-empty and faces_min >= 1".into()));
        }
        if self.face_max > self.width.min(self.height) {
            return Err(Error::Config("synth.face_max exceeds the image size".into()));
        }
        Ok(())
    }
}

fn template_landmarks(x: f64, y: f64, side: f64) -> Landmarks {
    Landmarks::from_coords(TEMPLATE.map(|(u, v)| (x + u * side, y + v * side)))
}

/// Renders a face of side `s` with its top-left corner at `(x, y)` and
/// returns its exact annotation.
pub fn render_face(img: &mut Image, x: usize, y: usize, s: usize, rng: &mut impl Rng) -> Result<Face> {
    if s < MIN_FACE {
        return Err(Error::Config(format!("face side {s} below {MIN_FACE} px")));
    }
    if x + s > img.width() || y + s > img.height() {
        return Err(Error::Config("face does not fit in the image".into()));
    }
    let base: [u8; 3] = [rng.gen_range(170..=240), rng.gen_range(120..=190), rng.gen_range(90..=150)];
    let stripe = (s / 8).max(1);
    let lm = template_landmarks(x as f64, y as f64, s as f64);
    let r = (s as f64 * 0.07).max(1.2);
    for py in y..y + s {
        for px in x..x + s {
            let c = Point::new(px as f64 + 0.5, py as f64 + 0.5);
            let dark = lm.points.iter().any(|p| {
                let (dx, dy) = (p.x - c.x, p.y - c.y);
                dx * dx + dy * dy <= r * r
            });
            let shade = if ((py - y) / stripe) % 2 == 0 { 0 } else { 25 };
            let rgb = base.map(|b| if dark { 20 } else { b - shade } as f64 / 255.0);
            img.set_pixel(px, py, rgb);
        }
    }
    let b = BBox::new(x as f64, y as f64, (x + s) as f64, (y + s) as f64);
    Ok(Face::new(b).with_landmarks(lm))
}

/// Image `index` of the dataset with seed `seed`.
pub fn synth_image(cfg: &SynthConfig, seed: u64, index: usize) -> Result<(Image, Annotation)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(seed, "synth", index as u64));
    let (w, h) = (cfg.width, cfg.height);
    let noise: Vec<u8> = (0..3 * w * h).map(|_| rng.gen_range(40..=160)).collect();
    let mut img = Image::from_rgb8(w, h, &noise)?;
    let want = rng.gen_range(cfg.faces_min..=cfg.faces_max);
    let mut ann = Annotation::new(format!("images/{index:05}.png"));
    let mut attempts = 0;
    while ann.faces.len() < want && attempts < 200 {
        attempts += 1;
        let s = rng.gen_range(cfg.face_min..=cfg.face_max);
        let x = rng.gen_range(0..=w - s);
        let y = rng.gen_range(0..=h - s);
        // keep a 2 px gap between faces
        let grown = BBox::new(x as f64 - 2.0, y as f64 - 2.0, (x + s) as f64 + 2.0, (y + s) as f64 + 2.0);
        if ann.faces.iter().any(|f| grown.intersection(&f.bbox).is_some()) {
            continue;
        }
        ann.faces.push(render_face(&mut img, x, y, s, &mut rng)?);
    }
    Ok((img, ann))
}

/// The whole dataset in memory.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<(Image, Annotation)>> {
    (0..cfg.images).map(|i| synth_image(cfg, seed, i)).collect()
}

/// Writes `images/NNNNN.png` and `label.txt` under `dir`.
pub fn write_synth_dataset(dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<Vec<Annotation>> {
    let mut anns = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let (img, ann) = synth_image(cfg, seed, i)?;
        save_png(&dir.join(&ann.image), &img)?;
        anns.push(ann);
    }
    let label = dir.join("label.txt");
    std::fs::write(&label, serialize_annotations(&anns)).map_err(|e| Error::io(&label, e))?;
    Ok(anns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_exact_and_deterministic() {
        let cfg = SynthConfig {
            images: 5,
            ..SynthConfig::default()
        };
        let a = synth_dataset(&cfg, 3).unwrap();
        let b = synth_dataset(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(&cfg, 4).unwrap());
        for (img, ann) in &a {
            assert!((1..=4).contains(&ann.faces.len()));
            for f in &ann.faces {
                let l = f.landmarks.unwrap();
                assert!(l.all_valid());
                for p in &l.points {
                    assert!(p.x > f.bbox.x1 && p.x < f.bbox.x2 && p.y > f.bbox.y1 && p.y < f.bbox.y2);
                }
                // keypoint centres are dark
                let p = l.points[2];
                assert!(img.get(0, p.x as usize, p.y as usize) < 0.1);
            }
        }
    }

    #[test]
    fn rendered_box_is_exact() {
        let mut img = Image::new(200, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = render_face(&mut img, 100, 100, 64, &mut rng).unwrap();
        assert_eq!(f.bbox, BBox::new(100.0, 100.0, 164.0, 164.0));
        assert_eq!(img.pixel(99, 120), [0.0; 3]);
        assert_ne!(img.pixel(100, 100), [0.0; 3]);
        assert_ne!(img.pixel(163, 163), [0.0; 3]);
        assert_eq!(img.pixel(164, 163), [0.0; 3]);
    }

    #[test]
    fn tiny_faces_rejected() {
        let cfg = SynthConfig {
            face_min: 8,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_image(&cfg, 0, 0), Err(Error::Config(_))));
    }
}
