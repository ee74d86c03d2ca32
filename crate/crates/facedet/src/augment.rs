//! Training-time crop augmentation.

use facedet_core::annotation::Face;
use facedet_core::geometry::{BBox, Landmarks, Point};
use facedet_core::image::Image;
use rand::Rng;

/// A training sample of exactly `crop x crop` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub faces: Vec<Face>,
}

/// Maps `faces` through the window `[x0, x0 + crop) x [y0, y0 + crop)` of an
/// image already scaled by `(sx, sy)`: a face survives iff its (scaled) box
/// centre lies inside the window; its box is clipped to the window and
/// landmarks falling outside it become missing.
pub fn crop_faces(faces: &[Face], (sx, sy): (f64, f64), x0: f64, y0: f64, crop: f64) -> Vec<Face> {
    let map = |p: Point| Point::new(p.x * sx - x0, p.y * sy - y0);
    faces
        .iter()
        .filter_map(|f| {
            let (a, z) = (map(Point::new(f.bbox.x1, f.bbox.y1)), map(Point::new(f.bbox.x2, f.bbox.y2)));
            let b = BBox::new(a.x, a.y, z.x, z.y);
            let c = b.center();
            if !(c.x >= 0.0 && c.x < crop && c.y >= 0.0 && c.y < crop) {
                return None;
            }
            let mut out = f.clone();
            out.bbox = b.clip(crop, crop);
            out.landmarks = f.landmarks.map(|l| {
                let mut kept = Landmarks::missing();
                for i in 0..l.points.len() {
                    let p = l.get(i).map(map);
                    kept.set(i, p.filter(|p| (0.0..=crop).contains(&p.x) && (0.0..=crop).contains(&p.y)));
                }
                kept
            });
            Some(out)
        })
        .collect()
}

/// Random `crop x crop` window. Images whose short side is below `crop` are
/// first upscaled so the short side equals `crop`.
pub fn random_crop(image: &Image, faces: &[Face], crop: usize, rng: &mut impl Rng) -> Sample {
    let short = image.width().min(image.height()).max(1);
    let (scale, scaled) = if short < crop {
        let s = crop as f64 / short as f64;
        let w = ((image.width() as f64 * s).round() as usize).max(crop);
        let h = ((image.height() as f64 * s).round() as usize).max(crop);
        let exact = (w as f64 / image.width() as f64, h as f64 / image.height() as f64);
        (exact, image.resize(w, h))
    } else {
        ((1.0, 1.0), image.clone())
    };
    let x0 = rng.gen_range(0..=scaled.width() - crop);
    let y0 = rng.gen_range(0..=scaled.height() - crop);
    let fill = scaled.mean_rgb();
    Sample {
        image: scaled.crop(x0 as isize, y0 as isize, crop, crop, fill),
        faces: crop_faces(faces, scale, x0 as f64, y0 as f64, crop as f64),
    }
}

/// Horizontal mirror of a sample (landmark identities swapped).
pub fn flip_sample(s: &Sample) -> Sample {
    let w = s.image.width() as f64;
    Sample {
        image: s.image.flip_horizontal(),
        faces: s
            .faces
            .iter()
            .map(|f| Face {
                bbox: f.bbox.flip_horizontal(w),
                landmarks: f.landmarks.map(|l| l.flip_horizontal(w)),
                ..f.clone()
            })
            .collect(),
    }
}
