use facedet::augment::{crop_faces, flip_sample, random_crop};
use facedet::synth::{synth_dataset, synth_image, SynthConfig};
use facedet_core::anchors::{build_anchors, PyramidSpec};
use facedet_core::annotation::Face;
use facedet_core::geometry::{decode_box, decode_landmarks, encode_box, encode_landmarks, iou, BBox, Landmarks};
use facedet_core::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_face(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Face {
    let bw = rng.gen_range(4.0..w / 2.0);
    let bh = rng.gen_range(4.0..h / 2.0);
    let x = rng.gen_range(-bw / 2.0..w - bw / 2.0);
    let y = rng.gen_range(-bh / 2.0..h - bh / 2.0);
    let pts = [0.3, 0.7, 0.5, 0.35, 0.65].map(|u| (x + u * bw, y + rng.gen_range(0.2..0.8) * bh));
    Face::new(BBox::new(x, y, x + bw, y + bh)).with_landmarks(Landmarks::from_coords(pts))
}

/// Interval oracle: the crop window is `[x0, x0 + c) x [y0, y0 + c)`; a box
/// `[a, b]` maps to `[max(a - x0, 0), min(b - x0, c)]` and survives iff its
/// midpoint lies in the half-open window.
#[test]
fn crop_matches_interval_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let faces: Vec<Face> = (0..6).map(|_| random_face(&mut rng, 200.0, 150.0)).collect();
        let c = rng.gen_range(20..=120) as f64;
        let x0 = rng.gen_range(0..=(200 - c as usize)) as f64;
        let y0 = rng.gen_range(0..=(150 - c as usize)) as f64;
        let out = crop_faces(&faces, (1.0, 1.0), x0, y0, c);
        let mut k = 0;
        for f in &faces {
            let (mx, my) = ((f.bbox.x1 + f.bbox.x2) / 2.0, (f.bbox.y1 + f.bbox.y2) / 2.0);
            let inside = mx >= x0 && mx < x0 + c && my >= y0 && my < y0 + c;
            if !inside {
                continue;
            }
            let g = &out[k];
            k += 1;
            let want = [
                (f.bbox.x1 - x0).max(0.0),
                (f.bbox.y1 - y0).max(0.0),
                (f.bbox.x2 - x0).min(c),
                (f.bbox.y2 - y0).min(c),
            ];
            let got = g.bbox.to_array();
            for i in 0..4 {
                assert!((want[i] - got[i]).abs() < 1e-9, "{want:?} vs {got:?}");
                assert!((0.0..=c).contains(&got[i]));
            }
            let (src, dst) = (f.landmarks.unwrap(), g.landmarks.unwrap());
            for i in 0..5 {
                let p = src.get(i).unwrap();
                let (px, py) = (p.x - x0, p.y - y0);
                let keep = (0.0..=c).contains(&px) && (0.0..=c).contains(&py);
                match dst.get(i) {
                    Some(q) => {
                        assert!(keep);
                        assert!((q.x - px).abs() < 1e-9 && (q.y - py).abs() < 1e-9);
                    }
                    None => assert!(!keep),
                }
            }
        }
        assert_eq!(k, out.len());
    }
}

/// Encodes pixel (x, y) into the red and green channels.
fn coordinate_image(w: usize, h: usize) -> Image {
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(x, y, [x as f64, y as f64, 0.0]);
        }
    }
    img
}

#[test]
fn random_crop_window_and_faces_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = coordinate_image(90, 70);
    for _ in 0..100 {
        let faces: Vec<Face> = (0..5).map(|_| random_face(&mut rng, 90.0, 70.0)).collect();
        let s = random_crop(&img, &faces, 48, &mut rng);
        assert_eq!((s.image.width(), s.image.height()), (48, 48));
        let [x0, y0, _] = s.image.pixel(0, 0);
        // the window is a rigid translation of the source
        assert_eq!(s.image.pixel(47, 47), [x0 + 47.0, y0 + 47.0, 0.0]);
        assert_eq!(s.faces, crop_faces(&faces, (1.0, 1.0), x0, y0, 48.0));
        for f in &s.faces {
            for v in f.bbox.to_array() {
                assert!((0.0..=48.0).contains(&v));
            }
        }
    }
}

#[test]
fn small_images_are_upscaled_before_cropping() {
    let img = Image::filled(40, 80, [0.5, 0.5, 0.5]);
    let face = Face::new(BBox::new(10.0, 20.0, 30.0, 40.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_crop(&img, &[face], 80, &mut rng);
    assert_eq!((s.image.width(), s.image.height()), (80, 80));
    // width 40 -> 80: the image is scaled by exactly 2 and fits in x
    if let Some(f) = s.faces.first() {
        assert!((f.bbox.width() - 40.0).abs() < 1e-9);
        assert!((f.bbox.x1 - 20.0).abs() < 1e-9);
    }
}

#[test]
fn flip_is_an_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = coordinate_image(64, 64);
    let faces: Vec<Face> = (0..4).map(|_| random_face(&mut rng, 64.0, 64.0)).collect();
    let s = random_crop(&img, &faces, 64, &mut rng);
    let f = flip_sample(&s);
    assert_eq!(f.image.pixel(0, 5), s.image.pixel(63, 5));
    let back = flip_sample(&f);
    assert_eq!(back.image, s.image);
    for (a, b) in back.faces.iter().zip(&s.faces) {
        for (u, v) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
            assert!((u - v).abs() < 1e-9);
        }
    }
    // the left eye of a flipped face is the mirror of the original right eye
    if let (Some(a), Some(b)) = (f.faces.first(), s.faces.first()) {
        let (la, lb) = (a.landmarks.unwrap(), b.landmarks.unwrap());
        if let (Some(p), Some(q)) = (la.get(0), lb.get(1)) {
            assert!((p.x - (64.0 - q.x)).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
        }
    }
}

#[test]
fn synthetic_faces_are_exact_and_deterministic() {
    let cfg = SynthConfig::default();
    let a = synth_dataset(&cfg, 3).unwrap();
    let b = synth_dataset(&cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(synth_image(&cfg, 4, 0).unwrap(), a[0]);
    for (img, ann) in &a {
        assert!(!ann.faces.is_empty() && ann.faces.len() <= cfg.faces_max);
        for f in &ann.faces {
            let side = f.bbox.width();
            assert_eq!(side, f.bbox.height());
            assert!((cfg.face_min as f64..=cfg.face_max as f64).contains(&side));
            assert!(f.bbox.x1 >= 0.0 && f.bbox.x2 <= img.width() as f64);
            let l = f.landmarks.unwrap();
            assert!(l.all_valid());
            for p in &l.points {
                assert!(p.x > f.bbox.x1 && p.x < f.bbox.x2 && p.y > f.bbox.y1 && p.y < f.bbox.y2);
                // keypoints are rendered dark
                let [r, g, bl] = img.pixel(p.x as usize, p.y as usize);
                assert!(r < 0.1 && g < 0.1 && bl < 0.1);
            }
        }
        for (i, f) in ann.faces.iter().enumerate() {
            for g in &ann.faces[i + 1..] {
                assert_eq!(iou(&f.bbox, &g.bbox), 0.0);
            }
        }
    }
}

/// Truth encoded against its best anchor decodes back without error.
#[test]
fn synthetic_truth_survives_encode_decode() {
    let cfg = SynthConfig::default();
    let pyramid = PyramidSpec::default();
    let anchors = build_anchors(&pyramid, 160, 160).unwrap().boxes;
    for (_, ann) in synth_dataset(&cfg, 8).unwrap().iter().take(10) {
        for f in &ann.faces {
            let best = anchors
                .iter()
                .max_by(|a, b| iou(&f.bbox, a).total_cmp(&iou(&f.bbox, b)))
                .unwrap();
            let b = decode_box(&encode_box(&f.bbox, best).unwrap(), best).unwrap();
            let l = decode_landmarks(&encode_landmarks(&f.landmarks.unwrap(), best).unwrap(), best).unwrap();
            for (u, v) in b.to_array().iter().zip(f.bbox.to_array()) {
                assert!((u - v).abs() < 1e-9);
            }
            for (p, q) in l.points.iter().zip(f.landmarks.unwrap().points) {
                assert!((p.x - q.x).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            }
        }
    }
}
