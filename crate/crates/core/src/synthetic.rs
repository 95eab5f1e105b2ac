//! Seeded synthetic datasets shaped like power-line inspection imagery.
//!
//! Frames are 5472×3648 or 5472×3078. Each image gets one large tower, a few
//! insulators and spacers, an occasional plate and a dozen small dampers.
//! Boxes of the same class never overlap, so a perfect detector survives NMS
//! untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Annotation, ClassRegistry, DatasetIndex, ImageRecord};
use crate::geometry::{BBox, ClassId};

/// `(label, count range, side range in px)`.
type Profile = (&'static str, (usize, usize), (f64, f64));

const PROFILE: [Profile; 5] = [
    ("tower", (1, 2), (900.0, 2400.0)),
    ("insulator", (1, 4), (180.0, 420.0)),
    ("spacer", (1, 3), (110.0, 230.0)),
    ("plate", (0, 2), (70.0, 130.0)),
    ("damper", (8, 15), (30.0, 80.0)),
];

pub fn plad_like(n_images: usize, seed: u64) -> DatasetIndex {
    let registry = ClassRegistry::plad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n_images).map(|i| image(&mut rng, &registry, i)).collect();
    DatasetIndex::new(registry, images).expect("ids are unique")
}

fn image(rng: &mut ChaCha8Rng, registry: &ClassRegistry, i: usize) -> ImageRecord {
    let (width, height) = if rng.random_bool(0.5) { (5472, 3648) } else { (5472, 3078) };
    let mut annotations: Vec<Annotation> = Vec::new();
    for (label, (lo, hi), (smin, smax)) in PROFILE {
        let class_id: ClassId = registry.lookup(label).expect("default registry");
        let count = rng.random_range(lo..=hi);
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count && attempts < 200 {
            attempts += 1;
            let w = rng.random_range(smin..smax).round();
            let h = (w * rng.random_range(0.6..1.6)).round().min(f64::from(height) - 1.0);
            let x = rng.random_range(0.0..f64::from(width) - w).round();
            let y = rng.random_range(0.0..f64::from(height) - h).round();
            let bbox = BBox::new(x, y, x + w, y + h).expect("positive size");
            let clash = annotations
                .iter()
                .any(|a| a.class_id == class_id && a.bbox.intersection_area(&bbox) > 0.0);
            if !clash {
                annotations.push(Annotation { class_id, bbox });
                placed += 1;
            }
        }
    }
    ImageRecord {
        image_id: format!("synth_{i:04}"),
        width,
        height,
        annotations,
        source_path: format!("synth_{i:04}.xml"),
    }
}
