//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the crate's geometry, NMS, matching or AP code;
//! only plain data types are shared.

#![allow(dead_code)]

pub mod published;

use std::collections::BTreeMap;

use mspad::dataset::{Annotation, ClassRegistry, DatasetIndex, ImageRecord};
use mspad::evaluation::Interpolation;
use mspad::geometry::{BBox, ClassId, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if inter == 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n²) greedy NMS over a precomputed IoU matrix; returns kept input indices
/// in rank order.
pub fn ref_nms(boxes: &[ScoredBox], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut rank: Vec<usize> = (0..n).collect();
    // insertion sort: score desc, then lexicographic coordinates, class, index
    for i in 1..n {
        let mut j = i;
        while j > 0 && ranks_before(&boxes[rank[j]], &boxes[rank[j - 1]]) {
            rank.swap(j, j - 1);
            j -= 1;
        }
    }
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| ref_iou(boxes[i].bbox.to_array(), boxes[j].bbox.to_array())).collect())
        .collect();
    let mut keep = vec![false; n];
    for (pos, &i) in rank.iter().enumerate() {
        let a = boxes[i].bbox.to_array();
        if (a[2] - a[0]) * (a[3] - a[1]) <= 0.0 {
            continue;
        }
        keep[i] = rank[..pos]
            .iter()
            .all(|&j| !(keep[j] && boxes[j].class_id == boxes[i].class_id && m[j][i] >= thr));
    }
    rank.into_iter().filter(|&i| keep[i]).collect()
}

fn ranks_before(a: &ScoredBox, b: &ScoredBox) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    let (x, y) = (a.bbox.to_array(), b.bbox.to_array());
    for k in 0..4 {
        if x[k] != y[k] {
            return x[k] < y[k];
        }
    }
    a.class_id < b.class_id
}

/// Brute-force evaluator: per-class APs in registry order and their mean.
pub fn ref_evaluate(
    index: &DatasetIndex,
    dets: &BTreeMap<String, Vec<ScoredBox>>,
    iou_thr: f64,
    interp: Interpolation,
) -> (Vec<f64>, f64) {
    let mut aps = Vec::new();
    for c in 0..index.registry.len() {
        let class = ClassId(c);
        let mut pooled: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for rec in index.images() {
            let gts: Vec<[f64; 4]> = rec
                .annotations
                .iter()
                .filter(|a| a.class_id == class)
                .map(|a| a.bbox.to_array())
                .collect();
            n_gt += gts.len();
            let ds: Vec<&ScoredBox> = dets
                .get(&rec.image_id)
                .map(|v| v.iter().filter(|d| d.class_id == class).collect())
                .unwrap_or_default();
            let mut flags = vec![false; ds.len()];
            let mut used = vec![false; gts.len()];
            // visit detections by score, earliest first among equals
            let mut visited = vec![false; ds.len()];
            for _ in 0..ds.len() {
                let mut pick = usize::MAX;
                for i in 0..ds.len() {
                    if !visited[i] && (pick == usize::MAX || ds[i].score > ds[pick].score) {
                        pick = i;
                    }
                }
                visited[pick] = true;
                let mut best = None;
                let mut best_iou = -1.0;
                for (g, gb) in gts.iter().enumerate() {
                    let v = ref_iou(ds[pick].bbox.to_array(), *gb);
                    if !used[g] && v > best_iou {
                        best_iou = v;
                        best = Some(g);
                    }
                }
                if let Some(g) = best {
                    if best_iou >= iou_thr && best_iou > 0.0 {
                        used[g] = true;
                        flags[pick] = true;
                    }
                }
            }
            pooled.extend(ds.iter().zip(flags).map(|(d, f)| (d.score, f)));
        }
        // stable selection of the global ranking
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        order.sort_by(|&a, &b| pooled[b].0.partial_cmp(&pooled[a].0).unwrap());
        let ranked: Vec<bool> = order.iter().map(|&i| pooled[i].1).collect();

        let ap = if n_gt == 0 {
            if ranked.is_empty() { 1.0 } else { 0.0 }
        } else {
            let mut prec = Vec::new();
            let mut rec = Vec::new();
            let (mut tp, mut fp) = (0usize, 0usize);
            for &hit in &ranked {
                if hit { tp += 1 } else { fp += 1 }
                prec.push(tp as f64 / (tp + fp) as f64);
                rec.push(tp as f64 / n_gt as f64);
            }
            let max_from = |k: usize| prec[k..].iter().cloned().fold(0.0f64, f64::max);
            match interp {
                Interpolation::AllPoints => {
                    let mut s = 0.0;
                    for k in 0..ranked.len() {
                        if ranked[k] {
                            s += max_from(k);
                        }
                    }
                    s / n_gt as f64
                }
                Interpolation::ElevenPoint => {
                    let mut s = 0.0;
                    for t in 0..=10 {
                        let r = t as f64 / 10.0;
                        s += (0..ranked.len()).find(|&k| rec[k] >= r).map_or(0.0, max_from);
                    }
                    s / 11.0
                }
            }
        };
        aps.push(ap);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    (aps, map)
}

/// Small random evaluation instance on an integer grid with coarse scores so
/// that ties and exact-threshold IoUs actually occur.
pub fn random_instance(seed: u64) -> (DatasetIndex, BTreeMap<String, Vec<ScoredBox>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = ClassRegistry::new(["a", "b", "c"]).unwrap();
    let n_images = rng.random_range(1..=5);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..40) as f64;
        let y = rng.random_range(0..40) as f64;
        let w = rng.random_range(0..12) as f64;
        let h = rng.random_range(1..12) as f64;
        BBox::new(x, y, x + w, y + h).unwrap()
    };
    let mut images = Vec::new();
    let mut dets = BTreeMap::new();
    for i in 0..n_images {
        let mut anns = Vec::new();
        let mut ds = Vec::new();
        for c in 0..3 {
            let n_gt = rng.random_range(0..=10);
            let gts: Vec<BBox> = (0..n_gt).map(|_| rand_box(&mut rng)).collect();
            for g in &gts {
                anns.push(Annotation { class_id: ClassId(c), bbox: *g });
            }
            for _ in 0..rng.random_range(0..=15) {
                // half near a ground-truth box, half anywhere
                let bbox = match gts.len() {
                    n if n > 0 && rng.random_bool(0.5) => {
                        let g = gts[rng.random_range(0..n)];
                        let dx = rng.random_range(-3..=3) as f64;
                        let dy = rng.random_range(-3..=3) as f64;
                        BBox::from_corners(
                            (g.x_min() + dx, g.y_min() + dy),
                            (g.x_max() + dx + rng.random_range(-1..=1) as f64, g.y_max() + dy),
                        )
                        .unwrap()
                    }
                    _ => rand_box(&mut rng),
                };
                let score = rng.random_range(1..=10) as f64 / 10.0;
                ds.push(ScoredBox::new(bbox, ClassId(c), score).unwrap());
            }
        }
        // interleave classes so per-class input order is not trivially sorted
        let mut shuffled = ds.clone();
        for k in (1..shuffled.len()).rev() {
            shuffled.swap(k, rng.random_range(0..=k));
        }
        let id = format!("img{i}");
        images.push(ImageRecord {
            image_id: id.clone(),
            width: 64,
            height: 64,
            annotations: anns,
            source_path: String::new(),
        });
        if !shuffled.is_empty() || rng.random_bool(0.5) {
            dets.insert(id, shuffled);
        }
    }
    (DatasetIndex::new(registry, images).unwrap(), dets)
}

/// Random scored boxes on an integer grid.
pub fn random_boxes(seed: u64, n: usize) -> Vec<ScoredBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..60) as f64;
            let y = rng.random_range(0..60) as f64;
            let w = rng.random_range(0..25) as f64;
            let h = rng.random_range(0..25) as f64;
            let score = rng.random_range(0..=20) as f64 / 20.0;
            ScoredBox::new(BBox::new(x, y, x + w, y + h).unwrap(), ClassId(rng.random_range(0..3)), score).unwrap()
        })
        .collect()
}
