//! Published per-split AP values and their averages, used as aggregation
//! fixtures.

pub const LABELS: [&str; 5] = ["tower", "insulator", "spacer", "plate", "damper"];

/// Per split: five class APs in `LABELS` order, then the printed mAP.
pub const ORIGINAL: [[f64; 6]; 5] = [
    [0.885, 0.825, 0.917, 0.932, 0.189, 0.750],
    [0.883, 0.924, 0.789, 0.830, 0.201, 0.725],
    [0.875, 0.931, 0.914, 0.941, 0.189, 0.770],
    [0.920, 0.839, 0.863, 0.984, 0.264, 0.774],
    [0.945, 0.874, 0.853, 0.995, 0.227, 0.779],
];

pub const MSPAD: [[f64; 6]; 5] = [
    [0.905, 0.938, 0.810, 0.994, 0.829, 0.895],
    [0.901, 0.866, 0.850, 1.000, 0.882, 0.900],
    [0.874, 0.893, 0.910, 0.990, 0.870, 0.907],
    [0.883, 0.884, 0.805, 0.997, 0.824, 0.879],
    [0.938, 0.889, 0.905, 0.876, 0.787, 0.879],
];

/// Averaged class APs then mAP, as printed.
pub const AVERAGE_MSPAD: [f64; 6] = [0.900, 0.894, 0.856, 0.971, 0.838, 0.892];
pub const AVERAGE_ORIGINAL: [f64; 6] = [0.902, 0.879, 0.867, 0.936, 0.214, 0.755];

/// The mean of the five printed per-split mAPs (0.7596). The printed
/// average, 0.755, disagrees with its own table.
pub const ORIGINAL_MAP_RECOMPUTED: f64 = 0.760;

/// Dataset statistics: label, instances, instances per image, mean area,
/// area standard deviation.
pub const DATASET: [(&str, usize, f64, f64, f64); 5] = [
    ("tower", 253, 1.9, 2.61e6, 3.12e6),
    ("insulator", 312, 2.3, 8.84e4, 8.55e4),
    ("spacer", 253, 1.9, 2.82e4, 2.41e4),
    ("plate", 86, 0.6, 9.42e3, 1.11e4),
    ("damper", 1505, 11.3, 2.89e3, 5.78e3),
];
pub const DATASET_IMAGES: usize = 133;
pub const DATASET_INSTANCES: usize = 2409;
pub const DATASET_DENSITY: f64 = 18.1;
