//! Synthetic labeled feature blobs and parcel-grid cities.
//!
//! Each class has one Gaussian mean per stream. With `complementary` set,
//! the object stream cannot separate classes `{0,1}, {2,3}, ...` and the
//! scene stream cannot separate `{1,2}, {3,4}, ..., {n-1,0}`, so only the
//! fused prediction can resolve every class.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Domain, ImageRecord};
use crate::geodata::{GeoPoint, Parcel, METERS_PER_DEGREE};

pub const STREAMS: [&str; 2] = ["object", "scene"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Training records per class.
    pub per_class: usize,
    pub val_per_class: usize,
    /// Expected norm of each class mean; per-coordinate noise is unit variance.
    pub separation: f64,
    /// Probability that a training label is replaced by a different class.
    pub noise_rate: f64,
    pub complementary: bool,
    /// Constant added to every domain-B feature.
    pub domain_shift: f64,
    /// Fine taxonomy index for each synthetic class; empty means evenly spaced.
    pub class_map: Vec<usize>,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 10,
            dim: 16,
            per_class: 100,
            val_per_class: 50,
            separation: 4.0,
            noise_rate: 0.0,
            complementary: false,
            domain_shift: 0.0,
            class_map: Vec::new(),
        }
    }
}

impl BlobSpec {
    /// Fine class index of each synthetic class.
    pub fn fine_classes(&self) -> Vec<usize> {
        if self.class_map.len() == self.classes {
            return self.class_map.clone();
        }
        (0..self.classes).map(|c| c * 45 / self.classes.max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobData {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
}

/// Class means per stream, shared by every split drawn from the same world.
#[derive(Debug, Clone)]
pub struct World {
    spec: BlobSpec,
    fine: Vec<usize>,
    /// stream -> class -> mean
    means: BTreeMap<String, Vec<Vec<f64>>>,
}

impl World {
    pub fn new(spec: &BlobSpec, rng: &mut ChaCha8Rng) -> Self {
        let n = spec.classes;
        let scale = spec.separation / (spec.dim as f64).sqrt();
        let mut means = BTreeMap::new();
        for (s, stream) in STREAMS.iter().enumerate() {
            let centres: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..spec.dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let per_class = (0..n)
                .map(|c| {
                    let group = match (spec.complementary, s) {
                        (false, _) => c,
                        (true, 0) => c / 2 * 2,
                        (true, _) => ((c + 1) % n) / 2 * 2 % n,
                    };
                    centres[group].clone()
                })
                .collect();
            means.insert(stream.to_string(), per_class);
        }
        World { spec: spec.clone(), fine: spec.fine_classes(), means }
    }

    pub fn spec(&self) -> &BlobSpec {
        &self.spec
    }

    /// Fine taxonomy index of synthetic class `c`.
    pub fn fine_class(&self, c: usize) -> usize {
        self.fine[c]
    }

    pub fn features(&self, class: usize, domain: Domain, rng: &mut ChaCha8Rng) -> BTreeMap<String, Vec<f64>> {
        let shift = if domain == Domain::B { self.spec.domain_shift } else { 0.0 };
        self.means
            .iter()
            .map(|(stream, m)| {
                let v = m[class].iter().map(|mu| mu + shift + rng.sample::<f64, _>(StandardNormal)).collect();
                (stream.clone(), v)
            })
            .collect()
    }

    fn labeled_split(&self, prefix: &str, per_class: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<ImageRecord> {
        let n = self.spec.classes;
        (0..n * per_class)
            .map(|i| {
                let class = i % n;
                let domain = if (i / n).is_multiple_of(2) { Domain::A } else { Domain::B };
                let features = self.features(class, domain, rng);
                let mut label = class;
                if n > 1 && rng.random::<f64>() < noise {
                    let other = rng.random_range(0..n - 1);
                    label = if other >= class { other + 1 } else { other };
                }
                ImageRecord { id: format!("{prefix}-{i:06}"), geo: None, domain, label: Some(self.fine[label]), features }
            })
            .collect()
    }
}

/// Training split (with label noise) and clean validation split.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> BlobData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(spec, &mut rng);
    blobs_from_world(&world, &mut rng)
}

fn blobs_from_world(world: &World, rng: &mut ChaCha8Rng) -> BlobData {
    let spec = world.spec();
    let train = world.labeled_split("train", spec.per_class, spec.noise_rate, rng);
    let val = world.labeled_split("val", spec.val_per_class, 0.0, rng);
    BlobData { train, val }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitySpec {
    pub rows: usize,
    pub cols: usize,
    /// Side length of each square parcel.
    pub parcel_m: f64,
    /// Street width between parcels.
    pub street_m: f64,
    pub origin_lon: f64,
    pub origin_lat: f64,
    /// Fraction of parcels that publish ground truth.
    pub truth_fraction: f64,
    /// Each parcel hosts 1..=max_uses classes.
    pub max_uses: usize,
    pub images_per_parcel: usize,
    pub geotag_sigma_m: f64,
}

impl Default for CitySpec {
    fn default() -> Self {
        CitySpec {
            rows: 4,
            cols: 5,
            parcel_m: 60.0,
            street_m: 20.0,
            origin_lon: -122.4194,
            origin_lat: 37.7749,
            truth_fraction: 0.6,
            max_uses: 2,
            images_per_parcel: 12,
            geotag_sigma_m: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct City {
    pub parcels: Vec<Parcel>,
    /// Geotagged, unlabeled mapping images.
    pub images: Vec<ImageRecord>,
    /// Class (fine index) each mapping image was drawn from.
    pub image_classes: BTreeMap<String, usize>,
}

fn offset(spec: &CitySpec, east_m: f64, north_m: f64) -> GeoPoint {
    let cos = spec.origin_lat.to_radians().cos();
    GeoPoint {
        lon: spec.origin_lon + east_m / (METERS_PER_DEGREE * cos),
        lat: spec.origin_lat + north_m / METERS_PER_DEGREE,
    }
}

pub fn generate_city(world: &World, spec: &CitySpec, rng: &mut ChaCha8Rng) -> City {
    let n = world.spec().classes;
    let jitter = Normal::new(0.0, spec.geotag_sigma_m.max(0.0)).expect("finite sigma");
    let pitch = spec.parcel_m + spec.street_m;
    let mut parcels = Vec::new();
    let mut images = Vec::new();
    let mut image_classes = BTreeMap::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let (x0, y0) = (c as f64 * pitch, r as f64 * pitch);
            let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)];
            let ring = corners.iter().map(|&(a, b)| offset(spec, x0 + a * spec.parcel_m, y0 + b * spec.parcel_m)).collect();

            let uses = rng.random_range(1..=spec.max_uses.clamp(1, n));
            let mut classes = BTreeSet::new();
            while classes.len() < uses {
                classes.insert(rng.random_range(0..n));
            }
            let classes: Vec<usize> = classes.into_iter().collect();
            let truth = if rng.random::<f64>() < spec.truth_fraction {
                classes.iter().map(|&k| world.fine_class(k)).collect()
            } else {
                BTreeSet::new()
            };
            let id = format!("R{r}C{c}");
            for k in 0..spec.images_per_parcel {
                let class = classes[rng.random_range(0..classes.len())];
                let east = x0 + rng.random::<f64>() * spec.parcel_m + jitter.sample(rng);
                let north = y0 + rng.random::<f64>() * spec.parcel_m + jitter.sample(rng);
                let image_id = format!("img-{id}-{k:03}");
                images.push(ImageRecord {
                    id: image_id.clone(),
                    geo: Some(offset(spec, east, north)),
                    domain: Domain::B,
                    label: None,
                    features: world.features(class, Domain::B, rng),
                });
                image_classes.insert(image_id, world.fine_class(class));
            }
            parcels.push(Parcel::new(id, vec![ring], truth).expect("grid parcels are valid squares"));
        }
    }
    City { parcels, images, image_classes }
}

/// Everything the pipeline needs, drawn from a single seeded world.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub blobs: BlobData,
    pub city: City,
}

pub fn generate(blob: &BlobSpec, city: &CitySpec, seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(blob, &mut rng);
    let blobs = blobs_from_world(&world, &mut rng);
    let city = generate_city(&world, city, &mut rng);
    Synthetic { blobs, city }
}
