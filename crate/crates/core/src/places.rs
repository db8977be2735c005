//! Place-centric image database and P×K batch sampling.
//!
//! A place is a physical location photographed several times (different
//! dates, bearings, conditions). Images of one place share an integer
//! label; places are geographically disjoint, one per grid cell of
//! `cell_size_deg` degrees.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::aggregators::FeatureMap;
use crate::evaluator::format::{load_tensor, save_tensor, Tensor};
use crate::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Default grid spacing (about 100 to 130 m at mid latitudes).
pub const DEFAULT_CELL_DEG: f64 = 0.001;

/// Minimum number of images (distinct visits) per place.
pub const MIN_IMAGES_PER_PLACE: usize = 4;

pub const MANIFEST_HEADER: [&str; 7] = ["place_id", "image_ref", "lat", "lon", "bearing", "year", "month"];

/// One geotagged image and, optionally, its backbone feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_ref: String,
    pub lat: f64,
    pub lon: f64,
    /// Degrees clockwise from north, in `[0, 360)`.
    pub bearing: Option<f64>,
    pub year: i32,
    pub month: u8,
    pub payload: Option<FeatureMap>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidRecord(format!(
                "{}: coordinates ({}, {}) out of range",
                self.image_ref, self.lat, self.lon
            )));
        }
        if let Some(b) = self.bearing {
            if !(0.0..360.0).contains(&b) {
                return Err(Error::InvalidRecord(format!(
                    "{}: bearing {b} outside [0, 360)",
                    self.image_ref
                )));
            }
        }
        if !(1..=12).contains(&self.month) {
            return Err(Error::InvalidRecord(format!(
                "{}: month {} outside 1..=12",
                self.image_ref, self.month
            )));
        }
        Ok(())
    }

    pub fn coords(&self) -> (f64, f64) {
        (self.lat, self.lon)
    }

    pub fn date(&self) -> (i32, u8) {
        (self.year, self.month)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Place {
    pub place_id: u64,
    pub images: Vec<ImageRecord>,
}

impl Place {
    /// Mean coordinate of the place's images.
    pub fn centroid(&self) -> (f64, f64) {
        let n = self.images.len().max(1) as f64;
        let lat = self.images.iter().map(|r| r.lat).sum::<f64>() / n;
        let lon = self.images.iter().map(|r| r.lon).sum::<f64>() / n;
        (lat, lon)
    }
}

/// Immutable collection of places.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacesDB {
    places: Vec<Place>,
    cell_size_deg: f64,
}

/// Grid cell containing a coordinate: `floor(lat / cell), floor(lon / cell)`.
///
/// A relative nudge of 1e-9 cells absorbs decimal representation error so
/// that e.g. `0.003 / 0.001` lands in cell 3, not 2.
pub fn cell_of(lat: f64, lon: f64, cell_size_deg: f64) -> (i64, i64) {
    let q = |x: f64| (x / cell_size_deg + 1e-9).floor() as i64;
    (q(lat), q(lon))
}

impl PlacesDB {
    /// Validates ids, records and (optionally) the per-place image count.
    pub fn new(places: Vec<Place>, cell_size_deg: f64, min_images: Option<usize>) -> Result<Self> {
        if !(cell_size_deg > 0.0 && cell_size_deg.is_finite()) {
            return Err(Error::InvalidParam(format!("cell size {cell_size_deg}")));
        }
        let mut ids = HashSet::new();
        for p in &places {
            if !ids.insert(p.place_id) {
                return Err(Error::DuplicatePlace(p.place_id));
            }
            let mut refs = HashSet::new();
            for r in &p.images {
                r.validate()?;
                if !refs.insert(r.image_ref.as_str()) {
                    return Err(Error::DuplicateImage {
                        place_id: p.place_id,
                        image_ref: r.image_ref.clone(),
                    });
                }
            }
            if let Some(min) = min_images {
                if p.images.len() < min {
                    return Err(Error::TooFewImages {
                        place_id: p.place_id,
                        count: p.images.len(),
                        required: min,
                    });
                }
            }
        }
        Ok(Self {
            places,
            cell_size_deg,
        })
    }

    pub fn empty(cell_size_deg: f64) -> Self {
        Self {
            places: Vec::new(),
            cell_size_deg,
        }
    }

    pub fn places(&self) -> &[Place] {
        &self.places
    }

    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn cell_size_deg(&self) -> f64 {
        self.cell_size_deg
    }

    pub fn num_images(&self) -> usize {
        self.places.iter().map(|p| p.images.len()).sum()
    }

    pub fn image(&self, place_index: usize, image_index: usize) -> &ImageRecord {
        &self.places[place_index].images[image_index]
    }

    /// Records in place order, each with its label.
    pub fn records(&self) -> impl Iterator<Item = (u64, &ImageRecord)> {
        self.places
            .iter()
            .flat_map(|p| p.images.iter().map(move |r| (p.place_id, r)))
    }

    pub fn into_places(self) -> Vec<Place> {
        self.places
    }

    /// Checks that no two places share a grid cell (by centroid).
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<(i64, i64), u64> = HashMap::new();
        for p in &self.places {
            let (lat, lon) = p.centroid();
            if let Some(&other) = seen.get(&cell_of(lat, lon, self.cell_size_deg)) {
                return Err(Error::SharedCell(other, p.place_id));
            }
            seen.insert(cell_of(lat, lon, self.cell_size_deg), p.place_id);
        }
        Ok(())
    }

    /// Splits every place's images at `at`: the first `at` images go to
    /// the first database, the rest to the second. Places keep their ids.
    pub fn split_images(&self, at: usize) -> (PlacesDB, PlacesDB) {
        let mut head = Vec::new();
        let mut tail = Vec::new();
        for p in &self.places {
            let cut = at.min(p.images.len());
            head.push(Place {
                place_id: p.place_id,
                images: p.images[..cut].to_vec(),
            });
            tail.push(Place {
                place_id: p.place_id,
                images: p.images[cut..].to_vec(),
            });
        }
        let mk = |places| PlacesDB {
            places,
            cell_size_deg: self.cell_size_deg,
        };
        (mk(head), mk(tail))
    }
}

/// Great-circle distance in meters between two `(lat, lon)` points in
/// degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Groups records into places by grid cell.
///
/// Cells are scanned in `(lat index, lon index)` order and receive ids
/// `0, 1, ...`; a cell becomes a place only if its records carry at least
/// `min_dates` distinct `(year, month)` stamps. Record order within a cell
/// is preserved.
pub fn grid_group(records: Vec<ImageRecord>, cell_size_deg: f64, min_dates: usize) -> Result<PlacesDB> {
    if !(cell_size_deg > 0.0 && cell_size_deg.is_finite()) {
        return Err(Error::InvalidParam(format!("cell size {cell_size_deg}")));
    }
    if min_dates == 0 {
        return Err(Error::InvalidParam("min_dates must be at least 1".into()));
    }
    let mut cells: BTreeMap<(i64, i64), Vec<ImageRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        cells
            .entry(cell_of(r.lat, r.lon, cell_size_deg))
            .or_default()
            .push(r);
    }
    let mut places = Vec::new();
    for (_, images) in cells {
        let dates: BTreeSet<(i32, u8)> = images.iter().map(ImageRecord::date).collect();
        if dates.len() >= min_dates {
            places.push(Place {
                place_id: places.len() as u64,
                images,
            });
        }
    }
    PlacesDB::new(places, cell_size_deg, None)
}

/// Perturbations applied to a place's latent map to produce its images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Largest circular spatial shift, in cells, along each axis.
    pub max_shift: usize,
    /// Illumination gain drawn from `[1 - gain, 1 + gain]`.
    pub gain: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Amplitude of the distractor channels shared by all places.
    pub distractor_amp: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_shift: 2,
            gain: 0.3,
            noise_std: 0.1,
            distractor_amp: 4.0,
        }
    }
}

impl SynthConfig {
    /// No perturbation at all: every image equals its place's latent map.
    pub fn noiseless() -> Self {
        Self {
            max_shift: 0,
            gain: 0.0,
            noise_std: 0.0,
            ..Self::default()
        }
    }
}

/// Generates a desk-scale database whose payloads stand in for backbone
/// feature maps.
///
/// Latent maps mimic post-ReLU backbone activations (`max(0, N(0,1))`
/// draws) with three kinds of channels: a quarter are constant over space
/// (viewpoint-stable place evidence), an eighth repeat one high-energy
/// pattern common to all places, scaled by `distractor_amp` (think sky or
/// road), and the rest vary per cell (place texture). Each image is that map circularly shifted
/// by up to `max_shift` cells per axis, scaled by a gain in
/// `[1 - gain, 1 + gain]`, plus `N(0, noise_std^2)` noise. Payload values
/// are rounded to `f32` precision so they survive the on-disk format
/// unchanged. Places sit in distinct grid cells; images jitter by about a
/// meter around their place and carry distinct `(year, month)` stamps.
pub fn synth_places(
    num_places: usize,
    images_per_place: usize,
    shape: (usize, usize, usize),
    cfg: &SynthConfig,
    seed: u64,
) -> Result<PlacesDB> {
    let (h, w, c) = shape;
    if num_places == 0 || images_per_place == 0 || h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidParam("synthetic sizes must be positive".into()));
    }
    let nonneg = |x: f64| x >= 0.0;
    if !(nonneg(cfg.gain) && cfg.gain < 1.0) || !nonneg(cfg.noise_std) || !nonneg(cfg.distractor_amp) {
        return Err(Error::InvalidParam(format!("synthetic perturbation {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let grid_cols = (num_places as f64).sqrt().ceil() as usize;
    let cell = DEFAULT_CELL_DEG;
    let (lat0, lon0) = (45.0, 7.0);

    // Channel roles: [0, stable) are constant over space per place,
    // [stable, stable + texture) vary per cell per place, the rest carry a
    // pattern shared by every place.
    let stable_c = c / 4;
    let distractor_c = c / 8;
    let texture_c = c - stable_c - distractor_c;
    let shared: Vec<f64> = (0..h * w * distractor_c)
        .map(|_| cfg.distractor_amp * f64::max(std_normal.sample(&mut rng), 0.0))
        .collect();
    let mut places = Vec::with_capacity(num_places);
    for p in 0..num_places {
        let stable: Vec<f64> = (0..stable_c)
            .map(|_| f64::max(std_normal.sample(&mut rng), 0.0))
            .collect();
        let mut latent = vec![0.0; h * w * c];
        for cell in 0..h * w {
            let px = &mut latent[cell * c..(cell + 1) * c];
            px[..stable_c].copy_from_slice(&stable);
            for v in &mut px[stable_c..stable_c + texture_c] {
                *v = f64::max(std_normal.sample(&mut rng), 0.0);
            }
            px[stable_c + texture_c..]
                .copy_from_slice(&shared[cell * distractor_c..(cell + 1) * distractor_c]);
        }
        let center = (
            lat0 + ((p / grid_cols) as f64 + 0.5) * cell,
            lon0 + ((p % grid_cols) as f64 + 0.5) * cell,
        );
        let mut images = Vec::with_capacity(images_per_place);
        for k in 0..images_per_place {
            let shift_max = cfg.max_shift as i64;
            let di = rng.random_range(-shift_max..=shift_max);
            let dj = rng.random_range(-shift_max..=shift_max);
            let gain = if cfg.gain > 0.0 {
                rng.random_range(1.0 - cfg.gain..=1.0 + cfg.gain)
            } else {
                1.0
            };
            let mut data = vec![0.0; h * w * c];
            for i in 0..h {
                let si = (i as i64 - di).rem_euclid(h as i64) as usize;
                for j in 0..w {
                    let sj = (j as i64 - dj).rem_euclid(w as i64) as usize;
                    let src = &latent[(si * w + sj) * c..][..c];
                    let dst = &mut data[(i * w + j) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        let noise = if cfg.noise_std > 0.0 {
                            cfg.noise_std * std_normal.sample(&mut rng)
                        } else {
                            0.0
                        };
                        *d = (gain * s + noise) as f32 as f64;
                    }
                }
            }
            let jitter = 1e-5;
            images.push(ImageRecord {
                image_ref: format!("synth/{p:05}/{k:03}"),
                lat: center.0 + rng.random_range(-jitter..jitter),
                lon: center.1 + rng.random_range(-jitter..jitter),
                bearing: Some(rng.random_range(0.0..360.0)),
                year: 2008 + (k / 12) as i32,
                month: (k % 12) as u8 + 1,
                payload: Some(FeatureMap::new(h, w, c, data)?),
            });
        }
        places.push(Place {
            place_id: p as u64,
            images,
        });
    }
    PlacesDB::new(places, cell, None)
}

/// Places and images per training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub num_places: usize,
    pub images_per_place: usize,
    pub rng_seed: u64,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_places < 2 || self.images_per_place < 2 {
            return Err(Error::InvalidBatchSpec(format!(
                "P={} and K={} must both be at least 2",
                self.num_places, self.images_per_place
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.num_places * self.images_per_place
    }
}

/// Position of one image inside a [`PlacesDB`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub place_id: u64,
    pub place_index: usize,
    pub image_index: usize,
}

/// `P` places with `K` images each, grouped by place.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub labels: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn payloads<'a>(&self, db: &'a PlacesDB) -> Result<Vec<&'a FeatureMap>> {
        self.items
            .iter()
            .map(|it| {
                let rec = db.image(it.place_index, it.image_index);
                rec.payload
                    .as_ref()
                    .ok_or_else(|| Error::MissingPayload(rec.image_ref.clone()))
            })
            .collect()
    }
}

/// Seeded P×K sampler.
///
/// Places with fewer than `K` images are dropped up front. Each epoch
/// shuffles the eligible places and hands them out `P` at a time without
/// replacement; when fewer than `P` remain, the epoch ends and the
/// leftovers wait for the next shuffle.
#[derive(Debug, Clone)]
pub struct PkSampler {
    spec: BatchSpec,
    eligible: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(db: &PlacesDB, spec: BatchSpec) -> Result<Self> {
        spec.validate()?;
        let eligible: Vec<usize> = db
            .places()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.images.len() >= spec.images_per_place)
            .map(|(i, _)| i)
            .collect();
        if eligible.len() < spec.num_places {
            return Err(Error::NotEnoughPlaces {
                required: spec.num_places,
                per_place: spec.images_per_place,
                available: eligible.len(),
            });
        }
        Ok(Self {
            spec,
            eligible,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(spec.rng_seed),
        })
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    /// Indices (into the database) of places that can be sampled.
    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.eligible.len() / self.spec.num_places
    }

    /// Number of epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Reshuffles the eligible places and starts a new epoch.
    pub fn start_epoch(&mut self) {
        self.order = self.eligible.clone();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
        self.epoch += 1;
    }

    /// Draws the next batch, starting a new epoch when the current one
    /// cannot supply `P` more places.
    pub fn next_batch(&mut self, db: &PlacesDB) -> Batch {
        let (p, k) = (self.spec.num_places, self.spec.images_per_place);
        if self.order.is_empty() || self.cursor + p > self.order.len() {
            self.start_epoch();
        }
        let chosen = &self.order[self.cursor..self.cursor + p];
        self.cursor += p;
        let mut items = Vec::with_capacity(p * k);
        for &place_index in chosen {
            let place = &db.places()[place_index];
            for image_index in index::sample(&mut self.rng, place.images.len(), k) {
                items.push(BatchItem {
                    place_id: place.place_id,
                    place_index,
                    image_index,
                });
            }
        }
        let labels = items.iter().map(|it| it.place_id).collect();
        Batch { items, labels }
    }
}

/// Convenience wrapper: draws one batch with the sampler's current state.
pub fn sample_batch(db: &PlacesDB, sampler: &mut PkSampler) -> Batch {
    sampler.next_batch(db)
}

/// Manifest ingestion switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub min_images: usize,
    /// Keep places with fewer than `min_images` images and skip the
    /// grid-disjointness check.
    pub permissive: bool,
    pub cell_size_deg: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_images: MIN_IMAGES_PER_PLACE,
            permissive: false,
            cell_size_deg: DEFAULT_CELL_DEG,
        }
    }
}

/// Reads a `place_id,image_ref,lat,lon,bearing,year,month` CSV manifest.
///
/// Places appear in order of first occurrence; images keep file order.
/// Payloads are not loaded here.
pub fn ingest_manifest(path: &Path, opts: &IngestOptions) -> Result<PlacesDB> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            msg: format!(
                "expected header `{}`, found `{}`",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<ImageRecord>> = HashMap::new();
    let mut seen: HashSet<(u64, String)> = HashSet::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line,
            msg,
        };
        fn field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize) -> std::result::Result<T, String> {
            let raw = row.get(i).unwrap_or("");
            raw.parse()
                .map_err(|_| format!("cannot parse {} from {raw:?}", MANIFEST_HEADER[i]))
        }
        let place_id: u64 = field(&row, 0).map_err(err)?;
        let image_ref = row.get(1).unwrap_or("").to_owned();
        if image_ref.is_empty() {
            return Err(err("empty image_ref".into()));
        }
        let bearing = match row.get(4).unwrap_or("") {
            "" => None,
            _ => Some(field::<f64>(&row, 4).map_err(err)?),
        };
        let rec = ImageRecord {
            lat: field(&row, 2).map_err(err)?,
            lon: field(&row, 3).map_err(err)?,
            year: field(&row, 5).map_err(err)?,
            month: field(&row, 6).map_err(err)?,
            image_ref,
            bearing,
            payload: None,
        };
        rec.validate().map_err(|e| err(e.to_string()))?;
        if !seen.insert((place_id, rec.image_ref.clone())) {
            return Err(Error::DuplicateImage {
                place_id,
                image_ref: rec.image_ref,
            });
        }
        groups
            .entry(place_id)
            .or_insert_with(|| {
                order.push(place_id);
                Vec::new()
            })
            .push(rec);
    }
    let places: Vec<Place> = order
        .into_iter()
        .map(|id| Place {
            place_id: id,
            images: groups.remove(&id).unwrap_or_default(),
        })
        .collect();
    let min = (!opts.permissive).then_some(opts.min_images);
    let db = PlacesDB::new(places, opts.cell_size_deg, min)?;
    if !opts.permissive {
        db.check_disjoint()?;
    }
    Ok(db)
}

/// Writes the database's records as a manifest CSV.
pub fn write_manifest(db: &PlacesDB, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for (place_id, r) in db.records() {
        w.write_record([
            place_id.to_string(),
            r.image_ref.clone(),
            r.lat.to_string(),
            r.lon.to_string(),
            r.bearing.map(|b| b.to_string()).unwrap_or_default(),
            r.year.to_string(),
            r.month.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const DB_MANIFEST_FILE: &str = "manifest.csv";
pub const DB_FEATURES_FILE: &str = "features.vprk";

/// Saves a database directory: `manifest.csv` plus, when every image has a
/// payload, `features.vprk` holding an `N x H x W x C` stack in manifest
/// row order.
pub fn save_db(db: &PlacesDB, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_manifest(db, &dir.join(DB_MANIFEST_FILE))?;
    let maps: Vec<&FeatureMap> = db.records().filter_map(|(_, r)| r.payload.as_ref()).collect();
    if maps.is_empty() || maps.len() != db.num_images() {
        return Ok(());
    }
    let (h, w, c) = maps[0].shape();
    if maps.iter().any(|m| m.shape() != (h, w, c)) {
        return Err(Error::Shape("feature maps of differing shapes".into()));
    }
    let data: Vec<f64> = maps.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let t = Tensor::from_f64(vec![maps.len(), h, w, c], &data)?;
    save_tensor(&dir.join(DB_FEATURES_FILE), &t)
}

/// Loads a directory written by [`save_db`].
pub fn load_db(dir: &Path, opts: &IngestOptions) -> Result<PlacesDB> {
    let db = ingest_manifest(&dir.join(DB_MANIFEST_FILE), opts)?;
    let features = dir.join(DB_FEATURES_FILE);
    if !features.exists() {
        return Ok(db);
    }
    attach_features(db, &load_tensor(&features)?)
}

/// Sets every image's payload from an `N x H x W x C` stack whose rows
/// follow the manifest order of `db`.
pub fn attach_features(db: PlacesDB, stack: &Tensor) -> Result<PlacesDB> {
    if stack.rank() != 4 || stack.dims[0] != db.num_images() {
        return Err(Error::Format(format!(
            "feature stack {:?} does not match {} manifest rows",
            stack.dims,
            db.num_images()
        )));
    }
    let (h, w, c) = (stack.dims[1], stack.dims[2], stack.dims[3]);
    let data = stack.to_f64();
    let cell_size = db.cell_size_deg();
    let mut chunks = data.chunks_exact(h * w * c);
    let mut places = db.into_places();
    for place in &mut places {
        for img in &mut place.images {
            let chunk = chunks.next().expect("length checked above");
            img.payload = Some(FeatureMap::new(h, w, c, chunk.to_vec())?);
        }
    }
    PlacesDB::new(places, cell_size, None)
}
