//! Paired drone/satellite samples with GPS metadata: a synthetic generator,
//! on-disk ingestion, and the training and robustness image transforms.
//!
//! On-disk layout:
//!
//! ```text
//! root/metadata.csv                       class_id,view,lat,lon,relpath
//! root/{train,query,gallery}/<class_id>/<view>_<n>.cten
//! ```
//!
//! `lat`/`lon` may be left empty for data without GPS.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{read_cten, write_cten, Real, Tensor};

pub type ClassId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Drone,
    Satellite,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::Drone => "drone",
            View::Satellite => "satellite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drone" => Ok(View::Drone),
            "satellite" => Ok(View::Satellite),
            other => Err(Error::Data(format!("unknown view {other:?}"))),
        }
    }
}

/// Position in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Planar Euclidean distance in degrees.
    pub fn distance(&self, other: &GeoPoint) -> f64 {
        ((self.lat - other.lat).powi(2) + (self.lon - other.lon).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub class_id: ClassId,
    pub view: View,
    pub pos: Option<GeoPoint>,
    /// Path of the payload relative to the dataset root.
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub meta: SampleMeta,
    pub image: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl DatasetSplit {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<Sample> {
        match s {
            Split::Train => &mut self.train,
            Split::Query => &mut self.query,
            Split::Gallery => &mut self.gallery,
        }
    }

    /// Distinct class ids of a split, ascending.
    pub fn classes(&self, s: Split) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.split(s).iter().map(|x| x.meta.class_id).collect();
        set.into_iter().collect()
    }

    pub fn class_count(&self, s: Split) -> usize {
        self.classes(s).len()
    }

    /// Shape `(C, H, W)` shared by every payload.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        let first = Split::ALL.iter().flat_map(|s| self.split(*s)).next()?;
        let s = first.image.shape();
        (s.len() == 3).then(|| [s[0], s[1], s[2]])
    }

    /// Per-class coordinates of the training split, ascending class id.
    pub fn train_positions(&self) -> Vec<(ClassId, Option<GeoPoint>)> {
        let mut map: BTreeMap<ClassId, Option<GeoPoint>> = BTreeMap::new();
        for s in &self.train {
            map.entry(s.meta.class_id).or_insert(s.meta.pos);
        }
        map.into_iter().collect()
    }

    /// Checks the structural invariants; violations are errors.
    pub fn validate(&self) -> Result<()> {
        let mut shape: Option<&[usize]> = None;
        let mut seen_paths = HashSet::new();
        let mut coords: BTreeMap<ClassId, Option<GeoPoint>> = BTreeMap::new();
        let mut views: BTreeMap<ClassId, BTreeSet<View>> = BTreeMap::new();
        for split in Split::ALL {
            for s in self.split(split) {
                let m = &s.meta;
                if !seen_paths.insert(m.payload.as_str()) {
                    return Err(Error::Data(format!("duplicate relpath {}", m.payload)));
                }
                match shape {
                    None => {
                        if s.image.rank() != 3 {
                            return Err(Error::Data(format!(
                                "{}: payload must be (C, H, W), got {:?}",
                                m.payload,
                                s.image.shape()
                            )));
                        }
                        shape = Some(s.image.shape());
                    }
                    Some(sh) if sh != s.image.shape() => {
                        return Err(Error::Data(format!(
                            "{}: payload shape {:?} differs from {sh:?}",
                            m.payload,
                            s.image.shape()
                        )))
                    }
                    _ => {}
                }
                match coords.get(&m.class_id) {
                    Some(prev) if *prev != m.pos => {
                        return Err(Error::Data(format!(
                            "class {} has inconsistent coordinates ({prev:?} vs {:?})",
                            m.class_id, m.pos
                        )))
                    }
                    Some(_) => {}
                    None => {
                        coords.insert(m.class_id, m.pos);
                    }
                }
                views.entry(m.class_id).or_default().insert(m.view);
            }
        }
        for (class, v) in &views {
            if v.len() < 2 {
                let have = v.iter().next().map(View::as_str).unwrap_or("no");
                return Err(Error::Data(format!("class {class} has only {have} views")));
            }
        }
        let train: BTreeSet<_> = self.classes(Split::Train).into_iter().collect();
        let gallery: BTreeSet<_> = self.classes(Split::Gallery).into_iter().collect();
        for q in self.classes(Split::Query) {
            if !gallery.contains(&q) {
                return Err(Error::Data(format!("query class {q} is absent from the gallery")));
            }
            if train.contains(&q) {
                return Err(Error::Data(format!("class {q} appears in both train and query")));
            }
        }
        Ok(())
    }
}

/// Knobs of the synthetic paired-view generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Locations per split; training and test locations are disjoint grids.
    pub n_classes: usize,
    pub grid_spacing_deg: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the per-sample pixel noise.
    pub view_noise: f64,
    /// Drone samples per location (satellite is always one).
    pub drones_per_class: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn desk() -> Self {
        SyntheticConfig {
            n_classes: 64,
            grid_spacing_deg: 1e-4,
            channels: 3,
            height: 16,
            width: 16,
            view_noise: 0.1,
            drones_per_class: 3,
            seed: 0,
        }
    }
}

/// South-west corner of the training grid.
const TRAIN_ORIGIN: GeoPoint = GeoPoint { lat: 30.0, lon: 120.0 };
/// South-west corner of the test grid, far from the training grid.
const TEST_ORIGIN: GeoPoint = GeoPoint { lat: 30.5, lon: 120.5 };

const TERRAIN_WAVES: usize = 4;
const TERRAIN_AMPLITUDE: f64 = 0.5;
const LANDMARKS: usize = 4;

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

/// Grid position of location `index` on an approximately square grid.
pub fn grid_position(cfg: &SyntheticConfig, split: Split, index: usize) -> GeoPoint {
    let side = (cfg.n_classes as f64).sqrt().ceil() as usize;
    let origin = if split == Split::Train { TRAIN_ORIGIN } else { TEST_ORIGIN };
    GeoPoint {
        lat: origin.lat + (index / side) as f64 * cfg.grid_spacing_deg,
        lon: origin.lon + (index % side) as f64 * cfg.grid_spacing_deg,
    }
}

struct Wave {
    channel: usize,
    k_lat: f64,
    k_lon: f64,
    phase: f64,
}

fn terrain(cfg: &SyntheticConfig) -> Vec<Wave> {
    let mut rng = rng_for(&[cfg.seed, 0xfeed]);
    let mut waves = Vec::new();
    for channel in 0..cfg.channels {
        for _ in 0..TERRAIN_WAVES {
            // wavelengths of 2 to 6 grid cells
            let wavelength = rng.gen_range(2.0..6.0) * cfg.grid_spacing_deg;
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            waves.push(Wave {
                channel,
                k_lat: k * angle.cos(),
                k_lon: k * angle.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
    }
    waves
}

/// Shared appearance of one location: a slowly varying terrain field sampled
/// over the cell, plus a few location-specific coloured blobs.
pub fn synthetic_latent(cfg: &SyntheticConfig, split: Split, index: usize) -> Tensor {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let centre = grid_position(cfg, split, index);
    let mut data = vec![0.0f64; c * h * w];
    let norm = TERRAIN_AMPLITUDE / (TERRAIN_WAVES as f64).sqrt();
    for wave in terrain(cfg) {
        for y in 0..h {
            let lat = centre.lat + ((y as f64 + 0.5) / h as f64 - 0.5) * cfg.grid_spacing_deg;
            for x in 0..w {
                let lon = centre.lon + ((x as f64 + 0.5) / w as f64 - 0.5) * cfg.grid_spacing_deg;
                let v = (wave.k_lat * (lat - TRAIN_ORIGIN.lat) + wave.k_lon * (lon - TRAIN_ORIGIN.lon)
                    + wave.phase)
                    .sin();
                data[(wave.channel * h + y) * w + x] += norm * v;
            }
        }
    }
    let mut rng = rng_for(&[cfg.seed, split as u64 + 1, index as u64]);
    for _ in 0..LANDMARKS {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let radius = rng.gen_range(0.1..0.25) * h.min(w) as f64;
        let colour: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let g = (-d2 / (2.0 * radius * radius)).exp();
                for (ch, col) in colour.iter().enumerate() {
                    data[(ch * h + y) * w + x] += col * g;
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data.into_iter().map(|v| v as Real).collect()).expect("latent shape")
}

/// Drone rendering of a latent: a contrast boost.
pub fn drone_transform(latent: &Tensor) -> Tensor {
    let mut out = latent.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= 1.2);
    out
}

/// Satellite rendering of a latent: 3x3 box blur and a cyclic channel shift.
pub fn satellite_transform(latent: &Tensor) -> Tensor {
    let s = latent.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(s, |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let src = (ch + 1) % c;
        let mut acc = 0.0;
        let mut n = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += latent.get(&[src, yy as usize, xx as usize]);
                    n += 1.0;
                }
            }
        }
        acc / n
    })
}

fn add_noise(mut t: Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        t.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng) as Real);
    }
    t
}

/// Deterministic synthetic split: `n_classes` training locations on one grid
/// and `n_classes` test locations on a second grid; query holds the test
/// drone views and gallery the test satellite views.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetSplit> {
    if cfg.n_classes < 4 {
        return Err(Error::Config(format!("n_classes must be at least 4, got {}", cfg.n_classes)));
    }
    if !(cfg.grid_spacing_deg > 0.0) {
        return Err(Error::Config(format!("grid spacing must be positive, got {}", cfg.grid_spacing_deg)));
    }
    if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 || cfg.drones_per_class == 0 {
        return Err(Error::Config("image extents and drones_per_class must be positive".into()));
    }
    if !(cfg.view_noise >= 0.0) {
        return Err(Error::Config(format!("view_noise must be non-negative, got {}", cfg.view_noise)));
    }
    let mut out = DatasetSplit::default();
    for (split, id_base) in [(Split::Train, 0), (Split::Query, cfg.n_classes)] {
        for index in 0..cfg.n_classes {
            let class_id = id_base + index;
            let pos = Some(grid_position(cfg, split, index));
            let latent = synthetic_latent(cfg, split, index);
            let mut rng = rng_for(&[cfg.seed, 0xbeef, class_id as u64]);
            let drone_split = split;
            let sat_split = if split == Split::Train { Split::Train } else { Split::Gallery };
            for n in 0..cfg.drones_per_class {
                let payload = format!("{}/{class_id}/drone_{n}.cten", drone_split.as_str());
                let image = add_noise(drone_transform(&latent), cfg.view_noise, &mut rng);
                let meta = SampleMeta { class_id, view: View::Drone, pos, payload };
                out.split_mut(drone_split).push(Sample { meta, image });
            }
            let payload = format!("{}/{class_id}/satellite_0.cten", sat_split.as_str());
            let image = add_noise(satellite_transform(&latent), cfg.view_noise, &mut rng);
            let meta = SampleMeta { class_id, view: View::Satellite, pos, payload };
            out.split_mut(sat_split).push(Sample { meta, image });
        }
    }
    Ok(out)
}

/// Writes payloads and `metadata.csv` under `root`.
pub fn save_dataset(data: &DatasetSplit, root: &Path) -> Result<()> {
    let meta_path = root.join("metadata.csv");
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut w = csv::Writer::from_path(&meta_path)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", meta_path.display()));
    w.write_record(["class_id", "view", "lat", "lon", "relpath"]).map_err(csv_err)?;
    for split in Split::ALL {
        for s in data.split(split) {
            let m = &s.meta;
            let path = root.join(&m.payload);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_cten(&path, &s.image)?;
            let (lat, lon) = match m.pos {
                Some(p) => (p.lat.to_string(), p.lon.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([m.class_id.to_string().as_str(), m.view.as_str(), &lat, &lon, &m.payload])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&meta_path, e))
}

/// Reads and validates a dataset written in the on-disk layout.
pub fn load_dataset(root: &Path) -> Result<DatasetSplit> {
    let meta_path = root.join("metadata.csv");
    if !meta_path.is_file() {
        return Err(Error::Data(format!("missing {}", meta_path.display())));
    }
    let mut reader = csv::Reader::from_path(&meta_path)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?
        .clone();
    let expected = ["class_id", "view", "lat", "lon", "relpath"];
    if headers.iter().map(str::trim).ne(expected) {
        return Err(Error::Data(format!(
            "{}: header must be {}",
            meta_path.display(),
            expected.join(",")
        )));
    }
    let mut out = DatasetSplit::default();
    let mut seen = HashSet::new();
    for (line, record) in reader.records().enumerate() {
        let at = |m: String| Error::Data(format!("{} row {}: {m}", meta_path.display(), line + 2));
        let record = record.map_err(|e| at(e.to_string()))?;
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let class_id: ClassId = field(0).parse().map_err(|_| at(format!("bad class_id {:?}", field(0))))?;
        let view = View::parse(field(1)).map_err(|e| at(e.to_string()))?;
        let pos = match (field(2), field(3)) {
            ("", "") => None,
            (lat, lon) => Some(GeoPoint {
                lat: lat.parse().map_err(|_| at(format!("bad lat {lat:?}")))?,
                lon: lon.parse().map_err(|_| at(format!("bad lon {lon:?}")))?,
            }),
        };
        let payload = field(4).to_string();
        if !seen.insert(payload.clone()) {
            return Err(at(format!("duplicate relpath {payload}")));
        }
        let split = match payload.split('/').next() {
            Some("train") => Split::Train,
            Some("query") => Split::Query,
            Some("gallery") => Split::Gallery,
            _ => return Err(at(format!("relpath {payload} is not under train/, query/ or gallery/"))),
        };
        let image = read_cten(root.join(&payload))?;
        out.split_mut(split).push(Sample { meta: SampleMeta { class_id, view, pos, payload }, image });
    }
    out.validate()?;
    Ok(out)
}

/// One draw of the training augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    /// Crop offset relative to the centred crop, in `-pad..=pad`.
    pub dy: isize,
    pub dx: isize,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { dy: 0, dx: 0, flip: false };

    pub fn sample(pad: usize, rng: &mut impl Rng) -> Self {
        let p = pad as isize;
        AugmentDraw { dy: rng.gen_range(-p..=p), dx: rng.gen_range(-p..=p), flip: rng.gen_bool(0.5) }
    }
}

fn check_image(x: &Tensor, min: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[1] < min || s[2] < min {
        return Err(Error::Shape(format!("expected (C, H, W) with H, W >= {min}, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Zero-pad, crop back to `(H, W)` at the drawn offset, then optionally
/// mirror horizontally.
pub fn apply_augment(x: &Tensor, draw: AugmentDraw) -> Result<Tensor> {
    let (_, h, w) = check_image(x, 8)?;
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (ch, y, col) = (i / (h * w), (i / w) % h, i % w);
        let col = if draw.flip { w - 1 - col } else { col };
        let (sy, sx) = (y as isize + draw.dy, col as isize + draw.dx);
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            x.get(&[ch, sy as usize, sx as usize])
        } else {
            0.0
        }
    }))
}

/// Seeded random pad-crop-flip.
pub fn augment(x: &Tensor, pad: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_augment(x, AugmentDraw::sample(pad, &mut rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftMode {
    /// Zeros fill the vacated left strip.
    Black,
    /// The vacated left strip mirrors the original leftmost columns.
    Flip,
}

impl ShiftMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftMode::Black => "black",
            ShiftMode::Flip => "flip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "black" => Ok(ShiftMode::Black),
            "flip" => Ok(ShiftMode::Flip),
            other => Err(Error::Config(format!("unknown shift mode {other:?}"))),
        }
    }
}

/// Moves content `k` columns to the right, dropping the rightmost `k`
/// columns: `out[.., k..] = in[.., ..W-k]`.
pub fn position_shift(x: &Tensor, k: usize, mode: ShiftMode) -> Result<Tensor> {
    let (_, h, w) = check_image(x, 1)?;
    if k >= w {
        return Err(Error::Range(format!("shift {k} must be smaller than width {w}")));
    }
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (ch, y, col) = (i / (h * w), (i / w) % h, i % w);
        if col >= k {
            x.get(&[ch, y, col - k])
        } else {
            match mode {
                ShiftMode::Black => 0.0,
                ShiftMode::Flip => x.get(&[ch, y, k - 1 - col]),
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::encode_cten;

    fn small() -> SyntheticConfig {
        SyntheticConfig { n_classes: 9, height: 8, width: 8, ..SyntheticConfig::desk() }
    }

    fn img(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| i as Real + 1.0)
    }

    #[test]
    fn grid_of_64_has_unit_spacing_neighbours() {
        let cfg = SyntheticConfig::desk();
        let data = generate_synthetic(&cfg).unwrap();
        assert_eq!(data.class_count(Split::Train), 64);
        assert_eq!(data.class_count(Split::Query), 64);
        assert_eq!(data.class_count(Split::Gallery), 64);
        let pos: Vec<GeoPoint> = data.train_positions().into_iter().map(|(_, p)| p.unwrap()).collect();
        for (i, a) in pos.iter().enumerate() {
            let nearest = pos
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| a.distance(b))
                .fold(f64::INFINITY, f64::min);
            assert!((nearest - 1e-4).abs() < 1e-9);
        }
        let lats: BTreeSet<u64> = pos.iter().map(|p| (p.lat * 1e6).round() as u64).collect();
        let lons: BTreeSet<u64> = pos.iter().map(|p| (p.lon * 1e6).round() as u64).collect();
        assert_eq!((lats.len(), lons.len()), (8, 8));
        data.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        for split in Split::ALL {
            for (x, y) in a.split(split).iter().zip(b.split(split)) {
                assert_eq!(encode_cten(&x.image), encode_cten(&y.image));
            }
        }
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn zero_noise_views_are_exact_transforms() {
        let cfg = SyntheticConfig { view_noise: 0.0, ..small() };
        let data = generate_synthetic(&cfg).unwrap();
        let latent = synthetic_latent(&cfg, Split::Train, 3);
        let drones: Vec<_> = data.train.iter().filter(|s| s.meta.class_id == 3 && s.meta.view == View::Drone).collect();
        let sat = data.train.iter().find(|s| s.meta.class_id == 3 && s.meta.view == View::Satellite).unwrap();
        assert_eq!(drones.len(), cfg.drones_per_class);
        for d in drones {
            assert_eq!(d.image, drone_transform(&latent));
        }
        assert_eq!(sat.image, satellite_transform(&latent));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_synthetic(&SyntheticConfig { n_classes: 3, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { grid_spacing_deg: 0.0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticConfig { height: 0, ..small() }).is_err());
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&small()).unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    fn write_fixture(root: &Path, rows: &[(usize, &str, &str)]) {
        let mut csv = String::from("class_id,view,lat,lon,relpath\n");
        for (class, view, split) in rows {
            let rel = format!("{split}/{class}/{view}_0.cten");
            let p = root.join(&rel);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            write_cten(&p, &img(3, 8, 8)).unwrap();
            csv.push_str(&format!("{class},{view},{},{},{rel}\n", 30.0 + *class as f64 * 1e-4, 120.0));
        }
        std::fs::write(root.join("metadata.csv"), csv).unwrap();
    }

    #[test]
    fn loads_three_class_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &[(0, "drone", "train"), (0, "satellite", "train"), (1, "drone", "query"), (1, "satellite", "gallery"),
              (2, "drone", "query"), (2, "satellite", "gallery")],
        );
        let data = load_dataset(dir.path()).unwrap();
        let all: BTreeSet<_> = Split::ALL.iter().flat_map(|s| data.classes(*s)).collect();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn rejects_single_view_class() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[(0, "drone", "train"), (1, "drone", "query"), (1, "satellite", "gallery")]);
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn rejects_query_class_missing_from_gallery() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &[(0, "drone", "train"), (0, "satellite", "train"), (1, "drone", "query"), (1, "satellite", "train")],
        );
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn rejects_missing_metadata_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("metadata.csv"));
        write_fixture(dir.path(), &[(0, "drone", "train"), (0, "drone", "train"), (0, "satellite", "train")]);
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn identity_augment_draw() {
        let x = img(3, 8, 10);
        assert_eq!(apply_augment(&x, AugmentDraw::IDENTITY).unwrap(), x);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = img(2, 8, 9);
        let flip = AugmentDraw { flip: true, ..AugmentDraw::IDENTITY };
        let once = apply_augment(&x, flip).unwrap();
        assert_ne!(once, x);
        assert_eq!(apply_augment(&once, flip).unwrap(), x);
    }

    #[test]
    fn augment_preserves_shape() {
        let x = img(3, 12, 8);
        for seed in 0..100 {
            assert_eq!(augment(&x, 2, seed).unwrap().shape(), x.shape());
        }
        assert!(augment(&img(3, 4, 8), 1, 0).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let x = img(3, 5, 7);
        for mode in [ShiftMode::Black, ShiftMode::Flip] {
            assert_eq!(position_shift(&x, 0, mode).unwrap(), x);
        }
        assert!(matches!(position_shift(&x, 7, ShiftMode::Black), Err(Error::Range(_))));
    }

    #[test]
    fn black_shift_zeroes_left_strip() {
        let (c, h, w) = (3, 4, 32);
        let x = img(c, h, w);
        let out = position_shift(&x, 10, ShiftMode::Black).unwrap();
        let zeros = out.data().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, 10 * h * c);
    }

    #[test]
    fn flip_shift_matches_index_oracle() {
        let (c, h, w) = (2, 3, 9);
        let x = img(c, h, w);
        for k in 0..w {
            let out = position_shift(&x, k, ShiftMode::Flip).unwrap();
            for ch in 0..c {
                for y in 0..h {
                    // the left strip is the mirror image of the original first k columns
                    let mut expect: Vec<Real> = (0..k).rev().map(|j| x.get(&[ch, y, j])).collect();
                    expect.extend((0..w - k).map(|j| x.get(&[ch, y, j])));
                    let got: Vec<Real> = (0..w).map(|j| out.get(&[ch, y, j])).collect();
                    assert_eq!(got, expect, "k={k}");
                }
            }
        }
    }
}
