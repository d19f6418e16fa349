//! Deterministic synthetic county-year samples with a planted yield function.
//!
//! Every random quantity is drawn from a stream keyed by
//! `(master seed, tag, county, year, ...)`, so any sample can be regenerated
//! in isolation. Weather is expressed in normalized anomaly units.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mmt;
use crate::model::MMSTConfig;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = "mmst-synth-1";
pub const GRID_KM: f64 = 9.0;
pub const WEATHER_PARAMS: [&str; 9] = [
    "avg_temperature",
    "max_temperature",
    "min_temperature",
    "precipitation",
    "relative_humidity",
    "wind_gust",
    "wind_speed",
    "downward_shortwave_radiation",
    "vapor_pressure_deficit",
];
pub const AVG_TEMP: usize = 0;
pub const MAX_TEMP: usize = 1;
pub const PRECIP: usize = 3;
/// Scale the noise fraction refers to: roughly the spread of the noiseless
/// planted yield under the default coefficients.
pub const NOMINAL_YIELD_STD: f64 = 10.0;
/// Mean green intensity at zero vegetation, and the unit the vegetation
/// feature is measured in.
pub const GREEN_BASE: f64 = 0.5;
pub const GREEN_UNIT: f64 = 0.05;
const VEGETATED_RGB: [f64; 3] = [0.2, 0.62, 0.22];
const BARE_RGB: [f64; 3] = [0.52, 0.38, 0.3];

/// One county-year record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub county: String,
    pub year: u32,
    /// `[T, G, H, W, C]` pixels in `[0, 1]`.
    pub x: Tensor,
    /// `[T, G, N1, d_y]` daily weather per grid and snapshot window.
    pub y_s: Tensor,
    /// `[T, N2, d_y]` monthly weather over the preceding three years.
    pub y_l: Tensor,
    /// `[d_z]` yield.
    pub z: Tensor,
    /// `[G, 2]` normalized grid centers.
    pub coords: Tensor,
}

impl Sample {
    pub fn grids(&self) -> usize {
        self.x.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n1: usize,
    pub n2: usize,
    pub d_y: usize,
    pub d_z: usize,
}

impl DataDims {
    pub fn from_config(cfg: &MMSTConfig) -> Self {
        let [h, w, c] = cfg.image_shape();
        Self {
            t: cfg.t,
            h,
            w,
            c,
            n1: cfg.n1,
            n2: cfg.n2,
            d_y: cfg.d_y,
            d_z: cfg.d_z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c != 3 || self.d_y != WEATHER_PARAMS.len() || self.d_z != 1 {
            return Err(Error::Config("generator requires C = 3, d_y = 9 and d_z = 1".into()));
        }
        if self.t == 0 || self.h == 0 || self.w == 0 || self.n1 == 0 || self.n2 == 0 {
            return Err(Error::Config("generator dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    /// (row, col) center normalized to `[0, 1]` within the county's grid.
    pub coord: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountySpec {
    pub id: String,
    pub width_km: f64,
    pub height_km: f64,
    pub grids: Vec<GridCell>,
}

impl CountySpec {
    pub fn coords(&self) -> Tensor {
        Tensor::from_fn(vec![self.grids.len(), 2], |i| self.grids[i / 2].coord[i % 2])
    }
}

/// Row-major `grid_km` tiles covering a `width_km x height_km` box.
pub fn partition_county(width_km: f64, height_km: f64, grid_km: f64) -> Result<Vec<GridCell>> {
    if !(width_km > 0.0 && height_km > 0.0 && grid_km > 0.0) || !width_km.is_finite() || !height_km.is_finite() {
        return Err(Error::invalid(
            "partition_county",
            format!("extents must be positive, got {width_km} x {height_km} km"),
        ));
    }
    let cols = (width_km / grid_km).ceil() as usize;
    let rows = (height_km / grid_km).ceil() as usize;
    Ok((0..rows)
        .flat_map(|row| {
            (0..cols).map(move |col| GridCell {
                row,
                col,
                coord: [(row as f64 + 0.5) / rows as f64, (col as f64 + 0.5) / cols as f64],
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCoefficients {
    pub base: f64,
    /// Weight of the mean vegetation score read from the imagery.
    pub vegetation: f64,
    /// Weight of mean growing-season precipitation.
    pub precipitation: f64,
    /// Penalty on mean heat-stress excess (max temperature above 1).
    pub heat: f64,
    /// Penalty on the long-term warming level.
    pub warming: f64,
    pub sigma_z: f64,
}

impl Default for PlantedCoefficients {
    fn default() -> Self {
        Self {
            base: 150.0,
            vegetation: 8.0,
            precipitation: 5.0,
            heat: 12.0,
            warming: 20.0,
            sigma_z: 0.05 * NOMINAL_YIELD_STD,
        }
    }
}

/// The statistics the planted yield is a linear function of.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedFeatures {
    pub vegetation: f64,
    pub precipitation: f64,
    pub heat: f64,
    pub warming: f64,
}

impl PlantedFeatures {
    pub fn from_sample(s: &Sample) -> Self {
        let [t, g, h, w, c] = s.x.shape().try_into().expect("rank-5 imagery");
        let pixels = (t * g * h * w) as f64;
        let green: f64 = s.x.data().iter().skip(1).step_by(c).sum::<f64>() / pixels;
        let d_y = s.y_s.shape()[3];
        let days = (s.y_s.len() / d_y) as f64;
        let rows = s.y_s.data().chunks(d_y);
        let (mut precip, mut heat) = (0.0, 0.0);
        for r in rows {
            precip += r[PRECIP];
            heat += (r[MAX_TEMP] - 1.0).max(0.0);
        }
        let months = (s.y_l.len() / d_y) as f64;
        let warming = s.y_l.data().chunks(d_y).map(|r| r[AVG_TEMP]).sum::<f64>() / months;
        Self {
            vegetation: (green - GREEN_BASE) / GREEN_UNIT,
            precipitation: precip / days,
            heat: heat / days,
            warming,
        }
    }

    pub fn yield_value(&self, k: &PlantedCoefficients) -> f64 {
        k.base + k.vegetation * self.vegetation + k.precipitation * self.precipitation
            - k.heat * self.heat
            - k.warming * self.warming
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub version: String,
    pub preset: String,
    pub dims: DataDims,
    pub counties: Vec<CountySpec>,
    pub years: Vec<u32>,
    pub splits: Splits,
    pub yield_mean: f64,
    pub yield_std: f64,
    pub planted_coefficients: PlantedCoefficients,
    /// Hex SHA-256 per file, keyed by path relative to the dataset root.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub seed: u64,
    pub counties: usize,
    pub test_counties: usize,
    pub years: Vec<u32>,
    pub preset: String,
    /// Upper bound on grids per county.
    pub max_grids: usize,
    pub coefficients: PlantedCoefficients,
}

impl GenOptions {
    pub fn new(seed: u64, counties: usize, years: Vec<u32>, preset: &str) -> Self {
        Self {
            seed,
            counties,
            test_counties: counties / 4,
            years,
            preset: preset.into(),
            max_grids: 4,
            coefficients: PlantedCoefficients::default(),
        }
    }
}

/// Keyed stream: splitmix64 folding of the key parts into the master seed.
fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = seed;
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

const TAG_COUNTY: u64 = 1;
const TAG_YEAR: u64 = 2;
const TAG_GRID: u64 = 3;
const TAG_SHORT: u64 = 4;
const TAG_IMAGE: u64 = 5;
const TAG_LONG: u64 = 6;
const TAG_NOISE: u64 = 7;
const TAG_SHAPE: u64 = 8;
const TAG_SPLIT: u64 = 9;

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

/// Builds the manifest skeleton: county geometry, years and splits.
/// Checksums and yield statistics are filled in by [`write_dataset`].
pub fn plan_dataset(opts: &GenOptions) -> Result<DatasetManifest> {
    let cfg = MMSTConfig::preset(&opts.preset)?;
    let dims = DataDims::from_config(&cfg);
    dims.validate()?;
    if opts.counties == 0 || opts.years.is_empty() {
        return Err(Error::Config("need at least one county and one year".into()));
    }
    if opts.test_counties >= opts.counties {
        return Err(Error::Config("test split would leave no training counties".into()));
    }
    let max_grids = opts.max_grids.min(cfg.g_max);
    if max_grids == 0 {
        return Err(Error::Config("max_grids must be positive".into()));
    }
    let mut years = opts.years.clone();
    years.sort_unstable();
    years.dedup();

    let shapes: Vec<(usize, usize)> = (1..=max_grids)
        .flat_map(|r| (1..=max_grids / r).map(move |c| (r, c)))
        .collect();
    let counties: Vec<CountySpec> = (0..opts.counties)
        .map(|i| {
            let id = format!("c{i:03}");
            let mut rng = stream(opts.seed, &[TAG_SHAPE, key(&id)]);
            let (rows, cols) = shapes[rng.gen_range(0..shapes.len())];
            let extent = |n: usize, rng: &mut ChaCha8Rng| {
                let km = GRID_KM * (n - 1) as f64 + rng.gen_range(1.0..=9.0);
                (km * 10.0).round() / 10.0
            };
            let width_km = extent(cols, &mut rng);
            let height_km = extent(rows, &mut rng);
            let grids = partition_county(width_km, height_km, GRID_KM)?;
            Ok(CountySpec {
                id,
                width_km,
                height_km,
                grids,
            })
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..opts.counties).collect();
    order.shuffle(&mut stream(opts.seed, &[TAG_SPLIT]));
    let mut test: Vec<String> = order[..opts.test_counties].iter().map(|&i| counties[i].id.clone()).collect();
    let mut train: Vec<String> = order[opts.test_counties..].iter().map(|&i| counties[i].id.clone()).collect();
    test.sort();
    train.sort();

    Ok(DatasetManifest {
        seed: opts.seed,
        version: GENERATOR_VERSION.into(),
        preset: opts.preset.clone(),
        dims,
        counties,
        years,
        splits: Splits { train, test },
        yield_mean: 0.0,
        yield_std: 1.0,
        planted_coefficients: opts.coefficients,
        checksums: BTreeMap::new(),
    })
}

struct CountyLatents {
    soil: f64,
    moisture: f64,
    heat: f64,
    warming_offset: f64,
}

fn county_latents(seed: u64, id: &str) -> CountyLatents {
    let mut rng = stream(seed, &[TAG_COUNTY, key(id)]);
    CountyLatents {
        soil: normal(&mut rng, 0.7),
        moisture: normal(&mut rng, 0.5),
        heat: normal(&mut rng, 0.5),
        warming_offset: rng.gen_range(0.0..1.0),
    }
}

/// Warming level of a county at a fractional calendar year.
fn warming_level(seed: u64, id: &str, offset: f64, year_frac: f64) -> f64 {
    let year = year_frac.floor();
    let mut rng = stream(seed, &[TAG_YEAR, key(id), year as i64 as u64, 1]);
    let jitter = normal(&mut rng, 0.15);
    0.4 + offset + 0.08 * (year_frac - 2015.0).max(0.0) + jitter
}

/// Generates one county-year sample. Pure in its arguments.
pub fn generate_sample(
    seed: u64,
    county: &CountySpec,
    year: u32,
    dims: &DataDims,
    coefficients: &PlantedCoefficients,
) -> Result<Sample> {
    dims.validate()?;
    let DataDims { t: steps, h, w, c, n1, n2, d_y, .. } = *dims;
    let g_count = county.grids.len();
    if g_count == 0 {
        return Err(Error::invalid("generate_sample", format!("county {} has no grids", county.id)));
    }
    let lat = county_latents(seed, &county.id);
    let ck = key(&county.id);
    let yr = year as u64;

    let mut year_rng = stream(seed, &[TAG_YEAR, ck, yr, 0]);
    let precip_anom = normal(&mut year_rng, 0.6);
    let heat_anom = normal(&mut year_rng, 0.5);
    let step_precip: Vec<f64> = (0..steps).map(|_| normal(&mut year_rng, 0.4)).collect();

    // Per-grid static soil and small weather offsets.
    let grid_latents: Vec<(f64, f64, f64)> = (0..g_count)
        .map(|g| {
            let mut rng = stream(seed, &[TAG_GRID, ck, g as u64]);
            (lat.soil + normal(&mut rng, 0.5), normal(&mut rng, 0.2), normal(&mut rng, 0.2))
        })
        .collect();

    // Short-term daily weather.
    let mut y_s = vec![0.0; steps * g_count * n1 * d_y];
    let mut precip_cell = vec![0.0; steps * g_count];
    let mut heat_cell = vec![0.0; steps * g_count];
    for g in 0..g_count {
        let (_, g_temp, g_precip) = grid_latents[g];
        let mut rng = stream(seed, &[TAG_SHORT, ck, yr, g as u64]);
        for t in 0..steps {
            for n in 0..n1 {
                let season = (t * n1 + n) as f64 / (steps * n1) as f64;
                let avg = (PI * season).sin() + heat_anom + 0.5 * lat.heat + g_temp + normal(&mut rng, 0.3);
                let max = avg + 0.8 + normal(&mut rng, 0.15);
                let min = avg - 0.8 + normal(&mut rng, 0.15);
                let precip = precip_anom + lat.moisture + g_precip + step_precip[t] + normal(&mut rng, 0.8);
                let humidity = 0.6 * precip + normal(&mut rng, 0.4);
                let gust = normal(&mut rng, 1.0);
                let wind = 0.7 * gust + normal(&mut rng, 0.5);
                let radiation = (PI * season).cos() - 0.4 * precip + normal(&mut rng, 0.4);
                let vpd = 0.5 * avg - 0.5 * humidity + normal(&mut rng, 0.3);
                let row = [avg, max, min, precip, humidity, gust, wind, radiation, vpd];
                let at = ((t * g_count + g) * n1 + n) * d_y;
                y_s[at..at + d_y].copy_from_slice(&row);
                precip_cell[t * g_count + g] += precip / n1 as f64;
                heat_cell[t * g_count + g] += (max - 1.0).max(0.0) / n1 as f64;
            }
        }
    }

    // Imagery: a field mask whose vegetated fraction tracks vegetation, so
    // the signal survives colour jitter as well as shifting mean green.
    let mut x = vec![0.0; steps * g_count * h * w * c];
    let pixel_noise = Normal::new(0.0, 0.02).expect("positive std");
    let mut field = vec![0.0; h * w];
    for t in 0..steps {
        let season = (PI * (t as f64 + 0.5) / steps as f64).sin();
        for g in 0..g_count {
            let cell = t * g_count + g;
            let soil = grid_latents[g].0;
            let veg = 0.8 * soil + 0.4 * precip_cell[cell] - 0.4 * heat_cell[cell] + 0.3 * season;
            let coverage = 0.5 + 0.35 * (veg / 1.5).tanh();
            let mut rng = stream(seed, &[TAG_IMAGE, ck, yr, cell as u64]);
            let waves: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            for i in 0..h {
                for j in 0..w {
                    let (u, v) = (i as f64 / h as f64, j as f64 / w as f64);
                    field[i * w + j] = waves.iter().map(|&(fu, fv, ph)| (2.0 * PI * (fu * u + fv * v) + ph).sin()).sum();
                }
            }
            let mut sorted = field.clone();
            sorted.sort_by(f64::total_cmp);
            let cut = ((coverage * (h * w) as f64).round() as usize).min(h * w);
            let threshold = if cut == 0 { f64::NEG_INFINITY } else { sorted[cut - 1] };
            let base = cell * h * w * c;
            for (p, &f) in field.iter().enumerate() {
                let rgb = if f <= threshold { VEGETATED_RGB } else { BARE_RGB };
                for (ch, &level) in rgb.iter().enumerate() {
                    x[base + p * c + ch] = (level + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }

    // Long-term monthly weather: for snapshot t, the 36 months before it.
    let mut y_l = vec![0.0; steps * n2 * d_y];
    let mut rng = stream(seed, &[TAG_LONG, ck, yr]);
    for t in 0..steps {
        for m in 0..n2 {
            let month = 12.0 * (year as f64 - 3.0) + 3.0 + (t / 2) as f64 + m as f64;
            let year_frac = month / 12.0;
            let phase = 2.0 * PI * (m as f64) / 12.0;
            let warm = warming_level(seed, &county.id, lat.warming_offset, year_frac);
            let avg = warm + phase.sin() + normal(&mut rng, 0.2);
            let precip = lat.moisture + normal(&mut rng, 0.5);
            let humidity = 0.6 * precip + normal(&mut rng, 0.3);
            let gust = normal(&mut rng, 0.5);
            let row = [
                avg,
                avg + 0.8 + normal(&mut rng, 0.1),
                avg - 0.8 + normal(&mut rng, 0.1),
                precip,
                humidity,
                gust,
                0.7 * gust + normal(&mut rng, 0.3),
                phase.cos() + normal(&mut rng, 0.3),
                0.5 * avg - 0.5 * humidity + normal(&mut rng, 0.2),
            ];
            let at = (t * n2 + m) * d_y;
            y_l[at..at + d_y].copy_from_slice(&row);
        }
    }

    let mut sample = Sample {
        county: county.id.clone(),
        year,
        x: Tensor::new(vec![steps, g_count, h, w, c], x)?,
        y_s: Tensor::new(vec![steps, g_count, n1, d_y], y_s)?,
        y_l: Tensor::new(vec![steps, n2, d_y], y_l)?,
        z: Tensor::zeros(vec![1]),
        coords: county.coords(),
    };
    let mut noise_rng = stream(seed, &[TAG_NOISE, ck, yr]);
    let noise = normal(&mut noise_rng, 1.0) * coefficients.sigma_z;
    let z = PlantedFeatures::from_sample(&sample).yield_value(coefficients) + noise;
    sample.z = Tensor::new(vec![1], vec![z])?;
    Ok(sample)
}

const FILES: [&str; 4] = ["x.mmt", "ys.mmt", "yl.mmt", "z.mmt"];

fn sample_dir(county: &str, year: u32) -> String {
    format!("{county}/{year}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates every county-year of `manifest` under `root`, filling in the
/// checksums and the training-split yield statistics, then writes
/// `manifest.json`. Regenerating from the returned manifest reproduces the
/// same bytes.
pub fn write_dataset(manifest: &DatasetManifest, root: &Path) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    out.checksums.clear();
    let mut train_z = Vec::new();
    for county in &manifest.counties {
        let is_train = manifest.splits.train.contains(&county.id);
        for &year in &manifest.years {
            let s = generate_sample(manifest.seed, county, year, &manifest.dims, &manifest.planted_coefficients)?;
            let dir = sample_dir(&county.id, year);
            for (name, tensor) in FILES.iter().zip([&s.x, &s.y_s, &s.y_l, &s.z]) {
                let rel = format!("{dir}/{name}");
                let bytes = mmt::write(&root.join(&rel), tensor)?;
                out.checksums.insert(rel, sha256_hex(&bytes));
            }
            if is_train {
                // Statistics of the stored (32-bit) values.
                train_z.push(s.z.item() as f32 as f64);
            }
        }
    }
    if train_z.len() >= 2 {
        let n = train_z.len() as f64;
        let mean = train_z.iter().sum::<f64>() / n;
        let var = train_z.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);
        out.yield_mean = mean;
        out.yield_std = var.sqrt().max(1e-12);
    }
    let json = serde_json::to_string_pretty(&out)?;
    mmt::write_atomic(&root.join("manifest.json"), json.as_bytes())?;
    Ok(out)
}

/// Hex SHA-256 of `manifest.json`, which itself lists every file checksum.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Samples padded to a common grid count.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<Sample>,
    /// `masks[i][g]` is false for padding.
    pub masks: Vec<Vec<bool>>,
}

/// Pads every sample to the largest grid count in the batch by repeating
/// its first grid; padded positions are masked out.
pub fn pad_batch(samples: Vec<Sample>) -> Batch {
    let g_pad = samples.iter().map(Sample::grids).max().unwrap_or(0);
    let mut masks = Vec::with_capacity(samples.len());
    let padded = samples
        .into_iter()
        .map(|s| {
            let g = s.grids();
            masks.push((0..g_pad).map(|i| i < g).collect());
            if g == g_pad {
                return s;
            }
            let idx: Vec<usize> = (0..g_pad).map(|i| if i < g { i } else { 0 }).collect();
            Sample {
                x: s.x.select(1, &idx).expect("grid axis"),
                y_s: s.y_s.select(1, &idx).expect("grid axis"),
                coords: s.coords.select(0, &idx).expect("grid axis"),
                ..s
            }
        })
        .collect();
    Batch { samples: padded, masks }
}

/// A generated dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn county(&self, id: &str) -> Result<&CountySpec> {
        self.manifest
            .counties
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::invalid("dataset", format!("unknown county `{id}`")))
    }

    pub fn split_counties(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Test => &self.manifest.splits.test,
        }
    }

    /// County-major `(county, year)` keys of a split.
    pub fn keys(&self, split: Split) -> Vec<(String, u32)> {
        self.split_counties(split)
            .iter()
            .flat_map(|c| self.manifest.years.iter().map(move |&y| (c.clone(), y)))
            .collect()
    }

    fn read_checked(&self, rel: &str) -> Result<Tensor> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = self
            .manifest
            .checksums
            .get(rel)
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                msg: "file not listed in manifest".into(),
            })?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Checksum(path));
        }
        mmt::decode(&bytes, &path)
    }

    pub fn load_sample(&self, county: &str, year: u32) -> Result<Sample> {
        let spec = self.county(county)?;
        let dir = sample_dir(county, year);
        let [x, y_s, y_l, z] = FILES.map(|f| self.read_checked(&format!("{dir}/{f}")));
        let (x, y_s, y_l, z) = (x?, y_s?, y_l?, z?);
        let d = &self.manifest.dims;
        let g = spec.grids.len();
        if x.shape() != [d.t, g, d.h, d.w, d.c] || y_s.shape() != [d.t, g, d.n1, d.d_y] || y_l.shape() != [d.t, d.n2, d.d_y] {
            return Err(Error::Format {
                path: self.root.join(dir),
                msg: "tensor shapes disagree with the manifest".into(),
            });
        }
        Ok(Sample {
            county: county.into(),
            year,
            x,
            y_s,
            y_l,
            z,
            coords: spec.coords(),
        })
    }

    /// Loads `keys(split)[i]` for each index and pads to a common grid count.
    pub fn load_batch(&self, split: Split, indices: &[usize]) -> Result<Batch> {
        let keys = self.keys(split);
        let samples = indices
            .iter()
            .map(|&i| {
                let (c, y) = keys
                    .get(i)
                    .ok_or_else(|| Error::invalid("load_batch", format!("index {i} outside split of {}", keys.len())))?;
                self.load_sample(c, *y)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(pad_batch(samples))
    }

    pub fn standardize(&self, z: f64) -> f64 {
        (z - self.manifest.yield_mean) / self.manifest.yield_std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.manifest.yield_std + self.manifest.yield_mean
    }
}
