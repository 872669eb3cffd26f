//! Synthetic multi-city accident data and the preprocessing pipeline that
//! turns it into training windows.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_grid_node_map, GridNodeMap, SupportSet};
use crate::tensor::{read_stt_file, write_stt_file, Tensor};

pub const HOURS_PER_WEEK: usize = 168;
/// Grid features: risk at `t`, risk one week before the target, sin and
/// cos of the hour of week, temperature, precipitation.
pub const F_GEO: usize = 6;
/// Node features: risk of the node's cell, mean risk of its 3x3
/// neighbourhood, sin and cos of the hour of week.
pub const F_SEM: usize = 4;
pub const GEO_FEATURES: [&str; F_GEO] = ["risk", "risk_week_ago", "how_sin", "how_cos", "temperature", "precipitation"];
pub const SEM_FEATURES: [&str; F_SEM] = ["risk", "risk_neighbourhood", "how_sin", "how_cos"];

/// Knobs of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Profile {
    /// Fraction of grid cells kept by the validity mask.
    pub valid_fraction: f64,
    pub hotspots: usize,
    /// Gaussian bump width in cells.
    pub hotspot_sigma: f64,
    /// Expected hourly count at a full-strength hotspot centre for an
    /// average hour of the week.
    pub base_rate: f64,
    /// Spatially uniform intensity added to the hotspot field.
    pub background: f64,
    /// Use a constant cycle instead of the two-peak weekly one.
    pub flat_cycle: bool,
    pub weekend_factor: f64,
    /// Hour of week (0 = Monday 00:00) of the first generated hour.
    pub origin_hour_of_week: usize,
    /// Neighbours per node in the road graph.
    pub road_k: usize,
    /// Whether the city has a POI relation; without one the identity is used.
    pub poi: bool,
    /// Number of contiguous space-time blocks whose risk inputs are blanked.
    pub missing_blocks: usize,
}

impl Default for Profile {
    fn default() -> Self {
        Profile {
            valid_fraction: 1.0,
            hotspots: 3,
            hotspot_sigma: 1.2,
            base_rate: 6.0,
            background: 0.0,
            flat_cycle: false,
            weekend_factor: 0.6,
            origin_hour_of_week: 0,
            road_k: 3,
            poi: true,
            missing_blocks: 0,
        }
    }
}

/// One city's aligned grid and node sequences with their relations.
#[derive(Clone, Debug)]
pub struct CityDataset {
    pub name: String,
    pub w: usize,
    pub h: usize,
    pub n: usize,
    /// `[T, W*H, F_GEO]`.
    pub x_geo: Tensor,
    /// `[T, N, F_SEM]`.
    pub x_sem: Tensor,
    /// `[T, W, H]`, nonnegative, zero on invalid cells.
    pub targets: Tensor,
    /// Valid cells, row-major over `(W, H)`.
    pub mask: Vec<bool>,
    pub supports: SupportSet,
    pub poi_present: bool,
    pub map: GridNodeMap,
    /// Centre cell of every hotspot.
    pub hotspots: Vec<usize>,
    /// Index in the generated timeline of the current step 0.
    pub t0: usize,
    /// Hour of week of step 0.
    pub origin_hour_of_week: usize,
    pub seed: u64,
    pub profile: Profile,
}

impl CityDataset {
    pub fn steps(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.w * self.h
    }

    pub fn hour_of_week(&self, step: usize) -> usize {
        (self.origin_hour_of_week + step) % HOURS_PER_WEEK
    }

    /// Input window `[t_in, W*H, F_GEO]` starting at `start`.
    pub fn geo_window(&self, start: usize, t_in: usize) -> Result<Tensor> {
        self.x_geo.narrow(0, start, t_in)
    }

    pub fn sem_window(&self, start: usize, t_in: usize) -> Result<Tensor> {
        self.x_sem.narrow(0, start, t_in)
    }

    /// Target map `[W, H]` at `step`.
    pub fn target(&self, step: usize) -> Result<Tensor> {
        self.targets.narrow(0, step, 1)?.reshape(&[self.w, self.h])
    }

    /// Sum of valid-cell targets per step.
    pub fn totals(&self) -> Vec<f64> {
        self.targets
            .data()
            .chunks(self.cells())
            .map(|c| c.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(v, _)| v).sum())
            .collect()
    }
}

/// Validity mask with `round(fraction * w * h)` cells, chosen as the cells
/// closest to the grid centre under a seeded jitter.
pub fn make_validity_mask(w: usize, h: usize, valid_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if w == 0 || h == 0 {
        return Err(Error::Data(format!("degenerate grid {w}x{h}")));
    }
    if !(valid_fraction > 0.0 && valid_fraction <= 1.0) {
        return Err(Error::Data(format!("valid fraction {valid_fraction} outside (0, 1]")));
    }
    let cells = w * h;
    let count = ((valid_fraction * cells as f64).round() as usize).clamp(1, cells);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let score: Vec<f64> = (0..cells)
        .map(|c| {
            let (i, j) = ((c / h) as f64, (c % h) as f64);
            ((i - cx).powi(2) + (j - cy).powi(2)).sqrt() + rng.random_range(0.0..1.5)
        })
        .collect();
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
    let mut mask = vec![false; cells];
    for &c in &order[..count] {
        mask[c] = true;
    }
    Ok(mask)
}

/// Relative weekly intensity, mean 1 over the week.
pub fn weekly_cycle(profile: &Profile) -> Vec<f64> {
    if profile.flat_cycle {
        return vec![1.0; HOURS_PER_WEEK];
    }
    let raw: Vec<f64> = (0..HOURS_PER_WEEK)
        .map(|how| {
            let hour = (how % 24) as f64 + 0.5;
            let day = how / 24;
            let peaks = 0.15
                + (-(hour - 8.5).powi(2) / 2.0).exp()
                + 1.2 * (-(hour - 17.0).powi(2) / (2.0 * 1.5f64.powi(2))).exp();
            if day >= 5 {
                peaks * profile.weekend_factor
            } else {
                peaks
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / HOURS_PER_WEEK as f64;
    raw.into_iter().map(|v| v / mean).collect()
}

fn how_encoding(how: usize) -> (f64, f64) {
    let angle = 2.0 * PI * how as f64 / HOURS_PER_WEEK as f64;
    (angle.sin(), angle.cos())
}

/// Generates `weeks` of hourly data for one city.
pub fn generate_city(
    name: &str,
    seed: u64,
    w: usize,
    h: usize,
    n: usize,
    weeks: usize,
    profile: &Profile,
) -> Result<CityDataset> {
    if w == 0 || h == 0 || n == 0 || weeks == 0 {
        return Err(Error::Data(format!(
            "degenerate dims: grid {w}x{h}, {n} nodes, {weeks} weeks"
        )));
    }
    if profile.origin_hour_of_week >= HOURS_PER_WEEK {
        return Err(Error::Data(format!(
            "origin hour of week {} must be below {HOURS_PER_WEEK}",
            profile.origin_hour_of_week
        )));
    }
    if !(profile.base_rate >= 0.0 && profile.background >= 0.0 && profile.hotspot_sigma > 0.0) {
        return Err(Error::Data("rates must be nonnegative and sigma positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = w * h;
    let steps = weeks * HOURS_PER_WEEK;
    let mask = make_validity_mask(w, h, profile.valid_fraction, rng.random())?;

    let valid: Vec<usize> = (0..cells).filter(|&c| mask[c]).collect();
    let mut spatial = vec![profile.background; cells];
    let mut hotspots = Vec::with_capacity(profile.hotspots);
    for _ in 0..profile.hotspots {
        let c = valid[rng.random_range(0..valid.len())];
        hotspots.push(c);
        let (ci, cj) = ((c / h) as f64, (c % h) as f64);
        let amp = rng.random_range(0.5..=1.0);
        for (m, s) in spatial.iter_mut().enumerate() {
            let d2 = ((m / h) as f64 - ci).powi(2) + ((m % h) as f64 - cj).powi(2);
            *s += amp * (-d2 / (2.0 * profile.hotspot_sigma.powi(2))).exp();
        }
    }
    let cycle = weekly_cycle(profile);
    let how = |t: usize| (profile.origin_hour_of_week + t) % HOURS_PER_WEEK;

    let mut targets = vec![0.0; steps * cells];
    for t in 0..steps {
        let scale = profile.base_rate * cycle[how(t)];
        for m in 0..cells {
            let lambda = scale * spatial[m];
            if mask[m] && lambda > 0.0 {
                let draw: f64 = Poisson::new(lambda)
                    .map_err(|e| Error::Data(e.to_string()))?
                    .sample(&mut rng);
                targets[t * cells + m] = draw;
            }
        }
    }

    let (temperature, precipitation) = weather(steps, profile.origin_hour_of_week, &mut rng);

    let mut observed = targets.clone();
    for _ in 0..profile.missing_blocks {
        let len = rng.random_range(6..=24).min(steps);
        let start = rng.random_range(0..=steps - len);
        let (bw, bh) = (w.div_ceil(3), h.div_ceil(3));
        let (i0, j0) = (rng.random_range(0..=w - bw), rng.random_range(0..=h - bh));
        for t in start..start + len {
            for i in i0..i0 + bw {
                for j in j0..j0 + bh {
                    observed[t * cells + i * h + j] = 0.0;
                }
            }
        }
    }

    let mut x_geo = vec![0.0; steps * cells * F_GEO];
    for t in 0..steps {
        let (s, c) = how_encoding(how(t));
        for m in 0..cells {
            let base = (t * cells + m) * F_GEO;
            x_geo[base] = observed[t * cells + m];
            if t + 1 >= HOURS_PER_WEEK {
                x_geo[base + 1] = observed[(t + 1 - HOURS_PER_WEEK) * cells + m];
            }
            x_geo[base + 2] = s;
            x_geo[base + 3] = c;
            x_geo[base + 4] = temperature[t];
            x_geo[base + 5] = precipitation[t];
        }
    }

    let positions: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let node_cell: Vec<usize> = positions
        .iter()
        .map(|&(x, y)| (x as usize).min(w - 1) * h + (y as usize).min(h - 1))
        .collect();
    let neighbourhood: Vec<Vec<usize>> = node_cell
        .iter()
        .map(|&c| {
            let (i, j) = (c / h, c % h);
            let mut out = Vec::with_capacity(9);
            for ii in i.saturating_sub(1)..=(i + 1).min(w - 1) {
                for jj in j.saturating_sub(1)..=(j + 1).min(h - 1) {
                    out.push(ii * h + jj);
                }
            }
            out
        })
        .collect();
    let mut x_sem = vec![0.0; steps * n * F_SEM];
    for t in 0..steps {
        let (s, c) = how_encoding(how(t));
        let obs = &observed[t * cells..(t + 1) * cells];
        for node in 0..n {
            let base = (t * n + node) * F_SEM;
            let hood = &neighbourhood[node];
            x_sem[base] = obs[node_cell[node]];
            x_sem[base + 1] = hood.iter().map(|&m| obs[m]).sum::<f64>() / hood.len() as f64;
            x_sem[base + 2] = s;
            x_sem[base + 3] = c;
        }
    }

    let road = knn_graph(&positions, profile.road_k);
    let history = (steps * 7 / 10).max(1);
    let risk = correlation_graph(&targets, cells, history, &node_cell);
    let poi = profile.poi.then(|| poi_graph(n, &mut rng));
    let supports = SupportSet::new(road, risk, poi, None)?;
    let map = build_grid_node_map(&node_cell, w, h, n)?;

    Ok(CityDataset {
        name: name.to_string(),
        w,
        h,
        n,
        x_geo: Tensor::new(vec![steps, cells, F_GEO], x_geo)?,
        x_sem: Tensor::new(vec![steps, n, F_SEM], x_sem)?,
        targets: Tensor::new(vec![steps, w, h], targets)?,
        mask,
        supports,
        poi_present: profile.poi,
        map,
        hotspots,
        t0: 0,
        origin_hour_of_week: profile.origin_hour_of_week,
        seed,
        profile: profile.clone(),
    })
}

/// Hourly temperature (tens of degrees) and precipitation (mm/h) series.
fn weather<R: Rng>(steps: usize, origin: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut temperature = Vec::with_capacity(steps);
    let mut precipitation = Vec::with_capacity(steps);
    let mut raining = false;
    for t in 0..steps {
        let hour = ((origin + t) % 24) as f64;
        temperature.push(1.0 + 0.8 * (2.0 * PI * (hour - 9.0) / 24.0).sin() + noise.sample(rng));
        raining = if raining { rng.random_bool(0.85) } else { rng.random_bool(0.03) };
        precipitation.push(if raining { rng.random_range(0.1..2.0) } else { 0.0 });
    }
    (temperature, precipitation)
}

/// Symmetrized unweighted `k`-nearest-neighbour graph.
fn knn_graph(pos: &[(f64, f64)], k: usize) -> Tensor {
    let n = pos.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((pos[i].0 - pos[j].0).hypot(pos[i].1 - pos[j].1), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
    }
    Tensor::from_parts(vec![n, n], a)
}

/// Positive part of the Pearson correlation between the target series of
/// the nodes' cells over the first `history` steps; zero diagonal.
fn correlation_graph(targets: &[f64], cells: usize, history: usize, node_cell: &[usize]) -> Tensor {
    let n = node_cell.len();
    let series: Vec<Vec<f64>> = node_cell
        .iter()
        .map(|&c| {
            let s: Vec<f64> = (0..history).map(|t| targets[t * cells + c]).collect();
            let mean = s.iter().sum::<f64>() / history as f64;
            s.into_iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = series.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = series[i].iter().zip(&series[j]).map(|(x, y)| x * y).sum();
                let r = (dot / (norms[i] * norms[j])).max(0.0);
                a[i * n + j] = r;
                a[j * n + i] = r;
            }
        }
    }
    Tensor::from_parts(vec![n, n], a)
}

/// Cosine similarity of random nonnegative functional profiles; zero diagonal.
fn poi_graph<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    let profiles: Vec<[f64; 5]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    let norm = |p: &[f64; 5]| p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = profiles[i].iter().zip(&profiles[j]).map(|(x, y)| x * y).sum();
            let s = dot / (norm(&profiles[i]) * norm(&profiles[j])).max(f64::MIN_POSITIVE);
            a[i * n + j] = s;
            a[j * n + i] = s;
        }
    }
    Tensor::from_parts(vec![n, n], a)
}

/// Re-indexes every dataset so that step 0 is a Monday 00:00, dropping the
/// leading partial week.
pub fn align_relative_time(datasets: Vec<CityDataset>) -> Result<Vec<CityDataset>> {
    datasets
        .into_iter()
        .map(|ds| {
            let drop = (HOURS_PER_WEEK - ds.origin_hour_of_week) % HOURS_PER_WEEK;
            let steps = ds.steps();
            if drop >= steps {
                return Err(Error::Data(format!(
                    "{}: span of {steps} hours ends before the first Monday 00:00 ({drop} hours in)",
                    ds.name
                )));
            }
            if drop == 0 {
                return Ok(ds);
            }
            let keep = steps - drop;
            Ok(CityDataset {
                x_geo: ds.x_geo.narrow(0, drop, keep)?,
                x_sem: ds.x_sem.narrow(0, drop, keep)?,
                targets: ds.targets.narrow(0, drop, keep)?,
                t0: ds.t0 + drop,
                origin_hour_of_week: 0,
                ..ds
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Sliding windows over one timeline with a chronological split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    pub t_in: usize,
    pub t_out: usize,
    /// Number of windows; window `i` reads steps `i .. i + t_in` and
    /// targets step `i + t_in`.
    pub count: usize,
    pub n_train: usize,
    pub n_val: usize,
}

impl SampleSet {
    pub fn new(steps: usize, t_in: usize, t_out: usize) -> Result<Self> {
        if t_in == 0 || t_out == 0 {
            return Err(Error::Data("window lengths must be positive".into()));
        }
        if steps < t_in + t_out {
            return Err(Error::Data(format!(
                "{steps} steps are fewer than t_in + t_out = {}",
                t_in + t_out
            )));
        }
        let count = steps - t_in - t_out + 1;
        Ok(SampleSet {
            t_in,
            t_out,
            count,
            n_train: count * 7 / 10,
            n_val: count / 10,
        })
    }

    pub fn n_test(&self) -> usize {
        self.count - self.n_train - self.n_val
    }

    pub fn target_index(&self, i: usize) -> usize {
        i + self.t_in
    }

    pub fn split_of(&self, i: usize) -> Split {
        if i < self.n_train {
            Split::Train
        } else if i < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.n_train,
            Split::Val => self.n_train..self.n_train + self.n_val,
            Split::Test => self.n_train + self.n_val..self.count,
        }
    }

    /// The shorter of two timelines' windows, so that sample `i` covers the
    /// same relative hours in every aligned city.
    pub fn joint(datasets: &[CityDataset], t_in: usize, t_out: usize) -> Result<Self> {
        let steps = datasets
            .iter()
            .map(CityDataset::steps)
            .min()
            .ok_or_else(|| Error::Data("no datasets".into()))?;
        SampleSet::new(steps, t_in, t_out)
    }
}

pub fn build_windows(ds: &CityDataset, t_in: usize, t_out: usize) -> Result<SampleSet> {
    SampleSet::new(ds.steps(), t_in, t_out)
}

/// `x + e` with `e ~ N(0, level^2)` drawn from `seed`. Level 0 returns `x`.
pub fn inject_noise(x: &Tensor, level: f64, seed: u64) -> Result<Tensor> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::Data(format!("noise level must be finite and nonnegative, got {level}")));
    }
    if level == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, level).map_err(|e| Error::Data(e.to_string()))?;
    let data = x.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Random permutation of `0..n` from `seed`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    name: String,
    w: usize,
    h: usize,
    n: usize,
    steps: usize,
    t0: usize,
    origin_hour_of_week: usize,
    seed: u64,
    poi_present: bool,
    adaptive_rank: usize,
    #[serde(default)]
    hotspots: Vec<usize>,
    geo_features: Vec<String>,
    sem_features: Vec<String>,
    profile: Profile,
}

const DATASET_FILES: [&str; 7] = ["x_geo", "x_sem", "targets", "mask", "road", "risk", "map"];

/// Writes `ds` as STT1 tensors plus `manifest.json`.
pub fn save_dataset(ds: &CityDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mask = Tensor::new(
        vec![ds.w, ds.h],
        ds.mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    let tensors = [&ds.x_geo, &ds.x_sem, &ds.targets, &mask, &ds.supports.road, &ds.supports.risk, &ds.map.matrix];
    for (name, t) in DATASET_FILES.iter().zip(tensors) {
        write_stt_file(t, dir.join(format!("{name}.stt")))?;
    }
    if ds.poi_present {
        write_stt_file(&ds.supports.poi, dir.join("poi.stt"))?;
    }
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        w: ds.w,
        h: ds.h,
        n: ds.n,
        steps: ds.steps(),
        t0: ds.t0,
        origin_hour_of_week: ds.origin_hour_of_week,
        seed: ds.seed,
        poi_present: ds.poi_present,
        adaptive_rank: ds.supports.adaptive_init()[0].0.shape()[1],
        hotspots: ds.hotspots.clone(),
        geo_features: GEO_FEATURES.iter().map(|s| s.to_string()).collect(),
        sem_features: SEM_FEATURES.iter().map(|s| s.to_string()).collect(),
        profile: ds.profile.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<CityDataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let load = |name: &str| read_stt_file(dir.join(format!("{name}.stt")));
    let x_geo = load("x_geo")?;
    let x_sem = load("x_sem")?;
    let targets = load("targets")?;
    let mask_t = load("mask")?;
    let cells = m.w * m.h;
    let expect = [
        ("x_geo", x_geo.shape(), vec![m.steps, cells, F_GEO]),
        ("x_sem", x_sem.shape(), vec![m.steps, m.n, F_SEM]),
        ("targets", targets.shape(), vec![m.steps, m.w, m.h]),
        ("mask", mask_t.shape(), vec![m.w, m.h]),
    ];
    for (name, got, want) in expect {
        if got != want.as_slice() {
            return Err(Error::Data(format!(
                "{}: {name} has shape {got:?}, manifest implies {want:?}",
                dir.display()
            )));
        }
    }
    let poi = if m.poi_present { Some(load("poi")?) } else { None };
    let supports = SupportSet::new(load("road")?, load("risk")?, poi, Some(m.adaptive_rank))?;
    let map = GridNodeMap::from_matrix(load("map")?, m.w, m.h)?;
    Ok(CityDataset {
        name: m.name,
        w: m.w,
        h: m.h,
        n: m.n,
        x_geo,
        x_sem,
        targets,
        mask: mask_t.data().iter().map(|&v| v != 0.0).collect(),
        supports,
        poi_present: m.poi_present,
        map,
        hotspots: m.hotspots,
        t0: m.t0,
        origin_hour_of_week: m.origin_hour_of_week,
        seed: m.seed,
        profile: m.profile,
    })
}
