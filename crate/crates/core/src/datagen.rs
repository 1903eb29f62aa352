//! Synthetic prior over polynomial SDEs: sampling, simulation with
//! rejection, observation corruption and dataset files.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::sde::{binomial, integrate, multi_indices_of_degree, MultiIndex, Path, PathBundle, Polynomial, Rejection, SdeSystem};

/// One row of the observation-grid table: fine step, observation gap,
/// paths per equation and observations per path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPreset {
    pub dt: f64,
    pub obs_gap: f64,
    pub paths: usize,
    pub obs_per_path: usize,
}

impl GridPreset {
    /// Fine steps per observation gap.
    pub fn factor(&self) -> usize {
        (self.obs_gap / self.dt).round().max(1.0) as usize
    }

    pub fn horizon(&self) -> f64 {
        self.obs_gap * self.obs_per_path as f64
    }

    pub fn fine_steps(&self) -> usize {
        self.factor() * self.obs_per_path
    }

    /// The three rows used for pretraining data.
    pub fn full_table() -> Vec<GridPreset> {
        vec![
            GridPreset { dt: 0.004, obs_gap: 0.1, paths: 100, obs_per_path: 128 },
            GridPreset { dt: 0.002, obs_gap: 0.01, paths: 25, obs_per_path: 512 },
            GridPreset { dt: 0.001, obs_gap: 0.001, paths: 12, obs_per_path: 1024 },
        ]
    }

    /// Same gaps and horizons with about 1024 observations per equation.
    pub fn desk_table() -> Vec<GridPreset> {
        vec![
            GridPreset { dt: 0.004, obs_gap: 0.1, paths: 8, obs_per_path: 128 },
            GridPreset { dt: 0.002, obs_gap: 0.01, paths: 2, obs_per_path: 512 },
            GridPreset { dt: 0.001, obs_gap: 0.001, paths: 1, obs_per_path: 1024 },
        ]
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.obs_gap >= self.dt) || self.paths == 0 || self.obs_per_path < 2 {
            return Err(Error::config(format!("invalid grid preset {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub d_max: usize,
    pub drift_max_deg: u32,
    pub diffusion_max_deg: u32,
    pub threshold: f64,
    pub presets: Vec<GridPreset>,
    /// Relative weight of dimension `i + 1`.
    pub dim_ratio: Vec<usize>,
    pub max_attempts: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            d_max: 3,
            drift_max_deg: 3,
            diffusion_max_deg: 2,
            threshold: 100.0,
            presets: GridPreset::full_table(),
            dim_ratio: vec![1, 2, 3],
            max_attempts: 10_000,
        }
    }
}

impl PriorConfig {
    pub fn desk() -> Self {
        PriorConfig { presets: GridPreset::desk_table(), ..PriorConfig::default() }
    }

    /// Restricts generation to a single dimension.
    pub fn only_dim(mut self, d: usize) -> Self {
        self.dim_ratio = (1..=self.d_max).map(|k| usize::from(k == d)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max == 0 || self.dim_ratio.len() != self.d_max {
            return Err(Error::config("dim ratio must list one weight per dimension"));
        }
        if self.dim_ratio.iter().all(|&w| w == 0) {
            return Err(Error::config("dim ratio needs a positive weight"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::config("rejection threshold must be positive"));
        }
        if self.presets.is_empty() {
            return Err(Error::config("at least one grid preset is required"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("attempt cap must be positive"));
        }
        self.presets.iter().try_for_each(GridPreset::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub noise_min: f64,
    pub noise_max: f64,
    pub survival_min: f64,
    pub survival_max: f64,
    /// Probability that an equation receives additive noise.
    pub noise_fraction: f64,
    /// Probability that an equation is thinned to an irregular grid.
    pub thinning_fraction: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            noise_min: 0.0,
            noise_max: 0.1,
            survival_min: 0.9,
            survival_max: 1.0,
            noise_fraction: 1.0 / 3.0,
            thinning_fraction: 1.0 / 3.0,
        }
    }
}

impl CorruptionConfig {
    pub fn none() -> Self {
        CorruptionConfig { noise_fraction: 0.0, thinning_fraction: 0.0, ..CorruptionConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.noise_min
            && self.noise_min <= self.noise_max
            && 0.0 < self.survival_min
            && self.survival_min <= self.survival_max
            && self.survival_max <= 1.0
            && (0.0..=1.0).contains(&self.noise_fraction)
            && (0.0..=1.0).contains(&self.thinning_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid corruption config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquationRecord {
    pub system: SdeSystem,
    pub preset: usize,
    pub clean: PathBundle,
    pub corrupted: PathBundle,
    /// Relative noise scale, zero when no noise was added.
    pub noise_sigma: f64,
    /// Bernoulli survival probability, one when the grid was not thinned.
    pub survival: f64,
}

/// Random polynomial in `arity` variables of degree at most `max_deg`:
/// a uniform subset of degrees, for each a uniform subset of its monomials,
/// standard normal coefficients.
pub fn sample_polynomial<R: Rng + ?Sized>(arity: usize, max_deg: u32, rng: &mut R) -> Polynomial {
    let n_degrees_available = max_deg as usize + 1;
    let n_deg = rng.random_range(1..=(max_deg as usize).max(1)).min(n_degrees_available);
    let mut degrees: Vec<u32> = index::sample(rng, n_degrees_available, n_deg).into_iter().map(|i| i as u32).collect();
    degrees.sort_unstable();
    let mut terms = Vec::new();
    for m in degrees {
        let candidates = multi_indices_of_degree(arity, m);
        debug_assert_eq!(candidates.len() as u64, binomial(m as u64 + arity as u64 - 1, arity as u64 - 1));
        let n_mon = rng.random_range(1..=candidates.len());
        let mut picked: Vec<usize> = index::sample(rng, candidates.len(), n_mon).into_vec();
        picked.sort_unstable();
        for j in picked {
            let c: f64 = rng.sample(StandardNormal);
            terms.push((candidates[j].clone(), c));
        }
    }
    Polynomial::new(arity, terms).expect("sampled exponents have the requested arity")
}

/// `d` independent drift and diffusion polynomials.
pub fn sample_system<R: Rng + ?Sized>(d: usize, cfg: &PriorConfig, rng: &mut R) -> Result<SdeSystem> {
    if d == 0 || d > cfg.d_max {
        return Err(Error::config(format!("dimension {d} outside 1..={}", cfg.d_max)));
    }
    let drift = (0..d).map(|_| sample_polynomial(d, cfg.drift_max_deg, rng)).collect();
    let diffusion = (0..d).map(|_| sample_polynomial(d, cfg.diffusion_max_deg, rng)).collect();
    SdeSystem::new(drift, diffusion)
}

/// Simulates `preset.paths` paths from the given initial states over the
/// preset horizon and keeps every `factor`-th state, `obs_per_path` in all.
/// Fails fast if any state becomes non-finite or leaves `[-threshold, threshold]`.
pub fn simulate_preset(
    sys: &SdeSystem,
    preset: &GridPreset,
    initial_states: &[Vec<f64>],
    threshold: f64,
    seed: SeedTree,
) -> Result<std::result::Result<PathBundle, Rejection>> {
    if initial_states.iter().flatten().any(|v| !v.is_finite()) {
        return Ok(Err(Rejection::NonFinite));
    }
    if initial_states.iter().flatten().any(|v| v.abs() > threshold) {
        return Ok(Err(Rejection::Threshold));
    }
    let out = integrate(sys, initial_states, preset.dt, preset.fine_steps(), preset.factor(), seed, Some(threshold))?;
    Ok(out.map(|mut bundle| {
        let gap = preset.obs_gap;
        for p in &mut bundle.paths {
            p.times.truncate(preset.obs_per_path);
            p.states.truncate(preset.obs_per_path * bundle.dim);
            // Recorded times are multiples of the fine step; snap to the
            // nominal observation grid.
            for (l, t) in p.times.iter_mut().enumerate() {
                *t = l as f64 * gap;
            }
        }
        bundle
    }))
}

/// Outcome of one candidate equation.
#[derive(Clone, Debug)]
pub enum Candidate {
    Accepted { system: SdeSystem, preset: usize, clean: PathBundle },
    Rejected { system: SdeSystem, preset: usize, reason: Rejection },
}

/// Samples a system of dimension `d` and simulates it on `preset` from
/// standard normal initial states.
pub fn generate_equation(d: usize, preset: usize, cfg: &PriorConfig, seed: SeedTree) -> Result<Candidate> {
    let grid = cfg.presets.get(preset).ok_or_else(|| Error::config(format!("no grid preset {preset}")))?;
    let mut rng = seed.named("system").rng();
    let system = sample_system(d, cfg, &mut rng)?;
    let mut init_rng = seed.named("initial").rng();
    let init: Vec<Vec<f64>> = (0..grid.paths).map(|_| (0..d).map(|_| init_rng.sample(StandardNormal)).collect()).collect();
    match simulate_preset(&system, grid, &init, cfg.threshold, seed.named("paths"))? {
        Ok(clean) => Ok(Candidate::Accepted { system, preset, clean }),
        Err(reason) => Ok(Candidate::Rejected { system, preset, reason }),
    }
}

/// Keeps each observation with probability `survival`; the first
/// observation of every path always survives.
pub fn thin_bernoulli<R: Rng + ?Sized>(bundle: &PathBundle, survival: f64, rng: &mut R) -> PathBundle {
    let d = bundle.dim;
    let paths = bundle
        .paths
        .iter()
        .map(|p| {
            let mut out = Path { times: Vec::new(), states: Vec::new(), diverged: p.diverged };
            for l in 0..p.len() {
                let keep = l == 0 || rng.random::<f64>() < survival;
                if keep {
                    out.times.push(p.times[l]);
                    out.states.extend_from_slice(p.state(l, d));
                }
            }
            out
        })
        .collect();
    PathBundle { dim: d, paths }
}

/// Half the per-component spread over all observations of the bundle.
pub fn component_ranges(bundle: &PathBundle) -> Vec<f64> {
    let d = bundle.dim;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in &bundle.paths {
        for row in p.states.chunks_exact(d) {
            for i in 0..d {
                lo[i] = lo[i].min(row[i]);
                hi[i] = hi[i].max(row[i]);
            }
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| if h >= l { 0.5 * (h - l) } else { 0.0 }).collect()
}

/// Adds `N(0, (σ r_j)²)` to component `j` of every observation.
pub fn add_relative_noise<R: Rng + ?Sized>(bundle: &PathBundle, sigma: f64, rng: &mut R) -> PathBundle {
    let mut out = bundle.clone();
    if sigma == 0.0 {
        return out;
    }
    let d = bundle.dim;
    let r = component_ranges(bundle);
    for p in &mut out.paths {
        for row in p.states.chunks_exact_mut(d) {
            for i in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                row[i] += sigma * r[i] * eps;
            }
        }
    }
    out
}

/// Draws the corruption for one accepted equation: thinning then noise,
/// each independently with its configured probability.
pub fn corrupt(clean: &PathBundle, cfg: &CorruptionConfig, seed: SeedTree) -> (PathBundle, f64, f64) {
    let mut rng = seed.rng();
    let thin = rng.random::<f64>() < cfg.thinning_fraction;
    let noisy = rng.random::<f64>() < cfg.noise_fraction;
    let survival = if thin { rng.random_range(cfg.survival_min..=cfg.survival_max) } else { 1.0 };
    let sigma = if noisy { rng.random_range(cfg.noise_min..=cfg.noise_max) } else { 0.0 };
    let mut bundle = if thin { thin_bernoulli(clean, survival, &mut rng) } else { clean.clone() };
    if noisy {
        bundle = add_relative_noise(&bundle, sigma, &mut rng);
    }
    (bundle, sigma, survival)
}

/// Assigns dimensions to `count` slots in proportion to `ratio` (largest
/// remainder), then shuffles the assignment.
pub fn assign_dimensions(count: usize, ratio: &[usize], seed: SeedTree) -> Vec<usize> {
    let total: usize = ratio.iter().sum();
    let exact: Vec<f64> = ratio.iter().map(|&w| count as f64 * w as f64 / total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut short = count - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratio.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(b.cmp(&a))
    });
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        if ratio[i] > 0 {
            counts[i] += 1;
            short -= 1;
        }
    }
    let mut dims: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i + 1, c)).collect();
    dims.shuffle(&mut seed.rng());
    dims
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub dim: usize,
    pub accepted: usize,
    pub rejected_non_finite: usize,
    pub rejected_threshold: usize,
}

impl DimStats {
    pub fn attempts(&self) -> usize {
        self.accepted + self.rejected_non_finite + self.rejected_threshold
    }

    pub fn rejection_rate(&self) -> f64 {
        let a = self.attempts();
        if a == 0 {
            0.0
        } else {
            (self.rejected_non_finite + self.rejected_threshold) as f64 / a as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub prior: PriorConfig,
    pub corruption: CorruptionConfig,
    pub seed: u64,
    pub count: usize,
    pub stats: Vec<DimStats>,
    /// Free-form provenance supplied by the caller (for example the command
    /// line configuration that produced the file).
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<EquationRecord>,
}

pub const DATASET_MAGIC: &[u8; 8] = b"SDEFIMDS";
pub const DATASET_VERSION: u32 = 1;

struct SlotResult {
    record: EquationRecord,
    rejected_non_finite: usize,
    rejected_threshold: usize,
}

fn generate_slot(
    slot: usize,
    d: usize,
    prior: &PriorConfig,
    corruption: &CorruptionConfig,
    seed: SeedTree,
) -> Result<SlotResult> {
    let slot_seed = seed.named("slots").child(slot as u64);
    let preset = slot_seed.named("preset").rng().random_range(0..prior.presets.len());
    let (mut nf, mut th) = (0, 0);
    for attempt in 0..prior.max_attempts {
        match generate_equation(d, preset, prior, slot_seed.child(attempt as u64))? {
            Candidate::Accepted { system, preset, clean } => {
                let (corrupted, noise_sigma, survival) = corrupt(&clean, corruption, slot_seed.named("corruption"));
                let record = EquationRecord { system, preset, clean, corrupted, noise_sigma, survival };
                return Ok(SlotResult { record, rejected_non_finite: nf, rejected_threshold: th });
            }
            Candidate::Rejected { reason: Rejection::NonFinite, .. } => nf += 1,
            Candidate::Rejected { reason: Rejection::Threshold, .. } => th += 1,
        }
    }
    Err(Error::RejectionCap { slot, attempts: prior.max_attempts })
}

/// Generates `count` accepted equations. Slot `i` depends only on `seed` and
/// `i`, so the output does not depend on how slots are scheduled.
pub fn generate_dataset(prior: &PriorConfig, corruption: &CorruptionConfig, count: usize, seed: u64) -> Result<Dataset> {
    prior.validate()?;
    corruption.validate()?;
    if count == 0 {
        return Err(Error::config("dataset count must be at least 1"));
    }
    let root = SeedTree::new(seed);
    let dims = assign_dimensions(count, &prior.dim_ratio, root.named("dims"));
    let slots: Vec<SlotResult> = dims
        .par_iter()
        .enumerate()
        .map(|(slot, &d)| generate_slot(slot, d, prior, corruption, root))
        .collect::<Result<_>>()?;
    let mut stats: Vec<DimStats> = (1..=prior.d_max).map(|dim| DimStats { dim, ..DimStats::default() }).collect();
    for s in &slots {
        let st = &mut stats[s.record.system.dim() - 1];
        st.accepted += 1;
        st.rejected_non_finite += s.rejected_non_finite;
        st.rejected_threshold += s.rejected_threshold;
    }
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            prior: prior.clone(),
            corruption: corruption.clone(),
            seed,
            count,
            stats,
            run_config: serde_json::Value::Null,
        },
        records: slots.into_iter().map(|s| s.record).collect(),
    })
}

/// Rejection statistics over `candidates` independent draws of dimension
/// `d`, each on a uniformly chosen preset.
pub fn measure_rejection(d: usize, prior: &PriorConfig, candidates: usize, seed: u64) -> Result<DimStats> {
    prior.validate()?;
    let root = SeedTree::new(seed).named("rejection").child(d as u64);
    let outcomes: Vec<Candidate> = (0..candidates)
        .into_par_iter()
        .map(|i| {
            let s = root.child(i as u64);
            let preset = s.named("preset").rng().random_range(0..prior.presets.len());
            generate_equation(d, preset, prior, s)
        })
        .collect::<Result<_>>()?;
    let mut st = DimStats { dim: d, ..DimStats::default() };
    for o in outcomes {
        match o {
            Candidate::Accepted { .. } => st.accepted += 1,
            Candidate::Rejected { reason: Rejection::NonFinite, .. } => st.rejected_non_finite += 1,
            Candidate::Rejected { reason: Rejection::Threshold, .. } => st.rejected_threshold += 1,
        }
    }
    Ok(st)
}

type Le = LittleEndian;

fn write_poly<W: Write>(w: &mut W, p: &Polynomial) -> std::io::Result<()> {
    w.write_u32::<Le>(p.terms().len() as u32)?;
    for (alpha, c) in p.terms() {
        for &e in alpha.exponents() {
            w.write_u32::<Le>(e)?;
        }
        w.write_f64::<Le>(*c)?;
    }
    Ok(())
}

fn read_poly<R: Read>(r: &mut R, arity: usize) -> Result<Polynomial> {
    let n = r.read_u32::<Le>()? as usize;
    let mut terms = Vec::with_capacity(n);
    for _ in 0..n {
        let exps = (0..arity).map(|_| r.read_u32::<Le>()).collect::<std::io::Result<Vec<_>>>()?;
        terms.push((MultiIndex::new(exps), r.read_f64::<Le>()?));
    }
    let p = Polynomial::new(arity, terms)?;
    if p.terms().len() != n {
        return Err(Error::format("polynomial terms are not canonical"));
    }
    Ok(p)
}

fn write_bundle<W: Write>(w: &mut W, b: &PathBundle) -> std::io::Result<()> {
    w.write_u32::<Le>(b.paths.len() as u32)?;
    for p in &b.paths {
        w.write_u32::<Le>(p.len() as u32)?;
        w.write_u8(p.diverged as u8)?;
        for &t in &p.times {
            w.write_f64::<Le>(t)?;
        }
        for &v in &p.states {
            w.write_f64::<Le>(v)?;
        }
    }
    Ok(())
}

fn read_bundle<R: Read>(r: &mut R, dim: usize) -> Result<PathBundle> {
    let k = r.read_u32::<Le>()? as usize;
    let mut paths = Vec::with_capacity(k);
    for _ in 0..k {
        let len = r.read_u32::<Le>()? as usize;
        let diverged = r.read_u8()? != 0;
        let mut times = vec![0.0; len];
        r.read_f64_into::<Le>(&mut times)?;
        let mut states = vec![0.0; len * dim];
        r.read_f64_into::<Le>(&mut states)?;
        paths.push(Path { times, states, diverged });
    }
    Ok(PathBundle { dim, paths })
}

/// Little-endian binary encoding of one record.
pub fn encode_record(rec: &EquationRecord) -> Vec<u8> {
    let mut buf = Vec::new();
    let d = rec.system.dim();
    buf.write_u32::<Le>(d as u32).unwrap();
    buf.write_u32::<Le>(rec.preset as u32).unwrap();
    buf.write_f64::<Le>(rec.noise_sigma).unwrap();
    buf.write_f64::<Le>(rec.survival).unwrap();
    for p in rec.system.drift_polys().iter().chain(rec.system.diffusion_polys()) {
        write_poly(&mut buf, p).unwrap();
    }
    write_bundle(&mut buf, &rec.clean).unwrap();
    write_bundle(&mut buf, &rec.corrupted).unwrap();
    buf
}

pub fn decode_record(mut bytes: &[u8]) -> Result<EquationRecord> {
    let r = &mut bytes;
    let d = r.read_u32::<Le>()? as usize;
    if d == 0 {
        return Err(Error::format("record with zero dimension"));
    }
    let preset = r.read_u32::<Le>()? as usize;
    let noise_sigma = r.read_f64::<Le>()?;
    let survival = r.read_f64::<Le>()?;
    let drift = (0..d).map(|_| read_poly(r, d)).collect::<Result<Vec<_>>>()?;
    let diffusion = (0..d).map(|_| read_poly(r, d)).collect::<Result<Vec<_>>>()?;
    let clean = read_bundle(r, d)?;
    let corrupted = read_bundle(r, d)?;
    if !r.is_empty() {
        return Err(Error::format("trailing bytes after record"));
    }
    Ok(EquationRecord { system: SdeSystem::new(drift, diffusion)?, preset, clean, corrupted, noise_sigma, survival })
}

impl Dataset {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<Le>(self.header.version)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_u64::<Le>(header.len() as u64)?;
        w.write_all(&header)?;
        w.write_u64::<Le>(self.records.len() as u64)?;
        for rec in &self.records {
            let bytes = encode_record(rec);
            w.write_u64::<Le>(bytes.len() as u64)?;
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Dataset> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::format("not a dataset file"))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("not a dataset file"));
        }
        let version = r.read_u32::<Le>()?;
        if version != DATASET_VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let len = r.read_u64::<Le>()? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: DatasetHeader = serde_json::from_slice(&header)?;
        let n = r.read_u64::<Le>()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        let mut buf = Vec::new();
        for _ in 0..n {
            let len = r.read_u64::<Le>()? as usize;
            buf.resize(len, 0);
            r.read_exact(&mut buf)?;
            records.push(decode_record(&buf)?);
        }
        Ok(Dataset { header, records })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Dataset> {
        Dataset::read_from(&mut bytes)
    }

    /// Structured-text view of the whole dataset.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "header": self.header, "records": self.records })
    }
}
