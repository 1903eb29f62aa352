//! Canonical systems, signature-kernel MMD between path ensembles and grid
//! MSE between estimated and true vector fields.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::VectorFieldEstimate;
use crate::normalize::NormalizationRecord;
use crate::rng::SeedTree;
use crate::sde::{simulate_on_times, Path, PathBundle, Polynomial, SdeSystem, VectorField};

/// Field values beyond this magnitude are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    Point(Vec<f64>),
    /// `N(0, variance · I)`
    Gaussian { variance: f64 },
}

impl InitialCondition {
    pub fn sample(&self, dim: usize, n: usize, seed: SeedTree) -> Vec<Vec<f64>> {
        match self {
            InitialCondition::Point(x) => vec![x.clone(); n],
            InitialCondition::Gaussian { variance } => {
                let sd = variance.sqrt();
                (0..n)
                    .map(|k| {
                        let mut rng = seed.child(k as u64).rng();
                        (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
                    })
                    .collect()
            }
        }
    }
}

/// How the catalog simulates observations of a system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationPlan {
    pub paths: usize,
    pub observations: usize,
    pub obs_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub system: SdeSystem,
    pub initial: InitialCondition,
    pub bounds: Vec<(f64, f64)>,
    /// Euler–Maruyama step.
    pub dt: f64,
    pub context: ObservationPlan,
    pub reference: ObservationPlan,
}

pub const CATALOG: [&str; 8] =
    ["double-well", "2d-synthetic", "damped-linear", "damped-cubic", "duffing", "selkov", "hopf", "lorenz"];

fn poly(arity: usize, pairs: &[(&[u32], f64)]) -> Polynomial {
    Polynomial::from_pairs(arity, pairs).expect("catalog polynomial")
}

fn canonical_2d(name: &str, drift: [Polynomial; 2], x0: [f64; 2], lo: f64, hi: f64) -> CatalogEntry {
    let one = Polynomial::constant(2, 1.0);
    canonical(name, drift.to_vec(), vec![one.clone(), one], x0.to_vec(), vec![(lo, hi); 2])
}

fn canonical(name: &str, drift: Vec<Polynomial>, diffusion: Vec<Polynomial>, x0: Vec<f64>, bounds: Vec<(f64, f64)>) -> CatalogEntry {
    CatalogEntry {
        name: name.to_string(),
        system: SdeSystem::new(drift, diffusion).expect("catalog system"),
        initial: InitialCondition::Point(x0),
        bounds,
        dt: 0.002,
        context: ObservationPlan { paths: 1, observations: 5000, obs_gap: 0.002 },
        reference: ObservationPlan { paths: 100, observations: 500, obs_gap: 0.002 },
    }
}

pub fn canonical_system(name: &str) -> Result<CatalogEntry> {
    let entry = match name {
        "double-well" => canonical(
            name,
            vec![poly(1, &[(&[1], 4.0), (&[3], -4.0)])],
            vec![poly(1, &[(&[0], 4.0), (&[2], -1.25)])],
            vec![0.0],
            vec![(-2.0, 2.0)],
        ),
        "2d-synthetic" => canonical(
            name,
            vec![
                poly(2, &[(&[1, 0], 1.0), (&[0, 1], -1.0), (&[1, 2], -1.0), (&[3, 0], -1.0)]),
                poly(2, &[(&[1, 0], 1.0), (&[0, 1], 1.0), (&[2, 1], -1.0), (&[0, 3], -1.0)]),
            ],
            vec![poly(2, &[(&[0, 0], 1.0), (&[0, 2], 1.0)]), poly(2, &[(&[0, 0], 1.0), (&[2, 0], 1.0)])],
            vec![1.5, 1.5],
            vec![(-4.0, 4.0); 2],
        ),
        "damped-linear" => canonical_2d(
            name,
            [poly(2, &[(&[1, 0], -0.1), (&[0, 1], 2.0)]), poly(2, &[(&[1, 0], -2.0), (&[0, 1], -0.1)])],
            [2.5, -5.0],
            -2.0,
            2.0,
        ),
        "damped-cubic" => canonical_2d(
            name,
            [poly(2, &[(&[3, 0], -0.1), (&[0, 3], 2.0)]), poly(2, &[(&[3, 0], -2.0), (&[0, 3], -0.1)])],
            [0.0, -1.0],
            -2.0,
            2.0,
        ),
        "duffing" => canonical_2d(
            name,
            [poly(2, &[(&[0, 1], 1.0)]), poly(2, &[(&[3, 0], -1.0), (&[1, 0], 1.0), (&[0, 1], -0.35)])],
            [3.0, 2.0],
            -4.0,
            4.0,
        ),
        "selkov" => canonical_2d(
            name,
            [
                poly(2, &[(&[1, 0], -1.0), (&[0, 1], 0.08), (&[2, 1], 1.0)]),
                poly(2, &[(&[0, 0], 0.6), (&[0, 1], -0.08), (&[2, 1], -1.0)]),
            ],
            [0.7, 1.25],
            -2.0,
            4.0,
        ),
        "hopf" => canonical_2d(
            name,
            [
                poly(2, &[(&[1, 0], 0.5), (&[0, 1], 1.0), (&[3, 0], -1.0), (&[1, 2], -1.0)]),
                poly(2, &[(&[1, 0], -1.0), (&[0, 1], 0.5), (&[2, 1], -1.0), (&[0, 3], -1.0)]),
            ],
            [2.0, 2.0],
            -2.0,
            2.0,
        ),
        "lorenz" => {
            let (sigma, rho, beta, alpha) = (10.0, 28.0, 8.0 / 3.0, 0.15);
            let g = Polynomial::constant(3, alpha * alpha);
            CatalogEntry {
                name: name.to_string(),
                system: SdeSystem::new(
                    vec![
                        poly(3, &[(&[1, 0, 0], -sigma), (&[0, 1, 0], sigma)]),
                        poly(3, &[(&[1, 0, 0], rho), (&[1, 0, 1], -1.0), (&[0, 1, 0], -1.0)]),
                        poly(3, &[(&[1, 1, 0], 1.0), (&[0, 0, 1], -beta)]),
                    ],
                    vec![g.clone(), g.clone(), g],
                )
                .expect("catalog system"),
                initial: InitialCondition::Gaussian { variance: 1.0 },
                bounds: vec![(-20.0, 20.0), (-25.0, 25.0), (0.0, 50.0)],
                dt: 0.001,
                context: ObservationPlan { paths: 1024, observations: 41, obs_gap: 0.025 },
                reference: ObservationPlan { paths: 128, observations: 41, obs_gap: 0.025 },
            }
        }
        _ => return Err(Error::UnknownSystem(name.to_string())),
    };
    Ok(entry)
}

impl CatalogEntry {
    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn eval_grid(&self, total: usize) -> Result<EvalGrid> {
        EvalGrid::new(self.bounds.clone(), total)
    }

    /// Simulates `plan.paths` paths from `initial` on the fine step `self.dt`,
    /// recording every `round(obs_gap / dt)` steps.
    pub fn simulate_plan(&self, plan: &ObservationPlan, initial: &InitialCondition, seed: SeedTree) -> Result<PathBundle> {
        if plan.observations < 2 || plan.paths == 0 {
            return Err(Error::config("observation plan needs ≥1 path and ≥2 observations"));
        }
        let every = (plan.obs_gap / self.dt).round().max(1.0) as usize;
        let init = initial.sample(self.dim(), plan.paths, seed.named("init"));
        let times: Vec<f64> = (0..plan.observations).map(|l| l as f64 * every as f64 * self.dt).collect();
        simulate_on_times(&self.system, &init, &times, every, seed.named("paths"))
    }

    pub fn simulate_context(&self, seed: SeedTree) -> Result<PathBundle> {
        self.simulate_plan(&self.context, &self.initial, seed)
    }

    pub fn simulate_reference(&self, seed: SeedTree) -> Result<PathBundle> {
        self.simulate_plan(&self.reference, &self.initial, seed)
    }
}

/// Per-dimension mean and standard deviation over every state of a bundle.
pub fn bundle_moments(bundle: &PathBundle) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = bundle.dim;
    let n = bundle.num_observations();
    if n < 2 {
        return Err(Error::EmptyContext);
    }
    let mut mean = vec![0.0; d];
    for p in &bundle.paths {
        for x in p.states.chunks_exact(d) {
            for i in 0..d {
                mean[i] += x[i];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for p in &bundle.paths {
        for x in p.states.chunks_exact(d) {
            for i in 0..d {
                var[i] += (x[i] - mean[i]).powi(2);
            }
        }
    }
    let sd = var.iter().map(|v| (v / (n - 1) as f64).sqrt().max(1e-12)).collect();
    Ok((mean, sd))
}

pub fn standardize(bundle: &PathBundle, mean: &[f64], sd: &[f64]) -> Result<PathBundle> {
    check_dim(bundle.dim, mean.len())?;
    check_dim(bundle.dim, sd.len())?;
    let d = bundle.dim;
    let mut out = bundle.clone();
    for p in &mut out.paths {
        for (k, v) in p.states.iter_mut().enumerate() {
            *v = (*v - mean[k % d]) / sd[k % d];
        }
    }
    Ok(out)
}

pub fn add_gaussian_noise(bundle: &PathBundle, sd: f64, seed: SeedTree) -> PathBundle {
    let mut out = bundle.clone();
    for (k, p) in out.paths.iter_mut().enumerate() {
        let mut rng = seed.child(k as u64).rng();
        for v in &mut p.states {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// The standardized Lorenz benchmark: a noisy training set and a clean
/// reference set, both standardized with the training statistics.
#[derive(Clone, Debug)]
pub struct LorenzData {
    pub train: PathBundle,
    pub reference: PathBundle,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

pub const LORENZ_NOISE: f64 = 0.01;

pub fn lorenz_data(train_paths: usize, reference_paths: usize, reference_init: &InitialCondition, seed: SeedTree) -> Result<LorenzData> {
    let entry = canonical_system("lorenz")?;
    let train_plan = ObservationPlan { paths: train_paths, ..entry.context };
    let ref_plan = ObservationPlan { paths: reference_paths, ..entry.reference };
    let raw_train = entry.simulate_plan(&train_plan, &entry.initial, seed.named("train"))?;
    let raw_ref = entry.simulate_plan(&ref_plan, reference_init, seed.named("reference"))?;
    let (mean, sd) = bundle_moments(&raw_train)?;
    let train = add_gaussian_noise(&standardize(&raw_train, &mean, &sd)?, LORENZ_NOISE, seed.named("noise"));
    let reference = standardize(&raw_ref, &mean, &sd)?;
    Ok(LorenzData { train, reference, mean, sd })
}

// ---------------------------------------------------------------------------
// Signature kernel

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKernel {
    Linear,
    /// `exp(-|x-y|² / (2 σ²))`; `None` selects σ by the median heuristic.
    Rbf { bandwidth: Option<f64> },
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub level: usize,
    pub kernel: BaseKernel,
    /// Caps how many consecutive factors of a signature term may share one
    /// path segment. `None` is the exact kernel of the piecewise-linear path;
    /// `Some(1)` is the cheaper first-order discretisation.
    #[serde(default)]
    pub order: Option<usize>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig { level: 5, kernel: BaseKernel::Rbf { bandwidth: None }, order: None }
    }
}

impl MmdConfig {
    pub fn linear() -> Self {
        MmdConfig { kernel: BaseKernel::Linear, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level == 0 {
            return Err(Error::config("signature level must be ≥ 1"));
        }
        if self.order == Some(0) {
            return Err(Error::config("order must be ≥ 1"));
        }
        if let BaseKernel::Rbf { bandwidth: Some(b) } = self.kernel {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::config(format!("bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }

    /// Fixes the bandwidth from `paths` if it is still open.
    pub fn resolved<'a>(&self, dim: usize, paths: impl IntoIterator<Item = &'a Path>) -> MmdConfig {
        match self.kernel {
            BaseKernel::Rbf { bandwidth: None } => {
                MmdConfig { kernel: BaseKernel::Rbf { bandwidth: Some(median_bandwidth(dim, paths)) }, ..*self }
            }
            _ => *self,
        }
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self.kernel {
            BaseKernel::Rbf { bandwidth } => bandwidth,
            _ => None,
        }
    }
}

const MEDIAN_SAMPLE: usize = 1000;

/// Median pairwise Euclidean distance over pooled states, on an evenly
/// strided subsample of at most 1000 states. Falls back to 1 when the
/// median is zero.
pub fn median_bandwidth<'a>(dim: usize, paths: impl IntoIterator<Item = &'a Path>) -> f64 {
    let states: Vec<&[f64]> = paths
        .into_iter()
        .flat_map(|p| p.states.chunks_exact(dim))
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .collect();
    let stride = states.len().div_ceil(MEDIAN_SAMPLE).max(1);
    let pts: Vec<&[f64]> = states.into_iter().step_by(stride).collect();
    let mut dists = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
    for i in 0..pts.len() {
        for j in 0..i {
            dists.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 && m.is_finite() {
        *m
    } else {
        1.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn base_value(kernel: BaseKernel, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        BaseKernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        BaseKernel::Rbf { bandwidth } => {
            let s = bandwidth.unwrap_or(1.0);
            (-sq_dist(a, b) / (2.0 * s * s)).exp()
        }
        BaseKernel::Constant(c) => c,
    }
}

/// Increment matrix `A[i][j]` over segments, row-major `(La−1) × (Lb−1)`.
fn increments(a: &[f64], b: &[f64], dim: usize, kernel: BaseKernel) -> (Vec<f64>, usize, usize) {
    let (la, lb) = (a.len() / dim, b.len() / dim);
    let mut k = vec![0.0; la * lb];
    for i in 0..la {
        for j in 0..lb {
            k[i * lb + j] = base_value(kernel, &a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
        }
    }
    let (n, m) = (la - 1, lb - 1);
    let mut inc = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            inc[i * m + j] = k[(i + 1) * lb + j + 1] - k[i * lb + j + 1] - k[(i + 1) * lb + j] + k[i * lb + j];
        }
    }
    (inc, n, m)
}

/// Truncated signature kernel of two paths given as row-major state buffers.
///
/// The level-`a` term sums `Π A[i_k][j_k]` over non-decreasing index
/// sequences of length `a`, each divided by the factorials of the run lengths
/// of its repeated indices. The recursion tracks the current run lengths
/// `(r, s)` of both sequences.
pub fn signature_kernel_states(a: &[f64], b: &[f64], dim: usize, cfg: &MmdConfig) -> Result<f64> {
    cfg.validate()?;
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::format("state buffer is not a multiple of the dimension"));
    }
    for s in [a, b] {
        if s.len() / dim < 2 {
            return Err(Error::DegeneratePath(s.len() / dim));
        }
    }
    let (inc, n, m) = increments(a, b, dim, cfg.kernel);
    let cap = cfg.order.unwrap_or(cfg.level).min(cfg.level);
    let nm = n * m;

    // prev[(r-1) * cap + (s-1)] holds P[r][s] at the current level.
    let mut prev: Vec<Option<Vec<f64>>> = vec![None; cap * cap];
    prev[0] = Some(inc.clone());
    let mut total = 1.0 + inc.iter().sum::<f64>();

    for _level in 2..=cfg.level {
        // Aggregates of the previous level.
        let mut all = vec![0.0; nm];
        let mut by_r: Vec<Vec<f64>> = vec![vec![0.0; nm]; cap];
        let mut by_s: Vec<Vec<f64>> = vec![vec![0.0; nm]; cap];
        for r in 0..cap {
            for s in 0..cap {
                if let Some(p) = &prev[r * cap + s] {
                    for k in 0..nm {
                        all[k] += p[k];
                        by_r[r][k] += p[k];
                        by_s[s][k] += p[k];
                    }
                }
            }
        }
        // Strict 2D prefix of `all`: sum over i' < i, j' < j.
        let mut strict = vec![0.0; nm];
        {
            let mut cum = vec![0.0; (n + 1) * (m + 1)];
            for i in 0..n {
                for j in 0..m {
                    cum[(i + 1) * (m + 1) + j + 1] =
                        all[i * m + j] + cum[i * (m + 1) + j + 1] + cum[(i + 1) * (m + 1) + j] - cum[i * (m + 1) + j];
                }
            }
            for i in 0..n {
                for j in 0..m {
                    strict[i * m + j] = cum[i * (m + 1) + j];
                }
            }
        }
        let mut next: Vec<Option<Vec<f64>>> = vec![None; cap * cap];
        next[0] = Some((0..nm).map(|k| inc[k] * strict[k]).collect());
        if cap > 1 {
            for r in 0..cap - 1 {
                // Same row, new column: sum over j' < j of by_r[r][i][j'].
                let src = &by_r[r];
                if src.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let f = 1.0 / (r + 2) as f64;
                let mut out = vec![0.0; nm];
                for i in 0..n {
                    let mut run = 0.0;
                    for j in 0..m {
                        out[i * m + j] = f * inc[i * m + j] * run;
                        run += src[i * m + j];
                    }
                }
                next[(r + 1) * cap] = Some(out);
            }
            for s in 0..cap - 1 {
                let src = &by_s[s];
                if src.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let f = 1.0 / (s + 2) as f64;
                let mut out = vec![0.0; nm];
                let mut run = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] = f * inc[i * m + j] * run[j];
                        run[j] += src[i * m + j];
                    }
                }
                next[s + 1] = Some(out);
            }
            for r in 0..cap - 1 {
                for s in 0..cap - 1 {
                    if let Some(p) = &prev[r * cap + s] {
                        let f = 1.0 / ((r + 2) * (s + 2)) as f64;
                        next[(r + 1) * cap + s + 1] = Some((0..nm).map(|k| f * inc[k] * p[k]).collect());
                    }
                }
            }
        }
        total += next.iter().flatten().map(|p| p.iter().sum::<f64>()).sum::<f64>();
        prev = next;
    }
    if !total.is_finite() {
        return Err(Error::Numeric("signature kernel is not finite".into()));
    }
    Ok(total)
}

/// Signature kernel of two paths; the bandwidth must be resolved or is taken
/// from the pair itself.
pub fn signature_kernel(a: &Path, b: &Path, dim: usize, cfg: &MmdConfig) -> Result<f64> {
    let cfg = cfg.resolved(dim, [a, b]);
    signature_kernel_states(&a.states, &b.states, dim, &cfg)
}

/// Pooled Gram matrix (row-major `N × N`) of `paths` under a resolved config.
pub fn gram_matrix(paths: &[&Path], dim: usize, cfg: &MmdConfig) -> Result<Vec<f64>> {
    let n = paths.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| signature_kernel_states(&paths[i].states, &paths[j].states, dim, cfg))
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; n * n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        g[i * n + j] = v;
        g[j * n + i] = v;
    }
    Ok(g)
}

/// Unbiased two-sample estimate on a pooled Gram matrix with group labels
/// given by `idx_x` and `idx_y`.
fn unbiased_from_gram(g: &[f64], total: usize, x: &[usize], y: &[usize]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let within = |idx: &[usize]| {
        let mut s = 0.0;
        for &i in idx {
            for &j in idx {
                if i != j {
                    s += g[i * total + j];
                }
            }
        }
        s
    };
    let mut cross = 0.0;
    for &i in x {
        for &j in y {
            cross += g[i * total + j];
        }
    }
    within(x) / (n * (n - 1.0)) + within(y) / (m * (m - 1.0)) - 2.0 * cross / (n * m)
}

fn biased_from_gram(g: &[f64], total: usize, x: &[usize], y: &[usize]) -> f64 {
    let mean = |a: &[usize], b: &[usize]| {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += g[i * total + j];
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub unbiased: f64,
    pub biased: f64,
    /// The config with the bandwidth actually used.
    pub config: MmdConfig,
}

fn check_samples(p: &PathBundle, q: &PathBundle) -> Result<()> {
    check_dim(p.dim, q.dim)?;
    for b in [p, q] {
        if b.paths.len() < 2 {
            return Err(Error::config(format!("MMD needs ≥2 paths per sample, got {}", b.paths.len())));
        }
    }
    Ok(())
}

struct Pooled {
    gram: Vec<f64>,
    n: usize,
    m: usize,
    config: MmdConfig,
}

fn pooled(p: &PathBundle, q: &PathBundle, cfg: &MmdConfig) -> Result<Pooled> {
    check_samples(p, q)?;
    cfg.validate()?;
    let all: Vec<&Path> = p.paths.iter().chain(&q.paths).collect();
    let config = cfg.resolved(p.dim, all.iter().copied());
    let gram = gram_matrix(&all, p.dim, &config)?;
    Ok(Pooled { gram, n: p.paths.len(), m: q.paths.len(), config })
}

impl Pooled {
    fn groups(&self) -> (Vec<usize>, Vec<usize>) {
        ((0..self.n).collect(), (self.n..self.n + self.m).collect())
    }
}

pub fn mmd(p: &PathBundle, q: &PathBundle, cfg: &MmdConfig) -> Result<MmdEstimate> {
    let pl = pooled(p, q, cfg)?;
    let (x, y) = pl.groups();
    let t = pl.n + pl.m;
    Ok(MmdEstimate {
        unbiased: unbiased_from_gram(&pl.gram, t, &x, &y),
        biased: biased_from_gram(&pl.gram, t, &x, &y),
        config: pl.config,
    })
}

/// Unbiased MMD² with separate `n(n−1)` and `m(m−1)` denominators.
pub fn mmd_unbiased(p: &PathBundle, q: &PathBundle, cfg: &MmdConfig) -> Result<f64> {
    mmd(p, q, cfg).map(|e| e.unbiased)
}

pub fn mmd_biased(p: &PathBundle, q: &PathBundle, cfg: &MmdConfig) -> Result<f64> {
    mmd(p, q, cfg).map(|e| e.biased)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub mmd2: f64,
    pub null_mean: f64,
    pub null_std: f64,
    pub null_q99: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub config: MmdConfig,
}

/// Permutation null of the unbiased statistic, reusing one pooled Gram matrix.
pub fn permutation_test(p: &PathBundle, q: &PathBundle, cfg: &MmdConfig, permutations: usize, seed: SeedTree) -> Result<PermutationTest> {
    use rand::seq::SliceRandom;
    let pl = pooled(p, q, cfg)?;
    let t = pl.n + pl.m;
    let (x, y) = pl.groups();
    let stat = unbiased_from_gram(&pl.gram, t, &x, &y);
    let mut null: Vec<f64> = (0..permutations)
        .map(|k| {
            let mut idx: Vec<usize> = (0..t).collect();
            idx.shuffle(&mut seed.child(k as u64).rng());
            unbiased_from_gram(&pl.gram, t, &idx[..pl.n], &idx[pl.n..])
        })
        .collect();
    let count = null.len().max(1) as f64;
    let mean = null.iter().sum::<f64>() / count;
    let std = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0)).sqrt();
    let exceed = null.iter().filter(|&&v| v >= stat).count();
    null.sort_by(f64::total_cmp);
    let q99 = if null.is_empty() { f64::NAN } else { null[((0.99 * (null.len() - 1) as f64).ceil()) as usize] };
    Ok(PermutationTest {
        mmd2: stat,
        null_mean: mean,
        null_std: std,
        null_q99: q99,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
        config: pl.config,
    })
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub mmd: MmdConfig,
    /// Euler–Maruyama steps per observation gap.
    pub substeps: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { mmd: MmdConfig::default(), substeps: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub mmd2: f64,
    pub biased: f64,
    pub config: MmdConfig,
    pub substeps: usize,
    pub paths: usize,
    pub observations: usize,
    /// Simulated paths that left `±DIVERGENCE_LIMIT`; their states are clamped.
    pub diverged: usize,
    pub seed: u64,
    /// Paths enter the kernel as state sequences without a time channel.
    pub state_only: bool,
}

/// Simulates `candidate` from the first state of every reference path on
/// that path's own observation times.
pub fn simulate_like<F: VectorField + ?Sized>(candidate: &F, reference: &PathBundle, substeps: usize, seed: SeedTree) -> Result<PathBundle> {
    check_dim(candidate.dim(), reference.dim)?;
    if reference.paths.is_empty() {
        return Err(Error::config("reference set is empty"));
    }
    reference.validate()?;
    let times = &reference.paths[0].times;
    let shared = reference.paths.iter().all(|p| &p.times == times);
    if shared {
        let init = reference.initial_states();
        return simulate_on_times(candidate, &init, times, substeps, seed);
    }
    let mut out = PathBundle::new(reference.dim);
    for (k, p) in reference.paths.iter().enumerate() {
        let init = vec![p.state(0, reference.dim).to_vec()];
        let b = simulate_on_times(candidate, &init, &p.times, substeps, seed.child(k as u64))?;
        out.paths.extend(b.paths);
    }
    Ok(out)
}

/// Clamps non-finite or huge states to `±DIVERGENCE_LIMIT`; returns how many
/// paths were touched.
pub fn clamp_diverged(bundle: &mut PathBundle) -> usize {
    let mut count = 0;
    for p in &mut bundle.paths {
        let mut hit = false;
        for v in &mut p.states {
            if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
                *v = if v.is_nan() { DIVERGENCE_LIMIT } else { v.clamp(-DIVERGENCE_LIMIT, DIVERGENCE_LIMIT) };
                hit = true;
            }
        }
        if hit {
            p.diverged = true;
            count += 1;
        }
    }
    count
}

pub fn mmd_protocol<F: VectorField + ?Sized>(candidate: &F, reference: &PathBundle, cfg: &ProtocolConfig, seed: SeedTree) -> Result<ProtocolReport> {
    let mut sim = simulate_like(candidate, reference, cfg.substeps, seed)?;
    let diverged = clamp_diverged(&mut sim);
    let est = mmd(&sim, reference, &cfg.mmd)?;
    Ok(ProtocolReport {
        mmd2: est.unbiased,
        biased: est.biased,
        config: est.config,
        substeps: cfg.substeps,
        paths: reference.paths.len(),
        observations: reference.paths[0].len(),
        diverged,
        seed: seed.key(),
        state_only: true,
    })
}

// ---------------------------------------------------------------------------
// Grid MSE

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub bounds: Vec<(f64, f64)>,
    pub total: usize,
}

impl EvalGrid {
    pub fn new(bounds: Vec<(f64, f64)>, total: usize) -> Result<Self> {
        if bounds.is_empty() || total == 0 {
            return Err(Error::config("grid needs ≥1 dimension and ≥1 location"));
        }
        if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi)) {
            return Err(Error::config(format!("grid bounds not ordered: [{lo}, {hi}]")));
        }
        Ok(EvalGrid { bounds, total })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    /// Points per axis: the largest `k` with `k^d ≤ total`.
    pub fn per_axis(&self) -> usize {
        let d = self.dim() as u32;
        let mut k = (self.total as f64).powf(1.0 / d as f64).round() as usize + 1;
        while k > 1 && k.pow(d) > self.total {
            k -= 1;
        }
        k.max(1)
    }

    pub fn len(&self) -> usize {
        self.per_axis().pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn axis(&self, i: usize) -> Vec<f64> {
        let k = self.per_axis();
        let (lo, hi) = self.bounds[i];
        if k == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect()
    }

    /// Regular grid points, last coordinate varying fastest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let axes: Vec<Vec<f64>> = (0..d).map(|i| self.axis(i)).collect();
        let k = self.per_axis();
        (0..self.len())
            .map(|mut flat| {
                let mut x = vec![0.0; d];
                for i in (0..d).rev() {
                    x[i] = axes[i][flat % k];
                    flat /= k;
                }
                x
            })
            .collect()
    }
}

/// Evaluates any vector field at explicit locations as an estimate record.
pub fn field_estimate<F: VectorField + ?Sized>(field: &F, locations: &[Vec<f64>]) -> Result<VectorFieldEstimate> {
    let d = field.dim();
    for x in locations {
        check_dim(d, x.len())?;
    }
    let flat = locations.concat();
    let mut drift = vec![0.0; flat.len()];
    let mut amplitude = vec![0.0; flat.len()];
    field.evaluate(&flat, &mut drift, &mut amplitude);
    Ok(VectorFieldEstimate {
        dim: d,
        locations: flat,
        drift,
        amplitude,
        uncertainty: vec![0.0; locations.len()],
        normalization: NormalizationRecord::identity(d),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMse {
    pub drift: f64,
    pub diffusion: f64,
    pub used: usize,
    pub discarded: usize,
}

/// Mean over locations of the squared error summed over components. Drift
/// is compared to `f`, diffusion as amplitudes `√g`. Locations where any
/// estimated or true value exceeds `DIVERGENCE_LIMIT` are discarded.
pub fn mse_on_grid(estimate: &VectorFieldEstimate, truth: &SdeSystem, grid: &EvalGrid) -> Result<GridMse> {
    let d = truth.dim();
    check_dim(d, estimate.dim)?;
    check_dim(d, grid.dim())?;
    let q = estimate.locations.len() / d;
    if q != grid.len() {
        return Err(Error::Dimension { expected: grid.len(), got: q });
    }
    let mut tf = vec![0.0; q * d];
    let mut ta = vec![0.0; q * d];
    truth.evaluate(&estimate.locations, &mut tf, &mut ta);
    let bad = |v: f64| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT;
    let (mut sf, mut sg, mut used) = (0.0, 0.0, 0usize);
    for r in 0..q {
        let rows = r * d..(r + 1) * d;
        let vals = [&estimate.drift[rows.clone()], &estimate.amplitude[rows.clone()], &tf[rows.clone()], &ta[rows.clone()]];
        if vals.iter().any(|s| s.iter().any(|&v| bad(v))) {
            continue;
        }
        used += 1;
        for i in rows {
            sf += (estimate.drift[i] - tf[i]).powi(2);
            sg += (estimate.amplitude[i] - ta[i]).powi(2);
        }
    }
    let denom = used.max(1) as f64;
    let (drift, diffusion) = if used == 0 { (f64::NAN, f64::NAN) } else { (sf / denom, sg / denom) };
    Ok(GridMse { drift, diffusion, used, discarded: q - used })
}

/// Everything an evaluation run produces, echoed with the settings that
/// produced it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub system: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<EvalGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<GridMse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mmd: Option<ProtocolReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub context: usize,
    pub drift_mse: f64,
    pub diffusion_mse: f64,
    pub discarded: usize,
}

/// Context sizes of the context-length ablation.
pub const CONTEXT_SWEEP: [usize; 7] = [500, 1000, 2000, 3000, 4000, 5000, 50000];


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn path(dim: usize, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        len.prop_flat_map(move |l| proptest::collection::vec(-2.0f64..2.0, l * dim))
    }

    fn rbf() -> MmdConfig {
        MmdConfig { kernel: BaseKernel::Rbf { bandwidth: Some(1.0) }, ..MmdConfig::default() }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kernel_is_symmetric(a in path(2, 2..8), b in path(2, 2..8)) {
            for cfg in [rbf(), MmdConfig::linear()] {
                let ab = signature_kernel_states(&a, &b, 2, &cfg).unwrap();
                let ba = signature_kernel_states(&b, &a, 2, &cfg).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
                let aa = signature_kernel_states(&a, &a, 2, &cfg).unwrap();
                prop_assert!(aa >= 1.0 - 1e-12);
            }
        }

        #[test]
        fn duplicated_point_is_invisible(a in path(2, 2..8), b in path(2, 2..8), at in 0usize..8) {
            let at = at % (a.len() / 2);
            let mut dup = a[..(at + 1) * 2].to_vec();
            dup.extend_from_slice(&a[at * 2..]);
            let cfg = rbf();
            let k0 = signature_kernel_states(&a, &b, 2, &cfg).unwrap();
            let k1 = signature_kernel_states(&dup, &b, 2, &cfg).unwrap();
            prop_assert!((k0 - k1).abs() < 1e-12, "{} {}", k0, k1);
        }

        #[test]
        fn mse_ignores_point_order(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let e = canonical_system("hopf").unwrap();
            let grid = EvalGrid::new(e.bounds.clone(), 64).unwrap();
            let mut pts = grid.points();
            let zero = SdeSystem::new(vec![Polynomial::zero(2); 2], vec![Polynomial::constant(2, 0.5); 2]).unwrap();
            let a = mse_on_grid(&field_estimate(&zero, &pts).unwrap(), &e.system, &grid).unwrap();
            pts.shuffle(&mut SeedTree::new(seed).rng());
            let b = mse_on_grid(&field_estimate(&zero, &pts).unwrap(), &e.system, &grid).unwrap();
            prop_assert!((a.drift - b.drift).abs() < 1e-9 * a.drift);
            prop_assert!((a.diffusion - b.diffusion).abs() < 1e-9 * a.diffusion.max(1e-300));
        }

        #[test]
        fn mmd_is_symmetric(seed in 0u64..1000) {
            let sys = SdeSystem::new(vec![Polynomial::from_pairs(1, &[(&[1], -1.0)]).unwrap()], vec![Polynomial::constant(1, 1.0)]).unwrap();
            let times: Vec<f64> = (0..6).map(|k| k as f64 * 0.1).collect();
            let p = simulate_on_times(&sys, &vec![vec![0.0]; 4], &times, 2, SeedTree::new(seed)).unwrap();
            let q = simulate_on_times(&sys, &vec![vec![0.5]; 3], &times, 2, SeedTree::new(seed + 1)).unwrap();
            let cfg = rbf();
            let pq = mmd(&p, &q, &cfg).unwrap();
            let qp = mmd(&q, &p, &cfg).unwrap();
            prop_assert!((pq.unbiased - qp.unbiased).abs() < 1e-12);
            prop_assert!((pq.biased - qp.biased).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = SeedTree::new(42).rng();
        let paths: Vec<Path> = (0..10)
            .map(|_| {
                let len = rng.random_range(2..9);
                Path {
                    times: (0..len).map(|k| k as f64).collect(),
                    states: (0..len * 2).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    diverged: false,
                }
            })
            .collect();
        let refs: Vec<&Path> = paths.iter().collect();
        for cfg in [rbf(), MmdConfig::linear()] {
            let g = gram_matrix(&refs, 2, &cfg).unwrap();
            let min = min_eigenvalue(g, 10);
            assert!(min >= -1e-8, "min eigenvalue {min}");
        }
    }

    /// Cyclic Jacobi sweeps on a symmetric matrix.
    fn min_eigenvalue(mut a: Vec<f64>, n: usize) -> f64 {
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).fold(f64::INFINITY, f64::min)
    }
}
