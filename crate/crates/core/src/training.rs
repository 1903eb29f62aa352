//! Uncertainty-weighted pretraining loss, AdamW, the training loop and the
//! dense/sparse finetuning objectives.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::datagen::EquationRecord;
use crate::error::{Error, Result};
use crate::model::{padded, ModelParams, OptimizerState, Session};
use crate::normalize::{fit_and_normalize_with, NormalizationRecord, DEFAULT_DT_TARGET};
use crate::obs::ObservationSet;
use crate::rng::{SeedTree, StreamRng};
use crate::sde::{PathBundle, SdeSystem};

pub const U_CLAMP: f64 = 20.0;
pub const G_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub context_min: usize,
    pub context_max: usize,
    pub locations: usize,
    pub steps: u64,
    pub seed: u64,
    /// Keep the uncertainty head from sending gradient into the shared
    /// context encoder and location embedding.
    pub detach_uncertainty: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub dt_target: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Learning-rate multiplier as a function of the step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to `floor · lr`
    /// at the final step.
    WarmupCosine { warmup: u64, floor: f64 },
}

impl LrSchedule {
    /// Multiplier for the update that completes step `step + 1` of `total`.
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup, floor } => {
                if step < warmup {
                    return (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            context_min: 64,
            context_max: 1024,
            locations: 32,
            steps: 2000,
            seed: 0,
            detach_uncertainty: true,
            grad_clip: None,
            dt_target: DEFAULT_DT_TARGET,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_min < 2 || self.context_max < self.context_min {
            return Err(Error::config("context size range must satisfy 2 <= min <= max"));
        }
        if self.locations == 0 || self.batch_size == 0 {
            return Err(Error::config("batch size and locations must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be non-negative"));
        }
        if let LrSchedule::WarmupCosine { floor, .. } = self.schedule {
            if !(0.0..=1.0).contains(&floor) {
                return Err(Error::config("schedule floor must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// `Σ_i mask_i [(f̂_i − f_i)² + (â_i − a_i)²]`
pub fn loss_l1(drift_hat: &[f64], amp_hat: &[f64], drift: &[f64], amp: &[f64], mask: &[bool]) -> f64 {
    (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| (drift_hat[i] - drift[i]).powi(2) + (amp_hat[i] - amp[i]).powi(2))
        .sum()
}

/// `e^{−U} l1 + U` with `U` clamped to `[−20, 20]`.
pub fn loss_weighted(l1: f64, u: f64) -> f64 {
    let u = u.clamp(-U_CLAMP, U_CLAMP);
    (-u).exp() * l1 + u
}

/// `Q` points uniform in the bounding box of the tuple heads.
pub fn sample_locations<R: Rng + ?Sized>(set: &ObservationSet, q: usize, rng: &mut R) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptyContext);
    }
    let d = set.dim;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in set.y.chunks_exact(d) {
        for i in 0..d {
            lo[i] = lo[i].min(row[i]);
            hi[i] = hi[i].max(row[i]);
        }
    }
    let mut out = Vec::with_capacity(q * d);
    for _ in 0..q {
        for i in 0..d {
            let u: f64 = rng.random();
            out.push(lo[i] + u * (hi[i] - lo[i]));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub weighted: f64,
    pub mean_u: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// How the uncertainty stack sees the context.
#[derive(Clone, Copy)]
pub enum UncertaintyInput<'a> {
    Attached,
    Detached,
    /// Context and location embedding taken from fixed parameters; used to
    /// check detached gradients against finite differences.
    Frozen(&'a ModelParams),
}

/// Everything drawn at random for one record in one step.
#[derive(Clone, Debug)]
pub struct RecordDraw {
    pub context: ObservationSet,
    pub record: NormalizationRecord,
    /// `Q × d` normalized locations
    pub locations: Vec<f64>,
    /// normalized targets, `Q × d` each
    pub drift: Vec<f64>,
    pub amplitude: Vec<f64>,
}

/// Subsamples the context, normalizes it and draws query locations with
/// their normalized targets.
pub fn draw_record(rec: &EquationRecord, cfg: &TrainConfig, rng: &mut StreamRng) -> Result<RecordDraw> {
    let (full, _) = ObservationSet::from_bundle(&rec.corrupted)?;
    if full.is_empty() {
        return Err(Error::EmptyContext);
    }
    let n = rng.random_range(cfg.context_min..=cfg.context_max).min(full.len());
    let mut picked = index::sample(rng, full.len(), n).into_vec();
    picked.sort_unstable();
    let (context, record) = fit_and_normalize_with(&full.select(&picked), cfg.dt_target)?;
    let locations = sample_locations(&context, cfg.locations, rng)?;
    let (drift, amplitude) = normalized_targets(&rec.system, &record, &locations)?;
    Ok(RecordDraw { context, record, locations, drift, amplitude })
}

/// True drift and amplitude at normalized `locations`, mapped into the
/// normalized domain.
pub fn normalized_targets(sys: &SdeSystem, rec: &NormalizationRecord, locations: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = sys.dim();
    let mut drift = Vec::with_capacity(locations.len());
    let mut amp = Vec::with_capacity(locations.len());
    for x in locations.chunks_exact(d) {
        let orig = rec.denormalize_location(x)?;
        let f = sys.eval_drift(&orig)?;
        let (_, a) = sys.eval_diffusion(&orig)?;
        let (fn_, an) = rec.normalize_fields(&f, &a)?;
        drift.extend(fn_);
        amp.extend(an);
    }
    Ok((drift, amp))
}

/// Per-location `l1` (`Q × 1`) and the head outputs' uncertainty.
struct RecordTerms {
    l1: Var,
    u: Var,
}

fn record_terms(s: &mut Session, draw: &RecordDraw, mode: UncertaintyInput) -> Result<RecordTerms> {
    let dm = s.config().d_max;
    let d = draw.context.dim;
    let q = draw.locations.len() / d;
    let ctx = s.context(&draw.context)?;
    let loc = s.tape.constant(padded(&draw.locations, q, d, dm));
    let (drift, amp) = s.fields(ctx, loc);
    let u = match mode {
        UncertaintyInput::Attached => s.uncertainty(ctx, loc, false),
        UncertaintyInput::Detached => s.uncertainty(ctx, loc, true),
        UncertaintyInput::Frozen(base) => {
            let mut bs = Session::new(base, None);
            let bctx = bs.context(&draw.context)?;
            let bloc = bs.tape.constant(padded(&draw.locations, q, d, dm));
            let bh0 = bs.embed_locations(bloc);
            let ctx_c = s.tape.constant(bs.tape.value(bctx).clone());
            let h0_c = s.tape.constant(bs.tape.value(bh0).clone());
            let cu = s.branch_context(crate::model::Branch::Uncertainty, ctx_c);
            let raw = s.query(crate::model::Branch::Uncertainty, h0_c, &cu);
            s.tape.slice_cols(raw, 0, 1)
        }
    };
    let mut mask = Tensor::zeros(q, dm);
    for r in 0..q {
        mask.data[r * dm..r * dm + d].fill(1.0);
    }
    let tf = s.tape.constant(padded(&draw.drift, q, d, dm));
    let ta = s.tape.constant(padded(&draw.amplitude, q, d, dm));
    let ef = s.tape.sub(drift, tf);
    let ea = s.tape.sub(amp, ta);
    let ef2 = s.tape.square(ef);
    let ea2 = s.tape.square(ea);
    let e = s.tape.add(ef2, ea2);
    let e = s.tape.mul_const(e, mask);
    let l1 = s.tape.row_sum(e);
    Ok(RecordTerms { l1, u })
}

/// Mean over locations of `e^{−U} l1 + U`.
fn weighted_mean(tape: &mut Tape, l1: Var, u: Var) -> Var {
    let uc = tape.clamp(u, -U_CLAMP, U_CLAMP);
    let neg = tape.scale(uc, -1.0);
    let w = tape.exp(neg);
    let wl = tape.mul(w, l1);
    let tot = tape.add(wl, uc);
    tape.mean(tot)
}

/// Loss and flat gradient for a batch of draws, averaged over records.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    draws: &[RecordDraw],
    mode: UncertaintyInput,
    dropout: Option<SeedTree>,
) -> Result<(LossReport, Vec<f64>)> {
    let mut grad = vec![0.0; params.count()];
    let mut rep = LossReport::default();
    let b = draws.len() as f64;
    for (i, draw) in draws.iter().enumerate() {
        let mut s = Session::new(params, dropout.map(|sd| sd.child(i as u64).rng()));
        let t = record_terms(&mut s, draw, mode)?;
        let loss = weighted_mean(&mut s.tape, t.l1, t.u);
        let scaled = s.tape.scale(loss, 1.0 / b);
        let l1m = s.tape.value(t.l1).data.iter().sum::<f64>() / s.tape.value(t.l1).data.len() as f64;
        let um = s.tape.value(t.u).data.iter().sum::<f64>() / s.tape.value(t.u).data.len() as f64;
        rep.l1 += l1m / b;
        rep.mean_u += um / b;
        rep.weighted += s.tape.value(loss).item() / b;
        let g = s.tape.backward(scaled);
        for (a, v) in grad.iter_mut().zip(s.tape.param_grads(&g, params.count())) {
            *a += v;
        }
    }
    rep.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((rep, grad))
}

/// Mean Eq.-8 loss of `params` on fixed draws, without dropout.
pub fn mean_l1(params: &ModelParams, draws: &[RecordDraw]) -> Result<f64> {
    let mut tot = 0.0;
    for draw in draws {
        let mut s = Session::new(params, None);
        let t = record_terms(&mut s, draw, UncertaintyInput::Detached)?;
        let v = s.tape.value(t.l1);
        tot += v.data.iter().sum::<f64>() / v.data.len() as f64;
    }
    Ok(tot / draws.len().max(1) as f64)
}

/// Fixed validation draws: one per record, from `seed`.
pub fn validation_draws(records: &[EquationRecord], cfg: &TrainConfig, seed: u64) -> Result<Vec<RecordDraw>> {
    let root = SeedTree::new(seed).named("validation");
    records.iter().enumerate().map(|(i, r)| draw_record(r, cfg, &mut root.child(i as u64).rng())).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: OptimizerState { step: 0, m: vec![0.0; n], v: vec![0.0; n] },
        }
    }

    /// Decoupled weight decay: `p ← p − lr (m̂ / (√v̂ + ε) + λ p)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * grad[i];
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = st.m[i] / bc1;
            let vh = st.v[i] / bc2;
            params[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

fn clip(grad: &mut [f64], norm: f64, max: Option<f64>) {
    if let Some(max) = max {
        if norm > max && norm.is_finite() {
            let s = max / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// One optimizer update on `records[batch]`.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[&EquationRecord],
    cfg: &TrainConfig,
    step_seed: SeedTree,
) -> Result<LossReport> {
    let mut rng = step_seed.named("draws").rng();
    let draws: Vec<RecordDraw> = batch.iter().map(|r| draw_record(r, cfg, &mut rng)).collect::<Result<_>>()?;
    let mode = if cfg.detach_uncertainty { UncertaintyInput::Detached } else { UncertaintyInput::Attached };
    let (mut rep, mut grad) = batch_loss_and_grad(params, &draws, mode, Some(step_seed.named("dropout")))?;
    if !rep.weighted.is_finite() || !rep.grad_norm.is_finite() {
        rep.skipped = true;
        return Ok(rep);
    }
    clip(&mut grad, rep.grad_norm, cfg.grad_clip);
    opt.step(&mut params.values, &grad);
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub l1: f64,
    pub weighted: f64,
    pub mean_u: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Owns parameters and optimizer state. Step `k` draws its batch and all
/// randomness from `seed.child(k)`, so resuming from a checkpoint at step
/// `k` continues exactly as an uninterrupted run.
pub struct Trainer<'d> {
    pub params: ModelParams,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub step: u64,
    records: &'d [EquationRecord],
}

impl<'d> Trainer<'d> {
    pub fn new(params: ModelParams, cfg: TrainConfig, records: &'d [EquationRecord]) -> Result<Self> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(Error::config("training needs at least one record"));
        }
        let opt = AdamW::new(params.count(), &cfg);
        Ok(Trainer { params, opt, cfg, step: 0, records })
    }

    pub fn resume(params: ModelParams, state: OptimizerState, step: u64, cfg: TrainConfig, records: &'d [EquationRecord]) -> Result<Self> {
        let mut t = Trainer::new(params, cfg, records)?;
        if state.m.len() != t.params.count() || state.v.len() != t.params.count() {
            return Err(Error::format("optimizer state does not match parameter count"));
        }
        t.opt.state = state;
        t.step = step;
        Ok(t)
    }

    pub fn step_once(&mut self) -> Result<TrainLogRow> {
        let seed = SeedTree::new(self.cfg.seed).named("train").child(self.step);
        let mut rng = seed.named("batch").rng();
        let batch: Vec<&EquationRecord> =
            (0..self.cfg.batch_size).map(|_| &self.records[rng.random_range(0..self.records.len())]).collect();
        self.opt.lr = self.cfg.lr * self.cfg.schedule.factor(self.step, self.cfg.steps);
        let rep = train_step(&mut self.params, &mut self.opt, &batch, &self.cfg, seed)?;
        self.step += 1;
        Ok(TrainLogRow {
            step: self.step,
            l1: rep.l1,
            weighted: rep.weighted,
            mean_u: rep.mean_u,
            grad_norm: rep.grad_norm,
            skipped: rep.skipped,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Transitions per iteration in the objective.
    pub batch: usize,
    /// Cap on context tuples fed to the encoder per iteration.
    pub context_max: usize,
    /// Euler–Maruyama substeps per observed gap (sparse mode).
    pub substeps: usize,
    pub seed: u64,
    pub dt_target: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iters: 100,
            lr: 1e-3,
            weight_decay: 0.0,
            batch: 256,
            context_max: 1024,
            substeps: 5,
            seed: 0,
            dt_target: DEFAULT_DT_TARGET,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Objective on each iteration's minibatch, before its update.
    pub trace: Vec<f64>,
    /// Entries where the diffusion had to be floored.
    pub floored: usize,
}

/// Dense objective for one transition:
/// `Σ_i (Δy_i − f_i Δτ)² / (2 g_i Δτ) + ½ ln g_i`.
pub fn dense_transition_objective(dy: &[f64], drift: &[f64], g: &[f64], dt: f64) -> f64 {
    (0..dy.len())
        .map(|i| {
            let r = dy[i] - drift[i] * dt;
            r * r / (2.0 * g[i] * dt) + 0.5 * g[i].ln()
        })
        .sum()
}

/// Fixed data shared by the finetuning objectives.
struct Target {
    /// full raw tuple set (original domain)
    raw: ObservationSet,
    norm: ObservationSet,
    rec: NormalizationRecord,
    /// index of the next state in `raw`-path order, per tuple
    next: Vec<f64>,
}

fn target(bundle: &PathBundle, dt_target: f64) -> Result<Target> {
    let (raw, _) = ObservationSet::from_bundle(bundle)?;
    if raw.is_empty() {
        return Err(Error::EmptyContext);
    }
    let (norm, rec) = fit_and_normalize_with(&raw, dt_target)?;
    let next = norm.y.iter().zip(&norm.dy).map(|(y, dy)| y + dy).collect();
    Ok(Target { raw, norm, rec, next })
}

fn subset(n: usize, k: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut v = index::sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

/// Model drift and amplitude at normalized location variable `loc`
/// (`B × d`), padded as needed; returns `B × d` slices.
fn fields_at(s: &mut Session, ctx: Var, loc: Var, d: usize) -> (Var, Var) {
    let dm = s.config().d_max;
    let b = s.tape.shape(loc).0;
    let padded_loc = if d < dm {
        let z = s.tape.constant(Tensor::zeros(b, dm - d));
        s.tape.concat_cols(&[loc, z])
    } else {
        loc
    };
    let (f, a) = s.fields(ctx, padded_loc);
    (s.tape.slice_cols(f, 0, d), s.tape.slice_cols(a, 0, d))
}

/// Builds the dense objective on `rows` with context `ctx_rows`.
fn dense_objective(s: &mut Session, t: &Target, ctx_rows: &[usize], rows: &[usize], floored: &mut usize) -> Result<Var> {
    let d = t.raw.dim;
    let b = rows.len();
    let ctx = s.context(&t.norm.select(ctx_rows))?;
    let q = t.norm.select(rows);
    let raw = t.raw.select(rows);
    let loc = s.tape.constant(Tensor::from_vec(b, d, q.y.clone()));
    let (f, a) = fields_at(s, ctx, loc, d);
    let c = t.rec.time_factor;
    let fscale = Tensor::from_vec(b, d, (0..b * d).map(|k| c * t.rec.scale[k % d]).collect());
    let gscale = Tensor::from_vec(b, d, (0..b * d).map(|k| c * t.rec.scale[k % d].powi(2)).collect());
    let f = s.tape.mul_const(f, fscale);
    let g = s.tape.square(a);
    let g = s.tape.mul_const(g, gscale);
    *floored += s.tape.value(g).data.iter().filter(|&&v| v < G_FLOOR).count();
    let g = s.tape.clamp(g, G_FLOOR, f64::INFINITY);
    let dt = Tensor::from_vec(b, d, (0..b * d).map(|k| raw.dt[k / d]).collect());
    let fdt = s.tape.mul_const(f, dt.clone());
    let neg = s.tape.scale(fdt, -1.0);
    let r = s.tape.add_const(neg, &Tensor::from_vec(b, d, raw.dy.clone()));
    let r2 = s.tape.square(r);
    let den = s.tape.mul_const(g, dt.map(|v| 2.0 * v));
    let quad = s.tape.div(r2, den);
    let lg = s.tape.log(g);
    let half = s.tape.scale(lg, 0.5);
    let tot = s.tape.add(quad, half);
    let sum = s.tape.sum(tot);
    Ok(s.tape.scale(sum, 1.0 / b as f64))
}

/// Builds the sparse objective: `substeps` reparameterized Euler–Maruyama
/// steps from each `y_l`, squared error to `y_{l+1}` in original units.
fn sparse_objective(s: &mut Session, t: &Target, ctx_rows: &[usize], rows: &[usize], substeps: usize, noise: &[f64]) -> Result<Var> {
    let d = t.raw.dim;
    let b = rows.len();
    let ctx = s.context(&t.norm.select(ctx_rows))?;
    let q = t.norm.select(rows);
    let mut x = s.tape.constant(Tensor::from_vec(b, d, q.y.clone()));
    let h: Vec<f64> = q.dt.iter().map(|dt| dt / substeps as f64).collect();
    let hmat = Tensor::from_vec(b, d, (0..b * d).map(|k| h[k / d]).collect());
    for step in 0..substeps {
        let (f, a) = fields_at(s, ctx, x, d);
        let drift = s.tape.mul_const(f, hmat.clone());
        let eps = Tensor::from_vec(
            b,
            d,
            (0..b * d).map(|k| noise[(step * b * d) + k] * h[k / d].sqrt()).collect(),
        );
        let diff = s.tape.mul_const(a, eps);
        let inc = s.tape.add(drift, diff);
        x = s.tape.add(x, inc);
    }
    let target: Vec<f64> = rows.iter().flat_map(|&r| t.next[r * d..(r + 1) * d].to_vec()).collect();
    let neg = s.tape.scale(x, -1.0);
    let err = s.tape.add_const(neg, &Tensor::from_vec(b, d, target));
    let e2 = s.tape.square(err);
    let w = Tensor::from_vec(b, d, (0..b * d).map(|k| t.rec.scale[k % d].powi(2)).collect());
    let e2 = s.tape.mul_const(e2, w);
    let sum = s.tape.sum(e2);
    Ok(s.tape.scale(sum, 1.0 / b as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    Dense,
    Sparse,
}

/// Per-iteration draws (context rows, objective rows, noise) for `iter`.
fn finetune_draw(t: &Target, cfg: &FinetuneConfig, seed: SeedTree) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut rng = seed.rng();
    let n = t.raw.len();
    let ctx = subset(n, cfg.context_max, &mut rng);
    let rows = subset(n, cfg.batch, &mut rng);
    let noise = (0..cfg.substeps.max(1) * rows.len() * t.raw.dim).map(|_| rng.sample(StandardNormal)).collect();
    (ctx, rows, noise)
}

/// Objective value of `params` on the draw of iteration `iter`.
pub fn finetune_objective(params: &ModelParams, bundle: &PathBundle, cfg: &FinetuneConfig, mode: FinetuneMode, iter: u64) -> Result<f64> {
    let t = target(bundle, cfg.dt_target)?;
    let (ctx, rows, noise) = finetune_draw(&t, cfg, SeedTree::new(cfg.seed).named("finetune").child(iter));
    let mut s = Session::new(params, None);
    let mut floored = 0;
    let obj = match mode {
        FinetuneMode::Dense => dense_objective(&mut s, &t, &ctx, &rows, &mut floored)?,
        FinetuneMode::Sparse => sparse_objective(&mut s, &t, &ctx, &rows, cfg.substeps.max(1), &noise)?,
    };
    Ok(s.tape.value(obj).item())
}

/// Gradient-based finetuning of all parameters on one observed bundle.
pub fn finetune(params: &mut ModelParams, bundle: &PathBundle, cfg: &FinetuneConfig, mode: FinetuneMode) -> Result<FinetuneReport> {
    if mode == FinetuneMode::Sparse && cfg.substeps == 0 {
        return Err(Error::config("sparse finetuning needs at least one substep"));
    }
    let t = target(bundle, cfg.dt_target)?;
    let tc = TrainConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..TrainConfig::default() };
    let mut opt = AdamW::new(params.count(), &tc);
    let mut report = FinetuneReport::default();
    for it in 0..cfg.iters {
        let (ctx, rows, noise) = finetune_draw(&t, cfg, SeedTree::new(cfg.seed).named("finetune").child(it as u64));
        let mut s = Session::new(params, None);
        let obj = match mode {
            FinetuneMode::Dense => dense_objective(&mut s, &t, &ctx, &rows, &mut report.floored)?,
            FinetuneMode::Sparse => sparse_objective(&mut s, &t, &ctx, &rows, cfg.substeps, &noise)?,
        };
        let value = s.tape.value(obj).item();
        report.trace.push(value);
        if !value.is_finite() {
            continue;
        }
        let g = s.tape.backward(obj);
        let grad = s.tape.param_grads(&g, params.count());
        drop(s);
        opt.step(&mut params.values, &grad);
    }
    Ok(report)
}

pub fn finetune_dense(params: &mut ModelParams, bundle: &PathBundle, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    finetune(params, bundle, cfg, FinetuneMode::Dense)
}

pub fn finetune_sparse(params: &mut ModelParams, bundle: &PathBundle, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    finetune(params, bundle, cfg, FinetuneMode::Sparse)
}

/// Relative error per parameter block between the tape gradient and central
/// differences of the loss on fixed draws.
pub fn gradient_check(
    params: &ModelParams,
    draws: &[RecordDraw],
    detach_uncertainty: bool,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let mode = if detach_uncertainty { UncertaintyInput::Detached } else { UncertaintyInput::Attached };
    let (_, grad) = batch_loss_and_grad(params, draws, mode, None)?;
    let eval = |p: &ModelParams| -> Result<f64> {
        let mode = if detach_uncertainty { UncertaintyInput::Frozen(params) } else { UncertaintyInput::Attached };
        Ok(batch_loss_and_grad(p, draws, mode, None)?.0.weighted)
    };
    let mut out = Vec::new();
    let mut work = params.clone();
    for b in &params.layout.blocks {
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_f = 0.0;
        for i in b.offset..b.offset + b.len() {
            let orig = work.values[i];
            work.values[i] = orig + h;
            let up = eval(&work)?;
            work.values[i] = orig - h;
            let dn = eval(&work)?;
            work.values[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            num += (fd - grad[i]).powi(2);
            den_a += grad[i] * grad[i];
            den_f += fd * fd;
        }
        let scale = den_a.sqrt().max(den_f.sqrt());
        let rel = if scale == 0.0 { 0.0 } else { num.sqrt() / scale };
        out.push((b.name.clone(), rel));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sde::{Path, Polynomial};

    #[test]
    fn l1_examples() {
        assert_eq!(loss_l1(&[1.0], &[2.0], &[1.0], &[2.0], &[true]), 0.0);
        assert_eq!(loss_l1(&[3.0], &[2.0], &[1.0], &[1.0], &[true]), 5.0);
        assert_eq!(loss_l1(&[1.0, 9.0, 9.0], &[0.0, 9.0, 9.0], &[0.0; 3], &[0.0; 3], &[true, false, false]), 1.0);
    }

    #[test]
    fn weighted_examples() {
        assert_eq!(loss_weighted(3.5, 0.0), 3.5);
        let e = std::f64::consts::E;
        assert!((loss_weighted(e, 1.0) - 2.0).abs() < 1e-15);
        assert_eq!(loss_weighted(1.0, 0.0), 1.0);
        assert!(loss_weighted(e, 0.9) > 2.0 && loss_weighted(e, 1.1) > 2.0);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::WarmupCosine { warmup: 10, floor: 0.1 };
        assert_eq!(s.factor(0, 110), 0.1);
        assert_eq!(s.factor(9, 110), 1.0);
        assert_eq!(s.factor(10, 110), 1.0);
        assert!((s.factor(60, 110) - 0.55).abs() < 1e-12);
        assert!((s.factor(110, 110) - 0.1).abs() < 1e-12);
        let mid: Vec<f64> = (10..110).map(|k| s.factor(k, 110)).collect();
        assert!(mid.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(LrSchedule::Constant.factor(5, 10), 1.0);
    }

    #[test]
    fn locations_stay_in_box() {
        let mut set = ObservationSet::empty(2);
        for (a, b) in [(0.0, 1.0), (2.0, -1.0), (1.0, 0.5)] {
            set.y.extend([a, b]);
            set.dy.extend([0.0, 0.0]);
            set.dy2.extend([0.0, 0.0]);
            set.dt.push(0.1);
            set.path.push(0);
        }
        let mut rng = SeedTree::new(1).rng();
        let locs = sample_locations(&set, 500, &mut rng).unwrap();
        for x in locs.chunks_exact(2) {
            assert!((0.0..=2.0).contains(&x[0]) && (-1.0..=1.0).contains(&x[1]));
        }
        let mut flat = ObservationSet::empty(1);
        flat.y = vec![0.7, 0.7];
        flat.dy = vec![0.0, 0.0];
        flat.dy2 = vec![0.0, 0.0];
        flat.dt = vec![0.1, 0.1];
        flat.path = vec![0, 0];
        assert!(sample_locations(&flat, 10, &mut rng).unwrap().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn location_marginals_are_uniform() {
        // Kolmogorov–Smirnov against U[−1, 3]; critical value at α = 0.01 is
        // about 1.628 / sqrt(n).
        let mut set = ObservationSet::empty(1);
        set.y = vec![-1.0, 3.0, 0.5];
        set.dy = vec![0.0; 3];
        set.dy2 = vec![0.0; 3];
        set.dt = vec![0.1; 3];
        set.path = vec![0; 3];
        let n = 10_000;
        let mut xs = sample_locations(&set, n, &mut SeedTree::new(2).rng()).unwrap();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x + 1.0) / 4.0;
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.628 / (n as f64).sqrt(), "{ks}");
    }

    #[test]
    fn dense_objective_examples() {
        assert_eq!(dense_transition_objective(&[0.0], &[0.0], &[1.0], 0.1), 0.0);
        // Constant-coefficient system: the true g beats 4g on a large sample.
        let (f, g, dt) = (0.5f64, 0.3f64, 0.01f64);
        let mut rng = SeedTree::new(3).rng();
        let (mut at_true, mut at_four) = (0.0, 0.0);
        for _ in 0..20_000 {
            let eps: f64 = rng.sample(StandardNormal);
            let dy = f * dt + (g * dt).sqrt() * eps;
            at_true += dense_transition_objective(&[dy], &[f], &[g], dt);
            at_four += dense_transition_objective(&[dy], &[f], &[4.0 * g], dt);
        }
        assert!(at_true < at_four);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.1, ..TrainConfig::default() };
        let mut opt = AdamW::new(3, &cfg);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.3, 0.1, -4.0]);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adamw_first_step_is_sign_step() {
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(2, &cfg);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] + 0.1).abs() < 1e-6 && (p[1] - 0.1).abs() < 1e-6);
    }

    fn ou_record(theta: f64, seed: u64) -> EquationRecord {
        let sys = SdeSystem::new(
            vec![Polynomial::from_pairs(1, &[(&[1], -theta)]).unwrap()],
            vec![Polynomial::constant(1, 0.5)],
        )
        .unwrap();
        let grid = crate::sde::SimulationGrid::new(0.01, 40).unwrap();
        let b = crate::sde::simulate(&sys, &grid, &[vec![1.0], vec![-0.5]], SeedTree::new(seed)).unwrap();
        EquationRecord { system: sys, preset: 0, clean: b.clone(), corrupted: b, noise_sigma: 0.0, survival: 1.0 }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = ModelParams::init(&ModelConfig::tiny(), SeedTree::new(8)).unwrap();
        let cfg = TrainConfig { context_min: 5, context_max: 5, locations: 3, ..TrainConfig::default() };
        let recs = [ou_record(1.0, 1)];
        let draws = validation_draws(&recs, &cfg, 3).unwrap();
        for detach in [false, true] {
            for (name, rel) in gradient_check(&params, &draws, detach, 1e-5).unwrap() {
                assert!(rel <= 1e-4, "{name}: {rel} (detach {detach})");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let recs: Vec<_> = (0..3).map(|i| ou_record(1.0 + i as f64, i)).collect();
        let cfg = TrainConfig { lr: 1e-3, batch_size: 2, context_min: 8, context_max: 20, locations: 4, seed: 5, ..TrainConfig::default() };
        let p0 = ModelParams::init(&ModelConfig::tiny(), SeedTree::new(1)).unwrap();
        let mut a = Trainer::new(p0.clone(), cfg.clone(), &recs).unwrap();
        for _ in 0..4 {
            a.step_once().unwrap();
        }
        let mut b = Trainer::new(p0, cfg.clone(), &recs).unwrap();
        for _ in 0..2 {
            b.step_once().unwrap();
        }
        let mut c = Trainer::resume(b.params.clone(), b.opt.state.clone(), b.step, cfg, &recs).unwrap();
        for _ in 0..2 {
            c.step_once().unwrap();
        }
        assert_eq!(a.params.values, c.params.values);
        assert_eq!(a.opt.state, c.opt.state);
    }

    #[test]
    fn zero_iterations_leave_params() {
        let mut p = ModelParams::init(&ModelConfig::tiny(), SeedTree::new(2)).unwrap();
        let before = p.clone();
        let rec = ou_record(1.0, 4);
        let cfg = FinetuneConfig { iters: 0, ..FinetuneConfig::default() };
        let rep = finetune_dense(&mut p, &rec.clean, &cfg).unwrap();
        assert!(rep.trace.is_empty());
        assert_eq!(p, before);
        let cfg = FinetuneConfig { iters: 3, batch: 16, ..FinetuneConfig::default() };
        let rep = finetune_sparse(&mut p, &rec.clean, &cfg).unwrap();
        assert_eq!(rep.trace.len(), 3);
    }

    #[test]
    fn single_substep_is_one_em_step() {
        // With one substep the simulated endpoint is y + f̂ Δτ + â ε √Δτ; on a
        // path with one transition the objective is its squared miss.
        let params = ModelParams::init(&ModelConfig::tiny(), SeedTree::new(3)).unwrap();
        let bundle = PathBundle { dim: 1, paths: vec![Path { times: vec![0.0, 0.1, 0.2], states: vec![0.2, 0.5, 0.1], diverged: false }] };
        let cfg = FinetuneConfig { substeps: 1, batch: 2, context_max: 2, ..FinetuneConfig::default() };
        let obj = finetune_objective(&params, &bundle, &cfg, FinetuneMode::Sparse, 0).unwrap();

        let t = target(&bundle, cfg.dt_target).unwrap();
        let (_, rows, noise) = finetune_draw(&t, &cfg, SeedTree::new(cfg.seed).named("finetune").child(0));
        let field = crate::model::ModelField::new(&params, &t.raw).unwrap();
        let mut tot = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            let x = t.raw.y_of(r)[0];
            let dt = t.raw.dt[r];
            let mut f = [0.0];
            let mut a = [0.0];
            crate::sde::VectorField::evaluate(&field, &[x], &mut f, &mut a);
            let next = x + f[0] * dt + a[0] * noise[k] * dt.sqrt();
            tot += (next - (x + t.raw.dy_of(r)[0])).powi(2);
        }
        assert!((obj - tot / rows.len() as f64).abs() < 1e-10 * (1.0 + obj.abs()), "{obj} vs {}", tot / rows.len() as f64);
    }
}
