//! Transformer recognition network mapping a set of transition tuples to
//! drift, diffusion amplitude and uncertainty at query locations.
//!
//! Tokens are rows. The context is embedded tuple-wise, encoded by
//! self-attention and then queried by three independent cross-attention
//! stacks, one per output (drift, amplitude, uncertainty).

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionKind, Tape, Tensor, Var};
use crate::error::{check_dim, Error, Result};
use crate::normalize::{fit_and_normalize, NormalizationRecord};
use crate::obs::ObservationSet;
use crate::rng::{SeedTree, StreamRng};
use crate::sde::VectorField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub trunk_depth: usize,
    pub d_max: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ff_mult: usize,
    pub encoder_attention: AttentionKind,
    pub trunk_attention: AttentionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            encoder_layers: 2,
            trunk_depth: 3,
            d_max: 3,
            heads: 4,
            dropout: 0.1,
            ff_mult: 4,
            encoder_attention: AttentionKind::Linear,
            trunk_attention: AttentionKind::Linear,
        }
    }
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn full() -> Self {
        ModelConfig { hidden: 256, trunk_depth: 8, heads: 8, ..ModelConfig::default() }
    }

    /// Smallest useful network, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig { hidden: 8, encoder_layers: 1, trunk_depth: 2, heads: 2, dropout: 0.0, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % 4 != 0 {
            return Err(Error::config("hidden size must be a positive multiple of 4"));
        }
        if self.trunk_depth == 0 || self.d_max == 0 || self.ff_mult == 0 {
            return Err(Error::config("trunk depth, d_max and ff multiplier must be positive"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config("hidden size must be divisible by the number of heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Drift,
    Diffusion,
    Uncertainty,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Drift, Branch::Diffusion, Branch::Uncertainty];

    fn tag(self) -> &'static str {
        match self {
            Branch::Drift => "drift",
            Branch::Diffusion => "diffusion",
            Branch::Uncertainty => "uncertainty",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip, default = "default_init")]
    init: Init,
}

fn default_init() -> Init {
    Init::Zeros
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named offsets of every parameter block, in a fixed order derived from
/// the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut layout = ParamLayout { blocks: Vec::new(), index: HashMap::new(), total: 0 };
        let n = cfg.hidden;
        let q = n / 4;
        let ff = cfg.ff_mult * n;
        for part in ["y", "dy", "dy2"] {
            layout.linear(&format!("embed.{part}"), cfg.d_max, q);
        }
        layout.linear("embed.dt", 1, q);
        for l in 0..cfg.encoder_layers {
            layout.block(&format!("encoder.{l}"), n, ff);
        }
        layout.norm("encoder.norm", n);
        layout.linear("location", cfg.d_max, n);
        for b in Branch::ALL {
            for m in 0..cfg.trunk_depth {
                layout.block(&format!("trunk.{}.{m}", b.tag()), n, ff);
            }
            let h = format!("head.{}", b.tag());
            layout.norm(&format!("{h}.norm"), n);
            layout.linear(&format!("{h}.0"), n, n);
            layout.linear(&format!("{h}.1"), n, n);
            layout.linear(&format!("{h}.2"), n, cfg.d_max);
        }
        layout
    }

    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) {
        self.index.insert(name.clone(), self.blocks.len());
        self.blocks.push(ParamBlock { name, offset: self.total, rows, cols, init });
        self.total += rows * cols;
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{name}.weight"), fan_in, fan_out, Init::Xavier);
        self.push(format!("{name}.bias"), 1, fan_out, Init::Zeros);
    }

    fn norm(&mut self, name: &str, n: usize) {
        self.push(format!("{name}.gamma"), 1, n, Init::Ones);
        self.push(format!("{name}.beta"), 1, n, Init::Zeros);
    }

    fn block(&mut self, name: &str, n: usize, ff: usize) {
        self.norm(&format!("{name}.norm1"), n);
        for p in ["query", "key", "value", "out"] {
            self.linear(&format!("{name}.attn.{p}"), n, n);
        }
        self.norm(&format!("{name}.norm2"), n);
        self.linear(&format!("{name}.ff.0"), n, ff);
        self.linear(&format!("{name}.ff.1"), ff, n);
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamBlock> {
        self.index.get(name).map(|&i| &self.blocks[i])
    }

    fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: SeedTree) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut values = vec![0.0; layout.total()];
        let mut rng = seed.named("init").rng();
        for b in &layout.blocks {
            let slot = &mut values[b.offset..b.offset + b.len()];
            match b.init {
                Init::Zeros => {}
                Init::Ones => slot.fill(1.0),
                Init::Xavier => {
                    let bound = (6.0 / (b.rows + b.cols) as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
            }
        }
        Ok(ModelParams { config: config.clone(), layout, values })
    }

    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        check_dim(layout.total(), values.len())?;
        Ok(ModelParams { config: config.clone(), layout, values })
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|b| &self.values[b.offset..b.offset + b.len()])
    }
}

/// Parameter count implied by a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    ParamLayout::new(cfg).total()
}

/// Normalized context padded to `d_max` columns.
pub(crate) fn padded(values: &[f64], rows: usize, dim: usize, d_max: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, d_max);
    for r in 0..rows {
        t.data[r * d_max..r * d_max + dim].copy_from_slice(&values[r * dim..(r + 1) * dim]);
    }
    t
}

/// Per-block keys and values of the context for one trunk stack.
pub struct BranchContext {
    pub kv: Vec<(Var, Var)>,
}

pub struct HeadOutputs {
    /// `Q × d_max`
    pub drift: Var,
    /// `Q × d_max`, non-negative
    pub amplitude: Var,
    /// `Q × 1`
    pub uncertainty: Var,
}

/// One forward pass on a tape. Parameter leaves are created on first use
/// and shared by later uses, so their gradients accumulate.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    leaves: Vec<Option<Var>>,
    dropout: Option<StreamRng>,
}

impl<'p> Session<'p> {
    /// `dropout_rng = None` disables dropout.
    pub fn new(params: &'p ModelParams, dropout_rng: Option<StreamRng>) -> Self {
        let dropout = dropout_rng.filter(|_| params.config.dropout > 0.0);
        Session { tape: Tape::new(), params, leaves: vec![None; params.layout.blocks.len()], dropout }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn param(&mut self, name: &str) -> Var {
        let i = self.params.layout.idx(name);
        if let Some(v) = self.leaves[i] {
            return v;
        }
        let b = &self.params.layout.blocks[i];
        let t = Tensor::from_vec(b.rows, b.cols, self.params.values[b.offset..b.offset + b.len()].to_vec());
        let v = self.tape.param(t, b.offset);
        self.leaves[i] = Some(v);
        v
    }

    fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        let h = self.tape.matmul(x, w);
        self.tape.add_row(h, b)
    }

    fn norm(&mut self, name: &str, x: Var) -> Var {
        let g = self.param(&format!("{name}.gamma"));
        let b = self.param(&format!("{name}.beta"));
        self.tape.layer_norm(x, g, b)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.params.config.dropout;
        let Some(rng) = self.dropout.as_mut() else { return x };
        let (r, c) = self.tape.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_vec(r, c, (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect());
        self.tape.mul_const(x, mask)
    }

    fn feed_forward(&mut self, name: &str, x: Var) -> Var {
        let h = self.linear(&format!("{name}.0"), x);
        let h = self.tape.gelu(h);
        self.linear(&format!("{name}.1"), h)
    }

    /// `x + Attn(LN x, kv) ; + FF(LN ·)` with pre-norm residuals. Keys and
    /// values come from `kv` or, for self-attention, from the normalized `x`.
    fn attention_block(&mut self, name: &str, x: Var, kv: Option<(Var, Var)>, kind: AttentionKind) -> Var {
        let h = self.norm(&format!("{name}.norm1"), x);
        let q = self.linear(&format!("{name}.attn.query"), h);
        let (k, v) = match kv {
            Some(kv) => kv,
            None => (self.linear(&format!("{name}.attn.key"), h), self.linear(&format!("{name}.attn.value"), h)),
        };
        let a = self.tape.attention(q, k, v, self.params.config.heads, kind);
        let a = self.linear(&format!("{name}.attn.out"), a);
        let a = self.dropout(a);
        let x = self.tape.add(x, a);
        let h = self.norm(&format!("{name}.norm2"), x);
        let f = self.feed_forward(&format!("{name}.ff"), h);
        let f = self.dropout(f);
        self.tape.add(x, f)
    }

    /// `N × n` embedding of a normalized observation set.
    pub fn embed(&mut self, set: &ObservationSet) -> Result<Var> {
        if set.is_empty() {
            return Err(Error::EmptyContext);
        }
        let dm = self.params.config.d_max;
        if set.dim > dm {
            return Err(Error::Dimension { expected: dm, got: set.dim });
        }
        let n = set.len();
        let y = self.tape.constant(padded(&set.y, n, set.dim, dm));
        let dy = self.tape.constant(padded(&set.dy, n, set.dim, dm));
        let dy2 = self.tape.constant(padded(&set.dy2, n, set.dim, dm));
        let dt = self.tape.constant(Tensor::from_vec(n, 1, set.dt.iter().map(|t| t.ln()).collect()));
        let parts = [
            self.linear("embed.y", y),
            self.linear("embed.dy", dy),
            self.linear("embed.dy2", dy2),
            self.linear("embed.dt", dt),
        ];
        Ok(self.tape.concat_cols(&parts))
    }

    /// Self-attention encoder producing the context matrix.
    pub fn encode(&mut self, embedded: Var) -> Var {
        let kind = self.params.config.encoder_attention;
        let mut x = embedded;
        for l in 0..self.params.config.encoder_layers {
            x = self.attention_block(&format!("encoder.{l}"), x, None, kind);
        }
        self.norm("encoder.norm", x)
    }

    /// `Q × n` embedding of padded normalized locations (`Q × d_max`).
    pub fn embed_locations(&mut self, locations: Var) -> Var {
        self.linear("location", locations)
    }

    pub fn branch_context(&mut self, branch: Branch, context: Var) -> BranchContext {
        let kv = (0..self.params.config.trunk_depth)
            .map(|m| {
                let name = format!("trunk.{}.{m}.attn", branch.tag());
                (self.linear(&format!("{name}.key"), context), self.linear(&format!("{name}.value"), context))
            })
            .collect();
        BranchContext { kv }
    }

    /// Runs one trunk stack and its head; returns `Q × d_max` raw outputs.
    pub fn query(&mut self, branch: Branch, h0: Var, ctx: &BranchContext) -> Var {
        let kind = self.params.config.trunk_attention;
        let mut h = h0;
        for (m, &kv) in ctx.kv.iter().enumerate() {
            h = self.attention_block(&format!("trunk.{}.{m}", branch.tag()), h, Some(kv), kind);
        }
        let name = format!("head.{}", branch.tag());
        let x = self.norm(&format!("{name}.norm"), h);
        let x = self.linear(&format!("{name}.0"), x);
        let x = self.tape.gelu(x);
        let x = self.linear(&format!("{name}.1"), x);
        let x = self.tape.gelu(x);
        self.linear(&format!("{name}.2"), x)
    }

    /// Drift and amplitude heads at `locations` (`Q × d_max`, normalized).
    pub fn fields(&mut self, context: Var, locations: Var) -> (Var, Var) {
        let h0 = self.embed_locations(locations);
        let cf = self.branch_context(Branch::Drift, context);
        let drift = self.query(Branch::Drift, h0, &cf);
        let cg = self.branch_context(Branch::Diffusion, context);
        let raw = self.query(Branch::Diffusion, h0, &cg);
        (drift, self.tape.softplus(raw))
    }

    /// Uncertainty head. With `detach`, neither the context nor the location
    /// embedding receive gradient from this head.
    pub fn uncertainty(&mut self, context: Var, locations: Var, detach: bool) -> Var {
        let h0 = self.embed_locations(locations);
        let (ctx, h0) = if detach { (self.tape.detach(context), self.tape.detach(h0)) } else { (context, h0) };
        let cu = self.branch_context(Branch::Uncertainty, ctx);
        let raw = self.query(Branch::Uncertainty, h0, &cu);
        self.tape.slice_cols(raw, 0, 1)
    }

    pub fn heads(&mut self, context: Var, locations: Var, detach_uncertainty: bool) -> HeadOutputs {
        let (drift, amplitude) = self.fields(context, locations);
        let uncertainty = self.uncertainty(context, locations, detach_uncertainty);
        HeadOutputs { drift, amplitude, uncertainty }
    }

    /// Embeds and encodes a normalized set.
    pub fn context(&mut self, set: &ObservationSet) -> Result<Var> {
        let e = self.embed(set)?;
        Ok(self.encode(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldEstimate {
    pub dim: usize,
    /// `Q × dim`, original domain
    pub locations: Vec<f64>,
    pub drift: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub normalization: NormalizationRecord,
}

impl VectorFieldEstimate {
    pub fn len(&self) -> usize {
        self.uncertainty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uncertainty.is_empty()
    }
}

/// Flattens query locations after checking their dimension.
fn flatten_locations(locations: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    for x in locations {
        check_dim(dim, x.len())?;
    }
    Ok(locations.concat())
}

/// Zero-shot estimate at original-domain `locations` from a raw context.
pub fn infer(params: &ModelParams, raw: &ObservationSet, locations: &[Vec<f64>]) -> Result<VectorFieldEstimate> {
    let (norm_set, rec) = fit_and_normalize(raw)?;
    let d = raw.dim;
    let dm = params.config.d_max;
    if d > dm {
        return Err(Error::Dimension { expected: dm, got: d });
    }
    let flat = flatten_locations(locations, d)?;
    let q = locations.len();
    let mut s = Session::new(params, None);
    let ctx = s.context(&norm_set)?;
    let normalized: Vec<f64> = locations.iter().map(|x| rec.normalize_location(x)).collect::<Result<Vec<_>>>()?.concat();
    let loc = s.tape.constant(padded(&normalized, q, d, dm));
    let out = s.heads(ctx, loc, false);
    let (tf, ta, tu) = (s.tape.value(out.drift), s.tape.value(out.amplitude), s.tape.value(out.uncertainty));
    let mut drift = Vec::with_capacity(q * d);
    let mut amplitude = Vec::with_capacity(q * d);
    for r in 0..q {
        let (f, a) = rec.renormalize_fields(&tf.row(r)[..d], &ta.row(r)[..d])?;
        drift.extend(f);
        amplitude.extend(a);
    }
    Ok(VectorFieldEstimate { dim: d, locations: flat, drift, amplitude, uncertainty: tu.data.clone(), normalization: rec })
}

/// The model conditioned on a fixed context, usable as a simulator. Context
/// keys and values are computed once.
pub struct ModelField<'p> {
    params: &'p ModelParams,
    dim: usize,
    record: NormalizationRecord,
    kv: [Vec<(Tensor, Tensor)>; 2],
}

impl<'p> ModelField<'p> {
    pub fn new(params: &'p ModelParams, raw: &ObservationSet) -> Result<Self> {
        let (norm_set, record) = fit_and_normalize(raw)?;
        if raw.dim > params.config.d_max {
            return Err(Error::Dimension { expected: params.config.d_max, got: raw.dim });
        }
        let mut s = Session::new(params, None);
        let ctx = s.context(&norm_set)?;
        let mut kv: [Vec<(Tensor, Tensor)>; 2] = [Vec::new(), Vec::new()];
        for (slot, b) in [Branch::Drift, Branch::Diffusion].into_iter().enumerate() {
            let bc = s.branch_context(b, ctx);
            kv[slot] = bc.kv.iter().map(|&(k, v)| (s.tape.value(k).clone(), s.tape.value(v).clone())).collect();
        }
        Ok(ModelField { params, dim: raw.dim, record, kv })
    }

    pub fn record(&self) -> &NormalizationRecord {
        &self.record
    }

    /// Normalized-domain drift and amplitude (`Q × d_max` each) at padded
    /// normalized locations.
    fn normalized_fields(&self, locations: Tensor) -> (Tensor, Tensor) {
        let mut s = Session::new(self.params, None);
        let loc = s.tape.constant(locations);
        let h0 = s.embed_locations(loc);
        let mut outs = Vec::with_capacity(2);
        for (slot, b) in [Branch::Drift, Branch::Diffusion].into_iter().enumerate() {
            let kv = self.kv[slot].iter().map(|(k, v)| (s.tape.constant(k.clone()), s.tape.constant(v.clone()))).collect();
            let y = s.query(b, h0, &BranchContext { kv });
            outs.push(y);
        }
        let amp = s.tape.softplus(outs[1]);
        (s.tape.value(outs[0]).clone(), s.tape.value(amp).clone())
    }
}

impl VectorField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, states: &[f64], drift: &mut [f64], amplitude: &mut [f64]) {
        let d = self.dim;
        let q = states.len() / d;
        if q == 0 {
            return;
        }
        let r = &self.record;
        let norm: Vec<f64> = states.iter().enumerate().map(|(k, v)| (v - r.mean[k % d]) / r.scale[k % d]).collect();
        let (f, a) = self.normalized_fields(padded(&norm, q, d, self.params.config.d_max));
        let c = r.time_factor;
        let sc = c.sqrt();
        for row in 0..q {
            for i in 0..d {
                let s = r.scale[i];
                drift[row * d + i] = c * s * f.at(row, i);
                amplitude[row * d + i] = sc * s * a.at(row, i);
            }
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDEFIMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub blocks: Vec<ParamBlock>,
    /// Training configuration and any caller provenance.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub has_optimizer: bool,
}

/// AdamW moments saved alongside the weights for exact resumption.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub seed: u64,
    pub extra: serde_json::Value,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: self.params.config.clone(),
            step: self.step,
            seed: self.seed,
            blocks: self.params.layout.blocks.clone(),
            extra: self.extra.clone(),
            has_optimizer: self.optimizer.is_some(),
        };
        let hb = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(hb.len() as u64)?;
        w.write_all(&hb)?;
        let put = |w: &mut W, xs: &[f64]| -> std::io::Result<()> {
            w.write_u64::<LittleEndian>(xs.len() as u64)?;
            xs.iter().try_for_each(|&x| w.write_f64::<LittleEndian>(x))
        };
        put(w, &self.params.values)?;
        if let Some(o) = &self.optimizer {
            w.write_u64::<LittleEndian>(o.step)?;
            put(w, &o.m)?;
            put(w, &o.v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::format("not a checkpoint file"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut hb = vec![0u8; len];
        r.read_exact(&mut hb)?;
        let header: CheckpointHeader = serde_json::from_slice(&hb)?;
        let get = |r: &mut R, expected: usize| -> Result<Vec<f64>> {
            let n = r.read_u64::<LittleEndian>()? as usize;
            if n != expected {
                return Err(Error::format(format!("expected {expected} values, found {n}")));
            }
            let mut xs = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut xs)?;
            Ok(xs)
        };
        let layout = ParamLayout::new(&header.model);
        let stored: Vec<_> = header.blocks.iter().map(|b| (&b.name, b.offset, b.rows, b.cols)).collect();
        let expected: Vec<_> = layout.blocks.iter().map(|b| (&b.name, b.offset, b.rows, b.cols)).collect();
        if stored != expected {
            return Err(Error::format("parameter table does not match the model configuration"));
        }
        let values = get(r, layout.total())?;
        let params = ModelParams::from_values(&header.model, values)?;
        let optimizer = if header.has_optimizer {
            let step = r.read_u64::<LittleEndian>()?;
            let m = get(r, params.count())?;
            let v = get(r, params.count())?;
            Some(OptimizerState { step, m, v })
        } else {
            None
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { params, step: header.step, seed: header.seed, extra: header.extra, optimizer })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Checkpoint> {
        Checkpoint::read_from(&mut bytes)
    }
}
