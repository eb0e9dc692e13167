//! Full pair models `d(x, y)` over a feature table.
//!
//! Items (graph nodes, grid states) are rows of a feature table. A model may
//! expose several latent *slots* per item (one per action in the grid world);
//! pair endpoints are addressed as `item · slots + slot`.

use std::collections::BTreeMap;

use crate::diffcore::{Array, Tape, Var};
use crate::encoders::{EncoderSpec, Mlp, Mode, NormUpdate};
use crate::heads::{HeadFamily, HeadRegistry, HeadSpec, LatentHead, OutputTransform};
use crate::{Error, Result, Rng};

/// Everything a model needs besides its head spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContext {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub slots: usize,
    pub gamma: f64,
}

impl ModelContext {
    fn encoder(&self, out: usize) -> EncoderSpec {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(out);
        EncoderSpec::new(sizes, self.batch_norm)
    }
}

#[derive(Debug)]
pub struct Prediction {
    /// `[B]` predicted distances.
    pub distance: Var,
    /// Discounted outputs clamped into range.
    pub clamped: usize,
    /// (encoder index, statistics) from train-mode normalization.
    pub norm_updates: Vec<(usize, NormUpdate)>,
}

pub trait PairModel: Send {
    fn spec(&self) -> &HeadSpec;

    fn slots(&self) -> usize;

    /// All trainable blocks, in a fixed order.
    fn blocks(&self) -> Vec<&Array>;

    fn blocks_mut(&mut self) -> Vec<&mut Array>;

    /// Distances from `src[i]` to `dst[i]`; `p` matches [`PairModel::blocks`].
    fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        features: &Array,
        src: &[usize],
        dst: &[usize],
        mode: Mode,
    ) -> Result<Prediction>;

    fn apply_norm_updates(&mut self, updates: &[(usize, NormUpdate)]);

    /// Parameters inside the distance head (encoders excluded).
    fn head_param_count(&self) -> usize;

    /// The latent head, when the model is encoder + latent head.
    fn latent_head(&self) -> Option<&dyn LatentHead> {
        None
    }

    /// Latents of every slot of the given items, `[items·slots, dim]`.
    fn latents(&self, _features: &Array, _items: &[usize]) -> Result<Option<Array>> {
        Ok(None)
    }

    fn family(&self) -> HeadFamily {
        self.spec().family
    }

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Baselines are the only families trained with the triangle regularizer.
    fn uses_regularizer(&self) -> bool {
        !self.family().is_latent()
    }
}

/// Eval-mode predictions in chunks; returns distances and the clamp count.
pub fn predict(model: &dyn PairModel, features: &Array, src: &[usize], dst: &[usize]) -> Result<(Vec<f64>, usize)> {
    const CHUNK: usize = 8192;
    let mut out = Vec::with_capacity(src.len());
    let mut clamped = 0;
    for (s, d) in src.chunks(CHUNK).zip(dst.chunks(CHUNK)) {
        let mut tape = Tape::new();
        let p: Vec<Var> = model.blocks().into_iter().map(|b| tape.constant(b.clone())).collect();
        let pred = model.forward(&mut tape, &p, features, s, d, Mode::Eval)?;
        out.extend_from_slice(tape.value(pred.distance).data());
        clamped += pred.clamped;
    }
    Ok((out, clamped))
}

/// Sorted distinct items of both endpoint lists, and each endpoint's row in
/// the `[items·slots, ·]` latent table.
fn gather_plan(src: &[usize], dst: &[usize], slots: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut items: Vec<usize> = src.iter().chain(dst).map(|&e| e / slots).collect();
    items.sort_unstable();
    items.dedup();
    let pos: BTreeMap<usize, usize> = items.iter().enumerate().map(|(i, &it)| (it, i)).collect();
    let row = |e: &usize| pos[&(e / slots)] * slots + e % slots;
    (items.clone(), src.iter().map(row).collect(), dst.iter().map(row).collect())
}

fn check_pairs(features: &Array, src: &[usize], dst: &[usize], slots: usize) -> Result<()> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::Invalid(format!("pair lists of length {} and {}", src.len(), dst.len())));
    }
    let n = features.rows() * slots;
    if let Some(bad) = src.iter().chain(dst).find(|&&e| e >= n) {
        return Err(Error::Invalid(format!("endpoint {bad} out of range for {n}")));
    }
    Ok(())
}

/// Encoder + latent head.
pub struct LatentModel {
    encoder: Mlp,
    head: Box<dyn LatentHead>,
    slots: usize,
}

impl LatentModel {
    pub fn new(spec: &HeadSpec, ctx: &ModelContext, heads: &HeadRegistry, rng: &mut Rng) -> Result<Self> {
        let encoder = Mlp::init(&ctx.encoder(ctx.slots * spec.dim()), rng)?;
        let head = heads.build(spec, rng)?;
        Ok(LatentModel { encoder, head, slots: ctx.slots })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    fn encode_table(
        &self,
        tape: &mut Tape,
        p: &[Var],
        features: &Array,
        items: &[usize],
        mode: Mode,
    ) -> Result<(Var, Vec<NormUpdate>)> {
        let x = tape.constant(features.select_rows(items));
        let (z, ups) = self.encoder.forward(tape, p, x, mode)?;
        let z = tape.reshape(z, &[items.len() * self.slots, self.head.spec().dim()])?;
        Ok((z, ups))
    }
}

impl PairModel for LatentModel {
    fn spec(&self) -> &HeadSpec {
        self.head.spec()
    }

    fn slots(&self) -> usize {
        self.slots
    }

    fn blocks(&self) -> Vec<&Array> {
        self.encoder.params().values().iter().chain(self.head.params().values()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Array> {
        self.encoder.params_mut().values_mut().iter_mut().chain(self.head.params_mut().values_mut()).collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        features: &Array,
        src: &[usize],
        dst: &[usize],
        mode: Mode,
    ) -> Result<Prediction> {
        check_pairs(features, src, dst, self.slots)?;
        let ne = self.encoder.params().len();
        let (items, si, di) = gather_plan(src, dst, self.slots);
        let (z, ups) = self.encode_table(tape, &p[..ne], features, &items, mode)?;
        let u = tape.gather_rows(z, &si)?;
        let v = tape.gather_rows(z, &di)?;
        let distance = self.head.distance(tape, &p[ne..], u, v)?;
        Ok(Prediction { distance, clamped: 0, norm_updates: ups.into_iter().map(|u| (0, u)).collect() })
    }

    fn apply_norm_updates(&mut self, updates: &[(usize, NormUpdate)]) {
        let ups: Vec<NormUpdate> = updates.iter().map(|(_, u)| u.clone()).collect();
        self.encoder.update_norms(&ups);
    }

    fn head_param_count(&self) -> usize {
        self.head.param_count()
    }

    fn latent_head(&self) -> Option<&dyn LatentHead> {
        Some(self.head.as_ref())
    }

    fn latents(&self, features: &Array, items: &[usize]) -> Result<Option<Array>> {
        let mut tape = Tape::new();
        let p = self.encoder.params().constants(&mut tape);
        let (z, _) = self.encode_table(&mut tape, &p, features, items, Mode::Eval)?;
        Ok(Some(tape.value(z).clone()))
    }
}

/// `dot(f(x), g(y))` with two encoders, mapped through an output transform.
pub struct AsymDot {
    spec: HeadSpec,
    left: Mlp,
    right: Mlp,
    slots: usize,
    gamma: f64,
}

impl AsymDot {
    pub fn new(spec: &HeadSpec, ctx: &ModelContext, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let out = ctx.slots * spec.dim();
        let left = Mlp::init(&ctx.encoder(out), rng)?;
        let right = Mlp::init(&ctx.encoder(out), rng)?;
        Ok(AsymDot { spec: spec.clone(), left, right, slots: ctx.slots, gamma: ctx.gamma })
    }
}

impl PairModel for AsymDot {
    fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    fn slots(&self) -> usize {
        self.slots
    }

    fn blocks(&self) -> Vec<&Array> {
        self.left.params().values().iter().chain(self.right.params().values()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Array> {
        self.left.params_mut().values_mut().iter_mut().chain(self.right.params_mut().values_mut()).collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        features: &Array,
        src: &[usize],
        dst: &[usize],
        mode: Mode,
    ) -> Result<Prediction> {
        check_pairs(features, src, dst, self.slots)?;
        let nl = self.left.params().len();
        let (items, si, di) = gather_plan(src, dst, self.slots);
        let x = tape.constant(features.select_rows(&items));
        let rows = [items.len() * self.slots, self.spec.dim()];
        let (f, fu) = self.left.forward(tape, &p[..nl], x, mode)?;
        let (g, gu) = self.right.forward(tape, &p[nl..], x, mode)?;
        let f = tape.reshape(f, &rows)?;
        let g = tape.reshape(g, &rows)?;
        let u = tape.gather_rows(f, &si)?;
        let v = tape.gather_rows(g, &di)?;
        let uv = tape.mul(u, v)?;
        let raw = tape.sum_axis(uv, 1)?;
        let transform = self.spec.transform.unwrap_or(OutputTransform::Discounted);
        let (distance, clamped) = transform.apply(tape, raw, self.gamma)?;
        let norm_updates = fu.into_iter().map(|u| (0, u)).chain(gu.into_iter().map(|u| (1, u))).collect();
        Ok(Prediction { distance, clamped, norm_updates })
    }

    fn apply_norm_updates(&mut self, updates: &[(usize, NormUpdate)]) {
        for (which, u) in updates {
            let enc = if *which == 0 { &mut self.left } else { &mut self.right };
            enc.update_norms(std::slice::from_ref(u));
        }
    }

    fn head_param_count(&self) -> usize {
        0
    }
}

/// A network on the concatenated pair features with `slots²` outputs, one
/// per (source slot, target slot).
///
/// The first layer `[x; y]·W + b = x·W_x + y·W_y + b` is evaluated once per
/// distinct item and gathered per pair.
pub struct Unconstrained {
    spec: HeadSpec,
    net: Mlp,
    slots: usize,
    gamma: f64,
    input_dim: usize,
}

impl Unconstrained {
    pub fn new(spec: &HeadSpec, ctx: &ModelContext, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let hidden = if spec.hidden.is_empty() { ctx.hidden.clone() } else { spec.hidden.clone() };
        let mut sizes = vec![2 * ctx.input_dim];
        sizes.extend(hidden);
        sizes.push(ctx.slots * ctx.slots);
        let net = Mlp::init(&EncoderSpec::new(sizes, ctx.batch_norm), rng)?;
        Ok(Unconstrained { spec: spec.clone(), net, slots: ctx.slots, gamma: ctx.gamma, input_dim: ctx.input_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }
}

impl PairModel for Unconstrained {
    fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    fn slots(&self) -> usize {
        self.slots
    }

    fn blocks(&self) -> Vec<&Array> {
        self.net.params().values().iter().collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Array> {
        self.net.params_mut().values_mut().iter_mut().collect()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        features: &Array,
        src: &[usize],
        dst: &[usize],
        mode: Mode,
    ) -> Result<Prediction> {
        check_pairs(features, src, dst, self.slots)?;
        let s = self.slots;
        let (items, _, _) = gather_plan(src, dst, s);
        let pos: BTreeMap<usize, usize> = items.iter().enumerate().map(|(i, &it)| (it, i)).collect();
        let si: Vec<usize> = src.iter().map(|e| pos[&(e / s)]).collect();
        let di: Vec<usize> = dst.iter().map(|e| pos[&(e / s)]).collect();
        let x = tape.constant(features.select_rows(&items));
        let wx = tape.slice(p[0], 0, 0, self.input_dim)?;
        let wy = tape.slice(p[0], 0, self.input_dim, 2 * self.input_dim)?;
        let hx = tape.matmul(x, wx)?;
        let hy = tape.matmul(x, wy)?;
        let hx = tape.gather_rows(hx, &si)?;
        let hy = tape.gather_rows(hy, &di)?;
        let pre = tape.add(hx, hy)?;
        let pre = tape.add_row(pre, p[1])?;
        let (out, ups) = self.net.forward_from(tape, p, pre, 1, mode)?;
        let b = src.len();
        let flat = tape.reshape(out, &[b * s * s])?;
        let pick: Vec<usize> = (0..b).map(|i| i * s * s + (src[i] % s) * s + dst[i] % s).collect();
        let raw = tape.gather_rows(flat, &pick)?;
        let transform = self.spec.transform.unwrap_or(OutputTransform::Discounted);
        let (distance, clamped) = transform.apply(tape, raw, self.gamma)?;
        Ok(Prediction { distance, clamped, norm_updates: ups.into_iter().map(|u| (0, u)).collect() })
    }

    fn apply_norm_updates(&mut self, updates: &[(usize, NormUpdate)]) {
        let ups: Vec<NormUpdate> = updates.iter().map(|(_, u)| u.clone()).collect();
        self.net.update_norms(&ups);
    }

    fn head_param_count(&self) -> usize {
        self.net.params().count()
    }
}

pub type ModelBuilder = fn(&HeadSpec, &ModelContext, &mut Rng) -> Result<Box<dyn PairModel>>;

/// Name → constructor table for pair models.
#[derive(Clone)]
pub struct ModelRegistry {
    builders: BTreeMap<String, ModelBuilder>,
}

fn build_latent(spec: &HeadSpec, ctx: &ModelContext, rng: &mut Rng) -> Result<Box<dyn PairModel>> {
    Ok(Box::new(LatentModel::new(spec, ctx, &HeadRegistry::with_defaults(), rng)?))
}

fn build_asym_dot(spec: &HeadSpec, ctx: &ModelContext, rng: &mut Rng) -> Result<Box<dyn PairModel>> {
    Ok(Box::new(AsymDot::new(spec, ctx, rng)?))
}

fn build_unconstrained(spec: &HeadSpec, ctx: &ModelContext, rng: &mut Rng) -> Result<Box<dyn PairModel>> {
    Ok(Box::new(Unconstrained::new(spec, ctx, rng)?))
}

impl ModelRegistry {
    pub fn empty() -> Self {
        ModelRegistry { builders: BTreeMap::new() }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        for f in HeadFamily::ALL.into_iter().filter(|f| f.is_latent()) {
            r.register(f.tag(), build_latent);
        }
        r.register("asym-dot", build_asym_dot);
        r.register("unconstrained", build_unconstrained);
        r
    }

    pub fn register(&mut self, name: &str, builder: ModelBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &HeadSpec, ctx: &ModelContext, rng: &mut Rng) -> Result<Box<dyn PairModel>> {
        spec.validate()?;
        if ctx.slots == 0 {
            return Err(Error::Spec("a model needs at least one slot per item".into()));
        }
        let b = self
            .builders
            .get(spec.family.tag())
            .ok_or_else(|| Error::Spec(format!("no model registered as {}", spec.family)))?;
        b(spec, ctx, rng)
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}
