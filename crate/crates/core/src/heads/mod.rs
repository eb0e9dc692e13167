//! Latent quasimetric heads and the baseline head families.
//!
//! A head maps two row-aligned latent batches `u, v: [B, k·l]` to `B`
//! distances. Heads are built from a [`HeadSpec`] through a [`HeadRegistry`].

mod iqe;
mod metric;
mod mrn;
mod norms;
mod pqe;
mod profile;
mod transform;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape, Var};
use crate::params::ParamSet;
use crate::{Error, Result, Rng};

pub use iqe::{iqe_components, maxmean, maxmean_reduce};
pub use profile::{profile_head, ProfileRow, ProfileTable};
pub use transform::{OutputTransform, DISCOUNT_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadFamily {
    IqeSum,
    IqeMaxmean,
    PqeLh,
    DeepNormOrig,
    DeepNormFixed,
    WideNorm,
    MrnOrig,
    MrnFixed,
    MetricEuclid,
    MetricL1,
    MetricSphere,
    MetricMix,
    AsymDot,
    Unconstrained,
}

impl HeadFamily {
    pub const ALL: [HeadFamily; 14] = [
        HeadFamily::IqeSum,
        HeadFamily::IqeMaxmean,
        HeadFamily::PqeLh,
        HeadFamily::DeepNormOrig,
        HeadFamily::DeepNormFixed,
        HeadFamily::WideNorm,
        HeadFamily::MrnOrig,
        HeadFamily::MrnFixed,
        HeadFamily::MetricEuclid,
        HeadFamily::MetricL1,
        HeadFamily::MetricSphere,
        HeadFamily::MetricMix,
        HeadFamily::AsymDot,
        HeadFamily::Unconstrained,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            HeadFamily::IqeSum => "iqe-sum",
            HeadFamily::IqeMaxmean => "iqe-maxmean",
            HeadFamily::PqeLh => "pqe-lh",
            HeadFamily::DeepNormOrig => "deep-norm-orig",
            HeadFamily::DeepNormFixed => "deep-norm-fixed",
            HeadFamily::WideNorm => "wide-norm",
            HeadFamily::MrnOrig => "mrn-orig",
            HeadFamily::MrnFixed => "mrn-fixed",
            HeadFamily::MetricEuclid => "metric-euclid",
            HeadFamily::MetricL1 => "metric-l1",
            HeadFamily::MetricSphere => "metric-sphere",
            HeadFamily::MetricMix => "metric-mix",
            HeadFamily::AsymDot => "asym-dot",
            HeadFamily::Unconstrained => "unconstrained",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.tag() == tag)
    }

    /// Acts on a pair of latents (everything except the two pair baselines).
    pub fn is_latent(self) -> bool {
        !matches!(self, HeadFamily::AsymDot | HeadFamily::Unconstrained)
    }

    /// Guaranteed to be a quasimetric on latents for every parameter value.
    pub fn is_quasimetric(self) -> bool {
        matches!(
            self,
            HeadFamily::IqeSum
                | HeadFamily::IqeMaxmean
                | HeadFamily::PqeLh
                | HeadFamily::DeepNormFixed
                | HeadFamily::WideNorm
                | HeadFamily::MrnFixed
        )
    }

    pub fn is_metric(self) -> bool {
        matches!(
            self,
            HeadFamily::MetricEuclid
                | HeadFamily::MetricL1
                | HeadFamily::MetricSphere
                | HeadFamily::MetricMix
        )
    }

    /// `d(αu, αv) = α·d(u, v)` holds exactly for every α > 0.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(
            self,
            HeadFamily::IqeSum
                | HeadFamily::IqeMaxmean
                | HeadFamily::DeepNormFixed
                | HeadFamily::DeepNormOrig
                | HeadFamily::WideNorm
                | HeadFamily::MrnFixed
                | HeadFamily::MetricEuclid
                | HeadFamily::MetricL1
        )
    }

    /// Default `hidden` block when a spec leaves it empty.
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            HeadFamily::DeepNormOrig | HeadFamily::DeepNormFixed => vec![3, 48],
            HeadFamily::WideNorm => vec![12, 11],
            HeadFamily::MrnOrig | HeadFamily::MrnFixed => vec![48],
            _ => vec![],
        }
    }
}

impl std::fmt::Display for HeadFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Configuration of one head.
///
/// `hidden` is family specific: `[layers, width]` for Deep Norm,
/// `[components, size]` for Wide Norm, `[width]` for the MRN projectors and
/// the hidden layer sizes of the unconstrained pair network. The latent
/// dimension is always `k·l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub family: HeadFamily,
    pub k: usize,
    pub l: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<OutputTransform>,
}

impl HeadSpec {
    pub fn new(family: HeadFamily, k: usize, l: usize) -> Self {
        let transform = (!family.is_latent()).then_some(OutputTransform::Discounted);
        HeadSpec { family, k, l, hidden: family.default_hidden(), transform }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_transform(mut self, t: OutputTransform) -> Self {
        self.transform = Some(t);
        self
    }

    pub fn dim(&self) -> usize {
        self.k * self.l
    }

    /// `hidden`, or the family default when empty.
    pub fn hidden_or_default(&self) -> Vec<usize> {
        if self.hidden.is_empty() {
            self.family.default_hidden()
        } else {
            self.hidden.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(format!("{}: {m}", self.family)));
        if self.k == 0 || self.l == 0 {
            return bad(format!("k and l must be positive, got k={} l={}", self.k, self.l));
        }
        let hidden = self.hidden_or_default();
        match self.family {
            HeadFamily::DeepNormOrig | HeadFamily::DeepNormFixed => {
                if hidden.len() != 2 || hidden[0] == 0 || hidden[1] == 0 || hidden[1] % 2 != 0 {
                    return bad(format!("hidden must be [layers, even width], got {hidden:?}"));
                }
            }
            HeadFamily::WideNorm => {
                if hidden.len() != 2 || hidden.contains(&0) {
                    return bad(format!("hidden must be [components, size], got {hidden:?}"));
                }
            }
            HeadFamily::MrnOrig | HeadFamily::MrnFixed => {
                if hidden.len() != 1 || hidden[0] == 0 {
                    return bad(format!("hidden must be [width], got {hidden:?}"));
                }
            }
            _ => {}
        }
        if self.family.is_latent() {
            if self.transform.is_some() {
                return bad("latent heads take no output transform".into());
            }
        } else if self.transform.is_none() {
            return bad("baseline heads need an output transform".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: HeadSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A latent quasimetric (or baseline metric) head.
pub trait LatentHead: Send {
    fn spec(&self) -> &HeadSpec;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Distances for `u, v: [B, k·l]`, shape `[B]`. `p` holds one variable per
    /// parameter block, in [`LatentHead::params`] order.
    fn distance(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var>;

    /// Per-row components `[B, c]` before reduction, for heads that have them.
    fn components(&self, _tape: &mut Tape, _p: &[Var], _u: Var, _v: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    fn family(&self) -> HeadFamily {
        self.spec().family
    }

    fn param_count(&self) -> usize {
        self.params().count()
    }

    /// Forward evaluation on concrete latents, without gradients.
    fn eval(&self, u: &Array, v: &Array) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params().constants(&mut tape);
        let (u, v) = (tape.constant(u.clone()), tape.constant(v.clone()));
        let d = self.distance(&mut tape, &p, u, v)?;
        Ok(tape.value(d).data().to_vec())
    }

    /// Distance between two single latents.
    fn eval_pair(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        let u = Array::matrix(1, u.len(), u.to_vec())?;
        let v = Array::matrix(1, v.len(), v.to_vec())?;
        Ok(self.eval(&u, &v)?[0])
    }
}

pub(crate) fn check_latents(tape: &Tape, spec: &HeadSpec, u: Var, v: Var) -> Result<usize> {
    let (su, sv) = (tape.shape(u), tape.shape(v));
    if su != sv {
        return Err(crate::DiffError::ShapeMismatch {
            op: "head",
            left: su.to_vec(),
            right: sv.to_vec(),
        }
        .into());
    }
    if su.len() != 2 || su[1] != spec.dim() {
        return Err(crate::DiffError::InvalidShape {
            op: "head",
            shape: su.to_vec(),
            reason: format!("expected [batch, {}]", spec.dim()),
        }
        .into());
    }
    Ok(su[0])
}

pub type HeadBuilder = fn(&HeadSpec, &mut Rng) -> Result<Box<dyn LatentHead>>;

/// Name → constructor table for latent heads.
#[derive(Clone)]
pub struct HeadRegistry {
    builders: BTreeMap<String, HeadBuilder>,
}

impl HeadRegistry {
    pub fn empty() -> Self {
        HeadRegistry { builders: BTreeMap::new() }
    }

    /// Every latent family shipped with the crate.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("iqe-sum", iqe::build);
        r.register("iqe-maxmean", iqe::build);
        r.register("pqe-lh", pqe::build);
        r.register("deep-norm-orig", norms::build_deep);
        r.register("deep-norm-fixed", norms::build_deep);
        r.register("wide-norm", norms::build_wide);
        r.register("mrn-orig", mrn::build);
        r.register("mrn-fixed", mrn::build);
        r.register("metric-euclid", metric::build);
        r.register("metric-l1", metric::build);
        r.register("metric-sphere", metric::build);
        r.register("metric-mix", metric::build);
        r
    }

    pub fn register(&mut self, name: &str, builder: HeadBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &HeadSpec, rng: &mut Rng) -> Result<Box<dyn LatentHead>> {
        spec.validate()?;
        let builder = self
            .builders
            .get(spec.family.tag())
            .ok_or_else(|| Error::Spec(format!("no latent head registered as {}", spec.family)))?;
        builder(spec, rng)
    }
}

impl Default for HeadRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

/// Trainable parameters inside the head only (encoders excluded).
///
/// The asymmetric dot product has none. The unconstrained pair network is
/// counted as applied to a concatenated pair of `k·l`-dimensional inputs.
pub fn head_param_count(spec: &HeadSpec) -> Result<usize> {
    spec.validate()?;
    match spec.family {
        HeadFamily::AsymDot => Ok(0),
        HeadFamily::Unconstrained => {
            let mut sizes = vec![2 * spec.dim()];
            sizes.extend(spec.hidden.iter().copied());
            sizes.push(1);
            Ok(sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum())
        }
        _ => Ok(HeadRegistry::with_defaults().build(spec, &mut crate::seeded(0))?.param_count()),
    }
}
