use super::{check_latents, HeadFamily, HeadSpec, LatentHead};
use crate::diffcore::{Array, Tape, Var};
use crate::params::ParamSet;
use crate::{Error, Result, Rng};

/// Length of `∪_j [u_ij, max(u_ij, v_ij)]` for every component row.
///
/// `u, v: [B, k·l]`; returns `[B, k]`.
pub fn iqe_components(tape: &mut Tape, u: Var, v: Var, k: usize, l: usize) -> Result<Var> {
    let (su, sv) = (tape.shape(u).to_vec(), tape.shape(v).to_vec());
    if su != sv {
        return Err(crate::DiffError::ShapeMismatch { op: "iqe", left: su, right: sv }.into());
    }
    if su.len() != 2 || su[1] != k * l {
        return Err(crate::DiffError::InvalidShape {
            op: "iqe",
            shape: su,
            reason: format!("expected [batch, {}]", k * l),
        }
        .into());
    }
    let b = su[0];
    let u = tape.reshape(u, &[b * k, l])?;
    let v = tape.reshape(v, &[b * k, l])?;
    let right = tape.maximum(v, u)?;
    let len = tape.union_length(u, right)?;
    Ok(tape.reshape(len, &[b, k])?)
}

/// `α·max + (1−α)·mean` over the last axis of `d: [B, c]`; `alpha` has one
/// element.
pub fn maxmean(tape: &mut Tape, d: Var, alpha: Var) -> Result<Var> {
    let mx = tape.max_axis(d, 1)?;
    let mn = tape.mean_axis(d, 1)?;
    let gap = tape.sub(mx, mn)?;
    let shape = tape.shape(gap).to_vec();
    let a = tape.broadcast(alpha, &shape)?;
    let w = tape.mul(gap, a)?;
    Ok(tape.add(mn, w)?)
}

/// Plain evaluation of the maxmean reduction.
pub fn maxmean_reduce(d: &[f64], alpha: f64) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Invalid("maxmean of an empty vector".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("maxmean weight {alpha} outside [0, 1]")));
    }
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok(alpha * max + (1.0 - alpha) * mean)
}

struct Iqe {
    spec: HeadSpec,
    params: ParamSet,
}

pub(super) fn build(spec: &HeadSpec, _rng: &mut Rng) -> Result<Box<dyn LatentHead>> {
    let mut params = ParamSet::new();
    if spec.family == HeadFamily::IqeMaxmean {
        params.push("alpha", Array::vector(vec![0.0]));
    }
    Ok(Box::new(Iqe { spec: spec.clone(), params }))
}

impl LatentHead for Iqe {
    fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn components(&self, tape: &mut Tape, _p: &[Var], u: Var, v: Var) -> Result<Option<Var>> {
        check_latents(tape, &self.spec, u, v)?;
        Ok(Some(iqe_components(tape, u, v, self.spec.k, self.spec.l)?))
    }

    fn distance(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var> {
        let d = iqe_components(tape, u, v, self.spec.k, self.spec.l)?;
        match self.spec.family {
            HeadFamily::IqeMaxmean => {
                let alpha = tape.logistic(p[0]);
                maxmean(tape, d, alpha)
            }
            _ => Ok(tape.sum_axis(d, 1)?),
        }
    }
}
