use super::{check_latents, HeadFamily, HeadSpec, LatentHead};
use crate::diffcore::{softplus_inverse, Array, Tape, Var};
use crate::params::ParamSet;
use crate::{Error, Result, Rng};

/// Symmetric baselines: Euclidean, ℓ1, great-circle and a learned mixture.
struct Metric {
    spec: HeadSpec,
    params: ParamSet,
}

pub(super) fn build(spec: &HeadSpec, _rng: &mut Rng) -> Result<Box<dyn LatentHead>> {
    let mut params = ParamSet::new();
    match spec.family {
        HeadFamily::MetricSphere => params.push("scale", Array::vector(vec![softplus_inverse(1.0)])),
        HeadFamily::MetricMix => {
            params.push("weights", Array::vector(vec![softplus_inverse(1.0 / 3.0); 3]));
            params.push("scale", Array::vector(vec![softplus_inverse(1.0)]));
        }
        _ => {}
    }
    Ok(Box::new(Metric { spec: spec.clone(), params }))
}

fn euclid(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    let d = tape.sub(u, v)?;
    let sq = tape.square(d);
    let s = tape.sum_axis(sq, 1)?;
    Ok(tape.sqrt(s))
}

fn l1(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    let d = tape.sub(u, v)?;
    let a = tape.abs(d);
    Ok(tape.sum_axis(a, 1)?)
}

fn unit_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let sq = tape.square(x);
    let norm = tape.sum_axis(sq, 1)?;
    if tape.value(norm).data().iter().any(|&n| n == 0.0) {
        return Err(Error::Invalid("zero latent has no direction on the sphere".into()));
    }
    let norm = tape.sqrt(norm);
    let norm = tape.reshape(norm, &[shape[0], 1])?;
    let norm = tape.broadcast(norm, &shape)?;
    Ok(tape.div(x, norm)?)
}

/// `scale · 2·asin(min(1, ‖û − v̂‖/2))`, the angle between the directions.
fn sphere(tape: &mut Tape, u: Var, v: Var, scale: Var) -> Result<Var> {
    let uh = unit_rows(tape, u)?;
    let vh = unit_rows(tape, v)?;
    let chord = euclid(tape, uh, vh)?;
    let half = tape.scale(chord, 0.5);
    let flip = tape.neg(half);
    let flip = tape.clamp_min(flip, -1.0);
    let half = tape.neg(flip);
    let angle = tape.asin(half)?;
    let angle = tape.scale(angle, 2.0);
    let scale = tape.softplus(scale);
    let shape = tape.shape(angle).to_vec();
    let scale = tape.broadcast(scale, &shape)?;
    Ok(tape.mul(angle, scale)?)
}

impl Metric {
    fn parts(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var> {
        let b = check_latents(tape, &self.spec, u, v)?;
        let e = euclid(tape, u, v)?;
        let m = l1(tape, u, v)?;
        let s = sphere(tape, u, v, p[1])?;
        let cols: Vec<Var> =
            [e, m, s].into_iter().map(|x| tape.reshape(x, &[b, 1])).collect::<Result<_, _>>()?;
        Ok(tape.concat(&cols, 1)?)
    }
}

impl LatentHead for Metric {
    fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn components(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Option<Var>> {
        if self.spec.family != HeadFamily::MetricMix {
            return Ok(None);
        }
        let parts = self.parts(tape, p, u, v)?;
        let w = tape.softplus(p[0]);
        Ok(Some(tape.mul_row(parts, w)?))
    }

    fn distance(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var> {
        check_latents(tape, &self.spec, u, v)?;
        match self.spec.family {
            HeadFamily::MetricEuclid => euclid(tape, u, v),
            HeadFamily::MetricL1 => l1(tape, u, v),
            HeadFamily::MetricSphere => sphere(tape, u, v, p[0]),
            _ => {
                let parts = self.components(tape, p, u, v)?.expect("mixture components");
                Ok(tape.sum_axis(parts, 1)?)
            }
        }
    }
}
