use rand::Rng as _;

use super::{check_latents, HeadFamily, HeadSpec, LatentHead};
use crate::diffcore::{Array, Tape, Var};
use crate::params::ParamSet;
use crate::{Result, Rng};

/// Symmetric projector distance plus the largest positive coordinate gap of
/// an asymmetric projector. Projectors are two bias-free layers with a ReLU
/// in between, so the head stays positively homogeneous.
struct Mrn {
    spec: HeadSpec,
    params: ParamSet,
    squared: bool,
}

fn kaiming(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Array::matrix(fan_in, fan_out, data).expect("sized")
}

pub(super) fn build(spec: &HeadSpec, rng: &mut Rng) -> Result<Box<dyn LatentHead>> {
    let width = spec.hidden_or_default()[0];
    let d = spec.dim();
    let mut params = ParamSet::new();
    for side in ["sym", "asym"] {
        params.push(format!("{side}.0"), kaiming(rng, d, width));
        params.push(format!("{side}.1"), kaiming(rng, width, width));
    }
    let squared = spec.family == HeadFamily::MrnOrig;
    Ok(Box::new(Mrn { spec: spec.clone(), params, squared }))
}

fn project(tape: &mut Tape, x: Var, w0: Var, w1: Var) -> Result<Var> {
    let h = tape.matmul(x, w0)?;
    let h = tape.relu(h);
    Ok(tape.matmul(h, w1)?)
}

impl LatentHead for Mrn {
    fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `[symmetric part, asymmetric part]` per row.
    fn components(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Option<Var>> {
        let b = check_latents(tape, &self.spec, u, v)?;
        let su = project(tape, u, p[0], p[1])?;
        let sv = project(tape, v, p[0], p[1])?;
        let diff = tape.sub(su, sv)?;
        let sq = tape.square(diff);
        let mut sym = tape.sum_axis(sq, 1)?;
        if !self.squared {
            sym = tape.sqrt(sym);
        }
        let au = project(tape, u, p[2], p[3])?;
        let av = project(tape, v, p[2], p[3])?;
        let gap = tape.sub(au, av)?;
        let gap = tape.max_axis(gap, 1)?;
        let asym = tape.relu(gap);
        let sym = tape.reshape(sym, &[b, 1])?;
        let asym = tape.reshape(asym, &[b, 1])?;
        Ok(Some(tape.concat(&[sym, asym], 1)?))
    }

    fn distance(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var> {
        let comp = self.components(tape, p, u, v)?.expect("mrn has components");
        Ok(tape.sum_axis(comp, 1)?)
    }
}
