use super::{check_latents, HeadSpec, LatentHead};
use crate::diffcore::{softplus_inverse, Array, Tape, Var};
use crate::params::ParamSet;
use crate::{Result, Rng};

/// PQE with Lebesgue-measure components: `Σ_i α_i (1 − exp(−Σ_j (u_ij − v_ij)^+))`.
struct PqeLh {
    spec: HeadSpec,
    params: ParamSet,
}

pub(super) fn build(spec: &HeadSpec, _rng: &mut Rng) -> Result<Box<dyn LatentHead>> {
    let mut params = ParamSet::new();
    let raw = softplus_inverse(1.0 / spec.k as f64);
    params.push("scale", Array::vector(vec![raw; spec.k]));
    Ok(Box::new(PqeLh { spec: spec.clone(), params }))
}

impl LatentHead for PqeLh {
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
        let b = check_latents(tape, &self.spec, u, v)?;
        let (k, l) = (self.spec.k, self.spec.l);
        let diff = tape.sub(u, v)?;
        let pos = tape.relu(diff);
        let rows = tape.reshape(pos, &[b * k, l])?;
        let mass = tape.sum_axis(rows, 1)?;
        let mass = tape.reshape(mass, &[b, k])?;
        let decay = tape.neg(mass);
        let decay = tape.exp(decay)?;
        let decay = tape.neg(decay);
        let comp = tape.add_scalar(decay, 1.0);
        let alpha = tape.softplus(p[0]);
        Ok(Some(tape.mul_row(comp, alpha)?))
    }

    fn distance(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var> {
        let comp = self.components(tape, p, u, v)?.expect("pqe has components");
        Ok(tape.sum_axis(comp, 1)?)
    }
}
