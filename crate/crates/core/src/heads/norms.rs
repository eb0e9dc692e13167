use rand::Rng as _;

use super::{check_latents, maxmean, HeadFamily, HeadSpec, LatentHead};
use crate::diffcore::{softplus_inverse, Array, Tape, Var};
use crate::params::ParamSet;
use crate::{Error, Result, Rng};

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("sized from shape")
}

/// Raw block whose softplus is uniform in `(0, hi)`.
fn nonneg_raw(rng: &mut Rng, shape: &[usize], hi: f64) -> Array {
    uniform(rng, shape, 0.0, hi).map(|w| softplus_inverse(w.max(1e-6)))
}

fn nonneg(tape: &mut Tape, raw: Var) -> Result<Var> {
    let w = tape.softplus(raw);
    if tape.value(w).data().iter().any(|&x| x < 0.0) {
        return Err(Error::Invalid("negative weight after reparametrization".into()));
    }
    Ok(w)
}

/// `[max(x, y), α·relu(x) + β·relu(y)]` with `x, y` the two halves of `h`.
fn maxrelu(tape: &mut Tape, h: Var, coef: Var) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let (b, w) = (shape[0], shape[1]);
    let x = tape.slice(h, 1, 0, w / 2)?;
    let y = tape.slice(h, 1, w / 2, w)?;
    let m = tape.maximum(x, y)?;
    let coef = tape.softplus(coef);
    let a = tape.slice(coef, 0, 0, 1)?;
    let c = tape.slice(coef, 0, 1, 2)?;
    let a = tape.broadcast(a, &[b, w / 2])?;
    let c = tape.broadcast(c, &[b, w / 2])?;
    let rx = tape.relu(x);
    let rx = tape.mul(rx, a)?;
    let ry = tape.relu(y);
    let ry = tape.mul(ry, c)?;
    let r = tape.add(rx, ry)?;
    Ok(tape.concat(&[m, r], 1)?)
}

/// Layered asymmetric norm of `u − v`.
struct DeepNorm {
    spec: HeadSpec,
    params: ParamSet,
    layers: usize,
    fixed: bool,
}

pub(super) fn build_deep(spec: &HeadSpec, rng: &mut Rng) -> Result<Box<dyn LatentHead>> {
    let hidden = spec.hidden_or_default();
    let (layers, width) = (hidden[0], hidden[1]);
    let fixed = spec.family == HeadFamily::DeepNormFixed;
    let d = spec.dim();
    let mut params = ParamSet::new();
    for t in 0..layers {
        let bound = 1.0 / (d as f64).sqrt();
        params.push(format!("u{t}"), uniform(rng, &[d, width], -bound, bound));
        if t > 0 {
            params.push(format!("w{t}"), nonneg_raw(rng, &[width, width], 1.0 / width as f64));
        }
        if !(fixed && t == layers - 1) {
            params.push(format!("act{t}"), Array::vector(vec![softplus_inverse(1.0); 2]));
        }
    }
    params.push("alpha", Array::vector(vec![0.0]));
    Ok(Box::new(DeepNorm { spec: spec.clone(), params, layers, fixed }))
}

impl LatentHead for DeepNorm {
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
        check_latents(tape, &self.spec, u, v)?;
        let z = tape.sub(u, v)?;
        let mut p = p.iter().copied();
        let mut h: Option<Var> = None;
        for t in 0..self.layers {
            let inject = p.next().expect("input block");
            let mut pre = tape.matmul(z, inject)?;
            if let Some(prev) = h {
                let w = nonneg(tape, p.next().expect("inner block"))?;
                let carried = tape.matmul(prev, w)?;
                pre = tape.add(pre, carried)?;
            }
            h = Some(if self.fixed && t == self.layers - 1 {
                tape.relu(pre)
            } else {
                maxrelu(tape, pre, p.next().expect("activation block"))?
            });
        }
        Ok(h)
    }

    fn distance(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var> {
        let comp = self.components(tape, p, u, v)?.expect("at least one layer");
        let alpha = tape.logistic(*p.last().expect("alpha block"));
        maxmean(tape, comp, alpha)
    }
}

/// Maxmean over `‖W_i · [(u−v)^+; (v−u)^+]‖₂` with entrywise nonnegative `W_i`.
struct WideNorm {
    spec: HeadSpec,
    params: ParamSet,
    components: usize,
    size: usize,
}

pub(super) fn build_wide(spec: &HeadSpec, rng: &mut Rng) -> Result<Box<dyn LatentHead>> {
    let hidden = spec.hidden_or_default();
    let (components, size) = (hidden[0], hidden[1]);
    let fan_in = 2 * spec.dim();
    let mut params = ParamSet::new();
    let hi = 2.0 / (fan_in as f64).sqrt();
    params.push("w", nonneg_raw(rng, &[fan_in, components * size], hi));
    params.push("alpha", Array::vector(vec![0.0]));
    Ok(Box::new(WideNorm { spec: spec.clone(), params, components, size }))
}

impl LatentHead for WideNorm {
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
        let fwd = tape.sub(u, v)?;
        let back = tape.neg(fwd);
        let fwd = tape.relu(fwd);
        let back = tape.relu(back);
        let feat = tape.concat(&[fwd, back], 1)?;
        let w = nonneg(tape, p[0])?;
        let y = tape.matmul(feat, w)?;
        let y = tape.square(y);
        let y = tape.reshape(y, &[b * self.components, self.size])?;
        let norm = tape.sum_axis(y, 1)?;
        let norm = tape.sqrt(norm);
        Ok(Some(tape.reshape(norm, &[b, self.components])?))
    }

    fn distance(&self, tape: &mut Tape, p: &[Var], u: Var, v: Var) -> Result<Var> {
        let comp = self.components(tape, p, u, v)?.expect("wide norm has components");
        let alpha = tape.logistic(p[1]);
        maxmean(tape, comp, alpha)
    }
}
