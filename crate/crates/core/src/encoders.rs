//! Feedforward ReLU encoders with optional batch normalization after each
//! hidden activation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape, Var};
use crate::params::ParamSet;
use crate::{io_err, seeded, Error, Result, Rng};

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Layer widths from the input dimension to the latent dimension.
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    0.1
}

impl EncoderSpec {
    pub fn new(sizes: Vec<usize>, batch_norm: bool) -> Self {
        EncoderSpec { sizes, batch_norm, momentum: default_momentum() }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 3 {
            return Err(Error::Spec(format!(
                "encoder needs input, at least one hidden layer and output, got {:?}",
                self.sizes
            )));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Spec(format!("encoder layer of width 0 in {:?}", self.sizes)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Spec(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch statistics gathered during a train-mode pass, folded into the
/// running statistics with [`Mlp::update_norms`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormUpdate {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A ReLU MLP. Blocks per layer `i`: `w{i}: [in, out]`, `b{i}: [out]`, and for
/// normalized hidden layers `g{i}`, `h{i}` (scale and shift).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: EncoderSpec,
    params: ParamSet,
    norms: Vec<NormStats>,
    seed: u64,
    steps: u64,
}

/// Kaiming-uniform fan-in weights with matching bias init.
pub fn init_params(spec: &EncoderSpec, seed: u64) -> Result<Mlp> {
    Mlp::init(spec, &mut seeded(seed)).map(|mut m| {
        m.seed = seed;
        m
    })
}

impl Mlp {
    pub fn init(spec: &EncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut norms = Vec::new();
        let layers = spec.sizes.len() - 1;
        for i in 0..layers {
            let (fan_in, fan_out) = (spec.sizes[i], spec.sizes[i + 1]);
            let wb = (6.0 / fan_in as f64).sqrt();
            let bb = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-wb..wb)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bb..bb)).collect();
            params.push(format!("w{i}"), Array::matrix(fan_in, fan_out, w)?);
            params.push(format!("b{i}"), Array::vector(b));
            if spec.batch_norm && i + 1 < layers {
                params.push(format!("g{i}"), Array::full(&[fan_out], 1.0));
                params.push(format!("h{i}"), Array::zeros(&[fan_out]));
                norms.push(NormStats { mean: vec![0.0; fan_out], var: vec![1.0; fan_out] });
            }
        }
        Ok(Mlp { spec: spec.clone(), params, norms, seed: 0, steps: 0 })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormStats] {
        &self.norms
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    fn layers(&self) -> usize {
        self.spec.sizes.len() - 1
    }

    /// Block offset of layer `i` inside [`Mlp::params`].
    fn offset(&self, i: usize) -> usize {
        let per_norm = if self.spec.batch_norm { 4 } else { 2 };
        i * per_norm
    }

    /// Full forward pass of `x: [B, in]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, mode: Mode) -> Result<(Var, Vec<NormUpdate>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_dim() {
            return Err(Error::Invalid(format!(
                "encoder expects [batch, {}], got {shape:?}",
                self.spec.input_dim()
            )));
        }
        let pre = self.affine(tape, p, x, 0)?;
        self.forward_from(tape, p, pre, 1, mode)
    }

    /// `x · w{i} + b{i}`.
    pub fn affine(&self, tape: &mut Tape, p: &[Var], x: Var, i: usize) -> Result<Var> {
        let at = self.offset(i);
        Ok(tape.linear(x, p[at], Some(p[at + 1]))?)
    }

    /// Continue from the pre-activation of layer `from − 1`.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        p: &[Var],
        pre: Var,
        from: usize,
        mode: Mode,
    ) -> Result<(Var, Vec<NormUpdate>)> {
        let mut updates = Vec::new();
        let mut h = pre;
        for i in from..=self.layers() {
            // h is the pre-activation of layer i − 1, which is hidden here
            let layer = i - 1;
            if layer + 1 == self.layers() {
                break;
            }
            h = tape.relu(h);
            if self.spec.batch_norm {
                h = self.normalize(tape, p, h, layer, mode, &mut updates)?;
            }
            h = self.affine(tape, p, h, i)?;
        }
        Ok((h, updates))
    }

    fn normalize(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h: Var,
        layer: usize,
        mode: Mode,
        updates: &mut Vec<NormUpdate>,
    ) -> Result<Var> {
        let at = self.offset(layer);
        let (gain, shift) = (p[at + 2], p[at + 3]);
        let shape = tape.shape(h).to_vec();
        let (centered, denom) = match mode {
            Mode::Train => {
                let mean = tape.mean_axis(h, 0)?;
                let mb = tape.broadcast(mean, &shape)?;
                let centered = tape.sub(h, mb)?;
                let sq = tape.square(centered);
                let var = tape.mean_axis(sq, 0)?;
                let b = shape[0] as f64;
                let unbiased = if b > 1.0 { b / (b - 1.0) } else { 1.0 };
                updates.push(NormUpdate {
                    layer,
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().iter().map(|v| v * unbiased).collect(),
                });
                let var = tape.add_scalar(var, BN_EPS);
                (centered, tape.sqrt(var))
            }
            Mode::Eval => {
                let stats = &self.norms[layer];
                let mean = tape.constant(Array::vector(stats.mean.clone()));
                let mb = tape.broadcast(mean, &shape)?;
                let centered = tape.sub(h, mb)?;
                let sd = stats.var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
                (centered, tape.constant(Array::vector(sd)))
            }
        };
        let db = tape.broadcast(denom, &shape)?;
        let normed = tape.div(centered, db)?;
        let scaled = tape.mul_row(normed, gain)?;
        Ok(tape.add_row(scaled, shift)?)
    }

    /// Fold batch statistics into the running statistics.
    pub fn update_norms(&mut self, updates: &[NormUpdate]) {
        let m = self.spec.momentum;
        for u in updates {
            let stats = &mut self.norms[u.layer];
            for (r, b) in stats.mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in stats.var.iter_mut().zip(&u.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Forward evaluation without gradients.
    pub fn encode(&self, x: &Array, mode: Mode) -> Result<Array> {
        let mut tape = Tape::new();
        let p = self.params.constants(&mut tape);
        let x = tape.constant(x.clone());
        let (y, _) = self.forward(&mut tape, &p, x, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Parameters and running statistics as one flat vector.
    fn flat_state(&self) -> Vec<f64> {
        let mut flat = self.params.flatten();
        for s in &self.norms {
            flat.extend(&s.mean);
            flat.extend(&s.var);
        }
        flat
    }

    /// Write `<path>` (little-endian `f64`s) and `<path>.json` (spec, seed,
    /// step count, block layout).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.flat_state().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(io_err(path))?;
        let blocks: Vec<_> = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(n, v)| serde_json::json!({ "name": n, "shape": v.shape() }))
            .collect();
        let sidecar = serde_json::json!({
            "spec": self.spec,
            "seed": self.seed,
            "steps": self.steps,
            "param_count": self.params.count(),
            "blocks": blocks,
        });
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(io_err(side))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(io_err(&side))?;
        let meta: serde_json::Value = serde_json::from_str(&text)?;
        let spec: EncoderSpec = serde_json::from_value(meta["spec"].clone())?;
        let mut mlp = Mlp::init(&spec, &mut seeded(0))?;
        mlp.seed = meta["seed"].as_u64().unwrap_or(0);
        mlp.steps = meta["steps"].as_u64().unwrap_or(0);
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Invalid(format!("{}: truncated parameter file", path.display())));
        }
        let flat: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let n = mlp.params.count();
        let stats: usize = mlp.norms.iter().map(|s| 2 * s.mean.len()).sum();
        if flat.len() != n + stats {
            return Err(Error::Invalid(format!(
                "{}: expected {} values, found {}",
                path.display(),
                n + stats,
                flat.len()
            )));
        }
        mlp.params.load_flat(&flat[..n])?;
        let mut at = n;
        for s in &mut mlp.norms {
            let w = s.mean.len();
            s.mean.copy_from_slice(&flat[at..at + w]);
            s.var.copy_from_slice(&flat[at + w..at + 2 * w]);
            at += 2 * w;
        }
        Ok(mlp)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
