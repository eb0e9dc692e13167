use super::{Array, DiffError, Tape, Var};

/// Primitive operations, addressable by name for one-off evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Matmul,
    Relu,
    Exp,
    Log,
    Sqrt,
    Square,
    Logistic,
    Softplus,
    Abs,
    MaxReduce { axis: usize },
    MeanReduce { axis: usize },
    SumReduce { axis: usize },
    /// Sorts along the last axis.
    Sort,
    ElementwiseMax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Broadcast { shape: Vec<usize> },
    ClampMin { min: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Matmul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
            Primitive::Logistic => "logistic",
            Primitive::Softplus => "softplus",
            Primitive::Abs => "abs",
            Primitive::MaxReduce { .. } => "max-reduce",
            Primitive::MeanReduce { .. } => "mean-reduce",
            Primitive::SumReduce { .. } => "sum-reduce",
            Primitive::Sort => "sort-along-axis",
            Primitive::ElementwiseMax => "elementwise-max",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::ClampMin { .. } => "clamp-min",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Matmul
            | Primitive::ElementwiseMax => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Record this primitive on `tape`.
    pub fn apply(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var, DiffError> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(DiffError::InvalidArgument {
                    op: self.name(),
                    reason: format!("expects {n} inputs, got {}", inputs.len()),
                });
            }
        }
        let Some(&x) = inputs.first() else {
            return Err(DiffError::InvalidArgument { op: self.name(), reason: "no inputs".into() });
        };
        Ok(match self {
            Primitive::Add => tape.add(inputs[0], inputs[1])?,
            Primitive::Sub => tape.sub(inputs[0], inputs[1])?,
            Primitive::Mul => tape.mul(inputs[0], inputs[1])?,
            Primitive::Matmul => tape.matmul(inputs[0], inputs[1])?,
            Primitive::ElementwiseMax => tape.maximum(inputs[0], inputs[1])?,
            Primitive::Relu => tape.relu(x),
            Primitive::Exp => tape.exp(x)?,
            Primitive::Log => tape.log(x)?,
            Primitive::Sqrt => tape.sqrt(x),
            Primitive::Square => tape.square(x),
            Primitive::Logistic => tape.logistic(x),
            Primitive::Softplus => tape.softplus(x),
            Primitive::Abs => tape.abs(x),
            Primitive::MaxReduce { axis } => tape.max_axis(x, *axis)?,
            Primitive::MeanReduce { axis } => tape.mean_axis(x, *axis)?,
            Primitive::SumReduce { axis } => tape.sum_axis(x, *axis)?,
            Primitive::Sort => tape.sort_last(x),
            Primitive::Concat { axis } => tape.concat(inputs, *axis)?,
            Primitive::Slice { axis, start, end } => tape.slice(x, *axis, *start, *end)?,
            Primitive::Broadcast { shape } => tape.broadcast(x, shape)?,
            Primitive::ClampMin { min } => tape.clamp_min(x, *min),
        })
    }
}

/// Output of [`forward_primitive`]; sorting also reports, per row, the source
/// index of each sorted position.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveOutput {
    pub value: Array,
    pub permutation: Option<Vec<usize>>,
}

/// Evaluate a single primitive on concrete arrays.
pub fn forward_primitive(tag: &Primitive, inputs: &[Array]) -> Result<PrimitiveOutput, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
    if vars.is_empty() {
        return Err(DiffError::InvalidArgument { op: tag.name(), reason: "no inputs".into() });
    }
    let out = tag.apply(&mut tape, &vars)?;
    let permutation = match tag {
        Primitive::Sort => {
            // Recover the permutation by reordering the index ramp.
            let (shape, l) = {
                let s = tape.shape(out).to_vec();
                let l = *s.last().unwrap_or(&1);
                (s, l)
            };
            let ramp: Vec<f64> =
                (0..tape.value(out).len()).map(|i| (i % l.max(1)) as f64).collect();
            let ramp = tape.constant(Array::new(shape, ramp)?);
            let p = tape.permute_like(ramp, out)?;
            Some(tape.value(p).data().iter().map(|&v| v as usize).collect())
        }
        _ => None,
    };
    Ok(PrimitiveOutput { value: tape.value(out).clone(), permutation })
}
