use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::{Error, Result};

/// Lower clamp for discounted outputs before taking the logarithm.
pub const DISCOUNT_FLOOR: f64 = 1e-12;

/// How a baseline's raw scalar output becomes a distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputTransform {
    Direct,
    Exp,
    Square,
    Discounted,
    SigmoidDiscounted,
}

impl OutputTransform {
    pub const ALL: [OutputTransform; 5] = [
        OutputTransform::Direct,
        OutputTransform::Exp,
        OutputTransform::Square,
        OutputTransform::Discounted,
        OutputTransform::SigmoidDiscounted,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OutputTransform::Direct => "direct",
            OutputTransform::Exp => "exp",
            OutputTransform::Square => "square",
            OutputTransform::Discounted => "discounted",
            OutputTransform::SigmoidDiscounted => "sigmoid-discounted",
        }
    }

    /// Map raw outputs to distances. Also returns how many discounted outputs
    /// fell outside `[DISCOUNT_FLOOR, 1]` and were clamped.
    pub fn apply(self, tape: &mut Tape, o: Var, gamma: f64) -> Result<(Var, usize)> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Invalid(format!("discount {gamma} outside (0, 1)")));
        }
        Ok(match self {
            OutputTransform::Direct => (o, 0),
            OutputTransform::Exp => (tape.exp(o)?, 0),
            OutputTransform::Square => (tape.square(o), 0),
            OutputTransform::Discounted => discounted(tape, o, gamma)?,
            OutputTransform::SigmoidDiscounted => {
                let s = tape.logistic(o);
                discounted(tape, s, gamma)?
            }
        })
    }
}

/// `log(clamp(o, floor, 1)) / log γ`.
fn discounted(tape: &mut Tape, o: Var, gamma: f64) -> Result<(Var, usize)> {
    let clamped = tape
        .value(o)
        .data()
        .iter()
        .filter(|&&x| !(DISCOUNT_FLOOR..=1.0).contains(&x))
        .count();
    let lo = tape.clamp_min(o, DISCOUNT_FLOOR);
    let flip = tape.neg(lo);
    let flip = tape.clamp_min(flip, -1.0);
    let c = tape.neg(flip);
    let log = tape.log(c)?;
    Ok((tape.scale(log, 1.0 / gamma.ln()), clamped))
}
