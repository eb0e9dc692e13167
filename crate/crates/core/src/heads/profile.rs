use std::fmt::Write as _;

use super::LatentHead;
use crate::diffcore::{Array, Tape};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub scale: f64,
    pub distance: f64,
    pub components: Vec<f64>,
}

/// Distance and components along the ray `(s·u₀, s·v₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub family: String,
    pub rows: Vec<ProfileRow>,
}

impl ProfileTable {
    pub fn to_csv(&self) -> String {
        let width = self.rows.iter().map(|r| r.components.len()).max().unwrap_or(0);
        let mut out = String::from("family,scale,distance");
        for i in 0..width {
            let _ = write!(out, ",c{i}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", self.family, r.scale, r.distance);
            for i in 0..width {
                match r.components.get(i) {
                    Some(c) => {
                        let _ = write!(out, ",{c}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn profile_head(head: &dyn LatentHead, u0: &[f64], v0: &[f64], scales: &[f64]) -> Result<ProfileTable> {
    let mut rows = Vec::with_capacity(scales.len());
    for &s in scales {
        let u: Vec<f64> = u0.iter().map(|x| x * s).collect();
        let v: Vec<f64> = v0.iter().map(|x| x * s).collect();
        let mut tape = Tape::new();
        let p = head.params().constants(&mut tape);
        let u = tape.constant(Array::matrix(1, u.len(), u)?);
        let v = tape.constant(Array::matrix(1, v.len(), v)?);
        let distance = head.distance(&mut tape, &p, u, v)?;
        let distance = tape.value(distance).data()[0];
        let components = match head.components(&mut tape, &p, u, v)? {
            Some(c) => tape.value(c).data().to_vec(),
            None => vec![],
        };
        rows.push(ProfileRow { scale: s, distance, components });
    }
    Ok(ProfileTable { family: head.family().tag().to_string(), rows })
}
