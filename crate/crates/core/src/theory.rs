//! Constructive embeddings, limit checks, failure witnesses and axiom audits.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape};
use crate::graphs::DistanceOracle;
use crate::heads::{iqe_components, maxmean_reduce};
use crate::heads::{HeadFamily, HeadRegistry, HeadSpec, LatentHead};
use crate::models::{predict, ModelContext, ModelRegistry, PairModel};
use crate::{seeded, Error, Result, Rng};

/// Pairs evaluated per tape.
const CHUNK: usize = 8192;

/// Latent table plus the head that reads distances off it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCertificate {
    /// `[n, k·l]`, one row per point.
    pub latents: Array,
    pub spec: HeadSpec,
    /// Maxmean weight, pinned; `None` for IQE-sum.
    pub alpha: Option<f64>,
    /// Largest `|d̂ − d|` over all ordered pairs.
    pub max_error: f64,
    pub note: String,
}

impl EmbeddingCertificate {
    pub fn exact(&self) -> bool {
        self.max_error <= 1e-9
    }
}

/// IQE components for every ordered pair of rows of `z`, reduced per pair.
/// Row `x·n + y` of the result is `reduce(components(z_x, z_y))`.
fn iqe_all_pairs(z: &Array, k: usize, l: usize, reduce: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let n = z.rows();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|x| (0..n).map(move |y| (x, y))).collect();
    let mut out = Vec::with_capacity(n * n);
    for chunk in pairs.chunks(CHUNK) {
        let mut tape = Tape::new();
        let u = tape.constant(z.select_rows(&chunk.iter().map(|p| p.0).collect::<Vec<_>>()));
        let v = tape.constant(z.select_rows(&chunk.iter().map(|p| p.1).collect::<Vec<_>>()));
        let c = iqe_components(&mut tape, u, v, k, l)?;
        for row in tape.value(c).data().chunks(k) {
            out.push(reduce(row)?);
        }
    }
    Ok(out)
}

fn max_abs_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Embeds a finite quasimetric exactly with IQE-maxmean at α = 1.
///
/// Point `x` gets latent `(−d(x, z))_z` with `l = 1`, so component `z` of
/// the pair `(x, y)` is `(d(x, z) − d(y, z))^+` and the max over `z` is
/// `d(x, y)` (attained at `z = y`, bounded by the triangle inequality).
pub fn exact_embed_maxmean(oracle: &DistanceOracle) -> Result<EmbeddingCertificate> {
    let n = oracle.n();
    if !oracle.all_finite() {
        return Err(Error::Invalid("exact embedding needs finite distances everywhere".into()));
    }
    if n == 0 || n > 512 {
        return Err(Error::Invalid(format!("exact embedding supports 1..=512 points, got {n}")));
    }
    let latents = Array::matrix(n, n, oracle.matrix().iter().map(|d| -d).collect())?;
    let recon = iqe_all_pairs(&latents, n, 1, |c| maxmean_reduce(c, 1.0))?;
    Ok(EmbeddingCertificate {
        max_error: max_abs_error(&recon, oracle.matrix()),
        latents,
        spec: HeadSpec::new(HeadFamily::IqeMaxmean, n, 1),
        alpha: Some(1.0),
        note: "latent(x) = -d(x, .); component z reads (d(x,z) - d(y,z))^+".into(),
    })
}

/// A {0,1}-valued quasimetric with an order embedding certifying it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quasipartition {
    n: usize,
    /// `g[u]` has `m` coordinates in `1..=n`.
    g: Vec<Vec<usize>>,
    pi: Vec<u8>,
}

fn dominated(a: &[usize], b: &[usize]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

impl Quasipartition {
    /// `π(u, v) = 0` iff `g(u) ≤ g(v)` in every coordinate.
    pub fn from_order_embedding(g: Vec<Vec<usize>>) -> Result<Self> {
        let n = g.len();
        Self::check_embedding(&g)?;
        let gr = &g;
        let pi = (0..n).flat_map(|u| (0..n).map(move |v| u8::from(!dominated(&gr[u], &gr[v])))).collect();
        Ok(Quasipartition { n, g, pi })
    }

    /// Pairs an explicit matrix with its certificate, rejecting mismatches.
    pub fn new(pi: Vec<u8>, g: Vec<Vec<usize>>) -> Result<Self> {
        let q = Self::from_order_embedding(g)?;
        if pi != q.pi {
            let bad = pi.iter().zip(&q.pi).position(|(a, b)| a != b);
            return Err(Error::Invalid(match bad {
                Some(i) => format!("order embedding disagrees with the matrix at ({}, {})", i / q.n, i % q.n),
                None => format!("matrix has {} entries for {} points", pi.len(), q.n),
            }));
        }
        Ok(q)
    }

    fn check_embedding(g: &[Vec<usize>]) -> Result<()> {
        let n = g.len();
        let m = g.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return Err(Error::Invalid("order embedding needs points and coordinates".into()));
        }
        for (u, row) in g.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Invalid(format!("point {u} has {} coordinates, expected {m}", row.len())));
            }
            if let Some(c) = row.iter().find(|&&c| c == 0 || c > n) {
                return Err(Error::Invalid(format!("coordinate {c} of point {u} outside 1..={n}")));
            }
        }
        Ok(())
    }

    pub fn random(n: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        Self::from_order_embedding((0..n).map(|_| (0..m).map(|_| rng.random_range(1..=n)).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> usize {
        self.g[0].len()
    }

    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.pi[u * self.n + v]
    }
}

/// `e_i`: `n` entries, the first `i` zero and the rest one.
fn step_vector(i: usize, n: usize, s: f64, out: &mut Vec<f64>) {
    out.extend((0..n).map(|j| if j < i { 0.0 } else { s }));
}

/// Concatenated step vectors of `q`, padded with zeros to `width`.
fn quasipartition_latents(q: &Quasipartition, s: f64, width: usize) -> Vec<Vec<f64>> {
    q.g.iter()
        .map(|row| {
            let mut z = Vec::with_capacity(width);
            for &c in row {
                step_vector(c, q.n, s, &mut z);
            }
            z.resize(width, 0.0);
            z
        })
        .collect()
}

/// A single IQE component reproducing `s · π`.
pub fn quasipartition_embed_sum(q: &Quasipartition, s: f64) -> Result<EmbeddingCertificate> {
    combination_embed_sum(&[(q.clone(), s)])
}

/// IQE-sum over one component per quasipartition, component `i` scaled by
/// `w_i`, reproducing `Σ w_i π_i`.
pub fn combination_embed_sum(parts: &[(Quasipartition, f64)]) -> Result<EmbeddingCertificate> {
    let Some(n) = parts.first().map(|p| p.0.n) else {
        return Err(Error::Invalid("empty combination".into()));
    };
    if let Some((q, w)) = parts.iter().find(|(q, w)| q.n != n || !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Invalid(format!("part with {} points and weight {w} (expected {n} points, weight ≥ 0)", q.n)));
    }
    let l = parts.iter().map(|p| p.0.coords() * n).max().expect("nonempty");
    let k = parts.len();
    let mut data = vec![Vec::with_capacity(k * l); n];
    for (q, w) in parts {
        for (row, z) in data.iter_mut().zip(quasipartition_latents(q, *w, l)) {
            row.extend(z);
        }
    }
    let latents = Array::matrix(n, k * l, data.concat())?;
    let recon = iqe_all_pairs(&latents, k, l, |c| Ok(c.iter().sum()))?;
    let truth: Vec<f64> = (0..n * n)
        .map(|i| parts.iter().map(|(q, w)| w * q.pi[i] as f64).sum())
        .collect();
    Ok(EmbeddingCertificate {
        max_error: max_abs_error(&recon, &truth),
        latents,
        spec: HeadSpec::new(HeadFamily::IqeSum, k, l),
        alpha: None,
        note: "component i concatenates w_i * e_{g_j(u)} over the coordinates j of part i".into(),
    })
}

/// Maximal segments of constant coverage by `[u_j, max(u_j, v_j)]`, as
/// `(length, count)` with `count ≥ 1`.
pub fn coverage_segments(u: &[f64], v: &[f64]) -> Vec<(f64, usize)> {
    let intervals: Vec<(f64, f64)> = u.iter().zip(v).map(|(&a, &b)| (a, a.max(b))).collect();
    let mut cuts: Vec<f64> = intervals.iter().flat_map(|&(a, b)| [a, b]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2)
        .filter_map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let count = intervals.iter().filter(|&&(a, b)| a <= mid && mid <= b).count();
            (count > 0).then_some((w[1] - w[0], count))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub c: f64,
    /// `∫ (1 − exp(−c · coverage(x))) dx`.
    pub integral: f64,
    /// IQE component of the same row.
    pub component: f64,
    pub error: f64,
}

/// Integral form of PQE-LH against the IQE component for one row pair.
pub fn integral_pqe_limit_check(u: &[f64], v: &[f64], cs: &[f64]) -> Result<Vec<LimitRow>> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Invalid(format!("rows of length {} and {}", u.len(), v.len())));
    }
    if cs.windows(2).any(|w| w[1] <= w[0]) || cs.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::Invalid("c grid must be positive and increasing".into()));
    }
    let l = u.len();
    let mut tape = Tape::new();
    let uv = tape.constant(Array::matrix(1, l, u.to_vec())?);
    let vv = tape.constant(Array::matrix(1, l, v.to_vec())?);
    let comp = iqe_components(&mut tape, uv, vv, 1, l)?;
    let component = tape.value(comp).data()[0];
    let segments = coverage_segments(u, v);
    Ok(cs
        .iter()
        .map(|&c| {
            let integral = segments.iter().map(|&(len, n)| len * (1.0 - (-c * n as f64).exp())).sum::<f64>();
            LimitRow { c, integral, component, error: (integral - component).abs() }
        })
        .collect())
}

fn uniform_latents(rng: &mut Rng, rows: usize, dim: usize) -> Array {
    Array::matrix(rows, dim, (0..rows * dim).map(|_| rng.random_range(-3.0..3.0)).collect()).expect("sized")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativityWitness {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub distance: f64,
}

/// Searches uniform latents in `[−3, 3]` for `d(u, v) < −1e-9`.
pub fn find_negativity_witness(head: &dyn LatentHead, budget: usize, rng: &mut Rng) -> Result<Option<NegativityWitness>> {
    let dim = head.spec().dim();
    let mut left = budget;
    while left > 0 {
        let b = left.min(CHUNK);
        left -= b;
        let (u, v) = (uniform_latents(rng, b, dim), uniform_latents(rng, b, dim));
        let d = head.eval(&u, &v)?;
        if let Some(i) = (0..b).filter(|&i| d[i] < -1e-9).min_by(|&i, &j| d[i].total_cmp(&d[j])) {
            return Ok(Some(NegativityWitness { u: u.row(i).to_vec(), v: v.row(i).to_vec(), distance: d[i] }));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleTriple {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub d_xy: f64,
    pub d_yz: f64,
    pub d_xz: f64,
}

impl TriangleTriple {
    /// `d(x, z) − d(x, y) − d(y, z)`; positive means violated.
    pub fn violation(&self) -> f64 {
        self.d_xz - self.d_xy - self.d_yz
    }
}

/// Distances on the three legs of each triple, in chunks.
fn triple_distances(head: &dyn LatentHead, x: &Array, y: &Array, z: &Array) -> Result<[Vec<f64>; 3]> {
    Ok([head.eval(x, y)?, head.eval(y, z)?, head.eval(x, z)?])
}

/// Searches uniform latent triples for a triangle violation above 1e-9.
pub fn find_triangle_witness(head: &dyn LatentHead, budget: usize, rng: &mut Rng) -> Result<Option<TriangleTriple>> {
    let dim = head.spec().dim();
    let mut left = budget;
    while left > 0 {
        let b = left.min(CHUNK);
        left -= b;
        let (x, y, z) = (uniform_latents(rng, b, dim), uniform_latents(rng, b, dim), uniform_latents(rng, b, dim));
        let [xy, yz, xz] = triple_distances(head, &x, &y, &z)?;
        let worst = (0..b).max_by(|&i, &j| (xz[i] - xy[i] - yz[i]).total_cmp(&(xz[j] - xy[j] - yz[j])));
        if let Some(i) = worst.filter(|&i| xz[i] - xy[i] - yz[i] > 1e-9) {
            return Ok(Some(TriangleTriple {
                x: x.row(i).to_vec(),
                y: y.row(i).to_vec(),
                z: z.row(i).to_vec(),
                d_xy: xy[i],
                d_yz: yz[i],
                d_xz: xz[i],
            }));
        }
    }
    Ok(None)
}

/// Seeded searches: head init and sampling both follow `seed`.
pub fn seeded_negativity_search(spec: &HeadSpec, seed: u64, budget: usize) -> Result<Option<NegativityWitness>> {
    let mut rng = seeded(seed);
    let head = HeadRegistry::with_defaults().build(spec, &mut rng)?;
    find_negativity_witness(head.as_ref(), budget, &mut rng)
}

pub fn seeded_triangle_search(spec: &HeadSpec, seed: u64, budget: usize) -> Result<Option<TriangleTriple>> {
    let mut rng = seeded(seed);
    let head = HeadRegistry::with_defaults().build(spec, &mut rng)?;
    find_triangle_witness(head.as_ref(), budget, &mut rng)
}

/// MRN head whose symmetric projector maps latents `(t, 0)` to `(t, 0)` and
/// whose asymmetric projector is zero, evaluated on `t = 0, 1, 2`. The
/// squared form gives `4 > 1 + 1`; the fixed form gives `2 ≤ 1 + 1`.
pub fn collinear_mrn_triple(family: HeadFamily) -> Result<TriangleTriple> {
    if !matches!(family, HeadFamily::MrnOrig | HeadFamily::MrnFixed) {
        return Err(Error::Spec(format!("collinear construction is for mrn heads, not {family}")));
    }
    let spec = HeadSpec::new(family, 1, 2).with_hidden(vec![2]);
    let mut head = HeadRegistry::with_defaults().build(&spec, &mut seeded(0))?;
    let e00 = Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0])?;
    let id = Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let params = head.params_mut();
    for (name, value) in [("sym.0", e00), ("sym.1", id), ("asym.0", Array::zeros(&[2, 2])), ("asym.1", Array::zeros(&[2, 2]))] {
        *params.get_mut(name).ok_or_else(|| Error::Spec(format!("mrn head without {name}")))? = value;
    }
    let (x, y, z) = (vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]);
    Ok(TriangleTriple {
        d_xy: head.eval_pair(&x, &y)?,
        d_yz: head.eval_pair(&y, &z)?,
        d_xz: head.eval_pair(&x, &z)?,
        x,
        y,
        z,
    })
}

pub const HOMOGENEITY_SCALES: [f64; 3] = [0.5, 2.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    pub pairs: usize,
    pub triples: usize,
}

impl Default for AuditCounts {
    fn default() -> Self {
        AuditCounts { pairs: 10_000, triples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub family: HeadFamily,
    pub head_params: usize,
    /// `max |d(x, x)|`.
    pub identity_max: f64,
    /// `max (d(x,z) − d(x,y) − d(y,z))`, floored at 0.
    pub triangle_max: f64,
    pub min_value: f64,
    /// `max |d(x,y) − d(y,x)|`.
    pub symmetry_max: f64,
    /// Max relative `|d(αx, αy) − α d(x, y)|` per scale.
    pub homogeneity: Vec<(f64, f64)>,
}

impl AuditReport {
    pub fn quasimetric(&self) -> bool {
        self.identity_max <= 1e-9 && self.triangle_max <= 1e-9 && self.min_value >= -1e-9
    }

    pub fn homogeneous(&self) -> bool {
        self.homogeneity.iter().all(|&(_, r)| r <= 1e-9)
    }
}

/// Batched distance between matching rows of two input tables.
pub type DistanceFn<'a> = dyn Fn(&Array, &Array) -> Result<Vec<f64>> + 'a;

fn chunked(dist: &DistanceFn, u: &Array, v: &Array) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(u.rows());
    let idx: Vec<usize> = (0..u.rows()).collect();
    for c in idx.chunks(CHUNK) {
        out.extend(dist(&u.select_rows(c), &v.select_rows(c))?);
    }
    Ok(out)
}

/// Samples uniform inputs in `[−3, 3]^dim` and measures every axiom.
pub fn axiom_sample_audit(
    family: HeadFamily,
    head_params: usize,
    dist: &DistanceFn,
    dim: usize,
    counts: AuditCounts,
    rng: &mut Rng,
) -> Result<AuditReport> {
    let (x, y) = (uniform_latents(rng, counts.pairs, dim), uniform_latents(rng, counts.pairs, dim));
    let identity_max = chunked(dist, &x, &x)?.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let d_xy = chunked(dist, &x, &y)?;
    let d_yx = chunked(dist, &y, &x)?;
    let symmetry_max = d_xy.iter().zip(&d_yx).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let min_value = d_xy.iter().chain(&d_yx).copied().fold(f64::INFINITY, f64::min);
    let mut homogeneity = Vec::new();
    for a in HOMOGENEITY_SCALES {
        let scaled = chunked(dist, &x.map(|t| a * t), &y.map(|t| a * t))?;
        let r = scaled.iter().zip(&d_xy).fold(0.0f64, |m, (s, d)| m.max((s - a * d).abs() / (a * d).abs().max(1e-12)));
        homogeneity.push((a, r));
    }
    let (tx, ty, tz) = (
        uniform_latents(rng, counts.triples, dim),
        uniform_latents(rng, counts.triples, dim),
        uniform_latents(rng, counts.triples, dim),
    );
    let (xy, yz, xz) = (chunked(dist, &tx, &ty)?, chunked(dist, &ty, &tz)?, chunked(dist, &tx, &tz)?);
    let triangle_max = (0..counts.triples).fold(0.0f64, |m, i| m.max(xz[i] - xy[i] - yz[i]));
    Ok(AuditReport { family, head_params, identity_max, triangle_max, min_value, symmetry_max, homogeneity })
}

/// Input width used when auditing baselines, which read raw features.
pub const AUDIT_FEATURES: usize = 16;

/// Audit of one family at its default size, initialised from `seed`.
pub fn audit_family(family: HeadFamily, k: usize, l: usize, seed: u64, counts: AuditCounts) -> Result<AuditReport> {
    let mut rng = seeded(seed);
    let spec = HeadSpec::new(family, k, l);
    if family.is_latent() {
        let head = HeadRegistry::with_defaults().build(&spec, &mut rng)?;
        let dist = |u: &Array, v: &Array| head.eval(u, v);
        return axiom_sample_audit(family, head.param_count(), &dist, spec.dim(), counts, &mut rng);
    }
    let ctx = ModelContext { input_dim: AUDIT_FEATURES, hidden: vec![64], batch_norm: false, slots: 1, gamma: 0.9 };
    let model = ModelRegistry::with_defaults().build(&spec, &ctx, &mut rng)?;
    let dist = |u: &Array, v: &Array| pair_model_distance(model.as_ref(), u, v);
    axiom_sample_audit(family, model.head_param_count(), &dist, AUDIT_FEATURES, counts, &mut rng)
}

/// `d(u_i, v_i)` for a pair model, using `[u; v]` as the feature table.
fn pair_model_distance(model: &dyn PairModel, u: &Array, v: &Array) -> Result<Vec<f64>> {
    let b = u.rows();
    let mut data = u.data().to_vec();
    data.extend_from_slice(v.data());
    let features = Array::matrix(2 * b, u.cols(), data)?;
    let src: Vec<usize> = (0..b).collect();
    let dst: Vec<usize> = (b..2 * b).collect();
    Ok(predict(model, &features, &src, &dst)?.0)
}

/// Whether the family is known to approximate any quasimetric.
pub fn universal_approximation(family: HeadFamily) -> bool {
    !family.is_metric()
}

/// One row per report, measured values next to pass/fail flags.
pub fn capability_csv(reports: &[AuditReport]) -> String {
    let mut s = String::from(
        "family,quasimetric,universal_approx,head_params,homogeneous,identity_max,triangle_max,min_value,symmetry_max,homog_0.5,homog_2,homog_10\n",
    );
    for r in reports {
        let h: Vec<String> = r.homogeneity.iter().map(|(_, v)| format!("{v:e}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{}",
            r.family,
            r.quasimetric(),
            universal_approximation(r.family),
            r.head_params,
            r.homogeneous(),
            r.identity_max,
            r.triangle_max,
            r.min_value,
            r.symmetry_max,
            h.join(",")
        );
    }
    s
}
