//! Config-driven experiments: (cell × seed) runs, one directory per run, and
//! mean ± sd aggregates rebuilt from the run files.
//!
//! A cell is one fully resolved configuration (head, hyperparameters, data).
//! Its fingerprint names the run directories `<fingerprint>-s<seed>`; every
//! run writes a `result.json` and aggregation only ever reads those files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::graphs::{all_pairs_distances, build_dataset, generate_graph, GraphKind};
use crate::gridworld::{
    collect_offline, groundtruth_qmet, plan_greedy, q_learn, results_csv, Grid, GridSpec, ModelPlanner, RlConfig, RlResult,
    ACTIONS,
};
use crate::heads::{profile_head, HeadFamily, HeadRegistry, HeadSpec, OutputTransform};
use crate::models::{ModelContext, ModelRegistry};
use crate::theory::{audit_family, capability_csv, AuditCounts, AuditReport};
use crate::trainer::{fingerprint, train, write_run, TrainConfig};
use crate::{io_err, seeded, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Graph,
    Gridworld,
    Audit,
    AblateKl,
    Profile,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Graph,
        ExperimentKind::Gridworld,
        ExperimentKind::Audit,
        ExperimentKind::AblateKl,
        ExperimentKind::Profile,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::Graph => "graph",
            ExperimentKind::Gridworld => "gridworld",
            ExperimentKind::Audit => "audit",
            ExperimentKind::AblateKl => "ablate-kl",
            ExperimentKind::Profile => "profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { hidden: vec![128, 128, 128], batch_norm: false }
    }
}

/// Grid axes crossed with every head; an empty axis uses the `train` value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub lr: Vec<f64>,
    pub reg_weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphData {
    pub kind: GraphKind,
    pub nodes: usize,
    pub feature_dim: usize,
    pub train_fraction: f64,
    /// Fixed graph for every seed; by default each seed draws its own.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_seed: Option<u64>,
}

impl Default for GraphData {
    fn default() -> Self {
        GraphData { kind: GraphKind::Dense, nodes: 300, feature_dim: 64, train_fraction: 0.1, graph_seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridData {
    pub trajectories: Vec<usize>,
    pub epsilon: f64,
    pub cap: usize,
    pub goals: usize,
    pub plan_cap: usize,
    pub rl: RlConfig,
    pub world: GridSpec,
}

impl Default for GridData {
    fn default() -> Self {
        GridData {
            trajectories: vec![128],
            epsilon: 0.6,
            cap: 200,
            goals: 50,
            plan_cap: 300,
            rl: RlConfig::default(),
            world: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditData {
    pub families: Vec<HeadFamily>,
    pub k: usize,
    pub l: usize,
    pub pairs: usize,
    pub triples: usize,
}

impl Default for AuditData {
    fn default() -> Self {
        let c = AuditCounts::default();
        AuditData { families: HeadFamily::ALL.to_vec(), k: 4, l: 8, pairs: c.pairs, triples: c.triples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateData {
    pub total_dim: usize,
    pub k: Vec<usize>,
}

impl Default for AblateData {
    fn default() -> Self {
        AblateData { total_dim: 48, k: vec![4, 6, 8, 12] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileData {
    pub scales: Vec<f64>,
}

impl Default for ProfileData {
    fn default() -> Self {
        ProfileData { scales: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 10.0] }
    }
}

/// One experiment file. Sections that do not apply to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Empty means the kind's default heads.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heads: Vec<HeadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub graph: GraphData,
    #[serde(default)]
    pub gridworld: GridData,
    #[serde(default)]
    pub audit: AuditData,
    #[serde(default)]
    pub ablate: AblateData,
    #[serde(default)]
    pub profile: ProfileData,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_jobs() -> usize {
    1
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), message: message.into() }
}

impl ExperimentConfig {
    /// Defaults for `kind`, with heads and encoder spelled out.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut c = ExperimentConfig {
            kind,
            out: default_out(),
            seeds: default_seeds(),
            jobs: default_jobs(),
            heads: Vec::new(),
            encoder: None,
            train: TrainConfig::default(),
            sweep: Sweep::default(),
            graph: GraphData::default(),
            gridworld: GridData::default(),
            audit: AuditData::default(),
            ablate: AblateData::default(),
            profile: ProfileData::default(),
        };
        c.heads = c.resolved_heads();
        c.encoder = Some(c.resolved_encoder());
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.inner().message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn resolved_heads(&self) -> Vec<HeadSpec> {
        if !self.heads.is_empty() {
            return self.heads.clone();
        }
        match self.kind {
            ExperimentKind::Gridworld => {
                vec![HeadSpec::new(HeadFamily::IqeMaxmean, 8, 8), HeadSpec::new(HeadFamily::Unconstrained, 8, 8)]
            }
            ExperimentKind::Profile => {
                vec![HeadSpec::new(HeadFamily::IqeSum, 4, 4), HeadSpec::new(HeadFamily::PqeLh, 4, 4)]
            }
            _ => vec![HeadSpec::new(HeadFamily::IqeSum, 8, 6)],
        }
    }

    pub fn resolved_encoder(&self) -> EncoderConfig {
        match (&self.encoder, self.kind) {
            (Some(e), _) => e.clone(),
            (None, ExperimentKind::Gridworld) => EncoderConfig { hidden: vec![128, 128], batch_norm: true },
            (None, _) => EncoderConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "seed list is empty"));
        }
        if self.jobs == 0 {
            return Err(config_err("jobs", "need at least one worker"));
        }
        for (i, h) in self.resolved_heads().iter().enumerate() {
            h.validate().map_err(|e| config_err(&format!("heads[{i}]"), e.to_string()))?;
        }
        let enc = self.resolved_encoder();
        if enc.hidden.contains(&0) {
            return Err(config_err("encoder.hidden", "layer widths must be positive"));
        }
        match self.kind {
            ExperimentKind::Graph | ExperimentKind::AblateKl => {
                self.train.validate().map_err(|e| config_err("train", e.to_string()))?;
                for (i, &lr) in self.sweep.lr.iter().enumerate() {
                    if !(lr > 0.0 && lr.is_finite()) {
                        return Err(config_err(&format!("sweep.lr[{i}]"), format!("{lr} is not a positive rate")));
                    }
                }
                for (i, &w) in self.sweep.reg_weight.iter().enumerate() {
                    if !(w >= 0.0 && w.is_finite()) {
                        return Err(config_err(&format!("sweep.reg_weight[{i}]"), format!("{w} is not ≥ 0")));
                    }
                }
                let g = &self.graph;
                if g.nodes < 2 {
                    return Err(config_err("graph.nodes", "need at least two nodes"));
                }
                if g.feature_dim == 0 {
                    return Err(config_err("graph.feature_dim", "must be positive"));
                }
                if !(g.train_fraction > 0.0 && g.train_fraction < 1.0) {
                    return Err(config_err("graph.train_fraction", "must lie in (0, 1)"));
                }
            }
            _ => {}
        }
        match self.kind {
            ExperimentKind::AblateKl => {
                let a = &self.ablate;
                if a.k.is_empty() {
                    return Err(config_err("ablate.k", "no component counts given"));
                }
                for (i, &k) in a.k.iter().enumerate() {
                    if k == 0 || a.total_dim % k != 0 {
                        return Err(config_err(
                            &format!("ablate.k[{i}]"),
                            format!("{k} does not divide total_dim {}", a.total_dim),
                        ));
                    }
                }
            }
            ExperimentKind::Gridworld => {
                let g = &self.gridworld;
                g.rl.validate().map_err(|e| config_err("gridworld.rl", e.to_string()))?;
                Grid::new(&g.world).map_err(|e| config_err("gridworld.world", e.to_string()))?;
                if g.trajectories.is_empty() || g.trajectories.contains(&0) {
                    return Err(config_err("gridworld.trajectories", "need positive trajectory counts"));
                }
                if !(0.0..=1.0).contains(&g.epsilon) {
                    return Err(config_err("gridworld.epsilon", "must lie in [0, 1]"));
                }
                if g.cap == 0 || g.goals == 0 || g.plan_cap == 0 {
                    return Err(config_err("gridworld", "cap, goals and plan_cap must be positive"));
                }
            }
            ExperimentKind::Audit => {
                let a = &self.audit;
                if a.families.is_empty() {
                    return Err(config_err("audit.families", "no families given"));
                }
                if a.k == 0 || a.l == 0 || a.pairs == 0 || a.triples == 0 {
                    return Err(config_err("audit", "k, l, pairs and triples must be positive"));
                }
            }
            ExperimentKind::Profile => {
                if self.profile.scales.is_empty() {
                    return Err(config_err("profile.scales", "no scales given"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Every cell of the experiment, in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let heads = self.resolved_heads();
        let encoder = self.resolved_encoder();
        let mut out = Vec::new();
        let axis = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        match self.kind {
            ExperimentKind::Graph => {
                for head in &heads {
                    for &lr in &axis(&self.sweep.lr, self.train.lr) {
                        for &reg in &axis(&self.sweep.reg_weight, self.train.reg_weight) {
                            let train = TrainConfig { lr, reg_weight: reg, ..self.train.clone() };
                            out.push(CellSpec::Graph {
                                head: head.clone(),
                                encoder: encoder.clone(),
                                train,
                                graph: self.graph.clone(),
                            });
                        }
                    }
                }
            }
            ExperimentKind::AblateKl => {
                let base = &heads[0];
                for &k in &self.ablate.k {
                    let head = HeadSpec { k, l: self.ablate.total_dim / k, ..base.clone() };
                    out.push(CellSpec::Graph {
                        head,
                        encoder: encoder.clone(),
                        train: self.train.clone(),
                        graph: self.graph.clone(),
                    });
                }
            }
            ExperimentKind::Gridworld => {
                let g = &self.gridworld;
                for head in &heads {
                    for &trajectories in &g.trajectories {
                        out.push(CellSpec::Gridworld {
                            head: head.clone(),
                            encoder: encoder.clone(),
                            rl: g.rl.clone(),
                            world: g.world.clone(),
                            trajectories,
                            epsilon: g.epsilon,
                            cap: g.cap,
                            goals: g.goals,
                            plan_cap: g.plan_cap,
                        });
                    }
                }
            }
            ExperimentKind::Audit => {
                let a = &self.audit;
                for &family in &a.families {
                    let counts = AuditCounts { pairs: a.pairs, triples: a.triples };
                    out.push(CellSpec::Audit { family, k: a.k, l: a.l, counts });
                }
            }
            ExperimentKind::Profile => {
                for head in &heads {
                    out.push(CellSpec::Profile { head: head.clone(), scales: self.profile.scales.clone() });
                }
            }
        }
        out.into_iter().enumerate().map(|(index, spec)| Cell::new(index, spec)).collect()
    }
}

/// A fully resolved configuration; seeds are applied at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CellSpec {
    Graph {
        head: HeadSpec,
        encoder: EncoderConfig,
        train: TrainConfig,
        graph: GraphData,
    },
    Gridworld {
        head: HeadSpec,
        encoder: EncoderConfig,
        rl: RlConfig,
        world: GridSpec,
        trajectories: usize,
        epsilon: f64,
        cap: usize,
        goals: usize,
        plan_cap: usize,
    },
    Audit {
        family: HeadFamily,
        k: usize,
        l: usize,
        counts: AuditCounts,
    },
    Profile {
        head: HeadSpec,
        scales: Vec<f64>,
    },
}

impl CellSpec {
    pub fn family(&self) -> HeadFamily {
        match self {
            CellSpec::Graph { head, .. } | CellSpec::Gridworld { head, .. } | CellSpec::Profile { head, .. } => {
                head.family
            }
            CellSpec::Audit { family, .. } => *family,
        }
    }

    fn kl(&self) -> (usize, usize) {
        match self {
            CellSpec::Graph { head, .. } | CellSpec::Gridworld { head, .. } | CellSpec::Profile { head, .. } => {
                (head.k, head.l)
            }
            CellSpec::Audit { k, l, .. } => (*k, *l),
        }
    }

    pub fn label(&self) -> String {
        let (k, l) = self.kl();
        let mut s = format!("{} k{k} l{l}", self.family());
        let transform = |h: &HeadSpec| h.transform.filter(|_| !h.family.is_latent()).map(OutputTransform::tag);
        match self {
            CellSpec::Graph { head, train, .. } => {
                if let Some(t) = transform(head) {
                    let _ = write!(s, " {t}");
                }
                let _ = write!(s, " lr{} reg{}", train.lr, train.reg_weight);
            }
            CellSpec::Gridworld { head, rl, trajectories, .. } => {
                if let Some(t) = transform(head) {
                    let _ = write!(s, " {t}");
                }
                let _ = write!(s, " traj{trajectories} lr{} reg{}", rl.lr, rl.reg_weight);
            }
            _ => {}
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub fingerprint: String,
    pub spec: CellSpec,
}

impl Cell {
    fn new(index: usize, spec: CellSpec) -> Self {
        let fingerprint = fingerprint(&spec).expect("cell specs serialize");
        Cell { index, fingerprint, spec }
    }

    pub fn run_dir(&self, out: &Path, seed: u64) -> PathBuf {
        out.join(format!("{}-s{seed}", self.fingerprint))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

/// The contents of a run's `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub cell: String,
    pub cell_index: usize,
    pub label: String,
    pub family: HeadFamily,
    pub k: usize,
    pub l: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub head_params: usize,
    pub params: usize,
    /// Scalar outcomes; absent metrics (no ∞ pairs, say) are left out.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditReport>,
    pub config: CellSpec,
}

impl RunResult {
    fn new(cell: &Cell, seed: u64) -> Self {
        let (k, l) = cell.spec.kl();
        RunResult {
            cell: cell.fingerprint.clone(),
            cell_index: cell.index,
            label: cell.spec.label(),
            family: cell.spec.family(),
            k,
            l,
            seed,
            status: RunStatus::Ok,
            error: None,
            head_params: 0,
            params: 0,
            metrics: BTreeMap::new(),
            audit: None,
            config: cell.spec.clone(),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

fn graph_run(cell: &Cell, seed: u64, dir: &Path, res: &mut RunResult) -> Result<()> {
    let CellSpec::Graph { head, encoder, train: tc, graph } = &cell.spec else { unreachable!() };
    let gseed = graph.graph_seed.unwrap_or(seed);
    let g = generate_graph(graph.kind, graph.nodes, gseed)?;
    let data = build_dataset(&all_pairs_distances(&g), graph.feature_dim, graph.train_fraction, tc.gamma, gseed)?;
    let ctx = ModelContext {
        input_dim: graph.feature_dim,
        hidden: encoder.hidden.clone(),
        batch_norm: encoder.batch_norm,
        slots: 1,
        gamma: tc.gamma,
    };
    let mut model = ModelRegistry::with_defaults().build(head, &ctx, &mut seeded(seed))?;
    res.head_params = model.head_param_count();
    res.params = model.param_count();
    let cfg = TrainConfig { seed, ..tc.clone() };
    let report = train(model.as_mut(), &data, &cfg)?;
    if let Some(epoch) = report.diverged_at {
        res.status = RunStatus::Diverged;
        res.error = Some(Error::Diverged { epoch }.to_string());
    }
    if let Some(m) = report.final_metrics().filter(|_| report.diverged_at.is_none()) {
        res.metrics.insert("mse_milli".into(), m.mse_milli());
        if let Some(v) = m.l1_finite {
            res.metrics.insert("l1_finite".into(), v);
        }
        if let Some(v) = m.pred_inf {
            res.metrics.insert("pred_inf".into(), v);
        }
        res.metrics.insert("overflow".into(), f64::from(u8::from(m.overflow)));
    }
    if let Some(last) = report.history.last() {
        res.metrics.insert("train_mse_milli".into(), last.train_mse * 1e3);
    }
    res.metrics.insert("clamped".into(), report.clamped as f64);
    write_run(dir, &report, &serde_json::to_value(&*res)?)
}

fn gridworld_run(cell: &Cell, seed: u64, res: &mut RunResult) -> Result<()> {
    let CellSpec::Gridworld { head, encoder, rl, world, trajectories, epsilon, cap, goals, plan_cap } = &cell.spec
    else {
        unreachable!()
    };
    let grid = Grid::new(world)?;
    let oracle = groundtruth_qmet(&grid)?;
    let data = collect_offline(&grid, &oracle, *trajectories, *epsilon, *cap, seed)?;
    let ctx = ModelContext {
        input_dim: grid.features().cols(),
        hidden: encoder.hidden.clone(),
        batch_norm: encoder.batch_norm,
        slots: ACTIONS,
        gamma: rl.gamma,
    };
    let mut model = ModelRegistry::with_defaults().build(head, &ctx, &mut seeded(seed))?;
    res.head_params = model.head_param_count();
    res.params = model.param_count();
    let cfg = RlConfig { seed, ..rl.clone() };
    let report = q_learn(model.as_mut(), &grid, &data, &cfg)?;
    res.metrics.insert("skipped_steps".into(), report.skipped_steps as f64);
    if let Some(epoch) = report.diverged_at {
        res.status = RunStatus::Diverged;
        res.error = Some(Error::Diverged { epoch }.to_string());
        return Ok(());
    }
    let planner = ModelPlanner { model: model.as_ref(), single_goal_action: rl.single_goal_action };
    let success = plan_greedy(&planner, &grid, *goals, *plan_cap, seed)?;
    res.metrics.insert("success".into(), success);
    res.metrics.insert("final_td_loss".into(), report.final_loss());
    Ok(())
}

fn audit_run(cell: &Cell, seed: u64, res: &mut RunResult) -> Result<()> {
    let CellSpec::Audit { family, k, l, counts } = &cell.spec else { unreachable!() };
    let report = audit_family(*family, *k, *l, seed, *counts)?;
    res.head_params = report.head_params;
    res.metrics.insert("identity_max".into(), report.identity_max);
    res.metrics.insert("triangle_max".into(), report.triangle_max);
    res.metrics.insert("min_value".into(), report.min_value);
    res.metrics.insert("symmetry_max".into(), report.symmetry_max);
    for &(a, r) in &report.homogeneity {
        res.metrics.insert(format!("homog_{a}"), r);
    }
    res.audit = Some(report);
    Ok(())
}

fn profile_run(cell: &Cell, seed: u64, dir: &Path, res: &mut RunResult) -> Result<()> {
    let CellSpec::Profile { head, scales } = &cell.spec else { unreachable!() };
    let mut rng = seeded(seed);
    let built = HeadRegistry::with_defaults().build(head, &mut rng)?;
    let draw = |rng: &mut crate::Rng| -> Vec<f64> { (0..head.dim()).map(|_| StandardNormal.sample(rng)).collect() };
    let (u, v) = (draw(&mut rng), draw(&mut rng));
    let table = profile_head(built.as_ref(), &u, &v, scales)?;
    res.head_params = built.param_count();
    res.params = built.param_count();
    if let Some(one) = table.rows.iter().find(|r| r.scale == 1.0) {
        res.metrics.insert("distance_at_1".into(), one.distance);
        let worst = table
            .rows
            .iter()
            .filter(|r| r.scale > 0.0)
            .map(|r| (r.distance - r.scale * one.distance).abs() / (r.scale * one.distance).abs().max(1e-12))
            .fold(0.0, f64::max);
        res.metrics.insert("homog_residual".into(), worst);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("profile.csv");
    fs::write(&path, table.to_csv()).map_err(io_err(&path))
}

/// Executes one run and writes its `result.json`. Errors inside the run are
/// recorded in the result rather than returned.
pub fn run_cell(cell: &Cell, seed: u64, out: &Path) -> Result<RunResult> {
    let dir = cell.run_dir(out, seed);
    let mut res = RunResult::new(cell, seed);
    let outcome = match cell.spec {
        CellSpec::Graph { .. } => graph_run(cell, seed, &dir, &mut res),
        CellSpec::Gridworld { .. } => gridworld_run(cell, seed, &mut res),
        CellSpec::Audit { .. } => audit_run(cell, seed, &mut res),
        CellSpec::Profile { .. } => profile_run(cell, seed, &dir, &mut res),
    };
    if let Err(e) = outcome {
        res.status = RunStatus::Failed;
        res.error = Some(e.to_string());
    }
    write_json(&dir.join("result.json"), &res)?;
    Ok(res)
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub results: Vec<RunResult>,
    pub aggregate: PathBuf,
}

impl ExperimentSummary {
    /// Every run diverged (nothing to aggregate).
    pub fn all_diverged(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.status == RunStatus::Diverged)
    }
}

/// Runs every (cell × seed) pair on `cfg.jobs` worker threads, then writes
/// the aggregate tables.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let cells = cfg.cells();
    let tasks: Vec<(&Cell, u64)> = cells.iter().flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    write_json(&cfg.out.join("experiment.json"), cfg)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(cell, seed)) = tasks.get(i) else { break };
                let r = run_cell(cell, seed, &cfg.out);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let results = slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate_dir(&cfg.out)?;
    Ok(ExperimentSummary { results, aggregate })
}

/// All `result.json` files directly below `out`, ordered by cell and seed.
pub fn load_results(out: &Path) -> Result<Vec<RunResult>> {
    let mut results = Vec::new();
    for entry in fs::read_dir(out).map_err(io_err(out))? {
        let path = entry.map_err(io_err(out))?.path().join("result.json");
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let r: RunResult = serde_json::from_str(&text)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
            results.push(r);
        }
    }
    results.sort_by(|a, b| (a.cell_index, &a.cell, a.seed).cmp(&(b.cell_index, &b.cell, b.seed)));
    Ok(results)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One aggregate row: a cell with per-metric mean ± sd over its ok runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub cell: String,
    pub label: String,
    pub family: HeadFamily,
    pub k: usize,
    pub l: usize,
    pub runs: usize,
    pub ok: usize,
    pub stats: BTreeMap<String, (f64, f64)>,
}

pub fn aggregate(results: &[RunResult]) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    let mut groups: BTreeMap<(usize, &str), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.cell_index, r.cell.as_str())).or_default().push(r);
    }
    for runs in groups.values() {
        let first = runs[0];
        let ok: Vec<&&RunResult> = runs.iter().filter(|r| r.status == RunStatus::Ok).collect();
        let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &ok {
            for (k, &v) in &r.metrics {
                values.entry(k.as_str()).or_default().push(v);
            }
        }
        rows.push(AggregateRow {
            cell: first.cell.clone(),
            label: first.label.clone(),
            family: first.family,
            k: first.k,
            l: first.l,
            runs: runs.len(),
            ok: ok.len(),
            stats: values.into_iter().map(|(k, v)| (k.to_string(), mean_sd(&v))).collect(),
        });
    }
    rows
}

/// `mean ± sd` with three decimals, the way result tables print cells.
pub fn format_cell(mean: f64, sd: f64) -> String {
    format!("{mean:.3} ± {sd:.3}")
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut metrics: Vec<&str> = rows.iter().flat_map(|r| r.stats.keys().map(String::as_str)).collect();
    metrics.sort_unstable();
    metrics.dedup();
    let mut s = String::from("cell,label,family,k,l,runs,ok");
    for m in &metrics {
        let _ = write!(s, ",{m}_mean,{m}_sd,{m}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{},{},{},{}", r.cell, r.label, r.family, r.k, r.l, r.runs, r.ok);
        for m in &metrics {
            match r.stats.get(*m) {
                Some(&(mean, sd)) => {
                    let _ = write!(s, ",{mean},{sd},{}", format_cell(mean, sd));
                }
                None => s.push_str(",,,"),
            }
        }
        s.push('\n');
    }
    s
}

/// Worst case over seeds for each audited family.
pub fn merge_audits(results: &[RunResult]) -> Vec<AuditReport> {
    let mut merged: Vec<AuditReport> = Vec::new();
    for a in results.iter().filter_map(|r| r.audit.as_ref()) {
        match merged.iter_mut().find(|m| m.family == a.family) {
            Some(m) => {
                m.identity_max = m.identity_max.max(a.identity_max);
                m.triangle_max = m.triangle_max.max(a.triangle_max);
                m.min_value = m.min_value.min(a.min_value);
                m.symmetry_max = m.symmetry_max.max(a.symmetry_max);
                for (h, &(_, r)) in m.homogeneity.iter_mut().zip(&a.homogeneity) {
                    h.1 = h.1.max(r);
                }
            }
            None => merged.push(a.clone()),
        }
    }
    merged
}

/// `k,l,seed,mse_milli,pred_inf`, one row per run.
pub fn ablation_csv(results: &[RunResult]) -> String {
    let mut s = String::from("k,l,seed,status,mse_milli,pred_inf\n");
    let opt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{status},{},{}",
            r.k,
            r.l,
            r.seed,
            opt(r.metrics.get("mse_milli")),
            opt(r.metrics.get("pred_inf"))
        );
    }
    s
}

fn rl_rows(results: &[RunResult]) -> Vec<RlResult> {
    results
        .iter()
        .filter_map(|r| match &r.config {
            CellSpec::Gridworld { trajectories, .. } => Some(RlResult {
                family: r.label.clone(),
                trajectories: *trajectories,
                seed: r.seed,
                success: r.metrics.get("success").copied().unwrap_or(f64::NAN),
                final_td_loss: r.metrics.get("final_td_loss").copied().unwrap_or(f64::NAN),
            }),
            _ => None,
        })
        .collect()
}

/// Rebuilds `aggregate.csv` (and the kind-specific tables) from the run
/// files under `out`; returns the aggregate path.
pub fn aggregate_dir(out: &Path) -> Result<PathBuf> {
    let results = load_results(out)?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    if results.iter().any(|r| r.audit.is_some()) {
        write("capability.csv", capability_csv(&merge_audits(&results)))?;
    }
    if results.iter().any(|r| matches!(r.config, CellSpec::Gridworld { .. })) {
        write("rl_results.csv", results_csv(&rl_rows(&results)))?;
    }
    let ablation = fs::read_to_string(out.join("experiment.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .is_some_and(|v| v["kind"] == json!("ablate-kl"));
    if ablation {
        write("ablate_kl.csv", ablation_csv(&results))?;
    }
    write("aggregate.csv", aggregate_csv(&aggregate(&results)))?;
    Ok(out.join("aggregate.csv"))
}
