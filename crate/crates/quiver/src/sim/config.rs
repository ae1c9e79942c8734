//! Scenario configuration: the schema, a human-readable key–value file
//! format, validation with collected diagnostics, and a canonical emitter
//! whose output round-trips through the parser.
//!
//! File format: one `key = value` pair per line; `#` starts a comment;
//! blank lines are ignored. Values are plain numbers, except
//! `grid_dims = RxC`, `variant = <name>`, and
//! `closures = r,c-r,c; r,c-r,c` (a semicolon-separated edge list).

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Ablation variant: which mechanism is disabled relative to the full stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Every mechanism enabled.
    #[default]
    Full,
    /// No neighbor entangling and no cross-layer coupling regularizer.
    NoEntangle,
    /// Sampler temperature frozen at its initial value.
    FixedTemp,
    /// Feasibility caps enforced only through the penalty term.
    NoProj,
    /// Risk-neutral (mean-cost) micro-policy instead of the CVaR tail.
    NoCvar,
    /// Greedy dispatch assignment instead of the entropic coupling.
    GreedyAssign,
}

impl Variant {
    /// Every variant, in the canonical reporting order.
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoEntangle,
        Variant::FixedTemp,
        Variant::NoProj,
        Variant::NoCvar,
        Variant::GreedyAssign,
    ];

    /// Canonical lower-case name (the config-file spelling).
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEntangle => "no_entangle",
            Variant::FixedTemp => "fixed_temp",
            Variant::NoProj => "no_proj",
            Variant::NoCvar => "no_cvar",
            Variant::GreedyAssign => "greedy_assign",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_entangle" => Ok(Variant::NoEntangle),
            "fixed_temp" => Ok(Variant::FixedTemp),
            "no_proj" => Ok(Variant::NoProj),
            "no_cvar" => Ok(Variant::NoCvar),
            "greedy_assign" => Ok(Variant::GreedyAssign),
            other => Err(format!(
                "unknown variant '{other}' (expected one of full, no_entangle, \
                 fixed_temp, no_proj, no_cvar, greedy_assign)"
            )),
        }
    }
}

/// An undirected grid edge between two intersections, written `r,c-r,c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridEdge {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

impl fmt::Display for GridEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{}-{},{}",
            self.a.0, self.a.1, self.b.0, self.b.1
        )
    }
}

impl FromStr for GridEdge {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("edge '{s}' is not of the form r,c-r,c");
        let (left, right) = s.split_once('-').ok_or_else(bad)?;
        let node = |part: &str| -> std::result::Result<(usize, usize), String> {
            let (r, c) = part.trim().split_once(',').ok_or_else(bad)?;
            let r = r.trim().parse::<usize>().map_err(|_| bad())?;
            let c = c.trim().parse::<usize>().map_err(|_| bad())?;
            Ok((r, c))
        };
        Ok(GridEdge {
            a: node(left)?,
            b: node(right)?,
        })
    }
}

/// Optimizer operating point used by the coordinated run (and the standalone
/// optimizer front end). Defaults are the canonical operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// Candidate-plan population size.
    pub population_k: usize,
    /// Temperature smoothing factor.
    pub beta: f64,
    /// Gradient step size.
    pub eta: f64,
    /// Entropic-dispatch regularization.
    pub epsilon: f64,
    /// Chance-constraint risk level.
    pub risk_delta: f64,
    /// Objective weights (latency, congestion, energy, risk).
    pub weights: [f64; 4],
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            population_k: 128,
            beta: 0.9,
            eta: 1e-2,
            epsilon: 5e-2,
            risk_delta: 1e-3,
            weights: [0.4, 0.3, 0.2, 0.1],
        }
    }
}

/// Full description of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Grid intersections (rows, cols).
    pub grid_dims: (usize, usize),
    /// Vehicle count before the demand multiplier.
    pub vehicles: usize,
    pub rsus: usize,
    pub fog_nodes: usize,
    pub duration_s: f64,
    /// Mobility update period.
    pub traffic_dt_s: f64,
    /// Network event period.
    pub net_dt_s: f64,
    /// Beacons generated per vehicle per second.
    pub beacon_hz: f64,
    pub payload_bytes: usize,
    pub latency_budget_v2v_ms: f64,
    pub latency_budget_v2i_ms: f64,
    /// Scales the active vehicle count.
    pub demand_multiplier: f64,
    /// Fraction of RSUs on a rotating outage schedule.
    pub rsu_outage_frac: f64,
    /// Expected road incidents per minute.
    pub incident_rate: f64,
    /// Fraction of nominal fog CPU capacity available.
    pub fog_cpu_frac: f64,
    /// When true, vehicles alternate between the two radio profiles instead
    /// of all using the narrowband one.
    pub mixed_radio: bool,
    /// Permanently closed grid edges.
    pub closures: Vec<GridEdge>,
    pub seed: u64,
    pub variant: Variant,
    pub optimizer: OptimizerSettings,
}

impl Default for ScenarioConfig {
    /// The desk-scale off-peak baseline (scenario S1 at desk scale).
    fn default() -> Self {
        ScenarioConfig {
            grid_dims: (10, 10),
            vehicles: 100,
            rsus: 8,
            fog_nodes: 4,
            duration_s: 600.0,
            traffic_dt_s: 1.0,
            net_dt_s: 0.1,
            beacon_hz: 10.0,
            payload_bytes: 256,
            latency_budget_v2v_ms: 50.0,
            latency_budget_v2i_ms: 80.0,
            demand_multiplier: 1.0,
            rsu_outage_frac: 0.0,
            incident_rate: 0.0,
            fog_cpu_frac: 1.0,
            mixed_radio: false,
            closures: Vec::new(),
            seed: 0,
            variant: Variant::Full,
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl ScenarioConfig {
    /// Validates every field, collecting all problems before failing.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let (rows, cols) = self.grid_dims;
        if rows == 0 || cols == 0 {
            issues.push(format!(
                "grid_dims must have at least one row and one column, got {rows}x{cols}"
            ));
        }
        if self.rsus == 0 {
            issues.push("rsus must be at least 1".to_string());
        }
        if self.fog_nodes == 0 {
            issues.push("fog_nodes must be at least 1".to_string());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            issues.push(format!(
                "duration_s must be positive and finite, got {}",
                self.duration_s
            ));
        }
        if !(self.traffic_dt_s > 0.0 && self.traffic_dt_s.is_finite()) {
            issues.push(format!(
                "traffic_dt_s must be positive and finite, got {}",
                self.traffic_dt_s
            ));
        }
        if !(self.net_dt_s > 0.0 && self.net_dt_s.is_finite()) {
            issues.push(format!(
                "net_dt_s must be positive and finite, got {}",
                self.net_dt_s
            ));
        }
        if self.net_dt_s > self.traffic_dt_s {
            issues.push(format!(
                "net_dt_s ({}) must not exceed traffic_dt_s ({})",
                self.net_dt_s, self.traffic_dt_s
            ));
        }
        if !(self.beacon_hz >= 0.0 && self.beacon_hz.is_finite()) {
            issues.push(format!(
                "beacon_hz must be nonnegative and finite, got {}",
                self.beacon_hz
            ));
        }
        if self.payload_bytes == 0 {
            issues.push("payload_bytes must be at least 1".to_string());
        }
        for (name, v) in [
            ("latency_budget_v2v_ms", self.latency_budget_v2v_ms),
            ("latency_budget_v2i_ms", self.latency_budget_v2i_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                issues.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.demand_multiplier >= 0.0 && self.demand_multiplier.is_finite()) {
            issues.push(format!(
                "demand_multiplier must be nonnegative and finite, got {}",
                self.demand_multiplier
            ));
        }
        for (name, v) in [
            ("rsu_outage_frac", self.rsu_outage_frac),
            ("fog_cpu_frac", self.fog_cpu_frac),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                issues.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.incident_rate >= 0.0 && self.incident_rate.is_finite()) {
            issues.push(format!(
                "incident_rate must be nonnegative and finite, got {}",
                self.incident_rate
            ));
        }
        for e in &self.closures {
            let in_grid = |(r, c): (usize, usize)| r < rows && c < cols;
            if !in_grid(e.a) || !in_grid(e.b) {
                issues.push(format!("closure {e} lies outside the {rows}x{cols} grid"));
            } else {
                let dr = e.a.0.abs_diff(e.b.0);
                let dc = e.a.1.abs_diff(e.b.1);
                if dr + dc != 1 {
                    issues.push(format!("closure {e} does not join adjacent intersections"));
                }
            }
        }
        let o = &self.optimizer;
        if o.population_k == 0 {
            issues.push("population_k must be at least 1".to_string());
        }
        if !(o.beta > 0.0 && o.beta <= 1.0) {
            issues.push(format!("beta must be in (0, 1], got {}", o.beta));
        }
        for (name, v) in [("eta", o.eta), ("epsilon", o.epsilon)] {
            if !(v > 0.0 && v.is_finite()) {
                issues.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(o.risk_delta > 0.0 && o.risk_delta < 1.0) {
            issues.push(format!(
                "risk_delta must be in (0, 1), got {}",
                o.risk_delta
            ));
        }
        let wsum: f64 = o.weights.iter().sum();
        if o.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || (wsum - 1.0).abs() > 1e-9 {
            issues.push(format!(
                "weights must be nonnegative and sum to 1, got {:?}",
                o.weights
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::config(issues))
        }
    }

    /// Parses the key–value format, starting from defaults; every diagnostic
    /// is collected (with its line number) before failing. The parsed config
    /// is validated before being returned.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        let mut issues = Vec::new();
        let mut seen: Vec<&str> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(cut) => &raw[..cut],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                issues.push(format!("line {lineno}: expected 'key = value', got '{line}'"));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key) {
                issues.push(format!("line {lineno}: duplicate key '{key}'"));
                continue;
            }
            seen.push(key);

            macro_rules! set {
                ($field:expr, $ty:ty) => {
                    match value.parse::<$ty>() {
                        Ok(v) => $field = v,
                        Err(_) => issues.push(format!(
                            "line {lineno}: {key} expects a {}, got '{value}'",
                            stringify!($ty)
                        )),
                    }
                };
            }

            match key {
                "grid_dims" => match parse_dims(value) {
                    Ok(d) => cfg.grid_dims = d,
                    Err(e) => issues.push(format!("line {lineno}: {e}")),
                },
                "vehicles" => set!(cfg.vehicles, usize),
                "rsus" => set!(cfg.rsus, usize),
                "fog_nodes" => set!(cfg.fog_nodes, usize),
                "duration_s" => set!(cfg.duration_s, f64),
                "traffic_dt_s" => set!(cfg.traffic_dt_s, f64),
                "net_dt_s" => set!(cfg.net_dt_s, f64),
                "beacon_hz" => set!(cfg.beacon_hz, f64),
                "payload_bytes" => set!(cfg.payload_bytes, usize),
                "latency_budget_v2v_ms" => set!(cfg.latency_budget_v2v_ms, f64),
                "latency_budget_v2i_ms" => set!(cfg.latency_budget_v2i_ms, f64),
                "demand_multiplier" => set!(cfg.demand_multiplier, f64),
                "rsu_outage_frac" => set!(cfg.rsu_outage_frac, f64),
                "incident_rate" => set!(cfg.incident_rate, f64),
                "fog_cpu_frac" => set!(cfg.fog_cpu_frac, f64),
                "mixed_radio" => set!(cfg.mixed_radio, bool),
                "closures" => match parse_closures(value) {
                    Ok(c) => cfg.closures = c,
                    Err(e) => issues.push(format!("line {lineno}: {e}")),
                },
                "seed" => set!(cfg.seed, u64),
                "variant" => match value.parse::<Variant>() {
                    Ok(v) => cfg.variant = v,
                    Err(e) => issues.push(format!("line {lineno}: {e}")),
                },
                "population_k" => set!(cfg.optimizer.population_k, usize),
                "beta" => set!(cfg.optimizer.beta, f64),
                "eta" => set!(cfg.optimizer.eta, f64),
                "epsilon" => set!(cfg.optimizer.epsilon, f64),
                "risk_delta" => set!(cfg.optimizer.risk_delta, f64),
                "weights" => match parse_weights(value) {
                    Ok(w) => cfg.optimizer.weights = w,
                    Err(e) => issues.push(format!("line {lineno}: {e}")),
                },
                other => issues.push(format!("line {lineno}: unknown key '{other}'")),
            }
        }

        if !issues.is_empty() {
            return Err(Error::config(issues));
        }
        // Validation diagnostics are not line-anchored (the offending value
        // may be a default), so they are reported separately from parse
        // diagnostics rather than mixed in.
        cfg.validate()?;
        Ok(cfg)
    }

    /// Emits the canonical key–value form; `parse(emit(cfg)) == cfg`.
    pub fn emit(&self) -> String {
        let closures = self
            .closures
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        let o = &self.optimizer;
        format!(
            "grid_dims = {}x{}\n\
             vehicles = {}\n\
             rsus = {}\n\
             fog_nodes = {}\n\
             duration_s = {}\n\
             traffic_dt_s = {}\n\
             net_dt_s = {}\n\
             beacon_hz = {}\n\
             payload_bytes = {}\n\
             latency_budget_v2v_ms = {}\n\
             latency_budget_v2i_ms = {}\n\
             demand_multiplier = {}\n\
             rsu_outage_frac = {}\n\
             incident_rate = {}\n\
             fog_cpu_frac = {}\n\
             mixed_radio = {}\n\
             closures = {}\n\
             seed = {}\n\
             variant = {}\n\
             population_k = {}\n\
             beta = {}\n\
             eta = {}\n\
             epsilon = {}\n\
             risk_delta = {}\n\
             weights = {},{},{},{}\n",
            self.grid_dims.0,
            self.grid_dims.1,
            self.vehicles,
            self.rsus,
            self.fog_nodes,
            self.duration_s,
            self.traffic_dt_s,
            self.net_dt_s,
            self.beacon_hz,
            self.payload_bytes,
            self.latency_budget_v2v_ms,
            self.latency_budget_v2i_ms,
            self.demand_multiplier,
            self.rsu_outage_frac,
            self.incident_rate,
            self.fog_cpu_frac,
            self.mixed_radio,
            closures,
            self.seed,
            self.variant,
            o.population_k,
            o.beta,
            o.eta,
            o.epsilon,
            o.risk_delta,
            o.weights[0],
            o.weights[1],
            o.weights[2],
            o.weights[3],
        )
    }
}

fn parse_dims(value: &str) -> std::result::Result<(usize, usize), String> {
    let bad = || format!("grid_dims expects ROWSxCOLS (e.g. 10x10), got '{value}'");
    let (r, c) = value.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows = r.trim().parse::<usize>().map_err(|_| bad())?;
    let cols = c.trim().parse::<usize>().map_err(|_| bad())?;
    Ok((rows, cols))
}

fn parse_closures(value: &str) -> std::result::Result<Vec<GridEdge>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(';')
        .map(|part| part.trim().parse::<GridEdge>())
        .collect()
}

fn parse_weights(value: &str) -> std::result::Result<[f64; 4], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!(
            "weights expects 4 comma-separated values, got {}",
            parts.len()
        ));
    }
    let mut w = [0.0; 4];
    for (i, p) in parts.iter().enumerate() {
        w[i] = p
            .parse::<f64>()
            .map_err(|_| format!("weights entry '{p}' is not a number"))?;
    }
    Ok(w)
}
