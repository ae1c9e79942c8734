//! Integrated co-simulation: a grid road network with vehicles, roadside
//! units, fog sites, and the coordination stack in the loop.
//!
//! - [`config`]: scenario configuration, ablation variants, and the
//!   key-value config-file format.
//! - [`scenario`]: the named scenario presets at desk and paper scale.
//! - [`world`]: deterministic world construction (grid, roadside placement,
//!   trips) and routing.
//! - [`run`]: the event loop.
//! - [`metrics`]: report types and their CSV/JSON emitters.
//! - [`ablate`]: the scenario x variant grid with per-cell summaries.

pub mod ablate;
pub mod config;
pub mod metrics;
pub mod run;
pub mod scenario;
pub mod world;

pub use ablate::{ablate, ablate_tuned, AblationCell, Stat};
pub use config::{GridEdge, OptimizerSettings, ScenarioConfig, Variant};
pub use metrics::{MetricSeries, MetricsReport, PacketCounts};
pub use run::{run, run_scenario, run_tuned, SimTuning};
pub use scenario::{apply_stressors, scenario, Scale, Scenario};
pub use world::{build_world, draw_trip, World};
