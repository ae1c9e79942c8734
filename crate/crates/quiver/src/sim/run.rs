//! The co-simulation event loop.
//!
//! Cadences: every network tick the beacon/service packet pipeline and the
//! fog queues advance; every traffic tick mobility, roadside state, and the
//! per-vehicle decision stack advance; once per second the fog summaries are
//! fused and the plan population, dispatch coupling, and zone controls are
//! re-coordinated.
//!
//! The packet model is synchronous: a packet's delivery or loss resolves
//! within its generation tick (its retries model sub-tick MAC behavior), so
//! nothing is in flight at the end of a run and packet conservation is an
//! exact identity. Latency accumulates queueing, transmission attempts,
//! retry backoffs, backhaul, and processing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ScenarioConfig, Variant};
use super::metrics::{MetricSeries, MetricsReport, PacketCounts};
use super::world::{draw_trip, World};
use crate::anneal::{soft_policy, TemperatureState};
use crate::cloud::{
    self, CloudConfig, CloudState, CoordinationContext, DispatchMethod,
};
use crate::energy::{CostBundle, FeasibleSet};
use crate::fog::{self, FogState, FogTickCoefs, TaskDescriptor};
use crate::qio::{self, QioConfig};
use crate::qstate::PlanDistribution;
use crate::rng;
use crate::vehicle::{
    self, LinkMetrics, MicroAction, VehicleConfig, VehicleEnv, VehicleState,
};
use crate::{Error, Result};

/// Model constants. Every number that shapes latency, loss, or congestion
/// lives here so tests can pin or stress it; defaults are the documented
/// operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTuning {
    /// RSU packet-processing bound (packets/s).
    pub rsu_service_pkt_s: f64,
    /// RSU backhaul bound (bit/s); the per-packet service rate is the
    /// minimum of the two bounds at the current payload.
    pub rsu_backhaul_bps: f64,
    /// MAC backoff added per retransmission (s).
    pub retx_backoff_s: f64,
    /// Transmission attempts per packet (1 initial + 3 retries).
    pub max_attempts: u32,
    /// Fixed processing on a beacon's delivery path (s).
    pub proc_beacon_s: f64,
    /// RSU-to-fog backhaul (s) and the extra hop when a zone is served by a
    /// fog other than its home site.
    pub backhaul_base_s: f64,
    pub backhaul_mismatch_s: f64,
    /// Service-task processing at the RSU-local tier and at a fog site (s).
    pub proc_local_s: f64,
    pub proc_fog_s: f64,
    /// Latency cap reported when a fog site is saturated (s).
    pub fog_saturation_s: f64,
    /// Service-task generation rate per vehicle (Hz) and work per task
    /// (CPU-seconds at unit capacity).
    pub service_hz: f64,
    pub work_per_task: f64,
    /// Link budget: reference SNR at the antenna, log-distance slope,
    /// reference distance, RSU-quality swing, and per-tick shadowing.
    pub snr_ref_db: f64,
    pub snr_slope_db: f64,
    pub snr_d0_m: f64,
    pub quality_gain_db: f64,
    pub shadow_db: f64,
    /// Channel penalty while driving aggressively (success multiplier).
    pub aggressive_success_mult: f64,
    /// Aggressive manoeuvres occasionally force a link re-acquisition: the
    /// packet still arrives but late.  Probability per delivered packet and
    /// the extra delay.
    pub aggr_delay_prob: f64,
    pub aggr_delay_s: f64,
    /// Channel-access contention: every concurrent transmitter on the same
    /// roadside unit erodes per-attempt success as exp(-coef * exposure).
    /// Vehicles that gossip with co-located neighbours coordinate slots and
    /// shed up to `collision_coord_cap` exposures each.
    pub collision_coef: f64,
    pub collision_coord_cap: usize,
    /// Stall (emergency-stop) probability per second by driving style, the
    /// stall duration, and the micro-policy's tail cost for sampling it.
    pub stall_p_aggressive: f64,
    pub stall_p_moderate: f64,
    pub stall_duration_s: f64,
    pub tail_cost: f64,
    /// Roadside quality wander amplitude and the vehicles' estimate noise.
    pub quality_wander: f64,
    pub estimate_noise: f64,
    /// Congestion: flow/capacity at which an edge counts as congested, the
    /// speed-drop slope, and the jammed speed floor (m/s).
    pub nci_threshold: f64,
    pub congestion_slope: f64,
    pub speed_floor_mps: f64,
    /// Minimum effective rate for the reliability SLO (bit/s).
    pub rate_slo_bps: f64,
    /// Incident capacity multiplier and duration; RSU outage rotation.
    pub incident_cap_mult: f64,
    pub incident_duration_s: f64,
    pub outage_window_s: f64,
    /// Plan feasibility: predicted-utilization threshold above which a
    /// plan's probability is capped, and the cap.
    pub fog_util_cap_threshold: f64,
    pub plan_cap: f64,
    /// Power floor: an unfavored fog site never drops below this fraction
    /// of its hardware capacity.
    pub power_floor: f64,
    /// Idealized channel: every attempt succeeds, transmission is free.
    pub perfect_channel: bool,
}

impl Default for SimTuning {
    fn default() -> Self {
        SimTuning {
            rsu_service_pkt_s: 1200.0,
            rsu_backhaul_bps: 3.0e6,
            retx_backoff_s: 0.008,
            max_attempts: 4,
            proc_beacon_s: 0.003,
            backhaul_base_s: 0.005,
            backhaul_mismatch_s: 0.006,
            proc_local_s: 0.035,
            proc_fog_s: 0.006,
            fog_saturation_s: 0.250,
            service_hz: 5.0,
            work_per_task: 0.013,
            snr_ref_db: 40.0,
            snr_slope_db: 25.0,
            snr_d0_m: 50.0,
            quality_gain_db: 8.0,
            shadow_db: 2.0,
            aggressive_success_mult: 0.85,
            aggr_delay_prob: 0.15,
            aggr_delay_s: 0.040,
            collision_coef: 0.008,
            collision_coord_cap: 3,
            stall_p_aggressive: 0.04,
            stall_p_moderate: 0.001,
            stall_duration_s: 3.0,
            tail_cost: 50.0,
            quality_wander: 0.06,
            estimate_noise: 0.5,
            nci_threshold: 0.85,
            congestion_slope: 0.8,
            speed_floor_mps: 2.0,
            rate_slo_bps: 5.0e5,
            incident_cap_mult: 0.3,
            incident_duration_s: 60.0,
            outage_window_s: 60.0,
            fog_util_cap_threshold: 0.85,
            plan_cap: 0.03,
            power_floor: 0.25,
            perfect_channel: false,
        }
    }
}

/// Weight a plan assigns to its favored fog sites relative to the rest when
/// the per-site load shares are formed.
const FAVORED_WEIGHT: f64 = 12.0;

/// The two radio profiles: a robust narrowband stack and a faster wideband
/// one with a higher SNR midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
struct RadioProfile {
    rate_bps: f64,
    bandwidth_hz: f64,
    gamma0_db: f64,
}

const NARROWBAND: RadioProfile = RadioProfile {
    rate_bps: 6.0e6,
    bandwidth_hz: 10.0e6,
    gamma0_db: 5.0,
};
const WIDEBAND: RadioProfile = RadioProfile {
    rate_bps: 12.0e6,
    bandwidth_hz: 20.0e6,
    gamma0_db: 8.0,
};

/// Candidate micro-actions: brake, coast, accelerate.
const ACTIONS: [MicroAction; 3] = [
    MicroAction {
        accel: -1.0,
        lane_change: 0,
    },
    MicroAction {
        accel: 0.0,
        lane_change: 0,
    },
    MicroAction {
        accel: 1.0,
        lane_change: 0,
    },
];

struct SimVehicle {
    vs: VehicleState,
    route: Vec<usize>,
    leg: usize,
    trip_start_s: f64,
    generation: u64,
    wide_radio: bool,
    stall_until_s: f64,
    aggressive: bool,
    /// Per-RSU quality estimate (sensing is noisy; gossip sharpens it).
    q_est: Vec<f64>,
    /// Beacon target for the current second and its estimated success.
    link_rsu: Option<usize>,
    link_p_est: f64,
    use_fog_tier: bool,
    beacon_acc: f64,
    service_acc: f64,
    last_msg: DVector<f64>,
}

impl SimVehicle {
    fn edge(&self) -> usize {
        self.route[self.leg.min(self.route.len() - 1)]
    }
    fn offset(&self) -> f64 {
        self.vs.x[0]
    }
    fn speed(&self) -> f64 {
        self.vs.x[1]
    }
}

/// Per-traffic-tick metric accumulators.
#[derive(Default, Clone)]
struct TickStats {
    sent: u64,
    delivered: u64,
    dropped: u64,
    latency_sum_s: f64,
    paths_met: u64,
    paths_total: u64,
    nci_pct: f64,
    trips: u64,
    att_sum_min: f64,
}

/// Runs a scenario in a built world with default tuning.
pub fn run(world: &World, cfg: &ScenarioConfig) -> Result<MetricsReport> {
    run_tuned(world, cfg, &SimTuning::default())
}

/// Runs a scenario with explicit model constants.
pub fn run_tuned(world: &World, cfg: &ScenarioConfig, tune: &SimTuning) -> Result<MetricsReport> {
    cfg.validate()?;
    let n_vehicles = world.vehicle_count();
    let n_rsus = world.rsus.len();
    let n_fog = world.fog_sites.len();
    let payload_bits = (cfg.payload_bytes * 8) as f64;
    let traffic_dt = cfg.traffic_dt_s;
    let net_dt = cfg.net_dt_s;
    let n_net = (cfg.duration_s / net_dt).round().max(1.0) as usize;
    let net_per_traffic = (traffic_dt / net_dt).round().max(1.0) as usize;
    let net_per_coord = (1.0 / net_dt).round().max(1.0) as usize;
    let variant = cfg.variant;

    // Effective per-packet RSU service rate: the tighter of the processing
    // and backhaul bounds.
    let rsu_service = tune
        .rsu_service_pkt_s
        .min(tune.rsu_backhaul_bps / payload_bits)
        .max(1.0);

    // Vehicle-layer configs per radio profile.
    let base_vcfg = |profile: &RadioProfile| {
        let mut v = VehicleConfig::default();
        v.dynamics = vehicle::DynamicsConfig::longitudinal(traffic_dt);
        v.gamma_th_db = 3.0;
        v.d_max_m = 500.0;
        v.gamma0_db = profile.gamma0_db;
        v.cvar_samples = 96;
        if variant == Variant::NoCvar {
            v.cvar_alpha = 0.0;
        }
        v
    };
    let vcfg_narrow = base_vcfg(&NARROWBAND);
    let vcfg_wide = base_vcfg(&WIDEBAND);

    // Plan space: bitmask consolidation patterns over fog zones (bit b
    // covers the zones with z % 6 == b), capped by the configured population
    // size. A plan concentrates work on its favored sites and powers the
    // rest down toward the floor; mask 0 is the balanced plan.
    let mask_bits = n_fog.min(6);
    let k_plans = cfg.optimizer.population_k.min(1usize << mask_bits).max(2);
    let favored_in = move |k: usize, z: usize| -> bool {
        let mask = k % (1usize << mask_bits);
        mask != 0 && mask & (1 << (z % 6)) != 0
    };
    let zone_share = move |k: usize, z: usize| -> f64 {
        let mask = k % (1usize << mask_bits);
        if mask == 0 {
            return 1.0 / n_fog as f64;
        }
        let favored = (0..n_fog).filter(|&y| favored_in(k, y)).count() as f64;
        let w: f64 = if favored_in(k, z) { FAVORED_WEIGHT } else { 1.0 };
        w / (FAVORED_WEIGHT * favored + (n_fog as f64 - favored))
    };
    // Effective capacity under a plan: favored sites run at full power,
    // unfavored ones throttle toward the floor.
    let power_scale = {
        let floor = tune.power_floor;
        move |k: usize, z: usize| -> f64 { (zone_share(k, z) * n_fog as f64).clamp(floor, 1.0) }
    };
    let zone_mult_of = move |k: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n_fog)
            .map(|z| {
                let mask = k % (1usize << mask_bits);
                if mask == 0 {
                    1.0
                } else if favored_in(k, z) {
                    1.10
                } else {
                    0.95
                }
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|r| r * n_fog as f64 / s).collect()
    };

    // --- Mutable run state -------------------------------------------------
    let mut vehicles: Vec<SimVehicle> = world
        .trips
        .iter()
        .enumerate()
        .map(|(i, trip)| {
            let route = world
                .route(trip.origin, trip.dest)
                .expect("seeded trips are connected");
            let vcfg = if cfg.mixed_radio && i % 2 == 1 {
                &vcfg_wide
            } else {
                &vcfg_narrow
            };
            Ok(SimVehicle {
                vs: VehicleState::new(DVector::from_vec(vec![0.0, 0.0]), 2, 2, vcfg)?,
                route,
                leg: 0,
                trip_start_s: 0.0,
                generation: 0,
                wide_radio: cfg.mixed_radio && i % 2 == 1,
                stall_until_s: -1.0,
                aggressive: false,
                q_est: vec![0.7; n_rsus],
                link_rsu: None,
                link_p_est: 0.5,
                use_fog_tier: true,
                beacon_acc: 0.0,
                service_acc: 0.0,
                last_msg: DVector::zeros(2),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rsu_quality = vec![0.8f64; n_rsus];
    let mut rsu_out = vec![false; n_rsus];
    let mut rsu_backlog = vec![0.0f64; n_rsus];
    let outage_count = (cfg.rsu_outage_frac * n_rsus as f64).round() as usize;

    let mut fog_states: Vec<FogState> = world
        .fog_sites
        .iter()
        .map(|f| FogState::new(f.cpu_capacity, f.mem_capacity))
        .collect();
    let fog_mu: Vec<f64> = world.fog_sites.iter().map(|f| f.cpu_capacity).collect();
    // Effective capacity under the committed plan's power state.
    let mut mu_eff = fog_mu.clone();
    let mut fog_arr_ema = vec![0.0f64; n_fog];
    let mut fog_arrivals_tick = vec![0.0f64; n_fog];
    // Service work generated per zone (independent of where it lands). The
    // EMA is primed at a nominal desk load so the feasibility predictor is
    // live from the first coordination window rather than after warm-up.
    let mut zone_demand_ema: Vec<f64> = fog_mu.iter().map(|m| 0.3 * m).collect();
    let mut zone_gen_tick = vec![0.0f64; n_fog];
    let fog_coefs = FogTickCoefs::default();

    let mut edge_flow = vec![0.0f64; world.edges.len()];
    let mut edge_speed = vec![13.9f64; world.edges.len()];
    let mut incident_until = vec![-1.0f64; world.edges.len()];

    let mut zone_mult = vec![1.0f64; n_fog];
    let mut serving_fog: Vec<usize> = (0..n_fog).collect();
    // Conditional routing CDF per zone, from the dispatch coupling columns.
    let mut zone_route_cdf: Vec<Vec<f64>> = (0..n_fog)
        .map(|z| (0..n_fog).map(|f| if f >= z { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut zone_flow_ratio = vec![0.0f64; n_fog];
    let mut zone_outage = vec![0.0f64; n_fog];

    let mut cloud_state = CloudState::new(4, k_plans)?;
    cloud_state.weights = DVector::from_row_slice(&cfg.optimizer.weights);
    cloud_state.risk_delta = cfg.optimizer.risk_delta;
    let mut warm_psi = DVector::from_element(k_plans, (1.0 / k_plans as f64).sqrt());
    let mut lat_ema = 0.010f64;

    let ccfg = CloudConfig {
        epsilon: cfg.optimizer.epsilon,
        dispatch: if variant == Variant::GreedyAssign {
            DispatchMethod::Greedy
        } else {
            DispatchMethod::Entropic
        },
        sinkhorn_iters: 20_000,
        sinkhorn_tol: 1.0e-8,
        ..CloudConfig::default()
    };

    // --- Metric state ------------------------------------------------------
    let n_traffic = n_net.div_ceil(net_per_traffic);
    let mut stats: Vec<TickStats> = Vec::with_capacity(n_traffic);
    let mut att_sum_min = 0.0f64;
    let mut trips_completed = 0u64;
    let mut total_latency_s = 0.0f64;
    let mut series = MetricSeries::default();

    // Scratch: per-edge vehicle lists for leader/gossip lookups.
    let mut edge_occupants: Vec<Vec<usize>> = vec![Vec::new(); world.edges.len()];

    for tn in 0..n_net {
        let t = tn as f64 * net_dt;
        let tt = tn / net_per_traffic;

        // ---------------- Traffic tick ------------------------------------
        if tn % net_per_traffic == 0 {
            stats.push(TickStats::default());

            // Roadside quality wander and the rotating outage schedule.
            let mut qrng = rng::substream(cfg.seed, "sim.quality", tt as u64);
            for q in rsu_quality.iter_mut() {
                let u: f64 = qrng.gen_range(-1.0..1.0);
                *q = (0.97 * *q + 0.03 * 0.8 + tune.quality_wander * u).clamp(0.15, 1.0);
            }
            if outage_count > 0 {
                let window = (t / tune.outage_window_s).floor() as usize;
                for (i, out) in rsu_out.iter_mut().enumerate() {
                    *out = (i + n_rsus - (window * outage_count) % n_rsus) % n_rsus
                        < outage_count;
                }
            }

            // Incidents: Poisson-thinned spawn, fixed duration.
            if cfg.incident_rate > 0.0 {
                let mut irng = rng::substream(cfg.seed, "sim.incident", tt as u64);
                let p_spawn = cfg.incident_rate * traffic_dt / 60.0;
                if irng.gen_range(0.0..1.0) < p_spawn && !world.edges.is_empty() {
                    let e = irng.gen_range(0..world.edges.len());
                    incident_until[e] = t + tune.incident_duration_s;
                }
            }

            // Edge flows, speeds, and occupant lists.
            for l in edge_occupants.iter_mut() {
                l.clear();
            }
            for f in edge_flow.iter_mut() {
                *f = 0.0;
            }
            for (i, v) in vehicles.iter().enumerate() {
                let e = v.edge();
                edge_flow[e] += 1.0;
                edge_occupants[e].push(i);
            }
            let mut congested = 0usize;
            for (e, edge) in world.edges.iter().enumerate() {
                let mult = if t < incident_until[e] {
                    tune.incident_cap_mult
                } else {
                    1.0
                };
                let cap_eff = edge.capacity * mult * zone_mult[world.edge_zone[e]];
                let ratio = edge_flow[e] / cap_eff.max(1e-9);
                if ratio >= tune.nci_threshold {
                    congested += 1;
                }
                edge_speed[e] = (edge.free_flow_mps
                    * (1.0 - tune.congestion_slope * ratio.min(1.5)))
                .max(tune.speed_floor_mps);
            }
            let slot = stats.last_mut().expect("slot pushed above");
            slot.nci_pct = if world.edges.is_empty() {
                0.0
            } else {
                100.0 * congested as f64 / world.edges.len() as f64
            };

            // Zone aggregates.
            for z in 0..n_fog {
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for (e, edge) in world.edges.iter().enumerate() {
                    if world.edge_zone[e] == z {
                        sum += edge_flow[e] / edge.capacity;
                        cnt += 1;
                    }
                }
                zone_flow_ratio[z] = if cnt == 0 { 0.0 } else { sum / cnt as f64 };
                let members: Vec<usize> = world
                    .rsus
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.fog == z)
                    .map(|(i, _)| i)
                    .collect();
                zone_outage[z] = if members.is_empty() {
                    0.0
                } else {
                    members.iter().filter(|i| rsu_out[**i]).count() as f64
                        / members.len() as f64
                };
            }

            // Leaders: nearest vehicle ahead on the same edge.
            let mut leader: Vec<Option<usize>> = vec![None; n_vehicles];
            for occ in &edge_occupants {
                for &a in occ {
                    let mut best: Option<usize> = None;
                    for &b in occ {
                        if b == a || vehicles[b].offset() <= vehicles[a].offset() {
                            continue;
                        }
                        if best.is_none_or(|c| vehicles[b].offset() < vehicles[c].offset()) {
                            best = Some(b);
                        }
                    }
                    leader[a] = best;
                }
            }

            // --- Per-vehicle decision stack (two-phase: read then commit) --
            let mut step_results: Vec<Option<(VehicleState, vehicle::VehicleOutputs)>> =
                Vec::with_capacity(n_vehicles);
            let mut veh_draws: Vec<(f64, f64, f64, f64, f64)> = Vec::with_capacity(n_vehicles);
            let mut est_next: Vec<(f64, f64)> = Vec::with_capacity(n_vehicles);

            for (i, v) in vehicles.iter().enumerate() {
                // One substream per vehicle-tick; fixed draw order.
                let mut r = rng::substream(
                    cfg.seed,
                    "sim.veh",
                    (tt as u64) * n_vehicles as u64 + i as u64,
                );
                let noise1: f64 = r.gen_range(-1.0..1.0);
                let noise2: f64 = r.gen_range(-1.0..1.0);
                let shadow: f64 = r.gen_range(-1.0..1.0);
                let tier_u: f64 = r.gen_range(0.0..1.0);
                let stall_u: f64 = r.gen_range(0.0..1.0);
                veh_draws.push((noise1, noise2, shadow, tier_u, stall_u));

                let e = v.edge();
                let cands = &world.edge_rsu_candidates[e];

                // Gossip set: same edge first, then edges sharing one of this
                // edge's intersections, capped at four partners.
                let mut neigh: Vec<usize> = Vec::new();
                for &j in &edge_occupants[e] {
                    if j != i && neigh.len() < 4 {
                        neigh.push(j);
                    }
                }
                'adjacent: for node in [world.edges[e].from, world.edges[e].to] {
                    for &e2 in &world.out_edges[node] {
                        if e2 == e {
                            continue;
                        }
                        for &j in &edge_occupants[e2] {
                            if j != i {
                                if neigh.len() >= 4 {
                                    break 'adjacent;
                                }
                                neigh.push(j);
                            }
                        }
                    }
                }

                // Sense both candidates through estimate noise; with coupling
                // enabled the noisy observation is fused with the gossip
                // partners' current estimates, pooling away much of the noise.
                let pool = if variant == Variant::NoEntangle || neigh.is_empty() {
                    None
                } else {
                    let inv = 1.0 / neigh.len() as f64;
                    let p1: f64 =
                        neigh.iter().map(|&j| vehicles[j].q_est[cands[0].0]).sum::<f64>() * inv;
                    let p2: f64 =
                        neigh.iter().map(|&j| vehicles[j].q_est[cands[1].0]).sum::<f64>() * inv;
                    Some((p1, p2))
                };
                let q_eff = |rsu: usize| -> f64 {
                    if rsu_out[rsu] {
                        0.02
                    } else {
                        rsu_quality[rsu]
                    }
                };
                let est = |prev: f64, rsu: usize, noise: f64, pool_r: Option<f64>| -> f64 {
                    let obs = q_eff(rsu) + tune.estimate_noise * noise;
                    let fused = match pool_r {
                        Some(p) => 0.6 * obs + 0.4 * p,
                        None => obs,
                    };
                    (0.5 * prev + 0.5 * fused).clamp(0.0, 1.2)
                };
                let q1 = est(v.q_est[cands[0].0], cands[0].0, noise1, pool.map(|p| p.0));
                let q2 = est(v.q_est[cands[1].0], cands[1].0, noise2, pool.map(|p| p.1));
                est_next.push((q1, q2));

                if t < v.stall_until_s {
                    step_results.push(None);
                    continue;
                }

                let profile = if v.wide_radio { &WIDEBAND } else { &NARROWBAND };
                let vcfg = if v.wide_radio { &vcfg_wide } else { &vcfg_narrow };

                let snr_est = |d: f64, q: f64| -> f64 {
                    tune.snr_ref_db - tune.snr_slope_db * (1.0 + d / tune.snr_d0_m).log10()
                        + tune.quality_gain_db * (q - 0.5)
                        + tune.shadow_db * shadow
                };
                let links = [
                    LinkMetrics {
                        snr_db: snr_est(cands[0].1, q1),
                        distance_m: cands[0].1,
                        payload_bits,
                        phy_rate_bps: profile.rate_bps,
                        neighbor_queue: rsu_backlog[cands[0].0],
                        neighbor_service_rate: rsu_service,
                    },
                    LinkMetrics {
                        snr_db: snr_est(cands[1].1, q2),
                        distance_m: cands[1].1,
                        payload_bits,
                        phy_rate_bps: profile.rate_bps,
                        neighbor_queue: rsu_backlog[cands[1].0],
                        neighbor_service_rate: rsu_service,
                    },
                ];

                let occ = &edge_occupants[e];
                let neighbor_psi: Vec<&crate::qstate::Amplitudes> = if variant
                    == Variant::NoEntangle
                {
                    Vec::new()
                } else {
                    neigh.iter().map(|&j| &vehicles[j].vs.psi).collect()
                };
                let entangle_strengths = vec![0.25; neighbor_psi.len()];
                let neighbor_messages: Vec<DVector<f64>> =
                    neigh.iter().map(|&j| vehicles[j].last_msg.clone()).collect();
                let neighbor_xi: Vec<DVector<f64>> =
                    neigh.iter().map(|&j| vehicles[j].vs.consensus_xi.clone()).collect();
                let consensus_weights = vec![1.0 / 3.0; neighbor_xi.len()];

                let zone = world.edge_zone[e];
                let sf = serving_fog[zone];
                let fog_wait = fog_wait_s(&fog_states[sf], mu_eff[sf], fog_arr_ema[sf], tune);
                let mismatch = if sf == zone { 0.0 } else { tune.backhaul_mismatch_s };
                let queue_wait = rsu_backlog[cands[0].0] / rsu_service;
                let l_local = tune.proc_local_s + 0.001 * v.vs.queue_q;
                let l_upl = tune.backhaul_base_s + mismatch + queue_wait;
                let l_proc = fog_wait + tune.proc_fog_s;

                let xi_target = DVector::from_vec(vec![zone_flow_ratio[zone], fog_util(sf, &fog_arr_ema, &mu_eff)]);

                // Micro-policy stage costs: travel progress, channel
                // robustness, and a rare heavy tail for aggressive driving.
                let v_target = edge_speed[e];
                let speed = v.speed();
                let p_est = vehicle::packet_success(
                    links[0].snr_db,
                    vcfg.gamma0_db,
                    vcfg.steepness,
                    vcfg.coding_gain,
                )?;
                let p_tail_aggr = tune.stall_p_aggressive;
                let p_tail_calm = tune.stall_p_moderate;
                let tail_cost = tune.tail_cost;
                let chan_aggr = tune.aggressive_success_mult;
                let action_cost = move |a: usize, rng: &mut ChaCha8Rng| -> f64 {
                    let act = &ACTIONS[a];
                    let exp_speed = (speed + act.accel * traffic_dt).clamp(0.0, 20.0);
                    let travel = 0.25 * (v_target - exp_speed).powi(2);
                    let aggressive = act.accel > 0.5;
                    let p_tail = if aggressive { p_tail_aggr } else { p_tail_calm };
                    let chan = if aggressive { chan_aggr } else { 1.0 };
                    let comm = 3.0 * (1.0 - p_est * chan);
                    let tail = if rng.gen_range(0.0..1.0) < p_tail {
                        tail_cost
                    } else {
                        0.0
                    };
                    travel + comm + tail
                };

                let (gap, rel) = match leader[i] {
                    Some(j) => (
                        (vehicles[j].offset() - v.offset() - 4.0).max(0.1),
                        v.speed() - vehicles[j].speed(),
                    ),
                    None => (1.0e4, 0.0),
                };

                let p2_est = vehicle::packet_success(
                    links[1].snr_db,
                    vcfg.gamma0_db,
                    vcfg.steepness,
                    vcfg.coding_gain,
                )?;
                let candidate_paths = vec![vec![p_est], vec![p2_est, 0.97]];
                let phy_rates = [profile.rate_bps * p_est.max(0.05)];

                let env = VehicleEnv {
                    links: &links,
                    neighbor_messages: &neighbor_messages,
                    neighbor_psi: &neighbor_psi,
                    entangle_strengths: &entangle_strengths,
                    candidate_actions: &ACTIONS,
                    decide_action: true,
                    action_cost: &action_cost,
                    gap_m: gap,
                    rel_speed: rel,
                    v_target,
                    arrivals_packets: (cfg.beacon_hz
                        + tune.service_hz * cfg.demand_multiplier)
                        * traffic_dt,
                    phy_rates: &phy_rates,
                    l_local,
                    l_upl,
                    l_proc,
                    l_down: 0.003,
                    alpha_share: 1.0 / (occ.len().max(1) as f64),
                    bandwidth_hz: profile.bandwidth_hz,
                    sinr_linear: 10f64.powf(links[0].snr_db / 10.0),
                    safety: 1.0 / (1.0 + gap / 50.0),
                    fault_risk: zone_outage[zone],
                    staleness: 0.1,
                    neighbor_xi: &neighbor_xi,
                    consensus_weights: &consensus_weights,
                    consensus_eta: 0.2,
                    xi_target: &xi_target,
                    candidate_paths: &candidate_paths,
                    rho_min: 0.5,
                    disturbance_sq: 0.25,
                    seed: rng::mix(
                        cfg.seed ^ rng::mix((tt as u64) << 20 | (i as u64 + 1)),
                    ),
                };
                let stepped = vehicle::step_vehicle(&v.vs, &env, vcfg)?;
                step_results.push(Some(stepped));
            }

            // --- Commit phase ---------------------------------------------
            let mut slot_trips = 0u64;
            let mut slot_att_min = 0.0f64;
            for i in 0..n_vehicles {
                let (_, _, _, tier_u, stall_u) = veh_draws[i];
                let e = vehicles[i].edge();
                let cands = world.edge_rsu_candidates[e];
                let zone = world.edge_zone[e];
                let sf = serving_fog[zone];

                // Commit the estimates computed during the read pass.
                {
                    let v = &mut vehicles[i];
                    let (q1, q2) = est_next[i];
                    v.q_est[cands[0].0] = q1;
                    v.q_est[cands[1].0] = q2;
                }

                if let Some((new_state, outputs)) = step_results[i].take() {
                    let fog_wait = fog_wait_s(&fog_states[sf], mu_eff[sf], fog_arr_ema[sf], tune);
                    let mismatch = if sf == zone { 0.0 } else { tune.backhaul_mismatch_s };
                    let l_local = tune.proc_local_s + 0.001 * new_state.queue_q;
                    let l_fog = tune.backhaul_base_s
                        + mismatch
                        + rsu_backlog[cands[0].0] / rsu_service
                        + fog_wait
                        + tune.proc_fog_s;

                    let v = &mut vehicles[i];
                    v.vs = new_state;
                    v.last_msg = outputs.message.clone();
                    v.aggressive = outputs.action.accel > 0.5;
                    v.link_rsu = if outputs.transmitted {
                        outputs.link.map(|l| cands[l.min(1)].0)
                    } else {
                        None
                    };
                    v.link_p_est = outputs.link_prob;

                    // Tier choice by annealed sampling over the two latency
                    // estimates; the temperature is the vehicle's own.
                    let costs = DVector::from_vec(vec![l_local, l_fog]);
                    let temp = if variant == Variant::FixedTemp {
                        1.0
                    } else {
                        v.vs.temperature.value
                    };
                    let pi = soft_policy(&costs, temp)?;
                    v.use_fog_tier = tier_u >= pi.as_slice()[0];
                    if variant == Variant::FixedTemp {
                        v.vs.temperature = TemperatureState::new(1.0, cfg.optimizer.beta)?;
                    }

                    // Realized stall: rare for calm driving, an order of
                    // magnitude likelier when aggressive.
                    let p_stall = if v.aggressive {
                        tune.stall_p_aggressive
                    } else {
                        tune.stall_p_moderate
                    };
                    if stall_u < p_stall * traffic_dt {
                        v.stall_until_s = t + tune.stall_duration_s;
                        v.vs.x[1] = 0.0;
                    }

                    // Congestion binds the achievable speed.
                    let cap = edge_speed[e] * 1.15 + 0.5;
                    v.vs.x[1] = v.vs.x[1].clamp(0.0, cap);
                    v.vs.x[0] = v.vs.x[0].max(0.0);
                } else {
                    // Stalled: frozen in place.
                    vehicles[i].vs.x[1] = 0.0;
                }

                // Leg and trip bookkeeping.
                let t_next = t + traffic_dt;
                loop {
                    let v = &mut vehicles[i];
                    let len = world.edges[v.edge()].length_m;
                    if v.vs.x[0] < len {
                        break;
                    }
                    if v.leg + 1 < v.route.len() {
                        v.vs.x[0] -= len;
                        v.leg += 1;
                    } else {
                        // Trip complete; respawn on a fresh OD pair.
                        trips_completed += 1;
                        let minutes = (t_next - v.trip_start_s) / 60.0;
                        att_sum_min += minutes;
                        slot_trips += 1;
                        slot_att_min += minutes;
                        v.generation += 1;
                        let idx = i as u64 + n_vehicles as u64 * v.generation;
                        let trip = draw_trip(world, cfg.seed, idx)?;
                        let route = world
                            .route(trip.origin, trip.dest)
                            .expect("drawn trips are connected");
                        v.route = route;
                        v.leg = 0;
                        v.vs.x[0] = 0.0;
                        v.vs.x[1] = 0.0;
                        v.trip_start_s = t_next;
                    }
                }

                // Reliability: the monitored vehicle-to-fog path against the
                // infrastructure budget, using true channel state.
                let v = &vehicles[i];
                let e = v.edge();
                let cands = world.edge_rsu_candidates[e];
                let zone = world.edge_zone[e];
                let sf = serving_fog[zone];
                let (met, total) = match v.link_rsu {
                    Some(rsu) if !rsu_out[rsu] => {
                        let profile = if v.wide_radio { &WIDEBAND } else { &NARROWBAND };
                        let vcfg = if v.wide_radio { &vcfg_wide } else { &vcfg_narrow };
                        let d = if rsu == cands[0].0 { cands[0].1 } else { cands[1].1 };
                        let snr = tune.snr_ref_db
                            - tune.snr_slope_db * (1.0 + d / tune.snr_d0_m).log10()
                            + tune.quality_gain_db * (rsu_quality[rsu] - 0.5);
                        let p = vehicle::packet_success(
                            snr,
                            vcfg.gamma0_db,
                            vcfg.steepness,
                            vcfg.coding_gain,
                        )?;
                        let lat = rsu_backlog[rsu] / rsu_service
                            + payload_bits / profile.rate_bps
                            + tune.backhaul_base_s
                            + (if sf == zone { 0.0 } else { tune.backhaul_mismatch_s })
                            + fog_wait_s(&fog_states[sf], mu_eff[sf], fog_arr_ema[sf], tune)
                            + tune.proc_fog_s;
                        let ok = lat * 1000.0 <= cfg.latency_budget_v2i_ms
                            && profile.rate_bps * p >= tune.rate_slo_bps;
                        (u64::from(ok || tune.perfect_channel), 1)
                    }
                    _ => (u64::from(tune.perfect_channel), 1),
                };
                let slot = stats.last_mut().expect("slot exists");
                slot.paths_met += met;
                slot.paths_total += total;
            }
            let slot = stats.last_mut().expect("slot exists");
            slot.trips += slot_trips;
            slot.att_sum_min += slot_att_min;
        }

        // ---------------- Network tick -------------------------------------
        for f in fog_arrivals_tick.iter_mut() {
            *f = 0.0;
        }
        for i in 0..n_vehicles {
            let (beacons, services) = {
                let v = &mut vehicles[i];
                v.beacon_acc += cfg.beacon_hz * net_dt;
                v.service_acc += tune.service_hz * cfg.demand_multiplier * net_dt;
                let b = v.beacon_acc.floor() as u32;
                let s = v.service_acc.floor() as u32;
                v.beacon_acc -= b as f64;
                v.service_acc -= s as f64;
                (b, s)
            };
            if beacons == 0 && services == 0 {
                continue;
            }
            let mut r = rng::substream(
                cfg.seed,
                "sim.pkt",
                tn as u64 * n_vehicles as u64 + i as u64,
            );
            let v = &vehicles[i];
            let e = v.edge();
            let cands = world.edge_rsu_candidates[e];
            let zone = world.edge_zone[e];
            let slot = stats.last_mut().expect("slot exists");

            let (p_true, tx_time, rsu) = match v.link_rsu {
                Some(rsu) => {
                    let profile = if v.wide_radio { &WIDEBAND } else { &NARROWBAND };
                    let vcfg = if v.wide_radio { &vcfg_wide } else { &vcfg_narrow };
                    let d = if rsu == cands[0].0 { cands[0].1 } else { cands[1].1 };
                    let q = if rsu_out[rsu] { 0.02 } else { rsu_quality[rsu] };
                    let snr = tune.snr_ref_db
                        - tune.snr_slope_db * (1.0 + d / tune.snr_d0_m).log10()
                        + tune.quality_gain_db * (q - 0.5);
                    let mut p = vehicle::packet_success(
                        snr,
                        vcfg.gamma0_db,
                        vcfg.steepness,
                        vcfg.coding_gain,
                    )? * q.clamp(0.05, 1.0);
                    if v.aggressive {
                        p *= tune.aggressive_success_mult;
                    }
                    if rsu_out[rsu] {
                        p = 0.0;
                    }
                    (p, payload_bits / profile.rate_bps, Some(rsu))
                }
                None => (0.0, 0.0, None),
            };
            let (p_true, tx_time) = if tune.perfect_channel {
                (1.0, 0.0)
            } else {
                (p_true, tx_time)
            };

            for pkt in 0..(beacons + services) {
                let is_service = pkt >= beacons;
                if is_service && v.use_fog_tier {
                    // Offered fog demand is generated at the vehicle whether or
                    // not the uplink later succeeds.
                    zone_gen_tick[zone] += tune.work_per_task;
                }
                slot.sent += 1;
                let Some(rsu) = rsu else {
                    // No admissible link this second: the packet is lost.
                    if tune.perfect_channel {
                        slot.delivered += 1;
                        total_latency_s += tune.proc_beacon_s;
                        slot.latency_sum_s += tune.proc_beacon_s;
                    } else {
                        slot.dropped += 1;
                    }
                    continue;
                };
                let mut attempts = 0u32;
                let mut delivered = false;
                while attempts < tune.max_attempts {
                    attempts += 1;
                    if r.gen_range(0.0..1.0) < p_true {
                        delivered = true;
                        break;
                    }
                }
                if !delivered {
                    slot.dropped += 1;
                    continue;
                }
                let queue_wait = rsu_backlog[rsu] / rsu_service;
                let mut latency = queue_wait
                    + attempts as f64 * tx_time
                    + (attempts - 1) as f64 * tune.retx_backoff_s;
                if is_service {
                    if vehicles[i].use_fog_tier {
                        // Route through the dispatch coupling's conditional
                        // distribution for this zone: a sharper coupling keeps
                        // tasks home, a mismatched one pays extra backhaul.
                        let u = r.gen_range(0.0..1.0);
                        let cdf = &zone_route_cdf[zone];
                        let target = cdf.iter().position(|&c| u <= c).unwrap_or(n_fog - 1);
                        let mismatch =
                            if target == zone { 0.0 } else { tune.backhaul_mismatch_s };
                        latency += tune.backhaul_base_s
                            + mismatch
                            + fog_wait_s(
                                &fog_states[target],
                                mu_eff[target],
                                fog_arr_ema[target],
                                tune,
                            )
                            + tune.proc_fog_s;
                        fog_arrivals_tick[target] += tune.work_per_task;
                    } else {
                        latency += tune.proc_local_s;
                    }
                } else {
                    latency += tune.proc_beacon_s;
                }
                slot.delivered += 1;
                slot.latency_sum_s += latency;
                total_latency_s += latency;
                rsu_backlog[rsu] += 1.0;
            }
        }

        // Queues drain deterministically.
        for b in rsu_backlog.iter_mut() {
            *b = (*b - rsu_service * net_dt).max(0.0);
        }
        for f in 0..n_fog {
            let (next, _report) = fog::fog_tick(
                &fog_states[f],
                fog_arrivals_tick[f],
                mu_eff[f] * net_dt,
                &[lat_ema * 1.0e6],
                &[],
                &fog_coefs,
            );
            fog_states[f] = next;
            fog_arr_ema[f] = 0.98 * fog_arr_ema[f] + 0.02 * (fog_arrivals_tick[f] / net_dt);
            zone_demand_ema[f] = 0.98 * zone_demand_ema[f] + 0.02 * (zone_gen_tick[f] / net_dt);
            zone_gen_tick[f] = 0.0;
        }

        // ---------------- Coordination ------------------------------------
        if (tn + 1) % net_per_coord == 0 {
            let coord_idx = (tn + 1) / net_per_coord;
            let outcome = coordinate_once(
                cfg,
                tune,
                world,
                coord_idx as u64,
                k_plans,
                &zone_share,
                &power_scale,
                &zone_mult_of,
                &zone_flow_ratio,
                &zone_outage,
                &fog_arr_ema,
                &zone_demand_ema,
                &fog_mu,
                &mu_eff,
                &fog_states,
                lat_ema,
                &mut warm_psi,
                &mut cloud_state,
                &ccfg,
            )?;
            let committed = outcome.0;
            let coupling = outcome.1;
            zone_mult = zone_mult_of(committed);
            // Commit the plan's power state: unfavored sites run throttled.
            for f in 0..n_fog {
                mu_eff[f] = fog_mu[f] * power_scale(committed, f);
            }
            for z in 0..n_fog {
                let mut best = (0usize, f64::NEG_INFINITY);
                let mut colsum = 0.0;
                for f in 0..n_fog {
                    let m = coupling[(f, z)];
                    colsum += m;
                    if m > best.1 {
                        best = (f, m);
                    }
                }
                serving_fog[z] = best.0;
                // Conditional routing CDF for this zone's tasks.
                if colsum > 1.0e-12 {
                    let mut acc = 0.0;
                    for f in 0..n_fog {
                        acc += coupling[(f, z)] / colsum;
                        zone_route_cdf[z][f] = acc;
                    }
                    zone_route_cdf[z][n_fog - 1] = 1.0;
                } else {
                    for f in 0..n_fog {
                        zone_route_cdf[z][f] = if f >= z { 1.0 } else { 0.0 };
                    }
                }
            }
            if variant == Variant::FixedTemp {
                cloud_state.temperature = TemperatureState::new(1.0, cfg.optimizer.beta)?;
            }

            // Fog-side reallocation across its two task classes.
            for f in 0..n_fog {
                let util = fog_util(f, &fog_arr_ema, &mu_eff);
                let tasks = [
                    TaskDescriptor {
                        priority: 2.0,
                        work: 0.6 + util,
                        energy_coef: 0.1,
                        storage_coef: 0.2,
                    },
                    TaskDescriptor {
                        priority: 1.0,
                        work: 0.4,
                        energy_coef: 0.2,
                        storage_coef: 0.1,
                    },
                ];
                fog_states[f] =
                    fog::allocate(&tasks, &fog_states[f], (1.0, 0.2, 0.1), 0.05, 0.05, 8)?;
            }

            // Latency EMA feeds the forecast targets.
            if let Some(slot) = stats.last() {
                if slot.delivered > 0 {
                    lat_ema = 0.9 * lat_ema + 0.1 * (slot.latency_sum_s / slot.delivered as f64);
                }
            }
        }
    }

    // ---------------- Finalize ---------------------------------------------
    let mut counts = PacketCounts::default();
    let mut trips_so_far = 0u64;
    let mut att_so_far = 0.0f64;
    for (k, s) in stats.iter().enumerate() {
        counts.sent += s.sent;
        counts.delivered += s.delivered;
        counts.dropped += s.dropped;
        trips_so_far += s.trips;
        att_so_far += s.att_sum_min;
        series.t_s.push(k as f64 * traffic_dt);
        series.latency_ms.push(if s.delivered > 0 {
            Some(1000.0 * s.latency_sum_s / s.delivered as f64)
        } else {
            None
        });
        series.pdr_pct.push(if s.sent > 0 {
            100.0 * s.delivered as f64 / s.sent as f64
        } else {
            100.0
        });
        series.reliability_pct.push(if s.paths_total > 0 {
            100.0 * s.paths_met as f64 / s.paths_total as f64
        } else {
            100.0
        });
        // Running mean over trips completed so far.
        series.att_min.push(if trips_so_far > 0 {
            Some(att_so_far / trips_so_far as f64)
        } else {
            None
        });
        series.nci_pct.push(s.nci_pct);
    }
    counts.trips_completed = trips_completed;
    counts.in_flight_end = 0;

    let paths_total: u64 = stats.iter().map(|s| s.paths_total).sum();
    let paths_met: u64 = stats.iter().map(|s| s.paths_met).sum();
    let nci_mean = if stats.is_empty() {
        0.0
    } else {
        stats.iter().map(|s| s.nci_pct).sum::<f64>() / stats.len() as f64
    };

    let report = MetricsReport {
        mean_latency_ms: if counts.delivered > 0 {
            Some(1000.0 * total_latency_s / counts.delivered as f64)
        } else {
            None
        },
        pdr_pct: if counts.sent > 0 {
            100.0 * counts.delivered as f64 / counts.sent as f64
        } else {
            100.0
        },
        reliability_pct: if paths_total > 0 {
            100.0 * paths_met as f64 / paths_total as f64
        } else {
            100.0
        },
        att_min: if trips_completed > 0 {
            Some(att_sum_min / trips_completed as f64)
        } else {
            None
        },
        nci_pct: nci_mean,
        counts,
        series,
    };
    debug_assert!(report.invariant_violations().is_empty());
    Ok(report)
}

/// Expected wait at a fog site: backlog drain plus a utilization-convex
/// service time (the queueing factor 1/(1-rho)), capped at the saturation
/// latency. The convexity makes sub-critical load imbalance visible in the
/// latency signal instead of only at outright overload.
fn fog_wait_s(state: &FogState, mu: f64, arr: f64, tune: &SimTuning) -> f64 {
    if mu <= 0.0 {
        return tune.fog_saturation_s;
    }
    let rho = (arr / mu).min(0.95);
    ((state.backlog_q / mu) + tune.work_per_task / mu / (1.0 - rho))
        .min(tune.fog_saturation_s)
}

fn fog_util(f: usize, arr_ema: &[f64], mu: &[f64]) -> f64 {
    if mu[f] <= 0.0 {
        1.0
    } else {
        (arr_ema[f] / mu[f]).min(2.0)
    }
}

/// One coordination pass: plan costs and caps from measured state, the
/// population-level optimizer, the fused cloud step with gates and dispatch.
/// Returns the committed plan and the dispatch coupling.
#[allow(clippy::too_many_arguments)]
fn coordinate_once(
    cfg: &ScenarioConfig,
    tune: &SimTuning,
    world: &World,
    coord_idx: u64,
    k_plans: usize,
    zone_share: &dyn Fn(usize, usize) -> f64,
    power_scale: &dyn Fn(usize, usize) -> f64,
    zone_mult_of: &dyn Fn(usize) -> Vec<f64>,
    zone_flow_ratio: &[f64],
    zone_outage: &[f64],
    fog_arr_ema: &[f64],
    zone_demand_ema: &[f64],
    fog_mu: &[f64],
    mu_eff: &[f64],
    fog_states: &[FogState],
    lat_ema: f64,
    warm_psi: &mut DVector<f64>,
    cloud_state: &mut CloudState,
    ccfg: &CloudConfig,
) -> Result<(usize, DMatrix<f64>)> {
    let n_fog = fog_mu.len();
    let variant = cfg.variant;

    // Per-plan cost rows. The latency row is deliberately myopic: it weights
    // the *measured* site waits by the candidate's traffic mix, so a plan
    // that would throttle a site below its offered demand looks cheap until
    // the damage is real. The feasibility caps below carry the predictive
    // safety check (offered demand against the candidate's powered capacity);
    // skipping the projection therefore removes the only forward-looking
    // guard against infeasible consolidation.
    let mut latency = DVector::zeros(k_plans);
    let mut congestion = DVector::zeros(k_plans);
    let mut energy_row = DVector::zeros(k_plans);
    let mut risk = DVector::zeros(k_plans);
    let mut caps = vec![1.0f64; k_plans];
    let mut max_utils = vec![0.0f64; k_plans];
    for k in 0..k_plans {
        let mults = zone_mult_of(k);
        let mut lat = 0.0;
        let mut max_util: f64 = 0.0;
        let mut max_share: f64 = 0.0;
        for z in 0..n_fog {
            let share = zone_share(k, z);
            max_share = max_share.max(share);
            lat += share
                * (fog_wait_s(&fog_states[z], mu_eff[z], fog_arr_ema[z], tune)
                    / tune.fog_saturation_s);
            let cap_k = fog_mu[z] * power_scale(k, z);
            let util_pred = if cap_k > 0.0 { zone_demand_ema[z] / cap_k } else { 2.0 };
            max_util = max_util.max(util_pred);
            congestion[k] += zone_flow_ratio[z] / mults[z] / n_fog as f64;
            risk[k] += share * zone_outage[z];
        }
        latency[k] = lat;
        // Concentrated plans keep fewer sites at full power, which is cheaper.
        energy_row[k] = 1.0 - max_share;
        max_utils[k] = max_util;
        if max_util > tune.fog_util_cap_threshold {
            caps[k] = tune.plan_cap;
        }
    }
    // The safest candidate always stays admissible: a probability simplex
    // needs at least one uncapped coordinate even when every plan predicts
    // overload somewhere.
    if caps.iter().all(|&c| c <= tune.plan_cap) {
        let safest = max_utils
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        caps[safest] = 1.0;
    }
    let weights = DVector::from_row_slice(&cfg.optimizer.weights);
    let bundle = CostBundle {
        costs: vec![latency.clone(), congestion.clone(), energy_row, risk.clone()],
        weights,
        residuals: DVector::zeros(k_plans),
        rho: 1.0,
    };
    let fs = FeasibleSet::new(caps, vec![false; k_plans])?;

    // Coupling prior: misalignment between a plan's power placement and the
    // measured demand shape. Dropped entirely by the no-coupling variant.
    let cross = if variant == Variant::NoEntangle {
        None
    } else {
        let mut m = DMatrix::zeros(k_plans, n_fog);
        for k in 0..k_plans {
            for z in 0..n_fog {
                let demand_rel = if fog_mu[z] > 0.0 {
                    (zone_demand_ema[z] / fog_mu[z]).min(1.5)
                } else {
                    1.5
                };
                m[(k, z)] = 0.05 * (power_scale(k, z) - demand_rel).abs();
            }
        }
        Some(m)
    };

    let qcfg = QioConfig {
        k: k_plans,
        l: n_fog,
        eta: 0.05,
        beta: cfg.optimizer.beta,
        rho: 1.0,
        tol_energy: 1e-12,
        tol_coupling: 1e-9,
        max_iters: 16,
        l_smooth: 2.0,
        alpha_min: 1e-3,
        seed: rng::mix(cfg.seed ^ rng::mix(0xC0_0D ^ coord_idx)),
        enforce_projection: variant != Variant::NoProj,
        anneal_temperature: variant != Variant::FixedTemp,
    };
    let outcome = qio::optimize_coupled(
        &warm_psi.clone(),
        |_| Ok(bundle.clone()),
        &fs,
        cross.as_ref(),
        &qcfg,
    )?;
    *warm_psi = outcome.psi.as_vector().clone();

    // The refined distribution re-seeds half of the cloud population mass.
    let theta = outcome.distribution.as_slice();
    let pop = cloud_state.population.as_slice();
    let mut blended: Vec<f64> = (0..k_plans).map(|k| 0.5 * pop[k] + 0.5 * theta[k]).collect();
    let s: f64 = blended.iter().sum();
    for b in blended.iter_mut() {
        *b /= s;
    }
    cloud_state.population = PlanDistribution::from_probabilities(&blended)?;

    // Fog summaries -> fused cloud step.
    let ident = DMatrix::identity(4, 4);
    let omega = &ident * 0.5;
    let bias = DVector::zeros(4);
    let mut summaries = Vec::with_capacity(n_fog);
    let mut variances = Vec::with_capacity(n_fog);
    let mut latencies = Vec::with_capacity(n_fog);
    for f in 0..n_fog {
        let y = DVector::from_vec(vec![
            fog_states[f].backlog_q.min(10.0) / 10.0,
            fog_util(f, fog_arr_ema, mu_eff),
            zone_flow_ratio[f],
            zone_outage[f],
        ]);
        let z = fog::aggregate(&[(ident.clone(), y)], &DMatrix::zeros(4, 4), &bias)?;
        let s = fog::sketch(&z, &ident, &omega, &bias)?;
        let s = fog::privatize(&s, 0.02, rng::mix(cfg.seed ^ rng::mix(coord_idx * 64 + f as u64)));
        summaries.push((&ident * (1.0 / n_fog as f64), s));
        variances.push(4.0e-4 + zone_outage[f] * 0.01);
        latencies.push(
            tune.backhaul_base_s + fog_wait_s(&fog_states[f], mu_eff[f], fog_arr_ema[f], tune),
        );
    }

    let forecast_targets = [lat_ema, lat_ema, lat_ema];
    let plan_costs = DMatrix::from_fn(4, k_plans, |q, k| bundle.costs[q][k]);
    let cost_grad = cloud_state.x.clone();
    let constraint_values = DVector::from_fn(4, |d, _| cloud_state.x[d] - 1.0);
    let constraint_jac = DMatrix::identity(4, 4);

    // Gate samples: outage exposure against the risk margin, and a drift
    // proxy from predicted backlog growth.
    let mut grng = rng::substream(cfg.seed, "sim.gate", coord_idx);
    let n_gate = 8;
    let risk_samples = DMatrix::from_fn(k_plans, n_gate, |k, _| {
        risk[k] - 0.25 + 0.02 * grng.gen_range(-1.0..1.0f64)
    });
    // Drift proxy from the measured backlog and excess arrival rate. It is a
    // function of the observed state (the same for every candidate plan up to
    // sampling noise): the stability gate watches the trajectory rather than
    // duplicating the per-plan feasibility analysis that lives in the caps.
    let measured_growth: f64 = (0..n_fog)
        .map(|z| 0.5 * fog_states[z].backlog_q + (fog_arr_ema[z] - mu_eff[z]).max(0.0))
        .sum();
    let v_base = 0.01 * measured_growth * measured_growth;
    let v_samples = DMatrix::from_fn(k_plans, n_gate, |_, _| {
        v_base + 0.005 * grng.gen_range(-1.0..1.0f64)
    });

    // Distances normalized by the grid extent keep the dispatch cost O(1)
    // at any scale, which the entropic solver's iteration budget assumes.
    // The load term makes dispatch shed work from currently hot sites.
    let extent =
        super::world::BLOCK_M * (world.rows.max(world.cols).saturating_sub(1).max(1)) as f64;
    let dispatch_cost = DMatrix::from_fn(n_fog, n_fog, |f, z| {
        let (fx, fy) = world.fog_sites[f].centroid;
        let (zx, zy) = world.fog_sites[z].centroid;
        let d = ((fx - zx).powi(2) + (fy - zy).powi(2)).sqrt() / extent;
        0.4 * d + 0.2 * fog_util(f, fog_arr_ema, mu_eff).min(1.0)
    });
    let fog_capacity = DVector::from_fn(n_fog, |f, _| mu_eff[f].max(1e-6));
    // Demand marginal per plan: measured zone demand tilted toward the
    // plan's powered sites (a consolidating plan expects its traffic there).
    let region_demand = DMatrix::from_fn(k_plans, n_fog, |k, z| {
        (zone_demand_ema[z] + 1.0e-6) * (0.5 + 0.5 * zone_share(k, z) * n_fog as f64)
    });

    let ctx = CoordinationContext {
        summaries: &summaries,
        variances: &variances,
        latencies: &latencies,
        forecast_targets: &forecast_targets,
        plan_costs: &plan_costs,
        cost_grad: &cost_grad,
        constraint_values: &constraint_values,
        constraint_jac: &constraint_jac,
        risk_samples_per_plan: &risk_samples,
        v_next_samples_per_plan: &v_samples,
        dispatch_cost: &dispatch_cost,
        fog_capacity: &fog_capacity,
        region_demand_per_plan: &region_demand,
        seed: rng::mix(cfg.seed ^ rng::mix(0xC10D ^ coord_idx)),
    };
    let out = cloud::coordinate(cloud_state, &ctx, ccfg)?;
    *cloud_state = out.state;
    Ok((out.plan_index, out.transport.coupling))
}

/// Convenience: build the world and run in one call.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsReport> {
    let world = super::world::build_world(cfg)?;
    run(&world, cfg)
}

/// Maps runtime errors that indicate non-convergence to a distinct class for
/// the front end's exit codes.
pub fn is_runtime_failure(err: &Error) -> bool {
    matches!(
        err,
        Error::NotConverged { .. } | Error::Diverged { .. } | Error::Overload { .. }
    )
}
