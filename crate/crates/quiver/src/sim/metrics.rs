//! Run metrics: the report schema, its zero-traffic conventions, and stable
//! CSV/JSON emitters.
//!
//! Conventions when there is nothing to measure: mean latency and average
//! travel time are absent (`null` in JSON, empty cell in CSV) when no packet
//! was delivered / no trip completed; delivery ratio and reliability are
//! vacuously 100 when nothing was sent / no path was monitored; the
//! congestion index is 0 when no edge carries flow.

use serde::{Deserialize, Serialize};

/// Exact packet bookkeeping; `sent = delivered + dropped + in_flight_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PacketCounts {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Packets still buffered when the run ended (the synchronous delivery
    /// model resolves every packet in its generation tick, so this is zero;
    /// it is reported so the conservation identity is explicit).
    pub in_flight_end: u64,
    pub trips_completed: u64,
}

/// Per-traffic-tick time series (one entry per traffic tick).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricSeries {
    pub t_s: Vec<f64>,
    /// Mean latency of packets delivered during the tick; absent when none.
    pub latency_ms: Vec<Option<f64>>,
    /// Delivery ratio over packets sent during the tick; vacuously 100.
    pub pdr_pct: Vec<f64>,
    /// Fraction of monitored paths meeting the SLO during the tick.
    pub reliability_pct: Vec<f64>,
    /// Cumulative mean travel time of completed trips; absent until the
    /// first completion.
    pub att_min: Vec<Option<f64>>,
    /// Instantaneous share of edges at or above the congestion threshold.
    pub nci_pct: Vec<f64>,
}

/// Everything one run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean end-to-end latency over delivered packets only (ms).
    pub mean_latency_ms: Option<f64>,
    /// Delivered / sent, in percent (retransmissions count toward the
    /// original packet, so a packet delivered on a retry is one delivery).
    pub pdr_pct: f64,
    /// Percent of monitored path-ticks meeting the latency/rate SLO.
    pub reliability_pct: f64,
    /// Mean completed-trip duration (min).
    pub att_min: Option<f64>,
    /// Percent of edges with flow/capacity at or above 0.85, averaged over
    /// traffic ticks.
    pub nci_pct: f64,
    pub counts: PacketCounts,
    pub series: MetricSeries,
}

impl MetricsReport {
    /// Column header for `summary_row`.
    pub const SUMMARY_HEADER: &'static str = "mean_latency_ms,pdr_pct,reliability_pct,att_min,\
                                              nci_pct,packets_sent,packets_delivered,\
                                              packets_dropped,in_flight_end,trips_completed";

    /// One CSV row of the headline numbers (absent values are empty cells).
    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            opt_cell(self.mean_latency_ms),
            self.pdr_pct,
            self.reliability_pct,
            opt_cell(self.att_min),
            self.nci_pct,
            self.counts.sent,
            self.counts.delivered,
            self.counts.dropped,
            self.counts.in_flight_end,
            self.counts.trips_completed,
        )
    }

    /// Full per-tick series as CSV (header + one row per traffic tick).
    pub fn series_csv(&self) -> String {
        let s = &self.series;
        let mut out =
            String::from("t_s,latency_ms,pdr_pct,reliability_pct,att_min,nci_pct\n");
        for i in 0..s.t_s.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.t_s[i],
                opt_cell(s.latency_ms[i]),
                s.pdr_pct[i],
                s.reliability_pct[i],
                opt_cell(s.att_min[i]),
                s.nci_pct[i],
            ));
        }
        out
    }

    /// The full nested report as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    /// Checks the documented invariants; returns every violation found.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let c = &self.counts;
        if c.delivered + c.dropped + c.in_flight_end != c.sent {
            v.push(format!(
                "packet conservation violated: {} + {} + {} != {}",
                c.delivered, c.dropped, c.in_flight_end, c.sent
            ));
        }
        for (name, x) in [
            ("pdr_pct", self.pdr_pct),
            ("reliability_pct", self.reliability_pct),
            ("nci_pct", self.nci_pct),
        ] {
            if !(0.0..=100.0).contains(&x) {
                v.push(format!("{name} out of [0, 100]: {x}"));
            }
        }
        if let Some(l) = self.mean_latency_ms {
            if !(l >= 0.0) || !l.is_finite() {
                v.push(format!("mean_latency_ms invalid: {l}"));
            }
        }
        v
    }
}

fn opt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}
