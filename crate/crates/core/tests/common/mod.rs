//! Oracles and configurations shared by the integration tests. Nothing here
//! calls into the code under test for the answer it is checking.

#![allow(dead_code)]

use std::path::PathBuf;

use p4qs_core::config::{LatencyProfile, Mobility, SimConfig};
use p4qs_core::geo::GeoPoint;
use p4qs_core::lbs::Poi;
use p4qs_core::overlay::{PeerId, PeerRecord};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Nearest RA by linear scan; ties go to the lower RA, then the lower id.
pub fn brute_force_owner(peers: &[PeerRecord], key: f64) -> PeerId {
    peers
        .iter()
        .min_by(|a, b| {
            let (da, db) = ((a.ra.value() - key).abs(), (b.ra.value() - key).abs());
            da.total_cmp(&db)
                .then(a.ra.value().total_cmp(&b.ra.value()))
                .then(a.peer_id.cmp(&b.peer_id))
        })
        .expect("non-empty overlay")
        .peer_id
}

/// Closed-form ownership probability, evaluated with the geometric series
/// summed in closed form rather than term by term.
pub fn ownership_oracle(t: u32, e: u32, r: u32, n: u32) -> f64 {
    let q = f64::from(t - e) / f64::from(t);
    let g = f64::from(e) / f64::from(t);
    let mut first = 1.0;
    for _ in 0..r {
        first *= q;
    }
    // q + q^2 + ... + q^(r-1)
    let series = if r <= 1 {
        0.0
    } else if (q - 1.0).abs() < f64::EPSILON {
        f64::from(r - 1)
    } else {
        (q - first) / (1.0 - q)
    };
    first + g.powf(f64::from(n)) * series
}

fn planar(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (dx, dy) = (a.lon() - b.lon(), a.lat() - b.lat());
    (dx * dx + dy * dy).sqrt()
}

/// Linear-scan nearest neighbour; equal distances go to the lower id.
pub fn scan_nearest(entries: &[Poi], category: &str, anchor: &GeoPoint) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for (id, p) in entries.iter().enumerate() {
        if p.category != category {
            continue;
        }
        let d = planar(anchor, &p.location);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, id as u32));
        }
    }
    best.map(|(_, id)| id)
}

/// Linear-scan closed-rectangle range query, ids ascending.
pub fn scan_range(entries: &[Poi], category: &str, x1: f64, y1: f64, x2: f64, y2: f64) -> Vec<u32> {
    entries
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (lon, lat) = (p.location.lon(), p.location.lat());
            p.category == category && x1 <= lon && lon <= x2 && y1 <= lat && lat <= y2
        })
        .map(|(id, _)| id as u32)
        .collect()
}

/// 50 peers, 50 clients issuing exactly 10,000 queries. One ticket batch
/// lasts the whole run so pools never run dry.
pub fn bulk_config(seed: u64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.name = "bulk".into();
    cfg.seed = seed;
    cfg.peers = 50;
    cfg.k = 4;
    cfg.workload.clients = 50;
    cfg.workload.max_queries = 10_000;
    cfg.workload.mean_interval_ms = 5_000;
    cfg.horizon_ms = 1_200_000;
    cfg.tickets.batch_size = 300;
    cfg.tickets.exchanged_per_round = 30;
    cfg.tickets.rounds = 3;
    cfg.tickets.period_ms = 1_200_000;
    cfg.tickets.validity_ms = 1_300_000;
    cfg
}

/// Sparse queries spread over the whole map, so windows rarely fill before
/// the wait expires. Each client waits at least 10 s between queries, so it
/// never has two in the same window. Long ticket periods keep the run short.
pub fn latency_config(profile: LatencyProfile, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.name = format!("latency-{profile:?}").to_lowercase();
    cfg.seed = seed;
    cfg.t_wait_ms = 5_000;
    cfg.k = 4;
    cfg.latency.profile = profile;
    cfg.workload.clients = 20;
    cfg.workload.area = [-180.0, -90.0, 180.0, 90.0];
    cfg.workload.mean_interval_ms = 600_000;
    cfg.workload.min_gap_ms = 10_000;
    cfg.workload.mobility = Mobility::Static;
    cfg.horizon_ms = 3_600_000;
    cfg.tickets.period_ms = 600_000;
    cfg.tickets.validity_ms = 600_000;
    cfg
}

/// Small, fast run used where only the mechanics matter.
pub fn small_config(seed: u64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.name = "small".into();
    cfg.seed = seed;
    cfg.peers = 20;
    cfg.workload.clients = 10;
    cfg.workload.mean_interval_ms = 15_000;
    cfg.horizon_ms = 180_000;
    cfg
}

/// Every query comes from one small neighbourhood, so a single anonymizer
/// sees all of them and trips the overload threshold.
pub fn overload_config(seed: u64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.name = "overload".into();
    cfg.seed = seed;
    cfg.peers = 30;
    cfg.workload.clients = 30;
    cfg.workload.area = [13.40, 52.51, 13.401, 52.511];
    cfg.workload.mean_interval_ms = 10_000;
    cfg.horizon_ms = 240_000;
    cfg.overload_threshold = Some(6);
    cfg
}
