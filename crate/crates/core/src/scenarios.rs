//! Named scenario presets, the link attacks an adversarial LBS can mount,
//! and the privacy report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{Mobility, Protocol, SimConfig};
use crate::envelope::TokenKey;
use crate::lbs::{AdversaryLog, MemberRecord};
use crate::message::CloakRegion;
use crate::overlay::PeerId;
use crate::simnet::{km_between, simulate, SimError, SimOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// Pedestrians moving slowly around a city.
    Pm,
    /// Vehicles, with a 100 m minimum cloak.
    Dcm,
    /// Vehicles repeatedly looking for fuel along their route.
    Rm,
    /// A dense crowd querying the same thing over and over.
    Dusq,
    /// Cars on a short highway stretch, some of them speeding.
    Dusw,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Pm, Preset::Dcm, Preset::Rm, Preset::Dusq, Preset::Dusw];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Pm => "PM",
            Preset::Dcm => "DCM",
            Preset::Rm => "RM",
            Preset::Dusq => "DUSQ",
            Preset::Dusw => "DUSW",
        }
    }

    pub fn config(self, seed: u64) -> SimConfig {
        let mut cfg = SimConfig {
            name: self.name().into(),
            seed,
            ..SimConfig::default()
        };
        let w = &mut cfg.workload;
        match self {
            Preset::Pm => {
                w.clients = 30;
                w.mean_interval_ms = 30_000;
                w.mobility = Mobility::Waypoint {
                    min_kmh: 3.0,
                    max_kmh: 6.0,
                };
                w.queries = vec!["nearest:cafe".into(), "nearest:restaurant".into(), "range:pharmacy".into()];
            }
            Preset::Dcm => {
                cfg.min_cloak_side_deg = 0.001;
                w.clients = 30;
                w.mean_interval_ms = 20_000;
                w.mobility = Mobility::Waypoint {
                    min_kmh: 20.0,
                    max_kmh: 60.0,
                };
                w.queries = vec!["nearest:parking".into(), "nearest:hotel".into(), "range:restaurant".into()];
            }
            Preset::Rm => {
                w.clients = 30;
                w.mean_interval_ms = 30_000;
                w.mobility = Mobility::Waypoint {
                    min_kmh: 30.0,
                    max_kmh: 80.0,
                };
                w.queries = vec!["nearest:fuel".into()];
            }
            Preset::Dusq => {
                cfg.peers = 40;
                w.clients = 40;
                w.mean_interval_ms = 30_000;
                w.area = [13.40, 52.51, 13.41, 52.515];
                w.mobility = Mobility::Static;
                w.queries = vec!["nearest:restaurant".into()];
            }
            Preset::Dusw => {
                cfg.horizon_ms = 1_400_000;
                w.clients = 30;
                w.stagger_ms = 45_000;
                w.mobility = Mobility::Highway {
                    lon: 13.40,
                    lat: 52.46,
                    length_km: 1.0,
                    min_kmh: 80.0,
                    max_kmh: 140.0,
                };
                w.queries = vec!["nearest:fuel".into(), "nearest:restaurant".into()];
                w.speed_limit_kmh = Some(120.0);
            }
        }
        cfg
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown preset `{s}` (expected PM, DCM, RM, DUSQ or DUSW)"))
    }
}

/// One accepted query as the LBS saw it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub token: TokenKey,
    pub region: CloakRegion,
    pub batch: usize,
}

/// Accepted members in the order the LBS received them.
pub fn observations(log: &AdversaryLog) -> Vec<Observation> {
    let mut out = Vec::new();
    for (batch, b) in log.batches.iter().enumerate() {
        for m in &b.members {
            if let MemberRecord::Accepted { token, .. } = m {
                out.push(Observation {
                    token: TokenKey::from(*token),
                    region: b.region,
                    batch,
                });
            }
        }
    }
    out
}

/// For each position, the next later position with the same label.
fn next_same_label(labels: &[Option<PeerId>]) -> Vec<Option<usize>> {
    let mut seen: HashMap<PeerId, usize> = HashMap::new();
    let mut out = vec![None; labels.len()];
    for i in (0..labels.len()).rev() {
        if let Some(l) = labels[i] {
            out[i] = seen.get(&l).copied();
            seen.insert(l, i);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkStrategy {
    /// Attribute each token to the peer it was issued to and chain queries
    /// attributed to the same peer.
    TokenLedger,
    /// Chain each query to the earliest later query its sender could have
    /// reached, nearest region first.
    Spatiotemporal { max_speed_kmh: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Linkage {
    /// True consecutive pairs, i.e. queries whose sender made another one.
    pub pairs: usize,
    pub correct: usize,
}

impl Linkage {
    pub fn accuracy(&self) -> Option<f64> {
        (self.pairs > 0).then(|| self.correct as f64 / self.pairs as f64)
    }
}

fn spatiotemporal_proposals(obs: &[Observation], max_speed_kmh: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; obs.len()];
    for (i, o) in obs.iter().enumerate() {
        let from = o.region.centroid();
        let mut best: Option<(f64, usize)> = None;
        let mut current_batch = None;
        for (j, p) in obs.iter().enumerate().skip(i + 1) {
            if p.batch == o.batch {
                continue;
            }
            if best.is_some() && current_batch != Some(p.batch) {
                break;
            }
            let hours = p.region.t2.saturating_sub(o.region.t2) as f64 / 3_600_000.0;
            let d = km_between(from, p.region.centroid());
            if d <= max_speed_kmh * hours && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
                current_batch = Some(p.batch);
            }
        }
        out[i] = best.map(|(_, j)| j);
    }
    out
}

fn proposals(log: &AdversaryLog, obs: &[Observation], strategy: LinkStrategy) -> Vec<Option<usize>> {
    match strategy {
        LinkStrategy::TokenLedger => {
            let labels: Vec<Option<PeerId>> = obs.iter().map(|o| log.issuance.get(&o.token).copied()).collect();
            next_same_label(&labels)
        }
        LinkStrategy::Spatiotemporal { max_speed_kmh } => spatiotemporal_proposals(obs, max_speed_kmh),
    }
}

fn truth_next(obs: &[Observation], spenders: &HashMap<TokenKey, PeerId>) -> Vec<Option<usize>> {
    let labels: Vec<Option<PeerId>> = obs.iter().map(|o| spenders.get(&o.token).copied()).collect();
    next_same_label(&labels)
}

/// How many of the true consecutive pairs (same spender, next accepted
/// query) the strategy chains correctly.
pub fn link_attack(log: &AdversaryLog, strategy: LinkStrategy, spenders: &HashMap<TokenKey, PeerId>) -> Linkage {
    let obs = observations(log);
    let truth = truth_next(&obs, spenders);
    let guess = proposals(log, &obs, strategy);
    let mut l = Linkage::default();
    for (t, g) in truth.iter().zip(&guess) {
        if let Some(t) = t {
            l.pairs += 1;
            if *g == Some(*t) {
                l.correct += 1;
            }
        }
    }
    l
}

/// Fraction of speeders the ledger adversary catches: a correctly chained
/// pair of one speeder's queries whose regions imply more than `limit_kmh`.
pub fn speed_inference(outcome: &SimOutcome, limit_kmh: f64) -> (usize, Option<f64>) {
    let mut per_client: BTreeMap<PeerId, (usize, f64)> = BTreeMap::new();
    for q in &outcome.planned {
        let e = per_client.entry(q.client).or_insert((0, q.speed_kmh));
        e.0 += 1;
    }
    let speeders: BTreeSet<PeerId> = per_client
        .iter()
        .filter(|(_, (n, v))| *n >= 2 && *v > limit_kmh)
        .map(|(c, _)| *c)
        .collect();
    if speeders.is_empty() {
        return (0, None);
    }
    let spenders = outcome.spenders();
    let obs = observations(&outcome.adversary);
    let truth = truth_next(&obs, &spenders);
    let guess = proposals(&outcome.adversary, &obs, LinkStrategy::TokenLedger);
    let mut caught = BTreeSet::new();
    for i in 0..obs.len() {
        let (Some(t), Some(g)) = (truth[i], guess[i]) else {
            continue;
        };
        let Some(&who) = spenders.get(&obs[i].token) else {
            continue;
        };
        if t != g || !speeders.contains(&who) {
            continue;
        }
        let (a, b) = (obs[i].region, obs[g].region);
        let hours = (b.t1 + b.t2).saturating_sub(a.t1 + a.t2) as f64 / 2.0 / 3_600_000.0;
        if hours > 0.0 && km_between(a.centroid(), b.centroid()) / hours > limit_kmh {
            caught.insert(who);
        }
    }
    (speeders.len(), Some(caught.len() as f64 / speeders.len() as f64))
}

/// Mean posterior the ledger adversary puts on each accepted query's true
/// sender: `p` on the issuer, the rest spread evenly over the other peers.
pub fn sender_posterior(log: &AdversaryLog, spenders: &HashMap<TokenKey, PeerId>, p: f64, peers: usize) -> Option<f64> {
    let obs = observations(log);
    if obs.is_empty() {
        return None;
    }
    if peers <= 1 {
        return Some(1.0);
    }
    let other = (1.0 - p) / (peers - 1) as f64;
    let total: f64 = obs
        .iter()
        .map(|o| if log.issuance.get(&o.token) == spenders.get(&o.token) { p } else { other })
        .sum();
    Some(total / obs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub scenario: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub peers: usize,
    pub k: usize,
    pub t_wait_ms: u64,
    pub queries_planned: u64,
    pub queries_completed: u64,
    pub queries_failed: u64,
    pub deferrals: u64,
    pub retries: u64,
    pub latency_mean_ms: Option<f64>,
    pub latency_p50_ms: Option<u64>,
    pub latency_p95_ms: Option<u64>,
    pub latency_max_ms: Option<u64>,
    pub batches: u64,
    pub min_anonymity_set: Option<usize>,
    /// Batch size to share of batches.
    pub anonymity_distribution: BTreeMap<usize, f64>,
    pub fake_members: u64,
    pub rejected_members: u64,
    pub ownership_analytic: f64,
    pub ownership_empirical: Option<f64>,
    pub ledger_attribution: Option<f64>,
    pub linkage_accuracy: Option<f64>,
    pub spatiotemporal_linkage: Option<f64>,
    pub sender_posterior: Option<f64>,
    pub speeders: u64,
    pub speed_inference_rate: Option<f64>,
    pub overloads: u64,
    pub reforwarded: u64,
    pub collab_handoffs: u64,
    pub non_deliveries: u64,
    pub revocations: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub trace_digest: String,
}

fn percentile(sorted: &[u64], q: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

impl PrivacyReport {
    pub fn from_outcome(o: &SimOutcome) -> Self {
        let cfg = &o.config;
        let spenders = o.spenders();
        let mut lat: Vec<u64> = o.metrics.iter().flat_map(|m| m.latencies.iter().map(|(_, l)| *l)).collect();
        lat.sort_unstable();
        let sizes: Vec<usize> = o.lbs_batch_sizes().collect();
        let mut dist = BTreeMap::new();
        for &s in &sizes {
            *dist.entry(s).or_insert(0.0) += 1.0;
        }
        for v in dist.values_mut() {
            *v /= sizes.len() as f64;
        }
        let fractions: Vec<f64> = o.metrics.iter().flat_map(|m| m.own_fraction.iter().copied()).collect();
        let obs = observations(&o.adversary);
        let attributed = obs
            .iter()
            .filter(|ob| o.adversary.issuance.get(&ob.token) == spenders.get(&ob.token))
            .count();
        let (speeders, speed_rate) = match cfg.workload.speed_limit_kmh {
            Some(limit) => speed_inference(o, limit),
            None => (0, None),
        };
        let spatio = LinkStrategy::Spatiotemporal {
            max_speed_kmh: cfg.adversary.max_speed_kmh,
        };
        Self {
            scenario: cfg.name.clone(),
            protocol: cfg.protocol,
            seed: cfg.seed,
            peers: cfg.peers,
            k: cfg.k,
            t_wait_ms: cfg.t_wait_ms,
            queries_planned: o.planned.len() as u64,
            queries_completed: o.total(|m| m.completed),
            queries_failed: o.total(|m| m.failed),
            deferrals: o.total(|m| m.deferrals),
            retries: o.total(|m| m.retries),
            latency_mean_ms: (!lat.is_empty()).then(|| lat.iter().sum::<u64>() as f64 / lat.len() as f64),
            latency_p50_ms: percentile(&lat, 0.5),
            latency_p95_ms: percentile(&lat, 0.95),
            latency_max_ms: lat.last().copied(),
            batches: sizes.len() as u64,
            min_anonymity_set: sizes.iter().copied().min(),
            anonymity_distribution: dist,
            fake_members: o.metrics.iter().map(|m| m.batches.iter().map(|b| b.fakes as u64).sum::<u64>()).sum(),
            rejected_members: o.adversary.rejections().count() as u64,
            ownership_analytic: o.ownership_analytic,
            ownership_empirical: (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
            ledger_attribution: (!obs.is_empty()).then(|| attributed as f64 / obs.len() as f64),
            linkage_accuracy: link_attack(&o.adversary, LinkStrategy::TokenLedger, &spenders).accuracy(),
            spatiotemporal_linkage: link_attack(&o.adversary, spatio, &spenders).accuracy(),
            sender_posterior: sender_posterior(&o.adversary, &spenders, o.ownership_analytic, cfg.peers),
            speeders: speeders as u64,
            speed_inference_rate: speed_rate,
            overloads: o.total(|m| m.overloads),
            reforwarded: o.total(|m| m.reforwarded),
            collab_handoffs: o.total(|m| m.handed_in),
            non_deliveries: o.total(|m| m.non_deliveries),
            revocations: o.total(|m| m.revoked.len() as u64),
            messages_sent: o.net.sent,
            messages_dropped: o.net.dropped(),
            trace_digest: o.trace_digest.clone(),
        }
    }

    pub const CSV_HEADER: [&'static str; 36] = [
        "scenario",
        "protocol",
        "seed",
        "peers",
        "k",
        "t_wait_ms",
        "queries_planned",
        "queries_completed",
        "queries_failed",
        "deferrals",
        "retries",
        "latency_mean_ms",
        "latency_p50_ms",
        "latency_p95_ms",
        "latency_max_ms",
        "batches",
        "min_anonymity_set",
        "anonymity_distribution",
        "fake_members",
        "rejected_members",
        "ownership_analytic",
        "ownership_empirical",
        "ledger_attribution",
        "linkage_accuracy",
        "spatiotemporal_linkage",
        "sender_posterior",
        "speeders",
        "speed_inference_rate",
        "overloads",
        "reforwarded",
        "collab_handoffs",
        "non_deliveries",
        "revocations",
        "messages_sent",
        "messages_dropped",
        "trace_digest",
    ];

    fn csv_row(&self) -> Vec<String> {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let dist = self
            .anonymity_distribution
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect::<Vec<_>>()
            .join(";");
        let protocol = match self.protocol {
            Protocol::P4qs => "p4qs",
            Protocol::Pseudonym => "pseudonym",
        };
        vec![
            self.scenario.clone(),
            protocol.into(),
            self.seed.to_string(),
            self.peers.to_string(),
            self.k.to_string(),
            self.t_wait_ms.to_string(),
            self.queries_planned.to_string(),
            self.queries_completed.to_string(),
            self.queries_failed.to_string(),
            self.deferrals.to_string(),
            self.retries.to_string(),
            opt(self.latency_mean_ms),
            opt(self.latency_p50_ms),
            opt(self.latency_p95_ms),
            opt(self.latency_max_ms),
            self.batches.to_string(),
            opt(self.min_anonymity_set),
            dist,
            self.fake_members.to_string(),
            self.rejected_members.to_string(),
            self.ownership_analytic.to_string(),
            opt(self.ownership_empirical),
            opt(self.ledger_attribution),
            opt(self.linkage_accuracy),
            opt(self.spatiotemporal_linkage),
            opt(self.sender_posterior),
            self.speeders.to_string(),
            opt(self.speed_inference_rate),
            self.overloads.to_string(),
            self.reforwarded.to_string(),
            self.collab_handoffs.to_string(),
            self.non_deliveries.to_string(),
            self.revocations.to_string(),
            self.messages_sent.to_string(),
            self.messages_dropped.to_string(),
            self.trace_digest.clone(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    #[default]
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

/// Serializes reports with a fixed field order: CSV is a header plus one row
/// per report, JSON an array.
pub fn emit_report(reports: &[PrivacyReport], format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(reports).expect("reports serialize");
            out.push(b'\n');
            out
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(PrivacyReport::CSV_HEADER).expect("in-memory write");
            for r in reports {
                w.write_record(r.csv_row()).expect("in-memory write");
            }
            w.into_inner().expect("in-memory flush")
        }
    }
}

/// Runs a configuration and derives its report.
pub fn run_scenario(cfg: SimConfig) -> Result<(SimOutcome, PrivacyReport), SimError> {
    let outcome = simulate(cfg)?;
    let report = PrivacyReport::from_outcome(&outcome);
    Ok((outcome, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lbs::BatchRecord;
    use crate::geo::RingCoord;
    use crate::overlay::Address;

    fn region(lon: f64, t: u64) -> CloakRegion {
        CloakRegion {
            x1: lon,
            y1: 52.5,
            x2: lon + 0.001,
            y2: 52.501,
            t1: t,
            t2: t,
        }
    }

    fn log_of(batches: &[(f64, u64, &[f64])], issuance: &[(f64, u32)]) -> AdversaryLog {
        AdversaryLog {
            batches: batches
                .iter()
                .map(|(lon, t, tokens)| BatchRecord {
                    received_ms: *t,
                    anonymizer: Address::new("a"),
                    region: region(*lon, *t),
                    members: tokens
                        .iter()
                        .map(|tok| MemberRecord::Accepted {
                            token: RingCoord::new(*tok).unwrap(),
                            query_text: String::new(),
                            broker: Address::new("b"),
                        })
                        .collect(),
                })
                .collect(),
            issuance: issuance
                .iter()
                .map(|(t, p)| (TokenKey::from(RingCoord::new(*t).unwrap()), PeerId(*p)))
                .collect(),
        }
    }

    fn truth(pairs: &[(f64, u32)]) -> HashMap<TokenKey, PeerId> {
        pairs
            .iter()
            .map(|(t, p)| (TokenKey::from(RingCoord::new(*t).unwrap()), PeerId(*p)))
            .collect()
    }

    #[test]
    fn presets_parse_case_insensitively() {
        for p in Preset::ALL {
            assert_eq!(p.name().to_lowercase().parse::<Preset>().unwrap(), p);
            p.config(1).validate().unwrap();
        }
        assert!("XYZ".parse::<Preset>().is_err());
    }

    #[test]
    fn undiluted_ledger_links_everything() {
        let log = log_of(&[(13.4, 0, &[1.0, 2.0]), (13.4, 10_000, &[3.0, 4.0])], &[(1.0, 0), (2.0, 1), (3.0, 0), (4.0, 1)]);
        let spenders = truth(&[(1.0, 0), (2.0, 1), (3.0, 0), (4.0, 1)]);
        let l = link_attack(&log, LinkStrategy::TokenLedger, &spenders);
        assert_eq!((l.pairs, l.correct), (2, 2));
    }

    #[test]
    fn swapped_ledger_links_nothing() {
        let log = log_of(&[(13.4, 0, &[1.0, 2.0]), (13.4, 10_000, &[3.0, 4.0])], &[(1.0, 0), (2.0, 1), (3.0, 1), (4.0, 0)]);
        let spenders = truth(&[(1.0, 0), (2.0, 1), (3.0, 0), (4.0, 1)]);
        assert_eq!(link_attack(&log, LinkStrategy::TokenLedger, &spenders).accuracy(), Some(0.0));
    }

    #[test]
    fn single_client_spatiotemporal_is_exact() {
        let log = log_of(&[(13.40, 0, &[1.0]), (13.41, 60_000, &[2.0]), (13.42, 120_000, &[3.0])], &[]);
        let spenders = truth(&[(1.0, 0), (2.0, 0), (3.0, 0)]);
        let s = LinkStrategy::Spatiotemporal { max_speed_kmh: 200.0 };
        assert_eq!(link_attack(&log, s, &spenders).accuracy(), Some(1.0));
    }

    #[test]
    fn spatiotemporal_skips_unreachable_regions() {
        // 0.5 degrees of longitude is ~34 km; unreachable in 60 s at 200 km/h.
        let log = log_of(&[(13.4, 0, &[1.0]), (13.9, 60_000, &[2.0]), (13.41, 120_000, &[3.0])], &[]);
        let spenders = truth(&[(1.0, 0), (2.0, 1), (3.0, 0)]);
        let s = LinkStrategy::Spatiotemporal { max_speed_kmh: 200.0 };
        assert_eq!(link_attack(&log, s, &spenders).accuracy(), Some(1.0));
    }

    #[test]
    fn posterior_weights() {
        let log = log_of(&[(13.4, 0, &[1.0, 2.0])], &[(1.0, 0), (2.0, 0)]);
        let spenders = truth(&[(1.0, 0), (2.0, 1)]);
        let p = sender_posterior(&log, &spenders, 0.5, 11).unwrap();
        assert!((p - (0.5 + 0.05) / 2.0).abs() < 1e-12);
        assert_eq!(sender_posterior(&AdversaryLog::default(), &spenders, 0.5, 11), None);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert_eq!(percentile(&v, 0.5), Some(5));
        assert_eq!(percentile(&v, 0.95), Some(10));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
