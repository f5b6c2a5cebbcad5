//! Simulation configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::peer::Fault;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    fn invalid(key: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    P4qs,
    /// One long-lived ticket per peer, reused for every query.
    Pseudonym,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LatencyProfile {
    Local,
    Internet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub profile: LatencyProfile,
    /// Overrides the profile's per-hop base delay.
    pub base_ms: Option<u64>,
    /// Overrides the profile's maximum per-hop jitter.
    pub jitter_ms: Option<u64>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            profile: LatencyProfile::Local,
            base_ms: None,
            jitter_ms: None,
        }
    }
}

impl LatencyConfig {
    pub fn per_hop(&self) -> (u64, u64) {
        let (base, jitter) = match self.profile {
            LatencyProfile::Local => (1, 2),
            LatencyProfile::Internet => (20, 60),
        };
        (self.base_ms.unwrap_or(base), self.jitter_ms.unwrap_or(jitter))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TicketConfig {
    pub batch_size: usize,
    pub exchanged_per_round: usize,
    pub rounds: u32,
    pub round_interval_ms: u64,
    pub period_ms: u64,
    pub validity_ms: u64,
    pub trust_threshold: u32,
}

impl Default for TicketConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            exchanged_per_round: 10,
            rounds: 5,
            round_interval_ms: 200,
            period_ms: 60_000,
            validity_ms: 60_000,
            trust_threshold: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mobility {
    /// Clients stay where they start.
    Static,
    /// Random waypoints inside the area.
    Waypoint { min_kmh: f64, max_kmh: f64 },
    /// Clients drive north along a straight road starting at `(lon, lat)`,
    /// querying once on entry and once on exit.
    Highway {
        lon: f64,
        lat: f64,
        length_km: f64,
        min_kmh: f64,
        max_kmh: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// The first `clients` peers issue queries.
    pub clients: usize,
    /// Stop after this many queries in total; 0 means no cap.
    pub max_queries: usize,
    pub mean_interval_ms: u64,
    /// Shortest gap between one client's consecutive queries (think time).
    pub min_gap_ms: u64,
    pub start_ms: u64,
    /// Delay between consecutive clients' first queries.
    pub stagger_ms: u64,
    /// `[lon1, lat1, lon2, lat2]`
    pub area: [f64; 4],
    pub mobility: Mobility,
    pub queries: Vec<String>,
    pub speed_limit_kmh: Option<f64>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            max_queries: 0,
            mean_interval_ms: 20_000,
            min_gap_ms: 0,
            start_ms: 2_000,
            stagger_ms: 0,
            area: [13.30, 52.45, 13.50, 52.55],
            mobility: Mobility::Static,
            queries: vec!["nearest:restaurant".into(), "range:cafe".into()],
            speed_limit_kmh: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnAction {
    Leave,
    Join,
    Rejoin,
    NonCooperative,
    Cooperative,
    InjectInvalid,
    Honest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnEvent {
    pub at_ms: u64,
    pub peer: u32,
    pub action: ChurnAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoiConfig {
    pub seed: u64,
    pub count: usize,
}

impl Default for PoiConfig {
    fn default() -> Self {
        Self { seed: 7, count: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    /// Fastest plausible movement for spatiotemporal linking.
    pub max_speed_kmh: f64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self { max_speed_kmh: 200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub name: String,
    pub seed: u64,
    pub peers: usize,
    pub k: usize,
    pub t_wait_ms: u64,
    pub min_cloak_side_deg: f64,
    pub horizon_ms: u64,
    pub protocol: Protocol,
    pub collaboration: bool,
    pub collab_timeout_ms: u64,
    pub broker_timeout_ms: Option<u64>,
    pub client_timeout_ms: Option<u64>,
    pub ticket_margin_ms: Option<u64>,
    pub retry_limit: u32,
    pub overload_threshold: Option<usize>,
    pub fault: Option<Fault>,
    pub trace_path: Option<String>,
    pub tickets: TicketConfig,
    pub latency: LatencyConfig,
    pub workload: WorkloadConfig,
    pub churn: Vec<ChurnEvent>,
    pub poi: PoiConfig,
    pub adversary: AdversaryConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 1,
            peers: 50,
            k: 4,
            t_wait_ms: 5000,
            min_cloak_side_deg: 0.01,
            horizon_ms: 600_000,
            protocol: Protocol::P4qs,
            collaboration: true,
            collab_timeout_ms: 1000,
            broker_timeout_ms: None,
            client_timeout_ms: None,
            ticket_margin_ms: None,
            retry_limit: 2,
            overload_threshold: None,
            fault: None,
            trace_path: None,
            tickets: TicketConfig::default(),
            latency: LatencyConfig::default(),
            workload: WorkloadConfig::default(),
            churn: Vec::new(),
            poi: PoiConfig::default(),
            adversary: AdversaryConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn broker_timeout(&self) -> u64 {
        self.broker_timeout_ms.unwrap_or(3 * self.t_wait_ms)
    }

    pub fn client_timeout(&self) -> u64 {
        self.client_timeout_ms.unwrap_or(5 * self.t_wait_ms)
    }

    pub fn ticket_margin(&self) -> u64 {
        self.ticket_margin_ms.unwrap_or(self.t_wait_ms + self.collab_timeout_ms + 1000)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.peers == 0 {
            return Err(ConfigError::invalid("peers", "need at least one peer"));
        }
        if self.k == 0 {
            return Err(ConfigError::invalid("k", "must be at least 1"));
        }
        if self.t_wait_ms == 0 {
            return Err(ConfigError::invalid("t_wait_ms", "must be positive"));
        }
        if !(self.min_cloak_side_deg.is_finite() && self.min_cloak_side_deg >= 0.0) {
            return Err(ConfigError::invalid("min_cloak_side_deg", "must be a non-negative number"));
        }
        if self.overload_threshold == Some(0) {
            return Err(ConfigError::invalid("overload_threshold", "must be positive"));
        }
        let t = &self.tickets;
        if t.batch_size == 0 {
            return Err(ConfigError::invalid("tickets.batch_size", "must be positive"));
        }
        if t.exchanged_per_round > t.batch_size {
            return Err(ConfigError::invalid(
                "tickets.exchanged_per_round",
                format!("{} exceeds tickets.batch_size {}", t.exchanged_per_round, t.batch_size),
            ));
        }
        if t.period_ms == 0 {
            return Err(ConfigError::invalid("tickets.period_ms", "must be positive"));
        }
        if t.validity_ms == 0 {
            return Err(ConfigError::invalid("tickets.validity_ms", "must be positive"));
        }
        if t.trust_threshold == 0 {
            return Err(ConfigError::invalid("tickets.trust_threshold", "must be positive"));
        }
        let w = &self.workload;
        if w.clients > self.peers {
            return Err(ConfigError::invalid(
                "workload.clients",
                format!("{} exceeds peers {}", w.clients, self.peers),
            ));
        }
        if w.mean_interval_ms == 0 {
            return Err(ConfigError::invalid("workload.mean_interval_ms", "must be positive"));
        }
        let [x1, y1, x2, y2] = w.area;
        if !(x1 <= x2 && y1 <= y2 && x1 >= -180.0 && x2 <= 180.0 && y1 >= -90.0 && y2 <= 90.0) {
            return Err(ConfigError::invalid("workload.area", "need lon1 <= lon2 and lat1 <= lat2 on the map"));
        }
        if w.queries.is_empty() {
            return Err(ConfigError::invalid("workload.queries", "need at least one query text"));
        }
        match w.mobility {
            Mobility::Static => {}
            Mobility::Waypoint { min_kmh, max_kmh } | Mobility::Highway { min_kmh, max_kmh, .. } => {
                if !(min_kmh > 0.0 && min_kmh <= max_kmh) {
                    return Err(ConfigError::invalid("workload.mobility", "need 0 < min_kmh <= max_kmh"));
                }
            }
        }
        if let Mobility::Highway { length_km, .. } = w.mobility {
            if length_km <= 0.0 {
                return Err(ConfigError::invalid("workload.mobility.length_km", "must be positive"));
            }
        }
        for (i, c) in self.churn.iter().enumerate() {
            if c.peer as usize >= self.peers {
                return Err(ConfigError::invalid(&format!("churn[{i}].peer"), format!("no peer {}", c.peer)));
            }
        }
        if self.adversary.max_speed_kmh <= 0.0 {
            return Err(ConfigError::invalid("adversary.max_speed_kmh", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = SimConfig::default();
        assert_eq!(SimConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = SimConfig::from_toml("kk = 3").unwrap_err().to_string();
        assert!(err.contains("kk"), "{err}");
        let err = SimConfig::from_toml("[tickets]\nbatch = 3").unwrap_err().to_string();
        assert!(err.contains("batch"), "{err}");
    }

    #[test]
    fn bad_value_is_named() {
        let err = SimConfig::from_toml("k = 0").unwrap_err().to_string();
        assert!(err.contains("`k`"), "{err}");
        let err = SimConfig::from_toml("[tickets]\nbatch_size = 4\nexchanged_per_round = 5").unwrap_err();
        assert!(err.to_string().contains("tickets.exchanged_per_round"), "{err}");
        let err = SimConfig::from_toml("k = \"four\"").unwrap_err().to_string();
        assert!(err.contains('k'), "{err}");
    }

    #[test]
    fn mobility_and_churn_parse() {
        let cfg = SimConfig::from_toml(
            r#"
            [workload.mobility]
            kind = "waypoint"
            min_kmh = 3.0
            max_kmh = 6.0

            [[churn]]
            at_ms = 100
            peer = 3
            action = "non_cooperative"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.churn[0].action, ChurnAction::NonCooperative);
        assert!(matches!(cfg.workload.mobility, Mobility::Waypoint { .. }));
    }
}
