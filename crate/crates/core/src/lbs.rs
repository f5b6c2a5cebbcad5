//! The location-based server: opens batched queries, enforces single use of
//! tickets, answers against a point-of-interest store and routes sealed
//! responses to brokers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{format_real, parse_real};
use crate::crypto::ServerKeyPair;
use crate::envelope::{open_sealed, EnvelopeError, ResponseEnvelope, Ticket, TicketError, TokenKey};
use crate::geo::{GeoPoint, RingCoord};
use crate::message::{AnonymizedBatch, CloakRegion};
use crate::overlay::{Address, OverlayDirectory, PeerId};
use crate::tickets::{TicketIssuer, TicketsError};

pub const POI_CATEGORIES: [&str; 8] = [
    "restaurant",
    "cafe",
    "hospital",
    "fuel",
    "pharmacy",
    "school",
    "parking",
    "hotel",
];

/// Area the synthetic store and the scenario workloads share.
pub const METRO_AREA: CloakRegion = CloakRegion {
    x1: 13.30,
    y1: 52.45,
    x2: 13.50,
    y2: 52.55,
    t1: 0,
    t2: 0,
};

const CELL_DEG: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub location: GeoPoint,
    pub category: String,
    pub name: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum PoiError {
    #[error("line {line}: expected `lon,lat,category,name`")]
    Shape { line: usize },
    #[error("line {line}: {message}")]
    Value { line: usize, message: String },
}

#[derive(Debug, Clone, Default)]
struct CategoryIndex {
    cells: HashMap<(i64, i64), Vec<u32>>,
    lo: (i64, i64),
    hi: (i64, i64),
}

fn cell_of(p: &GeoPoint) -> (i64, i64) {
    ((p.lon() / CELL_DEG).floor() as i64, (p.lat() / CELL_DEG).floor() as i64)
}

/// POIs in store order with a per-category grid index. A POI's id is its
/// position in the store.
#[derive(Debug, Clone, Default)]
pub struct PoiStore {
    entries: Vec<Poi>,
    index: BTreeMap<String, CategoryIndex>,
}

impl PoiStore {
    pub fn new(entries: Vec<Poi>) -> Self {
        let mut index: BTreeMap<String, CategoryIndex> = BTreeMap::new();
        for (id, poi) in entries.iter().enumerate() {
            let c = cell_of(&poi.location);
            let idx = index.entry(poi.category.clone()).or_insert_with(|| CategoryIndex {
                cells: HashMap::new(),
                lo: c,
                hi: c,
            });
            idx.lo = (idx.lo.0.min(c.0), idx.lo.1.min(c.1));
            idx.hi = (idx.hi.0.max(c.0), idx.hi.1.max(c.1));
            idx.cells.entry(c).or_default().push(id as u32);
        }
        Self { entries, index }
    }

    /// Seeded synthetic store spread uniformly over [`METRO_AREA`], with
    /// coordinates rounded to micro-degrees.
    pub fn generate(seed: u64, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let micro = |v: f64| (v * 1e6).round() / 1e6;
        let entries = (0..count)
            .map(|i| {
                let lon = micro(rng.gen_range(METRO_AREA.x1..METRO_AREA.x2));
                let lat = micro(rng.gen_range(METRO_AREA.y1..METRO_AREA.y2));
                let category = POI_CATEGORIES[rng.gen_range(0..POI_CATEGORIES.len())];
                Poi {
                    location: GeoPoint::new(lon, lat).expect("metro area is on the map"),
                    category: category.to_owned(),
                    name: format!("{category} {i}"),
                }
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[Poi] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_fixture(&self) -> String {
        let mut out = String::new();
        for p in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                format_real(p.location.lon()),
                format_real(p.location.lat()),
                p.category,
                p.name
            ));
        }
        out
    }

    pub fn from_fixture(text: &str) -> Result<Self, PoiError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line_no = i + 1;
            let parts: Vec<&str> = line.splitn(4, ',').collect();
            let [lon, lat, category, name] = parts[..] else {
                return Err(PoiError::Shape { line: line_no });
            };
            let value = |message: String| PoiError::Value { line: line_no, message };
            let lon = parse_real(lon).map_err(|e| value(e.to_string()))?;
            let lat = parse_real(lat).map_err(|e| value(e.to_string()))?;
            let location = GeoPoint::new(lon, lat).map_err(|e| value(e.to_string()))?;
            if category.is_empty() {
                return Err(value("empty category".into()));
            }
            entries.push(Poi {
                location,
                category: category.to_owned(),
                name: name.to_owned(),
            });
        }
        Ok(Self::new(entries))
    }

    /// Closest POI of `category` to `anchor`; equal distances go to the
    /// lower id.
    pub fn nearest(&self, category: &str, anchor: &GeoPoint) -> Option<u32> {
        let idx = self.index.get(category)?;
        let (ai, aj) = cell_of(anchor);
        let qi = ai.clamp(idx.lo.0, idx.hi.0);
        let qj = aj.clamp(idx.lo.1, idx.hi.1);
        let reach = (qi - idx.lo.0).max(idx.hi.0 - qi).max(qj - idx.lo.1).max(idx.hi.1 - qj);
        let mut best: Option<(f64, u32)> = None;
        let consider = |cell: (i64, i64), best: &mut Option<(f64, u32)>| {
            for &id in idx.cells.get(&cell).map_or(&[][..], Vec::as_slice) {
                let d = anchor.planar_distance(&self.entries[id as usize].location);
                let better = match *best {
                    None => true,
                    Some((bd, bid)) => d.total_cmp(&bd).then(id.cmp(&bid)).is_lt(),
                };
                if better {
                    *best = Some((d, id));
                }
            }
        };
        for r in 0..=reach {
            // Every cell on ring r is at least r - 1 whole cells away; the
            // slack absorbs rounding in the cell assignment.
            if let Some((bd, _)) = best {
                if r > 0 && bd < (r - 1) as f64 * CELL_DEG - 1e-9 {
                    break;
                }
            }
            if r == 0 {
                consider((qi, qj), &mut best);
                continue;
            }
            let in_i = |i: i64| (idx.lo.0..=idx.hi.0).contains(&i);
            let in_j = |j: i64| (idx.lo.1..=idx.hi.1).contains(&j);
            for i in (qi - r).max(idx.lo.0)..=(qi + r).min(idx.hi.0) {
                for j in [qj - r, qj + r] {
                    if in_j(j) {
                        consider((i, j), &mut best);
                    }
                }
            }
            for j in (qj - r + 1).max(idx.lo.1)..=(qj + r - 1).min(idx.hi.1) {
                for i in [qi - r, qi + r] {
                    if in_i(i) {
                        consider((i, j), &mut best);
                    }
                }
            }
        }
        best.map(|(_, id)| id)
    }

    /// Ids of POIs of `category` inside the closed rectangle, ascending.
    pub fn range(&self, category: &str, region: &CloakRegion) -> Vec<u32> {
        let Some(idx) = self.index.get(category) else {
            return Vec::new();
        };
        let lo = cell_of(&GeoPoint::clamped(region.x1, region.y1));
        let hi = cell_of(&GeoPoint::clamped(region.x2, region.y2));
        let mut out = Vec::new();
        for i in lo.0.max(idx.lo.0)..=hi.0.min(idx.hi.0) {
            for j in lo.1.max(idx.lo.1)..=hi.1.min(idx.hi.1) {
                for &id in idx.cells.get(&(i, j)).map_or(&[][..], Vec::as_slice) {
                    if region.contains(&self.entries[id as usize].location) {
                        out.push(id);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn answer(&self, query: &PoiQuery, region: &CloakRegion) -> PoiAnswer {
        match query {
            PoiQuery::Nearest(cat) => PoiAnswer::Nearest(self.nearest(cat, &region.centroid())),
            PoiQuery::Range(cat) => PoiAnswer::Range(self.range(cat, region)),
        }
    }
}

/// `nearest:<category>` or `range:<category>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoiQuery {
    Nearest(String),
    Range(String),
}

impl FromStr for PoiQuery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("nearest", cat)) if !cat.is_empty() => Ok(PoiQuery::Nearest(cat.to_owned())),
            Some(("range", cat)) if !cat.is_empty() => Ok(PoiQuery::Range(cat.to_owned())),
            _ => Err(format!("unsupported query {s:?}")),
        }
    }
}

impl fmt::Display for PoiQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoiQuery::Nearest(c) => write!(f, "nearest:{c}"),
            PoiQuery::Range(c) => write!(f, "range:{c}"),
        }
    }
}

/// Answer text: `nearest:<id>`, `nearest:-`, `range:<id>,<id>` or
/// `error:unsupported-query`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoiAnswer {
    Nearest(Option<u32>),
    Range(Vec<u32>),
    Unsupported,
}

impl fmt::Display for PoiAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoiAnswer::Nearest(Some(id)) => write!(f, "nearest:{id}"),
            PoiAnswer::Nearest(None) => f.write_str("nearest:-"),
            PoiAnswer::Range(ids) => {
                f.write_str("range:")?;
                for (i, id) in ids.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
            PoiAnswer::Unsupported => f.write_str("error:unsupported-query"),
        }
    }
}

impl FromStr for PoiAnswer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unparseable answer {s:?}");
        match s.split_once(':').ok_or_else(bad)? {
            ("nearest", "-") => Ok(PoiAnswer::Nearest(None)),
            ("nearest", id) => id.parse().map(|v| PoiAnswer::Nearest(Some(v))).map_err(|_| bad()),
            ("range", "") => Ok(PoiAnswer::Range(Vec::new())),
            ("range", ids) => ids
                .split(',')
                .map(|v| v.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()
                .map(PoiAnswer::Range),
            ("error", "unsupported-query") => Ok(PoiAnswer::Unsupported),
            _ => Err(bad()),
        }
    }
}

/// Why a batch member was not answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Malformed,
    Authentication,
    BadSignature,
    WrongMarker,
    Expired,
    Replayed,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::Malformed => "malformed",
            RejectReason::Authentication => "authentication",
            RejectReason::BadSignature => "bad_signature",
            RejectReason::WrongMarker => "wrong_marker",
            RejectReason::Expired => "expired",
            RejectReason::Replayed => "replayed",
        }
    }
}

impl From<&EnvelopeError> for RejectReason {
    fn from(e: &EnvelopeError) -> Self {
        match e {
            EnvelopeError::Malformed(_) => RejectReason::Malformed,
            EnvelopeError::Authentication => RejectReason::Authentication,
            EnvelopeError::InvalidTicket(TicketError::WrongMarker) => RejectReason::WrongMarker,
            EnvelopeError::InvalidTicket(_) => RejectReason::BadSignature,
            EnvelopeError::ExpiredTicket => RejectReason::Expired,
        }
    }
}

/// Tokens already accepted, remembered until their ticket expires.
#[derive(Debug, Clone, Default)]
pub struct SeenTokens {
    seen: HashMap<TokenKey, u64>,
}

impl SeenTokens {
    /// Records the token; false if it was already seen.
    pub fn insert(&mut self, key: TokenKey, expiry_ms: u64) -> bool {
        match self.seen.entry(key) {
            std::collections::hash_map::Entry::Occupied(_) => false,
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(expiry_ms);
                true
            }
        }
    }

    pub fn contains(&self, key: TokenKey) -> bool {
        self.seen.contains_key(&key)
    }

    /// Forgets tokens whose tickets can no longer pass the expiry check.
    pub fn prune(&mut self, now_ms: u64) {
        self.seen.retain(|_, exp| *exp > now_ms);
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MemberRecord {
    Accepted {
        token: RingCoord,
        query_text: String,
        broker: Address,
    },
    Rejected {
        reason: RejectReason,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub received_ms: u64,
    pub anonymizer: Address,
    pub region: CloakRegion,
    pub members: Vec<MemberRecord>,
}

/// Everything a compromised server knows. Holds no proposed keys and no
/// client addresses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryLog {
    pub batches: Vec<BatchRecord>,
    pub issuance: BTreeMap<TokenKey, PeerId>,
}

impl AdversaryLog {
    pub fn is_empty(&self) -> bool {
        self.batches.is_empty() && self.issuance.is_empty()
    }

    pub fn rejections(&self) -> impl Iterator<Item = RejectReason> + '_ {
        self.batches.iter().flat_map(|b| &b.members).filter_map(|m| match m {
            MemberRecord::Rejected { reason } => Some(*reason),
            MemberRecord::Accepted { .. } => None,
        })
    }
}

/// A sealed answer and where it goes.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedResponse {
    pub broker: Address,
    pub response: ResponseEnvelope,
}

#[derive(Debug)]
pub struct Lbs {
    issuer: TicketIssuer,
    store: PoiStore,
    seen: SeenTokens,
    /// Off only in the pseudonym baseline, where one ticket is reused on purpose.
    single_use: bool,
    log: AdversaryLog,
}

impl Lbs {
    pub fn new(keys: ServerKeyPair, ticket_validity_ms: u64, store: PoiStore, single_use: bool) -> Self {
        Self {
            issuer: TicketIssuer::new(keys, ticket_validity_ms),
            store,
            seen: SeenTokens::default(),
            single_use,
            log: AdversaryLog::default(),
        }
    }

    pub fn issuer(&self) -> &TicketIssuer {
        &self.issuer
    }

    pub fn issuer_mut(&mut self) -> &mut TicketIssuer {
        &mut self.issuer
    }

    pub fn store(&self) -> &PoiStore {
        &self.store
    }

    pub fn seen_tokens(&self) -> &SeenTokens {
        &self.seen
    }

    /// One batch per registered peer, plus pruning of tokens that expired.
    pub fn distribute_tickets<R: RngCore + ?Sized>(
        &mut self,
        batch_size: usize,
        now_ms: u64,
        rng: &mut R,
    ) -> Result<Vec<(PeerId, Vec<Ticket>)>, TicketsError> {
        self.seen.prune(now_ms);
        let peers: Vec<PeerId> = self.issuer.registry().iter().copied().collect();
        peers
            .into_iter()
            .map(|p| Ok((p, self.issuer.distribute_batch(p, batch_size, now_ms, rng)?)))
            .collect()
    }

    /// Opens every member, answers the valid ones and routes each answer to
    /// its broker. A bad member never affects the others.
    pub fn on_batch<R: RngCore + ?Sized>(
        &mut self,
        batch: &AnonymizedBatch,
        overlay: &OverlayDirectory,
        now_ms: u64,
        rng: &mut R,
    ) -> Vec<RoutedResponse> {
        let mut out = Vec::new();
        let mut members = Vec::with_capacity(batch.members.len());
        for sealed in &batch.members {
            let opened = match open_sealed(sealed, self.issuer.keys(), now_ms) {
                Ok(o) => o,
                Err(e) => {
                    members.push(MemberRecord::Rejected { reason: (&e).into() });
                    continue;
                }
            };
            let token = opened.ticket.token();
            if self.single_use && !self.seen.insert(opened.ticket.key(), opened.ticket.expiry_ms()) {
                members.push(MemberRecord::Rejected {
                    reason: RejectReason::Replayed,
                });
                continue;
            }
            let answer = match opened.query_text.parse::<PoiQuery>() {
                Ok(q) => self.store.answer(&q, &batch.region),
                Err(_) => PoiAnswer::Unsupported,
            };
            let broker = if overlay.by_address(&opened.broker_address).is_some() {
                opened.broker_address.clone()
            } else {
                match overlay.lookup(token) {
                    Ok(rec) => rec.address.clone(),
                    Err(_) => opened.broker_address.clone(),
                }
            };
            members.push(MemberRecord::Accepted {
                token,
                query_text: opened.query_text.clone(),
                broker: broker.clone(),
            });
            out.push(RoutedResponse {
                broker,
                response: ResponseEnvelope::seal(token, &answer.to_string(), &opened.prop_key, rng),
            });
        }
        self.log.batches.push(BatchRecord {
            received_ms: now_ms,
            anonymizer: batch.anonymizer.clone(),
            region: batch.region,
            members,
        });
        out
    }

    /// Batches logged so far, without the issuance ledger.
    pub fn adversary_log(&self) -> &AdversaryLog {
        &self.log
    }

    pub fn adversary_view(&self) -> AdversaryLog {
        let mut log = self.log.clone();
        log.issuance = self.issuer.ledger().iter().map(|(k, p)| (*k, *p)).collect();
        log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ChaChaPoly, SymmetricScheme};
    use crate::envelope::{build_query, mint_ticket};
    use crate::overlay::PeerRecord;

    fn region(x1: f64, y1: f64, x2: f64, y2: f64) -> CloakRegion {
        CloakRegion { x1, y1, x2, y2, t1: 0, t2: 0 }
    }

    fn poi(lon: f64, lat: f64, cat: &str) -> Poi {
        Poi {
            location: GeoPoint::new(lon, lat).unwrap(),
            category: cat.into(),
            name: format!("{cat} at {lon}"),
        }
    }

    #[test]
    fn nearest_ties_go_to_store_order() {
        let store = PoiStore::new(vec![poi(1.0, 0.0, "cafe"), poi(-1.0, 0.0, "cafe"), poi(0.5, 0.5, "fuel")]);
        assert_eq!(store.nearest("cafe", &GeoPoint::new(0.0, 0.0).unwrap()), Some(0));
        assert_eq!(store.nearest("fuel", &GeoPoint::new(-50.0, 10.0).unwrap()), Some(2));
        assert_eq!(store.nearest("hotel", &GeoPoint::new(0.0, 0.0).unwrap()), None);
    }

    #[test]
    fn range_is_inclusive_and_sorted() {
        let store = PoiStore::new(vec![
            poi(1.0, 1.0, "cafe"),
            poi(0.0, 0.0, "cafe"),
            poi(0.5, 0.5, "cafe"),
            poi(1.0, 1.000001, "cafe"),
        ]);
        assert_eq!(store.range("cafe", &region(0.0, 0.0, 1.0, 1.0)), vec![0, 1, 2]);
        assert!(store.range("cafe", &region(2.0, 2.0, 3.0, 3.0)).is_empty());
    }

    #[test]
    fn fixture_round_trip() {
        let store = PoiStore::generate(7, 50);
        let text = store.to_fixture();
        let back = PoiStore::from_fixture(&text).unwrap();
        assert_eq!(back.entries(), store.entries());
        assert_eq!(text.lines().count(), 50);
        assert!(matches!(PoiStore::from_fixture("1,2,cafe"), Err(PoiError::Shape { line: 1 })));
        assert!(matches!(PoiStore::from_fixture("x,2,cafe,n"), Err(PoiError::Value { line: 1, .. })));
        let named = PoiStore::from_fixture("1,2,cafe,Joe's, the corner").unwrap();
        assert_eq!(named.entries()[0].name, "Joe's, the corner");
    }

    #[test]
    fn grammar_and_answer_text() {
        assert_eq!("nearest:cafe".parse(), Ok(PoiQuery::Nearest("cafe".into())));
        assert_eq!("range:fuel".parse(), Ok(PoiQuery::Range("fuel".into())));
        assert!("nearest:".parse::<PoiQuery>().is_err());
        assert!("where am i".parse::<PoiQuery>().is_err());
        for a in [
            PoiAnswer::Nearest(Some(3)),
            PoiAnswer::Nearest(None),
            PoiAnswer::Range(vec![]),
            PoiAnswer::Range(vec![1, 20]),
            PoiAnswer::Unsupported,
        ] {
            assert_eq!(a.to_string().parse::<PoiAnswer>(), Ok(a));
        }
    }

    #[test]
    fn seen_tokens_prune_after_expiry() {
        let mut s = SeenTokens::default();
        assert!(s.insert(TokenKey(1), 100));
        assert!(!s.insert(TokenKey(1), 100));
        s.prune(99);
        assert!(s.contains(TokenKey(1)));
        s.prune(100);
        assert!(s.is_empty());
    }

    #[test]
    fn replay_rejected_and_route_falls_back_to_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let keys = ServerKeyPair::generate(&mut rng);
        let pk = keys.public();
        let mut lbs = Lbs::new(keys.clone(), 60_000, PoiStore::generate(1, 100), true);
        let mut overlay = OverlayDirectory::new();
        for (i, ra) in [-100.0, 0.0, 100.0].into_iter().enumerate() {
            let id = PeerId(i as u32);
            overlay
                .join(PeerRecord::new(id, RingCoord::new(ra).unwrap(), Address::for_peer(id)))
                .unwrap();
        }
        let ticket = mint_ticket(&keys, &mut rng, 0, 60_000);
        let prop = ChaChaPoly::generate_key(&mut rng);
        let loc = GeoPoint::new(13.4, 52.5).unwrap();
        let env = build_query(loc, "nearest:cafe", &ticket, &Address::new("gone:1"), &prop, &pk, 0, &mut rng).unwrap();
        let batch = AnonymizedBatch {
            region: region(13.39, 52.49, 13.41, 52.51),
            anonymizer: Address::for_peer(PeerId(1)),
            members: vec![env.sealed.clone(), env.sealed.clone()],
        };
        let out = lbs.on_batch(&batch, &overlay, 10, &mut rng);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].broker, overlay.lookup(ticket.token()).unwrap().address);
        let answer = out[0].response.open(&prop).unwrap();
        assert!(answer.starts_with("nearest:"));
        let log = lbs.adversary_view();
        assert_eq!(log.rejections().collect::<Vec<_>>(), vec![RejectReason::Replayed]);
    }

    #[test]
    fn empty_run_has_empty_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lbs = Lbs::new(ServerKeyPair::generate(&mut rng), 1, PoiStore::default(), true);
        assert!(lbs.adversary_view().is_empty());
    }
}
