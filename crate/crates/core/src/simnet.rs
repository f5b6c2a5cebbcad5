//! Deterministic discrete-event network simulator.
//!
//! All randomness comes from one seed split into independent streams, so the
//! workload is identical across protocols and a run replays byte for byte.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ChurnAction, Mobility, Protocol, SimConfig};
use crate::crypto::{ServerKeyPair, ServerPublicKey};
use crate::envelope::TokenKey;
use crate::geo::GeoPoint;
use crate::lbs::{AdversaryLog, Lbs, MemberRecord, PoiStore};
use crate::message::Message;
use crate::overlay::{random_ra, Address, OverlayDirectory, PeerId, PeerRecord};
use crate::peer::{ClientQuery, Ctx, Effect, Peer, PeerConfig, PeerMetrics, PeerTimer, QueryId, Route, SpendPurpose};
use crate::tickets::{ownership_probability, Conduct, ExchangeParams};

const STREAM_WORKLOAD: u64 = 1;
const STREAM_OVERLAY: u64 = 2;
const STREAM_PROTOCOL: u64 = 3;
const STREAM_NETWORK: u64 = 4;

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

/// Equirectangular distance in kilometres, accurate at city scale.
pub fn km_between(a: GeoPoint, b: GeoPoint) -> f64 {
    let mid = ((a.lat() + b.lat()) / 2.0).to_radians();
    let dx = (b.lon() - a.lon()) * 111.320 * mid.cos();
    let dy = (b.lat() - a.lat()) * 110.574;
    dx.hypot(dy)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invariant breached: {}", .0.join("; "))]
    InvariantBreach(Vec<String>),
    #[error("cannot write trace: {0}")]
    Trace(#[from] std::io::Error),
}

/// One query of the workload, fixed before the run starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedQuery {
    pub qid: QueryId,
    pub client: PeerId,
    pub at_ms: u64,
    pub location: GeoPoint,
    pub text: String,
    pub speed_kmh: f64,
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R, area: [f64; 4]) -> GeoPoint {
    let [x1, y1, x2, y2] = area;
    GeoPoint::clamped(rng.gen_range(x1..=x2), rng.gen_range(y1..=y2))
}

/// Moves `from` towards `to` by `km`, returning the new point and whether
/// the target was reached.
fn advance(from: GeoPoint, to: GeoPoint, km: f64) -> (GeoPoint, bool) {
    let d = km_between(from, to);
    if d <= km || d == 0.0 {
        return (to, true);
    }
    let f = km / d;
    (
        GeoPoint::clamped(from.lon() + (to.lon() - from.lon()) * f, from.lat() + (to.lat() - from.lat()) * f),
        false,
    )
}

pub fn plan_workload(cfg: &SimConfig) -> Vec<PlannedQuery> {
    let w = &cfg.workload;
    let mut rng = stream(cfg.seed, STREAM_WORKLOAD);
    let gap = Exp::new(1.0 / w.mean_interval_ms as f64).expect("positive interval");
    let mut out = Vec::new();
    for c in 0..w.clients {
        let client = PeerId(c as u32);
        let first = w.start_ms + c as u64 * w.stagger_ms;
        let text = |rng: &mut ChaCha8Rng| w.queries[rng.gen_range(0..w.queries.len())].clone();
        match w.mobility {
            Mobility::Static | Mobility::Waypoint { .. } => {
                let (lo, hi) = match w.mobility {
                    Mobility::Waypoint { min_kmh, max_kmh } => (min_kmh, max_kmh),
                    _ => (0.0, 0.0),
                };
                let mut pos = uniform_point(&mut rng, w.area);
                let mut target = uniform_point(&mut rng, w.area);
                let mut speed = if hi > 0.0 { rng.gen_range(lo..=hi) } else { 0.0 };
                let mut t = first + gap.sample(&mut rng) as u64;
                while t < cfg.horizon_ms {
                    out.push(PlannedQuery {
                        qid: 0,
                        client,
                        at_ms: t,
                        location: pos,
                        text: text(&mut rng),
                        speed_kmh: speed,
                    });
                    let dt = (gap.sample(&mut rng) as u64 + 1).max(w.min_gap_ms);
                    let mut km = speed * dt as f64 / 3_600_000.0;
                    while km > 0.0 {
                        let before = pos;
                        let (p, reached) = advance(pos, target, km);
                        km -= km_between(before, p);
                        pos = p;
                        if !reached {
                            break;
                        }
                        target = uniform_point(&mut rng, w.area);
                        speed = rng.gen_range(lo..=hi);
                    }
                    t += dt;
                }
            }
            Mobility::Highway {
                lon,
                lat,
                length_km,
                min_kmh,
                max_kmh,
            } => {
                let speed = rng.gen_range(min_kmh..=max_kmh);
                let entry = GeoPoint::clamped(lon, lat);
                let exit = GeoPoint::clamped(lon, lat + length_km / 110.574);
                let t_entry = first + rng.gen_range(0..=w.stagger_ms / 4);
                let t_exit = t_entry + (length_km / speed * 3_600_000.0).round() as u64;
                for (at_ms, location) in [(t_entry, entry), (t_exit, exit)] {
                    if at_ms < cfg.horizon_ms {
                        out.push(PlannedQuery {
                            qid: 0,
                            client,
                            at_ms,
                            location,
                            text: text(&mut rng),
                            speed_kmh: speed,
                        });
                    }
                }
            }
        }
    }
    out.sort_by_key(|q| (q.at_ms, q.client));
    if w.max_queries > 0 {
        out.truncate(w.max_queries);
    }
    for (i, q) in out.iter_mut().enumerate() {
        q.qid = i as QueryId;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Peer(PeerId),
    Lbs,
}

impl std::fmt::Display for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Node::Peer(p) => write!(f, "{p}"),
            Node::Lbs => f.write_str("lbs"),
        }
    }
}

#[derive(Debug)]
enum EventKind {
    Deliver { from: Node, to: Node, bytes: Vec<u8> },
    Timer { peer: PeerId, timer: PeerTimer },
    ClientQuery(usize),
    Distribute,
    Churn(usize),
}

#[derive(Debug)]
struct Event {
    at: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: the heap pops the earliest event, ties by scheduling order.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_offline: u64,
    pub dropped_noncooperative: u64,
    pub dropped_malformed: u64,
    pub in_flight: u64,
    pub bytes: u64,
    pub queries_skipped_offline: u64,
}

impl NetStats {
    pub fn dropped(&self) -> u64 {
        self.dropped_offline + self.dropped_noncooperative + self.dropped_malformed
    }

    pub fn reconciles(&self) -> bool {
        self.sent == self.delivered + self.dropped() + self.in_flight
    }
}

/// Overlay membership just before and just after an overload rejoin.
#[derive(Debug, Clone, PartialEq)]
pub struct RejoinRecord {
    pub at_ms: u64,
    pub peer: PeerId,
    pub before: Vec<PeerRecord>,
    pub after: Vec<PeerRecord>,
    pub reforwarded: u64,
}

struct Tracer {
    hasher: Sha256,
    out: Option<BufWriter<File>>,
    records: u64,
}

impl Tracer {
    fn record(&mut self, line: &str, payload: &[u8]) -> std::io::Result<()> {
        self.records += 1;
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.hasher.update(payload);
        if let Some(out) = self.out.as_mut() {
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct SimOutcome {
    pub config: SimConfig,
    pub planned: Vec<PlannedQuery>,
    /// Indexed by peer id.
    pub metrics: Vec<PeerMetrics>,
    pub adversary: AdversaryLog,
    pub net: NetStats,
    pub rejoins: Vec<RejoinRecord>,
    pub trace_digest: String,
    pub trace_records: u64,
    pub waiting_at_end: usize,
    pub pending_at_end: usize,
    pub deferred_at_end: usize,
    pub ownership_analytic: f64,
    pub end_ms: u64,
}

impl SimOutcome {
    /// Ground truth: the peer that attached each ticket.
    pub fn spenders(&self) -> HashMap<TokenKey, PeerId> {
        let mut out = HashMap::new();
        for (i, m) in self.metrics.iter().enumerate() {
            for s in &m.spent {
                out.entry(s.token).or_insert(PeerId(i as u32));
            }
        }
        out
    }

    pub fn total<F: Fn(&PeerMetrics) -> u64>(&self, f: F) -> u64 {
        self.metrics.iter().map(f).sum()
    }

    /// Real queries that entered a window somewhere, against where they went.
    pub fn window_balance(&self) -> (u64, u64) {
        let inflow = self.total(|m| m.accepted_into_window + m.handed_in);
        let batched: u64 = self
            .metrics
            .iter()
            .map(|m| m.batches.iter().map(|b| b.reals as u64).sum::<u64>())
            .sum();
        let outflow = batched + self.total(|m| m.reforwarded + m.handed_out) + self.waiting_at_end as u64;
        (inflow, outflow)
    }

    /// Batch sizes as seen by the LBS.
    pub fn lbs_batch_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.adversary.batches.iter().map(|b| b.members.len())
    }
}

pub struct Simulation {
    cfg: SimConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Event>,
    overlay: OverlayDirectory,
    peers: Vec<Peer>,
    online: Vec<bool>,
    cooperative: Vec<bool>,
    addresses: HashMap<Address, PeerId>,
    lbs: Lbs,
    server_pk: ServerPublicKey,
    rng_overlay: ChaCha8Rng,
    rng_protocol: ChaCha8Rng,
    rng_network: ChaCha8Rng,
    planned: Vec<PlannedQuery>,
    net: NetStats,
    tracer: Tracer,
    accepted_tokens: HashSet<TokenKey>,
    broker_forwards: HashMap<TokenKey, u32>,
    rejoins: Vec<RejoinRecord>,
    breaches: Vec<String>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        let mut rng_overlay = stream(cfg.seed, STREAM_OVERLAY);
        let mut rng_protocol = stream(cfg.seed, STREAM_PROTOCOL);
        let rng_network = stream(cfg.seed, STREAM_NETWORK);
        let keys = ServerKeyPair::generate(&mut rng_protocol);
        let server_pk = keys.public();
        let pseudonym = cfg.protocol == Protocol::Pseudonym;
        let store = PoiStore::generate(cfg.poi.seed, cfg.poi.count);
        let mut lbs = Lbs::new(keys, cfg.tickets.validity_ms, store, !pseudonym);

        let peer_cfg = PeerConfig {
            k: cfg.k,
            t_wait_ms: cfg.t_wait_ms,
            min_cloak_side_deg: cfg.min_cloak_side_deg,
            collaboration: cfg.collaboration,
            collab_timeout_ms: cfg.collab_timeout_ms,
            broker_timeout_ms: cfg.broker_timeout(),
            client_timeout_ms: cfg.client_timeout(),
            retry_limit: cfg.retry_limit,
            ticket_margin_ms: cfg.ticket_margin(),
            exchanged_per_round: if pseudonym { 0 } else { cfg.tickets.exchanged_per_round },
            exchange_rounds: if pseudonym { 0 } else { cfg.tickets.rounds },
            exchange_interval_ms: cfg.tickets.round_interval_ms,
            trust_threshold: cfg.tickets.trust_threshold,
            overload_threshold: cfg.overload_threshold,
            pseudonym_mode: pseudonym,
            fault: cfg.fault,
        };
        let ids: Vec<PeerId> = (0..cfg.peers as u32).map(PeerId).collect();
        let mut overlay = OverlayDirectory::new();
        let mut peers = Vec::with_capacity(cfg.peers);
        let mut addresses = HashMap::new();
        for &id in &ids {
            let address = Address::for_peer(id);
            loop {
                let rec = PeerRecord::new(id, random_ra(&mut rng_overlay), address.clone());
                if overlay.join(rec).is_ok() {
                    break;
                }
            }
            addresses.insert(address.clone(), id);
            lbs.issuer_mut().register(id);
            peers.push(Peer::new(id, address, peer_cfg.clone(), ids.iter().copied()));
        }

        let tracer = Tracer {
            hasher: Sha256::new(),
            out: match &cfg.trace_path {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            },
            records: 0,
        };
        let planned = plan_workload(&cfg);
        let mut sim = Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            overlay,
            online: vec![true; cfg.peers],
            cooperative: vec![true; cfg.peers],
            peers,
            addresses,
            lbs,
            server_pk,
            rng_overlay,
            rng_protocol,
            rng_network,
            planned,
            net: NetStats::default(),
            tracer,
            accepted_tokens: HashSet::new(),
            broker_forwards: HashMap::new(),
            rejoins: Vec::new(),
            breaches: Vec::new(),
            cfg,
        };
        sim.push(0, EventKind::Distribute);
        for i in 0..sim.planned.len() {
            sim.push(sim.planned[i].at_ms, EventKind::ClientQuery(i));
        }
        for i in 0..sim.cfg.churn.len() {
            sim.push(sim.cfg.churn[i].at_ms, EventKind::Churn(i));
        }
        Ok(sim)
    }

    pub fn overlay(&self) -> &OverlayDirectory {
        &self.overlay
    }

    fn push(&mut self, at: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event { at, seq: self.seq, kind });
    }

    fn transmit(&mut self, from: Node, to: Node, msg: &Message, hops: usize) {
        let bytes = msg.encode();
        let (base, jitter) = self.cfg.latency.per_hop();
        let mut delay = 0;
        for _ in 0..hops {
            delay += base + self.rng_network.gen_range(0..=jitter);
        }
        self.net.sent += 1;
        self.net.bytes += bytes.len() as u64;
        self.push(self.now + delay, EventKind::Deliver { from, to, bytes });
    }

    fn hops(&self, from: PeerId, to: PeerId, route: Route) -> usize {
        if from == to {
            return 0;
        }
        match route {
            Route::Direct => 1,
            Route::Lookup(key) => self.overlay.route_hops(from, key).map(|h| h.max(1)).unwrap_or(1),
        }
    }

    fn apply(&mut self, peer: PeerId, effects: Vec<Effect>) {
        for e in effects {
            match e {
                Effect::Send { to, msg, route } => {
                    let Some(&target) = self.addresses.get(&to) else {
                        self.net.sent += 1;
                        self.net.dropped_offline += 1;
                        continue;
                    };
                    let hops = self.hops(peer, target, route);
                    self.transmit(Node::Peer(peer), Node::Peer(target), &msg, hops);
                }
                Effect::ToLbs(msg) => self.transmit(Node::Peer(peer), Node::Lbs, &msg, 1),
                Effect::Timer { at_ms, timer } => self.push(at_ms, EventKind::Timer { peer, timer }),
                Effect::Rejoin => self.rejoin(peer, true),
            }
        }
    }

    /// Runs `f` against one peer with a fresh context and applies its effects.
    fn with_peer(&mut self, peer: PeerId, f: impl FnOnce(&mut Peer, &mut Ctx<'_>)) {
        let effects = {
            let mut ctx = Ctx::new(self.now, &self.overlay, &self.server_pk, &mut self.rng_protocol);
            f(&mut self.peers[peer.0 as usize], &mut ctx);
            ctx.effects
        };
        self.apply(peer, effects);
    }

    fn rejoin(&mut self, peer: PeerId, record: bool) {
        let before = self.overlay.peers().to_vec();
        if self.overlay.rejoin_with_new_ra(peer, &mut self.rng_overlay).is_err() {
            return;
        }
        let prior = self.peers[peer.0 as usize].metrics.reforwarded;
        self.with_peer(peer, |p, ctx| p.after_rejoin(ctx));
        if record {
            self.rejoins.push(RejoinRecord {
                at_ms: self.now,
                peer,
                before,
                after: self.overlay.peers().to_vec(),
                reforwarded: self.peers[peer.0 as usize].metrics.reforwarded - prior,
            });
        }
    }

    fn trace(&mut self, line: String, payload: &[u8]) -> Result<(), SimError> {
        self.tracer.record(&line, payload)?;
        Ok(())
    }

    fn deliver(&mut self, from: Node, to: Node, bytes: Vec<u8>) {
        let msg = match Message::decode(&bytes) {
            Ok(m) => m,
            Err(_) => {
                self.net.dropped_malformed += 1;
                return;
            }
        };
        match to {
            Node::Lbs => {
                self.net.delivered += 1;
                let Message::Batch(batch) = msg else {
                    return;
                };
                if batch.members.len() < self.cfg.k {
                    self.breaches.push(format!(
                        "batch of {} members from {} at {} ms (K = {})",
                        batch.members.len(),
                        batch.anonymizer,
                        self.now,
                        self.cfg.k
                    ));
                }
                let routed = self.lbs.on_batch(&batch, &self.overlay, self.now, &mut self.rng_protocol);
                if self.cfg.protocol == Protocol::P4qs {
                    let last = self.lbs.adversary_log().batches.last().expect("just logged");
                    for m in &last.members {
                        if let MemberRecord::Accepted { token, .. } = m {
                            if !self.accepted_tokens.insert(TokenKey::from(*token)) {
                                self.breaches.push(format!("ticket {token} accepted twice"));
                            }
                        }
                    }
                }
                for r in routed {
                    match self.addresses.get(&r.broker) {
                        Some(&b) => self.transmit(Node::Lbs, Node::Peer(b), &Message::Response(r.response), 1),
                        None => {
                            self.net.sent += 1;
                            self.net.dropped_offline += 1;
                        }
                    }
                }
            }
            Node::Peer(p) => {
                let i = p.0 as usize;
                if !self.online[i] {
                    self.net.dropped_offline += 1;
                    return;
                }
                let anonymizer_or_broker_duty = match &msg {
                    Message::Query(_) | Message::CollabProbe { .. } | Message::RequestForAnswer(_) => true,
                    Message::Response(_) => from == Node::Lbs,
                    _ => false,
                };
                if !self.cooperative[i] && anonymizer_or_broker_duty {
                    self.net.dropped_noncooperative += 1;
                    return;
                }
                self.net.delivered += 1;
                if let (Message::Response(r), Node::Peer(_)) = (&msg, from) {
                    let n = self.broker_forwards.entry(TokenKey::from(r.ticket_token)).or_default();
                    *n += 1;
                    if *n > 1 && self.cfg.protocol == Protocol::P4qs {
                        self.breaches.push(format!("response for ticket {} forwarded twice", r.ticket_token));
                    }
                }
                let sender = match from {
                    Node::Peer(s) => Some(s),
                    Node::Lbs => None,
                };
                self.with_peer(p, |peer, ctx| peer.on_message(ctx, sender, msg));
            }
        }
    }

    fn distribute(&mut self) {
        match self.cfg.protocol {
            Protocol::P4qs => {
                let batches = self
                    .lbs
                    .distribute_tickets(self.cfg.tickets.batch_size, self.now, &mut self.rng_protocol)
                    .expect("every peer is registered");
                for (peer, tickets) in batches {
                    self.transmit(Node::Lbs, Node::Peer(peer), &Message::TicketBatch(tickets), 1);
                }
                let next = self.now + self.cfg.tickets.period_ms;
                if next < self.cfg.horizon_ms {
                    self.push(next, EventKind::Distribute);
                }
            }
            Protocol::Pseudonym => {
                let expiry = self.cfg.horizon_ms + self.cfg.tickets.validity_ms;
                for i in 0..self.peers.len() {
                    let t = self
                        .lbs
                        .issuer_mut()
                        .issue_pseudonym(PeerId(i as u32), expiry, &mut self.rng_protocol);
                    self.transmit(Node::Lbs, Node::Peer(PeerId(i as u32)), &Message::TicketBatch(vec![t]), 1);
                }
            }
        }
    }

    fn churn(&mut self, idx: usize) {
        let ev = self.cfg.churn[idx].clone();
        let id = PeerId(ev.peer);
        let i = id.0 as usize;
        match ev.action {
            ChurnAction::Leave => {
                if self.overlay.leave(id).is_ok() {
                    // Hand waiting queries to whoever inherits the zone.
                    self.with_peer(id, |p, ctx| p.after_rejoin(ctx));
                    self.online[i] = false;
                }
            }
            ChurnAction::Join => {
                if !self.overlay.contains(id) {
                    loop {
                        let rec = PeerRecord::new(id, random_ra(&mut self.rng_overlay), Address::for_peer(id));
                        if self.overlay.join(rec).is_ok() {
                            break;
                        }
                    }
                    self.online[i] = true;
                }
            }
            ChurnAction::Rejoin => self.rejoin(id, false),
            ChurnAction::NonCooperative => self.cooperative[i] = false,
            ChurnAction::Cooperative => self.cooperative[i] = true,
            ChurnAction::InjectInvalid => self.peers[i].set_conduct(Conduct::InjectInvalid),
            ChurnAction::Honest => self.peers[i].set_conduct(Conduct::Honest),
        }
    }

    fn step(&mut self, ev: Event) -> Result<(), SimError> {
        self.now = ev.at;
        match ev.kind {
            EventKind::Deliver { from, to, bytes } => {
                let kind = bytes.first().copied().unwrap_or(0);
                self.trace(
                    format!(
                        r#"{{"t":{},"seq":{},"ev":"deliver","from":"{from}","to":"{to}","kind":{kind},"len":{}}}"#,
                        ev.at,
                        ev.seq,
                        bytes.len()
                    ),
                    &bytes,
                )?;
                self.deliver(from, to, bytes);
            }
            EventKind::Timer { peer, timer } => {
                self.trace(
                    format!(
                        r#"{{"t":{},"seq":{},"ev":"timer","peer":"{peer}","timer":"{timer:?}"}}"#,
                        ev.at, ev.seq
                    ),
                    &[],
                )?;
                if self.online[peer.0 as usize] {
                    self.with_peer(peer, |p, ctx| p.on_timer(ctx, timer));
                }
            }
            EventKind::ClientQuery(i) => {
                let q = &self.planned[i];
                let (client, query) = (
                    q.client,
                    ClientQuery {
                        qid: q.qid,
                        location: q.location,
                        text: q.text.clone(),
                    },
                );
                self.trace(
                    format!(
                        r#"{{"t":{},"seq":{},"ev":"query","peer":"{client}","qid":{}}}"#,
                        ev.at, ev.seq, query.qid
                    ),
                    &[],
                )?;
                if self.online[client.0 as usize] {
                    self.with_peer(client, |p, ctx| p.client_send_query(ctx, query));
                } else {
                    self.net.queries_skipped_offline += 1;
                }
            }
            EventKind::Distribute => {
                self.trace(format!(r#"{{"t":{},"seq":{},"ev":"distribute"}}"#, ev.at, ev.seq), &[])?;
                self.distribute();
            }
            EventKind::Churn(i) => {
                let c = &self.cfg.churn[i];
                let line = format!(
                    r#"{{"t":{},"seq":{},"ev":"churn","peer":"{}","action":"{:?}"}}"#,
                    ev.at,
                    ev.seq,
                    PeerId(c.peer),
                    c.action
                );
                self.trace(line, &[])?;
                self.churn(i);
            }
        }
        Ok(())
    }

    /// Runs to the horizon (or until nothing is left to do) and checks the
    /// end-of-run invariants.
    pub fn run(mut self) -> Result<SimOutcome, SimError> {
        while let Some(ev) = self.queue.peek() {
            if ev.at > self.cfg.horizon_ms {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.step(ev)?;
            if !self.breaches.is_empty() {
                return Err(SimError::InvariantBreach(self.breaches));
            }
        }
        self.net.in_flight = self
            .queue
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Deliver { .. }))
            .count() as u64;
        if let Some(out) = self.tracer.out.as_mut() {
            out.flush()?;
        }
        if !self.net.reconciles() {
            self.breaches.push(format!("message accounting does not reconcile: {:?}", self.net));
        }
        let leaks: u64 = self.peers.iter().map(|p| p.metrics.location_leaks).sum();
        if leaks > 0 {
            self.breaches.push(format!("{leaks} batches carried clear member coordinates"));
        }
        if !self.breaches.is_empty() {
            return Err(SimError::InvariantBreach(self.breaches));
        }
        let ownership_analytic = match self.cfg.protocol {
            Protocol::Pseudonym => 1.0,
            Protocol::P4qs => ExchangeParams::new(
                self.cfg.tickets.batch_size as u32,
                self.cfg.tickets.exchanged_per_round as u32,
                self.cfg.tickets.rounds,
                self.cfg.peers as u32,
            )
            .and_then(|p| ownership_probability(&p))
            .unwrap_or(1.0),
        };
        let digest = self.tracer.hasher.finalize();
        Ok(SimOutcome {
            trace_digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
            trace_records: self.tracer.records,
            waiting_at_end: self.peers.iter().map(|p| p.anonymizer().total_waiting()).sum(),
            pending_at_end: self.peers.iter().map(|p| p.pending().len()).sum(),
            deferred_at_end: self.peers.iter().map(Peer::deferred_len).sum(),
            metrics: self.peers.into_iter().map(|p| p.metrics).collect(),
            adversary: self.lbs.adversary_view(),
            net: self.net,
            rejoins: self.rejoins,
            planned: self.planned,
            ownership_analytic,
            end_ms: self.now,
            config: self.cfg,
        })
    }
}

/// Convenience: build and run.
pub fn simulate(cfg: SimConfig) -> Result<SimOutcome, SimError> {
    Simulation::new(cfg)?.run()
}

/// Which planned query each real spend belongs to, keyed by ticket.
pub fn spends_by_query(outcome: &SimOutcome) -> BTreeMap<QueryId, Vec<TokenKey>> {
    let mut out: BTreeMap<QueryId, Vec<TokenKey>> = BTreeMap::new();
    for m in &outcome.metrics {
        for s in &m.spent {
            if let SpendPurpose::Query(q) = s.purpose {
                out.entry(q).or_default().push(s.token);
            }
        }
    }
    out
}
