//! The three roles every peer plays: client, anonymizer and broker.
//!
//! A peer is driven one event at a time. Handlers never block; everything
//! they want to happen elsewhere is returned as an [`Effect`] for the runner
//! to deliver.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{ChaChaPoly, ServerKeyPair, ServerPublicKey, SymmetricKey, SymmetricScheme};
use crate::envelope::{build_query, QueryEnvelope, RequestForAnswer, ResponseEnvelope, SealedQuery, Ticket, TokenKey};
use crate::geo::{geo_hash, zone_of, GeoPoint, RingCoord, ZoneSide};
use crate::lbs::POI_CATEGORIES;
use crate::message::{AnonymizedBatch, CloakRegion, HandedQuery, Message};
use crate::overlay::{Address, OverlayDirectory, PeerId};
use crate::tickets::{forged_ticket, Conduct, TicketPool, TrustList};

pub type QueryId = u64;

/// Deliberate protocol faults, used to prove that invariant checks fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Anonymizers dispatch short batches without padding them to K.
    UndersizedBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerConfig {
    pub k: usize,
    pub t_wait_ms: u64,
    pub min_cloak_side_deg: f64,
    pub collaboration: bool,
    pub collab_timeout_ms: u64,
    pub broker_timeout_ms: u64,
    pub client_timeout_ms: u64,
    pub retry_limit: u32,
    /// A client only attaches tickets valid for at least this much longer.
    pub ticket_margin_ms: u64,
    pub exchanged_per_round: usize,
    pub exchange_rounds: u32,
    pub exchange_interval_ms: u64,
    pub trust_threshold: u32,
    /// Arrivals within one window that make an anonymizer rejoin elsewhere.
    pub overload_threshold: Option<usize>,
    /// Reuse one long-lived ticket per peer instead of single-use tickets.
    pub pseudonym_mode: bool,
    pub fault: Option<Fault>,
}

impl Default for PeerConfig {
    fn default() -> Self {
        let t_wait_ms = 5000;
        Self {
            k: 4,
            t_wait_ms,
            min_cloak_side_deg: 0.01,
            collaboration: true,
            collab_timeout_ms: 1000,
            broker_timeout_ms: 3 * t_wait_ms,
            client_timeout_ms: 5 * t_wait_ms,
            retry_limit: 2,
            ticket_margin_ms: t_wait_ms + 2000,
            exchanged_per_round: 10,
            exchange_rounds: 5,
            exchange_interval_ms: 200,
            trust_threshold: 3,
            overload_threshold: None,
            pseudonym_mode: false,
            fault: None,
        }
    }
}

/// How a message should travel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Route {
    /// Straight to a known address.
    Direct,
    /// Through the overlay towards the owner of this key.
    Lookup(RingCoord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PeerTimer {
    Window { side: ZoneSide, generation: u64 },
    CollabDone { side: ZoneSide, generation: u64 },
    BrokerRequest(TokenKey),
    BrokerResponse(TokenKey),
    ClientTimeout { qid: QueryId, attempt: u32 },
    ExchangeRound { epoch: u64, round: u32 },
    ExchangeDone { epoch: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send { to: Address, msg: Message, route: Route },
    ToLbs(Message),
    Timer { at_ms: u64, timer: PeerTimer },
    /// Leave the overlay and rejoin under a fresh RA.
    Rejoin,
}

/// What a handler may see and touch besides its own state.
pub struct Ctx<'a> {
    pub now: u64,
    pub overlay: &'a OverlayDirectory,
    pub server_pk: &'a ServerPublicKey,
    pub rng: &'a mut dyn RngCore,
    pub effects: Vec<Effect>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: u64, overlay: &'a OverlayDirectory, server_pk: &'a ServerPublicKey, rng: &'a mut dyn RngCore) -> Self {
        Self {
            now,
            overlay,
            server_pk,
            rng,
            effects: Vec::new(),
        }
    }

    fn send(&mut self, to: Address, msg: Message, route: Route) {
        self.effects.push(Effect::Send { to, msg, route });
    }

    fn timer(&mut self, at_ms: u64, timer: PeerTimer) {
        self.effects.push(Effect::Timer { at_ms, timer });
    }
}

/// A query a user wants answered.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientQuery {
    pub qid: QueryId,
    pub location: GeoPoint,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct PendingQuery {
    pub query: ClientQuery,
    pub token: RingCoord,
    pub prop_key: SymmetricKey,
    pub broker: Address,
    pub first_sent_ms: u64,
    pub attempt: u32,
}

#[derive(Debug, Clone)]
struct Deferred {
    query: ClientQuery,
    first_sent_ms: Option<u64>,
    attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpendPurpose {
    Query(QueryId),
    Fake,
}

/// Ground truth: which peer attached which ticket, and why.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpentTicket {
    pub token: TokenKey,
    pub at_ms: u64,
    pub purpose: SpendPurpose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub at_ms: u64,
    pub side: ZoneSide,
    pub reals: usize,
    pub fakes: usize,
    /// Fakes sent without a ticket, which the LBS will reject.
    pub ticketless_fakes: usize,
    pub region: CloakRegion,
}

impl BatchSummary {
    pub fn members(&self) -> usize {
        self.reals + self.fakes
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeerMetrics {
    pub attempts_sent: u64,
    pub completed: u64,
    pub failed: u64,
    pub deferrals: u64,
    pub retries: u64,
    pub auth_failures: u64,
    pub duplicate_responses: u64,
    pub latencies: Vec<(QueryId, u64)>,
    pub answers: Vec<(QueryId, String)>,
    pub spent: Vec<SpentTicket>,
    pub batches: Vec<BatchSummary>,
    pub location_leaks: u64,
    pub malformed_dropped: u64,
    /// Queries that arrived at a peer no longer responsible for them.
    pub forwarded: u64,
    /// Waiting queries re-sent after an overload rejoin.
    pub reforwarded: u64,
    pub overloads: u64,
    pub accepted_into_window: u64,
    pub handed_out: u64,
    pub handed_in: u64,
    pub broker_forwards: u64,
    pub broker_duplicates: u64,
    pub non_deliveries: u64,
    pub unclaimed_responses: u64,
    pub exchange_accepted: u64,
    pub exchange_invalid: u64,
    pub exchange_refused: u64,
    pub revoked: Vec<PeerId>,
    /// Share of the pool still issued to this peer when each exchange ends.
    pub own_fraction: Vec<f64>,
}

/// A query waiting in an anonymizer window.
#[derive(Debug, Clone, PartialEq)]
pub struct Waiting {
    pub envelope: QueryEnvelope,
    pub location: GeoPoint,
    pub arrival_ms: u64,
}

#[derive(Debug, Clone, Default)]
struct Bucket {
    received: Vec<Waiting>,
    window_start: Option<u64>,
    generation: u64,
    /// Replies still expected from probed neighbours.
    probing: Option<u32>,
}

impl Bucket {
    fn take(&mut self) -> (Vec<Waiting>, Option<u64>) {
        self.generation += 1;
        self.probing = None;
        (std::mem::take(&mut self.received), self.window_start.take())
    }
}

/// What arriving in a window did.
#[derive(Debug, Clone, PartialEq)]
pub enum Arrival {
    /// First query of a window: arm the timer for this generation.
    Armed { generation: u64 },
    Stored,
    /// The window reached K.
    Full { members: Vec<Waiting>, window_start: u64 },
}

/// Anonymizer windows for the two mirror sub-zones. It sees only plaintext
/// coordinates and opaque sealed blobs: nothing here can open a ticket or a
/// query text.
#[derive(Debug, Clone)]
pub struct AnonymizerState {
    k: usize,
    buckets: [Bucket; 2],
    recent_arrivals: VecDeque<u64>,
}

fn side_index(side: ZoneSide) -> usize {
    match side {
        ZoneSide::LowLongitude => 0,
        ZoneSide::HighLongitude => 1,
    }
}

impl AnonymizerState {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            buckets: Default::default(),
            recent_arrivals: VecDeque::new(),
        }
    }

    pub fn waiting(&self, side: ZoneSide) -> usize {
        self.buckets[side_index(side)].received.len()
    }

    pub fn total_waiting(&self) -> usize {
        self.buckets.iter().map(|b| b.received.len()).sum()
    }

    pub fn on_query(&mut self, waiting: Waiting, side: ZoneSide, now: u64) -> Arrival {
        let k = self.k;
        let b = &mut self.buckets[side_index(side)];
        b.received.push(waiting);
        let armed = b.window_start.is_none();
        if armed {
            b.window_start = Some(now);
        }
        if b.received.len() >= k {
            let (members, start) = b.take();
            return Arrival::Full {
                members,
                window_start: start.unwrap_or(now),
            };
        }
        if armed {
            Arrival::Armed { generation: b.generation }
        } else {
            Arrival::Stored
        }
    }

    /// Counts an arrival and reports whether more than `threshold` arrived
    /// within the last `window_ms`.
    pub fn note_arrival(&mut self, now: u64, window_ms: u64, threshold: usize) -> bool {
        self.recent_arrivals.push_back(now);
        while self.recent_arrivals.front().is_some_and(|&t| t + window_ms <= now) {
            self.recent_arrivals.pop_front();
        }
        if self.recent_arrivals.len() > threshold {
            self.recent_arrivals.clear();
            return true;
        }
        false
    }

    pub fn is_current(&self, side: ZoneSide, generation: u64) -> bool {
        self.buckets[side_index(side)].generation == generation
    }

    pub fn start_probe(&mut self, side: ZoneSide, replies: u32) -> u64 {
        let b = &mut self.buckets[side_index(side)];
        b.probing = Some(replies);
        b.generation
    }

    pub fn is_probing(&self, side: ZoneSide) -> bool {
        self.buckets[side_index(side)].probing.is_some()
    }

    /// Records one probe reply; true once every reply is in.
    pub fn probe_reply(&mut self, side: ZoneSide) -> bool {
        let b = &mut self.buckets[side_index(side)];
        match b.probing.as_mut() {
            Some(n) => {
                *n = n.saturating_sub(1);
                *n == 0
            }
            None => false,
        }
    }

    /// Adds queries handed over by a neighbour without touching the window.
    pub fn absorb(&mut self, side: ZoneSide, queries: Vec<Waiting>, now: u64) -> Option<u64> {
        let b = &mut self.buckets[side_index(side)];
        b.received.extend(queries);
        if b.window_start.is_none() && !b.received.is_empty() {
            b.window_start = Some(now);
            return Some(b.generation);
        }
        None
    }

    pub fn is_full(&self, side: ZoneSide) -> bool {
        self.buckets[side_index(side)].received.len() >= self.k
    }

    /// Empties a window ("Empty Query List").
    pub fn take(&mut self, side: ZoneSide) -> (Vec<Waiting>, Option<u64>) {
        self.buckets[side_index(side)].take()
    }

    /// Answers a neighbour's probe: hand over everything if the merge
    /// reaches K, otherwise nothing.
    pub fn on_probe(&mut self, side: ZoneSide, their_waiting: usize) -> Vec<Waiting> {
        let mine = self.waiting(side);
        if mine > 0 && mine + their_waiting >= self.k {
            self.take(side).0
        } else {
            Vec::new()
        }
    }
}

/// Minimal bounding rectangle of `points`, widened symmetrically to at least
/// `min_side` degrees on each axis.
pub fn cloak(points: &[GeoPoint], min_side: f64, t1: u64, t2: u64) -> CloakRegion {
    assert!(!points.is_empty(), "cloak needs at least one member");
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x1 = x1.min(p.lon());
        x2 = x2.max(p.lon());
        y1 = y1.min(p.lat());
        y2 = y2.max(p.lat());
    }
    let widen = |lo: f64, hi: f64, bound: f64| {
        if hi - lo >= min_side {
            return (lo, hi);
        }
        let c = (lo + hi) / 2.0;
        let (a, b) = (c - min_side / 2.0, c + min_side / 2.0);
        (lo.min(a).max(-bound), hi.max(b).min(bound))
    };
    let (x1, x2) = widen(x1, x2, 180.0);
    let (y1, y2) = widen(y1, y2, 90.0);
    CloakRegion { x1, y1, x2, y2, t1, t2 }
}

/// Unmatched halves, first in first out per token. Single-use tickets keep
/// every queue at length one; the pseudonym baseline reuses tokens.
#[derive(Debug, Clone, Default)]
struct BrokerState {
    responses: HashMap<TokenKey, VecDeque<(ResponseEnvelope, u64)>>,
    requests: HashMap<TokenKey, VecDeque<(Address, u64)>>,
}

fn pop_front<T>(map: &mut HashMap<TokenKey, VecDeque<T>>, key: TokenKey) -> Option<T> {
    let q = map.get_mut(&key)?;
    let v = q.pop_front();
    if q.is_empty() {
        map.remove(&key);
    }
    v
}

/// Removes and returns entries that arrived at least `timeout` ago.
fn expire<T>(map: &mut HashMap<TokenKey, VecDeque<(T, u64)>>, key: TokenKey, now: u64, timeout: u64) -> Vec<T> {
    let mut out = Vec::new();
    if let Some(q) = map.get_mut(&key) {
        while q.front().is_some_and(|(_, at)| at + timeout <= now) {
            out.push(q.pop_front().expect("front exists").0);
        }
        if q.is_empty() {
            map.remove(&key);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Peer {
    id: PeerId,
    address: Address,
    cfg: PeerConfig,
    pool: TicketPool,
    pseudonym: Option<Ticket>,
    trust: TrustList,
    conduct: Conduct,
    forger: Option<ServerKeyPair>,
    pending: BTreeMap<QueryId, PendingQuery>,
    deferred: VecDeque<Deferred>,
    anonymizer: AnonymizerState,
    broker: BrokerState,
    exchange_epoch: u64,
    schedule_seed: u64,
    pool_locked: bool,
    own_batch: HashSet<TokenKey>,
    garbage: Option<SealedQuery>,
    pub metrics: PeerMetrics,
}

impl Peer {
    pub fn new(id: PeerId, address: Address, cfg: PeerConfig, trusted: impl IntoIterator<Item = PeerId>) -> Self {
        let trust = TrustList::new(trusted.into_iter().filter(|p| *p != id), cfg.trust_threshold.max(1));
        Self {
            id,
            address,
            anonymizer: AnonymizerState::new(cfg.k),
            cfg,
            pool: TicketPool::new(),
            pseudonym: None,
            trust,
            conduct: Conduct::Honest,
            forger: None,
            pending: BTreeMap::new(),
            deferred: VecDeque::new(),
            broker: BrokerState::default(),
            exchange_epoch: 0,
            schedule_seed: 0,
            pool_locked: false,
            own_batch: HashSet::new(),
            garbage: None,
            metrics: PeerMetrics::default(),
        }
    }

    pub fn id(&self) -> PeerId {
        self.id
    }

    pub fn address(&self) -> &Address {
        &self.address
    }

    pub fn pool(&self) -> &TicketPool {
        &self.pool
    }

    pub fn trust(&self) -> &TrustList {
        &self.trust
    }

    pub fn anonymizer(&self) -> &AnonymizerState {
        &self.anonymizer
    }

    pub fn pending(&self) -> &BTreeMap<QueryId, PendingQuery> {
        &self.pending
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    pub fn set_conduct(&mut self, conduct: Conduct) {
        self.conduct = conduct;
    }

    pub fn broker_backlog(&self) -> (usize, usize) {
        (
            self.broker.requests.values().fold(0, |n, q| n + q.len()),
            self.broker.responses.values().fold(0, |n, q| n + q.len()),
        )
    }

    /// Entry point for every delivered message. `from` is the transport-level
    /// sender, `None` for the LBS.
    pub fn on_message(&mut self, ctx: &mut Ctx<'_>, from: Option<PeerId>, msg: Message) {
        match msg {
            Message::Query(env) => self.on_query(ctx, env),
            Message::Response(resp) => match from {
                // From the LBS this is a broker delivery; from a peer it is the
                // broker forwarding our answer.
                None => self.broker_on_response(ctx, resp),
                Some(_) => self.client_on_response(ctx, resp),
            },
            Message::RequestForAnswer(req) => self.broker_on_request(ctx, req),
            Message::NonDelivery { ticket_token } => self.client_on_non_delivery(ctx, ticket_token),
            Message::TicketBatch(tickets) => self.on_ticket_batch(ctx, tickets),
            Message::TicketExchange { tickets, .. } => {
                if let Some(sender) = from {
                    self.on_exchange(ctx, sender, tickets);
                }
            }
            Message::CollabProbe { requester, side, waiting } => {
                let handed = self.anonymizer.on_probe(side, waiting as usize);
                self.metrics.handed_out += handed.len() as u64;
                let queries = handed
                    .into_iter()
                    .map(|w| HandedQuery {
                        envelope: w.envelope,
                        arrival_ms: w.arrival_ms,
                    })
                    .collect();
                ctx.send(requester, Message::CollabHandoff { side, queries }, Route::Direct);
            }
            Message::CollabHandoff { side, queries } => self.on_handoff(ctx, side, queries),
            Message::Batch(_) => self.metrics.malformed_dropped += 1,
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_>, timer: PeerTimer) {
        match timer {
            PeerTimer::Window { side, generation } => {
                if self.anonymizer.is_current(side, generation) && !self.anonymizer.is_probing(side) {
                    self.on_window_expiry(ctx, side);
                }
            }
            PeerTimer::CollabDone { side, generation } => {
                if self.anonymizer.is_current(side, generation) && self.anonymizer.is_probing(side) {
                    self.flush_window(ctx, side);
                }
            }
            PeerTimer::BrokerRequest(key) => {
                let timeout = self.cfg.broker_timeout_ms;
                for requester in expire(&mut self.broker.requests, key, ctx.now, timeout) {
                    self.metrics.non_deliveries += 1;
                    let ticket_token = RingCoord::new(f64::from_bits(key.0)).expect("token came off the wire");
                    ctx.send(requester, Message::NonDelivery { ticket_token }, Route::Direct);
                }
            }
            PeerTimer::BrokerResponse(key) => {
                let timeout = self.cfg.broker_timeout_ms;
                self.metrics.unclaimed_responses += expire(&mut self.broker.responses, key, ctx.now, timeout).len() as u64;
            }
            PeerTimer::ClientTimeout { qid, attempt } => {
                if self.pending.get(&qid).is_some_and(|p| p.attempt == attempt) {
                    self.retry(ctx, qid);
                }
            }
            PeerTimer::ExchangeRound { epoch, round } => {
                if epoch == self.exchange_epoch {
                    self.exchange_send(ctx, round);
                }
            }
            PeerTimer::ExchangeDone { epoch } => {
                if epoch == self.exchange_epoch {
                    self.pool_locked = false;
                    self.record_own_fraction();
                    self.flush_deferred(ctx);
                }
            }
        }
    }

    // ----- client -----

    /// Sends a query now, or defers it until tickets arrive.
    pub fn client_send_query(&mut self, ctx: &mut Ctx<'_>, query: ClientQuery) {
        self.send_attempt(ctx, query, None, 0);
    }

    fn take_ticket(&mut self, ctx: &mut Ctx<'_>, margin_ms: u64, for_fake: bool) -> Option<Ticket> {
        if self.cfg.pseudonym_mode {
            return self
                .pseudonym
                .clone()
                .filter(|t| t.expiry_ms() > ctx.now.saturating_add(margin_ms));
        }
        // Fresh tickets are held back from real queries until exchanged.
        if self.pool_locked && !for_fake {
            return None;
        }
        self.pool.take_for_query(ctx.rng, ctx.now, margin_ms)
    }

    fn send_attempt(&mut self, ctx: &mut Ctx<'_>, query: ClientQuery, first_sent_ms: Option<u64>, attempt: u32) {
        let ticket = if ctx.overlay.is_empty() {
            None
        } else {
            self.take_ticket(ctx, self.cfg.ticket_margin_ms, false)
        };
        let Some(ticket) = ticket else {
            self.metrics.deferrals += 1;
            self.deferred.push_back(Deferred {
                query,
                first_sent_ms,
                attempt,
            });
            return;
        };
        let hash = geo_hash(query.location);
        let anonymizer = ctx.overlay.lookup(hash).expect("overlay checked non-empty").address.clone();
        let broker = ctx.overlay.lookup(ticket.token()).expect("overlay checked non-empty").address.clone();
        let prop_key = ChaChaPoly::generate_key(ctx.rng);
        let env = build_query(
            query.location,
            &query.text,
            &ticket,
            &broker,
            &prop_key,
            ctx.server_pk,
            ctx.now,
            ctx.rng,
        )
        .expect("pool only hands out unexpired tickets");
        ctx.send(anonymizer, Message::Query(env), Route::Lookup(hash));
        ctx.send(
            broker.clone(),
            Message::RequestForAnswer(RequestForAnswer {
                ticket_token: ticket.token(),
                requester: self.address.clone(),
            }),
            Route::Lookup(ticket.token()),
        );
        ctx.timer(
            ctx.now + self.cfg.client_timeout_ms,
            PeerTimer::ClientTimeout {
                qid: query.qid,
                attempt,
            },
        );
        self.metrics.attempts_sent += 1;
        self.metrics.spent.push(SpentTicket {
            token: ticket.key(),
            at_ms: ctx.now,
            purpose: SpendPurpose::Query(query.qid),
        });
        self.pending.insert(
            query.qid,
            PendingQuery {
                token: ticket.token(),
                prop_key,
                broker,
                first_sent_ms: first_sent_ms.unwrap_or(ctx.now),
                attempt,
                query,
            },
        );
    }

    /// Gives up on the current attempt and sends again with a new ticket,
    /// hence in general a new broker.
    fn retry(&mut self, ctx: &mut Ctx<'_>, qid: QueryId) {
        let Some(p) = self.pending.remove(&qid) else {
            return;
        };
        if p.attempt >= self.cfg.retry_limit {
            self.metrics.failed += 1;
            return;
        }
        self.metrics.retries += 1;
        self.send_attempt(ctx, p.query, Some(p.first_sent_ms), p.attempt + 1);
    }

    fn pending_for(&self, token: RingCoord) -> Vec<QueryId> {
        let key = TokenKey::from(token);
        self.pending
            .iter()
            .filter(|(_, p)| TokenKey::from(p.token) == key)
            .map(|(q, _)| *q)
            .collect()
    }

    fn client_on_response(&mut self, ctx: &mut Ctx<'_>, resp: ResponseEnvelope) {
        let candidates = self.pending_for(resp.ticket_token);
        if candidates.is_empty() {
            self.metrics.duplicate_responses += 1;
            return;
        }
        for qid in &candidates {
            if let Ok(answer) = resp.open(&self.pending[qid].prop_key) {
                let p = self.pending.remove(qid).expect("candidate is pending");
                self.metrics.completed += 1;
                self.metrics.latencies.push((*qid, ctx.now - p.first_sent_ms));
                self.metrics.answers.push((*qid, answer));
                return;
            }
        }
        self.metrics.auth_failures += 1;
        self.retry(ctx, candidates[0]);
    }

    fn client_on_non_delivery(&mut self, ctx: &mut Ctx<'_>, token: RingCoord) {
        if let Some(&qid) = self.pending_for(token).first() {
            self.retry(ctx, qid);
        }
    }

    fn flush_deferred(&mut self, ctx: &mut Ctx<'_>) {
        let waiting = std::mem::take(&mut self.deferred);
        for d in waiting {
            self.send_attempt(ctx, d.query, d.first_sent_ms, d.attempt);
        }
    }

    // ----- tickets -----

    fn on_ticket_batch(&mut self, ctx: &mut Ctx<'_>, tickets: Vec<Ticket>) {
        if self.cfg.pseudonym_mode {
            if let Some(t) = tickets.into_iter().next() {
                self.pseudonym = Some(t);
            }
            self.flush_deferred(ctx);
            return;
        }
        self.pool.purge_expired(ctx.now);
        // Every peer in a distribution gets the same expiry, so it doubles as
        // a shared seed for the exchange schedule.
        if let Some(t) = tickets.first() {
            self.schedule_seed = t.expiry_ms();
        }
        self.own_batch = tickets.iter().map(Ticket::key).collect();
        self.pool.extend(tickets);
        self.exchange_epoch += 1;
        let rounds = self.cfg.exchange_rounds;
        if rounds == 0 || self.cfg.exchanged_per_round == 0 {
            self.pool_locked = false;
            self.record_own_fraction();
            self.flush_deferred(ctx);
            return;
        }
        self.pool_locked = true;
        let step = self.cfg.exchange_interval_ms;
        for round in 1..=rounds {
            ctx.timer(
                ctx.now + u64::from(round) * step,
                PeerTimer::ExchangeRound {
                    epoch: self.exchange_epoch,
                    round,
                },
            );
        }
        ctx.timer(
            ctx.now + u64::from(rounds + 1) * step,
            PeerTimer::ExchangeDone {
                epoch: self.exchange_epoch,
            },
        );
    }

    fn record_own_fraction(&mut self) {
        if self.pool.is_empty() {
            return;
        }
        let own = self.pool.tickets().iter().filter(|t| self.own_batch.contains(&t.key())).count();
        self.metrics.own_fraction.push(own as f64 / self.pool.len() as f64);
    }

    /// One exchange round: hand `E` tickets to this round's partner if it is
    /// trusted.
    fn exchange_send(&mut self, ctx: &mut Ctx<'_>, round: u32) {
        let Some(partner) = exchange_partner(ctx.overlay, self.id, self.schedule_seed, round) else {
            return;
        };
        if !self.trust.is_trusted(partner) {
            return;
        }
        let partner = ctx.overlay.get(partner).expect("partner drawn from the overlay");
        let e = self.cfg.exchanged_per_round;
        let tickets = match self.conduct {
            Conduct::Honest => self.pool.take_for_exchange(ctx.rng, e),
            Conduct::InjectInvalid => {
                let forger = self.forger.get_or_insert_with(|| ServerKeyPair::generate(ctx.rng));
                (0..e).map(|_| forged_ticket(forger, ctx.rng, ctx.now + 60_000)).collect()
            }
        };
        if tickets.is_empty() {
            return;
        }
        ctx.send(
            partner.address.clone(),
            Message::TicketExchange {
                sender: self.address.clone(),
                tickets,
            },
            Route::Direct,
        );
    }

    fn on_exchange(&mut self, ctx: &mut Ctx<'_>, sender: PeerId, tickets: Vec<Ticket>) {
        let r = self.pool.accept_exchange(sender, tickets, &mut self.trust, ctx.server_pk, ctx.now);
        self.metrics.exchange_accepted += r.accepted as u64;
        self.metrics.exchange_invalid += r.invalid as u64;
        self.metrics.exchange_refused += r.refused as u64;
        if r.revoked {
            self.metrics.revoked.push(sender);
        }
    }

    // ----- anonymizer -----

    fn on_query(&mut self, ctx: &mut Ctx<'_>, env: QueryEnvelope) {
        let Ok(location) = env.location() else {
            self.metrics.malformed_dropped += 1;
            return;
        };
        let hash = geo_hash(location);
        let owner = ctx.overlay.lookup(hash).map(|r| (r.peer_id, r.address.clone()));
        match owner {
            Ok((owner, _)) if owner == self.id => {}
            Ok((_, addr)) => {
                // Stale view at the sender: pass it on.
                self.metrics.forwarded += 1;
                ctx.send(addr, Message::Query(env), Route::Lookup(hash));
                return;
            }
            Err(_) => {
                self.metrics.malformed_dropped += 1;
                return;
            }
        }
        self.metrics.accepted_into_window += 1;
        let side = zone_of(location);
        let waiting = Waiting {
            envelope: env,
            location,
            arrival_ms: ctx.now,
        };
        match self.anonymizer.on_query(waiting, side, ctx.now) {
            Arrival::Armed { generation } => ctx.timer(ctx.now + self.cfg.t_wait_ms, PeerTimer::Window { side, generation }),
            Arrival::Stored => {}
            Arrival::Full { members, window_start } => self.dispatch(ctx, side, members, window_start),
        }
        if let Some(threshold) = self.cfg.overload_threshold {
            if self.anonymizer.note_arrival(ctx.now, self.cfg.t_wait_ms, threshold) {
                self.metrics.overloads += 1;
                ctx.effects.push(Effect::Rejoin);
            }
        }
    }

    /// Called by the runner once the overlay holds this peer at its new RA:
    /// every waiting query goes to whoever now owns its zone.
    pub fn after_rejoin(&mut self, ctx: &mut Ctx<'_>) {
        for side in ZoneSide::BOTH {
            let (members, _) = self.anonymizer.take(side);
            for w in members {
                self.metrics.reforwarded += 1;
                let hash = geo_hash(w.location);
                let owner = ctx.overlay.lookup(hash).expect("overlay has this peer").address.clone();
                ctx.send(owner, Message::Query(w.envelope), Route::Lookup(hash));
            }
        }
    }

    fn on_window_expiry(&mut self, ctx: &mut Ctx<'_>, side: ZoneSide) {
        let waiting = self.anonymizer.waiting(side);
        if waiting == 0 {
            return;
        }
        let neighbours: Vec<Address> = if self.cfg.collaboration {
            match ctx.overlay.neighbors(self.id) {
                Ok((pred, succ)) => pred.into_iter().chain(succ).map(|r| r.address.clone()).collect(),
                Err(_) => Vec::new(),
            }
        } else {
            Vec::new()
        };
        if neighbours.is_empty() {
            self.flush_window(ctx, side);
            return;
        }
        let generation = self.anonymizer.start_probe(side, neighbours.len() as u32);
        for n in neighbours {
            ctx.send(
                n,
                Message::CollabProbe {
                    requester: self.address.clone(),
                    side,
                    waiting: waiting as u32,
                },
                Route::Direct,
            );
        }
        ctx.timer(ctx.now + self.cfg.collab_timeout_ms, PeerTimer::CollabDone { side, generation });
    }

    fn on_handoff(&mut self, ctx: &mut Ctx<'_>, side: ZoneSide, queries: Vec<HandedQuery>) {
        let mut incoming = Vec::with_capacity(queries.len());
        for q in queries {
            match q.envelope.location() {
                Ok(location) => incoming.push(Waiting {
                    envelope: q.envelope,
                    location,
                    arrival_ms: q.arrival_ms,
                }),
                Err(_) => self.metrics.malformed_dropped += 1,
            }
        }
        self.metrics.handed_in += incoming.len() as u64;
        let was_probing = self.anonymizer.is_probing(side);
        let armed = self.anonymizer.absorb(side, incoming, ctx.now);
        if was_probing {
            if self.anonymizer.probe_reply(side) || self.anonymizer.is_full(side) {
                self.flush_window(ctx, side);
            }
        } else if self.anonymizer.is_full(side) {
            self.flush_window(ctx, side);
        } else if let Some(generation) = armed {
            ctx.timer(ctx.now + self.cfg.t_wait_ms, PeerTimer::Window { side, generation });
        }
    }

    fn flush_window(&mut self, ctx: &mut Ctx<'_>, side: ZoneSide) {
        let (members, start) = self.anonymizer.take(side);
        if members.is_empty() {
            return;
        }
        self.dispatch(ctx, side, members, start.unwrap_or(ctx.now));
    }

    fn fake_member(&mut self, ctx: &mut Ctx<'_>, region: &CloakRegion) -> Option<SealedQuery> {
        let ticket = self.take_ticket(ctx, self.cfg.collab_timeout_ms + 1000, true)?;
        let lon = ctx.rng.gen_range(region.x1..=region.x2);
        let lat = ctx.rng.gen_range(region.y1..=region.y2);
        let loc = GeoPoint::clamped(lon, lat);
        let cat = POI_CATEGORIES.choose(ctx.rng).expect("categories");
        let text = if ctx.rng.gen_bool(0.5) {
            format!("nearest:{cat}")
        } else {
            format!("range:{cat}")
        };
        let broker = ctx.overlay.lookup(ticket.token()).ok()?.address.clone();
        let key = ChaChaPoly::generate_key(ctx.rng);
        let env = build_query(loc, &text, &ticket, &broker, &key, ctx.server_pk, ctx.now, ctx.rng).ok()?;
        self.metrics.spent.push(SpentTicket {
            token: ticket.key(),
            at_ms: ctx.now,
            purpose: SpendPurpose::Fake,
        });
        Some(env.sealed)
    }

    fn garbage_member(&mut self, ctx: &mut Ctx<'_>) -> SealedQuery {
        self.garbage
            .get_or_insert_with(|| {
                let mut payload = vec![0u8; 160];
                let mut key = vec![0u8; 92];
                ctx.rng.fill_bytes(&mut payload);
                ctx.rng.fill_bytes(&mut key);
                SealedQuery {
                    sealed_payload: payload,
                    sealed_key: key,
                }
            })
            .clone()
    }

    /// Cloaks the members, pads with fakes up to K and sends the batch.
    fn dispatch(&mut self, ctx: &mut Ctx<'_>, side: ZoneSide, members: Vec<Waiting>, window_start: u64) {
        let t1 = members.iter().map(|w| w.arrival_ms).min().unwrap_or(window_start).min(window_start);
        let points: Vec<GeoPoint> = members.iter().map(|w| w.location).collect();
        let region = cloak(&points, self.cfg.min_cloak_side_deg, t1, ctx.now);
        let reals = members.len();
        let deficit = match self.cfg.fault {
            Some(Fault::UndersizedBatch) => 0,
            None => self.cfg.k.saturating_sub(reals),
        };
        let coords: Vec<(String, String)> = members
            .iter()
            .map(|w| (w.envelope.longitude_text.clone(), w.envelope.latitude_text.clone()))
            .collect();
        let mut sealed: Vec<SealedQuery> = members.into_iter().map(|w| w.envelope.sealed).collect();
        let mut ticketless = 0;
        for _ in 0..deficit {
            match self.fake_member(ctx, &region) {
                Some(s) => sealed.push(s),
                None => {
                    ticketless += 1;
                    sealed.push(self.garbage_member(ctx));
                }
            }
        }
        sealed.shuffle(ctx.rng);
        let msg = Message::Batch(AnonymizedBatch {
            region,
            anonymizer: self.address.clone(),
            members: sealed,
        });
        if leaks_coordinates(&msg.encode(), &coords) {
            self.metrics.location_leaks += 1;
        }
        self.metrics.batches.push(BatchSummary {
            at_ms: ctx.now,
            side,
            reals,
            fakes: deficit,
            ticketless_fakes: ticketless,
            region,
        });
        ctx.effects.push(Effect::ToLbs(msg));
    }

    // ----- broker -----

    fn forward(&mut self, ctx: &mut Ctx<'_>, to: Address, resp: ResponseEnvelope) {
        self.metrics.broker_forwards += 1;
        ctx.send(to, Message::Response(resp), Route::Direct);
    }

    fn broker_on_response(&mut self, ctx: &mut Ctx<'_>, resp: ResponseEnvelope) {
        let key = TokenKey::from(resp.ticket_token);
        if let Some((requester, _)) = pop_front(&mut self.broker.requests, key) {
            self.forward(ctx, requester, resp);
            return;
        }
        let q = self.broker.responses.entry(key).or_default();
        if !q.is_empty() {
            self.metrics.broker_duplicates += 1;
        }
        q.push_back((resp, ctx.now));
        ctx.timer(ctx.now + self.cfg.broker_timeout_ms, PeerTimer::BrokerResponse(key));
    }

    fn broker_on_request(&mut self, ctx: &mut Ctx<'_>, req: RequestForAnswer) {
        let key = TokenKey::from(req.ticket_token);
        if let Some((resp, _)) = pop_front(&mut self.broker.responses, key) {
            self.forward(ctx, req.requester, resp);
            return;
        }
        let q = self.broker.requests.entry(key).or_default();
        if !q.is_empty() {
            self.metrics.broker_duplicates += 1;
        }
        q.push_back((req.requester, ctx.now));
        ctx.timer(ctx.now + self.cfg.broker_timeout_ms, PeerTimer::BrokerRequest(key));
    }
}

/// The peer `me` sends to in one exchange round. Every peer derives the same
/// random cyclic order of the overlay from `(seed, round)`, so each one
/// receives exactly one batch per round.
pub fn exchange_partner(overlay: &OverlayDirectory, me: PeerId, seed: u64, round: u32) -> Option<PeerId> {
    let mut order: Vec<PeerId> = overlay.peers().iter().map(|r| r.peer_id).collect();
    if order.len() < 2 {
        return None;
    }
    order.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(round));
    order.shuffle(&mut rng);
    let i = order.iter().position(|p| *p == me)?;
    Some(order[(i + 1) % order.len()])
}

/// True if the per-member part of an encoded batch still carries any
/// member's clear coordinates as a client wrote them.
pub fn leaks_coordinates(encoded_batch: &[u8], coords: &[(String, String)]) -> bool {
    let Ok(offset) = crate::message::batch_members_offset(encoded_batch) else {
        return false;
    };
    let tail = &encoded_batch[offset..];
    coords.iter().any(|(lon, lat)| {
        let mut needle = Vec::new();
        for part in [lon, lat] {
            needle.extend_from_slice(&(part.len() as u32).to_be_bytes());
            needle.extend_from_slice(part.as_bytes());
        }
        tail.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}
