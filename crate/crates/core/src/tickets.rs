//! Ticket pools, server-side issuance and the peer-to-peer exchange that
//! dilutes the server's knowledge of who holds which ticket.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{ServerKeyPair, ServerPublicKey};
use crate::envelope::{mint_ticket, Ticket, TokenKey, VALIDITY_MARKER};
use crate::overlay::{random_ra, PeerId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TicketsError {
    #[error("{0} is not a registered peer")]
    UnknownPeer(PeerId),
    #[error("tickets per batch must be positive")]
    ZeroBatch,
    #[error("exchanged per round ({exchanged}) exceeds tickets per batch ({batch})")]
    ExchangeExceedsBatch { exchanged: u32, batch: u32 },
    #[error("peer count must be positive")]
    ZeroPeers,
    #[error("at least one trial is required")]
    ZeroTrials,
}

/// A peer's tickets. A ticket leaves `owned` for `used` when it is attached
/// to an outgoing query and is never handed out again.
#[derive(Debug, Clone, Default)]
pub struct TicketPool {
    owned: Vec<Ticket>,
    used: HashSet<TokenKey>,
}

impl TicketPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.owned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owned.is_empty()
    }

    pub fn tickets(&self) -> &[Ticket] {
        &self.owned
    }

    pub fn is_used(&self, key: TokenKey) -> bool {
        self.used.contains(&key)
    }

    pub fn used_count(&self) -> usize {
        self.used.len()
    }

    pub fn add(&mut self, ticket: Ticket) {
        if !self.used.contains(&ticket.key()) {
            self.owned.push(ticket);
        }
    }

    pub fn extend(&mut self, tickets: impl IntoIterator<Item = Ticket>) {
        for t in tickets {
            self.add(t);
        }
    }

    /// Drops tickets that are expired at `now_ms`; returns how many.
    pub fn purge_expired(&mut self, now_ms: u64) -> usize {
        let before = self.owned.len();
        self.owned.retain(|t| !t.is_expired(now_ms));
        before - self.owned.len()
    }

    /// Picks a random ticket valid for at least `min_remaining_ms` more and
    /// marks it used.
    pub fn take_for_query<R: Rng + ?Sized>(&mut self, rng: &mut R, now_ms: u64, min_remaining_ms: u64) -> Option<Ticket> {
        let usable: Vec<usize> = (0..self.owned.len())
            .filter(|&i| self.owned[i].expiry_ms() > now_ms.saturating_add(min_remaining_ms))
            .collect();
        let &i = usable.choose(rng)?;
        let ticket = self.owned.swap_remove(i);
        self.used.insert(ticket.key());
        Some(ticket)
    }

    /// Removes `count` uniformly chosen tickets (fewer if the pool is smaller).
    pub fn take_for_exchange<R: Rng + ?Sized>(&mut self, rng: &mut R, count: usize) -> Vec<Ticket> {
        let len = self.owned.len();
        let count = count.min(len);
        for i in 0..count {
            let j = rng.gen_range(i..len);
            self.owned.swap(i, j);
        }
        self.owned.drain(..count).collect()
    }

    /// Validates tickets received from `sender`, keeping the good ones and
    /// charging the bad ones against the sender's trust.
    pub fn accept_exchange(
        &mut self,
        sender: PeerId,
        tickets: Vec<Ticket>,
        trust: &mut TrustList,
        server_pk: &ServerPublicKey,
        now_ms: u64,
    ) -> ExchangeReceipt {
        let mut receipt = ExchangeReceipt::default();
        if !trust.is_trusted(sender) {
            receipt.refused = tickets.len();
            return receipt;
        }
        for t in tickets {
            match t.verify(server_pk, now_ms) {
                Ok(()) => {
                    receipt.accepted += 1;
                    self.add(t);
                }
                Err(_) => {
                    receipt.invalid += 1;
                    if trust.record_invalid(sender) {
                        receipt.revoked = true;
                    }
                }
            }
        }
        receipt
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExchangeReceipt {
    pub accepted: usize,
    pub invalid: usize,
    /// Dropped unchecked because the sender is no longer trusted.
    pub refused: usize,
    /// The sender lost trust while processing this exchange.
    pub revoked: bool,
}

#[derive(Debug, Clone)]
pub struct TrustList {
    trusted: BTreeSet<PeerId>,
    invalid_counts: BTreeMap<PeerId, u32>,
    threshold: u32,
}

impl TrustList {
    pub fn new(trusted: impl IntoIterator<Item = PeerId>, threshold: u32) -> Self {
        assert!(threshold > 0, "trust threshold must be positive");
        Self {
            trusted: trusted.into_iter().collect(),
            invalid_counts: BTreeMap::new(),
            threshold,
        }
    }

    pub fn is_trusted(&self, peer: PeerId) -> bool {
        self.trusted.contains(&peer)
    }

    pub fn trust(&mut self, peer: PeerId) {
        if self.invalid_count(peer) <= self.threshold {
            self.trusted.insert(peer);
        }
    }

    pub fn invalid_count(&self, peer: PeerId) -> u32 {
        self.invalid_counts.get(&peer).copied().unwrap_or(0)
    }

    /// Counts one invalid ticket; returns true if this removed the peer.
    pub fn record_invalid(&mut self, peer: PeerId) -> bool {
        let c = self.invalid_counts.entry(peer).or_insert(0);
        *c += 1;
        *c > self.threshold && self.trusted.remove(&peer)
    }

    pub fn trusted(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.trusted.iter().copied()
    }
}

/// Server-side ticket state: the registry of authorized peers and the ledger
/// of which peer each token was issued to. The ledger is exactly what an
/// adversarial server could use to link queries.
#[derive(Debug)]
pub struct TicketIssuer {
    keys: ServerKeyPair,
    registry: BTreeSet<PeerId>,
    ledger: HashMap<TokenKey, PeerId>,
    validity_ms: u64,
}

impl TicketIssuer {
    pub fn new(keys: ServerKeyPair, validity_ms: u64) -> Self {
        Self {
            keys,
            registry: BTreeSet::new(),
            ledger: HashMap::new(),
            validity_ms,
        }
    }

    pub fn keys(&self) -> &ServerKeyPair {
        &self.keys
    }

    pub fn register(&mut self, peer: PeerId) {
        self.registry.insert(peer);
    }

    pub fn registry(&self) -> &BTreeSet<PeerId> {
        &self.registry
    }

    pub fn ledger(&self) -> &HashMap<TokenKey, PeerId> {
        &self.ledger
    }

    pub fn issued_to(&self, key: TokenKey) -> Option<PeerId> {
        self.ledger.get(&key).copied()
    }

    /// Mints `batch_size` fresh tickets for a registered peer.
    pub fn distribute_batch<R: RngCore + ?Sized>(
        &mut self,
        peer: PeerId,
        batch_size: usize,
        now_ms: u64,
        rng: &mut R,
    ) -> Result<Vec<Ticket>, TicketsError> {
        if !self.registry.contains(&peer) {
            return Err(TicketsError::UnknownPeer(peer));
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            let t = mint_ticket(&self.keys, rng, now_ms, self.validity_ms);
            // Token collisions are astronomically unlikely but would break single use.
            if self.ledger.contains_key(&t.key()) {
                continue;
            }
            self.ledger.insert(t.key(), peer);
            out.push(t);
        }
        Ok(out)
    }

    /// Issues one long-lived ticket outside the exchange economy. The
    /// pseudonym baseline hands each peer one of these as a fixed identity.
    pub fn issue_pseudonym<R: RngCore + ?Sized>(&mut self, peer: PeerId, expiry_ms: u64, rng: &mut R) -> Ticket {
        loop {
            let t = Ticket::sign_raw(&self.keys, random_ra(rng), VALIDITY_MARKER, expiry_ms);
            if let std::collections::hash_map::Entry::Vacant(e) = self.ledger.entry(t.key()) {
                e.insert(peer);
                return t;
            }
        }
    }
}

/// The quantities of the ownership formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeParams {
    /// Tickets each peer receives per distribution period.
    pub tickets_per_batch: u32,
    /// Tickets each peer hands on per round.
    pub exchanged_per_round: u32,
    pub rounds: u32,
    pub peers: u32,
}

impl ExchangeParams {
    pub fn new(tickets_per_batch: u32, exchanged_per_round: u32, rounds: u32, peers: u32) -> Result<Self, TicketsError> {
        let p = Self {
            tickets_per_batch,
            exchanged_per_round,
            rounds,
            peers,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TicketsError> {
        if self.tickets_per_batch == 0 {
            return Err(TicketsError::ZeroBatch);
        }
        if self.exchanged_per_round > self.tickets_per_batch {
            return Err(TicketsError::ExchangeExceedsBatch {
                exchanged: self.exchanged_per_round,
                batch: self.tickets_per_batch,
            });
        }
        if self.peers == 0 {
            return Err(TicketsError::ZeroPeers);
        }
        Ok(())
    }
}

/// Probability that a peer still holds server-attributed tickets after the
/// exchange:
///
/// `P = ((T-E)/T)^R + (E/T)^N * sum_{i=1}^{R-1} ((T-E)/T)^i`
pub fn ownership_probability(params: &ExchangeParams) -> Result<f64, TicketsError> {
    params.validate()?;
    let t = f64::from(params.tickets_per_batch);
    let e = f64::from(params.exchanged_per_round);
    let keep = (t - e) / t;
    let give = e / t;
    let first = keep.powi(params.rounds as i32);
    let sum: f64 = (1..params.rounds).map(|i| keep.powi(i as i32)).sum();
    Ok(first + give.powi(params.peers as i32) * sum)
}

/// Who a peer hands tickets to in a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExchangeTopology {
    /// Each peer sends to the next peer in this cyclic order (RA order in
    /// the overlay, so partners are adjacent).
    Ring(Vec<PeerId>),
    /// A fresh random cyclic order every round.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Conduct {
    #[default]
    Honest,
    /// Sends forged tickets instead of real ones.
    InjectInvalid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub sent: usize,
    pub accepted: usize,
    pub invalid: usize,
    pub refused: usize,
    pub revocations: usize,
}

/// Everything one synchronous exchange round needs besides the pools.
pub struct ExchangeContext<'a> {
    pub server_pk: &'a ServerPublicKey,
    pub now_ms: u64,
    pub conduct: &'a BTreeMap<PeerId, Conduct>,
    /// Signs forged tickets for misbehaving peers.
    pub forger: &'a ServerKeyPair,
}

/// One round: every peer sends `exchanged_per_round` uniformly chosen
/// tickets to its partner, provided it still trusts that partner. Receivers
/// validate and charge invalid tickets against the sender.
pub fn exchange_round<R: Rng + ?Sized>(
    pools: &mut BTreeMap<PeerId, TicketPool>,
    trust: &mut BTreeMap<PeerId, TrustList>,
    params: &ExchangeParams,
    topology: &ExchangeTopology,
    ctx: &ExchangeContext<'_>,
    rng: &mut R,
) -> RoundStats {
    let mut stats = RoundStats::default();
    let e = params.exchanged_per_round as usize;
    if e == 0 || pools.len() < 2 {
        return stats;
    }
    let order: Vec<PeerId> = match topology {
        ExchangeTopology::Ring(order) => order.iter().copied().filter(|p| pools.contains_key(p)).collect(),
        ExchangeTopology::UniformRandom => {
            let mut o: Vec<PeerId> = pools.keys().copied().collect();
            o.shuffle(rng);
            o
        }
    };
    let n = order.len();
    let mut in_flight = Vec::with_capacity(n);
    for (i, &sender) in order.iter().enumerate() {
        let receiver = order[(i + 1) % n];
        if receiver == sender || !trust.get(&sender).is_some_and(|t| t.is_trusted(receiver)) {
            continue;
        }
        let batch = match ctx.conduct.get(&sender).copied().unwrap_or_default() {
            Conduct::Honest => pools.get_mut(&sender).expect("sender has a pool").take_for_exchange(rng, e),
            Conduct::InjectInvalid => (0..e).map(|_| forged_ticket(ctx.forger, rng, ctx.now_ms + 60_000)).collect(),
        };
        stats.sent += batch.len();
        in_flight.push((sender, receiver, batch));
    }
    for (sender, receiver, batch) in in_flight {
        let (Some(pool), Some(tl)) = (pools.get_mut(&receiver), trust.get_mut(&receiver)) else {
            continue;
        };
        let r = pool.accept_exchange(sender, batch, tl, ctx.server_pk, ctx.now_ms);
        stats.accepted += r.accepted;
        stats.invalid += r.invalid;
        stats.refused += r.refused;
        stats.revocations += usize::from(r.revoked);
    }
    stats
}

/// Partner choice in the Monte-Carlo ownership estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum McTopology {
    /// Fixed successor on a ring of `peers`.
    Ring,
    /// Every holder picks a fresh uniformly random partner each round;
    /// partners within a round are distinct.
    UniformRandom,
}

/// Monte-Carlo estimate of the ownership probability: the mean fraction of
/// a tagged peer's pool that still consists of tickets originally issued to
/// it after `rounds` rounds. Tracks ticket provenance only, so it is cheap
/// enough for 10^5 trials.
pub fn ownership_probability_mc<R: Rng + ?Sized>(
    params: &ExchangeParams,
    topology: McTopology,
    rng: &mut R,
    trials: u32,
) -> Result<f64, TicketsError> {
    params.validate()?;
    if trials == 0 {
        return Err(TicketsError::ZeroTrials);
    }
    let t = params.tickets_per_batch;
    let e = params.exchanged_per_round;
    let n = params.peers;
    let mut total = 0.0;
    // (peer, tagged tickets held)
    let mut holders: Vec<(u32, u32)> = Vec::new();
    let mut next: BTreeMap<u32, u32> = BTreeMap::new();
    let mut targets: Vec<u32> = Vec::new();
    for _ in 0..trials {
        holders.clear();
        holders.push((0, t));
        for _ in 0..params.rounds {
            if e == 0 || n < 2 {
                break;
            }
            next.clear();
            targets.clear();
            for &(peer, held) in &holders {
                let sent = hypergeometric(rng, t, held, e);
                let to = match topology {
                    McTopology::Ring => (peer + 1) % n,
                    McTopology::UniformRandom => loop {
                        let c = rng.gen_range(0..n);
                        if c != peer && !targets.contains(&c) {
                            break c;
                        }
                    },
                };
                targets.push(to);
                if held > sent {
                    *next.entry(peer).or_default() += held - sent;
                }
                if sent > 0 {
                    *next.entry(to).or_default() += sent;
                }
            }
            holders.clear();
            holders.extend(next.iter().map(|(&p, &c)| (p, c)));
        }
        let own = holders.iter().find(|(p, _)| *p == 0).map_or(0, |&(_, c)| c);
        total += f64::from(own) / f64::from(t);
    }
    Ok(total / f64::from(trials))
}

/// Tagged items among `draws` taken without replacement from `population`
/// items of which `tagged` are tagged.
fn hypergeometric<R: Rng + ?Sized>(rng: &mut R, population: u32, tagged: u32, draws: u32) -> u32 {
    let (mut pop, mut tag, mut hit) = (population, tagged, 0);
    for _ in 0..draws {
        if tag == 0 {
            break;
        }
        if rng.gen_range(0..pop) < tag {
            hit += 1;
            tag -= 1;
        }
        pop -= 1;
    }
    hit
}

/// A well-formed ticket signed by a key other than the server's.
pub fn forged_ticket<R: Rng + ?Sized>(forger: &ServerKeyPair, rng: &mut R, expiry_ms: u64) -> Ticket {
    Ticket::sign_raw(forger, random_ra(rng), VALIDITY_MARKER, expiry_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(t: u32, e: u32, r: u32, n: u32) -> ExchangeParams {
        ExchangeParams::new(t, e, r, n).unwrap()
    }

    #[test]
    fn formula_boundaries() {
        for r in 1..6 {
            assert_eq!(ownership_probability(&params(10, 0, r, 50)).unwrap(), 1.0);
        }
        assert_eq!(ownership_probability(&params(10, 10, 1, 50)).unwrap(), 0.0);
        assert_eq!(ownership_probability(&params(10, 10, 4, 50)).unwrap(), 0.0);
        assert_eq!(ownership_probability(&params(10, 3, 0, 50)).unwrap(), 1.0);
    }

    #[test]
    fn formula_matches_hand_evaluation() {
        // 0.8^5 plus 0.2^50 * (0.8 + 0.8^2 + 0.8^3 + 0.8^4)
        let expected = 0.8f64.powi(5) + 0.2f64.powi(50) * (0.8 + 0.64 + 0.512 + 0.4096);
        let p = ownership_probability(&params(10, 2, 5, 50)).unwrap();
        assert_eq!(p, expected);
        assert!((p - 0.32768).abs() < 1e-12);
        // Small N keeps the second term visible: T=4, E=2, R=3, N=2.
        let p = ownership_probability(&params(4, 2, 3, 2)).unwrap();
        assert!((p - (0.125 + 0.25 * (0.5 + 0.25))).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert_eq!(ExchangeParams::new(0, 0, 1, 1), Err(TicketsError::ZeroBatch));
        assert!(matches!(ExchangeParams::new(5, 6, 1, 1), Err(TicketsError::ExchangeExceedsBatch { .. })));
        assert_eq!(ExchangeParams::new(5, 1, 1, 0), Err(TicketsError::ZeroPeers));
    }

    #[test]
    fn probability_nonincreasing_in_rounds() {
        for (t, e) in [(10, 2), (5, 1), (20, 10), (3, 2)] {
            let mut prev = f64::INFINITY;
            for r in 1..=50 {
                let p = ownership_probability(&params(t, e, r, 50)).unwrap();
                assert!(p <= prev + 1e-15, "T={t} E={e} R={r}");
                prev = p;
            }
        }
    }

    #[test]
    fn mc_boundaries_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(ownership_probability_mc(&params(10, 0, 5, 50), McTopology::UniformRandom, &mut rng, 1000).unwrap(), 1.0);
        assert_eq!(ownership_probability_mc(&params(10, 10, 1, 50), McTopology::Ring, &mut rng, 1000).unwrap(), 0.0);
        assert_eq!(ownership_probability_mc(&params(10, 2, 5, 50), McTopology::Ring, &mut rng, 0), Err(TicketsError::ZeroTrials));
    }

    #[test]
    fn hypergeometric_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let s: u64 = (0..n).map(|_| u64::from(hypergeometric(&mut rng, 10, 4, 3))).sum();
        // mean = draws * tagged / population = 1.2
        assert!((s as f64 / n as f64 - 1.2).abs() < 0.01);
    }

    #[test]
    fn trust_revoked_only_past_threshold() {
        let mut tl = TrustList::new([PeerId(1), PeerId(2)], 3);
        for _ in 0..3 {
            assert!(!tl.record_invalid(PeerId(1)));
            assert!(tl.is_trusted(PeerId(1)));
        }
        assert!(tl.record_invalid(PeerId(1)));
        assert!(!tl.is_trusted(PeerId(1)));
        assert!(!tl.record_invalid(PeerId(1)));
        tl.trust(PeerId(1));
        assert!(!tl.is_trusted(PeerId(1)), "revoked peers stay revoked");
        assert!(tl.is_trusted(PeerId(2)));
    }

    fn issuer(rng: &mut ChaCha8Rng, peers: &[u32]) -> TicketIssuer {
        let mut iss = TicketIssuer::new(ServerKeyPair::generate(rng), 60_000);
        for &p in peers {
            iss.register(PeerId(p));
        }
        iss
    }

    #[test]
    fn distribution_grows_pool_and_logs_recipient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut iss = issuer(&mut rng, &[1, 2]);
        let pk = iss.keys().public();
        let a = iss.distribute_batch(PeerId(1), 10, 0, &mut rng).unwrap();
        let b = iss.distribute_batch(PeerId(2), 10, 0, &mut rng).unwrap();
        let mut pool = TicketPool::new();
        pool.extend(a.clone());
        assert_eq!(pool.len(), 10);
        assert!(a.iter().chain(&b).all(|t| t.verify(&pk, 0).is_ok()));
        let ka: HashSet<_> = a.iter().map(Ticket::key).collect();
        assert!(b.iter().all(|t| !ka.contains(&t.key())));
        assert_eq!(iss.ledger().len(), 20);
        assert!(a.iter().all(|t| iss.issued_to(t.key()) == Some(PeerId(1))));
        assert!(b.iter().all(|t| iss.issued_to(t.key()) == Some(PeerId(2))));
        assert_eq!(iss.distribute_batch(PeerId(9), 1, 0, &mut rng), Err(TicketsError::UnknownPeer(PeerId(9))));
    }

    #[test]
    fn pool_marks_used_and_skips_near_expiry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut iss = issuer(&mut rng, &[1]);
        let mut pool = TicketPool::new();
        pool.extend(iss.distribute_batch(PeerId(1), 2, 0, &mut rng).unwrap());
        let t = pool.take_for_query(&mut rng, 0, 0).unwrap();
        assert!(pool.is_used(t.key()));
        pool.add(t.clone());
        assert_eq!(pool.len(), 1, "used ticket is never re-added");
        assert!(pool.take_for_query(&mut rng, 50_000, 10_000).is_none());
        assert_eq!(pool.purge_expired(60_000), 1);
        assert!(pool.is_empty());
    }
}
