//! The DHT ring: peers ordered by their random ring coordinate (RA).
//!
//! A key is owned by the peer whose RA is nearest to it; equal distances go to
//! the lower RA and equal RAs to the lower peer id. Each peer also keeps four
//! successors and four predecessors, the n-th being `2^(n-1)` positions away
//! in the cyclic RA order. Those tables are maintained incrementally on join
//! and leave.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{RingCoord, RING_BOUND};

/// Number of successor (and predecessor) entries per finger table.
pub const FINGER_COUNT: usize = 4;
/// Furthest ring position a finger table can point at.
const FINGER_REACH: usize = 1 << (FINGER_COUNT - 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId(pub u32);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "peer-{}", self.0)
    }
}

/// Network endpoint of a peer, e.g. `10.0.0.7:7400`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address(String);

impl Address {
    pub fn new(s: impl Into<String>) -> Self {
        Address(s.into())
    }

    /// Deterministic address for simulated peers.
    pub fn for_peer(id: PeerId) -> Self {
        Address(format!("10.{}.{}.{}:7400", (id.0 >> 16) & 0xff, (id.0 >> 8) & 0xff, id.0 & 0xff))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub peer_id: PeerId,
    pub ra: RingCoord,
    pub address: Address,
}

impl PeerRecord {
    pub fn new(peer_id: PeerId, ra: RingCoord, address: Address) -> Self {
        Self { peer_id, ra, address }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerTable {
    pub successors: Vec<PeerRecord>,
    pub predecessors: Vec<PeerRecord>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OverlayError {
    #[error("overlay is empty: no peer is responsible for the key")]
    NoResponsiblePeer,
    #[error("{0} is already a member of the overlay")]
    DuplicatePeer(PeerId),
    #[error("{0} is not a member of the overlay")]
    UnknownPeer(PeerId),
}

#[derive(Debug, Clone, Default)]
pub struct OverlayDirectory {
    /// Sorted by `(ra, peer_id)`.
    peers: Vec<PeerRecord>,
    fingers: BTreeMap<PeerId, FingerTable>,
}

fn order(a: &PeerRecord, b: &PeerRecord) -> std::cmp::Ordering {
    a.ra.total_cmp(&b.ra).then(a.peer_id.cmp(&b.peer_id))
}

impl OverlayDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    /// Peers in RA order.
    pub fn peers(&self) -> &[PeerRecord] {
        &self.peers
    }

    pub fn contains(&self, id: PeerId) -> bool {
        self.fingers.contains_key(&id)
    }

    pub fn get(&self, id: PeerId) -> Option<&PeerRecord> {
        self.position(id).map(|i| &self.peers[i])
    }

    pub fn by_address(&self, address: &Address) -> Option<&PeerRecord> {
        self.peers.iter().find(|p| &p.address == address)
    }

    pub fn finger_table(&self, id: PeerId) -> Option<&FingerTable> {
        self.fingers.get(&id)
    }

    fn position(&self, id: PeerId) -> Option<usize> {
        if !self.contains(id) {
            return None;
        }
        self.peers.iter().position(|p| p.peer_id == id)
    }

    fn lookup_index(&self, key: RingCoord) -> Result<usize, OverlayError> {
        if self.peers.is_empty() {
            return Err(OverlayError::NoResponsiblePeer);
        }
        let k = key.value();
        let right = self.peers.partition_point(|p| p.ra.value() < k);
        let winner_ra = match (right.checked_sub(1), self.peers.get(right)) {
            (None, Some(r)) => r.ra.value(),
            (Some(l), None) => self.peers[l].ra.value(),
            (Some(l), Some(r)) => {
                let (lra, rra) = (self.peers[l].ra.value(), r.ra.value());
                if k - lra <= rra - k {
                    lra
                } else {
                    rra
                }
            }
            (None, None) => unreachable!("non-empty directory"),
        };
        // First record carrying the winning RA has the lowest peer id.
        Ok(self.peers.partition_point(|p| p.ra.value() < winner_ra))
    }

    /// The peer whose RA is nearest to `key`.
    pub fn lookup(&self, key: RingCoord) -> Result<&PeerRecord, OverlayError> {
        self.lookup_index(key).map(|i| &self.peers[i])
    }

    /// Adds a peer and returns its finger table.
    pub fn join(&mut self, record: PeerRecord) -> Result<FingerTable, OverlayError> {
        if self.contains(record.peer_id) {
            return Err(OverlayError::DuplicatePeer(record.peer_id));
        }
        let id = record.peer_id;
        let at = self.peers.partition_point(|p| order(p, &record).is_lt());
        self.peers.insert(at, record);
        self.fingers.insert(id, compute_fingers(&self.peers, at));
        self.refresh_around(at);
        Ok(self.fingers[&id].clone())
    }

    /// Removes a peer; the keys it owned fall to its former neighbours.
    pub fn leave(&mut self, id: PeerId) -> Result<PeerRecord, OverlayError> {
        let at = self.position(id).ok_or(OverlayError::UnknownPeer(id))?;
        let record = self.peers.remove(at);
        self.fingers.remove(&id);
        if !self.peers.is_empty() {
            self.refresh_around(at.min(self.peers.len() - 1));
        }
        Ok(record)
    }

    /// The closed key interval a peer is responsible for.
    pub fn zone_of_peer(&self, id: PeerId) -> Result<(f64, f64), OverlayError> {
        let at = self.position(id).ok_or(OverlayError::UnknownPeer(id))?;
        let ra = self.peers[at].ra.value();
        let lo = at.checked_sub(1).map_or(-RING_BOUND, |i| (self.peers[i].ra.value() + ra) / 2.0);
        let hi = self.peers.get(at + 1).map_or(RING_BOUND, |p| (p.ra.value() + ra) / 2.0);
        Ok((lo, hi))
    }

    /// Leaves and rejoins under a fresh RA drawn uniformly from `(-270, 270)`
    /// outside the span between its former neighbours' RAs, so the whole
    /// zone it held passes to those neighbours.
    pub fn rejoin_with_new_ra<R: Rng + ?Sized>(
        &mut self,
        id: PeerId,
        rng: &mut R,
    ) -> Result<RingCoord, OverlayError> {
        let (pred, succ) = self.neighbors(id)?;
        let lo = pred.map_or(-RING_BOUND, |p| p.ra.value());
        let hi = succ.map_or(RING_BOUND, |p| p.ra.value());
        let mut record = self.leave(id)?;
        let whole_ring = self.peers.is_empty();
        record.ra = loop {
            let ra = random_ra(rng);
            if whole_ring || !(lo..=hi).contains(&ra.value()) {
                break ra;
            }
        };
        let ra = record.ra;
        self.join(record)?;
        Ok(ra)
    }

    /// Recomputes finger tables of every peer whose entries may point across
    /// position `at`.
    fn refresh_around(&mut self, at: usize) {
        let n = self.peers.len();
        if n <= 2 * FINGER_REACH + 1 {
            for i in 0..n {
                let id = self.peers[i].peer_id;
                self.fingers.insert(id, compute_fingers(&self.peers, i));
            }
            return;
        }
        let reach = FINGER_REACH as isize;
        for d in -reach..=reach {
            let i = (at as isize + d).rem_euclid(n as isize) as usize;
            let id = self.peers[i].peer_id;
            self.fingers.insert(id, compute_fingers(&self.peers, i));
        }
    }

    /// Immediate neighbours in the linear RA order (no wraparound).
    pub fn neighbors(&self, id: PeerId) -> Result<(Option<&PeerRecord>, Option<&PeerRecord>), OverlayError> {
        let at = self.position(id).ok_or(OverlayError::UnknownPeer(id))?;
        let pred = at.checked_sub(1).map(|i| &self.peers[i]);
        Ok((pred, self.peers.get(at + 1)))
    }

    /// Next peer in cyclic RA order; a lone peer is its own successor.
    pub fn ring_successor(&self, id: PeerId) -> Result<&PeerRecord, OverlayError> {
        self.finger_table(id)
            .map(|f| &f.successors[0])
            .ok_or(OverlayError::UnknownPeer(id))
    }

    /// Length of the greedy route from `from` to the owner of `key`.
    ///
    /// Each hop moves to whichever routing finger is nearest to the key. The
    /// routing fingers are the `2^k`-th successors and predecessors for
    /// `k < max(4, ceil(log2 n))`; the first four are the finger table.
    pub fn route_hops(&self, from: PeerId, key: RingCoord) -> Result<usize, OverlayError> {
        let target = self.lookup_index(key)?;
        let mut cur = self.position(from).ok_or(OverlayError::UnknownPeer(from))?;
        let n = self.peers.len();
        let levels = routing_levels(n);
        let metric = |i: usize| (self.peers[i].ra.distance(key), i.abs_diff(target));
        let mut hops = 0;
        while cur != target {
            let mut best = cur;
            for k in 0..levels {
                let step = (1usize << k) % n;
                for cand in [(cur + step) % n, (cur + n - step) % n] {
                    if metric(cand) < metric(best) {
                        best = cand;
                    }
                }
            }
            debug_assert_ne!(best, cur, "greedy routing must make progress");
            cur = best;
            hops += 1;
        }
        Ok(hops)
    }
}

fn routing_levels(n: usize) -> usize {
    let log = usize::BITS - n.saturating_sub(1).leading_zeros();
    (log as usize).max(FINGER_COUNT)
}

fn compute_fingers(peers: &[PeerRecord], at: usize) -> FingerTable {
    let n = peers.len();
    let pick = |offset: usize, forward: bool| {
        let off = offset % n;
        let i = if forward { (at + off) % n } else { (at + n - off) % n };
        peers[i].clone()
    };
    FingerTable {
        successors: (0..FINGER_COUNT).map(|k| pick(1 << k, true)).collect(),
        predecessors: (0..FINGER_COUNT).map(|k| pick(1 << k, false)).collect(),
    }
}

/// Uniform draw from the open interval `(-270, 270)`.
pub fn random_ra<R: Rng + ?Sized>(rng: &mut R) -> RingCoord {
    loop {
        let v = rng.gen_range(-RING_BOUND..RING_BOUND);
        if v != -RING_BOUND {
            return RingCoord::new(v).expect("drawn inside ring bounds");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(id: u32, ra: f64) -> PeerRecord {
        PeerRecord::new(PeerId(id), RingCoord::new(ra).unwrap(), Address::for_peer(PeerId(id)))
    }

    fn key(v: f64) -> RingCoord {
        RingCoord::new(v).unwrap()
    }

    fn dir(ras: &[f64]) -> OverlayDirectory {
        let mut d = OverlayDirectory::new();
        for (i, &ra) in ras.iter().enumerate() {
            d.join(rec(i as u32, ra)).unwrap();
        }
        d
    }

    #[test]
    fn empty_lookup_fails() {
        assert_eq!(OverlayDirectory::new().lookup(key(0.0)), Err(OverlayError::NoResponsiblePeer));
    }

    #[test]
    fn single_peer_owns_everything() {
        let d = dir(&[0.0]);
        for k in [-270.0, -3.0, 0.0, 269.9] {
            assert_eq!(d.lookup(key(k)).unwrap().peer_id, PeerId(0));
        }
    }

    #[test]
    fn tie_goes_to_lower_ra() {
        let d = dir(&[10.0, -10.0]);
        assert_eq!(d.lookup(key(0.0)).unwrap().ra.value(), -10.0);
    }

    #[test]
    fn equal_ra_goes_to_lower_id() {
        let mut d = OverlayDirectory::new();
        d.join(rec(7, 5.0)).unwrap();
        d.join(rec(3, 5.0)).unwrap();
        d.join(rec(9, -20.0)).unwrap();
        assert_eq!(d.lookup(key(4.0)).unwrap().peer_id, PeerId(3));
        assert_eq!(d.lookup(key(100.0)).unwrap().peer_id, PeerId(3));
    }

    #[test]
    fn rescaled_dht_figure_example() {
        // Ten peers on a 0..4096 identifier space, rescaled onto (-270, 270);
        // the data hash 2465 is owned by the peer at 2136.
        let scale = |v: f64| v / 4096.0 * 540.0 - 270.0;
        let ids = [120.0, 600.0, 1010.0, 1500.0, 2136.0, 2900.0, 3100.0, 3500.0, 3800.0, 4000.0];
        let d = dir(&ids.map(scale));
        assert_eq!(d.lookup(key(scale(2465.0))).unwrap().peer_id, PeerId(4));
    }

    #[test]
    fn join_into_empty_points_at_self() {
        let mut d = OverlayDirectory::new();
        let ft = d.join(rec(1, 3.0)).unwrap();
        assert!(ft.successors.iter().chain(&ft.predecessors).all(|p| p.peer_id == PeerId(1)));
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn duplicate_join_and_unknown_leave_rejected() {
        let mut d = dir(&[1.0]);
        assert_eq!(d.join(rec(0, 2.0)), Err(OverlayError::DuplicatePeer(PeerId(0))));
        assert_eq!(d.leave(PeerId(5)).unwrap_err(), OverlayError::UnknownPeer(PeerId(5)));
    }

    #[test]
    fn leave_only_peer_empties() {
        let mut d = dir(&[1.0]);
        d.leave(PeerId(0)).unwrap();
        assert!(d.is_empty());
        assert!(d.finger_table(PeerId(0)).is_none());
    }

    #[test]
    fn leave_splits_interval_between_neighbours() {
        let mut d = dir(&[-5.0, 0.0, 5.0]);
        assert_eq!(d.lookup(key(0.0)).unwrap().peer_id, PeerId(1));
        d.leave(PeerId(1)).unwrap();
        assert_eq!(d.lookup(key(0.0)).unwrap().peer_id, PeerId(0));
        assert_eq!(d.lookup(key(-1.0)).unwrap().peer_id, PeerId(0));
        assert_eq!(d.lookup(key(1.0)).unwrap().peer_id, PeerId(2));
    }

    #[test]
    fn nine_even_peers_have_power_of_two_fingers() {
        let ras: Vec<f64> = (0..9).map(|i| -200.0 + 50.0 * i as f64).collect();
        let d = dir(&ras);
        for i in 0..9usize {
            let ft = d.finger_table(PeerId(i as u32)).unwrap();
            for (n, s) in ft.successors.iter().enumerate() {
                assert_eq!(s.peer_id.0 as usize, (i + (1 << n)) % 9);
            }
            for (n, p) in ft.predecessors.iter().enumerate() {
                assert_eq!(p.peer_id.0 as usize, (i + 9 - (1 << n)) % 9);
            }
            let mut s: Vec<_> = ft.successors.iter().map(|p| p.peer_id).collect();
            s.dedup();
            assert_eq!(s.len(), 4);
        }
    }

    #[test]
    fn rejoin_is_seeded_and_conserves_size() {
        let base = dir(&[-100.0, -10.0, 40.0, 200.0]);
        let mut a = base.clone();
        let mut b = base.clone();
        let ra_a = a.rejoin_with_new_ra(PeerId(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ra_b = b.rejoin_with_new_ra(PeerId(2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(ra_a, ra_b);
        assert_eq!(a.len(), 4);
        assert_eq!(a.get(PeerId(2)).unwrap().ra, ra_a);
        assert!(!a.peers().iter().any(|p| p.ra.value() == 40.0));
    }

    #[test]
    fn rejoin_hands_whole_zone_to_neighbours() {
        for seed in 0..50 {
            let mut d = dir(&[-100.0, -10.0, 40.0, 200.0]);
            let (lo, hi) = d.zone_of_peer(PeerId(2)).unwrap();
            d.rejoin_with_new_ra(PeerId(2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for i in 0..=100 {
                let k = lo + (hi - lo) * f64::from(i) / 100.0;
                let owner = d.lookup(key(k)).unwrap().peer_id;
                assert!(owner == PeerId(1) || owner == PeerId(3), "seed {seed} key {k}: {owner}");
            }
        }
    }

    #[test]
    fn route_hops_trivial_cases() {
        let d = dir(&[0.0]);
        assert_eq!(d.route_hops(PeerId(0), key(100.0)).unwrap(), 0);
        let d = dir(&[-50.0, 0.0, 50.0]);
        assert_eq!(d.route_hops(PeerId(0), key(0.0)).unwrap(), 1);
        assert_eq!(d.route_hops(PeerId(1), key(0.0)).unwrap(), 0);
    }

    #[test]
    fn routing_levels_grow_logarithmically() {
        assert_eq!(routing_levels(1), 4);
        assert_eq!(routing_levels(16), 4);
        assert_eq!(routing_levels(17), 5);
        assert_eq!(routing_levels(128), 7);
        assert_eq!(routing_levels(129), 8);
    }
}
