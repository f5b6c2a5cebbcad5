//! Deterministic fixture data: the POI store file and one encoded sample of
//! every wire message kind.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::{ChaChaPoly, ServerKeyPair, SymmetricScheme};
use crate::envelope::{build_query, mint_ticket, RequestForAnswer, ResponseEnvelope};
use crate::geo::{GeoPoint, ZoneSide};
use crate::lbs::PoiStore;
use crate::message::{AnonymizedBatch, CloakRegion, HandedQuery, Message};
use crate::overlay::{Address, PeerId};
use crate::peer::cloak;

pub const POI_FILE: &str = "pois.csv";

/// Server keys the wire fixtures are sealed to, derived from `seed`.
pub fn fixture_keys(seed: u64) -> ServerKeyPair {
    ServerKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// `(file name, bytes)` for one message of each kind. The clock is fixed at
/// 1,000 ms and tickets stay valid for an hour.
pub fn wire_fixtures(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    let keys = fixture_keys(seed);
    let pk = keys.public();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let now = 1_000;
    let tickets: Vec<_> = (0..3).map(|_| mint_ticket(&keys, &mut rng, now, 3_600_000)).collect();
    let broker = Address::for_peer(PeerId(7));
    let prop_key = ChaChaPoly::generate_key(&mut rng);
    let loc = GeoPoint::new(13.404954, 52.520008).expect("on the map");
    let query = build_query(loc, "nearest:cafe", &tickets[0], &broker, &prop_key, &pk, now, &mut rng)
        .expect("fresh ticket");
    let region: CloakRegion = cloak(&[loc], 0.01, now, now + 5_000);
    let messages = vec![
        ("query.bin", Message::Query(query.clone())),
        (
            "batch.bin",
            Message::Batch(AnonymizedBatch {
                region,
                anonymizer: Address::for_peer(PeerId(3)),
                members: vec![query.sealed.clone()],
            }),
        ),
        (
            "response.bin",
            Message::Response(ResponseEnvelope::seal(tickets[0].token(), "nearest:12", &prop_key, &mut rng)),
        ),
        (
            "request_for_answer.bin",
            Message::RequestForAnswer(RequestForAnswer {
                ticket_token: tickets[0].token(),
                requester: Address::for_peer(PeerId(1)),
            }),
        ),
        ("ticket_batch.bin", Message::TicketBatch(tickets.clone())),
        (
            "ticket_exchange.bin",
            Message::TicketExchange {
                sender: Address::for_peer(PeerId(2)),
                tickets: tickets[1..].to_vec(),
            },
        ),
        (
            "non_delivery.bin",
            Message::NonDelivery {
                ticket_token: tickets[1].token(),
            },
        ),
        (
            "collab_probe.bin",
            Message::CollabProbe {
                requester: Address::for_peer(PeerId(3)),
                side: ZoneSide::LowLongitude,
                waiting: 2,
            },
        ),
        (
            "collab_handoff.bin",
            Message::CollabHandoff {
                side: ZoneSide::LowLongitude,
                queries: vec![HandedQuery {
                    envelope: query,
                    arrival_ms: now,
                }],
            },
        ),
    ];
    messages.into_iter().map(|(name, m)| (name, m.encode())).collect()
}

/// Writes the POI fixture and the wire fixtures into `dir`, returning the
/// number of POI records.
pub fn write_fixtures(dir: &Path, seed: u64, poi_count: usize) -> std::io::Result<usize> {
    std::fs::create_dir_all(dir)?;
    let store = PoiStore::generate(seed, poi_count);
    std::fs::write(dir.join(POI_FILE), store.to_fixture())?;
    let wire = dir.join("wire");
    std::fs::create_dir_all(&wire)?;
    for (name, bytes) in wire_fixtures(seed) {
        std::fs::write(wire.join(name), bytes)?;
    }
    Ok(store.len())
}
