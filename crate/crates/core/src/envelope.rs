//! Tickets and the hybrid-encrypted query/response envelopes.
//!
//! A query travels as four strings: longitude and latitude in clear text,
//! `(query text, ticket, broker address)` sealed under a fresh proposed key,
//! and the proposed key encrypted to the server. Whoever lacks the server's
//! private key sees the location and nothing else.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{format_real, parse_real, CodecError, FieldReader, FieldWriter, MessageKind};
use crate::crypto::{
    AsymmetricScheme, ChaChaPoly, CryptoError, ServerKeyPair, ServerPublicKey, SymmetricKey, SymmetricScheme,
    X25519Ed25519,
};
use crate::geo::{GeoPoint, RingCoord};
use crate::overlay::{random_ra, Address};

/// Known string every genuine ticket carries.
pub const VALIDITY_MARKER: &[u8] = b"server";

/// Identity of a ticket for single-use bookkeeping: the bit pattern of its token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenKey(pub u64);

impl From<RingCoord> for TokenKey {
    fn from(r: RingCoord) -> Self {
        TokenKey(r.value().to_bits())
    }
}

impl fmt::Display for TokenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", f64::from_bits(self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TicketError {
    #[error("ticket signature does not verify")]
    BadSignature,
    #[error("ticket carries the wrong validity marker")]
    WrongMarker,
    #[error("ticket expired")]
    Expired,
}

/// Single-use, server-signed capability. The token picks the broker.
#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    token: RingCoord,
    validity_marker: Vec<u8>,
    expiry_ms: u64,
    /// Server-signed encoding of the three fields above.
    signed: Vec<u8>,
}

fn ticket_body(token: RingCoord, marker: &[u8], expiry_ms: u64) -> Vec<u8> {
    let mut w = FieldWriter::new();
    w.real(token.value()).field(marker).timestamp(expiry_ms);
    w.finish()
}

fn parse_ticket_body(body: &[u8]) -> Result<(RingCoord, Vec<u8>, u64), CodecError> {
    let mut r = FieldReader::new(body);
    let token = RingCoord::new(r.real()?).map_err(|e| CodecError::Invalid(e.to_string()))?;
    let marker = r.field()?.to_vec();
    let expiry = r.timestamp()?;
    r.finish()?;
    Ok((token, marker, expiry))
}

impl Ticket {
    /// Signs arbitrary ticket contents. Only [`mint_ticket`] should be used
    /// for genuine tickets; this exists for fixtures and negative tests.
    pub fn sign_raw(keys: &ServerKeyPair, token: RingCoord, marker: &[u8], expiry_ms: u64) -> Self {
        let signed = X25519Ed25519::sign_with_private(keys, &ticket_body(token, marker, expiry_ms));
        Ticket {
            token,
            validity_marker: marker.to_vec(),
            expiry_ms,
            signed,
        }
    }

    pub fn token(&self) -> RingCoord {
        self.token
    }

    pub fn key(&self) -> TokenKey {
        self.token.into()
    }

    pub fn expiry_ms(&self) -> u64 {
        self.expiry_ms
    }

    pub fn validity_marker(&self) -> &[u8] {
        &self.validity_marker
    }

    pub fn is_expired(&self, now_ms: u64) -> bool {
        now_ms >= self.expiry_ms
    }

    /// Signature, marker, then expiry.
    pub fn verify(&self, pk: &ServerPublicKey, now_ms: u64) -> Result<(), TicketError> {
        let body = X25519Ed25519::verify_with_public(pk, &self.signed).map_err(|_| TicketError::BadSignature)?;
        let (token, marker, expiry) = parse_ticket_body(&body).map_err(|_| TicketError::BadSignature)?;
        if token.value().to_bits() != self.token.value().to_bits() || expiry != self.expiry_ms {
            return Err(TicketError::BadSignature);
        }
        if marker != VALIDITY_MARKER || self.validity_marker != VALIDITY_MARKER {
            return Err(TicketError::WrongMarker);
        }
        if self.is_expired(now_ms) {
            return Err(TicketError::Expired);
        }
        Ok(())
    }

    /// The wire form is the signed blob; the clear fields are recovered from it.
    pub fn encode(&self) -> Vec<u8> {
        self.signed.clone()
    }

    /// Parses without checking the signature (that is [`Ticket::verify`]'s job).
    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        const SIG_LEN: usize = 64;
        if bytes.len() < SIG_LEN {
            return Err(CodecError::Truncated);
        }
        let (token, validity_marker, expiry_ms) = parse_ticket_body(&bytes[SIG_LEN..])?;
        Ok(Ticket {
            token,
            validity_marker,
            expiry_ms,
            signed: bytes.to_vec(),
        })
    }
}

/// Server-side ticket issue: a uniform token in `(-270, 270)` tagged with
/// the known marker.
pub fn mint_ticket<R: RngCore + ?Sized>(keys: &ServerKeyPair, rng: &mut R, now_ms: u64, validity_ms: u64) -> Ticket {
    let token = random_ra(rng);
    Ticket::sign_raw(keys, token, VALIDITY_MARKER, now_ms.saturating_add(validity_ms))
}

/// The two opaque parts of a query; what survives anonymization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedQuery {
    pub sealed_payload: Vec<u8>,
    pub sealed_key: Vec<u8>,
}

/// The four-part message a client sends to its anonymizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEnvelope {
    pub longitude_text: String,
    pub latitude_text: String,
    pub sealed: SealedQuery,
}

impl QueryEnvelope {
    pub fn location(&self) -> Result<GeoPoint, EnvelopeError> {
        let lon = parse_real(&self.longitude_text)?;
        let lat = parse_real(&self.latitude_text)?;
        GeoPoint::new(lon, lat).map_err(|e| EnvelopeError::Malformed(CodecError::Invalid(e.to_string())))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::with_kind(MessageKind::Query);
        w.text(&self.longitude_text)
            .text(&self.latitude_text)
            .field(&self.sealed.sealed_payload)
            .field(&self.sealed.sealed_key);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = FieldReader::expect_kind(bytes, MessageKind::Query)?;
        let env = Self::read_body(&mut r)?;
        r.finish()?;
        Ok(env)
    }

    pub(crate) fn read_body(r: &mut FieldReader<'_>) -> Result<Self, CodecError> {
        Ok(QueryEnvelope {
            longitude_text: r.text()?.to_owned(),
            latitude_text: r.text()?.to_owned(),
            sealed: SealedQuery {
                sealed_payload: r.field()?.to_vec(),
                sealed_key: r.field()?.to_vec(),
            },
        })
    }

    pub(crate) fn write_body(&self, w: &mut FieldWriter) {
        w.text(&self.longitude_text)
            .text(&self.latitude_text)
            .field(&self.sealed.sealed_payload)
            .field(&self.sealed.sealed_key);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("malformed encoding: {0}")]
    Malformed(#[from] CodecError),
    #[error("sealed field failed authentication")]
    Authentication,
    #[error("invalid ticket: {0}")]
    InvalidTicket(TicketError),
    #[error("ticket expired")]
    ExpiredTicket,
}

impl From<TicketError> for EnvelopeError {
    fn from(e: TicketError) -> Self {
        match e {
            TicketError::Expired => EnvelopeError::ExpiredTicket,
            other => EnvelopeError::InvalidTicket(other),
        }
    }
}

impl From<CryptoError> for EnvelopeError {
    fn from(_: CryptoError) -> Self {
        EnvelopeError::Authentication
    }
}

/// Everything the server learns from one opened query.
#[derive(Debug, Clone)]
pub struct OpenedQuery {
    pub query_text: String,
    pub ticket: Ticket,
    pub broker_address: Address,
    pub prop_key: SymmetricKey,
}

#[allow(clippy::too_many_arguments)]
pub fn build_query<R: RngCore + ?Sized>(
    location: GeoPoint,
    query_text: &str,
    ticket: &Ticket,
    broker_address: &Address,
    prop_key: &SymmetricKey,
    server_pk: &ServerPublicKey,
    now_ms: u64,
    rng: &mut R,
) -> Result<QueryEnvelope, EnvelopeError> {
    ticket.verify(server_pk, now_ms)?;
    let mut inner = FieldWriter::new();
    inner
        .text(query_text)
        .field(&ticket.encode())
        .text(broker_address.as_str());
    Ok(QueryEnvelope {
        longitude_text: format_real(location.lon()),
        latitude_text: format_real(location.lat()),
        sealed: seal_parts(&inner.finish(), prop_key, server_pk, rng),
    })
}

fn seal_parts<R: RngCore + ?Sized>(
    inner: &[u8],
    prop_key: &SymmetricKey,
    server_pk: &ServerPublicKey,
    rng: &mut R,
) -> SealedQuery {
    SealedQuery {
        sealed_payload: ChaChaPoly::seal(prop_key, inner, rng),
        sealed_key: X25519Ed25519::encrypt_with_public(server_pk, prop_key.as_bytes(), rng),
    }
}

/// Server side: recovers the sealed parts and validates the ticket.
pub fn open_sealed(sealed: &SealedQuery, keys: &ServerKeyPair, now_ms: u64) -> Result<OpenedQuery, EnvelopeError> {
    let key_bytes = X25519Ed25519::decrypt_with_private(keys, &sealed.sealed_key)?;
    let prop_key = SymmetricKey::try_from_slice(&key_bytes)
        .ok_or_else(|| CodecError::Invalid(format!("proposed key of {} bytes", key_bytes.len())))?;
    let inner = ChaChaPoly::open(&prop_key, &sealed.sealed_payload)?;
    let mut r = FieldReader::new(&inner);
    let query_text = r.text()?.to_owned();
    let ticket = Ticket::decode(r.field()?)?;
    let broker_address = Address::new(r.text()?);
    r.finish()?;
    ticket.verify(&keys.public(), now_ms)?;
    Ok(OpenedQuery {
        query_text,
        ticket,
        broker_address,
        prop_key,
    })
}

/// Opens a full client envelope, returning its clear location as well.
pub fn open_query(
    env: &QueryEnvelope,
    keys: &ServerKeyPair,
    now_ms: u64,
) -> Result<(GeoPoint, OpenedQuery), EnvelopeError> {
    let location = env.location()?;
    Ok((location, open_sealed(&env.sealed, keys, now_ms)?))
}

/// Sealed answer on its way to the broker chosen by the ticket token.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseEnvelope {
    pub ticket_token: RingCoord,
    pub sealed_response: Vec<u8>,
}

impl ResponseEnvelope {
    pub fn seal<R: RngCore + ?Sized>(token: RingCoord, answer: &str, prop_key: &SymmetricKey, rng: &mut R) -> Self {
        ResponseEnvelope {
            ticket_token: token,
            sealed_response: ChaChaPoly::seal(prop_key, answer.as_bytes(), rng),
        }
    }

    pub fn open(&self, prop_key: &SymmetricKey) -> Result<String, EnvelopeError> {
        let bytes = ChaChaPoly::open(prop_key, &self.sealed_response)?;
        String::from_utf8(bytes).map_err(|_| EnvelopeError::Malformed(CodecError::Utf8))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::with_kind(MessageKind::Response);
        w.real(self.ticket_token.value()).field(&self.sealed_response);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = FieldReader::expect_kind(bytes, MessageKind::Response)?;
        let token = read_token(&mut r)?;
        let sealed_response = r.field()?.to_vec();
        r.finish()?;
        Ok(ResponseEnvelope {
            ticket_token: token,
            sealed_response,
        })
    }
}

pub(crate) fn read_token(r: &mut FieldReader<'_>) -> Result<RingCoord, CodecError> {
    RingCoord::new(r.real()?).map_err(|e| CodecError::Invalid(e.to_string()))
}

/// Client to broker: "send me the response for this token".
#[derive(Debug, Clone, PartialEq)]
pub struct RequestForAnswer {
    pub ticket_token: RingCoord,
    pub requester: Address,
}

impl RequestForAnswer {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::with_kind(MessageKind::RequestForAnswer);
        w.real(self.ticket_token.value()).text(self.requester.as_str());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = FieldReader::expect_kind(bytes, MessageKind::RequestForAnswer)?;
        let ticket_token = read_token(&mut r)?;
        let requester = Address::new(r.text()?);
        r.finish()?;
        Ok(RequestForAnswer { ticket_token, requester })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        rng: ChaCha8Rng,
        keys: ServerKeyPair,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let keys = ServerKeyPair::generate(&mut rng);
        Fixture { rng, keys }
    }

    fn build(f: &mut Fixture, text: &str, ticket: &Ticket, now: u64) -> Result<QueryEnvelope, EnvelopeError> {
        let key = ChaChaPoly::generate_key(&mut f.rng);
        let loc = GeoPoint::new(51.4, 35.7).unwrap();
        build_query(loc, text, ticket, &Address::new("10.0.0.9:7400"), &key, &f.keys.public(), now, &mut f.rng)
    }

    #[test]
    fn round_trip_recovers_everything() {
        let mut f = fixture();
        let ticket = mint_ticket(&f.keys, &mut f.rng, 0, 60_000);
        let env = build(&mut f, "nearest:hospital", &ticket, 10).unwrap();
        let decoded = QueryEnvelope::decode(&env.encode()).unwrap();
        let (loc, opened) = open_query(&decoded, &f.keys, 20).unwrap();
        assert_eq!(loc, GeoPoint::new(51.4, 35.7).unwrap());
        assert_eq!(opened.query_text, "nearest:hospital");
        assert_eq!(opened.ticket, ticket);
        assert_eq!(opened.broker_address, Address::new("10.0.0.9:7400"));
    }

    #[test]
    fn empty_query_text_is_fine() {
        let mut f = fixture();
        let ticket = mint_ticket(&f.keys, &mut f.rng, 0, 60_000);
        let env = build(&mut f, "", &ticket, 0).unwrap();
        assert_eq!(open_query(&env, &f.keys, 0).unwrap().1.query_text, "");
    }

    #[test]
    fn expired_ticket_rejected_before_sealing() {
        let mut f = fixture();
        let ticket = mint_ticket(&f.keys, &mut f.rng, 0, 1_000);
        assert_eq!(build(&mut f, "x", &ticket, 1_000).unwrap_err(), EnvelopeError::ExpiredTicket);
    }

    #[test]
    fn expired_at_open_time() {
        let mut f = fixture();
        let ticket = mint_ticket(&f.keys, &mut f.rng, 0, 1_000);
        let env = build(&mut f, "x", &ticket, 500).unwrap();
        assert_eq!(open_query(&env, &f.keys, 1_000).unwrap_err(), EnvelopeError::ExpiredTicket);
    }

    #[test]
    fn wrong_marker_is_invalid() {
        let mut f = fixture();
        let forged = Ticket::sign_raw(&f.keys, RingCoord::new(3.0).unwrap(), b"client", 60_000);
        assert_eq!(
            forged.verify(&f.keys.public(), 0),
            Err(TicketError::WrongMarker)
        );
        // A client would refuse to build with it; seal by hand to reach the server.
        let key = ChaChaPoly::generate_key(&mut f.rng);
        let mut inner = FieldWriter::new();
        inner.text("q").field(&forged.encode()).text("10.0.0.1:7400");
        let sealed = seal_parts(&inner.finish(), &key, &f.keys.public(), &mut f.rng);
        assert_eq!(
            open_sealed(&sealed, &f.keys, 0).unwrap_err(),
            EnvelopeError::InvalidTicket(TicketError::WrongMarker)
        );
    }

    #[test]
    fn foreign_server_ticket_is_invalid() {
        let mut f = fixture();
        let other = ServerKeyPair::generate(&mut f.rng);
        let t = mint_ticket(&other, &mut f.rng, 0, 60_000);
        assert_eq!(t.verify(&f.keys.public(), 0), Err(TicketError::BadSignature));
        assert!(matches!(build(&mut f, "q", &t, 0), Err(EnvelopeError::InvalidTicket(_))));
    }

    #[test]
    fn ticket_wire_round_trip() {
        let mut f = fixture();
        let t = mint_ticket(&f.keys, &mut f.rng, 5, 100);
        let back = Ticket::decode(&t.encode()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.expiry_ms(), 105);
        assert!(back.verify(&f.keys.public(), 104).is_ok());
    }

    #[test]
    fn minting_is_seeded() {
        let keys = ServerKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(1));
        let a = mint_ticket(&keys, &mut ChaCha8Rng::seed_from_u64(2), 0, 10);
        let b = mint_ticket(&keys, &mut ChaCha8Rng::seed_from_u64(2), 0, 10);
        assert_eq!(a.token(), b.token());
    }

    #[test]
    fn response_opens_only_with_proposed_key() {
        let mut f = fixture();
        let k = ChaChaPoly::generate_key(&mut f.rng);
        let wrong = ChaChaPoly::generate_key(&mut f.rng);
        let r = ResponseEnvelope::seal(RingCoord::new(-1.5).unwrap(), "nearest:3:Clinic", &k, &mut f.rng);
        let r = ResponseEnvelope::decode(&r.encode()).unwrap();
        assert_eq!(r.open(&k).unwrap(), "nearest:3:Clinic");
        assert_eq!(r.open(&wrong).unwrap_err(), EnvelopeError::Authentication);
    }

    #[test]
    fn request_for_answer_round_trip() {
        let r = RequestForAnswer {
            ticket_token: RingCoord::new(12.25).unwrap(),
            requester: Address::new("10.0.0.4:7400"),
        };
        assert_eq!(RequestForAnswer::decode(&r.encode()).unwrap(), r);
    }
}
