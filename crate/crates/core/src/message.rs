//! Every message that crosses the simulated network, with its byte encoding.

use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, FieldReader, FieldWriter, MessageKind};
use crate::envelope::{read_token, QueryEnvelope, RequestForAnswer, ResponseEnvelope, SealedQuery, Ticket};
use crate::geo::{GeoPoint, RingCoord, ZoneSide};
use crate::overlay::Address;

/// Spatiotemporal cloak: `((x1, y1), (x2, y2), (t1, t2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloakRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub t1: u64,
    pub t2: u64,
}

impl CloakRegion {
    pub fn contains(&self, p: &GeoPoint) -> bool {
        (self.x1..=self.x2).contains(&p.lon()) && (self.y1..=self.y2).contains(&p.lat())
    }

    pub fn centroid(&self) -> GeoPoint {
        GeoPoint::clamped((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    fn write(&self, w: &mut FieldWriter) {
        w.real(self.x1).real(self.y1).real(self.x2).real(self.y2).timestamp(self.t1).timestamp(self.t2);
    }

    fn read(r: &mut FieldReader<'_>) -> Result<Self, CodecError> {
        let region = CloakRegion {
            x1: r.real()?,
            y1: r.real()?,
            x2: r.real()?,
            y2: r.real()?,
            t1: r.timestamp()?,
            t2: r.timestamp()?,
        };
        if region.x1 > region.x2 || region.y1 > region.y2 || region.t1 > region.t2 {
            return Err(CodecError::Invalid("inverted cloak region".into()));
        }
        Ok(region)
    }
}

/// What the LBS receives: one region and the sealed parts of every member.
#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizedBatch {
    pub region: CloakRegion,
    pub anonymizer: Address,
    pub members: Vec<SealedQuery>,
}

/// A query waiting in an anonymizer, as handed to a collaborating neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct HandedQuery {
    pub envelope: QueryEnvelope,
    pub arrival_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Query(QueryEnvelope),
    Batch(AnonymizedBatch),
    Response(ResponseEnvelope),
    RequestForAnswer(RequestForAnswer),
    TicketBatch(Vec<Ticket>),
    TicketExchange { sender: Address, tickets: Vec<Ticket> },
    NonDelivery { ticket_token: RingCoord },
    CollabProbe { requester: Address, side: ZoneSide, waiting: u32 },
    CollabHandoff { side: ZoneSide, queries: Vec<HandedQuery> },
}

fn side_byte(side: ZoneSide) -> u8 {
    match side {
        ZoneSide::LowLongitude => 0,
        ZoneSide::HighLongitude => 1,
    }
}

fn read_side(r: &mut FieldReader<'_>) -> Result<ZoneSide, CodecError> {
    match r.field()? {
        [0] => Ok(ZoneSide::LowLongitude),
        [1] => Ok(ZoneSide::HighLongitude),
        other => Err(CodecError::Invalid(format!("zone side {other:?}"))),
    }
}

fn write_tickets(w: &mut FieldWriter, tickets: &[Ticket]) {
    w.count(tickets.len());
    for t in tickets {
        w.field(&t.encode());
    }
}

fn read_tickets(r: &mut FieldReader<'_>) -> Result<Vec<Ticket>, CodecError> {
    let n = r.count()?;
    // Each ticket needs at least its 4-byte length prefix.
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        out.push(Ticket::decode(r.field()?)?);
    }
    Ok(out)
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Query(_) => MessageKind::Query,
            Message::Batch(_) => MessageKind::Batch,
            Message::Response(_) => MessageKind::Response,
            Message::RequestForAnswer(_) => MessageKind::RequestForAnswer,
            Message::TicketBatch(_) => MessageKind::TicketBatch,
            Message::TicketExchange { .. } => MessageKind::TicketExchange,
            Message::NonDelivery { .. } => MessageKind::NonDelivery,
            Message::CollabProbe { .. } => MessageKind::CollabProbe,
            Message::CollabHandoff { .. } => MessageKind::CollabHandoff,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Message::Query(env) => env.encode(),
            Message::Response(resp) => resp.encode(),
            Message::RequestForAnswer(req) => req.encode(),
            other => {
                let mut w = FieldWriter::with_kind(other.kind());
                match other {
                    Message::Batch(b) => {
                        b.region.write(&mut w);
                        w.text(b.anonymizer.as_str()).count(b.members.len());
                        for m in &b.members {
                            w.field(&m.sealed_payload).field(&m.sealed_key);
                        }
                    }
                    Message::TicketBatch(tickets) => write_tickets(&mut w, tickets),
                    Message::TicketExchange { sender, tickets } => {
                        w.text(sender.as_str());
                        write_tickets(&mut w, tickets);
                    }
                    Message::NonDelivery { ticket_token } => {
                        w.real(ticket_token.value());
                    }
                    Message::CollabProbe { requester, side, waiting } => {
                        w.text(requester.as_str()).field(&[side_byte(*side)]).count(*waiting as usize);
                    }
                    Message::CollabHandoff { side, queries } => {
                        w.field(&[side_byte(*side)]).count(queries.len());
                        for q in queries {
                            q.envelope.write_body(&mut w);
                            w.timestamp(q.arrival_ms);
                        }
                    }
                    Message::Query(_) | Message::Response(_) | Message::RequestForAnswer(_) => unreachable!(),
                }
                w.finish()
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let kind = FieldReader::new(bytes).kind()?;
        match kind {
            MessageKind::Query => return QueryEnvelope::decode(bytes).map(Message::Query),
            MessageKind::Response => return ResponseEnvelope::decode(bytes).map(Message::Response),
            MessageKind::RequestForAnswer => return RequestForAnswer::decode(bytes).map(Message::RequestForAnswer),
            _ => {}
        }
        let mut r = FieldReader::expect_kind(bytes, kind)?;
        let msg = match kind {
            MessageKind::Batch => {
                let region = CloakRegion::read(&mut r)?;
                let anonymizer = Address::new(r.text()?);
                let n = r.count()?;
                let mut members = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    members.push(SealedQuery {
                        sealed_payload: r.field()?.to_vec(),
                        sealed_key: r.field()?.to_vec(),
                    });
                }
                Message::Batch(AnonymizedBatch {
                    region,
                    anonymizer,
                    members,
                })
            }
            MessageKind::TicketBatch => Message::TicketBatch(read_tickets(&mut r)?),
            MessageKind::TicketExchange => {
                let sender = Address::new(r.text()?);
                Message::TicketExchange {
                    sender,
                    tickets: read_tickets(&mut r)?,
                }
            }
            MessageKind::NonDelivery => Message::NonDelivery {
                ticket_token: read_token(&mut r)?,
            },
            MessageKind::CollabProbe => Message::CollabProbe {
                requester: Address::new(r.text()?),
                side: read_side(&mut r)?,
                waiting: u32::try_from(r.count()?).expect("read from 4 bytes"),
            },
            MessageKind::CollabHandoff => {
                let side = read_side(&mut r)?;
                let n = r.count()?;
                let mut queries = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    let envelope = QueryEnvelope::read_body(&mut r)?;
                    queries.push(HandedQuery {
                        envelope,
                        arrival_ms: r.timestamp()?,
                    });
                }
                Message::CollabHandoff { side, queries }
            }
            MessageKind::Query | MessageKind::Response | MessageKind::RequestForAnswer => unreachable!(),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Offset of the member list inside an encoded batch; everything after it is
/// per-member data.
pub fn batch_members_offset(encoded: &[u8]) -> Result<usize, CodecError> {
    let mut r = FieldReader::expect_kind(encoded, MessageKind::Batch)?;
    CloakRegion::read(&mut r)?;
    r.text()?;
    r.count()?;
    Ok(encoded.len() - r.remaining())
}
