use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use p4qs_core::config::{Protocol, SimConfig};
use p4qs_core::geo::{self as core_geo, GeoPoint, RingCoord, ZoneSide};
use p4qs_core::lbs::{PoiQuery, PoiStore};
use p4qs_core::message::{CloakRegion, Message};
use p4qs_core::overlay::{random_ra, Address, OverlayDirectory, PeerId, PeerRecord};
use p4qs_core::scenarios::{emit_report, run_scenario, Preset, ReportFormat};
use p4qs_core::simnet::SimError;
use p4qs_core::tickets::{self, ExchangeParams, McTopology};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn point(lon: f64, lat: f64) -> PyResult<GeoPoint> {
    GeoPoint::new(lon, lat).map_err(value_err)
}

/// Ring coordinate of a location (lon + lat).
#[pyfunction]
fn geo_hash(lon: f64, lat: f64) -> PyResult<f64> {
    Ok(core_geo::geo_hash(point(lon, lat)?).value())
}

/// `"low_longitude"` or `"high_longitude"`.
#[pyfunction]
fn zone_side(lon: f64, lat: f64) -> PyResult<&'static str> {
    Ok(match core_geo::zone_of(point(lon, lat)?) {
        ZoneSide::LowLongitude => "low_longitude",
        ZoneSide::HighLongitude => "high_longitude",
    })
}

#[pyfunction]
fn ownership_probability(tickets: u32, exchanged: u32, rounds: u32, peers: u32) -> PyResult<f64> {
    let params = ExchangeParams::new(tickets, exchanged, rounds, peers).map_err(value_err)?;
    tickets::ownership_probability(&params).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (tickets, exchanged, rounds, peers, trials=100_000, seed=1, ring=false))]
fn ownership_probability_mc(
    tickets: u32,
    exchanged: u32,
    rounds: u32,
    peers: u32,
    trials: u32,
    seed: u64,
    ring: bool,
) -> PyResult<f64> {
    let params = ExchangeParams::new(tickets, exchanged, rounds, peers).map_err(value_err)?;
    let topology = if ring { McTopology::Ring } else { McTopology::UniformRandom };
    tickets::ownership_probability_mc(&params, topology, &mut ChaCha8Rng::seed_from_u64(seed), trials)
        .map_err(value_err)
}

/// Kind tag of an encoded message, after checking that it decodes.
#[pyfunction]
fn message_kind(data: &[u8]) -> PyResult<u8> {
    Message::decode(data).map(|m| m.kind() as u8).map_err(value_err)
}

/// Re-encodes a decoded message; equal to the input for well-formed bytes.
#[pyfunction]
fn reencode(data: &[u8]) -> PyResult<Vec<u8>> {
    Message::decode(data).map(|m| m.encode()).map_err(value_err)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    Preset::ALL.iter().map(|p| p.name()).collect()
}

/// Runs one simulation per seed and returns the report as JSON (or CSV).
///
/// `config` is TOML text; `preset` picks a named scenario instead.
#[pyfunction]
#[pyo3(signature = (preset=None, config=None, seeds=None, protocol=None, format="json"))]
fn run(
    py: Python<'_>,
    preset: Option<&str>,
    config: Option<&str>,
    seeds: Option<Vec<u64>>,
    protocol: Option<&str>,
    format: &str,
) -> PyResult<String> {
    let mut base = match (preset, config) {
        (Some(_), Some(_)) => return Err(PyValueError::new_err("give either preset or config, not both")),
        (Some(p), None) => p.parse::<Preset>().map_err(value_err)?.config(1),
        (None, Some(text)) => SimConfig::from_toml(text).map_err(value_err)?,
        (None, None) => SimConfig::default(),
    };
    match protocol {
        None => {}
        Some("p4qs") => base.protocol = Protocol::P4qs,
        Some("pseudonym") => base.protocol = Protocol::Pseudonym,
        Some(other) => return Err(PyValueError::new_err(format!("unknown protocol {other:?}"))),
    }
    let format: ReportFormat = format.parse().map_err(value_err)?;
    base.validate().map_err(value_err)?;
    let seeds = seeds.unwrap_or_else(|| vec![base.seed]);
    py.detach(|| {
        let mut reports = Vec::new();
        for seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match run_scenario(cfg) {
                Ok((_, r)) => reports.push(r),
                Err(SimError::InvariantBreach(b)) => {
                    return Err(PyRuntimeError::new_err(format!("invariant breach: {}", b.join("; "))))
                }
                Err(e) => return Err(PyRuntimeError::new_err(e.to_string())),
            }
        }
        String::from_utf8(emit_report(&reports, format)).map_err(value_err)
    })
}

/// Peer directory with nearest-RA lookup.
#[pyclass(name = "Overlay")]
struct PyOverlay {
    inner: OverlayDirectory,
}

#[pymethods]
impl PyOverlay {
    /// `peers` members with random ring addresses drawn from `seed`.
    #[new]
    #[pyo3(signature = (peers=0, seed=1))]
    fn new(peers: u32, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inner = OverlayDirectory::new();
        for i in 0..peers {
            let id = PeerId(i);
            inner
                .join(PeerRecord::new(id, random_ra(&mut rng), Address::for_peer(id)))
                .map_err(value_err)?;
        }
        Ok(PyOverlay { inner })
    }

    fn join(&mut self, peer_id: u32, ra: f64) -> PyResult<()> {
        let id = PeerId(peer_id);
        let ra = RingCoord::new(ra).map_err(value_err)?;
        self.inner
            .join(PeerRecord::new(id, ra, Address::for_peer(id)))
            .map(|_| ())
            .map_err(value_err)
    }

    fn leave(&mut self, peer_id: u32) -> PyResult<()> {
        self.inner.leave(PeerId(peer_id)).map(|_| ()).map_err(value_err)
    }

    /// Id of the peer responsible for `key`.
    fn lookup(&self, key: f64) -> PyResult<u32> {
        let key = RingCoord::new(key).map_err(value_err)?;
        self.inner.lookup(key).map(|r| r.peer_id.0).map_err(value_err)
    }

    fn route_hops(&self, from_peer: u32, key: f64) -> PyResult<usize> {
        let key = RingCoord::new(key).map_err(value_err)?;
        self.inner.route_hops(PeerId(from_peer), key).map_err(value_err)
    }

    /// `(peer_id, ra)` pairs in ring order.
    fn peers(&self) -> Vec<(u32, f64)> {
        self.inner.peers().iter().map(|r| (r.peer_id.0, r.ra.value())).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Read-only POI database answering nearest and range queries.
#[pyclass(name = "PoiStore")]
struct PyPoiStore {
    inner: PoiStore,
}

#[pymethods]
impl PyPoiStore {
    #[staticmethod]
    #[pyo3(signature = (seed=7, count=2000))]
    fn generate(seed: u64, count: usize) -> Self {
        PyPoiStore { inner: PoiStore::generate(seed, count) }
    }

    /// Parses `lon,lat,category,name` lines.
    #[staticmethod]
    fn from_fixture(text: &str) -> PyResult<Self> {
        PoiStore::from_fixture(text).map(|inner| PyPoiStore { inner }).map_err(value_err)
    }

    fn to_fixture(&self) -> String {
        self.inner.to_fixture()
    }

    fn nearest(&self, category: &str, lon: f64, lat: f64) -> PyResult<Option<u32>> {
        Ok(self.inner.nearest(category, &point(lon, lat)?))
    }

    fn range(&self, category: &str, x1: f64, y1: f64, x2: f64, y2: f64) -> Vec<u32> {
        let region = CloakRegion { x1, y1, x2, y2, t1: 0, t2: 0 };
        self.inner.range(category, &region)
    }

    /// Answer text for a `nearest:<cat>` or `range:<cat>` query over a region.
    fn answer(&self, query: &str, x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<String> {
        let q: PoiQuery = query.parse().map_err(value_err)?;
        let region = CloakRegion { x1, y1, x2, y2, t1: 0, t2: 0 };
        Ok(self.inner.answer(&q, &region).to_string())
    }

    /// `(lon, lat, category, name)` of entry `id`.
    fn get(&self, id: usize) -> Option<(f64, f64, String, String)> {
        self.inner
            .entries()
            .get(id)
            .map(|p| (p.location.lon(), p.location.lat(), p.category.clone(), p.name.clone()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pymodule]
fn p4qs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(geo_hash, m)?)?;
    m.add_function(wrap_pyfunction!(zone_side, m)?)?;
    m.add_function(wrap_pyfunction!(ownership_probability, m)?)?;
    m.add_function(wrap_pyfunction!(ownership_probability_mc, m)?)?;
    m.add_function(wrap_pyfunction!(message_kind, m)?)?;
    m.add_function(wrap_pyfunction!(reencode, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyOverlay>()?;
    m.add_class::<PyPoiStore>()?;
    Ok(())
}
