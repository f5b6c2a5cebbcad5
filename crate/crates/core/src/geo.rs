//! Geographic coordinates and the one-dimensional ring they hash onto.
//!
//! A location `(lon, lat)` is mapped to `lon + lat`. The map is not
//! injective: mirrored points `(a, b)` and `(b, a)` land on the same ring
//! coordinate, so every anonymizer owns two mirror half-planes which are
//! told apart with [`zone_of`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_LONGITUDE: f64 = 180.0;
pub const MAX_LATITUDE: f64 = 90.0;
/// Largest magnitude a ring coordinate can take.
pub const RING_BOUND: f64 = MAX_LONGITUDE + MAX_LATITUDE;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("ring coordinate {0} outside [-270, 270]")]
    Ring(f64),
}

/// A validated point in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct GeoPoint {
    lon: f64,
    lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        // NaN fails both range checks.
        if !(-MAX_LONGITUDE..=MAX_LONGITUDE).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        if !(-MAX_LATITUDE..=MAX_LATITUDE).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        Ok(Self { lon, lat })
    }

    /// Clamps both components into range. Used when expanding boxes near the poles
    /// or the antimeridian.
    pub fn clamped(lon: f64, lat: f64) -> Self {
        Self {
            lon: lon.clamp(-MAX_LONGITUDE, MAX_LONGITUDE),
            lat: lat.clamp(-MAX_LATITUDE, MAX_LATITUDE),
        }
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    /// Planar distance in degrees.
    pub fn planar_distance(&self, other: &GeoPoint) -> f64 {
        (self.lon - other.lon).hypot(self.lat - other.lat)
    }
}

impl TryFrom<(f64, f64)> for GeoPoint {
    type Error = GeoError;

    fn try_from((lon, lat): (f64, f64)) -> Result<Self, Self::Error> {
        GeoPoint::new(lon, lat)
    }
}

impl From<GeoPoint> for (f64, f64) {
    fn from(p: GeoPoint) -> Self {
        (p.lon, p.lat)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lon, self.lat)
    }
}

/// Position on the anonymizer/broker ring. The ring is a bounded interval,
/// not a cycle: distances are plain absolute differences.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RingCoord(f64);

impl RingCoord {
    pub fn new(value: f64) -> Result<Self, GeoError> {
        if !(-RING_BOUND..=RING_BOUND).contains(&value) {
            return Err(GeoError::Ring(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn distance(self, other: RingCoord) -> f64 {
        (self.0 - other.0).abs()
    }

    /// Total order usable as a sort key; ring coordinates are never NaN.
    pub fn total_cmp(&self, other: &RingCoord) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl TryFrom<f64> for RingCoord {
    type Error = GeoError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        RingCoord::new(v)
    }
}

impl From<RingCoord> for f64 {
    fn from(r: RingCoord) -> f64 {
        r.0
    }
}

impl fmt::Display for RingCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which of the two mirror half-planes a point lies in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ZoneSide {
    LowLongitude,
    HighLongitude,
}

impl ZoneSide {
    pub const BOTH: [ZoneSide; 2] = [ZoneSide::LowLongitude, ZoneSide::HighLongitude];
}

/// Ring coordinate of a location: `longitude + latitude`.
pub fn geo_hash(p: GeoPoint) -> RingCoord {
    // Bounds of the components guarantee the sum is in range.
    RingCoord(p.lon + p.lat)
}

/// Splits the two mirror half-planes on the sign of `lon - lat`; the diagonal
/// itself goes to [`ZoneSide::LowLongitude`].
pub fn zone_of(p: GeoPoint) -> ZoneSide {
    if p.lon - p.lat <= 0.0 {
        ZoneSide::LowLongitude
    } else {
        ZoneSide::HighLongitude
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lon: f64, lat: f64) -> GeoPoint {
        GeoPoint::new(lon, lat).unwrap()
    }

    #[test]
    fn hash_is_plain_sum() {
        assert_eq!(geo_hash(pt(100.5, 50.5)).value(), 151.0);
        assert_eq!(geo_hash(pt(0.0, 0.0)).value(), 0.0);
    }

    #[test]
    fn mirrored_points_collide() {
        assert_eq!(geo_hash(pt(10.0, 20.0)).value(), 30.0);
        assert_eq!(geo_hash(pt(20.0, 10.0)).value(), 30.0);
    }

    #[test]
    fn zone_examples() {
        assert_eq!(zone_of(pt(10.0, 20.0)), ZoneSide::LowLongitude);
        assert_eq!(zone_of(pt(20.0, 10.0)), ZoneSide::HighLongitude);
        assert_eq!(zone_of(pt(15.0, 15.0)), ZoneSide::LowLongitude);
    }

    #[test]
    fn out_of_range_rejected() {
        assert_eq!(GeoPoint::new(180.5, 0.0), Err(GeoError::Longitude(180.5)));
        assert_eq!(GeoPoint::new(0.0, -90.1), Err(GeoError::Latitude(-90.1)));
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(RingCoord::new(270.01).is_err());
        assert!(RingCoord::new(-270.0).is_ok());
    }

    proptest! {
        #[test]
        fn hash_in_ring_bounds(lon in -180.0f64..=180.0, lat in -90.0f64..=90.0) {
            let h = geo_hash(pt(lon, lat)).value();
            prop_assert!((-RING_BOUND..=RING_BOUND).contains(&h));
        }

        #[test]
        fn swapped_pairs_hash_equal_and_split_zones(a in -90.0f64..=90.0, b in -90.0f64..=90.0) {
            let p = pt(a, b);
            let q = pt(b, a);
            prop_assert_eq!(geo_hash(p), geo_hash(q));
            if a != b {
                prop_assert_ne!(zone_of(p), zone_of(q));
            }
        }
    }
}
