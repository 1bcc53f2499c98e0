//! Domain types shared across the pipeline, the canonical byte encoding of a
//! data point, and SHA-256 digests.
//!
//! Canonical encoding layout (fields joined by the unit separator `0x1F`):
//!
//! ```text
//! imo ␟ regulation ␟ quantity:value ␟ time_index ␟ lat,lon
//! ```
//!
//! Every numeric field is rendered from a fixed-point integer with exactly six
//! fractional digits, so the encoding never depends on float formatting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Reserved byte joining canonical fields. No text field may contain it.
pub const FIELD_SEPARATOR: u8 = 0x1F;

/// Regulation identifier for MARPOL Annex VI Regulation 14 (fuel sulfur).
pub const SULFUR_REGULATION: &str = "MARPOL-VI-R14";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("IMO number {0} is not a 7-digit positive integer")]
    Imo(u64),
    #[error("{field} must not be empty")]
    Empty { field: &'static str },
    #[error("{field} contains the reserved separator byte 0x1F")]
    Separator { field: &'static str },
    #[error("value {0} is not representable at 6-decimal precision")]
    NotFinite(f64),
    #[error("invalid digest hex: {0}")]
    DigestHex(String),
}

/// Signed fixed-point number with six fractional digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fixed6(i64);

impl Fixed6 {
    pub const SCALE: i64 = 1_000_000;
    const LIMIT: f64 = 9.0e12;

    pub const fn from_micros(micros: i64) -> Self {
        Fixed6(micros)
    }

    /// Rounds to the nearest millionth. `None` for non-finite or huge inputs.
    pub fn from_f64(v: f64) -> Option<Self> {
        if !v.is_finite() || v.abs() >= Self::LIMIT {
            return None;
        }
        Some(Fixed6((v * Self::SCALE as f64).round() as i64))
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }
}

impl fmt::Display for Fixed6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let scale = Self::SCALE as u64;
        write!(f, "{sign}{}.{:06}", abs / scale, abs % scale)
    }
}

impl FromStr for Fixed6 {
    type Err = std::num::ParseFloatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: f64 = s.parse()?;
        // Parsing text that came from `Display` is always finite.
        Ok(Fixed6::from_f64(v).unwrap_or_default())
    }
}

/// A position in degrees, stored at micro-degree resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GeoPosition {
    lat: Fixed6,
    lon: Fixed6,
}

impl GeoPosition {
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        let lat_fx = Fixed6::from_f64(lat).ok_or(ModelError::Latitude(lat))?;
        let lon_fx = Fixed6::from_f64(lon).ok_or(ModelError::Longitude(lon))?;
        Self::from_micros(lat_fx.micros(), lon_fx.micros()).map_err(|e| match e {
            ModelError::Latitude(_) => ModelError::Latitude(lat),
            _ => ModelError::Longitude(lon),
        })
    }

    pub fn from_micros(lat: i64, lon: i64) -> Result<Self, ModelError> {
        if !(-90 * Fixed6::SCALE..=90 * Fixed6::SCALE).contains(&lat) {
            return Err(ModelError::Latitude(lat as f64 / 1e6));
        }
        if !(-180 * Fixed6::SCALE..=180 * Fixed6::SCALE).contains(&lon) {
            return Err(ModelError::Longitude(lon as f64 / 1e6));
        }
        Ok(GeoPosition {
            lat: Fixed6(lat),
            lon: Fixed6(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat.to_f64()
    }

    pub fn lon(&self) -> f64 {
        self.lon.to_f64()
    }

    pub fn lat_micros(&self) -> i64 {
        self.lat.micros()
    }

    pub fn lon_micros(&self) -> i64 {
        self.lon.micros()
    }

    /// Canonical `lat,lon` text at six decimals.
    pub fn render(&self) -> String {
        format!("{},{}", self.lat, self.lon)
    }

    pub fn parse_rendered(s: &str) -> Option<Self> {
        let (lat, lon) = s.split_once(',')?;
        let lat: Fixed6 = lat.parse().ok()?;
        let lon: Fixed6 = lon.parse().ok()?;
        Self::from_micros(lat.micros(), lon.micros()).ok()
    }
}

impl fmt::Display for GeoPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

impl Serialize for GeoPosition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.lat(), self.lon()].serialize(s)
    }
}

impl<'de> Deserialize<'de> for GeoPosition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [lat, lon] = <[f64; 2]>::deserialize(d)?;
        GeoPosition::new(lat, lon).map_err(serde::de::Error::custom)
    }
}

/// Seven-digit IMO ship identification number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct ImoNumber(u32);

impl ImoNumber {
    pub fn new(n: u64) -> Result<Self, ModelError> {
        if (1_000_000..=9_999_999).contains(&n) {
            Ok(ImoNumber(n as u32))
        } else {
            Err(ModelError::Imo(n))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u64> for ImoNumber {
    type Error = ModelError;
    fn try_from(n: u64) -> Result<Self, ModelError> {
        ImoNumber::new(n)
    }
}

impl From<ImoNumber> for u64 {
    fn from(n: ImoNumber) -> u64 {
        n.0 as u64
    }
}

impl fmt::Display for ImoNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub(crate) fn check_text(field: &'static str, s: &str) -> Result<(), ModelError> {
    if s.is_empty() {
        return Err(ModelError::Empty { field });
    }
    if s.as_bytes().contains(&FIELD_SEPARATOR) {
        return Err(ModelError::Separator { field });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VesselIdentity {
    pub imo: ImoNumber,
    pub owner: String,
    pub flag_state: String,
}

impl VesselIdentity {
    pub fn new(imo: u64, owner: &str, flag_state: &str) -> Result<Self, ModelError> {
        check_text("owner", owner)?;
        check_text("flag_state", flag_state)?;
        Ok(VesselIdentity {
            imo: ImoNumber::new(imo)?,
            owner: owner.to_string(),
            flag_state: flag_state.to_string(),
        })
    }
}

/// Kind of physical quantity a sensor reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Fuel sulfur content, percent by mass.
    SulfurPct,
}

impl Quantity {
    pub fn code(self) -> &'static str {
        match self {
            Quantity::SulfurPct => "sulfur_pct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub sensor_id: String,
    pub quantity: Quantity,
    pub value: f64,
    pub time_index: u64,
    /// Seconds since the Unix epoch, as stamped by the sensor gateway.
    pub wall_time: i64,
    pub calibration_expiry: i64,
}

/// Measured value together with its quantity kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Status {
    pub quantity: Quantity,
    pub value: Fixed6,
}

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fixed6 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The tuple committed for every sensor observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataPoint {
    pub vessel: ImoNumber,
    pub regulation: String,
    pub status: Status,
    pub timestamp: u64,
    pub position: GeoPosition,
}

impl DataPoint {
    /// Builds the data point for `reading`. Fails if the value has no
    /// fixed-point representation.
    pub fn from_reading(
        vessel: ImoNumber,
        regulation: &str,
        reading: &SensorReading,
        position: GeoPosition,
    ) -> Result<Self, ModelError> {
        let value = Fixed6::from_f64(reading.value).ok_or(ModelError::NotFinite(reading.value))?;
        Ok(DataPoint {
            vessel,
            regulation: regulation.to_string(),
            status: Status {
                quantity: reading.quantity,
                value,
            },
            timestamp: reading.time_index,
            position,
        })
    }

    pub fn value(&self) -> f64 {
        self.status.value.to_f64()
    }
}

/// Serializes `d` into its canonical byte form.
pub fn canonical_encode(d: &DataPoint) -> Result<Vec<u8>, ModelError> {
    check_text("regulation", &d.regulation)?;
    let fields = [
        d.vessel.to_string(),
        d.regulation.clone(),
        format!("{}:{}", d.status.quantity.code(), d.status.value),
        d.timestamp.to_string(),
        d.position.render(),
    ];
    Ok(fields.join("\u{1f}").into_bytes())
}

pub fn hash_data_point(d: &DataPoint) -> Result<Digest, ModelError> {
    Ok(Digest::of(&canonical_encode(d)?))
}

/// A SHA-256 output. Rendered as lowercase hex everywhere.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Strict parse: exactly 64 lowercase hex characters.
    pub fn from_hex(s: &str) -> Result<Self, ModelError> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(ModelError::DigestHex(s.to_string()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| ModelError::DigestHex(s.to_string()))?;
        Ok(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> DataPoint {
        DataPoint {
            vessel: ImoNumber::new(9074729).unwrap(),
            regulation: SULFUR_REGULATION.into(),
            status: Status {
                quantity: Quantity::SulfurPct,
                value: Fixed6::from_f64(0.45).unwrap(),
            },
            timestamp: 12,
            position: GeoPosition::new(57.0, 20.0).unwrap(),
        }
    }

    #[test]
    fn hand_built_encoding() {
        let mut expected = Vec::new();
        expected.extend_from_slice(b"9074729");
        expected.push(0x1F);
        expected.extend_from_slice(b"MARPOL-VI-R14");
        expected.push(0x1F);
        expected.extend_from_slice(b"sulfur_pct:0.450000");
        expected.push(0x1F);
        expected.extend_from_slice(b"12");
        expected.push(0x1F);
        expected.extend_from_slice(b"57.000000,20.000000");
        assert_eq!(canonical_encode(&sample()).unwrap(), expected);
    }

    #[test]
    fn digest_matches_external_sha256() {
        // printf '9074729\x1fMARPOL-VI-R14\x1fsulfur_pct:0.450000\x1f12\x1f57.000000,20.000000' | sha256sum
        let d = hash_data_point(&sample()).unwrap();
        assert_eq!(
            d.to_hex(),
            "eabda5e38a117fba28c056649a3576c42cbb0d79ef213fcc3635fca01d8629d0"
        );
    }

    #[test]
    fn timestamp_and_regulation_changes_are_visible() {
        let a = sample();
        let mut b = sample();
        b.timestamp = 13;
        assert_ne!(canonical_encode(&a).unwrap(), canonical_encode(&b).unwrap());
        let mut c = sample();
        c.regulation = "MARPOL-VI-R15".into();
        assert_ne!(hash_data_point(&a).unwrap(), hash_data_point(&c).unwrap());
        assert_eq!(
            hash_data_point(&a).unwrap(),
            hash_data_point(&sample()).unwrap()
        );
    }

    #[test]
    fn separator_in_regulation_rejected() {
        let mut d = sample();
        d.regulation = "MARPOL\u{1f}VI".into();
        assert_eq!(
            canonical_encode(&d),
            Err(ModelError::Separator {
                field: "regulation"
            })
        );
        assert!(VesselIdentity::new(9074729, "a\u{1f}b", "Panama").is_err());
    }

    #[test]
    fn fixed6_rendering() {
        assert_eq!(Fixed6::from_f64(-0.0).unwrap().to_string(), "0.000000");
        assert_eq!(Fixed6::from_f64(-12.5).unwrap().to_string(), "-12.500000");
        assert_eq!(Fixed6::from_f64(0.0000004).unwrap().to_string(), "0.000000");
        assert!(Fixed6::from_f64(f64::NAN).is_none());
    }

    #[test]
    fn position_bounds() {
        assert!(GeoPosition::new(90.0, 180.0).is_ok());
        assert_eq!(GeoPosition::new(90.5, 0.0), Err(ModelError::Latitude(90.5)));
        assert_eq!(
            GeoPosition::new(0.0, -181.0),
            Err(ModelError::Longitude(-181.0))
        );
        assert!(ImoNumber::new(123456).is_err());
        assert!(ImoNumber::new(10_000_000).is_err());
    }

    #[test]
    fn digest_hex_is_strict() {
        let d = Digest::of(b"abc");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(Digest::from_hex(&d.to_hex().to_uppercase()).is_err());
        assert!(Digest::from_hex("00").is_err());
    }

    fn arb_point() -> impl Strategy<Value = DataPoint> {
        (
            1_000_000u64..=9_999_999,
            "[A-Z]{1,4}-[A-Z0-9]{1,4}",
            0i64..10_000_000,
            0u64..100_000,
            -90_000_000i64..=90_000_000,
            -180_000_000i64..=180_000_000,
        )
            .prop_map(|(imo, reg, v, t, lat, lon)| DataPoint {
                vessel: ImoNumber::new(imo).unwrap(),
                regulation: reg,
                status: Status {
                    quantity: Quantity::SulfurPct,
                    value: Fixed6::from_micros(v),
                },
                timestamp: t,
                position: GeoPosition::from_micros(lat, lon).unwrap(),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]
        #[test]
        fn distinct_points_encode_distinctly(a in arb_point(), b in arb_point()) {
            prop_assume!(a != b);
            prop_assert_ne!(canonical_encode(&a).unwrap(), canonical_encode(&b).unwrap());
        }
    }

    proptest! {
        #[test]
        fn digest_hex_round_trip(bytes in proptest::array::uniform32(any::<u8>())) {
            let d = Digest::from_bytes(bytes);
            prop_assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        }

        #[test]
        fn position_render_round_trip(lat in -90_000_000i64..=90_000_000, lon in -180_000_000i64..=180_000_000) {
            let p = GeoPosition::from_micros(lat, lon).unwrap();
            prop_assert_eq!(GeoPosition::parse_rendered(&p.render()), Some(p));
            let q = GeoPosition::new(p.lat(), p.lon()).unwrap();
            prop_assert_eq!(q, p);
        }

        #[test]
        fn point_encoding_is_deterministic(a in arb_point()) {
            let b = a.clone();
            prop_assert_eq!(hash_data_point(&a).unwrap(), hash_data_point(&b).unwrap());
        }
    }
}
