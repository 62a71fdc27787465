//! Key material: master keys, partial keys, key references, and the HKR
//! correlation tag that lets a processing node group chunk deliveries.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Width of every generated identifier, in bytes.
pub const KEY_LEN: usize = 16;

/// Maximum regeneration attempts when a freshly generated key collides.
pub const MAX_KEY_RETRIES: usize = 8;

const MAX_NAME_LEN: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("expected {expected} hex chars, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("invalid hex character in {0:?}")]
    BadAlphabet(String),
    #[error("invalid identity name: {0}")]
    BadName(String),
    #[error("invalid address: {0:?}")]
    BadAddress(String),
    #[error("key space exhausted after {0} retries")]
    Exhausted(usize),
}

/// Draws a fresh 16-byte identifier from `rng`.
pub fn gen_key<R: RngCore + ?Sized>(rng: &mut R) -> [u8; KEY_LEN] {
    let mut raw = [0u8; KEY_LEN];
    rng.fill_bytes(&mut raw);
    raw
}

/// Draws keys until `taken` rejects none of them, giving up after
/// [`MAX_KEY_RETRIES`] regenerations.
pub fn gen_unique<K, R, F>(rng: &mut R, mut taken: F) -> Result<K, KeyError>
where
    K: From<[u8; KEY_LEN]>,
    R: RngCore + ?Sized,
    F: FnMut(&K) -> bool,
{
    for _ in 0..=MAX_KEY_RETRIES {
        let key = K::from(gen_key(rng));
        if !taken(&key) {
            return Ok(key);
        }
    }
    Err(KeyError::Exhausted(MAX_KEY_RETRIES))
}

/// Lowercase hex encoding of a raw identifier.
pub fn encode_hex(raw: &[u8; KEY_LEN]) -> String {
    hex::encode(raw)
}

pub fn decode_hex(s: &str) -> Result<[u8; KEY_LEN], KeyError> {
    if s.len() != KEY_LEN * 2 {
        return Err(KeyError::BadLength { expected: KEY_LEN * 2, got: s.len() });
    }
    let mut raw = [0u8; KEY_LEN];
    hex::decode_to_slice(s, &mut raw).map_err(|_| KeyError::BadAlphabet(s.to_string()))?;
    Ok(raw)
}

macro_rules! key_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name([u8; KEY_LEN]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                encode_hex(&self.0)
            }
        }

        impl From<[u8; KEY_LEN]> for $name {
            fn from(raw: [u8; KEY_LEN]) -> Self {
                Self(raw)
            }
        }

        impl FromStr for $name {
            type Err = KeyError;
            fn from_str(s: &str) -> Result<Self, KeyError> {
                decode_hex(s).map(Self)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

key_type!(
    /// Anonymizing identifier for one piece of private data, minted by the audit node.
    MasterKey
);
key_type!(
    /// Anonymizing identifier for one chunk, minted by the storage node holding it.
    PartialKey
);
key_type!(
    /// Per-processor alias for a master key; the only handle a processing node holds.
    KeyReference
);
key_type!(
    /// Nonce correlating all hops of one operation instance.
    ChoreographyId
);

/// Network address of a node: `host:port` for TCP deployments, a bare node id
/// in simulation.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct Address(String);

impl Address {
    pub fn new(s: impl Into<String>) -> Result<Self, KeyError> {
        let s = s.into();
        let valid = !s.is_empty()
            && s.len() <= 255
            && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.:[]".contains(c))
            && match s.rsplit_once(':') {
                // host:port must carry a numeric port
                Some((host, port)) if !s.starts_with('[') || host.ends_with(']') => {
                    !host.is_empty() && port.parse::<u16>().is_ok()
                }
                Some(_) => false,
                None => true,
            };
        if valid {
            Ok(Self(s))
        } else {
            Err(KeyError::BadAddress(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Address::new(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl FromStr for Address {
    type Err = KeyError;
    fn from_str(s: &str) -> Result<Self, KeyError> {
        Address::new(s)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", self.0)
    }
}

/// A data owner or data processor organization, plus the location of its
/// processing node.
///
/// Authorization decisions compare identities by `name`; `location` is only
/// used for routing.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawIdentity")]
pub struct Identity {
    pub name: String,
    pub location: Address,
}

#[derive(Deserialize)]
struct RawIdentity {
    name: String,
    location: Address,
}

impl TryFrom<RawIdentity> for Identity {
    type Error = KeyError;
    fn try_from(raw: RawIdentity) -> Result<Self, KeyError> {
        Identity::new(raw.name, raw.location)
    }
}

impl Identity {
    pub fn new(name: impl Into<String>, location: Address) -> Result<Self, KeyError> {
        let name = name.into();
        validate_name(&name)?;
        Ok(Self { name, location })
    }

    pub fn same_principal(&self, other: &Identity) -> bool {
        self.name == other.name
    }
}

pub fn validate_name(name: &str) -> Result<(), KeyError> {
    if name.is_empty() {
        return Err(KeyError::BadName("empty".into()));
    }
    if name.chars().count() > MAX_NAME_LEN {
        return Err(KeyError::BadName(format!("longer than {MAX_NAME_LEN} chars")));
    }
    if name.chars().any(char::is_control) {
        return Err(KeyError::BadName("contains control characters".into()));
    }
    Ok(())
}

/// Correlation tag carried by chunk traffic: the requesting processing node's
/// location plus the SHA-256 of the key reference's raw bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawHkr")]
pub struct Hkr {
    pub pn_location: Address,
    pub kr_digest: String,
}

#[derive(Deserialize)]
struct RawHkr {
    pn_location: Address,
    kr_digest: String,
}

impl TryFrom<RawHkr> for Hkr {
    type Error = KeyError;
    fn try_from(raw: RawHkr) -> Result<Self, KeyError> {
        if raw.kr_digest.len() != 64 {
            return Err(KeyError::BadLength { expected: 64, got: raw.kr_digest.len() });
        }
        if !raw.kr_digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(KeyError::BadAlphabet(raw.kr_digest));
        }
        Ok(Hkr { pn_location: raw.pn_location, kr_digest: raw.kr_digest })
    }
}

pub fn make_hkr(kr: &KeyReference, pn_location: &Address) -> Hkr {
    Hkr { pn_location: pn_location.clone(), kr_digest: sha256_hex(kr.as_bytes()) }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
