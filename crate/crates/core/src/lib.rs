/// Serializes a type through its `Display` / `FromStr` spelling, so configs
/// use the same strings as command-line flags.
macro_rules! serde_via_str {
    ($t:ty) => {
        impl serde::Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> serde::Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = <String as serde::Deserialize>::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

pub mod bake;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod sampling;
pub mod trainer;

pub use error::{DataError, Error, Result};
