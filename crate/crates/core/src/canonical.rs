//! Canonical JSON: object keys sorted bytewise, no insignificant whitespace.
//!
//! Everything that is hashed into a block, compared across replicas or
//! authenticated on the wire goes through [`to_bytes`]. The encoder walks a
//! `serde_json::Value` and sorts keys itself, so the output does not depend on
//! whether `serde_json` was built with `preserve_order`.

use serde::Serialize;
use serde_json::Value;

pub fn to_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("canonical encoding of a serializable value");
    let mut out = Vec::with_capacity(128);
    write_value(&v, &mut out);
    out
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(to_bytes(value)).expect("json is utf-8")
}

/// Re-encodes an arbitrary JSON value canonically.
pub fn value_bytes(v: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write_value(v, &mut out);
    out
}

fn write_value(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push(b'{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, k).expect("string encoding");
                out.push(b':');
                write_value(&map[k], out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("scalar encoding"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorts_keys_recursively_without_whitespace() {
        let v = json!({"b": 1, "a": {"z": [1, {"y": null, "x": "s"}], "c": true}});
        assert_eq!(
            value_bytes(&v),
            br#"{"a":{"c":true,"z":[1,{"x":"s","y":null}]},"b":1}"#.to_vec()
        );
    }

    #[test]
    fn escapes_strings() {
        assert_eq!(to_string("a\"b\n"), r#""a\"b\n""#);
    }
}

/// Serializes a map as a list of `[key, value]` pairs.
///
/// JSON object keys are strings, and integer-like keys do not come back
/// through serde's buffered (tagged enum) deserialization. Maps with
/// non-string keys that travel inside tagged messages use this instead.
pub mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}
