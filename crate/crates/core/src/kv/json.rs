//! JSON values as leaf sets.
//!
//! An object flattens to one `Map` marker per object node plus one leaf per
//! scalar field; relative paths are taken from the value's root. Field-wise
//! merge falls out of storing these leaves individually.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use crate::change::{LeafValue, Path};
use crate::error::{Error, Result};

pub type Flat = BTreeMap<Path, LeafValue>;

/// Parses client bytes; the top level must be an object.
pub fn parse_object(bytes: &[u8]) -> Result<Value> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Malformed(format!("value is not JSON: {e}")))?;
    if !value.is_object() {
        return Err(Error::Malformed("json schema values must be objects".into()));
    }
    flatten(&value)?;
    Ok(value)
}

pub fn flatten(value: &Value) -> Result<Flat> {
    let mut out = Flat::new();
    flatten_into(&mut Vec::new(), value, &mut out)?;
    Ok(out)
}

fn flatten_into(prefix: &mut Path, value: &Value, out: &mut Flat) -> Result<()> {
    match value {
        Value::Object(map) => {
            out.insert(prefix.clone(), LeafValue::Map);
            for (k, v) in map {
                if k.is_empty() {
                    return Err(Error::Malformed("empty field names are not supported".into()));
                }
                prefix.push(k.clone());
                flatten_into(prefix, v, out)?;
                prefix.pop();
            }
            Ok(())
        }
        Value::Array(_) => Err(Error::Malformed("arrays are not supported in json values".into())),
        scalar => {
            let leaf = LeafValue::from_json(scalar).map_err(|e| Error::Malformed(e.to_string()))?;
            out.insert(prefix.clone(), leaf);
            Ok(())
        }
    }
}

/// Leaf-level difference turning `old` into `new`: `Some` to set, `None` to
/// delete. Unchanged leaves produce nothing.
pub fn diff(old: &Flat, new: &Flat) -> Vec<(Path, Option<LeafValue>)> {
    let mut out = Vec::new();
    for (p, v) in new {
        if old.get(p) != Some(v) {
            out.push((p.clone(), Some(v.clone())));
        }
    }
    for p in old.keys() {
        if !new.contains_key(p) {
            out.push((p.clone(), None));
        }
    }
    out
}

/// Applies leaf entries (relative paths) onto `base`, shortest paths first.
/// `Map` ensures an object, scalars overwrite, `None` removes. Children
/// override a scalar ancestor.
pub fn apply_entries(base: &mut Value, entries: &[(Path, Option<LeafValue>)]) {
    let mut sorted: Vec<&(Path, Option<LeafValue>)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
    for (rel, value) in sorted {
        match value {
            None => remove_at(base, rel),
            Some(LeafValue::Map) => {
                let slot = slot_at(base, rel);
                if !slot.is_object() {
                    *slot = Value::Object(Map::new());
                }
            }
            Some(scalar) => {
                if rel.is_empty() {
                    continue;
                }
                *slot_at(base, rel) = scalar.to_json();
            }
        }
    }
}

fn slot_at<'a>(base: &'a mut Value, rel: &[String]) -> &'a mut Value {
    let mut cur = base;
    for part in rel {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .expect("just made an object")
            .entry(part.clone())
            .or_insert(Value::Null);
    }
    cur
}

fn remove_at(base: &mut Value, rel: &[String]) {
    let Some((last, parents)) = rel.split_last() else { return };
    let mut cur = base;
    for part in parents {
        match cur.as_object_mut().and_then(|m| m.get_mut(part)) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Some(m) = cur.as_object_mut() {
        m.remove(last);
    }
}
