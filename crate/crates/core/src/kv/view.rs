use std::collections::BTreeMap;
use std::ops::Bound;

use crate::change::{Action, LeafOp, LeafValue, Path};
use crate::engine::Leaves;

/// Read access to a set of leaves. Deleted leaves are reported with `None`.
pub trait LeafSource {
    fn scan_prefix(&self, prefix: &[String]) -> Vec<(Path, Option<LeafValue>)>;

    fn get(&self, path: &[String]) -> Option<LeafValue>;
}

fn prefix_range<'a, V>(
    map: &'a BTreeMap<Path, V>,
    prefix: &'a [String],
) -> impl Iterator<Item = (&'a Path, &'a V)> + 'a {
    map.range::<[String], _>((Bound::Included(prefix), Bound::Unbounded))
        .take_while(move |(k, _)| k.starts_with(prefix))
}

impl LeafSource for Leaves {
    fn scan_prefix(&self, prefix: &[String]) -> Vec<(Path, Option<LeafValue>)> {
        prefix_range(self, prefix)
            .map(|(k, l)| (k.clone(), l.value.clone()))
            .collect()
    }

    fn get(&self, path: &[String]) -> Option<LeafValue> {
        BTreeMap::get(self, path).and_then(|l| l.value.clone())
    }
}

/// Leaves plus not-yet-committed ops, so reads inside a transaction see the
/// transaction's own earlier writes.
pub struct Overlay<'a> {
    base: &'a Leaves,
    staged: BTreeMap<Path, Option<LeafValue>>,
}

impl<'a> Overlay<'a> {
    pub fn new(base: &'a Leaves) -> Self {
        Overlay { base, staged: BTreeMap::new() }
    }

    pub fn stage(&mut self, op: &LeafOp) {
        let value = match op.action {
            Action::Set => op.value.clone(),
            Action::Del => None,
        };
        self.staged.insert(op.path.clone(), value);
    }
}

impl LeafSource for Overlay<'_> {
    fn scan_prefix(&self, prefix: &[String]) -> Vec<(Path, Option<LeafValue>)> {
        let mut merged: BTreeMap<Path, Option<LeafValue>> =
            self.base.scan_prefix(prefix).into_iter().collect();
        for (k, v) in prefix_range(&self.staged, prefix) {
            merged.insert(k.clone(), v.clone());
        }
        merged.into_iter().collect()
    }

    fn get(&self, path: &[String]) -> Option<LeafValue> {
        match self.staged.get(path) {
            Some(v) => v.clone(),
            None => LeafSource::get(self.base, path),
        }
    }
}
