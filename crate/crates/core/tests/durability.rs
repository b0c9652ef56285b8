use std::fs;

use causal_kv_core::durability::{FsyncPolicy, LOG_FILE};
use causal_kv_core::kv::{KeyRange, PutArgs};
use causal_kv_core::{Node, NodeConfig, RevisionMode, ValueSchema};
use proptest::prelude::*;

fn config(id: u64, mode: RevisionMode) -> NodeConfig {
    NodeConfig::new(id, mode, ValueSchema::Bytes).with_peers([1, 2].into_iter().filter(move |p| *p != id))
}

fn put(n: &mut Node, k: &str, v: &str) {
    n.put(&PutArgs { key: k.into(), value: v.into(), lease: None, prev_kv: false }).unwrap();
}

#[test]
fn restart_restores_state_and_counter_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let mut n = Node::open(config(1, RevisionMode::Counter), dir.path(), FsyncPolicy::PerChange).unwrap();
    for i in 0..30 {
        put(&mut n, &format!("k{}", i % 7), &i.to_string());
        if i % 5 == 0 {
            n.delete_range(&KeyRange::exact(format!("k{}", i % 3).into_bytes())).unwrap();
        }
    }
    let lines = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().lines().count();
    assert_eq!(lines, n.doc().len());
    let leaves = n.doc().leaves().clone();
    let heads = n.heads().clone();
    let rev = n.current_revision();
    let all = n.range(&KeyRange::prefix(b"k".to_vec()), &causal_kv_core::ReadAt::Current, None).unwrap();
    drop(n);

    let mut again = Node::open(config(1, RevisionMode::Counter), dir.path(), FsyncPolicy::PerChange).unwrap();
    assert_eq!(again.doc().leaves(), &leaves);
    assert_eq!(again.heads(), &heads);
    assert_eq!(again.current_revision(), rev);
    let reread = again.range(&KeyRange::prefix(b"k".to_vec()), &causal_kv_core::ReadAt::Current, None).unwrap();
    assert_eq!(reread, all);
    put(&mut again, "k0", "after");
    assert_eq!(again.current_revision(), rev + 1);
}

#[test]
fn replicated_changes_are_logged_too() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut a = Node::open(config(1, RevisionMode::Hash), d1.path(), FsyncPolicy::Never).unwrap();
    let mut b = Node::open(config(2, RevisionMode::Hash), d2.path(), FsyncPolicy::Never).unwrap();
    put(&mut a, "x", "1");
    for (_, msg) in a.take_outbox() {
        b.handle_peer_message(msg);
    }
    let log = fs::read_to_string(d2.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    drop(b);
    let b = Node::open(config(2, RevisionMode::Hash), d2.path(), FsyncPolicy::Never).unwrap();
    assert_eq!(b.heads(), a.heads());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Any line prefix of a log loads into a valid document equal to the
    /// replay of those lines.
    #[test]
    fn every_prefix_loads(writes in prop::collection::vec((0..4u8, 0..100u32), 1..25), cut in 0usize..30) {
        let dir = tempfile::tempdir().unwrap();
        let mut n = Node::open(config(1, RevisionMode::Hash), dir.path(), FsyncPolicy::Never).unwrap();
        let mut snapshots = vec![n.doc().leaves().clone()];
        for (k, v) in &writes {
            put(&mut n, &format!("k{k}"), &v.to_string());
            snapshots.push(n.doc().leaves().clone());
        }
        drop(n);
        let path = dir.path().join(LOG_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let keep = 1 + cut % snapshots.len().max(1);
        let keep = keep.min(snapshots.len());
        let prefix: String = text.lines().take(keep).map(|l| format!("{l}\n")).collect();
        fs::write(&path, prefix).unwrap();
        let reloaded = Node::open(config(1, RevisionMode::Hash), dir.path(), FsyncPolicy::Never).unwrap();
        prop_assert_eq!(reloaded.doc().leaves(), &snapshots[keep - 1]);
    }
}
