//! Subscription trie keyed by topic level, with dedicated `+` and `#` slots
//! so matching cost depends on topic depth, not subscriber count.

use std::collections::HashMap;
use std::hash::Hash;

use crate::codec::QoS;
use crate::topic::{FilterToken, TopicFilter};

#[derive(Debug)]
struct Node<K> {
    subscribers: HashMap<K, QoS>,
    /// Subscribers of `<this level>/#`.
    multi: HashMap<K, QoS>,
    children: HashMap<String, Node<K>>,
    single: Option<Box<Node<K>>>,
}

impl<K> Default for Node<K> {
    fn default() -> Self {
        Node {
            subscribers: HashMap::new(),
            multi: HashMap::new(),
            children: HashMap::new(),
            single: None,
        }
    }
}

impl<K> Node<K> {
    fn is_empty(&self) -> bool {
        self.subscribers.is_empty() && self.multi.is_empty() && self.children.is_empty() && self.single.is_none()
    }
}

#[derive(Debug)]
pub struct SubscriptionTrie<K> {
    root: Node<K>,
    len: usize,
}

impl<K> Default for SubscriptionTrie<K> {
    fn default() -> Self {
        SubscriptionTrie {
            root: Node::default(),
            len: 0,
        }
    }
}

impl<K: Eq + Hash + Clone> SubscriptionTrie<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of (filter, subscriber) pairs.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Adds or replaces a subscription. Returns true if it replaced one.
    pub fn insert(&mut self, filter: &TopicFilter, key: K, qos: QoS) -> bool {
        let mut node = &mut self.root;
        for token in filter.tokens() {
            match token {
                FilterToken::Literal(s) => node = node.children.entry(s.clone()).or_default(),
                FilterToken::SingleLevel => node = node.single.get_or_insert_with(Default::default),
                FilterToken::MultiLevel => {
                    let replaced = node.multi.insert(key, qos).is_some();
                    self.len += usize::from(!replaced);
                    return replaced;
                }
            }
        }
        let replaced = node.subscribers.insert(key, qos).is_some();
        self.len += usize::from(!replaced);
        replaced
    }

    pub fn remove(&mut self, filter: &TopicFilter, key: &K) -> bool {
        let removed = remove_rec(&mut self.root, filter.tokens(), key);
        if removed {
            self.len -= 1;
        }
        removed
    }

    /// Every subscriber whose filter matches `topic`, with the highest
    /// granted QoS among its matching filters.
    pub fn matches(&self, topic: &str) -> HashMap<K, QoS> {
        let levels: Vec<&str> = topic.split('/').collect();
        let mut out = HashMap::new();
        collect(&self.root, &levels, &mut out);
        out
    }
}

fn merge<K: Eq + Hash + Clone>(out: &mut HashMap<K, QoS>, from: &HashMap<K, QoS>) {
    for (k, q) in from {
        out.entry(k.clone()).and_modify(|e| *e = (*e).max(*q)).or_insert(*q);
    }
}

fn collect<K: Eq + Hash + Clone>(node: &Node<K>, levels: &[&str], out: &mut HashMap<K, QoS>) {
    // '#' matches the remaining levels, including none
    merge(out, &node.multi);
    let Some((first, rest)) = levels.split_first() else {
        merge(out, &node.subscribers);
        return;
    };
    if let Some(child) = node.children.get(*first) {
        collect(child, rest, out);
    }
    if let Some(single) = &node.single {
        collect(single, rest, out);
    }
}

fn remove_rec<K: Eq + Hash>(node: &mut Node<K>, tokens: &[FilterToken], key: &K) -> bool {
    let Some((first, rest)) = tokens.split_first() else {
        return node.subscribers.remove(key).is_some();
    };
    match first {
        FilterToken::MultiLevel => node.multi.remove(key).is_some(),
        FilterToken::SingleLevel => {
            let Some(child) = node.single.as_deref_mut() else {
                return false;
            };
            let removed = remove_rec(child, rest, key);
            if child.is_empty() {
                node.single = None;
            }
            removed
        }
        FilterToken::Literal(s) => {
            let Some(child) = node.children.get_mut(s) else {
                return false;
            };
            let removed = remove_rec(child, rest, key);
            if child.is_empty() {
                node.children.remove(s);
            }
            removed
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(s: &str) -> TopicFilter {
        TopicFilter::parse(s).unwrap()
    }

    #[test]
    fn basic_routing() {
        let mut t = SubscriptionTrie::new();
        t.insert(&f("f/c/job_request"), 1, QoS::AtMostOnce);
        t.insert(&f("f/c/job_replies/#"), 2, QoS::AtLeastOnce);
        t.insert(&f("f/+/job_replies/+"), 3, QoS::ExactlyOnce);
        t.insert(&f("#"), 4, QoS::AtMostOnce);
        let m = t.matches("f/c/job_replies/k");
        assert_eq!(m.len(), 3);
        assert_eq!(m[&2], QoS::AtLeastOnce);
        assert_eq!(m[&3], QoS::ExactlyOnce);
        assert!(t.matches("f/c/job_request").contains_key(&1));
        assert!(t.matches("f/c/job_replies").contains_key(&2));
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn overlapping_filters_keep_highest_qos() {
        let mut t = SubscriptionTrie::new();
        t.insert(&f("a/b"), 1, QoS::AtMostOnce);
        t.insert(&f("a/+"), 1, QoS::ExactlyOnce);
        assert_eq!(t.matches("a/b")[&1], QoS::ExactlyOnce);
        assert!(t.insert(&f("a/b"), 1, QoS::AtLeastOnce));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn remove_prunes() {
        let mut t = SubscriptionTrie::new();
        t.insert(&f("a/+/c"), 1, QoS::AtMostOnce);
        t.insert(&f("a/#"), 1, QoS::AtMostOnce);
        assert!(t.remove(&f("a/+/c"), &1));
        assert!(!t.remove(&f("a/+/c"), &1));
        assert!(t.remove(&f("a/#"), &1));
        assert!(t.is_empty());
        assert!(t.root.is_empty());
    }

    fn level() -> impl Strategy<Value = String> {
        prop_oneof![Just("a".to_string()), Just("b".to_string()), Just("c".to_string())]
    }

    fn filter_text() -> impl Strategy<Value = String> {
        (
            proptest::collection::vec(prop_oneof![3 => level(), 1 => Just("+".to_string())], 0..5),
            any::<bool>(),
        )
            .prop_filter_map("non-empty", |(mut segs, hash)| {
                if hash {
                    segs.push("#".into());
                }
                (!segs.is_empty()).then(|| segs.join("/"))
            })
    }

    proptest! {
        #[test]
        fn trie_agrees_with_linear_scan(
            filters in proptest::collection::vec(filter_text(), 1..12),
            topics in proptest::collection::vec(proptest::collection::vec(level(), 1..6), 1..10),
        ) {
            let mut t = SubscriptionTrie::new();
            let parsed: Vec<TopicFilter> = filters.iter().map(|s| f(s)).collect();
            for (i, flt) in parsed.iter().enumerate() {
                t.insert(flt, i, QoS::AtMostOnce);
            }
            for segs in topics {
                let topic = segs.join("/");
                let mut got: Vec<usize> = t.matches(&topic).into_keys().collect();
                got.sort();
                let want: Vec<usize> = parsed.iter().enumerate().filter(|(_, f)| f.matches(&topic)).map(|(i, _)| i).collect();
                prop_assert_eq!(got, want);
            }
        }
    }
}
