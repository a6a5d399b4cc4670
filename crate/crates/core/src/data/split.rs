use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{Label, NewsItem};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainSplit {
    pub train: Vec<NewsItem>,
    pub val: Vec<NewsItem>,
    pub test: Vec<NewsItem>,
}

/// Per-domain, per-label shuffled split. Items are ordered by id before
/// shuffling so the result does not depend on input order.
pub fn split_stratified(
    items: &[NewsItem],
    ratios: SplitRatios,
    seed: u64,
) -> Result<BTreeMap<String, DomainSplit>> {
    if !(0.0..1.0).contains(&ratios.val)
        || !(0.0..1.0).contains(&ratios.test)
        || ratios.val + ratios.test >= 1.0
    {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let mut groups: BTreeMap<(String, Label), Vec<NewsItem>> = BTreeMap::new();
    for item in items {
        groups
            .entry((item.domain.clone(), item.label))
            .or_default()
            .push(item.clone());
    }

    let mut rng = util::rng(seed, 0x5117);
    let mut out: BTreeMap<String, DomainSplit> = BTreeMap::new();
    for ((domain, _), mut group) in groups {
        group.sort_by(|a, b| a.id.cmp(&b.id));
        group.shuffle(&mut rng);
        let n = group.len();
        let n_val = (n as f64 * ratios.val).round() as usize;
        let n_test = (n as f64 * ratios.test).round() as usize;
        let (n_val, n_test) = if n_val + n_test >= n {
            (0, 0)
        } else {
            (n_val, n_test)
        };
        let split = out.entry(domain).or_default();
        let mut it = group.into_iter();
        split.test.extend(it.by_ref().take(n_test));
        split.val.extend(it.by_ref().take(n_val));
        split.train.extend(it);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<NewsItem> {
        let mut v = Vec::new();
        for d in ["a", "b"] {
            for i in 0..50 {
                v.push(NewsItem {
                    id: format!("{d}{i:03}"),
                    text: "x".into(),
                    label: if i % 5 == 0 { Label::Fake } else { Label::Real },
                    domain: d.into(),
                });
            }
        }
        v
    }

    #[test]
    fn eight_one_one_stratified() {
        let s = split_stratified(&corpus(), SplitRatios::default(), 3).unwrap();
        for split in s.values() {
            assert_eq!(split.train.len(), 40);
            assert_eq!(split.val.len(), 5);
            assert_eq!(split.test.len(), 5);
            assert_eq!(split.test.iter().filter(|i| i.label == Label::Fake).count(), 1);
        }
    }

    #[test]
    fn deterministic_and_order_free() {
        let c = corpus();
        let mut rev = c.clone();
        rev.reverse();
        let a = split_stratified(&c, SplitRatios::default(), 9).unwrap();
        let b = split_stratified(&rev, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        let other = split_stratified(&c, SplitRatios::default(), 10).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn partitions_every_item_once() {
        let s = split_stratified(&corpus(), SplitRatios::default(), 1).unwrap();
        let mut ids: Vec<String> = s
            .values()
            .flat_map(|d| d.train.iter().chain(&d.val).chain(&d.test))
            .map(|i| i.id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }
}
