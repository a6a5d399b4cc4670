use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::util::{self, Rng};

/// One episode: a domain with disjoint support and query index sets into
/// that domain's training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatch {
    pub domain: String,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Stateful episode stream.
///
/// Domains are drawn without replacement until every eligible domain has
/// been used once, then the order is reshuffled and the cycle repeats.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    domains: Vec<(String, usize)>,
    support_size: usize,
    query_size: usize,
    queue: Vec<usize>,
    rng: Rng,
}

impl TaskSampler {
    pub fn new(
        sizes: &BTreeMap<String, usize>,
        support_size: usize,
        query_size: usize,
        exclude: &[String],
        seed: u64,
    ) -> Result<Self> {
        if support_size == 0 || query_size == 0 {
            return Err(Error::Config(
                "support and query sizes must both be >= 1".into(),
            ));
        }
        for name in exclude {
            if !sizes.contains_key(name) {
                return Err(Error::UnknownDomain(name.clone()));
            }
        }
        let required = support_size + query_size;
        let mut domains = Vec::new();
        for (name, &size) in sizes {
            if exclude.contains(name) {
                continue;
            }
            if size < required {
                return Err(Error::DomainTooSmall {
                    domain: name.clone(),
                    available: size,
                    required,
                });
            }
            domains.push((name.clone(), size));
        }
        if domains.is_empty() {
            return Err(Error::InvalidInput("no domains left to sample tasks from".into()));
        }
        Ok(TaskSampler {
            domains,
            support_size,
            query_size,
            queue: Vec::new(),
            rng: util::rng(seed, 0x7a5c),
        })
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(|(d, _)| d.as_str())
    }

    pub fn next_task(&mut self) -> TaskBatch {
        if self.queue.is_empty() {
            self.queue = (0..self.domains.len()).collect();
            self.queue.shuffle(&mut self.rng);
            self.queue.reverse();
        }
        let d = self.queue.pop().expect("queue refilled above");
        let (name, size) = &self.domains[d];
        let picked = index::sample(&mut self.rng, *size, self.support_size + self.query_size)
            .into_vec();
        let (support, query) = picked.split_at(self.support_size);
        TaskBatch {
            domain: name.clone(),
            support: support.to_vec(),
            query: query.to_vec(),
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<TaskBatch> {
        (0..n).map(|_| self.next_task()).collect()
    }
}

/// One-shot sampling of `n` tasks from a fresh seeded stream.
pub fn sample_tasks(
    sizes: &BTreeMap<String, usize>,
    n: usize,
    support_size: usize,
    query_size: usize,
    exclude: &[String],
    seed: u64,
) -> Result<Vec<TaskBatch>> {
    Ok(TaskSampler::new(sizes, support_size, query_size, exclude, seed)?.next_batch(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sizes(n: usize, per: usize) -> BTreeMap<String, usize> {
        (0..n).map(|i| (format!("d{i}"), per)).collect()
    }

    #[test]
    fn three_domains_three_disjoint_batches() {
        let tasks = sample_tasks(&sizes(3, 10), 3, 4, 4, &[], 1).unwrap();
        assert_eq!(tasks.len(), 3);
        for t in &tasks {
            let ids: HashSet<_> = t.support.iter().chain(&t.query).collect();
            assert_eq!(ids.len(), 8);
            assert!(ids.iter().all(|&&i| i < 10));
        }
        // one full cycle visits every domain once
        let doms: HashSet<_> = tasks.iter().map(|t| t.domain.clone()).collect();
        assert_eq!(doms.len(), 3);
    }

    #[test]
    fn exclusion_filters_domain() {
        let tasks = sample_tasks(&sizes(3, 10), 6, 2, 2, &["d1".into()], 4).unwrap();
        assert!(tasks.iter().all(|t| t.domain != "d1"));
    }

    #[test]
    fn excluded_domain_may_be_small() {
        let mut s = sizes(2, 10);
        s.insert("tiny".into(), 1);
        assert!(sample_tasks(&s, 2, 4, 4, &["tiny".into()], 0).is_ok());
        match sample_tasks(&s, 2, 4, 4, &[], 0).unwrap_err() {
            Error::DomainTooSmall {
                domain, required, ..
            } => {
                assert_eq!(domain, "tiny");
                assert_eq!(required, 8);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_exclusion_is_error() {
        assert!(matches!(
            sample_tasks(&sizes(2, 10), 1, 1, 1, &["nope".into()], 0),
            Err(Error::UnknownDomain(_))
        ));
    }

    #[test]
    fn same_seed_same_stream() {
        let a = sample_tasks(&sizes(4, 30), 20, 8, 8, &[], 11).unwrap();
        let b = sample_tasks(&sizes(4, 30), 20, 8, 8, &[], 11).unwrap();
        assert_eq!(a, b);
        let c = sample_tasks(&sizes(4, 30), 20, 8, 8, &[], 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn support_query_disjoint_over_many_samplings() {
        let s = sizes(5, 20);
        for seed in 0..1000 {
            for t in sample_tasks(&s, 2, 8, 8, &[], seed).unwrap() {
                let sup: HashSet<_> = t.support.iter().collect();
                assert!(t.query.iter().all(|q| !sup.contains(q)));
                assert_eq!(sup.len(), 8);
            }
        }
    }
}
