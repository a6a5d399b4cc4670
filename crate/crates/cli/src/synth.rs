//! Synthetic multi-domain corpora with controlled topical overlap.
//!
//! Every domain owns a pool of topic words. Pools are built in the listed
//! order: domain `j` first copies `round(overlap[i][j] · pool_size)` words
//! from each earlier domain `i`, then fills up with fresh words. An item is
//! a shuffle of topic words and `signals_per_item` label-signal words drawn
//! from two global lists. Its label is the majority signal (reversed in
//! domains marked `flip`), flipped afterwards with probability `noise`.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use xfer::util;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomain {
    pub name: String,
    pub size: usize,
    /// Reverse the meaning of the signal words in this domain.
    #[serde(default)]
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    /// Output directory for `<domain>.jsonl`.
    pub dir: PathBuf,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Words in each of the two signal lists.
    #[serde(default = "default_signal_words")]
    pub signal_words: usize,
    #[serde(default = "default_signals_per_item")]
    pub signals_per_item: usize,
    #[serde(default = "default_min_topic")]
    pub min_topic_words: usize,
    #[serde(default = "default_max_topic")]
    pub max_topic_words: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub domains: Vec<SynthDomain>,
    /// Symmetric, unit diagonal; defaults to the identity.
    #[serde(default)]
    pub overlap: Option<Vec<Vec<f64>>>,
}

fn default_pool_size() -> usize {
    40
}
fn default_signal_words() -> usize {
    6
}
fn default_signals_per_item() -> usize {
    3
}
fn default_min_topic() -> usize {
    8
}
fn default_max_topic() -> usize {
    16
}
fn default_noise() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let v = |m: String| Err(CliError::validation(format!("synth: {m}")));
        if self.domains.is_empty() {
            return v("no domains".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if d.name.trim().is_empty() || d.name.contains(['/', '\\']) {
                return v(format!("invalid domain name {:?}", d.name));
            }
            if !names.insert(&d.name) {
                return v(format!("duplicate domain {:?}", d.name));
            }
            if d.size == 0 {
                return v(format!("domain {:?} has size 0", d.name));
            }
        }
        if self.pool_size == 0 || self.signal_words == 0 || self.signals_per_item == 0 {
            return v("pool_size, signal_words and signals_per_item must be >= 1".into());
        }
        if self.signals_per_item % 2 == 0 {
            return v("signals_per_item must be odd so the majority is defined".into());
        }
        if self.min_topic_words > self.max_topic_words {
            return v("min_topic_words exceeds max_topic_words".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return v(format!("noise must be in [0, 0.5], got {}", self.noise));
        }
        if let Some(m) = &self.overlap {
            let n = self.domains.len();
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return v(format!("overlap must be {n}x{n}"));
            }
            for (i, row) in m.iter().enumerate() {
                for (j, &x) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&x) {
                        return v(format!("overlap[{i}][{j}] = {x} is not in [0, 1]"));
                    }
                    if x != m[j][i] {
                        return v(format!("overlap is not symmetric at [{i}][{j}]"));
                    }
                    if i == j && x != 1.0 {
                        return v(format!("overlap[{i}][{i}] must be 1"));
                    }
                }
            }
            for j in 0..n {
                let copied: f64 = (0..j).map(|i| m[i][j]).sum();
                if copied > 1.0 + 1e-12 {
                    return v(format!("domain {j} would copy more than its whole pool"));
                }
            }
        }
        Ok(())
    }

    fn overlap(&self, i: usize, j: usize) -> f64 {
        match &self.overlap {
            Some(m) => m[i][j],
            None => f64::from(u8::from(i == j)),
        }
    }
}

/// A pronounceable, unique word for every index.
pub fn word(mut n: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut out = String::new();
    for _ in 0..3 {
        let syl = n % (C.len() * V.len());
        n /= C.len() * V.len();
        out.push(C[syl / V.len()] as char);
        out.push(V[syl % V.len()] as char);
    }
    // indices past 70³ get a numeric suffix
    if n > 0 {
        out.push_str(&n.to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthRecord {
    pub id: String,
    pub text: String,
    pub label: u8,
    pub domain: String,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub pools: Vec<Vec<String>>,
    pub fake_signals: Vec<String>,
    pub real_signals: Vec<String>,
    pub records: Vec<Vec<SynthRecord>>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, CliError> {
    spec.validate()?;
    let mut rng = util::rng(spec.seed, 0x5e7d);
    let s = spec.signal_words;
    let fake_signals: Vec<String> = (0..s).map(word).collect();
    let real_signals: Vec<String> = (s..2 * s).map(word).collect();
    let mut next_word = 2 * s;

    let mut pools: Vec<Vec<String>> = Vec::new();
    for j in 0..spec.domains.len() {
        let mut pool: Vec<String> = Vec::with_capacity(spec.pool_size);
        for (i, earlier) in pools.iter().enumerate() {
            let want = (spec.overlap(i, j) * spec.pool_size as f64).round() as usize;
            let candidates: Vec<&String> = earlier.iter().filter(|w| !pool.contains(w)).collect();
            let picked: Vec<String> = candidates
                .choose_multiple(&mut rng, want.min(candidates.len()))
                .map(|w| (*w).clone())
                .collect();
            pool.extend(picked);
        }
        while pool.len() < spec.pool_size {
            pool.push(word(next_word));
            next_word += 1;
        }
        pool.truncate(spec.pool_size);
        pools.push(pool);
    }

    let mut records = Vec::new();
    for (d, pool) in spec.domains.iter().zip(&pools) {
        let mut rows = Vec::with_capacity(d.size);
        for i in 0..d.size {
            let n_topic = rng.gen_range(spec.min_topic_words..=spec.max_topic_words);
            let mut words: Vec<&str> = (0..n_topic)
                .map(|_| pool[rng.gen_range(0..pool.len())].as_str())
                .collect();
            let mut fake_votes = 0;
            for _ in 0..spec.signals_per_item {
                if rng.gen_bool(0.5) {
                    fake_votes += 1;
                    words.push(&fake_signals[rng.gen_range(0..s)]);
                } else {
                    words.push(&real_signals[rng.gen_range(0..s)]);
                }
            }
            words.shuffle(&mut rng);
            let mut fake = 2 * fake_votes > spec.signals_per_item;
            if d.flip {
                fake = !fake;
            }
            if rng.gen_bool(spec.noise) {
                fake = !fake;
            }
            rows.push(SynthRecord {
                id: format!("{}-{i:05}", d.name),
                text: words.join(" "),
                label: u8::from(fake),
                domain: d.name.clone(),
            });
        }
        records.push(rows);
    }
    Ok(SynthCorpus {
        pools,
        fake_signals,
        real_signals,
        records,
    })
}

/// Writes `<dir>/<domain>.jsonl` per domain and returns the paths.
pub fn write(corpus: &SynthCorpus, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for rows in &corpus.records {
        let Some(first) = rows.first() else { continue };
        let path = dir.join(format!("{}.jsonl", first.domain));
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, r).map_err(|e| CliError::runtime(e.to_string()))?;
            buf.write_all(b"\n").expect("writing to a Vec cannot fail");
        }
        util::write_atomic(&path, &buf)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            seed: 1,
            dir: "data".into(),
            pool_size: 50,
            signal_words: 5,
            signals_per_item: 3,
            min_topic_words: 5,
            max_topic_words: 9,
            noise: 0.0,
            domains: vec![
                SynthDomain { name: "t".into(), size: 200, flip: false },
                SynthDomain { name: "a".into(), size: 200, flip: false },
                SynthDomain { name: "b".into(), size: 200, flip: true },
            ],
            overlap: Some(vec![vec![1.0, 0.8, 0.0], vec![0.8, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
        }
    }

    #[test]
    fn words_are_unique() {
        let set: BTreeSet<String> = (0..20_000).map(word).collect();
        assert_eq!(set.len(), 20_000);
        assert!(set.iter().all(|w| w.chars().all(|c| c.is_ascii_alphanumeric())));
    }

    #[test]
    fn overlap_controls_shared_pool() {
        let c = generate(&spec()).unwrap();
        let t: BTreeSet<_> = c.pools[0].iter().collect();
        let shared_a = c.pools[1].iter().filter(|w| t.contains(w)).count();
        let shared_b = c.pools[2].iter().filter(|w| t.contains(w)).count();
        assert_eq!(shared_a, 40);
        assert_eq!(shared_b, 0);
    }

    #[test]
    fn labels_follow_signals() {
        let c = generate(&spec()).unwrap();
        let fake: BTreeSet<&str> = c.fake_signals.iter().map(String::as_str).collect();
        for (rows, flip) in c.records.iter().zip([false, false, true]) {
            for r in rows {
                let votes = r.text.split(' ').filter(|w| fake.contains(w)).count();
                assert_eq!(r.label == 1, (votes >= 2) != flip, "{}", r.text);
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.records, b.records);
        let other = generate(&SynthSpec { seed: 2, ..spec() }).unwrap();
        assert_ne!(a.records, other.records);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.domains[1].size = 0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.overlap.as_mut().unwrap()[0][1] = 1.5;
        s.overlap.as_mut().unwrap()[1][0] = 1.5;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.overlap.as_mut().unwrap()[0][2] = 0.3;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.signals_per_item = 2;
        assert!(s.validate().is_err());
    }
}
