//! Domain-generalization split assembly.
//!
//! Records whose scenario attribute (generator, domain or scale) is listed
//! as held out form the target pool; everything else is the source pool.
//! Train and valid are drawn from the source pool, test from the target
//! pool. Each draw is label-balanced and, within a label, round-robins over
//! `(domain, generator)` strata taken in lexicographic order, each stratum
//! shuffled with the run seed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingRecord, PoolRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    CrossGenerator,
    CrossDomain,
    CrossScale,
    InDomain,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::CrossGenerator => "cross_generator",
            Scenario::CrossDomain => "cross_domain",
            Scenario::CrossScale => "cross_scale",
            Scenario::InDomain => "in_domain",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_generator" => Ok(Scenario::CrossGenerator),
            "cross_domain" => Ok(Scenario::CrossDomain),
            "cross_scale" => Ok(Scenario::CrossScale),
            "in_domain" => Ok(Scenario::InDomain),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub scenario: Scenario,
    /// Attribute values reserved for the test split.
    pub held_out: Vec<String>,
    pub train_cap: usize,
    pub valid_cap: usize,
    pub test_cap: usize,
}

impl SplitPlan {
    pub fn new(scenario: Scenario, held_out: Vec<String>) -> Self {
        Self {
            scenario,
            held_out,
            train_cap: 1000,
            valid_cap: 3000,
            test_cap: 6000,
        }
    }

    fn attribute<'a>(&self, r: &'a PoolRecord) -> &'a str {
        match self.scenario {
            Scenario::CrossGenerator => &r.tags.generator,
            Scenario::CrossDomain | Scenario::InDomain => &r.tags.domain,
            Scenario::CrossScale => &r.tags.scale,
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.scenario, self.held_out.is_empty()) {
            (Scenario::InDomain, false) => Err(Error::Config(
                "in_domain scenario takes no held-out values".into(),
            )),
            (Scenario::InDomain, true) => Ok(()),
            (_, true) => Err(Error::Config(format!(
                "{} scenario needs at least one held-out value",
                self.scenario
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitData {
    pub train: Vec<EmbeddingRecord>,
    pub valid: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
}

/// Draws up to `cap` records (half per label) from `available`, removing the
/// drawn indices.
fn draw_balanced(
    pool: &[PoolRecord],
    available: &mut Vec<usize>,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let quotas = [cap - cap / 2, cap / 2];
    let mut picked = Vec::new();
    for (label, &quota) in quotas.iter().enumerate() {
        let mut strata: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
        for &i in available.iter() {
            let r = &pool[i];
            if r.record.label as usize == label {
                strata
                    .entry((r.tags.domain.as_str(), r.tags.generator.as_str()))
                    .or_default()
                    .push(i);
            }
        }
        let mut queues: Vec<Vec<usize>> = strata
            .into_values()
            .map(|mut v| {
                v.shuffle(rng);
                v.reverse();
                v
            })
            .collect();
        let mut taken = 0;
        while taken < quota && queues.iter().any(|q| !q.is_empty()) {
            for q in queues.iter_mut() {
                if taken == quota {
                    break;
                }
                if let Some(i) = q.pop() {
                    picked.push(i);
                    taken += 1;
                }
            }
        }
    }
    available.retain(|i| !picked.contains(i));
    picked
}

fn collect(pool: &[PoolRecord], idx: &[usize]) -> Vec<EmbeddingRecord> {
    idx.iter().map(|&i| pool[i].record.clone()).collect()
}

/// Assembles train/valid/test, each shuffled. Deterministic given `seed`.
///
/// When the target pool lacks a label entirely (for example human-written
/// records under a held-out generator), that label is filled in the test
/// split from source records not used by train or valid.
pub fn build_split(pool: &[PoolRecord], plan: &SplitPlan, seed: u64) -> Result<SplitData> {
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut source, mut target): (Vec<usize>, Vec<usize>) = (0..pool.len())
        .partition(|&i| !plan.held_out.iter().any(|h| h == plan.attribute(&pool[i])));

    let train = draw_balanced(pool, &mut source, plan.train_cap, &mut rng);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let valid = draw_balanced(pool, &mut source, plan.valid_cap, &mut rng);
    if valid.is_empty() && plan.valid_cap > 0 {
        return Err(Error::EmptySplit("valid".into()));
    }
    let test = if plan.scenario == Scenario::InDomain {
        draw_balanced(pool, &mut source, plan.test_cap, &mut rng)
    } else {
        let mut test = draw_balanced(pool, &mut target, plan.test_cap, &mut rng);
        let have = |l: u8, t: &[usize]| t.iter().any(|&i| pool[i].record.label == l);
        for label in [0u8, 1] {
            if !have(label, &test) {
                let mut fill: Vec<usize> = source
                    .iter()
                    .copied()
                    .filter(|&i| pool[i].record.label == label)
                    .collect();
                let per_label = plan.test_cap / 2;
                let extra = draw_balanced(pool, &mut fill, per_label * 2, &mut rng);
                source.retain(|i| !extra.contains(i));
                test.extend(extra);
            }
        }
        test
    };
    if test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let (mut train, mut valid, mut test) = (train, valid, test);
    train.shuffle(&mut rng);
    valid.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(SplitData {
        train: collect(pool, &train),
        valid: collect(pool, &valid),
        test: collect(pool, &test),
    })
}
