use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Rating, RatingDataset, UserId};
use crate::error::{Error, Result};
use crate::rng;

/// Overlap users held out of the target domain as cold-start test users.
///
/// Test users are a prefix of one seeded permutation of the overlap users, so
/// for a fixed seed a lower cold rate always selects a subset of the test
/// users of a higher one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartSplit {
    pub target: usize,
    pub cold_rate: f64,
    pub seed: u64,
    test_users: Vec<UserId>,
    train_users: Vec<UserId>,
}

impl ColdStartSplit {
    pub fn test_users(&self) -> &[UserId] {
        &self.test_users
    }

    pub fn train_users(&self) -> &[UserId] {
        &self.train_users
    }

    pub fn is_test_user(&self, u: UserId) -> bool {
        self.test_users.binary_search(&u).is_ok()
    }

    /// A split with explicit user sets; used for fixtures.
    pub fn from_parts(
        target: usize,
        cold_rate: f64,
        seed: u64,
        mut test_users: Vec<UserId>,
        mut train_users: Vec<UserId>,
    ) -> Self {
        test_users.sort_unstable();
        train_users.sort_unstable();
        Self {
            target,
            cold_rate,
            seed,
            test_users,
            train_users,
        }
    }
}

pub fn make_cold_split(ds: &RatingDataset, target: usize, rate: f64, seed: u64) -> Result<ColdStartSplit> {
    ds.check_domain(target)?;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Split(format!("cold rate must be in (0, 1), got {rate}")));
    }
    let overlap = ds.overlap_users();
    if overlap.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 overlap users, found {}",
            overlap.len()
        )));
    }
    let n_test = (rate * overlap.len() as f64).round() as usize;
    if n_test == 0 || n_test == overlap.len() {
        return Err(Error::Split(format!(
            "cold rate {rate} over {} overlap users leaves an empty side",
            overlap.len()
        )));
    }
    let mut order = overlap.to_vec();
    order.shuffle(&mut rng::stream(seed, "cold-split", 0));
    let (test, train) = order.split_at(n_test);
    Ok(ColdStartSplit::from_parts(target, rate, seed, test.to_vec(), train.to_vec()))
}

/// Read access to everything training may see under a split: all source
/// domains, and the target domain minus every test user's ratings.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    ds: &'a RatingDataset,
    split: &'a ColdStartSplit,
}

impl<'a> TrainingView<'a> {
    pub fn new(ds: &'a RatingDataset, split: &'a ColdStartSplit) -> Result<Self> {
        ds.check_domain(split.target)?;
        if let Some(u) = split.test_users().iter().find(|u| split.train_users().binary_search(u).is_ok()) {
            return Err(Error::Protocol(format!(
                "user {} is both a cold-start test user and a training user",
                ds.user_name(*u)
            )));
        }
        Ok(Self { ds, split })
    }

    pub fn dataset(&self) -> &'a RatingDataset {
        self.ds
    }

    pub fn split(&self) -> &'a ColdStartSplit {
        self.split
    }

    pub fn target(&self) -> usize {
        self.split.target
    }

    pub fn train_users(&self) -> &'a [UserId] {
        self.split.train_users()
    }

    /// Ratings of domain `d` visible to training.
    pub fn domain_ratings(&self, d: usize) -> Vec<Rating> {
        let dom = self.ds.domain(d);
        dom.ratings()
            .iter()
            .filter(|r| d != self.split.target || !self.split.is_test_user(dom.global_user(r.user)))
            .copied()
            .collect()
    }

    /// The target-domain ratings of a training user.
    pub fn user_target_ratings(&self, user: UserId) -> Result<Vec<Rating>> {
        if self.split.is_test_user(user) {
            return Err(Error::Protocol(format!(
                "target ratings of cold-start test user {} are not visible to training",
                self.ds.user_name(user)
            )));
        }
        Ok(self.ds.domain(self.split.target).user_ratings(user).copied().collect())
    }

    /// Behaviour sequence in domain `d`; target sequences of test users are empty.
    pub fn behavior_sequence(&self, d: usize, user: UserId) -> Vec<u32> {
        if d == self.split.target && self.split.is_test_user(user) {
            return Vec::new();
        }
        self.ds.behavior_sequence(d, user)
    }

    /// Users that appear in the visible part of domain `d`.
    pub fn domain_users(&self, d: usize) -> BTreeSet<UserId> {
        let dom = self.ds.domain(d);
        self.domain_ratings(d)
            .iter()
            .map(|r| dom.global_user(r.user))
            .collect()
    }
}

/// Counts test-user target ratings reachable by training. Users listed on
/// both sides count in full; otherwise every access path of the training
/// view is walked: visible ratings, behaviour sequences, per-user lookups and
/// `epochs` epochs of training batches. A sound split gives zero.
pub fn leakage_scan(ds: &RatingDataset, split: &ColdStartSplit, epochs: u64) -> Result<usize> {
    let t = split.target;
    ds.check_domain(t)?;
    let dom = ds.domain(t);
    let shared: usize = split
        .test_users()
        .iter()
        .filter(|u| split.train_users().binary_search(u).is_ok())
        .map(|&u| dom.user_ratings(u).count())
        .sum();
    if shared > 0 {
        return Ok(shared);
    }
    let view = TrainingView::new(ds, split)?;
    let mut leaks = view
        .domain_ratings(t)
        .iter()
        .filter(|r| split.is_test_user(dom.global_user(r.user)))
        .count();
    for &u in split.test_users() {
        leaks += view.behavior_sequence(t, u).len();
        if let Ok(r) = view.user_target_ratings(u) {
            leaks += r.len();
        }
    }
    let all: Vec<usize> = (0..view.dataset().num_domains()).collect();
    for epoch in 0..epochs {
        for batch in super::iter_batches(view, &all, 64, split.seed, epoch)? {
            for e in &batch.entries {
                if split.is_test_user(e.user) {
                    leaks += 1 + e.sources[t].len();
                }
            }
        }
    }
    Ok(leaks)
}
