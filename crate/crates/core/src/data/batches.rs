use rand::seq::SliceRandom;
use rand::Rng;

use super::{TrainingView, UserId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchEntry {
    pub user: UserId,
    /// Target-domain item (domain-local index) and its rating.
    pub target_item: u32,
    pub rating: f64,
    /// Behaviour sequence per requested source domain, in request order.
    pub sources: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub entries: Vec<BatchEntry>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One epoch of training batches. Users are shuffled with the epoch's seeded
/// stream and each contributes one target interaction drawn uniformly from
/// their visible target ratings.
pub struct BatchIter<'a> {
    view: TrainingView<'a>,
    sources: Vec<usize>,
    order: Vec<UserId>,
    picks: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn iter_batches<'a>(
    view: TrainingView<'a>,
    sources: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Iteration("batch size must be at least 1".into()));
    }
    let mut order: Vec<UserId> = view
        .train_users()
        .iter()
        .copied()
        .filter(|&u| {
            view.dataset()
                .domain(view.target())
                .user_ratings(u)
                .next()
                .is_some()
        })
        .collect();
    if order.is_empty() {
        return Err(Error::Iteration("no training users with target ratings".into()));
    }
    let mut r = rng::stream(seed, "batches", epoch);
    order.shuffle(&mut r);
    let picks = order
        .iter()
        .map(|&u| {
            let n = view.dataset().domain(view.target()).user_ratings(u).count();
            r.random_range(0..n)
        })
        .collect();
    Ok(BatchIter {
        view,
        sources: sources.to_vec(),
        order,
        picks,
        batch_size,
        pos: 0,
    })
}

impl BatchIter<'_> {
    pub fn num_users(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let entries = (self.pos..end)
            .map(|i| {
                let user = self.order[i];
                let target = self
                    .view
                    .user_target_ratings(user)
                    .expect("order holds training users only");
                let r = target[self.picks[i]];
                BatchEntry {
                    user,
                    target_item: r.item,
                    rating: r.value,
                    sources: self
                        .sources
                        .iter()
                        .map(|&d| self.view.behavior_sequence(d, user))
                        .collect(),
                }
            })
            .collect();
        self.pos = end;
        Some(Batch { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{make_cold_split, DatasetBuilder, RatingTriple};
    use super::*;

    fn ds(users: usize) -> crate::data::RatingDataset {
        let mut b = DatasetBuilder::new();
        for u in 0..users {
            for d in 0..2 {
                for i in 0..3 {
                    b.push(RatingTriple {
                        user_id: format!("u{u}"),
                        item_id: format!("i{i}"),
                        rating: (u + i) as f64 % 5.0,
                        domain: d,
                    })
                    .unwrap();
                }
            }
        }
        b.build(None).unwrap().0
    }

    #[test]
    fn batch_sizes_cover_all_users() {
        let data = ds(20);
        let split = make_cold_split(&data, 1, 0.5, 4).unwrap();
        let view = TrainingView::new(&data, &split).unwrap();
        let sizes: Vec<usize> = iter_batches(view, &[0], 4, 1, 0).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_epoch_same_order() {
        let data = ds(20);
        let split = make_cold_split(&data, 1, 0.5, 4).unwrap();
        let view = TrainingView::new(&data, &split).unwrap();
        let a: Vec<Batch> = iter_batches(view, &[0], 3, 7, 2).unwrap().collect();
        let b: Vec<Batch> = iter_batches(view, &[0], 3, 7, 2).unwrap().collect();
        let c: Vec<Batch> = iter_batches(view, &[0], 3, 7, 3).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn only_training_users_are_emitted() {
        let data = ds(30);
        let split = make_cold_split(&data, 1, 0.8, 2).unwrap();
        let view = TrainingView::new(&data, &split).unwrap();
        for batch in iter_batches(view, &[0], 5, 0, 0).unwrap() {
            for e in &batch.entries {
                assert!(!split.is_test_user(e.user));
                assert_eq!(e.sources.len(), 1);
            }
        }
    }

    #[test]
    fn zero_batch_size_is_an_error() {
        let data = ds(4);
        let split = make_cold_split(&data, 1, 0.5, 0).unwrap();
        let view = TrainingView::new(&data, &split).unwrap();
        assert!(matches!(iter_batches(view, &[0], 0, 0, 0), Err(Error::Iteration(_))));
    }
}
