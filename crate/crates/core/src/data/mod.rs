//! Multi-domain rating data, cold-start splits and training batches.

mod batches;
mod codec;
mod ingest;
mod split;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batches::{iter_batches, Batch, BatchEntry, BatchIter};
pub use codec::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC};
pub use ingest::{ingest_csv, ingest_reader, CsvSchema, IngestStats};
pub use split::{leakage_scan, make_cold_split, ColdStartSplit, TrainingView};
pub use synth::{gen_synthetic, SyntheticSpec, SYNTH_SHIFT};

pub const MIN_RATING: f64 = 0.0;
pub const MAX_RATING: f64 = 5.0;
pub const DEFAULT_MAX_SEQUENCE: usize = 50;

/// Dense index of a user across all domains.
pub type UserId = u32;

/// One external rating row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingTriple {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub domain: usize,
}

/// A rating inside one domain, with domain-local user and item indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    name: String,
    /// local user -> global user
    users: Vec<UserId>,
    user_local: HashMap<UserId, u32>,
    items: Vec<String>,
    item_offset: usize,
    ratings: Vec<Rating>,
    by_user: Vec<Vec<usize>>,
}

impl Domain {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn global_user(&self, local: u32) -> UserId {
        self.users[local as usize]
    }

    pub fn local_user(&self, user: UserId) -> Option<u32> {
        self.user_local.get(&user).copied()
    }

    pub fn item_name(&self, local: u32) -> &str {
        &self.items[local as usize]
    }

    /// Position of this domain's items in the dataset-wide item id space.
    pub fn item_offset(&self) -> usize {
        self.item_offset
    }

    /// Ratings by `user` in stored (input) order.
    pub fn user_ratings(&self, user: UserId) -> impl Iterator<Item = &Rating> + '_ {
        self.local_user(user)
            .into_iter()
            .flat_map(move |l| self.by_user[l as usize].iter().map(|&i| &self.ratings[i]))
    }
}

/// Ratings across `N` domains with exclusive item sets and a shared user registry.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingDataset {
    user_names: Vec<String>,
    domains: Vec<Domain>,
    overlap: Vec<UserId>,
    max_sequence: usize,
    informativeness: Option<Vec<f64>>,
}

impl RatingDataset {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, d: usize) -> &Domain {
        &self.domains[d]
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn num_users(&self) -> usize {
        self.user_names.len()
    }

    pub fn user_name(&self, user: UserId) -> &str {
        &self.user_names[user as usize]
    }

    pub fn user_names(&self) -> &[String] {
        &self.user_names
    }

    pub fn find_user(&self, name: &str) -> Option<UserId> {
        self.user_names.iter().position(|n| n == name).map(|i| i as UserId)
    }

    /// Users with at least one rating in every domain, ascending.
    pub fn overlap_users(&self) -> &[UserId] {
        &self.overlap
    }

    pub fn max_sequence(&self) -> usize {
        self.max_sequence
    }

    /// Per-domain ground-truth informativeness, known only for synthetic data.
    pub fn informativeness(&self) -> Option<&[f64]> {
        self.informativeness.as_deref()
    }

    pub fn num_items_total(&self) -> usize {
        self.domains.iter().map(Domain::num_items).sum()
    }

    /// Dataset-wide item id for a domain-local item.
    pub fn global_item(&self, d: usize, local: u32) -> usize {
        self.domains[d].item_offset + local as usize
    }

    /// The user's behaviour sequence in domain `d`: most recent items last,
    /// truncated to the `max_sequence` latest interactions.
    pub fn behavior_sequence(&self, d: usize, user: UserId) -> Vec<u32> {
        let items: Vec<u32> = self.domains[d].user_ratings(user).map(|r| r.item).collect();
        let skip = items.len().saturating_sub(self.max_sequence);
        items[skip..].to_vec()
    }

    pub fn check_domain(&self, d: usize) -> Result<()> {
        if d < self.num_domains() {
            Ok(())
        } else {
            Err(Error::Lookup(format!(
                "domain {d} (dataset has {} domains)",
                self.num_domains()
            )))
        }
    }

    pub fn total_ratings(&self) -> usize {
        self.domains.iter().map(|d| d.ratings.len()).sum()
    }

    pub fn with_max_sequence(mut self, m: usize) -> Self {
        self.max_sequence = m.max(1);
        self
    }
}

/// Accumulates triples, resolving duplicate `(domain, user, item)` keys to
/// the last rating seen while keeping the key's first position.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    domain_names: Vec<String>,
    user_order: Vec<String>,
    entries: Vec<RatingTriple>,
    index: HashMap<(usize, String, String), usize>,
    duplicates: usize,
    informativeness: Option<Vec<f64>>,
    max_sequence: Option<usize>,
}

impl DatasetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn domain_names(mut self, names: Vec<String>) -> Self {
        self.domain_names = names;
        self
    }

    /// Fixes the global user order up front; later users are appended.
    pub fn user_order(mut self, users: Vec<String>) -> Self {
        self.user_order = users;
        self
    }

    pub fn informativeness(mut self, w: Option<Vec<f64>>) -> Self {
        self.informativeness = w;
        self
    }

    pub fn max_sequence(mut self, m: usize) -> Self {
        self.max_sequence = Some(m);
        self
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn push(&mut self, t: RatingTriple) -> Result<()> {
        if !(MIN_RATING..=MAX_RATING).contains(&t.rating) {
            return Err(Error::Validation(format!(
                "rating {} for user {} item {} is outside [0, 5]",
                t.rating, t.user_id, t.item_id
            )));
        }
        let key = (t.domain, t.user_id.clone(), t.item_id.clone());
        match self.index.get(&key) {
            Some(&i) => {
                self.entries[i].rating = t.rating;
                self.duplicates += 1;
            }
            None => {
                self.index.insert(key, self.entries.len());
                self.entries.push(t);
            }
        }
        Ok(())
    }

    /// Builds the dataset. With `min_interactions`, users and items with
    /// fewer ratings in a domain are removed from that domain repeatedly
    /// until every remaining one meets the threshold.
    pub fn build(self, min_interactions: Option<usize>) -> Result<(RatingDataset, usize)> {
        let n_domains = self
            .entries
            .iter()
            .map(|t| t.domain + 1)
            .max()
            .unwrap_or(0)
            .max(self.domain_names.len());
        if n_domains == 0 {
            return Err(Error::Validation("dataset has no ratings".into()));
        }
        let mut per_domain: Vec<Vec<&RatingTriple>> = vec![Vec::new(); n_domains];
        for t in &self.entries {
            per_domain[t.domain].push(t);
        }
        let mut removed = 0;
        if let Some(m) = min_interactions {
            for rows in &mut per_domain {
                let before = rows.len();
                core_filter(rows, m);
                removed += before - rows.len();
            }
        }
        for (d, rows) in per_domain.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::Validation(format!("domain {d} has no ratings")));
            }
        }

        // Global user ids: preset order first, then first appearance.
        let mut seen: HashMap<&str, bool> = HashMap::new();
        for rows in &per_domain {
            for t in rows {
                seen.insert(t.user_id.as_str(), true);
            }
        }
        let mut user_names: Vec<String> = Vec::new();
        let mut user_ids: HashMap<String, UserId> = HashMap::new();
        let mut register = |name: &str, names: &mut Vec<String>| {
            if !user_ids.contains_key(name) {
                user_ids.insert(name.to_string(), names.len() as UserId);
                names.push(name.to_string());
            }
        };
        for u in &self.user_order {
            if seen.contains_key(u.as_str()) {
                register(u, &mut user_names);
            }
        }
        for t in &self.entries {
            if seen.contains_key(t.user_id.as_str()) {
                register(&t.user_id, &mut user_names);
            }
        }
        let user_ids: HashMap<String, UserId> = user_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as UserId))
            .collect();

        let mut domains = Vec::with_capacity(n_domains);
        let mut item_offset = 0;
        for (d, rows) in per_domain.iter().enumerate() {
            let mut users = Vec::new();
            let mut user_local = HashMap::new();
            let mut items = Vec::new();
            let mut item_local: HashMap<&str, u32> = HashMap::new();
            let mut ratings = Vec::with_capacity(rows.len());
            let mut by_user: Vec<Vec<usize>> = Vec::new();
            for t in rows {
                let g = user_ids[&t.user_id];
                let lu = *user_local.entry(g).or_insert_with(|| {
                    users.push(g);
                    by_user.push(Vec::new());
                    (users.len() - 1) as u32
                });
                let li = *item_local.entry(t.item_id.as_str()).or_insert_with(|| {
                    items.push(t.item_id.clone());
                    (items.len() - 1) as u32
                });
                by_user[lu as usize].push(ratings.len());
                ratings.push(Rating {
                    user: lu,
                    item: li,
                    value: t.rating,
                });
            }
            let name = self
                .domain_names
                .get(d)
                .cloned()
                .unwrap_or_else(|| format!("domain{d}"));
            let n_items = items.len();
            domains.push(Domain {
                name,
                users,
                user_local,
                items,
                item_offset,
                ratings,
                by_user,
            });
            item_offset += n_items;
        }

        let overlap = (0..user_names.len() as UserId)
            .filter(|u| domains.iter().all(|d| d.user_local.contains_key(u)))
            .collect();
        if let Some(w) = &self.informativeness {
            if w.len() != n_domains {
                return Err(Error::Validation(format!(
                    "{} informativeness weights for {n_domains} domains",
                    w.len()
                )));
            }
        }
        Ok((
            RatingDataset {
                user_names,
                domains,
                overlap,
                max_sequence: self.max_sequence.unwrap_or(DEFAULT_MAX_SEQUENCE).max(1),
                informativeness: self.informativeness,
            },
            removed,
        ))
    }
}

/// Iteratively drops rows whose user or item has fewer than `m` rows.
fn core_filter(rows: &mut Vec<&RatingTriple>, m: usize) {
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for t in rows.iter() {
            *users.entry(&t.user_id).or_default() += 1;
            *items.entry(&t.item_id).or_default() += 1;
        }
        let before = rows.len();
        rows.retain(|t| users[t.user_id.as_str()] >= m && items[t.item_id.as_str()] >= m);
        if rows.len() == before {
            break;
        }
    }
}
