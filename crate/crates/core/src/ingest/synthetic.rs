//! Seeded synthetic corpora whose titles carry a category word. Each user
//! prefers one category, so the next item's category is predictable from the
//! titles of the history.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, ItemCatalog, UserSequence};
use crate::error::{Error, Result};

/// Category words; distinct first letters, lower case so they never collide
/// with index letters.
pub const CATEGORY_WORDS: [&str; 16] = [
    "apple", "berry", "cedar", "delta", "ember", "fjord", "grove", "harbor", "iris", "jade", "kelp",
    "lumen", "maple", "nova", "onyx", "pearl",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Probability that an interaction comes from the user's category.
    pub preference: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 200,
            items: 100,
            categories: 10,
            min_length: 6,
            max_length: 20,
            preference: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.categories > CATEGORY_WORDS.len() {
            return Err(Error::Config(format!(
                "categories must be in 1..={}",
                CATEGORY_WORDS.len()
            )));
        }
        if self.items < self.categories || self.users == 0 {
            return Err(Error::Config("need at least one user and one item per category".into()));
        }
        if self.min_length < 3 || self.max_length < self.min_length {
            return Err(Error::Config("sequence lengths must satisfy 3 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.preference) {
            return Err(Error::Config("preference must be in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn category_of(item: usize, categories: usize) -> usize {
    item % categories
}

/// Item `i` is titled `"<word> <i>"` with the word of its category.
pub fn synthetic_corpus(config: &SyntheticConfig) -> Result<Corpus> {
    config.validate()?;
    let c = config.categories;
    let mut catalog = ItemCatalog::new();
    for i in 0..config.items {
        catalog.push(&format!("i{i}"), &format!("{} {i}", CATEGORY_WORDS[category_of(i, c)]))?;
    }
    let per_cat: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..config.items).filter(|&i| category_of(i, c) == k).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sequences = (0..config.users)
        .map(|u| {
            let pref = rng.gen_range(0..c);
            let len = rng.gen_range(config.min_length..=config.max_length);
            let items: Vec<usize> = (0..len)
                .map(|_| {
                    if rng.gen_bool(config.preference) {
                        per_cat[pref][rng.gen_range(0..per_cat[pref].len())]
                    } else {
                        rng.gen_range(0..config.items)
                    }
                })
                .collect();
            UserSequence {
                user_id: format!("u{u}"),
                timestamps: Some((0..len as i64).collect()),
                items,
            }
        })
        .collect();
    Ok(Corpus { catalog, sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = SyntheticConfig::default();
        let a = synthetic_corpus(&cfg).unwrap();
        assert_eq!(a, synthetic_corpus(&cfg).unwrap());
        a.validate().unwrap();
        assert_eq!(a.sequences.len(), cfg.users);
        assert_eq!(a.catalog.title(13), "delta 13");
        assert!(a.sequences.iter().all(|s| (6..=20).contains(&s.len())));
        let other = synthetic_corpus(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn full_preference_keeps_users_in_one_category() {
        let cfg = SyntheticConfig {
            preference: 1.0,
            ..SyntheticConfig::default()
        };
        for s in synthetic_corpus(&cfg).unwrap().sequences {
            let c0 = category_of(s.items[0], 10);
            assert!(s.items.iter().all(|&i| category_of(i, 10) == c0));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SyntheticConfig { categories: 0, ..Default::default() },
            SyntheticConfig { categories: 17, ..Default::default() },
            SyntheticConfig { items: 3, ..Default::default() },
            SyntheticConfig { min_length: 2, ..Default::default() },
            SyntheticConfig { preference: 1.5, ..Default::default() },
        ] {
            assert!(synthetic_corpus(&cfg).is_err());
        }
    }
}
