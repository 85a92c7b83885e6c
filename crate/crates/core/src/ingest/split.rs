use super::Corpus;

/// Leave-one-out split of one user: the last item is the test target, the
/// second to last the validation target, everything before is training.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    /// Position of the user in `SplitCorpus::corpus.sequences`.
    pub user: usize,
    pub user_id: String,
    pub train: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

impl UserSplit {
    /// Input sequence used to predict the validation target.
    pub fn valid_input(&self) -> &[usize] {
        &self.train
    }

    /// Input sequence used to predict the test target.
    pub fn test_input(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.push(self.valid_target);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCorpus {
    pub corpus: Corpus,
    pub users: Vec<UserSplit>,
    /// Users excluded because their sequence was shorter than 3.
    pub rejected: usize,
}

impl SplitCorpus {
    pub fn num_items(&self) -> usize {
        self.corpus.catalog.len()
    }
}

pub fn chronological_split(corpus: &Corpus) -> SplitCorpus {
    let mut users = Vec::new();
    let mut rejected = 0;
    for (u, seq) in corpus.sequences.iter().enumerate() {
        let n = seq.items.len();
        if n < 3 {
            rejected += 1;
            continue;
        }
        users.push(UserSplit {
            user: u,
            user_id: seq.user_id.clone(),
            train: seq.items[..n - 2].to_vec(),
            valid_target: seq.items[n - 2],
            test_target: seq.items[n - 1],
        });
    }
    if rejected > 0 {
        log::warn!("{rejected} users shorter than 3 interactions excluded from the split");
    }
    SplitCorpus {
        corpus: corpus.clone(),
        users,
        rejected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::testutil::corpus_from;
    use proptest::prelude::*;

    #[test]
    fn five_items() {
        let c = corpus_from(&[&["1", "2", "3", "4", "5"]]);
        let s = chronological_split(&c);
        let u = &s.users[0];
        assert_eq!(u.train, vec![0, 1, 2]);
        assert_eq!((u.valid_target, u.test_target), (3, 4));
        assert_eq!(u.test_input(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn minimum_length_and_rejection() {
        let c = corpus_from(&[&["1", "2", "3"], &["4", "5"]]);
        let s = chronological_split(&c);
        assert_eq!(s.users.len(), 1);
        assert_eq!(s.users[0].train, vec![0]);
        assert_eq!(s.rejected, 1);
    }

    proptest! {
        #[test]
        fn split_is_lossless(seqs in prop::collection::vec(prop::collection::vec(0usize..20, 0..15), 0..20)) {
            let names: Vec<Vec<String>> = seqs.iter().map(|s| s.iter().map(|i| i.to_string()).collect()).collect();
            let refs: Vec<Vec<&str>> = names.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
            let slices: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
            let c = corpus_from(&slices);
            let s = chronological_split(&c);
            prop_assert_eq!(s.users.len() + s.rejected, c.sequences.len());
            for u in &s.users {
                prop_assert!(!u.train.is_empty());
                let mut whole = u.train.clone();
                whole.push(u.valid_target);
                whole.push(u.test_target);
                prop_assert_eq!(&whole, &c.sequences[u.user].items);
            }
        }
    }
}
