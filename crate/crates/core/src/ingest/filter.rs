use super::Corpus;

/// Removes items with an empty title from the catalog and every sequence,
/// re-densifying indices in their original order.
pub fn drop_untitled(corpus: &Corpus) -> Corpus {
    let keep: Vec<bool> = (0..corpus.catalog.len())
        .map(|i| !corpus.catalog.title(i).is_empty())
        .collect();
    corpus.retain_items(&keep)
}

/// Iterative k-core filtering: alternately drops users with fewer than `k`
/// interactions and items with fewer than `k` interactions until neither
/// step removes anything. The result is the unique largest sub-corpus in
/// which every user and every item has at least `k` interactions.
pub fn kcore_filter(corpus: &Corpus, k: usize) -> Corpus {
    let k = k.max(1);
    let mut current = corpus.clone();
    loop {
        current.sequences.retain(|s| s.len() >= k);
        let keep: Vec<bool> = current.item_counts().iter().map(|&c| c >= k).collect();
        if keep.iter().all(|&x| x) {
            return current;
        }
        current = current.retain_items(&keep);
    }
}
