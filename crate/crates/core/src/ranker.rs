//! Stage two: candidate scores from index-letter logits.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::{RemoteClient, TinyCausalLM};
use crate::prompt::{RenderedPrompt, Tokenizer};
use crate::retriever::{score_order, CandidateSet};
use crate::tensor::softmax;

/// Letter to token id map, in candidate order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    pub letters: Vec<char>,
    pub token_ids: Vec<usize>,
}

impl Verbalizer {
    pub fn new(tokenizer: &Tokenizer, letters: &[char]) -> Result<Self> {
        let mut token_ids = Vec::with_capacity(letters.len());
        for (i, &l) in letters.iter().enumerate() {
            if letters[..i].contains(&l) {
                return Err(Error::invalid(format!("letter {l:?} assigned twice")));
            }
            let toks = tokenizer.encode(&l.to_string());
            match toks.as_slice() {
                [t] if !tokenizer.is_special(*t) => token_ids.push(*t),
                _ => return Err(Error::invalid(format!("letter {l:?} is not a single token"))),
            }
        }
        Ok(Verbalizer {
            letters: letters.to_vec(),
            token_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }
}

/// Raw letter logits and their softmax, in candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct LetterScores {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl LetterScores {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        LetterScores {
            probabilities: softmax(&logits),
            logits,
        }
    }
}

/// Scores of the first `m` candidates read from a full logit vector.
pub fn extract_candidate_scores(logits: &[f64], verbalizer: &Verbalizer, m: usize) -> Result<LetterScores> {
    if m == 0 || m > verbalizer.len() {
        return Err(Error::invalid(format!(
            "{m} candidates but the verbalizer has {} letters",
            verbalizer.len()
        )));
    }
    let vals = verbalizer.token_ids[..m]
        .iter()
        .map(|&t| {
            logits.get(t).copied().ok_or_else(|| {
                Error::invalid(format!("token {t} outside logit vector of {}", logits.len()))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LetterScores::from_logits(vals))
}

/// Candidates reordered by the ranker.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// Items by descending score, letter order on ties.
    pub items: Vec<usize>,
    /// Scores aligned with `items`.
    pub scores: Vec<f64>,
    /// Letter logits and probabilities in the original candidate order.
    pub letters: LetterScores,
}

pub fn rank_candidates(candidates: &CandidateSet, scores: LetterScores) -> Result<RankingResult> {
    if scores.logits.len() != candidates.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} candidates",
            scores.logits.len(),
            candidates.len()
        )));
    }
    let mut pos: Vec<usize> = (0..candidates.len()).collect();
    pos.sort_by(|&a, &b| score_order(&scores.logits, a, b));
    Ok(RankingResult {
        items: pos.iter().map(|&p| candidates.items[p]).collect(),
        scores: pos.iter().map(|&p| scores.logits[p]).collect(),
        letters: scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Reranked,
    RetrieverTail,
}

/// Total catalog order: reranked head, then the remaining items in
/// retriever order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComposedRanking {
    pub order: Vec<usize>,
    pub head_len: usize,
}

impl ComposedRanking {
    pub fn provenance(&self, position: usize) -> Provenance {
        if position < self.head_len {
            Provenance::Reranked
        } else {
            Provenance::RetrieverTail
        }
    }
}

fn check_head(head: &[usize], n: usize) -> Result<Vec<bool>> {
    let mut in_head = vec![false; n];
    for &i in head {
        if i >= n {
            return Err(Error::UnknownItem {
                index: i,
                catalog_size: n,
            });
        }
        if in_head[i] {
            return Err(Error::invalid(format!("item {i} reranked twice")));
        }
        in_head[i] = true;
    }
    Ok(in_head)
}

pub fn compose_full_ranking(head: &[usize], retriever_scores: &[f64]) -> Result<ComposedRanking> {
    let in_head = check_head(head, retriever_scores.len())?;
    let mut tail: Vec<usize> = (0..retriever_scores.len()).filter(|&i| !in_head[i]).collect();
    tail.sort_unstable_by(|&a, &b| score_order(retriever_scores, a, b));
    let mut order = head.to_vec();
    order.extend(tail);
    Ok(ComposedRanking {
        order,
        head_len: head.len(),
    })
}

/// 1-based rank of `y` in [`compose_full_ranking`] without building it.
pub fn composed_rank(head: &[usize], retriever_scores: &[f64], y: usize) -> Result<usize> {
    check_head(head, retriever_scores.len())?;
    if let Some(p) = head.iter().position(|&i| i == y) {
        return Ok(p + 1);
    }
    let above = crate::eval::rank_of_ground_truth(retriever_scores, y)? - 1;
    let head_above = head
        .iter()
        .filter(|&&i| score_order(retriever_scores, i, y).is_lt())
        .count();
    Ok(head.len() + above - head_above + 1)
}

/// Source of index-letter logits for a rendered prompt.
pub trait LetterScorer {
    /// Logits of `prompt.letters` at the position after the prompt context,
    /// from a single forward pass.
    fn letter_logits(&self, prompt: &RenderedPrompt) -> Result<Vec<f64>>;
}

/// Local model with the character tokenizer.
pub struct LocalScorer<'a> {
    pub model: &'a TinyCausalLM,
    pub tokenizer: Tokenizer,
}

impl<'a> LocalScorer<'a> {
    pub fn new(model: &'a TinyCausalLM) -> Self {
        LocalScorer {
            model,
            tokenizer: Tokenizer::default(),
        }
    }
}

impl LetterScorer for LocalScorer<'_> {
    fn letter_logits(&self, prompt: &RenderedPrompt) -> Result<Vec<f64>> {
        let v = Verbalizer::new(&self.tokenizer, &prompt.letters)?;
        let logits = self.model.next_token_logits(prompt.context())?;
        Ok(extract_candidate_scores(&logits, &v, v.len())?.logits)
    }
}

impl LetterScorer for RemoteClient {
    fn letter_logits(&self, prompt: &RenderedPrompt) -> Result<Vec<f64>> {
        let tok = Tokenizer::default();
        let context = tok.decode(prompt.context());
        self.letter_logits(&context, &prompt.letters)
    }
}

/// Scores every letter equally; the ranking falls back to retriever order.
pub struct UniformScorer;

impl LetterScorer for UniformScorer {
    fn letter_logits(&self, prompt: &RenderedPrompt) -> Result<Vec<f64>> {
        Ok(vec![0.0; prompt.letters.len()])
    }
}

/// Ranks one user's candidates from an already rendered prompt.
pub fn rank_with<S: LetterScorer + ?Sized>(
    scorer: &S,
    prompt: &RenderedPrompt,
    candidates: &CandidateSet,
) -> Result<RankingResult> {
    if prompt.letters.len() != candidates.len() {
        return Err(Error::invalid("prompt letters do not match the candidate set"));
    }
    let logits = scorer.letter_logits(prompt)?;
    rank_candidates(candidates, LetterScores::from_logits(logits))
}

/// Ensures `target` is in the pool: if absent it replaces a uniformly
/// chosen slot, so the pool size is unchanged.
pub fn inject_ground_truth<R: Rng>(candidates: &[usize], target: usize, rng: &mut R) -> Vec<usize> {
    let mut pool = candidates.to_vec();
    if !pool.contains(&target) && !pool.is_empty() {
        let slot = rng.gen_range(0..pool.len());
        pool[slot] = target;
    }
    pool
}

/// Ranked head of one user as written to `ranking.out`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub user_id: String,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl From<(&str, &RankingResult)> for RankedList {
    fn from((user, r): (&str, &RankingResult)) -> Self {
        RankedList {
            user_id: user.to_string(),
            items: r.items.clone(),
            scores: r.scores.clone(),
        }
    }
}

/// One line per user: `user<TAB>item:score:r ...<TAB>tail=retriever`. The
/// `r` flag marks reranked items; the rest of the catalog follows in
/// retriever order.
pub fn write_ranked<W: Write>(mut w: W, lists: &[RankedList]) -> Result<()> {
    for l in lists {
        let head: Vec<String> = l
            .items
            .iter()
            .zip(&l.scores)
            .map(|(i, s)| format!("{i}:{s}:r"))
            .collect();
        writeln!(w, "{}\t{}\ttail=retriever", l.user_id, head.join(" "))?;
    }
    Ok(())
}

pub fn read_ranked<R: BufRead>(r: R) -> Result<Vec<RankedList>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::parse(n + 1, m.to_string());
        let mut parts = line.split('\t');
        let user = parts.next().ok_or_else(|| bad("missing user"))?;
        let head = parts.next().ok_or_else(|| bad("missing ranked items"))?;
        if parts.next() != Some("tail=retriever") {
            return Err(bad("missing tail marker"));
        }
        let mut list = RankedList {
            user_id: user.to_string(),
            items: Vec::new(),
            scores: Vec::new(),
        };
        for entry in head.split_whitespace() {
            let f: Vec<&str> = entry.split(':').collect();
            if f.len() != 3 || f[2] != "r" {
                return Err(bad(&format!("bad entry {entry:?}")));
            }
            list.items.push(f[0].parse().map_err(|_| bad("bad item"))?);
            list.scores.push(f[1].parse().map_err(|_| bad("bad score"))?);
        }
        out.push(list);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::argsort_desc;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cands(items: Vec<usize>) -> CandidateSet {
        CandidateSet {
            user_id: "u".into(),
            scores: (0..items.len()).rev().map(|s| s as f64).collect(),
            items,
        }
    }

    fn letters(m: usize) -> Verbalizer {
        let ls: Vec<char> = ('A'..='Z').take(m).collect();
        Verbalizer::new(&Tokenizer::default(), &ls).unwrap()
    }

    #[test]
    fn verbalizer_rejects_bad_letters() {
        let t = Tokenizer::default();
        assert!(Verbalizer::new(&t, &['A', 'A']).is_err());
        assert!(Verbalizer::new(&t, &['日']).is_err());
        assert_eq!(letters(20).len(), 20);
    }

    #[test]
    fn maximum_letter_wins() {
        let v = letters(5);
        let mut logits = vec![0.0; Tokenizer::default().vocab_size()];
        logits[v.token_ids[2]] = 3.0;
        let s = extract_candidate_scores(&logits, &v, 5).unwrap();
        let r = rank_candidates(&cands(vec![10, 11, 12, 13, 14]), s).unwrap();
        assert_eq!(r.items[0], 12);
        assert!((r.letters.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(extract_candidate_scores(&logits, &v, 6).is_err());
        assert!(extract_candidate_scores(&logits[..10], &v, 5).is_err());
    }

    #[test]
    fn ties_keep_letter_order() {
        let s = LetterScores::from_logits(vec![1.0; 4]);
        assert!(s.probabilities.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let r = rank_candidates(&cands(vec![7, 3, 9, 1]), s).unwrap();
        assert_eq!(r.items, vec![7, 3, 9, 1]);
    }

    #[test]
    fn order_follows_scores() {
        let c = cands(vec![5, 6, 7]);
        let r = rank_candidates(&c, LetterScores::from_logits(vec![3.0, 2.0, 1.0])).unwrap();
        assert_eq!(r.items, vec![5, 6, 7]);
        let r = rank_candidates(&c, LetterScores::from_logits(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(r.items, vec![7, 6, 5]);
        assert!(rank_candidates(&c, LetterScores::from_logits(vec![1.0])).is_err());
    }

    #[test]
    fn random_scores_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let items: Vec<usize> = (0..20).map(|i| 100 + i).collect();
            let s: Vec<f64> = (0..20).map(|_| rng.gen_range(0..5) as f64).collect();
            let r = rank_candidates(&cands(items.clone()), LetterScores::from_logits(s.clone())).unwrap();
            let mut oracle: Vec<(usize, f64)> = (0..20).map(|i| (i, s[i])).collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expect: Vec<usize> = oracle.iter().map(|p| items[p.0]).collect();
            assert_eq!(r.items, expect);
        }
    }

    #[test]
    fn composition_examples() {
        // catalog of 40 items, retriever order = ascending index
        let scores: Vec<f64> = (0..40).map(|i| -(i as f64)).collect();
        let head: Vec<usize> = (0..20).rev().collect();
        let c = compose_full_ranking(&head, &scores).unwrap();
        assert_eq!(c.order[..20], head[..]);
        assert_eq!(c.order[20..], (20..40).collect::<Vec<_>>()[..]);
        assert_eq!(c.provenance(19), Provenance::Reranked);
        assert_eq!(c.provenance(20), Provenance::RetrieverTail);
        // ground truth at overall retriever rank 25 stays at rank 25
        assert_eq!(composed_rank(&head, &scores, 24).unwrap(), 25);
        assert_eq!(composed_rank(&head, &scores, 0).unwrap(), 20);
        let all: Vec<usize> = (0..40).rev().collect();
        assert_eq!(compose_full_ranking(&all, &scores).unwrap().order, all);
        assert!(compose_full_ranking(&[1, 1], &scores).is_err());
        assert!(compose_full_ranking(&[41], &scores).is_err());
    }

    #[test]
    fn composed_rank_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.gen_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let k = rng.gen_range(1..=n);
            let mut head = argsort_desc(&scores)[..k].to_vec();
            head.reverse();
            let composed = compose_full_ranking(&head, &scores).unwrap();
            let mut sorted = composed.order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            for y in 0..n {
                let pos = composed.order.iter().position(|&i| i == y).unwrap() + 1;
                assert_eq!(composed_rank(&head, &scores, y).unwrap(), pos);
            }
            // tail keeps retriever order
            let tail = &composed.order[k..];
            assert!(tail.windows(2).all(|w| score_order(&scores, w[0], w[1]).is_lt()));
        }
    }

    #[test]
    fn injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_ground_truth(&[1, 2, 3], 2, &mut rng), vec![1, 2, 3]);
        let mut slots = [0usize; 3];
        for _ in 0..300 {
            let p = inject_ground_truth(&[1, 2, 3], 9, &mut rng);
            assert_eq!(p.len(), 3);
            slots[p.iter().position(|&i| i == 9).unwrap()] += 1;
        }
        assert!(slots.iter().all(|&c| c > 60), "{slots:?}");
    }

    #[test]
    fn ranked_file_roundtrip() {
        let lists = vec![
            RankedList {
                user_id: "a".into(),
                items: vec![3, 1],
                scores: vec![0.5, -1.25],
            },
            RankedList {
                user_id: "b".into(),
                items: vec![2],
                scores: vec![0.0],
            },
        ];
        let mut buf = Vec::new();
        write_ranked(&mut buf, &lists).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "a\t3:0.5:r 1:-1.25:r\ttail=retriever\nb\t2:0:r\ttail=retriever\n"
        );
        assert_eq!(read_ranked(buf.as_slice()).unwrap(), lists);
        assert!(read_ranked("a\t1:2\ttail=retriever\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn shift_invariance(logits in prop::collection::vec(-20.0f64..20.0, 2..21), c in -1e3f64..1e3) {
            let m = logits.len();
            let base = cands((0..m).collect());
            let a = rank_candidates(&base, LetterScores::from_logits(logits.clone())).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let b = rank_candidates(&base, LetterScores::from_logits(shifted)).unwrap();
            // exact ties may split after rounding; compare with distinct values only
            let mut d = logits.clone();
            d.sort_by(f64::total_cmp);
            if d.windows(2).all(|w| w[1] - w[0] > 1e-9) {
                prop_assert_eq!(a.items, b.items);
            }
            for (p, q) in a.letters.probabilities.iter().zip(&b.letters.probabilities) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn permutation_equivariance(perm in Just((0usize..8).collect::<Vec<_>>()).prop_shuffle(),
                                    logits in prop::collection::vec(-5.0f64..5.0, 8)) {
            let items: Vec<usize> = (20..28).collect();
            let a = rank_candidates(&cands(items.clone()), LetterScores::from_logits(logits.clone())).unwrap();
            let p_items: Vec<usize> = perm.iter().map(|&j| items[j]).collect();
            let p_logits: Vec<f64> = perm.iter().map(|&j| logits[j]).collect();
            let b = rank_candidates(&cands(p_items), LetterScores::from_logits(p_logits)).unwrap();
            let mut d = logits.clone();
            d.sort_by(f64::total_cmp);
            if d.windows(2).all(|w| w[1] > w[0]) {
                prop_assert_eq!(a.items, b.items);
            }
        }
    }
}
