use std::collections::HashMap;

use log::warn;

use crate::corpus::{InteractionSequence, ItemId};

/// Repeatedly drops sequences with fewer than `k` interactions and items
/// with fewer than `k` interactions until both conditions hold everywhere.
pub fn k_core_filter(sequences: &[InteractionSequence], k: usize) -> Vec<InteractionSequence> {
    let mut current: Vec<InteractionSequence> = sequences.to_vec();
    loop {
        let before: usize = current.iter().map(|s| s.len()).sum::<usize>() + current.len();
        current.retain(|s| s.len() >= k);
        let mut counts: HashMap<ItemId, usize> = HashMap::new();
        for s in &current {
            for &id in &s.items {
                *counts.entry(id).or_default() += 1;
            }
        }
        for s in current.iter_mut() {
            let keep: Vec<bool> = s.items.iter().map(|id| counts[id] >= k).collect();
            if keep.iter().all(|&x| x) {
                continue;
            }
            let mut it = keep.iter();
            s.items.retain(|_| *it.next().expect("mask"));
            let mut it = keep.iter();
            s.timestamps.retain(|_| *it.next().expect("mask"));
        }
        current.retain(|s| !s.is_empty());
        let after: usize = current.iter().map(|s| s.len()).sum::<usize>() + current.len();
        if after == before {
            break;
        }
    }
    if current.is_empty() && !sequences.is_empty() {
        warn!("{k}-core filtering removed every interaction");
    }
    current
}

pub fn five_core_filter(sequences: &[InteractionSequence]) -> Vec<InteractionSequence> {
    k_core_filter(sequences, 5)
}

/// Most recent `n_max` elements.
pub fn truncate_window<T>(items: &[T], n_max: usize) -> &[T] {
    &items[items.len().saturating_sub(n_max)..]
}

/// A held-out prediction: the context preceding the target item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub user: String,
    pub domain: String,
    pub context: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: Vec<InteractionSequence>,
    pub valid: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
}

/// Leave-one-out split: the last item is the test target, the one before
/// it the validation target, and the remaining prefix is training data.
/// Sequences shorter than `min_len` go to training whole.
pub fn leave_one_out_split(sequences: &[InteractionSequence], min_len: usize) -> SplitCorpus {
    let min_len = min_len.max(3);
    let mut split = SplitCorpus::default();
    for seq in sequences {
        let n = seq.len();
        if n < min_len {
            split.train.push(seq.clone());
            continue;
        }
        split.train.push(InteractionSequence {
            user: seq.user.clone(),
            domain: seq.domain.clone(),
            items: seq.items[..n - 2].to_vec(),
            timestamps: seq.timestamps[..n - 2].to_vec(),
        });
        split.valid.push(EvalInstance {
            user: seq.user.clone(),
            domain: seq.domain.clone(),
            context: seq.items[..n - 2].to_vec(),
            target: seq.items[n - 2],
        });
        split.test.push(EvalInstance {
            user: seq.user.clone(),
            domain: seq.domain.clone(),
            context: seq.items[..n - 1].to_vec(),
            target: seq.items[n - 1],
        });
    }
    split
}
