use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// Draws a P×K mini-batch: `p` distinct labels, `k` record indices each.
///
/// Labels with fewer than `k` records contribute all of them plus draws with
/// replacement. The returned indices are shuffled.
pub fn pk_sample<R: Rng + ?Sized>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::Sampling("P and K must be positive".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < p {
        return Err(Error::Sampling(format!(
            "need {p} distinct labels, only {} present",
            by_label.len()
        )));
    }
    let groups: Vec<&Vec<usize>> = by_label.values().collect();
    let chosen: Vec<&&Vec<usize>> = groups.choose_multiple(rng, p).collect();

    let mut batch = Vec::with_capacity(p * k);
    for members in chosen {
        if members.len() >= k {
            batch.extend(members.choose_multiple(rng, k).copied());
        } else {
            batch.extend(members.iter().copied());
            for _ in members.len()..k {
                batch.push(*members.choose(rng).expect("non-empty group"));
            }
        }
    }
    batch.shuffle(rng);
    Ok(batch)
}
