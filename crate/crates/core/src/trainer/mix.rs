//! Seeded mixing of datasets in exact proportions.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sequence::{ConversationSample, SampleType};

/// Splits `total` into integer parts proportional to `weights` by the
/// largest-remainder rule. Ties in the remainder go to the earlier weight.
pub fn apportion(weights: &[u64], total: usize) -> Result<Vec<usize>> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return Err(Error::Mix("all mix weights are zero".into()));
    }
    let mut parts = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let scaled = total as u128 * w as u128;
        parts.push((scaled / sum) as usize);
        rems.push((scaled % sum, i));
    }
    let short = total - parts.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(short) {
        parts[i] += 1;
    }
    Ok(parts)
}

/// How many items to draw from the primary and general sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixSpec {
    Counts { primary: usize, general: usize },
    Ratio { primary: u64, general: u64, total: usize },
}

/// Draws `counts[i]` items without replacement from each source and
/// shuffles the union, all from one seeded stream.
pub fn mix_sources<T: Clone>(sources: &[&[T]], counts: &[usize], seed: u64) -> Result<Vec<T>> {
    if sources.len() != counts.len() {
        return Err(Error::Mix(format!(
            "{} sources but {} counts",
            sources.len(),
            counts.len()
        )));
    }
    if sources.iter().all(|s| s.is_empty()) {
        return Err(Error::Mix("every source is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (i, (src, &n)) in sources.iter().zip(counts).enumerate() {
        if n > src.len() {
            return Err(Error::Mix(format!(
                "source {i} holds {} items, {n} requested",
                src.len()
            )));
        }
        let mut picked = index::sample(&mut rng, src.len(), n).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|j| src[j].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Mixes a primary (domain) dataset with a general one.
pub fn data_mix<T: Clone>(primary: &[T], general: &[T], spec: MixSpec, seed: u64) -> Result<Vec<T>> {
    let (p, g) = match spec {
        MixSpec::Counts { primary, general } => (primary, general),
        MixSpec::Ratio {
            primary,
            general,
            total,
        } => {
            let parts = apportion(&[primary, general], total)?;
            (parts[0], parts[1])
        }
    };
    mix_sources(&[primary, general], &[p, g], seed)
}

/// Selects exactly `counts[type]` samples of each type. Types absent from
/// `counts` are dropped.
pub fn select_by_type(
    samples: &[ConversationSample],
    counts: &BTreeMap<SampleType, usize>,
    seed: u64,
) -> Result<Vec<ConversationSample>> {
    let mut groups: Vec<Vec<ConversationSample>> = Vec::new();
    let mut wanted = Vec::new();
    for (&kind, &n) in counts {
        groups.push(samples.iter().filter(|s| s.kind == kind).cloned().collect());
        wanted.push(n);
    }
    let refs: Vec<&[ConversationSample]> = groups.iter().map(Vec::as_slice).collect();
    mix_sources(&refs, &wanted, seed)
}
