//! Seeded per-epoch batch plans.
//!
//! In pooled mode every batch holds at least one sample of each dataset:
//! per-dataset counts follow the cumulative proportional allocation of the
//! batch sizes, then any batch left without a dataset borrows one sample of
//! it from another batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::Dataset;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Every batch mixes all datasets present.
    Pooled,
    /// Plain shuffled batches with no composition constraint.
    Single,
}

/// Splits `0..provenance.len()` into batches for one epoch.
///
/// Batches hold `batch_size` samples except the last, which is partial.
/// In pooled mode a last batch too small to contain every dataset is merged
/// into the one before it.
pub fn mixed_batch_sampler(
    provenance: &[Dataset],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    mode: SamplerMode,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if provenance.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "epoch", epoch));
    match mode {
        SamplerMode::Single => {
            let mut order: Vec<usize> = (0..provenance.len()).collect();
            order.shuffle(&mut rng);
            Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
        }
        SamplerMode::Pooled => pooled(provenance, batch_size, &mut rng),
    }
}

fn pooled(
    provenance: &[Dataset],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut groups: Vec<(Dataset, Vec<usize>)> = Vec::new();
    for d in Dataset::ALL {
        let idx: Vec<usize> = (0..provenance.len())
            .filter(|&i| provenance[i] == d)
            .collect();
        if !idx.is_empty() {
            groups.push((d, idx));
        }
    }
    let k = groups.len();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "pooled sampling needs samples from at least two datasets".into(),
        ));
    }
    if batch_size < k {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} cannot hold one sample of each of {k} datasets"
        )));
    }
    for (_, idx) in &mut groups {
        idx.shuffle(rng);
    }
    let n = provenance.len();
    let mut sizes = vec![batch_size; n / batch_size];
    if !n.is_multiple_of(batch_size) {
        sizes.push(n % batch_size);
    }
    if sizes.len() > 1 && *sizes.last().unwrap() < k {
        let tail = sizes.pop().unwrap();
        *sizes.last_mut().unwrap() += tail;
    }
    let nb = sizes.len();
    if let Some((d, idx)) = groups.iter().find(|(_, idx)| idx.len() < nb) {
        return Err(Error::InvalidArgument(format!(
            "{d} has {} samples, too few to appear in all {nb} batches",
            idx.len()
        )));
    }

    let totals: Vec<usize> = groups.iter().map(|(_, idx)| idx.len()).collect();
    let mut counts = vec![vec![0usize; k]; nb];
    let mut prev = vec![0usize; k];
    let mut cum_size = 0;
    for (b, &s) in sizes.iter().enumerate() {
        cum_size += s;
        let cum = largest_remainder(cum_size, &totals, n);
        for j in 0..k {
            counts[b][j] = cum[j]
                .checked_sub(prev[j])
                .ok_or_else(|| Error::InvalidArgument("non-monotone batch allocation".into()))?;
        }
        prev = cum;
    }
    for b in 0..nb {
        for j in 0..k {
            if counts[b][j] > 0 {
                continue;
            }
            let donor = (0..nb)
                .find(|&o| counts[o][j] >= 2)
                .expect("dataset spans all batches");
            let e = (0..k)
                .filter(|&e| counts[b][e] >= 2)
                .max_by_key(|&e| (counts[b][e], std::cmp::Reverse(e)))
                .expect("batch holds at least k samples");
            counts[b][j] += 1;
            counts[b][e] -= 1;
            counts[donor][j] -= 1;
            counts[donor][e] += 1;
        }
    }

    let mut cursors = vec![0usize; k];
    let mut batches = Vec::with_capacity(nb);
    for row in &counts {
        let mut batch = Vec::with_capacity(row.iter().sum());
        for j in 0..k {
            batch.extend_from_slice(&groups[j].1[cursors[j]..cursors[j] + row[j]]);
            cursors[j] += row[j];
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(batches)
}

/// Integer apportionment of `total` in proportion to `weights` (summing to
/// `denom`); leftover units go to the largest remainders, lower index first.
fn largest_remainder(total: usize, weights: &[usize], denom: usize) -> Vec<usize> {
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / denom).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&j| (std::cmp::Reverse(weights[j] * total % denom), j));
    for j in order {
        if left == 0 {
            break;
        }
        out[j] += 1;
        left -= 1;
    }
    out
}
