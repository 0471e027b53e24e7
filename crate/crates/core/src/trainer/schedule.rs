//! Batch order and per-step random streams, all derived from the run seed
//! so that any step can be reproduced without replaying earlier ones.

use crate::math::Rng;

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn permutation(seed: u64, tag: &str, index: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derived(seed, tag, index).shuffle(&mut order);
    order
}

/// Shuffled batches covering a corpus of `n` sentences once (the last batch
/// may be short).
pub fn epoch_batches(seed: u64, tag: &str, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    permutation(seed, tag, epoch as u64, n)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Student target batches for `epoch`; they define the epoch length.
pub fn target_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    epoch_batches(seed, "target-order", epoch, n, batch_size)
}

/// Teacher batches over the source corpus for `epoch`.
pub fn teacher_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    epoch_batches(seed, "teacher-order", epoch, n, batch_size)
}

/// Source batch for student step `step`: the source corpus is read as an
/// endless sequence of independently shuffled passes, `batch_size` at a time.
pub fn source_batch(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let start = step as usize * batch_size;
    let mut cycle = usize::MAX;
    let mut perm = Vec::new();
    (start..start + batch_size)
        .map(|pos| {
            if pos / n != cycle {
                cycle = pos / n;
                perm = permutation(seed, "source-order", cycle as u64, n);
            }
            perm[pos % n]
        })
        .collect()
}

pub fn dropout_rng(seed: u64, phase: &str, step: u64) -> Rng {
    Rng::derived(seed, &format!("{phase}-dropout"), step)
}

pub fn span_rng(seed: u64, phase: &str, step: u64) -> Rng {
    Rng::derived(seed, &format!("{phase}-spans"), step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_cover_once() {
        let b = target_batches(3, 0, 35, 16);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 3]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..35).collect::<Vec<_>>());
        assert_ne!(target_batches(3, 1, 35, 16), b);
        assert_eq!(steps_per_epoch(35, 16), 3);
    }

    #[test]
    fn source_stream_cycles_through_whole_passes() {
        let n = 10;
        let seq: Vec<usize> = (0..5).flat_map(|s| source_batch(9, s, n, 4)).collect();
        for pass in seq.chunks(n) {
            let mut p = pass.to_vec();
            p.sort();
            assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(source_batch(9, 3, n, 4), source_batch(9, 3, n, 4));
    }
}
