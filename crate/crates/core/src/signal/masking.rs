use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Shortest and longest masked segment.
pub const SEGMENT_LEN: (usize, usize) = (3, 11);

/// Half-open masked span `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Draws disjoint segments with lengths uniform on `3..=11` until at least
/// `budget * valid_len` steps are covered. Sequences shorter than 3 steps
/// get no segments.
pub fn sample_mask_segments(valid_len: usize, budget: f64, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let (min_len, max_len) = SEGMENT_LEN;
    if valid_len < min_len || !(budget > 0.0 && budget < 1.0) {
        return Vec::new();
    }
    let target = budget * valid_len as f64;
    let mut covered = vec![false; valid_len];
    let mut segments = Vec::new();
    let mut masked = 0usize;
    let mut failures = 0;
    while (masked as f64) < target && failures < 200 {
        let len = rng.gen_range(min_len..=max_len);
        if len > valid_len {
            failures += 1;
            continue;
        }
        let start = rng.gen_range(0..=valid_len - len);
        if covered[start..start + len].iter().any(|&c| c) {
            failures += 1;
            continue;
        }
        covered[start..start + len].iter_mut().for_each(|c| *c = true);
        segments.push(Segment { start, len });
        masked += len;
    }
    segments.sort_by_key(|s| s.start);
    segments
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn too_short_gives_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask_segments(2, 0.15, &mut rng).is_empty());
    }

    #[test]
    fn lengths_disjointness_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for valid_len in [3, 7, 20, 64, 500] {
            for _ in 0..200 {
                let segs = sample_mask_segments(valid_len, 0.15, &mut rng);
                let total: usize = segs.iter().map(|s| s.len).sum();
                assert!(segs.iter().all(|s| (3..=11).contains(&s.len) && s.end() <= valid_len));
                assert!(segs.windows(2).all(|w| w[0].end() <= w[1].start));
                assert!(total as f64 <= 0.15 * valid_len as f64 + 11.0);
            }
        }
    }

    #[test]
    fn mean_masked_fraction_near_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 1000;
        let total: usize = (0..draws)
            .map(|_| sample_mask_segments(500, 0.15, &mut rng).iter().map(|s| s.len).sum::<usize>())
            .sum();
        let mean = total as f64 / (draws as f64 * 500.0);
        assert!((0.10..=0.20).contains(&mean), "mean fraction {mean}");
    }
}
