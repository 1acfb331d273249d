//! Permutation bank: a fixed set of K cube-order permutations chosen to be
//! mutually far apart in Hamming distance, so the ordering task stays
//! discriminative. Selection is greedy farthest-point over the full
//! permutation space (enumerable up to M = 12), or over a random candidate
//! pool for larger M.
//!
//! Permutations are 1-based: a permutation of M items is a sequence of M
//! distinct integers in [1, M], and `apply` places `items[p[i]-1]` at slot `i`.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// Candidate pool size for sampled-mode generation (M > 12).
pub const SAMPLED_POOL_SIZE: usize = 1_000_000;

/// Largest M for which the full permutation space is used.
pub const MAX_ENUMERATED_M: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationBank {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    /// Minimum Hamming distance over all selected pairs (0 when K = 1).
    pub min_pairwise_distance: usize,
    pub perms: Vec<Vec<u8>>,
}

// === permutation primitives ===

/// Number of positions where `a` and `b` disagree.
pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Checks that `p` contains each of 1..=m exactly once.
pub fn validate_permutation(p: &[u8], m: usize) -> Result<()> {
    if p.len() != m {
        return Err(Error::shape(
            "permutation",
            format!("length {m}"),
            format!("length {}", p.len()),
        ));
    }
    let mut seen = vec![false; m];
    for &v in p {
        let idx = v as usize;
        if idx < 1 || idx > m || seen[idx - 1] {
            return Err(Error::Config(format!(
                "invalid permutation {p:?}: entries must be distinct integers in [1, {m}]"
            )));
        }
        seen[idx - 1] = true;
    }
    Ok(())
}

/// Reorders `items` so that slot `i` receives `items[p[i] - 1]`.
pub fn apply_permutation<T: Clone>(p: &[u8], items: &[T]) -> Result<Vec<T>> {
    validate_permutation(p, items.len())?;
    Ok(p.iter().map(|&v| items[v as usize - 1].clone()).collect())
}

/// Inverse permutation: `apply(invert(p), apply(p, items)) == items`.
pub fn invert_permutation(p: &[u8]) -> Vec<u8> {
    let mut q = vec![0u8; p.len()];
    for (i, &v) in p.iter().enumerate() {
        q[v as usize - 1] = (i + 1) as u8;
    }
    q
}

/// In-place step to the lexicographic successor; false once `p` is the last
/// (descending) arrangement.
pub fn next_permutation(p: &mut [u8]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn factorial(m: usize) -> u64 {
    (1..=m as u64).product()
}

/// Permutation at lexicographic position `idx` (factorial number system).
pub fn unrank_permutation(m: usize, mut idx: u64) -> Vec<u8> {
    let mut pool: Vec<u8> = (1..=m as u8).collect();
    let mut out = Vec::with_capacity(m);
    for rem in (0..m).rev() {
        let f = factorial(rem);
        let pos = (idx / f) as usize;
        idx %= f;
        out.push(pool.remove(pos));
    }
    out
}

// === greedy farthest-point selection ===

/// Source of candidates in lexicographic order. Materialized when the space
/// fits comfortably in memory, regenerated per pass otherwise.
enum CandidateSpace {
    Materialized(Vec<Vec<u8>>),
    Streamed { m: usize, count: usize },
}

impl CandidateSpace {
    fn len(&self) -> usize {
        match self {
            CandidateSpace::Materialized(v) => v.len(),
            CandidateSpace::Streamed { count, .. } => *count,
        }
    }

    fn get(&self, idx: usize) -> Vec<u8> {
        match self {
            CandidateSpace::Materialized(v) => v[idx].clone(),
            CandidateSpace::Streamed { m, .. } => unrank_permutation(*m, idx as u64),
        }
    }

    /// Calls `f(i, perm_i)` for every candidate, in order.
    fn for_each(&self, mut f: impl FnMut(usize, &[u8])) {
        match self {
            CandidateSpace::Materialized(v) => {
                for (i, p) in v.iter().enumerate() {
                    f(i, p);
                }
            }
            CandidateSpace::Streamed { m, count } => {
                let mut p: Vec<u8> = (1..=*m as u8).collect();
                let mut i = 0;
                loop {
                    f(i, &p);
                    i += 1;
                    if !next_permutation(&mut p) {
                        break;
                    }
                }
                debug_assert_eq!(i, *count);
            }
        }
    }
}

/// Greedy max-min selection of `k` candidates: start from a seeded random
/// candidate, then repeatedly add the candidate with the largest minimum
/// Hamming distance to everything selected so far. Ties resolve to the
/// lexicographically smallest candidate (candidates are in lex order, so the
/// first index attaining the maximum wins).
fn greedy_select(space: &CandidateSpace, k: usize, seed: u64) -> (Vec<Vec<u8>>, usize) {
    let n = space.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..n as u64) as usize;

    let mut selected: Vec<Vec<u8>> = Vec::with_capacity(k);
    selected.push(space.get(start));
    let mut min_dist = vec![u8::MAX; n];
    let mut bank_min = usize::MAX;

    while selected.len() < k {
        let last = selected.last().unwrap().clone();
        let mut best_idx = 0usize;
        let mut best_val = 0u8;
        space.for_each(|i, p| {
            let d = hamming(p, &last) as u8;
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_val {
                best_val = min_dist[i];
                best_idx = i;
            }
        });
        bank_min = bank_min.min(best_val as usize);
        selected.push(space.get(best_idx));
    }
    if k < 2 {
        bank_min = 0;
    }
    (selected, bank_min)
}

impl PermutationBank {
    /// Builds a bank over the full space of M-item permutations.
    ///
    /// M is capped at 12; beyond that the space cannot be enumerated and
    /// [`PermutationBank::generate_sampled`] must be used instead.
    pub fn generate(m: usize, k: usize, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!(
                "bank requires M >= 2 cubes, got M={m}"
            )));
        }
        if m > MAX_ENUMERATED_M {
            return Err(Error::Capacity(format!(
                "M={m} exceeds the enumerable bound of {MAX_ENUMERATED_M} \
                 ({MAX_ENUMERATED_M}! permutations); use sampled generation \
                 (generate_sampled / --sampled) for larger grids"
            )));
        }
        let total = factorial(m);
        if k == 0 || k as u64 > total {
            return Err(Error::Capacity(format!(
                "K={k} outside [1, {total}] for M={m}"
            )));
        }
        // 10! of length-10 vectors is ~36 MB; 11! and 12! are regenerated per
        // pass instead of held in memory.
        let space = if m <= 10 {
            let mut all = Vec::with_capacity(total as usize);
            let mut p: Vec<u8> = (1..=m as u8).collect();
            loop {
                all.push(p.clone());
                if !next_permutation(&mut p) {
                    break;
                }
            }
            CandidateSpace::Materialized(all)
        } else {
            CandidateSpace::Streamed {
                m,
                count: total as usize,
            }
        };
        let (perms, min_pairwise_distance) = greedy_select(&space, k, seed);
        Ok(PermutationBank {
            m,
            k,
            seed,
            min_pairwise_distance,
            perms,
        })
    }

    /// Bank for M > 12: greedy selection over a pool of `pool_size` distinct
    /// uniformly sampled permutations (sorted, so tie-breaking matches the
    /// enumerated mode).
    pub fn generate_sampled(m: usize, k: usize, seed: u64, pool_size: usize) -> Result<Self> {
        if m < 2 || m > u8::MAX as usize {
            return Err(Error::Config(format!(
                "sampled bank requires 2 <= M <= 255, got M={m}"
            )));
        }
        // Distinct sampling cannot exceed the space itself.
        let pool_size = if m <= 20 {
            pool_size.min(factorial(m) as usize)
        } else {
            pool_size
        };
        if k == 0 || k > pool_size {
            return Err(Error::Capacity(format!(
                "K={k} outside [1, pool_size={pool_size}]"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut pool_set: HashSet<Vec<u8>> = HashSet::with_capacity(pool_size);
        let base: Vec<u8> = (1..=m as u8).collect();
        while pool_set.len() < pool_size {
            let mut p = base.clone();
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                p.swap(i, j);
            }
            pool_set.insert(p);
        }
        let mut pool: Vec<Vec<u8>> = pool_set.into_iter().collect();
        pool.sort_unstable();
        let (perms, min_pairwise_distance) =
            greedy_select(&CandidateSpace::Materialized(pool), k, seed);
        Ok(PermutationBank {
            m,
            k,
            seed,
            min_pairwise_distance,
            perms,
        })
    }

    /// Full consistency check: sizes, entry validity, distinctness, and the
    /// recorded minimum pairwise distance.
    pub fn validate(&self) -> Result<()> {
        if self.perms.len() != self.k {
            return Err(Error::Config(format!(
                "bank claims K={} but holds {} permutations",
                self.k,
                self.perms.len()
            )));
        }
        for p in &self.perms {
            validate_permutation(p, self.m)?;
        }
        let mut min = usize::MAX;
        for i in 0..self.perms.len() {
            for j in (i + 1)..self.perms.len() {
                let d = hamming(&self.perms[i], &self.perms[j]);
                if d == 0 {
                    return Err(Error::Config(format!(
                        "bank contains duplicate permutation at indices {i} and {j}"
                    )));
                }
                min = min.min(d);
            }
        }
        let expect = if self.k < 2 { 0 } else { min };
        if expect != self.min_pairwise_distance {
            return Err(Error::Config(format!(
                "bank records min_pairwise_distance={} but actual is {expect}",
                self.min_pairwise_distance
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut body = serde_json::to_string(self)
            .map_err(|e| Error::format(path, format!("serialize: {e}")))?;
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: PermutationBank =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("parse: {e}")))?;
        bank.validate()?;
        Ok(bank)
    }
}
