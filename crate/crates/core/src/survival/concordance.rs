/// Harrell's C over `(duration, event, risk)` triples.
///
/// A pair is comparable when the shorter duration ended in an event; it is
/// concordant when that subject also has the higher risk, and counts half
/// when the risks tie. `None` when no pair is comparable.
pub fn harrell_c(durations: &[i64], events: &[bool], risks: &[f64]) -> Option<f64> {
    let n = durations.len();
    // rank risks so a Fenwick tree can count "how many later subjects have
    // lower / equal risk"
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&s| s < r);
    let mut tree = Fenwick::new(sorted.len());

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| durations[b].cmp(&durations[a]));
    let (mut concordant, mut comparable) = (0.0f64, 0.0f64);
    let mut inserted = 0u64;
    for group in order.chunk_by(|&a, &b| durations[a] == durations[b]) {
        for &i in group.iter().filter(|&&i| events[i]) {
            let r = rank(risks[i]);
            let lower = tree.prefix(r);
            let equal = tree.prefix(r + 1) - lower;
            concordant += lower as f64 + 0.5 * equal as f64;
            comparable += inserted as f64;
        }
        for &i in group {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
    }
    (comparable > 0.0).then(|| concordant / comparable)
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks below `i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}
