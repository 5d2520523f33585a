//! Random survival forest: bootstrap trees split on the log-rank statistic,
//! with Nelson–Aalen cumulative hazards in the leaves.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SurvivalData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsfParams {
    pub n_trees: usize,
    /// Smallest number of samples a child node may hold.
    pub min_node_size: usize,
    /// Features tried per split; `None` means ceil(sqrt(p)).
    #[serde(default)]
    pub mtry: Option<usize>,
    pub bootstrap: bool,
}

impl Default for RsfParams {
    fn default() -> Self {
        RsfParams {
            n_trees: 100,
            min_node_size: 3,
            mtry: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Nelson–Aalen step function over the leaf's own event times.
    Leaf { times: Vec<i64>, cumhaz: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> (&[i64], &[f64]) {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { times, cumhaz } => return (times, cumhaz),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfModel {
    pub params: RsfParams,
    pub mtry: usize,
    pub seed: u64,
    /// Distinct event times of the training data.
    pub event_times: Vec<i64>,
    pub trees: Vec<Tree>,
}

fn step_at(times: &[i64], values: &[f64], t: i64) -> f64 {
    match times.partition_point(|&s| s <= t) {
        0 => 0.0,
        i => values[i - 1],
    }
}

impl RsfModel {
    /// Ensemble cumulative hazard at each of `event_times`.
    pub fn cumulative_hazard(&self, x: &[f64]) -> Vec<f64> {
        let mut total = vec![0.0; self.event_times.len()];
        for tree in &self.trees {
            let (times, cumhaz) = tree.leaf_for(x);
            for (slot, &t) in total.iter_mut().zip(&self.event_times) {
                *slot += step_at(times, cumhaz, t);
            }
        }
        let b = self.trees.len().max(1) as f64;
        total.iter_mut().for_each(|h| *h /= b);
        total
    }

    /// Ensemble cumulative hazard summed over the training event times.
    pub fn risk(&self, x: &[f64]) -> f64 {
        self.cumulative_hazard(x).iter().sum()
    }
}

/// Nelson–Aalen estimate over the given samples.
pub fn nelson_aalen(times: &[i64], events: &[bool]) -> (Vec<i64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by_key(|&i| times[i]);
    let mut at_risk = times.len();
    let mut cum = 0.0;
    let (mut ts, mut hs) = (vec![], vec![]);
    for group in order.chunk_by(|&a, &b| times[a] == times[b]) {
        let d = group.iter().filter(|&&i| events[i]).count();
        if d > 0 {
            cum += d as f64 / at_risk as f64;
            ts.push(times[group[0]]);
            hs.push(cum);
        }
        at_risk -= group.len();
    }
    (ts, hs)
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    times: &'a [i64],
    events: &'a [bool],
    min_node: usize,
    mtry: usize,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        let t: Vec<i64> = idx.iter().map(|&i| self.times[i]).collect();
        let e: Vec<bool> = idx.iter().map(|&i| self.events[i]).collect();
        let (times, cumhaz) = nelson_aalen(&t, &e);
        Node::Leaf { times, cumhaz }
    }

    /// Best split of `idx` on `feature`: (statistic, threshold).
    fn best_split(&self, idx: &[usize], feature: usize) -> Option<(f64, f64)> {
        // event-time table of the node
        let mut sorted_t: Vec<i64> = idx.iter().filter(|&&i| self.events[i]).map(|&i| self.times[i]).collect();
        sorted_t.sort_unstable();
        sorted_t.dedup();
        if sorted_t.is_empty() {
            return None;
        }
        let k = sorted_t.len();
        let mut n_at = vec![0.0; k];
        let mut d_at = vec![0.0; k];
        // per sample: number of event times <= its time, and event slot
        let pos: Vec<(usize, Option<usize>)> = idx
            .iter()
            .map(|&i| {
                let p = sorted_t.partition_point(|&s| s <= self.times[i]);
                let slot = self.events[i].then(|| p - 1);
                (p, slot)
            })
            .collect();
        for &(p, slot) in &pos {
            for n in &mut n_at[..p] {
                *n += 1.0;
            }
            if let Some(s) = slot {
                d_at[s] += 1.0;
            }
        }
        let c: Vec<f64> = (0..k)
            .map(|j| {
                let (n, d) = (n_at[j], d_at[j]);
                if n > 1.0 {
                    d * (n - d) / (n - 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let hazard: Vec<f64> = (0..k).map(|j| d_at[j] / n_at[j]).collect();

        let mut order: Vec<usize> = (0..idx.len()).collect();
        order.sort_by(|&a, &b| self.x[idx[a]][feature].total_cmp(&self.x[idx[b]][feature]));
        let mut n_left = vec![0.0; k];
        let mut num = 0.0;
        let mut best: Option<(f64, f64)> = None;
        let m = idx.len();
        for (rank, &o) in order.iter().enumerate().take(m - 1) {
            let (p, slot) = pos[o];
            for j in 0..p {
                n_left[j] += 1.0;
                num -= hazard[j];
            }
            if slot.is_some() {
                num += 1.0;
            }
            let left = rank + 1;
            if left < self.min_node || m - left < self.min_node {
                continue;
            }
            let v = self.x[idx[o]][feature];
            let next = self.x[idx[order[rank + 1]]][feature];
            if v == next {
                continue;
            }
            let var: f64 = (0..k)
                .map(|j| {
                    let share = n_left[j] / n_at[j];
                    share * (1.0 - share) * c[j]
                })
                .sum();
            if var <= 1e-12 {
                continue;
            }
            let stat = num * num / var;
            if best.is_none_or(|(s, _)| stat > s) {
                best = Some((stat, 0.5 * (v + next)));
            }
        }
        best
    }

    fn grow(&self, idx: Vec<usize>, rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf {
            times: vec![],
            cumhaz: vec![],
        });
        let p = self.x.first().map_or(0, Vec::len);
        let mut chosen = None;
        if idx.len() >= 2 * self.min_node && p > 0 {
            for feature in sample(rng, p, self.mtry.min(p)).into_iter() {
                if let Some((stat, threshold)) = self.best_split(&idx, feature) {
                    if chosen.is_none_or(|(s, _, _)| stat > s) {
                        chosen = Some((stat, feature, threshold));
                    }
                }
            }
        }
        match chosen {
            Some((_, feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
                let left = self.grow(l, rng, nodes);
                let right = self.grow(r, rng, nodes);
                nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            None => nodes[id] = self.leaf(&idx),
        }
        id
    }
}

pub fn default_mtry(p: usize) -> usize {
    ((p as f64).sqrt().ceil() as usize).max(1)
}

/// Tree `b` draws all of its randomness from `seed + b`, so trees can be
/// grown in parallel and still match a serial run.
pub fn fit_rsf(data: &SurvivalData, params: &RsfParams, seed: u64) -> RsfModel {
    let x: Vec<Vec<f64>> = data.records.iter().map(|r| r.covariates.clone()).collect();
    let times: Vec<i64> = data.records.iter().map(|r| r.duration_days).collect();
    let events: Vec<bool> = data.records.iter().map(|r| r.is_event()).collect();
    let p = data.feature_names.len();
    let mtry = params.mtry.unwrap_or_else(|| default_mtry(p)).clamp(1, p.max(1));
    let grower = Grower {
        x: &x,
        times: &times,
        events: &events,
        min_node: params.min_node_size.max(1),
        mtry,
    };
    let n = x.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(b as u64));
            let idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut nodes = Vec::new();
            grower.grow(idx, &mut rng, &mut nodes);
            Tree { nodes }
        })
        .collect();
    let mut event_times: Vec<i64> = times.iter().zip(&events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
    event_times.sort_unstable();
    event_times.dedup();
    RsfModel {
        params: *params,
        mtry,
        seed,
        event_times,
        trees,
    }
}
