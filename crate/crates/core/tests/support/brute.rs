//! Brute-force ranking metrics shared by the oracle and acceptance targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use unirank::domain::EntityId;

pub struct Group {
    pub ids: Vec<EntityId>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn random_group(rng: &mut ChaCha8Rng) -> Group {
    let n = rng.random_range(2..40);
    // Coarse scores make ties common.
    let coarse = rng.random_bool(0.3);
    let mut ids: Vec<EntityId> = (0..n).map(|i| EntityId::new(format!("e{i:03}")).unwrap()).collect();
    // Shuffle ids so that position and id order disagree.
    for i in (1..n).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let scores = (0..n)
        .map(|_| if coarse { f64::from(rng.random_range(0..4u8)) / 4.0 } else { rng.random::<f64>() })
        .collect();
    let labels = (0..n).map(|_| u8::from(rng.random_bool(0.25))).collect();
    Group { ids, scores, labels }
}

/// Ranked labels by explicit comparison sort: score descending, id ascending.
pub fn brute_ranked(g: &Group) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..g.ids.len()).collect();
    for i in 0..idx.len() {
        for j in 0..idx.len() - 1 - i {
            let (a, b) = (idx[j], idx[j + 1]);
            let after = g.scores[a] < g.scores[b] || (g.scores[a] == g.scores[b] && g.ids[a] > g.ids[b]);
            if after {
                idx.swap(j, j + 1);
            }
        }
    }
    idx.into_iter().map(|i| g.labels[i]).collect()
}

pub fn brute_ndcg(ranked: &[u8], k: usize) -> f64 {
    let gain = |labels: &[u8]| -> f64 {
        let mut s = 0.0;
        for (pos, &l) in labels.iter().enumerate().take(k) {
            s += (2f64.powi(i32::from(l)) - 1.0) / (pos as f64 + 2.0).ln() * 2f64.ln();
        }
        s
    };
    let mut ideal = ranked.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    let best = gain(&ideal);
    if best == 0.0 {
        0.0
    } else {
        gain(ranked) / best
    }
}

pub fn brute_mrr(ranked: &[u8]) -> f64 {
    for (i, &l) in ranked.iter().enumerate() {
        if l == 1 {
            return 1.0 / (i as f64 + 1.0);
        }
    }
    0.0
}

pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    if den == 0.0 {
        0.5
    } else {
        num / den
    }
}

/// Largest disagreement between the library and the brute-force metrics, plus
/// the number of groups whose ranking order differed.
pub fn worst_metric_error(n_groups: usize, seed: u64) -> (f64, usize) {
    use rand::SeedableRng;
    use unirank::evaluation::{auc, mrr, ndcg_at_k, rank_order};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut misordered = 0;
    for _ in 0..n_groups {
        let g = random_group(&mut rng);
        let ranked: Vec<u8> = rank_order(&g.ids, &g.scores).into_iter().map(|i| g.labels[i]).collect();
        if ranked != brute_ranked(&g) {
            misordered += 1;
        }
        worst = worst
            .max((ndcg_at_k(&ranked, 10) - brute_ndcg(&ranked, 10)).abs())
            .max((mrr(&ranked) - brute_mrr(&ranked)).abs())
            .max((auc(&g.scores, &g.labels) - brute_auc(&g.scores, &g.labels)).abs());
    }
    (worst, misordered)
}
