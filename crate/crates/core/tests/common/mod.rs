//! Brute-force reference implementations shared by test targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    // coarse grid so that ties are common
    let levels = rng.gen_range(2..12);
    let nk = rng.gen_range(1..=50);
    let nu = rng.gen_range(1..=50);
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.25 - 1.0).collect::<Vec<_>>();
    let known = draw(nk);
    (known, draw(nu))
}

pub fn brute_auroc(known: &[f64], unknown: &[f64]) -> f64 {
    let mut twice_u = 0u64;
    for k in known {
        for u in unknown {
            twice_u += match k.partial_cmp(u).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice_u as f64 / (2 * known.len() * unknown.len()) as f64
}

pub fn distinct_desc(known: &[f64], unknown: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = known.iter().chain(unknown).copied().collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

pub fn brute_dtacc(known: &[f64], unknown: &[f64]) -> f64 {
    let mut thresholds = distinct_desc(known, unknown);
    thresholds.push(f64::INFINITY);
    let mut best = f64::NEG_INFINITY;
    for t in thresholds {
        // accept when score >= t; t = +inf rejects all, the smallest t accepts all
        let tp = known.iter().filter(|&&s| s >= t).count();
        let tn = unknown.iter().filter(|&&s| s < t).count();
        let acc = 0.5 * (tp as f64 / known.len() as f64 + tn as f64 / unknown.len() as f64);
        best = best.max(acc);
    }
    best
}

pub fn brute_ap(pos: &[f64], neg: &[f64]) -> f64 {
    let mut area = 0.0;
    let mut prev = 0;
    for t in distinct_desc(pos, neg) {
        let tp = pos.iter().filter(|&&s| s >= t).count();
        let fp = neg.iter().filter(|&&s| s >= t).count();
        if tp > prev {
            area += (tp - prev) as f64 / pos.len() as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev = tp;
    }
    area
}
