#![allow(dead_code)]

use std::collections::BTreeMap;

use idemlock::verify::linearize::{Event, SetOp, SetRet};

/// Brute-force linearizability: tries every ordering of the events that respects real
/// time and replays it against a plain map.
pub fn permutation_oracle(history: &[Event], initial: &BTreeMap<u64, u64>) -> bool {
    fn replay(order: &[usize], history: &[Event], initial: &BTreeMap<u64, u64>) -> bool {
        let mut m = initial.clone();
        order.iter().all(|&i| {
            let e = &history[i];
            let got = match e.op {
                SetOp::Find(k) => SetRet::Found(m.get(&k).copied()),
                SetOp::Insert(k, v) => SetRet::Done(match m.entry(k) {
                    std::collections::btree_map::Entry::Vacant(slot) => {
                        slot.insert(v);
                        true
                    }
                    std::collections::btree_map::Entry::Occupied(_) => false,
                }),
                SetOp::Remove(k) => SetRet::Done(m.remove(&k).is_some()),
            };
            got == e.ret
        })
    }

    fn go(order: &mut Vec<usize>, used: &mut Vec<bool>, history: &[Event], initial: &BTreeMap<u64, u64>) -> bool {
        if order.len() == history.len() {
            return replay(order, history, initial);
        }
        for i in 0..history.len() {
            if used[i] {
                continue;
            }
            // i may go next only if no unplaced event finished before i started.
            let blocked = (0..history.len()).any(|j| !used[j] && j != i && history[j].respond < history[i].invoke);
            if blocked {
                continue;
            }
            used[i] = true;
            order.push(i);
            if go(order, used, history, initial) {
                return true;
            }
            order.pop();
            used[i] = false;
        }
        false
    }

    go(&mut Vec::new(), &mut vec![false; history.len()], history, initial)
}

/// Chi-squared goodness of fit of `n` sampler draws against weights `1/i^alpha` on
/// `1..=r`. Ranges too large to tabulate are binned as the first `bins - 1` keys plus the
/// rest. Returns (statistic, degrees of freedom, p-value).
pub fn zipf_fit(r: u64, alpha: f64, n: usize, seed: u64, bins: usize) -> (f64, f64, f64) {
    use idemlock::harness::ZipfSampler;
    use rand::SeedableRng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    let head = (bins as u64).min(r);
    let tail = r > head;
    let weight = |i: u64| (i as f64).powf(-alpha);
    let total: f64 = (1..=r).map(weight).sum();
    let mut expected: Vec<f64> = (1..=head - tail as u64).map(|i| weight(i) / total * n as f64).collect();
    if tail {
        let head_mass: f64 = expected.iter().sum();
        expected.push(n as f64 - head_mass);
    }
    let z = ZipfSampler::new(r, alpha).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut seen = vec![0u64; expected.len()];
    for _ in 0..n {
        let k = z.sample(&mut rng);
        assert!((1..=r).contains(&k), "sample {k} outside 1..={r}");
        seen[((k - 1) as usize).min(expected.len() - 1)] += 1;
    }
    let stat: f64 = seen.iter().zip(&expected).map(|(&o, &e)| (o as f64 - e).powi(2) / e).sum();
    let df = (expected.len() - 1) as f64;
    let p = if df == 0.0 { 1.0 } else { ChiSquared::new(df).unwrap().sf(stat) };
    (stat, df, p)
}
