mod common;

use common::zipf_fit;
use idemlock::harness::{parse_config, prefill_keys, run_sweep, run_workload, write_csv, WorkloadSpec, CSV_HEADER};
use idemlock::structures::{LockKind, StructureKind};
use idemlock::LockMode;

#[test]
fn zipf_fits_analytic_weights() {
    for (r, alpha) in [(4, 0.0), (3, 1.0), (1000, 0.75), (50, 1.5)] {
        let (stat, df, p) = zipf_fit(r, alpha, 200_000, 17, 10_000);
        assert!(p > 0.001, "r={r} alpha={alpha}: chi2={stat:.1} df={df} p={p}");
    }
}

#[test]
fn zipf_above_the_table_limit_fits_its_head() {
    let (stat, df, p) = zipf_fit(1 << 25, 0.99, 200_000, 3, 40);
    assert!(p > 0.001, "chi2={stat:.1} df={df} p={p}");
}

#[test]
fn a_skewed_sampler_is_rejected_by_the_fit() {
    // The fit has power: alpha 0.9 draws do not pass as alpha 0.75.
    use idemlock::harness::ZipfSampler;
    use rand::SeedableRng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let z = ZipfSampler::new(1000, 0.9).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut seen = vec![0u64; 1000];
    for _ in 0..200_000 {
        seen[z.sample(&mut rng) as usize - 1] += 1;
    }
    let total: f64 = (1..=1000).map(|i| (i as f64).powf(-0.75)).sum();
    let stat: f64 = seen
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let e = ((i + 1) as f64).powf(-0.75) / total * 200_000.0;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    assert!(ChiSquared::new(999.0).unwrap().sf(stat) < 1e-6);
}

#[test]
fn prefill_is_half_the_range() {
    for r in [1, 2, 3, 10, 1001] {
        let k = prefill_keys(r, 5);
        assert_eq!(k.len() as u64, r / 2);
        let distinct: std::collections::HashSet<_> = k.iter().copied().collect();
        assert_eq!(distinct.len(), k.len());
        assert!(k.iter().all(|&x| x != 0 && x != u64::MAX));
    }
}

#[test]
fn uniform_finds_hit_about_half_and_updates_split_evenly() {
    for structure in [StructureKind::LeafTree, StructureKind::HashTable] {
        let r = run_workload(&WorkloadSpec {
            structure,
            range: 2000,
            update_percent: 50,
            alpha: 0.0,
            threads: 2,
            seconds: 0.3,
            mode: LockMode::LockFree,
            lock: LockKind::Try,
            seed: 8,
            buckets: None,
        })
        .unwrap();
        assert_eq!(r.size_before, 1000);
        let hit = r.found as f64 / r.finds as f64;
        assert!((hit - 0.5).abs() < 0.05, "{structure}: hit rate {hit}");
        let upd = (r.inserts + r.removes) as f64 / r.ops as f64;
        assert!((upd - 0.5).abs() < 0.02, "{structure}: update share {upd}");
        let ins = r.inserts as f64 / (r.inserts + r.removes) as f64;
        assert!((ins - 0.5).abs() < 0.02, "{structure}: insert share {ins}");
        assert_eq!(r.size_after as i64 - r.size_before as i64, r.inserted as i64 - r.removed as i64);
    }
}

#[test]
fn sweep_rows_and_csv() {
    let cfg = parse_config(
        "# smoke sweep\nstructure = dlist, hashtable\nrange = 200\nalpha = 0, 0.99\nthreads = 2\nseconds = 0.02\nreps = 4\nwarmup = 1\n",
    )
    .unwrap();
    let mut seen = 0;
    let rows = run_sweep(&cfg, |_| seen += 1).unwrap();
    assert_eq!(rows.len(), 16);
    assert_eq!(seen, 16);
    assert_eq!(rows.iter().filter(|r| r.warmup).count(), 4);

    let mut out = Vec::new();
    write_csv(&rows, &mut out).unwrap();
    let mut rd = csv::Reader::from_reader(out.as_slice());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    let recs: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 16);
    assert_eq!(&recs[0][0], "dlist");
    assert_eq!(&recs[15][0], "hashtable");
    assert_eq!(&recs[0][8], "true");
    assert_eq!(&recs[1][8], "false");
    for r in &recs {
        let ops: f64 = r[9].parse().unwrap();
        let secs: f64 = r[10].parse().unwrap();
        let tput: f64 = r[11].parse().unwrap();
        assert!(ops > 0.0 && (tput - ops / secs).abs() <= 1e-3 * tput);
    }
}
