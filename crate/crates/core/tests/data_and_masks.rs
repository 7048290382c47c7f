use std::io::Write;

use gapcast_core::data::{
    chronological_split, load_csv, load_mask_csv, make_windows, synthetic_ar2, Ar2Config, SplitSpec,
};
use gapcast_core::dist::LogitTransform;
use gapcast_core::missing::{gen_mask_mar, gen_mask_mcar, MarSpec, Mechanism, MissingnessConfig};
use gapcast_core::{rng, Error};
use proptest::prelude::*;

fn write_tmp(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn load_err(text: &str) -> String {
    let f = write_tmp(text);
    match load_csv(f.path()) {
        Err(Error::Data(m)) => m,
        other => panic!("expected a data error, got {other:?}"),
    }
}

const HEAD: &str = "timestamp,site_0,site_1\n";

#[test]
fn csv_with_gaps_and_mask_columns() {
    let f = write_tmp(
        "# produced by hand\n\
         timestamp,site_0,site_1,mask_1\n\
         2021-03-01T00:00:00,0.5,0.25,0\n\
         2021-03-01T01:00:00,,0.5,0\n\
         2021-03-01T02:00:00,NaN,0.75,1\n",
    );
    let t = load_csv(f.path()).unwrap();
    assert_eq!(t.names(), ["site_0", "site_1"]);
    assert_eq!(t.n_rows(), 3);
    assert_eq!(t.step().num_seconds(), 3600);
    assert!(!t.is_missing(0, 0) && t.is_missing(1, 0) && t.is_missing(2, 0));
    assert!(t.is_missing(2, 1) && !t.is_missing(1, 1));
    assert_eq!(t.column(1)[1], 0.5);
}

#[test]
fn csv_errors_name_the_problem() {
    assert!(load_err("time,site_0\n2021-01-01T00:00:00,0.5\n").contains("timestamp"));
    let dup = load_err(&format!("{HEAD}2021-01-01T00:00:00,0.1,0.2\n2021-01-01T00:00:00,0.1,0.2\n"));
    assert!(dup.contains("duplicated"), "{dup}");
    let back = load_err(&format!(
        "{HEAD}2021-01-01T02:00:00,0.1,0.2\n2021-01-01T01:00:00,0.1,0.2\n"
    ));
    assert!(back.contains("backwards"), "{back}");
    let gap = load_err(&format!(
        "{HEAD}2021-01-01T00:00:00,0.1,0.2\n2021-01-01T01:00:00,0.1,0.2\n2021-01-01T03:00:00,0.1,0.2\n"
    ));
    assert!(gap.contains("uniform grid"), "{gap}");
    let range = load_err(&format!("{HEAD}2021-01-01T00:00:00,1.2,0.2\n"));
    assert!(range.contains("outside [0, 1]") && range.contains("site_0"), "{range}");
    let word = load_err(&format!("{HEAD}2021-01-01T00:00:00,0.1,high\n"));
    assert!(word.contains("line 2") && word.contains("high"), "{word}");
    let orphan = load_err("timestamp,site_0,mask_7\n2021-01-01T00:00:00,0.1,0\n");
    assert!(orphan.contains("mask_7"), "{orphan}");
    assert!(load_err(HEAD).contains("no data rows"));
}

#[test]
fn mask_file_must_line_up() {
    let data = write_tmp(&format!("{HEAD}2021-01-01T00:00:00,0.1,0.2\n2021-01-01T01:00:00,0.3,0.4\n"));
    let t = load_csv(data.path()).unwrap();
    let good = write_tmp(&format!("{HEAD}2021-01-01T00:00:00,0,1\n2021-01-01T01:00:00,1,0\n"));
    let g = load_mask_csv(good.path(), &t).unwrap();
    assert!(g.get(0, 1) && g.get(1, 0) && !g.get(0, 0));
    let shifted = write_tmp(&format!("{HEAD}2021-01-01T01:00:00,0,1\n2021-01-01T02:00:00,1,0\n"));
    assert!(load_mask_csv(shifted.path(), &t).is_err());
    let short = write_tmp(&format!("{HEAD}2021-01-01T00:00:00,0,1\n"));
    assert!(load_mask_csv(short.path(), &t).is_err());
    let renamed = write_tmp("timestamp,a,b\n2021-01-01T00:00:00,0,1\n2021-01-01T01:00:00,1,0\n");
    assert!(load_mask_csv(renamed.path(), &t).is_err());
}

#[test]
fn table_round_trips_through_csv() {
    let t = synthetic_ar2(&Ar2Config {
        n: 50,
        aux_sites: 2,
        ..Ar2Config::default()
    })
    .unwrap();
    let mut grid = t.mask_grid();
    grid.set(3, 1, true);
    let t = t.with_mask(&grid).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    t.write_csv(&p, &["header line".into()]).unwrap();
    let back = load_csv(&p).unwrap();
    assert_eq!(back.timestamps(), t.timestamps());
    for c in 0..t.n_sites() {
        for (a, b) in back.column(c).iter().zip(t.column(c)) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }
    let mp = dir.path().join("m.csv");
    t.write_mask_csv(&mp, &[]).unwrap();
    assert_eq!(load_mask_csv(&mp, &back).unwrap(), t.mask_grid());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn windows_reproduce_the_series(n in 20usize..80, h in 1usize..6, lead in 1usize..4, sites in 1usize..3, seed in 0u64..100) {
        let t = synthetic_ar2(&Ar2Config { n, aux_sites: sites - 1, seed, ..Ar2Config::default() }).unwrap();
        let idx: Vec<usize> = (0..sites).collect();
        let ws = make_windows(&t, h, lead, &idx).unwrap();
        prop_assert_eq!(ws.len(), n - h - lead + 1);
        let tf = LogitTransform::default();
        for w in &ws {
            prop_assert_eq!(w.dim(), sites * h + 1);
            for s in 0..sites {
                for l in 0..h {
                    let row = w.origin + 1 + l - h;
                    let v = tf.inverse(w.values[s * h + l]);
                    prop_assert!((v - t.column(s)[row]).abs() < 1e-12);
                }
            }
            let y = w.target_power(&tf).unwrap();
            prop_assert!((y - t.column(0)[w.origin + lead]).abs() < 1e-12);
        }
    }

    #[test]
    fn split_never_leaks_targets_into_training(n in 30usize..120, h in 1usize..5, lead in 1usize..6, frac in 0.2f64..0.9) {
        let t = synthetic_ar2(&Ar2Config { n, ..Ar2Config::default() }).unwrap();
        let ws = make_windows(&t, h, lead, &[0]).unwrap();
        if let Ok((train, test)) = chronological_split(&ws, SplitSpec { train_fraction: frac }) {
            prop_assert_eq!(train.len() + test.len(), ws.len());
            let last_train = train.iter().map(|w| w.target_index()).max().unwrap();
            let first_test = test.iter().map(|w| w.target_index()).min().unwrap();
            prop_assert!(last_train < first_test);
        }
    }

    #[test]
    fn mcar_masks_depend_only_on_seed(rate in 0.0f64..1.0, seed in 0u64..1000) {
        let cfg = MissingnessConfig::mcar(rate, seed);
        let a = gen_mask_mcar(&cfg, 40, 3, &mut rng::stream(seed, 0)).unwrap();
        let b = gen_mask_mcar(&cfg, 40, 3, &mut rng::stream(seed, 0)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mcar_rate_is_realized(rate in 0.0f64..1.0, seed in 0u64..1000) {
        let cfg = MissingnessConfig::mcar(rate, seed);
        let n = 20_000;
        let g = gen_mask_mcar(&cfg, n, 1, &mut rng::stream(seed, 1)).unwrap();
        let sd = (rate * (1.0 - rate) / n as f64).sqrt();
        prop_assert!((g.missing_rate() - rate).abs() <= 5.0 * sd + 1e-12);
    }
}

#[test]
fn mar_masks_are_deterministic_and_hit_the_rate() {
    let n = 20_000;
    let mut r = rng::stream(4, 4);
    use rand::Rng;
    let cov: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let target: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let data = vec![target, cov.clone()];
    let cfg = MissingnessConfig {
        mechanism: Mechanism::Mar,
        rate: 0.2,
        mar: Some(MarSpec {
            targets: vec![0],
            covariates: vec![(1, 2.0)],
        }),
        seed: 9,
    };
    let a = gen_mask_mar(&cfg, &data, &mut rng::stream(9, 0)).unwrap();
    let b = gen_mask_mar(&cfg, &data, &mut rng::stream(9, 0)).unwrap();
    assert_eq!(a, b);
    assert!((a.column_missing_rate(0) - 0.2).abs() < 0.015);
    assert_eq!(a.column_missing_rate(1), 0.0);
    // positive coefficient: gaps concentrate where the covariate is high
    let hi = (0..n).filter(|&i| cov[i] > 0.5 && a.get(i, 0)).count();
    let lo = (0..n).filter(|&i| cov[i] <= 0.5 && a.get(i, 0)).count();
    assert!(hi > 2 * lo, "high {hi}, low {lo}");
}
