mod common;

use std::io::Write;

use debias_core::datasets::{
    balanced_subset, generate, load_csv, split, upsample_to_max, CsvSchema, Dataset, Subgroup,
    SubgroupSpec,
};
use debias_core::Error;
use proptest::prelude::*;

/// Nearest-centroid attribute probe on the spurious block, fit on `train`
/// and scored on `test`. Independent of the training code.
fn attribute_probe(ds: &Dataset, dim_core: usize, train: &[usize], test: &[usize]) -> f64 {
    let d = ds.dim() - dim_core;
    let mut centroids = vec![vec![0.0; d]; ds.num_attributes()];
    let mut counts = vec![0usize; ds.num_attributes()];
    for &i in train {
        let a = ds.attribute(i);
        for (c, v) in centroids[a].iter_mut().zip(&ds.x(i)[dim_core..]) {
            *c += v;
        }
        counts[a] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= *n as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z = &ds.x(i)[dim_core..];
            let best = (0..centroids.len())
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(z)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(z)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == ds.attribute(i)
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn biased_counts_are_reproduced_exactly() {
    let s = common::spec(vec![vec![4843, 4890], vec![5205, 100]], 3.0, 8.0, 1.0, 0.1);
    let ds = generate(&s, 4, 4, 0).unwrap();
    assert_eq!(ds.len(), 15038);
    assert_eq!(
        ds.group_counts(&ds.all_indices()),
        vec![4843, 4890, 5205, 100]
    );
    assert_eq!(ds.dim(), 8);
}

#[test]
fn generation_is_byte_deterministic() {
    let s = common::spec(vec![vec![30, 20], vec![10, 5]], 2.0, 3.0, 0.7, 0.2);
    let a = generate(&s, 3, 2, 42).unwrap();
    let b = generate(&s, 3, 2, 42).unwrap();
    let c = generate(&s, 3, 2, 43).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn subgroup_ids_roundtrip() {
    let s = common::spec(
        vec![vec![3, 4, 5], vec![6, 7, 8], vec![1, 2, 3]],
        2.0,
        3.0,
        1.0,
        0.0,
    );
    let ds = generate(&s, 2, 2, 1).unwrap();
    for i in 0..ds.len() {
        let sg = ds.subgroup(i);
        assert_eq!(sg.id(3), ds.group(i));
        assert_eq!(Subgroup::from_id(ds.group(i), 3), sg);
        assert_eq!((sg.label, sg.attribute), (ds.label(i), ds.attribute(i)));
    }
}

#[test]
fn no_spurious_signal_means_chance_attribute_probe() {
    for seed in 0..5 {
        let s = common::spec(vec![vec![1000, 1000], vec![1000, 1000]], 3.0, 0.0, 1.0, 0.0);
        let ds = generate(&s, 2, 3, seed).unwrap();
        let sp = split(&ds, [0.5, 0.0, 0.5], seed, true).unwrap();
        let acc = attribute_probe(&ds, 2, &sp.train, &sp.test);
        assert!((acc - 0.5).abs() <= 0.05, "seed {seed}: {acc}");
    }
}

#[test]
fn strong_spurious_signal_is_linearly_separable() {
    let s = common::spec(vec![vec![50, 50], vec![50, 50]], 8.0, 8.0, 0.5, 0.0);
    let ds = generate(&s, 2, 2, 3).unwrap();
    let sp = split(&ds, [0.5, 0.0, 0.5], 3, true).unwrap();
    assert!(attribute_probe(&ds, 2, &sp.train, &sp.test) >= 0.99);
}

#[test]
fn hard_samples_lose_core_signal() {
    // class means sit at ±sep/2 on the diagonal; hard rows are centered at 0
    let s = common::spec(vec![vec![400], vec![400]], 10.0, 1.0, 0.1, 0.25);
    let ds = generate(&s, 2, 1, 5).unwrap();
    let mean_core = |rows: std::ops::Range<usize>| -> f64 {
        let n = rows.len() as f64;
        rows.map(|i| ds.x(i)[0]).sum::<f64>() / n
    };
    // per subgroup the first quarter are hard
    assert!(mean_core(0..100).abs() < 0.1);
    assert!(mean_core(100..400).abs() > 3.0);
    assert!(mean_core(400..500).abs() < 0.1);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = common::spec(vec![vec![0, 0], vec![0, 0]], 1.0, 1.0, 1.0, 0.0);
    assert!(generate(&s, 2, 2, 0).is_err());
    s.counts = vec![vec![5, 5], vec![5]];
    assert!(generate(&s, 2, 2, 0).is_err());
    let s = common::spec(vec![vec![5, 5], vec![5, 5]], 1.0, 1.0, 1.0, 1.5);
    assert!(generate(&s, 2, 2, 0).is_err());
    let s = common::spec(vec![vec![5, 5], vec![5, 5]], 1.0, 1.0, 1.0, 0.0);
    assert!(generate(&s, 0, 2, 0).is_err());
}

fn write_csv(rows: &[String], header: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "{header}").unwrap();
    for r in rows {
        writeln!(f, "{r}").unwrap();
    }
    f.flush().unwrap();
    f
}

#[test]
fn csv_three_rows() {
    let f = write_csv(
        &[
            "0.5,1.0,0,1".into(),
            "-1.0,2.0,1,0".into(),
            "3.0,0.0,1,1".into(),
        ],
        "f0,f1,label,attribute",
    );
    let ds = load_csv(f.path(), &CsvSchema::default()).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dim(), 2);
    assert_eq!(
        (0..3).map(|i| ds.group(i)).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
    assert_eq!(ds.x(1), &[-1.0, 2.0]);
}

#[test]
fn csv_missing_attribute_column_is_named() {
    let f = write_csv(&["0.5,1.0,0".into()], "f0,f1,label");
    match load_csv(f.path(), &CsvSchema::default()) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "attribute"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_bad_value_names_row() {
    let f = write_csv(&["0.5,0,0".into(), "oops,1,1".into()], "f0,label,attribute");
    let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err();
    assert!(matches!(err, Error::CsvRow { row: 2, .. }), "{err}");
}

#[test]
fn csv_histogram_matches_percentage_table() {
    // class × skin-type shares, 1000 samples per skin type
    let percent = vec![
        vec![15.07, 13.96, 14.36, 13.20, 10.37, 6.93],
        vec![15.37, 15.43, 13.78, 10.82, 9.59, 9.61],
        vec![69.56, 70.61, 71.86, 75.98, 80.04, 83.46],
    ];
    let spec = SubgroupSpec::from_percentages(&percent, 1000, 2.0, 2.0, 1.0, 0.0).unwrap();
    assert_eq!(spec.counts[0][0], 151);
    assert_eq!(spec.counts[2][5], 835);
    let mut rows = Vec::new();
    for (y, row) in spec.counts.iter().enumerate() {
        for (a, &n) in row.iter().enumerate() {
            for k in 0..n {
                rows.push(format!("{},{y},{a}", k as f64 * 0.01));
            }
        }
    }
    let f = write_csv(&rows, "f0,label,attribute");
    let schema = CsvSchema {
        num_classes: Some(3),
        num_attributes: Some(6),
        ..CsvSchema::default()
    };
    let ds = load_csv(f.path(), &schema).unwrap();
    let hist = ds.group_counts(&ds.all_indices());
    let expected: Vec<usize> = spec.counts.iter().flatten().copied().collect();
    assert_eq!(hist, expected);
}

#[test]
fn split_all_train() {
    let s = common::spec(vec![vec![7, 3], vec![2, 9]], 1.0, 1.0, 1.0, 0.0);
    let ds = generate(&s, 1, 1, 0).unwrap();
    let sp = split(&ds, [1.0, 0.0, 0.0], 0, false).unwrap();
    assert_eq!(sp.train, ds.all_indices());
    assert!(sp.val.is_empty() && sp.test.is_empty());
}

#[test]
fn stratified_half_split_of_two_groups() {
    let s = common::spec(vec![vec![10], vec![10]], 1.0, 1.0, 1.0, 0.0);
    let ds = generate(&s, 1, 1, 0).unwrap();
    let sp = split(&ds, [0.5, 0.5, 0.0], 0, true).unwrap();
    assert_eq!(ds.group_counts(&sp.train), vec![5, 5]);
    assert_eq!(ds.group_counts(&sp.val), vec![5, 5]);
}

#[test]
fn split_rejects_bad_fractions() {
    let s = common::spec(vec![vec![10], vec![10]], 1.0, 1.0, 1.0, 0.0);
    let ds = generate(&s, 1, 1, 0).unwrap();
    assert!(split(&ds, [0.5, 0.4, 0.0], 0, true).is_err());
    assert!(split(&ds, [1.2, -0.2, 0.0], 0, true).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_split_keeps_proportions(
        counts in prop::collection::vec(10usize..60, 4),
        f0 in 0.2f64..0.7,
        f1 in 0.1f64..0.25,
        seed in any::<u64>(),
    ) {
        let s = common::spec(vec![counts[..2].to_vec(), counts[2..].to_vec()], 1.0, 1.0, 1.0, 0.0);
        let ds = generate(&s, 1, 1, seed).unwrap();
        let fr = [f0, f1, 1.0 - f0 - f1];
        let sp = split(&ds, fr, seed, true).unwrap();
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, ds.all_indices());
        for (part, f) in [(&sp.train, fr[0]), (&sp.val, fr[1]), (&sp.test, fr[2])] {
            let got = ds.group_counts(part);
            for g in 0..4 {
                let want = f * counts[g] as f64;
                prop_assert!((got[g] as f64 - want).abs() <= 1.0 + 1e-9, "g{} got {} want {}", g, got[g], want);
            }
        }
    }

    #[test]
    fn balanced_subset_histogram_is_uniform(
        counts in prop::collection::vec(1usize..30, 4),
        per_group in 1usize..40,
        seed in any::<u64>(),
    ) {
        let s = common::spec(vec![counts[..2].to_vec(), counts[2..].to_vec()], 1.0, 1.0, 1.0, 0.0);
        let ds = generate(&s, 1, 1, seed).unwrap();
        let b = balanced_subset(&ds, &ds.all_indices(), per_group, seed).unwrap();
        prop_assert_eq!(ds.group_counts(&b.indices), vec![per_group; 4]);
        prop_assert_eq!(b.with_replacement, counts.iter().any(|&c| c < per_group));
        if !b.with_replacement {
            let mut uniq = b.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), b.indices.len());
        }
    }

    #[test]
    fn upsampling_equalizes_groups(counts in prop::collection::vec(1usize..80, 4), seed in any::<u64>()) {
        let s = common::spec(vec![counts[..2].to_vec(), counts[2..].to_vec()], 1.0, 1.0, 1.0, 0.0);
        let ds = generate(&s, 1, 1, seed).unwrap();
        let up = upsample_to_max(&ds, &ds.all_indices(), seed).unwrap();
        let max = *counts.iter().max().unwrap();
        prop_assert_eq!(ds.group_counts(&up), vec![max; 4]);
        // every original row survives
        for i in ds.all_indices() {
            prop_assert!(up.contains(&i));
        }
    }
}

#[test]
fn balanced_subset_requires_every_group() {
    let s = common::spec(vec![vec![5, 5], vec![5, 5]], 1.0, 1.0, 1.0, 0.0);
    let ds = generate(&s, 1, 1, 0).unwrap();
    let without_last: Vec<usize> = ds
        .all_indices()
        .into_iter()
        .filter(|&i| ds.group(i) != 3)
        .collect();
    assert!(matches!(
        balanced_subset(&ds, &without_last, 2, 0),
        Err(Error::AbsentSubgroup { group: 3 })
    ));
    assert!(balanced_subset(&ds, &ds.all_indices(), 0, 0).is_err());
}

#[test]
fn upsampling_already_balanced_is_a_permutation() {
    let s = common::spec(vec![vec![6, 6], vec![6, 6]], 1.0, 1.0, 1.0, 0.0);
    let ds = generate(&s, 1, 1, 0).unwrap();
    let mut up = upsample_to_max(&ds, &ds.all_indices(), 0).unwrap();
    up.sort_unstable();
    assert_eq!(up, ds.all_indices());
}
