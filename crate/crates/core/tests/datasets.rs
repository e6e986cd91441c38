use std::collections::HashSet;
use std::path::{Path, PathBuf};

use fairproxy_core::datasets::{
    make_synthetic, split_indices, DecodedValue, RawTable, Role, SchemaSpec, SyntheticSpec, TabularDataset,
};
use proptest::prelude::*;

const FIXTURE_SCHEMA: &str = "
columns = a,color,s,y
column.a.kind = continuous
column.a.role = x_c
column.color.kind = categorical
column.color.role = x_d
column.s.kind = categorical
column.s.role = sensitive
column.y.kind = categorical
column.y.role = label
label.positive = 1
sensitive.positive = m
";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn adult_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FAIRPROXY_ADULT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/adult"));
    dir.join("adult.data").exists().then_some(dir)
}

#[test]
fn three_row_fixture_encodes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "f.csv", "a,color,s,y\n1.0,red,m,1\n2.0,blue,f,0\n4.0,red,m,0\n");
    let schema: SchemaSpec = FIXTURE_SCHEMA.parse().unwrap();
    let ds = TabularDataset::load_csv(&[&csv], &schema).unwrap();
    // a has mean 7/3 and population std sqrt(14)/3, so x_c = (3a - 7)/sqrt(14).
    let r14 = 14f64.sqrt();
    let expected = [-4.0 / r14, -1.0 / r14, 5.0 / r14];
    for (got, want) in ds.x_c().data().iter().zip(expected) {
        assert!((got - want).abs() <= 1e-15, "{got} vs {want}");
    }
    // Levels sorted: blue, red.
    assert_eq!(ds.x_d().shape(), &[3, 2]);
    assert_eq!(ds.x_d().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    assert_eq!(ds.sensitive(), &[1, 0, 1]);
    assert_eq!(ds.y(), &[1, 0, 0]);
    assert_eq!(ds.row_ids(), &[0, 1, 2]);
}

#[test]
fn missing_rows_dropped_and_unseen_levels_zeroed() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(
        dir.path(),
        "f.csv",
        "a,color,s,y\n1,red,m,1\n,blue,f,0\n2,?,f,0\n3,blue,f,1\n4,red,m,0\n5,red,f,1\n6,green,m,0\n",
    );
    let mut schema: SchemaSpec = FIXTURE_SCHEMA.parse().unwrap();
    schema.format.missing = vec!["?".into()];
    let ds = TabularDataset::load_csv(&[&csv], &schema).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!(ds.row_ids(), &[0, 3, 4, 5, 6]);

    // Fit on rows without "green", then encode all.
    let raw = RawTable::load(&[&csv], &schema).unwrap();
    let enc = fairproxy_core::datasets::Encoder::fit(&raw, &[0, 1, 2, 3]).unwrap();
    let (_, xd) = enc.encode(&raw, &[4]).unwrap();
    assert_eq!(xd.data(), &[0.0, 0.0]);
}

#[test]
fn malformed_numbers_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "f.csv", "a,color,s,y\nabc,red,m,1\n");
    let schema: SchemaSpec = FIXTURE_SCHEMA.parse().unwrap();
    let err = TabularDataset::load_csv(&[&csv], &schema).unwrap_err();
    assert!(matches!(err, fairproxy_core::Error::Data(_)), "{err}");
}

#[test]
fn default_layout_puts_only_age_in_xc() {
    let schema = SchemaSpec::bundled("default").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    let codes: Vec<String> = (0..names.len()).map(|i| format!("X{i}")).collect();
    let mut text = format!("{}\n{}\n", codes.join(","), names.join(","));
    let ages = [24.0, 37.0, 52.0, 29.0];
    for (i, age) in ages.iter().enumerate() {
        let row: Vec<String> = names
            .iter()
            .map(|n| match *n {
                "ID" => (i + 1).to_string(),
                "AGE" => age.to_string(),
                "SEX" => ["1", "2"][i % 2].to_string(),
                "EDUCATION" | "MARRIAGE" => ["1", "2", "3"][i % 3].to_string(),
                "default payment next month" => (i % 2).to_string(),
                _ => (100 * i + 7).to_string(),
            })
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let csv = write(dir.path(), "default.csv", &text);
    let ds = TabularDataset::load_csv(&[&csv], &schema).unwrap();
    assert_eq!(ds.x_c().cols(), 1);
    let mean = ages.iter().sum::<f64>() / 4.0;
    let sd = (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    for (got, a) in ds.x_c().data().iter().zip(ages) {
        assert!((got - (a - mean) / sd).abs() <= 1e-12);
    }
    assert_eq!(ds.sensitive(), &[1, 0, 1, 0]);
}

#[test]
fn adult_loads_with_bundled_schema() {
    let Some(dir) = adult_dir() else {
        eprintln!("adult data not found; set FAIRPROXY_ADULT_DIR to run this test");
        return;
    };
    let schema = SchemaSpec::bundled("adult").unwrap();
    let (a, b) = (dir.join("adult.data"), dir.join("adult.test"));
    let ds = TabularDataset::load_csv(&[&a, &b], &schema).unwrap();
    assert!(ds.len() >= 40000, "{} rows", ds.len());
    let xc_cols: HashSet<String> = ds
        .encoder()
        .provenance()
        .into_iter()
        .filter(|(_, r)| *r == Role::Xc)
        .map(|(n, _)| n)
        .collect();
    assert_eq!(xc_cols, ["age", "race", "native-country"].iter().map(|s| s.to_string()).collect());
    // Both label spellings map to the positive class.
    let pos = ds.y().iter().filter(|&&v| v == 1).count() as f64 / ds.len() as f64;
    assert!((0.2..0.3).contains(&pos), "positive rate {pos}");
}

#[test]
fn split_sizes_and_reproducibility() {
    let (tr, te) = split_indices(10, 0.8, 3);
    assert_eq!((tr.len(), te.len()), (8, 2));
    assert_eq!(split_indices(10, 0.8, 3), (tr.clone(), te.clone()));
    let all: HashSet<usize> = tr.iter().chain(&te).copied().collect();
    assert_eq!(all.len(), 10);
    assert!(tr.iter().all(|i| !te.contains(i)));
}

#[test]
fn split_refits_standardization_on_train_only() {
    let ds = make_synthetic(1000, 5, &SyntheticSpec::default()).unwrap();
    let (train, test) = ds.split(0.8, 11).unwrap();
    assert_eq!((train.len(), test.len()), (800, 200));
    for m in [train.x_c(), train.x_d()] {
        for j in 0..m.cols() {
            let col: Vec<f64> = (0..m.rows()).map(|i| m.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(mean.abs() <= 1e-9 && (sd - 1.0).abs() <= 1e-9, "col {j}: {mean} {sd}");
        }
    }
    assert_eq!(train.encoder(), test.encoder());
    let ids: HashSet<u64> = train.row_ids().iter().chain(test.row_ids()).copied().collect();
    assert_eq!(ids.len(), 1000);
}

#[test]
fn categorical_rows_decode_to_their_levels() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(
        dir.path(),
        "f.csv",
        "a,color,s,y\n1,red,m,1\n2,blue,f,0\n3,green,f,1\n4,red,m,0\n5,blue,f,1\n",
    );
    let schema: SchemaSpec = FIXTURE_SCHEMA.parse().unwrap();
    let ds = TabularDataset::load_csv(&[&csv], &schema).unwrap();
    let colors = ["red", "blue", "green", "red", "blue"];
    for (i, color) in colors.iter().enumerate() {
        let dec = ds.encoder().decode_row(ds.x_c().row(i), ds.x_d().row(i));
        assert_eq!(dec[1], ("color".to_string(), DecodedValue::Level(Some(color.to_string()))));
        let DecodedValue::Number(a) = dec[0].1 else { panic!() };
        assert!((a - (i + 1) as f64).abs() <= 1e-12);
    }
}

#[test]
fn sensitive_column_never_reaches_features() {
    let schema = SchemaSpec::bundled("adult").unwrap();
    let sensitive = schema.sensitive_column().name.clone();
    let ds = make_synthetic(500, 1, &SyntheticSpec::default()).unwrap();
    for (name, role) in ds.encoder().provenance() {
        assert!(role.is_feature());
        assert_ne!(name, "s");
        assert_ne!(name, sensitive);
    }
    let s: Vec<f64> = ds.sensitive().iter().map(|&v| v as f64).collect();
    let view = ds.features();
    let all = view.concat().unwrap();
    assert_eq!(all.cols(), ds.encoder().provenance().len());
    for j in 0..all.cols() {
        let col: Vec<f64> = (0..all.rows()).map(|i| all.get(i, j)).collect();
        assert_ne!(col, s, "feature column {j} is a copy of s");
    }
}

#[test]
fn prepared_dataset_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_synthetic(200, 2, &SyntheticSpec::default()).unwrap();
    ds.save(dir.path(), "train").unwrap();
    let back = TabularDataset::load(dir.path(), "train").unwrap();
    assert_eq!(back.x_c(), ds.x_c());
    assert_eq!(back.x_d(), ds.x_d());
    assert_eq!(back.y(), ds.y());
    assert_eq!(back.sensitive(), ds.sensitive());
    assert_eq!(back.row_ids(), ds.row_ids());
    assert_eq!(back.encoder(), ds.encoder());
}

#[test]
fn synthetic_csv_roundtrip_through_schema_text() {
    let spec = SyntheticSpec::default();
    let dir = tempfile::tempdir().unwrap();
    let raw = fairproxy_core::datasets::synthetic_raw(150, 4, &spec).unwrap();
    let mut buf = Vec::new();
    raw.write_csv(&spec.schema(), &mut buf).unwrap();
    let csv = dir.path().join("syn.csv");
    std::fs::write(&csv, &buf).unwrap();
    let schema: SchemaSpec = spec.schema_text().parse().unwrap();
    let back = RawTable::load(&[&csv], &schema).unwrap();
    assert_eq!(back, raw);
}

#[test]
fn synthetic_rejects_tiny_n() {
    assert!(make_synthetic(99, 0, &SyntheticSpec::default()).is_err());
}

#[test]
fn synthetic_moments_agree_across_seeds() {
    let spec = SyntheticSpec::default();
    let n = 100_000;
    let a = fairproxy_core::datasets::synthetic_raw(n, 1, &spec).unwrap();
    let b = fairproxy_core::datasets::synthetic_raw(n, 2, &spec).unwrap();
    let rate = |v: &[u8]| v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    for (pa, pb) in [(rate(&a.s), rate(&b.s)), (rate(&a.y), rate(&b.y))] {
        // Difference of two independent proportions.
        let se = (2.0 * pa * (1.0 - pa) / n as f64).sqrt();
        assert!((pa - pb).abs() <= 3.0 * se, "{pa} vs {pb}");
    }
    for (ca, cb) in a.columns.iter().zip(&b.columns) {
        let (fairproxy_core::datasets::RawValues::Continuous(va), fairproxy_core::datasets::RawValues::Continuous(vb)) =
            (&ca.values, &cb.values)
        else {
            panic!()
        };
        let m = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let var = |v: &[f64]| {
            let mu = m(v);
            v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64
        };
        let se = (2.0 * var(va) / n as f64).sqrt();
        assert!((m(va) - m(vb)).abs() <= 3.0 * se, "{}: means", ca.spec.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_a_partition(n in 2usize..500, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (tr, te) = split_indices(n, frac, seed);
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn one_hot_blocks_sum_to_one(seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let levels = ["a", "b", "c", "d"];
        let mut text = String::from("a,color,s,y\n");
        for i in 0..20u64 {
            let k = ((seed.wrapping_mul(31) + i * 7) % 4) as usize;
            text.push_str(&format!("{i},{},{},{}\n", levels[k], ["m", "f"][(i % 2) as usize], i % 3 % 2));
        }
        let csv = write(dir.path(), "f.csv", &text);
        let schema: SchemaSpec = FIXTURE_SCHEMA.parse().unwrap();
        let ds = TabularDataset::load_csv(&[&csv], &schema).unwrap();
        for i in 0..ds.len() {
            prop_assert_eq!(ds.x_d().row(i).iter().sum::<f64>(), 1.0);
        }
    }
}
