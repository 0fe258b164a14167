use std::path::Path;

use gearfault::dataset::{load_csv, make_split_plan, save_csv, Dataset, Sample};
use gearfault::eda::{channel_stats, class_stats, export_stats, read_stats};
use gearfault::synthgen::{generate, GenConfig};
use gearfault::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn header(l: usize) -> String {
    let mut h = String::from("label");
    for ch in ["x", "y", "z"] {
        for t in 0..l {
            h.push_str(&format!(",{ch}_{t}"));
        }
    }
    h
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn zero_row_loads_as_one_zero_sample() {
    let dir = tempfile::tempdir().unwrap();
    let row = format!("0{}", ",0.0".repeat(600));
    let p = write(dir.path(), "z.csv", &format!("{}\n{row}\n", header(200)));
    let ds = load_csv(&p, 200, 3).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.sample(0).label, 0);
    assert!(ds.sample(0).values.iter().all(|&v| v == 0.0));
    assert_eq!(ds.channel_names(), ["x", "y", "z"]);

    let out = dir.path().join("out.csv");
    save_csv(&ds, &out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split(',').count(), 601);
}

#[test]
fn five_labels_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = header(2) + "\n";
    for label in 0..5 {
        text.push_str(&format!("{label}{}\n", ",1.5".repeat(6)));
    }
    let ds = load_csv(&write(dir.path(), "h.csv", &text), 2, 3).unwrap();
    assert!(ds.class_histogram().iter().all(|(k, &v)| *k < 5 && v == 1));
    assert_eq!(ds.class_histogram().len(), 5);
}

#[test]
fn malformed_inputs_report_their_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad_header = header(2).replace("y_1", "q_1");
    let err = load_csv(&write(dir.path(), "a.csv", &format!("{bad_header}\n")), 2, 3).unwrap_err();
    assert!(matches!(&err, Error::Format(m) if m.contains("column 5")), "{err}");

    let text = format!("{}\n0,1,2,3,abc,5,6\n", header(2));
    match load_csv(&write(dir.path(), "b.csv", &text), 2, 3).unwrap_err() {
        Error::Parse { row, column, .. } => assert_eq!((row, column), (2, 5)),
        other => panic!("{other}"),
    }

    let text = format!("{}\n0,1,2,3\n", header(2));
    assert!(matches!(load_csv(&write(dir.path(), "c.csv", &text), 2, 3), Err(Error::Dimension(_))));

    let text = format!("{}\n0,1,2,3,NaN,5,6\n", header(2));
    assert!(matches!(load_csv(&write(dir.path(), "d.csv", &text), 2, 3), Err(Error::Parse { .. })));
    assert!(matches!(load_csv(&dir.path().join("missing.csv"), 2, 3), Err(Error::Io { .. })));
}

#[test]
fn random_file_round_trips_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut text = header(200) + "\n";
    for _ in 0..100 {
        text.push_str(&rng.random_range(0..5usize).to_string());
        for _ in 0..600 {
            text.push_str(&format!(",{:.16e}", rng.random_range(-1e3..1e3f64)));
        }
        text.push('\n');
    }
    let src = write(dir.path(), "r.csv", &text);
    let ds = load_csv(&src, 200, 3).unwrap();
    let a = dir.path().join("a.csv");
    save_csv(&ds, &a).unwrap();
    assert_eq!(std::fs::read_to_string(&a).unwrap(), text);
    let back = load_csv(&a, 200, 3).unwrap();
    assert_eq!(back, ds);
    let b = dir.path().join("b.csv");
    save_csv(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn ten_samples_give_eleven_lines() {
    let ds = generate(&GenConfig::with_shape(5, 2, 3, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ten.csv");
    save_csv(&ds, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 11);
}

#[test]
fn stratified_folds_hold_four_per_class() {
    let ds = generate(&GenConfig::with_shape(5, 20, 1, 0)).unwrap();
    let plan = make_split_plan(&ds, 5, (0.7, 0.1, 0.2), 9, true).unwrap();
    for fold in &plan.folds {
        let test = ds.subset(&fold.test);
        assert!(test.class_histogram().values().all(|&c| c == 4));
        assert_eq!((fold.train.len(), fold.val.len(), fold.test.len()), (70, 10, 20));
    }
    assert_eq!(plan, make_split_plan(&ds, 5, (0.7, 0.1, 0.2), 9, true).unwrap());
}

#[test]
fn split_plan_rejects_bad_fractions() {
    let ds = generate(&GenConfig::with_shape(2, 5, 1, 0)).unwrap();
    assert!(matches!(make_split_plan(&ds, 5, (0.7, 0.1, 0.1), 0, true), Err(Error::Argument(_))));
    assert!(matches!(make_split_plan(&ds, 5, (0.5, 0.2, 0.3), 0, true), Err(Error::Argument(_))));
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

#[test]
fn generated_variance_follows_configured_order() {
    let mut cfg = GenConfig::with_shape(5, 500, 3, 2);
    cfg.series_length = 40;
    let ds = generate(&cfg).unwrap();
    for ch in 0..3 {
        let empirical: Vec<f64> = (0..5)
            .map(|c| {
                let vals: Vec<f64> = ds.samples().iter().filter(|s| s.label == c).flat_map(|s| s.values.row(ch).to_vec()).collect();
                variance(&vals)
            })
            .collect();
        let mut by_config: Vec<usize> = (0..5).collect();
        by_config.sort_by(|&a, &b| cfg.class_channel_stddev[a][ch].total_cmp(&cfg.class_channel_stddev[b][ch]));
        let mut by_data: Vec<usize> = (0..5).collect();
        by_data.sort_by(|&a, &b| empirical[a].total_cmp(&empirical[b]));
        assert_eq!(by_config, by_data, "channel {ch}");
    }
    // class means hover around zero
    let stats = class_stats(&ds).unwrap();
    for c in 0..5 {
        for ch in 0..3 {
            let bound = 5.0 * (cfg.class_channel_stddev[c][ch] + 1.75) / (500f64).sqrt();
            assert!(stats.class_mean_curves.slice(ndarray::s![c, ch, ..]).iter().all(|m| m.abs() <= bound));
        }
    }
}

#[test]
fn eda_variance_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<Sample> =
        (0..12).map(|i| Sample::new(Array2::from_shape_fn((3, 30), |_| rng.random_range(-5.0..5.0)), i % 3)).collect();
    let ds = Dataset::new(samples, vec!["a".into(), "b".into(), "c".into()], vec!["x".into(), "y".into(), "z".into()], 1.0).unwrap();
    let st = channel_stats(&ds).unwrap();
    for (i, s) in ds.samples().iter().enumerate() {
        for ch in 0..3 {
            let row = s.values.row(ch).to_vec();
            assert!((st.per_sample_variance[[i, ch]] - variance(&row)).abs() < 1e-12);
            let range = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
            assert_eq!(st.per_sample_range[[i, ch]], range);
        }
    }
}

#[test]
fn eda_class_order_tracks_generator_on_first_channel() {
    let ds = generate(&GenConfig::with_shape(5, 200, 3, 5)).unwrap();
    let st = class_stats(&ds).unwrap();
    let avg: Vec<f64> = (0..5).map(|c| st.class_var_curves.slice(ndarray::s![c, 0, ..]).mean().unwrap()).collect();
    assert!(avg.windows(2).all(|w| w[0] > w[1]), "{avg:?}");
}

#[test]
fn exported_stats_parse_back_exactly() {
    let ds = generate(&GenConfig::with_shape(3, 3, 3, 6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cs = channel_stats(&ds).unwrap();
    let p = dir.path().join("s.csv");
    export_stats(&cs, &p).unwrap();
    let rows = read_stats(&p).unwrap();
    assert_eq!(rows.len(), 9 * 3 * 3);
    for r in &rows {
        let ch = ds.channel_names().iter().position(|c| *c == r.channel).unwrap();
        let m = match r.statistic.as_str() {
            "mean" => &cs.per_sample_mean,
            "variance" => &cs.per_sample_variance,
            _ => &cs.per_sample_range,
        };
        assert_eq!(m[[r.index, ch]], r.value);
    }
    let ks = class_stats(&ds).unwrap();
    let p = dir.path().join("k.csv");
    export_stats(&ks, &p).unwrap();
    assert_eq!(read_stats(&p).unwrap().len(), 3 * 3 * 200 * 2);
    assert!(matches!(export_stats(&ks, Path::new("")), Err(Error::Io { .. })));
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (2usize..12, 1usize..4, 2usize..10, any::<u64>()).prop_map(|(n, c, l, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|i| Sample::new(Array2::from_shape_fn((c, l), |_| rng.random_range(-10.0..10.0)), i % 2)).collect();
        Dataset::new(samples, vec!["a".into(), "b".into()], (0..c).map(|i| format!("c{i}")).collect(), 1.0).unwrap()
    })
}

proptest! {
    #[test]
    fn single_class_curves_are_global_means(ds in arb_dataset()) {
        let merged: Vec<Sample> = ds.samples().iter().map(|s| Sample::new(s.values.clone(), 0)).collect();
        let merged = Dataset::new(merged, vec!["all".into()], ds.channel_names().to_vec(), 1.0).unwrap();
        let st = class_stats(&merged).unwrap();
        let n = ds.len() as f64;
        for ch in 0..ds.num_channels() {
            for t in 0..ds.series_length() {
                let m = ds.samples().iter().map(|s| s.values[[ch, t]]).sum::<f64>() / n;
                prop_assert!((st.class_mean_curves[[0, ch, t]] - m).abs() < 1e-12);
            }
        }
        prop_assert!(st.class_var_curves.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn channel_stats_are_permutation_equivariant(ds in arb_dataset(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = channel_stats(&ds).unwrap();
        let b = channel_stats(&ds.subset(&order)).unwrap();
        for (new, &old) in order.iter().enumerate() {
            prop_assert_eq!(a.per_sample_mean.row(old), b.per_sample_mean.row(new));
            prop_assert_eq!(a.per_sample_variance.row(old), b.per_sample_variance.row(new));
            prop_assert_eq!(a.per_sample_range.row(old), b.per_sample_range.row(new));
        }
        prop_assert!(a.per_sample_variance.iter().all(|&v| v >= 0.0));
        prop_assert!(a.per_sample_range.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn generation_is_deterministic(seed in 0u64..50) {
        let cfg = GenConfig { series_length: 16, ..GenConfig::with_shape(3, 2, 2, seed) };
        prop_assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
