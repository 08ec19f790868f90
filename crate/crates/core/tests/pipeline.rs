mod common;

use std::collections::HashMap;

use common::*;
use proptest::prelude::*;
use tsicf::contextgen::{
    enumerate_windows, load_registry, load_series, sample_contexts, series_to_jsonl, Dataset,
    DatasetRegistry, Granularity, Grouping, MixtureSampler, MixtureWeights, SeriesFormat,
    TimeSeries, POOL_FACTOR,
};
use tsicf::model::{ModelConfig, TokenizedContext};
use tsicf::tokenize::LayoutMode;

fn no_persistence(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(no_persistence(500))]

    #[test]
    fn window_count(m in 1usize..2000, t in 1usize..400) {
        let count = enumerate_windows(m, t).unwrap().len();
        prop_assert_eq!(count, if m >= t { m - t + 1 } else { 1 });
    }
}

proptest! {
    #![proptest_config(no_persistence(40))]

    #[test]
    fn mixture_contexts_resolve_and_tokenize(seed in any::<u64>(), n in 1usize..5) {
        let cfg = ModelConfig { max_examples: 4, ..common::toy_config() };
        let registry = mixed_registry(cfg.max_len, seed);
        let sampler = MixtureSampler::new(&registry, MixtureWeights::default(), n, cfg.max_len, seed).unwrap();
        for spec in sampler.iter().take(50) {
            let ctx = spec.resolve(&registry, cfg.max_len, cfg.patch_len).unwrap();
            prop_assert_eq!(ctx.len(), n);
            prop_assert!(ctx.windows().iter().all(|w| w.len() == cfg.max_len));
            TokenizedContext::new(ctx.windows(), &cfg, LayoutMode::Train).unwrap();
            if spec.kind == Grouping::Series {
                prop_assert!(spec.windows.iter().all(|w| w.series == spec.windows[0].series));
            }
        }
    }
}

#[test]
fn default_pool_size_is_twenty_times_window_count() {
    let registry = mixed_registry(16, 3);
    for ds in registry.datasets() {
        let windows: usize = ds
            .series
            .iter()
            .map(|s| enumerate_windows(s.values.len(), 16).unwrap().len())
            .sum();
        for kind in [Grouping::Series, Grouping::Dataset] {
            let pool = sample_contexts(&registry, &ds.name, 3, 16, None, kind, 1).unwrap();
            assert_eq!(pool.len(), POOL_FACTOR * windows);
        }
    }
}

#[test]
fn mixture_frequencies_match_weights() {
    let registry = mixed_registry(16, 5);
    let sampler = MixtureSampler::new(&registry, MixtureWeights::default(), 2, 16, 11).unwrap();
    let draws = 100_000;
    let mut groups: HashMap<Granularity, usize> = HashMap::new();
    let mut series_level = 0;
    for spec in sampler.iter().take(draws) {
        *groups
            .entry(registry.get(&spec.dataset).unwrap().group)
            .or_default() += 1;
        series_level += usize::from(spec.kind == Grouping::Series);
    }
    let freq = |c: usize| c as f64 / draws as f64;
    assert!((freq(groups[&Granularity::Synthetic]) - 0.1).abs() < 0.01);
    for g in Granularity::REAL {
        assert!(
            (freq(groups[&g]) - 0.225).abs() < 0.01,
            "{g}: {}",
            freq(groups[&g])
        );
    }
    assert!((freq(series_level) - 0.5).abs() < 0.01);
}

#[test]
fn draws_do_not_depend_on_order() {
    let registry = mixed_registry(16, 6);
    let a = MixtureSampler::new(&registry, MixtureWeights::default(), 3, 16, 2).unwrap();
    let b = MixtureSampler::new(&registry, MixtureWeights::default(), 3, 16, 2).unwrap();
    let forward: Vec<_> = a.iter().take(100).collect();
    for i in (0..100).rev() {
        assert_eq!(b.draw(i), forward[i as usize]);
    }
}

#[test]
fn single_sided_registry_takes_all_weight() {
    let mut registry = DatasetRegistry::new();
    registry
        .add(Dataset::new(
            "only",
            Granularity::Daily,
            vec![TimeSeries::new("s", vec![1.0; 40])],
        ))
        .unwrap();
    let sampler = MixtureSampler::new(&registry, MixtureWeights::default(), 2, 16, 0).unwrap();
    assert_eq!(
        sampler.group_probabilities(),
        vec![(Granularity::Daily, 1.0)]
    );
}

#[test]
fn csv_and_jsonl_round_trip_through_registry() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "x,y\n1,4\n2,5\n3,\n").unwrap();
    let series = vec![
        TimeSeries::new("p", vec![0.5, -1.25, 1e-3]),
        TimeSeries {
            granularity: Some(Granularity::Weekly),
            ..TimeSeries::new("q", vec![7.0])
        },
    ];
    std::fs::write(dir.path().join("b.jsonl"), series_to_jsonl(&series)).unwrap();
    std::fs::write(
        dir.path().join("registry.toml"),
        "[[dataset]]\nname = \"a\"\npath = \"a.csv\"\ngroup = \"hourly\"\n\n\
         [[dataset]]\nname = \"b\"\npath = \"b.jsonl\"\ngroup = \"weekly\"\neligible = false\n",
    )
    .unwrap();

    let csv = load_series(&dir.path().join("a.csv"), SeriesFormat::Csv).unwrap();
    assert_eq!(csv[0].values, vec![1.0, 2.0, 3.0]);
    assert_eq!(csv[1].values, vec![4.0, 5.0]);
    assert_eq!(
        load_series(&dir.path().join("b.jsonl"), SeriesFormat::Jsonl).unwrap(),
        series
    );

    let registry = load_registry(&dir.path().join("registry.toml")).unwrap();
    assert_eq!(registry.datasets().len(), 2);
    assert_eq!(registry.get("a").unwrap().group, Granularity::Hourly);
    assert!(!registry.get("b").unwrap().eligible);
    let sampler = MixtureSampler::new(&registry, MixtureWeights::default(), 2, 2, 0).unwrap();
    assert!(sampler.iter().take(50).all(|s| s.dataset == "a"));
}

#[test]
fn loader_errors_name_their_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"id\":\"a\",\"values\":[1]}\n{\"id\":\"b\",\"values\":[\"x\"]}\n",
    )
    .unwrap();
    let msg = load_series(&path, SeriesFormat::Jsonl)
        .unwrap_err()
        .to_string();
    assert!(msg.contains("line 2"), "{msg}");
    let missing = load_series(&dir.path().join("nope.csv"), SeriesFormat::Csv).unwrap_err();
    assert!(missing.to_string().contains("nope.csv"));
}
