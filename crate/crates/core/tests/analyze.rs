use cmta::analyze::{
    aggregate, classify_corpus, language_class_marginals, AggregationCell, Aggregator, ClassifyEntry, CorpusManifest,
    Dims, LabeledRecord, Report,
};
use cmta::corpus::MisinfoClass;
use cmta::fixtures::{gen_synthetic, corpus_manifest, SyntheticSpec, CORPUS_TOTAL};
use cmta::model::{Model, ModelConfig};
use cmta::preprocess::Preprocessor;
use cmta::tokenizer::build_vocab;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = LabeledRecord> {
    (
        prop::sample::select(vec!["en", "es", "fr", "hi"]),
        prop::option::of(prop::sample::select(vec!["2020-02", "2020-03", "2020-04"])),
        0usize..3,
    )
        .prop_map(|(l, m, c)| LabeledRecord {
            id: String::new(),
            language: l.to_string(),
            month: m.map(str::to_string),
            pred: MisinfoClass::from_index(c).unwrap(),
            probs: [0.0; 3],
        })
}

fn sum(cells: &[AggregationCell]) -> u64 {
    cells.iter().map(|c| c.count).sum()
}

proptest! {
    #[test]
    fn counts_are_conserved(recs in prop::collection::vec(record(), 0..200)) {
        for dims in ["", "language", "month", "language,month"] {
            let cells = aggregate(&recs, dims.parse().unwrap());
            prop_assert_eq!(sum(&cells), recs.len() as u64);
        }
    }

    #[test]
    fn permutation_invariant(recs in prop::collection::vec(record(), 0..120), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut cmta::nn::rng(seed));
        prop_assert_eq!(aggregate(&recs, Dims::ALL), aggregate(&shuffled, Dims::ALL));
    }

    #[test]
    fn chunked_merge_equals_whole(
        recs in prop::collection::vec(record(), 0..200),
        cuts in prop::collection::vec(0usize..200, 0..6),
    ) {
        let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c.min(recs.len())).collect();
        cuts.push(0);
        cuts.push(recs.len());
        cuts.sort();
        let mut merged = Aggregator::new(Dims::ALL);
        for w in cuts.windows(2) {
            let mut part = Aggregator::new(Dims::ALL);
            recs[w[0]..w[1]].iter().for_each(|r| part.add(r));
            merged.merge(part);
        }
        prop_assert_eq!(merged.report().cells, aggregate(&recs, Dims::ALL));
        prop_assert_eq!(merged.total(), recs.len() as u64);
    }

    #[test]
    fn month_marginals_match_language_table(recs in prop::collection::vec(record(), 0..150)) {
        let full = language_class_marginals(&aggregate(&recs, Dims::ALL));
        let by_lang = language_class_marginals(&aggregate(&recs, Dims::LANGUAGE));
        prop_assert_eq!(full, by_lang);
    }

    #[test]
    fn csv_round_trip(recs in prop::collection::vec(record(), 0..150), skipped in 0u64..5) {
        let report = Report { cells: aggregate(&recs, Dims::ALL), skipped };
        let back = Report::parse_csv(&report.to_csv()).unwrap();
        prop_assert_eq!(back, report);
    }
}

#[test]
fn trivial_example_gives_two_sorted_rows() {
    let r = |l: &str, m: &str, c| LabeledRecord {
        id: String::new(),
        language: l.into(),
        month: Some(m.into()),
        pred: c,
        probs: [0.0; 3],
    };
    let recs = [
        r("es", "2020-02", MisinfoClass::False_),
        r("es", "2020-02", MisinfoClass::False_),
        r("en", "2020-03", MisinfoClass::Misleading),
    ];
    let report = Report { cells: aggregate(&recs, Dims::ALL), skipped: 0 };
    assert_eq!(report.to_csv(), "language,month,class,count\nen,2020-03,Misleading,1\nes,2020-02,False,2\n");
}

#[test]
fn classify_is_ordered_and_worker_independent() {
    let recs = gen_synthetic(&SyntheticSpec { noise: true, ..SyntheticSpec::new(&["en", "ja", "th"], 20, 4) });
    let texts: Vec<&str> = recs.iter().map(|r| r.raw_text.as_str()).collect();
    let vocab = build_vocab(&texts, 200).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        max_len: 16,
        hidden: 16,
        layers: 1,
        ff_dim: 32,
        avg_pool: 4,
        max_pool: 4,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(cfg, 1).unwrap();
    let pre = Preprocessor::default();
    let one = classify_corpus(&model, &vocab, &pre, &recs, 1).unwrap();
    let four = classify_corpus(&model, &vocab, &pre, &recs, 4).unwrap();
    assert_eq!(one.entries, four.entries);
    assert_eq!(one.entries.len(), recs.len());
    for (e, r) in one.entries.iter().zip(&recs) {
        let ClassifyEntry::Labeled(l) = e else { panic!("skipped {e:?}") };
        assert_eq!(l.id, r.id);
    }
    let empty = classify_corpus(&model, &vocab, &pre, &[], 2).unwrap();
    assert!(empty.entries.is_empty());
    assert_eq!(aggregate(&[], Dims::ALL), vec![]);
}

#[test]
fn inference_corpus_manifest() {
    let m = corpus_manifest();
    assert_eq!(m.total(), CORPUS_TOTAL);
    assert_eq!(m.counts["en"], 1_472_448);
    assert_eq!(m.counts["de"], 23_316);
    let mut found: CorpusManifest = m.clone();
    found.counts.insert("de".into(), 23_000);
    assert_eq!(m.diff(&found), vec![("de".to_string(), 23_316, 23_000)]);
}
