use std::sync::OnceLock;

use proptest::prelude::*;
use specsep::audio::{gen_synthetic_corpus, Corpus, CorpusSpec, Fold};
use specsep::forge::{
    build_subdataset, check_record, generate_record, read_manifest, write_manifest, MixParams, Partition, StartPolicy,
    SubdatasetId,
};

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| gen_synthetic_corpus(&CorpusSpec::desk(), 11).unwrap())
}

fn params() -> MixParams {
    MixParams { mixture_seconds: 1.0, ..MixParams::default() }
}

fn subdataset() -> impl Strategy<Value = SubdatasetId> {
    (
        prop_oneof![Just(Partition::Interclass), Just(Partition::Intraclass), Just(Partition::Hybrid)],
        prop_oneof![Just(2usize), Just(3), Just(5)],
        prop_oneof![Just(Fold::Tr), Just(Fold::Vl), Just(Fold::Te)],
    )
        .prop_map(|(u, s, f)| SubdatasetId::new(u, s, f))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_are_consistent(id in subdataset(), seed in any::<u64>(), index in 0usize..1000) {
        let p = params();
        let rec = generate_record(corpus(), &id, &p, seed, index).unwrap();
        let track = 8000;
        prop_assert_eq!(rec.sources.len(), id.sources);
        prop_assert!(rec.sources.iter().all(|s| s.len() == track));

        let mut clamped = 0;
        for t in 0..track {
            let sum: f64 = rec.sources.iter().map(|s| s.samples()[t] as f64).sum();
            let want = sum.clamp(-1.0, 1.0);
            prop_assert!((rec.mixture.samples()[t] as f64 - want).abs() <= 1e-6);
            clamped += usize::from(sum.abs() > 1.0 + 1e-6);
        }
        prop_assert!(rec.clamp_count >= clamped);

        let classes: std::collections::BTreeSet<u32> = rec.placements.iter().map(|p| p.class_id).collect();
        match id.partition {
            Partition::Interclass => prop_assert_eq!(classes.len(), id.sources),
            Partition::Intraclass => prop_assert_eq!(classes.len(), 1),
            Partition::Hybrid => {}
        }
        for (pl, src) in rec.placements.iter().zip(&rec.sources) {
            prop_assert!((p.epsilon..=1.0).contains(&pl.volume));
            let clip = corpus().clip(pl.class_id, id.fold, pl.clip_index).unwrap();
            let start = pl.start_sample(8000);
            prop_assert!(start + clip.len() <= track);
            prop_assert!(src.samples()[..start].iter().all(|&v| v == 0.0));
            prop_assert!(src.samples()[start + clip.len()..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn manifests_regenerate_every_record(id in subdataset(), seed in any::<u64>()) {
        let p = params();
        let m = build_subdataset(corpus(), id, 6, seed, &p).unwrap();
        let mut text = Vec::new();
        write_manifest(&m, &mut text).unwrap();
        let back = read_manifest(&text[..]).unwrap();
        prop_assert_eq!(&back, &m);
        for (i, meta) in back.records.iter().enumerate() {
            check_record(corpus(), &back.header, meta).unwrap();
            let fresh = generate_record(corpus(), &id, &p, seed, i).unwrap();
            let rendered = back.render(corpus(), i).unwrap();
            prop_assert_eq!(&fresh.mixture, &rendered.mixture);
            prop_assert_eq!(&fresh.sources, &rendered.sources);
            prop_assert_eq!(fresh.clamp_count, meta.clamp_count);
        }
    }
}

#[test]
fn start_and_volume_marginals_are_uniform() {
    let p = MixParams { start_policy: StartPolicy::Truncate, ..params() };
    let id = SubdatasetId::new(Partition::Hybrid, 2, Fold::Tr);
    let m = build_subdataset(corpus(), id, 5000, 3, &p).unwrap();
    let draws: Vec<_> = m.records.iter().flat_map(|r| r.sources.iter()).collect();
    let n = draws.len() as f64;
    let mean_start = draws.iter().map(|d| d.start_s).sum::<f64>() / n;
    let mean_vol = draws.iter().map(|d| d.volume).sum::<f64>() / n;
    // U(0, 1) has sd 1/sqrt(12); U(ε, 1) has sd (1 − ε)/sqrt(12).
    let se = |width: f64| width / 12f64.sqrt() / n.sqrt();
    assert!((mean_start - 0.5).abs() <= 4.0 * se(1.0), "{mean_start}");
    assert!((mean_vol - (1.0 + p.epsilon) / 2.0).abs() <= 4.0 * se(1.0 - p.epsilon), "{mean_vol}");
    let corr = {
        let (a, b): (Vec<f64>, Vec<f64>) = m.records.iter().map(|r| (r.sources[0].start_s, r.sources[1].start_s)).unzip();
        let k = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / k, b.iter().sum::<f64>() / k);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / k;
        cov * 12.0
    };
    assert!(corr.abs() <= 4.0 / (m.records.len() as f64).sqrt(), "{corr}");
}
