//! Acceptance suite: one PASS/FAIL line per criterion, run in order so
//! runtimes are measured without competing test threads.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use specsep::audio::{gen_synthetic_corpus, Corpus, CorpusSpec, Fold};
use specsep::autodiff::{Tape, Tensor};
use specsep::bijection::{greedy_assign, greedy_bijection_loss, hungarian_loss, SimMatrix};
use specsep::dsp::{istft_samples, stft_samples, Spectrogram, SpectrogramMeta, StftParams};
use specsep::forge::{
    build_subdataset, check_record, read_manifest, write_manifest, DatasetManifest, MixParams, Partition,
    SubdatasetId, SOURCE_COUNTS,
};
use specsep::gradsuite::{model_check, op_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use specsep::seed;
use specsep::stt::{Ablation, ParamCensus, SttConfig, SttModel};
use specsep::train::{evaluate, train, DataSource, Profile, TrainConfig, TrainSinks};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

type Criterion = fn() -> Result<Outcome, Box<dyn std::error::Error>>;

fn desk_corpus() -> Corpus {
    gen_synthetic_corpus(&CorpusSpec::desk(), 0).expect("desk corpus")
}

fn desk_set(corpus: &Corpus, partition: Partition, s: usize, fold: Fold, count: usize, seed: u64) -> DatasetManifest {
    let mix = Profile::desk().mix_params();
    build_subdataset(corpus, SubdatasetId::new(partition, s, fold), count, seed, &mix).expect("desk subdataset")
}

/// 1. Studio-profile STFT of a 2 s, 44.1 kHz clip is exactly 460 × 258.
fn spectrogram_shape() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut rng = seed::rng(1);
    let x: Vec<f64> = (0..88_200).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let spec = stft_samples(&x, 44_100, &StftParams::new(256, 192)?)?;
    Ok(outcome(spec.shape() == (460, 258), format!("W×H = {}×{}", spec.frames(), spec.height())))
}

/// 2. `‖istft(stft(x)) − x‖∞ ≤ 1e-6·‖x‖∞` over 50 random clips.
fn stft_round_trip() -> Result<Outcome, Box<dyn std::error::Error>> {
    let params = StftParams::new(256, 192)?;
    let mut rng = seed::rng(2);
    let mut worst: f64 = 0.0;
    let mut clips = 0;
    while clips < 50 {
        let len = rng.gen_range(1_000..90_000);
        if !params.invertible_len(len) {
            continue;
        }
        let amp = rng.gen_range(0.01..1.0);
        let x: Vec<f64> = (0..len).map(|_| amp * rng.gen_range(-1.0..1.0)).collect();
        let y = istft_samples(&stft_samples(&x, 44_100, &params)?)?;
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / peak);
        clips += 1;
    }
    Ok(outcome(worst <= 1e-6, format!("worst relative error {worst:.2e} over 50 clips (limit 1e-6)")))
}

/// 3. Every op ≤ 1e-5 and the toy model ≤ 1e-4 relative error.
fn gradient_suite() -> Result<Outcome, Box<dyn std::error::Error>> {
    let ops = op_suite(0)?;
    let worst_op = ops
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .expect("nonempty op suite");
    let ops_ok = ops.iter().all(|c| c.report.max_rel_err <= OP_TOLERANCE);
    let toy = SttConfig::toy();
    assert_eq!((toy.frames, toy.height, toy.embed, toy.n_enc, toy.n_dec, toy.heads, toy.sources), (12, 18, 16, 2, 2, 2, 2));
    let model = model_check(&toy, 0, Some(16))?;
    let model_ok = model.max_rel_err <= MODEL_TOLERANCE;
    Ok(outcome(
        ops_ok && model_ok,
        format!(
            "{} ops, worst {} {:.2e} (limit 1e-5); toy model {} coords, worst {} {:.2e} (limit 1e-4)",
            ops.len(),
            worst_op.name,
            worst_op.report.max_rel_err,
            model.coords_checked,
            model.worst,
            model.max_rel_err
        ),
    ))
}

fn spec_of(data: Vec<f64>, w: usize) -> Spectrogram {
    let meta = SpectrogramMeta { n_fft: 2, hop: 1, sample_rate: 1, original_length: 1 };
    Spectrogram::new(w, 4, data, meta).expect("valid shape")
}

/// 4. Greedy ≥ Hungarian; equal on diagonal-dominant matrices; zero loss iff
/// the sets match up to permutation.
fn bijection_oracle() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut rng = seed::rng(4);
    let mut failures = Vec::new();
    for &s in &SOURCE_COUNTS {
        for trial in 0..1000 {
            let v: Vec<f64> = (0..s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sim = SimMatrix::new(s, v.clone())?;
            let (g, _) = greedy_assign(&sim);
            let (h, _) = hungarian_loss(&sim);
            if g < h - 1e-12 {
                failures.push(format!("s={s} trial {trial}: greedy {g} < hungarian {h}"));
            }

            let mut d = v;
            for i in 0..s {
                let row_min = (0..s).filter(|&j| j != i).map(|j| d[i * s + j]).fold(f64::INFINITY, f64::min);
                let col_min = (0..s).filter(|&k| k != i).map(|k| d[k * s + i]).fold(f64::INFINITY, f64::min);
                d[i * s + i] = 0.5 * row_min.min(col_min);
            }
            let dom = SimMatrix::new(s, d)?;
            let (gd, ad) = greedy_assign(&dom);
            let (hd, _) = hungarian_loss(&dom);
            if (gd - hd).abs() > 1e-12 || ad != (0..s).collect::<Vec<_>>() {
                failures.push(format!("s={s} trial {trial}: dominant matrix greedy {gd} vs hungarian {hd}"));
            }

            let truths: Vec<Spectrogram> =
                (0..s).map(|_| spec_of((0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(), 3)).collect();
            let mut perm: Vec<usize> = (0..s).collect();
            perm.shuffle(&mut rng);
            let preds: Vec<Spectrogram> = perm.iter().map(|&j| truths[j].clone()).collect();
            let (zero, assignment) = greedy_bijection_loss(&preds, &truths)?;
            if zero > 1e-12 || assignment != perm {
                failures.push(format!("s={s} trial {trial}: permuted set loss {zero}"));
            }
            let mut off = preds;
            let k = rng.gen_range(0..s);
            let mut data = off[k].data().to_vec();
            data[rng.gen_range(0..12)] += 1e-3;
            off[k] = spec_of(data, 3);
            let (nonzero, _) = greedy_bijection_loss(&off, &truths)?;
            if nonzero <= 1e-12 {
                failures.push(format!("s={s} trial {trial}: mismatched set loss {nonzero}"));
            }
        }
    }
    let detail = match failures.first() {
        None => "3000 matrices per property, s ∈ {2,3,5}, no violations".to_string(),
        Some(f) => format!("{} violations, first: {f}", failures.len()),
    };
    Ok(outcome(failures.is_empty(), detail))
}

fn render_all(m: &DatasetManifest, corpus: &Corpus) -> Result<Vec<specsep::forge::MixtureRecord>, Box<dyn std::error::Error>> {
    Ok(m.stream(corpus).collect::<Result<Vec<_>, _>>()?)
}

/// 5. Studio-default counts, desk-count bit-identical regeneration, and the
/// class-policy scan on every record.
fn forge_conformance() -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut problems = Vec::new();
    let desk_started = Instant::now();
    let corpus = desk_corpus();
    let profile = Profile::desk();
    let mut desk_records = 0;
    for partition in Partition::ALL {
        for &s in &SOURCE_COUNTS {
            for fold in Fold::ALL {
                let id = SubdatasetId::new(partition, s, fold);
                let count = profile.count(id);
                let a = build_subdataset(&corpus, id, count, 5, &profile.mix_params())?;
                let b = build_subdataset(&corpus, id, count, 5, &profile.mix_params())?;
                let mut bytes = Vec::new();
                write_manifest(&a, &mut bytes)?;
                let reread = read_manifest(&bytes[..])?;
                if a != b || reread != a || a.len() != count {
                    problems.push(format!("{id}: manifests differ or wrong count"));
                }
                if render_all(&a, &corpus)? != render_all(&reread, &corpus)? {
                    problems.push(format!("{id}: regenerated audio differs"));
                }
                for r in &a.records {
                    if let Err(e) = check_record(&corpus, &a.header, r) {
                        problems.push(format!("{id}: {e}"));
                    }
                }
                desk_records += a.len();
            }
        }
    }
    let desk_time = desk_started.elapsed();

    let studio_corpus = gen_synthetic_corpus(&CorpusSpec::studio(), 0)?;
    let mut studio_records = 0;
    for partition in Partition::ALL {
        for &s in &SOURCE_COUNTS {
            for fold in Fold::ALL {
                let id = SubdatasetId::new(partition, s, fold);
                let want = if fold == Fold::Tr { 10_000 * s } else { 1_000 * s };
                let m = build_subdataset(&studio_corpus, id, id.default_count(), 7, &MixParams::default())?;
                if m.len() != want {
                    problems.push(format!("{id}: {} mixtures, expected {want}", m.len()));
                }
                for r in &m.records {
                    if let Err(e) = check_record(&studio_corpus, &m.header, r) {
                        problems.push(format!("{id}: {e}"));
                    }
                }
                studio_records += m.len();
            }
        }
    }
    let fast = desk_time < Duration::from_secs(120);
    let detail = format!(
        "desk: {desk_records} records in 27 subdatasets regenerated bit-identically in {:.1} s (limit 120 s); studio: {studio_records} records at 10^4·s / 10^3·s; {}",
        desk_time.as_secs_f64(),
        match problems.first() {
            None => "policy scan clean".to_string(),
            Some(p) => format!("{} problems, first: {p}", problems.len()),
        }
    );
    Ok(outcome(problems.is_empty() && fast, detail))
}

/// 6. Eight fixed mixtures: train loss < 0.1 × mixture projection within
/// 2000 Adam steps.
fn overfit() -> Result<Outcome, Box<dyn std::error::Error>> {
    let corpus = desk_corpus();
    let set = desk_set(&corpus, Partition::Hybrid, 2, Fold::Tr, 8, 6);
    let data = DataSource::rendered(&set, &corpus);
    let cfg = TrainConfig { max_steps: 2000, eval_every: 500, batch_size: 8, seed: 6, ..TrainConfig::desk(Partition::Hybrid, 2) };
    let run = train(&cfg, &data, &data, TrainSinks::default())?;
    let report = evaluate(&run.last, &data)?;
    let ratio = report.model_loss / report.baseline_loss;
    Ok(outcome(
        ratio < 0.1,
        format!(
            "after {} steps loss {:.4} vs mixture projection {:.4}, ratio {ratio:.4} (limit 0.1)",
            cfg.max_steps, report.model_loss, report.baseline_loss
        ),
    ))
}

/// 7. 200 training mixtures: validation loss below mixture projection.
fn generalization() -> Result<Outcome, Box<dyn std::error::Error>> {
    let corpus = desk_corpus();
    let train_set = desk_set(&corpus, Partition::Hybrid, 2, Fold::Tr, 200, 7);
    let val_set = desk_set(&corpus, Partition::Hybrid, 2, Fold::Vl, 40, 7);
    let cfg = TrainConfig { max_steps: 1500, eval_every: 250, seed: 7, ..TrainConfig::desk(Partition::Hybrid, 2) };
    let run = train(&cfg, &DataSource::rendered(&train_set, &corpus), &DataSource::rendered(&val_set, &corpus), TrainSinks::default())?;
    let report = evaluate(&run.best, &DataSource::rendered(&val_set, &corpus))?;
    Ok(outcome(
        report.model_loss < report.baseline_loss,
        format!(
            "validation loss {:.4} vs mixture projection {:.4} on 40 held-out mixtures (ratio {:.3})",
            report.model_loss,
            report.baseline_loss,
            report.model_loss / report.baseline_loss
        ),
    ))
}

/// Parameter count of one encoder path computed from the configuration.
fn path_params(width: usize, cfg: &SttConfig, with_cnn: bool) -> usize {
    let mut n = 0;
    if with_cnn {
        let mut cin = width;
        for c in &cfg.cnn {
            let cout = if c.channels == 0 { width } else { c.channels };
            n += c.kernel * cin * cout + cout;
            cin = cout;
        }
    }
    let msa = 4 * width * width + 3 * width;
    let hidden = width * cfg.ff_mult;
    let ff = width * hidden + hidden + hidden * width + width;
    n + msa + ff + 2 * 2 * width
}

fn census_problems(cfg: &SttConfig, c: &ParamCensus) -> Vec<String> {
    let cnn = cfg.ablation != Ablation::NoCnn;
    let tp = cfg.n_enc * path_params(cfg.embed, cfg, cnn);
    let sp = cfg.n_enc * path_params(cfg.frames, cfg, cnn);
    let (want_tp, want_sp, want_tp2, want_sp2) = match cfg.ablation {
        Ablation::TpOnly => (tp, 0, 0, 0),
        Ablation::SpOnly => (0, sp, 0, 0),
        Ablation::TpDouble => (tp, 0, tp, 0),
        Ablation::SpDouble => (0, sp, 0, sp),
        _ => (tp, sp, 0, 0),
    };
    let out = cfg.height * cfg.sources;
    let want_ff2 = if cfg.ablation == Ablation::NoMgn { 0 } else { out * out + out };
    let mut p = Vec::new();
    let pairs = [
        ("temporal", c.temporal, want_tp),
        ("spectral", c.spectral, want_sp),
        ("temporal2", c.temporal2, want_tp2),
        ("spectral2", c.spectral2, want_sp2),
        ("mgn.ff2", c.mgn_ff2, want_ff2),
    ];
    for (name, got, want) in pairs {
        if got != want {
            p.push(format!("{}: {name} has {got} parameters, expected {want}", cfg.ablation));
        }
    }
    if !cnn && c.cnn != 0 {
        p.push("no-CNN has convolution parameters".into());
    }
    if c.total != c.embedding + c.temporal + c.spectral + c.temporal2 + c.spectral2 + c.decoder + c.mgn_ff1 + c.mgn_ff2 {
        p.push(format!("{}: census parts do not sum to the total", cfg.ablation));
    }
    p
}

/// 8. The six variants construct, pass the census, run forward/backward and
/// train 100 steps.
fn ablation_suite() -> Result<Outcome, Box<dyn std::error::Error>> {
    let corpus = desk_corpus();
    let train_set = desk_set(&corpus, Partition::Hybrid, 2, Fold::Tr, 32, 8);
    let val_set = desk_set(&corpus, Partition::Hybrid, 2, Fold::Vl, 8, 8);
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for ablation in Ablation::VARIANTS {
        let base = TrainConfig::desk(Partition::Hybrid, 2);
        let cfg = TrainConfig {
            stt: base.stt.clone().with_ablation(ablation),
            max_steps: 100,
            eval_every: 50,
            seed: 8,
            ..base
        };
        let model = SttModel::<f32>::new(cfg.stt.clone(), 0)?;
        problems.extend(census_problems(&cfg.stt, &model.census()));

        let tape = Tape::new();
        let x = Tensor::<f32>::from_fn(&[cfg.stt.frames, cfg.stt.height], |i| ((i % 17) as f32 - 8.0) * 0.1);
        let pass = model.forward(&tape, &x, None)?;
        let loss = tape.mean(pass.output)?;
        let grads = tape.backward(loss)?;
        if grads.params().len() != model.params().len() {
            problems.push(format!("{ablation}: backward reached {} of {} tensors", grads.params().len(), model.params().len()));
        }

        let run = train(
            &cfg,
            &DataSource::rendered(&train_set, &corpus),
            &DataSource::rendered(&val_set, &corpus),
            TrainSinks::default(),
        )?;
        let steps = run.log.train_losses().count();
        if steps != 100 || run.log.train_losses().any(|(_, l)| !l.is_finite()) {
            problems.push(format!("{ablation}: {steps} finite training steps"));
        }
        summary.push(format!("{ablation} {}", model.census().total));
    }
    let detail = match problems.first() {
        None => format!("100 steps each; parameters: {}", summary.join(", ")),
        Some(p) => format!("{} problems, first: {p}", problems.len()),
    };
    Ok(outcome(problems.is_empty(), detail))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Criterion, Option<Duration>); 8] = [
        (1, "spectrogram shape", spectrogram_shape, Some(Duration::from_secs(1))),
        (2, "STFT round-trip", stft_round_trip, Some(Duration::from_secs(10))),
        (3, "gradient suite", gradient_suite, Some(Duration::from_secs(300))),
        (4, "bijection oracle", bijection_oracle, Some(Duration::from_secs(30))),
        (5, "forge conformance", forge_conformance, None),
        (6, "overfit check", overfit, Some(Duration::from_secs(15 * 60))),
        (7, "generalization ordering", generalization, Some(Duration::from_secs(45 * 60))),
        (8, "ablation suite", ablation_suite, Some(Duration::from_secs(10 * 60))),
    ];
    let mut failed = 0;
    for (n, name, run, limit) in criteria {
        let started = Instant::now();
        let result = run();
        let elapsed = started.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && limit.map_or(true, |l| elapsed <= l), o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        let verdict = if passed { "PASS" } else { "FAIL" };
        println!("criterion {n} [{name}]: {verdict}: {detail}; {:.2} s", elapsed.as_secs_f64());
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
