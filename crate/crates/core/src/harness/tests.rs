use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{count_params, estimate_flops};

const SCORES: &str = include_str!("../../tests/fixtures/scores.csv");
const MATRIX: &str = include_str!("../../tests/fixtures/synergy.csv");

use EncoderKind::{ConvS2S as C, FNet as F, Lstm as L, SelfAttention as B, StaticExpansion as S};

#[test]
fn settings_parse_and_override() {
    let text = "# comment\n\nmodel.d_model = 64\ntrain.seed=7\ndata.train = corpora/train\n";
    let mut s = Settings::parse(text, Some(Path::new("/cfg"))).unwrap();
    assert_eq!(s.get::<usize>("model.d_model").unwrap(), Some(64));
    assert_eq!(s.path("data.train").unwrap(), Path::new("/cfg/corpora/train"));
    s.set("train.seed=9").unwrap();
    s.set("data.train = rel/x").unwrap();
    assert_eq!(s.get::<u64>("train.seed").unwrap(), Some(9));
    assert_eq!(s.path("data.train").unwrap(), Path::new("rel/x"));
    s.set("data.test=/abs/t").unwrap();
    assert_eq!(s.path("data.test").unwrap(), Path::new("/abs/t"));
}

#[test]
fn settings_errors_name_key_and_line() {
    match Settings::parse("model.d_model = 8\nmodel.colour = red\n", None) {
        Err(Error::ConfigKey { line, key, .. }) => assert_eq!((line, key.as_str()), (2, "model.colour")),
        r => panic!("{r:?}"),
    }
    match Settings::parse("train.seed = 1\ntrain.seed = 2\n", None) {
        Err(Error::ConfigKey { line: 2, key, .. }) => assert_eq!(key, "train.seed"),
        r => panic!("{r:?}"),
    }
    assert!(matches!(Settings::parse("just words\n", None), Err(Error::ConfigKey { line: 1, .. })));
    let s = Settings::parse("model.d_model = wide\n", None).unwrap();
    assert!(matches!(s.get::<usize>("model.d_model"), Err(Error::ConfigKey { line: 1, .. })));
    let s = Settings::parse("model.encoders = B,gru\n", None).unwrap();
    match model_config(&s) {
        Err(Error::ConfigKey { line: 1, key, msg }) => {
            assert_eq!(key, "model.encoders");
            assert!(msg.contains("gru"), "{msg}");
        }
        r => panic!("{r:?}"),
    }
    assert!(Settings::default().set("nope.key=1").is_err());
}

#[test]
fn model_settings_compose_with_presets() {
    let s = Settings::parse(
        "model.preset = dual,small\nmodel.d_model = 64\nmodel.branch_layers = 2\nmodel.expansion_coeffs = 4,3\n",
        None,
    )
    .unwrap();
    let cfg = model_config(&s).unwrap();
    assert_eq!(cfg.d_model, 64);
    assert_eq!(cfg.decoder_layers, 3);
    assert_eq!(cfg.encoders.iter().map(|e| (e.kind, e.layers)).collect::<Vec<_>>(), [(B, 2), (S, 2)]);
    assert_eq!(cfg.encoders[1].expansion_coeffs, [4, 3]);

    let s = Settings::parse("model.encoders = lstm, conv\nmodel.branch_layers = 1,3\nmodel.kernel_width = 5\n", None)
        .unwrap();
    let cfg = model_config(&s).unwrap();
    assert_eq!(cfg.encoders[1].layers, 3);
    assert_eq!(cfg.encoders[1].kernel_width, 5);
    let s = Settings::parse("model.encoders = B,L\nmodel.branch_layers = 1,2,3\n", None).unwrap();
    assert!(matches!(model_config(&s), Err(Error::ConfigKey { key, .. }) if key == "model.branch_layers"));
    let s = Settings::parse("model.preset = octuple\n", None).unwrap();
    assert!(matches!(model_config(&s), Err(Error::ConfigKey { key, .. }) if key == "model.preset"));
}

#[test]
fn preset_compositions() {
    let dual = build_model_from_preset(Preset::Dual, Scale::Large);
    assert_eq!(dual.encoders.iter().map(|e| (e.kind, e.layers)).collect::<Vec<_>>(), [(B, 6), (S, 12)]);
    assert_eq!(dual.encoders[1].expansion_coeffs, EXPANSION_COEFFS);
    let q = build_model_from_preset(Preset::Quintuple, Scale::Small);
    assert_eq!(
        q.encoders.iter().map(|e| (e.kind, e.layers)).collect::<Vec<_>>(),
        [(B, 3), (S, 6), (L, 6), (C, 6), (F, 6)]
    );
    assert_eq!(q.encoders[1].expansion_coeffs, [6, 6, 12, 8, 12, 8]);
    assert_eq!(q.decoder_layers, 3);
    let t = build_model_from_preset(Preset::Triple, Scale::Large);
    assert_eq!(t.encoders[2].layers, 18);
    assert_eq!(build_model_from_preset(Preset::Single, Scale::Large), ModelConfig::default());
    assert_eq!(parse_preset("triple").unwrap(), (Preset::Triple, Scale::Large));
    assert!(parse_preset("dual,medium").is_err());
}

#[test]
fn cost_matches_published_scale() {
    let large = build_model_from_preset(Preset::Single, Scale::Large);
    let small = build_model_from_preset(Preset::Single, Scale::Small);
    let rel = |x: f64, y: f64| (x - y).abs() / y;
    assert!(rel(count_params(&large) as f64, 48e6) <= 0.15);
    assert!(rel(count_params(&small) as f64, 26e6) <= 0.15);
    assert!(rel(estimate_flops(&large, 128, 128), 11.8) <= 0.20);
    assert!(rel(estimate_flops(&small, 128, 128), 5.9) <= 0.20);
    for scale in [Scale::Small, Scale::Large] {
        let r = preset_costs(&Preset::ALL, &[scale]);
        for w in r.windows(2) {
            assert!(w[1].params >= w[0].params && w[1].gflops >= w[0].gflops, "{w:?}");
        }
    }
    let mut more = large.clone();
    more.encoders.push(EncoderSpec::static_expansion(12, &EXPANSION_COEFFS));
    assert!(count_params(&more) > count_params(&large));
    assert!(estimate_flops(&more, 128, 128) > estimate_flops(&large, 128, 128));
    let csv = cost_csv(&preset_costs(&[Preset::Single], &[Scale::Large]));
    assert!(csv.starts_with("name,params,gflops\nsingle-large,"), "{csv}");
}

#[test]
fn synergy_from_score_table() {
    let t = ScoreTable::from_csv(SCORES).unwrap();
    let m = synergy_matrix(&t).unwrap();
    let close = |i, j, v: f64| (m.get(i, j).unwrap() - v).abs() < 1e-9;
    assert!(close(B, S, 31.73 - 29.40));
    assert!((m.get(B, S).unwrap() - 2.33).abs() < 0.005);
    assert!((m.get(B, B).unwrap() + 0.49).abs() < 0.005);
    assert!(close(S, B, 31.73 - 31.13));
    assert_eq!(m.get(L, C), None);
    assert_eq!(m.get(B, F), None);
    // every present entry is exactly the subtraction it stands for
    for i in EncoderKind::ALL {
        for j in EncoderKind::ALL {
            if let Some(v) = m.get(i, j) {
                assert!((v - (t.dual(i, j).unwrap() - t.single[&j])).abs() < 1e-12);
            }
        }
    }
    assert!(m.to_table().contains("n/a"));
    assert_eq!(ScoreTable::from_csv(&t.to_csv()).unwrap(), t);

    let mut t = ScoreTable::default();
    for k in EncoderKind::ALL {
        t.single.insert(k, 20.0);
    }
    t.set_dual(L, C, 20.0);
    assert_eq!(synergy_matrix(&t).unwrap().get(C, L), Some(0.0));
    t.single.remove(&F);
    assert!(synergy_matrix(&t).is_err());
    assert!(ScoreTable::from_csv("single,B,,131\n").is_err());
}

#[test]
fn top_pairs_on_published_matrix() {
    let m = SynergyMatrix::from_csv(MATRIX).unwrap();
    let top = select_top_pairs(&m, 3);
    let got: Vec<(String, f64)> = top.iter().map(|p| (p.label(), p.sum)).collect();
    assert_eq!(got.iter().map(|g| g.0.as_str()).collect::<Vec<_>>(), ["B+S", "B+L", "L+C"]);
    for (g, want) in got.iter().zip([2.93, 2.10, 1.38]) {
        assert!((g.1 - want).abs() < 1e-9);
    }
    let one = select_top_pairs(&m, 1);
    assert_eq!(one[0].pair, (B, S));
    assert_eq!(SynergyMatrix::from_csv(&m.to_csv()).unwrap(), m);

    let mut zeros = SynergyMatrix::default();
    for i in EncoderKind::ALL {
        for j in EncoderKind::ALL {
            zeros.set(i, j, 0.0);
        }
    }
    let all = select_top_pairs(&zeros, 10);
    let labels: Vec<String> = all.iter().map(RankedPair::label).collect();
    assert_eq!(labels, ["B+C", "B+F", "B+L", "B+S", "C+F", "L+C", "C+S", "L+F", "S+F", "L+S"]);
    assert!(all.iter().all(|p| p.sum == 0.0));
}

/// Copy-task corpus over single-letter words.
fn write_copy_corpus(prefix: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<char> = ('a'..='l').collect();
    let lines: Vec<String> = (0..n)
        .map(|_| {
            let len = rng.gen_range(2..6);
            (0..len).map(|_| letters[rng.gen_range(0..letters.len())].to_string()).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let text = lines.join("\n") + "\n";
    fs::write(prefix.with_extension("src"), &text).unwrap();
    fs::write(prefix.with_extension("tgt"), &text).unwrap();
}

fn tiny_run(dir: &Path, out: &str) -> Settings {
    let text = format!(
        "run.out_dir = {out}\n\
         data.train = data/train\ndata.valid = data/valid\ndata.test = data/test\n\
         data.num_merges = 0\ndata.max_len = 20\n\
         model.preset = dual,small\nmodel.d_model = 16\nmodel.heads = 2\nmodel.d_ff = 32\n\
         model.decoder_layers = 1\nmodel.branch_layers = 1\nmodel.max_len = 32\n\
         train.max_epochs = 2\ntrain.warmup = 10\ntrain.token_budget = 64\ntrain.seed = 5\n\
         eval.beam = 2\n"
    );
    fs::write(dir.join("run.cfg"), text).unwrap();
    Settings::load(&dir.join("run.cfg")).unwrap()
}

#[test]
fn run_experiment_writes_reproducible_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("data")).unwrap();
    write_copy_corpus(&dir.path().join("data/train"), 60, 1);
    write_copy_corpus(&dir.path().join("data/valid"), 10, 2);
    write_copy_corpus(&dir.path().join("data/test"), 8, 3);

    let a = run_experiment(&tiny_run(dir.path(), "a"), |_| {}).unwrap();
    let b = run_experiment(&tiny_run(dir.path(), "b"), |_| {}).unwrap();
    for f in ["config.echo", "vocab.bpe", "model.ckpt", "metrics.csv", "bleu.txt", "cost.csv", "test.hyp"] {
        assert!(a.dir.join(f).is_file(), "{f} missing");
    }
    for f in ["metrics.csv", "model.ckpt", "vocab.bpe", "bleu.txt", "test.hyp"] {
        assert_eq!(fs::read(a.dir.join(f)).unwrap(), fs::read(b.dir.join(f)).unwrap(), "{f} differs");
    }
    let metrics = fs::read_to_string(a.dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,train_loss,valid_loss,lr\n1,"));
    assert!(a.bleu.is_some());
    assert!(fs::read_to_string(a.dir.join("bleu.txt")).unwrap().starts_with("BLEU = "));

    // translate and score through the same settings
    let mut s = tiny_run(dir.path(), "a");
    s.set(&format!("translate.input={}", dir.path().join("data/test.src").display())).unwrap();
    let (lines, _) = translate_file(&s).unwrap();
    assert_eq!(lines.join("\n") + "\n", fs::read_to_string(a.dir.join("test.hyp")).unwrap());
    s.set(&format!("score.hyp={}", a.dir.join("test.hyp").display())).unwrap();
    s.set(&format!("score.ref={}", dir.path().join("data/test.tgt").display())).unwrap();
    assert_eq!(Some(score_files(&s).unwrap()), a.bleu);

    // a run with a different architecture cannot load this checkpoint
    s.set("model.d_ff=48").unwrap();
    assert!(matches!(load_trained(&s), Err(Error::ConfigMismatch { field, .. }) if field == "model.d_ff"));
}

#[test]
fn run_experiment_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = tiny_run(dir.path(), "out");
    assert!(matches!(run_experiment(&s, |_| {}), Err(Error::MissingFile(_))));
    let mut s = tiny_run(dir.path(), "out");
    s.set("data.max_len=40").unwrap();
    assert!(matches!(RunConfig::from_settings(&s), Err(Error::ConfigKey { key, .. }) if key == "data.max_len"));
}

#[test]
fn model_name_is_csv_safe() {
    let mut s = Settings::default();
    assert_eq!(model_name(&s), "model");
    s.set("model.preset=dual,small").unwrap();
    assert_eq!(model_name(&s), "dual-small");
    let csv = cost_csv(&[CostReport::new(&model_name(&s), &model_config(&s).unwrap())]);
    assert!(csv.lines().all(|l| l.split(',').count() == 3), "{csv}");
}
