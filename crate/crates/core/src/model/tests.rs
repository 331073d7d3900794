use super::*;
use crate::nn::Mode;
use crate::tensor::Graph;

fn tiny(encoders: Vec<EncoderSpec>) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        decoder_layers: 2,
        encoders,
        vocab_size: 11,
        max_len: 32,
        dropout: 0.1,
        combine: Combine::Sum,
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, Model) {
    let mut store = ParamStore::new();
    let m = Model::new(cfg, &mut store, seed).unwrap();
    (store, m)
}

struct Pair {
    src: Vec<usize>,
    src_len: Vec<usize>,
    tgt: Vec<usize>,
    tgt_len: Vec<usize>,
    rows: usize,
    ts: usize,
    tt: usize,
}

impl Pair {
    fn sample() -> Self {
        Pair {
            src: vec![5, 6, 7, 2, 8, 9, 2, 0],
            src_len: vec![4, 3],
            tgt: vec![1, 5, 6, 7, 1, 8, 9, 0],
            tgt_len: vec![4, 3],
            rows: 2,
            ts: 4,
            tt: 4,
        }
    }
    fn src(&self) -> Ids<'_> {
        Ids { ids: &self.src, rows: self.rows, len: self.ts, lengths: &self.src_len }
    }
    fn tgt(&self) -> Ids<'_> {
        Ids { ids: &self.tgt, rows: self.rows, len: self.tt, lengths: &self.tgt_len }
    }
}

fn memory(store: &ParamStore<f64>, m: &Model, p: &Pair) -> Vec<f64> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, store);
    g.data(m.encode(&ctx, p.src()).unwrap())
}

fn logits(store: &ParamStore<f64>, m: &Model, p: &Pair) -> Vec<f64> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, store);
    g.data(m.forward(&ctx, p.src(), p.tgt()).unwrap())
}

/// Copies every parameter named `{from}.*` onto `{to}.*`.
fn copy_prefix(src: &ParamStore<f64>, dst: &mut ParamStore<f64>, from: &str, to: &str) {
    for (name, t) in src.iter() {
        if let Some(rest) = name.strip_prefix(&format!("{from}.")) {
            let id = dst.find(&format!("{to}.{rest}")).unwrap();
            dst.get_mut(id).data.clone_from(&t.data);
        }
    }
}

#[test]
fn single_branch_memory_is_the_branch_output() {
    let (store, m) = build(&tiny(vec![EncoderSpec::new(EncoderKind::Lstm, 2)]), 1);
    let p = Pair::sample();
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &store);
    let x = embed(&ctx, m.embedding, &p.src, 2, 4).unwrap();
    let x = add_positions(&g, x).unwrap();
    let direct = g.data(m.encoders[0].forward(&ctx, x, &p.src_len).unwrap());
    assert_eq!(memory(&store, &m, &p), direct);
}

#[test]
fn twin_branches_double_the_memory() {
    let spec = EncoderSpec::new(EncoderKind::ConvS2S, 2);
    let (single_store, single) = build(&tiny(vec![spec.clone()]), 2);
    let (mut store, twin) = build(&tiny(vec![spec.clone(), spec]), 3);
    copy_prefix(&single_store, &mut store, "enc0", "enc0");
    copy_prefix(&single_store, &mut store, "enc0", "enc1");
    let id = store.find("embedding").unwrap();
    store.get_mut(id).data.clone_from(&single_store.get(single.embedding).data);
    let p = Pair::sample();
    let one = memory(&single_store, &single, &p);
    let two = memory(&store, &twin, &p);
    for (a, b) in one.iter().zip(&two) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn branch_order_does_not_change_memory() {
    let a = EncoderSpec::new(EncoderKind::Lstm, 1);
    let b = EncoderSpec::static_expansion(2, &[3]);
    let c = EncoderSpec::new(EncoderKind::FNet, 1);
    let (s1, m1) = build(&tiny(vec![a.clone(), b.clone(), c.clone()]), 4);
    let (mut s2, m2) = build(&tiny(vec![c, a, b]), 5);
    copy_prefix(&s1, &mut s2, "enc0", "enc1");
    copy_prefix(&s1, &mut s2, "enc1", "enc2");
    copy_prefix(&s1, &mut s2, "enc2", "enc0");
    let id = s2.find("embedding").unwrap();
    s2.get_mut(id).data.clone_from(&s1.get(m1.embedding).data);
    let p = Pair::sample();
    for (x, y) in memory(&s1, &m1, &p).iter().zip(memory(&s2, &m2, &p)) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn decoder_is_causal() {
    let (store, m) = build(&tiny(vec![EncoderSpec::new(EncoderKind::SelfAttention, 1)]), 6);
    let p = Pair::sample();
    let base = logits(&store, &m, &p);
    let v = 11;
    for pos in 1..4 {
        let mut q = Pair::sample();
        q.tgt[pos] = 10;
        let out = logits(&store, &m, &q);
        assert_eq!(out[..pos * v], base[..pos * v]);
        assert_ne!(out[pos * v..4 * v], base[pos * v..4 * v]);
    }
}

#[test]
fn zeroed_cross_attention_ignores_the_source() {
    let (mut store, m) = build(&tiny(vec![EncoderSpec::new(EncoderKind::ConvS2S, 1)]), 7);
    for l in 0..2 {
        for n in ["w", "b"] {
            let id = store.find(&format!("dec.{l}.cross.o.{n}")).unwrap();
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let p = Pair::sample();
    let base = logits(&store, &m, &p);
    let mut q = Pair::sample();
    q.src = vec![9, 9, 9, 2, 3, 4, 2, 0];
    assert_eq!(logits(&store, &m, &q), base);
}

#[test]
fn forward_is_deterministic_and_row_consistent() {
    let (store, m) = build(&tiny(vec![EncoderSpec::new(EncoderKind::SelfAttention, 1)]), 8);
    let p = Pair::sample();
    let run = || {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, Mode::Train, 0.1, 99).unwrap();
        g.data(m.forward(&ctx, p.src(), p.tgt()).unwrap())
    };
    assert_eq!(run(), run());

    let twin = Pair {
        src: vec![5, 6, 7, 2, 5, 6, 7, 2],
        src_len: vec![4, 4],
        tgt: vec![1, 5, 6, 7, 1, 5, 6, 7],
        tgt_len: vec![4, 4],
        ..Pair::sample()
    };
    let out = logits(&store, &m, &twin);
    assert_eq!(out[..44], out[44..]);
}

#[test]
fn initial_loss_is_near_uniform() {
    let mut cfg = tiny(vec![EncoderSpec::new(EncoderKind::SelfAttention, 1), EncoderSpec::new(EncoderKind::Lstm, 1)]);
    cfg.vocab_size = 40;
    cfg.d_model = 16;
    let (store, m) = build(&cfg, 9);
    let p = Pair::sample();
    let targets = vec![5, 6, 7, 2, 8, 9, 2, 0];
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &store);
    let loss = g.scalar_value(m.loss(&ctx, p.src(), p.tgt(), &targets, 0.1).unwrap());
    let lnv = 40f64.ln();
    assert!((loss - lnv).abs() < 0.15 * lnv, "{loss} vs {lnv}");
}

#[test]
fn analytic_param_count_matches_built_model() {
    let all = vec![
        EncoderSpec::new(EncoderKind::SelfAttention, 2),
        EncoderSpec::new(EncoderKind::Lstm, 1),
        EncoderSpec::new(EncoderKind::ConvS2S, 2),
        EncoderSpec::static_expansion(3, &[2, 4]),
        EncoderSpec::new(EncoderKind::FNet, 1),
    ];
    let mut cfg = tiny(all);
    let (store, _) = build(&cfg, 10);
    assert_eq!(store.scalar_count(), count_params(&cfg));
    cfg.combine = Combine::Concat;
    let (store, m) = build(&cfg, 10);
    assert_eq!(store.scalar_count(), count_params(&cfg));
    let p = Pair::sample();
    assert_eq!(memory(&store, &m, &p).len(), 2 * 4 * 8);
}

#[test]
fn param_count_is_additive() {
    let base = tiny(vec![EncoderSpec::new(EncoderKind::SelfAttention, 2)]);
    let mut deeper = base.clone();
    deeper.decoder_layers *= 2;
    let per_layer = DecoderLayer::param_count(8, 16);
    assert_eq!(count_params(&deeper) - count_params(&base), 2 * per_layer);

    let extra = EncoderSpec::static_expansion(4, &[6, 8]);
    let mut more = base.clone();
    for k in 1..=3 {
        more.encoders.push(extra.clone());
        assert_eq!(count_params(&more) - count_params(&base), k * extra.param_count(8, 16));
    }
}

#[test]
fn flops_are_linear_in_depth() {
    for kind in EncoderKind::ALL {
        let spec = |l| {
            if kind == EncoderKind::StaticExpansion {
                EncoderSpec::static_expansion(l, &[6])
            } else {
                EncoderSpec::new(kind, l)
            }
        };
        let f = |l| spec(l).macs(128, 512, 2048);
        assert!((f(6) - 2.0 * f(3)).abs() < 1e-6 * f(6));
    }
    // one extra decoder layer adds its projections, attention products and feed-forward
    let base = ModelConfig::default();
    let mut deeper = base.clone();
    deeper.decoder_layers += 1;
    let (t, d) = (128.0, 512.0);
    let layer = 2.0 * (4.0 * t * d * d + 2.0 * t * t * d + 4.0 * t * d * d + 2.0 * t * t * d + 2.0 * t * d * 2048.0);
    let diff = estimate_flops(&deeper, 128, 128) - estimate_flops(&base, 128, 128);
    assert!((diff - layer / 1e9).abs() < 1e-9);
}

#[test]
fn config_validation() {
    let mut cfg = tiny(vec![]);
    assert!(cfg.validate().is_err());
    cfg.encoders.push(EncoderSpec::new(EncoderKind::Lstm, 1));
    cfg.validate().unwrap();
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
}
