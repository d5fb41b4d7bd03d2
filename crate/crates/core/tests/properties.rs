mod common;

use autodial::checkpoint::{from_bytes, to_bytes};
use autodial::data::{build_context, synth_corpus, DialogueTask, LabelSpace, SynthConfig, Vocab};
use autodial::model::{AutodialModel, DecoderSpec};
use autodial::tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use autodial::transformer::ModelConfig;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, scale: f32) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f32..1.0, n).prop_map(move |d| Tensor::new(shape.clone(), d.iter().map(|v| v * scale).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in prop_oneof![Just(1.0f32), Just(100.0), Just(1e4)], seed in any::<u64>()) {
        let _ = seed;
        let data: Vec<f32> = (0..rows * cols).map(|i| ((i as f32 * 0.37 + seed as f32 * 1e-9).sin()) * scale).collect();
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn losses_stay_finite(z in tensor(vec![6], 1e4), t in prop::collection::vec(prop::bool::ANY, 6), logits in tensor(vec![3, 5], 1e4), ids in prop::collection::vec(0usize..5, 3)) {
        let mut g = Graph::new();
        let zv = g.leaf(z.with_requires_grad(true));
        let targets: Vec<f32> = t.iter().map(|&b| b as u8 as f32).collect();
        let bce = g.bce_with_logits(zv, &targets).unwrap();
        prop_assert!(g.value(bce).item().is_finite());
        g.backward(bce).unwrap();
        prop_assert!(g.grad(zv).unwrap().iter().all(|v| v.is_finite()));

        let mut g = Graph::new();
        let lv = g.leaf(logits.with_requires_grad(true));
        let mut ids = ids;
        ids[0] = 1; // at least one non-pad target
        let ce = g.cross_entropy(lv, &ids, 0).unwrap();
        prop_assert!(g.value(ce).item().is_finite() && g.value(ce).item() >= 0.0);
        g.backward(ce).unwrap();
        prop_assert!(g.grad(lv).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adamw_never_touches_frozen(a in tensor(vec![3, 4], 1.0), b in tensor(vec![5], 1.0), ga in tensor(vec![3, 4], 10.0), steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.insert("m.trainable", a.with_requires_grad(true)).unwrap();
        let mut frozen = b.clone();
        frozen.grad = Some(vec![1.0; 5]);
        store.insert("m.frozen", frozen).unwrap();
        let before = store.get("m.frozen").unwrap().to_le_bytes();
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..steps {
            store.get_mut("m.trainable").unwrap().grad = Some(ga.data().to_vec());
            opt.step(&mut [&mut store], 1e-2).unwrap();
        }
        prop_assert_eq!(store.get("m.frozen").unwrap().to_le_bytes(), before);
        prop_assert!(opt.moments("m.frozen").is_none());
    }

    #[test]
    fn clipping_is_idempotent(g1 in tensor(vec![4], 5.0), g2 in tensor(vec![2, 3], 5.0), max in 0.1f32..3.0) {
        let mut s = ParamStore::new();
        let mut a = Tensor::zeros(&[4]).unwrap().with_requires_grad(true);
        a.grad = Some(g1.data().to_vec());
        let mut b = Tensor::zeros(&[2, 3]).unwrap().with_requires_grad(true);
        b.grad = Some(g2.data().to_vec());
        s.insert("a", a).unwrap();
        s.insert("b", b).unwrap();
        clip_grad_norm(&mut [&mut s], max);
        let once: Vec<f32> = ["a", "b"].iter().flat_map(|n| s.get(n).unwrap().grad.clone().unwrap()).collect();
        let norm = clip_grad_norm(&mut [&mut s], max);
        prop_assert!(norm <= max * (1.0 + 1e-6));
        let twice: Vec<f32> = ["a", "b"].iter().flat_map(|n| s.get(n).unwrap().grad.clone().unwrap()).collect();
        for (x, y) in once.iter().zip(&twice) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-6));
        }
    }

    #[test]
    fn context_never_exceeds_limit(seed in 0u64..1000, max in 3usize..40) {
        let (corpus, _) = synth_corpus(&SynthConfig { seed, n_dialogues: 3, ..SynthConfig::default() });
        let vocab = Vocab::from_corpus(&corpus);
        for d in &corpus {
            for t in 0..d.user_turns().count() {
                let ids = build_context(d, t, &vocab, max).unwrap();
                prop_assert!(ids.len() <= max);
                prop_assert_eq!(ids[0], vocab.bos_id());
                prop_assert_eq!(*ids.last().unwrap(), vocab.eos_id());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), n_labels in 1usize..6, layers in 1usize..3) {
        let mut c = ModelConfig::tiny(20);
        c.d_model = 8;
        c.n_heads = 2;
        c.ffn_dim = 8;
        c.enc_layers = 1;
        let labels = LabelSpace::new((0..n_labels).map(|i| format!("l{i}")));
        let m = AutodialModel::build(
            c,
            vec![
                DecoderSpec::classification(DialogueTask::Domain, labels).with_layers(layers),
                DecoderSpec::generative("dst", vec![DialogueTask::Dst, DialogueTask::Act], layers),
            ],
            seed,
        )
        .unwrap();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        prop_assert_eq!(m.encoder(), back.encoder());
        for t in ["domain", "dst"] {
            prop_assert_eq!(m.decoder(t).unwrap(), back.decoder(t).unwrap());
        }
        prop_assert_eq!(to_bytes(&m), to_bytes(&back));
    }
}

#[test]
fn metrics_agree_with_brute_force() {
    assert_eq!(common::metric_disagreements(2024, 1000), 0);
}
