use super::*;
use crate::encoders::TokenSequence;
use crate::numcore::{grad_check, Tensor, DEFAULT_EPS};
use crate::params::collect_params;
use crate::promptflow::{FlowConfig, PromptFlow};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ── Oracles: cosine softmax and the literal consistency formula ─────────────

fn o_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn o_softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn o_predict(v: &[f64], classes: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let scores: Vec<f64> = classes.iter().map(|c| o_cos(v, c)).collect();
    o_softmax(&scores, tau)
}

fn o_consistency(v: &[f64], v_p: &[f64], w: &[f64], w_p: &[f64]) -> f64 {
    let sum_v: Vec<f64> = v.iter().zip(v_p).map(|(a, b)| a + b).collect();
    let sum_w: Vec<f64> = w.iter().zip(w_p).map(|(a, b)| a + b).collect();
    2.0 - o_cos(&sum_v, v_p) - o_cos(&sum_w, w_p)
}

// ── predict ──────────────────────────────────────────────────────────────────

#[test]
fn identical_class_embeddings_give_the_uniform_distribution() {
    let row = vec![0.3, -0.7, 0.2];
    let classes = vec![row.clone(), row.clone(), row.clone()];
    let probs = predict(&[1.0, 0.5, -0.2], &classes, 0.01).unwrap();
    for p in &probs {
        assert!((p - 1.0 / 3.0).abs() <= 1e-15, "{p}");
    }
}

#[test]
fn matching_class_wins_decisively_at_low_temperature() {
    let classes = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let probs = predict(&[1.0, 0.0, 0.0], &classes, 0.01).unwrap();
    assert!(probs[0] > 0.999, "{}", probs[0]);
}

#[test]
fn predict_matches_the_composed_oracle() {
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
        let d = rng.gen_range(2..=8);
        let n = rng.gen_range(2..=6);
        let tau = [0.01, 0.5, 2.0][trial as usize % 3];
        let v = rand_vec(d, &mut rng);
        let classes: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(d, &mut rng)).collect();

        let probs = predict(&v, &classes, tau).unwrap();
        let expected = o_predict(&v, &classes, tau);
        for (a, b) in probs.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9, "trial {trial}: {a} vs {b}");
        }
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "trial {trial}: sum {sum}");
    }
}

#[test]
fn prediction_ignores_positive_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(430);
    let v = rand_vec(5, &mut rng);
    let classes: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(5, &mut rng)).collect();
    let base = predict(&v, &classes, 0.2).unwrap();

    let scaled_v: Vec<f64> = v.iter().map(|x| 2.1 * x).collect();
    let mut scaled_classes = classes.clone();
    scaled_classes[2].iter_mut().for_each(|x| *x *= 3.7);
    let scaled = predict(&scaled_v, &scaled_classes, 0.2).unwrap();

    for (a, b) in base.iter().zip(&scaled) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn degenerate_embeddings_and_bad_temperatures_are_rejected() {
    let classes = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let err = predict(&[0.0, 0.0], &classes, 0.01).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
    let err = predict(&[1.0, 0.0], &[vec![0.0, 0.0]], 0.01).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
    for tau in [0.0, -1.0] {
        let err = predict(&[1.0, 0.0], &classes, tau).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
    let err = predict(&[1.0, 0.0], &[], 0.01).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

// ── ce_loss ──────────────────────────────────────────────────────────────────

#[test]
fn certain_prediction_has_zero_loss() {
    let (loss, clamped) = ce_loss(&[1.0, 0.0, 0.0], 0).unwrap();
    assert_eq!(loss, 0.0);
    assert!(!clamped);
}

#[test]
fn uniform_prediction_costs_log_n() {
    let (loss, clamped) = ce_loss(&[0.25; 4], 2).unwrap();
    assert!((loss - 4.0f64.ln()).abs() <= 1e-12, "{loss}");
    assert!(!clamped);
}

#[test]
fn random_simplex_points_match_the_log_oracle() {
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(440 + trial);
        let n = rng.gen_range(2..=7);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let label = rng.gen_range(0..n);
        let (loss, clamped) = ce_loss(&probs, label).unwrap();
        assert!((loss - (-probs[label].ln())).abs() <= 1e-15);
        assert!(!clamped);
    }
}

#[test]
fn zero_probability_clamps_with_a_flag() {
    let (loss, clamped) = ce_loss(&[0.0, 1.0], 0).unwrap();
    assert_eq!(loss, -CE_FLOOR.ln());
    assert!(clamped);
    let err = ce_loss(&[0.5, 0.5], 2).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn graph_cross_entropy_agrees_and_clamps() {
    let mut g = Graph::new();
    let probs = g.leaf_from(&[3], vec![0.2, 0.8, 0.0], false).unwrap();
    let (node, clamped) = cross_entropy(&mut g, probs, 1).unwrap();
    assert!(!clamped);
    assert!((g.item(node).unwrap() - (-0.8f64.ln())).abs() <= 1e-15);
    let (node, clamped) = cross_entropy(&mut g, probs, 2).unwrap();
    assert!(clamped);
    assert_eq!(g.item(node).unwrap(), -CE_FLOOR.ln());
}

// ── consistency ──────────────────────────────────────────────────────────────

#[test]
fn collapsed_teachers_make_consistency_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(450);
    let v_p = rand_vec(5, &mut rng);
    let w_p = rand_vec(5, &mut rng);
    let loss = consistency_loss(&[0.0; 5], &v_p, &[0.0; 5], &w_p).unwrap();
    assert!(loss.abs() <= 1e-12, "{loss}");
}

#[test]
fn anti_parallel_teachers_maximize_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(451);
    let v_p = rand_vec(4, &mut rng);
    let w_p = rand_vec(4, &mut rng);
    let v: Vec<f64> = v_p.iter().map(|x| -2.0 * x).collect();
    let w: Vec<f64> = w_p.iter().map(|x| -2.0 * x).collect();
    let loss = consistency_loss(&v, &v_p, &w, &w_p).unwrap();
    assert!((loss - 4.0).abs() <= 1e-12, "{loss}");
}

#[test]
fn consistency_matches_the_dot_product_oracle() {
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(460 + trial);
        let d = rng.gen_range(2..=8);
        let (v, v_p) = (rand_vec(d, &mut rng), rand_vec(d, &mut rng));
        let (w, w_p) = (rand_vec(d, &mut rng), rand_vec(d, &mut rng));
        let loss = consistency_loss(&v, &v_p, &w, &w_p).unwrap();
        let expected = o_consistency(&v, &v_p, &w, &w_p);
        assert!((loss - expected).abs() <= 1e-9, "trial {trial}: {loss} vs {expected}");
    }
}

#[test]
fn degenerate_consistency_sums_are_rejected() {
    let v_p = vec![0.4, -0.3];
    let err = consistency_loss(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 0.0], &v_p).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
    let v: Vec<f64> = v_p.iter().map(|x| -x).collect();
    let err = consistency_loss(&v, &v_p, &[1.0, 0.0], &v_p).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
}

#[test]
fn l1_and_mse_variants_match_their_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(470);
    let d = 6;
    let (v, v_p) = (rand_vec(d, &mut rng), rand_vec(d, &mut rng));
    let (w, w_p) = (rand_vec(d, &mut rng), rand_vec(d, &mut rng));

    let l1 = consistency_loss_with(ConsistencyCriterion::L1, &v, &v_p, &w, &w_p).unwrap();
    let expect_l1 = v.iter().zip(&v_p).map(|(a, b)| (a - b).abs()).sum::<f64>() / d as f64
        + w.iter().zip(&w_p).map(|(a, b)| (a - b).abs()).sum::<f64>() / d as f64;
    assert!((l1 - expect_l1).abs() <= 1e-12, "{l1} vs {expect_l1}");

    let mse = consistency_loss_with(ConsistencyCriterion::Mse, &v, &v_p, &w, &w_p).unwrap();
    let expect_mse = v.iter().zip(&v_p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64
        + w.iter().zip(&w_p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64;
    assert!((mse - expect_mse).abs() <= 1e-12, "{mse} vs {expect_mse}");
}

proptest! {
    #[test]
    fn cosine_consistency_stays_in_range(
        d in 2usize..6,
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rand_vec(d, &mut rng);
        let v_p = rand_vec(d, &mut rng);
        let w = rand_vec(d, &mut rng);
        let w_p = rand_vec(d, &mut rng);
        if let Ok(loss) = consistency_loss(&v, &v_p, &w, &w_p) {
            prop_assert!(loss >= -1e-12 && loss <= 4.0 + 1e-12, "{}", loss);
        }
    }
}

// ── total_loss ───────────────────────────────────────────────────────────────

#[test]
fn lambda_zero_reduces_to_cross_entropy() {
    let b = total_loss(0.731, 2.5, 0.0);
    assert_eq!(b.total, b.ce);
}

#[test]
fn the_textbook_arithmetic_example_holds() {
    let b = total_loss(1.0, 0.25, 12.0);
    assert_eq!(b.total, 4.0);
    assert!((b.total - (b.ce + b.lambda * b.cons)).abs() <= 1e-12);
}

#[test]
fn scaling_cons_against_lambda_is_invariant() {
    let base = total_loss(0.4, 1.7, 12.0);
    let pow2 = total_loss(0.4, 1.7 * 4.0, 12.0 / 4.0);
    assert_eq!(base.total, pow2.total);
    let odd = total_loss(0.4, 1.7 * 3.0, 12.0 / 3.0);
    assert!((base.total - odd.total).abs() <= 1e-12);
}

#[test]
fn total_is_linear_in_lambda() {
    let cons = 0.83;
    let a = total_loss(1.1, cons, 3.0);
    let b = total_loss(1.1, cons, 7.0);
    assert!(((b.total - a.total) - 4.0 * cons).abs() <= 1e-12);
}

// ── class table ──────────────────────────────────────────────────────────────

#[test]
fn class_table_validates_rows() {
    let err = ClassEmbeddingTable::new(vec![], vec![]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let err =
        ClassEmbeddingTable::new(vec![vec![1.0]], vec![vec![1.0], vec![2.0]]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let err = ClassEmbeddingTable::new(
        vec![vec![1.0, 0.0], vec![1.0]],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    )
    .unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
    let err = ClassEmbeddingTable::new(
        vec![vec![1.0, f64::NAN]],
        vec![vec![1.0, 0.0]],
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn table_prediction_uses_the_requested_rows() {
    let table = ClassEmbeddingTable::new(
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        vec![vec![0.0, 1.0], vec![1.0, 0.0]],
    )
    .unwrap();
    let v = [1.0, 0.1];
    let frozen = table.predict_frozen(&v, 0.1).unwrap();
    let prompted = table.predict_prompted(&v, 0.1).unwrap();
    assert!(frozen[0] > frozen[1]);
    assert!(prompted[1] > prompted[0]);
}

// ── teacher embeddings ───────────────────────────────────────────────────────

fn teacher_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 1,
        d_t: 4,
        d_v: 6,
        d_joint: 3,
        vocab_size: 40,
        max_text_len: 8,
        image_size: 4,
        patch_size: 2,
        prompt_len: 2,
        channels: 2,
    }
}

fn encode_caption(tower: &TextTower, cfg: &EncoderConfig, vocab: &Vocab, text: &str) -> Vec<f64> {
    let tokens = tokenize(text, vocab, cfg.max_text_len).unwrap();
    let mut g = Graph::new();
    let bound = tower.bind(cfg, &mut |_, t| g.leaf(t));
    let feat = bound.encode(&mut g, &tokens, None).unwrap();
    g.value(feat).to_vec()
}

#[test]
fn single_template_teacher_is_the_normalized_encoding() {
    let cfg = teacher_config();
    let vocab = Vocab::builtin();
    let tower = TextTower::init(&cfg, &mut ChaCha8Rng::seed_from_u64(480));
    let rows = teacher_text_embeddings(
        &tower,
        &cfg,
        &vocab,
        &["red square".to_string()],
        &["this is a {}".to_string()],
    )
    .unwrap();

    let mut expected = encode_caption(&tower, &cfg, &vocab, "this is a red square");
    l2_normalize(&mut expected).unwrap();
    assert_eq!(rows, vec![expected]);
    let n: f64 = rows[0].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() <= 1e-12);
}

#[test]
fn duplicate_templates_match_the_single_template() {
    let cfg = teacher_config();
    let vocab = Vocab::builtin();
    let tower = TextTower::init(&cfg, &mut ChaCha8Rng::seed_from_u64(481));
    let single = teacher_text_embeddings(
        &tower,
        &cfg,
        &vocab,
        &["blue circle".to_string()],
        &["a photo of a {}".to_string()],
    )
    .unwrap();
    let doubled = teacher_text_embeddings(
        &tower,
        &cfg,
        &vocab,
        &["blue circle".to_string()],
        &["a photo of a {}".to_string(), "a photo of a {}".to_string()],
    )
    .unwrap();
    assert_eq!(single, doubled);
}

#[test]
fn three_template_mean_matches_the_arithmetic_oracle() {
    let cfg = teacher_config();
    let vocab = Vocab::builtin();
    let tower = TextTower::init(&cfg, &mut ChaCha8Rng::seed_from_u64(482));
    let templates = vec![
        "a photo of a {}".to_string(),
        "a drawing of a {}".to_string(),
        "a small {}".to_string(),
    ];
    let names = vec!["green triangle".to_string(), "gray ring".to_string()];
    let rows = teacher_text_embeddings(&tower, &cfg, &vocab, &names, &templates).unwrap();

    for (name, row) in names.iter().zip(&rows) {
        let mut mean = vec![0.0; cfg.d_joint];
        for t in &templates {
            let caption = instantiate(t, name).unwrap();
            let e = encode_caption(&tower, &cfg, &vocab, &caption);
            for (m, v) in mean.iter_mut().zip(&e) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= 3.0);
        l2_normalize(&mut mean).unwrap();
        for (a, b) in row.iter().zip(&mean) {
            assert!((a - b).abs() <= 1e-12, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn teacher_image_embedding_is_frozen_and_deterministic() {
    let cfg = teacher_config();
    let mut rng = ChaCha8Rng::seed_from_u64(483);
    let tower = VisionTower::init(&cfg, &mut rng);
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    let image = Image::new(
        cfg.image_size,
        cfg.channels,
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();

    let a = teacher_image_embedding(&tower, &cfg, &image).unwrap();
    let b = teacher_image_embedding(&tower, &cfg, &image).unwrap();
    assert_eq!(a, b);

    let mut g = Graph::new();
    let bound = tower.bind(&cfg, &mut |_, t| g.leaf(t));
    let patches = bound.embed_patches(&mut g, &image).unwrap();
    let feat = bound.encode(&mut g, patches, None).unwrap();
    assert_eq!(a, g.value(feat));

    let mut flow =
        PromptFlow::init(&cfg, FlowConfig::default(), 1, 0).unwrap();
    flow.visit_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v += 1.0));
    let c = teacher_image_embedding(&tower, &cfg, &image).unwrap();
    assert_eq!(a, c);
}

// ── templates ────────────────────────────────────────────────────────────────

#[test]
fn template_parsing_validates_the_slot() {
    let parsed = parse_templates("a photo of a {}\n\n  this is a {}  \n").unwrap();
    assert_eq!(parsed, vec!["a photo of a {}", "this is a {}"]);
    let err = parse_templates("no slot here\n").unwrap_err();
    assert!(matches!(err, Error::Template(_)), "{err}");
    let err = parse_templates("{} and {}\n").unwrap_err();
    assert!(matches!(err, Error::Template(_)), "{err}");
    let err = parse_templates("\n\n").unwrap_err();
    assert!(matches!(err, Error::Template(_)), "{err}");
    assert_eq!(
        instantiate("a photo of a {}", "red square").unwrap(),
        "a photo of a red square"
    );
    assert!(instantiate("nope", "x").is_err());
}

#[test]
fn builtin_templates_fit_the_desk_text_length() {
    let cfg = EncoderConfig::desk();
    let vocab = Vocab::builtin();
    let templates = builtin_templates();
    assert_eq!(templates.len(), 6);
    for t in &templates {
        let caption = instantiate(t, "magenta diamond").unwrap();
        tokenize(&caption, &vocab, cfg.max_text_len)
            .unwrap_or_else(|e| panic!("{t:?} -> {caption:?}: {e}"));
    }
}

// ── full objective ───────────────────────────────────────────────────────────

#[test]
fn full_objective_passes_a_gradient_check() {
    let cfg = teacher_config();
    let mut rng = ChaCha8Rng::seed_from_u64(490);
    let mut text = TextTower::init(&cfg, &mut rng);
    let mut vision = VisionTower::init(&cfg, &mut rng);
    text.freeze();
    vision.freeze();
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    let image = Image::new(
        cfg.image_size,
        cfg.channels,
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let captions = [
        TokenSequence { ids: vec![2, 12, 1, 0, 0, 0, 0, 0], eos_position: 2 },
        TokenSequence { ids: vec![4, 13, 1, 0, 0, 0, 0, 0], eos_position: 2 },
    ];
    let label = 0usize;
    let teacher_v: Vec<f64> = rand_vec(cfg.d_joint, &mut rng);
    let teacher_w: Vec<f64> = rand_vec(cfg.d_joint, &mut rng);

    let flow = PromptFlow::init(&cfg, FlowConfig::default(), 1, 17).unwrap();
    let inputs: Vec<Tensor> = collect_params(|alloc| {
        flow.bind(alloc).unwrap();
    })
    .into_iter()
    .map(|(_, t)| t)
    .collect();
    let n_params = inputs.len();

    for tau in [0.5, DEFAULT_TAU] {
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let mut i = 0usize;
            let bound = flow
                .bind(&mut |_n, _t| {
                    let id = ids[i];
                    i += 1;
                    id
                })
                .unwrap();
            assert_eq!(i, n_params);
            let eff = bound.materialize(g)?;
            let bt = text.bind(&cfg, &mut |_, t| g.leaf(t));
            let bv = vision.bind(&cfg, &mut |_, t| g.leaf(t));

            let patches = bv.embed_patches(g, &image)?;
            let v_p = bv.encode(g, patches, Some(&eff.visual))?;
            let w_p: Vec<NodeId> = captions
                .iter()
                .map(|c| bt.encode(g, c, Some(&eff.text)))
                .collect::<Result<_>>()?;

            let probs = class_probabilities(g, v_p, &w_p, tau)?;
            let (ce, _) = cross_entropy(g, probs, label)?;
            let v_const = g.leaf_from(&[1, cfg.d_joint], teacher_v.clone(), false)?;
            let w_const = g.leaf_from(&[1, cfg.d_joint], teacher_w.clone(), false)?;
            let cons = consistency(
                g,
                ConsistencyCriterion::Cosine,
                v_const,
                v_p,
                w_const,
                w_p[label],
            )?;
            let weighted = g.scale(cons, DEFAULT_LAMBDA);
            g.add(ce, weighted)
        };
        let err = grad_check(build, &inputs, DEFAULT_EPS).unwrap();
        assert!(err < 1e-4, "tau {tau}: gradient disagreement {err}");
    }
}
