use super::*;
use crate::blockfile::{assign_blocks, read_blocks, write_blocks};
use crate::numcore::{grad_check, DEFAULT_EPS};
use crate::params::{collect_params, Registry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 1,
        d_t: 4,
        d_v: 6,
        d_joint: 3,
        vocab_size: 6,
        max_text_len: 4,
        image_size: 4,
        patch_size: 2,
        prompt_len: 2,
        channels: 2,
    }
}

fn rand_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn rows_to_node(g: &mut Graph, rows: &[Vec<f64>]) -> NodeId {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    g.leaf_from(&[rows.len(), rows[0].len()], flat, false).unwrap()
}

// ── Oracles: plain-loop mirrors of compression and mapping ──────────────────

fn o_matvec(row: &[f64], w: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    (0..dout)
        .map(|j| (0..din).map(|k| row[k] * w.data[k * dout + j]).sum())
        .collect()
}

fn o_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn o_attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    let weights = o_softmax(&scores);
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

fn o_compress(lkp: &Lkp, prompts: &[Vec<f64>], proxy_init: &[f64]) -> Vec<f64> {
    let q = o_matvec(proxy_init, &lkp.wq);
    let keys: Vec<Vec<f64>> = prompts.iter().map(|p| o_matvec(p, &lkp.wk)).collect();
    let values: Vec<Vec<f64>> = prompts.iter().map(|p| o_matvec(p, &lkp.wv)).collect();
    o_matvec(&o_attend(&q, &keys, &values), &lkp.wo)
}

fn o_ln(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + crate::numcore::LN_EPS).sqrt();
    row.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

fn o_gelu(row: &[f64]) -> Vec<f64> {
    row.iter()
        .map(|&v| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
        .collect()
}

fn o_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Single-head mapper: Q' = Q + Attn(LN(Q), LN(K), LN(V)), P = Q' + FFN(LN(Q')).
fn o_mapper(mp: &Mapper, queries: &[Vec<f64>], proxies: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let kv: Vec<Vec<f64>> = proxies
        .iter()
        .map(|p| o_ln(p, &mp.ln_kv_gain.data, &mp.ln_kv_bias.data))
        .collect();
    let keys: Vec<Vec<f64>> = kv.iter().map(|r| o_matvec(r, &mp.wk)).collect();
    let values: Vec<Vec<f64>> = kv.iter().map(|r| o_matvec(r, &mp.wv)).collect();
    queries
        .iter()
        .map(|raw| {
            let q = o_matvec(&o_ln(raw, &mp.ln_q_gain.data, &mp.ln_q_bias.data), &mp.wq);
            let att = o_matvec(&o_attend(&q, &keys, &values), &mp.wo);
            let x = o_add(raw, &att);
            let f = o_ln(&x, &mp.ln_f_gain.data, &mp.ln_f_bias.data);
            let mut h = o_matvec(&f, &mp.w1);
            for (v, b) in h.iter_mut().zip(&mp.b1.data) {
                *v += b;
            }
            let mut h = o_matvec(&o_gelu(&h), &mp.w2);
            for (v, b) in h.iter_mut().zip(&mp.b2.data) {
                *v += b;
            }
            o_add(&x, &h)
        })
        .collect()
}

// ── Stack initialization ─────────────────────────────────────────────────────

#[test]
fn stack_shapes_follow_the_boundary() {
    let cfg = EncoderConfig::desk();
    let stack = init_prompt_stack(&cfg, Mechanism::BidirTIThenIT, 4, 0).unwrap();
    assert_eq!(stack.layers(), 8);
    for l in 0..8 {
        assert_eq!(stack.text_prompts[l].shape, vec![4, cfg.d_t]);
        assert_eq!(stack.visual_prompts[l].shape, vec![4, cfg.d_v]);
        let width = if l < 4 { cfg.d_t } else { cfg.d_v };
        assert_eq!(stack.proxy_inits[l].shape, vec![1, width], "layer {l}");
    }
}

#[test]
fn mirrored_mechanism_mirrors_proxy_widths() {
    let cfg = EncoderConfig::desk();
    let stack = init_prompt_stack(&cfg, Mechanism::BidirITThenTI, 4, 0).unwrap();
    for l in 0..8 {
        let width = if l < 4 { cfg.d_v } else { cfg.d_t };
        assert_eq!(stack.proxy_inits[l].shape, vec![1, width], "layer {l}");
    }
}

#[test]
fn unidirectional_boundaries_pin_proxy_widths() {
    let cfg = EncoderConfig::desk();
    let ti = init_prompt_stack(&cfg, Mechanism::UnidirTI, 8, 0).unwrap();
    assert!(ti.proxy_inits.iter().all(|p| p.shape == [1, cfg.d_t]));
    let it = init_prompt_stack(&cfg, Mechanism::UnidirIT, 0, 0).unwrap();
    assert!(it.proxy_inits.iter().all(|p| p.shape == [1, cfg.d_v]));
}

#[test]
fn same_seed_reproduces_the_stack_bit_for_bit() {
    let cfg = tiny_config();
    let a = init_prompt_stack(&cfg, Mechanism::BidirTIThenIT, 1, 9).unwrap();
    let b = init_prompt_stack(&cfg, Mechanism::BidirTIThenIT, 1, 9).unwrap();
    assert_eq!(a.text_prompts, b.text_prompts);
    assert_eq!(a.visual_prompts, b.visual_prompts);
    assert_eq!(a.proxy_inits, b.proxy_inits);
    let c = init_prompt_stack(&cfg, Mechanism::BidirTIThenIT, 1, 10).unwrap();
    assert_ne!(a.text_prompts[0], c.text_prompts[0]);
}

#[test]
fn invalid_boundaries_are_config_errors() {
    let cfg = tiny_config();
    for (mech, k) in [
        (Mechanism::BidirTIThenIT, 0),
        (Mechanism::BidirTIThenIT, 2),
        (Mechanism::BidirITThenTI, 0),
        (Mechanism::UnidirTI, 1),
        (Mechanism::UnidirIT, 1),
    ] {
        let err = init_prompt_stack(&cfg, mech, k, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{mech:?} k={k}: {err}");
    }
}

// ── Compression ──────────────────────────────────────────────────────────────

#[test]
fn lkp_matches_the_attention_oracle() {
    for trial in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let m = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=5);
        let lkp = Lkp::init(d, &mut rng);
        let prompts = rand_rows(m, d, &mut rng);
        let proxy_init = rand_rows(1, d, &mut rng);

        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            lkp.bind("lkp", &mut alloc)
        };
        let p = rows_to_node(&mut g, &prompts);
        let q0 = rows_to_node(&mut g, &proxy_init);
        let proxy = compress_layer(&mut g, &bound, p, q0).unwrap();

        assert_eq!(g.shape_of(proxy), &[1, d]);
        let expected = o_compress(&lkp, &prompts, &proxy_init[0]);
        for (a, b) in g.value(proxy).iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn identity_projections_pass_a_single_prompt_through() {
    let d = 5;
    let eye = |_: ()| {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    };
    let lkp = Lkp {
        wq: eye(()),
        wk: eye(()),
        wv: eye(()),
        wo: eye(()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(130);
    let prompt = rand_rows(1, d, &mut rng);
    let proxy_init = rand_rows(1, d, &mut rng);

    let mut g = Graph::new();
    let bound = {
        let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
        lkp.bind("lkp", &mut alloc)
    };
    let p = rows_to_node(&mut g, &prompt);
    let q0 = rows_to_node(&mut g, &proxy_init);
    let proxy = compress_layer(&mut g, &bound, p, q0).unwrap();
    assert_eq!(g.value(proxy), prompt[0].as_slice());
}

#[test]
fn average_compression_is_the_row_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(131);
    let prompts = rand_rows(4, 3, &mut rng);
    let mut g = Graph::new();
    let p = rows_to_node(&mut g, &prompts);
    let proxy = compress_average(&mut g, p).unwrap();
    for j in 0..3 {
        let mean = prompts.iter().map(|r| r[j]).sum::<f64>() / 4.0;
        assert!((g.value(proxy)[j] - mean).abs() <= 1e-12);
    }
}

#[test]
fn mlp_compression_matches_a_plain_loop() {
    let (m, d) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(132);
    let mlp = MlpCompressor::init(m, d, &mut rng);
    assert_eq!(mlp.w1.shape, vec![m * d, m * d / 2]);
    let prompts = rand_rows(m, d, &mut rng);

    let mut g = Graph::new();
    let bound = {
        let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
        mlp.bind("mlp", &mut alloc)
    };
    let p = rows_to_node(&mut g, &prompts);
    let proxy = compress_mlp(&mut g, &bound, p).unwrap();

    let flat: Vec<f64> = prompts.iter().flatten().copied().collect();
    let mut h = o_matvec(&flat, &mlp.w1);
    for (v, b) in h.iter_mut().zip(&mlp.b1.data) {
        *v += b;
    }
    let mut out = o_matvec(&o_gelu(&h), &mlp.w2);
    for (v, b) in out.iter_mut().zip(&mlp.b2.data) {
        *v += b;
    }
    for (a, b) in g.value(proxy).iter().zip(&out) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

// ── Mapping ──────────────────────────────────────────────────────────────────

#[test]
fn mapper_matches_the_formula_oracle() {
    for trial in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let s = rng.gen_range(1..=3);
        let m = rng.gen_range(1..=3);
        let d_src = rng.gen_range(2..=4);
        let d_tgt = rng.gen_range(2..=4);
        let mapper = Mapper::init(d_src, d_tgt, &mut rng);
        let targets: Vec<Vec<Vec<f64>>> = (0..s).map(|_| rand_rows(m, d_tgt, &mut rng)).collect();
        let proxies: Vec<Vec<Vec<f64>>> = (0..s).map(|_| rand_rows(1, d_src, &mut rng)).collect();

        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            mapper.bind("mapper", 1, &mut alloc)
        };
        let t_ids: Vec<NodeId> = targets.iter().map(|t| rows_to_node(&mut g, t)).collect();
        let p_ids: Vec<NodeId> = proxies.iter().map(|p| rows_to_node(&mut g, p)).collect();
        let refined = map_prompts(&mut g, &bound, &t_ids, &p_ids, MapperScale::Multi).unwrap();

        let all_queries: Vec<Vec<f64>> = targets.iter().flatten().cloned().collect();
        let all_proxies: Vec<Vec<f64>> = proxies.iter().map(|p| p[0].clone()).collect();
        let expected = o_mapper(&mapper, &all_queries, &all_proxies);
        for (l, &node) in refined.iter().enumerate() {
            assert_eq!(g.shape_of(node), &[m, d_tgt]);
            for (i, row) in expected[l * m..(l + 1) * m].iter().enumerate() {
                for (j, want) in row.iter().enumerate() {
                    let got = g.value(node)[i * d_tgt + j];
                    assert!(
                        (got - want).abs() <= 1e-9,
                        "trial {trial} layer {l} ({i},{j}): {got} vs {want}"
                    );
                }
            }
        }
    }
}

#[test]
fn single_scale_pairs_each_layer_with_its_own_proxy() {
    let mut rng = ChaCha8Rng::seed_from_u64(230);
    let (d_src, d_tgt, m) = (3, 4, 2);
    let mapper = Mapper::init(d_src, d_tgt, &mut rng);
    let targets: Vec<Vec<Vec<f64>>> = (0..2).map(|_| rand_rows(m, d_tgt, &mut rng)).collect();
    let proxies: Vec<Vec<Vec<f64>>> = (0..2).map(|_| rand_rows(1, d_src, &mut rng)).collect();

    let mut g = Graph::new();
    let bound = {
        let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
        mapper.bind("mapper", 1, &mut alloc)
    };
    let t_ids: Vec<NodeId> = targets.iter().map(|t| rows_to_node(&mut g, t)).collect();
    let p_ids: Vec<NodeId> = proxies.iter().map(|p| rows_to_node(&mut g, p)).collect();
    let refined = map_prompts(&mut g, &bound, &t_ids, &p_ids, MapperScale::Single).unwrap();

    for l in 0..2 {
        let expected = o_mapper(&mapper, &targets[l], &[proxies[l][0].clone()]);
        for (i, row) in expected.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                let got = g.value(refined[l])[i * d_tgt + j];
                assert!((got - want).abs() <= 1e-9, "layer {l}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn zero_residual_branches_make_mapping_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(231);
    let mut mapper = Mapper::init(3, 4, &mut rng);
    mapper.zero_residual_branches();
    let targets: Vec<Vec<Vec<f64>>> = (0..2).map(|_| rand_rows(2, 4, &mut rng)).collect();
    let proxies: Vec<Vec<Vec<f64>>> = (0..2).map(|_| rand_rows(1, 3, &mut rng)).collect();

    for scale in [MapperScale::Multi, MapperScale::Single] {
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            mapper.bind("mapper", 1, &mut alloc)
        };
        let t_ids: Vec<NodeId> = targets.iter().map(|t| rows_to_node(&mut g, t)).collect();
        let p_ids: Vec<NodeId> = proxies.iter().map(|p| rows_to_node(&mut g, p)).collect();
        let refined = map_prompts(&mut g, &bound, &t_ids, &p_ids, scale).unwrap();
        for (l, &node) in refined.iter().enumerate() {
            let raw: Vec<u64> = targets[l].iter().flatten().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = g.value(node).iter().map(|v| v.to_bits()).collect();
            assert_eq!(raw, got, "{scale:?} layer {l}");
        }
    }
}

#[test]
fn proxy_order_does_not_change_multi_scale_mapping() {
    let mut rng = ChaCha8Rng::seed_from_u64(232);
    let mapper = Mapper::init(3, 4, &mut rng);
    let targets = vec![rand_rows(2, 4, &mut rng), rand_rows(2, 4, &mut rng)];
    let proxies = vec![
        rand_rows(1, 3, &mut rng),
        rand_rows(1, 3, &mut rng),
        rand_rows(1, 3, &mut rng),
    ];

    let run = |order: &[usize]| -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            mapper.bind("mapper", 1, &mut alloc)
        };
        let t_ids: Vec<NodeId> = targets.iter().map(|t| rows_to_node(&mut g, t)).collect();
        let p_ids: Vec<NodeId> = order
            .iter()
            .map(|&i| rows_to_node(&mut g, &proxies[i]))
            .collect();
        let refined = map_prompts(&mut g, &bound, &t_ids[..2], &p_ids[..2], MapperScale::Multi);
        refined
            .unwrap()
            .iter()
            .map(|&n| g.value(n).to_vec())
            .collect()
    };

    let forward = run(&[0, 1]);
    let swapped = run(&[1, 0]);
    for (a, b) in forward.iter().flatten().zip(swapped.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn single_and_multi_scale_disagree_with_distinct_proxies() {
    let mut rng = ChaCha8Rng::seed_from_u64(233);
    let mapper = Mapper::init(3, 4, &mut rng);
    let targets = vec![rand_rows(2, 4, &mut rng), rand_rows(2, 4, &mut rng)];
    let proxies = vec![rand_rows(1, 3, &mut rng), rand_rows(1, 3, &mut rng)];

    let run = |scale: MapperScale| -> Vec<f64> {
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            mapper.bind("mapper", 1, &mut alloc)
        };
        let t_ids: Vec<NodeId> = targets.iter().map(|t| rows_to_node(&mut g, t)).collect();
        let p_ids: Vec<NodeId> = proxies.iter().map(|p| rows_to_node(&mut g, p)).collect();
        map_prompts(&mut g, &bound, &t_ids, &p_ids, scale)
            .unwrap()
            .iter()
            .flat_map(|&n| g.value(n).to_vec())
            .collect()
    };

    let single = run(MapperScale::Single);
    let multi = run(MapperScale::Multi);
    let max_gap = single
        .iter()
        .zip(&multi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_gap > 1e-6, "scales should differ, max gap {max_gap}");
}

#[test]
fn mapper_argument_mismatches_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(234);
    let mapper = Mapper::init(3, 4, &mut rng);
    let mut g = Graph::new();
    let bound = {
        let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
        mapper.bind("mapper", 1, &mut alloc)
    };
    let t = g.leaf_from(&[2, 4], vec![0.1; 8], false).unwrap();
    let p = g.leaf_from(&[1, 3], vec![0.1; 3], false).unwrap();

    let err = map_prompts(&mut g, &bound, &[], &[], MapperScale::Multi).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = map_prompts(&mut g, &bound, &[t, t], &[p], MapperScale::Multi).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

// ── Whole-flow materialization ───────────────────────────────────────────────

fn flow_config(mechanism: Mechanism, scale: MapperScale, compression: Compression) -> FlowConfig {
    FlowConfig {
        mechanism,
        mapper_scale: scale,
        compression,
        mapper_heads: 1,
    }
}

#[test]
fn bind_and_visit_mut_walk_the_same_names() {
    let cfg = tiny_config();
    let flow = flow_config(Mechanism::BidirTIThenIT, MapperScale::Multi, Compression::Lkp);
    let mut pf = PromptFlow::init(&cfg, flow, 1, 5).unwrap();

    let bound_names: Vec<String> = collect_params(|alloc| {
        pf.bind(alloc).unwrap();
    })
    .into_iter()
    .map(|(n, _)| n)
    .collect();

    let mut visit_names = Vec::new();
    pf.visit_mut(&mut |n, _| visit_names.push(n.to_string()));

    assert_eq!(bound_names, visit_names);
    assert!(bound_names.contains(&"prompts.text0".to_string()));
    assert!(bound_names.contains(&"prompts.proxy1".to_string()));
    assert!(bound_names.contains(&"first.lkp.wq".to_string()));
    assert!(bound_names.contains(&"second.mapper.ffn.w1".to_string()));
}

#[test]
fn each_mechanism_maps_the_right_sides() {
    let cfg = tiny_config();
    let cases = [
        (Mechanism::UnidirTI, 2, [true, true], [false, false]),
        (Mechanism::UnidirIT, 0, [false, false], [true, true]),
        (Mechanism::BidirTIThenIT, 1, [true, false], [false, true]),
        (Mechanism::BidirITThenTI, 1, [false, true], [true, false]),
    ];
    for (mechanism, k, text_raw, visual_raw) in cases {
        let flow = flow_config(mechanism, MapperScale::Multi, Compression::Lkp);
        let pf = PromptFlow::init(&cfg, flow, k, 6).unwrap();
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            pf.bind(&mut alloc).unwrap()
        };
        let eff = bound.materialize(&mut g).unwrap();
        for l in 0..2 {
            assert_eq!(
                eff.text[l] == bound.text_prompt(l),
                text_raw[l],
                "{mechanism:?} text layer {l}"
            );
            assert_eq!(
                eff.visual[l] == bound.visual_prompt(l),
                visual_raw[l],
                "{mechanism:?} visual layer {l}"
            );
            assert_eq!(g.shape_of(eff.text[l]), &[cfg.prompt_len, cfg.d_t]);
            assert_eq!(g.shape_of(eff.visual[l]), &[cfg.prompt_len, cfg.d_v]);
        }
    }
}

#[test]
fn unidirectional_flows_carry_one_parameter_segment() {
    let cfg = tiny_config();
    let flow = flow_config(Mechanism::UnidirTI, MapperScale::Multi, Compression::Lkp);
    let pf = PromptFlow::init(&cfg, flow, 2, 7).unwrap();
    assert!(pf.first.is_some());
    assert!(pf.second.is_none());

    let mut g = Graph::new();
    let bound = {
        let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
        pf.bind(&mut alloc).unwrap()
    };
    let proxies = bound.build_proxies(&mut g, Segment::First).unwrap();
    assert_eq!(proxies.proxies.len(), 2);
    assert_eq!(proxies.width, cfg.d_t);
    let err = bound.build_proxies(&mut g, Segment::Second).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("empty"), "{err}");
}

#[test]
fn flow_and_stack_mechanism_must_agree() {
    let cfg = tiny_config();
    let flow = flow_config(Mechanism::BidirTIThenIT, MapperScale::Multi, Compression::Lkp);
    let mut pf = PromptFlow::init(&cfg, flow, 1, 8).unwrap();
    pf.flow.mechanism = Mechanism::BidirITThenTI;
    let mut g = Graph::new();
    let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
    let err = pf.bind(&mut alloc).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("does not match"), "{err}");
}

#[test]
fn mapper_heads_must_divide_both_widths() {
    let cfg = tiny_config();
    let mut flow = flow_config(Mechanism::BidirTIThenIT, MapperScale::Multi, Compression::Lkp);
    flow.mapper_heads = 0;
    let err = PromptFlow::init(&cfg, flow, 1, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    flow.mapper_heads = 4;
    let err = PromptFlow::init(&cfg, flow, 1, 0).unwrap_err();
    assert!(err.to_string().contains("divide"), "{err}");
    flow.mapper_heads = 2;
    assert!(PromptFlow::init(&cfg, flow, 1, 0).is_ok());
}

#[test]
fn proxies_depend_only_on_their_own_layer() {
    let cfg = tiny_config();
    let flow = flow_config(Mechanism::UnidirTI, MapperScale::Multi, Compression::Lkp);
    let mut pf = PromptFlow::init(&cfg, flow, 2, 11).unwrap();

    let run = |pf: &PromptFlow| -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            pf.bind(&mut alloc).unwrap()
        };
        let set = bound.build_proxies(&mut g, Segment::First).unwrap();
        set.proxies.iter().map(|&p| g.value(p).to_vec()).collect()
    };

    let before = run(&pf);
    pf.stack.text_prompts[1].data.iter_mut().for_each(|v| *v += 0.25);
    let after = run(&pf);
    assert_eq!(before[0], after[0], "layer 1 proxy saw layer 2's edit");
    assert_ne!(before[1], after[1], "layer 2 proxy ignored its own edit");
}

#[test]
fn multi_scale_reaches_across_layers_and_single_scale_does_not() {
    let cfg = EncoderConfig {
        layers: 3,
        ..tiny_config()
    };
    for (scale, expect_cross) in [(MapperScale::Multi, true), (MapperScale::Single, false)] {
        let flow = flow_config(Mechanism::BidirTIThenIT, scale, Compression::Lkp);
        let pf = PromptFlow::init(&cfg, flow, 2, 12).unwrap();
        let mut g = Graph::new();
        let mut reg = Registry::default();
        let bound = pf.bind(&mut reg.record(&mut g)).unwrap();
        let eff = bound.materialize(&mut g).unwrap();
        let loss = g.sum(eff.visual[0]);
        g.backward(loss).unwrap();

        let cross_id = reg.ids[reg.names.iter().position(|n| n == "prompts.text1").unwrap()];
        let cross = g
            .grad(cross_id)
            .map_or(0.0, |gr| gr.iter().map(|v| v.abs()).sum::<f64>());
        let own_id = reg.ids[reg.names.iter().position(|n| n == "prompts.text0").unwrap()];
        let own = g
            .grad(own_id)
            .map_or(0.0, |gr| gr.iter().map(|v| v.abs()).sum::<f64>());

        assert!(own > 1e-8, "{scale:?}: same-layer path should be live");
        if expect_cross {
            assert!(cross > 1e-8, "multi-scale should reach layer 2's prompts");
        } else {
            assert!(cross == 0.0, "single-scale leaked across layers: {cross}");
        }
    }
}

#[test]
fn zeroed_unidirectional_flow_reproduces_the_raw_prompts() {
    let cfg = tiny_config();
    let flow = flow_config(Mechanism::UnidirTI, MapperScale::Multi, Compression::Lkp);
    let mut pf = PromptFlow::init(&cfg, flow, 2, 13).unwrap();
    pf.first.as_mut().unwrap().mapper.zero_residual_branches();

    let mut g = Graph::new();
    let bound = {
        let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
        pf.bind(&mut alloc).unwrap()
    };
    let eff = bound.materialize(&mut g).unwrap();
    for l in 0..2 {
        assert_eq!(eff.text[l], bound.text_prompt(l));
        let raw: Vec<u64> = pf.stack.visual_prompts[l].data.iter().map(|v| v.to_bits()).collect();
        let got: Vec<u64> = g.value(eff.visual[l]).iter().map(|v| v.to_bits()).collect();
        assert_eq!(raw, got, "visual layer {l}");
    }
}

#[test]
fn materialization_is_deterministic_across_graphs() {
    let cfg = tiny_config();
    let flow = flow_config(Mechanism::BidirTIThenIT, MapperScale::Multi, Compression::Lkp);
    let pf = PromptFlow::init(&cfg, flow, 1, 14).unwrap();
    let run = || -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            pf.bind(&mut alloc).unwrap()
        };
        let eff = bound.materialize(&mut g).unwrap();
        eff.text
            .iter()
            .chain(&eff.visual)
            .map(|&n| g.value(n).to_vec())
            .collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn materialize_passes_a_gradient_check_in_each_variant() {
    let cfg = tiny_config();
    let variants = [
        (Mechanism::BidirTIThenIT, 1, MapperScale::Multi, Compression::Lkp),
        (Mechanism::BidirITThenTI, 1, MapperScale::Single, Compression::Mlp),
        (Mechanism::UnidirTI, 2, MapperScale::Multi, Compression::Average),
        (Mechanism::UnidirIT, 0, MapperScale::Single, Compression::Lkp),
    ];
    for (mechanism, k, scale, compression) in variants {
        let flow = flow_config(mechanism, scale, compression);
        let pf = PromptFlow::init(&cfg, flow, k, 15).unwrap();
        let inputs: Vec<Tensor> = collect_params(|alloc| {
            pf.bind(alloc).unwrap();
        })
        .into_iter()
        .map(|(_, t)| t)
        .collect();
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let mut i = 0usize;
            let bound = pf
                .bind(&mut |_n, _t| {
                    let id = ids[i];
                    i += 1;
                    id
                })
                .unwrap();
            let eff = bound.materialize(g)?;
            let sums: Vec<NodeId> = eff
                .text
                .iter()
                .chain(&eff.visual)
                .map(|&n| g.sum(n))
                .collect();
            g.add_n(&sums)
        };
        let err = grad_check(build, &inputs, DEFAULT_EPS).unwrap();
        assert!(err < 1e-4, "{mechanism:?}/{scale:?}/{compression:?}: {err}");
    }
}

#[test]
fn prompt_flow_state_survives_a_checkpoint_roundtrip() {
    let cfg = tiny_config();
    let flow = flow_config(Mechanism::BidirTIThenIT, MapperScale::Multi, Compression::Lkp);
    let pf = PromptFlow::init(&cfg, flow, 1, 16).unwrap();
    let mut restored = PromptFlow::init(&cfg, flow, 1, 99).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.bin");
    let blocks = collect_params(|alloc| {
        pf.bind(alloc).unwrap();
    });
    write_blocks(&path, &blocks).unwrap();
    assign_blocks(read_blocks(&path).unwrap(), |f| restored.visit_mut(f)).unwrap();

    let run = |pf: &PromptFlow| -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let bound = {
            let mut alloc = |_: &str, t: &Tensor| g.leaf(t);
            pf.bind(&mut alloc).unwrap()
        };
        let eff = bound.materialize(&mut g).unwrap();
        eff.text
            .iter()
            .chain(&eff.visual)
            .map(|&n| g.value(n).to_vec())
            .collect()
    };
    assert_eq!(run(&pf), run(&restored));
}
