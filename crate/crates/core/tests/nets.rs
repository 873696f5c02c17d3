use std::time::Instant;

use ahnet::nets::ahnet::{anisotropic_block, pyramid_pooling};
use ahnet::nets::builder::GraphBuilder;
use ahnet::nets::mcgcn::{gcn_module, refinement_block};
use ahnet::nets::{build_ahnet, build_mcgcn, LayerKind, ModelGraph, NetConfig, Part};
use ahnet::transfer::{auto_rules, transfer_encoder};
use ahnet::{Checkpoint, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn set_all(g: &mut ModelGraph, pred: impl Fn(&str) -> bool, value: f32) {
    let names: Vec<String> = g.params.iter().map(|(n, _)| n.clone()).filter(|n| pred(n)).collect();
    for n in names {
        let s = g.params.get(&n).unwrap().shape().to_vec();
        g.params.assign(&n, Tensor::full(&s, value)).unwrap();
    }
}

#[test]
fn desk_backbone_taps() {
    let g = build_mcgcn(&NetConfig::desk(), 0).unwrap();
    let sizes: Vec<usize> = (1..=4).map(|s| g.layers[g.taps[&format!("layer{s}")]].out_shape[2]).collect();
    assert_eq!(sizes, vec![16, 8, 4, 2]);
    assert_eq!(g.layers[g.taps["stem"]].out_shape[1], 8);
}

#[test]
fn paper_backbone_params_near_resnet50() {
    let g = build_mcgcn(&NetConfig::paper(), 0).unwrap();
    let n = g.part_param_count(Part::Encoder) as f64;
    assert!((n / 23_507_904.0 - 1.0).abs() < 0.05, "{n}");
}

#[test]
fn paper_mcgcn_counts() {
    let g = build_mcgcn(&NetConfig::paper(), 0).unwrap();
    let n = g.param_count() as f64;
    assert!((n / 23_576_758.0 - 1.0).abs() < 0.05, "{n}");
    assert!((g.conv_count() as i64 - 94).abs() <= 2, "{}", g.conv_count());
}

#[test]
fn paper_ahnet_params() {
    let (g, _) = build_ahnet(&NetConfig::paper(), 0, None).unwrap();
    let n = g.param_count() as f64;
    assert!((n / 27_085_500.0 - 1.0).abs() < 0.05, "{n}");
}

#[test]
fn desk_shapes() {
    let cfg = NetConfig::desk();
    let g2 = build_mcgcn(&cfg, 1).unwrap();
    let y = g2.infer(&rand_tensor(&[1, 3, 64, 64], 2)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 64, 64]);
    let (g3, _) = build_ahnet(&cfg, 1, None).unwrap();
    let y = g3.infer(&rand_tensor(&[1, 1, 64, 64, 8], 3)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 64, 64, 8]);
}

#[test]
fn zero_decoder_gives_zero_map() {
    let mut g = build_mcgcn(&NetConfig::desk(), 4).unwrap();
    set_all(&mut g, |n| n.starts_with("decoder."), 0.0);
    let y = g.infer(&rand_tensor(&[1, 3, 64, 64], 5)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn presets_share_topology() {
    let d2 = build_mcgcn(&NetConfig::desk(), 0).unwrap().skeleton();
    let p2 = build_mcgcn(&NetConfig::paper(), 0).unwrap().skeleton();
    assert_eq!(d2.outer, p2.outer);
    assert!(d2.block_templates.is_subset(&p2.block_templates));
    let d3 = build_ahnet(&NetConfig::desk(), 0, None).unwrap().0.skeleton();
    let p3 = build_ahnet(&NetConfig::paper(), 0, None).unwrap().0.skeleton();
    assert_eq!(d3.outer, p3.outer);
    assert!(d3.block_templates.is_subset(&p3.block_templates));
}

#[test]
fn forward_is_deterministic() {
    let g = build_mcgcn(&NetConfig::desk(), 6).unwrap();
    let x = rand_tensor(&[1, 3, 64, 64], 7);
    let a = g.infer(&x).unwrap();
    let b = g.infer(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(build_mcgcn(&NetConfig::desk(), 6).unwrap(), g);
}

#[test]
fn desk_mcgcn_forward_under_a_second() {
    let g = build_mcgcn(&NetConfig::desk(), 8).unwrap();
    let x = rand_tensor(&[1, 3, 64, 64], 9);
    g.infer(&x).unwrap();
    let t = Instant::now();
    g.infer(&x).unwrap();
    assert!(t.elapsed().as_secs_f64() < 1.0, "{:?}", t.elapsed());
}

#[test]
fn ahnet_encoder_bitwise_equals_checkpoint() {
    let cfg = NetConfig::desk();
    let g2 = build_mcgcn(&cfg, 10).unwrap();
    let (ck, _) = transfer_encoder(&Checkpoint::from_store(&g2.params), &auto_rules(&g2)).unwrap();
    let (g3, random) = build_ahnet(&cfg, 11, Some(&ck)).unwrap();
    for (name, t) in ck.tensors() {
        let got = g3.params.get(name).unwrap();
        assert_eq!(got.shape(), t.shape());
        assert!(got.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
        assert!(!random.contains(name));
    }
    assert!(random.iter().all(|n| n.starts_with("decoder.")));
}

#[test]
fn ahnet_rejects_mismatched_checkpoint() {
    let g2 = build_mcgcn(&NetConfig::desk(), 0).unwrap();
    let (ck, _) = transfer_encoder(&Checkpoint::from_store(&g2.params), &auto_rules(&g2)).unwrap();
    let mut cfg = NetConfig::desk();
    cfg.stem_width = 16;
    assert!(build_ahnet(&cfg, 0, Some(&ck)).is_err());
}

fn small_graph(shape: &[usize], f: impl FnOnce(&mut GraphBuilder, usize) -> usize) -> ModelGraph {
    let mut b = GraphBuilder::new(0);
    let x = b.input(shape).unwrap();
    let y = f(&mut b, x);
    b.finish(y)
}

#[test]
fn gcn_all_ones_doubles_one_branch() {
    let mut g = small_graph(&[1, 1, 5, 5], |b, x| gcn_module(b, "g", x, 3, 1).unwrap());
    set_all(&mut g, |n| n.ends_with(".weight"), 1.0);
    let y = g.infer(&Tensor::full(&[1, 1, 5, 5], 1.0)).unwrap();
    // One branch at (i, j): (row taps inside) × (column taps inside).
    let inside = |i: usize| if i == 0 || i == 4 { 2.0 } else { 3.0 };
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(y.at(&[0, 0, i, j]), 2.0 * inside(i) * inside(j));
        }
    }
}

#[test]
fn gcn_k1_is_two_pointwise_products() {
    let g = small_graph(&[1, 2, 4, 4], |b, x| gcn_module(b, "g", x, 1, 3).unwrap());
    let x = rand_tensor(&[1, 2, 4, 4], 1);
    let y = g.infer(&x).unwrap();
    assert_eq!(y.shape(), &[1, 3, 4, 4]);
    let w = |n: &str| g.params.get(n).unwrap().clone();
    let (l1, l2, r1, r2) = (w("g.left.conv1.weight"), w("g.left.conv2.weight"), w("g.right.conv1.weight"), w("g.right.conv2.weight"));
    for o in 0..3 {
        for p in 0..16 {
            let (i, j) = (p / 4, p % 4);
            let mut want = 0.0f64;
            for m in 0..3 {
                for c in 0..2 {
                    let xc = x.at(&[0, c, i, j]) as f64;
                    want += l2.at(&[o, m, 0, 0]) as f64 * l1.at(&[m, c, 0, 0]) as f64 * xc;
                    want += r2.at(&[o, m, 0, 0]) as f64 * r1.at(&[m, c, 0, 0]) as f64 * xc;
                }
            }
            assert!((y.at(&[0, o, i, j]) as f64 - want).abs() < 1e-5);
        }
    }
    let mut b = GraphBuilder::new(0);
    let x = b.input(&[1, 2, 4, 4]).unwrap();
    assert!(gcn_module(&mut b, "g", x, 4, 1).is_err());
}

#[test]
fn refinement_with_zero_weights_is_identity() {
    let mut g = small_graph(&[1, 4, 6, 6], |b, x| refinement_block(b, "r", x).unwrap());
    set_all(&mut g, |n| n.ends_with(".weight"), 0.0);
    let x = rand_tensor(&[1, 4, 6, 6], 2);
    assert_eq!(g.infer(&x).unwrap(), x);
}

#[test]
fn anisotropic_zero_z_branch_passes_xy() {
    let mut g = small_graph(&[1, 4, 6, 6, 5], |b, x| anisotropic_block(b, "a", x, 3, 4).unwrap());
    assert_eq!(g.layers[g.output].out_shape, vec![1, 4, 6, 6, 5]);
    set_all(&mut g, |n| n == "a.z.expand.conv.weight", 0.0);
    let x = rand_tensor(&[1, 4, 6, 6, 5], 3);
    let out = g.infer_layers(&x, &["a.xy.expand.relu", "a.relu"]).unwrap();
    assert_eq!(out["a.relu"], out["a.xy.expand.relu"]);
}

#[test]
fn anisotropic_interior_slices_match_for_depth_constant_input() {
    let g = small_graph(&[1, 2, 5, 5, 7], |b, x| anisotropic_block(b, "a", x, 3, 2).unwrap());
    let base = rand_tensor(&[1, 2, 5, 5, 1], 4);
    let x = Tensor::stack_depth(&vec![base.depth_slice(0).unwrap(); 7]).unwrap();
    let y = g.infer(&x).unwrap();
    // One 1×1×3 conv reaches one slice into the padding: slices 1..=5 are interior.
    let mid = y.depth_slice(1).unwrap();
    for k in 2..=5 {
        assert_eq!(y.depth_slice(k).unwrap(), mid);
    }
}

#[test]
fn pyramid_shapes() {
    let g = small_graph(&[1, 16, 64, 64, 8], |b, x| pyramid_pooling(b, "p", x, &[16, 8, 4, 2], 1).unwrap());
    assert_eq!(g.layer("p.concat").unwrap().out_shape, vec![1, 20, 64, 64, 8]);
    for i in 0..4 {
        assert_eq!(g.layer(&format!("p.up{i}")).unwrap().out_shape, vec![1, 1, 64, 64, 8]);
    }
    assert_eq!(g.layers[g.output].out_shape, vec![1, 1, 64, 64, 8]);
    let g = small_graph(&[1, 3, 8, 8, 2], |b, x| pyramid_pooling(b, "p", x, &[4], 5).unwrap());
    assert_eq!(g.layers[g.output].out_shape[1], 5);
    let mut b = GraphBuilder::new(0);
    let x = b.input(&[1, 2, 8, 8, 2]).unwrap();
    assert!(pyramid_pooling(&mut b, "p", x, &[16], 1).is_err());
}

#[test]
fn pyramid_of_constant_is_constant() {
    let mut g = small_graph(&[1, 1, 8, 8, 2], |b, x| pyramid_pooling(b, "p", x, &[4, 2], 1).unwrap());
    set_all(&mut g, |n| n.starts_with("p.proj") && n.ends_with("weight"), 1.0);
    let out = g.infer_layers(&Tensor::full(&[1, 1, 8, 8, 2], 2.5), &["p.concat"]).unwrap();
    assert!(out["p.concat"].data().iter().all(|&v| v == 2.5));
}

#[test]
fn graph_dump_lists_every_layer() {
    let g = build_mcgcn(&NetConfig::desk(), 0).unwrap();
    let v: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), g.layers.len());
    let convs = g.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv { .. })).count();
    assert_eq!(convs, g.conv_count());
}

#[test]
fn every_parameter_belongs_to_one_layer() {
    let (g, _) = build_ahnet(&NetConfig::desk(), 0, None).unwrap();
    let mut seen = std::collections::HashSet::new();
    for l in &g.layers {
        for n in l.param_names().into_iter().chain(l.buffer_names()) {
            assert!(seen.insert(n.clone()), "{n}");
            assert!(g.params.get(&n).is_some(), "{n}");
        }
    }
    assert_eq!(seen.len(), g.params.len());
}
