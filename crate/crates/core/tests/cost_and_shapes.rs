use std::collections::BTreeMap;

use dmfseg::backbone::{Encoder, EncoderConfig, EncoderKind};
use dmfseg::cost::{conv_cost, count_params, linear_cost, model_head_cost, reductions, TARGETS};
use dmfseg::decoder::{Decoder, DecoderConfig, SegHead, Upsample};
use dmfseg::layers::Module;
use dmfseg::model::{ModelConfig, SegModel};
use dmfseg::tensor::gradcheck::grad_check;
use dmfseg::tensor::init::Rng;
use dmfseg::tensor::no_grad;
use dmfseg::Tensor;

/// Parameter counts of a built decoder and head, grouped the way the cost
/// model names its entries (`decoder.blocks.i.part`, `head.part`).
fn walk(cfg: &DecoderConfig) -> BTreeMap<String, u64> {
    let mut rng = Rng::seeded(0);
    let mut dec = Decoder::<f32>::new(&mut rng, cfg).unwrap();
    let mut head = SegHead::<f32>::new(&mut rng, cfg.out_channels(), cfg.num_classes).unwrap();
    let mut groups = BTreeMap::new();
    let mut add = |name: String, t: &mut Tensor<f32>| {
        let parts: Vec<&str> = name.split('.').collect();
        let key = if parts[0] == "head" { parts[..2].join(".") } else { parts[..4].join(".") };
        *groups.entry(key).or_insert(0) += t.numel() as u64;
    };
    dec.visit("decoder", &mut add);
    head.visit("head", &mut add);
    groups
}

fn analytic(cfg: &DecoderConfig) -> BTreeMap<String, u64> {
    model_head_cost(cfg, 64, 64)
        .unwrap()
        .entries
        .into_iter()
        .filter(|e| e.params > 0)
        .map(|e| (e.name, e.params))
        .collect()
}

#[test]
fn analytic_params_match_a_walk_over_built_modules() {
    for t in TARGETS {
        let cfg = DecoderConfig { channels: t.channels.to_vec(), ..Default::default() };
        let walked = walk(&cfg);
        assert_eq!(walked, analytic(&cfg), "{}", t.backbone);
        assert_eq!(walked.values().sum::<u64>(), count_params(&cfg).unwrap());
    }
    let base = DecoderConfig::micro(5);
    let mut variants = vec![base.clone()];
    for u in [Upsample::Bilinear, Upsample::Bicubic] {
        variants.push(DecoderConfig { upsample: u, ..base.clone() });
    }
    for d in [1, 2] {
        let mut c = base.clone();
        c.ss2d.directions = d;
        variants.push(c);
    }
    let mut c = base.clone();
    c.ss2d.expand = 2;
    variants.push(c);
    variants.push(DecoderConfig { deformable: false, final_proj: false, fusion_depth: 1, ..base.clone() });
    for cfg in variants {
        assert_eq!(walk(&cfg), analytic(&cfg), "{cfg:?}");
    }
}

#[test]
fn head_count_by_hand() {
    let cfg = DecoderConfig::default();
    assert_eq!(cfg.out_channels(), 96);
    let r = model_head_cost(&cfg, 512, 512).unwrap();
    let want = (96 * 96 + 96) + 2 * 96 + (9 * 96 * 13 + 13);
    assert_eq!(r.params_under("head."), want);
    let mut rng = Rng::seeded(1);
    assert_eq!(SegHead::<f32>::new(&mut rng, 96, 13).unwrap().num_params() as u64, want);
}

#[test]
fn primitive_counts_by_hand() {
    assert_eq!(conv_cost(16, 32, 3, 1, true, 1).params, 4640);
    assert_eq!(linear_cost(8, 8, false, 16).flops, 1024);
    let small = conv_cost(8, 8, 3, 1, true, 16 * 16).flops;
    assert_eq!(conv_cost(8, 8, 3, 1, true, 32 * 32).flops, 4 * small);
}

#[test]
fn params_do_not_depend_on_resolution() {
    let cfg = DecoderConfig::default();
    let a = model_head_cost(&cfg, 256, 256).unwrap();
    let b = model_head_cost(&cfg, 512, 1024).unwrap();
    assert_eq!(a.total_params(), b.total_params());
    assert!(b.total_flops() > a.total_flops());
}

#[test]
fn headline_ratios_come_from_table_values() {
    let r = reductions();
    // 11.2 M against the 40.5 M head of the resnet table rounds to 72%.
    let cross = r.iter().find(|x| x.ours == "swin-t/vmamba-t" && x.backbone == "resnet-50" && x.head == "UperHead").unwrap();
    assert!((cross.param_pct - 100.0 * (1.0 - 11.2 / 40.5)).abs() < 1e-9);
    assert!(cross.matches_params() && !cross.same_table);
    // 6.0 G against 206.9 G in the same table rounds to 97%.
    let same = r.iter().find(|x| x.ours == "swin-t/vmamba-t" && x.backbone == "vmamba-t" && x.head == "UperHead").unwrap();
    assert!((same.flop_pct - 100.0 * (1.0 - 6.0 / 206.9)).abs() < 1e-9);
    assert!(same.matches_flops() && same.same_table);
}

fn pyramid_shapes(kind: EncoderKind, h: usize, w: usize) -> Vec<Vec<usize>> {
    let cfg = EncoderConfig { kind, depths: vec![1, 1, 1, 1], ..EncoderConfig::micro() };
    let enc = Encoder::<f32>::new(&mut Rng::seeded(2), &cfg).unwrap();
    let x = Tensor::zeros(&[1, 3, h, w]);
    no_grad(|| enc.forward(&x)).unwrap().iter().map(|t| t.shape().to_vec()).collect()
}

#[test]
fn both_encoders_give_the_same_pyramid() {
    for (h, w) in [(64, 128), (32, 32)] {
        let conv = pyramid_shapes(EncoderKind::Conv, h, w);
        assert_eq!(conv, pyramid_shapes(EncoderKind::Ss2d, h, w));
        let want: Vec<Vec<usize>> =
            [8, 16, 32, 64].iter().enumerate().map(|(i, &c)| vec![1, c, h >> (i + 2), w >> (i + 2)]).collect();
        assert_eq!(conv, want);
    }
}

#[test]
fn shape_chain_over_resolutions() {
    for kind in [EncoderKind::Conv, EncoderKind::Ss2d] {
        let mut cfg = ModelConfig::micro(3);
        cfg.encoder.kind = kind;
        cfg.encoder.depths = vec![1, 1, 1, 1];
        let m = SegModel::<f32>::new(4, &cfg).unwrap();
        for h in [32, 64, 128] {
            for w in [32, 64, 128] {
                let x = Tensor::zeros(&[1, 3, h, w]);
                no_grad(|| -> dmfseg::Result<()> {
                    let p = m.encoder.forward(&x)?;
                    let stages = m.decoder.forward_stages(&p)?;
                    // Every block sees matching encoder and decoder inputs:
                    // D_j must have the shape of the next encoder level.
                    for j in 0..3 {
                        assert_eq!(stages[j].shape(), p[2 - j].shape(), "{kind:?} {h}x{w} stage {}", j + 1);
                    }
                    assert_eq!(stages[3].shape(), [1, 8, h / 4, w / 4]);
                    assert_eq!(m.forward(&x)?.shape(), [1, 3, h, w]);
                    Ok(())
                })
                .unwrap();
            }
        }
    }
}

#[test]
fn full_width_stage_shapes() {
    // Decoder only, fed a synthetic pyramid for a 256 x 256 input.
    let cfg = DecoderConfig::default();
    let dec = Decoder::<f32>::new(&mut Rng::seeded(5), &cfg).unwrap();
    let mut rng = Rng::seeded(6);
    let pyramid: Vec<Tensor<f32>> =
        [96, 192, 384, 768].iter().enumerate().map(|(i, &c)| rng.normal_tensor(&[1, c, 64 >> i, 64 >> i], 1.0)).collect();
    let stages = no_grad(|| dec.forward_stages(&pyramid)).unwrap();
    assert_eq!(stages[0].shape(), [1, 384, 16, 16]);
    assert_eq!(stages[1].shape(), [1, 192, 32, 32]);
    assert_eq!(stages[2].shape(), [1, 96, 64, 64]);
    assert_eq!(stages[3].shape(), [1, 96, 64, 64]);
    assert!(stages[3].all_finite());

    // Deformable branch off: same shapes.
    let off = Decoder::<f32>::new(&mut Rng::seeded(5), &DecoderConfig { deformable: false, ..cfg }).unwrap();
    let s2 = no_grad(|| off.forward_stages(&pyramid)).unwrap();
    assert!(s2.iter().zip(&stages).all(|(a, b)| a.shape() == b.shape()));
}

#[test]
fn resnet_widths_chain() {
    let cfg = DecoderConfig { channels: vec![256, 512, 1024, 2048], ..Default::default() };
    let dec = Decoder::<f32>::new(&mut Rng::seeded(7), &cfg).unwrap();
    let mut rng = Rng::seeded(8);
    let pyramid: Vec<Tensor<f32>> =
        [256, 512, 1024, 2048].iter().enumerate().map(|(i, &c)| rng.normal_tensor(&[1, c, 8 >> i, 8 >> i], 1.0)).collect();
    let out = no_grad(|| dec.forward(&pyramid)).unwrap();
    assert_eq!(out.shape(), [1, 256, 8, 8]);
}

#[test]
fn micro_decoder_gradient() {
    // Smallest input with an integral stride-32 level is 32 x 32.
    let cfg = DecoderConfig { ss2d: dmfseg::ssm::Ss2dConfig { d_state: 4, ..Default::default() }, ..DecoderConfig::micro(3) };
    let mut rng = Rng::seeded(9);
    let mut dec = Decoder::<f64>::new(&mut rng, &cfg).unwrap();
    // A fresh predictor samples exactly on pixel centres, where bilinear
    // weights have a kink; fractional offsets move every tap off the grid.
    dec.visit("", &mut |name, t| {
        if name.ends_with("predictor.bias") {
            let v = (0..t.numel()).map(|i| if i < 18 { rng.uniform(0.15, 0.35) } else { rng.uniform(-1.0, 1.0) }).collect();
            *t = Tensor::param(v, t.shape()).unwrap();
        }
    });
    let mut inputs: Vec<Tensor<f64>> =
        [8, 16, 32, 64].iter().enumerate().map(|(i, &c)| rng.normal_tensor(&[1, c, 8 >> i, 8 >> i], 1.0)).collect();
    let n_in = inputs.len();
    inputs.extend(dec.named_params().into_iter().map(|(_, t)| t));
    let err = grad_check(
        |v| {
            let mut d = dec.clone();
            let mut i = n_in;
            d.visit("", &mut |_, t| {
                *t = v[i].clone();
                i += 1;
            });
            d.forward(&v[..n_in])
        },
        &inputs,
        1e-5,
        Some(2),
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}
