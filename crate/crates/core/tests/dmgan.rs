use atelier_core::corpus::build_vocabulary_from_texts;
use atelier_core::dmgan::*;
use atelier_core::gradcheck::{check_gradients, check_param_gradients, GradCheck};
use atelier_core::rng::{normal_tensor, seeded, uniform_tensor};
use atelier_core::text_encoder::{DamsmConfig, DamsmModel};
use atelier_core::{Graph, ParamStore, Params, Tensor};
use rand::Rng;

fn tiny() -> DmGanConfig {
    DmGanConfig {
        noise_dim: 3,
        cond_dim: 2,
        channels: 3,
        base_side: 2,
        n_stages: 2,
        word_dim: 4,
        key_dim: 3,
        value_dim: 2,
        res_blocks: 1,
        disc_channels: 2,
    }
}

fn tiny_store(seed: u64) -> ParamStore<f64> {
    init_dmgan(&tiny(), seed)
}

#[test]
fn initial_stage_contracts() {
    let cfg = tiny();
    let store = tiny_store(1);
    let g = Graph::<f64>::new();
    let p = Params::frozen(&g, &store);
    let z = normal_tensor::<f64>(&mut seeded(2), &[3], 1.0);
    let c = g.constant(Tensor::from_f64([2], &[0.3, -0.2]).unwrap());
    let (r0, x0) = initial_stage(&p, &cfg, g.constant(z.clone()), c).unwrap();
    assert_eq!(r0.shape(), vec![3, 2, 2]);
    assert_eq!(x0.shape(), vec![3, 2, 2]);
    let (_, again) = initial_stage(&p, &cfg, g.constant(z.clone()), c).unwrap();
    assert_eq!(x0.tensor(), again.tensor());

    let mut bumped = z.clone();
    bumped.data_mut()[1] += 1e-3;
    let (_, moved) = initial_stage(&p, &cfg, g.constant(bumped), c).unwrap();
    assert!(moved.tensor().max_abs_diff(&x0.tensor()) > 0.0);

    assert!(initial_stage(&p, &cfg, g.constant(Tensor::zeros([4])), c).is_err());

    let mut zero = store.clone();
    for name in zero.names().map(str::to_string).collect::<Vec<_>>() {
        let shape = zero.get(&name).unwrap().shape().to_vec();
        zero.insert(name, Tensor::zeros(shape));
    }
    let p0 = Params::frozen(&g, &zero);
    let (_, x0) = initial_stage(&p0, &cfg, g.constant(z), c).unwrap();
    assert!(x0.tensor().data().iter().all(|&v| v == 0.0));
}

fn feature(rng: &mut impl Rng, c: usize, side: usize) -> Tensor<f64> {
    normal_tensor(rng, &[c, side, side], 1.0)
}

#[test]
fn write_gate_limits() {
    let mut store = tiny_store(3);
    let mut rng = seeded(4);
    let words = normal_tensor::<f64>(&mut rng, &[3, 4], 1.0);
    let (ra, rb) = (feature(&mut rng, 3, 2), feature(&mut rng, 3, 2));

    store.insert("g.s1.write.gate_bias", Tensor::from_f64([1], &[1e3]).unwrap());
    {
        let g = Graph::<f64>::new();
        let p = Params::frozen(&g, &store);
        let ma = memory_write(&p, "g.s1.", g.constant(words.clone()), g.constant(ra.clone())).unwrap();
        let mb = memory_write(&p, "g.s1.", g.constant(words.clone()), g.constant(rb.clone())).unwrap();
        assert!(ma.gates.tensor().data().iter().all(|&x| x == 1.0));
        assert_eq!(ma.values.tensor(), mb.values.tensor());
    }

    store.insert("g.s1.write.gate_bias", Tensor::from_f64([1], &[-1e3]).unwrap());
    let g = Graph::<f64>::new();
    let p = Params::frozen(&g, &store);
    let m = memory_write(&p, "g.s1.", g.constant(words), g.constant(ra)).unwrap();
    assert!(m.gates.tensor().data().iter().all(|&x| x == 0.0));
    let v = m.values.tensor();
    for t in 1..3 {
        assert_eq!(v.row(t), v.row(0));
    }
}

#[test]
fn addressing_examples() {
    let g = Graph::<f64>::new();
    let q = g.constant(Tensor::from_f64([1, 1], &[1.0]).unwrap());

    let equal = g.constant(Tensor::from_f64([4, 1], &[2.0; 4]).unwrap());
    let w = address_weights(q, equal).tensor();
    assert!(w.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

    let peaked = g.constant(Tensor::from_f64([3, 1], &[0.0, 50.0, 0.0]).unwrap());
    assert!(address_weights(q, peaked).tensor().data()[1] > 1.0 - 1e-9);

    let two = g.constant(Tensor::from_f64([2, 1], &[0.0, 3f64.ln()]).unwrap());
    let w = address_weights(q, two).tensor();
    assert!((w.data()[0] - 0.25).abs() < 1e-12 && (w.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn addressing_rows_are_distributions() {
    let store = tiny_store(5);
    let mut rng = seeded(6);
    for _ in 0..20 {
        let g = Graph::<f64>::new();
        let p = Params::frozen(&g, &store);
        let t = rng.random_range(1..6);
        let words = g.constant(normal_tensor(&mut rng, &[t, 4], 2.0));
        let r = g.constant(feature(&mut rng, 3, 2));
        let mem = memory_write(&p, "g.s1.", words, r).unwrap();
        let w = key_address(&p, "g.s1.", &mem, r).unwrap().tensor();
        assert_eq!(w.shape(), &[4, t]);
        for j in 0..4 {
            assert!(w.row(j).iter().all(|&x| x >= 0.0));
            assert!((w.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn value_read_oracles() {
    let g = Graph::<f64>::new();
    let mut rng = seeded(7);
    let values = normal_tensor::<f64>(&mut rng, &[3, 2], 1.0);
    let v = g.constant(values.clone());

    let one_hot = Tensor::from_f64([2, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let out = value_read(v, g.constant(one_hot), 1, 2).tensor();
    for d in 0..2 {
        assert_eq!(out.data()[d * 2], values.row(1)[d]);
        assert_eq!(out.data()[d * 2 + 1], values.row(2)[d]);
    }

    let uniform = Tensor::full([1, 3], 1.0 / 3.0);
    let out = value_read(v, g.constant(uniform), 1, 1).tensor();
    for d in 0..2 {
        let mean = (values.row(0)[d] + values.row(1)[d] + values.row(2)[d]) / 3.0;
        assert!((out.data()[d] - mean).abs() < 1e-15);
    }

    for _ in 0..20 {
        let (h, w, t, dv) = (2, 3, 4, 3);
        let vals = normal_tensor::<f64>(&mut rng, &[t, dv], 1.0);
        let raw = uniform_tensor::<f64>(&mut rng, &[h * w, t], 0.0, 1.0);
        let weights = g.constant(raw).softmax().tensor();
        let out = value_read(g.constant(vals.clone()), g.constant(weights.clone()), h, w).tensor();
        for j in 0..h * w {
            for d in 0..dv {
                let mut expect = 0.0;
                for s in 0..t {
                    expect += weights.row(j)[s] * vals.row(s)[d];
                }
                let got = out.data()[d * h * w + j];
                assert!((got - expect).abs() <= 1e-12);
                let lo = (0..t).map(|s| vals.row(s)[d]).fold(f64::INFINITY, f64::min);
                let hi = (0..t).map(|s| vals.row(s)[d]).fold(f64::NEG_INFINITY, f64::max);
                assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn respond_limits_and_hull() {
    let mut store = tiny_store(8);
    let mut rng = seeded(9);
    let response = normal_tensor::<f64>(&mut rng, &[2, 2, 2], 1.0);
    let r = feature(&mut rng, 3, 2);

    store.insert("g.s1.respond.gate_bias", Tensor::from_f64([1], &[-1e3]).unwrap());
    {
        let g = Graph::<f64>::new();
        let p = Params::frozen(&g, &store);
        let (out, gate) = respond(&p, "g.s1.", g.constant(response.clone()), g.constant(r.clone())).unwrap();
        assert!(gate.tensor().data().iter().all(|&x| x == 0.0));
        assert_eq!(out.tensor(), r);
    }

    store.insert("g.s1.respond.gate_bias", Tensor::from_f64([1], &[1e3]).unwrap());
    let g = Graph::<f64>::new();
    let p = Params::frozen(&g, &store);
    let (out, _) = respond(&p, "g.s1.", g.constant(response.clone()), g.constant(r.clone())).unwrap();
    let w = store.get("g.s1.respond.proj.weight").unwrap();
    let b = store.get("g.s1.respond.proj.bias").unwrap();
    let projected = w.matmul(&response.reshape([2, 4]).unwrap());
    for c in 0..3 {
        for j in 0..4 {
            let expect = projected.data()[c * 4 + j] + b.data()[c];
            assert!((out.tensor().data()[c * 4 + j] - expect).abs() < 1e-14);
        }
    }

    let store = tiny_store(10);
    for _ in 0..20 {
        let g = Graph::<f64>::new();
        let p = Params::frozen(&g, &store);
        let response = normal_tensor::<f64>(&mut rng, &[2, 2, 2], 1.0);
        let r = feature(&mut rng, 3, 2);
        let (out, _) = respond(&p, "g.s1.", g.constant(response.clone()), g.constant(r.clone())).unwrap();
        let w = store.get("g.s1.respond.proj.weight").unwrap();
        let b = store.get("g.s1.respond.proj.bias").unwrap();
        let projected = w.matmul(&response.reshape([2, 4]).unwrap());
        for c in 0..3 {
            for j in 0..4 {
                let o = projected.data()[c * 4 + j] + b.data()[c];
                let x = r.data()[c * 4 + j];
                let y = out.tensor().data()[c * 4 + j];
                assert!(y >= o.min(x) - 1e-12 && y <= o.max(x) + 1e-12);
            }
        }
    }
}

#[test]
fn upsample_contracts() {
    let mut store = ParamStore::<f64>::new();
    let c = 2;
    let mut k = Tensor::zeros([c, c, 3, 3]);
    for ch in 0..c {
        k.data_mut()[((ch * c + ch) * 3 + 1) * 3 + 1] = 1.0;
    }
    store.insert("up.weight", k);
    store.insert("up.bias", Tensor::zeros([c]));
    let g = Graph::<f64>::new();
    let p = Params::frozen(&g, &store);
    let x = g.constant(Tensor::full([c, 8, 8], 0.7));
    let y = upsample(&p, "up", x).tensor();
    assert_eq!(y.shape(), &[2, 16, 16]);
    assert!(y.data().iter().all(|&v| v == 0.7));

    let mut rs = ParamStore::<f64>::new();
    rs.init_conv(&mut seeded(1), "up", 2, 2, 3);
    let x = normal_tensor(&mut seeded(2), &[2, 3, 3], 1.0);
    let report = check_param_gradients(&rs, GradCheck::default(), |g, p| {
        upsample(p, "up", g.constant(x.clone())).square().sum()
    });
    assert!(report.passed(1e-4), "{report:?}");
    let report = check_gradients(&[x], GradCheck::default(), |g, v| {
        let p = Params::frozen(g, &rs);
        upsample(&p, "up", v[0]).square().sum()
    });
    assert!(report.passed(1e-4), "{report:?}");
}

#[test]
fn refine_stage_reduces_to_upsample_and_render_at_passthrough() {
    let cfg = tiny();
    let mut store = tiny_store(11);
    store.insert("g.s1.respond.gate_bias", Tensor::from_f64([1], &[-1e3]).unwrap());
    store.insert("g.s1.res0.conv2.weight", Tensor::zeros([3, 3, 3, 3]));
    let mut rng = seeded(12);
    let r_prev = feature(&mut rng, 3, 2);
    let words = normal_tensor::<f64>(&mut rng, &[3, 4], 1.0);
    let g = Graph::<f64>::new();
    let p = Params::frozen(&g, &store);
    let trace = refine_stage(&p, &cfg, 1, g.constant(r_prev.clone()), g.constant(words)).unwrap();
    let direct = upsample(&p, "g.s1.up", g.constant(r_prev));
    assert_eq!(trace.features.tensor(), direct.tensor());
    let rendered = p.conv("g.render1", direct, 1).tanh();
    assert_eq!(trace.image.tensor(), rendered.tensor());
    assert_eq!(trace.image.shape(), vec![3, 4, 4]);
}

#[test]
fn per_step_gradients() {
    let store = tiny_store(13);
    let mut rng = seeded(14);
    let words = normal_tensor::<f64>(&mut rng, &[3, 4], 1.0);
    let r = feature(&mut rng, 3, 2);
    let cfg = GradCheck::default();

    let write = check_param_gradients(&store, cfg, |g, p| {
        let m = memory_write(p, "g.s1.", g.constant(words.clone()), g.constant(r.clone())).unwrap();
        m.values.square().sum() + m.keys.sum() + m.gates.square().sum()
    });
    assert!(write.passed(1e-4), "write {write:?}");

    let address = check_gradients(&[words.clone(), r.clone()], cfg, |g, v| {
        let p = Params::frozen(g, &store);
        let m = memory_write(&p, "g.s1.", v[0], v[1]).unwrap();
        let w = key_address(&p, "g.s1.", &m, v[1]).unwrap();
        let target = g.constant(normal_tensor(&mut seeded(1), &[4, 3], 1.0));
        (w * target).sum()
    });
    assert!(address.passed(1e-4), "address {address:?}");

    let read = check_gradients(
        &[normal_tensor(&mut rng, &[3, 2], 1.0), normal_tensor(&mut rng, &[4, 3], 1.0)],
        cfg,
        |_, v| value_read(v[0], v[1].softmax(), 2, 2).square().sum(),
    );
    assert!(read.passed(1e-4), "read {read:?}");

    let response = normal_tensor::<f64>(&mut rng, &[2, 2, 2], 1.0);
    let resp = check_param_gradients(&store, cfg, |g, p| {
        respond(p, "g.s1.", g.constant(response.clone()), g.constant(r.clone()))
            .unwrap()
            .0
            .square()
            .sum()
    });
    assert!(resp.passed(1e-4), "respond {resp:?}");
    let resp_in = check_gradients(&[response.clone(), r.clone()], cfg, |g, v| {
        let p = Params::frozen(g, &store);
        respond(&p, "g.s1.", v[0], v[1]).unwrap().0.square().sum()
    });
    assert!(resp_in.passed(1e-4), "respond inputs {resp_in:?}");
}

#[test]
fn refine_stage_end_to_end_gradient() {
    let cfg = tiny();
    let store = tiny_store(15);
    let mut rng = seeded(16);
    let words = normal_tensor::<f64>(&mut rng, &[3, 4], 1.0);
    let r = feature(&mut rng, 3, 2);
    let report = check_param_gradients(&store, GradCheck::default(), |g, p| {
        let t = refine_stage(p, &cfg, 1, g.constant(r.clone()), g.constant(words.clone())).unwrap();
        t.image.square().sum()
    });
    assert!(report.passed(1e-3), "{report:?}");
    let inputs = check_gradients(&[words, r], GradCheck::default(), |g, v| {
        let p = Params::frozen(g, &store);
        refine_stage(&p, &cfg, 1, v[1], v[0]).unwrap().image.square().sum()
    });
    assert!(inputs.passed(1e-3), "{inputs:?}");
}

#[test]
fn discriminator_gradient() {
    let store = tiny_store(17);
    let mut rng = seeded(18);
    let img = uniform_tensor::<f64>(&mut rng, &[3, 4, 4], -1.0, 1.0);
    let s = normal_tensor::<f64>(&mut rng, &[4], 1.0);
    let report = check_param_gradients(&store, GradCheck::default(), |g, p| {
        discriminate(p, 1, g.constant(img.clone()), g.constant(s.clone()))
    });
    assert!(report.passed(1e-4), "{report:?}");
}

fn desk_model(n_stages: usize) -> GanModel<f32> {
    let vocab = build_vocabulary_from_texts(["a red green blue square circle triangle"], 1);
    let damsm = DamsmModel::<f32>::new(DamsmConfig::desk(vocab.len()), vocab, 1).unwrap();
    let mut cfg = DmGanConfig::desk(damsm.config.text.feature_dim());
    cfg.n_stages = n_stages;
    GanModel::new(cfg, damsm, 2).unwrap()
}

#[test]
fn generate_stage_sizes_and_determinism() {
    let model = desk_model(3);
    let imgs = model.generate("a red square", 5, 3).unwrap();
    let sides: Vec<usize> = imgs.iter().map(|i| i.image.shape()[1]).collect();
    assert_eq!(sides, vec![8, 16, 32]);
    assert!(imgs.iter().all(|i| i.image.data().iter().all(|x| x.abs() <= 1.0)));
    assert_eq!(model.generate("a red square", 5, 1).unwrap().len(), 1);
    let again = model.generate("a red square", 5, 3).unwrap();
    assert_eq!(imgs[2].to_png(), again[2].to_png());
    assert_ne!(model.generate("a red square", 6, 3).unwrap()[2].image, imgs[2].image);
    // words outside the vocabulary fall back to UNK
    assert!(model.generate("a purple hexagon", 1, 2).is_ok());
    assert!(model.generate("a red square", 1, 0).is_err());
    assert!(model.generate("a red square", 1, 4).is_err());
    assert_eq!(imgs[0].provenance.seed, 5);
}

#[test]
fn checkpoint_round_trip_and_encoder_mismatch() {
    let model = desk_model(2);
    let ck = model.to_checkpoint();
    let back = GanModel::from_checkpoint(ck.clone(), model.text.clone()).unwrap();
    assert_eq!(back.params, model.params);

    let vocab = model.text.vocab.clone();
    let other = DamsmModel::<f32>::new(model.text.config.clone(), vocab, 99).unwrap();
    assert!(GanModel::from_checkpoint(ck, other).is_err());
}

fn shape_batch(model: &GanModel<f32>, n: usize) -> Vec<GanSample<f32>> {
    atelier_core::corpus::synth_shapes_dataset::<f32>(4, n)
        .iter()
        .map(|s| GanSample::new(model, &s.image, &s.caption).unwrap())
        .collect()
}

#[test]
fn chance_discriminator_gives_objective_constants() {
    let mut model = desk_model(2);
    for i in 0..2 {
        let w = model.params.get(&format!("d{i}.out.weight")).unwrap().shape().to_vec();
        model.params.insert(format!("d{i}.out.weight"), Tensor::zeros(w));
    }
    let batch = shape_batch(&model, 2);
    let cfg = GanTrainConfig {
        lambda_ca: 0.0,
        lambda_damsm: 0.0,
        lambda_rec: 0.0,
        freeze_discriminator: true,
        ..Default::default()
    };
    let mut trainer = GanTrainer::new(model, cfg);
    let losses = trainer.train_step(&batch).unwrap();
    for s in &losses.stages {
        assert_eq!(s.generator_adv, 0.0);
        assert!((s.discriminator - 2.0).abs() < 1e-6);
    }
    assert_eq!(losses.generator, 0.0);
}

#[test]
fn training_is_deterministic_and_finite() {
    let model = desk_model(2);
    let batch = shape_batch(&model, 4);
    let run = || {
        let mut t = GanTrainer::new(model.clone(), GanTrainConfig::default());
        (0..2).map(|_| t.train_step(&batch).unwrap()).collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    for l in &a {
        assert!(l.generator.is_finite() && l.discriminator.is_finite() && l.damsm > 0.0);
        assert_eq!(l.stages.len(), 2);
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let mut model = desk_model(2);
    model.params.get_mut("d0.out.bias").unwrap().data_mut()[0] = f32::NAN;
    let batch = shape_batch(&model, 2);
    let mut t = GanTrainer::new(model, GanTrainConfig::default());
    let err = t.train_step(&batch).unwrap_err();
    assert!(err.to_string().contains("discriminator"), "{err}");
}
