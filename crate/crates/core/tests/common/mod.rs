//! Shared helpers for the integration tests.

#![allow(dead_code)]

use coamd::autoencoder::{AeConfig, Autoencoder};
use coamd::dataset::{Corpus, Item, SynthConfig};
use coamd::generator::{GenConfig, Generator};
use coamd::guidance::latent_score_var;
use coamd::motion_repr::{Skeleton, StreamStats};
use coamd::recognizer::{MarConfig, Recognizer};
use diffcore::gradcheck::check;
use diffcore::{Params, Rng, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn weighted<'t>(y: Var<'t, f64>, seed: u64) -> diffcore::Result<Var<'t, f64>> {
    let w: Tensor<f64> = Rng::new(seed).normal(&y.shape());
    y.mul(y.tape().constant(w))?.sum()
}

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal(shape)
}

/// Small untrained models sharing one skeleton and vocabulary.
pub fn toy_models() -> (Autoencoder, Recognizer, Generator) {
    let corpus = Corpus::synthesize(&SynthConfig::default(), 16, 2, 6).unwrap();
    let items: Vec<&Item> = corpus.items.iter().collect();
    let ae = Autoencoder::new(
        AeConfig {
            latent_dim: 8,
            width: 8,
            ..AeConfig::default()
        },
        Skeleton::humanoid(),
        StreamStats::identity(27),
        1,
    )
    .unwrap();
    let mar = Recognizer::new(
        MarConfig {
            embed_dim: 8,
            width: 8,
            layers: 1,
            heads: 2,
            max_frames: 64,
            ..MarConfig::default()
        },
        Skeleton::humanoid(),
        StreamStats::identity(27),
        Recognizer::vocab_for(&items, &corpus.classes),
        2,
    )
    .unwrap();
    let gen = Generator::new(
        GenConfig {
            width: 8,
            layers: 1,
            heads: 2,
            head_width: 8,
            head_blocks: 1,
            max_len: 8,
            ..GenConfig::default()
        },
        8,
        8,
        3,
    )
    .unwrap();
    (ae, mar, gen)
}

/// Finite-difference checks at f64 of every primitive and every model-level
/// differentiable path: `(name, max relative error)`.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: &[Tensor<f64>], f: &dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> diffcore::Result<Var<'t, f64>>| {
        let r = check(inputs, H, f).unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name, r.max_rel_error));
    };
    let mut rng = Rng::new(11);
    let a23 = rand(&mut rng, &[2, 3]);
    let b23 = rand(&mut rng, &[2, 3]);
    let b3 = rand(&mut rng, &[3]);
    let m34 = rand(&mut rng, &[3, 4]);
    let bat_a = rand(&mut rng, &[2, 3, 4]);
    let bat_b = rand(&mut rng, &[2, 4, 2]);
    let x3 = rand(&mut rng, &[2, 6, 3]);
    let w = rand(&mut rng, &[3, 3, 4]);
    let w2 = rand(&mut rng, &[4, 3, 2]);

    run("add", &[a23.clone(), b23.clone()], &|_, v| weighted(v[0].add(v[1])?, 1));
    run("add_bias", &[a23.clone(), b3.clone()], &|_, v| weighted(v[0].add(v[1])?, 2));
    run("sub", &[a23.clone(), b3.clone()], &|_, v| weighted(v[0].sub(v[1])?, 3));
    run("mul", &[a23.clone(), b23.clone()], &|_, v| weighted(v[0].mul(v[1])?, 4));
    run("scale", &[a23.clone()], &|_, v| weighted(v[0].scale(-1.7)?.add_scalar(0.3)?, 6));
    run("matmul", &[a23.clone(), m34.clone()], &|_, v| weighted(v[0].matmul(v[1])?, 7));
    run("matmul_batched", &[bat_a.clone(), bat_b.clone()], &|_, v| weighted(v[0].matmul(v[1])?, 8));
    run("matmul_nt", &[bat_a.clone(), bat_a.clone()], &|_, v| weighted(v[0].matmul_nt(v[1])?, 9));
    run("transpose", &[bat_a.clone()], &|_, v| weighted(v[0].transpose()?, 10));
    run("permute", &[bat_a.clone()], &|_, v| weighted(v[0].permute(&[2, 0, 1])?, 11));
    run("reshape", &[bat_a.clone()], &|_, v| weighted(v[0].reshape(&[4, 6])?, 12));
    run("concat", &[a23.clone(), b23.clone()], &|_, v| weighted(Var::concat(&[v[0], v[1]], 1)?, 13));
    run("slice", &[bat_a.clone()], &|_, v| weighted(v[0].slice(2, 1, 2)?, 15));
    run("gather", &[a23.clone()], &|_, v| weighted(v[0].gather(&[1, 0, 1])?, 16));
    run("mask_select", &[bat_a.clone()], &|_, v| weighted(v[0].mask_select(&[false, true])?, 17));
    run("conv1d", &[x3.clone(), w.clone()], &|_, v| weighted(v[0].conv1d(v[1], 1, 1)?, 18));
    run("conv1d_strided", &[x3.clone(), w2.clone()], &|_, v| weighted(v[0].conv1d(v[1], 2, 1)?, 19));
    run("upsample", &[x3.clone()], &|_, v| weighted(v[0].upsample(2)?, 20));
    run("layer_norm", &[bat_a.clone()], &|_, v| weighted(v[0].layer_norm()?, 21));
    run("softmax", &[bat_a.clone()], &|_, v| weighted(v[0].softmax()?, 22));
    run("log_softmax", &[bat_a.clone()], &|_, v| weighted(v[0].log_softmax()?, 23));
    run("gelu", &[bat_a.clone()], &|_, v| weighted(v[0].gelu()?, 24));
    run("sum", &[a23.clone()], &|_, v| v[0].sum());
    run("mean", &[a23.clone()], &|_, v| v[0].mean());
    run("sum_axis", &[bat_a.clone()], &|_, v| weighted(v[0].sum_axis(1)?, 25));
    run("mean_axis", &[bat_a.clone()], &|_, v| weighted(v[0].mean_axis(2)?, 26));
    run("l1_loss", &[a23.clone(), b23.clone()], &|_, v| v[0].l1_loss(v[1]));
    run("mse_loss", &[a23.clone(), b23.clone()], &|_, v| v[0].mse_loss(v[1]));
    run("cosine_rows", &[a23.clone(), b23.clone()], &|_, v| weighted(v[0].cosine_rows(v[1])?, 27));
    run("l2_normalize", &[a23.clone()], &|_, v| weighted(v[0].l2_normalize()?, 28));
    run("l2_norm", &[a23.clone()], &|_, v| v[0].l2_norm());

    let (ae, mar, gen) = toy_models();
    let pa: Params<f64> = ae.params.cast();
    let pm: Params<f64> = mar.params.cast();
    let pg: Params<f64> = gen.params.cast();
    let streams: Vec<Tensor<f64>> = (0..3).map(|_| rand(&mut rng, &[1, 8, 27])).collect();
    run("encode", &streams, &|tape, v| {
        weighted(ae.model.encode(&tape.bind(&pa, false), [v[0], v[1], v[2]])?, 40)
    });
    run("decode", &[rand(&mut rng, &[1, 2, 8])], &|tape, v| {
        weighted(ae.model.decode(&tape.bind(&pa, false), v[0])?, 41)
    });
    run("embed_motion", &streams, &|tape, v| {
        let e = mar.model.embed_streams(&tape.bind(&pm, false), [v[0], v[1], v[2]])?;
        let mut s = weighted(e.fused, 42)?;
        for (k, x) in e.streams.into_iter().flatten().enumerate() {
            s = s.add(weighted(x, 43 + k as u64)?)?;
        }
        Ok(s)
    });
    let c: Tensor<f64> = rand(&mut rng, &[1, 8]);
    let mask = [false, true, false, true];
    run("transformer_context", &[rand(&mut rng, &[1, 4, 8])], &|tape, v| {
        weighted(gen.model.context(&tape.bind(&pg, false), v[0], &mask, tape.constant(c.clone()))?, 44)
    });
    run("diffusion_head", &[rand(&mut rng, &[3, 8]), rand(&mut rng, &[3, 8])], &|tape, v| {
        weighted(gen.model.velocity(&tape.bind(&pg, false), v[0], v[1], &[0.1, 0.5, 0.9])?, 45)
    });
    let unit: Vec<f64> = {
        let raw = rand(&mut rng, &[8]).into_data();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        raw.iter().map(|x| x / n).collect()
    };
    let c_unit = Tensor::from_f64(vec![1, 8], &unit).unwrap();
    run("guidance_gradient", &[rand(&mut rng, &[1, 3, 8])], &|tape, v| {
        let (s, _) = latent_score_var(
            &ae,
            &tape.bind(&pa, false),
            &mar,
            &tape.bind(&pm, false),
            v[0],
            11,
            tape.constant(c_unit.clone()),
            [0.4, 0.3, 0.2, 0.1],
        )?;
        Ok(s)
    });
    out
}
