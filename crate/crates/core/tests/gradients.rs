//! Analytic gradients against central finite differences.

use std::time::Instant;

use lincir_core::autograd::{Graph, Mask, NodeId};
use lincir_core::encoder::{DualEncoder, EncoderConfig, Parameters};
use lincir_core::gradcheck::{check_function, check_graph};
use lincir_core::smp::{
    prepare_corpus, smp_step, CorpusLine, NoiseKind, ProjectionConfig, ProjectionModule, Supervision, TrainConfig,
};
use lincir_core::text::{MaskPolicy, PosLexicon, Vocabulary};
use lincir_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 100;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// component contributes.
fn weighted_sum(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Checks every input component of `build` on one set of inputs, through a
/// random weighted sum of its output.
fn check_once<F>(name: &str, inputs: &[Tensor], tol: f64, build: &F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let r = check_graph(inputs, H, |g, ids| {
        let out = build(g, ids);
        Ok(weighted_sum(g, out, 99))
    })
    .unwrap();
    assert!(r.worst <= tol, "{name}: worst rel err {:.2e} at {:?}", r.worst, r.at);
    r.worst
}

/// Runs [`check_once`] over `TRIALS` seeded random draws of the inputs.
fn check<G, F>(name: &str, tol: f64, gen: G, build: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    for seed in 0..TRIALS {
        let inputs = gen(&mut ChaCha8Rng::seed_from_u64(seed));
        check_once(name, &inputs, tol, &build);
    }
}

fn shapes(shapes: &'static [&'static [usize]]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| shapes.iter().map(|s| random(s, r)).collect()
}

#[test]
fn matmul_family() {
    check("matmul", 1e-6, shapes(&[&[3, 4], &[4, 2]]), |g, x| {
        g.matmul(x[0], x[1]).unwrap()
    });
    check("matmul_nt", 1e-6, shapes(&[&[3, 4], &[2, 4]]), |g, x| {
        g.matmul_nt(x[0], x[1]).unwrap()
    });
    check("linear", TOL, shapes(&[&[3, 4], &[4, 2], &[2]]), |g, x| {
        g.linear(x[0], x[1], Some(x[2])).unwrap()
    });
    check("linear without bias", TOL, shapes(&[&[3, 4], &[4, 2]]), |g, x| {
        g.linear(x[0], x[1], None).unwrap()
    });
    check("transpose", TOL, shapes(&[&[3, 4]]), |g, x| g.transpose(x[0]).unwrap());
}

#[test]
fn elementwise() {
    let pair = || shapes(&[&[3, 4], &[3, 4]]);
    check("add", TOL, pair(), |g, x| g.add(x[0], x[1]).unwrap());
    check("sub", TOL, pair(), |g, x| g.sub(x[0], x[1]).unwrap());
    check("mul", TOL, pair(), |g, x| g.mul(x[0], x[1]).unwrap());
    check("mse", TOL, pair(), |g, x| g.mse(x[0], x[1]).unwrap());
    check("scale", TOL, shapes(&[&[3, 4]]), |g, x| g.scale(x[0], -2.5).unwrap());
    check("mul_exp", TOL, shapes(&[&[3, 4], &[1]]), |g, x| {
        g.mul_exp(x[0], x[1]).unwrap()
    });
    check("sum", TOL, shapes(&[&[3, 4]]), |g, x| g.sum(x[0]).unwrap());
    check("mean", TOL, shapes(&[&[3, 4]]), |g, x| g.mean(x[0]).unwrap());
    check(
        "gelu",
        TOL,
        |r| vec![random(&[3, 4], r).map(|v| 3.0 * v)],
        |g, x| g.gelu(x[0]).unwrap(),
    );
}

#[test]
fn dropout_with_fixed_mask() {
    check("dropout", TOL, shapes(&[&[4, 6]]), |g, x| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(3);
        g.dropout(x[0], 0.5, &mut mask_rng).unwrap()
    });
}

#[test]
fn normalization() {
    check("layer_norm", 1e-5, shapes(&[&[2, 5], &[5], &[5]]), |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check("l2_normalize_rows", TOL, shapes(&[&[3, 6]]), |g, v| {
        g.l2_normalize_rows(v[0]).unwrap()
    });
}

#[test]
fn attention_variants() {
    let qkv = || shapes(&[&[3, 4], &[3, 4], &[3, 4]]);
    check("attention", 1e-5, qkv(), |g, x| {
        g.softmax_attention(x[0], x[1], x[2], Mask::None).unwrap()
    });
    check("causal attention", 1e-5, qkv(), |g, x| {
        g.softmax_attention(x[0], x[1], x[2], Mask::Causal).unwrap()
    });
    check(
        "packed multi-head attention",
        1e-5,
        shapes(&[&[5, 4], &[5, 4], &[5, 4]]),
        |g, x| g.attention(x[0], x[1], x[2], 2, &[3, 2], Mask::Causal).unwrap(),
    );
}

#[test]
fn gathering_and_pooling() {
    check("gather_rows", TOL, shapes(&[&[3, 4], &[2, 4]]), |g, x| {
        g.gather_rows(&[x[0], x[1]], &[(1, 0), (0, 2), (0, 2), (1, 1)]).unwrap()
    });
    check("segment_mean", TOL, shapes(&[&[3, 4]]), |g, x| {
        g.segment_mean(x[0], &[1, 2]).unwrap()
    });
}

#[test]
fn cross_entropy_logits() {
    check(
        "cross_entropy",
        TOL,
        |r| vec![random(&[4, 5], r).map(|v| 2.0 * v)],
        |g, x| g.cross_entropy(x[0], &[0, 3, 4, 3]).unwrap(),
    );
}

#[test]
fn composite_chains() {
    check(
        "ln-linear-gelu",
        TOL,
        shapes(&[&[3, 5], &[5], &[5], &[5, 4], &[4]]),
        |g, v| {
            let h = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let h = g.linear(h, v[3], Some(v[4])).unwrap();
            g.gelu(h).unwrap()
        },
    );
    check("linear-gelu-normalize-ce", TOL, shapes(&[&[4, 3], &[3, 3]]), |g, v| {
        let h = g.linear(v[0], v[1], None).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.l2_normalize_rows(h).unwrap();
        let s = g.matmul_nt(h, h).unwrap();
        let s = g.scale(s, 5.0).unwrap();
        g.cross_entropy(s, &[0, 1, 2, 3]).unwrap()
    });
}

#[test]
fn backward_is_linear_in_the_loss() {
    for seed in 0..TRIALS {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (x, w, t) = (
            random(&[3, 4], &mut r),
            random(&[4, 4], &mut r),
            random(&[3, 4], &mut r),
        );
        let grad = |which: u8| {
            let mut g = Graph::new();
            let xi = g.param(x.clone());
            let wi = g.constant(w.clone());
            let ti = g.constant(t.clone());
            let h = g.matmul(xi, wi).unwrap();
            let h = g.gelu(h).unwrap();
            let a = g.mse(h, ti).unwrap();
            let b = g.sum(h).unwrap();
            let loss = match which {
                0 => a,
                1 => b,
                _ => g.add(a, b).unwrap(),
            };
            g.backward(loss).unwrap().get(xi).unwrap().clone()
        };
        let (ga, gb, gs) = (grad(0), grad(1), grad(2));
        for i in 0..gs.len() {
            assert!((gs.data()[i] - ga.data()[i] - gb.data()[i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn frozen_weights_pass_gradient_to_injected_rows() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let injected = g.param(random(&[2, 4], &mut r));
    let w = g.constant(random(&[4, 4], &mut r));
    let h = g.matmul(injected, w).unwrap();
    let loss = weighted_sum(&mut g, h, 1);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(injected).unwrap().data().iter().any(|v| *v != 0.0));
    assert!(grads.get(w).is_none());
}

/// The full self-masking loss with respect to every projection parameter,
/// through a frozen one-layer encoder of width 16.
#[test]
fn smp_loss_matches_finite_differences() {
    let start = Instant::now();
    let vocab = Vocabulary::new([
        "a", "gray", "cat", "sleeps", "on", "pillow", "red", "ball", "rolls", "the", "floor",
    ]);
    let config = EncoderConfig {
        d_text: 16,
        d_image: 16,
        d_joint: 16,
        n_layers_text: 1,
        n_heads_text: 2,
        n_heads_image: 2,
        ..EncoderConfig::desk(vocab.len())
    };
    let mut encoder = DualEncoder::init(config, 5).unwrap();
    encoder.freeze();
    let lines = [
        CorpusLine::text("gray cat sleeps on a pillow"),
        CorpusLine::text("a red ball rolls on the floor"),
    ];
    let corpus = prepare_corpus(
        &lines,
        &encoder,
        &vocab,
        &PosLexicon::builtin(),
        MaskPolicy::AllKeywords,
        Supervision::TextAnchored,
    )
    .unwrap();
    assert_eq!(corpus.used(), 2);
    let batch: Vec<_> = corpus.examples.iter().collect();

    let mut phi = ProjectionModule::init(
        ProjectionConfig {
            d_joint: 16,
            d_text: 16,
            dropout: 0.0,
        },
        1,
    )
    .unwrap();
    phi.randomize(&mut ChaCha8Rng::seed_from_u64(2));
    let cfg = TrainConfig {
        dropout: 0.0,
        noise: NoiseKind::ScaledGaussian,
        ..Default::default()
    };
    let loss_of =
        |phi: &ProjectionModule| smp_step(&batch, &encoder, phi, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let (loss, grads) = loss_of(&phi);
    assert!(loss > 0.0);

    let mut worst: f64 = 0.0;
    for (p, grad) in grads.iter().enumerate() {
        let shape = phi.params()[p].value.shape().to_vec();
        let r = check_function(phi.params()[p].value.data(), grad.data(), H, |x| {
            let mut moved = phi.clone();
            moved.params_mut()[p].value = Tensor::new(shape.clone(), x.to_vec())?;
            Ok(loss_of(&moved).0)
        })
        .unwrap();
        assert!(r.worst <= TOL, "param {p}: worst rel err {:.2e} at {:?}", r.worst, r.at);
        worst = worst.max(r.worst);
    }
    assert!(
        start.elapsed().as_secs() < 60,
        "gradient check took {:?}",
        start.elapsed()
    );
    eprintln!("smp loss {loss:.6}, worst rel err {worst:.2e}");
}
