//! Composed queries: normalization, determinism and sensitivity to the
//! condition.

mod common;

use lincir_core::retrieval::{PromptTemplate, QueryComposer};
use lincir_core::smp::{ProjectionConfig, ProjectionModule};
use lincir_core::synth::{render, Scene};

#[test]
fn composed_queries() {
    let (encoder, vocab) = common::tiny_encoder(6);
    let phi = ProjectionModule::init(
        ProjectionConfig {
            d_joint: 16,
            d_text: 16,
            dropout: 0.5,
        },
        2,
    )
    .unwrap();
    let template = PromptTemplate::default();
    let composer = QueryComposer {
        encoder: &encoder,
        phi: &phi,
        vocab: &vocab,
        template: &template,
    };
    let img = render(&Scene::from_index(40), 24);
    let a = composer.compose_image(&img, "is red instead").unwrap();
    let b = composer.compose_image(&img, "is red instead").unwrap();
    let c = composer.compose_image(&img, "on a dark background").unwrap();
    assert!(a.normalized);
    assert!((a.values.l2_norm() - 1.0).abs() < 1e-12);
    assert_eq!(a, b);
    assert!(a.cosine(&c) < 1.0 - 1e-9);

    let long = vec!["red"; 40].join(" ");
    assert!(composer.compose_image(&img, &long).is_err());
}

#[test]
fn every_shipped_template_composes() {
    let (encoder, vocab) = common::tiny_encoder(6);
    let phi = ProjectionModule::init(
        ProjectionConfig {
            d_joint: 16,
            d_text: 16,
            dropout: 0.0,
        },
        2,
    )
    .unwrap();
    let z = encoder.image.encode_image(&render(&Scene::from_index(3), 24)).unwrap();
    for template in PromptTemplate::builtin() {
        let composer = QueryComposer {
            encoder: &encoder,
            phi: &phi,
            vocab: &vocab,
            template: &template,
        };
        let q = composer
            .compose(std::slice::from_ref(&z), &["is blue instead"])
            .unwrap();
        assert!(q[0].values.all_finite(), "{template}");
    }
}
