//! Container files: byte identity, corruption handling and the 32-bit bound.

mod common;

use lincir_core::checkpoint::{encoder_container, load_encoder, save_encoder, Container};
use lincir_core::encoder::{DualEncoder, EncoderConfig, Parameters};
use lincir_core::retrieval::GalleryIndex;
use lincir_core::smp::{ProjectionConfig, ProjectionModule};
use lincir_core::synth::{render, Scene};
use lincir_core::text::tokenize;
use lincir_core::Error;

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (encoder, vocab) = common::tiny_encoder(3);
    let a = dir.path().join("nested/a.lncr");
    let b = dir.path().join("b.lncr");
    save_encoder(&a, &encoder, &vocab).unwrap();
    let (back, back_vocab) = load_encoder(&a).unwrap();
    save_encoder(&b, &back, &back_vocab).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(back.is_frozen());
    assert_eq!(back_vocab, vocab);

    let phi = ProjectionModule::init(
        ProjectionConfig {
            d_joint: 16,
            d_text: 16,
            dropout: 0.5,
        },
        4,
    )
    .unwrap();
    let (p, q) = (dir.path().join("p.lncr"), dir.path().join("q.lncr"));
    phi.save(&p).unwrap();
    ProjectionModule::load(&p).unwrap().save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn latents_survive_the_32_bit_round_trip() {
    let vocab = lincir_core::experiment::world_vocabulary();
    // an unquantized model so the bound is exercised
    let encoder = DualEncoder::init(EncoderConfig::desk(vocab.len()), 8).unwrap();
    let bytes = encoder_container(&encoder, &vocab).unwrap().to_bytes().unwrap();
    let (back, _) = lincir_core::checkpoint::encoder_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
    let seq = tokenize("a large red cat on a white background", &vocab, 32);
    let before = encoder.text.encode_text(&seq, None).unwrap();
    let after = back.text.encode_text(&seq, None).unwrap();
    let scale = before.values.l2_norm();
    for (x, y) in before.as_slice().iter().zip(after.as_slice()) {
        assert!((x - y).abs() <= 1e-6 * scale.max(1.0), "{x} vs {y}");
    }
    let img = render(&Scene::from_index(5), 24);
    let zi = encoder.image.encode_image(&img).unwrap();
    let zj = back.image.encode_image(&img).unwrap();
    assert!(zi.cosine(&zj) > 1.0 - 1e-9);
}

#[test]
fn corrupt_files_are_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (encoder, vocab) = common::tiny_encoder(3);
    let path = dir.path().join("enc.lncr");
    save_encoder(&path, &encoder, &vocab).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_encoder(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_encoder(&path), Err(Error::Checkpoint(_))));

    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    std::fs::write(&path, &wrong_version).unwrap();
    assert!(matches!(load_encoder(&path), Err(Error::Checkpoint(_))));

    assert!(ProjectionModule::from_container(&Container::from_bytes(&bytes).unwrap()).is_err());
}

#[test]
fn gallery_index_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (encoder, _) = common::tiny_encoder(2);
    let scenes: Vec<Scene> = Scene::all().into_iter().take(12).collect();
    let images: Vec<_> = scenes.iter().map(|s| render(s, 24)).collect();
    let latents = encoder.image.encode_images(&images).unwrap();
    let index = GalleryIndex::build(scenes.iter().map(Scene::id).collect(), &latents).unwrap();
    let path = dir.path().join("index.lncr");
    index.save(&path).unwrap();
    let back = GalleryIndex::load(&path).unwrap();
    assert_eq!(back.ids(), index.ids());
    let q = &latents[4];
    let a = index.rank("q", q, None).unwrap();
    let b = back.rank("q", q, None).unwrap();
    assert_eq!(a.items[0].0, b.items[0].0);
    let again = dir.path().join("again.lncr");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
