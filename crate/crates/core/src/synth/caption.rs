use rand::Rng;

use super::scene::Scene;

/// Caption templates over the four scene attributes.
pub const CAPTION_TEMPLATES: &[&str] = &[
    "a {size} {color} {object} on a {background} background",
    "a photo of a {size} {color} {object} on a {background} background",
    "a {color} {object} that is {size} on a {background} background",
    "the {object} is {color} and {size} on a {background} background",
    "a {background} background with a {size} {color} {object}",
    "a {size} {object} that is {color} against a {background} background",
];

/// Lines without adjectives or nouns; they exercise the skip path of the
/// trainer.
pub const FILLER_LINES: &[&str] = &[
    "look at this",
    "there it is now",
    "it is here again",
    "and then it was gone",
];

pub fn fill(template: &str, scene: &Scene) -> String {
    template
        .replace("{size}", scene.size.word())
        .replace("{color}", scene.color.word())
        .replace("{object}", scene.object.word())
        .replace("{background}", scene.background.word())
}

/// A caption from a uniformly chosen template.
///
/// # Panics
/// If `templates` is empty.
pub fn caption(scene: &Scene, templates: &[&str], rng: &mut impl Rng) -> String {
    assert!(!templates.is_empty(), "caption needs at least one template");
    let t = templates[rng.random_range(0..templates.len())];
    fill(t, scene)
}
