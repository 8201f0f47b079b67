use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! attribute {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn parse(word: &str) -> Result<Self> {
                match word {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Bench(format!(concat!("unknown ", stringify!($name), " {:?}"), word))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

attribute!(Object {
    Cat => "cat",
    Dog => "dog",
    Car => "car",
    Ball => "ball",
    Cube => "cube",
    Tree => "tree",
    House => "house",
    Fish => "fish",
});

attribute!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Gray => "gray",
    Black => "black",
});

attribute!(Size {
    Small => "small",
    Large => "large",
});

attribute!(Background {
    White => "white",
    Dark => "dark",
    Grid => "grid",
});

pub const SCENE_COUNT: usize = 8 * 6 * 2 * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scene {
    pub object: Object,
    pub color: Color,
    pub size: Size,
    pub background: Background,
}

impl Scene {
    /// Every scene in id order.
    pub fn all() -> Vec<Scene> {
        (0..SCENE_COUNT).map(Scene::from_index).collect()
    }

    pub fn from_index(i: usize) -> Scene {
        assert!(i < SCENE_COUNT, "scene index {i} out of range");
        let background = Background::ALL[i % 3];
        let size = Size::ALL[(i / 3) % 2];
        let color = Color::ALL[(i / 6) % 6];
        let object = Object::ALL[i / 36];
        Scene {
            object,
            color,
            size,
            background,
        }
    }

    pub fn index(&self) -> usize {
        ((self.object.index() * 6 + self.color.index()) * 2 + self.size.index()) * 3 + self.background.index()
    }

    /// Gallery item id, zero padded so string order equals index order.
    pub fn id(&self) -> String {
        format!("scene-{:03}", self.index())
    }

    pub fn parse_id(id: &str) -> Result<Scene> {
        id.strip_prefix("scene-")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n < SCENE_COUNT)
            .map(Scene::from_index)
            .ok_or_else(|| Error::Bench(format!("not a scene id: {id:?}")))
    }
}
