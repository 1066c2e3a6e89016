//! Scene descriptions, their rasterization and their captions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textenc::{Vocab, END};
use diffcomp::Tensor;

pub const RESOLUTIONS: [usize; 3] = [16, 32, 64];
pub const NUM_CLASSES: usize = 24;
pub const BACKGROUNDS: [u8; 4] = [64, 96, 128, 160];

/// Radius as a fraction of the image side. With pixel-aligned centers these
/// give six distinct (kind, size) masks already at R=16.
const LARGE_RADIUS: f64 = 0.16;
const SMALL_RADIUS: f64 = 0.08;
/// Probability that a one-object caption names the size.
const SIZE_WORD_P: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Circle, Kind::Square, Kind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Kind::Circle => "circle",
            Kind::Square => "square",
            Kind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Cyan => [0, 255, 255],
            Color::Magenta => [255, 0, 255],
            Color::White => [255, 255, 255],
            Color::Black => [0, 0, 0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    pub fn radius(self, resolution: usize) -> f64 {
        let frac = match self {
            Size::Small => SMALL_RADIUS,
            Size::Large => LARGE_RADIUS,
        };
        frac * resolution as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Above, Relation::Below, Relation::LeftOf, Relation::RightOf];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::Above => &["above"],
            Relation::Below => &["below"],
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
        }
    }

    /// Whether `first` stands in this relation to `second`.
    pub fn holds(self, first: Cell, second: Cell) -> bool {
        match self {
            Relation::Above => first.row < second.row,
            Relation::Below => first.row > second.row,
            Relation::LeftOf => first.col < second.col,
            Relation::RightOf => first.col > second.col,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    /// Pixel-space center of the cell in a 3×3 grid over the image, snapped
    /// to the nearest pixel center so a shape rasterizes the same in every cell.
    pub fn center(self, resolution: usize) -> (f64, f64) {
        let side = resolution as f64 / 3.0;
        let snap = |k: u8| ((k as f64 + 0.5) * side).floor() + 0.5;
        (snap(self.col), snap(self.row))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub kind: Kind,
    pub color: Color,
    pub cell: Cell,
    pub size: Size,
}

impl Object {
    /// Whether the pixel centered at `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64, resolution: usize) -> bool {
        let (cx, cy) = self.cell.center(resolution);
        let r = self.size.radius(resolution);
        let (dx, dy) = (x - cx, y - cy);
        match self.kind {
            Kind::Circle => dx * dx + dy * dy <= r * r,
            Kind::Square => {
                // same area as the circle
                let half = r * std::f64::consts::PI.sqrt() / 2.0;
                dx.abs() <= half && dy.abs() <= half
            }
            Kind::Triangle => {
                // apex at (cx, cy − r), base from (cx − r, cy + r) to (cx + r, cy + r)
                let depth = dy + r;
                (0.0..=2.0 * r).contains(&depth) && dx.abs() <= depth / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScene {
    pub objects: Vec<Object>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
    /// Index into [`BACKGROUNDS`].
    pub background: u8,
}

pub fn class_of(kind: Kind, color: Color) -> usize {
    let k = Kind::ALL.iter().position(|&x| x == kind).unwrap_or(0);
    let c = Color::ALL.iter().position(|&x| x == color).unwrap_or(0);
    k * Color::ALL.len() + c
}

pub fn class_parts(class: usize) -> (Kind, Color) {
    (Kind::ALL[class / Color::ALL.len()], Color::ALL[class % Color::ALL.len()])
}

impl ShapeScene {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("scene: {msg}")));
        if self.objects.is_empty() || self.objects.len() > 2 {
            return bad("expected one or two objects");
        }
        if self.background as usize >= BACKGROUNDS.len() {
            return bad("background index out of range");
        }
        if self.objects.iter().any(|o| o.cell.row > 2 || o.cell.col > 2) {
            return bad("cell outside the 3×3 grid");
        }
        match (self.objects.as_slice(), self.relation) {
            ([_], None) => Ok(()),
            ([a, b], Some(rel)) if a.cell != b.cell && rel.holds(a.cell, b.cell) => Ok(()),
            ([_, _], _) => bad("two-object scene needs distinct cells consistent with its relation"),
            _ => bad("relation given for a single object"),
        }
    }

    pub fn class_label(&self) -> usize {
        let first = &self.objects[0];
        class_of(first.kind, first.color)
    }
}

pub fn check_resolution(resolution: usize) -> Result<()> {
    if RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "unsupported resolution {resolution}; expected one of {RESOLUTIONS:?}"
        )))
    }
}

/// Planar RGB bytes, `3·R·R`. Later objects paint over earlier ones.
pub fn render_scene_bytes(scene: &ShapeScene, resolution: usize) -> Result<Vec<u8>> {
    check_resolution(resolution)?;
    scene.validate()?;
    let plane = resolution * resolution;
    let bg = BACKGROUNDS[scene.background as usize];
    let mut out = vec![bg; 3 * plane];
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        for i in 0..resolution {
            for j in 0..resolution {
                if obj.contains(j as f64 + 0.5, i as f64 + 0.5, resolution) {
                    for (ch, &v) in rgb.iter().enumerate() {
                        out[ch * plane + i * resolution + j] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn byte_to_unit(v: u8) -> f32 {
    (v as f64 / 127.5 - 1.0) as f32
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn bytes_to_tensor(bytes: &[u8], channels: usize, height: usize, width: usize) -> Result<Tensor<f32>> {
    Ok(Tensor::new(
        &[channels, height, width],
        bytes.iter().map(|&b| byte_to_unit(b)).collect(),
    )?)
}

/// `3×R×R` image in `[−1, 1]`.
pub fn render_scene(scene: &ShapeScene, resolution: usize) -> Result<Tensor<f32>> {
    let bytes = render_scene_bytes(scene, resolution)?;
    bytes_to_tensor(&bytes, 3, resolution, resolution)
}

/// Caption token ids, terminated by the end token.
pub fn generate_caption(scene: &ShapeScene, vocab: &Vocab, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut words: Vec<&str> = Vec::with_capacity(10);
    match (scene.objects.as_slice(), scene.relation) {
        ([obj], _) => {
            words.push("a");
            if rng.random_bool(SIZE_WORD_P) {
                words.push(obj.size.word());
            }
            words.extend([obj.color.word(), obj.kind.word()]);
        }
        ([a, b], Some(rel)) => {
            words.extend(["a", a.color.word(), a.kind.word()]);
            words.extend(rel.words());
            words.extend(["a", b.color.word(), b.kind.word()]);
        }
        _ => return Err(Error::Invalid("scene has no caption grammar".into())),
    }
    let mut ids = words.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>>>()?;
    ids.push(END);
    Ok(ids)
}

/// Caption for a scene from its stored caption seed.
pub fn caption_from_seed(scene: &ShapeScene, vocab: &Vocab, caption_seed: u64) -> Result<Vec<usize>> {
    generate_caption(scene, vocab, &mut ChaCha8Rng::seed_from_u64(caption_seed))
}

fn pick_cell(rng: &mut impl Rng) -> Cell {
    Cell {
        row: rng.random_range(0..3),
        col: rng.random_range(0..3),
    }
}

/// Draws a scene whose first object has the given class. Two-object scenes
/// put a large first object and a small second object on a shared row
/// (left/right) or column (above/below) so the relation is unambiguous.
pub fn sample_scene(class: usize, rng: &mut impl Rng) -> ShapeScene {
    let (kind, color) = class_parts(class);
    let background = rng.random_range(0..BACKGROUNDS.len() as u8);
    if rng.random_bool(0.5) {
        let size = if rng.random_bool(0.5) { Size::Large } else { Size::Small };
        return ShapeScene {
            objects: vec![Object {
                kind,
                color,
                cell: pick_cell(rng),
                size,
            }],
            relation: None,
            background,
        };
    }
    let relation = Relation::ALL[rng.random_range(0..4)];
    let line = rng.random_range(0..3u8);
    // ordered pair along the line, lo < hi
    let (lo, hi) = [(0u8, 1u8), (0, 2), (1, 2)][rng.random_range(0..3)];
    let (p1, p2) = match relation {
        Relation::Above | Relation::LeftOf => (lo, hi),
        Relation::Below | Relation::RightOf => (hi, lo),
    };
    let (c1, c2) = match relation {
        Relation::Above | Relation::Below => (Cell { row: p1, col: line }, Cell { row: p2, col: line }),
        Relation::LeftOf | Relation::RightOf => (Cell { row: line, col: p1 }, Cell { row: line, col: p2 }),
    };
    let second = Object {
        kind: Kind::ALL[rng.random_range(0..3)],
        color: Color::ALL[rng.random_range(0..8)],
        cell: c2,
        size: Size::Small,
    };
    ShapeScene {
        objects: vec![
            Object {
                kind,
                color,
                cell: c1,
                size: Size::Large,
            },
            second,
        ],
        relation: Some(relation),
        background,
    }
}
