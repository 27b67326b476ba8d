//! Procedural shapes: colored squares, circles and triangles on black.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, ImageError, PnmFormat};
use crate::layout::{BoundingBox, Layout, LayoutEntry};
use crate::model::BOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the point (u, v), relative to the shape's box in [0, 1]², is covered.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // Apex at top center, base along the bottom edge.
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
        }
    }
}

/// A named color prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Color {
    pub name: String,
    pub rgb: [f64; 3],
}

pub fn default_palette() -> Vec<Color> {
    let c = |name: &str, rgb: [f64; 3]| Color { name: name.into(), rgb };
    vec![
        c("red", [1.0, 0.0, 0.0]),
        c("green", [0.0, 1.0, 0.0]),
        c("blue", [0.0, 0.0, 1.0]),
        c("yellow", [1.0, 1.0, 0.0]),
        c("magenta", [1.0, 0.0, 1.0]),
        c("cyan", [0.0, 1.0, 1.0]),
    ]
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VocabError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("unknown token id {0}")]
    UnknownId(usize),
}

/// Word-level vocabulary; id 0 is the start token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<String> = vec!["<s>".into(), "a".into(), "and".into()];
        words.extend(default_palette().into_iter().map(|c| c.name));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Whitespace-split caption to ids, with the start token prepended.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>, VocabError> {
        let mut ids = vec![BOS];
        for w in caption.split_whitespace() {
            ids.push(self.id(w).ok_or_else(|| VocabError::UnknownWord(w.to_string()))?);
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, VocabError> {
        let words = ids
            .iter()
            .filter(|&&id| id != BOS)
            .map(|&id| self.word(id).ok_or(VocabError::UnknownId(id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels.
    pub min_extent: usize,
    pub max_extent: usize,
    pub shapes: Vec<Shape>,
    pub palette: Vec<Color>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            min_objects: 1,
            max_objects: 3,
            min_extent: 8,
            max_extent: 14,
            shapes: Shape::ALL.to_vec(),
            palette: default_palette(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.image_size == 0 || self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err("need image_size > 0 and 1 <= min_objects <= max_objects".into());
        }
        if self.min_extent == 0 || self.min_extent > self.max_extent || self.max_extent > self.image_size {
            return Err("need 0 < min_extent <= max_extent <= image_size".into());
        }
        if self.shapes.is_empty() || self.palette.len() < self.max_objects {
            return Err("need at least one shape and a color per object".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeObject {
    pub shape: Shape,
    pub color: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Position of the color word in the caption tokens.
    pub token_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub image: Image,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub objects: Vec<ShapeObject>,
}

impl ShapeSample {
    /// Layout whose entries are the color tokens and their boxes.
    pub fn layout(&self) -> Layout {
        let entries = self
            .objects
            .iter()
            .map(|o| LayoutEntry {
                token_index: o.token_index,
                bbox: o.bbox,
                label: format!("{} {}", o.color, o.shape.name()),
            })
            .collect();
        Layout::new(self.tokens.clone(), entries).expect("generated layouts are valid")
    }
}

fn overlaps(a: &(usize, usize, usize), b: &(usize, usize, usize)) -> bool {
    let (ax, ay, asz) = *a;
    let (bx, by, bsz) = *b;
    ax < bx + bsz && bx < ax + asz && ay < by + bsz && by < ay + asz
}

/// Draws one random image with its caption and boxes.
pub fn generate_sample<R: Rng + ?Sized>(spec: &DatasetSpec, vocab: &Vocab, rng: &mut R) -> ShapeSample {
    let size = spec.image_size;
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..64 {
            let s = rng.random_range(spec.min_extent..=spec.max_extent);
            let x = rng.random_range(0..=size - s);
            let y = rng.random_range(0..=size - s);
            let cand = (x, y, s);
            if placed.iter().all(|p| !overlaps(p, &cand)) {
                placed.push(cand);
                break;
            }
        }
    }
    let colors: Vec<&Color> = spec.palette.choose_multiple(rng, placed.len()).collect();

    let mut image = Image::new(size, size, 3);
    let mut objects = Vec::with_capacity(placed.len());
    let mut words: Vec<String> = Vec::new();
    for (&(x, y, s), color) in placed.iter().zip(&colors) {
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        for py in y..y + s {
            for px in x..x + s {
                let u = (px - x) as f64 / s as f64 + 0.5 / s as f64;
                let v = (py - y) as f64 / s as f64 + 0.5 / s as f64;
                if shape.covers(u, v) {
                    image.pixel_mut(px, py).copy_from_slice(&color.rgb);
                }
            }
        }
        if !words.is_empty() {
            words.push("and".into());
        }
        words.push("a".into());
        words.push(color.name.clone());
        words.push(shape.name().into());
        let f = size as f64;
        objects.push(ShapeObject {
            shape,
            color: color.name.clone(),
            bbox: BoundingBox::new(x as f64 / f, y as f64 / f, (x + s) as f64 / f, (y + s) as f64 / f)
                .expect("object inside image"),
            // +1 for the start token; the color follows "a".
            token_index: words.len() - 1,
        });
    }
    let caption = words.join(" ");
    let tokens = vocab.encode(&caption).expect("captions use vocabulary words");
    ShapeSample {
        image,
        caption,
        tokens,
        objects,
    }
}

/// Deterministic, endless stream of samples for a seed.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> impl Iterator<Item = ShapeSample> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::default();
    std::iter::repeat_with(move || generate_sample(spec, &vocab, &mut rng))
}

#[derive(Debug, Serialize)]
struct IndexEntry<'a> {
    file: String,
    caption: &'a str,
    tokens: &'a [usize],
    objects: &'a [ShapeObject],
}

/// Writes `count` samples as PPM files plus an `index.json`.
pub fn dump_dataset(
    spec: &DatasetSpec,
    seed: u64,
    count: usize,
    dir: &std::path::Path,
) -> Result<(), ImageError> {
    let io = |source| ImageError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let samples: Vec<ShapeSample> = generate_dataset(spec, seed).take(count).collect();
    let mut index = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:05}.ppm");
        s.image.write(dir.join(&file), PnmFormat::Ppm)?;
        index.push(IndexEntry {
            file,
            caption: &s.caption,
            tokens: &s.tokens,
            objects: &s.objects,
        });
    }
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(dir.join("index.json"), json).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn checksum(img: &Image) -> Vec<u8> {
        let mut h = Sha256::new();
        for v in &img.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().to_vec()
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::default();
        assert_eq!(v.len(), 12);
        let ids = v.encode("a red square and a blue circle").unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(v.decode(&ids).unwrap(), "a red square and a blue circle");
        assert!(v.encode("a purple square").is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = DatasetSpec::default();
        let a: Vec<_> = generate_dataset(&spec, 4).take(3).collect();
        let b: Vec<_> = generate_dataset(&spec, 4).take(3).collect();
        assert_eq!(checksum(&a[0].image), checksum(&b[0].image));
        assert_eq!(a, b);
        let c = generate_dataset(&spec, 5).next().unwrap();
        assert_ne!(checksum(&a[0].image), checksum(&c.image));
    }

    #[test]
    fn shape_pixels_lie_in_their_boxes() {
        let spec = DatasetSpec::default();
        let palette = default_palette();
        for s in generate_dataset(&spec, 11).take(200) {
            assert!(!s.objects.is_empty() && s.objects.len() <= 3);
            let mut per_object = vec![0usize; s.objects.len()];
            for py in 0..32 {
                for px in 0..32 {
                    let p = s.image.pixel(px, py);
                    if p.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let name = &palette.iter().find(|c| c.rgb == p).unwrap().name;
                    let k = s.objects.iter().position(|o| &o.color == name).unwrap();
                    let (x, y) = ((px as f64 + 0.5) / 32.0, (py as f64 + 0.5) / 32.0);
                    assert!(s.objects[k].bbox.contains(x, y));
                    per_object[k] += 1;
                }
            }
            assert!(per_object.iter().all(|&c| c > 0));
            for o in &s.objects {
                assert_eq!(Vocab::default().word(s.tokens[o.token_index]), Some(o.color.as_str()));
            }
        }
    }

    #[test]
    fn layout_from_sample_is_valid() {
        let s = generate_dataset(&DatasetSpec::default(), 2).next().unwrap();
        let layout = s.layout();
        assert_eq!(layout.len(), s.objects.len());
    }

    #[test]
    fn dump_writes_index() {
        let dir = tempfile::tempdir().unwrap();
        dump_dataset(&DatasetSpec::default(), 1, 3, dir.path()).unwrap();
        assert!(dir.path().join("00002.ppm").exists());
        let index: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
        assert_eq!(index.as_array().unwrap().len(), 3);
    }
}
