//! Procedural vision-language data: coloured shapes on a 2×2 grid, with
//! captions, descriptions and question/answer instructions derived exactly
//! from the scene specification.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assemble::{MultimodalSample, CAPTION_TEMPLATE};
use crate::error::{Error, Result};
use crate::patch::ImageTensor;
use crate::rng::stream;
use crate::text::TextVocab;

pub const GRID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Cross => "cross",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Square => "squares",
            Shape::Circle => "circles",
            Shape::Cross => "crosses",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Channel intensities; single-channel images use a distinct grey level.
    pub fn intensities(self, channels: usize) -> Vec<f32> {
        let rgb = match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        };
        match channels {
            3 => rgb.to_vec(),
            _ => {
                let grey = match self {
                    Color::Red => 0.4,
                    Color::Green => 0.6,
                    Color::Blue => 0.8,
                    Color::Yellow => 1.0,
                };
                vec![grey; channels]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    /// Half-extent in units of a 16-pixel cell.
    fn radius(self) -> f32 {
        match self {
            Size::Small => 5.0 / 16.0,
            Size::Large => 7.0 / 16.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
    pub size: Size,
}

pub fn position_words(row: usize, col: usize) -> &'static str {
    match (row, col) {
        (0, 0) => "top left",
        (0, _) => "top right",
        (_, 0) => "bottom left",
        _ => "bottom right",
    }
}

/// A scene: objects on a 2×2 grid, at most one per cell.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub objects: Vec<ShapeObject>,
}

impl ImageSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [[false; GRID]; GRID];
        for o in &self.objects {
            if o.row >= GRID || o.col >= GRID {
                return Err(Error::Dataset(format!("cell ({}, {}) outside the grid", o.row, o.col)));
            }
            if std::mem::replace(&mut seen[o.row][o.col], true) {
                return Err(Error::Dataset(format!("two objects in cell ({}, {})", o.row, o.col)));
            }
        }
        Ok(())
    }

    pub fn at(&self, row: usize, col: usize) -> Option<&ShapeObject> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }

    pub fn count(&self, shape: Shape) -> usize {
        self.objects.iter().filter(|o| o.shape == shape).count()
    }

    /// Objects ordered by cell, row-major.
    pub fn sorted(&self) -> Vec<ShapeObject> {
        let mut v = self.objects.clone();
        v.sort_by_key(|o| (o.row, o.col));
        v
    }

    pub fn render(&self, channels: usize, width: usize, height: usize) -> Result<ImageTensor> {
        self.validate()?;
        let mut img = ImageTensor::zeros(channels, width, height);
        let (cw, ch) = (width as f32 / GRID as f32, height as f32 / GRID as f32);
        for o in &self.objects {
            let (cx, cy) = ((o.col as f32 + 0.5) * cw, (o.row as f32 + 0.5) * ch);
            let (rx, ry) = (o.size.radius() * cw, o.size.radius() * ch);
            let (tx, ty) = (rx * 0.4, ry * 0.4);
            let color = o.color.intensities(channels);
            for y in 0..height {
                for x in 0..width {
                    let dx = x as f32 + 0.5 - cx;
                    let dy = y as f32 + 0.5 - cy;
                    let inside = match o.shape {
                        Shape::Square => dx.abs() <= rx && dy.abs() <= ry,
                        Shape::Circle => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
                        Shape::Cross => {
                            (dx.abs() <= tx && dy.abs() <= ry) || (dy.abs() <= ty && dx.abs() <= rx)
                        }
                    };
                    if inside {
                        for (c, &v) in color.iter().enumerate() {
                            img.set(c, x, y, v);
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn caption(&self) -> String {
        self.sorted()
            .iter()
            .map(|o| format!("{} {} {}", o.color.word(), o.shape.word(), position_words(o.row, o.col)))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    pub fn description(&self) -> String {
        let objs = self.sorted();
        let mut s = match objs.len() {
            1 => "there is 1 object .".to_string(),
            n => format!("there are {n} objects ."),
        };
        for o in objs {
            let size = match o.size {
                Size::Small => "small",
                Size::Large => "large",
            };
            s.push_str(&format!(
                " a {size} {} {} at {} .",
                o.color.word(),
                o.shape.word(),
                position_words(o.row, o.col)
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Spec(ImageSpec),
    Pixels(ImageTensor),
}

impl ImageSource {
    pub fn render(&self, channels: usize, width: usize, height: usize) -> Result<ImageTensor> {
        match self {
            ImageSource::Spec(spec) => spec.render(channels, width, height),
            ImageSource::Pixels(img) => {
                if (img.channels, img.width, img.height) != (channels, width, height) {
                    return Err(Error::Dataset(format!(
                        "pixel block is {}×{}×{}, model expects {channels}×{width}×{height}",
                        img.channels, img.width, img.height
                    )));
                }
                ImageTensor::new(channels, width, height, img.pixels.clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Caption,
    Description,
    Instruction,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::Caption, DatasetKind::Description, DatasetKind::Instruction];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Caption => "caption",
            DatasetKind::Description => "description",
            DatasetKind::Instruction => "instruction",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown dataset kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Count,
    Color,
    Shape,
    Position,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] = [
        QuestionKind::Count,
        QuestionKind::Color,
        QuestionKind::Shape,
        QuestionKind::Position,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::Count => "count",
            QuestionKind::Color => "color",
            QuestionKind::Shape => "shape",
            QuestionKind::Position => "position",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub kind: DatasetKind,
    pub image: ImageSource,
    pub prompt: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<QuestionKind>,
}

impl DatasetRecord {
    pub fn to_sample(&self, vocab: &TextVocab, channels: usize, width: usize, height: usize) -> Result<MultimodalSample> {
        if self.target.trim().is_empty() {
            return Err(Error::Dataset("record with empty target".into()));
        }
        let mut target = vocab.encode(&self.target);
        target.push(vocab.eos());
        Ok(MultimodalSample {
            prompt: vocab.encode(&self.prompt),
            target,
            image: Some(self.image.render(channels, width, height)?),
        })
    }
}

fn random_cells<R: Rng>(rng: &mut R, n: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|i| (i / GRID, i % GRID)).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells
}

fn random_object<R: Rng>(rng: &mut R, (row, col): (usize, usize), shape: Shape) -> ShapeObject {
    ShapeObject {
        shape,
        color: *Color::ALL.choose(rng).expect("non-empty"),
        row,
        col,
        size: if rng.random_bool(0.5) { Size::Small } else { Size::Large },
    }
}

fn random_scene<R: Rng>(rng: &mut R, min: usize, max: usize) -> ImageSpec {
    let n = rng.random_range(min..=max);
    let objects = random_cells(rng, n)
        .into_iter()
        .map(|cell| {
            let shape = *Shape::ALL.choose(rng).expect("non-empty");
            random_object(rng, cell, shape)
        })
        .collect();
    ImageSpec { objects }
}

pub fn caption_record<R: Rng>(rng: &mut R) -> DatasetRecord {
    let spec = random_scene(rng, 1, 2);
    DatasetRecord {
        kind: DatasetKind::Caption,
        prompt: CAPTION_TEMPLATE.to_string(),
        target: spec.caption(),
        image: ImageSource::Spec(spec),
        question: None,
    }
}

pub fn description_record<R: Rng>(rng: &mut R) -> DatasetRecord {
    let spec = random_scene(rng, 1, 4);
    DatasetRecord {
        kind: DatasetKind::Description,
        prompt: "<image> describe the image .".to_string(),
        target: spec.description(),
        image: ImageSource::Spec(spec),
        question: None,
    }
}

/// Question and exact answer for a scene.
pub fn ask(spec: &ImageSpec, question: QuestionKind, subject: Option<ShapeObject>, cell: (usize, usize)) -> (String, String) {
    match question {
        QuestionKind::Count => {
            let shape = subject.map_or(Shape::Square, |o| o.shape);
            (
                format!("how many {} are there ?", shape.plural()),
                spec.count(shape).to_string(),
            )
        }
        QuestionKind::Color => {
            let o = subject.expect("color question needs a subject");
            (format!("what color is the {} ?", o.shape.word()), o.color.word().to_string())
        }
        QuestionKind::Shape => (
            format!("what shape is at {} ?", position_words(cell.0, cell.1)),
            spec.at(cell.0, cell.1).map_or("nothing", |o| o.shape.word()).to_string(),
        ),
        QuestionKind::Position => {
            let o = subject.expect("position question needs a subject");
            (
                format!("where is the {} {} ?", o.color.word(), o.shape.word()),
                position_words(o.row, o.col).to_string(),
            )
        }
    }
}

pub fn instruction_record<R: Rng>(rng: &mut R, question: QuestionKind) -> DatasetRecord {
    let (spec, subject, cell) = match question {
        QuestionKind::Count => {
            let spec = random_scene(rng, 1, 4);
            let shape = *Shape::ALL.choose(rng).expect("non-empty");
            let subject = ShapeObject {
                shape,
                color: Color::Red,
                row: 0,
                col: 0,
                size: Size::Small,
            };
            (spec, Some(subject), (0, 0))
        }
        QuestionKind::Color => {
            // The asked-about shape appears exactly once.
            let n = rng.random_range(1..=4);
            let cells = random_cells(rng, n);
            let target = *Shape::ALL.choose(rng).expect("non-empty");
            let others: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != target).collect();
            let mut objects = vec![random_object(rng, cells[0], target)];
            for &c in &cells[1..] {
                let s = *others.choose(rng).expect("non-empty");
                objects.push(random_object(rng, c, s));
            }
            let subject = objects[0];
            (ImageSpec { objects }, Some(subject), (0, 0))
        }
        QuestionKind::Shape => {
            let spec = random_scene(rng, 1, 3);
            let cell = (rng.random_range(0..GRID), rng.random_range(0..GRID));
            (spec, None, cell)
        }
        QuestionKind::Position => {
            // The asked-about colour/shape pair appears exactly once.
            loop {
                let spec = random_scene(rng, 1, 4);
                let pick = *spec.objects.choose(rng).expect("non-empty scene");
                let unique = spec
                    .objects
                    .iter()
                    .filter(|o| o.shape == pick.shape && o.color == pick.color)
                    .count()
                    == 1;
                if unique {
                    break (spec, Some(pick), (0, 0));
                }
            }
        }
    };
    let (q, a) = ask(&spec, question, subject, cell);
    DatasetRecord {
        kind: DatasetKind::Instruction,
        prompt: format!("<image> {q}"),
        target: a,
        image: ImageSource::Spec(spec),
        question: Some(question),
    }
}

/// Record `index` of a split; each record draws from its own stream, so the
/// output does not depend on generation order.
pub fn generate_record(seed: u64, split: &str, kind: DatasetKind, index: u64) -> DatasetRecord {
    let mut rng = stream(seed, &format!("data/{split}/{kind}"), index);
    match kind {
        DatasetKind::Caption => caption_record(&mut rng),
        DatasetKind::Description => description_record(&mut rng),
        DatasetKind::Instruction => {
            let q = QuestionKind::ALL[(index % QuestionKind::ALL.len() as u64) as usize];
            instruction_record(&mut rng, q)
        }
    }
}

pub fn generate(seed: u64, split: &str, kind: DatasetKind, count: usize) -> Vec<DatasetRecord> {
    (0..count as u64).map(|i| generate_record(seed, split, kind, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataCounts {
    pub captions: usize,
    pub descriptions: usize,
    pub instructions: usize,
    pub heldout: usize,
}

impl Default for DataCounts {
    fn default() -> Self {
        Self {
            captions: 4000,
            descriptions: 4000,
            instructions: 8000,
            heldout: 512,
        }
    }
}

pub const HELDOUT_FILE: &str = "heldout.jsonl";

pub fn split_file(kind: DatasetKind) -> String {
    format!("{}.jsonl", kind.name())
}

/// In-memory version of the files written by [`write_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub captions: Vec<DatasetRecord>,
    pub descriptions: Vec<DatasetRecord>,
    pub instructions: Vec<DatasetRecord>,
    /// Instruction records from an independent stream.
    pub heldout: Vec<DatasetRecord>,
}

impl DataBundle {
    pub fn generate(seed: u64, counts: DataCounts) -> Result<Self> {
        if counts.captions == 0 || counts.descriptions == 0 || counts.instructions == 0 || counts.heldout == 0 {
            return Err(Error::Dataset("every split needs at least one record".into()));
        }
        Ok(Self {
            captions: generate(seed, "train", DatasetKind::Caption, counts.captions),
            descriptions: generate(seed, "train", DatasetKind::Description, counts.descriptions),
            instructions: generate(seed, "train", DatasetKind::Instruction, counts.instructions),
            heldout: generate(seed, "heldout", DatasetKind::Instruction, counts.heldout),
        })
    }

    pub fn split(&self, kind: DatasetKind) -> &[DatasetRecord] {
        match kind {
            DatasetKind::Caption => &self.captions,
            DatasetKind::Description => &self.descriptions,
            DatasetKind::Instruction => &self.instructions,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for kind in DatasetKind::ALL {
            write_records(&dir.join(split_file(kind)), self.split(kind))?;
        }
        write_records(&dir.join(HELDOUT_FILE), &self.heldout)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            captions: read_records(&dir.join(split_file(DatasetKind::Caption)))?,
            descriptions: read_records(&dir.join(split_file(DatasetKind::Description)))?,
            instructions: read_records(&dir.join(split_file(DatasetKind::Instruction)))?,
            heldout: read_records(&dir.join(HELDOUT_FILE))?,
        })
    }
}

pub fn write_dataset(seed: u64, counts: DataCounts, dir: &Path) -> Result<DataBundle> {
    let bundle = DataBundle::generate(seed, counts)?;
    bundle.write(dir)?;
    Ok(bundle)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Samples of one kind, ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub samples: Vec<MultimodalSample>,
    pub questions: Vec<Option<QuestionKind>>,
}

impl Dataset {
    pub fn from_records(
        records: &[DatasetRecord],
        vocab: &TextVocab,
        channels: usize,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let kind = records
            .first()
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?
            .kind;
        if let Some(r) = records.iter().find(|r| r.kind != kind) {
            return Err(Error::Dataset(format!("mixed dataset kinds: {} and {}", kind, r.kind)));
        }
        let samples = records
            .iter()
            .map(|r| r.to_sample(vocab, channels, width, height))
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            samples,
            questions: records.iter().map(|r| r.question).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(row: usize, col: usize) -> ShapeObject {
        ShapeObject {
            shape: Shape::Square,
            color: Color::Red,
            row,
            col,
            size: Size::Large,
        }
    }

    /// 4-connected components of non-black pixels.
    fn blobs(img: &ImageTensor) -> usize {
        let (w, h) = (img.width, img.height);
        let lit = |x: usize, y: usize| (0..img.channels).any(|c| img.get(c, x, y) > 0.0);
        let mut seen = vec![false; w * h];
        let mut n = 0;
        for start in 0..w * h {
            if seen[start] || !lit(start % w, start / w) {
                continue;
            }
            n += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut push = |nx: usize, ny: usize| {
                    let j = ny * w + nx;
                    if !seen[j] && lit(nx, ny) {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(x - 1, y);
                }
                if x + 1 < w {
                    push(x + 1, y);
                }
                if y > 0 {
                    push(x, y - 1);
                }
                if y + 1 < h {
                    push(x, y + 1);
                }
            }
        }
        n
    }

    #[test]
    fn count_answer_matches_rendered_blobs() {
        let spec = ImageSpec {
            objects: vec![square(0, 0), square(1, 1)],
        };
        let img = spec.render(3, 32, 32).unwrap();
        assert_eq!(blobs(&img), 2);
        let subject = Some(square(0, 0));
        let (q, a) = ask(&spec, QuestionKind::Count, subject, (0, 0));
        assert_eq!(q, "how many squares are there ?");
        assert_eq!(a, "2");
    }

    #[test]
    fn caption_grammar() {
        let spec = ImageSpec {
            objects: vec![square(0, 0)],
        };
        assert_eq!(spec.caption(), "red square top left");
        let v = TextVocab::standard();
        assert!(v.encode(&spec.description()).iter().all(|&id| v.decode(&[id]) != "<unk>"));
    }

    #[test]
    fn generation_is_deterministic_and_counted() {
        let counts = DataCounts {
            captions: 10,
            descriptions: 3,
            instructions: 8,
            heldout: 4,
        };
        let a = DataBundle::generate(7, counts).unwrap();
        let b = DataBundle::generate(7, counts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.captions.len(), 10);
        assert_eq!(a.descriptions.len(), 3);
        assert!(a.instructions.iter().all(|r| r.kind == DatasetKind::Instruction));
        assert_ne!(a.instructions[0], a.heldout[0]);
        assert!(DataBundle::generate(7, DataCounts { captions: 0, ..counts }).is_err());
    }

    #[test]
    fn instruction_answers_are_consistent() {
        let v = TextVocab::standard();
        for i in 0..200u64 {
            let rec = generate_record(3, "train", DatasetKind::Instruction, i);
            let ImageSource::Spec(spec) = &rec.image else { unreachable!() };
            spec.validate().unwrap();
            match rec.question.unwrap() {
                QuestionKind::Count => {
                    let n: usize = rec.target.parse().unwrap();
                    let shape = Shape::ALL.into_iter().find(|s| rec.prompt.contains(s.plural())).unwrap();
                    assert_eq!(n, spec.count(shape));
                }
                QuestionKind::Color => {
                    let shape = Shape::ALL.into_iter().find(|s| rec.prompt.contains(s.word())).unwrap();
                    assert_eq!(spec.count(shape), 1);
                }
                QuestionKind::Shape | QuestionKind::Position => {}
            }
            let s = rec.to_sample(&v, 3, 32, 32).unwrap();
            assert_eq!(s.indicator(v.image()).unwrap(), Some(0));
        }
    }

    #[test]
    fn records_round_trip_through_json_lines() {
        let dir = std::env::temp_dir().join(format!("ovis-data-{}", std::process::id()));
        let counts = DataCounts {
            captions: 3,
            descriptions: 2,
            instructions: 4,
            heldout: 2,
        };
        let bundle = write_dataset(11, counts, &dir).unwrap();
        assert_eq!(DataBundle::read(&dir).unwrap(), bundle);
        let _ = fs::remove_dir_all(&dir);
    }
}
