//! Grid scenes and question/answer samples whose answer depends on exactly
//! one known cell.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::tensor::Tensor;
use crate::toy::vocab::{self, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Object { shape: Shape, color: Color },
}

/// Width of a cell feature: one-hot shape (with an "empty" slot), one-hot
/// color, then row and column scaled to [0, 1].
pub const FEATURE_DIM: usize = 4 + 4 + 2;

const EMPTY_PROB: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    grid: usize,
    cells: Vec<Cell>,
}

impl Scene {
    pub fn new(grid: usize, cells: Vec<Cell>) -> Self {
        assert_eq!(cells.len(), grid * grid, "scene needs grid² cells");
        Scene { grid, cells }
    }

    pub fn random<R: Rng>(grid: usize, rng: &mut R) -> Self {
        let cells = (0..grid * grid)
            .map(|_| {
                if rng.gen_bool(EMPTY_PROB) {
                    Cell::Empty
                } else {
                    Cell::Object {
                        shape: *Shape::ALL.choose(rng).expect("nonempty"),
                        color: *Color::ALL.choose(rng).expect("nonempty"),
                    }
                }
            })
            .collect();
        Scene { grid, cells }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn n_patches(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, index: usize) -> Cell {
        self.cells[index]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn set(&mut self, index: usize, cell: Cell) {
        self.cells[index] = cell;
    }

    /// One feature row per cell, row-major over the grid.
    pub fn features(&self) -> Tensor {
        let g = self.grid;
        let denom = (g.max(2) - 1) as f64;
        let mut out = Tensor::zeros(&[self.cells.len(), FEATURE_DIM]);
        for (i, cell) in self.cells.iter().enumerate() {
            let row = out.row_mut(i);
            match cell {
                Cell::Empty => row[3] = 1.0,
                Cell::Object { shape, color } => {
                    row[shape.index()] = 1.0;
                    row[4 + color.index()] = 1.0;
                }
            }
            row[8] = (i / g) as f64 / denom;
            row[9] = (i % g) as f64 / denom;
        }
        out
    }

    fn objects(&self) -> impl Iterator<Item = (usize, Shape, Color)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| match *c {
            Cell::Object { shape, color } => Some((i, shape, color)),
            Cell::Empty => None,
        })
    }
}

/// The two question families. `InDomain` addresses a cell by position;
/// `Shifted` addresses it by a unique attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distribution {
    InDomain,
    Shifted,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::InDomain => "d_in",
            Distribution::Shifted => "d_shift",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    ColorAt { row: usize, col: usize },
    ShapeAt { row: usize, col: usize },
    ShapeOfColor(Color),
    ColorOfShape(Shape),
}

impl Question {
    pub fn tokens(&self) -> Vec<Token> {
        use vocab::*;
        match *self {
            Question::ColorAt { row, col } => {
                vec![COLOR, AT, ROW, digit(row), COL, digit(col), QMARK]
            }
            Question::ShapeAt { row, col } => {
                vec![SHAPE, AT, ROW, digit(row), COL, digit(col), QMARK]
            }
            Question::ShapeOfColor(c) => vec![SHAPE, OF, THE, color_token(c), THING, QMARK],
            Question::ColorOfShape(s) => vec![COLOR, OF, THE, shape_token(s), THING, QMARK],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaSample {
    pub scene: Scene,
    pub question: Question,
    pub answer: Vec<Token>,
    pub oracle_patch: usize,
    pub distribution: Distribution,
}

impl QaSample {
    pub fn question_tokens(&self) -> Vec<Token> {
        self.question.tokens()
    }

    /// Answer followed by the end token: the full generation target.
    pub fn target_tokens(&self) -> Vec<Token> {
        let mut t = self.answer.clone();
        t.push(vocab::EOS);
        t
    }

    pub fn generate<R: Rng>(dist: Distribution, grid: usize, rng: &mut R) -> Self {
        match dist {
            Distribution::InDomain => Self::in_domain(grid, rng),
            Distribution::Shifted => Self::shifted(grid, rng),
        }
    }

    fn in_domain<R: Rng>(grid: usize, rng: &mut R) -> Self {
        let mut scene = Scene::random(grid, rng);
        let target = rng.gen_range(0..scene.n_patches());
        if scene.cell(target) == Cell::Empty {
            scene.set(
                target,
                Cell::Object {
                    shape: *Shape::ALL.choose(rng).expect("nonempty"),
                    color: *Color::ALL.choose(rng).expect("nonempty"),
                },
            );
        }
        let Cell::Object { shape, color } = scene.cell(target) else {
            unreachable!("target cell filled above")
        };
        let (row, col) = (target / grid, target % grid);
        let (question, answer) = if rng.gen_bool(0.5) {
            (Question::ColorAt { row, col }, vocab::color_token(color))
        } else {
            (Question::ShapeAt { row, col }, vocab::shape_token(shape))
        };
        QaSample {
            scene,
            question,
            answer: vec![answer],
            oracle_patch: target,
            distribution: Distribution::InDomain,
        }
    }

    fn shifted<R: Rng>(grid: usize, rng: &mut R) -> Self {
        let mut scene = Scene::random(grid, rng);
        let target = rng.gen_range(0..scene.n_patches());
        let shape = *Shape::ALL.choose(rng).expect("nonempty");
        let color = *Color::ALL.choose(rng).expect("nonempty");
        scene.set(target, Cell::Object { shape, color });
        let by_color = rng.gen_bool(0.5);
        // Make the referenced attribute unique to the target cell.
        let others: Vec<(usize, Shape, Color)> = scene.objects().filter(|o| o.0 != target).collect();
        for (i, s, c) in others {
            if by_color && c == color {
                let alt: Vec<Color> = Color::ALL.iter().copied().filter(|&x| x != color).collect();
                scene.set(i, Cell::Object { shape: s, color: *alt.choose(rng).expect("nonempty") });
            } else if !by_color && s == shape {
                let alt: Vec<Shape> = Shape::ALL.iter().copied().filter(|&x| x != shape).collect();
                scene.set(i, Cell::Object { shape: *alt.choose(rng).expect("nonempty"), color: c });
            }
        }
        let (question, answer) = if by_color {
            (Question::ShapeOfColor(color), vocab::shape_token(shape))
        } else {
            (Question::ColorOfShape(shape), vocab::color_token(color))
        };
        QaSample {
            scene,
            question,
            answer: vec![answer],
            oracle_patch: target,
            distribution: Distribution::Shifted,
        }
    }

    /// Recomputes the answer from the scene alone.
    pub fn solve(scene: &Scene, question: Question) -> Option<(Token, usize)> {
        let g = scene.grid();
        match question {
            Question::ColorAt { row, col } | Question::ShapeAt { row, col } => {
                let idx = row * g + col;
                match (scene.cell(idx), question) {
                    (Cell::Object { color, .. }, Question::ColorAt { .. }) => Some((vocab::color_token(color), idx)),
                    (Cell::Object { shape, .. }, _) => Some((vocab::shape_token(shape), idx)),
                    (Cell::Empty, _) => None,
                }
            }
            Question::ShapeOfColor(c) => {
                let hits: Vec<_> = scene.objects().filter(|o| o.2 == c).collect();
                (hits.len() == 1).then(|| (vocab::shape_token(hits[0].1), hits[0].0))
            }
            Question::ColorOfShape(s) => {
                let hits: Vec<_> = scene.objects().filter(|o| o.1 == s).collect();
                (hits.len() == 1).then(|| (vocab::color_token(hits[0].2), hits[0].0))
            }
        }
    }
}

/// Fraction of samples answered by always emitting the most common answer,
/// estimated from `n` draws.
pub fn majority_rate<R: Rng>(dist: Distribution, grid: usize, n: usize, rng: &mut R) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for _ in 0..n {
        let s = QaSample::generate(dist, grid, rng);
        *counts.entry(s.answer.clone()).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / n as f64
}
