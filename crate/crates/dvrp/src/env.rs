//! Procedural vision-grounded reasoning tasks. Answers are deterministic
//! functions of image content given the query, so an image-blind predictor
//! is capped at the answer prior. A deliberate negative control
//! (`CountLeak`) leaks the answer into the query text.

use crate::error::{DvrpError, Result};
use crate::objective::accuracy_reward;
use crate::policy::TokenId;
use crate::rng::{self, CounterRng};
use crate::views::ImageGrid;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

/// Shared token vocabulary for the synthetic tasks.
///
/// | id    | meaning                            |
/// |-------|------------------------------------|
/// | 0     | end of sequence                    |
/// | 1     | answer separator                   |
/// | 2-7   | digits 1..=6 (counts)              |
/// | 8-10  | colors red / green / blue          |
/// | 11-12 | sides left / right                 |
/// | 13-15 | query markers count/majority/compare |
pub mod vocab {
    use crate::policy::TokenId;

    pub const EOS: TokenId = crate::policy::EOS_TOKEN;
    pub const SEP: TokenId = 1;
    pub const DIGIT_BASE: TokenId = 2; // digit d (1..=6) is DIGIT_BASE + d - 1
    pub const RED: TokenId = 8;
    pub const GREEN: TokenId = 9;
    pub const BLUE: TokenId = 10;
    pub const LEFT: TokenId = 11;
    pub const RIGHT: TokenId = 12;
    pub const Q_COUNT: TokenId = 13;
    pub const Q_MAJORITY: TokenId = 14;
    pub const Q_COMPARE: TokenId = 15;
    pub const SIZE: usize = 16;

    pub fn digit(d: u32) -> TokenId {
        assert!((1..=6).contains(&d));
        DIGIT_BASE + d - 1
    }
}

/// Image geometry shared by all generators: patch size 14 gives a 4 x 4
/// patch grid, so moderate mask probabilities destroy answer-relevant
/// evidence with high probability.
pub const IMAGE_HEIGHT: usize = 56;
pub const IMAGE_WIDTH: usize = 56;
pub const IMAGE_CHANNELS: usize = 3;
const BACKGROUND: f32 = 0.5;

/// Blob palette: each color deviates from the background by the same total
/// channel mass (+0.5 per pixel summed over channels), so blob count reads
/// out linearly from pooled pixel statistics while hue still distinguishes
/// colors.
const PALETTE: [[f32; 3]; 3] = [[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Count colored square blobs; answer is the count digit. Counts are
    /// uniform over 1..=6, so the blind prior is 1/6.
    Count,
    /// Most frequent blob color among five blobs; blind prior 1/3.
    Majority,
    /// Which half holds more blobs; blind prior 1/2.
    Compare,
    /// Count task whose query leaks the answer digit: the linguistic
    /// shortcut negative control for the blind harness.
    CountLeak,
}

impl GeneratorKind {
    pub fn name(&self) -> &'static str {
        match self {
            GeneratorKind::Count => "count",
            GeneratorKind::Majority => "majority",
            GeneratorKind::Compare => "compare",
            GeneratorKind::CountLeak => "count_leak",
        }
    }

    /// Accuracy ceiling of the best image-blind predictor (max answer-class
    /// probability under the generator's sampling law).
    pub fn blind_prior(&self) -> f64 {
        match self {
            GeneratorKind::Count => 1.0 / 6.0,
            GeneratorKind::Majority => 1.0 / 3.0,
            GeneratorKind::Compare => 0.5,
            GeneratorKind::CountLeak => 1.0,
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = DvrpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(GeneratorKind::Count),
            "majority" => Ok(GeneratorKind::Majority),
            "compare" => Ok(GeneratorKind::Compare),
            "count_leak" | "count-leak" => Ok(GeneratorKind::CountLeak),
            other => Err(DvrpError::UnknownGenerator(other.to_string())),
        }
    }
}

/// Evaluation-time image replacement modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlindMode {
    Original,
    Black,
    White,
    TextOnly,
}

impl BlindMode {
    pub const ALL: [BlindMode; 4] =
        [BlindMode::Original, BlindMode::Black, BlindMode::White, BlindMode::TextOnly];

    pub fn name(&self) -> &'static str {
        match self {
            BlindMode::Original => "original",
            BlindMode::Black => "black",
            BlindMode::White => "white",
            BlindMode::TextOnly => "text_only",
        }
    }
}

impl FromStr for BlindMode {
    type Err = DvrpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(BlindMode::Original),
            "black" => Ok(BlindMode::Black),
            "white" => Ok(BlindMode::White),
            "text_only" | "text-only" => Ok(BlindMode::TextOnly),
            other => Err(DvrpError::Config(format!("unknown blind mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub generator: GeneratorKind,
    pub seed: u64,
    pub difficulty: u8,
}

/// One training or evaluation instance. `image = None` marks the absent
/// image of text-only evaluation; generators always produce `Some`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub image: Option<ImageGrid>,
    pub query: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub meta: TaskMeta,
}

/// Blob edge length in pixels. Harder levels shrink blobs, weakening the
/// pooled-mass signal each blob contributes.
fn blob_edge(difficulty: u8) -> usize {
    match difficulty {
        0 => 7,
        1 => 5,
        _ => 3,
    }
}

struct Blob {
    row: usize,
    col: usize,
    edge: usize,
    color: usize,
}

fn overlaps(b: &Blob, others: &[Blob]) -> bool {
    others.iter().any(|o| {
        b.row < o.row + o.edge + 1
            && o.row < b.row + b.edge + 1
            && b.col < o.col + o.edge + 1
            && o.col < b.col + b.edge + 1
    })
}

/// Place one blob inside [row_lo, row_hi) x [col_lo, col_hi) without
/// overlapping existing blobs. Rejection sampling with a deterministic
/// grid-scan fallback so placement always terminates.
fn place_blob(
    rng: &mut CounterRng,
    placed: &[Blob],
    edge: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    color: usize,
) -> Blob {
    let row_span = rows.1 - rows.0 - edge;
    let col_span = cols.1 - cols.0 - edge;
    for _ in 0..200 {
        let b = Blob {
            row: rows.0 + rng.below(row_span as u64 + 1) as usize,
            col: cols.0 + rng.below(col_span as u64 + 1) as usize,
            edge,
            color,
        };
        if !overlaps(&b, placed) {
            return b;
        }
    }
    for row in (rows.0..=rows.0 + row_span).step_by(edge + 1) {
        for col in (cols.0..=cols.0 + col_span).step_by(edge + 1) {
            let b = Blob { row, col, edge, color };
            if !overlaps(&b, placed) {
                return b;
            }
        }
    }
    unreachable!("blob density is far below saturation");
}

fn paint(blobs: &[Blob]) -> ImageGrid {
    let mut img = ImageGrid::filled(IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS, BACKGROUND);
    for b in blobs {
        let color = PALETTE[b.color];
        for r in b.row..b.row + b.edge {
            for c in b.col..b.col + b.edge {
                for ch in 0..IMAGE_CHANNELS {
                    img.set(r, c, ch, color[ch]);
                }
            }
        }
    }
    img
}

fn full_frame() -> ((usize, usize), (usize, usize)) {
    ((0, IMAGE_HEIGHT), (0, IMAGE_WIDTH))
}

/// Generate a task. Bitwise deterministic in (generator, seed, difficulty).
pub fn gen_task(generator: GeneratorKind, seed: u64, difficulty: u8) -> Task {
    let mut rng = CounterRng::new(rng::derive(seed, rng::stream::BLOB));
    let edge = blob_edge(difficulty);
    let meta = TaskMeta { generator, seed, difficulty };
    let (rows, cols) = full_frame();

    match generator {
        GeneratorKind::Count | GeneratorKind::CountLeak => {
            let n = rng.below(6) as u32 + 1;
            let mut blobs: Vec<Blob> = Vec::new();
            for _ in 0..n {
                let color = rng.below(PALETTE.len() as u64) as usize;
                let b = place_blob(&mut rng, &blobs, edge, rows, cols, color);
                blobs.push(b);
            }
            let query = match generator {
                GeneratorKind::Count => vec![vocab::Q_COUNT],
                _ => vec![vocab::Q_COUNT, vocab::digit(n)],
            };
            Task { image: Some(paint(&blobs)), query, answer: vec![vocab::digit(n)], meta }
        }
        GeneratorKind::Majority => {
            // Five blobs; redraw color assignments until one color holds a
            // strict plurality, falling back to a forced 3-1-1 split.
            let n = 5;
            let mut counts;
            let mut colors: Vec<usize>;
            let mut attempts = 0;
            loop {
                colors = (0..n).map(|_| rng.below(PALETTE.len() as u64) as usize).collect();
                counts = [0usize; 3];
                for &c in &colors {
                    counts[c] += 1;
                }
                let max = *counts.iter().max().unwrap();
                if counts.iter().filter(|&&c| c == max).count() == 1 {
                    break;
                }
                attempts += 1;
                if attempts > 100 {
                    let lead = rng.below(3) as usize;
                    colors = vec![lead, lead, lead, (lead + 1) % 3, (lead + 2) % 3];
                    counts = [0; 3];
                    for &c in &colors {
                        counts[c] += 1;
                    }
                    break;
                }
            }
            let winner = counts
                .iter()
                .enumerate()
                .max_by_key(|&(_, &c)| c)
                .map(|(i, _)| i)
                .unwrap();
            let mut blobs: Vec<Blob> = Vec::new();
            for &color in &colors {
                let b = place_blob(&mut rng, &blobs, edge, rows, cols, color);
                blobs.push(b);
            }
            let answer = vec![vocab::RED + winner as TokenId];
            Task { image: Some(paint(&blobs)), query: vec![vocab::Q_MAJORITY], answer, meta }
        }
        GeneratorKind::Compare => {
            let (n_left, n_right) = loop {
                let l = rng.below(3) + 1;
                let r = rng.below(3) + 1;
                if l != r {
                    break (l, r);
                }
            };
            let mid = IMAGE_WIDTH / 2;
            let mut blobs: Vec<Blob> = Vec::new();
            for _ in 0..n_left {
                let color = rng.below(PALETTE.len() as u64) as usize;
                let b = place_blob(&mut rng, &blobs, edge, rows, (0, mid), color);
                blobs.push(b);
            }
            for _ in 0..n_right {
                let color = rng.below(PALETTE.len() as u64) as usize;
                let b = place_blob(&mut rng, &blobs, edge, rows, (mid, IMAGE_WIDTH), color);
                blobs.push(b);
            }
            let answer = vec![if n_left > n_right { vocab::LEFT } else { vocab::RIGHT }];
            Task { image: Some(paint(&blobs)), query: vec![vocab::Q_COMPARE], answer, meta }
        }
    }
}

/// Replace the task's image per the blind mode. Query and answer stay.
pub fn blind_variant(task: &Task, mode: BlindMode) -> Task {
    let image = match mode {
        BlindMode::Original => task.image.clone(),
        BlindMode::Black => task.image.as_ref().map(|img| {
            ImageGrid::filled(img.height, img.width, img.channels, 0.0)
        }),
        BlindMode::White => task.image.as_ref().map(|img| {
            ImageGrid::filled(img.height, img.width, img.channels, 1.0)
        }),
        BlindMode::TextOnly => None,
    };
    Task { image, query: task.query.clone(), answer: task.answer.clone(), meta: task.meta.clone() }
}

/// Exact-match verification against the task's ground truth.
pub fn verify(model_output: &[TokenId], task: &Task) -> bool {
    accuracy_reward(model_output, &task.answer, vocab::SEP, vocab::EOS) == 1.0
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    image_hex: Option<String>,
    query: Vec<TokenId>,
    answer: Vec<TokenId>,
    meta: TaskMeta,
}

impl From<&Task> for TaskRecord {
    fn from(t: &Task) -> Self {
        TaskRecord {
            image_hex: t.image.as_ref().map(|img| hex::encode(img.to_bytes())),
            query: t.query.clone(),
            answer: t.answer.clone(),
            meta: t.meta.clone(),
        }
    }
}

impl TaskRecord {
    fn into_task(self) -> Result<Task> {
        let image = match self.image_hex {
            Some(h) => {
                let bytes = hex::decode(h).map_err(|e| DvrpError::Format {
                    what: "dataset",
                    detail: format!("bad image hex: {e}"),
                })?;
                Some(ImageGrid::from_bytes(&bytes)?)
            }
            None => None,
        };
        Ok(Task { image, query: self.query, answer: self.answer, meta: self.meta })
    }
}

/// Write tasks as line-delimited JSON records with hex-encoded grid images.
pub fn write_dataset(path: &Path, tasks: &[Task]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for t in tasks {
        serde_json::to_writer(&mut f, &TaskRecord::from(t))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Task>> {
    let f = fs::File::open(path)?;
    let mut tasks = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line)?;
        tasks.push(rec.into_task()?);
    }
    Ok(tasks)
}
