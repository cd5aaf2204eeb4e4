//! Procedural video-caption data: moving-shape scenes rendered to small RGB
//! frames, template captions over a fixed word vocabulary, frozen random
//! encoder stubs with patchification, and a line-oriented manifest.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Specials;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    None,
    Vanish,
    Flash,
}

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Bar => "bar",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ShapeKind::Square),
            "circle" => Ok(ShapeKind::Circle),
            "bar" => Ok(ShapeKind::Bar),
            other => Err(Error::Data(format!("unknown shape {other:?}"))),
        }
    }
}

impl Color {
    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(&self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.1, 0.1],
            Color::Green => [0.1, 1.0, 0.1],
            Color::Blue => [0.1, 0.1, 1.0],
            Color::Yellow => [1.0, 1.0, 0.1],
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "red" => Ok(Color::Red),
            "green" => Ok(Color::Green),
            "blue" => Ok(Color::Blue),
            "yellow" => Ok(Color::Yellow),
            other => Err(Error::Data(format!("unknown color {other:?}"))),
        }
    }
}

impl Direction {
    pub fn word(&self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    fn delta(&self) -> (f64, f64) {
        // (dx, dy) in pixels per frame, y grows downward
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            other => Err(Error::Data(format!("unknown direction {other:?}"))),
        }
    }
}

impl Event {
    pub fn clause(&self) -> Option<&'static str> {
        match self {
            Event::None => None,
            Event::Vanish => Some("vanishes"),
            Event::Flash => Some("flashes"),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Event::None => "none",
            Event::Vanish => "vanish",
            Event::Flash => "flash",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Event::None),
            "vanish" => Ok(Event::Vanish),
            "flash" => Ok(Event::Flash),
            other => Err(Error::Data(format!("unknown event {other:?}"))),
        }
    }
}

/// One moving-shape scene. Motion keeps the shape in frame for all frames;
/// the event, when present, lands strictly after ⌊3T/4⌋.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub seed: u64,
    pub shape: ShapeKind,
    pub color: Color,
    pub direction: Direction,
    pub speed: f64,
    pub event: Event,
    /// 0-based frame index where the event starts (> ⌊3T/4⌋).
    pub event_frame: usize,
    pub size: usize,
    pub start_x: f64,
    pub start_y: f64,
}

impl SyntheticScene {
    /// Deterministic scene from a sample seed. Retries with reduced speed
    /// when the motion cannot fit, then errors after 3 attempts.
    pub fn from_seed(seed: u64, frames: usize, height: usize, width: usize) -> Result<SyntheticScene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Bar][rng.gen_range(0..3)];
        let color = [Color::Red, Color::Green, Color::Blue, Color::Yellow][rng.gen_range(0..4)];
        let direction = [Direction::Left, Direction::Right, Direction::Up, Direction::Down][rng.gen_range(0..4)];
        let event = [Event::None, Event::Vanish, Event::Flash][rng.gen_range(0..3)];
        let lo = 3 * frames / 4;
        let event_frame = if lo + 1 < frames { rng.gen_range(lo + 1..frames) } else { frames - 1 };
        let size = rng.gen_range(5..=8);
        let mut speed: f64 = rng.gen_range(0.6..1.6);

        let (dx, dy) = direction.delta();
        for attempt in 0..3 {
            let disp = speed * (frames - 1) as f64;
            let span_x = size as f64 + disp * dx.abs();
            let span_y = size as f64 + disp * dy.abs();
            if span_x < width as f64 && span_y < height as f64 {
                let max_x = width as f64 - span_x;
                let max_y = height as f64 - span_y;
                let mut start_x = rng.gen_range(0.0..max_x.max(1e-9));
                let mut start_y = rng.gen_range(0.0..max_y.max(1e-9));
                // Shift so the trajectory, not just the start, stays inside.
                if dx < 0.0 {
                    start_x += disp;
                }
                if dy < 0.0 {
                    start_y += disp;
                }
                return Ok(SyntheticScene {
                    seed,
                    shape,
                    color,
                    direction,
                    speed,
                    event,
                    event_frame,
                    size,
                    start_x,
                    start_y,
                });
            }
            if attempt == 2 {
                break;
            }
            speed *= 0.5;
        }
        Err(Error::Data(format!(
            "scene seed {seed}: shape cannot stay inside a {width}x{height} frame"
        )))
    }
}

impl fmt::Display for SyntheticScene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} moving {} at {:.3} px/frame, event {}",
            self.color.word(),
            self.shape.word(),
            self.direction.word(),
            self.speed,
            self.event.name()
        )
    }
}

/// Renders the scene to `frames` H×W×3 frames with values in [0, 1].
pub fn render_frames(scene: &SyntheticScene, frames: usize, height: usize, width: usize) -> Vec<Array3<f64>> {
    let (dx, dy) = scene.direction.delta();
    let rgb = scene.color.rgb();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut frame = Array3::zeros((height, width, 3));
        let flashing = scene.event == Event::Flash && t >= scene.event_frame;
        if flashing {
            frame.fill(0.35);
        }
        let vanished = scene.event == Event::Vanish && t >= scene.event_frame;
        if !vanished {
            let x0 = scene.start_x + scene.speed * dx * t as f64;
            let y0 = scene.start_y + scene.speed * dy * t as f64;
            draw_shape(&mut frame, scene.shape, x0, y0, scene.size, rgb);
        }
        out.push(frame);
    }
    out
}

fn draw_shape(frame: &mut Array3<f64>, shape: ShapeKind, x0: f64, y0: f64, size: usize, rgb: [f64; 3]) {
    let (h, w, _) = frame.dim();
    let s = size as f64;
    for py in 0..h {
        for px in 0..w {
            let fx = px as f64 - x0;
            let fy = py as f64 - y0;
            if fx < 0.0 || fy < 0.0 || fx >= s || fy >= s {
                continue;
            }
            let inside = match shape {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let r = s / 2.0;
                    let cx = fx - r + 0.5;
                    let cy = fy - r + 0.5;
                    cx * cx + cy * cy <= r * r
                }
                // horizontal bar through the middle third
                ShapeKind::Bar => fy >= s / 3.0 && fy < 2.0 * s / 3.0,
            };
            if inside {
                for c in 0..3 {
                    frame[[py, px, c]] = rgb[c];
                }
            }
        }
    }
}

/// Template caption; the event clause depends only on final-quarter frames.
pub fn caption_of(scene: &SyntheticScene) -> String {
    let mut s = format!(
        "a {} {} moves {}",
        scene.color.word(),
        scene.shape.word(),
        scene.direction.word()
    );
    if let Some(word) = scene.event.clause() {
        s.push_str(" then ");
        s.push_str(word);
    }
    s
}

/// Fixed word-level vocabulary: 4 specials, then every grammar word.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const SPECIAL_WORDS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<img>"];

impl Vocab {
    pub fn grammar() -> Vocab {
        let mut words: Vec<String> = SPECIAL_WORDS.iter().map(|s| s.to_string()).collect();
        let mut grammar = vec![
            "a", "moves", "then", "red", "green", "blue", "yellow", "square", "circle", "bar", "left", "right",
            "up", "down", "vanishes", "flashes",
        ];
        grammar.sort_unstable();
        words.extend(grammar.into_iter().map(|s| s.to_string()));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn specials(&self) -> Specials {
        Specials {
            pad: 0,
            bos: 1,
            eos: 2,
            img: 3,
        }
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Input(format!("token id {id} out of vocabulary")))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.word(id)).collect();
        Ok(words?.join(" "))
    }
}

/// Frozen random patch encoder: flattens p×p×3 patches and applies a fixed
/// linear map drawn once from a named seed.
#[derive(Debug, Clone)]
pub struct EncoderStub {
    pub projection: Array2<f64>, // (d, p²·3)
    pub bias: Array1<f64>,
    pub patch: usize,
    pub out_dim: usize,
}

impl EncoderStub {
    pub fn new(seed: u64, patch: usize, out_dim: usize) -> EncoderStub {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = patch * patch * 3;
        let scale = 1.0 / (in_dim as f64).sqrt();
        EncoderStub {
            projection: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-scale..scale)),
            bias: Array1::from_shape_fn(out_dim, |_| rng.gen_range(-0.05..0.05)),
            patch,
            out_dim,
        }
    }
}

/// Splits an H×W×3 frame into non-overlapping p×p patches (row-major) and
/// maps each through the frozen projection: N_p = H·W / p² rows of d.
pub fn patchify_encode(frame: &Array3<f64>, stub: &EncoderStub) -> Result<Array2<f64>> {
    let (h, w, ch) = frame.dim();
    let p = stub.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("frame {h}x{w} not divisible by patch size {p}")));
    }
    let n_p = (h / p) * (w / p);
    let mut patches = Array2::zeros((n_p, p * p * ch));
    let cols = w / p;
    for gy in 0..h / p {
        for gx in 0..cols {
            let row = gy * cols + gx;
            let mut i = 0;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..ch {
                        patches[[row, i]] = frame[[gy * p + py, gx * p + px, c]];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(patches.dot(&stub.projection.t()) + &stub.bias)
}

/// Renders and encodes a whole scene into a T×N_p×d feature stack.
pub fn encode_scene(
    scene: &SyntheticScene,
    stub: &EncoderStub,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    let rendered = render_frames(scene, frames, height, width);
    let first = patchify_encode(&rendered[0], stub)?;
    let (n_p, d) = first.dim();
    let mut out = Array3::zeros((frames, n_p, d));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(&first);
    for (t, frame) in rendered.iter().enumerate().skip(1) {
        out.index_axis_mut(ndarray::Axis(0), t).assign(&patchify_encode(frame, stub)?);
    }
    Ok(out)
}

pub const MANIFEST_HEADER: &str = "sample_seed,shape,color,direction,speed,event,event_frame,size,start_x,start_y,caption";

/// Draws n scenes from consecutive sample seeds and serializes one record
/// per line. Features regenerate on demand from the manifest.
pub fn make_dataset(n: usize, seed: u64, frames: usize, height: usize, width: usize) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    (0..n as u64)
        .map(|i| SyntheticScene::from_seed(seed.wrapping_add(i), frames, height, width))
        .collect()
}

pub fn write_manifest(path: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    let p = path.display().to_string();
    let mut lines = Vec::with_capacity(scenes.len() + 1);
    lines.push(MANIFEST_HEADER.to_string());
    for s in scenes {
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.seed,
            s.shape.word(),
            s.color.word(),
            s.direction.word(),
            s.speed,
            s.event.name(),
            s.event_frame,
            s.size,
            s.start_x,
            s.start_y,
            caption_of(s)
        ));
    }
    std::fs::write(path, lines.join("\n") + "\n").map_err(|e| Error::io(&p, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SyntheticScene>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::Data(format!("{p}: missing or unexpected manifest header"))),
    }
    let mut scenes = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(11, ',').collect();
        if fields.len() != 11 {
            return Err(Error::Data(format!("{p}:{}: expected 11 fields", lineno + 2)));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("{p}:{}: bad {what} {s:?}", lineno + 2)))
        };
        let scene = SyntheticScene {
            seed: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("{p}:{}: bad seed {:?}", lineno + 2, fields[0])))?,
            shape: ShapeKind::parse(fields[1])?,
            color: Color::parse(fields[2])?,
            direction: Direction::parse(fields[3])?,
            speed: parse_f(fields[4], "speed")?,
            event: Event::parse(fields[5])?,
            event_frame: fields[6]
                .parse()
                .map_err(|_| Error::Data(format!("{p}:{}: bad event frame", lineno + 2)))?,
            size: fields[7]
                .parse()
                .map_err(|_| Error::Data(format!("{p}:{}: bad size", lineno + 2)))?,
            start_x: parse_f(fields[8], "start_x")?,
            start_y: parse_f(fields[9], "start_y")?,
        };
        let caption = fields[10];
        if caption != caption_of(&scene) {
            return Err(Error::Data(format!(
                "{p}:{}: caption does not match scene parameters",
                lineno + 2
            )));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: usize = 16;
    const H: usize = 32;
    const W: usize = 32;

    #[test]
    fn static_scene_when_speed_zero() {
        let mut scene = SyntheticScene::from_seed(1, T, H, W).unwrap();
        scene.speed = 0.0;
        scene.event = Event::None;
        let frames = render_frames(&scene, T, H, W);
        for f in &frames[1..] {
            assert_eq!(f, &frames[0]);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_frames(&SyntheticScene::from_seed(42, T, H, W).unwrap(), T, H, W);
        let b = render_frames(&SyntheticScene::from_seed(42, T, H, W).unwrap(), T, H, W);
        assert_eq!(a, b);
    }

    #[test]
    fn right_motion_increases_horizontal_centroid() {
        // find a right-moving scene without vanish
        let scene = (0..500)
            .map(|s| SyntheticScene::from_seed(s, T, H, W).unwrap())
            .find(|s| s.direction == Direction::Right && s.event != Event::Vanish)
            .unwrap();
        let frames = render_frames(&scene, T, H, W);
        let centroid_x = |f: &Array3<f64>| -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for y in 0..H {
                for x in 0..W {
                    let v: f64 = (0..3).map(|c| f[[y, x, c]]).sum();
                    num += v * x as f64;
                    den += v;
                }
            }
            num / den
        };
        // Flash frames add uniform background; compare only pre-event frames.
        let upto = if scene.event == Event::Flash { scene.event_frame } else { T };
        let xs: Vec<f64> = frames[..upto].iter().map(centroid_x).collect();
        for w in xs.windows(2) {
            assert!(w[1] > w[0], "centroid must strictly increase: {xs:?}");
        }
    }

    #[test]
    fn shape_stays_in_frame() {
        for seed in 0..200 {
            let scene = SyntheticScene::from_seed(seed, T, H, W).unwrap();
            let frames = render_frames(&scene, T, H, W);
            // Energy conservation before any event: the full shape is drawn.
            let sum0: f64 = frames[0].sum();
            assert!(sum0 > 0.0, "seed {seed}: first frame empty");
            let pre_event = if scene.event == Event::None { T } else { scene.event_frame };
            for f in frames[..pre_event].iter() {
                // Subpixel motion changes how many pixel rows/cols the shape
                // covers (a thin bar can go from 2 lit rows to 1), so only
                // require that the shape never disappears before its event.
                assert!(f.sum() > 0.3 * sum0);
            }
        }
    }

    #[test]
    fn event_frame_in_final_quarter() {
        for seed in 0..200 {
            let scene = SyntheticScene::from_seed(seed, T, H, W).unwrap();
            if scene.event != Event::None {
                assert!(scene.event_frame > 3 * T / 4);
                assert!(scene.event_frame < T);
            }
        }
    }

    #[test]
    fn caption_templates() {
        let mut scene = SyntheticScene::from_seed(3, T, H, W).unwrap();
        scene.color = Color::Red;
        scene.shape = ShapeKind::Square;
        scene.direction = Direction::Right;
        scene.event = Event::None;
        assert_eq!(caption_of(&scene), "a red square moves right");
        scene.color = Color::Blue;
        scene.shape = ShapeKind::Circle;
        scene.direction = Direction::Up;
        scene.event = Event::Vanish;
        assert_eq!(caption_of(&scene), "a blue circle moves up then vanishes");
    }

    #[test]
    fn grammar_roundtrips_through_vocab() {
        let vocab = Vocab::grammar();
        assert!(vocab.len() <= 64);
        let shapes = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Bar];
        let colors = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
        let dirs = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];
        let events = [Event::None, Event::Vanish, Event::Flash];
        let mut scene = SyntheticScene::from_seed(5, T, H, W).unwrap();
        for &shape in &shapes {
            for &color in &colors {
                for &dir in &dirs {
                    for &event in &events {
                        scene.shape = shape;
                        scene.color = color;
                        scene.direction = dir;
                        scene.event = event;
                        let caption = caption_of(&scene);
                        let ids = vocab.tokenize(&caption).unwrap();
                        assert_eq!(vocab.detokenize(&ids).unwrap(), caption);
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_shapes_and_linearity() {
        let stub = EncoderStub::new(7, 8, 12);
        let zero = Array3::zeros((32, 32, 3));
        let feats = patchify_encode(&zero, &stub).unwrap();
        assert_eq!(feats.dim(), (16, 12));
        // zero frame, zero bias => zero features
        let mut stub0 = stub.clone();
        stub0.bias.fill(0.0);
        let f0 = patchify_encode(&zero, &stub0).unwrap();
        assert!(f0.iter().all(|&x| x == 0.0));

        // single patch when p = H = W
        let stub_full = EncoderStub::new(8, 32, 6);
        assert_eq!(patchify_encode(&zero, &stub_full).unwrap().dim(), (1, 6));

        // indivisible dimensions are a config error
        let odd = Array3::zeros((30, 32, 3));
        assert!(matches!(patchify_encode(&odd, &stub), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_matches_bruteforce_product() {
        let stub = EncoderStub::new(9, 4, 5);
        let frame = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 31 + x * 7 + c) % 13) as f64 / 13.0);
        let feats = patchify_encode(&frame, &stub).unwrap();
        assert_eq!(feats.dim(), (4, 5));
        for gy in 0..2 {
            for gx in 0..2 {
                let row = gy * 2 + gx;
                let mut flat = Vec::new();
                for py in 0..4 {
                    for px in 0..4 {
                        for c in 0..3 {
                            flat.push(frame[[gy * 4 + py, gx * 4 + px, c]]);
                        }
                    }
                }
                for o in 0..5 {
                    let want: f64 =
                        flat.iter().enumerate().map(|(i, v)| v * stub.projection[[o, i]]).sum::<f64>() + stub.bias[o];
                    assert!((feats[[row, o]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn manifest_roundtrip_and_determinism() {
        let dir = std::env::temp_dir().join("abmamba_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.manifest");

        let scenes = make_dataset(20, 100, T, H, W).unwrap();
        write_manifest(&path, &scenes).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 20);
        for (a, b) in scenes.iter().zip(back.iter()) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(caption_of(a), caption_of(b));
            assert_eq!(a.start_x, b.start_x);
        }

        // Different dataset seeds give different manifests.
        let s1 = make_dataset(20, 1, T, H, W).unwrap();
        let s2 = make_dataset(20, 21, T, H, W).unwrap();
        let c1: Vec<String> = s1.iter().map(caption_of).collect();
        let c2: Vec<String> = s2.iter().map(caption_of).collect();
        assert_ne!(c1, c2);
    }

    #[test]
    fn nearest_centroid_recovers_direction_from_features() {
        use ndarray::Axis;
        // The label signal must be recoverable from the frozen features: a
        // nearest-centroid classifier on the trajectory of the feature-energy
        // centroid over the patch grid separates the four directions. Each
        // frame is pooled to a single (x, y) point, taken relative to frame 0
        // so the random start position cancels.
        let stub = EncoderStub::new(11, 8, 16);
        let grid = W / 8;
        let scenes = make_dataset(200, 7, T, H, W).unwrap();
        let feats: Vec<Vec<f64>> = scenes
            .iter()
            .map(|s| {
                let enc = encode_scene(s, &stub, T, H, W).unwrap();
                let mut v = Vec::with_capacity(2 * T);
                let mut origin = None;
                let mut prev = (0.0, 0.0);
                for t in 0..T {
                    let frame = enc.index_axis(Axis(0), t);
                    // Patch energy relative to the empty-patch baseline (the
                    // stub bias); subtract the per-frame minimum so a uniform
                    // flash background does not pull the centroid.
                    let mut energy: Vec<f64> = frame
                        .axis_iter(Axis(0))
                        .map(|p| p.iter().zip(stub.bias.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                        .collect();
                    let floor = energy.iter().cloned().fold(f64::INFINITY, f64::min);
                    for e in energy.iter_mut() {
                        *e -= floor;
                    }
                    let total: f64 = energy.iter().sum();
                    let pos = if total > 1e-9 {
                        let cx: f64 = energy.iter().enumerate().map(|(n, e)| e * (n % grid) as f64).sum::<f64>() / total;
                        let cy: f64 = energy.iter().enumerate().map(|(n, e)| e * (n / grid) as f64).sum::<f64>() / total;
                        (cx, cy)
                    } else {
                        prev // vanished shape: hold the last centroid
                    };
                    prev = pos;
                    let o = *origin.get_or_insert(pos);
                    v.push(pos.0 - o.0);
                    v.push(pos.1 - o.1);
                }
                v
            })
            .collect();
        let labels: Vec<usize> = scenes
            .iter()
            .map(|s| match s.direction {
                Direction::Left => 0,
                Direction::Right => 1,
                Direction::Up => 2,
                Direction::Down => 3,
            })
            .collect();
        let dim = feats[0].len();
        let mut centroids = vec![vec![0.0; dim]; 4];
        let mut counts = [0usize; 4];
        for (f, &l) in feats.iter().zip(&labels) {
            counts[l] += 1;
            for (c, x) in centroids[l].iter_mut().zip(f) {
                *c += x;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            assert!(n > 0, "all four directions must occur in 200 samples");
            for x in c.iter_mut() {
                *x /= n as f64;
            }
        }
        let mut hits = 0;
        for (f, &l) in feats.iter().zip(&labels) {
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(f).map(|(c, x)| (c - x).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(f).map(|(c, x)| (c - x).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == l {
                hits += 1;
            }
        }
        let acc = hits as f64 / feats.len() as f64;
        assert!(acc >= 0.95, "direction probe accuracy {acc}");
    }

    #[test]
    fn disjoint_seed_ranges_do_not_collide() {
        let train = make_dataset(200, 1, T, H, W).unwrap();
        let eval = make_dataset(50, 1_000_000, T, H, W).unwrap();
        let key = |s: &SyntheticScene| {
            format!(
                "{}|{}|{}|{}|{}|{}|{}",
                s.shape.word(),
                s.color.word(),
                s.direction.word(),
                s.speed,
                s.event.name(),
                s.start_x,
                s.start_y
            )
        };
        let train_keys: std::collections::HashSet<String> = train.iter().map(key).collect();
        assert!(eval.iter().all(|s| !train_keys.contains(&key(s))));
    }
}
