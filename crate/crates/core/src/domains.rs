//! Procedural shapes-on-textures domains with a controllable context bias.
//!
//! Every class is a shape family with its own foreground palette. In the
//! source domain each class also owns a background texture, so the context
//! alone predicts the label; target domains break or restyle that pairing.
//! The annotation of each example is exactly the set of pixels the
//! foreground shape was rasterized onto.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example};
use crate::error::DatasetError;
use crate::grid::BinaryMask;

pub const MAX_CLASSES: usize = 10;
pub const DEFAULT_SIDE: usize = 64;
pub const SOURCE_DOMAIN: &str = "source";
pub const TARGET_DOMAINS: [&str; 6] = [
    "graphics",
    "clipart",
    "infograph",
    "painting",
    "quickdraw",
    "sketch",
];

const SCALE_RANGE: (f64, f64) = (0.3, 0.6);
const MAX_ROTATION: f64 = PI / 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Circle,
    Triangle,
    Square,
    Cross,
    Ring,
    Star,
    Bar,
    Diamond,
    LShape,
    TShape,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; MAX_CLASSES] = [
        ShapeFamily::Circle,
        ShapeFamily::Triangle,
        ShapeFamily::Square,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::Star,
        ShapeFamily::Bar,
        ShapeFamily::Diamond,
        ShapeFamily::LShape,
        ShapeFamily::TShape,
    ];

    /// Membership test in the shape's local frame, roughly [-0.5, 0.5]².
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Circle => u * u + v * v <= 0.25,
            ShapeFamily::Triangle => {
                (-0.45..=0.45).contains(&v) && u.abs() <= (v + 0.45) / 0.9 * 0.5
            }
            ShapeFamily::Square => u.abs() <= 0.42 && v.abs() <= 0.42,
            ShapeFamily::Cross => {
                (u.abs() <= 0.14 && v.abs() <= 0.5) || (v.abs() <= 0.14 && u.abs() <= 0.5)
            }
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.09..=0.25).contains(&r2)
            }
            ShapeFamily::Star => star_contains(u, v),
            ShapeFamily::Bar => u.abs() <= 0.5 && v.abs() <= 0.16,
            ShapeFamily::Diamond => u.abs() + v.abs() <= 0.5,
            ShapeFamily::LShape => {
                ((-0.45..=-0.15).contains(&u) && v.abs() <= 0.5)
                    || ((0.2..=0.5).contains(&v) && u.abs() <= 0.45)
            }
            ShapeFamily::TShape => {
                ((-0.5..=-0.2).contains(&v) && u.abs() <= 0.45)
                    || (u.abs() <= 0.15 && v.abs() <= 0.5)
            }
        }
    }
}

fn star_contains(u: f64, v: f64) -> bool {
    // Five-pointed star, outer radius 0.5, inner 0.2, one point up.
    let r = (u * u + v * v).sqrt();
    if r > 0.5 {
        return false;
    }
    if r < 0.2 {
        return true;
    }
    let angle = v.atan2(u) + PI / 2.0;
    let sector = 2.0 * PI / 5.0;
    let a = angle.rem_euclid(sector);
    let t = (a - sector / 2.0).abs() / (sector / 2.0);
    // t = 1 at a point, 0 between points; boundary radius is linear in the
    // polar angle, which is close enough to straight edges at this size.
    r <= 0.2 + 0.3 * t
}

/// A class: shape family plus foreground colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeClass {
    pub id: usize,
    pub family: ShapeFamily,
    pub palette: [f64; 3],
}

const PALETTES: [[f64; 3]; MAX_CLASSES] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.10, 0.45],
    [0.95, 0.80, 0.05],
    [0.05, 0.45, 0.10],
    [0.55, 0.05, 0.55],
    [0.95, 0.45, 0.00],
    [0.10, 0.60, 0.85],
    [0.40, 0.20, 0.05],
    [0.15, 0.15, 0.15],
    [0.60, 0.85, 0.20],
];

impl ShapeClass {
    pub fn standard(id: usize) -> Self {
        assert!(id < MAX_CLASSES, "class id {id} out of range");
        Self {
            id,
            family: ShapeFamily::ALL[id],
            palette: PALETTES[id],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackgroundPolicy {
    /// Texture id equals the class id with probability `bias`, otherwise
    /// one of the other textures uniformly.
    ClassCorrelated { bias: f64 },
    /// Texture drawn uniformly, independent of the class.
    Decorrelated,
    UniformWhite,
    /// Smooth random-colour noise with small distractor glyphs.
    NoiseTexture,
    /// White paper; the foreground is drawn as an outline.
    EdgeOnly,
    /// A random texture with inverted colours.
    InvertedPalette,
    /// A flat pastel colour.
    LowColor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Foreground {
    Filled,
    Outline { width: usize, ink: f64, jitter: f64 },
}

/// Post-composite transforms; the annotation is unaffected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StyleOp {
    BoxBlur { radius: usize },
    /// Per-example uniform offset per channel in `[-max, max]`.
    ColorShift { max: f64 },
    Posterize { levels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub background: BackgroundPolicy,
    pub foreground: Foreground,
    pub style: Vec<StyleOp>,
}

impl DomainSpec {
    pub fn new(name: &str, background: BackgroundPolicy) -> Self {
        let foreground = if background == BackgroundPolicy::EdgeOnly {
            Foreground::Outline {
                width: 1,
                ink: 0.0,
                jitter: 0.0,
            }
        } else {
            Foreground::Filled
        };
        Self {
            name: name.into(),
            background,
            foreground,
            style: Vec::new(),
        }
    }

    pub fn source(bias: f64) -> Self {
        Self::new(SOURCE_DOMAIN, BackgroundPolicy::ClassCorrelated { bias })
    }

    /// Renders on plain white.
    pub fn graphics() -> Self {
        Self::new("graphics", BackgroundPolicy::UniformWhite)
    }

    /// Flat fills, few colours.
    pub fn clipart() -> Self {
        let mut d = Self::new("clipart", BackgroundPolicy::LowColor);
        d.style.push(StyleOp::Posterize { levels: 3 });
        d
    }

    pub fn infograph() -> Self {
        Self::new("infograph", BackgroundPolicy::NoiseTexture)
    }

    /// Unpaired textures, blurred and colour-shifted.
    pub fn painting() -> Self {
        let mut d = Self::new("painting", BackgroundPolicy::Decorrelated);
        d.style.push(StyleOp::BoxBlur { radius: 1 });
        d.style.push(StyleOp::ColorShift { max: 0.12 });
        d
    }

    /// Thin black outlines.
    pub fn quickdraw() -> Self {
        Self::new("quickdraw", BackgroundPolicy::EdgeOnly)
    }

    /// Thicker, noisy pencil outlines.
    pub fn sketch() -> Self {
        let mut d = Self::new("sketch", BackgroundPolicy::EdgeOnly);
        d.foreground = Foreground::Outline {
            width: 2,
            ink: 0.35,
            jitter: 0.15,
        };
        d
    }

    pub fn targets() -> Vec<Self> {
        vec![
            Self::graphics(),
            Self::clipart(),
            Self::infograph(),
            Self::painting(),
            Self::quickdraw(),
            Self::sketch(),
        ]
    }

    /// Named domain; `source` takes the given bias.
    pub fn by_name(name: &str, bias: f64) -> Option<Self> {
        match name {
            SOURCE_DOMAIN => Some(Self::source(bias)),
            "graphics" => Some(Self::graphics()),
            "clipart" => Some(Self::clipart()),
            "infograph" => Some(Self::infograph()),
            "painting" => Some(Self::painting()),
            "quickdraw" => Some(Self::quickdraw()),
            "sketch" => Some(Self::sketch()),
            "decorrelated" => Some(Self::new("decorrelated", BackgroundPolicy::Decorrelated)),
            "inverted" => Some(Self::new("inverted", BackgroundPolicy::InvertedPalette)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedExample {
    pub image: Vec<f64>,
    pub label: usize,
    pub annotation: BinaryMask,
    pub texture: Option<usize>,
}

/// Intermediate renders, exposed so tests can check the annotation against
/// an independent background-only render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderLayers {
    pub background: Vec<f64>,
    pub composite: Vec<f64>,
    pub example: GeneratedExample,
}

/// Everything drawn per example, before any pixel is touched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub scale: f64,
    pub rotation: f64,
    pub center: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackgroundDraw {
    pub texture: Option<usize>,
    pub seed: u64,
}

/// Picks the background texture for one example under `policy`.
pub fn draw_texture(
    policy: BackgroundPolicy,
    label: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Option<usize> {
    match policy {
        BackgroundPolicy::ClassCorrelated { bias } => {
            if num_classes < 2 || rng.gen::<f64>() < bias {
                Some(label)
            } else {
                let other = rng.gen_range(0..num_classes - 1);
                Some(if other >= label { other + 1 } else { other })
            }
        }
        BackgroundPolicy::Decorrelated | BackgroundPolicy::InvertedPalette => {
            Some(rng.gen_range(0..num_classes))
        }
        _ => None,
    }
}

/// Renders the background layer alone (3×side×side).
pub fn render_background(
    policy: BackgroundPolicy,
    texture: Option<usize>,
    seed: u64,
    side: usize,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = side * side;
    let mut img = vec![0.0; 3 * area];
    match policy {
        BackgroundPolicy::ClassCorrelated { .. } | BackgroundPolicy::Decorrelated => {
            paint_texture(&mut img, side, texture.expect("texture id"), &mut rng, false);
        }
        BackgroundPolicy::InvertedPalette => {
            paint_texture(&mut img, side, texture.expect("texture id"), &mut rng, true);
        }
        BackgroundPolicy::UniformWhite | BackgroundPolicy::EdgeOnly => img.fill(1.0),
        BackgroundPolicy::LowColor => {
            const PASTELS: [[f64; 3]; 6] = [
                [0.98, 0.85, 0.85],
                [0.85, 0.95, 0.85],
                [0.85, 0.88, 0.98],
                [0.98, 0.96, 0.80],
                [0.92, 0.85, 0.97],
                [0.80, 0.95, 0.95],
            ];
            let c = PASTELS[rng.gen_range(0..PASTELS.len())];
            for ch in 0..3 {
                img[ch * area..(ch + 1) * area].fill(c[ch]);
            }
        }
        BackgroundPolicy::NoiseTexture => {
            let base = [
                rng.gen_range(0.3..0.8),
                rng.gen_range(0.3..0.8),
                rng.gen_range(0.3..0.8),
            ];
            // Coarse value noise: random lattice every 8 px, bilinear.
            let cells = side / 8 + 2;
            for (ch, &b) in base.iter().enumerate() {
                let lattice: Vec<f64> = (0..cells * cells)
                    .map(|_| rng.gen_range(-0.25..0.25))
                    .collect();
                for y in 0..side {
                    for x in 0..side {
                        let (fy, fx) = (y as f64 / 8.0, x as f64 / 8.0);
                        let (iy, ix) = (fy as usize, fx as usize);
                        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                        let l = |a: usize, b: usize| lattice[a * cells + b];
                        let v = l(iy, ix) * (1.0 - ty) * (1.0 - tx)
                            + l(iy, ix + 1) * (1.0 - ty) * tx
                            + l(iy + 1, ix) * ty * (1.0 - tx)
                            + l(iy + 1, ix + 1) * ty * tx;
                        img[ch * area + y * side + x] = (b + v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                    }
                }
            }
            // Distractor glyphs: small shapes that belong to the background.
            let glyphs = rng.gen_range(2..=3);
            for _ in 0..glyphs {
                let family = ShapeFamily::ALL[rng.gen_range(0..MAX_CLASSES)];
                let color = [rng.gen(), rng.gen(), rng.gen()];
                let scale = rng.gen_range(0.1..0.18) * side as f64;
                let center = (
                    rng.gen_range(0.0..side as f64),
                    rng.gen_range(0.0..side as f64),
                );
                let p = Placement {
                    scale,
                    rotation: rng.gen_range(-MAX_ROTATION..MAX_ROTATION),
                    center,
                };
                let mask = rasterize(family, &p, side);
                for (i, &on) in mask.as_slice().iter().enumerate() {
                    if on {
                        for ch in 0..3 {
                            img[ch * area + i] = color[ch];
                        }
                    }
                }
            }
        }
    }
    img
}

const TEXTURE_COLORS: [([f64; 3], [f64; 3]); MAX_CLASSES] = [
    ([0.20, 0.60, 0.20], [0.50, 0.80, 0.40]),
    ([0.20, 0.30, 0.80], [0.50, 0.60, 0.95]),
    ([0.90, 0.50, 0.10], [0.95, 0.75, 0.40]),
    ([0.50, 0.20, 0.60], [0.75, 0.55, 0.85]),
    ([0.90, 0.85, 0.30], [0.50, 0.35, 0.10]),
    ([0.10, 0.55, 0.55], [0.60, 0.90, 0.90]),
    ([0.90, 0.50, 0.70], [0.98, 0.80, 0.90]),
    ([0.25, 0.35, 0.15], [0.45, 0.50, 0.25]),
    ([0.65, 0.25, 0.20], [0.85, 0.80, 0.75]),
    ([0.45, 0.45, 0.50], [0.70, 0.70, 0.75]),
];

/// Pattern weight in [0, 1] mixing the texture's two colours.
fn texture_weight(texture: usize, x: f64, y: f64, phase: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    let (px, py) = phase;
    let (x, y) = (x + px, y + py);
    let stripe = |t: f64, period: f64| if t.rem_euclid(period) < period / 2.0 { 0.0 } else { 1.0 };
    match texture % MAX_CLASSES {
        0 => stripe(y, 8.0),
        1 => stripe(x, 6.0),
        2 => stripe(x + y, 10.0),
        3 => {
            let a = stripe(x, 16.0);
            let b = stripe(y, 16.0);
            if a == b {
                0.0
            } else {
                1.0
            }
        }
        4 => {
            let dx = x.rem_euclid(8.0) - 4.0;
            let dy = y.rem_euclid(8.0) - 4.0;
            if dx * dx + dy * dy <= 4.0 {
                1.0
            } else {
                0.0
            }
        }
        5 => {
            if x.rem_euclid(8.0) < 1.5 || y.rem_euclid(8.0) < 1.5 {
                1.0
            } else {
                0.0
            }
        }
        6 => stripe((x * x + y * y).sqrt(), 10.0),
        7 => rng.gen(),
        8 => {
            let row = (y / 6.0).floor();
            let offset = if row as i64 % 2 == 0 { 0.0 } else { 6.0 };
            if y.rem_euclid(6.0) < 1.0 || (x + offset).rem_euclid(12.0) < 1.0 {
                1.0
            } else {
                0.0
            }
        }
        _ => 0.5 + 0.5 * (y / 3.0 + 2.0 * (x / 9.0).sin()).sin(),
    }
}

/// Pulls texture colours halfway toward mid-gray so that foreground
/// palettes stay the most saturated colours in the image.
fn mute(v: f64) -> f64 {
    0.5 * v + 0.25
}

fn paint_texture(img: &mut [f64], side: usize, texture: usize, rng: &mut ChaCha8Rng, invert: bool) {
    let area = side * side;
    let (a, b) = TEXTURE_COLORS[texture % MAX_CLASSES];
    let phase = (rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0));
    for y in 0..side {
        for x in 0..side {
            let w = texture_weight(texture, x as f64 + 0.5, y as f64 + 0.5, phase, rng);
            for ch in 0..3 {
                let v = mute(a[ch] * (1.0 - w) + b[ch] * w);
                img[ch * area + y * side + x] = if invert { 1.0 - v } else { v };
            }
        }
    }
}

/// Pixels whose centres fall inside the transformed shape.
pub fn rasterize(family: ShapeFamily, placement: &Placement, side: usize) -> BinaryMask {
    let (sin, cos) = placement.rotation.sin_cos();
    let mut mask = BinaryMask::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 + 0.5 - placement.center.0) / placement.scale;
            let dy = (y as f64 + 0.5 - placement.center.1) / placement.scale;
            // rotate by -θ into the shape frame
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if family.contains(u, v) {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// Inside pixels with an outside pixel within `width` (4-neighbourhood steps).
fn outline_of(fill: &BinaryMask, width: usize) -> BinaryMask {
    let (h, w) = fill.dims();
    let mut out = BinaryMask::zeros(h, w);
    let outside = |y: isize, x: isize| {
        y < 0 || x < 0 || y >= h as isize || x >= w as isize || !fill.get(y as usize, x as usize)
    };
    for y in 0..h {
        for x in 0..w {
            if !fill.get(y, x) {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let edge = (1..=width as isize).any(|d| {
                outside(yi - d, xi) || outside(yi + d, xi) || outside(yi, xi - d) || outside(yi, xi + d)
            });
            if edge {
                out.set(y, x, true);
            }
        }
    }
    out
}

fn draw_placement(rng: &mut impl Rng, side: usize) -> Placement {
    let s = side as f64;
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1) * s;
    let half = scale / 2.0;
    Placement {
        scale,
        rotation: rng.gen_range(-MAX_ROTATION..=MAX_ROTATION),
        center: (rng.gen_range(half..=s - half), rng.gen_range(half..=s - half)),
    }
}

/// Full render with intermediate layers.
pub fn render_layers(
    class: &ShapeClass,
    domain: &DomainSpec,
    num_classes: usize,
    side: usize,
    rng: &mut impl Rng,
) -> RenderLayers {
    let texture = draw_texture(domain.background, class.id, num_classes, rng);
    let bg_seed: u64 = rng.gen();
    let placement = draw_placement(rng, side);
    let jitter: [f64; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let fg_seed: u64 = rng.gen();
    let style_seed: u64 = rng.gen();

    let background = render_background(domain.background, texture, bg_seed, side);
    let mut annotation = rasterize(class.family, &placement, side);
    if annotation.count_ones() == 0 {
        // Degenerate at tiny resolutions: keep at least the centre pixel.
        let cy = (placement.center.1 as usize).min(side - 1);
        let cx = (placement.center.0 as usize).min(side - 1);
        annotation.set(cy, cx, true);
    }

    let area = side * side;
    let mut composite = background.clone();
    let mut fg_rng = ChaCha8Rng::seed_from_u64(fg_seed);
    match domain.foreground {
        Foreground::Filled => {
            let color: Vec<f64> = (0..3)
                .map(|ch| (class.palette[ch] + jitter[ch]).clamp(0.0, 1.0))
                .collect();
            for (i, &on) in annotation.as_slice().iter().enumerate() {
                if !on {
                    continue;
                }
                let shade: f64 = fg_rng.gen_range(-0.03..0.03);
                let mut px = [0.0; 3];
                for ch in 0..3 {
                    px[ch] = (color[ch] + shade).clamp(0.0, 1.0);
                }
                separate_from(&mut px, &background, i, area);
                for ch in 0..3 {
                    composite[ch * area + i] = px[ch];
                }
            }
        }
        Foreground::Outline { width, ink, jitter } => {
            annotation = outline_of(&annotation, width);
            if annotation.count_ones() == 0 {
                let cy = (placement.center.1 as usize).min(side - 1);
                let cx = (placement.center.0 as usize).min(side - 1);
                annotation.set(cy, cx, true);
            }
            for (i, &on) in annotation.as_slice().iter().enumerate() {
                if !on {
                    continue;
                }
                let v = (ink + fg_rng.gen_range(-jitter..=jitter)).clamp(0.0, 0.9);
                let mut px = [v; 3];
                separate_from(&mut px, &background, i, area);
                for ch in 0..3 {
                    composite[ch * area + i] = px[ch];
                }
            }
        }
    }

    let mut image = composite.clone();
    let mut style_rng = ChaCha8Rng::seed_from_u64(style_seed);
    for op in &domain.style {
        apply_style(&mut image, side, *op, &mut style_rng);
    }
    RenderLayers {
        background,
        composite,
        example: GeneratedExample {
            image,
            label: class.id,
            annotation,
            texture,
        },
    }
}

/// Nudges a foreground pixel that happens to equal the background exactly.
fn separate_from(px: &mut [f64; 3], background: &[f64], i: usize, area: usize) {
    if (0..3).all(|ch| px[ch] == background[ch * area + i]) {
        px[0] = if px[0] > 0.5 { px[0] - 0.02 } else { px[0] + 0.02 };
    }
}

fn apply_style(img: &mut [f64], side: usize, op: StyleOp, rng: &mut ChaCha8Rng) {
    let area = side * side;
    match op {
        StyleOp::BoxBlur { radius } => {
            let r = radius as isize;
            for ch in 0..3 {
                let plane = img[ch * area..(ch + 1) * area].to_vec();
                for y in 0..side as isize {
                    for x in 0..side as isize {
                        let mut acc = 0.0;
                        let mut count = 0.0;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (yy, xx) = (y + dy, x + dx);
                                if yy >= 0 && xx >= 0 && yy < side as isize && xx < side as isize {
                                    acc += plane[yy as usize * side + xx as usize];
                                    count += 1.0;
                                }
                            }
                        }
                        img[ch * area + y as usize * side + x as usize] = acc / count;
                    }
                }
            }
        }
        StyleOp::ColorShift { max } => {
            for ch in 0..3 {
                let offset = rng.gen_range(-max..=max);
                img[ch * area..(ch + 1) * area]
                    .iter_mut()
                    .for_each(|v| *v = (*v + offset).clamp(0.0, 1.0));
            }
        }
        StyleOp::Posterize { levels } => {
            let steps = (levels.max(2) - 1) as f64;
            img.iter_mut()
                .for_each(|v| *v = (*v * steps).round() / steps);
        }
    }
}

/// Renders one example.
pub fn render_example(
    class: &ShapeClass,
    domain: &DomainSpec,
    num_classes: usize,
    side: usize,
    rng: &mut impl Rng,
) -> GeneratedExample {
    render_layers(class, domain, num_classes, side, rng).example
}

/// Per-example stream derived from (seed, index).
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64 ^ 0x5eed_0f_5a11)))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for a (domain, split) pair derived from a root seed.
pub fn split_seed(root: u64, domain: &str, split: &str) -> u64 {
    let mut h = splitmix64(root);
    for b in domain.bytes().chain([b'/']).chain(split.bytes()) {
        h = splitmix64(h ^ b as u64);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub domain: String,
    pub split: String,
    pub example_count: usize,
    pub class_counts: Vec<usize>,
    pub seed: u64,
    pub format_version: u32,
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub side: usize,
    pub seed: u64,
}

/// Balanced split: example i has class i mod K and its own rng stream.
pub fn generate_split(
    domain: &DomainSpec,
    split: &str,
    config: &SplitConfig,
) -> Result<(Dataset, DatasetManifest), DatasetError> {
    if config.n_per_class == 0 {
        return Err(DatasetError::Parameter("n_per_class must be at least 1".into()));
    }
    if config.num_classes == 0 || config.num_classes > MAX_CLASSES {
        return Err(DatasetError::Parameter(format!(
            "num_classes must be in 1..={MAX_CLASSES}, got {}",
            config.num_classes
        )));
    }
    if config.side < 8 {
        return Err(DatasetError::Parameter(format!("image side {} too small", config.side)));
    }
    if let BackgroundPolicy::ClassCorrelated { bias } = domain.background {
        if !(0.0..=1.0).contains(&bias) {
            return Err(DatasetError::Parameter(format!("bias {bias} outside [0, 1]")));
        }
    }
    let total = config.num_classes * config.n_per_class;
    let examples: Vec<Example> = (0..total)
        .map(|i| {
            let class = ShapeClass::standard(i % config.num_classes);
            let mut rng = example_rng(config.seed, i);
            let g = render_example(&class, domain, config.num_classes, config.side, &mut rng);
            Example {
                id: i,
                image: g.image,
                label: g.label,
                annotation: Some(g.annotation),
                texture: g.texture,
            }
        })
        .collect();
    let dataset = Dataset {
        name: format!("{}/{}", domain.name, split),
        image_shape: [3, config.side, config.side],
        num_classes: config.num_classes,
        examples,
    };
    let manifest = DatasetManifest {
        domain: domain.name.clone(),
        split: split.into(),
        example_count: total,
        class_counts: dataset.class_counts(),
        seed: config.seed,
        format_version: FORMAT_VERSION,
    };
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, k: usize, seed: u64) -> SplitConfig {
        SplitConfig {
            num_classes: k,
            n_per_class: n,
            side: DEFAULT_SIDE,
            seed,
        }
    }

    #[test]
    fn uniform_white_background_is_white() {
        let mut rng = example_rng(1, 0);
        for id in 0..MAX_CLASSES {
            let layers = render_layers(
                &ShapeClass::standard(id),
                &DomainSpec::graphics(),
                MAX_CLASSES,
                DEFAULT_SIDE,
                &mut rng,
            );
            let ex = &layers.example;
            let area = DEFAULT_SIDE * DEFAULT_SIDE;
            for (i, &on) in ex.annotation.as_slice().iter().enumerate() {
                if !on {
                    for ch in 0..3 {
                        assert_eq!(ex.image[ch * area + i], 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn annotation_equals_background_diff() {
        let mut domains = DomainSpec::targets();
        domains.push(DomainSpec::source(1.0));
        domains.push(DomainSpec::source(0.3));
        for domain in &domains {
            for i in 0..20 {
                let mut rng = example_rng(7, i);
                let class = ShapeClass::standard(i % MAX_CLASSES);
                let layers = render_layers(&class, domain, MAX_CLASSES, DEFAULT_SIDE, &mut rng);
                // Independent background-only render from the same draws.
                let mut replay = example_rng(7, i);
                let texture = draw_texture(domain.background, class.id, MAX_CLASSES, &mut replay);
                let bg_seed: u64 = replay.gen();
                let bg = render_background(domain.background, texture, bg_seed, DEFAULT_SIDE);
                assert_eq!(bg, layers.background);
                let area = DEFAULT_SIDE * DEFAULT_SIDE;
                for p in 0..area {
                    let differs = (0..3).any(|ch| layers.composite[ch * area + p] != bg[ch * area + p]);
                    assert_eq!(
                        differs,
                        layers.example.annotation.as_slice()[p],
                        "{} example {i} pixel {p}",
                        domain.name
                    );
                }
                let ones = layers.example.annotation.count_ones();
                assert!(ones >= 1 && ones * 10 <= area * 6);
                assert!(layers.example.image.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let class = ShapeClass::standard(3);
        for domain in DomainSpec::targets() {
            let a = render_example(&class, &domain, 10, 64, &mut example_rng(5, 9));
            let b = render_example(&class, &domain, 10, 64, &mut example_rng(5, 9));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn split_counts_and_full_bias() {
        let (ds, manifest) = generate_split(&DomainSpec::source(1.0), "train", &cfg(1, 10, 3)).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(manifest.class_counts, vec![1; 10]);
        let (ds, _) = generate_split(&DomainSpec::source(1.0), "train", &cfg(5, 10, 4)).unwrap();
        assert!(ds.examples.iter().all(|e| e.texture == Some(e.label)));
        assert!(generate_split(&DomainSpec::source(1.0), "train", &cfg(0, 10, 4)).is_err());
    }

    #[test]
    fn split_regenerates_identically() {
        let a = generate_split(&DomainSpec::painting(), "test", &cfg(2, 10, 8)).unwrap();
        let b = generate_split(&DomainSpec::painting(), "test", &cfg(2, 10, 8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outline_is_inside_fill() {
        let p = Placement {
            scale: 30.0,
            rotation: 0.0,
            center: (32.0, 32.0),
        };
        let fill = rasterize(ShapeFamily::Square, &p, 64);
        let edge = outline_of(&fill, 1);
        assert!(edge.count_ones() > 0 && edge.count_ones() < fill.count_ones());
        for (e, f) in edge.as_slice().iter().zip(fill.as_slice()) {
            assert!(!e || *f);
        }
    }
}
