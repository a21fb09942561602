//! Synthetic garment-glyph stimuli: 10 categories of filled-polygon
//! silhouettes rendered with affine jitter and pixel noise, and 4x4
//! search collages built from them.
//!
//! The silhouettes only need to be mutually separable (the encoder quality
//! gate checks that a trained classifier reaches >= 90% top-1 on them) and
//! pairwise distinct (mean absolute pixel difference between any two base
//! silhouettes >= 0.05); the exact polygons are otherwise free choices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const NUM_CATEGORIES: usize = 10;

/// The ten garment categories, id 0..=9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Category {
    Blouse = 0,
    TShirt = 1,
    Jean = 2,
    Shorts = 3,
    Skirt = 4,
    Cardigan = 5,
    Dress = 6,
    Jacket = 7,
    Sweater = 8,
    Tank = 9,
}

pub const ALL_CATEGORIES: [Category; NUM_CATEGORIES] = [
    Category::Blouse,
    Category::TShirt,
    Category::Jean,
    Category::Shorts,
    Category::Skirt,
    Category::Cardigan,
    Category::Dress,
    Category::Jacket,
    Category::Sweater,
    Category::Tank,
];

impl Category {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Category> {
        ALL_CATEGORIES
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Index {
                op: "category_from_id",
                detail: format!("id {id}"),
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Blouse => "Blouse",
            Category::TShirt => "T-Shirt",
            Category::Jean => "Jean",
            Category::Shorts => "Shorts",
            Category::Skirt => "Skirt",
            Category::Cardigan => "Cardigan",
            Category::Dress => "Dress",
            Category::Jacket => "Jacket",
            Category::Sweater => "Sweater",
            Category::Tank => "Tank",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        ALL_CATEGORIES.iter().copied().find(|c| {
            c.name().eq_ignore_ascii_case(name)
                || c.name().replace('-', "").eq_ignore_ascii_case(name)
        })
    }
}

impl core::fmt::Display for Category {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Silhouette geometry
// ---------------------------------------------------------------------------

type Point = (f32, f32); // (x, y), y down, in a 32x32 design space

struct Motif {
    solids: Vec<Vec<Point>>,
    holes: Vec<Vec<Point>>,
}

fn rect(x0: f32, y0: f32, x1: f32, y1: f32) -> Vec<Point> {
    vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
}

/// Point-in-convex-polygon via sign-consistent edge cross products.
fn inside_convex(poly: &[Point], p: Point) -> bool {
    let mut pos = false;
    let mut neg = false;
    let n = poly.len();
    for i in 0..n {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % n];
        let cross = (bx - ax) * (p.1 - ay) - (by - ay) * (p.0 - ax);
        if cross > 0.0 {
            pos = true;
        } else if cross < 0.0 {
            neg = true;
        }
        if pos && neg {
            return false;
        }
    }
    true
}

fn motif(category: Category) -> Motif {
    let (solids, holes): (Vec<Vec<Point>>, Vec<Vec<Point>>) = match category {
        // Collared top: torso, short sleeves, triangular collar notch.
        Category::Blouse => (
            vec![
                rect(10.0, 7.0, 22.0, 25.0),
                rect(6.0, 7.0, 10.0, 13.0),
                rect(22.0, 7.0, 26.0, 13.0),
            ],
            vec![vec![(12.5, 7.0), (19.5, 7.0), (16.0, 13.0)]],
        ),
        // Tee: torso plus boxier short sleeves, no collar.
        Category::TShirt => (
            vec![
                rect(11.0, 7.0, 21.0, 24.0),
                rect(5.0, 7.0, 11.0, 13.0),
                rect(21.0, 7.0, 27.0, 13.0),
            ],
            vec![],
        ),
        // Two long bars under a waistband.
        Category::Jean => (
            vec![
                rect(10.0, 5.0, 22.0, 9.0),
                rect(10.0, 9.0, 15.0, 27.0),
                rect(17.0, 9.0, 22.0, 27.0),
            ],
            vec![],
        ),
        // Two short bars under a wider waistband.
        Category::Shorts => (
            vec![
                rect(9.0, 7.0, 23.0, 11.0),
                rect(9.0, 11.0, 15.0, 19.0),
                rect(17.0, 11.0, 23.0, 19.0),
            ],
            vec![],
        ),
        // Plain trapezoid, narrow top.
        Category::Skirt => (
            vec![vec![(12.0, 8.0), (20.0, 8.0), (26.0, 26.0), (6.0, 26.0)]],
            vec![],
        ),
        // Open front, wide and long: yoke plus two panels.
        Category::Cardigan => (
            vec![
                rect(7.0, 6.0, 25.0, 9.0),
                rect(7.0, 9.0, 14.0, 26.0),
                rect(18.0, 9.0, 25.0, 26.0),
            ],
            vec![],
        ),
        // Bodice on top of a trapezoid skirt.
        Category::Dress => (
            vec![
                rect(11.0, 5.0, 21.0, 13.0),
                vec![(11.0, 13.0), (21.0, 13.0), (26.0, 27.0), (6.0, 27.0)],
            ],
            vec![],
        ),
        // Open front, narrower and shorter than the cardigan.
        Category::Jacket => (
            vec![
                rect(9.0, 5.0, 23.0, 8.0),
                rect(9.0, 8.0, 15.0, 23.0),
                rect(17.0, 8.0, 23.0, 23.0),
            ],
            vec![],
        ),
        // Long-sleeved: big torso, arms reaching far down.
        Category::Sweater => (
            vec![
                rect(11.0, 6.0, 21.0, 26.0),
                rect(5.0, 6.0, 11.0, 22.0),
                rect(21.0, 6.0, 27.0, 22.0),
            ],
            vec![],
        ),
        // Torso hanging from two thin straps.
        Category::Tank => (
            vec![
                rect(11.0, 10.0, 21.0, 26.0),
                rect(12.0, 5.0, 14.0, 10.0),
                rect(18.0, 5.0, 20.0, 10.0),
            ],
            vec![],
        ),
    };
    Motif { solids, holes }
}

fn motif_covers(m: &Motif, p: Point) -> bool {
    m.solids.iter().any(|poly| inside_convex(poly, p))
        && !m.holes.iter().any(|poly| inside_convex(poly, p))
}

// ---------------------------------------------------------------------------
// Exemplar rendering
// ---------------------------------------------------------------------------

pub const EXEMPLAR_SIZE: usize = 32;
const DESIGN_SIZE: f32 = 32.0;

#[derive(Debug, Clone)]
pub struct RenderParams {
    pub size: usize,
    /// Fill intensity is drawn uniformly from this range.
    pub fill_min: f32,
    pub fill_max: f32,
    /// Scale jitter: factor drawn from 1 +- this.
    pub scale_jitter: f32,
    /// Translation jitter in px, each axis uniform in +- this.
    pub translate_jitter: f32,
    /// Rotation jitter in degrees, uniform in +- this.
    pub rotation_jitter_deg: f32,
    /// Additive Gaussian pixel noise, clamped into [0, 1].
    pub noise_sigma: f32,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            size: EXEMPLAR_SIZE,
            fill_min: 0.6,
            fill_max: 1.0,
            scale_jitter: 0.1,
            translate_jitter: 2.0,
            rotation_jitter_deg: 5.0,
            noise_sigma: 0.03,
        }
    }
}

impl RenderParams {
    /// Identity transform, full fill, no noise: the exact base silhouette.
    pub fn exact() -> Self {
        RenderParams {
            fill_min: 1.0,
            fill_max: 1.0,
            scale_jitter: 0.0,
            translate_jitter: 0.0,
            rotation_jitter_deg: 0.0,
            noise_sigma: 0.0,
            ..RenderParams::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExemplarImage {
    /// size x size grayscale in [0, 1].
    pub pixels: Tensor,
    pub category: Category,
    pub seed: u64,
}

/// Render one exemplar. All randomness comes from `seed`; the draw order
/// is fill, scale, rotation, tx, ty, then per-pixel noise in row-major
/// order, so identical seeds give bitwise-identical pixels.
pub fn render_exemplar_with(category: Category, seed: u64, params: &RenderParams) -> ExemplarImage {
    let mut rng = Stream::new(seed).split("exemplar");
    let fill = rng.range_f64(params.fill_min as f64, params.fill_max as f64) as f32;
    let scale =
        1.0 + rng.range_f64(-params.scale_jitter as f64, params.scale_jitter as f64) as f32;
    let rot_deg = rng.range_f64(
        -params.rotation_jitter_deg as f64,
        params.rotation_jitter_deg as f64,
    ) as f32;
    let tx = rng.range_f64(-params.translate_jitter as f64, params.translate_jitter as f64) as f32;
    let ty = rng.range_f64(-params.translate_jitter as f64, params.translate_jitter as f64) as f32;

    let m = motif(category);
    let size = params.size;
    let to_design = DESIGN_SIZE / size as f32;
    let c = DESIGN_SIZE / 2.0;
    let rot = rot_deg.to_radians();
    let (sin, cos) = (libm::sinf(rot), libm::cosf(rot));
    let inv_scale = 1.0 / scale;

    let mut pixels = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            // Pixel center, mapped back through the inverse jitter.
            let px = (j as f32 + 0.5) * to_design;
            let py = (i as f32 + 0.5) * to_design;
            let dx = (px - c - tx) * inv_scale;
            let dy = (py - c - ty) * inv_scale;
            let rx = cos * dx + sin * dy + c;
            let ry = -sin * dx + cos * dy + c;
            if motif_covers(&m, (rx, ry)) {
                pixels.data_mut()[i * size + j] = fill;
            }
        }
    }
    if params.noise_sigma > 0.0 {
        for v in pixels.data_mut() {
            let n = rng.normal() as f32 * params.noise_sigma;
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    ExemplarImage {
        pixels,
        category,
        seed,
    }
}

pub fn render_exemplar(category: Category, seed: u64) -> ExemplarImage {
    render_exemplar_with(category, seed, &RenderParams::default())
}

/// The untransformed, noise-free silhouette mask at full intensity.
pub fn base_silhouette(category: Category, size: usize) -> Tensor {
    let m = motif(category);
    let to_design = DESIGN_SIZE / size as f32;
    let mut pixels = Tensor::zeros(&[size, size]);
    for i in 0..size {
        for j in 0..size {
            let p = ((j as f32 + 0.5) * to_design, (i as f32 + 0.5) * to_design);
            if motif_covers(&m, p) {
                pixels.data_mut()[i * size + j] = 1.0;
            }
        }
    }
    pixels
}

// ---------------------------------------------------------------------------
// Collages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CollageParams {
    /// Cells per side (grid x grid items).
    pub grid: usize,
    /// Cell edge in px; canvas edge = grid * cell_px.
    pub cell_px: usize,
    /// How many items show the target category.
    pub n_target: usize,
    /// Item placement jitter around the cell center, integer px each axis.
    pub place_jitter_px: i32,
    pub render: RenderParams,
}

impl Default for CollageParams {
    fn default() -> Self {
        CollageParams {
            grid: 4,
            cell_px: 64,
            n_target: 2,
            place_jitter_px: 4,
            render: RenderParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollageItem {
    pub row: usize,
    pub col: usize,
    /// Pixel bounding box (y0, x0, y1, x1), half-open.
    pub bbox: (usize, usize, usize, usize),
    pub category: Category,
    pub exemplar_seed: u64,
}

impl CollageItem {
    /// Center of the item's bounding box in canvas coordinates (x, y).
    pub fn center(&self) -> (f32, f32) {
        let (y0, x0, y1, x1) = self.bbox;
        ((x0 + x1) as f32 / 2.0, (y0 + y1) as f32 / 2.0)
    }
}

#[derive(Debug, Clone)]
pub struct Collage {
    /// canvas_px x canvas_px grayscale in [0, 1].
    pub canvas: Tensor,
    pub items: Vec<CollageItem>,
    pub target: Category,
}

impl Collage {
    pub fn canvas_px(&self) -> usize {
        self.canvas.shape()[0]
    }

    pub fn target_items(&self) -> impl Iterator<Item = &CollageItem> {
        self.items.iter().filter(move |it| it.category == self.target)
    }

    pub fn distractor_items(&self) -> impl Iterator<Item = &CollageItem> {
        self.items.iter().filter(move |it| it.category != self.target)
    }
}

/// Copy `img` into `canvas` with its top-left corner at (y0, x0).
pub fn paste(canvas: &mut Tensor, img: &Tensor, y0: usize, x0: usize) -> Result<()> {
    let (ch, cw) = match canvas.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::Shape {
                op: "paste",
                detail: format!("canvas {s:?}"),
            })
        }
    };
    let (ih, iw) = match img.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::Shape {
                op: "paste",
                detail: format!("image {s:?}"),
            })
        }
    };
    if y0 + ih > ch || x0 + iw > cw {
        return Err(Error::Shape {
            op: "paste",
            detail: format!("{ih}x{iw} at ({y0},{x0}) exceeds {ch}x{cw}"),
        });
    }
    for r in 0..ih {
        let dst = &mut canvas.data_mut()[(y0 + r) * cw + x0..(y0 + r) * cw + x0 + iw];
        dst.copy_from_slice(&img.data()[r * iw..(r + 1) * iw]);
    }
    Ok(())
}

/// Center `img` on a fresh square canvas of the given edge.
pub fn paste_center(img: &Tensor, canvas_px: usize) -> Result<Tensor> {
    let mut canvas = Tensor::zeros(&[canvas_px, canvas_px]);
    let ih = img.shape()[0];
    let iw = img.shape()[1];
    paste(&mut canvas, img, (canvas_px - ih) / 2, (canvas_px - iw) / 2)?;
    Ok(canvas)
}

/// Build a search collage: `n_target` target exemplars and distractors
/// drawn uniformly from the other categories, shuffled over the grid
/// cells, each centered in its cell with integer placement jitter.
pub fn build_collage_with(
    target: Category,
    seed: u64,
    params: &CollageParams,
) -> Result<Collage> {
    let n_items = params.grid * params.grid;
    if params.n_target < 1 || params.n_target > n_items {
        return Err(Error::InvalidParam {
            op: "build_collage",
            detail: format!("n_target {} not in 1..={n_items}", params.n_target),
        });
    }
    let ex = params.render.size;
    if ex > params.cell_px {
        return Err(Error::InvalidParam {
            op: "build_collage",
            detail: format!("exemplar {ex} larger than cell {}", params.cell_px),
        });
    }
    let margin = (params.cell_px - ex) / 2;
    if params.place_jitter_px < 0 || params.place_jitter_px as usize > margin {
        return Err(Error::InvalidParam {
            op: "build_collage",
            detail: format!(
                "placement jitter {} exceeds cell margin {margin}",
                params.place_jitter_px
            ),
        });
    }

    let mut rng = Stream::new(seed).split("collage");
    let mut cats: Vec<Category> = Vec::with_capacity(n_items);
    for _ in 0..params.n_target {
        cats.push(target);
    }
    for _ in params.n_target..n_items {
        // Uniform over the 9 non-target categories.
        let mut id = rng.below(NUM_CATEGORIES as u64 - 1) as u8;
        if id >= target.id() {
            id += 1;
        }
        cats.push(Category::from_id(id)?);
    }
    rng.shuffle(&mut cats);

    let canvas_px = params.grid * params.cell_px;
    let mut canvas = Tensor::zeros(&[canvas_px, canvas_px]);
    let mut items = Vec::with_capacity(n_items);
    let j = params.place_jitter_px as i64;
    for (cell, &category) in cats.iter().enumerate() {
        let row = cell / params.grid;
        let col = cell % params.grid;
        let jx = rng.below((2 * j + 1) as u64) as i64 - j;
        let jy = rng.below((2 * j + 1) as u64) as i64 - j;
        let exemplar_seed = rng.next_u64();
        let y0 = (row * params.cell_px) as i64 + margin as i64 + jy;
        let x0 = (col * params.cell_px) as i64 + margin as i64 + jx;
        let exemplar = render_exemplar_with(category, exemplar_seed, &params.render);
        paste(&mut canvas, &exemplar.pixels, y0 as usize, x0 as usize)?;
        items.push(CollageItem {
            row,
            col,
            bbox: (y0 as usize, x0 as usize, y0 as usize + ex, x0 as usize + ex),
            category,
            exemplar_seed,
        });
    }
    Ok(Collage {
        canvas,
        items,
        target,
    })
}

pub fn build_collage(target: Category, n_target: usize, seed: u64) -> Result<Collage> {
    build_collage_with(
        target,
        seed,
        &CollageParams {
            n_target,
            ..CollageParams::default()
        },
    )
}

/// Mean absolute pixel difference between two equally-shaped images.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0f32;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        acc += (x - y).abs();
    }
    acc / a.len() as f32
}
