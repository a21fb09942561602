//! Simulated search fixations and fixation density maps.
//!
//! A fixation density map (FDM) is the sum of one isotropic Gaussian splat
//! per fixation on the stimulus canvas, truncated at a radius of 3 sigma,
//! area-averaged down to the feature grid and (by default) normalized to
//! unit mass. Splatting, downsampling and normalization run in f64
//! internally and the grid is fixed to f32 at the end, which keeps the map
//! insensitive to fixation order at f32 resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::stimuli::{Category, Collage};
use crate::tensor::Tensor;

/// One gaze fixation: canvas position in px and dwell duration in ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    pub x: f32,
    pub y: f32,
    pub t_ms: f32,
}

/// Chronological fixations of one participant on one stimulus.
#[derive(Debug, Clone)]
pub struct FixationLog {
    pub participant: String,
    pub collage_ref: String,
    pub target: Category,
    pub fixations: Vec<Fixation>,
}

#[derive(Debug, Clone)]
pub struct GazeParams {
    pub n_fix: usize,
    /// Probability that a fixation lands on a target item.
    pub p_target: f64,
    /// Isotropic positional jitter around the chosen item center, px.
    pub pos_jitter_sigma: f64,
    /// Fixation duration ~ Gamma(shape, scale) in ms.
    pub duration_shape: f64,
    pub duration_scale_ms: f64,
}

impl Default for GazeParams {
    fn default() -> Self {
        GazeParams {
            n_fix: 20,
            p_target: 0.6,
            pos_jitter_sigma: 6.0,
            duration_shape: 2.0,
            duration_scale_ms: 100.0,
        }
    }
}

/// Simulate one search session on a collage. Each fixation independently
/// picks a uniformly chosen target item center with probability
/// `p_target`, otherwise a uniformly chosen distractor center (falling
/// back to targets if the collage has no distractors), then adds Gaussian
/// positional jitter clamped to the canvas. Draw order per fixation is
/// target coin, item pick, x jitter, y jitter, duration.
pub fn simulate_search(
    collage: &Collage,
    params: &GazeParams,
    seed: u64,
) -> Result<FixationLog> {
    if params.n_fix < 1 {
        return Err(Error::InvalidParam {
            op: "simulate_search",
            detail: "n_fix must be >= 1".into(),
        });
    }
    if !(0.0..=1.0).contains(&params.p_target) {
        return Err(Error::InvalidParam {
            op: "simulate_search",
            detail: format!("p_target {} not in [0, 1]", params.p_target),
        });
    }
    let targets: Vec<(f32, f32)> = collage.target_items().map(|it| it.center()).collect();
    let distractors: Vec<(f32, f32)> = collage.distractor_items().map(|it| it.center()).collect();
    if targets.is_empty() {
        return Err(Error::InvalidParam {
            op: "simulate_search",
            detail: "collage has no target items".into(),
        });
    }
    let max_coord = collage.canvas_px() as f64 - 1e-3;
    let mut rng = Stream::new(seed).split("gaze");
    let mut fixations = Vec::with_capacity(params.n_fix);
    for _ in 0..params.n_fix {
        let on_target = rng.bernoulli(params.p_target);
        let pool = if on_target || distractors.is_empty() {
            &targets
        } else {
            &distractors
        };
        let (cx, cy) = pool[rng.below(pool.len() as u64) as usize];
        let x = (cx as f64 + rng.normal() * params.pos_jitter_sigma).clamp(0.0, max_coord);
        let y = (cy as f64 + rng.normal() * params.pos_jitter_sigma).clamp(0.0, max_coord);
        let t_ms = rng.gamma(params.duration_shape, params.duration_scale_ms);
        fixations.push(Fixation {
            x: x as f32,
            y: y as f32,
            t_ms: t_ms as f32,
        });
    }
    Ok(FixationLog {
        participant: String::new(),
        collage_ref: String::new(),
        target: collage.target,
        fixations,
    })
}

// ---------------------------------------------------------------------------
// Fixation density maps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FdmParams {
    /// Output grid (rows, cols); must divide the source canvas evenly.
    pub grid: (usize, usize),
    /// Gaussian splat std in source-canvas px.
    pub sigma_px: f32,
    /// Splats are cut off beyond this many sigmas.
    pub truncate_sigmas: f32,
    /// Weight each splat by its fixation duration instead of 1.
    pub duration_weighted: bool,
    /// Divide by total mass so the grid sums to 1.
    pub normalize: bool,
}

impl Default for FdmParams {
    fn default() -> Self {
        FdmParams {
            grid: (32, 32),
            sigma_px: 8.0,
            truncate_sigmas: 3.0,
            duration_weighted: false,
            normalize: true,
        }
    }
}

/// A nonnegative spatial weighting grid over a stimulus.
#[derive(Debug, Clone)]
pub struct FixationDensityMap {
    /// grid_h x grid_w, nonnegative; sums to 1 when built normalized.
    pub grid: Tensor,
    /// Canvas resolution the splats were evaluated on.
    pub source_h: usize,
    pub source_w: usize,
    /// Splat std used (0 for the uniform map).
    pub sigma_px: f32,
}

impl FixationDensityMap {
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn total_mass(&self) -> f32 {
        self.grid.data().iter().sum()
    }
}

/// Accumulate the raw (pre-downsample) splat canvas in f64.
fn splat_f64(
    fixations: &[Fixation],
    source: (usize, usize),
    sigma: f32,
    truncate_sigmas: f32,
    duration_weighted: bool,
) -> Result<Vec<f64>> {
    if fixations.is_empty() {
        return Err(Error::EmptyInput("build_fdm"));
    }
    let (h, w) = source;
    let sigma = sigma as f64;
    if sigma <= 0.0 {
        return Err(Error::InvalidParam {
            op: "build_fdm",
            detail: "sigma must be positive".into(),
        });
    }
    let radius = truncate_sigmas as f64 * sigma;
    let r2_max = radius * radius;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut canvas = vec![0.0f64; h * w];
    for f in fixations {
        let amp = if duration_weighted { f.t_ms as f64 } else { 1.0 };
        let fx = f.x as f64;
        let fy = f.y as f64;
        let y_lo = libm::floor(fy - radius).max(0.0) as usize;
        let y_hi = libm::ceil(fy + radius).min((h - 1) as f64) as usize;
        let x_lo = libm::floor(fx - radius).max(0.0) as usize;
        let x_hi = libm::ceil(fx + radius).min((w - 1) as f64) as usize;
        for py in y_lo..=y_hi {
            let dy = py as f64 - fy;
            for px in x_lo..=x_hi {
                let dx = px as f64 - fx;
                let r2 = dx * dx + dy * dy;
                if r2 <= r2_max {
                    canvas[py * w + px] += amp * libm::exp(-r2 * inv_two_var);
                }
            }
        }
    }
    Ok(canvas)
}

/// The raw splat canvas as f32, before downsampling or normalization.
pub fn splat_canvas(
    fixations: &[Fixation],
    source: (usize, usize),
    sigma: f32,
    truncate_sigmas: f32,
    duration_weighted: bool,
) -> Result<Tensor> {
    let canvas = splat_f64(fixations, source, sigma, truncate_sigmas, duration_weighted)?;
    Tensor::from_vec(&[source.0, source.1], canvas.iter().map(|&v| v as f32).collect())
}

fn area_downsample_f64(canvas: &[f64], source: (usize, usize), grid: (usize, usize)) -> Result<Vec<f64>> {
    let (h, w) = source;
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::Shape {
            op: "build_fdm",
            detail: format!("grid {gh}x{gw} does not divide canvas {h}x{w}"),
        });
    }
    let (by, bx) = (h / gh, w / gw);
    let inv_area = 1.0 / (by * bx) as f64;
    let mut out = vec![0.0f64; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = 0.0;
            for iy in 0..by {
                let row = (gy * by + iy) * w + gx * bx;
                for v in &canvas[row..row + bx] {
                    acc += v;
                }
            }
            out[gy * gw + gx] = acc * inv_area;
        }
    }
    Ok(out)
}

/// Build a fixation density map from a set of fixations on a canvas of
/// the given resolution.
pub fn build_fdm(
    fixations: &[Fixation],
    source: (usize, usize),
    params: &FdmParams,
) -> Result<FixationDensityMap> {
    let canvas = splat_f64(
        fixations,
        source,
        params.sigma_px,
        params.truncate_sigmas,
        params.duration_weighted,
    )?;
    let mut grid = area_downsample_f64(&canvas, source, params.grid)?;
    if params.normalize {
        let total: f64 = grid.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate {
                op: "build_fdm",
                detail: "zero total mass".into(),
            });
        }
        for v in &mut grid {
            *v /= total;
        }
    }
    Ok(FixationDensityMap {
        grid: Tensor::from_vec(
            &[params.grid.0, params.grid.1],
            grid.iter().map(|&v| v as f32).collect(),
        )?,
        source_h: source.0,
        source_w: source.1,
        sigma_px: params.sigma_px,
    })
}

/// Single-fixation convenience used by per-fixation session encoding.
pub fn build_fdm_single(
    fixation: &Fixation,
    source: (usize, usize),
    params: &FdmParams,
) -> Result<FixationDensityMap> {
    build_fdm(core::slice::from_ref(fixation), source, params)
}

/// The constant map 1 / (grid_h * grid_w): gaze that tells us a stimulus
/// was looked at but not where.
pub fn uniform_fdm(grid: (usize, usize)) -> FixationDensityMap {
    let (gh, gw) = grid;
    FixationDensityMap {
        grid: Tensor::filled(&[gh, gw], 1.0 / (gh * gw) as f32),
        source_h: gh,
        source_w: gw,
        sigma_px: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{build_collage, Category};

    fn fix(x: f32, y: f32, t: f32) -> Fixation {
        Fixation { x, y, t_ms: t }
    }

    #[test]
    fn single_center_fixation_peaks_at_center_and_sums_to_one() {
        let f = fix(128.0, 128.0, 250.0);
        let fdm = build_fdm(&[f], (256, 256), &FdmParams::default()).unwrap();
        let total = fdm.total_mass();
        assert!((total - 1.0).abs() < 1e-6, "mass {total}");
        let data = fdm.grid.data();
        let argmax = data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // Center of the 32x32 grid, up to the half-cell parity.
        let (gy, gx) = (argmax / 32, argmax % 32);
        assert!((15..=16).contains(&gy) && (15..=16).contains(&gx), "({gy},{gx})");
        assert!(data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn splat_ratio_at_one_sigma_is_exp_minus_half() {
        let f = fix(128.0, 128.0, 100.0);
        let canvas = splat_canvas(&[f], (256, 256), 8.0, 3.0, false).unwrap();
        let center = canvas.at(&[128, 128]);
        let at_sigma = canvas.at(&[128, 136]);
        let ratio = at_sigma / center;
        let expected = libm::expf(-0.5);
        assert!((ratio - expected).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn duplicate_fixations_cancel_under_normalization() {
        let f = fix(100.0, 60.0, 123.0);
        let one = build_fdm(&[f], (256, 256), &FdmParams::default()).unwrap();
        let two = build_fdm(&[f, f], (256, 256), &FdmParams::default()).unwrap();
        assert_eq!(one.grid.data(), two.grid.data());
    }

    #[test]
    fn fixation_order_does_not_matter() {
        let a = [fix(40.0, 40.0, 10.0), fix(200.0, 120.0, 20.0), fix(90.0, 220.0, 30.0)];
        let b = [a[2], a[0], a[1]];
        let fa = build_fdm(&a, (256, 256), &FdmParams::default()).unwrap();
        let fb = build_fdm(&b, (256, 256), &FdmParams::default()).unwrap();
        for (x, y) in fa.grid.data().iter().zip(fb.grid.data()) {
            assert!((x - y).abs() <= 1e-7);
        }
    }

    #[test]
    fn duration_scaling_is_irrelevant_without_duration_weighting() {
        let a = [fix(40.0, 40.0, 10.0), fix(200.0, 120.0, 20.0)];
        let b = [fix(40.0, 40.0, 1000.0), fix(200.0, 120.0, 2000.0)];
        let fa = build_fdm(&a, (256, 256), &FdmParams::default()).unwrap();
        let fb = build_fdm(&b, (256, 256), &FdmParams::default()).unwrap();
        assert_eq!(fa.grid.data(), fb.grid.data());
    }

    #[test]
    fn downsampling_conserves_mass_up_to_area_factor() {
        let fs = [fix(31.5, 77.0, 5.0), fix(130.0, 16.0, 9.0)];
        let canvas = splat_canvas(&fs, (256, 256), 8.0, 3.0, false).unwrap();
        let raw: f64 = canvas.data().iter().map(|&v| v as f64).sum();
        let fdm = build_fdm(
            &fs,
            (256, 256),
            &FdmParams {
                normalize: false,
                ..FdmParams::default()
            },
        )
        .unwrap();
        let down: f64 = fdm.grid.data().iter().map(|&v| v as f64).sum();
        let area = (256 / 32) * (256 / 32);
        assert!((down * area as f64 - raw).abs() / raw < 1e-6);
    }

    #[test]
    fn uniform_map_is_flat_unit_mass() {
        let u = uniform_fdm((32, 32));
        assert!(u.grid.data().iter().all(|&v| v == 1.0 / 1024.0));
        assert!((u.total_mass() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_log_is_rejected() {
        assert!(matches!(
            build_fdm(&[], (256, 256), &FdmParams::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn grid_must_divide_canvas() {
        let f = [fix(10.0, 10.0, 5.0)];
        let p = FdmParams {
            grid: (33, 32),
            ..FdmParams::default()
        };
        assert!(build_fdm(&f, (256, 256), &p).is_err());
    }

    #[test]
    fn pure_target_gaze_with_zero_jitter_hits_target_centers() {
        let collage = build_collage(Category::Jean, 2, 11).unwrap();
        let params = GazeParams {
            p_target: 1.0,
            pos_jitter_sigma: 0.0,
            n_fix: 50,
            ..GazeParams::default()
        };
        let log = simulate_search(&collage, &params, 5).unwrap();
        let centers: alloc::vec::Vec<(f32, f32)> =
            collage.target_items().map(|it| it.center()).collect();
        for f in &log.fixations {
            assert!(centers.iter().any(|&(cx, cy)| cx == f.x && cy == f.y));
        }
    }

    #[test]
    fn target_fraction_matches_p_target() {
        let collage = build_collage(Category::Skirt, 2, 3).unwrap();
        let params = GazeParams {
            p_target: 0.6,
            pos_jitter_sigma: 0.0,
            n_fix: 10_000,
            ..GazeParams::default()
        };
        let log = simulate_search(&collage, &params, 17).unwrap();
        let centers: alloc::vec::Vec<(f32, f32)> =
            collage.target_items().map(|it| it.center()).collect();
        let on = log
            .fixations
            .iter()
            .filter(|f| centers.iter().any(|&(cx, cy)| cx == f.x && cy == f.y))
            .count();
        let frac = on as f64 / log.fixations.len() as f64;
        assert!((frac - 0.6).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn duration_mean_matches_gamma_law() {
        let collage = build_collage(Category::Tank, 2, 21).unwrap();
        let params = GazeParams {
            n_fix: 10_000,
            ..GazeParams::default()
        };
        let log = simulate_search(&collage, &params, 31).unwrap();
        let mean: f64 =
            log.fixations.iter().map(|f| f.t_ms as f64).sum::<f64>() / log.fixations.len() as f64;
        assert!((mean - 200.0).abs() < 5.0, "mean duration {mean}");
        assert!(log.fixations.iter().all(|f| f.t_ms > 0.0));
    }

    #[test]
    fn fixations_stay_on_canvas() {
        let collage = build_collage(Category::Dress, 2, 9).unwrap();
        let params = GazeParams {
            pos_jitter_sigma: 80.0,
            n_fix: 2000,
            ..GazeParams::default()
        };
        let log = simulate_search(&collage, &params, 1).unwrap();
        for f in &log.fixations {
            assert!(f.x >= 0.0 && f.x < 256.0);
            assert!(f.y >= 0.0 && f.y < 256.0);
        }
    }
}
