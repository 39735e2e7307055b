//! Seeded synthetic watershed generator.
//!
//! Substitutes for an unavailable real dataset: builds a feature stack whose
//! flood-probability field is driven by a carved river network — the
//! "distance to river" and "drainage density" layers carry the planted
//! signal — surrounded by terrain-derived and correlated nuisance layers and
//! exactly one pure-noise layer (`convergence_index`). Flood points are
//! sampled from the probability field and non-flood points from its
//! complement, so the planted factors are recoverable by sensitivity
//! analysis and the stack supports end-to-end training at desk scale.
//!
//! Everything is a pure function of the seed: one ChaCha stream is consumed
//! in a fixed stage order, so a fixed seed reproduces the stack and the
//! inventory bit-for-bit.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::stack::{FeatureStack, DEFAULT_CELL_SIZE, DEFAULT_NODATA};
use super::{InventoryPoint, PointSource};

/// The sixteen factor names, in layer order.
pub const SYNTH_FACTORS: [&str; 16] = [
    "elevation",
    "slope",
    "aspect",
    "curvature",
    "distance_to_river",
    "tpi",
    "ruggedness",
    "convergence_index",
    "flow_accumulation",
    "spi",
    "twi",
    "drainage_density",
    "rainfall",
    "ndvi",
    "landcover",
    "distance_to_roads",
];

/// How strongly the planted layers shape the flood-probability field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceProfile {
    /// Logit weight on river proximity (z-scored exp(−distance/λ)).
    pub river_weight: f64,
    /// Logit weight on drainage density (z-scored).
    pub drainage_weight: f64,
    /// Standard deviation of the smooth nuisance term in the logit.
    pub noise_sigma: f64,
    /// Sampling sharpness: flood points are drawn ∝ p^sharpness, non-flood
    /// ∝ (1−p)^sharpness. Higher values separate the classes more cleanly.
    pub sharpness: f64,
}

impl Default for RelevanceProfile {
    fn default() -> Self {
        RelevanceProfile {
            river_weight: 2.5,
            drainage_weight: 1.5,
            noise_sigma: 0.75,
            sharpness: 3.0,
        }
    }
}

/// Generates a synthetic stack and a balanced inventory (n_flood recorded
/// flood points, n_flood generated non-flood points, all distinct cells).
///
/// Points are confined to an interior margin of min(width, height)/4 cells
/// so centered patches up to half the grid extent stay in bounds. The grid
/// has no nodata cells.
pub fn synth_generate(
    seed: u64,
    width: usize,
    height: usize,
    n_flood: usize,
    profile: &RelevanceProfile,
) -> Result<(FeatureStack, Vec<InventoryPoint>)> {
    if width < 16 || height < 16 {
        return Err(Error::Value(format!(
            "synthetic grid must be at least 16×16, got {width}×{height}"
        )));
    }
    if n_flood == 0 {
        return Err(Error::Value("n_flood must be positive".into()));
    }
    for (name, v) in [
        ("river_weight", profile.river_weight),
        ("drainage_weight", profile.drainage_weight),
        ("noise_sigma", profile.noise_sigma),
        ("sharpness", profile.sharpness),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Value(format!(
                "relevance profile {name} must be finite and non-negative, got {v}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width, height);
    let cells = w * h;
    let short = w.min(h);

    // Stage 1: terrain. Two octaves of lattice noise plus a gentle tilt.
    let coarse = smooth_field(&mut rng, w, h, (short / 3).max(2));
    let fine = smooth_field(&mut rng, w, h, (short / 6).max(2));
    let tilt_x: f64 = rng.random_range(-1.0..1.0);
    let tilt_y: f64 = rng.random_range(-1.0..1.0);
    let mut elevation_z = vec![0.0f64; cells];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            elevation_z[i] = 2.0 * coarse[i]
                + fine[i]
                + tilt_x * (c as f64 / w as f64 - 0.5)
                + tilt_y * (r as f64 / h as f64 - 0.5);
        }
    }
    zscore(&mut elevation_z);

    // Stage 2: river network carved by steepest descent from high ground.
    let river = carve_rivers(&mut rng, &elevation_z, w, h);
    let dist_cells = chebyshev_distance(&river, w, h);

    // Stage 3: the planted layers and the probability field.
    let lambda = (short as f64) / 8.0;
    let mut riverness: Vec<f64> = dist_cells.iter().map(|&d| (-(d as f64) / lambda).exp()).collect();
    let density_radius = (short / 16).max(2);
    let mut drainage = box_density(&river, w, h, density_radius);
    let drainage_raw = drainage.clone();
    zscore(&mut riverness);
    zscore(&mut drainage);

    let mut logit_noise = smooth_field(&mut rng, w, h, (short / 5).max(2));
    zscore(&mut logit_noise);
    let mut prob = vec![0.0f64; cells];
    for i in 0..cells {
        let logit = profile.river_weight * riverness[i]
            + profile.drainage_weight * drainage[i]
            + profile.noise_sigma * logit_noise[i];
        prob[i] = 1.0 / (1.0 + (-logit).exp());
    }

    // Stage 4: the sixteen factor layers.
    let cell_size = DEFAULT_CELL_SIZE;
    let elevation: Vec<f64> = elevation_z.iter().map(|&z| 2500.0 + 600.0 * z).collect();
    let (gx, gy) = gradient(&elevation, w, h, cell_size);
    let slope: Vec<f64> = gx
        .iter()
        .zip(gy.iter())
        .map(|(&x, &y)| (x * x + y * y).sqrt().atan().to_degrees())
        .collect();
    let aspect: Vec<f64> = gx
        .iter()
        .zip(gy.iter())
        .map(|(&x, &y)| {
            let a = y.atan2(x).to_degrees();
            if a < 0.0 {
                a + 360.0
            } else {
                a
            }
        })
        .collect();
    let curvature = laplacian(&elevation, w, h);
    let elev_mean = box_filter(&elevation, w, h, 3);
    let tpi: Vec<f64> = elevation.iter().zip(elev_mean.iter()).map(|(&e, &m)| e - m).collect();
    let elev_sq: Vec<f64> = elevation.iter().map(|&e| e * e).collect();
    let mean_sq = box_filter(&elev_sq, w, h, 2);
    let mean2 = box_filter(&elevation, w, h, 2);
    let ruggedness: Vec<f64> = mean_sq
        .iter()
        .zip(mean2.iter())
        .map(|(&sq, &m)| (sq - m * m).max(0.0).sqrt())
        .collect();

    // The one pure-noise layer: independent of everything, white per cell.
    let convergence: Vec<f64> = (0..cells).map(|_| rng.random_range(-100.0..100.0)).collect();

    let lambda2 = (short as f64) / 6.0;
    let mut fa_noise = smooth_field(&mut rng, w, h, (short / 5).max(2));
    zscore(&mut fa_noise);
    let flow_acc: Vec<f64> = dist_cells
        .iter()
        .zip(fa_noise.iter())
        .map(|(&d, &n)| 1000.0 * (-(d as f64) / lambda2).exp() + 50.0 * n)
        .collect();
    let mut flow_z = flow_acc.clone();
    zscore(&mut flow_z);
    let mut slope_z = slope.clone();
    zscore(&mut slope_z);

    let mut spi_noise = smooth_field(&mut rng, w, h, (short / 5).max(2));
    zscore(&mut spi_noise);
    let spi: Vec<f64> = (0..cells)
        .map(|i| 5.0 + 2.0 * (0.6 * flow_z[i] + 0.3 * slope_z[i] + 0.4 * spi_noise[i]))
        .collect();
    let mut twi_noise = smooth_field(&mut rng, w, h, (short / 5).max(2));
    zscore(&mut twi_noise);
    let twi: Vec<f64> = (0..cells)
        .map(|i| 8.0 + 2.0 * (0.6 * flow_z[i] - 0.4 * slope_z[i] + 0.3 * twi_noise[i]))
        .collect();

    let drainage_layer: Vec<f64> = drainage_raw.iter().map(|&d| 5.0 * d).collect();

    let mut rain_noise = smooth_field(&mut rng, w, h, (short / 4).max(2));
    zscore(&mut rain_noise);
    let rainfall: Vec<f64> = (0..cells)
        .map(|i| 363.0 + 60.0 * (0.6 * elevation_z[i] + 0.8 * rain_noise[i]))
        .collect();

    let mut ndvi_noise = smooth_field(&mut rng, w, h, (short / 5).max(2));
    zscore(&mut ndvi_noise);
    let ndvi: Vec<f64> = (0..cells)
        .map(|i| (0.25 + 0.12 * riverness[i] + 0.08 * ndvi_noise[i]).clamp(-0.1, 0.9))
        .collect();

    let mut land_field = smooth_field(&mut rng, w, h, (short / 4).max(2));
    zscore(&mut land_field);
    for i in 0..cells {
        land_field[i] = 0.5 * elevation_z[i] + 0.5 * land_field[i];
    }
    let landcover = quantize_classes(&land_field, 7);

    let mut roads = smooth_field(&mut rng, w, h, (short / 3).max(2));
    zscore(&mut roads);
    let distance_to_roads: Vec<f64> = roads.iter().map(|&z| 600.0 * z.abs()).collect();

    let distance_to_river: Vec<f64> =
        dist_cells.iter().map(|&d| d as f64 * cell_size).collect();

    let layers: [&[f64]; 16] = [
        &elevation,
        &slope,
        &aspect,
        &curvature,
        &distance_to_river,
        &tpi,
        &ruggedness,
        &convergence,
        &flow_acc,
        &spi,
        &twi,
        &drainage_layer,
        &rainfall,
        &ndvi,
        &landcover,
        &distance_to_roads,
    ];
    let mut data = Vec::with_capacity(16 * cells);
    for layer in layers {
        data.extend(layer.iter().map(|&v| v as f32));
    }
    let stack = FeatureStack::new(
        w,
        h,
        cell_size,
        DEFAULT_NODATA,
        SYNTH_FACTORS.iter().map(|s| s.to_string()).collect(),
        data,
        vec![false; cells],
    )?;

    // Stage 5: inventory. Candidates live inside the margin; flood cells are
    // drawn ∝ p^sharpness, non-flood ∝ (1−p)^sharpness from the rest.
    let margin = short / 4;
    let mut candidates = Vec::new();
    for r in margin..h - margin {
        for c in margin..w - margin {
            candidates.push(r * w + c);
        }
    }
    if candidates.len() < 2 * n_flood {
        return Err(Error::Capacity(format!(
            "grid interior holds {} candidate cells, need {} for a balanced inventory",
            candidates.len(),
            2 * n_flood
        )));
    }

    let flood_cells = weighted_sample(
        &mut rng,
        &candidates,
        |i| prob[i].powf(profile.sharpness),
        n_flood,
    );
    let taken: std::collections::HashSet<usize> = flood_cells.iter().copied().collect();
    let remaining: Vec<usize> =
        candidates.iter().copied().filter(|i| !taken.contains(i)).collect();
    let nonflood_cells = weighted_sample(
        &mut rng,
        &remaining,
        |i| (1.0 - prob[i]).powf(profile.sharpness),
        n_flood,
    );

    let mut inventory = Vec::with_capacity(2 * n_flood);
    for &cell in &flood_cells {
        inventory.push(InventoryPoint {
            row: cell / w,
            col: cell % w,
            label: 1,
            source: PointSource::Recorded,
        });
    }
    for &cell in &nonflood_cells {
        inventory.push(InventoryPoint {
            row: cell / w,
            col: cell % w,
            label: 0,
            source: PointSource::Generated,
        });
    }
    Ok((stack, inventory))
}

/// Lattice value-noise: uniform(−1, 1) knots at `spacing` cells, bilinearly
/// interpolated. Smooth, cheap, and fully determined by the rng state.
fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize, spacing: usize) -> Vec<f64> {
    let gw = w / spacing + 2;
    let gh = h / spacing + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f64; w * h];
    for r in 0..h {
        let y = r as f64 / spacing as f64;
        let y0 = y.floor() as usize;
        let ty = y - y0 as f64;
        for c in 0..w {
            let x = c as f64 / spacing as f64;
            let x0 = x.floor() as usize;
            let tx = x - x0 as f64;
            let v00 = lattice[y0 * gw + x0];
            let v01 = lattice[y0 * gw + x0 + 1];
            let v10 = lattice[(y0 + 1) * gw + x0];
            let v11 = lattice[(y0 + 1) * gw + x0 + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[r * w + c] = top + (bot - top) * ty;
        }
    }
    out
}

/// In-place z-scoring with population statistics; a constant field becomes
/// all zeros.
fn zscore(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Marks river cells by steepest-descent walks from high ground. Paths stop
/// at the border, at a pit, or when they merge with an existing river.
fn carve_rivers(rng: &mut ChaCha8Rng, elevation: &[f64], w: usize, h: usize) -> Vec<bool> {
    let mut river = vec![false; w * h];
    let mut river_cells = 0usize;
    let quota = w.max(h);
    let max_attempts = 8 * (w.max(h) / 16).max(3);
    for _ in 0..max_attempts {
        if river_cells >= quota {
            break;
        }
        // A random cell biased toward high ground: take the highest of a
        // handful of uniform draws.
        let mut start = rng.random_range(0..w * h);
        for _ in 0..4 {
            let other = rng.random_range(0..w * h);
            if elevation[other] > elevation[start] {
                start = other;
            }
        }
        let mut r = start / w;
        let mut c = start % w;
        for _ in 0..w + h {
            if !river[r * w + c] {
                river[r * w + c] = true;
                river_cells += 1;
            } else if river_cells > 1 {
                break; // merged into an existing channel
            }
            // Steepest descent over the 8-neighborhood.
            let mut best = (r, c);
            let mut best_e = elevation[r * w + c];
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let e = elevation[nr as usize * w + nc as usize];
                    if e < best_e {
                        best_e = e;
                        best = (nr as usize, nc as usize);
                    }
                }
            }
            if best == (r, c) {
                break; // pit
            }
            r = best.0;
            c = best.1;
        }
    }
    river
}

/// Chebyshev distance (in cells) to the nearest marked cell, via 8-connected
/// multi-source BFS. Panics never: the caller guarantees at least one mark.
fn chebyshev_distance(marked: &[bool], w: usize, h: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; w * h];
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        if marked[i] {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if dist[j] == u32::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    dist
}

/// Fraction of marked cells inside a (2r+1)² window clamped to the grid,
/// computed with an integral image.
fn box_density(marked: &[bool], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let as_f: Vec<f64> = marked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    box_filter(&as_f, w, h, radius)
}

/// Mean of a (2r+1)² window clamped to the grid, via an integral image.
fn box_filter(values: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    // integral[(r+1)·(w+1) + (c+1)] = sum of values[0..=r][0..=c]
    let mut integral = vec![0.0f64; (w + 1) * (h + 1)];
    for r in 0..h {
        let mut row_sum = 0.0;
        for c in 0..w {
            row_sum += values[r * w + c];
            integral[(r + 1) * (w + 1) + (c + 1)] = integral[r * (w + 1) + (c + 1)] + row_sum;
        }
    }
    let mut out = vec![0.0f64; w * h];
    let rad = radius as i64;
    for r in 0..h {
        for c in 0..w {
            let r0 = (r as i64 - rad).max(0) as usize;
            let c0 = (c as i64 - rad).max(0) as usize;
            let r1 = (r as i64 + rad).min(h as i64 - 1) as usize + 1;
            let c1 = (c as i64 + rad).min(w as i64 - 1) as usize + 1;
            let sum = integral[r1 * (w + 1) + c1] - integral[r0 * (w + 1) + c1]
                - integral[r1 * (w + 1) + c0]
                + integral[r0 * (w + 1) + c0];
            out[r * w + c] = sum / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    out
}

/// Central-difference gradient with border replication, scaled by cell size.
fn gradient(values: &[f64], w: usize, h: usize, cell_size: f64) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    let at = |r: usize, c: usize| values[r * w + c];
    for r in 0..h {
        for c in 0..w {
            let cl = c.saturating_sub(1);
            let cr = (c + 1).min(w - 1);
            let ru = r.saturating_sub(1);
            let rd = (r + 1).min(h - 1);
            gx[r * w + c] = (at(r, cr) - at(r, cl)) / ((cr - cl).max(1) as f64 * cell_size);
            gy[r * w + c] = (at(rd, c) - at(ru, c)) / ((rd - ru).max(1) as f64 * cell_size);
        }
    }
    (gx, gy)
}

/// 4-neighbor Laplacian with border replication.
fn laplacian(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; w * h];
    let at = |r: usize, c: usize| values[r * w + c];
    for r in 0..h {
        for c in 0..w {
            let cl = c.saturating_sub(1);
            let cr = (c + 1).min(w - 1);
            let ru = r.saturating_sub(1);
            let rd = (r + 1).min(h - 1);
            out[r * w + c] = at(r, cl) + at(r, cr) + at(ru, c) + at(rd, c) - 4.0 * at(r, c);
        }
    }
    out
}

/// Rank-quantizes a field into `k` classes 0..k, balanced by quantile.
fn quantize_classes(values: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0f64; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = ((rank * k) / values.len()).min(k - 1) as f64;
    }
    out
}

/// Weighted sampling of `n` distinct cells without replacement
/// (Efraimidis–Spirakis keys: u^(1/weight), take the n largest). Candidates
/// with zero weight are effectively never chosen unless the sample requires
/// them.
fn weighted_sample<F: Fn(usize) -> f64>(
    rng: &mut ChaCha8Rng,
    candidates: &[usize],
    weight: F,
    n: usize,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let u: f64 = rng.random_range(0.0..1.0);
            let w = weight(i).max(1e-300);
            (u.powf(1.0 / w), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.truncate(n);
    keyed.into_iter().map(|(_, i)| i).collect()
}
