//! Edge-aware refinement of score planes with a fast bilateral solver.
//!
//! Pixels are hard-splatted onto a sparse 5-D grid over `(x, y, Y, U, V)`.
//! The grid blur is the sum of `[1, 2, 1]` kernels along each of the five
//! axes, and a diagonal normalizer `n` is fitted by fixed-point iteration so
//! that the induced pixel affinity
//!
//! ```text
//! W = Sᵀ · M⁻¹ · N · B · N · M⁻¹ · S        (M = diag(vertex counts))
//! ```
//!
//! is approximately bistochastic. Refinement minimizes
//!
//! ```text
//! (λ/2) Σᵢⱼ Wᵢⱼ (xᵢ − xⱼ)² + Σᵢ cᵢ (xᵢ − tᵢ)²
//! ```
//!
//! over outputs `x = Sᵀ y` that are constant per grid vertex. In vertex space
//! the normal equations are
//!
//! ```text
//! (λ (diag(n ⊙ Bn) − N B N) + diag(S c)) y = S (c ⊙ t)
//! ```
//!
//! which is solved with Jacobi-preconditioned conjugate gradients.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{check_finite, ImageRgb, Plane};
use crate::transfer::ScoreField;

const DIMS: usize = 5;
const NONE: u32 = u32::MAX;
/// Center weight of the summed `[1, 2, 1]` blur.
const BLUR_CENTER: f64 = 2.0 * DIMS as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub sigma_spatial: f64,
    pub sigma_luma: f64,
    pub sigma_chroma: f64,
    pub lambda: f64,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub bistoch_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            sigma_spatial: 8.0,
            sigma_luma: 8.0,
            sigma_chroma: 8.0,
            lambda: 128.0,
            cg_max_iters: 25,
            cg_tol: 1e-5,
            bistoch_iters: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.sigma_spatial, self.sigma_luma, self.sigma_chroma];
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!(
                "solver sigmas must be positive, got {sigmas:?}"
            )));
        }
        if self.cg_tol.is_nan() || self.cg_tol <= 0.0 {
            return Err(Error::Validation(format!(
                "cg_tol must be positive, got {}",
                self.cg_tol
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Validation(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// BT.601 full-range YUV with chroma offset 128.
pub fn rgb_to_yuv([r, g, b]: [u8; 3]) -> [f64; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418688 * g - 0.081312 * b + 128.0,
    ]
}

#[derive(Clone, Debug)]
pub struct BilateralGrid {
    pub height: usize,
    pub width: usize,
    vertex_of: Vec<u32>,
    coords: Vec<[i64; DIMS]>,
    counts: Vec<f64>,
    /// `2 * DIMS` neighbor slots per vertex (`-1`, `+1` per axis).
    neighbors: Vec<[u32; 2 * DIMS]>,
    normalizer: Vec<f64>,
}

/// Splats the guide onto the grid. Vertices are numbered in pixel scan order
/// of first occurrence.
pub fn build_grid(guide: &ImageRgb, config: &SolverConfig) -> Result<BilateralGrid> {
    config.validate()?;
    let mut index: HashMap<[i64; DIMS], u32> = HashMap::new();
    let mut coords = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut vertex_of = Vec::with_capacity(guide.height * guide.width);
    for y in 0..guide.height {
        for x in 0..guide.width {
            let [l, u, v] = rgb_to_yuv(guide.pixel(y, x));
            let key = [
                (x as f64 / config.sigma_spatial).floor() as i64,
                (y as f64 / config.sigma_spatial).floor() as i64,
                (l / config.sigma_luma).floor() as i64,
                (u / config.sigma_chroma).floor() as i64,
                (v / config.sigma_chroma).floor() as i64,
            ];
            let id = *index.entry(key).or_insert_with(|| {
                coords.push(key);
                counts.push(0.0);
                (coords.len() - 1) as u32
            });
            counts[id as usize] += 1.0;
            vertex_of.push(id);
        }
    }

    let neighbors = coords
        .iter()
        .map(|c| {
            let mut slots = [NONE; 2 * DIMS];
            for d in 0..DIMS {
                for (s, delta) in [-1i64, 1].into_iter().enumerate() {
                    let mut k = *c;
                    k[d] += delta;
                    if let Some(&id) = index.get(&k) {
                        slots[2 * d + s] = id;
                    }
                }
            }
            slots
        })
        .collect();

    let mut grid = BilateralGrid {
        height: guide.height,
        width: guide.width,
        vertex_of,
        coords,
        counts,
        neighbors,
        normalizer: Vec::new(),
    };
    grid.normalizer = grid.bistochastize(config.bistoch_iters);
    Ok(grid)
}

impl BilateralGrid {
    pub fn num_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn vertex_of(&self) -> &[u32] {
        &self.vertex_of
    }

    pub fn coords(&self) -> &[[i64; DIMS]] {
        &self.coords
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn normalizer(&self) -> &[f64] {
        &self.normalizer
    }

    pub fn splat(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_vertices()];
        for (&v, &x) in self.vertex_of.iter().zip(values) {
            out[v as usize] += x;
        }
        out
    }

    pub fn slice(&self, grid_values: &[f64]) -> Vec<f64> {
        self.vertex_of
            .iter()
            .map(|&v| grid_values[v as usize])
            .collect()
    }

    pub fn blur(&self, x: &[f64]) -> Vec<f64> {
        self.neighbors
            .par_iter()
            .enumerate()
            .map(|(v, slots)| {
                let mut acc = BLUR_CENTER * x[v];
                for &u in slots {
                    if u != NONE {
                        acc += x[u as usize];
                    }
                }
                acc
            })
            .collect()
    }

    fn bistochastize(&self, iters: usize) -> Vec<f64> {
        let mut n = vec![1.0; self.num_vertices()];
        for _ in 0..iters {
            let bn = self.blur(&n);
            n = n
                .iter()
                .zip(&bn)
                .zip(&self.counts)
                .map(|((&ni, &b), &m)| (ni * m / b).sqrt())
                .collect();
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Vertex-space system `A y = b` with its Jacobi diagonal.
struct System<'a> {
    grid: &'a BilateralGrid,
    lambda: f64,
    degree: Vec<f64>,
    data: Vec<f64>,
    diag: Vec<f64>,
}

impl<'a> System<'a> {
    fn new(grid: &'a BilateralGrid, lambda: f64, data: Vec<f64>) -> Self {
        let n = &grid.normalizer;
        let bn = grid.blur(n);
        let degree: Vec<f64> = n.iter().zip(&bn).map(|(a, b)| a * b).collect();
        let diag = (0..grid.num_vertices())
            .map(|v| {
                let d = lambda * (degree[v] - n[v] * n[v] * BLUR_CENTER) + data[v];
                if d > 0.0 {
                    d
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            grid,
            lambda,
            degree,
            data,
            diag,
        }
    }

    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let n = &self.grid.normalizer;
        let ny: Vec<f64> = n.iter().zip(y).map(|(a, b)| a * b).collect();
        let bny = self.grid.blur(&ny);
        (0..y.len())
            .into_par_iter()
            .map(|v| self.lambda * (self.degree[v] * y[v] - n[v] * bny[v]) + self.data[v] * y[v])
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conjugate_gradient(
    system: &System<'_>,
    rhs: &[f64],
    mut y: Vec<f64>,
    max_iters: usize,
    tol: f64,
) -> (Vec<f64>, SolveReport) {
    let rhs_norm = dot(rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        let zeros = vec![0.0; rhs.len()];
        return (
            zeros,
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        );
    }
    let ay = system.apply(&y);
    let mut r: Vec<f64> = rhs.iter().zip(&ay).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&system.diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut residual = dot(&r, &r).sqrt() / rhs_norm;
    let mut iterations = 0;
    while residual >= tol && iterations < max_iters {
        let ap = system.apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..y.len() {
            y[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for ((zi, ri), di) in z.iter_mut().zip(&r).zip(&system.diag) {
            *zi = ri / di;
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        residual = dot(&r, &r).sqrt() / rhs_norm;
        iterations += 1;
    }
    (
        y,
        SolveReport {
            iterations,
            relative_residual: residual,
            converged: residual < tol,
        },
    )
}

/// Solves the refinement objective for one plane and slices the result back
/// to pixels, clamped to `[0, 1]`. With `lambda == 0` the objective reduces
/// to the data term and the target is returned unchanged.
pub fn solve(
    grid: &BilateralGrid,
    target: &Plane,
    confidence: &Plane,
    config: &SolverConfig,
) -> Result<(Plane, SolveReport)> {
    config.validate()?;
    for (name, p) in [("target", target), ("confidence", confidence)] {
        if (p.height, p.width) != (grid.height, grid.width) {
            return Err(Error::Shape(format!(
                "{name} is {}x{} but the guide is {}x{}",
                p.height, p.width, grid.height, grid.width
            )));
        }
        check_finite(&p.data).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{name}: {m}")),
            other => other,
        })?;
    }
    if let Some(i) = confidence.data.iter().position(|&c| c < 0.0) {
        return Err(Error::Validation(format!(
            "confidence is negative at flat index {i}"
        )));
    }

    if config.lambda == 0.0 {
        let data = target.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let report = SolveReport {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
        return Ok((Plane::new(target.height, target.width, data)?, report));
    }

    let conf: Vec<f64> = confidence.data.iter().map(|&c| c as f64).collect();
    let weighted: Vec<f64> = target
        .data
        .iter()
        .zip(&conf)
        .map(|(&t, &c)| t as f64 * c)
        .collect();
    let data_weight = grid.splat(&conf);
    let rhs = grid.splat(&weighted);

    // Start from the per-vertex weighted mean of the target, accumulated as
    // offsets from the vertex's first pixel so constant targets are exact.
    let mut anchor = vec![f64::NAN; grid.num_vertices()];
    let mut offset = vec![0.0; grid.num_vertices()];
    for ((&v, &t), &c) in grid.vertex_of.iter().zip(&target.data).zip(&conf) {
        let v = v as usize;
        if anchor[v].is_nan() {
            anchor[v] = t as f64;
        }
        offset[v] += c * (t as f64 - anchor[v]);
    }
    let init = (0..grid.num_vertices())
        .map(|v| {
            if data_weight[v] > 0.0 {
                anchor[v] + offset[v] / data_weight[v]
            } else {
                0.0
            }
        })
        .collect();

    let system = System::new(grid, config.lambda, data_weight);
    let (y, report) = conjugate_gradient(&system, &rhs, init, config.cg_max_iters, config.cg_tol);
    let data = grid
        .slice(&y)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Ok((Plane::new(target.height, target.width, data)?, report))
}

/// Refines every part plane with unit confidence, sharing one grid.
pub fn refine_scores(
    scores: &ScoreField,
    guide: &ImageRgb,
    config: &SolverConfig,
) -> Result<(ScoreField, Vec<SolveReport>)> {
    if (scores.height, scores.width) != (guide.height, guide.width) {
        return Err(Error::Shape(format!(
            "scores are {}x{} but the guide is {}x{}",
            scores.height, scores.width, guide.height, guide.width
        )));
    }
    let grid = build_grid(guide, config)?;
    let ones = Plane::filled(scores.height, scores.width, 1.0);
    let solved: Vec<(Plane, SolveReport)> = (0..scores.num_parts())
        .into_par_iter()
        .map(|c| {
            let target = Plane {
                height: scores.height,
                width: scores.width,
                data: scores.plane(c).to_vec(),
            };
            solve(&grid, &target, &ones, config)
        })
        .collect::<Result<_>>()?;
    let mut planes = Vec::with_capacity(scores.planes().len());
    let mut reports = Vec::with_capacity(solved.len());
    for (plane, report) in solved {
        planes.extend_from_slice(&plane.data);
        reports.push(report);
    }
    let refined = ScoreField::new(scores.height, scores.width, scores.names.clone(), planes)?;
    Ok((refined, reports))
}
