//! Synthetic multi-contrast brains with planted cortical and white-matter
//! lesions.
//!
//! The brain is a perturbed ellipsoid. Every brain voxel gets a depth: its
//! 26-connected distance from the background, so depth 1 is the pial
//! surface. Depths `1..=T` (the cortex thickness) are gray matter, deeper
//! voxels white matter. Lesion types are then depth constraints:
//!
//! * I: depth ≥ 2, containing both gray and white matter,
//! * II: depth in `2..=T`, never touching the background,
//! * III and IV: depth in `1..=T` with at least one depth-1 voxel; IV is
//!   drawn from the larger half of the size range,
//! * WML: depth > T, juxtacortical ones seeded within 2 voxels of the cortex.
//!
//! Lesions are grown from a seed by ellipsoidal region growing inside their
//! allowed depths and never touch each other, even diagonally.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{LesionType, TypeAnnotation};
use crate::rng::{derive_seed, stream_rng};
use crate::volume::{coords, tissue_code, write_volume, ClassCounts, Volume, VolumeKind, CONTRASTS};

const GEOMETRY_STREAM: u64 = 1;
const LESION_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const ARTIFACT_STREAM: u64 = 4;
const COHORT_STREAM: u64 = 0xC0;

/// Seed attempts per lesion before giving up.
const MAX_ATTEMPTS: usize = 400;

/// Relative frequencies of types I–IV used by [`type_mix_counts`].
pub const TYPE_MIX_PERCENT: [usize; 4] = [38, 7, 44, 11];

/// Per-contrast means of white and gray matter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueMeans {
    pub wm: f64,
    pub gm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactFlags {
    /// Zero an axis-aligned cap of 5–15 % of the brain in the GRE contrast.
    pub gre_missing_chunk: bool,
    /// Multiplicative sinusoidal banding along one axis of the EPI contrast.
    pub epi_banding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub side_voxels: usize,
    pub spacing_mm: f64,
    pub cortex_thickness_voxels: usize,
    /// Cortical lesions of types I, II, III, IV per subject.
    pub lesion_counts: [usize; 4],
    /// Inclusive lesion size range in voxels; sizes are log-uniform.
    pub lesion_size_range: [usize; 2],
    pub wml_count: usize,
    /// Fraction of white-matter lesions seeded next to the cortex.
    pub juxtacortical_fraction: f64,
    /// Gaussian noise standard deviation per contrast, inside the brain.
    pub noise_sigma: [f64; 3],
    pub artifacts: ArtifactFlags,
    /// Per contrast, in channel order.
    pub tissue_means: [TissueMeans; 3],
    /// Intensity shift of a fully visible lesion per contrast.
    pub lesion_shift: [f64; 3],
    /// Per contrast, visibility multiplier of types I, II, III, IV and WML.
    pub visibility: [[f64; 5]; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            side_voxels: 96,
            spacing_mm: 0.5,
            cortex_thickness_voxels: 5,
            lesion_counts: type_mix_counts(10),
            lesion_size_range: [6, 200],
            wml_count: 4,
            juxtacortical_fraction: 0.5,
            noise_sigma: [0.05; 3],
            artifacts: ArtifactFlags::default(),
            tissue_means: [
                TissueMeans { wm: 1.0, gm: 0.65 },
                TissueMeans { wm: 0.55, gm: 0.8 },
                TissueMeans { wm: 0.6, gm: 0.85 },
            ],
            lesion_shift: [-0.4, 0.35, 0.35],
            visibility: [
                [1.0, 0.6, 0.4, 0.4, 1.0],
                [0.8, 1.0, 1.0, 1.0, 1.0],
                [0.8, 1.0, 1.0, 1.0, 1.0],
            ],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.cortex_thickness_voxels < 3 {
            return bad("cortex_thickness_voxels must be ≥ 3".into());
        }
        if self.side_voxels < 4 * self.cortex_thickness_voxels + 16 {
            return bad(format!(
                "side_voxels {} too small for cortex thickness {}",
                self.side_voxels, self.cortex_thickness_voxels
            ));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return bad("spacing_mm must be positive".into());
        }
        let [lo, hi] = self.lesion_size_range;
        if lo < 6 || hi < lo {
            return bad(format!("lesion_size_range {lo}..{hi} must start at ≥ 6 voxels"));
        }
        if !(0.0..=1.0).contains(&self.juxtacortical_fraction) {
            return bad("juxtacortical_fraction must lie in [0, 1]".into());
        }
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Largest-remainder split of `total` lesions over types I–IV following
/// [`TYPE_MIX_PERCENT`].
pub fn type_mix_counts(total: usize) -> [usize; 4] {
    let exact = TYPE_MIX_PERCENT.map(|p| (p * total) as f64 / 100.0);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order: Vec<usize> = (0..4).collect();
    // Stable sort keeps type order for equal remainders.
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// What a planted lesion is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlantedKind {
    I,
    II,
    III,
    IV,
    #[serde(rename = "WML")]
    Wml,
}

impl PlantedKind {
    pub fn lesion_type(self) -> Option<LesionType> {
        match self {
            PlantedKind::I => Some(LesionType::I),
            PlantedKind::II => Some(LesionType::II),
            PlantedKind::III => Some(LesionType::III),
            PlantedKind::IV => Some(LesionType::IV),
            PlantedKind::Wml => None,
        }
    }

    fn visibility_slot(self) -> usize {
        match self {
            PlantedKind::I => 0,
            PlantedKind::II => 1,
            PlantedKind::III => 2,
            PlantedKind::IV => 3,
            PlantedKind::Wml => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub kind: PlantedKind,
    /// Cortical-lesion label code; 0 for white-matter lesions.
    pub class: u8,
    pub juxtacortical: bool,
    pub size_voxels: usize,
    pub volume_ul: f64,
    /// Mean voxel coordinate `[x, y, z]`.
    pub centroid: [f64; 3],
    /// Smallest linear index of the lesion's voxels.
    pub representative_voxel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    /// mp2rage, t2s_epi, t2s_gre.
    pub contrasts: [Volume; 3],
    pub cl_labels: Volume,
    pub tissue_labels: Volume,
    pub wml_labels: Volume,
    pub lesions: Vec<LesionRecord>,
}

impl PhantomSubject {
    /// Ground-truth types of the cortical lesions, for evaluation.
    pub fn type_annotations(&self) -> Vec<TypeAnnotation> {
        type_annotations(&self.lesions)
    }
}

pub fn type_annotations(lesions: &[LesionRecord]) -> Vec<TypeAnnotation> {
    lesions
        .iter()
        .filter_map(|l| {
            l.kind.lesion_type().map(|t| TypeAnnotation {
                voxel: l.representative_voxel,
                lesion_type: t,
            })
        })
        .collect()
}

struct Grid {
    dims: [usize; 3],
}

impl Grid {
    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    /// In-bounds 26-neighbours of `i`.
    fn neighbours(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let [nx, ny, nz] = self.dims;
        let [x, y, z] = coords(self.dims, i);
        for dz in -1i64..=1 {
            let qz = z as i64 + dz;
            if qz < 0 || qz >= nz as i64 {
                continue;
            }
            for dy in -1i64..=1 {
                let qy = y as i64 + dy;
                if qy < 0 || qy >= ny as i64 {
                    continue;
                }
                for dx in -1i64..=1 {
                    let qx = x as i64 + dx;
                    if (dx, dy, dz) == (0, 0, 0) || qx < 0 || qx >= nx as i64 {
                        continue;
                    }
                    out.push(qx as usize + nx * (qy as usize + ny * qz as usize));
                }
            }
        }
    }
}

/// Brain mask of a perturbed ellipsoid: low-order angular modulation of the
/// radius keeps the surface smooth.
fn brain_mask<R: Rng>(side: usize, rng: &mut R) -> Vec<bool> {
    let c = (side as f64 - 1.0) / 2.0;
    let radii = [0.42, 0.38, 0.36].map(|f| f * side as f64 * rng.random_range(0.97..1.0));
    let amp = [0.05, 0.04, 0.03];
    let freq = [2.0, 3.0, 4.0];
    let phase: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let mut mask = vec![false; side * side * side];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let u = [
                    (x as f64 - c) / radii[0],
                    (y as f64 - c) / radii[1],
                    (z as f64 - c) / radii[2],
                ];
                let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                let theta = u[1].atan2(u[0]);
                let phi = (u[2] / r.max(1e-9)).clamp(-1.0, 1.0).acos();
                let mut bound = 1.0;
                for k in 0..3 {
                    bound += amp[k] * (freq[k] * theta + phase[2 * k]).sin() * (freq[k] * phi + phase[2 * k + 1]).cos();
                }
                mask[x + side * (y + side * z)] = r <= bound;
            }
        }
    }
    mask
}

/// 26-connected distance from the background; 0 outside the brain.
fn depth_map(grid: &Grid, mask: &[bool]) -> Vec<u16> {
    let mut depth = vec![0u16; mask.len()];
    let mut queue = VecDeque::new();
    let mut nb = Vec::with_capacity(26);
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        grid.neighbours(i, &mut nb);
        let on_edge = nb.len() < 26 || nb.iter().any(|&j| !mask[j]);
        if on_edge {
            depth[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        grid.neighbours(i, &mut nb);
        for &j in &nb {
            if mask[j] && depth[j] == 0 {
                depth[j] = depth[i] + 1;
                queue.push_back(j);
            }
        }
    }
    depth
}

struct Placer<'a> {
    grid: &'a Grid,
    depth: &'a [u16],
    /// Voxels of, or 26-adjacent to, an already planted lesion.
    blocked: Vec<bool>,
    visited: Vec<bool>,
}

impl Placer<'_> {
    /// Grows up to `target` voxels from `seed`, nearest first under an
    /// axis-scaled metric, through voxels whose depth satisfies `allowed`.
    fn grow(&mut self, seed: usize, target: usize, scales: [f64; 3], allowed: impl Fn(u16) -> bool) -> Vec<usize> {
        let s = coords(self.grid.dims, seed).map(|v| v as f64);
        let key = |i: usize| -> u64 {
            let p = coords(self.grid.dims, i);
            let d: f64 = (0..3).map(|a| ((p[a] as f64 - s[a]) / scales[a]).powi(2)).sum();
            (d * 1e6) as u64
        };
        let mut heap = BinaryHeap::new();
        let mut touched = vec![seed];
        self.visited[seed] = true;
        heap.push(Reverse((0u64, seed)));
        let mut region = Vec::with_capacity(target);
        let mut nb = Vec::with_capacity(26);
        while let Some(Reverse((_, i))) = heap.pop() {
            region.push(i);
            if region.len() == target {
                break;
            }
            self.grid.neighbours(i, &mut nb);
            for &j in &nb {
                if !self.visited[j] && !self.blocked[j] && allowed(self.depth[j]) {
                    self.visited[j] = true;
                    touched.push(j);
                    heap.push(Reverse((key(j), j)));
                }
            }
        }
        for t in touched {
            self.visited[t] = false;
        }
        region.sort_unstable();
        region
    }

    fn block(&mut self, region: &[usize]) {
        let mut nb = Vec::with_capacity(26);
        for &i in region {
            self.blocked[i] = true;
            self.grid.neighbours(i, &mut nb);
            for &j in &nb {
                self.blocked[j] = true;
            }
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> usize {
    if lo >= hi {
        return lo;
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64 + 0.999).ln());
    (rng.random_range(a..b).exp().floor() as usize).clamp(lo, hi)
}

struct LesionPlan {
    kind: PlantedKind,
    juxtacortical: bool,
}

/// One subject; a pure function of `(spec, seed)`.
pub fn generate_subject(spec: &PhantomSpec, id: &str, seed: u64) -> Result<PhantomSubject> {
    spec.validate()?;
    let side = spec.side_voxels;
    let dims = [side; 3];
    let grid = Grid { dims };
    let n = grid.len();
    let t = spec.cortex_thickness_voxels as u16;

    let mut geo_rng = stream_rng(seed, &[GEOMETRY_STREAM]);
    let mask = brain_mask(side, &mut geo_rng);
    let depth = depth_map(&grid, &mask);
    let tissue: Vec<u8> = depth
        .iter()
        .map(|&d| match d {
            0 => tissue_code::BACKGROUND,
            d if d <= t => tissue_code::GM,
            _ => tissue_code::WM,
        })
        .collect();

    let mut plans = Vec::new();
    for (k, &count) in spec.lesion_counts.iter().enumerate() {
        let kind = [PlantedKind::I, PlantedKind::II, PlantedKind::III, PlantedKind::IV][k];
        plans.extend((0..count).map(|_| LesionPlan {
            kind,
            juxtacortical: false,
        }));
    }
    let n_juxta = (spec.wml_count as f64 * spec.juxtacortical_fraction).round() as usize;
    plans.extend((0..spec.wml_count).map(|i| LesionPlan {
        kind: PlantedKind::Wml,
        juxtacortical: i < n_juxta,
    }));

    let mut les_rng = stream_rng(seed, &[LESION_STREAM]);
    let mut placer = Placer {
        grid: &grid,
        depth: &depth,
        blocked: vec![false; n],
        visited: vec![false; n],
    };
    let by_depth = |pred: &dyn Fn(u16) -> bool| -> Vec<usize> { (0..n).filter(|&i| pred(depth[i])).collect() };
    let deepest = depth.iter().copied().max().unwrap_or(0);
    let seeds_i = by_depth(&|d| d == t);
    let seeds_ii = by_depth(&|d| d >= 2 && d <= t);
    let seeds_pial = by_depth(&|d| d == 1);
    let seeds_juxta = by_depth(&|d| d > t && d <= t + 2);
    let seeds_deep = by_depth(&|d| d >= t + 4);
    let [lo, hi] = spec.lesion_size_range;
    let mid = ((lo as f64 * hi as f64).sqrt().round() as usize).clamp(lo, hi);

    let mut cl = vec![0u8; n];
    let mut wml = vec![0u8; n];
    let mut records = Vec::with_capacity(plans.len());
    for plan in &plans {
        let (seeds, allowed, sizes): (&[usize], Box<dyn Fn(u16) -> bool>, [usize; 2]) = match plan.kind {
            PlantedKind::I => (&seeds_i, Box::new(move |d| d >= 2 && d <= t + 6), [lo, hi]),
            PlantedKind::II => (&seeds_ii, Box::new(move |d| d >= 2 && d <= t), [lo, hi]),
            PlantedKind::III => (&seeds_pial, Box::new(move |d| d >= 1 && d <= t), [lo, hi]),
            PlantedKind::IV => (&seeds_pial, Box::new(move |d| d >= 1 && d <= t), [mid, hi]),
            PlantedKind::Wml if plan.juxtacortical => (&seeds_juxta, Box::new(move |d| d > t), [lo, hi]),
            PlantedKind::Wml => (
                if seeds_deep.is_empty() { &seeds_juxta } else { &seeds_deep },
                Box::new(move |d| d > t),
                [lo, hi],
            ),
        };
        if seeds.is_empty() || deepest <= t {
            return Err(Error::Generation(format!(
                "no room for a {:?} lesion in a brain of depth {deepest}",
                plan.kind
            )));
        }
        let target = log_uniform(&mut les_rng, sizes[0], sizes[1]);
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let seed_voxel = seeds[les_rng.random_range(0..seeds.len())];
            let lateral = if plan.kind == PlantedKind::IV { 2.5 } else { 1.8 };
            let scales = [0, 1, 2].map(|_| les_rng.random_range(1.0..lateral));
            if placer.blocked[seed_voxel] {
                continue;
            }
            let region = placer.grow(seed_voxel, target, scales, &allowed);
            if region.len() < lo.min(target) {
                continue;
            }
            let ok = match plan.kind {
                PlantedKind::I => region.iter().any(|&i| depth[i] <= t) && region.iter().any(|&i| depth[i] > t),
                PlantedKind::III | PlantedKind::IV => region.iter().any(|&i| depth[i] == 1),
                _ => true,
            };
            if ok {
                placed = Some(region);
                break;
            }
        }
        let region = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place a {:?} lesion of {target} voxels after {MAX_ATTEMPTS} attempts",
                plan.kind
            ))
        })?;
        placer.block(&region);
        let class = plan.kind.lesion_type().map_or(0, |lt| lt.class());
        for &i in &region {
            if class == 0 {
                wml[i] = 1;
            } else {
                cl[i] = class;
            }
        }
        let mut centroid = [0.0; 3];
        for &i in &region {
            let p = coords(dims, i);
            for a in 0..3 {
                centroid[a] += p[a] as f64 / region.len() as f64;
            }
        }
        records.push(LesionRecord {
            kind: plan.kind,
            class,
            juxtacortical: plan.juxtacortical,
            size_voxels: region.len(),
            volume_ul: region.len() as f64 * spec.spacing_mm.powi(3),
            centroid,
            representative_voxel: region[0],
        });
    }

    // Which planted lesion covers each voxel, for per-type visibility.
    let mut owner = vec![u16::MAX; n];
    {
        let comps = crate::eval::label_components(dims, [1.0; 3], &cl, crate::eval::Connectivity::TwentySix);
        let wml_comps = crate::eval::label_components(dims, [1.0; 3], &wml, crate::eval::Connectivity::TwentySix);
        for c in comps.iter().chain(&wml_comps) {
            if let Some(r) = records.iter().position(|r| r.representative_voxel == c.voxels[0]) {
                for &v in &c.voxels {
                    owner[v] = r as u16;
                }
            }
        }
    }

    let mut contrasts: [Vec<f32>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (c, data) in contrasts.iter_mut().enumerate() {
        let mut noise_rng = stream_rng(seed, &[NOISE_STREAM, c as u64]);
        let normal = Normal::new(0.0, spec.noise_sigma[c].max(0.0)).expect("valid sigma");
        let means = spec.tissue_means[c];
        for i in 0..n {
            let base = match tissue[i] {
                tissue_code::WM => means.wm,
                tissue_code::GM => means.gm,
                _ => continue,
            };
            let shift = match owner[i] {
                u16::MAX => 0.0,
                r => spec.lesion_shift[c] * spec.visibility[c][records[r as usize].kind.visibility_slot()],
            };
            let noise = if spec.noise_sigma[c] > 0.0 {
                normal.sample(&mut noise_rng)
            } else {
                0.0
            };
            data[i] = ((base + shift + noise) as f32).max(1e-3);
        }
    }

    let mut art_rng = stream_rng(seed, &[ARTIFACT_STREAM]);
    if spec.artifacts.gre_missing_chunk {
        apply_gre_missing_chunk(&mut contrasts[2], &tissue, dims, &mut art_rng);
    }
    if spec.artifacts.epi_banding {
        apply_epi_banding(&mut contrasts[1], &tissue, dims, &mut art_rng);
    }

    let sp = [spec.spacing_mm; 3];
    let [c0, c1, c2] = contrasts;
    Ok(PhantomSubject {
        id: id.to_string(),
        contrasts: [
            Volume::intensity(dims, sp, id, c0)?,
            Volume::intensity(dims, sp, id, c1)?,
            Volume::intensity(dims, sp, id, c2)?,
        ],
        cl_labels: Volume::labels(dims, sp, VolumeKind::ClLabels, id, cl)?,
        tissue_labels: Volume::labels(dims, sp, VolumeKind::TissueLabels, id, tissue)?,
        wml_labels: Volume::labels(dims, sp, VolumeKind::WmlLabels, id, wml)?,
        lesions: records,
    })
}

/// Zeroes every voxel beyond a plane perpendicular to a random axis, placed
/// so that 5–15 % of the brain is removed.
pub fn apply_gre_missing_chunk<R: Rng>(gre: &mut [f32], tissue: &[u8], dims: [usize; 3], rng: &mut R) {
    let axis = rng.random_range(0..3);
    let from_high = rng.random_bool(0.5);
    let target = rng.random_range(0.06..0.12);
    let total = tissue.iter().filter(|&&t| t != 0).count();
    let mut per_slice = vec![0usize; dims[axis]];
    for (i, &t) in tissue.iter().enumerate() {
        if t != 0 {
            per_slice[coords(dims, i)[axis]] += 1;
        }
    }
    let order: Vec<usize> = if from_high {
        (0..dims[axis]).rev().collect()
    } else {
        (0..dims[axis]).collect()
    };
    let mut removed = 0usize;
    let mut cut = Vec::new();
    for s in order {
        if removed as f64 >= target * total as f64 {
            break;
        }
        removed += per_slice[s];
        cut.push(s);
    }
    let mut in_cut = vec![false; dims[axis]];
    for s in cut {
        in_cut[s] = true;
    }
    for (i, v) in gre.iter_mut().enumerate() {
        if in_cut[coords(dims, i)[axis]] {
            *v = 0.0;
        }
    }
}

/// Multiplies the brain by `1 + A·sin(2π(u − u₀)/P)` along a random axis,
/// `A ∈ [0.1, 0.3]`, with one peak on an integer brain coordinate.
pub fn apply_epi_banding<R: Rng>(epi: &mut [f32], tissue: &[u8], dims: [usize; 3], rng: &mut R) {
    let axis = rng.random_range(0..3);
    let amplitude = rng.random_range(0.1..=0.3);
    let period = rng.random_range(8..=24) as f64;
    let brain: Vec<usize> = (0..tissue.len()).filter(|&i| tissue[i] != 0).collect();
    if brain.is_empty() {
        return;
    }
    let peak = coords(dims, brain[rng.random_range(0..brain.len())])[axis] as f64;
    let u0 = peak - period / 4.0;
    for &i in &brain {
        let u = coords(dims, i)[axis] as f64;
        let f = 1.0 + amplitude * (std::f64::consts::TAU * (u - u0) / period).sin();
        epi[i] = (epi[i] as f64 * f) as f32;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSubjectEntry {
    pub id: String,
    pub dir: PathBuf,
    pub seed: u64,
    pub cl_lesions: ClassCounts,
    pub wml_lesions: usize,
    pub lesions: Vec<LesionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub spec: PhantomSpec,
    pub subjects: Vec<PhantomSubjectEntry>,
    pub total_cl_lesions: usize,
    pub total_wml_lesions: usize,
}

impl PhantomManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn subject_id(i: usize) -> String {
    format!("subject_{i:03}")
}

/// Seed of subject `i` in a cohort generated from `cohort_seed`.
pub fn subject_seed(cohort_seed: u64, i: usize) -> u64 {
    derive_seed(cohort_seed, &[COHORT_STREAM, i as u64])
}

pub fn write_subject(s: &PhantomSubject, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (v, name) in s.contrasts.iter().zip(CONTRASTS) {
        write_volume(v, dir.join(name))?;
    }
    write_volume(&s.cl_labels, dir.join("cl_labels"))?;
    write_volume(&s.tissue_labels, dir.join("tissue_labels"))?;
    write_volume(&s.wml_labels, dir.join("wml_labels"))?;
    Ok(())
}

/// Writes `n_subjects` subject directories and `manifest.json` under
/// `out_dir`, using `spec.seed` as the cohort seed.
pub fn generate_cohort(spec: &PhantomSpec, n_subjects: usize, out_dir: impl AsRef<Path>) -> Result<PhantomManifest> {
    if n_subjects == 0 {
        return Err(Error::Validation("a cohort needs at least one subject".into()));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut subjects = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let id = subject_id(i);
        let seed = subject_seed(spec.seed, i);
        let s = generate_subject(spec, &id, seed)?;
        write_subject(&s, out.join(&id))?;
        let mut cl_lesions = ClassCounts::default();
        for l in &s.lesions {
            match l.class {
                1 => cl_lesions.leukocortical += 1,
                2 => cl_lesions.subpial_intracortical += 1,
                _ => {}
            }
        }
        subjects.push(PhantomSubjectEntry {
            wml_lesions: s.lesions.len() - cl_lesions.total(),
            id: id.clone(),
            dir: PathBuf::from(&id),
            seed,
            cl_lesions,
            lesions: s.lesions,
        });
    }
    let manifest = PhantomManifest {
        spec: spec.clone(),
        total_cl_lesions: subjects.iter().map(|s| s.cl_lesions.total()).sum(),
        total_wml_lesions: subjects.iter().map(|s| s.wml_lesions).sum(),
        subjects,
    };
    let path = out.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
