//! Lesion-balanced patch sampling with rotation, flip and input-channel
//! dropout augmentation.
//!
//! A patch is resampled directly from the subject volume: output voxel `p`
//! of the `s³` window reads source position `o + m + R·F·(p − m)`, where `o`
//! is the window origin, `m = (s − 1)/2` its centre, `F` the axis flips and
//! `R = Rz·Ry·Rx`. Positions outside the volume are mirrored back in, so the
//! rotated window never sees padding. Intensities are interpolated
//! trilinearly, labels by nearest neighbour.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{label_components, Connectivity, LesionComponent};
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use crate::unet::HALO;
use crate::volume::{coords, zscore_nonzero, SubjectVolumes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Fraction of patches centred on a lesion.
    pub lesion_fraction: f64,
    pub jitter_voxels: usize,
    pub rotation_max_deg: f64,
    /// Per-axis flip probability.
    pub flip_probability: f64,
    /// Probability of zeroing one T2* channel.
    pub icd_probability: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lesion_fraction: 0.5,
            jitter_voxels: 8,
            rotation_max_deg: 180.0,
            flip_probability: 0.5,
            icd_probability: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("lesion_fraction", self.lesion_fraction),
            ("flip_probability", self.flip_probability),
            ("icd_probability", self.icd_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} = {p} is not a probability")));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::Validation("rotation_max_deg must lie in [0, 180]".into()));
        }
        Ok(())
    }
}

/// One subject held in memory: normalized contrasts and label maps.
#[derive(Clone, Debug)]
pub struct SubjectData {
    pub id: String,
    pub dims: [usize; 3],
    /// Z-scored over nonzero voxels, channel order mp2rage, t2s_epi, t2s_gre.
    pub channels: [Vec<f32>; 3],
    pub cl_labels: Vec<u8>,
    pub tissue_labels: Vec<u8>,
    pub wml_labels: Vec<u8>,
}

impl SubjectData {
    pub fn from_volumes(s: &SubjectVolumes) -> Self {
        let ch = |i: usize| zscore_nonzero(s.contrasts[i].as_f32().expect("intensity volume"));
        let lab = |v: &crate::Volume| v.as_u8().expect("label volume").to_vec();
        Self {
            id: s.id.clone(),
            dims: s.dims(),
            channels: [ch(0), ch(1), ch(2)],
            cl_labels: lab(&s.cl_labels),
            tissue_labels: lab(&s.tissue_labels),
            wml_labels: lab(&s.wml_labels),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SubjectLesions {
    pub lesions: Vec<LesionComponent>,
    /// Linear indices of brain voxels (tissue ≠ 0).
    pub brain: Vec<usize>,
}

/// Per-subject lesion components plus a flat cohort-wide list, so every
/// lesion is equally likely regardless of size or subject.
#[derive(Clone, Debug)]
pub struct LesionIndex {
    pub subjects: Vec<SubjectLesions>,
    /// `(subject, lesion)` pairs.
    pub flat: Vec<(usize, usize)>,
}

pub fn build_lesion_index(cohort: &[SubjectData]) -> Result<LesionIndex> {
    if cohort.is_empty() {
        return Err(Error::Validation("cannot index an empty cohort".into()));
    }
    let mut subjects = Vec::with_capacity(cohort.len());
    let mut flat = Vec::new();
    for (si, s) in cohort.iter().enumerate() {
        let lesions = label_components(s.dims, [1.0; 3], &s.cl_labels, Connectivity::TwentySix);
        flat.extend((0..lesions.len()).map(|li| (si, li)));
        let brain = (0..s.tissue_labels.len()).filter(|&i| s.tissue_labels[i] != 0).collect();
        subjects.push(SubjectLesions { lesions, brain });
    }
    Ok(LesionIndex { subjects, flat })
}

/// Rotation and flips applied to one patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Rotation about x, y and z, in degrees.
    pub angles_deg: [f64; 3],
    pub flips: [bool; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: usize,
    pub subject_id: String,
    /// Patch centre `[x, y, z]` in subject voxels.
    pub center: [i64; 3],
    /// Index into [`LesionIndex::flat`] for lesion-centred patches.
    pub lesion: Option<usize>,
    pub augmentation: Augmentation,
    /// Zeroed input channel, if any.
    pub dropped_channel: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPatch {
    /// Shape `(1, 3, s, s, s)`.
    pub input: Tensor<f32>,
    /// Centre `(s − 40)³` crops, `(z, y, x)` order with x fastest.
    pub cl_labels: Vec<u8>,
    pub tissue_labels: Vec<u8>,
    pub wml_labels: Vec<u8>,
    pub provenance: Provenance,
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(a: f64) -> (f64, f64) {
    if a % 90.0 == 0.0 {
        match (a / 90.0).rem_euclid(4.0) as i64 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        a.to_radians().sin_cos()
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// `R·F` acting on `[x, y, z]` vectors.
pub fn augmentation_matrix(aug: &Augmentation) -> [[f64; 3]; 3] {
    let (sx, cx) = sin_cos_deg(aug.angles_deg[0]);
    let (sy, cy) = sin_cos_deg(aug.angles_deg[1]);
    let (sz, cz) = sin_cos_deg(aug.angles_deg[2]);
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mut r = matmul(&rz, &matmul(&ry, &rx));
    for (axis, &f) in aug.flips.iter().enumerate() {
        if f {
            for row in r.iter_mut() {
                row[axis] = -row[axis];
            }
        }
    }
    r
}

/// Symmetric reflection into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn trilinear(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let f = p.map(f64::floor);
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
    let b = f.map(|v| v as i64);
    let ix = [reflect(b[0], dims[0]), reflect(b[0] + 1, dims[0])];
    let iy = [reflect(b[1], dims[1]), reflect(b[1] + 1, dims[1])];
    let iz = [reflect(b[2], dims[2]), reflect(b[2] + 1, dims[2])];
    let mut acc = 0.0f64;
    for (dz, &z) in iz.iter().enumerate() {
        let wz = if dz == 0 { 1.0 - t[2] } else { t[2] };
        if wz == 0.0 {
            continue;
        }
        for (dy, &y) in iy.iter().enumerate() {
            let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
            if wy == 0.0 {
                continue;
            }
            let row = dims[0] * (y + dims[1] * z);
            for (dx, &x) in ix.iter().enumerate() {
                let wx = if dx == 0 { 1.0 - t[0] } else { t[0] };
                if wx != 0.0 {
                    acc += wz * wy * wx * data[row + x] as f64;
                }
            }
        }
    }
    acc as f32
}

fn nearest(data: &[u8], dims: [usize; 3], p: [f64; 3]) -> u8 {
    let i = p.map(|v| (v + 0.5).floor() as i64);
    data[reflect(i[0], dims[0]) + dims[0] * (reflect(i[1], dims[1]) + dims[1] * reflect(i[2], dims[2]))]
}

/// Window origin along one axis: centred on `c`, clamped so the window stays
/// inside the volume padded by the network halo.
fn window_origin(c: i64, n: usize, side: usize) -> i64 {
    let (n, s, halo) = (n as i64, side as i64, HALO as i64);
    let lo = -halo;
    let hi = n + halo - s;
    let o = c - s / 2;
    if lo <= hi {
        o.clamp(lo, hi)
    } else {
        (n - s) / 2
    }
}

/// Resamples the `side³` input window centred on `center` and the matching
/// label crops.
pub fn extract_patch(
    s: &SubjectData,
    subject: usize,
    center: [i64; 3],
    aug: &Augmentation,
    side: usize,
) -> Result<TrainingPatch> {
    let out = crate::unet::output_shape(side)?;
    let origin = [0, 1, 2].map(|a| window_origin(center[a], s.dims[a], side));
    let r = augmentation_matrix(aug);
    let m = (side as f64 - 1.0) / 2.0;
    let source = |p: [usize; 3]| -> [f64; 3] {
        let q = [p[0] as f64 - m, p[1] as f64 - m, p[2] as f64 - m];
        let mut o = [0.0; 3];
        for i in 0..3 {
            o[i] = origin[i] as f64 + m + r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2];
        }
        o
    };

    let mut input = Tensor::<f32>::zeros([1, 3, side, side, side]);
    let plane = side * side * side;
    {
        let data = input.data_mut();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    let p = source([x, y, z]);
                    let at = x + side * (y + side * z);
                    for c in 0..3 {
                        data[c * plane + at] = trilinear(&s.channels[c], s.dims, p);
                    }
                }
            }
        }
    }
    let n_out = out * out * out;
    let (mut cl, mut tissue, mut wml) = (vec![0; n_out], vec![0; n_out], vec![0; n_out]);
    for z in 0..out {
        for y in 0..out {
            for x in 0..out {
                let p = source([x + HALO, y + HALO, z + HALO]);
                let at = x + out * (y + out * z);
                cl[at] = nearest(&s.cl_labels, s.dims, p);
                tissue[at] = nearest(&s.tissue_labels, s.dims, p);
                wml[at] = nearest(&s.wml_labels, s.dims, p);
            }
        }
    }
    Ok(TrainingPatch {
        input,
        cl_labels: cl,
        tissue_labels: tissue,
        wml_labels: wml,
        provenance: Provenance {
            subject,
            subject_id: s.id.clone(),
            center,
            lesion: None,
            augmentation: *aug,
            dropped_channel: None,
        },
    })
}

/// With probability `p`, zeroes one of the two T2* channels (chosen
/// uniformly). Channel 0 is never touched.
pub fn input_channel_dropout<R: Rng>(patch: &mut TrainingPatch, p: f64, rng: &mut R) {
    if !rng.random_bool(p) {
        return;
    }
    let c = if rng.random_bool(0.5) { 1 } else { 2 };
    let v = patch.input.voxels();
    patch.input.data_mut()[c * v..(c + 1) * v].fill(0.0);
    patch.provenance.dropped_channel = Some(c);
}

/// Draws training patches from an in-memory cohort.
pub struct Sampler<'a> {
    pub config: SamplerConfig,
    pub side: usize,
    cohort: &'a [SubjectData],
    index: LesionIndex,
}

impl<'a> Sampler<'a> {
    pub fn new(config: SamplerConfig, side: usize, cohort: &'a [SubjectData]) -> Result<Self> {
        config.validate()?;
        crate::unet::output_shape(side)?;
        let index = build_lesion_index(cohort)?;
        if index.flat.is_empty() && config.lesion_fraction > 0.0 {
            return Err(Error::Validation(
                "lesion_fraction > 0 but the cohort has no lesions".into(),
            ));
        }
        Ok(Self {
            config,
            side,
            cohort,
            index,
        })
    }

    pub fn index(&self) -> &LesionIndex {
        &self.index
    }

    /// Draw number `counter` of worker `worker`: a pure function of the seed
    /// and both numbers.
    pub fn draw(&self, worker: u64, counter: u64) -> Result<TrainingPatch> {
        let mut rng = stream_rng(self.config.seed, &[worker, counter]);
        self.sample_patch(&mut rng)
    }

    /// Picks the patch centre: with probability `lesion_fraction` a voxel of
    /// a lesion drawn uniformly from the cohort-wide list, jittered;
    /// otherwise a uniform brain voxel of a uniform subject. Returns
    /// `(subject, centre, flat lesion index)`.
    pub fn choose_center<R: Rng>(&self, rng: &mut R) -> (usize, [i64; 3], Option<usize>) {
        let c = &self.config;
        let on_lesion = !self.index.flat.is_empty() && rng.random_bool(c.lesion_fraction);
        if on_lesion {
            let k = rng.random_range(0..self.index.flat.len());
            let (si, li) = self.index.flat[k];
            let comp = &self.index.subjects[si].lesions[li];
            let v = comp.voxels[rng.random_range(0..comp.voxels.len())];
            let p = coords(self.cohort[si].dims, v);
            let j = c.jitter_voxels as i64;
            let center = [0, 1, 2].map(|a| p[a] as i64 + rng.random_range(-j..=j));
            (si, center, Some(k))
        } else {
            let si = rng.random_range(0..self.cohort.len());
            let brain = &self.index.subjects[si].brain;
            let dims = self.cohort[si].dims;
            let v = if brain.is_empty() {
                rng.random_range(0..dims.iter().product::<usize>())
            } else {
                brain[rng.random_range(0..brain.len())]
            };
            (si, coords(dims, v).map(|x| x as i64), None)
        }
    }

    pub fn sample_patch<R: Rng>(&self, rng: &mut R) -> Result<TrainingPatch> {
        let c = &self.config;
        let (subject, center, lesion) = self.choose_center(rng);
        let mut aug = Augmentation::default();
        let max = c.rotation_max_deg;
        for a in aug.angles_deg.iter_mut() {
            *a = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        }
        for f in aug.flips.iter_mut() {
            *f = rng.random_bool(c.flip_probability);
        }
        let mut patch = extract_patch(&self.cohort[subject], subject, center, &aug, self.side)?;
        patch.provenance.lesion = lesion;
        input_channel_dropout(&mut patch, c.icd_probability, rng);
        Ok(patch)
    }
}
