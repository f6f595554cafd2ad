//! Connected-component labeling of label volumes with a union-find forest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{coords, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets that precede the centre voxel in linear order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    if manhattan == 0 || (self == Connectivity::Six && manhattan > 1) {
                        continue;
                    }
                    if (dz, dy, dx) < (0, 0, 0) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// One connected component of a single class code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionComponent {
    /// Position in the component list; components are ordered by their
    /// smallest linear voxel index.
    pub id: usize,
    pub class: u8,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub volume_ul: f64,
}

impl LesionComponent {
    pub fn size_voxels(&self) -> usize {
        self.voxels.len()
    }

    /// Mean voxel coordinate `[x, y, z]`.
    pub fn centroid(&self, dims: [usize; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for &v in &self.voxels {
            let p = coords(dims, v);
            for a in 0..3 {
                c[a] += p[a] as f64;
            }
        }
        c.map(|s| s / self.voxels.len() as f64)
    }
}

struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Less => self.parent[ra as usize] = rb,
            std::cmp::Ordering::Greater => self.parent[rb as usize] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb as usize] = ra;
                self.rank[ra as usize] += 1;
            }
        }
    }
}

/// Components of every nonzero code in `labels`. Voxels of different codes
/// never share a component.
pub fn label_components(
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    labels: &[u8],
    connectivity: Connectivity,
) -> Vec<LesionComponent> {
    let [nx, ny, nz] = dims;
    assert_eq!(labels.len(), nx * ny * nz, "label length does not match dims");
    let offsets = connectivity.backward_offsets();
    let mut uf = UnionFind::new(labels.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let c = labels[i];
                if c == 0 {
                    continue;
                }
                for &[dx, dy, dz] in &offsets {
                    let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    let j = qx as usize + nx * (qy as usize + ny * qz as usize);
                    if labels[j] == c {
                        uf.union(i as u32, j as u32);
                    }
                }
            }
        }
    }

    let voxel_ul: f64 = spacing_mm.iter().product();
    // Roots are visited in order of first appearance, which is the order of
    // each component's smallest linear index.
    let mut slot = vec![u32::MAX; labels.len()];
    let mut out: Vec<LesionComponent> = Vec::new();
    for (i, &c) in labels.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let r = uf.find(i as u32) as usize;
        if slot[r] == u32::MAX {
            slot[r] = out.len() as u32;
            out.push(LesionComponent {
                id: out.len(),
                class: c,
                voxels: Vec::new(),
                volume_ul: 0.0,
            });
        }
        out[slot[r] as usize].voxels.push(i);
    }
    for comp in &mut out {
        comp.volume_ul = comp.voxels.len() as f64 * voxel_ul;
    }
    out
}

/// Components of a label volume.
pub fn connected_components(labels: &Volume, connectivity: Connectivity) -> Result<Vec<LesionComponent>> {
    let data = labels
        .as_u8()
        .ok_or_else(|| Error::Validation("connected components need a u8 label volume".into()))?;
    Ok(label_components(
        labels.header.dims,
        labels.header.spacing_mm,
        data,
        connectivity,
    ))
}

/// Components with at least `min_voxels` voxels; ids are left untouched.
pub fn filter_min_size(components: &[LesionComponent], min_voxels: usize) -> Vec<LesionComponent> {
    components
        .iter()
        .filter(|c| c.size_voxels() >= min_voxels)
        .cloned()
        .collect()
}
