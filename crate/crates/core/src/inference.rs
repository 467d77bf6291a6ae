//! Whole-volume segmentation by tiling, ensemble averaging and component cleanup.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, ParamSet};
use crate::volume_io::{self, LabelMap, PreprocessSettings, Volume, NUM_CLASSES, PULMONARY_TRUNK};

/// Tiles evaluated per network call.
const TILE_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub spec_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelMap,
    /// Class-major `(8, voxels)` mean probabilities on the label grid, when kept.
    pub probabilities: Option<Vec<f64>>,
    pub provenance: Vec<MemberInfo>,
}

fn check_ensemble(params: &[ParamSet]) -> Result<()> {
    let first = params
        .first()
        .ok_or_else(|| Error::Ensemble("ensemble has no members".into()))?;
    if let Some(p) = params.iter().find(|p| p.spec_hash != first.spec_hash) {
        return Err(Error::Ensemble(format!(
            "member with seed {} has spec hash {} (expected {})",
            p.seed, p.spec_hash, first.spec_hash
        )));
    }
    Ok(())
}

/// Tile origins along one axis: regular stride, last tile ending at or past `n`.
fn tile_origins(n: usize, patch: usize, overlap: f64) -> Vec<usize> {
    let stride = ((patch as f64 * (1.0 - overlap)).round() as usize).clamp(1, patch);
    let mut out = vec![0];
    while out.last().unwrap() + patch < n {
        out.push(out.last().unwrap() + stride);
    }
    out
}

/// Averages the softmax outputs of every member over a tiling of `image` and labels
/// each voxel with its most probable class (lowest index on ties).
pub fn predict_volume(params: &[ParamSet], image: &Volume, patch: [usize; 3], overlap: f64) -> Result<SegmentationResult> {
    check_ensemble(params)?;
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Argument(format!("overlap {overlap} outside [0, 1)")));
    }
    let [nx, ny, nz] = image.grid.shape;
    let [px, py, pz] = patch;
    let origins: Vec<[usize; 3]> = {
        let (ox, oy, oz) = (tile_origins(nx, px, overlap), tile_origins(ny, py, overlap), tile_origins(nz, pz, overlap));
        let mut v = Vec::new();
        for &z in &oz {
            for &y in &oy {
                for &x in &ox {
                    v.push([x, y, z]);
                }
            }
        }
        v
    };
    let n = image.grid.len();
    let tile_len = px * py * pz;
    let mut sums = vec![0f64; NUM_CLASSES * n];
    let mut counts = vec![0u32; n];

    for chunk in origins.chunks(TILE_BATCH) {
        let mut input = Vec::with_capacity(chunk.len() * tile_len);
        for o in chunk {
            // Edge replication: clamp every coordinate into the volume.
            for z in 0..pz {
                let gz = (o[2] + z).min(nz - 1);
                for y in 0..py {
                    let gy = (o[1] + y).min(ny - 1);
                    for x in 0..px {
                        input.push(image.data[image.grid.index((o[0] + x).min(nx - 1), gy, gz)] as f32);
                    }
                }
            }
        }
        let shape = [chunk.len(), 1, px, py, pz];
        let mut mean = vec![0f64; chunk.len() * NUM_CLASSES * tile_len];
        for p in params {
            let probs = network::eval_forward(p, &input, shape)?;
            for (m, &q) in mean.iter_mut().zip(&probs) {
                *m += q as f64;
            }
        }
        let inv = 1.0 / params.len() as f64;
        for (t, o) in chunk.iter().enumerate() {
            for z in 0..pz.min(nz - o[2].min(nz)) {
                for y in 0..py.min(ny - o[1].min(ny)) {
                    for x in 0..px.min(nx - o[0].min(nx)) {
                        let g = image.grid.index(o[0] + x, o[1] + y, o[2] + z);
                        let local = (z * py + y) * px + x;
                        counts[g] += 1;
                        for c in 0..NUM_CLASSES {
                            sums[c * n + g] += mean[(t * NUM_CLASSES + c) * tile_len + local] * inv;
                        }
                    }
                }
            }
        }
    }

    let mut labels = vec![0u8; n];
    for (g, l) in labels.iter_mut().enumerate() {
        let inv = 1.0 / counts[g] as f64;
        let mut best = 0;
        for c in 0..NUM_CLASSES {
            sums[c * n + g] *= inv;
            if sums[c * n + g] > sums[best * n + g] {
                best = c;
            }
        }
        *l = best as u8;
    }
    Ok(SegmentationResult {
        labels: LabelMap::new(image.grid, labels)?,
        probabilities: Some(sums),
        provenance: params
            .iter()
            .map(|p| MemberInfo {
                spec_hash: p.spec_hash.clone(),
                seed: p.seed,
            })
            .collect(),
    })
}

/// Keeps only the largest 6-connected component of labels 1–6; ties go to the
/// component holding the lowest voxel index. The pulmonary trunk is left alone.
pub fn postprocess_components(labels: &LabelMap) -> LabelMap {
    let grid = labels.grid;
    let [nx, ny, nz] = grid.shape;
    let n = grid.len();
    let mut comp = vec![u32::MAX; n];
    // Per label: (size, id) of the best component so far.
    let mut best: [Option<(usize, u32)>; NUM_CLASSES] = [None; NUM_CLASSES];
    let mut queue = VecDeque::new();
    let mut next_id = 0u32;
    for start in 0..n {
        let label = labels.data[start];
        if label == 0 || label == PULMONARY_TRUNK || comp[start] != u32::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if comp[j] == u32::MAX && labels.data[j] == label {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        let slot = &mut best[label as usize];
        if slot.is_none_or(|(s, _)| size > s) {
            *slot = Some((size, id));
        }
    }
    let data = labels
        .data
        .iter()
        .zip(&comp)
        .map(|(&l, &c)| {
            if c == u32::MAX || best[l as usize].is_some_and(|(_, id)| id == c) {
                l
            } else {
                0
            }
        })
        .collect();
    LabelMap { grid, data }
}

/// Preprocesses a raw HU image, predicts, removes stray components and maps the
/// labels back onto the raw grid by nearest neighbour.
pub fn segment(params: &[ParamSet], raw: &Volume, settings: &PreprocessSettings, overlap: f64) -> Result<SegmentationResult> {
    check_ensemble(params)?;
    let prepared = volume_io::preprocess(raw, settings)?;
    let predicted = predict_volume(params, &prepared, params[0].spec.patch_shape, overlap)?;
    let cleaned = postprocess_components(&predicted.labels);
    Ok(SegmentationResult {
        labels: volume_io::resample_labels_to(&cleaned, &raw.grid)?,
        probabilities: None,
        provenance: predicted.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkSpec;
    use crate::volume_io::{Grid, IntensityKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(patch: [usize; 3]) -> NetworkSpec {
        NetworkSpec {
            base_width: 2,
            num_resblocks: 1,
            patch_shape: patch,
            ..NetworkSpec::default()
        }
    }

    fn noise_volume(shape: [usize; 3], seed: u64) -> Volume {
        let g = Grid::new(shape, [1.0; 3], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        Volume::new(g, data, IntensityKind::Normalized).unwrap()
    }

    #[test]
    fn tiling_origins_cover() {
        assert_eq!(tile_origins(64, 64, 0.0), vec![0]);
        assert_eq!(tile_origins(12, 5, 0.0), vec![0, 5, 10]);
        assert_eq!(tile_origins(12, 8, 0.5), vec![0, 4]);
        assert_eq!(tile_origins(3, 5, 0.0), vec![0]);
    }

    #[test]
    fn single_tile_matches_forward() {
        let spec = tiny_spec([16, 16, 3]);
        let p = network::build(&spec, 5).unwrap();
        let v = noise_volume([16, 16, 3], 1);
        let r = predict_volume(std::slice::from_ref(&p), &v, spec.patch_shape, 0.0).unwrap();
        let input: Vec<f32> = v.data.iter().map(|&x| x as f32).collect();
        let probs = network::eval_forward(&p, &input, [1, 1, 16, 16, 3]).unwrap();
        let n = v.grid.len();
        for g in 0..n {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if probs[c * n + g] > probs[best * n + g] {
                    best = c;
                }
            }
            assert_eq!(r.labels.data[g] as usize, best);
        }
    }

    #[test]
    fn ensemble_of_copies_and_probability_sums() {
        let spec = tiny_spec([8, 8, 5]);
        let p = network::build(&spec, 9).unwrap();
        let v = noise_volume([20, 13, 7], 2);
        let one = predict_volume(std::slice::from_ref(&p), &v, spec.patch_shape, 0.0).unwrap();
        let two = predict_volume(&[p.clone(), p.clone()], &v, spec.patch_shape, 0.0).unwrap();
        assert_eq!(one.labels, two.labels);
        let q = network::build(&spec, 10).unwrap();
        let mixed = predict_volume(&[p, q], &v, spec.patch_shape, 0.5).unwrap();
        let probs = mixed.probabilities.unwrap();
        let n = v.grid.len();
        for g in 0..n {
            let s: f64 = (0..NUM_CLASSES).map(|c| probs[c * n + g]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mixed_specs_rejected() {
        let a = network::build(&tiny_spec([8, 8, 5]), 1).unwrap();
        let b = network::build(&tiny_spec([16, 16, 5]), 1).unwrap();
        let v = noise_volume([8, 8, 5], 0);
        assert!(matches!(predict_volume(&[a, b], &v, [8, 8, 5], 0.0), Err(Error::Ensemble(_))));
        assert!(matches!(predict_volume(&[], &v, [8, 8, 5], 0.0), Err(Error::Ensemble(_))));
    }

    #[test]
    fn air_volume_segments_deterministically() {
        let spec = tiny_spec([16, 16, 5]);
        let p = network::build(&spec, 3).unwrap();
        let g = Grid::new([20, 20, 9], [1.5; 3], [0.0; 3]).unwrap();
        let air = Volume::filled(g, -1000.0);
        let settings = PreprocessSettings {
            target_spacing_mm: 1.5,
            ..PreprocessSettings::default()
        };
        let a = segment(std::slice::from_ref(&p), &air, &settings, 0.0).unwrap();
        let b = segment(std::slice::from_ref(&p), &air, &settings, 0.0).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.grid, g);
    }

    fn map(shape: [usize; 3], data: Vec<u8>) -> LabelMap {
        LabelMap::new(Grid::new(shape, [1.0; 3], [0.0; 3]).unwrap(), data).unwrap()
    }

    #[test]
    fn drops_small_components() {
        let shape = [20, 10, 1];
        let mut data = vec![0u8; 200];
        for (i, d) in data.iter_mut().enumerate() {
            let (x, y) = (i % 20, i / 20);
            if x < 10 {
                *d = 3;
            } else if x >= 15 && y == 0 {
                *d = 3;
            } else if x == 12 && y % 2 == 0 {
                *d = 7;
            }
        }
        let out = postprocess_components(&map(shape, data));
        assert_eq!(out.count(3), 100);
        assert_eq!(out.count(7), 5);
    }

    #[test]
    fn tie_keeps_lowest_index() {
        let out = postprocess_components(&map([5, 1, 1], vec![2, 2, 0, 2, 2]));
        assert_eq!(out.data, vec![2, 2, 0, 0, 0]);
    }

    fn components(m: &LabelMap, label: u8) -> usize {
        let mut only = m.clone();
        for d in only.data.iter_mut() {
            *d = if *d == label { 1 } else { 0 };
        }
        // Count components by peeling the largest one until none remain.
        let mut n = 0;
        while only.count(1) > 0 {
            let kept = postprocess_components(&only);
            for (d, k) in only.data.iter_mut().zip(&kept.data) {
                if *k == 1 {
                    *d = 0;
                }
            }
            n += 1;
        }
        n
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn postprocessing_invariants(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [0; 3].map(|_| rng.random_range(2..=10));
            let len = shape.iter().product();
            let data: Vec<u8> = (0..len).map(|_| rng.random_range(0..8)).collect();
            let m = map(shape, data);
            let once = postprocess_components(&m);
            prop_assert_eq!(&postprocess_components(&once), &once);
            for label in 1..8u8 {
                prop_assert!(once.count(label) <= m.count(label));
            }
            prop_assert_eq!(once.mask(7), m.mask(7));
            for label in 1..7u8 {
                prop_assert!(components(&once, label) <= 1);
            }
        }
    }
}
