//! Patient texture descriptors computed on rasterized sub-region label maps:
//! gray-level co-occurrence and run-length matrices, five scalar features,
//! and sub-region proportions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::LabelMap;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunDirection {
    Horizontal,
    Vertical,
}

pub const DEFAULT_DIRECTIONS: [RunDirection; 2] = [RunDirection::Horizontal, RunDirection::Vertical];

/// Image-shaped label grid. Cell value 0 is background, `1..=levels` are
/// sub-region labels shifted by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub cells: Vec<u32>,
}

impl Grid {
    pub fn from_rows(rows: &[Vec<u32>], levels: usize) -> Result<Grid> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged grid rows"));
        }
        let cells: Vec<u32> = rows.concat();
        if let Some(&v) = cells.iter().find(|&&v| v as usize > levels) {
            return Err(Error::invalid(format!("grid level {v} exceeds {levels}")));
        }
        Ok(Grid {
            height: rows.len(),
            width,
            levels,
            cells,
        })
    }

    pub fn at(&self, r: usize, c: usize) -> u32 {
        self.cells[r * self.width + c]
    }

    fn at_offset(&self, r: usize, c: usize, dr: isize, dc: isize) -> Option<u32> {
        let r2 = r.checked_add_signed(dr)?;
        let c2 = c.checked_add_signed(dc)?;
        (r2 < self.height && c2 < self.width).then(|| self.at(r2, c2))
    }

    /// In-mask pixels in row-major order as (coords, zero-based labels).
    pub fn flatten(&self) -> (Vec<(usize, usize)>, Vec<usize>) {
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.at(r, c);
                if v > 0 {
                    coords.push((r, c));
                    labels.push(v as usize - 1);
                }
            }
        }
        (coords, labels)
    }
}

pub fn rasterize(map: &LabelMap, coords: &[(usize, usize)], image_dims: (usize, usize)) -> Result<Grid> {
    if coords.len() != map.labels.len() {
        return Err(Error::DimensionMismatch {
            expected: map.labels.len(),
            found: coords.len(),
        });
    }
    let (h, w) = image_dims;
    let mut cells = vec![0u32; h * w];
    for (&(r, c), &l) in coords.iter().zip(&map.labels) {
        if r >= h || c >= w {
            return Err(Error::invalid(format!("coordinate ({r}, {c}) outside {h}x{w}")));
        }
        if l >= map.eta {
            return Err(Error::invalid(format!("label {l} out of range for {} clusters", map.eta)));
        }
        cells[r * w + c] = l as u32 + 1;
    }
    Ok(Grid {
        height: h,
        width: w,
        levels: map.eta,
        cells,
    })
}

/// Symmetric co-occurrence matrix over `offsets`, normalized to sum 1.
/// Pairs touching background are skipped.
pub fn glcm(grid: &Grid, offsets: &[(isize, isize)]) -> Result<Matrix> {
    let n = grid.levels;
    let mut m = Matrix::zeros(n, n);
    let mut total = 0.0;
    for r in 0..grid.height {
        for c in 0..grid.width {
            let a = grid.at(r, c);
            if a == 0 {
                continue;
            }
            for &(dr, dc) in offsets {
                match grid.at_offset(r, c, dr, dc) {
                    Some(b) if b > 0 => {
                        let (i, j) = (a as usize - 1, b as usize - 1);
                        m.set(i, j, m.get(i, j) + 1.0);
                        m.set(j, i, m.get(j, i) + 1.0);
                        total += 2.0;
                    }
                    _ => {}
                }
            }
        }
    }
    if total == 0.0 {
        return Err(Error::invalid("no co-occurring in-mask pixel pairs"));
    }
    m.as_mut_slice().iter_mut().for_each(|v| *v /= total);
    Ok(m)
}

/// Run counts: entry `(i, j)` is the number of maximal runs of level `i + 1`
/// with length `j + 1`, summed over the directions. Runs stop at background.
pub fn glrlm(grid: &Grid, directions: &[RunDirection]) -> Result<Matrix> {
    if !grid.cells.iter().any(|&v| v > 0) {
        return Err(Error::invalid("grid has no in-mask pixels"));
    }
    let max_len = grid.height.max(grid.width);
    let mut m = Matrix::zeros(grid.levels, max_len);
    let mut scan = |line: &mut dyn Iterator<Item = u32>| {
        let mut current = 0u32;
        let mut len = 0usize;
        for v in line.chain(std::iter::once(0)) {
            if v == current && v > 0 {
                len += 1;
                continue;
            }
            if current > 0 {
                let (i, j) = (current as usize - 1, len - 1);
                m.set(i, j, m.get(i, j) + 1.0);
            }
            current = v;
            len = 1;
        }
    };
    for dir in directions {
        match dir {
            RunDirection::Horizontal => {
                for r in 0..grid.height {
                    scan(&mut (0..grid.width).map(|c| grid.at(r, c)));
                }
            }
            RunDirection::Vertical => {
                for c in 0..grid.width {
                    scan(&mut (0..grid.height).map(|r| grid.at(r, c)));
                }
            }
        }
    }
    Ok(m)
}

fn run_count(p: &Matrix) -> Result<f64> {
    let n: f64 = p.as_slice().iter().sum();
    if n < 1.0 {
        return Err(Error::invalid("run-length matrix has no runs"));
    }
    Ok(n)
}

/// Long run emphasis.
pub fn feature_lre(p: &Matrix) -> Result<f64> {
    let n = run_count(p)?;
    let mut s = 0.0;
    for row in p.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            let len = (j + 1) as f64;
            s += v * len * len;
        }
    }
    Ok(s / n)
}

/// Run variance around the mean run length.
pub fn feature_rv(p: &Matrix) -> Result<f64> {
    let n = run_count(p)?;
    let mut mu = 0.0;
    for row in p.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            mu += v / n * (j + 1) as f64;
        }
    }
    let mut s = 0.0;
    for row in p.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            let d = (j + 1) as f64 - mu;
            s += v / n * d * d;
        }
    }
    Ok(s)
}

/// Run length non-uniformity.
pub fn feature_rln(p: &Matrix) -> Result<f64> {
    let n = run_count(p)?;
    let s: f64 = (0..p.cols())
        .map(|j| {
            let col: f64 = p.iter_rows().map(|row| row[j]).sum();
            col * col
        })
        .sum();
    Ok(s / n)
}

pub fn feature_joint_energy(glcm: &Matrix) -> f64 {
    glcm.as_slice().iter().map(|p| p * p).sum()
}

/// Mutual information of the co-occurrence distribution over its joint
/// entropy (natural log); 0 when the joint entropy is 0.
pub fn feature_rmi(glcm: &Matrix) -> f64 {
    let n = glcm.rows();
    let row_m: Vec<f64> = glcm.iter_rows().map(|r| r.iter().sum()).collect();
    let col_m: Vec<f64> = (0..glcm.cols()).map(|j| glcm.iter_rows().map(|r| r[j]).sum()).collect();
    let mut h = 0.0;
    let mut mi = 0.0;
    for i in 0..n {
        for j in 0..glcm.cols() {
            let p = glcm.get(i, j);
            if p > 0.0 {
                h -= p * p.ln();
                mi += p * (p / (row_m[i] * col_m[j])).ln();
            }
        }
    }
    if h <= 0.0 {
        return 0.0;
    }
    (mi / h).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFeatureVector {
    pub patient_id: String,
    pub lre: f64,
    pub rmi: f64,
    pub joint_energy: f64,
    pub run_variance: f64,
    pub run_length_nonuniformity: f64,
    pub region_proportions: Vec<f64>,
}

impl PatientFeatureVector {
    /// Texture features followed by proportions, in export column order.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![
            self.lre,
            self.rmi,
            self.joint_energy,
            self.run_variance,
            self.run_length_nonuniformity,
        ];
        v.extend_from_slice(&self.region_proportions);
        v
    }
}

pub fn extract_features(map: &LabelMap, coords: &[(usize, usize)], image_dims: (usize, usize)) -> Result<PatientFeatureVector> {
    if map.labels.is_empty() {
        return Err(Error::invalid(format!("patient {}: empty label map", map.patient_id)));
    }
    let grid = rasterize(map, coords, image_dims)?;
    let co = glcm(&grid, &DEFAULT_OFFSETS)?;
    let runs = glrlm(&grid, &DEFAULT_DIRECTIONS)?;
    let mut counts = vec![0.0; map.eta];
    for &l in &map.labels {
        counts[l] += 1.0;
    }
    let total = map.labels.len() as f64;
    Ok(PatientFeatureVector {
        patient_id: map.patient_id.clone(),
        lre: feature_lre(&runs)?,
        rmi: feature_rmi(&co),
        joint_energy: feature_joint_energy(&co),
        run_variance: feature_rv(&runs)?,
        run_length_nonuniformity: feature_rln(&runs)?,
        region_proportions: counts.iter().map(|c| c / total).collect(),
    })
}

/// CSV `patient_id,lre,rmi,joint_energy,run_variance,rln,prop_0..`.
pub fn write_feature_table(features: &[PatientFeatureVector], path: &Path) -> Result<()> {
    let eta = features.first().map_or(0, |f| f.region_proportions.len());
    let mut s = String::from("patient_id,lre,rmi,joint_energy,run_variance,rln");
    for k in 0..eta {
        write!(s, ",prop_{k}").expect("write to string");
    }
    s.push('\n');
    for f in features {
        s.push_str(&f.patient_id);
        for v in f.values() {
            write!(s, ",{v:.16e}").expect("write to string");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: &[&[u32]], levels: usize) -> Grid {
        Grid::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), levels).unwrap()
    }

    fn runs(entries: &[(usize, usize, f64)], levels: usize, max_len: usize) -> Matrix {
        let mut m = Matrix::zeros(levels, max_len);
        for &(i, len, v) in entries {
            m.set(i, len - 1, v);
        }
        m
    }

    #[test]
    fn rasterize_examples() {
        let empty = LabelMap::new("p", vec![], 3).unwrap();
        assert!(rasterize(&empty, &[], (2, 2)).unwrap().cells.iter().all(|&v| v == 0));
        let one = LabelMap::new("p", vec![2], 3).unwrap();
        assert_eq!(rasterize(&one, &[(0, 0)], (2, 2)).unwrap().at(0, 0), 3);
        let map = LabelMap::new("p", vec![1, 0, 2], 3).unwrap();
        let coords = [(0, 1), (1, 0), (1, 2)];
        let g = rasterize(&map, &coords, (2, 3)).unwrap();
        assert_eq!(g.flatten(), (coords.to_vec(), vec![1, 0, 2]));
    }

    #[test]
    fn glcm_examples() {
        let c = glcm(&grid(&[&[1, 1], &[1, 1]], 1), &[(0, 1)]).unwrap();
        assert_eq!(c.as_slice(), &[1.0]);
        let c = glcm(&grid(&[&[1, 2], &[2, 1]], 2), &[(0, 1)]).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.5, 0.5, 0.0]);
        assert!(glcm(&grid(&[&[1, 0], &[0, 0]], 1), &DEFAULT_OFFSETS).is_err());
        // Background breaks pairs, including the anti-diagonal offset.
        let c = glcm(&grid(&[&[0, 1], &[2, 0]], 2), &DEFAULT_OFFSETS).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn glrlm_examples() {
        let m = glrlm(&grid(&[&[1, 1, 2]], 2), &[RunDirection::Horizontal]).unwrap();
        assert_eq!(m, runs(&[(0, 2, 1.0), (1, 1, 1.0)], 2, 3));
        let m = glrlm(&grid(&[&[1, 2, 1, 2]], 2), &[RunDirection::Horizontal]).unwrap();
        assert_eq!(m, runs(&[(0, 1, 2.0), (1, 1, 2.0)], 2, 4));
        let m = glrlm(&grid(&[&[1, 1, 1]], 1), &[RunDirection::Horizontal]).unwrap();
        assert_eq!(m, runs(&[(0, 3, 1.0)], 1, 3));
        let m = glrlm(&grid(&[&[1, 0, 1]], 1), &[RunDirection::Horizontal]).unwrap();
        assert_eq!(m, runs(&[(0, 1, 2.0)], 1, 3));
        assert!(glrlm(&grid(&[&[0, 0]], 1), &DEFAULT_DIRECTIONS).is_err());
    }

    #[test]
    fn run_feature_examples() {
        let single = runs(&[(0, 3, 1.0)], 1, 3);
        assert_eq!(feature_lre(&single).unwrap(), 9.0);
        assert_eq!(feature_rv(&single).unwrap(), 0.0);
        assert_eq!(feature_rln(&single).unwrap(), 1.0);

        let two = runs(&[(0, 2, 1.0), (1, 1, 1.0)], 2, 3);
        assert_eq!(feature_lre(&two).unwrap(), 2.5);
        assert_eq!(feature_rv(&two).unwrap(), 0.25);
        assert_eq!(feature_rln(&two).unwrap(), 1.0);

        let unit = runs(&[(0, 1, 3.0), (1, 1, 4.0)], 2, 3);
        assert_eq!(feature_lre(&unit).unwrap(), 1.0);
        assert_eq!(feature_rln(&unit).unwrap(), 7.0);
        assert!(feature_lre(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn co_occurrence_feature_examples() {
        let one = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert_eq!(feature_joint_energy(&one), 1.0);
        assert_eq!(feature_rmi(&one), 0.0);
        let uniform = Matrix::from_vec(2, 2, vec![0.25; 4]).unwrap();
        assert_eq!(feature_joint_energy(&uniform), 0.25);
        assert!(feature_rmi(&uniform).abs() < 1e-15);
        let diag = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(feature_joint_energy(&diag), 0.5);
        // I = ln 2 and H = ln 2 computed directly.
        let (i, h) = (2.0 * 0.5 * (0.5f64 / 0.25).ln(), -2.0 * 0.5 * 0.5f64.ln());
        assert!((feature_rmi(&diag) - i / h).abs() < 1e-15);
        assert!((feature_rmi(&diag) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn extract_examples() {
        let coords: Vec<(usize, usize)> = (0..10).flat_map(|r| (0..10).map(move |c| (r, c))).collect();
        let labels: Vec<usize> = (0..100).map(|i| if i < 50 { 0 } else if i < 80 { 1 } else { 2 }).collect();
        let map = LabelMap::new("a", labels, 3).unwrap();
        let f = extract_features(&map, &coords, (10, 10)).unwrap();
        assert_eq!(f.region_proportions, vec![0.5, 0.3, 0.2]);
        let g = extract_features(&LabelMap { patient_id: "a".into(), ..map.clone() }, &coords, (10, 10)).unwrap();
        assert_eq!(f, g);

        let single = LabelMap::new("s", vec![0; 100], 2).unwrap();
        let f = extract_features(&single, &coords, (10, 10)).unwrap();
        assert_eq!(f.region_proportions, vec![1.0, 0.0]);
        assert_eq!(f.joint_energy, 1.0);
        // Twenty runs of length 10 across both directions.
        assert_eq!(f.lre, 100.0);
        assert!(extract_features(&LabelMap::new("e", vec![], 2).unwrap(), &[], (3, 3)).is_err());
    }

    fn random_grid() -> impl Strategy<Value = Grid> {
        (2usize..7, 2usize..7, 1usize..5).prop_flat_map(|(h, w, levels)| {
            prop::collection::vec(0..=levels as u32, h * w).prop_map(move |mut cells| {
                cells[0] = 1;
                cells[1] = 1;
                Grid {
                    height: h,
                    width: w,
                    levels,
                    cells,
                }
            })
        })
    }

    proptest! {
        #[test]
        fn matrix_invariants(g in random_grid()) {
            let c = glcm(&g, &DEFAULT_OFFSETS).unwrap();
            let sum: f64 = c.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for i in 0..g.levels {
                for j in 0..g.levels {
                    prop_assert_eq!(c.get(i, j), c.get(j, i));
                }
            }
            let in_mask = g.cells.iter().filter(|&&v| v > 0).count() as f64;
            for dir in DEFAULT_DIRECTIONS {
                let m = glrlm(&g, &[dir]).unwrap();
                let weighted: f64 = m.iter_rows().map(|r| r.iter().enumerate().map(|(j, v)| v * (j + 1) as f64).sum::<f64>()).sum();
                prop_assert_eq!(weighted, in_mask);
            }
            let runs = glrlm(&g, &DEFAULT_DIRECTIONS).unwrap();
            prop_assert!(feature_lre(&runs).unwrap() >= 1.0);
            let rmi = feature_rmi(&c);
            prop_assert!((0.0..=1.0).contains(&rmi));
            let e = feature_joint_energy(&c);
            prop_assert!(e > 0.0 && e <= 1.0 + 1e-15);
        }

        #[test]
        fn features_invariant_under_relabeling(g in random_grid(), seed in 0u64..50) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<u32> = (1..=g.levels as u32).collect();
            perm.shuffle(&mut crate::seed::rng(seed));
            let mut h = g.clone();
            h.cells.iter_mut().for_each(|v| if *v > 0 { *v = perm[*v as usize - 1] });
            let (ca, cb) = (glcm(&g, &DEFAULT_OFFSETS).unwrap(), glcm(&h, &DEFAULT_OFFSETS).unwrap());
            prop_assert!((feature_joint_energy(&ca) - feature_joint_energy(&cb)).abs() < 1e-12);
            prop_assert!((feature_rmi(&ca) - feature_rmi(&cb)).abs() < 1e-12);
            let (ra, rb) = (glrlm(&g, &DEFAULT_DIRECTIONS).unwrap(), glrlm(&h, &DEFAULT_DIRECTIONS).unwrap());
            prop_assert_eq!(feature_lre(&ra).unwrap(), feature_lre(&rb).unwrap());
            prop_assert!((feature_rv(&ra).unwrap() - feature_rv(&rb).unwrap()).abs() < 1e-12);
            prop_assert_eq!(feature_rln(&ra).unwrap(), feature_rln(&rb).unwrap());
        }
    }
}
