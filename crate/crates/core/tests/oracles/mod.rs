//! Straight-line reference implementations shared by the integration
//! tests and the acceptance run. Nothing here calls the scoring or
//! factorization code it is compared against.
#![allow(dead_code)]

use nalgebra::DMatrix;
use semedit_core::directions::DirectionSet;
use semedit_core::generator::{generate, SisGenerator};
use semedit_core::image::Image;
use semedit_core::metrics::{masked_distance, Distance, EvalProtocol};
use semedit_core::rng::{rng_for, standard_normal_vec};
use semedit_core::scene::{apply_direction, class_mask, ClassMask, LabelMap, LatentCode3D};

pub fn textured(h: usize, w: usize, seed: u64) -> Image {
    let noise = standard_normal_vec(&mut rng_for(seed, &[]), 3 * h * w);
    Image::new(h, w, noise.iter().map(|v| (0.5 * v).tanh()).collect()).unwrap()
}

/// `base` inside `mask`, `other` everywhere else.
pub fn paste_outside(base: &Image, other: &Image, mask: &ClassMask) -> Image {
    let mut out = base.clone();
    for c in 0..3 {
        for r in 0..base.height() {
            for col in 0..base.width() {
                if !mask.get(r, col) {
                    out.set(c, r, col, other.at(c, r, col));
                }
            }
        }
    }
    out
}

/// Cyclic Jacobi eigensolver for symmetric matrices. Returns eigenvalues
/// and eigenvectors (one per entry) in no particular order.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i][i]).collect();
    let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (vals, vecs)
}

/// `WᵀW` by explicit sums.
pub fn gram(w: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let d = w.ncols();
    (0..d).map(|i| (0..d).map(|j| (0..w.nrows()).map(|r| w[(r, i)] * w[(r, j)]).sum()).collect()).collect()
}

/// Orthonormal basis of the column span. Singular values below 5% of the
/// largest are dropped: a nearly antipodal pair spans one dimension.
pub fn span_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let cols: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 0.05 * smax).collect();
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| u[(i, cols[j])])
}

/// Radians; both arguments have orthonormal columns.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = (a.transpose() * b).svd(false, false).singular_values;
    s.iter().fold(f64::INFINITY, |m, &v| m.min(v)).clamp(-1.0, 1.0).acos()
}

/// Everything a brute-force score needs.
pub struct Bench<'a> {
    pub gen: &'a dyn SisGenerator,
    pub maps: &'a [LabelMap],
    pub sets: &'a [DirectionSet],
    pub protocol: &'a EvalProtocol,
}

impl Bench<'_> {
    fn code(&self, map: usize, z: usize, y: &LabelMap) -> LatentCode3D {
        LatentCode3D::replicate(self.protocol.latent_vector(map, z, self.gen.latent_channels()), y.height(), y.width()).unwrap()
    }

    fn set(&self, c: usize) -> &DirectionSet {
        self.sets.iter().find(|s| s.class_id == c).unwrap()
    }

    fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.sets.iter().map(|s| s.class_id).collect();
        c.sort();
        c
    }

    /// One local score from single renders, `(pair mean, literal)`.
    /// `which`: 0 = diversity inside, 1 = diversity outside, 2 = consistency.
    pub fn local(&self, which: usize, d: &Distance) -> (f64, f64) {
        let p = self.protocol;
        let zc = p.latent_codes;
        let mut class_pm = Vec::new();
        let mut class_lit = Vec::new();
        for c in self.classes() {
            let dirs = &self.set(c).directions;
            let k = dirs.len();
            let mut pm_sum = 0.0;
            let mut lit_sum = 0.0;
            let mut n_maps = 0;
            for (mi, y) in self.maps.iter().enumerate() {
                let m = class_mask(y, c).unwrap();
                if m.pixel_count() == 0 || (which == 1 && m.pixel_count() == y.height() * y.width()) {
                    continue;
                }
                let region = if which == 1 { m.complement() } else { m.clone() };
                let alpha = p.local_alpha(mi, c);
                let mut img = vec![vec![]; zc];
                for (z, row) in img.iter_mut().enumerate() {
                    for v in dirs {
                        let e = apply_direction(&self.code(mi, z, y), v, alpha, Some(&m)).unwrap();
                        row.push(generate(self.gen, &e, y).unwrap());
                    }
                }
                let mut ordered = 0.0;
                let mut unordered = Vec::new();
                if which < 2 {
                    for row in &img {
                        for k1 in 0..k {
                            for k2 in 0..k {
                                if k1 != k2 {
                                    let v = masked_distance(d, &row[k1], &row[k2], Some(&region)).unwrap();
                                    ordered += v;
                                    if k1 < k2 {
                                        unordered.push(v);
                                    }
                                }
                            }
                        }
                    }
                } else {
                    for kk in 0..k {
                        for z1 in 0..zc {
                            for z2 in 0..zc {
                                if z1 != z2 {
                                    let v = masked_distance(d, &img[z1][kk], &img[z2][kk], Some(&region)).unwrap();
                                    ordered += v;
                                    if z1 < z2 {
                                        unordered.push(v);
                                    }
                                }
                            }
                        }
                    }
                }
                pm_sum += unordered.iter().sum::<f64>() / unordered.len() as f64;
                lit_sum += ordered / (zc * k) as f64;
                n_maps += 1;
            }
            if n_maps > 0 {
                class_pm.push(pm_sum / n_maps as f64);
                class_lit.push(lit_sum / n_maps as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&class_pm), mean(&class_lit))
    }

    /// Global `(mCD, mCC)` pair means from single renders.
    pub fn global(&self, d: &Distance) -> (f64, f64) {
        let p = self.protocol;
        let (zc, ec) = (p.latent_codes, p.global_edits);
        let (mut cd, mut cc) = (0.0, 0.0);
        for (mi, y) in self.maps.iter().enumerate() {
            let mut img = vec![vec![]; zc];
            for (z, row) in img.iter_mut().enumerate() {
                for e in 0..ec {
                    let mut lat = self.code(mi, z, y);
                    for c in self.classes() {
                        let m = class_mask(y, c).unwrap();
                        if m.pixel_count() == 0 {
                            continue;
                        }
                        let dirs = &self.set(c).directions;
                        let (k, a) = p.global_choice(mi, e, c, dirs.len());
                        lat = apply_direction(&lat, &dirs[k], a, Some(&m)).unwrap();
                    }
                    row.push(generate(self.gen, &lat, y).unwrap());
                }
            }
            let mut v = Vec::new();
            for row in &img {
                for e1 in 0..ec {
                    for e2 in e1 + 1..ec {
                        v.push(masked_distance(d, &row[e1], &row[e2], None).unwrap());
                    }
                }
            }
            cd += v.iter().sum::<f64>() / v.len() as f64;
            let mut w = Vec::new();
            for e in 0..ec {
                for z1 in 0..zc {
                    for z2 in z1 + 1..zc {
                        w.push(masked_distance(d, &img[z1][e], &img[z2][e], None).unwrap());
                    }
                }
            }
            cc += w.iter().sum::<f64>() / w.len() as f64;
        }
        let n = self.maps.len() as f64;
        (cd / n, cc / n)
    }
}
