//! Calibrated two-view geometry: feature matching, the five-point essential
//! matrix solver inside RANSAC, pose recovery and linear triangulation.

use image::{GrayImage, RgbImage};
use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, SMatrix, Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::BBox;
use crate::projection::RectilinearView;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MvgError {
    #[error("insufficient features: {found} matches, need at least 5")]
    InsufficientFeatures { found: usize },
    #[error("intrinsic matrix is singular")]
    SingularIntrinsics,
    #[error("{got} matches supplied, at least 5 required")]
    TooFewMatches { got: usize },
    #[error("essential matrix estimation failed: best model has {best_inliers} inliers (need 8)")]
    EstimationFailed { best_inliers: usize },
    #[error("cheirality failure: best factorization puts {best} of {total} points in front of both cameras")]
    CheiralityFailure { best: usize, total: usize },
    #[error("triangulation degenerate: rays are parallel")]
    TriangulationDegenerate,
    #[error("camera matrix has singular left 3x3 block")]
    SingularCameraMatrix,
    #[error("no inliers to choose from")]
    EmptyInliers,
    #[error("invalid RANSAC parameters: {0}")]
    InvalidParams(String),
}

/// A putative correspondence in pixel coordinates of the two views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub pt0: [f64; 2],
    pub pt1: [f64; 2],
}

/// A correspondence in normalized camera coordinates (third component 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedMatch {
    pub x0: Vector3<f64>,
    pub xc: Vector3<f64>,
}

impl NormalizedMatch {
    pub fn new(x0: [f64; 2], xc: [f64; 2]) -> Self {
        Self { x0: Vector3::new(x0[0], x0[1], 1.0), xc: Vector3::new(xc[0], xc[1], 1.0) }
    }
}

/// Frobenius-normalized essential matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    /// Normalizes to unit Frobenius norm with the largest-magnitude entry positive.
    pub fn normalized(m: Matrix3<f64>) -> Self {
        let n = m.norm();
        let mut e = if n > 0.0 { m / n } else { m };
        let imax = e.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map_or(0, |x| x.0);
        if e[imax] < 0.0 {
            e = -e;
        }
        Self(e)
    }

    pub fn from_pose(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self::normalized(t.cross_matrix() * r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn residual(&self, m: &NormalizedMatch) -> f64 {
        m.xc.dot(&(self.0 * m.x0))
    }

    /// First-order geometric error of a correspondence, in normalized units squared.
    pub fn sampson(&self, m: &NormalizedMatch) -> f64 {
        let ex = self.0 * m.x0;
        let etx = self.0.transpose() * m.xc;
        let r = m.xc.dot(&ex);
        let d = ex.x * ex.x + ex.y * ex.y + etx.x * etx.x + etx.y * etx.y;
        if d <= 0.0 {
            f64::INFINITY
        } else {
            r * r / d
        }
    }

    pub fn singular_values(&self) -> Vector3<f64> {
        let mut s = self.0.svd(false, false).singular_values;
        s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Frobenius norm of `2EEᵀE − tr(EEᵀ)E`.
    pub fn trace_constraint(&self) -> f64 {
        let e = &self.0;
        let eet = e * e.transpose();
        (2.0 * eet * e - eet.trace() * e).norm()
    }
}

/// A 3×4 camera matrix `[M | p4]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn canonical() -> Self {
        Self::from_rt(&Matrix3::identity(), &Vector3::zeros())
    }

    pub fn from_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        p.set_column(3, t);
        Self(p)
    }

    pub fn m(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn p4(&self) -> Vector3<f64> {
        self.0.column(3).into_owned()
    }

    pub fn project(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * x.push(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub pixel_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub rng_seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { pixel_threshold: 1.5, confidence: 0.999, max_iterations: 5000, rng_seed: 0 }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), MvgError> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(MvgError::InvalidParams(format!("confidence {} not in (0,1)", self.confidence)));
        }
        if !(self.pixel_threshold > 0.0 && self.pixel_threshold.is_finite()) {
            return Err(MvgError::InvalidParams(format!("threshold {} must be positive", self.pixel_threshold)));
        }
        if self.max_iterations == 0 {
            return Err(MvgError::InvalidParams("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

pub fn normalize_matches(ms: &[FeatureMatch], k: &Matrix3<f64>) -> Result<Vec<NormalizedMatch>, MvgError> {
    let kinv = k.try_inverse().ok_or(MvgError::SingularIntrinsics)?;
    let norm = |p: [f64; 2]| {
        let v = kinv * Vector3::new(p[0], p[1], 1.0);
        v / v.z
    };
    Ok(ms.iter().map(|m| NormalizedMatch { x0: norm(m.pt0), xc: norm(m.pt1) }).collect())
}

// ---------------------------------------------------------------------------
// Five-point solver

type Poly3 = [f64; 20];

/// Exponents of x, y, z for each monomial slot.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (0, 3, 0),
    (2, 1, 0),
    (1, 2, 0),
    (2, 0, 1),
    (2, 0, 0),
    (0, 2, 1),
    (0, 2, 0),
    (1, 1, 1),
    (1, 1, 0),
    (1, 0, 2),
    (1, 0, 1),
    (1, 0, 0),
    (0, 1, 2),
    (0, 1, 1),
    (0, 1, 0),
    (0, 0, 3),
    (0, 0, 2),
    (0, 0, 1),
    (0, 0, 0),
];

fn mono_index(a: u8, b: u8, c: u8) -> usize {
    MONOMIALS
        .iter()
        .position(|&m| m == (a, b, c))
        .expect("monomial degree exceeds 3")
}

fn poly_mul(p: &Poly3, q: &Poly3) -> Poly3 {
    let mut out = [0.0; 20];
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        for (j, &qj) in q.iter().enumerate() {
            if qj == 0.0 {
                continue;
            }
            let (a, b) = (MONOMIALS[i], MONOMIALS[j]);
            out[mono_index(a.0 + b.0, a.1 + b.1, a.2 + b.2)] += pi * qj;
        }
    }
    out
}

fn poly_add(p: &Poly3, q: &Poly3) -> Poly3 {
    std::array::from_fn(|i| p[i] + q[i])
}

fn poly_scale(p: &Poly3, s: f64) -> Poly3 {
    p.map(|v| v * s)
}

/// Value and gradient of a cubic at `(x, y, z)`.
fn poly_eval_grad(p: &Poly3, x: f64, y: f64, z: f64) -> (f64, [f64; 3]) {
    let pw = |b: f64, e: u8| if e == 0 { 1.0 } else { b.powi(e as i32) };
    let mut v = 0.0;
    let mut g = [0.0; 3];
    for (c, &(a, b, cz)) in p.iter().zip(MONOMIALS.iter()) {
        if *c == 0.0 {
            continue;
        }
        let (px, py, pz) = (pw(x, a), pw(y, b), pw(z, cz));
        v += c * px * py * pz;
        if a > 0 {
            g[0] += c * a as f64 * pw(x, a - 1) * py * pz;
        }
        if b > 0 {
            g[1] += c * b as f64 * px * pw(y, b - 1) * pz;
        }
        if cz > 0 {
            g[2] += c * cz as f64 * px * py * pw(z, cz - 1);
        }
    }
    (v, g)
}

/// Gauss-Newton refinement of a root of the cubic constraint system.
fn polish_root(rows: &[Poly3], mut s: Vector3<f64>) -> Vector3<f64> {
    let cost = |s: &Vector3<f64>| rows.iter().map(|r| poly_eval_grad(r, s.x, s.y, s.z).0.powi(2)).sum::<f64>();
    let mut c = cost(&s);
    for _ in 0..8 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for r in rows {
            let (v, g) = poly_eval_grad(r, s.x, s.y, s.z);
            let g = Vector3::from(g);
            jtj += g * g.transpose();
            jtr += g * v;
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        let next = s - step;
        let nc = cost(&next);
        if !(nc < c) {
            break;
        }
        s = next;
        c = nc;
    }
    s
}

/// Polynomial in z with ascending coefficients.
#[derive(Debug, Clone)]
struct ZPoly(Vec<f64>);

impl ZPoly {
    fn mul(&self, o: &ZPoly) -> ZPoly {
        let mut out = vec![0.0; self.0.len() + o.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in o.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        ZPoly(out)
    }

    fn add(&self, o: &ZPoly) -> ZPoly {
        let n = self.0.len().max(o.0.len());
        ZPoly((0..n).map(|i| self.0.get(i).unwrap_or(&0.0) + o.0.get(i).unwrap_or(&0.0)).collect())
    }

    fn neg(&self) -> ZPoly {
        ZPoly(self.0.iter().map(|v| -v).collect())
    }

    fn eval(&self, z: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }

    fn deriv(&self) -> ZPoly {
        ZPoly(self.0.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect())
    }

    /// Real roots via eigenvalues of the companion matrix.
    fn real_roots(&self) -> Vec<f64> {
        let scale = self.0.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if scale == 0.0 {
            return Vec::new();
        }
        let mut c = self.0.clone();
        while c.len() > 1 && c.last().is_some_and(|v| v.abs() <= 1e-14 * scale) {
            c.pop();
        }
        let n = c.len() - 1;
        if n == 0 {
            return Vec::new();
        }
        let lead = c[n];
        let mut comp = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            comp[(i, i - 1)] = 1.0;
        }
        for i in 0..n {
            comp[(i, n - 1)] = -c[i] / lead;
        }
        let d = self.deriv();
        comp.complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() <= 1e-8 * z.re.abs().max(1.0))
            .map(|z| {
                let mut r = z.re;
                for _ in 0..4 {
                    let dv = d.eval(r);
                    if dv == 0.0 {
                        break;
                    }
                    let step = self.eval(r) / dv;
                    if !step.is_finite() || step.abs() > 1e-3 * r.abs().max(1.0) {
                        break;
                    }
                    r -= step;
                }
                r
            })
            .collect()
    }
}

fn det3_zpoly(b: &[[ZPoly; 3]; 3]) -> ZPoly {
    let minor = |r1: usize, r2: usize, c1: usize, c2: usize| b[r1][c1].mul(&b[r2][c2]).add(&b[r1][c2].mul(&b[r2][c1]).neg());
    b[0][0]
        .mul(&minor(1, 2, 1, 2))
        .add(&b[0][1].mul(&minor(1, 2, 0, 2)).neg())
        .add(&b[0][2].mul(&minor(1, 2, 0, 1)))
}

/// Candidate essential matrices consistent with five calibrated correspondences.
pub fn solve_essential_minimal(five: &[NormalizedMatch; 5]) -> Vec<EssentialMatrix> {
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for (i, m) in five.iter().enumerate() {
        let q = m.xc / m.xc.z;
        let p = m.x0 / m.x0.z;
        for j in 0..3 {
            for k in 0..3 {
                a[(i, 3 * j + k)] = q[j] * p[k];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = match svd.v_t {
        Some(v) => v,
        None => return Vec::new(),
    };
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = &svd.singular_values;
    if !(s[order[4]] > 1e-9 * s[order[0]]) {
        return Vec::new();
    }
    let basis: Vec<Matrix3<f64>> = order[5..9]
        .iter()
        .map(|&r| Matrix3::from_fn(|i, j| v_t[(r, 3 * i + j)]))
        .collect();
    let (bx, by, bz, bw) = (basis[0], basis[1], basis[2], basis[3]);

    // E entries as linear polynomials in x, y, z.
    let (ix, iy, iz, i1) = (mono_index(1, 0, 0), mono_index(0, 1, 0), mono_index(0, 0, 1), mono_index(0, 0, 0));
    let e: [[Poly3; 3]; 3] = std::array::from_fn(|r| {
        std::array::from_fn(|c| {
            let mut p = [0.0; 20];
            p[ix] = bx[(r, c)];
            p[iy] = by[(r, c)];
            p[iz] = bz[(r, c)];
            p[i1] = bw[(r, c)];
            p
        })
    });
    let mul_mat = |l: &[[Poly3; 3]; 3], r: &[[Poly3; 3]; 3], transpose_r: bool| -> [[Poly3; 3]; 3] {
        std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let mut acc = [0.0; 20];
                for k in 0..3 {
                    let rk = if transpose_r { &r[j][k] } else { &r[k][j] };
                    acc = poly_add(&acc, &poly_mul(&l[i][k], rk));
                }
                acc
            })
        })
    };
    let eet = mul_mat(&e, &e, true);
    let eete = mul_mat(&eet, &e, false);
    let trace = poly_add(&poly_add(&eet[0][0], &eet[1][1]), &eet[2][2]);

    let mut rows: Vec<Poly3> = Vec::with_capacity(10);
    let det = {
        let m = |a: usize, b: usize, c: usize, d: usize| {
            poly_add(&poly_mul(&e[a][c], &e[b][d]), &poly_scale(&poly_mul(&e[a][d], &e[b][c]), -1.0))
        };
        let t0 = poly_mul(&e[0][0], &m(1, 2, 1, 2));
        let t1 = poly_mul(&e[0][1], &m(1, 2, 0, 2));
        let t2 = poly_mul(&e[0][2], &m(1, 2, 0, 1));
        poly_add(&poly_add(&t0, &poly_scale(&t1, -1.0)), &t2)
    };
    rows.push(det);
    for i in 0..3 {
        for j in 0..3 {
            let lhs = poly_scale(&eete[i][j], 2.0);
            let rhs = poly_mul(&trace, &e[i][j]);
            rows.push(poly_add(&lhs, &poly_scale(&rhs, -1.0)));
        }
    }
    let m = SMatrix::<f64, 10, 20>::from_fn(|r, c| rows[r][c]);
    let a1 = m.fixed_view::<10, 10>(0, 0).into_owned();
    let a2 = m.fixed_view::<10, 10>(0, 10).into_owned();
    let lu = a1.lu();
    let g = match lu.solve(&a2) {
        Some(g) if g.iter().all(|v| v.is_finite()) => g,
        _ => return Vec::new(),
    };

    // Rows 4..10 of the reduced system: x²z, x², y²z, y², xyz, xy.
    let parts = |r: usize| -> [ZPoly; 3] {
        let c = |k: usize| g[(r, k - 10)];
        [
            ZPoly(vec![c(12), c(11), c(10)]),
            ZPoly(vec![c(15), c(14), c(13)]),
            ZPoly(vec![c(19), c(18), c(17), c(16)]),
        ]
    };
    let shifted = |p: &ZPoly| {
        let mut v = vec![0.0];
        v.extend(p.0.iter().map(|c| -c));
        ZPoly(v)
    };
    let brow = |hi: usize, lo: usize| -> [ZPoly; 3] {
        let (ph, pl) = (parts(hi), parts(lo));
        std::array::from_fn(|k| ph[k].add(&shifted(&pl[k])))
    };
    let b = [brow(4, 5), brow(6, 7), brow(8, 9)];
    let det_z = det3_zpoly(&b);

    let mut out: Vec<EssentialMatrix> = Vec::new();
    for z in det_z.real_roots() {
        let bz_num = Matrix3::from_fn(|r, c| b[r][c].eval(z));
        let rows_n = [bz_num.row(0).transpose(), bz_num.row(1).transpose(), bz_num.row(2).transpose()];
        let cands = [rows_n[0].cross(&rows_n[1]), rows_n[0].cross(&rows_n[2]), rows_n[1].cross(&rows_n[2])];
        let v = cands
            .iter()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .copied()
            .unwrap_or_else(Vector3::zeros);
        if v.z.abs() < 1e-14 * v.norm().max(f64::MIN_POSITIVE) || v.z == 0.0 {
            continue;
        }
        let sol = polish_root(&rows, Vector3::new(v.x / v.z, v.y / v.z, z));
        let em = EssentialMatrix::normalized(bx * sol.x + by * sol.y + bz * sol.z + bw);
        if !em.0.iter().all(|v| v.is_finite()) {
            continue;
        }
        let ok = five.iter().all(|m| em.residual(m).abs() <= 1e-8)
            && em.0.determinant().abs() <= 1e-8
            && em.trace_constraint() <= 1e-6;
        if ok && !out.iter().any(|o| (o.0 - em.0).norm() < 1e-10) {
            out.push(em);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// RANSAC

/// Outcome of robust estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub e: EssentialMatrix,
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

/// Inliers and truncated-quadratic cost: outliers contribute `thr2` each.
fn score(e: &EssentialMatrix, ms: &[NormalizedMatch], thr2: f64) -> (Vec<usize>, f64) {
    let mut inl = Vec::new();
    let mut cost = 0.0;
    for (i, m) in ms.iter().enumerate() {
        let d = e.sampson(m);
        if d <= thr2 {
            inl.push(i);
            cost += d;
        } else {
            cost += thr2;
        }
    }
    (inl, cost)
}

/// Projects a matrix onto the essential manifold (singular values σ, σ, 0).
pub fn project_to_essential(m: &Matrix3<f64>) -> EssentialMatrix {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = (svd.singular_values[idx[0]] + svd.singular_values[idx[1]]) / 2.0;
    let mut e = Matrix3::zeros();
    for &k in &idx[..2] {
        e += s * u.column(k) * v_t.row(k);
    }
    EssentialMatrix::normalized(e)
}

fn hartley(pts: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let md = pts.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if md > 0.0 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Non-minimal linear estimate on `subset`, projected to a valid essential matrix.
pub fn refine_linear(ms: &[NormalizedMatch], subset: &[usize]) -> Option<EssentialMatrix> {
    if subset.len() < 8 {
        return None;
    }
    let p: Vec<Vector3<f64>> = subset.iter().map(|&i| ms[i].x0 / ms[i].x0.z).collect();
    let q: Vec<Vector3<f64>> = subset.iter().map(|&i| ms[i].xc / ms[i].xc.z).collect();
    let (t0, tc) = (hartley(&p), hartley(&q));
    let mut a = DMatrix::<f64>::zeros(subset.len().max(9), 9);
    for (r, (pi, qi)) in p.iter().zip(&q).enumerate() {
        let (pn, qn) = (t0 * pi, tc * qi);
        for j in 0..3 {
            for k in 0..3 {
                a[(r, 3 * j + k)] = qn[j] * pn[k];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let smallest = (0..svd.singular_values.len()).min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))?;
    let en = Matrix3::from_fn(|i, j| v_t[(smallest, 3 * i + j)]);
    let en = project_to_essential(&en).0;
    let e = tc.transpose() * en * t0;
    let out = project_to_essential(&e);
    out.0.iter().all(|v| v.is_finite()).then_some(out)
}

fn adaptive_iterations(inliers: usize, total: usize, confidence: f64, cap: usize) -> usize {
    let w = inliers as f64 / total as f64;
    let pw = w.powi(5);
    if pw >= 1.0 {
        return 1;
    }
    if pw <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - pw).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Robust essential-matrix estimation with seeded sampling.
pub fn ransac_essential(ms: &[NormalizedMatch], params: &RansacParams, f: f64) -> Result<RansacResult, MvgError> {
    params.validate()?;
    if ms.len() < 5 {
        return Err(MvgError::TooFewMatches { got: ms.len() });
    }
    if !(f > 0.0) {
        return Err(MvgError::InvalidParams(format!("focal length {f} must be positive")));
    }
    let thr = params.pixel_threshold / f;
    let thr2 = thr * thr;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(EssentialMatrix, Vec<usize>, f64)> = None;
    let mut needed = params.max_iterations;
    let mut iter = 0;
    while iter < needed.min(params.max_iterations) {
        iter += 1;
        let idx = sample(&mut rng, ms.len(), 5);
        let five: [NormalizedMatch; 5] = std::array::from_fn(|k| ms[idx.index(k)]);
        for e in solve_essential_minimal(&five) {
            let (inl, err) = score(&e, ms, thr2);
            let better = match &best {
                None => true,
                Some((_, bi, be)) => err < *be || (err == *be && inl.len() > bi.len()),
            };
            if better {
                needed = adaptive_iterations(inl.len(), ms.len(), params.confidence, params.max_iterations);
                best = Some((e, inl, err));
            }
        }
    }
    let (mut e, mut inl, mut err) = best.ok_or(MvgError::EstimationFailed { best_inliers: 0 })?;
    if inl.len() < 8 {
        return Err(MvgError::EstimationFailed { best_inliers: inl.len() });
    }
    for _ in 0..3 {
        let Some(r) = refine_linear(ms, &inl) else { break };
        let (ri, rerr) = score(&r, ms, thr2);
        if rerr <= err {
            let converged = ri == inl;
            e = r;
            inl = ri;
            err = rerr;
            if converged {
                break;
            }
        } else {
            break;
        }
    }
    Ok(RansacResult { e, inliers: inl, iterations: iter })
}

// ---------------------------------------------------------------------------
// Pose and structure

/// Linear (DLT) triangulation, returned in the world frame of the cameras.
pub fn triangulate_linear(p0: &ProjectionMatrix, pc: &ProjectionMatrix, m: &NormalizedMatch) -> Result<Vector3<f64>, MvgError> {
    let ray = |p: &ProjectionMatrix, x: &Vector3<f64>| p.m().try_inverse().map(|mi| (mi * x).normalize());
    if let (Some(r0), Some(rc)) = (ray(p0, &m.x0), ray(pc, &m.xc)) {
        if r0.cross(&rc).norm() < 1e-6 && r0.dot(&rc) > 0.0 {
            return Err(MvgError::TriangulationDegenerate);
        }
    }
    let mut a = Matrix4::zeros();
    let (x0, xc) = (m.x0 / m.x0.z, m.xc / m.xc.z);
    a.set_row(0, &(x0.x * p0.0.row(2) - p0.0.row(0)));
    a.set_row(1, &(x0.y * p0.0.row(2) - p0.0.row(1)));
    a.set_row(2, &(xc.x * pc.0.row(2) - pc.0.row(0)));
    a.set_row(3, &(xc.y * pc.0.row(2) - pc.0.row(1)));
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(MvgError::TriangulationDegenerate)?;
    let k = (0..4)
        .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
        .unwrap();
    let h: Vector4<f64> = v_t.row(k).transpose();
    if h.w.abs() < 1e-12 * h.norm() {
        return Err(MvgError::TriangulationDegenerate);
    }
    Ok(h.xyz() / h.w)
}

/// The camera centre `−M⁻¹p₄`.
pub fn camera_center(p: &ProjectionMatrix) -> Result<Vector3<f64>, MvgError> {
    let mi = p.m().try_inverse().ok_or(MvgError::SingularCameraMatrix)?;
    Ok(-(mi * p.p4()))
}

/// The four `[R | t]` factorizations of an essential matrix.
pub fn pose_candidates(e: &EssentialMatrix) -> [ProjectionMatrix; 4] {
    let svd = e.0.svd(true, true);
    let (mut u, mut v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // order columns so the null direction is last
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    u = Matrix3::from_columns(&[u.column(idx[0]), u.column(idx[1]), u.column(idx[2])]);
    v_t = Matrix3::from_rows(&[v_t.row(idx[0]), v_t.row(idx[1]), v_t.row(idx[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).normalize();
    [
        ProjectionMatrix::from_rt(&r1, &t),
        ProjectionMatrix::from_rt(&r1, &-t),
        ProjectionMatrix::from_rt(&r2, &t),
        ProjectionMatrix::from_rt(&r2, &-t),
    ]
}

/// Selects the factorization that puts the most inliers in front of both cameras.
pub fn decompose_essential(e: &EssentialMatrix, inliers: &[NormalizedMatch]) -> Result<ProjectionMatrix, MvgError> {
    if inliers.is_empty() {
        return Err(MvgError::EmptyInliers);
    }
    let p0 = ProjectionMatrix::canonical();
    let mut best: Option<(usize, ProjectionMatrix)> = None;
    for pc in pose_candidates(e) {
        let count = inliers
            .iter()
            .filter(|m| match triangulate_linear(&p0, &pc, m) {
                Ok(x) => x.z > 0.0 && pc.project(&x).z > 0.0,
                Err(_) => false,
            })
            .count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, pc));
        }
    }
    let (count, pc) = best.unwrap();
    if 2 * count <= inliers.len() {
        return Err(MvgError::CheiralityFailure { best: count, total: inliers.len() });
    }
    Ok(pc)
}

/// The triangulated point whose view-0 pixel lies closest to the box centre.
pub fn pick_building_point(candidates: &[([f64; 2], Vector3<f64>)], bbox0: &BBox) -> Result<Vector3<f64>, MvgError> {
    let (cx, cy) = bbox0.center();
    candidates
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            let da = (a.0[0] - cx).hypot(a.0[1] - cy);
            let db = (b.0[0] - cx).hypot(b.0[1] - cy);
            da.total_cmp(&db).then(i.cmp(j))
        })
        .map(|(_, c)| c.1)
        .ok_or(MvgError::EmptyInliers)
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Angle between two directions, in degrees.
pub fn direction_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

// ---------------------------------------------------------------------------
// Feature matching

/// Produces putative correspondences between two views.
pub trait FeatureMatcher: Send + Sync {
    fn match_views(&self, a: &RectilinearView, b: &RectilinearView) -> Result<Vec<FeatureMatch>, MvgError>;
}

/// Harris corners, BRIEF descriptors, ratio test and mutual cross-check.
#[derive(Debug, Clone)]
pub struct BriefMatcher {
    pub max_corners: usize,
    pub ratio: f64,
    pub max_hamming: u32,
    /// Descriptor sampling scale; `None` picks `min(width, height) / 512`.
    pub patch_scale: Option<f32>,
    pub seed: u64,
    pairs: Vec<[(i32, i32); 2]>,
}

const PATCH_RADIUS: i32 = 15;
const HARRIS_K: f32 = 0.04;

impl Default for BriefMatcher {
    fn default() -> Self {
        Self::new(4000, 0.8, 0x5eed)
    }
}

#[derive(Debug, Clone, Copy)]
struct Keypoint {
    x: f64,
    y: f64,
    response: f32,
}

impl BriefMatcher {
    pub fn new(max_corners: usize, ratio: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2 * PATCH_RADIUS + 1) as f64 / 5.0).unwrap();
        let mut draw = || (normal.sample(&mut rng).round() as i32).clamp(-PATCH_RADIUS, PATCH_RADIUS);
        let pairs = (0..256).map(|_| [(draw(), draw()), (draw(), draw())]).collect();
        Self { max_corners, ratio, max_hamming: 64, patch_scale: None, seed, pairs }
    }

    fn detect(&self, g: &Plane) -> Vec<Keypoint> {
        let (w, h) = (g.w, g.h);
        let ix = g.convolve_sep(&[-0.5, 0.0, 0.5], &[0.25, 0.5, 0.25]);
        let iy = g.convolve_sep(&[0.25, 0.5, 0.25], &[-0.5, 0.0, 0.5]);
        let win = gaussian_kernel(1.5);
        let prod = |a: &Plane, b: &Plane| Plane { w, h, d: a.d.iter().zip(&b.d).map(|(x, y)| x * y).collect() };
        let sxx = prod(&ix, &ix).convolve_sep(&win, &win);
        let syy = prod(&iy, &iy).convolve_sep(&win, &win);
        let sxy = prod(&ix, &iy).convolve_sep(&win, &win);
        let resp: Vec<f32> = (0..w * h)
            .map(|i| {
                let (a, b, c) = (sxx.d[i], syy.d[i], sxy.d[i]);
                a * b - c * c - HARRIS_K * (a + b) * (a + b)
            })
            .collect();
        let rmax = resp.iter().cloned().fold(0.0f32, f32::max);
        if rmax <= 0.0 {
            return Vec::new();
        }
        let floor = rmax * 1e-3;
        let border = PATCH_RADIUS as usize + 2;
        if w <= 2 * border || h <= 2 * border {
            return Vec::new();
        }
        let at = |x: usize, y: usize| resp[y * w + x];
        let mut kps: Vec<Keypoint> = (border..h - border)
            .into_par_iter()
            .flat_map_iter(|y| {
                let at = &at;
                (border..w - border).filter_map(move |x| {
                    let r = at(x, y);
                    if r <= floor {
                        return None;
                    }
                    for dy in -2i32..=2 {
                        for dx in -2i32..=2 {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            let o = at((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                            // strict maximum, ties resolved toward the earlier raster position
                            if o > r || (o == r && (dy < 0 || (dy == 0 && dx < 0))) {
                                return None;
                            }
                        }
                    }
                    let sub = |l: f32, c: f32, rr: f32| {
                        let den = l - 2.0 * c + rr;
                        if den.abs() < 1e-12 {
                            0.0
                        } else {
                            (0.5 * (l - rr) / den).clamp(-0.5, 0.5) as f64
                        }
                    };
                    let ox = sub(at(x - 1, y), r, at(x + 1, y));
                    let oy = sub(at(x, y - 1), r, at(x, y + 1));
                    Some(Keypoint { x: x as f64 + ox, y: y as f64 + oy, response: r })
                })
            })
            .collect();
        kps.sort_by(|a, b| {
            b.response
                .total_cmp(&a.response)
                .then(a.y.total_cmp(&b.y))
                .then(a.x.total_cmp(&b.x))
        });
        kps.truncate(self.max_corners);
        kps
    }

    fn describe(&self, smooth: &Plane, kps: &[Keypoint], scale: f32) -> Vec<[u64; 4]> {
        let off = |v: i32| (v as f32 * scale).round() as i32;
        kps.par_iter()
            .map(|k| {
                let (cx, cy) = (k.x.round() as i32, k.y.round() as i32);
                let mut d = [0u64; 4];
                for (bit, pr) in self.pairs.iter().enumerate() {
                    let a = smooth.get(cx + off(pr[0].0), cy + off(pr[0].1));
                    let b = smooth.get(cx + off(pr[1].0), cy + off(pr[1].1));
                    if a < b {
                        d[bit / 64] |= 1 << (bit % 64);
                    }
                }
                d
            })
            .collect()
    }

    fn features(&self, img: &RgbImage) -> (Vec<Keypoint>, Vec<[u64; 4]>) {
        let g = Plane::from_gray(&image::imageops::grayscale(img));
        let kps = self.detect(&g);
        let scale = self.patch_scale.unwrap_or((g.w.min(g.h) as f32 / 512.0).max(1.0));
        let k = gaussian_kernel(2.0 * scale);
        let smooth = g.convolve_sep(&k, &k);
        let desc = self.describe(&smooth, &kps, scale);
        (kps, desc)
    }
}

fn hamming(a: &[u64; 4], b: &[u64; 4]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Nearest neighbour with the distance to the runner-up.
fn nearest(d: &[u64; 4], pool: &[[u64; 4]]) -> Option<(usize, u32, u32)> {
    let mut best = (usize::MAX, u32::MAX, u32::MAX);
    for (j, e) in pool.iter().enumerate() {
        let h = hamming(d, e);
        if h < best.1 {
            best = (j, h, best.1);
        } else if h < best.2 {
            best.2 = h;
        }
    }
    (best.0 != usize::MAX).then_some(best)
}

impl FeatureMatcher for BriefMatcher {
    fn match_views(&self, a: &RectilinearView, b: &RectilinearView) -> Result<Vec<FeatureMatch>, MvgError> {
        self.match_images(&a.image, &b.image)
    }
}

impl BriefMatcher {
    /// Matches in continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
    pub fn match_images(&self, a: &RgbImage, b: &RgbImage) -> Result<Vec<FeatureMatch>, MvgError> {
        if a.width() == 0 || a.height() == 0 || b.width() == 0 || b.height() == 0 {
            return Err(MvgError::InsufficientFeatures { found: 0 });
        }
        let ((ka, da), (kb, db)) = rayon::join(|| self.features(a), || self.features(b));
        let back: Vec<Option<usize>> = db.par_iter().map(|d| nearest(d, &da).map(|n| n.0)).collect();
        let out: Vec<FeatureMatch> = da
            .par_iter()
            .enumerate()
            .filter_map(|(i, d)| {
                let (j, d1, d2) = nearest(d, &db)?;
                let ratio_ok = d2 == u32::MAX || (d1 as f64) < self.ratio * d2 as f64;
                (d1 <= self.max_hamming && ratio_ok && back[j] == Some(i))
                    .then(|| FeatureMatch { pt0: [ka[i].x + 0.5, ka[i].y + 0.5], pt1: [kb[j].x + 0.5, kb[j].y + 0.5] })
            })
            .collect();
        if out.len() < 5 {
            return Err(MvgError::InsufficientFeatures { found: out.len() });
        }
        Ok(out)
    }
}

/// The default matching pipeline.
pub fn match_features(a: &RgbImage, b: &RgbImage) -> Result<Vec<FeatureMatch>, MvgError> {
    BriefMatcher::default().match_images(a, b)
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i32;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Single-channel float image with clamped borders.
struct Plane {
    w: usize,
    h: usize,
    d: Vec<f32>,
}

impl Plane {
    fn from_gray(g: &GrayImage) -> Self {
        Self { w: g.width() as usize, h: g.height() as usize, d: g.as_raw().iter().map(|&v| v as f32).collect() }
    }

    fn get(&self, x: i32, y: i32) -> f32 {
        let x = x.clamp(0, self.w as i32 - 1) as usize;
        let y = y.clamp(0, self.h as i32 - 1) as usize;
        self.d[y * self.w + x]
    }

    /// Separable correlation: `kx` along rows, then `ky` along columns.
    fn convolve_sep(&self, kx: &[f32], ky: &[f32]) -> Plane {
        let (w, h) = (self.w, self.h);
        let (rx, ry) = ((kx.len() / 2) as i32, (ky.len() / 2) as i32);
        let mut tmp = vec![0.0f32; w * h];
        tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                *o = kx.iter().enumerate().map(|(i, k)| k * self.get(x as i32 + i as i32 - rx, y as i32)).sum();
            }
        });
        let t = Plane { w, h, d: tmp };
        let mut out = vec![0.0f32; w * h];
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                *o = ky.iter().enumerate().map(|(i, k)| k * t.get(x as i32, y as i32 + i as i32 - ry)).sum();
            }
        });
        Plane { w, h, d: out }
    }
}
