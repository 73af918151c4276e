//! Structured map and vector-field models near a parabolic torus, their
//! hypothesis checks, and the averaging normalization.

use crate::error::{Error, Result};
use crate::fourier::{sd_solve_flow, sd_solve_map, FourierSeries, FrequencyVector};
use crate::jet::{compose_all, invert_tangent_identity, Jet, Substitution};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    Map,
    Flow,
}

/// Coefficients of a map `F` or vector field `X` of the form
/// `x ↦ x − a x^N + f_N + …`, `y ↦ y + x^{N−1} B y + g_N + …`,
/// `θ ↦ θ + ω + h_P + …` (maps) or the same right-hand sides without the
/// identity terms (fields).
///
/// Coefficients live on `T^{d+d'}`; for maps `d' = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelData {
    pub kind: DynamicsKind,
    pub n: usize,
    /// Effective `P` after folding `P > N` down to `N`.
    pub p: usize,
    pub p_declared: usize,
    pub freq: FrequencyVector,
    pub m: usize,
    pub order_cap: u32,
    pub a: FourierSeries,
    pub b: Vec<Vec<FourierSeries>>,
    pub f_n: Jet,
    pub g_n: Vec<Jet>,
    pub h_p: Vec<Jet>,
    pub tail_x: Jet,
    pub tail_y: Vec<Jet>,
    pub tail_theta: Vec<Jet>,
    /// Degree through which the jets are exact; `None` for polynomial models.
    pub known_degree: Option<usize>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapModel(pub ModelData);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel(pub ModelData);

macro_rules! newtype_deref {
    ($t:ty) => {
        impl Deref for $t {
            type Target = ModelData;
            fn deref(&self) -> &ModelData {
                &self.0
            }
        }
        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut ModelData {
                &mut self.0
            }
        }
    };
}

newtype_deref!(MapModel);
newtype_deref!(FlowModel);

impl MapModel {
    pub fn new(data: ModelData) -> Result<Self> {
        if data.kind != DynamicsKind::Map || !data.freq.nu.is_empty() {
            return Err(Error::Invalid("map models have no time frequencies".into()));
        }
        Ok(MapModel(data))
    }
}

impl FlowModel {
    pub fn new(data: ModelData) -> Result<Self> {
        if data.kind != DynamicsKind::Flow {
            return Err(Error::Invalid("expected a vector-field model".into()));
        }
        Ok(FlowModel(data))
    }
}

fn total(e: &[u32]) -> usize {
    e.iter().map(|&v| v as usize).sum()
}

fn x_power(nv: usize, l: u32) -> Vec<u32> {
    let mut e = vec![0; nv];
    e[0] = l;
    e
}

fn x_power_y(nv: usize, l: u32, j: usize) -> Vec<u32> {
    let mut e = x_power(nv, l);
    e[1 + j] += 1;
    e
}

impl ModelData {
    /// A model with `a = 1`, `B = I` and no other terms.
    pub fn new(kind: DynamicsKind, n: usize, p: usize, freq: FrequencyVector, m: usize, order_cap: u32) -> Self {
        let dim = freq.torus_dim();
        let d = freq.d();
        let nv = 1 + m;
        let deg = POLYNOMIAL_DEGREE.max(n + 1).max(p + 1);
        let zero = Jet::zero(nv, deg, dim, order_cap);
        let one = FourierSeries::constant(dim, order_cap, 1.0);
        let b = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { one.clone() } else { FourierSeries::zero(dim, order_cap) })
                    .collect()
            })
            .collect();
        ModelData {
            kind,
            n,
            p: p.min(n),
            p_declared: p,
            freq,
            m,
            order_cap,
            a: one,
            b,
            f_n: zero.clone(),
            g_n: vec![zero.clone(); m],
            h_p: vec![zero.clone(); d],
            tail_x: zero.clone(),
            tail_y: vec![zero.clone(); m],
            tail_theta: vec![zero; d],
            known_degree: None,
            params: Vec::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.freq.d()
    }

    pub fn torus_dim(&self) -> usize {
        self.freq.torus_dim()
    }

    pub fn nvars(&self) -> usize {
        1 + self.m
    }

    pub fn a_bar(&self) -> f64 {
        self.a.average().re
    }

    pub fn b_bar(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |i, j| self.b[i][j].average().re)
    }

    /// Copy with every Fourier coefficient truncated or padded to `order_cap`.
    pub fn with_cap(&self, order_cap: u32) -> Self {
        let jets = |v: &[Jet]| v.iter().map(|j| j.with_cap(order_cap)).collect::<Vec<_>>();
        ModelData {
            order_cap,
            a: self.a.with_cap(order_cap),
            b: self.b.iter().map(|r| r.iter().map(|s| s.with_cap(order_cap)).collect()).collect(),
            f_n: self.f_n.with_cap(order_cap),
            g_n: jets(&self.g_n),
            h_p: jets(&self.h_p),
            tail_x: self.tail_x.with_cap(order_cap),
            tail_y: jets(&self.tail_y),
            tail_theta: jets(&self.tail_theta),
            ..self.clone()
        }
    }

    /// Degree actually available when `w` is requested.
    pub fn available_degree(&self, w: usize) -> usize {
        self.known_degree.map_or(w, |k| k.min(w))
    }

    /// Components `[x, y_1..y_m, θ-deviation_1..d]` as jets in `(x, y)`.
    /// For maps the angle jets omit `θ + ω`; for fields they omit `ω`.
    pub fn full_jets(&self, w: usize) -> Vec<Jet> {
        let deg = self.available_degree(w);
        let nv = self.nvars();
        let (dim, cap) = (self.torus_dim(), self.order_cap);
        let map = self.kind == DynamicsKind::Map;
        let n = self.n as u32;
        let mut fx = Jet::zero(nv, deg, dim, cap);
        if map {
            fx = &fx + &Jet::variable(0, nv, deg, dim, cap);
        }
        fx.add_term(x_power(nv, n), &self.a.scale(-1.0));
        fx = &(&fx + &self.f_n.with_deg(deg)) + &self.tail_x.with_deg(deg);
        let mut out = vec![fx];
        for i in 0..self.m {
            let mut fy = Jet::zero(nv, deg, dim, cap);
            if map {
                fy = &fy + &Jet::variable(1 + i, nv, deg, dim, cap);
            }
            for j in 0..self.m {
                fy.add_term(x_power_y(nv, n - 1, j), &self.b[i][j]);
            }
            fy = &(&fy + &self.g_n[i].with_deg(deg)) + &self.tail_y[i].with_deg(deg);
            out.push(fy);
        }
        for i in 0..self.d() {
            out.push(&self.h_p[i].with_deg(deg) + &self.tail_theta[i].with_deg(deg));
        }
        out
    }

    /// Splits full component jets back into structured parts; `P > N` is
    /// folded to `P = N` with the degree-`P` angle terms kept in the tail.
    #[allow(clippy::too_many_arguments)]
    pub fn from_full_jets(
        kind: DynamicsKind,
        n: usize,
        p_declared: usize,
        freq: FrequencyVector,
        m: usize,
        jets: &[Jet],
        known_degree: Option<usize>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let d = freq.d();
        if jets.len() != 1 + m + d {
            return Err(Error::DimensionMismatch(format!(
                "{} component jets for m = {m}, d = {d}",
                jets.len()
            )));
        }
        let nv = 1 + m;
        let dim = freq.torus_dim();
        for j in jets {
            if j.nvars() != nv || j.dim() != dim {
                return Err(Error::DimensionMismatch("component jet shape".into()));
            }
        }
        let cap = jets[0].order_cap();
        let mut model = ModelData::new(kind, n, p_declared, freq, m, cap);
        model.known_degree = known_degree;
        model.params = params;
        let deg = jets[0].deg();
        let map = kind == DynamicsKind::Map;
        let (nn, p) = (n as u32, model.p);

        let mut fx = jets[0].clone();
        if map {
            fx = &fx - &Jet::variable(0, nv, deg, dim, cap);
        }
        model.a = fx.coeff(&x_power(nv, nn)).scale(-1.0);
        fx.set_term(x_power(nv, nn), FourierSeries::zero(dim, cap));
        model.f_n = fx.homogeneous(n);
        model.tail_x = &fx - &model.f_n;

        for i in 0..m {
            let mut fy = jets[1 + i].clone();
            if map {
                fy = &fy - &Jet::variable(1 + i, nv, deg, dim, cap);
            }
            for j in 0..m {
                let e = x_power_y(nv, nn - 1, j);
                model.b[i][j] = fy.coeff(&e);
                fy.set_term(e, FourierSeries::zero(dim, cap));
            }
            model.g_n[i] = fy.homogeneous(n);
            model.tail_y[i] = &fy - &model.g_n[i];
        }
        for i in 0..d {
            let h = &jets[1 + m + i];
            model.h_p[i] = if p == p_declared { h.homogeneous(p) } else { Jet::zero(nv, deg, dim, cap) };
            model.tail_theta[i] = h - &model.h_p[i];
        }
        Ok(model)
    }

    /// Hypothesis checks; an empty list means the model is admissible.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |code: &'static str, message: String| v.push(Violation { code, message });
        if self.n < 2 {
            push("range", format!("N = {} but N ≥ 2 is required", self.n));
        }
        if self.p_declared < 1 {
            push("range", "P ≥ 1 is required".into());
        }
        let (nv, dim, d) = (self.nvars(), self.torus_dim(), self.d());
        if self.kind == DynamicsKind::Map && !self.freq.nu.is_empty() {
            push("shape", "map models cannot have time frequencies".into());
        }
        let shapes_ok = self.a.dim() == dim
            && self.b.len() == self.m
            && self.b.iter().all(|r| r.len() == self.m && r.iter().all(|s| s.dim() == dim))
            && self.g_n.len() == self.m
            && self.tail_y.len() == self.m
            && self.h_p.len() == d
            && self.tail_theta.len() == d
            && self
                .all_jets()
                .all(|j| j.nvars() == nv && j.dim() == dim);
        if !shapes_ok {
            push("shape", "coefficient shapes do not match (m, d, d')".into());
            return v;
        }
        if self.n < 2 {
            return v;
        }
        let n = self.n;
        if !is_homogeneous(&self.f_n, n) || !self.g_n.iter().all(|g| is_homogeneous(g, n)) {
            push("structure", "f_N and g_N must be homogeneous of degree N".into());
        }
        if self.h_p.iter().any(|h| !is_homogeneous(h, self.p)) {
            push("structure", "h_P must be homogeneous of degree P".into());
        }
        if has_nonzero(&self.f_n, |e| e[1..].iter().all(|&k| k == 0)) {
            push("structure", "f_N(x,0,θ) ≠ 0".into());
        }
        if self.g_n.iter().any(|g| has_nonzero(g, |e| e[1..].iter().all(|&k| k == 0))) {
            push("structure", "g_N(x,0,θ) ≠ 0".into());
        }
        if self
            .g_n
            .iter()
            .any(|g| has_nonzero(g, |e| e[0] as usize == n - 1 && total(&e[1..]) == 1))
        {
            push("structure", "D_y g_N(x,0,θ) ≠ 0".into());
        }
        let a_bar = self.a.average();
        if !(a_bar.re > 0.0) {
            push("hypothesis", format!("hypothesis ā>0 fails: ā = {}", a_bar.re));
        }
        if a_bar.im.abs() > 1e-12 * a_bar.norm().max(1.0) {
            push("hypothesis", "ā is not real".into());
        }
        if self.m > 0 {
            let bb = self.b_bar();
            let worst = bb
                .complex_eigenvalues()
                .iter()
                .map(|z| z.re)
                .fold(f64::INFINITY, f64::min);
            if !(worst > B_SPECTRUM_FLOOR) {
                push("hypothesis", format!("hypothesis Re Spec B̄ > 0 fails: min Re = {worst:e}"));
            }
        }
        if !self.tail_x.vanishes_to(n + 1, 0.0) || !self.tail_y.iter().all(|j| j.vanishes_to(n + 1, 0.0)) {
            push("tail", "x/y tail must vanish to order N+1".into());
        }
        if !self.tail_theta.iter().all(|j| j.vanishes_to(self.p + 1, 0.0)) {
            push("tail", "angle tail must vanish to order P+1".into());
        }
        let real = self.a.is_real_symmetric(REAL_TOL)
            && self.b.iter().flatten().all(|s| s.is_real_symmetric(REAL_TOL))
            && self.all_jets().all(|j| j.is_real_symmetric(REAL_TOL));
        if !real {
            push("symmetry", "coefficients are not real-valued".into());
        }
        v
    }

    fn all_jets(&self) -> impl Iterator<Item = &Jet> {
        std::iter::once(&self.f_n)
            .chain(std::iter::once(&self.tail_x))
            .chain(&self.g_n)
            .chain(&self.tail_y)
            .chain(&self.h_p)
            .chain(&self.tail_theta)
    }

    pub fn to_file(&self) -> ModelFile {
        let entries = |j: &Jet| -> Vec<TermEntry> {
            j.iter()
                .flat_map(|(e, s)| s.iter().map(move |(k, c)| (e.clone(), k.clone(), c.re, c.im)))
                .collect()
        };
        let series = |s: &FourierSeries| -> Vec<(Vec<i32>, f64, f64)> {
            s.iter().map(|(k, c)| (k.clone(), c.re, c.im)).collect()
        };
        let jets = self.full_jets(self.known_degree.unwrap_or_else(|| self.max_degree()));
        let mut x = Jet::zero(self.nvars(), jets[0].deg(), self.torus_dim(), self.order_cap);
        x = &(&x + &self.f_n) + &self.tail_x;
        ModelFile {
            kind: self.kind,
            d: self.d(),
            d_prime: self.freq.d_prime(),
            m: self.m,
            n: self.n,
            p: self.p_declared,
            omega: self.freq.omega.clone(),
            nu: self.freq.nu.clone(),
            order_cap: self.order_cap,
            known_degree: self.known_degree,
            params: self.params.clone(),
            a: series(&self.a),
            b: self.b.iter().map(|r| r.iter().map(series).collect()).collect(),
            x: entries(&x),
            y: (0..self.m).map(|i| entries(&(&self.g_n[i] + &self.tail_y[i]))).collect(),
            theta: (0..self.d()).map(|i| entries(&(&self.h_p[i] + &self.tail_theta[i]))).collect(),
        }
    }

    fn max_degree(&self) -> usize {
        self.all_jets()
            .filter_map(|j| j.max_term_degree())
            .max()
            .unwrap_or(0)
            .max(2 * self.n)
    }

    pub fn from_file(f: &ModelFile) -> Result<Self> {
        if f.omega.len() != f.d || f.nu.len() != f.d_prime {
            return Err(Error::DimensionMismatch("frequency lengths disagree with d, d'".into()));
        }
        if f.b.len() != f.m || f.b.iter().any(|r| r.len() != f.m) || f.y.len() != f.m || f.theta.len() != f.d {
            return Err(Error::DimensionMismatch("coefficient lists disagree with m, d".into()));
        }
        let dim = f.d + f.d_prime;
        let nv = 1 + f.m;
        let cap = f.order_cap;
        let freq = FrequencyVector::new(f.omega.clone(), f.nu.clone());
        let series = |terms: &[(Vec<i32>, f64, f64)]| -> Result<FourierSeries> {
            let mut s = FourierSeries::zero(dim, cap);
            for (k, re, im) in terms {
                if k.len() != dim {
                    return Err(Error::DimensionMismatch(format!("mode {k:?} not on T^{dim}")));
                }
                s.add_term(k.clone(), num_complex::Complex64::new(*re, *im));
            }
            Ok(s)
        };
        let all_terms = f.x.iter().chain(f.y.iter().flatten()).chain(f.theta.iter().flatten());
        let top = all_terms.map(|t| total(&t.0)).max().unwrap_or(0);
        let deg = f.known_degree.unwrap_or(0).max(top).max(f.n + 1).max(f.p + 1);
        let jet = |terms: &[TermEntry]| -> Result<Jet> {
            let mut j = Jet::zero(nv, deg, dim, cap);
            for (e, k, re, im) in terms {
                if e.len() != nv || k.len() != dim {
                    return Err(Error::DimensionMismatch(format!("entry {e:?} {k:?}")));
                }
                let mut s = FourierSeries::zero(dim, cap);
                s.add_term(k.clone(), num_complex::Complex64::new(*re, *im));
                j.add_term(e.clone(), &s);
            }
            Ok(j)
        };
        let mut model = ModelData::new(f.kind, f.n, f.p, freq, f.m, cap);
        model.known_degree = f.known_degree;
        model.params = f.params.clone();
        model.a = series(&f.a)?;
        for i in 0..f.m {
            for j in 0..f.m {
                model.b[i][j] = series(&f.b[i][j])?;
            }
        }
        let x = jet(&f.x)?;
        model.f_n = x.homogeneous(f.n);
        model.tail_x = &x - &model.f_n;
        for i in 0..f.m {
            let y = jet(&f.y[i])?;
            model.g_n[i] = y.homogeneous(f.n);
            model.tail_y[i] = &y - &model.g_n[i];
        }
        for i in 0..f.d {
            let h = jet(&f.theta[i])?;
            model.h_p[i] = if model.p == f.p { h.homogeneous(model.p) } else { Jet::zero(nv, deg, dim, cap) };
            model.tail_theta[i] = &h - &model.h_p[i];
        }
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }
}

const REAL_TOL: f64 = 1e-12;
/// Truncation degree of the coefficient jets of a freshly built model.
pub const POLYNOMIAL_DEGREE: usize = 64;
pub const B_SPECTRUM_FLOOR: f64 = 1e-9;

fn is_homogeneous(j: &Jet, n: usize) -> bool {
    j.iter().all(|(e, s)| total(e) == n || s.is_zero())
}

fn has_nonzero(j: &Jet, pred: impl Fn(&[u32]) -> bool) -> bool {
    j.iter().any(|(e, s)| pred(e) && !s.is_zero())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// `(monomial exponents [l, k..], Fourier mode, re, im)`.
pub type TermEntry = (Vec<u32>, Vec<i32>, f64, f64);

/// On-disk model definition. `x`, `y` and `theta` list every term of the
/// right-hand side beyond the identity, `a x^N` and `x^{N−1} B y` parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: DynamicsKind,
    pub d: usize,
    #[serde(default)]
    pub d_prime: usize,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub omega: Vec<f64>,
    #[serde(default)]
    pub nu: Vec<f64>,
    pub order_cap: u32,
    #[serde(default)]
    pub known_degree: Option<usize>,
    #[serde(default)]
    pub params: Vec<f64>,
    pub a: Vec<(Vec<i32>, f64, f64)>,
    #[serde(default)]
    pub b: Vec<Vec<Vec<(Vec<i32>, f64, f64)>>>,
    #[serde(default)]
    pub x: Vec<TermEntry>,
    #[serde(default)]
    pub y: Vec<Vec<TermEntry>>,
    #[serde(default)]
    pub theta: Vec<Vec<TermEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    /// Put `B̄` in real Schur form and scale `y` by `diag(ε^i)`.
    pub jordanize: bool,
    pub epsilon: f64,
    pub divisor_floor: f64,
    /// Degree of the normalized jets; defaults to the model's known degree
    /// or `3N + 2` for polynomial models.
    pub degree: Option<usize>,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        NormalizeOptions {
            jordanize: false,
            epsilon: 1e-3,
            divisor_floor: crate::fourier::DEFAULT_DIVISOR_FLOOR,
            degree: None,
        }
    }
}

/// The changes of variables applied by the normalization, in the order
/// `x = ξ + c₁ ξ^N`, `y = η + ξ^{N−1} C₂ η`, then the linear map
/// `(x, y) = (μ ξ, D η)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeLog {
    pub c1: FourierSeries,
    pub c2: Vec<Vec<FourierSeries>>,
    pub mu: f64,
    pub d: Vec<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub degree: usize,
}

impl ChangeLog {
    /// `T` as jets giving old `(x, y)` in terms of new variables.
    pub fn change_jets(&self, n: usize, m: usize, dim: usize, cap: u32) -> Vec<Jet> {
        let nv = 1 + m;
        let deg = self.degree;
        let one = FourierSeries::constant(dim, cap, 1.0);
        // linear part applied first to the new variables
        let mut lin = vec![Jet::monomial(x_power(nv, 1), one.scale(self.mu), deg)];
        for i in 0..m {
            let mut j = Jet::zero(nv, deg, dim, cap);
            for k in 0..m {
                j.add_term(x_power_y(nv, 0, k), &one.scale(self.d[i][k]));
            }
            lin.push(j);
        }
        let mut nl = vec![Jet::variable(0, nv, deg, dim, cap)];
        nl[0].add_term(x_power(nv, n as u32), &self.c1);
        for i in 0..m {
            let mut j = Jet::variable(1 + i, nv, deg, dim, cap);
            for k in 0..m {
                j.add_term(x_power_y(nv, n as u32 - 1, k), &self.c2[i][k]);
            }
            nl.push(j);
        }
        let sub = Substitution {
            vars: &lin,
            theta_dev: &[],
            shift: None,
        };
        compose_all(&nl, &sub).expect("linear substitution")
    }

    pub fn is_identity(&self) -> bool {
        let m = self.d.len();
        self.c1.is_zero()
            && self.c2.iter().flatten().all(|s| s.is_zero())
            && self.mu == 1.0
            && (0..m).all(|i| (0..m).all(|j| self.d[i][j] == if i == j { 1.0 } else { 0.0 }))
    }
}

/// Averages the `x^N` and `x^{N−1} y` coefficients and scales `ā` to one.
pub fn normalize(model: &MapModel, opts: &NormalizeOptions) -> Result<(MapModel, ChangeLog)> {
    let (data, log) = normalize_impl(model, opts)?;
    Ok((MapModel(data), log))
}

/// Vector-field counterpart of [`normalize`].
pub fn normalize_flow(model: &FlowModel, opts: &NormalizeOptions) -> Result<(FlowModel, ChangeLog)> {
    let (data, log) = normalize_impl(model, opts)?;
    Ok((FlowModel(data), log))
}

fn normalize_impl(model: &ModelData, opts: &NormalizeOptions) -> Result<(ModelData, ChangeLog)> {
    let (n, m) = (model.n, model.m);
    if n < 2 {
        return Err(Error::Hypothesis("N ≥ 2 is required".into()));
    }
    let a_bar = model.a_bar();
    if !(a_bar > 0.0) {
        return Err(Error::Hypothesis(format!("ā = {a_bar} must be positive")));
    }
    let sd = |h: &FourierSeries| -> Result<FourierSeries> {
        match model.kind {
            DynamicsKind::Map => sd_solve_map(h, &model.freq, opts.divisor_floor),
            DynamicsKind::Flow => sd_solve_flow(h, &model.freq, opts.divisor_floor),
        }
    };
    let c1 = sd(&model.a.oscillatory())?.scale(-1.0);
    let mut c2 = vec![vec![FourierSeries::zero(model.torus_dim(), model.order_cap); m]; m];
    for i in 0..m {
        for j in 0..m {
            c2[i][j] = sd(&model.b[i][j].oscillatory())?;
        }
    }
    let mu = a_bar.powf(-1.0 / (n as f64 - 1.0));
    let mut dmat = DMatrix::<f64>::identity(m, m);
    let mut epsilon = None;
    if opts.jordanize && m > 0 {
        if !(opts.epsilon > 0.0) {
            return Err(Error::SingularB(format!("ε = {} must be positive", opts.epsilon)));
        }
        let schur = nalgebra::Schur::try_new(model.b_bar(), 1e-14, 10_000)
            .ok_or_else(|| Error::SingularB("real Schur iteration did not converge".into()))?;
        let (q, _) = schur.unpack();
        let scale = DMatrix::from_fn(m, m, |i, j| if i == j { opts.epsilon.powi(i as i32) } else { 0.0 });
        dmat = q * scale;
        epsilon = Some(opts.epsilon);
    }
    let degree = opts.degree.or(model.known_degree).unwrap_or(3 * n + 2);
    let log = ChangeLog {
        c1,
        c2,
        mu,
        d: (0..m).map(|i| (0..m).map(|j| dmat[(i, j)]).collect()).collect(),
        epsilon,
        degree,
    };
    let jets = conjugate(model, &log)?;
    let known = Some(model.known_degree.map_or(degree, |k| k.min(degree)));
    let out = ModelData::from_full_jets(
        model.kind,
        n,
        model.p_declared,
        model.freq.clone(),
        m,
        &jets,
        known,
        model.params.clone(),
    )?;
    Ok((out, log))
}

/// The transformed components `T^{-1} ∘ F ∘ T` (maps) or `DT^{-1}(X∘T − ∂_θT·θ̇)`
/// (fields) for the change recorded in `log`.
pub fn conjugate(model: &ModelData, log: &ChangeLog) -> Result<Vec<Jet>> {
    let (m, d) = (model.m, model.d());
    let nv = 1 + m;
    let (dim, cap) = (model.torus_dim(), model.order_cap);
    let deg = log.degree;
    let f = model.full_jets(deg);
    let t = log.change_jets(model.n, m, dim, cap);
    let sub = Substitution {
        vars: &t,
        theta_dev: &[],
        shift: None,
    };
    let g = compose_all(&f, &sub)?;
    match model.kind {
        DynamicsKind::Map => {
            let (tinv, _) = invert_linear_then_tangent(&t, log)?;
            let sub = Substitution {
                vars: &g[..nv],
                theta_dev: &g[nv..],
                shift: Some(&model.freq.omega),
            };
            let mut out = compose_all(&tinv, &sub)?;
            out.extend_from_slice(&g[nv..]);
            Ok(out)
        }
        DynamicsKind::Flow => {
            let full = model.freq.full();
            let mut rhs = Vec::with_capacity(nv);
            for (i, ti) in t.iter().enumerate() {
                let mut r = g[i].clone();
                for a in 0..dim {
                    let mut speed = Jet::constant(nv, deg, FourierSeries::constant(dim, cap, full[a]));
                    if a < d {
                        speed = &speed + &g[nv + a];
                    }
                    r = &r - &(&ti.derivative_theta(a) * &speed);
                }
                rhs.push(r);
            }
            let dt: Vec<Vec<Jet>> = t.iter().map(|ti| (0..nv).map(|k| ti.derivative_var(k)).collect()).collect();
            let mut out = solve_jet_linear(&dt, &rhs, log)?;
            out.extend_from_slice(&g[nv..]);
            Ok(out)
        }
    }
}

fn linear_inverse(log: &ChangeLog) -> Result<DMatrix<f64>> {
    let m = log.d.len();
    let d = DMatrix::from_fn(m, m, |i, j| log.d[i][j]);
    let dinv = d
        .try_inverse()
        .ok_or_else(|| Error::SingularB("change of y variables is singular".into()))?;
    let mut a = DMatrix::zeros(m + 1, m + 1);
    a[(0, 0)] = 1.0 / log.mu;
    a.view_mut((1, 1), (m, m)).copy_from(&dinv);
    Ok(a)
}

fn apply_matrix(a: &DMatrix<f64>, jets: &[Jet]) -> Vec<Jet> {
    (0..a.nrows())
        .map(|i| {
            let mut acc = jets[0].scale(0.0);
            for (k, j) in jets.iter().enumerate() {
                if a[(i, k)] != 0.0 {
                    acc = &acc + &j.scale(a[(i, k)]);
                }
            }
            acc
        })
        .collect()
}

/// `T^{-1}` for `T = N ∘ L` with `L` linear and `N` tangent to the identity.
fn invert_linear_then_tangent(t: &[Jet], log: &ChangeLog) -> Result<(Vec<Jet>, Vec<Jet>)> {
    let ainv = linear_inverse(log)?;
    let (nl_inv, dev) = {
        // N = T ∘ L^{-1}
        let nv = t.len();
        let (deg, dim, cap) = (t[0].deg(), t[0].dim(), t[0].order_cap());
        let vars: Vec<Jet> = (0..nv).map(|i| Jet::variable(i, nv, deg, dim, cap)).collect();
        let linv = apply_matrix(&ainv, &vars);
        let sub = Substitution {
            vars: &linv,
            theta_dev: &[],
            shift: None,
        };
        let nmap = compose_all(t, &sub)?;
        invert_tangent_identity(&nmap, &[])?
    };
    Ok((apply_matrix(&ainv, &nl_inv), dev))
}

/// Solves `DT · v = rhs` for jets, where `DT = A (I + M)` with `M` of
/// positive degree, by a truncated Neumann series.
fn solve_jet_linear(dt: &[Vec<Jet>], rhs: &[Jet], log: &ChangeLog) -> Result<Vec<Jet>> {
    let ainv = linear_inverse(log)?;
    let nv = rhs.len();
    let deg = rhs[0].deg();
    // M = A^{-1} DT − I
    let mut mmat: Vec<Vec<Jet>> = vec![Vec::with_capacity(nv); nv];
    for i in 0..nv {
        for k in 0..nv {
            let col: Vec<Jet> = (0..nv).map(|r| dt[r][k].clone()).collect();
            let mut e = apply_matrix(&ainv, &col)[i].clone();
            if i == k {
                e = &e - &Jet::constant(nv, deg, FourierSeries::constant(e.dim(), e.order_cap(), 1.0));
            }
            mmat[i].push(e);
        }
    }
    let base = apply_matrix(&ainv, rhs);
    let mut term = base.clone();
    let mut sum = base;
    for _ in 0..deg {
        let next: Vec<Jet> = (0..nv)
            .map(|i| {
                let mut acc = term[0].scale(0.0);
                for k in 0..nv {
                    acc = &acc - &(&mmat[i][k] * &term[k]);
                }
                acc
            })
            .collect();
        if next.iter().all(|j| j.is_zero()) {
            break;
        }
        for i in 0..nv {
            sum[i] = &sum[i] + &next[i];
        }
        term = next;
    }
    Ok(sum)
}

/// The polynomial dynamics `R` (maps) or `Y` (fields) on the parameter side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedDynamics {
    pub kind: DynamicsKind,
    pub n: usize,
    pub a_bar: f64,
    /// Coefficient of `x^{2N−1}`, fixed at step `j = N`.
    pub b: Option<f64>,
    /// Constant angle corrections `x^l ↦ r_l` (only when `P < N`).
    pub theta_terms: BTreeMap<usize, Vec<f64>>,
    pub omega: Vec<f64>,
    /// Further prescribed `x^l` coefficients of `R_x` or `Y_x`.
    #[serde(default)]
    pub extra_x: BTreeMap<usize, f64>,
}

pub type ReducedMap = ReducedDynamics;
pub type ReducedField = ReducedDynamics;

impl ReducedDynamics {
    pub fn new(kind: DynamicsKind, n: usize, a_bar: f64, omega: Vec<f64>) -> Self {
        ReducedDynamics {
            kind,
            n,
            a_bar,
            b: None,
            theta_terms: BTreeMap::new(),
            omega,
            extra_x: BTreeMap::new(),
        }
    }

    /// Coefficients of `R_x` (including the identity for maps) or `Y_x`.
    pub fn x_polynomial(&self) -> BTreeMap<usize, f64> {
        let mut c = BTreeMap::new();
        if self.kind == DynamicsKind::Map {
            c.insert(1, 1.0);
        }
        *c.entry(self.n).or_insert(0.0) -= self.a_bar;
        if let Some(b) = self.b {
            *c.entry(2 * self.n - 1).or_insert(0.0) += b;
        }
        for (&l, &v) in &self.extra_x {
            *c.entry(l).or_insert(0.0) += v;
        }
        c.retain(|_, v| *v != 0.0);
        c
    }

    pub fn eval_x(&self, x: f64) -> f64 {
        self.x_polynomial().iter().map(|(&l, &v)| v * x.powi(l as i32)).sum()
    }

    /// One step of `R_x` at a complex point, shared by every consumer of
    /// reduced iterates.
    pub fn step_complex(&self, x: num_complex::Complex64) -> num_complex::Complex64 {
        self.x_polynomial().iter().map(|(&l, &v)| x.powi(l as i32) * v).sum()
    }

    /// Angle correction `Σ_l r_l x^l` at `x`.
    pub fn eval_theta(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.omega.len()];
        for (&l, v) in &self.theta_terms {
            for (o, r) in out.iter_mut().zip(v) {
                *o += r * x.powi(l as i32);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    fn base(n: usize, p: usize) -> ModelData {
        let mut model = ModelData::new(DynamicsKind::Map, n, p, FrequencyVector::new(vec![golden()], vec![]), 1, 16);
        model.b[0][0] = FourierSeries::constant(1, 16, 0.5);
        model
    }

    #[test]
    fn valid_model_has_no_violations() {
        let mut model = base(2, 2);
        model.a = &model.a + &FourierSeries::cos_mode(1, 16, &[1], 0.5);
        let mut f = Jet::zero(2, 3, 1, 16);
        f.add_term(vec![1, 1], &FourierSeries::constant(1, 16, 0.2));
        model.f_n = f;
        assert!(model.validate().is_empty(), "{:?}", model.validate());
    }

    #[test]
    fn negative_average_is_flagged() {
        let mut model = base(2, 2);
        model.a = FourierSeries::constant(1, 16, -1.0);
        let v = model.validate();
        assert!(v.iter().any(|v| v.message.contains("hypothesis ā>0")), "{v:?}");
    }

    #[test]
    fn dy_g_is_flagged() {
        let mut model = base(3, 2);
        model.g_n[0].add_term(vec![2, 1], &FourierSeries::constant(1, 16, 1.0));
        let v = model.validate();
        assert!(v.iter().any(|v| v.message.contains("D_y g_N(x,0,θ) ≠ 0")), "{v:?}");
    }

    #[test]
    fn weak_b_spectrum_is_flagged() {
        let mut model = base(2, 2);
        model.b[0][0] = FourierSeries::constant(1, 16, 1e-10);
        assert!(model.validate().iter().any(|v| v.message.contains("Spec")));
    }

    #[test]
    fn large_p_folds_to_n() {
        let mut model = base(2, 5);
        model.tail_theta[0].add_term(vec![5, 0], &FourierSeries::constant(1, 16, 1.0));
        assert_eq!(model.p, 2);
        assert!(model.validate().is_empty());
        let jets = model.full_jets(6);
        let back = ModelData::from_full_jets(DynamicsKind::Map, 2, 5, model.freq.clone(), 1, &jets, None, vec![]).unwrap();
        assert_eq!(back.p, 2);
        assert!(back.h_p[0].is_zero());
        assert_eq!(back.tail_theta[0].coeff(&[5, 0]).average().re, 1.0);
    }

    #[test]
    fn full_jets_roundtrip() {
        let mut model = base(2, 1);
        model.a = &model.a + &FourierSeries::sin_mode(1, 16, &[2], 0.3);
        model.h_p[0].add_term(vec![1, 0], &FourierSeries::cos_mode(1, 16, &[1], 0.1));
        model.tail_x.add_term(vec![3, 0], &FourierSeries::constant(1, 16, 0.7));
        let jets = model.full_jets(3);
        let back = ModelData::from_full_jets(DynamicsKind::Map, 2, 1, model.freq.clone(), 1, &jets, None, vec![]).unwrap();
        assert_eq!(back.a, model.a);
        assert_eq!(back.b, model.b);
        assert_eq!(back.h_p[0], model.h_p[0].with_deg(3));
        assert_eq!(back.tail_x.coeff(&[3, 0]), model.tail_x.coeff(&[3, 0]));
    }

    #[test]
    fn file_roundtrip() {
        let mut model = base(2, 2);
        model.a = &model.a + &FourierSeries::cos_mode(1, 16, &[1], 0.25);
        model.f_n.add_term(vec![1, 1], &FourierSeries::constant(1, 16, 0.2));
        model.tail_y[0].add_term(vec![2, 1], &FourierSeries::sin_mode(1, 16, &[1], 0.1));
        let text = serde_json::to_string(&model.to_file()).unwrap();
        let back = ModelData::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.full_jets(5), model.full_jets(5));
    }

    #[test]
    fn constant_model_normalizes_to_itself() {
        let model = MapModel::new(base(2, 2)).unwrap();
        let (out, log) = normalize(&model, &NormalizeOptions::default()).unwrap();
        assert!(log.is_identity());
        assert_eq!(out.full_jets(8), model.full_jets(8));
    }

    #[test]
    fn averaging_removes_oscillation() {
        let mut data = base(2, 2);
        data.a = &FourierSeries::constant(1, 16, 1.0) + &FourierSeries::cos_mode(1, 16, &[1], 0.5);
        let model = MapModel::new(data).unwrap();
        let (out, log) = normalize(&model, &NormalizeOptions::default()).unwrap();
        assert!((out.a.average().re - 1.0).abs() < 1e-14);
        assert!(out.a.oscillatory().max_abs() < 1e-13);
        assert_eq!(log.mu, 1.0);
        let res = &(&log.c1 - &log.c1.rotate(&[golden()])) - &model.a.oscillatory();
        let worst = (0..256)
            .map(|i| res.evaluate(&[i as f64 / 256.0]).norm())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12);
        assert!(out.validate().is_empty(), "{:?}", out.validate());
    }

    #[test]
    fn mu_is_inverse_average_for_n_two() {
        let mut data = base(2, 2);
        data.a = FourierSeries::constant(1, 16, 2.5);
        let (_, log) = normalize(&MapModel::new(data).unwrap(), &NormalizeOptions::default()).unwrap();
        assert_eq!(log.mu, 1.0 / 2.5);
    }

    #[test]
    fn normalization_is_a_conjugation() {
        let mut data = base(2, 2);
        data.a = &FourierSeries::constant(1, 16, 1.3) + &FourierSeries::cos_mode(1, 16, &[1], 0.4);
        data.b[0][0] = &FourierSeries::constant(1, 16, 0.8) + &FourierSeries::sin_mode(1, 16, &[1], 0.3);
        data.f_n.add_term(vec![1, 1], &FourierSeries::cos_mode(1, 16, &[2], 0.2));
        data.h_p[0].add_term(vec![2, 0], &FourierSeries::constant(1, 16, 0.1));
        let model = MapModel::new(data).unwrap();
        let opts = NormalizeOptions {
            degree: Some(6),
            ..Default::default()
        };
        let (out, log) = normalize(&model, &opts).unwrap();
        // F ∘ T = T ∘ F' with T's angle argument advanced by F'_θ
        let t = log.change_jets(2, 1, 1, 16);
        let f = model.full_jets(6);
        let lhs = compose_all(&f, &Substitution { vars: &t, theta_dev: &[], shift: None }).unwrap();
        let fp = out.full_jets(6);
        let rhs = compose_all(&t, &Substitution { vars: &fp[..2], theta_dev: &fp[2..], shift: Some(&[golden()]) }).unwrap();
        for i in 0..2 {
            assert!((&lhs[i] - &rhs[i]).max_abs() < 1e-10, "component {i}");
        }
        assert!((&lhs[2] - &fp[2]).max_abs() < 1e-10);
        assert!((out.a.average().re - 1.0).abs() < 1e-13);
        assert!(out.b[0][0].oscillatory().max_abs() < 1e-12);
    }

    #[test]
    fn flow_normalization_single_mode() {
        let freq = FrequencyVector::new(vec![golden()], vec![2f64.sqrt()]);
        let mut data = ModelData::new(DynamicsKind::Flow, 2, 2, freq.clone(), 1, 16);
        data.a = &FourierSeries::constant(2, 16, 1.0) + &FourierSeries::cos_mode(2, 16, &[1, 1], 0.3);
        let model = FlowModel::new(data).unwrap();
        let (out, log) = normalize_flow(&model, &NormalizeOptions { degree: Some(5), ..Default::default() }).unwrap();
        let res = &crate::fourier::flow_derivative(&log.c1, &freq) + &model.a.oscillatory();
        assert!(res.max_abs() <= 1e-12);
        assert_eq!(log.c1.len(), 2);
        assert!(out.a.oscillatory().max_abs() < 1e-12);
        assert!((out.a_bar() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn flow_resonance_is_reported() {
        let freq = FrequencyVector::new(vec![1.0], vec![1.0]);
        let mut data = ModelData::new(DynamicsKind::Flow, 2, 2, freq, 1, 16);
        data.a = &FourierSeries::constant(2, 16, 1.0) + &FourierSeries::cos_mode(2, 16, &[1, -1], 0.3);
        let r = normalize_flow(&FlowModel::new(data).unwrap(), &NormalizeOptions::default());
        assert!(matches!(r, Err(Error::ResonantMode { .. })));
    }

    #[test]
    fn autonomous_constant_flow_is_unchanged() {
        let mut data = ModelData::new(DynamicsKind::Flow, 3, 3, FrequencyVector::new(vec![1.0], vec![]), 1, 8);
        data.b[0][0] = FourierSeries::constant(1, 8, 2.0);
        let model = FlowModel::new(data).unwrap();
        let (out, log) = normalize_flow(&model, &NormalizeOptions::default()).unwrap();
        assert!(log.is_identity());
        assert_eq!(out.full_jets(11), model.full_jets(11));
    }

    #[test]
    fn schur_form_and_scaling() {
        let mut data = ModelData::new(DynamicsKind::Map, 2, 2, FrequencyVector::new(vec![golden()], vec![]), 2, 8);
        data.b[0][0] = FourierSeries::constant(1, 8, 1.0);
        data.b[0][1] = FourierSeries::constant(1, 8, 0.5);
        data.b[1][0] = FourierSeries::constant(1, 8, 0.2);
        data.b[1][1] = FourierSeries::constant(1, 8, 2.0);
        let model = MapModel::new(data).unwrap();
        let opts = NormalizeOptions { jordanize: true, degree: Some(4), ..Default::default() };
        let (out, _) = normalize(&model, &opts).unwrap();
        let bb = out.b_bar();
        assert!(bb[(1, 0)].abs() < 1e-10);
        assert!(bb[(0, 1)].abs() < 1e-2);
        let bad = NormalizeOptions { jordanize: true, epsilon: 0.0, ..Default::default() };
        assert!(matches!(normalize(&model, &bad), Err(Error::SingularB(_))));
    }
}
