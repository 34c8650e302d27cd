//! Scalar reverse-mode automatic differentiation on a flat tape.
//!
//! The differentiable rendering pipeline is written once, generic over a
//! context [`Cx`]: with [`EvalCx`] the value type is plain `f64` and nothing
//! is recorded (inference path); with [`Tape`] the value type is a node id
//! and every operation appends its partials, so one reverse sweep yields
//! exact gradients of a scalar loss with respect to any recorded leaf.
//!
//! The tape stores nodes in topological order in flat arrays (values, edge
//! offsets, parent ids, partials); that keeps allocation churn low and the
//! backward pass a tight reverse loop. Non-differentiable points (|x| at 0,
//! sqrt at 0, max(0,.) at the kink, norms of the zero vector) use the zero
//! subgradient so gradients never go NaN.

/// Node id on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Context abstraction over "just compute" and "compute and record".
pub trait Cx {
    type V: Copy + std::fmt::Debug;

    /// Constant (zero-gradient) value.
    fn k(&mut self, c: f64) -> Self::V;
    /// Current numeric value.
    fn val(&self, a: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    /// `a * c` with constant `c`.
    fn scale(&mut self, a: Self::V, c: f64) -> Self::V;
    /// `a + c` with constant `c`.
    fn add_k(&mut self, a: Self::V, c: f64) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn sqrt(&mut self, a: Self::V) -> Self::V;
    fn abs(&mut self, a: Self::V) -> Self::V;
    /// `max(0, a)`; zero subgradient at the kink.
    fn max0(&mut self, a: Self::V) -> Self::V;
    /// `sqrt(re^2 + im^2)`; zero partials at the origin.
    fn hypot(&mut self, re: Self::V, im: Self::V) -> Self::V;
    fn atan2(&mut self, y: Self::V, x: Self::V) -> Self::V;
    /// Wrap to `(-pi, pi]`; derivative 1 away from the seam.
    fn wrap_pi(&mut self, a: Self::V) -> Self::V;
    /// `sum_i coeffs[i] * terms[i]` with constant coefficients.
    fn wsum(&mut self, terms: &[Self::V], coeffs: &[f64]) -> Self::V;
    fn dot(&mut self, a: &[Self::V], b: &[Self::V]) -> Self::V;
    fn sum(&mut self, v: &[Self::V]) -> Self::V;
    /// Euclidean norm of the vector; zero partials at the zero vector.
    fn l2_norm(&mut self, v: &[Self::V]) -> Self::V;
}

/// Plain-evaluation context: values are `f64`, gradients are not tracked.
#[derive(Debug, Default, Clone, Copy)]
pub struct EvalCx;

impl Cx for EvalCx {
    type V = f64;

    fn k(&mut self, c: f64) -> f64 {
        c
    }
    fn val(&self, a: f64) -> f64 {
        a
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn scale(&mut self, a: f64, c: f64) -> f64 {
        a * c
    }
    fn add_k(&mut self, a: f64, c: f64) -> f64 {
        a + c
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }
    fn abs(&mut self, a: f64) -> f64 {
        a.abs()
    }
    fn max0(&mut self, a: f64) -> f64 {
        a.max(0.0)
    }
    fn hypot(&mut self, re: f64, im: f64) -> f64 {
        (re * re + im * im).sqrt()
    }
    fn atan2(&mut self, y: f64, x: f64) -> f64 {
        y.atan2(x)
    }
    fn wrap_pi(&mut self, a: f64) -> f64 {
        crate::signal::wrap_angle(a)
    }
    fn wsum(&mut self, terms: &[f64], coeffs: &[f64]) -> f64 {
        terms.iter().zip(coeffs).map(|(t, c)| t * c).sum()
    }
    fn dot(&mut self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn sum(&mut self, v: &[f64]) -> f64 {
        v.iter().sum()
    }
    fn l2_norm(&mut self, v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Recording context. Also usable directly: `leaf` introduces inputs,
/// `backward` returns adjoints for every node.
#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<f64>,
    // CSR-style edge list: node i's parent edges live in
    // edge_parent/edge_partial[starts[i]..starts[i+1]].
    starts: Vec<u32>,
    edge_parent: Vec<u32>,
    edge_partial: Vec<f64>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            vals: Vec::new(),
            starts: vec![0],
            edge_parent: Vec::new(),
            edge_partial: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn clear(&mut self) {
        self.vals.clear();
        self.starts.clear();
        self.starts.push(0);
        self.edge_parent.clear();
        self.edge_partial.clear();
    }

    /// Input node; its adjoint is read off after `backward`.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, &[])
    }

    fn push(&mut self, value: f64, edges: &[(Var, f64)]) -> Var {
        let id = self.vals.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.vals.push(value);
        for &(p, w) in edges {
            self.edge_parent.push(p.0);
            self.edge_partial.push(w);
        }
        self.starts.push(self.edge_parent.len() as u32);
        Var(id as u32)
    }

    /// Reverse sweep from `root` (seeded with adjoint 1); returns the
    /// adjoint of every node, indexable by `Var` via [`Tape::adjoint_of`].
    pub fn backward(&self, root: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.vals.len()];
        adj[root.0 as usize] = 1.0;
        for i in (0..self.vals.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (self.starts[i] as usize, self.starts[i + 1] as usize);
            for j in s..e {
                adj[self.edge_parent[j] as usize] += a * self.edge_partial[j];
            }
        }
        adj
    }

    pub fn adjoint_of(adjoints: &[f64], v: Var) -> f64 {
        adjoints[v.0 as usize]
    }
}

impl Cx for Tape {
    type V = Var;

    fn k(&mut self, c: f64) -> Var {
        self.push(c, &[])
    }
    fn val(&self, a: Var) -> f64 {
        self.vals[a.0 as usize]
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.push(v, &[(a, 1.0), (b, 1.0)])
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.push(v, &[(a, 1.0), (b, -1.0)])
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        self.push(va * vb, &[(a, vb), (b, va)])
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        let v = va / vb;
        self.push(v, &[(a, 1.0 / vb), (b, -va / (vb * vb))])
    }
    fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a);
        self.push(v, &[(a, -1.0)])
    }
    fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) * c;
        self.push(v, &[(a, c)])
    }
    fn add_k(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a) + c;
        self.push(v, &[(a, 1.0)])
    }
    fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).exp();
        self.push(v, &[(a, v)])
    }
    fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).sqrt();
        let dw = if v > 0.0 { 0.5 / v } else { 0.0 };
        self.push(v, &[(a, dw)])
    }
    fn abs(&mut self, a: Var) -> Var {
        let va = self.val(a);
        let dw = if va > 0.0 {
            1.0
        } else if va < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.push(va.abs(), &[(a, dw)])
    }
    fn max0(&mut self, a: Var) -> Var {
        let va = self.val(a);
        let dw = if va > 0.0 { 1.0 } else { 0.0 };
        self.push(va.max(0.0), &[(a, dw)])
    }
    fn hypot(&mut self, re: Var, im: Var) -> Var {
        let (r, i) = (self.val(re), self.val(im));
        let v = (r * r + i * i).sqrt();
        if v > 0.0 {
            self.push(v, &[(re, r / v), (im, i / v)])
        } else {
            self.push(0.0, &[(re, 0.0), (im, 0.0)])
        }
    }
    fn atan2(&mut self, y: Var, x: Var) -> Var {
        let (vy, vx) = (self.val(y), self.val(x));
        let v = vy.atan2(vx);
        let den = vx * vx + vy * vy;
        if den > 0.0 {
            self.push(v, &[(y, vx / den), (x, -vy / den)])
        } else {
            self.push(v, &[(y, 0.0), (x, 0.0)])
        }
    }
    fn wrap_pi(&mut self, a: Var) -> Var {
        let v = crate::signal::wrap_angle(self.val(a));
        self.push(v, &[(a, 1.0)])
    }
    fn wsum(&mut self, terms: &[Var], coeffs: &[f64]) -> Var {
        debug_assert_eq!(terms.len(), coeffs.len());
        let v: f64 = terms.iter().zip(coeffs).map(|(t, c)| self.val(*t) * c).sum();
        let id = self.vals.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.vals.push(v);
        for (t, &c) in terms.iter().zip(coeffs) {
            self.edge_parent.push(t.0);
            self.edge_partial.push(c);
        }
        self.starts.push(self.edge_parent.len() as u32);
        Var(id as u32)
    }
    fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let v: f64 = a.iter().zip(b).map(|(x, y)| self.val(*x) * self.val(*y)).sum();
        let id = self.vals.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.vals.push(v);
        for (x, y) in a.iter().zip(b) {
            let (vx, vy) = (self.vals[x.0 as usize], self.vals[y.0 as usize]);
            self.edge_parent.push(x.0);
            self.edge_partial.push(vy);
            self.edge_parent.push(y.0);
            self.edge_partial.push(vx);
        }
        self.starts.push(self.edge_parent.len() as u32);
        Var(id as u32)
    }
    fn sum(&mut self, v: &[Var]) -> Var {
        let total: f64 = v.iter().map(|x| self.val(*x)).sum();
        let id = self.vals.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.vals.push(total);
        for x in v {
            self.edge_parent.push(x.0);
            self.edge_partial.push(1.0);
        }
        self.starts.push(self.edge_parent.len() as u32);
        Var(id as u32)
    }
    fn l2_norm(&mut self, v: &[Var]) -> Var {
        let n: f64 = v.iter().map(|x| self.val(*x).powi(2)).sum::<f64>().sqrt();
        let id = self.vals.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.vals.push(n);
        for x in v {
            let p = if n > 0.0 { self.vals[x.0 as usize] / n } else { 0.0 };
            self.edge_parent.push(x.0);
            self.edge_partial.push(p);
        }
        self.starts.push(self.edge_parent.len() as u32);
        Var(id as u32)
    }
}
