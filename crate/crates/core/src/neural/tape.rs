//! Scalar reverse-mode tape. Every node stores its local partials, so the
//! reverse sweep is a single pass in creation order.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    vals: Vec<f64>,
    start: Vec<usize>,
    parent: Vec<usize>,
    weight: Vec<f64>,
    nonsmooth: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// First non-differentiable evaluation recorded, if any.
    pub fn nonsmooth(&self) -> Option<&str> {
        self.nonsmooth.as_deref()
    }

    fn push(&mut self, v: f64, parents: &[(Var, f64)]) -> Var {
        self.start.push(self.parent.len());
        for (p, w) in parents {
            self.parent.push(p.0);
            self.weight.push(*w);
        }
        self.vals.push(v);
        Var(self.vals.len() - 1)
    }

    fn flag(&mut self, what: &str) {
        if self.nonsmooth.is_none() {
            self.nonsmooth = Some(what.to_string());
        }
    }

    /// An independent variable.
    pub fn var(&mut self, v: f64) -> Var {
        self.push(v, &[])
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.push(v, &[])
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, &[(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        if y == 0.0 {
            self.flag("division by zero");
        }
        self.push(x / y, &[(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, &[(a, -1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = c * self.value(a);
        self.push(v, &[(a, c)])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, &[(a, 1.0)])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x * x, &[(a, 2.0 * x)])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let h = self.value(a).tanh();
        self.push(h, &[(a, 1.0 - h * h)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(e, &[(a, e)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x <= 0.0 {
            self.flag("log of a non-positive value");
        }
        self.push(x.ln(), &[(a, 1.0 / x)])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x <= 0.0 {
            self.flag("sqrt at or below zero");
        }
        let s = x.sqrt();
        self.push(s, &[(a, 0.5 / s)])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x == 0.0 {
            self.flag("abs at zero");
        }
        self.push(x.abs(), &[(a, x.signum())])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|x| self.value(*x)).sum();
        let parents: Vec<(Var, f64)> = xs.iter().map(|x| (*x, 1.0)).collect();
        self.push(v, &parents)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// `Σ a_i b_i` as one node.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        let mut v = 0.0;
        let mut parents = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            let (vx, vy) = (self.value(*x), self.value(*y));
            v += vx * vy;
            parents.push((*x, vy));
            parents.push((*y, vx));
        }
        self.push(v, &parents)
    }

    /// `Σ w_i a_i + c` with constant weights.
    pub fn linear(&mut self, a: &[Var], w: &[f64], c: f64) -> Var {
        let mut v = 0.0;
        for (x, wi) in a.iter().zip(w) {
            v += wi * self.value(*x);
        }
        let parents: Vec<(Var, f64)> = a.iter().zip(w).map(|(x, wi)| (*x, *wi)).collect();
        self.push(v + c, &parents)
    }

    /// Adjoints `∂out/∂node` for every node.
    pub fn gradient(&self, out: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.vals.len()];
        adj[out.0] = 1.0;
        for node in (0..=out.0).rev() {
            let g = adj[node];
            if g == 0.0 {
                continue;
            }
            let end = self.start.get(node + 1).copied().unwrap_or(self.parent.len());
            for e in self.start[node]..end {
                adj[self.parent[e]] += g * self.weight[e];
            }
        }
        adj
    }
}
