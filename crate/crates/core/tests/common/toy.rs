use hetgrow::hessian::LayerTrace;
use hetgrow::tensor::{gelu, gelu_grad};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `x → W2·gelu(W1·x + b1) + b2` with mean cross-entropy, gradients written
/// out by hand.
#[derive(Clone)]
pub struct Toy {
    pub d: usize,
    pub h: usize,
    pub c: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

pub struct Sample {
    pub z: Vec<f64>,
    pub p: Vec<f64>,
}

impl Toy {
    pub fn random(rng: &mut ChaCha8Rng, d: usize, h: usize, c: usize, n: usize) -> Self {
        let mut u = |k: usize, r: f64| -> Vec<f64> { (0..k).map(|_| rng.random_range(-r..r)).collect() };
        let (w1, b1, w2, b2) = (u(h * d, 1.0), u(h, 0.5), u(c * h, 1.0), u(c, 0.5));
        let x = (0..n).map(|_| u(d, 1.5)).collect();
        let y = (0..n).map(|i| i % c).collect();
        Self { d, h, c, w1, b1, w2, b2, x, y }
    }

    pub fn sample(&self, n: usize) -> Sample {
        let x = &self.x[n];
        let z: Vec<f64> = (0..self.h)
            .map(|j| self.b1[j] + (0..self.d).map(|k| self.w1[j * self.d + k] * x[k]).sum::<f64>())
            .collect();
        let logits: Vec<f64> = (0..self.c)
            .map(|o| self.b2[o] + (0..self.h).map(|j| self.w2[o * self.h + j] * gelu(z[j])).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        Sample {
            z,
            p: e.into_iter().map(|v| v / s).collect(),
        }
    }

    pub fn loss(&self) -> f64 {
        let n = self.x.len();
        (0..n).map(|i| -self.sample(i).p[self.y[i]].ln()).sum::<f64>() / n as f64
    }

    /// `∂L_n/∂a_j` for one sample (not divided by the sample count).
    pub fn act_grad(&self, n: usize, s: &Sample, j: usize) -> f64 {
        (0..self.c)
            .map(|o| self.w2[o * self.h + j] * (s.p[o] - if o == self.y[n] { 1.0 } else { 0.0 }))
            .sum()
    }

    pub fn row_grad(&self, j: usize) -> Vec<f64> {
        let n = self.x.len();
        let mut g = vec![0.0; self.d];
        for i in 0..n {
            let s = self.sample(i);
            let dz = self.act_grad(i, &s, j) * gelu_grad(s.z[j]) / n as f64;
            for k in 0..self.d {
                g[k] += dz * self.x[i][k];
            }
        }
        g
    }

    pub fn with_row(&self, j: usize, w: &[f64]) -> Self {
        let mut t = self.clone();
        t.w1[j * self.d..(j + 1) * self.d].copy_from_slice(w);
        t
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.w1[j * self.d..(j + 1) * self.d].to_vec()
    }

    /// Gauss–Newton part `(1/N) Σ (vᵀ(diag p − ppᵀ)v)·gelu'(z)²·xxᵀ`, `v = W2[:, j]`.
    pub fn gauss_newton(&self, j: usize) -> Vec<f64> {
        let (n, d) = (self.x.len(), self.d);
        let mut out = vec![0.0; d * d];
        for i in 0..n {
            let s = self.sample(i);
            let v: Vec<f64> = (0..self.c).map(|o| self.w2[o * self.h + j]).collect();
            let pv: f64 = s.p.iter().zip(&v).map(|(p, v)| p * v).sum();
            let curv: f64 = s.p.iter().zip(&v).map(|(p, v)| p * v * v).sum::<f64>() - pv * pv;
            let c = curv * gelu_grad(s.z[j]).powi(2) / n as f64;
            for a in 0..d {
                for b in 0..d {
                    out[a * d + b] += c * self.x[i][a] * self.x[i][b];
                }
            }
        }
        out
    }

    pub fn trace(&self) -> LayerTrace {
        let n = self.x.len();
        let (mut x, mut z, mut g) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let s = self.sample(i);
            x.extend(&self.x[i]);
            g.extend((0..self.h).map(|j| self.act_grad(i, &s, j)));
            z.extend(s.z);
        }
        LayerTrace::new(self.d, self.h, x, z, g, n).unwrap()
    }

    /// Replaces neuron `j` by two half-weight copies offset by `±ε·u`.
    pub fn split(&self, j: usize, u: &[f64], eps: f64) -> Self {
        let (d, h) = (self.d, self.h);
        let mut t = Toy { h: h + 1, ..self.clone() };
        let row = self.row(j);
        t.w1[j * d..(j + 1) * d].iter_mut().zip(u).for_each(|(w, u)| *w += eps * u);
        t.w1.extend(row.iter().zip(u).map(|(w, u)| w - eps * u));
        t.b1.push(self.b1[j]);
        t.w2 = (0..self.c)
            .flat_map(|o| {
                let half = 0.5 * self.w2[o * h + j];
                (0..=h).map(move |k| if k == j || k == h { half } else { 0.0 }).collect::<Vec<_>>()
            })
            .collect();
        for o in 0..self.c {
            for k in 0..h {
                if k != j {
                    t.w2[o * (h + 1) + k] = self.w2[o * h + k];
                }
            }
        }
        t
    }
}

pub fn frob(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}
