//! Shared test support: a double-double complex oracle for block products.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strip_spectra::channels::perturbation_bound;
use strip_spectra::linalg::{self, c, CMat};
use strip_spectra::schur::SchurStepper;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Dd {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Dd::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        Dd::from(q1).add(Dd::from(q2)).add(Dd::from(q3))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cdd {
    pub re: Dd,
    pub im: Dd,
}

impl Cdd {
    pub const ZERO: Cdd = Cdd {
        re: Dd::ZERO,
        im: Dd::ZERO,
    };

    pub fn from(z: num_complex::Complex64) -> Cdd {
        Cdd {
            re: Dd::from(z.re),
            im: Dd::from(z.im),
        }
    }

    pub fn add(self, o: Cdd) -> Cdd {
        Cdd {
            re: self.re.add(o.re),
            im: self.im.add(o.im),
        }
    }

    pub fn sub(self, o: Cdd) -> Cdd {
        Cdd {
            re: self.re.sub(o.re),
            im: self.im.sub(o.im),
        }
    }

    pub fn mul(self, o: Cdd) -> Cdd {
        Cdd {
            re: self.re.mul(o.re).sub(self.im.mul(o.im)),
            im: self.re.mul(o.im).add(self.im.mul(o.re)),
        }
    }

    pub fn div(self, o: Cdd) -> Cdd {
        let den = o.re.mul(o.re).add(o.im.mul(o.im));
        let num = self.mul(Cdd {
            re: o.re,
            im: o.im.neg(),
        });
        Cdd {
            re: num.re.div(den),
            im: num.im.div(den),
        }
    }

    pub fn abs_approx(self) -> f64 {
        self.re.to_f64().hypot(self.im.to_f64())
    }
}

/// Dense row-major matrix of double-double complex numbers.
#[derive(Debug, Clone)]
pub struct DdMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Cdd>,
}

impl DdMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Cdd::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Cdd::from(c(1.0, 0.0));
        }
        m
    }

    pub fn from_cmat(m: &CMat) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.data[i * m.ncols() + j] = Cdd::from(m[(i, j)]);
            }
        }
        out
    }

    pub fn to_cmat(&self) -> CMat {
        CMat::from_fn(self.rows, self.cols, |i, j| {
            let z = self.get(i, j);
            c(z.re.to_f64(), z.im.to_f64())
        })
    }

    pub fn get(&self, i: usize, j: usize) -> Cdd {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Cdd) {
        self.data[i * self.cols + j] = v;
    }

    pub fn mul(&self, o: &DdMat) -> DdMat {
        let mut out = DdMat::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for j in 0..o.cols {
                let mut acc = Cdd::ZERO;
                for k in 0..self.cols {
                    acc = acc.add(self.get(i, k).mul(o.get(k, j)));
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn sub(&self, o: &DdMat) -> DdMat {
        let data = self
            .data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| a.sub(*b))
            .collect();
        DdMat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> DdMat {
        let mut out = DdMat::zeros(nr, nc);
        for i in 0..nr {
            for j in 0..nc {
                out.set(i, j, self.get(r0 + i, c0 + j));
            }
        }
        out
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> DdMat {
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = DdMat::identity(n);
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| {
                    a.get(x, col)
                        .abs_approx()
                        .partial_cmp(&a.get(y, col).abs_approx())
                        .unwrap()
                })
                .unwrap();
            for j in 0..n {
                let (t, u) = (a.get(col, j), a.get(piv, j));
                a.set(col, j, u);
                a.set(piv, j, t);
                let (t, u) = (inv.get(col, j), inv.get(piv, j));
                inv.set(col, j, u);
                inv.set(piv, j, t);
            }
            let p = a.get(col, col);
            for j in 0..n {
                a.set(col, j, a.get(col, j).div(p));
                inv.set(col, j, inv.get(col, j).div(p));
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a.get(r, col);
                for j in 0..n {
                    a.set(r, j, a.get(r, j).sub(f.mul(a.get(col, j))));
                    inv.set(r, j, inv.get(r, j).sub(f.mul(inv.get(col, j))));
                }
            }
        }
        inv
    }
}

/// Blocks `(X, Z, D^{-1} C)` of the product `prod` split at `l0`, in double-double.
pub fn schur_blocks(prod: &DdMat, l0: usize) -> (CMat, CMat, CMat) {
    let l1 = prod.rows - l0;
    let a = prod.block(0, 0, l0, l0);
    let b = prod.block(0, l0, l0, l1);
    let cc = prod.block(l0, 0, l1, l0);
    let d = prod.block(l0, l0, l1, l1);
    if l1 == 0 {
        return (a.to_cmat(), CMat::zeros(l0, 0), CMat::zeros(0, l0));
    }
    let dinv = d.inverse();
    let z = b.mul(&dinv);
    let dinv_c = dinv.mul(&cc);
    let x = a.sub(&z.mul(&cc));
    (x.to_cmat(), z.to_cmat(), dinv_c.to_cmat())
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> CMat {
    let m = CMat::from_fn(n, n, |_, _| {
        c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let s = linalg::op_norm(&m);
    m * c(norm / s, 0.0)
}

pub struct Instance {
    pub stepper: SchurStepper,
    pub t: CMat,
    pub ws: Vec<CMat>,
}

pub fn instance(seed: u64, l_e: usize, l_h: usize, steps: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap: f64 = rng.gen_range(0.1..0.3);
    let mut diag = Vec::new();
    let thetas: Vec<f64> = (0..l_e).map(|_| rng.gen_range(0.1..3.0)).collect();
    diag.extend(thetas.iter().map(|&t| c(0.0, t).exp()));
    diag.extend(thetas.iter().map(|&t| c(0.0, -t).exp()));
    let gammas: Vec<_> = (0..l_h)
        .map(|_| {
            let r = (2.0 * gap).exp() * rng.gen_range(1.0..1.2);
            c(0.0, rng.gen_range(0.0..std::f64::consts::TAU)).exp() * r
        })
        .collect();
    diag.extend(gammas.iter().map(|g| 1.0 / g));
    diag.extend(gammas.iter().copied());
    let l0 = 2 * l_e + l_h;
    let t = linalg::diag(&diag);
    let stepper = SchurStepper::new(linalg::diag(&diag[..l0]), linalg::diag(&gammas), gap).unwrap();
    let n = l0 + l_h;
    let ws = (0..steps)
        .map(|_| {
            let frac = rng.gen_range(0.0..0.95);
            random_matrix(&mut rng, n, frac * perturbation_bound(gap))
        })
        .collect();
    Instance { stepper, t, ws }
}

/// Worst relative errors of `(X, Z, D^{-1} C)` against the double-double product.
pub fn check_against_product(inst: &Instance) -> (f64, f64, f64) {
    let l0 = inst.stepper.l0();
    let l1 = inst.stepper.l1();
    let mut state = inst.stepper.init();
    let mut prod = DdMat::identity(l0 + l1);
    let mut worst = (0.0_f64, 0.0_f64, 0.0_f64);
    let rel = |got: &CMat, want: &CMat| {
        let scale = linalg::op_norm(want);
        let err = linalg::op_norm(&(got - want));
        if scale > 0.0 {
            err / scale
        } else {
            err
        }
    };
    for w in &inst.ws {
        state = inst.stepper.step(&state, w).unwrap();
        prod = DdMat::from_cmat(&(&inst.t + w)).mul(&prod);
        let (x, z, dinv_c) = schur_blocks(&prod, l0);
        worst.0 = worst.0.max(rel(&state.x_true(), &x));
        if l1 > 0 {
            worst.1 = worst.1.max(rel(&state.z, &z));
            worst.2 = worst.2.max(rel(&state.dinv_c, &dinv_c));
            assert!(state.z_norm() <= 1.0 + 1e-12);
            let decay = ((2.0 * inst.stepper.gap).exp() + inst.stepper.gap.exp()) / 2.0;
            assert!(state.dinv_log_norm() <= -(state.n as f64) * decay.ln() + 1e-9);
        }
    }
    worst
}
