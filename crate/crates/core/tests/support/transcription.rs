//! Dense, term-by-term evaluation of every closed-form covariance block, with its own
//! row-major matrix type and Gauss-Jordan inverse.

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, v: vec![0.0; r * c] }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(r: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn col(v: &[f64]) -> Self {
        Self { r: v.len(), c: 1, v: v.to_vec() }
    }

    pub fn diag(d: &[f64]) -> Self {
        Self::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { 0.0 })
    }

    pub fn t(&self) -> Self {
        Self::from_fn(self.c, self.r, |i, j| self[(j, i)])
    }

    pub fn mul(&self, o: &Self) -> Self {
        assert_eq!(self.c, o.r);
        let mut m = Self::zeros(self.r, o.c);
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self[(i, k)];
                for j in 0..o.c {
                    m[(i, j)] += a * o[(k, j)];
                }
            }
        }
        m
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::from_fn(self.r, self.c, |i, j| self[(i, j)] + o[(i, j)])
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::from_fn(self.r, self.c, |i, j| self[(i, j)] - o[(i, j)])
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::from_fn(self.r, self.c, |i, j| a * self[(i, j)])
    }

    /// Elementwise product.
    pub fn had(&self, o: &Self) -> Self {
        Self::from_fn(self.r, self.c, |i, j| self[(i, j)] * o[(i, j)])
    }

    pub fn tr(&self) -> f64 {
        (0..self.r.min(self.c)).map(|i| self[(i, i)]).sum()
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!((self.r, self.c), (1, 1));
        self.v[0]
    }

    pub fn inv(&self) -> Self {
        let n = self.r;
        let mut a = self.clone();
        let mut b = Self::eye(n);
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs())).unwrap();
            assert!(a[(piv, k)].abs() > 1e-300, "singular matrix");
            for j in 0..n {
                a.v.swap(k * n + j, piv * n + j);
                b.v.swap(k * n + j, piv * n + j);
            }
            let d = a[(k, k)];
            for j in 0..n {
                a[(k, j)] /= d;
                b[(k, j)] /= d;
            }
            for i in 0..n {
                if i != k {
                    let f = a[(i, k)];
                    if f != 0.0 {
                        for j in 0..n {
                            a[(i, j)] -= f * a[(k, j)];
                            b[(i, j)] -= f * b[(k, j)];
                        }
                    }
                }
            }
        }
        b
    }

    pub fn block(&self, r0: usize, c0: usize, r: usize, c: usize) -> Self {
        Self::from_fn(r, c, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.v[i * self.c + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.v[i * self.c + j]
    }
}

/// v 1ᵀ
fn outer_ones(v: &Mat) -> Mat {
    Mat::from_fn(v.r, v.r, |i, _| v[(i, 0)])
}

/// tr[A ∘ D ∘ B]
fn htr(a: &Mat, d: &Mat, b: &Mat) -> f64 {
    a.had(d).had(b).tr()
}

pub struct Blocks {
    pub v_s: Mat,
    pub omega_s: Mat,
    pub u_s: Mat,
    pub v_m: Mat,
    pub omega_m: Mat,
    pub v_sm: Mat,
    pub omega_sm: Mat,
    pub xi: Mat,
    pub sandwich_qsm: Mat,
    pub sandwich_improved: Mat,
}

/// Blocks at (λ, β, σ²) for dense W (n×n), X (n×p) and per-observation third and fourth moments.
pub fn blocks(w: &Mat, x: &Mat, lambda: f64, beta: &[f64], sigma2: f64, mu3: &[f64], mu4: &[f64]) -> Blocks {
    let n = w.r;
    let p = x.c;
    let q = p + 2;
    let nf = n as f64;
    let s2 = sigma2;
    let one = Mat::col(&vec![1.0; n]);
    let y3 = Mat::diag(mu3);
    let y4 = Mat::diag(&(0..n).map(|i| mu4[i] - 3.0 * s2 * s2).collect::<Vec<_>>());

    let s = Mat::eye(n).sub(&w.scale(lambda));
    let si = s.inv();
    let st = s.t();
    let sit = si.t();
    let wt = w.t();
    let pp = s.mul(&st);
    let p2 = pp.mul(&pp);
    let xb = x.mul(&Mat::col(beta));
    let wsi = w.mul(&si);
    let wsixb = wsi.mul(&xb);
    let xj = |j: usize| x.block(0, j, n, 1);
    // S Sᵀ W S⁻¹ + S Wᵀ
    let hh = pp.mul(&wsi).add(&s.mul(&wt));

    let mut vs = Mat::zeros(q, q);
    vs[(0, 0)] = 2.0 / (nf * s2.powi(2)) * st.mul(w).mul(&st).mul(w).tr()
        + 1.0 / (nf * s2.powi(2)) * s.mul(&wt).mul(w).mul(&st).tr()
        + 2.0 / (nf * s2.powi(2)) * sit.mul(&wt).mul(&s).mul(&st).mul(&s).mul(&wt).tr()
        + 2.0 / (nf * s2.powi(2)) * pp.mul(w).mul(&wt).tr()
        + 1.0 / (nf * s2.powi(2)) * sit.mul(&wt).mul(&p2).mul(w).mul(&si).tr()
        + 1.0 / (nf * s2.powi(3)) * xb.t().mul(&sit).mul(&wt).mul(&p2).mul(w).mul(&si).mul(&xb).scalar();
    let vs_bl = x.t().mul(&p2).mul(w).mul(&si).mul(&xb).scale(1.0 / (nf * s2.powi(3)));
    let vs_ls = 4.0 * st.mul(&s).mul(&st).mul(w).tr() / (nf * s2.powi(3));
    let vs_bb = x.t().mul(&p2).mul(x).scale(1.0 / (nf * s2.powi(3)));
    for j in 0..p {
        vs[(j + 1, 0)] = vs_bl[(j, 0)];
        vs[(0, j + 1)] = vs_bl[(j, 0)];
        for k in 0..p {
            vs[(j + 1, k + 1)] = vs_bb[(j, k)];
        }
    }
    vs[(0, q - 1)] = vs_ls;
    vs[(q - 1, 0)] = vs_ls;
    vs[(q - 1, q - 1)] = 2.0 * p2.tr() / (nf * s2.powi(4));

    let mut os = Mat::zeros(q, q);
    let pgxb = pp.mul(&wsixb);
    os[(0, 0)] = htr(&hh, &y4, &hh) / (nf * s2.powi(4)) + 2.0 / (nf * s2.powi(4)) * htr(&outer_ones(&pgxb), &y3, &hh);
    for j in 0..p {
        let pxj = outer_ones(&pp.mul(&xj(j)));
        let bl = htr(&pxj, &y3, &hh) / (nf * s2.powi(4));
        let bs = htr(&pxj, &y3, &pp) / (nf * s2.powi(5));
        os[(j + 1, 0)] = bl;
        os[(0, j + 1)] = bl;
        os[(j + 1, q - 1)] = bs;
        os[(q - 1, j + 1)] = bs;
    }
    let sl = htr(&pp, &y4, &hh) / (nf * s2.powi(5)) + htr(&outer_ones(&pgxb), &y3, &pp) / (nf * s2.powi(5));
    os[(q - 1, 0)] = sl;
    os[(0, q - 1)] = sl;
    os[(q - 1, q - 1)] = htr(&pp, &y4, &pp) / (nf * s2.powi(6));

    let mut us = Mat::zeros(q, q);
    us[(0, 0)] = wt.mul(w).tr() / (nf * s2)
        + 2.0 / (nf * s2) * sit.mul(&wt).mul(&s).mul(&wt).tr()
        + 1.0 / (nf * s2.powi(2)) * xb.t().mul(&sit).mul(&wt).mul(&pp).mul(w).mul(&si).mul(&xb).scalar()
        + 1.0 / (nf * s2) * sit.mul(&wt).mul(&pp).mul(w).mul(&si).tr();
    let us_bl = x.t().mul(&pp).mul(w).mul(&si).mul(&xb).scale(1.0 / (nf * s2.powi(2)));
    let us_bb = x.t().mul(&pp).mul(x).scale(1.0 / (nf * s2.powi(2)));
    let us_ls = 2.0 * s.mul(&wt).tr() / (nf * s2.powi(2));
    for j in 0..p {
        us[(j + 1, 0)] = us_bl[(j, 0)];
        us[(0, j + 1)] = us_bl[(j, 0)];
        for k in 0..p {
            us[(j + 1, k + 1)] = us_bb[(j, k)];
        }
    }
    us[(0, q - 1)] = us_ls;
    us[(q - 1, 0)] = us_ls;
    us[(q - 1, q - 1)] = pp.tr() / (nf * s2.powi(3));

    let mut vm = Mat::zeros(q, q);
    vm[(0, 0)] = (wsi.mul(&wsi).add(&sit.mul(&wt).mul(w).mul(&si))).tr() / nf
        + xb.t().mul(&sit).mul(&wt).mul(w).mul(&si).mul(&xb).scalar() / (nf * s2);
    let vm_bl = x.t().mul(&wsixb).scale(1.0 / (nf * s2));
    let vm_bb = x.t().mul(x).scale(1.0 / (nf * s2));
    let vm_sl = wsi.tr() / (nf * s2);
    for j in 0..p {
        vm[(j + 1, 0)] = vm_bl[(j, 0)];
        vm[(0, j + 1)] = vm_bl[(j, 0)];
        for k in 0..p {
            vm[(j + 1, k + 1)] = vm_bb[(j, k)];
        }
    }
    vm[(q - 1, 0)] = vm_sl;
    vm[(0, q - 1)] = vm_sl;
    vm[(q - 1, q - 1)] = 1.0 / (2.0 * s2.powi(2));

    let mut om = Mat::zeros(q, q);
    om[(0, 0)] = htr(&wsi, &y4, &wsi) / (nf * s2.powi(2)) + 2.0 / (nf * s2.powi(2)) * htr(&outer_ones(&wsixb), &y3, &wsi);
    let bs = x.t().mul(&y3).mul(&one).scale(1.0 / (2.0 * nf * s2.powi(3)));
    for j in 0..p {
        let bl = htr(&outer_ones(&xj(j)), &y3, &wsi) / (nf * s2.powi(2));
        om[(j + 1, 0)] = bl;
        om[(0, j + 1)] = bl;
        om[(j + 1, q - 1)] = bs[(j, 0)];
        om[(q - 1, j + 1)] = bs[(j, 0)];
    }
    let sl = y4.had(&wsi).tr() / (2.0 * nf * s2.powi(3)) + one.t().mul(&y3).mul(&wsixb).scalar() / (2.0 * nf * s2.powi(3));
    om[(q - 1, 0)] = sl;
    om[(0, q - 1)] = sl;
    om[(q - 1, q - 1)] = y4.tr() / (4.0 * nf * s2.powi(4));

    let mut vsm = Mat::zeros(q, q);
    vsm[(0, 0)] = 2.0 / (nf * s2) * w.mul(&st).mul(w).mul(&si).tr()
        + 1.0 / (nf * s2) * wt.mul(w).add(&sit.mul(&wt).mul(&pp).mul(w).mul(&si)).tr()
        + 1.0 / (nf * s2.powi(2)) * xb.t().mul(&sit).mul(&wt).mul(&pp).mul(w).mul(&si).mul(&xb).scalar();
    let vsm_lb = xb.t().mul(&sit).mul(&wt).mul(&pp).mul(x).scale(1.0 / (nf * s2.powi(2)));
    let vsm_bl = x.t().mul(&pp).mul(w).mul(&si).mul(&xb).scale(1.0 / (nf * s2.powi(2)));
    let vsm_bb = x.t().mul(&pp).mul(x).scale(1.0 / (nf * s2.powi(2)));
    // Same factor as the σ²λ entry.
    let vsm_ls = 2.0 * s.mul(&wt).tr() / (nf * s2.powi(2));
    for j in 0..p {
        vsm[(0, j + 1)] = vsm_lb[(0, j)];
        vsm[(j + 1, 0)] = vsm_bl[(j, 0)];
        for k in 0..p {
            vsm[(j + 1, k + 1)] = vsm_bb[(j, k)];
        }
    }
    vsm[(0, q - 1)] = vsm_ls;
    vsm[(q - 1, 0)] = 2.0 * s.mul(&wt).tr() / (nf * s2.powi(2));
    vsm[(q - 1, q - 1)] = pp.tr() / (nf * s2.powi(3));

    let mut osm = Mat::zeros(q, q);
    let pwsixb = pp.mul(&wsixb);
    osm[(0, 0)] = htr(&hh, &y4, &wsi) / (nf * s2.powi(3))
        + htr(&outer_ones(&pwsixb), &y3, &wsi) / (nf * s2.powi(3))
        + htr(&hh, &y3, &outer_ones(&wsixb)) / (nf * s2.powi(3));
    for j in 0..p {
        osm[(0, j + 1)] = htr(&hh, &y3, &outer_ones(&xj(j))) / (nf * s2.powi(3));
        osm[(j + 1, 0)] = htr(&outer_ones(&pp.mul(&xj(j))), &y3, &wsi) / (nf * s2.powi(3));
        osm[(q - 1, j + 1)] = htr(&pp, &y3, &outer_ones(&xj(j))) / (nf * s2.powi(4));
    }
    osm[(0, q - 1)] = hh.had(&y4).tr() / (2.0 * nf * s2.powi(4)) + one.t().mul(&y3).mul(&pwsixb).scalar() / (2.0 * nf * s2.powi(4));
    let bs = x.t().mul(&pp).mul(&y3).mul(&one).scale(1.0 / (2.0 * nf * s2.powi(4)));
    for j in 0..p {
        osm[(j + 1, q - 1)] = bs[(j, 0)];
    }
    osm[(q - 1, 0)] = htr(&pp, &y4, &wsi) / (nf * s2.powi(4)) + htr(&pp, &y3, &outer_ones(&wsixb)) / (nf * s2.powi(4));
    osm[(q - 1, q - 1)] = pp.had(&y4).tr() / (2.0 * nf * s2.powi(5));

    let us_inv = us.inv();
    let e1u = us_inv.block(0, 0, 1, q);
    let sub = vm.block(1, 1, q - 1, q - 1).inv();
    let c = sub.mul(&vm.block(1, 0, q - 1, 1));
    let lower_left = c.mul(&e1u).scale(-1.0);
    let mut xi = Mat::zeros(q, 2 * q);
    for k in 0..q {
        xi[(0, k)] = e1u[(0, k)];
    }
    for i in 0..q - 1 {
        for k in 0..q {
            xi[(i + 1, k)] = lower_left[(i, k)];
        }
        for k in 0..q - 1 {
            xi[(i + 1, q + 1 + k)] = sub[(i, k)];
        }
    }
    let joint = |a: &Mat, b: &Mat, d: &Mat| {
        Mat::from_fn(2 * q, 2 * q, |i, j| match (i < q, j < q) {
            (true, true) => a[(i, j)],
            (true, false) => b[(i, j - q)],
            (false, true) => b[(j, i - q)],
            (false, false) => d[(i - q, j - q)],
        })
    };
    let total = joint(&vs, &vsm, &vm).add(&joint(&os, &osm, &om));
    let sandwich_qsm = us_inv.mul(&vs.add(&os)).mul(&us_inv);
    let sandwich_improved = xi.mul(&total).mul(&xi.t());
    Blocks { v_s: vs, omega_s: os, u_s: us, v_m: vm, omega_m: om, v_sm: vsm, omega_sm: osm, xi, sandwich_qsm, sandwich_improved }
}
