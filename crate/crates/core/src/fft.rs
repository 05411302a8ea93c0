//! Dealiased pseudo-spectral products.
//!
//! Modes with `|k_i| <= K` are placed on a physical grid of `P >= 3K + 1` points
//! per axis, so every quadratic product is resolved without aliasing on the
//! retained modes (zero padding, the 3/2 form of the 2/3 rule). Transforms skip
//! the lines that are known to be zero on the way in, or not needed on the way out.
//!
//! Two real fields share one complex transform: the inverse of `Û + iV̂` is
//! `u + iv` when `Û` and `V̂` are Hermitian.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::field::{project_mode, ModeVector, SpectralGrid, VelocityField};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Smallest 5-smooth integer `>= 3 kmax + 1`.
pub fn padded_size(kmax: usize) -> usize {
    let mut p = 3 * kmax + 1;
    loop {
        let mut m = p;
        for f in [2, 3, 5] {
            while m % f == 0 {
                m /= f;
            }
        }
        if m == 1 {
            return p;
        }
        p += 1;
    }
}

/// Scratch space and plans for one lattice size. Not shareable across threads;
/// use one per worker (see [`WorkspacePool`]).
pub struct ConvolutionWorkspace {
    grid: Arc<SpectralGrid>,
    p: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    band: Vec<usize>,
    pos: Vec<usize>,
    neg: Vec<usize>,
    bufs: Vec<Vec<Complex64>>,
    batch: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl ConvolutionWorkspace {
    pub fn new(grid: &Arc<SpectralGrid>) -> Self {
        let kmax = grid.kmax();
        let p = padded_size(kmax);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(p);
        let inv = planner.plan_fft_inverse(p);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        let wrap = |c: i32| c.rem_euclid(p as i32) as usize;
        let flat = |k: [i32; 3]| (wrap(k[0]) * p + wrap(k[1])) * p + wrap(k[2]);
        let pos = grid.modes().iter().map(|m| flat(m.k)).collect();
        let neg = grid
            .modes()
            .iter()
            .map(|m| flat([-m.k[0], -m.k[1], -m.k[2]]))
            .collect();
        let band = (0..=kmax).chain(p - kmax..p).collect();
        ConvolutionWorkspace {
            grid: grid.clone(),
            p,
            fwd,
            inv,
            band,
            pos,
            neg,
            bufs: (0..8).map(|_| vec![ZERO; p * p * p]).collect(),
            batch: vec![ZERO; p * p],
            scratch: vec![ZERO; scratch_len],
        }
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    /// Physical grid points per axis.
    pub fn padded_points(&self) -> usize {
        self.p
    }

    /// Spacing of the dealiasing grid, `L/P`.
    pub fn grid_spacing(&self) -> f64 {
        self.grid.box_l() / self.p as f64
    }

    fn fill(
        &mut self,
        slot: usize,
        re: (&VelocityField, usize),
        im: Option<(&VelocityField, usize)>,
    ) {
        let buf = &mut self.bufs[slot];
        buf.fill(ZERO);
        for (j, a) in re.0.coeffs().iter().enumerate() {
            let va = a[re.1];
            let vb = im.map_or(ZERO, |(f, c)| f.coeffs()[j][c]);
            buf[self.pos[j]] = va + I * vb;
            buf[self.neg[j]] = va.conj() + I * vb.conj();
        }
    }

    fn inverse(&mut self, slot: usize) {
        let p = self.p;
        let buf = &mut self.bufs[slot];
        // last axis: only lines whose first two indices are in the band carry data
        for &i0 in &self.band {
            for &i1 in &self.band {
                let start = (i0 * p + i1) * p;
                self.inv
                    .process_with_scratch(&mut buf[start..start + p], &mut self.scratch);
            }
        }
        // middle axis: planes with i0 in the band
        for &i0 in &self.band {
            for i2 in 0..p {
                for i1 in 0..p {
                    self.batch[i2 * p + i1] = buf[(i0 * p + i1) * p + i2];
                }
            }
            self.inv
                .process_with_scratch(&mut self.batch, &mut self.scratch);
            for i2 in 0..p {
                for i1 in 0..p {
                    buf[(i0 * p + i1) * p + i2] = self.batch[i2 * p + i1];
                }
            }
        }
        // first axis: everything
        for i1 in 0..p {
            for i2 in 0..p {
                for i0 in 0..p {
                    self.batch[i2 * p + i0] = buf[(i0 * p + i1) * p + i2];
                }
            }
            self.inv
                .process_with_scratch(&mut self.batch, &mut self.scratch);
            for i2 in 0..p {
                for i0 in 0..p {
                    buf[(i0 * p + i1) * p + i2] = self.batch[i2 * p + i0];
                }
            }
        }
    }

    /// Forward transform, valid only at band indices on every axis.
    fn forward(&mut self, slot: usize) {
        let p = self.p;
        let nb = self.band.len();
        let buf = &mut self.bufs[slot];
        self.fwd.process_with_scratch(buf, &mut self.scratch);
        let batch = &mut self.batch[..nb * p];
        for i0 in 0..p {
            for (b, &i2) in self.band.iter().enumerate() {
                for i1 in 0..p {
                    batch[b * p + i1] = buf[(i0 * p + i1) * p + i2];
                }
            }
            self.fwd.process_with_scratch(batch, &mut self.scratch);
            for (b, &i2) in self.band.iter().enumerate() {
                for i1 in 0..p {
                    buf[(i0 * p + i1) * p + i2] = batch[b * p + i1];
                }
            }
        }
        for &i1 in &self.band {
            for (b, &i2) in self.band.iter().enumerate() {
                for i0 in 0..p {
                    batch[b * p + i0] = buf[(i0 * p + i1) * p + i2];
                }
            }
            self.fwd.process_with_scratch(batch, &mut self.scratch);
            for (b, &i2) in self.band.iter().enumerate() {
                for i0 in 0..p {
                    buf[(i0 * p + i1) * p + i2] = batch[b * p + i0];
                }
            }
        }
    }

    /// Splits a forward-transformed packed slot into the two real fields' coefficients at mode `j`.
    #[inline]
    fn unpack(&self, slot: usize, j: usize, scale: f64) -> (Complex64, Complex64) {
        let z = self.bufs[slot][self.pos[j]] * scale;
        let zm = self.bufs[slot][self.neg[j]].conj() * scale;
        ((z + zm) * 0.5, (z - zm) * Complex64::new(0.0, -0.5))
    }

    /// Truncated, Leray-projected `Σ_j ∂_j T_{ji}` from transformed products.
    fn divergence_of_products(
        &self,
        products: impl Fn(&Self, usize) -> [[Complex64; 3]; 3],
    ) -> VelocityField {
        let coeffs: Vec<ModeVector> = self
            .grid
            .modes()
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let t = products(self, j);
                let mut out = [ZERO; 3];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = I * (m.kphys[0] * t[0][i] + m.kphys[1] * t[1][i] + m.kphys[2] * t[2][i]);
                }
                project_mode(m.k, out)
            })
            .collect();
        VelocityField::from_parts_unchecked(self.grid.clone(), coeffs)
    }

    /// `B(u, v) = P (u·∇) v`, computed as `P ∇·(u ⊗ v)` (exact for divergence-free `u`).
    pub fn bilinear(&mut self, u: &VelocityField, v: &VelocityField) -> Result<VelocityField> {
        self.grid.check_same(u.grid())?;
        self.grid.check_same(v.grid())?;
        self.fill(0, (u, 0), Some((u, 1)));
        self.fill(1, (u, 2), Some((v, 0)));
        self.fill(2, (v, 1), Some((v, 2)));
        for s in 0..3 {
            self.inverse(s);
        }
        let n = self.p.pow(3);
        {
            let (src, dst) = self.bufs.split_at_mut(3);
            for x in 0..n {
                let uu = [src[0][x].re, src[0][x].im, src[1][x].re];
                let vv = [src[1][x].im, src[2][x].re, src[2][x].im];
                dst[0][x] = Complex64::new(uu[0] * vv[0], uu[0] * vv[1]);
                dst[1][x] = Complex64::new(uu[0] * vv[2], uu[1] * vv[0]);
                dst[2][x] = Complex64::new(uu[1] * vv[1], uu[1] * vv[2]);
                dst[3][x] = Complex64::new(uu[2] * vv[0], uu[2] * vv[1]);
                dst[4][x] = Complex64::new(uu[2] * vv[2], 0.0);
            }
        }
        for s in 3..8 {
            self.forward(s);
        }
        let scale = 1.0 / n as f64;
        Ok(self.divergence_of_products(|ws, j| {
            let (t00, t01) = ws.unpack(3, j, scale);
            let (t02, t10) = ws.unpack(4, j, scale);
            let (t11, t12) = ws.unpack(5, j, scale);
            let (t20, t21) = ws.unpack(6, j, scale);
            let (t22, _) = ws.unpack(7, j, scale);
            [[t00, t01, t02], [t10, t11, t12], [t20, t21, t22]]
        }))
    }

    /// `B(u, u)` together with the largest pointwise speed `max_x |u(x)|`.
    pub fn advect_self(&mut self, u: &VelocityField) -> Result<(VelocityField, f64)> {
        self.grid.check_same(u.grid())?;
        self.fill(0, (u, 0), Some((u, 1)));
        self.fill(1, (u, 2), None);
        self.inverse(0);
        self.inverse(1);
        let n = self.p.pow(3);
        let mut vmax2: f64 = 0.0;
        {
            let (src, dst) = self.bufs.split_at_mut(3);
            for x in 0..n {
                let uu = [src[0][x].re, src[0][x].im, src[1][x].re];
                vmax2 = vmax2.max(uu[0] * uu[0] + uu[1] * uu[1] + uu[2] * uu[2]);
                dst[0][x] = Complex64::new(uu[0] * uu[0], uu[0] * uu[1]);
                dst[1][x] = Complex64::new(uu[0] * uu[2], uu[1] * uu[1]);
                dst[2][x] = Complex64::new(uu[1] * uu[2], uu[2] * uu[2]);
            }
        }
        for s in 3..6 {
            self.forward(s);
        }
        let scale = 1.0 / n as f64;
        let b = self.divergence_of_products(|ws, j| {
            let (t00, t01) = ws.unpack(3, j, scale);
            let (t02, t11) = ws.unpack(4, j, scale);
            let (t12, t22) = ws.unpack(5, j, scale);
            [[t00, t01, t02], [t01, t11, t12], [t02, t12, t22]]
        });
        Ok((b, vmax2.sqrt()))
    }

    /// `max_x |u(x)|` on the dealiasing grid.
    pub fn max_speed(&mut self, u: &VelocityField) -> Result<f64> {
        self.grid.check_same(u.grid())?;
        self.fill(0, (u, 0), Some((u, 1)));
        self.fill(1, (u, 2), None);
        self.inverse(0);
        self.inverse(1);
        let (a, b) = (&self.bufs[0], &self.bufs[1]);
        let m = a
            .iter()
            .zip(b)
            .map(|(x, y)| x.norm_sqr() + y.re * y.re)
            .fold(0.0, f64::max);
        Ok(m.sqrt())
    }

    /// Physical values of component `c` on the dealiasing grid (row-major `i0, i1, i2`).
    pub fn to_physical(&mut self, u: &VelocityField, c: usize) -> Result<Vec<f64>> {
        self.grid.check_same(u.grid())?;
        self.fill(0, (u, c), None);
        self.inverse(0);
        Ok(self.bufs[0].iter().map(|z| z.re).collect())
    }
}

thread_local! {
    static WORKSPACES: RefCell<HashMap<(usize, u64), ConvolutionWorkspace>> = RefCell::new(HashMap::new());
}

/// Runs `f` with this thread's cached workspace for `grid`.
pub fn with_workspace<R>(
    grid: &Arc<SpectralGrid>,
    f: impl FnOnce(&mut ConvolutionWorkspace) -> R,
) -> R {
    WORKSPACES.with(|cell| {
        let mut map = cell.borrow_mut();
        let ws = map
            .entry((grid.n(), grid.box_l().to_bits()))
            .or_insert_with(|| ConvolutionWorkspace::new(grid));
        f(ws)
    })
}

/// A pool of workspaces for explicitly managed concurrent evaluation.
pub struct WorkspacePool {
    grid: Arc<SpectralGrid>,
    free: Mutex<Vec<ConvolutionWorkspace>>,
}

impl WorkspacePool {
    pub fn new(grid: &Arc<SpectralGrid>) -> Self {
        WorkspacePool {
            grid: grid.clone(),
            free: Mutex::new(Vec::new()),
        }
    }

    /// Checks out a workspace (allocating one if none is free), runs `f`, and returns it.
    pub fn run<R>(&self, f: impl FnOnce(&mut ConvolutionWorkspace) -> R) -> R {
        let mut ws = self
            .free
            .lock()
            .unwrap()
            .pop()
            .unwrap_or_else(|| ConvolutionWorkspace::new(&self.grid));
        let out = f(&mut ws);
        self.free.lock().unwrap().push(ws);
        out
    }

    pub fn idle(&self) -> usize {
        self.free.lock().unwrap().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{random_field, NormKind};

    #[test]
    fn padded_sizes() {
        assert_eq!(padded_size(2), 8);
        assert_eq!(padded_size(4), 15);
        assert_eq!(padded_size(8), 25);
        assert_eq!(padded_size(16), 50);
    }

    #[test]
    fn physical_values_match_direct_sum() {
        let g = SpectralGrid::unit(4).unwrap();
        let u = random_field(&g, 1.0, NormKind::H, 11, 0.0).unwrap();
        let mut ws = ConvolutionWorkspace::new(&g);
        let p = ws.padded_points();
        let vals = ws.to_physical(&u, 1).unwrap();
        for &(i0, i1, i2) in &[(0usize, 0usize, 0usize), (1, 2, 3), (p - 1, 4, 2)] {
            let x = [i0, i1, i2].map(|i| i as f64 * g.box_l() / p as f64);
            let mut direct = 0.0;
            for m in g.modes() {
                let ph = m.kphys[0] * x[0] + m.kphys[1] * x[1] + m.kphys[2] * x[2];
                let e = Complex64::new(ph.cos(), ph.sin());
                direct += 2.0 * (u.mode(m.k).unwrap()[1] * e).re;
            }
            let got = vals[(i0 * p + i1) * p + i2];
            assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
        }
    }

    #[test]
    fn self_advection_matches_general_form() {
        let g = SpectralGrid::unit(6).unwrap();
        let u = random_field(&g, 1.0, NormKind::H, 2, 1.0).unwrap();
        let mut ws = ConvolutionWorkspace::new(&g);
        let b1 = ws.bilinear(&u, &u).unwrap();
        let (b2, _) = ws.advect_self(&u).unwrap();
        let d = crate::field::norm_h(&b1.sub(&b2).unwrap());
        assert!(d < 1e-13 * crate::field::norm_h(&b1));
    }

    #[test]
    fn pool_reuses_workspaces() {
        let g = SpectralGrid::unit(4).unwrap();
        let pool = WorkspacePool::new(&g);
        let u = random_field(&g, 1.0, NormKind::H, 1, 1.0).unwrap();
        let a = pool.run(|ws| ws.max_speed(&u).unwrap());
        let b = pool.run(|ws| ws.max_speed(&u).unwrap());
        assert_eq!(a, b);
        assert_eq!(pool.idle(), 1);
    }
}
