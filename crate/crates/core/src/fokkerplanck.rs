//! Eulerian transport of the particle-position distribution.
//!
//! The density obeys the pure-drift equation `dp/dt = -div(u p)` and is
//! advanced with a conservative first-order upwind finite-volume scheme on
//! the periodic grid. Values are cell masses (pdf times `h^2`), so every
//! snapshot sums to one.

use std::path::Path;

use crate::autodiff::kernels::{self, Readout};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{DriftError, Result};
use crate::field::VelocityField;
use crate::grid::GridSpec;
use crate::io::{self, Reader, Writer};
use crate::lagrangian::Point;

pub const DENSITY_MAGIC: &[u8; 4] = b"DPDF";

/// Largest Courant number `vmax * dt / h` allowed per substep.
pub const MAX_COURANT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// `(K+1, ny, nx)` cell masses.
    pub p: Vec<f64>,
}

impl DensityGrid {
    pub fn slice(&self, t: usize) -> &[f64] {
        let n = self.spec.cells();
        &self.p[t * n..(t + 1) * n]
    }

    pub fn snapshots(&self) -> usize {
        self.p.len() / self.spec.cells()
    }

    /// Circular-mean position of every snapshot.
    pub fn track(&self) -> Result<Vec<Point>> {
        (0..self.snapshots())
            .map(|t| expected_position(&self.spec, self.slice(t)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(DENSITY_MAGIC);
        w.grid(&self.spec);
        w.f64s(&self.p);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, DENSITY_MAGIC, "density grid")?;
        let spec = r.grid()?;
        let p = r.f64s((spec.k_steps + 1) * spec.cells())?;
        r.expect_end()?;
        Ok(DensityGrid { spec, p })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_all(path)?)
    }

    /// CSV with header `t,row,col,mass`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_raster_csv(path, &self.spec, &self.p, "mass")
    }
}

/// Initial `(ny, nx)` mass map for a particle at `r0`.
///
/// `sigma_km == 0` splits unit mass bilinearly over the four nearest cell
/// centers; otherwise a periodic Gaussian is sampled at cell centers and
/// renormalized.
pub fn init_density(spec: &GridSpec, r0: Point, sigma_km: f64) -> Result<Vec<f64>> {
    if !(sigma_km >= 0.0) || !(r0.0.is_finite() && r0.1.is_finite()) {
        return Err(DriftError::InvalidArgument(format!(
            "init_density needs finite r0 and sigma >= 0 (sigma = {sigma_km})"
        )));
    }
    let mut p = vec![0.0; spec.cells()];
    if sigma_km == 0.0 {
        for (row, col, w) in spec.bilinear_stencil(r0) {
            p[row * spec.nx + col] += w;
        }
        return Ok(p);
    }
    let inv = 1.0 / (2.0 * sigma_km * sigma_km);
    for row in 0..spec.ny {
        for col in 0..spec.nx {
            let d = spec.distance(r0, spec.cell_center(row, col));
            p[row * spec.nx + col] = (-d * d * inv).exp();
        }
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        // Narrow kernel that underflows everywhere: fall back to the point mass.
        return init_density(spec, r0, 0.0);
    }
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Number of equal substeps per snapshot interval.
///
/// The step respects `vmax * dt / h <= 0.5`, and additionally keeps the total
/// outflow coefficient of every cell at most one so the scheme stays
/// positivity-preserving for divergent velocity patterns.
pub fn substeps_for(spec: &GridSpec, u: &[f64], v: &[f64]) -> usize {
    let plane = spec.cells();
    let mut vmax = 0.0f64;
    let mut outflow = 0.0f64;
    for (us, vs) in u.chunks(plane).zip(v.chunks(plane)) {
        for (a, b) in us.iter().zip(vs) {
            vmax = vmax.max(a.hypot(*b));
        }
        outflow = outflow.max(kernels::max_outflow_speed(us, vs, spec.ny, spec.nx));
    }
    let rate = (vmax / MAX_COURANT).max(outflow) / spec.h;
    let n = (spec.delta * rate).ceil();
    if n.is_finite() && n >= 1.0 {
        n as usize
    } else {
        1
    }
}

/// Propagates `p0` through the field, recording one snapshot per interval.
pub fn propagate_density(field: &VelocityField, p0: &[f64]) -> Result<DensityGrid> {
    let spec = *field.spec();
    let plane = spec.cells();
    if p0.len() != plane {
        return Err(DriftError::ShapeMismatch(format!(
            "initial density has {} cells, grid has {}",
            p0.len(),
            plane
        )));
    }
    if p0.iter().any(|x| !x.is_finite()) {
        return Err(DriftError::InvalidArgument("initial density contains non-finite values".into()));
    }
    let n_sub = substeps_for(&spec, field.u(), field.v());
    let dt = spec.delta / n_sub as f64;
    let courant = dt / spec.h;
    let mut out = Vec::with_capacity((spec.k_steps + 1) * plane);
    out.extend_from_slice(p0);
    let mut p = p0.to_vec();
    let mut u = vec![0.0; plane];
    let mut v = vec![0.0; plane];
    for k in 0..spec.k_steps {
        let (u0, u1) = (&field.u()[k * plane..(k + 1) * plane], &field.u()[(k + 1) * plane..(k + 2) * plane]);
        let (v0, v1) = (&field.v()[k * plane..(k + 1) * plane], &field.v()[(k + 1) * plane..(k + 2) * plane]);
        for s in 0..n_sub {
            let a = s as f64 / n_sub as f64;
            for i in 0..plane {
                u[i] = (1.0 - a) * u0[i] + a * u1[i];
                v[i] = (1.0 - a) * v0[i] + a * v1[i];
            }
            p = kernels::upwind_step(&p, &u, &v, spec.ny, spec.nx, courant);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(DriftError::NumericalBlowup {
                step: k + 1,
                what: "density became non-finite".into(),
            });
        }
        out.extend_from_slice(&p);
    }
    Ok(DensityGrid { spec, p: out })
}

/// Circular-mean expected position of a nonnegative `(ny, nx)` mass map.
pub fn expected_position(spec: &GridSpec, p: &[f64]) -> Result<Point> {
    if p.len() != spec.cells() {
        return Err(DriftError::ShapeMismatch(format!(
            "mass map has {} cells, grid has {}",
            p.len(),
            spec.cells()
        )));
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(DriftError::DegenerateDensity(format!("total mass {total}")));
    }
    Ok(kernels::soft_argmax(p, spec, Readout::Circular))
}

/// Records `base + anomaly` snapshot by snapshot. `du`/`dv` are either
/// `(K+1, ny, nx)` or a single `(ny, nx)` plane applied to every snapshot.
/// Returns the `K+1` `(ny, nx)` snapshot variables of each component.
pub fn corrected_snapshots(tape: &mut Tape, base: &VelocityField, du: Var, dv: Var) -> Result<(Vec<Var>, Vec<Var>)> {
    let spec = *base.spec();
    let plane = spec.cells();
    let (ny, nx) = (spec.ny, spec.nx);
    let snap_shape = [spec.k_steps + 1, ny, nx];
    let time_constant = match tape.shape(du) {
        s if s == snap_shape => false,
        s if s == [ny, nx] => true,
        s => {
            return Err(DriftError::ShapeMismatch(format!(
                "anomaly shape {s:?} matches neither {snap_shape:?} nor [{ny}, {nx}]"
            )))
        }
    };
    if tape.shape(dv) != tape.shape(du) {
        return Err(DriftError::ShapeMismatch("du and dv shapes differ".into()));
    }
    let mut us = Vec::with_capacity(spec.k_steps + 1);
    let mut vs = Vec::with_capacity(spec.k_steps + 1);
    for k in 0..=spec.k_steps {
        let bu = tape.constant(Tensor::new(vec![ny, nx], base.u()[k * plane..(k + 1) * plane].to_vec()));
        let bv = tape.constant(Tensor::new(vec![ny, nx], base.v()[k * plane..(k + 1) * plane].to_vec()));
        let (au, av) = if time_constant {
            (du, dv)
        } else {
            (tape.select(du, k)?, tape.select(dv, k)?)
        };
        us.push(tape.add(bu, au)?);
        vs.push(tape.add(bv, av)?);
    }
    Ok((us, vs))
}

/// Differentiable propagation: records the transport of `p0` under
/// `base + anomaly` on `tape` and returns the `(K+1, 2)` circular-mean track.
///
/// Anomaly shapes are as in [`corrected_snapshots`]. The substep count is
/// fixed from the current total field before recording.
pub fn track_on_tape(tape: &mut Tape, base: &VelocityField, du: Var, dv: Var, p0: &[f64]) -> Result<Var> {
    let spec = *base.spec();
    let (ny, nx) = (spec.ny, spec.nx);
    let (u_snaps, v_snaps) = corrected_snapshots(tape, base, du, dv)?;
    let mut u_total = Vec::with_capacity(base.u().len());
    let mut v_total = Vec::with_capacity(base.v().len());
    for (u, v) in u_snaps.iter().zip(&v_snaps) {
        u_total.extend_from_slice(&tape.value(*u).data);
        v_total.extend_from_slice(&tape.value(*v).data);
    }
    if u_total.iter().chain(&v_total).any(|x| !x.is_finite()) {
        return Err(DriftError::InvalidArgument("corrected field is non-finite".into()));
    }
    let n_sub = substeps_for(&spec, &u_total, &v_total);
    let courant = spec.delta / n_sub as f64 / spec.h;

    let mut p = tape.constant(Tensor::new(vec![ny, nx], p0.to_vec()));
    let mut masses = vec![p];
    for k in 0..spec.k_steps {
        for s in 0..n_sub {
            let a = s as f64 / n_sub as f64;
            let (u, v) = if s == 0 {
                (u_snaps[k], v_snaps[k])
            } else {
                let u0 = tape.scale(u_snaps[k], 1.0 - a);
                let u1 = tape.scale(u_snaps[k + 1], a);
                let v0 = tape.scale(v_snaps[k], 1.0 - a);
                let v1 = tape.scale(v_snaps[k + 1], a);
                (tape.add(u0, u1)?, tape.add(v0, v1)?)
            };
            p = tape.upwind_step(p, u, v, courant)?;
        }
        masses.push(p);
    }
    let stacked = tape.stack(&masses)?;
    tape.soft_argmax(stacked, &spec, Readout::Circular)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::make_random_eddies;

    fn spec() -> GridSpec {
        GridSpec::new(16, 16, 1.0, 1.0, 4).unwrap()
    }

    #[test]
    fn point_mass_at_center_and_corner() {
        let s = spec();
        let p = init_density(&s, s.cell_center(3, 5), 0.0).unwrap();
        assert_eq!(p[3 * 16 + 5], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
        let p = init_density(&s, (6.0, 4.0), 0.0).unwrap();
        for (r, c) in [(3, 5), (3, 6), (4, 5), (4, 6)] {
            assert_eq!(p[r * 16 + c], 0.25);
        }
    }

    #[test]
    fn gaussian_is_normalized() {
        let s = spec();
        for sigma in [0.3, 1.7, 40.0] {
            let p = init_density(&s, (0.2, 15.9), sigma).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|x| *x >= 0.0));
        }
        assert!(init_density(&s, (1.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn zero_field_is_identity() {
        let s = spec();
        let f = VelocityField::zeros(s).unwrap();
        let p0 = init_density(&s, (4.3, 9.1), 1.0).unwrap();
        let d = propagate_density(&f, &p0).unwrap();
        for t in 0..=4 {
            assert_eq!(d.slice(t), &p0[..]);
        }
    }

    #[test]
    fn mass_and_positivity() {
        let s = GridSpec::new(24, 24, 2.0, 6.0, 6).unwrap();
        let f = make_random_eddies(s, 5, 4).unwrap();
        let d = propagate_density(&f, &init_density(&s, (20.0, 30.0), 0.0).unwrap()).unwrap();
        for t in 0..=6 {
            assert!((d.slice(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.slice(t).iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn expected_position_cases() {
        let s = spec();
        let c = s.cell_center(7, 2);
        let p = init_density(&s, c, 0.0).unwrap();
        let e = expected_position(&s, &p).unwrap();
        assert!((e.0 - c.0).abs() < 1e-12 && (e.1 - c.1).abs() < 1e-12);
        let g = init_density(&s, (8.0, 8.0), 1.5).unwrap();
        let e = expected_position(&s, &g).unwrap();
        assert!((e.0 - 8.0).abs() < 1e-9 * 16.0 && (e.1 - 8.0).abs() < 1e-9 * 16.0);
        let mut two = vec![0.0; 256];
        two[5 * 16 + 6] = 0.5;
        two[5 * 16 + 8] = 0.5;
        let e = expected_position(&s, &two).unwrap();
        assert!((e.0 - 7.5).abs() < 1e-12 && (e.1 - 5.5).abs() < 1e-12);
        // Across the seam the circular mean stays on the short arc.
        let mut seam = vec![0.0; 256];
        seam[5 * 16] = 0.5;
        seam[5 * 16 + 15] = 0.5;
        let e = expected_position(&s, &seam).unwrap();
        assert!(e.0.abs() < 1e-9 || (e.0 - 16.0).abs() < 1e-9);
        assert!(matches!(expected_position(&s, &vec![0.0; 256]), Err(DriftError::DegenerateDensity(_))));
    }

    #[test]
    fn roundtrip_bytes() {
        let s = spec();
        let f = make_random_eddies(s, 2, 1).unwrap();
        let d = propagate_density(&f, &init_density(&s, (3.0, 3.0), 1.0).unwrap()).unwrap();
        assert_eq!(DensityGrid::from_bytes(&d.to_bytes()).unwrap(), d);
        let mut bad = d.to_bytes();
        bad[0] = b'X';
        assert!(DensityGrid::from_bytes(&bad).is_err());
    }

    #[test]
    fn tape_track_matches_plain_propagation() {
        let s = GridSpec::new(12, 12, 2.0, 6.0, 3).unwrap();
        let f = make_random_eddies(s, 3, 8).unwrap();
        let p0 = init_density(&s, (9.0, 13.0), 2.0).unwrap();
        let plain = propagate_density(&f, &p0).unwrap().track().unwrap();
        let mut tape = Tape::new();
        let du = tape.param(Tensor::zeros(&[12, 12]));
        let dv = tape.param(Tensor::zeros(&[12, 12]));
        let track = track_on_tape(&mut tape, &f, du, dv, &p0).unwrap();
        let vals = &tape.value(track).data;
        for (k, p) in plain.iter().enumerate() {
            assert!((vals[2 * k] - p.0).abs() < 1e-12);
            assert!((vals[2 * k + 1] - p.1).abs() < 1e-12);
        }
    }
}
