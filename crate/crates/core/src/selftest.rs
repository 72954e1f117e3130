//! Fast invariant suite exposed by the `selftest` command.

use std::f64::consts::PI;

use serde::Serialize;

use crate::autodiff::check::{contract, gradient_check, random_tensor};
use crate::autodiff::{conv_lstm_cell, ConvLstmWeights, Readout, Tensor};
use crate::driftnet::{build_y0, DriftNet, DriftNetConfig};
use crate::error::Result;
use crate::field::{make_random_eddies, make_solid_rotation, VelocityField};
use crate::fokkerplanck::{init_density, propagate_density};
use crate::grid::GridSpec;
use crate::lagrangian::{advect_rk4, Ensemble, Trajectory};
use crate::metrics::rmse_positions;
use crate::params::ParamStore;
use crate::training::{loss_liu, total_loss};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        run("rk4_solid_rotation_radius", rk4_orbit),
        run("density_mass_conservation", density_mass),
        run("gradient_conv2d", grad_conv2d),
        run("gradient_conv_lstm", grad_lstm),
        run("gradient_softmax_soft_argmax", grad_softargmax),
        run("gradient_upwind_step", grad_upwind),
        run("loss_identities", loss_identities),
        run("y0_widening_cone", y0_cone),
        run("encoder_shift_equivariance", shift_equivariance),
        run("binary_format_roundtrip", roundtrip),
    ]
}

fn rk4_orbit() -> Result<(bool, String)> {
    let omega = 2.0 * PI / 240.0;
    let spec = GridSpec::new(32, 32, 10.0, 0.05 / omega, 40)?;
    let center = (160.0, 160.0);
    let field = make_solid_rotation(spec, omega, center)?;
    let r0 = (220.0, 160.0);
    let t = advect_rk4(&field, r0, 1)?;
    let worst = t
        .positions
        .iter()
        .map(|p| ((p.0 - center.0).hypot(p.1 - center.1) - 60.0).abs() / 60.0)
        .fold(0.0, f64::max);
    Ok((worst < 1e-8, format!("max relative radius error {worst:.3e}")))
}

fn density_mass() -> Result<(bool, String)> {
    let spec = GridSpec::new(32, 32, 10.0, 6.0, 8)?;
    let field = make_random_eddies(spec, 5, 11)?;
    let p0 = init_density(&spec, (101.0, 57.0), 0.0)?;
    let d = propagate_density(&field, &p0)?;
    let worst = (0..d.snapshots())
        .map(|k| (d.slice(k).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let min = d.p.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((worst < 1e-12 && min >= 0.0, format!("max mass drift {worst:.3e}, min density {min:.3e}")))
}

fn grad_report(err: f64, tol: f64) -> (bool, String) {
    (err < tol, format!("max relative error {err:.3e} (tol {tol:.0e})"))
}

fn grad_conv2d() -> Result<(bool, String)> {
    let x = random_tensor(&[2, 3, 5, 6], -1.0, 1.0, 1);
    let w = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, 2);
    let b = random_tensor(&[4], -0.5, 0.5, 3);
    let r = gradient_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            contract(t, y, 9)
        },
        &[x, w, b],
        1e-6,
    )?;
    Ok(grad_report(r.max_rel_err, 1e-6))
}

fn grad_lstm() -> Result<(bool, String)> {
    let x = random_tensor(&[3, 5, 5], -1.0, 1.0, 4);
    let h = random_tensor(&[2, 5, 5], -1.0, 1.0, 5);
    let c = random_tensor(&[2, 5, 5], -1.0, 1.0, 6);
    let w = random_tensor(&[8, 5, 3, 3], -0.4, 0.4, 7);
    let b = random_tensor(&[8], -0.4, 0.4, 8);
    let r = gradient_check(
        |t, v| {
            let (h1, c1) = conv_lstm_cell(t, v[0], v[1], v[2], ConvLstmWeights { w: v[3], b: v[4] })?;
            let both = t.concat(&[h1, c1], 0)?;
            contract(t, both, 10)
        },
        &[x, h, c, w, b],
        1e-6,
    )?;
    Ok(grad_report(r.max_rel_err, 1e-6))
}

fn grad_softargmax() -> Result<(bool, String)> {
    let spec = GridSpec::new(6, 5, 2.0, 1.0, 1)?;
    let x = random_tensor(&[3, 5, 6], -2.0, 2.0, 11);
    let r = gradient_check(
        |t, v| {
            let p = t.spatial_softmax(v[0], 0.7)?;
            let a = t.soft_argmax(p, &spec, Readout::Anchored { anchor: (3.3, 4.1) })?;
            let c = t.soft_argmax(p, &spec, Readout::Circular)?;
            let both = t.concat(&[a, c], 0)?;
            contract(t, both, 12)
        },
        &[x],
        1e-6,
    )?;
    Ok(grad_report(r.max_rel_err, 1e-6))
}

fn grad_upwind() -> Result<(bool, String)> {
    let p = random_tensor(&[6, 7], 0.0, 1.0, 13);
    // Velocities bounded away from zero face averages keep the upwind
    // switch fixed within the difference stencil.
    let u = random_tensor(&[6, 7], 0.2, 0.9, 14);
    let v = random_tensor(&[6, 7], -0.9, -0.2, 15);
    let r = gradient_check(
        |t, vars| {
            let q = t.upwind_step(vars[0], vars[1], vars[2], 0.3)?;
            let q = t.upwind_step(q, vars[1], vars[2], 0.3)?;
            contract(t, q, 16)
        },
        &[p, u, v],
        1e-6,
    )?;
    Ok(grad_report(r.max_rel_err, 1e-6))
}

fn loss_identities() -> Result<(bool, String)> {
    let spec = GridSpec::new(16, 16, 10.0, 6.0, 6)?;
    let line = Trajectory::new(spec, (0..=6).map(|k| (20.0 + 4.0 * k as f64, 30.0)).collect())?;
    let frozen = Trajectory::persistence(spec, line.seed());
    let shifted = Trajectory::new(spec, line.positions.iter().map(|p| (p.0 + 3.0, p.1 + 4.0)).collect())?;
    let zero = total_loss(&[line.clone()], &[line.clone()], 0.2, 0.8)?;
    let liu = loss_liu(&[line.clone()], &[frozen])?;
    let rmse = rmse_positions(&Ensemble::new(vec![line.clone()])?, &Ensemble::new(vec![shifted])?, 6)?;
    let ok = zero == 0.0 && (liu - 1.0).abs() < 1e-9 && (rmse - 5.0).abs() < 1e-12;
    Ok((ok, format!("total(ref,ref) = {zero}, liu(frozen) = {liu}, rmse = {rmse}")))
}

fn y0_cone() -> Result<(bool, String)> {
    let spec = GridSpec::new(12, 12, 5.0, 6.0, 4)?;
    let r0 = spec.cell_center(4, 7);
    let y0 = build_y0(&spec, r0, 0.8, 10.0)?;
    let peak = (0..4).all(|k| y0.slice(k)[4 * 12 + 7] == 1.0);
    let nested = (0..3).all(|k| y0.slice(k).iter().zip(y0.slice(k + 1)).all(|(a, b)| *a <= 0.0 || *b > 0.0));
    let bounded = y0.y0.iter().all(|v| (0.0..=1.0).contains(v));
    Ok((peak && nested && bounded, format!("peak {peak}, nested {nested}, bounded {bounded}")))
}

fn shift_field(f: &VelocityField, dr: usize, dc: usize) -> Result<VelocityField> {
    let s = *f.spec();
    let plane = s.cells();
    let mut u = vec![0.0; f.u().len()];
    let mut v = vec![0.0; f.v().len()];
    for k in 0..=s.k_steps {
        for r in 0..s.ny {
            for c in 0..s.nx {
                let dst = k * plane + ((r + dr) % s.ny) * s.nx + (c + dc) % s.nx;
                let src = k * plane + r * s.nx + c;
                u[dst] = f.u()[src];
                v[dst] = f.v()[src];
            }
        }
    }
    VelocityField::new(s, u, v)
}

fn shift_equivariance() -> Result<(bool, String)> {
    let spec = GridSpec::new(8, 8, 4.0, 6.0, 2)?;
    let f = make_random_eddies(spec, 2, 3)?;
    let net = DriftNet::new(DriftNetConfig::default(), f.vmax())?;
    let r0 = spec.cell_center(2, 3);
    let shifted_r0 = spec.cell_center(4, 6);
    let base = net.encode(&f, &net.y0(&spec, r0)?)?;
    let moved = net.encode(&shift_field(&f, 2, 3)?, &net.y0(&spec, shifted_r0)?)?;
    let mut exact = true;
    for kc in 0..spec.k_steps * base.channels {
        for r in 0..spec.ny {
            for c in 0..spec.nx {
                let a = base.y[kc * 64 + r * 8 + c];
                let b = moved.y[kc * 64 + ((r + 2) % 8) * 8 + (c + 3) % 8];
                exact &= a.to_bits() == b.to_bits();
            }
        }
    }
    Ok((exact, format!("bitwise equal after a (2, 3)-cell shift: {exact}")))
}

fn roundtrip() -> Result<(bool, String)> {
    let spec = GridSpec::new(6, 5, 3.0, 2.0, 2)?;
    let f = make_random_eddies(spec, 2, 5)?;
    let f_ok = VelocityField::from_bytes(&f.to_bytes())? == f;
    let e = Ensemble::new(vec![advect_rk4(&f, (4.0, 7.0), 3)?])?;
    let e_ok = Ensemble::from_bytes(&e.to_bytes()?)? == e;
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]));
    let p_ok = ParamStore::from_bytes(&p.to_bytes())? == p;
    Ok((f_ok && e_ok && p_ok, format!("field {f_ok}, ensemble {e_ok}, params {p_ok}")))
}
