//! Forward and adjoint kernels shared by the tape ops and the plain
//! (non-differentiable) model paths.

use std::f64::consts::PI;

use crate::grid::{min_image, GridSpec};

/// Gathers the 3x3 periodic neighborhood of every cell: `cols[(ci * 9 + ky * 3 + kx) * P + y * nx + x]
/// = x[ci][(y + ky - 1) mod ny][(x + kx - 1) mod nx]` with `P = ny * nx`.
fn im2col(x: &[f64], cin: usize, ny: usize, nx: usize, cols: &mut [f64]) {
    let plane = ny * nx;
    for ci in 0..cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[(ci * 9 + ky * 3 + kx) * plane..(ci * 9 + ky * 3 + kx + 1) * plane];
                for y in 0..ny {
                    let sr = (y + ny + ky - 1) % ny;
                    let srow = &src[sr * nx..(sr + 1) * nx];
                    let drow = &mut dst[y * nx..(y + 1) * nx];
                    match kx {
                        0 => {
                            drow[0] = srow[nx - 1];
                            drow[1..].copy_from_slice(&srow[..nx - 1]);
                        }
                        1 => drow.copy_from_slice(srow),
                        _ => {
                            drow[..nx - 1].copy_from_slice(&srow[1..]);
                            drow[nx - 1] = srow[0];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the grid.
fn col2im(cols: &[f64], cin: usize, ny: usize, nx: usize, gx: &mut [f64]) {
    let plane = ny * nx;
    for ci in 0..cin {
        let dst = &mut gx[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[(ci * 9 + ky * 3 + kx) * plane..(ci * 9 + ky * 3 + kx + 1) * plane];
                for y in 0..ny {
                    let dr = (y + ny + ky - 1) % ny;
                    let srow = &src[y * nx..(y + 1) * nx];
                    let drow = &mut dst[dr * nx..(dr + 1) * nx];
                    match kx {
                        0 => {
                            drow[nx - 1] += srow[0];
                            drow[..nx - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s);
                        }
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => {
                            drow[1..].iter_mut().zip(&srow[..nx - 1]).for_each(|(d, s)| *d += s);
                            drow[0] += srow[nx - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c (m, n) = beta * c + a (m, k) * b (k, n)`, with optional
/// transposition of either operand through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3x3 periodic cross-correlation of `nb` stacked inputs `(cin, ny, nx)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    nb: usize,
    cin: usize,
    cout: usize,
    ny: usize,
    nx: usize,
) -> Vec<f64> {
    let plane = ny * nx;
    let mut cols = vec![0.0; cin * 9 * plane];
    let mut out = vec![0.0; nb * cout * plane];
    for n in 0..nb {
        im2col(&x[n * cin * plane..(n + 1) * cin * plane], cin, ny, nx, &mut cols);
        let o = &mut out[n * cout * plane..(n + 1) * cout * plane];
        for co in 0..cout {
            o[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = b[co]);
        }
        gemm(cout, cin * 9, plane, w, false, &cols, false, 1.0, o);
    }
    out
}

/// Adjoint of [`conv2d_forward`]; accumulates into the provided gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    nb: usize,
    cin: usize,
    cout: usize,
    ny: usize,
    nx: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let plane = ny * nx;
    let mut cols = vec![0.0; cin * 9 * plane];
    for n in 0..nb {
        let go = &gout[n * cout * plane..(n + 1) * cout * plane];
        if let Some(gb) = gb.as_deref_mut() {
            for co in 0..cout {
                gb[co] += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[n * cin * plane..(n + 1) * cin * plane], cin, ny, nx, &mut cols);
            gemm(cout, plane, cin * 9, go, false, &cols, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(cin * 9, cout, plane, w, true, go, false, 0.0, &mut cols);
            col2im(&cols, cin, ny, nx, &mut gx[n * cin * plane..(n + 1) * cin * plane]);
        }
    }
}

/// Kernel-3 temporal cross-correlation with replication padding; inputs are
/// `nb` stacks of `(cin, k)`.
pub fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], nb: usize, cin: usize, cout: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb * cout * k];
    for n in 0..nb {
        let xn = &x[n * cin * k..(n + 1) * cin * k];
        for co in 0..cout {
            for t in 0..k {
                let mut acc = b[co];
                for ci in 0..cin {
                    let xr = &xn[ci * k..(ci + 1) * k];
                    let wk = &w[(co * cin + ci) * 3..(co * cin + ci) * 3 + 3];
                    acc += wk[0] * xr[t.saturating_sub(1)] + wk[1] * xr[t] + wk[2] * xr[(t + 1).min(k - 1)];
                }
                out[(n * cout + co) * k + t] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    nb: usize,
    cin: usize,
    cout: usize,
    k: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    for n in 0..nb {
        let xn = &x[n * cin * k..(n + 1) * cin * k];
        for co in 0..cout {
            for t in 0..k {
                let g = gout[(n * cout + co) * k + t];
                if let Some(gb) = gb.as_deref_mut() {
                    gb[co] += g;
                }
                let taps = [t.saturating_sub(1), t, (t + 1).min(k - 1)];
                for ci in 0..cin {
                    let widx = (co * cin + ci) * 3;
                    for (j, &src) in taps.iter().enumerate() {
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx + j] += g * xn[ci * k + src];
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[(n * cin + ci) * k + src] += g * w[widx + j];
                        }
                    }
                }
            }
        }
    }
}

/// Softmax of `x / temperature` over each contiguous block of `block` values.
pub fn softmax_blocks(x: &[f64], block: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xs, os) in x.chunks(block).zip(out.chunks_mut(block)) {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, v) in os.iter_mut().zip(xs) {
            *o = ((v - m) / temperature).exp();
            total += *o;
        }
        let inv = 1.0 / total;
        os.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

pub fn softmax_blocks_backward(p: &[f64], gout: &[f64], block: usize, temperature: f64, gx: &mut [f64]) {
    for ((ps, gs), gxs) in p.chunks(block).zip(gout.chunks(block)).zip(gx.chunks_mut(block)) {
        let dot: f64 = ps.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((g, pv), gv) in gxs.iter_mut().zip(ps).zip(gs) {
            *g += pv * (gv - dot) / temperature;
        }
    }
}

/// How a probability map over the grid is reduced to a position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Readout {
    /// Circular mean per axis: each coordinate is embedded on the unit
    /// circle, averaged, and mapped back through its angle. A resultant
    /// shorter than `1e-9` of the total mass falls back to the grid origin
    /// on that axis.
    Circular,
    /// Expectation of the minimum-image offset from `anchor`, returned as an
    /// unwrapped position `anchor + E[offset]`. Assumes unit total mass.
    Anchored { anchor: (f64, f64) },
}

const TIE_TOLERANCE: f64 = 1e-9;

struct AxisMoments {
    c: f64,
    s: f64,
    mass: f64,
}

fn axis_angle(i: usize, n: usize) -> f64 {
    2.0 * PI * (i as f64 + 0.5) / n as f64
}

fn marginals(p: &[f64], ny: usize, nx: usize) -> (Vec<f64>, Vec<f64>) {
    let mut px = vec![0.0; nx];
    let mut py = vec![0.0; ny];
    for r in 0..ny {
        for c in 0..nx {
            let v = p[r * nx + c];
            px[c] += v;
            py[r] += v;
        }
    }
    (px, py)
}

fn moments(m: &[f64]) -> AxisMoments {
    let n = m.len();
    let mut c = 0.0;
    let mut s = 0.0;
    let mut mass = 0.0;
    for (i, v) in m.iter().enumerate() {
        let a = axis_angle(i, n);
        c += v * a.cos();
        s += v * a.sin();
        mass += v;
    }
    AxisMoments { c, s, mass }
}

fn circular_coord(mo: &AxisMoments, origin: f64, length: f64) -> f64 {
    let r = mo.c.hypot(mo.s);
    if !(r > TIE_TOLERANCE * mo.mass.abs()) {
        return origin;
    }
    let phi = mo.s.atan2(mo.c).rem_euclid(2.0 * PI);
    origin + phi / (2.0 * PI) * length
}

/// d(coordinate)/d(marginal_i) for the circular mean.
fn circular_grad(mo: &AxisMoments, n: usize, length: f64) -> Vec<f64> {
    let r2 = mo.c * mo.c + mo.s * mo.s;
    if !(r2.sqrt() > TIE_TOLERANCE * mo.mass.abs()) {
        return vec![0.0; n];
    }
    let k = length / (2.0 * PI) / r2;
    (0..n)
        .map(|i| {
            let a = axis_angle(i, n);
            k * (mo.c * a.sin() - mo.s * a.cos())
        })
        .collect()
}

fn anchored_offsets(spec: &GridSpec, anchor: (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    let ox = (0..spec.nx)
        .map(|c| min_image(spec.cell_center(0, c).0 - anchor.0, spec.lx()))
        .collect();
    let oy = (0..spec.ny)
        .map(|r| min_image(spec.cell_center(r, 0).1 - anchor.1, spec.ly()))
        .collect();
    (ox, oy)
}

/// Reduces one `(ny, nx)` map to a position.
pub fn soft_argmax(p: &[f64], spec: &GridSpec, readout: Readout) -> (f64, f64) {
    let (px, py) = marginals(p, spec.ny, spec.nx);
    match readout {
        Readout::Circular => (
            circular_coord(&moments(&px), spec.origin.0, spec.lx()),
            circular_coord(&moments(&py), spec.origin.1, spec.ly()),
        ),
        Readout::Anchored { anchor } => {
            let (ox, oy) = anchored_offsets(spec, anchor);
            (
                anchor.0 + px.iter().zip(&ox).map(|(a, b)| a * b).sum::<f64>(),
                anchor.1 + py.iter().zip(&oy).map(|(a, b)| a * b).sum::<f64>(),
            )
        }
    }
}

/// Accumulates `d/dp` of `gx * x + gy * y` into `gp`.
pub fn soft_argmax_backward(p: &[f64], spec: &GridSpec, readout: Readout, g: (f64, f64), gp: &mut [f64]) {
    let (dx, dy) = match readout {
        Readout::Circular => {
            let (px, py) = marginals(p, spec.ny, spec.nx);
            (
                circular_grad(&moments(&px), spec.nx, spec.lx()),
                circular_grad(&moments(&py), spec.ny, spec.ly()),
            )
        }
        Readout::Anchored { anchor } => anchored_offsets(spec, anchor),
    };
    for r in 0..spec.ny {
        for c in 0..spec.nx {
            gp[r * spec.nx + c] += g.0 * dx[c] + g.1 * dy[r];
        }
    }
}

/// One conservative first-order upwind step of `p` under cell-centered
/// velocities; `courant = dt / h`. Face velocities average the two adjacent
/// cells.
pub fn upwind_step(p: &[f64], u: &[f64], v: &[f64], ny: usize, nx: usize, courant: f64) -> Vec<f64> {
    // East and north face fluxes first, then one fixed-order update per cell
    // so the step commutes bitwise with integer grid shifts.
    let mut fe = vec![0.0; ny * nx];
    let mut fn_ = vec![0.0; ny * nx];
    for r in 0..ny {
        let rn = (r + 1) % ny;
        for c in 0..nx {
            let i = r * nx + c;
            let ie = r * nx + (c + 1) % nx;
            let inn = rn * nx + c;
            let ue = 0.5 * (u[i] + u[ie]);
            fe[i] = courant * (ue.max(0.0) * p[i] + ue.min(0.0) * p[ie]);
            let vn = 0.5 * (v[i] + v[inn]);
            fn_[i] = courant * (vn.max(0.0) * p[i] + vn.min(0.0) * p[inn]);
        }
    }
    let mut out = vec![0.0; ny * nx];
    for r in 0..ny {
        let rs = (r + ny - 1) % ny;
        for c in 0..nx {
            let i = r * nx + c;
            let iw = r * nx + (c + nx - 1) % nx;
            let is = rs * nx + c;
            out[i] = p[i] - fe[i] + fe[iw] - fn_[i] + fn_[is];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn upwind_step_backward(
    p: &[f64],
    u: &[f64],
    v: &[f64],
    ny: usize,
    nx: usize,
    courant: f64,
    gout: &[f64],
    mut gp: Option<&mut [f64]>,
    mut gu: Option<&mut [f64]>,
    mut gv: Option<&mut [f64]>,
) {
    if let Some(gp) = gp.as_deref_mut() {
        gp.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
    }
    for r in 0..ny {
        let rn = (r + 1) % ny;
        for c in 0..nx {
            let ce = (c + 1) % nx;
            let i = r * nx + c;
            let ie = r * nx + ce;
            let inn = rn * nx + c;

            let ue = 0.5 * (u[i] + u[ie]);
            let gfe = courant * (gout[ie] - gout[i]);
            if let Some(gp) = gp.as_deref_mut() {
                gp[i] += gfe * ue.max(0.0);
                gp[ie] += gfe * ue.min(0.0);
            }
            if let Some(gu) = gu.as_deref_mut() {
                let d = gfe * if ue >= 0.0 { p[i] } else { p[ie] };
                gu[i] += 0.5 * d;
                gu[ie] += 0.5 * d;
            }

            let vn = 0.5 * (v[i] + v[inn]);
            let gfn = courant * (gout[inn] - gout[i]);
            if let Some(gp) = gp.as_deref_mut() {
                gp[i] += gfn * vn.max(0.0);
                gp[inn] += gfn * vn.min(0.0);
            }
            if let Some(gv) = gv.as_deref_mut() {
                let d = gfn * if vn >= 0.0 { p[i] } else { p[inn] };
                gv[i] += 0.5 * d;
                gv[inn] += 0.5 * d;
            }
        }
    }
}

/// Largest per-cell outflow rate (1/h, times h) of the upwind scheme:
/// sum of outward face velocities.
pub fn max_outflow_speed(u: &[f64], v: &[f64], ny: usize, nx: usize) -> f64 {
    let mut best = 0.0f64;
    for r in 0..ny {
        let rn = (r + 1) % ny;
        let rs = (r + ny - 1) % ny;
        for c in 0..nx {
            let ce = (c + 1) % nx;
            let cw = (c + nx - 1) % nx;
            let i = r * nx + c;
            let ue = 0.5 * (u[i] + u[r * nx + ce]);
            let uw = 0.5 * (u[i] + u[r * nx + cw]);
            let vn = 0.5 * (v[i] + v[rn * nx + c]);
            let vs = 0.5 * (v[i] + v[rs * nx + c]);
            let out = ue.max(0.0) + (-uw).max(0.0) + vn.max(0.0) + (-vs).max(0.0);
            best = best.max(out);
        }
    }
    best
}
