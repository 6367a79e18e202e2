use nalgebra::{Matrix3, Vector3};

/// `m = u · diag(s) · vᵀ` with `s` non-negative and descending.
pub(crate) struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

pub(crate) fn decompose(m: &Matrix3<f64>) -> Svd3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut out = Svd3 {
        u: Matrix3::zeros(),
        s: Vector3::zeros(),
        v: Matrix3::zeros(),
    };
    for (dst, &src) in order.iter().enumerate() {
        out.u.set_column(dst, &u.column(src));
        out.v.set_column(dst, &v.column(src));
        out.s[dst] = s[src];
    }
    // Fix the column sign gauge: the largest-magnitude entry of each left
    // singular vector is positive. Keeps the factors continuous in `m`.
    for c in 0..3 {
        let col = out.u.column(c);
        let pivot = (0..3)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
            .unwrap();
        if col[pivot] < 0.0 {
            out.u.column_mut(c).neg_mut();
            out.v.column_mut(c).neg_mut();
        }
    }
    out
}

/// `sign(d) / max(|d|, eps)`, zero for an exact tie.
pub(crate) fn safe_inverse_gap(d: f64, eps: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d.signum() / d.abs().max(eps)
    }
}

/// Gradient of a scalar w.r.t. `m` given its gradients w.r.t. the factors:
///
/// `ḡm = U [ (F ∘ (UᵀḡU − ḡUᵀU)) S + diag(ḡS) + S (F ∘ (VᵀḡV − ḡVᵀV)) ] Vᵀ`
///
/// with `F_ij = 1 / (s_j² − s_i²)` off the diagonal. Returns the gradient and
/// whether any gap fell under `eps` (a degenerate spectrum).
pub(crate) fn backward(
    f: &Svd3,
    gu: &Matrix3<f64>,
    gs: &Vector3<f64>,
    gv: &Matrix3<f64>,
    eps: f64,
) -> (Matrix3<f64>, bool) {
    let mut coeff = Matrix3::zeros();
    let mut degenerate = false;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let d = f.s[j] * f.s[j] - f.s[i] * f.s[i];
                if d.abs() < eps {
                    degenerate = true;
                }
                coeff[(i, j)] = safe_inverse_gap(d, eps);
            }
        }
    }
    let ut_gu = f.u.transpose() * gu;
    let vt_gv = f.v.transpose() * gv;
    let j = coeff.component_mul(&(ut_gu - ut_gu.transpose()));
    let k = coeff.component_mul(&(vt_gv - vt_gv.transpose()));
    let s = Matrix3::from_diagonal(&f.s);
    let inner = j * s + Matrix3::from_diagonal(gs) + s * k;
    (f.u * inner * f.v.transpose(), degenerate)
}
