//! Row-major dense and attention kernels with their reverse passes.

/// Offsets of a `y = x W + b` layer inside a flat parameter vector; `W` is
/// stored `(inp × out)` row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Dense {
    pub fn affine(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let (inp, out) = (self.inp, self.out);
        debug_assert_eq!(x.len(), rows * inp);
        let w = &p[self.w..self.w + inp * out];
        let b = &p[self.b..self.b + out];
        let mut y = Vec::with_capacity(rows * out);
        for r in 0..rows {
            y.extend_from_slice(b);
            let yr = &mut y[r * out..(r + 1) * out];
            for (i, &xi) in x[r * inp..(r + 1) * inp].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (yj, wij) in yr.iter_mut().zip(&w[i * out..(i + 1) * out]) {
                    *yj += xi * wij;
                }
            }
        }
        y
    }

    /// Accumulates `dW`, `db` into `g` and returns `dx`.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        dy: &[f64],
        rows: usize,
        g: &mut [f64],
    ) -> Vec<f64> {
        let (inp, out) = (self.inp, self.out);
        let w = &p[self.w..self.w + inp * out];
        let mut dx = vec![0.0; rows * inp];
        for r in 0..rows {
            let dyr = &dy[r * out..(r + 1) * out];
            for (gb, d) in g[self.b..self.b + out].iter_mut().zip(dyr) {
                *gb += d;
            }
            let xr = &x[r * inp..(r + 1) * inp];
            let dxr = &mut dx[r * inp..(r + 1) * inp];
            for i in 0..inp {
                let wrow = &w[i * out..(i + 1) * out];
                let grow = &mut g[self.w + i * out..self.w + (i + 1) * out];
                let xi = xr[i];
                let mut acc = 0.0;
                for j in 0..out {
                    grow[j] += xi * dyr[j];
                    acc += wrow[j] * dyr[j];
                }
                dxr[i] = acc;
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn gelu_vec(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&v| gelu(v)).collect()
}

pub(crate) fn gelu_back(u: &[f64], da: &[f64]) -> Vec<f64> {
    u.iter().zip(da).map(|(&v, &d)| d * gelu_grad(v)).collect()
}

/// Multi-head scaled dot-product attention over all `s` rows.
/// Returns the concatenated head outputs and per-head attention weights.
pub(crate) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s * d];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut a = vec![0.0; s * s];
        for i in 0..s {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut a[i * s..(i + 1) * s];
            let mut top = f64::NEG_INFINITY;
            for j in 0..s {
                let kj = &k[j * d + off..j * d + off + dh];
                row[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                top = top.max(row[j]);
            }
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - top).exp();
                total += *r;
            }
            row.iter_mut().for_each(|r| *r /= total);
            let oi = &mut out[i * d + off..i * d + off + dh];
            for j in 0..s {
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += row[j] * x;
                }
            }
        }
        weights.push(a);
    }
    (out, weights)
}

/// Reverse of [`attention`]: returns `(dq, dk, dv)`.
pub(crate) fn attention_back(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[Vec<f64>],
    dout: &[f64],
    s: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let heads = weights.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; s * d];
    let mut dv = vec![0.0; s * d];
    let mut da = vec![0.0; s];
    for (h, a) in weights.iter().enumerate() {
        let off = h * dh;
        for i in 0..s {
            let doi = &dout[i * d + off..i * d + off + dh];
            let arow = &a[i * s..(i + 1) * s];
            for j in 0..s {
                let vj = &v[j * d + off..j * d + off + dh];
                da[j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                for (t, &g) in doi.iter().enumerate() {
                    dv[j * d + off + t] += arow[j] * g;
                }
            }
            let dot: f64 = arow.iter().zip(&da).map(|(x, y)| x * y).sum();
            for j in 0..s {
                let ds = arow[j] * (da[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] += ds * k[j * d + off + t];
                    dk[j * d + off + t] += ds * q[i * d + off + t];
                }
            }
        }
    }
    (dq, dk, dv)
}
