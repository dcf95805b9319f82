//! Layer kernels and their hand-derived gradients.

use super::gemm::gemm;
use super::tensor::TensorGrid;
use super::{Real, TIME_EMBED_DIM};

const TILE: usize = 2048;
const GN_EPS: f64 = 1e-5;

/// Output extent of a replicate-padded convolution along one axis.
pub fn conv_out_dim(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

struct ConvPlan {
    cin: usize,
    k: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    /// per axis, per kernel tap: input coordinate for each output coordinate
    taps: [Vec<Vec<usize>>; 3],
}

impl ConvPlan {
    fn new(cin: usize, in_dims: [usize; 3], k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let out_dims: [usize; 3] = std::array::from_fn(|a| conv_out_dim(in_dims[a], k, stride));
        let taps = std::array::from_fn(|a| {
            (0..k)
                .map(|t| {
                    (0..out_dims[a])
                        .map(|o| {
                            let i = (o * stride + t) as isize - pad as isize;
                            i.clamp(0, in_dims[a] as isize - 1) as usize
                        })
                        .collect()
                })
                .collect()
        });
        Self { cin, k, in_dims, out_dims, taps }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Visit `(row, column-in-tile, input index)` for the column block
    /// `start..start + len` of the im2col matrix. Spatial offsets are built
    /// once per tile and shared by every input channel.
    #[inline]
    fn for_each_tap(&self, start: usize, len: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [ox, oy, _] = self.out_dims;
        let [nx, ny, nz] = self.in_dims;
        let k = self.k;
        let taps = k * k * k;
        let mut spatial = Vec::with_capacity(taps * len);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let (tx, ty, tz) = (&self.taps[0][kx], &self.taps[1][ky], &self.taps[2][kz]);
                    let (mut x, mut y, mut z) = (start % ox, (start / ox) % oy, start / (ox * oy));
                    for _ in 0..len {
                        spatial.push((tz[z] * ny + ty[y]) * nx + tx[x]);
                        x += 1;
                        if x == ox {
                            x = 0;
                            y += 1;
                            if y == oy {
                                y = 0;
                                z += 1;
                            }
                        }
                    }
                }
            }
        }
        let chan = nx * ny * nz;
        for ci in 0..self.cin {
            let base = ci * chan;
            for (t, offs) in spatial.chunks_exact(len).enumerate() {
                let r = ci * taps + t;
                for (j, &o) in offs.iter().enumerate() {
                    f(r, j, base + o);
                }
            }
        }
    }

    fn im2col(&self, x: &[Real], start: usize, len: usize, cols: &mut [Real]) {
        self.for_each_tap(start, len, |r, j, i| cols[r * len + j] = x[i]);
    }
}

pub fn conv_forward(x: &TensorGrid, w: &[Real], b: &[Real], cout: usize, k: usize, stride: usize) -> TensorGrid {
    let [cin, nx, ny, nz] = x.shape();
    let plan = ConvPlan::new(cin, [nx, ny, nz], k, stride);
    let p = plan.positions();
    let rows = plan.rows();
    let od = plan.out_dims;
    let mut out = TensorGrid::zeros([cout, od[0], od[1], od[2]]);
    for (c, bias) in b.iter().enumerate() {
        out.channel_mut(c).fill(*bias);
    }
    let mut cols = vec![0.0 as Real; rows * TILE.min(p)];
    let od = out.data_mut();
    for start in (0..p).step_by(TILE) {
        let len = TILE.min(p - start);
        plan.im2col(x.data(), start, len, &mut cols);
        gemm(
            cout, rows, len, 1.0, w, rows as isize, 1, &cols, len as isize, 1, 1.0,
            &mut od[start..], p as isize, 1,
        );
    }
    out
}

/// Accumulates weight and bias gradients into `gw`/`gb`, returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &TensorGrid,
    w: &[Real],
    gout: &TensorGrid,
    k: usize,
    stride: usize,
    gw: &mut [Real],
    gb: &mut [Real],
) -> TensorGrid {
    let [cin, nx, ny, nz] = x.shape();
    let cout = gout.channels();
    let plan = ConvPlan::new(cin, [nx, ny, nz], k, stride);
    let p = plan.positions();
    let rows = plan.rows();
    for (c, g) in gb.iter_mut().enumerate() {
        *g += gout.channel(c).iter().sum::<Real>();
    }
    let mut gx = TensorGrid::zeros(x.shape());
    let tile = TILE.min(p);
    let mut cols = vec![0.0 as Real; rows * tile];
    let mut dcols = vec![0.0 as Real; rows * tile];
    let g = gout.data();
    for start in (0..p).step_by(TILE) {
        let len = TILE.min(p - start);
        plan.im2col(x.data(), start, len, &mut cols);
        // gW += gOut[:, tile] * cols^T
        gemm(
            cout, len, rows, 1.0, &g[start..], p as isize, 1, &cols, 1, len as isize, 1.0,
            gw, rows as isize, 1,
        );
        // dcols = W^T * gOut[:, tile]
        gemm(
            rows, cout, len, 1.0, w, 1, rows as isize, &g[start..], p as isize, 1, 0.0,
            &mut dcols, len as isize, 1,
        );
        let gxd = gx.data_mut();
        plan.for_each_tap(start, len, |r, j, i| gxd[i] += dcols[r * len + j]);
    }
    gx
}

/// Largest divisor of `channels` not exceeding 8.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Per-group `(mean, 1/std)`.
pub type GroupStats = Vec<(Real, Real)>;

pub fn group_norm_forward(x: &TensorGrid, groups: usize, gamma: &[Real], beta: &[Real]) -> (TensorGrid, GroupStats) {
    let c = x.channels();
    let cpg = c / groups;
    let s = x.sites();
    let mut y = TensorGrid::zeros(x.shape());
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = &x.data()[g * cpg * s..(g + 1) * cpg * s];
        let n = span.len() as f64;
        let mean = span.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = span.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let rstd = 1.0 / (var + GN_EPS).sqrt();
        stats.push((mean as Real, rstd as Real));
        for ch in g * cpg..(g + 1) * cpg {
            let (ga, be) = (gamma[ch], beta[ch]);
            let (m, r) = (mean as Real, rstd as Real);
            for (o, &v) in y.channel_mut(ch).iter_mut().zip(x.channel(ch)) {
                *o = (v - m) * r * ga + be;
            }
        }
    }
    (y, stats)
}

pub fn group_norm_backward(
    x: &TensorGrid,
    stats: &GroupStats,
    gamma: &[Real],
    gout: &TensorGrid,
    ggamma: &mut [Real],
    gbeta: &mut [Real],
) -> TensorGrid {
    let c = x.channels();
    let groups = stats.len();
    let cpg = c / groups;
    let s = x.sites();
    let mut gx = TensorGrid::zeros(x.shape());
    for (g, &(mean, rstd)) in stats.iter().enumerate() {
        let n = (cpg * s) as f64;
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for ch in g * cpg..(g + 1) * cpg {
            let mut gg = 0.0f64;
            let mut gbb = 0.0f64;
            for (&v, &d) in x.channel(ch).iter().zip(gout.channel(ch)) {
                let xhat = ((v - mean) * rstd) as f64;
                gg += d as f64 * xhat;
                gbb += d as f64;
                let dxhat = (d * gamma[ch]) as f64;
                sum_d += dxhat;
                sum_dx += dxhat * xhat;
            }
            ggamma[ch] += gg as Real;
            gbeta[ch] += gbb as Real;
        }
        let (md, mdx) = (sum_d / n, sum_dx / n);
        for ch in g * cpg..(g + 1) * cpg {
            let ga = gamma[ch];
            let xs = x.channel(ch).to_vec();
            let gs = gout.channel(ch).to_vec();
            for ((o, v), d) in gx.channel_mut(ch).iter_mut().zip(xs).zip(gs) {
                let xhat = ((v - mean) * rstd) as f64;
                let dxhat = (d * ga) as f64;
                *o = (rstd as f64 * (dxhat - md - xhat * mdx)) as Real;
            }
        }
    }
    gx
}

#[inline]
fn sigmoid(v: Real) -> Real {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu_forward(x: &TensorGrid) -> TensorGrid {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &TensorGrid, gout: &TensorGrid) -> TensorGrid {
    let mut g = gout.clone();
    for (o, &v) in g.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(v);
        *o *= s * (1.0 + v * (1.0 - s));
    }
    g
}

pub fn upsample_forward(x: &TensorGrid) -> TensorGrid {
    let [c, nx, ny, nz] = x.shape();
    let (ux, uy, uz) = (2 * nx, 2 * ny, 2 * nz);
    let mut y = TensorGrid::zeros([c, ux, uy, uz]);
    for ch in 0..c {
        let src = x.channel(ch).to_vec();
        let dst = y.channel_mut(ch);
        for z in 0..uz {
            for yy in 0..uy {
                for xx in 0..ux {
                    dst[(z * uy + yy) * ux + xx] = src[((z / 2) * ny + yy / 2) * nx + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample_backward(x_shape: [usize; 4], gout: &TensorGrid) -> TensorGrid {
    let [c, nx, ny, _] = x_shape;
    let [_, ux, uy, uz] = gout.shape();
    let mut g = TensorGrid::zeros(x_shape);
    for ch in 0..c {
        let src = gout.channel(ch).to_vec();
        let dst = g.channel_mut(ch);
        for z in 0..uz {
            for yy in 0..uy {
                for xx in 0..ux {
                    dst[((z / 2) * ny + yy / 2) * nx + xx / 2] += src[(z * uy + yy) * ux + xx];
                }
            }
        }
    }
    g
}

/// Sinusoidal timestep embedding (sin half, then cos half).
pub fn timestep_embedding(t: usize) -> Vec<Real> {
    let half = TIME_EMBED_DIM / 2;
    let mut e = vec![0.0 as Real; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        e[i] = a.sin() as Real;
        e[half + i] = a.cos() as Real;
    }
    e
}

/// Per-channel shift `W·emb + b` of a time-bias layer.
pub fn time_shift(w: &[Real], b: &[Real], emb: &[Real]) -> Vec<Real> {
    b.iter()
        .enumerate()
        .map(|(c, &bc)| bc + w[c * TIME_EMBED_DIM..(c + 1) * TIME_EMBED_DIM].iter().zip(emb).map(|(a, e)| a * e).sum::<Real>())
        .collect()
}

pub fn global_pool_forward(x: &TensorGrid) -> TensorGrid {
    let c = x.channels();
    let s = x.sites() as f64;
    let data = (0..c).map(|ch| (x.channel(ch).iter().map(|&v| v as f64).sum::<f64>() / s) as Real).collect();
    TensorGrid::new([c, 1, 1, 1], data).expect("pool shape")
}

pub fn global_pool_backward(x_shape: [usize; 4], gout: &TensorGrid) -> TensorGrid {
    let mut g = TensorGrid::zeros(x_shape);
    let s = g.sites() as Real;
    for ch in 0..x_shape[0] {
        let v = gout.data()[ch] / s;
        g.channel_mut(ch).fill(v);
    }
    g
}

pub fn dense_forward(x: &TensorGrid, w: &[Real], b: &[Real], outputs: usize) -> TensorGrid {
    let inputs = x.len();
    let data = (0..outputs)
        .map(|o| b[o] + w[o * inputs..(o + 1) * inputs].iter().zip(x.data()).map(|(a, v)| a * v).sum::<Real>())
        .collect();
    TensorGrid::new([outputs, 1, 1, 1], data).expect("dense shape")
}

pub fn dense_backward(x: &TensorGrid, w: &[Real], gout: &TensorGrid, gw: &mut [Real], gb: &mut [Real]) -> TensorGrid {
    let inputs = x.len();
    let mut gx = TensorGrid::zeros(x.shape());
    for (o, &d) in gout.data().iter().enumerate() {
        gb[o] += d;
        for i in 0..inputs {
            gw[o * inputs + i] += d * x.data()[i];
            gx.data_mut()[i] += d * w[o * inputs + i];
        }
    }
    gx
}
