// Dense kernels used by the graph evaluator. All spatial ops are stride 1
// and shape preserving: convolutions pad by k/2 with zeros, pooling windows
// are 3x3 and only visit in-bounds positions.

/// Geometry of a batched feature map `[batch, channels, height, width]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Plane {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Plane {
    fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Valid `[lo, hi)` output range for a tap at offset `d` on an axis of length `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], p: Plane, out_ch: usize, k: usize) -> Vec<f64> {
    let area = p.area();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; p.batch * out_ch * area];
    for b in 0..p.batch {
        for co in 0..out_ch {
            let dst_plane = &mut out[(b * out_ch + co) * area..(b * out_ch + co + 1) * area];
            for ci in 0..p.channels {
                let src_plane = &x[(b * p.channels + ci) * area..(b * p.channels + ci + 1) * area];
                let wbase = (co * p.channels + ci) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(dy, p.height);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(dx, p.width);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &src_plane[sy * p.width..(sy + 1) * p.width];
                            let dst = &mut dst_plane[y * p.width..(y + 1) * p.width];
                            let sx0 = (x0 as isize + dx) as usize;
                            for (d, s) in dst[x0..x1].iter_mut().zip(&src[sx0..sx0 + (x1 - x0)]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight)`; either is skipped when not requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    p: Plane,
    out_ch: usize,
    k: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let area = p.area();
    let pad = (k / 2) as isize;
    let mut dx_buf = want_input.then(|| vec![0.0; x.len()]);
    let mut dw_buf = want_weight.then(|| vec![0.0; w.len()]);
    for b in 0..p.batch {
        for co in 0..out_ch {
            let g_plane = &grad[(b * out_ch + co) * area..(b * out_ch + co + 1) * area];
            for ci in 0..p.channels {
                let in_off = (b * p.channels + ci) * area;
                let wbase = (co * p.channels + ci) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(dy, p.height);
                    for kx in 0..k {
                        let dxo = kx as isize - pad;
                        let (x0, x1) = tap_range(dxo, p.width);
                        let sx0 = (x0 as isize + dxo) as usize;
                        let span = x1 - x0;
                        let wi = wbase + ky * k + kx;
                        let wv = w[wi];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let g = &g_plane[y * p.width + x0..y * p.width + x1];
                            let src_start = in_off + sy * p.width + sx0;
                            if let Some(dx) = dx_buf.as_mut() {
                                for (d, gv) in dx[src_start..src_start + span].iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                            if dw_buf.is_some() {
                                let s = &x[src_start..src_start + span];
                                acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if let Some(dw) = dw_buf.as_mut() {
                            dw[wi] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx_buf, dw_buf)
}

/// 3x3 max pool; the first maximal position in row-major window order wins.
pub(crate) fn maxpool3_forward(x: &[f64], p: Plane) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (plane_in, plane_out) in x.chunks(p.area()).zip(out.chunks_mut(p.area())) {
        for y in 0..p.height {
            for xx in 0..p.width {
                plane_out[y * p.width + xx] = plane_in[max_index(plane_in, p, y, xx)];
            }
        }
    }
    out
}

pub(crate) fn maxpool3_backward(x: &[f64], grad: &[f64], p: Plane) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    let area = p.area();
    for (plane, (plane_in, g)) in x.chunks(area).zip(grad.chunks(area)).enumerate() {
        let base = plane * area;
        for y in 0..p.height {
            for xx in 0..p.width {
                let src = max_index(plane_in, p, y, xx);
                dx[base + src] += g[y * p.width + xx];
            }
        }
    }
    dx
}

#[inline]
fn max_index(plane: &[f64], p: Plane, y: usize, x: usize) -> usize {
    let mut best = usize::MAX;
    for sy in y.saturating_sub(1)..(y + 2).min(p.height) {
        for sx in x.saturating_sub(1)..(x + 2).min(p.width) {
            let i = sy * p.width + sx;
            if best == usize::MAX || plane[i] > plane[best] {
                best = i;
            }
        }
    }
    best
}

#[inline]
fn window(y: usize, x: usize, p: Plane) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    (
        y.saturating_sub(1)..(y + 2).min(p.height),
        x.saturating_sub(1)..(x + 2).min(p.width),
    )
}

/// 3x3 average pool over in-bounds positions only.
pub(crate) fn avgpool3_forward(x: &[f64], p: Plane) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (plane_in, plane_out) in x.chunks(p.area()).zip(out.chunks_mut(p.area())) {
        for y in 0..p.height {
            for xx in 0..p.width {
                let (ry, rx) = window(y, xx, p);
                let count = (ry.len() * rx.len()) as f64;
                let mut acc = 0.0;
                for sy in ry {
                    for sx in rx.clone() {
                        acc += plane_in[sy * p.width + sx];
                    }
                }
                plane_out[y * p.width + xx] = acc / count;
            }
        }
    }
    out
}

pub(crate) fn avgpool3_backward(grad: &[f64], p: Plane) -> Vec<f64> {
    let mut dx = vec![0.0; grad.len()];
    let area = p.area();
    for (g, d) in grad.chunks(area).zip(dx.chunks_mut(area)) {
        for y in 0..p.height {
            for xx in 0..p.width {
                let (ry, rx) = window(y, xx, p);
                let share = g[y * p.width + xx] / (ry.len() * rx.len()) as f64;
                for sy in ry {
                    for sx in rx.clone() {
                        d[sy * p.width + sx] += share;
                    }
                }
            }
        }
    }
    dx
}
