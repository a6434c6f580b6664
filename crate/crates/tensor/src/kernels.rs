//! Raw numeric kernels shared by forward and backward passes.

/// Strided read-only matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix, optionally viewed transposed.
    pub fn new(data: &'a [f64], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                data,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Self {
                data,
                rs: cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c = beta * c + a * b` with `a: m x k`, `b: k x n`, `c` row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m as isize - 1) * a.rs + (k as isize - 1) * a.cs;
    let max_b = (k as isize - 1) * b.rs + (n as isize - 1) * b.cs;
    assert!(max_a >= 0 && (max_a as usize) < a.data.len());
    assert!(max_b >= 0 && (max_b as usize) < b.data.len());
    // SAFETY: the asserts above bound every strided access of `a` and `b`,
    // and `c` holds at least m * n contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Right-aligned numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` when read through the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let from_right = rank - 1 - i;
        if from_right < shape.len() {
            let d = shape[shape.len() - 1 - from_right];
            if d != 1 {
                strides[i] = acc;
            }
            acc *= d;
        }
    }
    strides
}

#[derive(Clone, Copy)]
enum BroadcastKind {
    Same,
    /// The named operand repeats as a contiguous block along leading axes.
    RepeatB,
    RepeatA,
    General,
}

/// Index plan for a broadcast binary op.
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    kind: BroadcastKind,
    a_len: usize,
    b_len: usize,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let out_shape = broadcast_shape(a, b)?;
        let a_len: usize = a.iter().product();
        let b_len: usize = b.iter().product();
        let kind = if a == b {
            BroadcastKind::Same
        } else if is_suffix(b, &out_shape) && a_len == out_shape.iter().product::<usize>() {
            BroadcastKind::RepeatB
        } else if is_suffix(a, &out_shape) && b_len == out_shape.iter().product::<usize>() {
            BroadcastKind::RepeatA
        } else {
            BroadcastKind::General
        };
        let a_strides = broadcast_strides(a, &out_shape);
        let b_strides = broadcast_strides(b, &out_shape);
        Some(Self {
            out_shape,
            kind,
            a_len,
            b_len,
            a_strides,
            b_strides,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.out_len();
        match self.kind {
            BroadcastKind::Same => (0..n).for_each(|i| f(i, i, i)),
            BroadcastKind::RepeatB => {
                let bl = self.b_len.max(1);
                for i in 0..n {
                    f(i, i, i % bl)
                }
            }
            BroadcastKind::RepeatA => {
                let al = self.a_len.max(1);
                for i in 0..n {
                    f(i, i % al, i)
                }
            }
            BroadcastKind::General => {
                let rank = self.out_shape.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for i in 0..n {
                    f(i, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += self.a_strides[d];
                        ib += self.b_strides[d];
                        if idx[d] < self.out_shape[d] {
                            break;
                        }
                        ia -= self.a_strides[d] * idx[d];
                        ib -= self.b_strides[d] * idx[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    // Leading ones in `short` are fine; they broadcast anyway.
    let trimmed: &[usize] = {
        let lead = short.iter().take_while(|&&d| d == 1).count();
        &short[lead..]
    };
    trimmed.len() <= long.len() && long[long.len() - trimmed.len()..] == *trimmed
}

/// Output spatial extent of a zero-padded convolution.
pub(crate) fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.k * self.k * self.ci
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls `[h, w, ci]` into `[ho * wo, k * k * ci]` patches, ordered (ky, kx, ci).
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.ho * g.wo * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.ci;
                    let dst = (ky * g.k + kx) * g.ci;
                    row[dst..dst + g.ci].copy_from_slice(&x[src..src + g.ci]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back onto the `[h, w, ci]` input gradient.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.ci;
                    let src = (ky * g.k + kx) * g.ci;
                    dx[dst..dst + g.ci]
                        .iter_mut()
                        .zip(&row[src..src + g.ci])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
/// `add` selects accumulate (`out += permuted`) instead of overwrite.
pub(crate) fn permute_into(x: &[f64], shape: &[usize], perm: &[usize], out: &mut [f64], add: bool) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    if n == 0 {
        return;
    }
    if rank == 0 {
        if add {
            out[0] += x[0];
        } else {
            out[0] = x[0];
        }
        return;
    }
    // Innermost output axis handled as a strided run.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut src_base = 0usize;
    let mut o = 0usize;
    while o < n {
        for j in 0..inner {
            let v = x[src_base + j * inner_stride];
            if add {
                out[o + j] += v;
            } else {
                out[o + j] = v;
            }
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            src_base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
