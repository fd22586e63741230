use std::collections::HashSet;

use crate::autodiff::fft;
use crate::error::{JpoError, Result};

/// Handle to a node on the active tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiffValue {
    pub(crate) id: usize,
}

impl DiffValue {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Max(usize, usize),
    Neg(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Pow(usize, f64),
    Softplus(usize, f64),
    Scale(usize, f64),
    #[allow(dead_code)] // constant retained for Debug output
    AddConst(usize, f64),
    MatMul(usize, usize),
    BiasRow(usize, usize),
    BiasChan(usize, usize),
    Conv1d(usize, usize),
    MaxPool1d(usize, Vec<u8>),
    Sum(usize),
    Mean(usize),
    NormSq(usize),
    SumRows(usize),
    MeanRows(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Reshape(usize),
    Column(usize, usize),
    MulCol(usize, usize),
    SubOuter(usize, usize),
    MaskRows(usize, Vec<bool>),
    Rfft(usize),
    Irfft(usize),
    ComplexScale(usize, Vec<f64>, Vec<f64>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Per-node gradient buffers produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` was reachable.
    pub fn wrt(&self, v: DiffValue) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient with unreachable inputs reported as exact zeros.
    pub fn wrt_or_zero(&self, v: DiffValue, len: usize) -> Vec<f64> {
        match self.wrt(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

/// Wengert list over dense f64 arrays.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Handle for an existing node id (for diagnostics).
    pub fn op_name(&self, id: usize) -> String {
        format!("{:?}", self.nodes[id].op)
    }

    pub fn value_at(&self, id: usize) -> DiffValue {
        DiffValue { id }
    }

    pub fn shape(&self, v: DiffValue) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn data(&self, v: DiffValue) -> &[f64] {
        &self.nodes[v.id].data
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> DiffValue {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { op, shape, data });
        DiffValue {
            id: self.nodes.len() - 1,
        }
    }

    /// Register a differentiable input.
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<DiffValue> {
        if numel(&shape) != data.len() {
            return Err(JpoError::ShapeMismatch {
                op: "input",
                detail: format!("shape {:?} does not match data length {}", shape, data.len()),
            });
        }
        Ok(self.push(Op::Leaf, shape, data))
    }

    /// Register a constant. Constants participate in the forward pass but
    /// gradients are typically not requested for them.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<DiffValue> {
        self.input(data, shape)
    }

    pub fn scalar(&mut self, v: f64) -> DiffValue {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary_shapes(
        &self,
        op: &'static str,
        a: DiffValue,
        b: DiffValue,
    ) -> Result<(Vec<usize>, bool, bool)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), false, false));
        }
        if numel(sa) == 1 {
            return Ok((sb.to_vec(), true, false));
        }
        if numel(sb) == 1 {
            return Ok((sa.to_vec(), false, true));
        }
        Err(JpoError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", sa, sb),
        })
    }

    fn ew2(
        &mut self,
        name: &'static str,
        a: DiffValue,
        b: DiffValue,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<DiffValue> {
        let (shape, ba, bb) = self.binary_shapes(name, a, b)?;
        let n = numel(&shape);
        let da = &self.nodes[a.id].data;
        let db = &self.nodes[b.id].data;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[if ba { 0 } else { i }];
            let y = db[if bb { 0 } else { i }];
            out.push(f(x, y));
        }
        Ok(self.push(make(a.id, b.id), shape, out))
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.ew2("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.ew2("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.ew2("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.ew2("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn max(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.ew2("max", a, b, |x, y| if y > x { y } else { x }, Op::Max)
    }

    // ---- elementwise unary --------------------------------------------------

    fn ew1(
        &mut self,
        a: DiffValue,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> DiffValue {
        let shape = self.nodes[a.id].shape.clone();
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| f(x)).collect();
        self.push(op, shape, out)
    }

    pub fn neg(&mut self, a: DiffValue) -> DiffValue {
        self.ew1(a, |x| -x, Op::Neg(a.id))
    }

    pub fn sin(&mut self, a: DiffValue) -> DiffValue {
        self.ew1(a, f64::sin, Op::Sin(a.id))
    }

    pub fn cos(&mut self, a: DiffValue) -> DiffValue {
        self.ew1(a, f64::cos, Op::Cos(a.id))
    }

    pub fn tanh(&mut self, a: DiffValue) -> DiffValue {
        self.ew1(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn exp(&mut self, a: DiffValue) -> DiffValue {
        self.ew1(a, f64::exp, Op::Exp(a.id))
    }

    pub fn log(&mut self, a: DiffValue) -> DiffValue {
        self.ew1(a, f64::ln, Op::Log(a.id))
    }

    pub fn abs(&mut self, a: DiffValue) -> DiffValue {
        self.ew1(a, f64::abs, Op::Abs(a.id))
    }

    pub fn pow(&mut self, a: DiffValue, p: f64) -> DiffValue {
        self.ew1(a, |x| x.powf(p), Op::Pow(a.id, p))
    }

    /// Softplus with sharpness: `ln(1 + e^{g x}) / g`.
    pub fn softplus(&mut self, a: DiffValue, sharpness: f64) -> DiffValue {
        let g = sharpness;
        self.ew1(
            a,
            |x| {
                let z = g * x;
                if z > 30.0 {
                    x
                } else {
                    z.exp().ln_1p() / g
                }
            },
            Op::Softplus(a.id, g),
        )
    }

    pub fn scale(&mut self, a: DiffValue, c: f64) -> DiffValue {
        self.ew1(a, |x| c * x, Op::Scale(a.id, c))
    }

    pub fn add_const(&mut self, a: DiffValue, c: f64) -> DiffValue {
        self.ew1(a, |x| x + c, Op::AddConst(a.id, c))
    }

    // ---- linear algebra -----------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(JpoError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = &self.nodes[a.id].data;
        let db = &self.nodes[b.id].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = da[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let row = &db[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * row[j];
                }
            }
        }
        Ok(self.push(Op::MatMul(a.id, b.id), vec![m, n], out))
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn bias_row(&mut self, x: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(JpoError::ShapeMismatch {
                op: "bias_row",
                detail: format!("{:?} + {:?}", sx, sb),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let dx = &self.nodes[x.id].data;
        let db = &self.nodes[b.id].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(dx[i * n + j] + db[j]);
            }
        }
        Ok(self.push(Op::BiasRow(x.id, b.id), sx, out))
    }

    /// `[B,C,L] + [C]` broadcast per channel.
    pub fn bias_chan(&mut self, x: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(JpoError::ShapeMismatch {
                op: "bias_chan",
                detail: format!("{:?} + {:?}", sx, sb),
            });
        }
        let (bsz, c, l) = (sx[0], sx[1], sx[2]);
        let dx = &self.nodes[x.id].data;
        let db = &self.nodes[b.id].data;
        let mut out = Vec::with_capacity(bsz * c * l);
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                for li in 0..l {
                    out.push(dx[base + li] + db[ci]);
                }
            }
        }
        Ok(self.push(Op::BiasChan(x.id, b.id), sx, out))
    }

    /// 1D convolution, kernel size 3, zero padding, length preserved.
    /// input `[B,Cin,L]`, kernel `[Cout,Cin,3]` -> `[B,Cout,L]`.
    pub fn conv1d(&mut self, x: DiffValue, k: DiffValue) -> Result<DiffValue> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 3 || sk.len() != 3 || sk[2] != 3 || sx[1] != sk[1] {
            return Err(JpoError::ShapeMismatch {
                op: "conv1d",
                detail: format!("input {:?}, kernel {:?}", sx, sk),
            });
        }
        let (bsz, cin, l) = (sx[0], sx[1], sx[2]);
        let cout = sk[0];
        let dx = &self.nodes[x.id].data;
        let dk = &self.nodes[k.id].data;
        let mut out = vec![0.0; bsz * cout * l];
        for b in 0..bsz {
            for co in 0..cout {
                let obase = (b * cout + co) * l;
                for ci in 0..cin {
                    let ibase = (b * cin + ci) * l;
                    let kbase = (co * cin + ci) * 3;
                    let (k0, k1, k2) = (dk[kbase], dk[kbase + 1], dk[kbase + 2]);
                    let xs = &dx[ibase..ibase + l];
                    let os = &mut out[obase..obase + l];
                    for li in 0..l {
                        let left = if li > 0 { xs[li - 1] } else { 0.0 };
                        let right = if li + 1 < l { xs[li + 1] } else { 0.0 };
                        os[li] += k0 * left + k1 * xs[li] + k2 * right;
                    }
                }
            }
        }
        Ok(self.push(Op::Conv1d(x.id, k.id), vec![bsz, cout, l], out))
    }

    /// 1D max-pool, window 2: `[B,C,L] -> [B,C,L/2]`.
    pub fn max_pool1d(&mut self, x: DiffValue) -> Result<DiffValue> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[2] % 2 != 0 {
            return Err(JpoError::ShapeMismatch {
                op: "max_pool1d",
                detail: format!("input {:?} (length must be even)", sx),
            });
        }
        let (bsz, c, l) = (sx[0], sx[1], sx[2]);
        let lo = l / 2;
        let dx = &self.nodes[x.id].data;
        let mut out = Vec::with_capacity(bsz * c * lo);
        let mut arg = Vec::with_capacity(bsz * c * lo);
        for bc in 0..bsz * c {
            let base = bc * l;
            for li in 0..lo {
                let a = dx[base + 2 * li];
                let b = dx[base + 2 * li + 1];
                if b > a {
                    out.push(b);
                    arg.push(1u8);
                } else {
                    out.push(a);
                    arg.push(0u8);
                }
            }
        }
        Ok(self.push(Op::MaxPool1d(x.id, arg), vec![bsz, c, lo], out))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: DiffValue) -> DiffValue {
        let s: f64 = self.nodes[a.id].data.iter().sum();
        self.push(Op::Sum(a.id), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: DiffValue) -> DiffValue {
        let n = self.nodes[a.id].data.len() as f64;
        let s: f64 = self.nodes[a.id].data.iter().sum();
        self.push(Op::Mean(a.id), vec![1], vec![s / n])
    }

    /// Squared L2 norm of all entries.
    pub fn norm_sq(&mut self, a: DiffValue) -> DiffValue {
        let s: f64 = self.nodes[a.id].data.iter().map(|x| x * x).sum();
        self.push(Op::NormSq(a.id), vec![1], vec![s])
    }

    pub fn sum_rows(&mut self, a: DiffValue) -> Result<DiffValue> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(JpoError::ShapeMismatch {
                op: "sum_rows",
                detail: format!("{:?}", sa),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let da = &self.nodes[a.id].data;
        let out: Vec<f64> = (0..m).map(|i| da[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(self.push(Op::SumRows(a.id), vec![m], out))
    }

    pub fn mean_rows(&mut self, a: DiffValue) -> Result<DiffValue> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(JpoError::ShapeMismatch {
                op: "mean_rows",
                detail: format!("{:?}", sa),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let da = &self.nodes[a.id].data;
        let out: Vec<f64> = (0..m)
            .map(|i| da[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        Ok(self.push(Op::MeanRows(a.id), vec![m], out))
    }

    // ---- structure ----------------------------------------------------------

    pub fn concat(&mut self, parts: &[DiffValue], axis: usize) -> Result<DiffValue> {
        if parts.is_empty() {
            return Err(JpoError::InvalidArg("concat of zero parts".into()));
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(JpoError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {} out of rank {}", axis, rank),
            });
        }
        let mut shape = self.shape(parts[0]).to_vec();
        shape[axis] = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != rank {
                return Err(JpoError::ShapeMismatch {
                    op: "concat",
                    detail: format!("rank mismatch: {:?} vs {:?}", sp, self.shape(parts[0])),
                });
            }
            for (i, &d) in sp.iter().enumerate() {
                if i != axis && d != self.shape(parts[0])[i] {
                    return Err(JpoError::ShapeMismatch {
                        op: "concat",
                        detail: format!("part shape {:?} incompatible on axis {}", sp, i),
                    });
                }
            }
            shape[axis] += sp[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total_axis = shape[axis];
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &p in parts {
            let pa = self.shape(p)[axis];
            let dp = &self.nodes[p.id].data;
            for o in 0..outer {
                let src = &dp[o * pa * inner..(o + 1) * pa * inner];
                let dst_base = (o * total_axis + offset) * inner;
                out[dst_base..dst_base + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Op::Concat(ids, axis), shape, out))
    }

    /// Contiguous slice along axis 0.
    pub fn slice(&mut self, a: DiffValue, start: usize, len: usize) -> Result<DiffValue> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || start + len > sa[0] {
            return Err(JpoError::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {start}+{len}) out of {:?}", sa),
            });
        }
        let inner: usize = sa[1..].iter().product();
        let data = self.nodes[a.id].data[start * inner..(start + len) * inner].to_vec();
        let mut shape = sa.clone();
        shape[0] = len;
        Ok(self.push(Op::Slice(a.id, start, len), shape, data))
    }

    pub fn reshape(&mut self, a: DiffValue, shape: Vec<usize>) -> Result<DiffValue> {
        if numel(&shape) != self.nodes[a.id].data.len() {
            return Err(JpoError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        let data = self.nodes[a.id].data.clone();
        Ok(self.push(Op::Reshape(a.id), shape, data))
    }

    /// Column `j` of `[B,n] -> [B]`.
    pub fn column(&mut self, a: DiffValue, j: usize) -> Result<DiffValue> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || j >= sa[1] {
            return Err(JpoError::ShapeMismatch {
                op: "column",
                detail: format!("column {} of {:?}", j, sa),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let da = &self.nodes[a.id].data;
        let out: Vec<f64> = (0..m).map(|i| da[i * n + j]).collect();
        Ok(self.push(Op::Column(a.id, j), vec![m], out))
    }

    /// Row-scalar product: `v[B] * m[B,L] -> [B,L]`.
    pub fn mul_col(&mut self, v: DiffValue, m: DiffValue) -> Result<DiffValue> {
        let sv = self.shape(v).to_vec();
        let sm = self.shape(m).to_vec();
        if sv.len() != 1 || sm.len() != 2 || sv[0] != sm[0] {
            return Err(JpoError::ShapeMismatch {
                op: "mul_col",
                detail: format!("{:?} * {:?}", sv, sm),
            });
        }
        let (b, l) = (sm[0], sm[1]);
        let dv = &self.nodes[v.id].data;
        let dm = &self.nodes[m.id].data;
        let mut out = Vec::with_capacity(b * l);
        for i in 0..b {
            for j in 0..l {
                out.push(dv[i] * dm[i * l + j]);
            }
        }
        Ok(self.push(Op::MulCol(v.id, m.id), sm, out))
    }

    /// Outer difference: `row[L], col[B] -> [B,L]` with entries `row[l] - col[b]`.
    pub fn sub_outer(&mut self, row: DiffValue, col: DiffValue) -> Result<DiffValue> {
        let sr = self.shape(row).to_vec();
        let sc = self.shape(col).to_vec();
        if sr.len() != 1 || sc.len() != 1 {
            return Err(JpoError::ShapeMismatch {
                op: "sub_outer",
                detail: format!("{:?}, {:?}", sr, sc),
            });
        }
        let (l, b) = (sr[0], sc[0]);
        let dr = &self.nodes[row.id].data;
        let dc = &self.nodes[col.id].data;
        let mut out = Vec::with_capacity(b * l);
        for i in 0..b {
            for j in 0..l {
                out.push(dr[j] - dc[i]);
            }
        }
        Ok(self.push(Op::SubOuter(row.id, col.id), vec![b, l], out))
    }

    /// Keep axis-0 rows where `mask` is true and zero the rest; gradients of
    /// zeroed rows are exactly 0.
    pub fn mask_rows(&mut self, a: DiffValue, mask: &[bool]) -> Result<DiffValue> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || mask.len() != sa[0] {
            return Err(JpoError::ShapeMismatch {
                op: "mask_rows",
                detail: format!("mask length {} vs shape {:?}", mask.len(), sa),
            });
        }
        let inner: usize = sa[1..].iter().product();
        let mut data = self.nodes[a.id].data.clone();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                for v in &mut data[i * inner..(i + 1) * inner] {
                    *v = 0.0;
                }
            }
        }
        Ok(self.push(Op::MaskRows(a.id, mask.to_vec()), sa, data))
    }

    // ---- spectral -----------------------------------------------------------

    fn fft_check(&self, op: &'static str, a: DiffValue) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let n = *sa.last().ok_or(JpoError::ShapeMismatch {
            op,
            detail: "rank-0 input".into(),
        })?;
        if !fft::is_power_of_two(n) {
            return Err(JpoError::NonPowerOfTwoFft(n));
        }
        Ok((numel(sa) / n, n))
    }

    /// Forward real DFT over the last axis (packed layout, see [`fft`]).
    pub fn rfft(&mut self, a: DiffValue) -> Result<DiffValue> {
        let (rows, n) = self.fft_check("rfft", a)?;
        let da = &self.nodes[a.id].data;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            fft::rfft_packed(&da[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Rfft(a.id), shape, out))
    }

    /// Inverse real DFT over the last axis (packed layout).
    pub fn irfft(&mut self, a: DiffValue) -> Result<DiffValue> {
        let (rows, n) = self.fft_check("irfft", a)?;
        let da = &self.nodes[a.id].data;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            fft::irfft_packed(&da[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Irfft(a.id), shape, out))
    }

    /// Per-mode complex multiply of a packed spectrum by fixed coefficients
    /// `(cr + i ci)` of length n/2+1. The imaginary coefficient must vanish at
    /// DC and Nyquist so the result stays a real-signal spectrum.
    pub fn complex_scale(&mut self, a: DiffValue, cr: &[f64], ci: &[f64]) -> Result<DiffValue> {
        let (rows, n) = self.fft_check("complex_scale", a)?;
        let half = n / 2;
        if cr.len() != half + 1 || ci.len() != half + 1 {
            return Err(JpoError::ShapeMismatch {
                op: "complex_scale",
                detail: format!("coefficient length {} vs n/2+1 = {}", cr.len(), half + 1),
            });
        }
        if ci[0] != 0.0 || ci[half] != 0.0 {
            return Err(JpoError::InvalidArg(
                "complex_scale: imaginary coefficient must be 0 at DC and Nyquist".into(),
            ));
        }
        let da = &self.nodes[a.id].data;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let s = &da[r * n..(r + 1) * n];
            let o = &mut out[r * n..(r + 1) * n];
            o[0] = cr[0] * s[0];
            o[half] = cr[half] * s[half];
            for k in 1..half {
                let (re, im) = (s[k], s[half + k]);
                o[k] = cr[k] * re - ci[k] * im;
                o[half + k] = cr[k] * im + ci[k] * re;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::ComplexScale(a.id, cr.to_vec(), ci.to_vec()), shape, out))
    }

    // ---- backward -----------------------------------------------------------

    /// Gradient of a scalar output with respect to every reachable node.
    pub fn backward(&self, output: DiffValue) -> Result<Gradients> {
        self.backward_barrier(output, &[])
    }

    /// As [`Tape::backward`], but propagation stops at the barrier nodes:
    /// their gradients are accumulated and not pushed into their parents.
    pub fn backward_barrier(&self, output: DiffValue, barrier: &[DiffValue]) -> Result<Gradients> {
        let out_node = &self.nodes[output.id];
        if out_node.data.len() != 1 {
            return Err(JpoError::NonScalarOutput(out_node.shape.clone()));
        }
        let barrier: HashSet<usize> = barrier.iter().map(|v| v.id).collect();
        Ok(self.propagate(vec![(output.id, vec![1.0])], &barrier))
    }

    /// Continue a backward pass from explicit gradient seeds at interior nodes.
    pub fn backward_from_seeds(&self, seeds: &[(DiffValue, Vec<f64>)]) -> Result<Gradients> {
        for (v, g) in seeds {
            if g.len() != self.nodes[v.id].data.len() {
                return Err(JpoError::ShapeMismatch {
                    op: "backward_from_seeds",
                    detail: format!(
                        "seed length {} vs node length {}",
                        g.len(),
                        self.nodes[v.id].data.len()
                    ),
                });
            }
        }
        let init = seeds.iter().map(|(v, g)| (v.id, g.clone())).collect();
        Ok(self.propagate(init, &HashSet::new()))
    }

    fn propagate(&self, init: Vec<(usize, Vec<f64>)>, barrier: &HashSet<usize>) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0usize;
        for (id, g) in init {
            top = top.max(id);
            match &mut grads[id] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        for id in (0..=top).rev() {
            if grads[id].is_none() || barrier.contains(&id) {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.push_to_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
        if grads[id].is_none() {
            grads[id] = Some(vec![0.0; len]);
        }
        grads[id].as_mut().unwrap()
    }

    fn push_to_parents(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let plen = |pid: usize| self.nodes[pid].data.len();
        // Elementwise binary ops may broadcast a scalar operand.
        let bin = |grads: &mut [Option<Vec<f64>>],
                   pid: usize,
                   f: &mut dyn FnMut(usize) -> f64| {
            let n = plen(pid);
            let acc = Self::accumulate(grads, pid, n);
            if n == 1 {
                let mut s = 0.0;
                for i in 0..g.len() {
                    s += f(i);
                }
                acc[0] += s;
            } else {
                for (i, slot) in acc.iter_mut().enumerate() {
                    *slot += f(i);
                }
            }
        };
        let pick = |data: &[f64], i: usize| if data.len() == 1 { data[0] } else { data[i] };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                bin(grads, *a, &mut |i| g[i]);
                bin(grads, *b, &mut |i| g[i]);
            }
            Op::Sub(a, b) => {
                bin(grads, *a, &mut |i| g[i]);
                bin(grads, *b, &mut |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                bin(grads, *a, &mut |i| g[i] * pick(db, i));
                bin(grads, *b, &mut |i| g[i] * pick(da, i));
            }
            Op::Div(a, b) => {
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                bin(grads, *a, &mut |i| g[i] / pick(db, i));
                bin(grads, *b, &mut |i| {
                    let bv = pick(db, i);
                    -g[i] * pick(da, i) / (bv * bv)
                });
            }
            Op::Max(a, b) => {
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                bin(grads, *a, &mut |i| {
                    if pick(db, i) > pick(da, i) {
                        0.0
                    } else {
                        g[i]
                    }
                });
                bin(grads, *b, &mut |i| {
                    if pick(db, i) > pick(da, i) {
                        g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Neg(a) => bin(grads, *a, &mut |i| -g[i]),
            Op::Sin(a) => {
                let da = &self.nodes[*a].data;
                bin(grads, *a, &mut |i| g[i] * da[i].cos());
            }
            Op::Cos(a) => {
                let da = &self.nodes[*a].data;
                bin(grads, *a, &mut |i| -g[i] * da[i].sin());
            }
            Op::Tanh(a) => {
                let y = &node.data;
                bin(grads, *a, &mut |i| g[i] * (1.0 - y[i] * y[i]));
            }
            Op::Exp(a) => {
                let y = &node.data;
                bin(grads, *a, &mut |i| g[i] * y[i]);
            }
            Op::Log(a) => {
                let da = &self.nodes[*a].data;
                bin(grads, *a, &mut |i| g[i] / da[i]);
            }
            Op::Abs(a) => {
                let da = &self.nodes[*a].data;
                bin(grads, *a, &mut |i| g[i] * da[i].signum() * if da[i] == 0.0 { 0.0 } else { 1.0 });
            }
            Op::Pow(a, p) => {
                let da = &self.nodes[*a].data;
                let p = *p;
                bin(grads, *a, &mut |i| g[i] * p * da[i].powf(p - 1.0));
            }
            Op::Softplus(a, sharp) => {
                let da = &self.nodes[*a].data;
                let s = *sharp;
                bin(grads, *a, &mut |i| {
                    let z = s * da[i];
                    let sig = if z > 30.0 {
                        1.0
                    } else if z < -30.0 {
                        0.0
                    } else {
                        1.0 / (1.0 + (-z).exp())
                    };
                    g[i] * sig
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                bin(grads, *a, &mut |i| g[i] * c);
            }
            Op::AddConst(a, _) => bin(grads, *a, &mut |i| g[i]),
            Op::MatMul(a, b) => {
                let sa = &self.nodes[*a].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[*b].shape[1];
                let db = self.nodes[*b].data.clone();
                {
                    let acc = Self::accumulate(grads, *a, m * k);
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * db[l * n + j];
                            }
                            acc[i * k + l] += s;
                        }
                    }
                }
                let da = &self.nodes[*a].data;
                let acc = Self::accumulate(grads, *b, k * n);
                for l in 0..k {
                    for i in 0..m {
                        let av = da[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            acc[l * n + j] += av * g[i * n + j];
                        }
                    }
                }
            }
            Op::BiasRow(x, b) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                {
                    let acc = Self::accumulate(grads, *x, m * n);
                    for (slot, gv) in acc.iter_mut().zip(g) {
                        *slot += gv;
                    }
                }
                let acc = Self::accumulate(grads, *b, n);
                for i in 0..m {
                    for j in 0..n {
                        acc[j] += g[i * n + j];
                    }
                }
            }
            Op::BiasChan(x, b) => {
                let (bsz, c, l) = (node.shape[0], node.shape[1], node.shape[2]);
                {
                    let acc = Self::accumulate(grads, *x, bsz * c * l);
                    for (slot, gv) in acc.iter_mut().zip(g) {
                        *slot += gv;
                    }
                }
                let acc = Self::accumulate(grads, *b, c);
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * l;
                        acc[ci] += g[base..base + l].iter().sum::<f64>();
                    }
                }
            }
            Op::Conv1d(x, k) => {
                let sx = self.nodes[*x].shape.clone();
                let (bsz, cin, l) = (sx[0], sx[1], sx[2]);
                let cout = self.nodes[*k].shape[0];
                let dk = self.nodes[*k].data.clone();
                {
                    let acc = Self::accumulate(grads, *x, bsz * cin * l);
                    for b in 0..bsz {
                        for co in 0..cout {
                            let obase = (b * cout + co) * l;
                            for ci in 0..cin {
                                let ibase = (b * cin + ci) * l;
                                let kbase = (co * cin + ci) * 3;
                                let (k0, k1, k2) = (dk[kbase], dk[kbase + 1], dk[kbase + 2]);
                                for li in 0..l {
                                    let gv = g[obase + li];
                                    if li > 0 {
                                        acc[ibase + li - 1] += k0 * gv;
                                    }
                                    acc[ibase + li] += k1 * gv;
                                    if li + 1 < l {
                                        acc[ibase + li + 1] += k2 * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                let dx = &self.nodes[*x].data;
                let acc = Self::accumulate(grads, *k, cout * cin * 3);
                for b in 0..bsz {
                    for co in 0..cout {
                        let obase = (b * cout + co) * l;
                        for ci in 0..cin {
                            let ibase = (b * cin + ci) * l;
                            let kbase = (co * cin + ci) * 3;
                            let mut s0 = 0.0;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for li in 0..l {
                                let gv = g[obase + li];
                                if li > 0 {
                                    s0 += dx[ibase + li - 1] * gv;
                                }
                                s1 += dx[ibase + li] * gv;
                                if li + 1 < l {
                                    s2 += dx[ibase + li + 1] * gv;
                                }
                            }
                            acc[kbase] += s0;
                            acc[kbase + 1] += s1;
                            acc[kbase + 2] += s2;
                        }
                    }
                }
            }
            Op::MaxPool1d(x, arg) => {
                let lo = node.shape[2];
                let l = lo * 2;
                let rows = node.shape[0] * node.shape[1];
                let acc = Self::accumulate(grads, *x, rows * l);
                for bc in 0..rows {
                    for li in 0..lo {
                        let oi = bc * lo + li;
                        acc[bc * l + 2 * li + arg[oi] as usize] += g[oi];
                    }
                }
            }
            Op::Sum(a) => {
                let n = plen(*a);
                let acc = Self::accumulate(grads, *a, n);
                for slot in acc.iter_mut() {
                    *slot += g[0];
                }
            }
            Op::Mean(a) => {
                let n = plen(*a);
                let gv = g[0] / n as f64;
                let acc = Self::accumulate(grads, *a, n);
                for slot in acc.iter_mut() {
                    *slot += gv;
                }
            }
            Op::NormSq(a) => {
                let da = &self.nodes[*a].data;
                let acc = Self::accumulate(grads, *a, da.len());
                for (slot, &x) in acc.iter_mut().zip(da) {
                    *slot += 2.0 * x * g[0];
                }
            }
            Op::SumRows(a) => {
                let sa = &self.nodes[*a].shape;
                let (m, n) = (sa[0], sa[1]);
                let acc = Self::accumulate(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        acc[i * n + j] += g[i];
                    }
                }
            }
            Op::MeanRows(a) => {
                let sa = &self.nodes[*a].shape;
                let (m, n) = (sa[0], sa[1]);
                let acc = Self::accumulate(grads, *a, m * n);
                for i in 0..m {
                    let gv = g[i] / n as f64;
                    for j in 0..n {
                        acc[i * n + j] += gv;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let total_axis = node.shape[*axis];
                let mut offset = 0;
                for &pid in parts {
                    let pa = self.nodes[pid].shape[*axis];
                    let n = plen(pid);
                    let acc = Self::accumulate(grads, pid, n);
                    for o in 0..outer {
                        let src_base = (o * total_axis + offset) * inner;
                        let dst_base = o * pa * inner;
                        for i in 0..pa * inner {
                            acc[dst_base + i] += g[src_base + i];
                        }
                    }
                    offset += pa;
                }
            }
            Op::Slice(a, start, _len) => {
                let sa = &self.nodes[*a].shape;
                let inner: usize = sa[1..].iter().product();
                let n = plen(*a);
                let acc = Self::accumulate(grads, *a, n);
                for (i, gv) in g.iter().enumerate() {
                    acc[start * inner + i] += gv;
                }
            }
            Op::Reshape(a) => {
                let n = plen(*a);
                let acc = Self::accumulate(grads, *a, n);
                for (slot, gv) in acc.iter_mut().zip(g) {
                    *slot += gv;
                }
            }
            Op::Column(a, j) => {
                let sa = &self.nodes[*a].shape;
                let (m, n) = (sa[0], sa[1]);
                let acc = Self::accumulate(grads, *a, m * n);
                for i in 0..m {
                    acc[i * n + j] += g[i];
                }
            }
            Op::MulCol(v, m) => {
                let sm = &self.nodes[*m].shape;
                let (b, l) = (sm[0], sm[1]);
                let dm = &self.nodes[*m].data;
                {
                    let acc = Self::accumulate(grads, *v, b);
                    for i in 0..b {
                        let mut s = 0.0;
                        for j in 0..l {
                            s += g[i * l + j] * dm[i * l + j];
                        }
                        acc[i] += s;
                    }
                }
                let dv = &self.nodes[*v].data;
                let acc = Self::accumulate(grads, *m, b * l);
                for i in 0..b {
                    for j in 0..l {
                        acc[i * l + j] += g[i * l + j] * dv[i];
                    }
                }
            }
            Op::SubOuter(row, col) => {
                let l = self.nodes[*row].data.len();
                let b = self.nodes[*col].data.len();
                {
                    let acc = Self::accumulate(grads, *row, l);
                    for i in 0..b {
                        for j in 0..l {
                            acc[j] += g[i * l + j];
                        }
                    }
                }
                let acc = Self::accumulate(grads, *col, b);
                for i in 0..b {
                    acc[i] -= g[i * l..(i + 1) * l].iter().sum::<f64>();
                }
            }
            Op::MaskRows(a, mask) => {
                let inner = node.data.len() / node.shape[0];
                let n = plen(*a);
                let acc = Self::accumulate(grads, *a, n);
                for (i, &keep) in mask.iter().enumerate() {
                    if keep {
                        for j in 0..inner {
                            acc[i * inner + j] += g[i * inner + j];
                        }
                    }
                }
            }
            Op::Rfft(a) => {
                let n = *node.shape.last().unwrap();
                let rows = node.data.len() / n;
                let acc = Self::accumulate(grads, *a, rows * n);
                let mut buf = vec![0.0; n];
                for r in 0..rows {
                    fft::rfft_vjp(&g[r * n..(r + 1) * n], &mut buf);
                    for (slot, &v) in acc[r * n..(r + 1) * n].iter_mut().zip(&buf) {
                        *slot += v;
                    }
                }
            }
            Op::Irfft(a) => {
                let n = *node.shape.last().unwrap();
                let rows = node.data.len() / n;
                let acc = Self::accumulate(grads, *a, rows * n);
                let mut buf = vec![0.0; n];
                for r in 0..rows {
                    fft::irfft_vjp(&g[r * n..(r + 1) * n], &mut buf);
                    for (slot, &v) in acc[r * n..(r + 1) * n].iter_mut().zip(&buf) {
                        *slot += v;
                    }
                }
            }
            Op::ComplexScale(a, cr, ci) => {
                // Transpose of the per-mode complex multiply.
                let n = *node.shape.last().unwrap();
                let half = n / 2;
                let rows = node.data.len() / n;
                let acc = Self::accumulate(grads, *a, rows * n);
                for r in 0..rows {
                    let gs = &g[r * n..(r + 1) * n];
                    let os = &mut acc[r * n..(r + 1) * n];
                    os[0] += cr[0] * gs[0];
                    os[half] += cr[half] * gs[half];
                    for k in 1..half {
                        let (gre, gim) = (gs[k], gs[half + k]);
                        os[k] += cr[k] * gre + ci[k] * gim;
                        os[half + k] += -ci[k] * gre + cr[k] * gim;
                    }
                }
            }
        }
    }
}
