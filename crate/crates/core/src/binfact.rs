//! Binary-factor weight formats.
//!
//! `Ŵ = U·Vᵀ` with `U = S_a ⊙ (A·Qᵀ)` (`N×R`) and `V = S_b ⊙ (B·Gᵀ)` (`M×R`),
//! where `S_a`, `S_b` are sign matrices and `A, Q, B, G` have `ℓ` columns.
//! DBF is the `ℓ = 1` case with `G` fixed to ones, i.e. `D_a S_a D_m S_bᵀ D_b`
//! with `a = A`, `m = Q`, `b = B`.

use half::f16;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{pack_bits, read_bits};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryFormat {
    Dbf,
    Mdbf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryFactorMatrix {
    format: BinaryFormat,
    rows: usize,
    cols: usize,
    rank: usize,
    ell: usize,
    sa: Vec<i8>,
    sb: Vec<i8>,
    a_env: Vec<f32>,
    q_env: Vec<f32>,
    b_env: Vec<f32>,
    g_env: Vec<f32>,
}

pub fn sign_of(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

impl BinaryFactorMatrix {
    /// DBF from its five factors: signs `S_a` (`N×R`), `S_b` (`M×R`) and
    /// the diagonals `a` (N), `m` (R), `b` (M).
    pub fn dbf(rows: usize, cols: usize, sa: Vec<i8>, sb: Vec<i8>, a: Vec<f32>, m: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        let rank = m.len();
        let g = vec![1.0; rank];
        Self::assemble(BinaryFormat::Dbf, rows, cols, rank, 1, sa, sb, a, m, b, g)
    }

    /// MDBF with envelopes `A` (`N×ℓ`), `Q` (`R×ℓ`), `B` (`M×ℓ`), `G` (`R×ℓ`), row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn mdbf(
        rows: usize,
        cols: usize,
        rank: usize,
        ell: usize,
        sa: Vec<i8>,
        sb: Vec<i8>,
        a_env: Vec<f32>,
        q_env: Vec<f32>,
        b_env: Vec<f32>,
        g_env: Vec<f32>,
    ) -> Result<Self> {
        Self::assemble(BinaryFormat::Mdbf, rows, cols, rank, ell, sa, sb, a_env, q_env, b_env, g_env)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        format: BinaryFormat,
        rows: usize,
        cols: usize,
        rank: usize,
        ell: usize,
        sa: Vec<i8>,
        sb: Vec<i8>,
        a_env: Vec<f32>,
        q_env: Vec<f32>,
        b_env: Vec<f32>,
        g_env: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || rank == 0 || ell == 0 {
            return Err(Error::shape("binary factorization needs positive dimensions, rank and envelope rank"));
        }
        if format == BinaryFormat::Dbf && ell != 1 {
            return Err(Error::invalid("DBF has envelope rank 1"));
        }
        let sizes = [
            (sa.len(), rows * rank, "S_a"),
            (sb.len(), cols * rank, "S_b"),
            (a_env.len(), rows * ell, "A"),
            (q_env.len(), rank * ell, "Q"),
            (b_env.len(), cols * ell, "B"),
            (g_env.len(), rank * ell, "G"),
        ];
        for (got, want, name) in sizes {
            if got != want {
                return Err(Error::shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if sa.iter().chain(&sb).any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("sign matrices must contain only ±1"));
        }
        if a_env.iter().chain(&q_env).chain(&b_env).chain(&g_env).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite envelope entry"));
        }
        if format == BinaryFormat::Dbf && g_env.iter().any(|&g| g != 1.0) {
            return Err(Error::invalid("DBF output envelope must be all ones"));
        }
        Ok(Self { format, rows, cols, rank, ell, sa, sb, a_env, q_env, b_env, g_env })
    }

    pub fn format(&self) -> BinaryFormat {
        self.format
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn signs_a(&self) -> &[i8] {
        &self.sa
    }

    pub fn signs_b(&self) -> &[i8] {
        &self.sb
    }

    pub fn envelopes(&self) -> (&[f32], &[f32], &[f32], &[f32]) {
        (&self.a_env, &self.q_env, &self.b_env, &self.g_env)
    }

    /// `U = S_a ⊙ (A·Qᵀ)`.
    pub fn left_factor(&self) -> DMatrix<f64> {
        envelope_factor(&self.sa, &self.a_env, &self.q_env, self.rows, self.rank, self.ell)
    }

    /// `V = S_b ⊙ (B·Gᵀ)`.
    pub fn right_factor(&self) -> DMatrix<f64> {
        envelope_factor(&self.sb, &self.b_env, &self.g_env, self.cols, self.rank, self.ell)
    }

    pub fn dequantize_f64(&self) -> DMatrix<f64> {
        self.left_factor() * self.right_factor().transpose()
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_f64(&self.dequantize_f64())
    }

    pub fn num_params(&self) -> usize {
        self.a_env.len() + self.q_env.len() + self.b_env.len()
            + if self.format == BinaryFormat::Mdbf { self.g_env.len() } else { 0 }
    }

    pub fn storage_bits(&self) -> usize {
        format_bits(self.format, self.rows, self.cols, self.rank, self.ell)
    }

    pub fn storage_bytes(&self) -> usize {
        ((self.rows + self.cols) * self.rank).div_ceil(8) + 2 * self.num_params()
    }

    /// Real parameters rounded to half precision, as stored on disk.
    pub fn to_storage(&self) -> Self {
        let r = |v: &[f32]| v.iter().map(|&x| f16::from_f32(x).to_f32()).collect::<Vec<_>>();
        Self { a_env: r(&self.a_env), q_env: r(&self.q_env), b_env: r(&self.b_env), g_env: r(&self.g_env), ..self.clone() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let signs = self.sa.iter().chain(&self.sb).map(|&s| u32::from(s < 0));
        let mut out = pack_bits(signs, 1, self.sa.len() + self.sb.len());
        let mut put = |v: &[f32]| {
            for &x in v {
                out.extend_from_slice(&f16::from_f32(x).to_le_bytes());
            }
        };
        put(&self.a_env);
        put(&self.q_env);
        put(&self.b_env);
        if self.format == BinaryFormat::Mdbf {
            put(&self.g_env);
        }
        out
    }

    pub fn decode(bytes: &[u8], format: BinaryFormat, rows: usize, cols: usize, rank: usize, ell: usize) -> Result<Self> {
        if format == BinaryFormat::Dbf && ell != 1 {
            return Err(Error::Format("DBF tensor with envelope rank other than 1".into()));
        }
        let ns = (rows + cols) * rank;
        let sign_bytes = ns.div_ceil(8);
        let n_params = (rows + rank + cols) * ell + if format == BinaryFormat::Mdbf { rank * ell } else { 0 };
        let expected = sign_bytes + 2 * n_params;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "binary-factor payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let signs: Vec<i8> = (0..ns).map(|k| if read_bits(bytes, k, 1) == 1 { -1 } else { 1 }).collect();
        let (sa, sb) = signs.split_at(rows * rank);
        let mut p = sign_bytes;
        let mut take = |n: usize| {
            let v: Vec<f32> = (0..n)
                .map(|k| f16::from_le_bytes([bytes[p + 2 * k], bytes[p + 2 * k + 1]]).to_f32())
                .collect();
            p += 2 * n;
            v
        };
        let a = take(rows * ell);
        let q = take(rank * ell);
        let b = take(cols * ell);
        let g = if format == BinaryFormat::Mdbf { take(rank * ell) } else { vec![1.0; rank] };
        Self::assemble(format, rows, cols, rank, ell, sa.to_vec(), sb.to_vec(), a, q, b, g)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

fn envelope_factor(signs: &[i8], outer: &[f32], inner: &[f32], n: usize, r: usize, ell: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, r, |i, k| {
        let env: f64 = (0..ell).map(|l| outer[i * ell + l] as f64 * inner[k * ell + l] as f64).sum();
        signs[i * r + k] as f64 * env
    })
}

/// Bits used by a format: sign planes plus 16-bit real parameters.
pub fn format_bits(format: BinaryFormat, n: usize, m: usize, r: usize, ell: usize) -> usize {
    let signs = n * r + m * r;
    match format {
        BinaryFormat::Dbf => signs + 16 * (n + m + r),
        BinaryFormat::Mdbf => signs + 16 * ell * (n + m + 2 * r),
    }
}

/// Fractional tolerance above the target allowed when choosing a rank.
pub const BPW_SLACK: f64 = 0.02;

/// Largest rank whose full footprint fits `target_bpw·(1 + slack)` bits per weight.
pub fn rank_for_bpw(n: usize, m: usize, target_bpw: f64, format: BinaryFormat, ell: usize) -> Result<usize> {
    if n == 0 || m == 0 {
        return Err(Error::shape("rank_for_bpw needs a non-empty shape"));
    }
    if !(target_bpw > 0.0 && target_bpw <= 2.0) {
        return Err(Error::invalid(format!("binary-factor budget {target_bpw} bpw outside (0, 2]")));
    }
    let ell = if format == BinaryFormat::Dbf { 1 } else { ell.max(1) };
    let budget = target_bpw * (n * m) as f64 * (1.0 + BPW_SLACK);
    let fits = |r: usize| format_bits(format, n, m, r, ell) as f64 <= budget;
    if !fits(1) {
        return Err(Error::invalid(format!(
            "{target_bpw} bpw cannot hold even a rank-1 factorization of a {n}x{m} matrix"
        )));
    }
    let mut r = 1;
    while fits(r + 1) {
        r += 1;
    }
    Ok(r)
}

/// `√Σ`-balanced truncated SVD factors, zero-padded past the numerical rank.
fn svd_factors(w: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = w.shape();
    let svd = w.clone().try_svd(true, true, 1e-12, 500).ok_or_else(|| Error::numerical("SVD did not converge"))?;
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut uf = DMatrix::zeros(n, r);
    let mut vf = DMatrix::zeros(m, r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[idx].max(0.0).sqrt();
        uf.column_mut(k).copy_from(&(u.column(idx) * s));
        vf.column_mut(k).copy_from(&(vt.row(idx).transpose() * s));
    }
    Ok((uf, vf))
}

/// Rank-`ell` nonnegative-leaning factorization `|X| ≈ P·Kᵀ`.
fn envelope_split(x: &DMatrix<f64>, ell: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (mut p, mut k) = svd_factors(x, ell)?;
    for l in 0..ell {
        if p.column(l).sum() + k.column(l).sum() < 0.0 {
            p.column_mut(l).neg_mut();
            k.column_mut(l).neg_mut();
        }
    }
    Ok((p, k))
}

fn to_f32_vec(m: &DMatrix<f64>) -> Vec<f32> {
    let (r, c) = m.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)] as f32).collect()
}

fn signs_of(m: &DMatrix<f64>) -> Vec<i8> {
    let (r, c) = m.shape();
    (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| sign_of(m[(i, j)])).collect()
}

/// Truncated-SVD initialization: signs from the SVD factors, envelopes from
/// the rank-`ell` SVD of their magnitudes.
pub fn msvid_init(w: &Matrix, rank: usize, ell: usize, format: BinaryFormat) -> Result<BinaryFactorMatrix> {
    if w.frobenius_sq() == 0.0 {
        return Err(Error::invalid("cannot factor the zero matrix"));
    }
    if rank == 0 || ell == 0 {
        return Err(Error::invalid("rank and envelope rank must be positive"));
    }
    let (n, m) = w.shape();
    let (uf, vf) = svd_factors(&w.to_f64(), rank)?;
    let sa = signs_of(&uf);
    let sb = signs_of(&vf);
    match format {
        BinaryFormat::Dbf => {
            let (a, q) = envelope_split(&uf.abs(), 1)?;
            let (b, g) = envelope_split(&vf.abs(), 1)?;
            let mvec: Vec<f32> = (0..rank).map(|k| (q[(k, 0)] * g[(k, 0)]) as f32).collect();
            BinaryFactorMatrix::dbf(n, m, sa, sb, to_f32_vec(&a), mvec, to_f32_vec(&b))
        }
        BinaryFormat::Mdbf => {
            let ell = ell.min(n.min(rank)).min(m.min(rank)).max(1);
            let (a, q) = envelope_split(&uf.abs(), ell)?;
            let (b, g) = envelope_split(&vf.abs(), ell)?;
            BinaryFactorMatrix::mdbf(n, m, rank, ell, sa, sb, to_f32_vec(&a), to_f32_vec(&q), to_f32_vec(&b), to_f32_vec(&g))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    pub outer_iters: usize,
    pub inner_iters: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { outer_iters: 100, inner_iters: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineReport {
    /// Objective before refinement and after every outer iteration.
    pub trace: Vec<f64>,
    pub accepted_flips: usize,
}

/// Working copy of the factorization in double precision whose real
/// parameters always hold `f32`-representable values.
struct State {
    n: usize,
    m: usize,
    r: usize,
    ell: usize,
    dbf: bool,
    sa: DMatrix<f64>,
    sb: DMatrix<f64>,
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    b: DMatrix<f64>,
    g: DMatrix<f64>,
}

fn round_f32(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = *v as f32 as f64);
}

fn from_rows(v: &[f32], r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |i, j| v[i * c + j] as f64)
}

fn from_signs(v: &[i8], r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |i, j| v[i * c + j] as f64)
}

impl State {
    fn new(f: &BinaryFactorMatrix) -> Self {
        let (n, m, r, ell) = (f.rows, f.cols, f.rank, f.ell);
        Self {
            n,
            m,
            r,
            ell,
            dbf: f.format == BinaryFormat::Dbf,
            sa: from_signs(&f.sa, n, r),
            sb: from_signs(&f.sb, m, r),
            a: from_rows(&f.a_env, n, ell),
            q: from_rows(&f.q_env, r, ell),
            b: from_rows(&f.b_env, m, ell),
            g: from_rows(&f.g_env, r, ell),
        }
    }

    fn u(&self) -> DMatrix<f64> {
        self.sa.component_mul(&(&self.a * self.q.transpose()))
    }

    fn v(&self) -> DMatrix<f64> {
        self.sb.component_mul(&(&self.b * self.g.transpose()))
    }

    fn what(&self) -> DMatrix<f64> {
        self.u() * self.v().transpose()
    }

    fn finish(&self, format: BinaryFormat) -> Result<BinaryFactorMatrix> {
        let sg = |m: &DMatrix<f64>| signs_of(m);
        match format {
            BinaryFormat::Dbf => BinaryFactorMatrix::dbf(
                self.n,
                self.m,
                sg(&self.sa),
                sg(&self.sb),
                to_f32_vec(&self.a),
                to_f32_vec(&self.q),
                to_f32_vec(&self.b),
            ),
            BinaryFormat::Mdbf => BinaryFactorMatrix::mdbf(
                self.n,
                self.m,
                self.r,
                self.ell,
                sg(&self.sa),
                sg(&self.sb),
                to_f32_vec(&self.a),
                to_f32_vec(&self.q),
                to_f32_vec(&self.b),
                to_f32_vec(&self.g),
            ),
        }
    }
}

/// Objective against `w`: `‖W − Ŵ‖_F²` or `tr(EᵀHE)` with `E = W − Ŵ`.
struct Objective<'a> {
    w: DMatrix<f64>,
    h: Option<&'a DMatrix<f64>>,
}

impl Objective<'_> {
    fn eval(&self, what: &DMatrix<f64>) -> f64 {
        let e = &self.w - what;
        match self.h {
            None => e.norm_squared(),
            Some(h) => crate::tensor::weighted_sq_norm(&e, h),
        }
    }

    fn apply_h(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self.h {
            None => x.clone(),
            Some(h) => h * x,
        }
    }
}

fn solve_spd(mut g: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = g.nrows();
    let tr = (0..n).map(|i| g[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let ridge = 1e-12 * tr.max(1e-300);
    for i in 0..n {
        g[(i, i)] += ridge;
    }
    let sol = g.cholesky()?.solve(rhs);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Replaces `target` with `candidate` if that does not raise the objective.
fn try_update(st: &mut State, obj: &Objective, j: &mut f64, which: u8, mut cand: DMatrix<f64>) {
    round_f32(&mut cand);
    let slot = match which {
        0 => &mut st.a,
        1 => &mut st.q,
        2 => &mut st.b,
        _ => &mut st.g,
    };
    let old = std::mem::replace(slot, cand);
    let nj = obj.eval(&st.what());
    if nj <= *j {
        *j = nj;
    } else {
        let slot = match which {
            0 => &mut st.a,
            1 => &mut st.q,
            2 => &mut st.b,
            _ => &mut st.g,
        };
        *slot = old;
    }
}

fn update_a(st: &mut State, obj: &Objective, j: &mut f64) {
    let (n, m, r, ell) = (st.n, st.m, st.r, st.ell);
    let v = st.v();
    // Row i of Ŵ is Σ_l A_il Z⁽ⁱ⁾_l with Z⁽ⁱ⁾_l = Σ_k s_ik Q_kl V_k.
    let z: Vec<DMatrix<f64>> = (0..n)
        .map(|i| {
            let mut zi = DMatrix::zeros(ell, m);
            for k in 0..r {
                let s = st.sa[(i, k)];
                for l in 0..ell {
                    let c = s * st.q[(k, l)];
                    for jj in 0..m {
                        zi[(l, jj)] += c * v[(jj, k)];
                    }
                }
            }
            zi
        })
        .collect();
    let cand = match obj.h {
        None => {
            let mut a = DMatrix::zeros(n, ell);
            for i in 0..n {
                let g = &z[i] * z[i].transpose();
                let rhs = &z[i] * obj.w.row(i).transpose();
                match solve_spd(g, &DMatrix::from_column_slice(rhs.nrows(), 1, rhs.as_slice())) {
                    Some(x) => a.row_mut(i).copy_from(&x.transpose()),
                    None => return,
                }
            }
            a
        }
        Some(h) => {
            let dim = n * ell;
            let mut g = DMatrix::zeros(dim, dim);
            let mut rhs = DMatrix::zeros(dim, 1);
            let hw = h * &obj.w;
            for i in 0..n {
                for ip in 0..n {
                    let hv = h[(i, ip)];
                    if hv == 0.0 {
                        continue;
                    }
                    let zz = &z[i] * z[ip].transpose();
                    for l in 0..ell {
                        for lp in 0..ell {
                            g[(i * ell + l, ip * ell + lp)] += hv * zz[(l, lp)];
                        }
                    }
                }
                for l in 0..ell {
                    rhs[(i * ell + l, 0)] = z[i].row(l).dot(&hw.row(i));
                }
            }
            match solve_spd(g, &rhs) {
                Some(x) => DMatrix::from_fn(n, ell, |i, l| x[(i * ell + l, 0)]),
                None => return,
            }
        }
    };
    try_update(st, obj, j, 0, cand);
}

fn update_q(st: &mut State, obj: &Objective, j: &mut f64) {
    let (r, ell) = (st.r, st.ell);
    let v = st.v();
    let vtv = v.transpose() * &v;
    let wv = &obj.w * &v;
    let hwv = obj.apply_h(&wv);
    // Columns of Φ_l = S_a ⊙ A_l.
    let phi: Vec<DMatrix<f64>> = (0..ell)
        .map(|l| DMatrix::from_fn(st.n, r, |i, k| st.sa[(i, k)] * st.a[(i, l)]))
        .collect();
    let hphi: Vec<DMatrix<f64>> = phi.iter().map(|p| obj.apply_h(p)).collect();
    let dim = r * ell;
    let mut g = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(dim, 1);
    for l in 0..ell {
        for lp in 0..ell {
            let pp = phi[l].transpose() * &hphi[lp];
            for k in 0..r {
                for kp in 0..r {
                    g[(k * ell + l, kp * ell + lp)] = pp[(k, kp)] * vtv[(k, kp)];
                }
            }
        }
        let t = phi[l].transpose() * &hwv;
        for k in 0..r {
            rhs[(k * ell + l, 0)] = t[(k, k)];
        }
    }
    if let Some(x) = solve_spd(g, &rhs) {
        let cand = DMatrix::from_fn(r, ell, |k, l| x[(k * ell + l, 0)]);
        try_update(st, obj, j, 1, cand);
    }
}

fn update_b(st: &mut State, obj: &Objective, j: &mut f64) {
    let (n, m, r, ell) = (st.n, st.m, st.r, st.ell);
    let u = st.u();
    let mut cand = DMatrix::zeros(m, ell);
    for jj in 0..m {
        // Column j of Ŵ is Y⁽ʲ⁾ b_j with Y⁽ʲ⁾_l = Σ_k U_k s'_jk G_kl.
        let mut y = DMatrix::zeros(n, ell);
        for k in 0..r {
            let s = st.sb[(jj, k)];
            for l in 0..ell {
                let c = s * st.g[(k, l)];
                for i in 0..n {
                    y[(i, l)] += c * u[(i, k)];
                }
            }
        }
        let hy = obj.apply_h(&y);
        let gm = y.transpose() * &hy;
        let rhs = hy.transpose() * obj.w.column(jj);
        match solve_spd(gm, &DMatrix::from_column_slice(rhs.nrows(), 1, rhs.as_slice())) {
            Some(x) => cand.row_mut(jj).copy_from(&x.transpose()),
            None => return,
        }
    }
    try_update(st, obj, j, 2, cand);
}

fn update_g(st: &mut State, obj: &Objective, j: &mut f64) {
    let (m, r, ell) = (st.m, st.r, st.ell);
    let u = st.u();
    let utu = u.transpose() * obj.apply_h(&u);
    let uhw = u.transpose() * obj.apply_h(&obj.w);
    let psi: Vec<DMatrix<f64>> = (0..ell)
        .map(|l| DMatrix::from_fn(m, r, |jj, k| st.sb[(jj, k)] * st.b[(jj, l)]))
        .collect();
    let dim = r * ell;
    let mut g = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(dim, 1);
    for l in 0..ell {
        for lp in 0..ell {
            let pp = psi[l].transpose() * &psi[lp];
            for k in 0..r {
                for kp in 0..r {
                    g[(k * ell + l, kp * ell + lp)] = utu[(k, kp)] * pp[(k, kp)];
                }
            }
        }
        for k in 0..r {
            rhs[(k * ell + l, 0)] = (0..m).map(|jj| uhw[(k, jj)] * psi[l][(jj, k)]).sum();
        }
    }
    if let Some(x) = solve_spd(g, &rhs) {
        let cand = DMatrix::from_fn(r, ell, |k, l| x[(k * ell + l, 0)]);
        try_update(st, obj, j, 3, cand);
    }
}

fn flip_threshold(j: f64) -> f64 {
    1e-12 * j.max(1e-300)
}

/// One column-major sweep over `S_a` then `S_b`; returns accepted flips.
fn flip_sweep(st: &mut State, obj: &Objective, j: &mut f64) -> usize {
    let (n, m, r) = (st.n, st.m, st.r);
    let mut u = st.u();
    let mut v = st.v();
    let mut e = &obj.w - &u * v.transpose();
    let mut he = obj.apply_h(&e);
    let hdiag: Vec<f64> = (0..n).map(|i| obj.h.map_or(1.0, |h| h[(i, i)])).collect();
    let mut flips = 0;
    for k in 0..r {
        let vk = v.column(k).clone_owned();
        let vk2 = vk.norm_squared();
        for i in 0..n {
            let delta = -2.0 * u[(i, k)];
            if delta == 0.0 {
                continue;
            }
            let dj = -2.0 * delta * he.row(i).transpose().dot(&vk) + delta * delta * hdiag[i] * vk2;
            if dj < -flip_threshold(*j) {
                st.sa[(i, k)] = -st.sa[(i, k)];
                u[(i, k)] = -u[(i, k)];
                for jj in 0..m {
                    e[(i, jj)] -= delta * vk[jj];
                }
                match obj.h {
                    None => he.copy_from(&e),
                    Some(h) => {
                        for ip in 0..n {
                            let c = delta * h[(ip, i)];
                            if c != 0.0 {
                                for jj in 0..m {
                                    he[(ip, jj)] -= c * vk[jj];
                                }
                            }
                        }
                    }
                }
                *j += dj;
                flips += 1;
            }
        }
    }
    for k in 0..r {
        let uk = u.column(k).clone_owned();
        let huk = obj.apply_h(&DMatrix::from_column_slice(n, 1, uk.as_slice()));
        let quad = uk.dot(&huk.column(0));
        for jj in 0..m {
            let delta = -2.0 * v[(jj, k)];
            if delta == 0.0 {
                continue;
            }
            let dj = -2.0 * delta * uk.dot(&he.column(jj)) + delta * delta * quad;
            if dj < -flip_threshold(*j) {
                st.sb[(jj, k)] = -st.sb[(jj, k)];
                v[(jj, k)] = -v[(jj, k)];
                for i in 0..n {
                    e[(i, jj)] -= delta * uk[i];
                    he[(i, jj)] -= delta * huk[(i, 0)];
                }
                *j += dj;
                flips += 1;
            }
        }
    }
    flips
}

/// Alternating refinement: least-squares updates of the real parameters and
/// strictly improving single sign flips. The objective never increases.
pub fn refine_alternating(
    f: &BinaryFactorMatrix,
    w: &Matrix,
    opts: &RefineOptions,
    h: Option<&DMatrix<f64>>,
) -> Result<(BinaryFactorMatrix, RefineReport)> {
    if w.shape() != f.shape() {
        return Err(Error::shape(format!("target {:?} vs factorization {:?}", w.shape(), f.shape())));
    }
    if let Some(h) = h {
        if h.nrows() != f.rows || h.ncols() != f.rows {
            return Err(Error::shape("weighting Gram does not match the input dimension"));
        }
    }
    let obj = Objective { w: w.to_f64(), h };
    let mut st = State::new(f);
    let mut j = obj.eval(&st.what());
    let mut best = (j, f.clone());
    let mut trace = vec![j];
    let mut accepted = 0;
    for _ in 0..opts.outer_iters {
        let start = j;
        for _ in 0..opts.inner_iters.max(1) {
            update_a(&mut st, &obj, &mut j);
            update_q(&mut st, &obj, &mut j);
            update_b(&mut st, &obj, &mut j);
            if !st.dbf {
                update_g(&mut st, &obj, &mut j);
            }
            let flips = flip_sweep(&mut st, &obj, &mut j);
            accepted += flips;
            // Incremental bookkeeping drifts; re-anchor on the exact value.
            j = obj.eval(&st.what());
            if flips == 0 {
                break;
            }
        }
        let cur = st.finish(f.format)?;
        if j <= best.0 {
            best = (j, cur);
        }
        trace.push(best.0);
        if start - best.0 <= 1e-10 * start.max(1e-300) {
            break;
        }
    }
    Ok((best.1, RefineReport { trace, accepted_flips: accepted }))
}
