//! Self-attention variants: plain scaled dot-product and multi-head
//! attention, windowed and shifted-window attention with cross-region
//! masking, Gaussian-weighted axial attention, local-global attention
//! (LGG-SA) and external attention against learned memory units.
//!
//! All kernels build their graphs on a [`Tape`], so each is differentiable
//! end to end. The `*_traced` entry points additionally expose the softmax
//! probability nodes for inspection by tests.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive mask value for forbidden attention pairs.
pub const MASK_NEG: f64 = -1e9;

/// Projection weights for one attention block, resolved to tape variables.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub model_dim: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// Per-head Gaussian width, required by [`gaussian_axial_attention`].
    pub sigma: Option<Vec<Var>>,
}

impl AttentionParams {
    pub fn validate<T: Scalar>(&self, tape: &Tape<T>) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 {
            return Err(Error::Config("attention heads and model_dim must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        let d = self.model_dim;
        for (name, v) in [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)] {
            if tape.shape(v) != [d, d] {
                return Err(Error::Dimension(format!(
                    "attention projection {} must be [{d} x {d}], got {:?}",
                    name,
                    tape.shape(v)
                )));
            }
        }
        if let Some(sigma) = &self.sigma {
            if sigma.len() != self.heads {
                return Err(Error::Config(format!(
                    "expected one sigma per head ({}), got {}",
                    self.heads,
                    sigma.len()
                )));
            }
            for &s in sigma {
                if tape.value(s).values()[0] <= T::zero() {
                    return Err(Error::Config("attention sigma must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Token-grid layout for windowed attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGeometry {
    pub fn new(h: usize, w: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::Geometry(format!(
                "token grid {h}x{w} is not divisible by window size {window}"
            )));
        }
        if shift != 0 && shift != window / 2 {
            return Err(Error::Geometry(format!(
                "shift must be 0 or floor(window/2) = {}, got {shift}",
                window / 2
            )));
        }
        Ok(Self { h, w, window, shift })
    }

    pub fn num_windows(&self) -> usize {
        (self.h / self.window) * (self.w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// Learned external memory units shared across all inputs.
#[derive(Debug, Clone, Copy)]
pub struct ExternalMemory {
    pub mk: Var,
    pub mv: Var,
}

fn expect_shape<T: Scalar>(tape: &Tape<T>, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if tape.shape(v) != shape {
        return Err(Error::Dimension(format!(
            "{what} expected shape {:?}, got {:?}",
            shape,
            tape.shape(v)
        )));
    }
    Ok(())
}

/// softmax(Q K^T / sqrt(d)) V with an optional additive logit mask.
/// Returns the output and the probability matrix.
pub fn sdpa_traced<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let sq = tape.shape(q).to_vec();
    if sq.len() != 2 {
        return Err(Error::Dimension(format!("attention expects [n x d] queries, got {:?}", sq)));
    }
    let (n, d) = (sq[0], sq[1]);
    expect_shape(tape, k, &[n, d], "attention keys")?;
    expect_shape(tape, v, &[n, d], "attention values")?;
    if let Some(m) = mask {
        expect_shape(tape, m, &[n, n], "attention mask")?;
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, T::from_f64(1.0 / (d as f64).sqrt()))?;
    if let Some(m) = mask {
        logits = tape.add(logits, m)?;
    }
    let probs = tape.softmax(logits, 1)?;
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}

pub fn scaled_dot_product_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    sdpa_traced(tape, q, k, v, None).map(|(out, _)| out)
}

/// Multi-head attention over `x: [n x d_model]`; heads act on column slices
/// of the projected Q/K/V, concatenated and output-projected.
pub fn msa_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    params.validate(tape)?;
    let sx = tape.shape(x).to_vec();
    if sx.len() != 2 || sx[1] != params.model_dim {
        return Err(Error::Dimension(format!(
            "msa expects [n x {}], got {:?}",
            params.model_dim, sx
        )));
    }
    let q = tape.matmul(x, params.wq)?;
    let k = tape.matmul(x, params.wk)?;
    let v = tape.matmul(x, params.wv)?;
    let d = params.model_dim / params.heads;
    let mut heads = Vec::with_capacity(params.heads);
    let mut probs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.narrow(q, 1, h * d, d)?;
        let kh = tape.narrow(k, 1, h * d, d)?;
        let vh = tape.narrow(v, 1, h * d, d)?;
        let (out, p) = sdpa_traced(tape, qh, kh, vh, mask)?;
        heads.push(out);
        probs.push(p);
    }
    let cat = tape.concat(&heads, 1)?;
    let out = tape.matmul(cat, params.wo)?;
    Ok((out, probs))
}

pub fn multi_head_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
) -> Result<Var> {
    msa_traced(tape, x, params, None).map(|(out, _)| out)
}

/// Splits an `h x w x d` grid into non-overlapping `m x m` windows, producing
/// `[num_windows x m^2 x d]` in row-major window order.
pub fn window_partition<T: Scalar>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("window_partition expects [h x w x d], got {:?}", s)));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Geometry(format!(
            "grid {h}x{w} is not divisible by window size {m}"
        )));
    }
    let r = tape.reshape(x, vec![h / m, m, w / m, m, d])?;
    let p = tape.permute(r, vec![0, 2, 1, 3, 4])?;
    tape.reshape(p, vec![(h / m) * (w / m), m * m, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    tape: &mut Tape<T>,
    windows: Var,
    h: usize,
    w: usize,
    m: usize,
) -> Result<Var> {
    let s = tape.shape(windows).to_vec();
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Geometry(format!(
            "grid {h}x{w} is not divisible by window size {m}"
        )));
    }
    let expect = [(h / m) * (w / m), m * m];
    if s.len() != 3 || s[0] != expect[0] || s[1] != expect[1] {
        return Err(Error::Dimension(format!(
            "window_reverse expected [{} x {} x d], got {:?}",
            expect[0], expect[1], s
        )));
    }
    let d = s[2];
    let r = tape.reshape(windows, vec![h / m, w / m, m, m, d])?;
    let p = tape.permute(r, vec![0, 2, 1, 3, 4])?;
    tape.reshape(p, vec![h, w, d])
}

/// Rolls rows and columns up-left by `shift`: `out[i][j] = x[i+s][j+s]`
/// (toroidal). `inverse` rolls back down-right.
pub fn cyclic_shift<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    shift: usize,
    inverse: bool,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("cyclic_shift expects [h x w x d], got {:?}", s)));
    }
    if shift == 0 {
        return Ok(x);
    }
    let (h, w) = (s[0], s[1]);
    if shift >= h || shift >= w {
        return Err(Error::Geometry(format!(
            "shift {shift} must be smaller than grid {h}x{w}"
        )));
    }
    let roll = |tape: &mut Tape<T>, x: Var, axis: usize, extent: usize| -> Result<Var> {
        let k = if inverse { extent - shift } else { shift };
        let head = tape.narrow(x, axis, k, extent - k)?;
        let tail = tape.narrow(x, axis, 0, k)?;
        tape.concat(&[head, tail], axis)
    };
    let rows = roll(tape, x, 0, h)?;
    roll(tape, rows, 1, w)
}

/// Pre-shift region id of a token at shifted grid position `(i, j)`:
/// tokens past `extent - shift` wrapped around during the roll.
fn region_id(i: usize, j: usize, geom: &WindowGeometry) -> (bool, bool) {
    (i >= geom.h - geom.shift, j >= geom.w - geom.shift)
}

/// Additive attention mask per window: `MASK_NEG` exactly where the two
/// tokens of a reassembled window originate from different pre-shift regions.
/// Shape `[num_windows x m^2 x m^2]`; all zeros when the shift is zero.
pub fn build_shift_mask<T: Scalar>(geom: &WindowGeometry) -> Tensor<T> {
    let m = geom.window;
    let n = geom.tokens_per_window();
    let mut mask = Tensor::zeros(vec![geom.num_windows(), n, n]);
    if geom.shift == 0 {
        return mask;
    }
    let wins_w = geom.w / m;
    let neg = T::from_f64(MASK_NEG);
    for win in 0..geom.num_windows() {
        let base_i = (win / wins_w) * m;
        let base_j = (win % wins_w) * m;
        for a in 0..n {
            let ra = region_id(base_i + a / m, base_j + a % m, geom);
            for b in 0..n {
                let rb = region_id(base_i + b / m, base_j + b % m, geom);
                if ra != rb {
                    mask.values_mut()[(win * n + a) * n + b] = neg;
                }
            }
        }
    }
    mask
}

/// Window attention with optional cyclic shift; returns softmax probabilities
/// per window and head for inspection.
pub fn windowed_msa_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    geom: &WindowGeometry,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let sx = tape.shape(x).to_vec();
    if sx != [geom.h, geom.w, params.model_dim] {
        return Err(Error::Dimension(format!(
            "windowed attention expects [{} x {} x {}], got {:?}",
            geom.h, geom.w, params.model_dim, sx
        )));
    }
    let shifted = cyclic_shift(tape, x, geom.shift, false)?;
    let windows = window_partition(tape, shifted, geom.window)?;
    let mask = if geom.shift > 0 {
        Some(tape.constant(build_shift_mask::<T>(geom)))
    } else {
        None
    };
    let n = geom.tokens_per_window();
    let mut outs = Vec::with_capacity(geom.num_windows());
    let mut probs = Vec::with_capacity(geom.num_windows());
    for wi in 0..geom.num_windows() {
        let win = tape.narrow(windows, 0, wi, 1)?;
        let win = tape.reshape(win, vec![n, params.model_dim])?;
        let win_mask = match mask {
            Some(m) => {
                let mw = tape.narrow(m, 0, wi, 1)?;
                Some(tape.reshape(mw, vec![n, n])?)
            }
            None => None,
        };
        let (out, p) = msa_traced(tape, win, params, win_mask)?;
        outs.push(tape.reshape(out, vec![1, n, params.model_dim])?);
        probs.push(p);
    }
    let cat = tape.concat(&outs, 0)?;
    let merged = window_reverse(tape, cat, geom.h, geom.w, geom.window)?;
    let out = cyclic_shift(tape, merged, geom.shift, true)?;
    Ok((out, probs))
}

/// Window MSA (no shift).
pub fn w_msa<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    geom: &WindowGeometry,
) -> Result<Var> {
    let g = WindowGeometry { shift: 0, ..*geom };
    windowed_msa_traced(tape, x, params, &g).map(|(out, _)| out)
}

/// Shifted-window MSA with `shift = floor(window/2)` and cross-region masking.
pub fn sw_msa<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
    geom: &WindowGeometry,
) -> Result<Var> {
    windowed_msa_traced(tape, x, params, geom).map(|(out, _)| out)
}

/// Squared Euclidean grid distances between every pair of tokens, with
/// non-axial pairs (different row and different column) masked out.
fn axial_logit_bias<T: Scalar>(h: usize, w: usize) -> (Tensor<T>, Tensor<T>) {
    let n = h * w;
    let mut d2 = Tensor::zeros(vec![n, n]);
    let mut mask = Tensor::zeros(vec![n, n]);
    let neg = T::from_f64(MASK_NEG);
    for a in 0..n {
        let (ia, ja) = (a / w, a % w);
        for b in 0..n {
            let (ib, jb) = (b / w, b % w);
            if ia != ib && ja != jb {
                mask.values_mut()[a * n + b] = neg;
            } else {
                let di = ia as f64 - ib as f64;
                let dj = ja as f64 - jb as f64;
                d2.values_mut()[a * n + b] = T::from_f64(di * di + dj * dj);
            }
        }
    }
    (d2, mask)
}

/// Gaussian-weighted axial attention over an `h x w x d` grid. For each
/// token, keys and values are restricted to its row and column; logits are
/// the scaled dot product minus `dist^2 / (2 sigma^2)` with a learnable
/// per-head sigma.
pub fn gwaa_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
) -> Result<(Var, Vec<Var>)> {
    params.validate(tape)?;
    let sigma = params
        .sigma
        .as_ref()
        .ok_or_else(|| Error::Config("gaussian axial attention requires sigma".into()))?
        .clone();
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != params.model_dim {
        return Err(Error::Dimension(format!(
            "gaussian axial attention expects [h x w x {}], got {:?}",
            params.model_dim, s
        )));
    }
    let (h, w) = (s[0], s[1]);
    let n = h * w;
    let tokens = tape.reshape(x, vec![n, params.model_dim])?;
    let (d2, mask) = axial_logit_bias::<T>(h, w);
    let neg_half_d2 = tape.constant(d2.map(|v| -v / T::from_f64(2.0)));
    let mask = tape.constant(mask);

    let q = tape.matmul(tokens, params.wq)?;
    let k = tape.matmul(tokens, params.wk)?;
    let v = tape.matmul(tokens, params.wv)?;
    let d = params.model_dim / params.heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut outs = Vec::with_capacity(params.heads);
    let mut probs = Vec::with_capacity(params.heads);
    for head in 0..params.heads {
        let qh = tape.narrow(q, 1, head * d, d)?;
        let kh = tape.narrow(k, 1, head * d, d)?;
        let vh = tape.narrow(v, 1, head * d, d)?;
        let kt = tape.transpose(kh)?;
        let sim = tape.matmul(qh, kt)?;
        let sim = tape.scale(sim, scale)?;
        let s2 = tape.mul(sigma[head], sigma[head])?;
        let penalty = tape.div(neg_half_d2, s2)?;
        let biased = tape.add(sim, penalty)?;
        let masked = tape.add(biased, mask)?;
        let p = tape.softmax(masked, 1)?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = tape.concat(&outs, 1)?;
    let out = tape.matmul(cat, params.wo)?;
    let grid = tape.reshape(out, vec![h, w, params.model_dim])?;
    Ok((grid, probs))
}

pub fn gaussian_axial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &AttentionParams,
) -> Result<Var> {
    gwaa_traced(tape, x, params).map(|(out, _)| out)
}

/// Parameters of the local-global attention block.
#[derive(Debug, Clone)]
pub struct LggParams {
    /// Per-window local attention.
    pub local: AttentionParams,
    /// Gaussian axial attention on the pooled grid (sigma required).
    pub global: AttentionParams,
    /// `[p^2 x c]` pooling logits, softmax-normalized over window positions.
    pub ldconv: Var,
    /// `[2c x c]` fusion projection applied to concat(local, upsampled global).
    pub fuse_w: Var,
    /// `[c]` fusion bias.
    pub fuse_b: Var,
    /// Local window size `p`; must be a power of two so the global branch can
    /// be upsampled back by repeated doubling.
    pub window: usize,
}

/// Learned softmax-weighted pooling of each `p x p` window down to one token.
fn ldconv_pool<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    logits: Var,
    p: usize,
    c: usize,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (h, w) = (s[0], s[1]);
    expect_shape(tape, logits, &[p * p, c], "ldconv logits")?;
    let weights = tape.softmax(logits, 0)?;
    let windows = window_partition(tape, x, p)?;
    let num = (h / p) * (w / p);
    let wt = tape.reshape(weights, vec![1, p * p, c])?;
    let tiled = tape.concat(&vec![wt; num], 0)?;
    let weighted = tape.mul(windows, tiled)?;
    let mean = tape.mean_axis(weighted, 1)?;
    let sum = tape.scale(mean, T::from_f64((p * p) as f64))?;
    tape.reshape(sum, vec![h / p, w / p, c])
}

/// Local-global Gaussian-weighted self-attention: per-window local SA, a
/// learned window pooling, Gaussian axial attention on the pooled grid, and
/// concat-plus-projection fusion of the two branches.
pub fn lgg_sa<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &LggParams) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("lgg_sa expects [h x w x c], got {:?}", s)));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let p = params.window;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Geometry(format!(
            "lgg_sa grid {h}x{w} is not divisible by window size {p}"
        )));
    }
    if !p.is_power_of_two() {
        return Err(Error::Geometry(format!(
            "lgg_sa window size {p} must be a power of two"
        )));
    }
    expect_shape(tape, params.fuse_w, &[2 * c, c], "lgg_sa fusion weight")?;
    expect_shape(tape, params.fuse_b, &[c], "lgg_sa fusion bias")?;

    let local_geom = WindowGeometry::new(h, w, p, 0)?;
    let (z_local, _) = windowed_msa_traced(tape, x, &params.local, &local_geom)?;
    let pooled = ldconv_pool(tape, z_local, params.ldconv, p, c)?;
    let z_global = gaussian_axial_attention(tape, pooled, &params.global)?;
    let mut up = z_global;
    let mut factor = p;
    while factor > 1 {
        up = tape.upsample2x(up)?;
        factor /= 2;
    }
    let cat = tape.concat(&[z_local, up], 2)?;
    let flat = tape.reshape(cat, vec![h * w, 2 * c])?;
    let proj = tape.matmul(flat, params.fuse_w)?;
    let proj = tape.add_row(proj, params.fuse_b)?;
    tape.reshape(proj, vec![h, w, c])
}

/// External attention; returns the post-softmax attention for inspection.
pub fn external_attention_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mem: &ExternalMemory,
) -> Result<(Var, Var)> {
    let sx = tape.shape(x).to_vec();
    let sk = tape.shape(mem.mk).to_vec();
    let sv = tape.shape(mem.mv).to_vec();
    if sx.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::Dimension(format!(
            "external attention expects matrices, got x {:?}, mk {:?}, mv {:?}",
            sx, sk, sv
        )));
    }
    if sk != sv {
        return Err(Error::Config(format!(
            "memory units must share their shape, got {:?} and {:?}",
            sk, sv
        )));
    }
    if sx[1] != sk[1] {
        return Err(Error::Config(format!(
            "token width {} does not match memory width {}",
            sx[1], sk[1]
        )));
    }
    let n = sx[0];
    let s = sk[0];
    let mkt = tape.transpose(mem.mk)?;
    let scores = tape.matmul(x, mkt)?;
    // double normalization: softmax over the memory axis, then L1 over tokens
    let soft = tape.softmax(scores, 1)?;
    let ones = tape.constant(Tensor::filled(vec![1, n], T::one()));
    let colsum = tape.matmul(ones, soft)?;
    let colsum = tape.reshape(colsum, vec![s])?;
    let attn = tape.div_row(soft, colsum)?;
    let out = tape.matmul(attn, mem.mv)?;
    Ok((out, soft))
}

pub fn external_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mem: &ExternalMemory,
) -> Result<Var> {
    external_attention_traced(tape, x, mem).map(|(out, _)| out)
}
