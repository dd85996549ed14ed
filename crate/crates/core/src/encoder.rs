//! Text and video encoders with hand-written reverse-mode gradients.
//!
//! Both branches share one layout:
//!
//! ```text
//! X (L × d_in) → ReLU(X·W + b) + P → pre-norm single-head self-attention with residual → Y (L × d)
//! ```
//!
//! The video encoder returns `Y` (one embedding per frame). The text encoder
//! attention-pools `Y` into one query vector: `α = softmax(Y·w + b)`, `q = αᵀY`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ArlError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_t: usize,
    pub d_v: usize,
    pub l_q: usize,
    pub l_v: usize,
    /// shared embedding dimension
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln_gamma: Array1<f64>,
    pub ln_beta: Array1<f64>,
}

impl AttentionParams {
    fn zeros(d: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln_gamma: Array1::zeros(d),
            ln_beta: Array1::zeros(d),
        }
    }
}

/// All learnable weights of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub text_proj_w: Array2<f64>,
    pub text_proj_b: Array1<f64>,
    pub video_proj_w: Array2<f64>,
    pub video_proj_b: Array1<f64>,
    pub pos_text: Array2<f64>,
    pub pos_video: Array2<f64>,
    pub attn_text: AttentionParams,
    pub attn_video: AttentionParams,
    pub pool_w: Array1<f64>,
    /// length-1 vector holding the pooling bias
    pub pool_b: Array1<f64>,
}

impl EncoderParams {
    pub fn zeros(dims: EncoderDims) -> Self {
        let d = dims.d;
        Self {
            dims,
            text_proj_w: Array2::zeros((dims.d_t, d)),
            text_proj_b: Array1::zeros(d),
            video_proj_w: Array2::zeros((dims.d_v, d)),
            video_proj_b: Array1::zeros(d),
            pos_text: Array2::zeros((dims.l_q, d)),
            pos_video: Array2::zeros((dims.l_v, d)),
            attn_text: AttentionParams::zeros(d),
            attn_video: AttentionParams::zeros(d),
            pool_w: Array1::zeros(d),
            pool_b: Array1::zeros(1),
        }
    }

    /// Uniform in `±1/√fan_in` per tensor. The positional tables are scaled
    /// down by [`POS_INIT_SCALE`], the attention output projections start at
    /// zero and layer norm starts at the identity.
    pub fn init(dims: EncoderDims, seed: u64) -> Result<Self> {
        if dims.d == 0 || dims.d_t == 0 || dims.d_v == 0 || dims.l_q == 0 || dims.l_v == 0 {
            return Err(ArlError::config(format!(
                "encoder dimensions must be positive: {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let d = dims.d;
        for (w, fan_in) in [
            (p.text_proj_w.as_slice_mut().unwrap(), dims.d_t),
            (p.text_proj_b.as_slice_mut().unwrap(), dims.d_t),
            (p.video_proj_w.as_slice_mut().unwrap(), dims.d_v),
            (p.video_proj_b.as_slice_mut().unwrap(), dims.d_v),
        ] {
            fill_uniform(&mut rng, w, fan_in);
        }
        for attn in [&mut p.attn_text, &mut p.attn_video] {
            for w in [&mut attn.wq, &mut attn.wk, &mut attn.wv] {
                fill_uniform(&mut rng, w.as_slice_mut().unwrap(), d);
            }
            attn.ln_gamma.fill(1.0);
        }
        fill_uniform(&mut rng, p.pool_w.as_slice_mut().unwrap(), d);
        fill_uniform(&mut rng, p.pool_b.as_slice_mut().unwrap(), d);
        for pos in [&mut p.pos_text, &mut p.pos_video] {
            fill_uniform(&mut rng, pos.as_slice_mut().unwrap(), d);
            pos.mapv_inplace(|v| v * POS_INIT_SCALE);
        }
        Ok(p)
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![
            ("text_proj_w", self.text_proj_w.as_slice().unwrap()),
            ("text_proj_b", self.text_proj_b.as_slice().unwrap()),
            ("video_proj_w", self.video_proj_w.as_slice().unwrap()),
            ("video_proj_b", self.video_proj_b.as_slice().unwrap()),
            ("pos_text", self.pos_text.as_slice().unwrap()),
            ("pos_video", self.pos_video.as_slice().unwrap()),
        ];
        for (prefix, a) in [
            ("attn_text", &self.attn_text),
            ("attn_video", &self.attn_video),
        ] {
            let names = attn_names(prefix);
            out.push((names[0], a.wq.as_slice().unwrap()));
            out.push((names[1], a.wk.as_slice().unwrap()));
            out.push((names[2], a.wv.as_slice().unwrap()));
            out.push((names[3], a.wo.as_slice().unwrap()));
            out.push((names[4], a.ln_gamma.as_slice().unwrap()));
            out.push((names[5], a.ln_beta.as_slice().unwrap()));
        }
        out.push(("pool_w", self.pool_w.as_slice().unwrap()));
        out.push(("pool_b", self.pool_b.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("text_proj_w", self.text_proj_w.as_slice_mut().unwrap()),
            ("text_proj_b", self.text_proj_b.as_slice_mut().unwrap()),
            ("video_proj_w", self.video_proj_w.as_slice_mut().unwrap()),
            ("video_proj_b", self.video_proj_b.as_slice_mut().unwrap()),
            ("pos_text", self.pos_text.as_slice_mut().unwrap()),
            ("pos_video", self.pos_video.as_slice_mut().unwrap()),
        ];
        for (prefix, a) in [
            ("attn_text", &mut self.attn_text),
            ("attn_video", &mut self.attn_video),
        ] {
            let names = attn_names(prefix);
            out.push((names[0], a.wq.as_slice_mut().unwrap()));
            out.push((names[1], a.wk.as_slice_mut().unwrap()));
            out.push((names[2], a.wv.as_slice_mut().unwrap()));
            out.push((names[3], a.wo.as_slice_mut().unwrap()));
            out.push((names[4], a.ln_gamma.as_slice_mut().unwrap()));
            out.push((names[5], a.ln_beta.as_slice_mut().unwrap()));
        }
        out.push(("pool_w", self.pool_w.as_slice_mut().unwrap()));
        out.push(("pool_b", self.pool_b.as_slice_mut().unwrap()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(ArlError::numerical(name, "non-finite parameter"));
            }
        }
        Ok(())
    }
}

fn attn_names(prefix: &str) -> [&'static str; 6] {
    match prefix {
        "attn_text" => [
            "attn_text.wq",
            "attn_text.wk",
            "attn_text.wv",
            "attn_text.wo",
            "attn_text.ln_gamma",
            "attn_text.ln_beta",
        ],
        _ => [
            "attn_video.wq",
            "attn_video.wk",
            "attn_video.wv",
            "attn_video.wo",
            "attn_video.ln_gamma",
            "attn_video.ln_beta",
        ],
    }
}

/// Positional tables start this much smaller than the other tensors.
pub const POS_INIT_SCALE: f64 = 1e-6;

fn fill_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in out {
        *v = rng.random_range(-bound..bound);
    }
}

/// Gradients of a scalar loss with respect to every parameter of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub grads: EncoderParams,
}

impl GradientTape {
    pub fn zeros(dims: EncoderDims) -> Self {
        Self {
            grads: EncoderParams::zeros(dims),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        self.grads.tensors()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(ArlError::numerical(name, "non-finite gradient"));
            }
        }
        Ok(())
    }
}

/// Intermediates of one sequence pass, kept for the backward sweep.
#[derive(Debug, Clone)]
struct SeqTrace {
    x: Array2<f64>,
    pre_relu: Array2<f64>,
    nhat: Array2<f64>,
    rstd: Array1<f64>,
    n: Array2<f64>,
    qm: Array2<f64>,
    km: Array2<f64>,
    vm: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    y: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TextTrace {
    seq: SeqTrace,
    alpha: Array1<f64>,
    pub q: Array1<f64>,
}

impl TextTrace {
    /// Attention-pooling weights over words.
    pub fn pooling_weights(&self) -> &Array1<f64> {
        &self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct VideoTrace {
    seq: SeqTrace,
}

impl VideoTrace {
    pub fn frames(&self) -> &Array2<f64> {
        &self.seq.y
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

struct SeqWeights<'a> {
    proj_w: &'a Array2<f64>,
    proj_b: &'a Array1<f64>,
    pos: &'a Array2<f64>,
    attn: &'a AttentionParams,
}

fn seq_forward(w: &SeqWeights<'_>, x: Array2<f64>) -> SeqTrace {
    let d = w.proj_w.ncols();
    let l = x.nrows();
    let pre_relu = x.dot(w.proj_w) + w.proj_b;
    let e = pre_relu.mapv(|v| v.max(0.0)) + w.pos;

    let mut nhat = Array2::zeros((l, d));
    let mut rstd = Array1::zeros(l);
    for r in 0..l {
        let row = e.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = s;
        for c in 0..d {
            nhat[[r, c]] = (row[c] - mean) * s;
        }
    }
    let n = &nhat * &w.attn.ln_gamma + &w.attn.ln_beta;

    let qm = n.dot(&w.attn.wq);
    let km = n.dot(&w.attn.wk);
    let vm = n.dot(&w.attn.wv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = qm.dot(&km.t()) * scale;
    for mut row in attn.rows_mut() {
        softmax_in_place(row.as_slice_mut().unwrap());
    }
    let ctx = attn.dot(&vm);
    let y = &e + &ctx.dot(&w.attn.wo);
    SeqTrace {
        x,
        pre_relu,
        nhat,
        rstd,
        n,
        qm,
        km,
        vm,
        attn,
        ctx,
        y,
    }
}

struct SeqGrads<'a> {
    proj_w: &'a mut Array2<f64>,
    proj_b: &'a mut Array1<f64>,
    pos: &'a mut Array2<f64>,
    attn: &'a mut AttentionParams,
}

fn seq_backward(w: &SeqWeights<'_>, t: &SeqTrace, dy: &Array2<f64>, g: SeqGrads<'_>) {
    let d = w.proj_w.ncols() as f64;
    let scale = 1.0 / d.sqrt();

    // y = e + ctx·Wo
    let mut de = dy.clone();
    g.attn.wo.scaled_add(1.0, &t.ctx.t().dot(dy));
    let dctx = dy.dot(&w.attn.wo.t());

    // ctx = A·Vm
    let dattn = dctx.dot(&t.vm.t());
    let dvm = t.attn.t().dot(&dctx);
    let mut dscores = Array2::zeros(t.attn.raw_dim());
    for r in 0..t.attn.nrows() {
        let a = t.attn.row(r);
        let da = dattn.row(r);
        let inner: f64 = a.iter().zip(da.iter()).map(|(x, y)| x * y).sum();
        for c in 0..t.attn.ncols() {
            dscores[[r, c]] = a[c] * (da[c] - inner) * scale;
        }
    }
    let dqm = dscores.dot(&t.km);
    let dkm = dscores.t().dot(&t.qm);

    g.attn.wq.scaled_add(1.0, &t.n.t().dot(&dqm));
    g.attn.wk.scaled_add(1.0, &t.n.t().dot(&dkm));
    g.attn.wv.scaled_add(1.0, &t.n.t().dot(&dvm));
    let dn = dqm.dot(&w.attn.wq.t()) + dkm.dot(&w.attn.wk.t()) + dvm.dot(&w.attn.wv.t());

    // layer norm
    g.attn
        .ln_gamma
        .scaled_add(1.0, &(&dn * &t.nhat).sum_axis(Axis(0)));
    g.attn.ln_beta.scaled_add(1.0, &dn.sum_axis(Axis(0)));
    let dnhat = &dn * &w.attn.ln_gamma;
    for r in 0..dnhat.nrows() {
        let dh = dnhat.row(r);
        let nh = t.nhat.row(r);
        let mean_dh = dh.sum() / d;
        let mean_dh_nh = dh.iter().zip(nh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for c in 0..dnhat.ncols() {
            de[[r, c]] += t.rstd[r] * (dh[c] - mean_dh - nh[c] * mean_dh_nh);
        }
    }

    // e = relu(x·W + b) + P
    g.pos.scaled_add(1.0, &de);
    let mut dz = de;
    dz.zip_mut_with(&t.pre_relu, |dz, &z| {
        if z <= 0.0 {
            *dz = 0.0;
        }
    });
    g.proj_w.scaled_add(1.0, &t.x.t().dot(&dz));
    g.proj_b.scaled_add(1.0, &dz.sum_axis(Axis(0)));
}

fn to_f64(features: ArrayView2<'_, f32>) -> Array2<f64> {
    features.mapv(f64::from)
}

impl EncoderParams {
    fn text_weights(&self) -> SeqWeights<'_> {
        SeqWeights {
            proj_w: &self.text_proj_w,
            proj_b: &self.text_proj_b,
            pos: &self.pos_text,
            attn: &self.attn_text,
        }
    }

    fn video_weights(&self) -> SeqWeights<'_> {
        SeqWeights {
            proj_w: &self.video_proj_w,
            proj_b: &self.video_proj_b,
            pos: &self.pos_video,
            attn: &self.attn_video,
        }
    }
}

/// Forward pass of the text branch keeping intermediates for [`backward_text`].
pub fn encode_text_traced(params: &EncoderParams, words: ArrayView2<'_, f64>) -> Result<TextTrace> {
    let dims = params.dims;
    if words.dim() != (dims.l_q, dims.d_t) {
        return Err(ArlError::Dimension(format!(
            "word features are {:?}, encoder expects ({}, {})",
            words.dim(),
            dims.l_q,
            dims.d_t
        )));
    }
    let seq = seq_forward(&params.text_weights(), words.to_owned());
    let mut alpha: Array1<f64> = seq.y.dot(&params.pool_w) + params.pool_b[0];
    softmax_in_place(alpha.as_slice_mut().unwrap());
    let q = seq.y.t().dot(&alpha);
    if q.iter().any(|v| !v.is_finite()) {
        return Err(ArlError::numerical(
            "query_embedding",
            "non-finite forward value",
        ));
    }
    Ok(TextTrace { seq, alpha, q })
}

/// Forward pass of the video branch keeping intermediates for [`backward_video`].
pub fn encode_video_traced(
    params: &EncoderParams,
    frames: ArrayView2<'_, f64>,
) -> Result<VideoTrace> {
    let dims = params.dims;
    if frames.dim() != (dims.l_v, dims.d_v) {
        return Err(ArlError::Dimension(format!(
            "frame features are {:?}, encoder expects ({}, {})",
            frames.dim(),
            dims.l_v,
            dims.d_v
        )));
    }
    let seq = seq_forward(&params.video_weights(), frames.to_owned());
    if seq.y.iter().any(|v| !v.is_finite()) {
        return Err(ArlError::numerical(
            "frame_embeddings",
            "non-finite forward value",
        ));
    }
    Ok(VideoTrace { seq })
}

/// Query embedding `q ∈ R^d` for one query's word features.
pub fn encode_text(params: &EncoderParams, words: ArrayView2<'_, f32>) -> Result<Array1<f64>> {
    Ok(encode_text_traced(params, to_f64(words).view())?.q)
}

/// Frame embeddings `V ∈ R^{L_v × d}` for one video's frame features.
pub fn encode_video(params: &EncoderParams, frames: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    Ok(encode_video_traced(params, to_f64(frames).view())?.seq.y)
}

/// Accumulates `∂loss/∂θ` into `tape` given `∂loss/∂q`.
pub fn backward_text(
    params: &EncoderParams,
    trace: &TextTrace,
    dq: ArrayView1<'_, f64>,
    tape: &mut GradientTape,
) {
    let y = &trace.seq.y;
    let alpha = &trace.alpha;
    // q = Σ α_l y_l, α = softmax(y·w + b)
    let dalpha = y.dot(&dq);
    let inner: f64 = alpha.iter().zip(dalpha.iter()).map(|(a, b)| a * b).sum();
    let dscore: Array1<f64> = alpha
        .iter()
        .zip(dalpha.iter())
        .map(|(a, da)| a * (da - inner))
        .collect();
    let mut dy = Array2::zeros(y.raw_dim());
    for (l, mut row) in dy.rows_mut().into_iter().enumerate() {
        row.scaled_add(alpha[l], &dq);
        row.scaled_add(dscore[l], &params.pool_w);
    }
    let g = &mut tape.grads;
    g.pool_w.scaled_add(1.0, &y.t().dot(&dscore));
    g.pool_b[0] += dscore.sum();
    seq_backward(
        &params.text_weights(),
        &trace.seq,
        &dy,
        SeqGrads {
            proj_w: &mut g.text_proj_w,
            proj_b: &mut g.text_proj_b,
            pos: &mut g.pos_text,
            attn: &mut g.attn_text,
        },
    );
}

/// Accumulates `∂loss/∂θ` into `tape` given `∂loss/∂V`.
pub fn backward_video(
    params: &EncoderParams,
    trace: &VideoTrace,
    dframes: &Array2<f64>,
    tape: &mut GradientTape,
) {
    let g = &mut tape.grads;
    seq_backward(
        &params.video_weights(),
        &trace.seq,
        dframes,
        SeqGrads {
            proj_w: &mut g.video_proj_w,
            proj_b: &mut g.video_proj_b,
            pos: &mut g.pos_video,
            attn: &mut g.attn_video,
        },
    );
}

/// Forward traces for every query and video that take part in one loss.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub texts: Vec<TextTrace>,
    pub videos: Vec<VideoTrace>,
}

impl ForwardPass {
    pub fn run(
        params: &EncoderParams,
        words: &[ArrayView2<'_, f32>],
        frames: &[ArrayView2<'_, f32>],
    ) -> Result<Self> {
        let texts = words
            .iter()
            .map(|w| encode_text_traced(params, to_f64(*w).view()))
            .collect::<Result<Vec<_>>>()?;
        let videos = frames
            .iter()
            .map(|f| encode_video_traced(params, to_f64(*f).view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { texts, videos })
    }

    pub fn queries(&self) -> Vec<&Array1<f64>> {
        self.texts.iter().map(|t| &t.q).collect()
    }

    pub fn frames(&self) -> Vec<&Array2<f64>> {
        self.videos.iter().map(|v| v.frames()).collect()
    }
}

/// Loss adjoint with respect to every embedding of a [`ForwardPass`].
#[derive(Debug, Clone)]
pub struct EmbeddingAdjoint {
    pub d_queries: Vec<Array1<f64>>,
    pub d_frames: Vec<Array2<f64>>,
}

impl EmbeddingAdjoint {
    pub fn zeros(pass: &ForwardPass) -> Self {
        Self {
            d_queries: pass
                .texts
                .iter()
                .map(|t| Array1::zeros(t.q.len()))
                .collect(),
            d_frames: pass
                .videos
                .iter()
                .map(|v| Array2::zeros(v.frames().raw_dim()))
                .collect(),
        }
    }
}

/// Reverse sweep from embedding adjoints to parameter gradients.
pub fn backward(
    params: &EncoderParams,
    pass: &ForwardPass,
    adjoint: &EmbeddingAdjoint,
) -> Result<GradientTape> {
    for (idx, dq) in adjoint.d_queries.iter().enumerate() {
        if dq.iter().any(|v| !v.is_finite()) {
            return Err(ArlError::numerical(
                format!("d_query[{idx}]"),
                "non-finite adjoint",
            ));
        }
    }
    for (idx, dv) in adjoint.d_frames.iter().enumerate() {
        if dv.iter().any(|v| !v.is_finite()) {
            return Err(ArlError::numerical(
                format!("d_frames[{idx}]"),
                "non-finite adjoint",
            ));
        }
    }
    let mut tape = GradientTape::zeros(params.dims);
    for (trace, dq) in pass.texts.iter().zip(&adjoint.d_queries) {
        backward_text(params, trace, dq.view(), &mut tape);
    }
    for (trace, dv) in pass.videos.iter().zip(&adjoint.d_frames) {
        backward_video(params, trace, dv, &mut tape);
    }
    tape.check_finite()?;
    Ok(tape)
}
