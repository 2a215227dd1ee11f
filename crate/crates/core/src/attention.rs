//! Single-head attention: the frozen self-attention block, the prompt-prepend
//! baseline, and the residual key/value branch with its analytic gradients.
//!
//! The residual branch attends from the frozen queries onto a small set of
//! learned keys `K_r` and values `V_r`:
//!
//! ```text
//! O   = O_L + w · O_r
//! O_L = softmax(Q Kᵀ / √d) V          (frozen, untouched by the adapter)
//! O_r = softmax(Q K_rᵀ / √d) V_r
//! ```
//!
//! With `V_r = 0` the branch contributes exactly nothing, whatever `K_r` is.

use crate::error::{Error, Result};
use crate::numkernel::{softmax_row_jacobian, softmax_rows, softmax_rows_backward, Mat, Rng};

/// Default half-width of the uniform initialization of `K_r`.
pub const DEFAULT_KEY_BOUND: f64 = 0.02;

/// Pre-trained projections of one attention layer. Never mutated.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenAttention {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    bq: Vec<f64>,
    bk: Vec<f64>,
    bv: Vec<f64>,
}

impl FrozenAttention {
    pub fn new(wq: Mat, wk: Mat, wv: Mat, bq: Vec<f64>, bk: Vec<f64>, bv: Vec<f64>) -> Result<Self> {
        let d = wq.rows();
        for (name, w) in [("W_q", &wq), ("W_k", &wk), ("W_v", &wv)] {
            if w.shape() != (d, d) {
                return Err(Error::shape(format!("{name} is {:?}, expected ({d}, {d})", w.shape())));
            }
        }
        for (name, b) in [("b_q", &bq), ("b_k", &bk), ("b_v", &bv)] {
            if b.len() != d {
                return Err(Error::shape(format!("{name} has length {}, expected {d}", b.len())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("{name} has a non-finite entry")));
            }
        }
        Ok(FrozenAttention { wq, wk, wv, bq, bk, bv })
    }

    /// Gaussian projections with entry std `weight_scale / √d` for queries and
    /// keys, `value_scale / √d` for values, and biases with std `bias_scale`.
    pub fn random(d: usize, weight_scale: f64, value_scale: f64, bias_scale: f64, rng: &mut Rng) -> Self {
        let sd = 1.0 / (d as f64).sqrt();
        let mut gauss = |s: f64| Mat::from_fn(d, d, |_, _| s * sd * rng.normal());
        let wq = gauss(weight_scale);
        let wk = gauss(weight_scale);
        let wv = gauss(value_scale);
        let mut bias = || (0..d).map(|_| bias_scale * rng.normal()).collect::<Vec<_>>();
        let (bq, bk, bv) = (bias(), bias(), bias());
        FrozenAttention { wq, wk, wv, bq, bk, bv }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn w_q(&self) -> &Mat {
        &self.wq
    }

    pub fn w_k(&self) -> &Mat {
        &self.wk
    }

    pub fn w_v(&self) -> &Mat {
        &self.wv
    }

    pub fn b_q(&self) -> &[f64] {
        &self.bq
    }

    pub fn b_k(&self) -> &[f64] {
        &self.bk
    }

    pub fn b_v(&self) -> &[f64] {
        &self.bv
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!("input has {} columns, attention dimension is {}", x.cols(), self.dim())));
        }
        Ok(())
    }

    fn queries(&self, x: &Mat) -> Result<Mat> {
        x.matmul(&self.wq)?.add_row_broadcast(&self.bq)
    }

    fn keys(&self, x: &Mat) -> Result<Mat> {
        x.matmul(&self.wk)?.add_row_broadcast(&self.bk)
    }

    fn values(&self, x: &Mat) -> Result<Mat> {
        x.matmul(&self.wv)?.add_row_broadcast(&self.bv)
    }
}

/// Learnable residual keys and values for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    keys: Mat,
    values: Mat,
}

impl Adapter {
    pub fn new(keys: Mat, values: Mat) -> Result<Self> {
        if keys.shape() != values.shape() || keys.rows() == 0 {
            return Err(Error::shape(format!(
                "adapter keys {:?} and values {:?} must share a non-empty shape",
                keys.shape(),
                values.shape()
            )));
        }
        Ok(Adapter { keys, values })
    }

    /// Number of residual key/value pairs.
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// One SGD step: `K_r −= lr·dK`, `V_r −= lr·dV`.
    pub fn sgd_step(&mut self, lr: f64, d_keys: &Mat, d_values: &Mat) -> Result<()> {
        self.keys.axpy(-lr, d_keys)?;
        self.values.axpy(-lr, d_values)
    }
}

/// Learnable tokens prepended to the layer input.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBaseline {
    prompts: Mat,
}

impl PromptBaseline {
    pub fn new(prompts: Mat) -> Result<Self> {
        if prompts.rows() == 0 {
            return Err(Error::shape("prompt must have at least one token"));
        }
        Ok(PromptBaseline { prompts })
    }

    pub fn prompts(&self) -> &Mat {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.rows() == 0
    }

    pub fn sgd_step(&mut self, lr: f64, d_prompts: &Mat) -> Result<()> {
        self.prompts.axpy(-lr, d_prompts)
    }
}

/// Fresh adapter: `V_r = 0`, `K_r ~ U[−bound, bound]`.
pub fn init_adapter(l: usize, d: usize, bound: f64, rng: &mut Rng) -> Adapter {
    assert!(l >= 1 && d >= 1, "adapter needs l >= 1 and d >= 1");
    let keys = Mat::from_fn(l, d, |_, _| uniform_symmetric(rng, bound));
    Adapter { keys, values: Mat::zeros(l, d) }
}

/// Ablation initialization: both `K_r` and `V_r` uniform on `[−bound, bound]`.
pub fn init_adapter_ablation(l: usize, d: usize, bound: f64, rng: &mut Rng) -> Adapter {
    assert!(l >= 1 && d >= 1, "adapter needs l >= 1 and d >= 1");
    let keys = Mat::from_fn(l, d, |_, _| uniform_symmetric(rng, bound));
    let values = Mat::from_fn(l, d, |_, _| uniform_symmetric(rng, bound));
    Adapter { keys, values }
}

pub fn init_prompt(l: usize, d: usize, bound: f64, rng: &mut Rng) -> PromptBaseline {
    assert!(l >= 1 && d >= 1, "prompt needs l >= 1 and d >= 1");
    PromptBaseline { prompts: Mat::from_fn(l, d, |_, _| uniform_symmetric(rng, bound)) }
}

fn uniform_symmetric(rng: &mut Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.uniform(-bound, bound)
    }
}

/// Frozen self-attention `softmax(Q Kᵀ/√d) V`.
pub fn frozen_forward(x: &Mat, p: &FrozenAttention) -> Result<Mat> {
    p.check_input(x)?;
    Ok(self_attention(x, p)?.0)
}

/// Self-attention over `[P; x]`, returning only the rows at the original
/// token positions.
pub fn prepend_forward(x: &Mat, p: &FrozenAttention, prompt: &PromptBaseline) -> Result<Mat> {
    p.check_input(x)?;
    p.check_input(&prompt.prompts)?;
    let joined = prompt.prompts.vstack(x)?;
    let (out, _) = self_attention(&joined, p)?;
    Ok(out.slice_rows(prompt.len(), joined.rows()))
}

/// `O_L + w·O_r`.
pub fn residual_forward(x: &Mat, p: &FrozenAttention, a: &Adapter, w: f64) -> Result<Mat> {
    check_weight(w)?;
    let (frozen, residual) = residual_branches(x, p, a)?;
    combine(&frozen, &residual, w)
}

/// The two branches `(O_L, O_r)` before weighting.
pub fn residual_branches(x: &Mat, p: &FrozenAttention, a: &Adapter) -> Result<(Mat, Mat)> {
    p.check_input(x)?;
    check_adapter(p, a)?;
    let (frozen, cache) = self_attention(x, p)?;
    let (residual, _) = residual_branch(&cache.q, a)?;
    Ok((frozen, residual))
}

/// Gradients of `⟨dO, O⟩` with respect to `K_r` and `V_r`.
pub fn adapter_grads(x: &Mat, p: &FrozenAttention, a: &Adapter, w: f64, d_out: &Mat) -> Result<(Mat, Mat)> {
    let insert = LayerInsert::Residual { adapter: a, weight: w };
    let (out, tape) = layer_forward(x, p, &insert)?;
    if d_out.shape() != out.shape() {
        return Err(Error::shape(format!("upstream gradient {:?} for output {:?}", d_out.shape(), out.shape())));
    }
    let grads = layer_backward(&tape, p, &insert, d_out)?;
    match grads.params {
        ParamGrads::Residual { d_keys, d_values } => Ok((d_keys, d_values)),
        _ => unreachable!("residual insert yields residual grads"),
    }
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::contract(format!("calibration weight {w} outside [0, 1]")));
    }
    Ok(())
}

fn check_adapter(p: &FrozenAttention, a: &Adapter) -> Result<()> {
    if a.dim() != p.dim() {
        return Err(Error::shape(format!("adapter dimension {} does not match attention dimension {}", a.dim(), p.dim())));
    }
    Ok(())
}

fn combine(frozen: &Mat, residual: &Mat, w: f64) -> Result<Mat> {
    let mut out = frozen.clone();
    out.axpy(w, residual)?;
    Ok(out)
}

struct SelfAttnCache {
    input: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
}

fn scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

fn self_attention(input: &Mat, p: &FrozenAttention) -> Result<(Mat, SelfAttnCache)> {
    let q = p.queries(input)?;
    let k = p.keys(input)?;
    let v = p.values(input)?;
    let attn = softmax_rows(&q.matmul_t(&k)?.scale(scale(p.dim())));
    let out = attn.matmul(&v)?;
    Ok((out, SelfAttnCache { input: input.clone(), q, k, v, attn }))
}

/// Gradient on the layer input. `d_q_extra` is added to the query gradient
/// first, for branches that also read `q`.
fn self_attention_backward(p: &FrozenAttention, c: &SelfAttnCache, d_out: &Mat, d_q_extra: Option<&Mat>) -> Result<Mat> {
    let s = scale(p.dim());
    let d_attn = d_out.matmul_t(&c.v)?;
    let d_v = c.attn.t_matmul(d_out)?;
    let d_scores = softmax_rows_backward(&c.attn, &d_attn).scale(s);
    let mut d_q = d_scores.matmul(&c.k)?;
    if let Some(extra) = d_q_extra {
        d_q.axpy(1.0, extra)?;
    }
    let d_k = d_scores.t_matmul(&c.q)?;
    let mut d_input = d_q.matmul_t(&p.wq)?;
    d_input.axpy(1.0, &d_k.matmul_t(&p.wk)?)?;
    d_input.axpy(1.0, &d_v.matmul_t(&p.wv)?)?;
    debug_assert_eq!(d_input.shape(), c.input.shape());
    Ok(d_input)
}

fn residual_branch(q: &Mat, a: &Adapter) -> Result<(Mat, Mat)> {
    let attn = softmax_rows(&q.matmul_t(&a.keys)?.scale(scale(a.dim())));
    let out = attn.matmul(&a.values)?;
    Ok((out, attn))
}

/// What, if anything, is attached to a frozen layer.
#[derive(Clone, Copy, Debug)]
pub enum LayerInsert<'a> {
    None,
    Residual { adapter: &'a Adapter, weight: f64 },
    Prepend(&'a PromptBaseline),
}

/// Intermediates kept by [`layer_forward`] for [`layer_backward`].
pub struct LayerTape {
    cache: SelfAttnCache,
    res_attn: Option<Mat>,
    prompt_len: usize,
}

#[derive(Debug)]
pub enum ParamGrads {
    None,
    Residual { d_keys: Mat, d_values: Mat },
    Prepend { d_prompts: Mat },
}

#[derive(Debug)]
pub struct LayerGrads {
    pub d_input: Mat,
    pub params: ParamGrads,
}

/// Attention output of one layer with `insert` attached, plus the tape
/// needed to differentiate it.
pub fn layer_forward(x: &Mat, p: &FrozenAttention, insert: &LayerInsert<'_>) -> Result<(Mat, LayerTape)> {
    p.check_input(x)?;
    match *insert {
        LayerInsert::None => {
            let (out, cache) = self_attention(x, p)?;
            Ok((out, LayerTape { cache, res_attn: None, prompt_len: 0 }))
        }
        LayerInsert::Residual { adapter, weight } => {
            check_weight(weight)?;
            check_adapter(p, adapter)?;
            let (frozen, cache) = self_attention(x, p)?;
            let (residual, res_attn) = residual_branch(&cache.q, adapter)?;
            let out = combine(&frozen, &residual, weight)?;
            Ok((out, LayerTape { cache, res_attn: Some(res_attn), prompt_len: 0 }))
        }
        LayerInsert::Prepend(prompt) => {
            p.check_input(&prompt.prompts)?;
            let joined = prompt.prompts.vstack(x)?;
            let (out, cache) = self_attention(&joined, p)?;
            let out = out.slice_rows(prompt.len(), joined.rows());
            Ok((out, LayerTape { cache, res_attn: None, prompt_len: prompt.len() }))
        }
    }
}

/// Reverse pass of [`layer_forward`]: gradient on the layer input and on the
/// attached parameters, given the gradient `d_out` on the layer output.
pub fn layer_backward(tape: &LayerTape, p: &FrozenAttention, insert: &LayerInsert<'_>, d_out: &Mat) -> Result<LayerGrads> {
    match *insert {
        LayerInsert::None => {
            let d_input = self_attention_backward(p, &tape.cache, d_out, None)?;
            Ok(LayerGrads { d_input, params: ParamGrads::None })
        }
        LayerInsert::Residual { adapter, weight } => {
            let res_attn = tape.res_attn.as_ref().expect("residual tape");
            let d_res_out = d_out.scale(weight);
            let d_values = res_attn.t_matmul(&d_res_out)?;
            let d_res_attn = d_res_out.matmul_t(&adapter.values)?;
            // Scores gradient row by row through the softmax Jacobian.
            let l = adapter.len();
            let mut d_scores = Mat::zeros(res_attn.rows(), l);
            for i in 0..res_attn.rows() {
                let jac = softmax_row_jacobian(res_attn.row(i))?;
                let upstream = d_res_attn.row(i);
                for (s, out) in d_scores.row_mut(i).iter_mut().enumerate() {
                    *out = jac.row(s).iter().zip(upstream).map(|(j, g)| j * g).sum();
                }
            }
            let d_scores = d_scores.scale(scale(p.dim()));
            let d_keys = d_scores.t_matmul(&tape.cache.q)?;
            let d_q_extra = d_scores.matmul(&adapter.keys)?;
            let d_input = self_attention_backward(p, &tape.cache, d_out, Some(&d_q_extra))?;
            Ok(LayerGrads { d_input, params: ParamGrads::Residual { d_keys, d_values } })
        }
        LayerInsert::Prepend(_) => {
            let k = tape.prompt_len;
            let padded = Mat::zeros(k, d_out.cols()).vstack(d_out)?;
            let d_joined = self_attention_backward(p, &tape.cache, &padded, None)?;
            let d_prompts = d_joined.slice_rows(0, k);
            let d_input = d_joined.slice_rows(k, d_joined.rows());
            Ok(LayerGrads { d_input, params: ParamGrads::Prepend { d_prompts } })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{finite_diff_grad, softmax};

    fn random_layer(d: usize, seed: u64) -> FrozenAttention {
        FrozenAttention::random(d, 1.0, 1.0, 0.3, &mut Rng::seed(seed))
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.normal())
    }

    /// Elementwise re-implementation used as the oracle for the matrix path.
    fn naive_attention(x: &Mat, p: &FrozenAttention) -> Mat {
        let (n, d) = x.shape();
        let proj = |w: &Mat, b: &[f64]| {
            Mat::from_fn(n, d, |i, j| {
                let mut acc = b[j];
                for k in 0..d {
                    acc += x.get(i, k) * w.get(k, j);
                }
                acc
            })
        };
        let q = proj(p.w_q(), p.b_q());
        let k = proj(p.w_k(), p.b_k());
        let v = proj(p.w_v(), p.b_v());
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            let scores: Vec<f64> =
                (0..n).map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out.set(i, c, (0..n).map(|j| e[j] / z * v.get(j, c)).sum());
            }
        }
        out
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let w = || Mat::from_fn(3, 3, |i, j| (i + j) as f64 * 0.1);
        let p = FrozenAttention::new(w(), w(), w(), vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]).unwrap();
        let out = frozen_forward(&Mat::zeros(4, 3), &p).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn single_token_returns_value_row() {
        let p = random_layer(4, 1);
        let mut rng = Rng::seed(2);
        let x = random_mat(1, 4, &mut rng);
        let out = frozen_forward(&x, &p).unwrap();
        let v = x.matmul(p.w_v()).unwrap().add_row_broadcast(p.b_v()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn matches_naive_oracle() {
        let p = random_layer(5, 3);
        let x = random_mat(3, 5, &mut Rng::seed(4));
        let fast = frozen_forward(&x, &p).unwrap();
        assert!(fast.max_abs_diff(&naive_attention(&x, &p)) < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let p = random_layer(4, 1);
        assert!(matches!(frozen_forward(&Mat::zeros(2, 3), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn prepend_with_duplicated_rows() {
        let p = random_layer(4, 5);
        let mut rng = Rng::seed(6);
        let x = random_mat(2, 4, &mut rng);
        let prompt = PromptBaseline::new(x.clone()).unwrap();
        let doubled = x.vstack(&x).unwrap();
        let full = frozen_forward(&doubled, &p).unwrap();
        let out = prepend_forward(&x, &p, &prompt).unwrap();
        assert!(out.max_abs_diff(&full.slice_rows(2, 4)) < 1e-15);
    }

    #[test]
    fn prepend_scalar_closed_form() {
        let m = |v: f64| Mat::from_vec(1, 1, vec![v]).unwrap();
        let p = FrozenAttention::new(m(0.7), m(-1.3), m(2.0), vec![0.1], vec![0.2], vec![-0.4]).unwrap();
        let (xp, xx) = (0.9, -0.6);
        let out = prepend_forward(&m(xx), &p, &PromptBaseline::new(m(xp)).unwrap()).unwrap();
        // By hand: q from the input token, keys/values from prompt and input.
        let q = xx * 0.7 + 0.1;
        let (kp, kx) = (xp * -1.3 + 0.2, xx * -1.3 + 0.2);
        let (vp, vx) = (xp * 2.0 - 0.4, xx * 2.0 - 0.4);
        let a = softmax(&[q * kp, q * kx])[0];
        let expect = a * vp + (1.0 - a) * vx;
        assert!((out.get(0, 0) - expect).abs() < 1e-14);
    }

    #[test]
    fn prepend_interferes() {
        let mut rng = Rng::seed(7);
        for trial in 0..100 {
            let p = random_layer(4, 100 + trial);
            let x = random_mat(3, 4, &mut rng);
            let prompt = PromptBaseline::new(random_mat(2, 4, &mut rng)).unwrap();
            let dev = prepend_forward(&x, &p, &prompt).unwrap().max_abs_diff(&frozen_forward(&x, &p).unwrap());
            assert!(dev > 0.0, "trial {trial}");
        }
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = Rng::seed(8);
        let p = random_layer(6, 9);
        let x = random_mat(5, 6, &mut rng);
        let a = init_adapter(3, 6, 0.5, &mut rng);
        let frozen = frozen_forward(&x, &p).unwrap();
        for w in [0.0, 0.3, 1.0] {
            assert_eq!(residual_forward(&x, &p, &a, w).unwrap(), frozen);
        }
    }

    #[test]
    fn zero_weight_ignores_trained_adapter() {
        let mut rng = Rng::seed(10);
        let p = random_layer(4, 11);
        let x = random_mat(3, 4, &mut rng);
        let a = Adapter::new(random_mat(2, 4, &mut rng), random_mat(2, 4, &mut rng)).unwrap();
        assert_eq!(residual_forward(&x, &p, &a, 0.0).unwrap(), frozen_forward(&x, &p).unwrap());
    }

    #[test]
    fn single_key_adds_value_row() {
        let mut rng = Rng::seed(12);
        let p = random_layer(1, 13);
        let x = random_mat(3, 1, &mut rng);
        let vr = 0.37;
        let a = Adapter::new(Mat::from_vec(1, 1, vec![1.5]).unwrap(), Mat::from_vec(1, 1, vec![vr]).unwrap()).unwrap();
        let frozen = frozen_forward(&x, &p).unwrap();
        let out = residual_forward(&x, &p, &a, 0.6).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - (frozen.get(i, 0) + 0.6 * vr)).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_keys_average_values() {
        let mut rng = Rng::seed(14);
        let p = random_layer(3, 15);
        let x = random_mat(4, 3, &mut rng);
        let key: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let keys = Mat::from_rows(&[key.clone(), key]).unwrap();
        let values = random_mat(2, 3, &mut rng);
        let a = Adapter::new(keys, values.clone()).unwrap();
        let (_, res) = residual_branches(&x, &p, &a).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((res.get(i, c) - 0.5 * (values.get(0, c) + values.get(1, c))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weight_out_of_range() {
        let mut rng = Rng::seed(1);
        let p = random_layer(2, 1);
        let a = init_adapter(1, 2, 0.1, &mut rng);
        let x = Mat::zeros(1, 2);
        assert!(matches!(residual_forward(&x, &p, &a, 1.5), Err(Error::Contract(_))));
        assert!(matches!(residual_forward(&x, &p, &a, -0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_values_zero_key_grad() {
        let mut rng = Rng::seed(16);
        let p = random_layer(4, 17);
        let x = random_mat(3, 4, &mut rng);
        let a = init_adapter(2, 4, 0.5, &mut rng);
        let d_out = random_mat(3, 4, &mut rng);
        let (dk, dv) = adapter_grads(&x, &p, &a, 0.8, &d_out).unwrap();
        assert_eq!(dk.max_abs(), 0.0);
        assert!(dv.max_abs() > 0.0);
    }

    #[test]
    fn zero_weight_zero_grads() {
        let mut rng = Rng::seed(18);
        let p = random_layer(4, 19);
        let x = random_mat(3, 4, &mut rng);
        let a = Adapter::new(random_mat(2, 4, &mut rng), random_mat(2, 4, &mut rng)).unwrap();
        let (dk, dv) = adapter_grads(&x, &p, &a, 0.0, &random_mat(3, 4, &mut rng)).unwrap();
        assert_eq!(dk.max_abs(), 0.0);
        assert_eq!(dv.max_abs(), 0.0);
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn adapter_grads_match_finite_differences() {
        let mut rng = Rng::seed(20);
        let (n, l, d) = (3, 2, 4);
        let p = random_layer(d, 21);
        let x = random_mat(n, d, &mut rng);
        let keys = random_mat(l, d, &mut rng);
        let values = random_mat(l, d, &mut rng);
        let d_out = random_mat(n, d, &mut rng);
        let w = 0.7;
        let (dk, dv) = adapter_grads(&x, &p, &Adapter::new(keys.clone(), values.clone()).unwrap(), w, &d_out).unwrap();
        let loss_k = |k: &[f64]| {
            let a = Adapter::new(Mat::from_vec(l, d, k.to_vec()).unwrap(), values.clone()).unwrap();
            crate::numkernel::dot(residual_forward(&x, &p, &a, w).unwrap().data(), d_out.data())
        };
        let loss_v = |v: &[f64]| {
            let a = Adapter::new(keys.clone(), Mat::from_vec(l, d, v.to_vec()).unwrap()).unwrap();
            crate::numkernel::dot(residual_forward(&x, &p, &a, w).unwrap().data(), d_out.data())
        };
        assert!(rel_err(dk.data(), &finite_diff_grad(loss_k, keys.data(), 1e-5)) < 1e-6);
        assert!(rel_err(dv.data(), &finite_diff_grad(loss_v, values.data(), 1e-5)) < 1e-6);
    }

    #[test]
    fn input_grads_match_finite_differences() {
        let mut rng = Rng::seed(22);
        let (n, l, d) = (4, 3, 5);
        let p = random_layer(d, 23);
        let x = random_mat(n, d, &mut rng);
        let a = Adapter::new(random_mat(l, d, &mut rng), random_mat(l, d, &mut rng)).unwrap();
        let prompt = PromptBaseline::new(random_mat(2, d, &mut rng)).unwrap();
        let d_out = random_mat(n, d, &mut rng);
        let inserts = [LayerInsert::None, LayerInsert::Residual { adapter: &a, weight: 0.4 }, LayerInsert::Prepend(&prompt)];
        for insert in &inserts {
            let (_, tape) = layer_forward(&x, &p, insert).unwrap();
            let grads = layer_backward(&tape, &p, insert, &d_out).unwrap();
            let loss = |xs: &[f64]| {
                let xm = Mat::from_vec(n, d, xs.to_vec()).unwrap();
                crate::numkernel::dot(layer_forward(&xm, &p, insert).unwrap().0.data(), d_out.data())
            };
            let fd = finite_diff_grad(loss, x.data(), 1e-5);
            assert!(rel_err(grads.d_input.data(), &fd) < 1e-6, "{insert:?}");
        }
    }

    #[test]
    fn prompt_grads_match_finite_differences() {
        let mut rng = Rng::seed(24);
        let (n, l, d) = (3, 2, 4);
        let p = random_layer(d, 25);
        let x = random_mat(n, d, &mut rng);
        let prompts = random_mat(l, d, &mut rng);
        let d_out = random_mat(n, d, &mut rng);
        let prompt = PromptBaseline::new(prompts.clone()).unwrap();
        let insert = LayerInsert::Prepend(&prompt);
        let (_, tape) = layer_forward(&x, &p, &insert).unwrap();
        let grads = layer_backward(&tape, &p, &insert, &d_out).unwrap();
        let ParamGrads::Prepend { d_prompts } = grads.params else { panic!("prepend grads") };
        let loss = |ps: &[f64]| {
            let pb = PromptBaseline::new(Mat::from_vec(l, d, ps.to_vec()).unwrap()).unwrap();
            crate::numkernel::dot(prepend_forward(&x, &p, &pb).unwrap().data(), d_out.data())
        };
        assert!(rel_err(d_prompts.data(), &finite_diff_grad(loss, prompts.data(), 1e-5)) < 1e-6);
    }

    #[test]
    fn init_bounds() {
        let a = init_adapter(3, 4, 0.0, &mut Rng::seed(0));
        assert_eq!(a.keys().max_abs(), 0.0);
        assert_eq!(a.values().max_abs(), 0.0);
        assert_eq!(init_adapter_ablation(3, 4, 0.0, &mut Rng::seed(0)), a);

        let b = init_adapter(4, 8, 0.02, &mut Rng::seed(42));
        assert_eq!(b, init_adapter(4, 8, 0.02, &mut Rng::seed(42)));
        assert!(b.keys().data().iter().all(|v| v.abs() <= 0.02));
        assert_eq!(b.values().max_abs(), 0.0);
    }

    #[test]
    fn ablation_init_injects_noise_growing_with_bound() {
        let p = random_layer(4, 30);
        let x = random_mat(3, 4, &mut Rng::seed(31));
        let frozen = frozen_forward(&x, &p).unwrap();
        let dev = |bound: f64| {
            let a = init_adapter_ablation(2, 4, bound, &mut Rng::seed(32));
            residual_forward(&x, &p, &a, 1.0).unwrap().sub(&frozen).unwrap().frobenius()
        };
        assert!(dev(0.01) > 0.0);
        assert!(dev(1.0) > dev(0.01));
    }
}
