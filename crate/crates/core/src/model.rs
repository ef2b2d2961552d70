//! Encoder, projection head, classifier, and the SGD optimizer.
//!
//! The encoder is an MLP: affine layers with ReLU between them, mapping the
//! input dimension through the configured hidden widths to the embedding
//! dimension. A single affine projection head maps the embedding to the
//! contrastive space (unit-normalized), and a single affine classifier maps
//! it to class logits. Gradients are computed by hand-rolled reverse-mode
//! differentiation of this fixed architecture, including the Jacobian of the
//! L2 normalization.
//!
//! # Checkpoint format
//!
//! Binary, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  "MOITCKPT"
//! version u32      currently 1
//! then for each tensor until EOF:
//!   name_len u64, name (UTF-8), rank u64, dims (rank x u64), values (f64)
//! ```
//!
//! Tensor names are `encoder.<i>.weight` / `encoder.<i>.bias` (row-major
//! `[out, in]` weights), `projector.weight`, `projector.bias`,
//! `classifier.weight`, `classifier.bias`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{axpy, dot, l2_normalize, Matrix};
use crate::rng::Rng;

/// Affine layer `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        AffineLayer {
            weight: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    fn init(out: usize, inp: usize, rng: &mut Rng) -> Self {
        // Weights uniform in +-sqrt(6 / (fan_in + fan_out)); biases uniform
        // in +-1/sqrt(fan_in). Nonzero biases keep the projected embedding
        // away from exact zero even when a ReLU layer goes fully dark, so
        // the normalized embedding is defined from step 0.
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let mut weight = Matrix::zeros(out, inp);
        for v in weight.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        let bias_bound = 1.0 / (inp as f64).sqrt();
        let bias = (0..out).map(|_| rng.uniform(-bias_bound, bias_bound)).collect();
        AffineLayer { weight, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.iter_rows()) {
            *o += dot(row, x);
        }
        out
    }

    /// Returns `W^T g`.
    fn back_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_dim()];
        for (row, &gi) in self.weight.iter_rows().zip(g) {
            axpy(&mut out, row, gi);
        }
        out
    }
}

/// Architecture description: input -> hidden... -> embed, embed -> proj,
/// embed -> classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub embed: usize,
    pub proj: usize,
    pub classes: usize,
}

/// All trainable parameters. Also reused as the container for gradients and
/// momentum buffers, whose shapes mirror the parameters exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<AffineLayer>,
    pub projector: AffineLayer,
    pub classifier: AffineLayer,
}

impl ModelParams {
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Self {
        assert!(dims.input > 0 && dims.embed > 0 && dims.proj > 0 && dims.classes > 0);
        let mut encoder = Vec::new();
        let mut prev = dims.input;
        for &h in &dims.hidden {
            encoder.push(AffineLayer::init(h, prev, rng));
            prev = h;
        }
        encoder.push(AffineLayer::init(dims.embed, prev, rng));
        ModelParams {
            encoder,
            projector: AffineLayer::init(dims.proj, dims.embed, rng),
            classifier: AffineLayer::init(dims.classes, dims.embed, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self
                .encoder
                .iter()
                .map(|l| AffineLayer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            projector: AffineLayer::zeros(self.projector.out_dim(), self.projector.in_dim()),
            classifier: AffineLayer::zeros(self.classifier.out_dim(), self.classifier.in_dim()),
        }
    }

    pub fn dims(&self) -> ModelDims {
        let mut hidden: Vec<usize> = self.encoder.iter().map(|l| l.out_dim()).collect();
        let embed = hidden.pop().expect("encoder has at least one layer");
        ModelDims {
            input: self.encoder[0].in_dim(),
            hidden,
            embed,
            proj: self.projector.out_dim(),
            classes: self.classifier.out_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Re-initializes the classifier in place, leaving everything else
    /// untouched.
    pub fn reinit_classifier(&mut self, rng: &mut Rng) {
        self.classifier = AffineLayer::init(self.classifier.out_dim(), self.classifier.in_dim(), rng);
    }
}

/// Outputs and cached intermediates of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each encoder layer (`layer_inputs[0]` is the sample itself).
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each encoder layer.
    preacts: Vec<Vec<f64>>,
    /// Encoder output (embedding).
    pub embedding: Vec<f64>,
    /// Projection-head output, before normalization.
    pub projected: Vec<f64>,
    norm: f64,
    /// Unit-normalized projection used by the contrastive losses.
    pub unit: Vec<f64>,
    /// Classifier logits.
    pub logits: Vec<f64>,
}

/// Maps a sample through encoder, projector (with L2 normalization), and
/// classifier, caching what backprop needs. Deterministic.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardPass> {
    if x.len() != params.input_dim() {
        return Err(Error::DimMismatch {
            context: "forward input",
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    let layers = params.encoder.len();
    let mut layer_inputs = Vec::with_capacity(layers);
    let mut preacts = Vec::with_capacity(layers);
    let mut h = x.to_vec();
    for (i, layer) in params.encoder.iter().enumerate() {
        let pre = layer.apply(&h);
        layer_inputs.push(h);
        // ReLU between layers, none after the last.
        h = if i + 1 < layers {
            pre.iter().map(|&v| v.max(0.0)).collect()
        } else {
            pre.clone()
        };
        preacts.push(pre);
    }
    let embedding = h;
    let projected = params.projector.apply(&embedding);
    let unit = l2_normalize(&projected)?;
    let norm = crate::math::norm2(&projected);
    let logits = params.classifier.apply(&embedding);
    Ok(ForwardPass {
        layer_inputs,
        preacts,
        embedding,
        projected,
        norm,
        unit,
        logits,
    })
}

/// Forward over many rows, optionally fanned out across threads. Results are
/// in row order regardless of thread count.
pub fn forward_batch(params: &ModelParams, inputs: &Matrix, threads: usize) -> Result<Vec<ForwardPass>> {
    let rows: Vec<&[f64]> = inputs.iter_rows().collect();
    let passes = crate::math::parallel_chunks(rows.len(), threads, |range| {
        range.map(|i| forward(params, rows[i])).collect::<Vec<_>>()
    });
    passes.into_iter().collect()
}

/// Accumulates exact gradients of a scalar loss w.r.t. every parameter, given
/// per-sample upstream gradients on the unit embedding `z` and on the logits.
/// Either upstream may be empty when that head is unused.
pub fn backward(
    params: &ModelParams,
    passes: &[ForwardPass],
    unit_grads: &[Vec<f64>],
    logit_grads: &[Vec<f64>],
) -> ModelParams {
    assert!(unit_grads.is_empty() || unit_grads.len() == passes.len());
    assert!(logit_grads.is_empty() || logit_grads.len() == passes.len());
    let mut grads = params.zeros_like();
    let layers = params.encoder.len();
    for (s, pass) in passes.iter().enumerate() {
        let mut g_embed = vec![0.0; pass.embedding.len()];

        if let Some(gl) = logit_grads.get(s) {
            for (row, (&gi, wrow)) in grads
                .classifier
                .weight
                .data_mut()
                .chunks_exact_mut(pass.embedding.len())
                .zip(gl.iter().zip(params.classifier.weight.iter_rows()))
            {
                axpy(row, &pass.embedding, gi);
                axpy(&mut g_embed, wrow, gi);
            }
            axpy(&mut grads.classifier.bias, gl, 1.0);
        }

        if let Some(gz) = unit_grads.get(s) {
            // d z / d w for z = w / |w|: (g - (g . z) z) / |w|.
            let gz_dot_z = dot(gz, &pass.unit);
            let g_proj: Vec<f64> = gz
                .iter()
                .zip(&pass.unit)
                .map(|(&g, &z)| (g - gz_dot_z * z) / pass.norm)
                .collect();
            for (row, (&gi, wrow)) in grads
                .projector
                .weight
                .data_mut()
                .chunks_exact_mut(pass.embedding.len())
                .zip(g_proj.iter().zip(params.projector.weight.iter_rows()))
            {
                axpy(row, &pass.embedding, gi);
                axpy(&mut g_embed, wrow, gi);
            }
            axpy(&mut grads.projector.bias, &g_proj, 1.0);
        }

        // Encoder: walk layers top-down. The last layer has no activation.
        let mut g = g_embed;
        for i in (0..layers).rev() {
            let g_pre: Vec<f64> = if i + 1 < layers {
                g.iter()
                    .zip(&pass.preacts[i])
                    .map(|(&gi, &p)| if p > 0.0 { gi } else { 0.0 })
                    .collect()
            } else {
                g
            };
            let input = &pass.layer_inputs[i];
            for (row, &gi) in grads.encoder[i]
                .weight
                .data_mut()
                .chunks_exact_mut(input.len())
                .zip(&g_pre)
            {
                axpy(row, input, gi);
            }
            axpy(&mut grads.encoder[i].bias, &g_pre, 1.0);
            g = params.encoder[i].back_input(&g_pre);
        }
    }
    grads
}

/// Which parameter groups an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateScope {
    All,
    /// Fine-tuning never updates the projection head.
    FreezeProjector,
}

/// SGD momentum state; buffer shapes mirror the parameters.
#[derive(Debug, Clone)]
pub struct OptState {
    pub buffers: ModelParams,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        OptState {
            buffers: params.zeros_like(),
            step: 0,
        }
    }
}

fn sgd_update(
    param: &mut [f64],
    grad: &[f64],
    buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = momentum * *b + g + weight_decay * *p;
        *p -= lr * *b;
    }
}

/// One SGD step: `buf <- momentum * buf + grad + weight_decay * param`,
/// `param <- param - lr * buf`. Weight decay applies to weights only, never
/// to biases.
pub fn sgd_step(
    params: &mut ModelParams,
    state: &mut OptState,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    scope: UpdateScope,
) {
    for ((layer, glayer), blayer) in params
        .encoder
        .iter_mut()
        .zip(&grads.encoder)
        .zip(&mut state.buffers.encoder)
    {
        sgd_update(
            layer.weight.data_mut(),
            glayer.weight.data(),
            blayer.weight.data_mut(),
            lr,
            momentum,
            weight_decay,
        );
        sgd_update(&mut layer.bias, &glayer.bias, &mut blayer.bias, lr, momentum, 0.0);
    }
    if scope == UpdateScope::All {
        sgd_update(
            params.projector.weight.data_mut(),
            grads.projector.weight.data(),
            state.buffers.projector.weight.data_mut(),
            lr,
            momentum,
            weight_decay,
        );
        sgd_update(
            &mut params.projector.bias,
            &grads.projector.bias,
            &mut state.buffers.projector.bias,
            lr,
            momentum,
            0.0,
        );
    }
    sgd_update(
        params.classifier.weight.data_mut(),
        grads.classifier.weight.data(),
        state.buffers.classifier.weight.data_mut(),
        lr,
        momentum,
        weight_decay,
    );
    sgd_update(
        &mut params.classifier.bias,
        &grads.classifier.bias,
        &mut state.buffers.classifier.bias,
        lr,
        momentum,
        0.0,
    );
    state.step += 1;
}

/// Piecewise-constant learning-rate schedule: the initial value is multiplied
/// by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

pub fn lr_at(epoch: usize, schedule: &LrSchedule) -> f64 {
    let hits = schedule.milestones.iter().filter(|&&m| epoch >= m).count();
    schedule.initial * schedule.factor.powi(hits as i32)
}

const CKPT_MAGIC: &[u8; 8] = b"MOITCKPT";
const CKPT_VERSION: u32 = 1;

fn write_tensor<W: Write>(w: &mut W, name: &str, dims: &[u64], values: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u64).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes parameters to `path` in the documented checkpoint format.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    for (i, layer) in params.encoder.iter().enumerate() {
        write_tensor(
            &mut w,
            &format!("encoder.{i}.weight"),
            &[layer.out_dim() as u64, layer.in_dim() as u64],
            layer.weight.data(),
        )?;
        write_tensor(&mut w, &format!("encoder.{i}.bias"), &[layer.out_dim() as u64], &layer.bias)?;
    }
    for (name, layer) in [("projector", &params.projector), ("classifier", &params.classifier)] {
        write_tensor(
            &mut w,
            &format!("{name}.weight"),
            &[layer.out_dim() as u64, layer.in_dim() as u64],
            layer.weight.data(),
        )?;
        write_tensor(&mut w, &format!("{name}.bias"), &[layer.out_dim() as u64], &layer.bias)?;
    }
    w.flush()?;
    Ok(())
}

type TensorRecord = (String, Vec<u64>, Vec<f64>);

struct TensorReader<R: Read> {
    inner: R,
}

impl<R: Read> TensorReader<R> {
    fn read_u64(&mut self) -> Result<Option<u64>> {
        let mut buf = [0u8; 8];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => Ok(Some(u64::from_le_bytes(buf))),
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn read_u64_strict(&mut self) -> Result<u64> {
        self.read_u64()?
            .ok_or_else(|| Error::Checkpoint("truncated tensor record".into()))
    }

    fn next(&mut self) -> Result<Option<TensorRecord>> {
        let name_len = match self.read_u64()? {
            Some(n) => n,
            None => return Ok(None),
        };
        if name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        self.inner
            .read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name not UTF-8".into()))?;
        let rank = self.read_u64_strict()?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(self.read_u64_strict()?);
        }
        let count: u64 = dims.iter().product();
        if count > 100_000_000 {
            return Err(Error::Checkpoint(format!("implausible tensor size {count}")));
        }
        let mut values = Vec::with_capacity(count as usize);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            self.inner
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated tensor values".into()))?;
            values.push(f64::from_le_bytes(buf));
        }
        Ok(Some((name, dims, values)))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)
        .map_err(|_| Error::Checkpoint("file too short for version".into()))?;
    let version = u32::from_le_bytes(ver);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }

    let mut tensors = std::collections::HashMap::new();
    let mut reader = TensorReader { inner: r };
    while let Some((name, dims, values)) = reader.next()? {
        tensors.insert(name, (dims, values));
    }

    let take_layer = |tensors: &mut std::collections::HashMap<String, (Vec<u64>, Vec<f64>)>,
                      prefix: &str|
     -> Result<AffineLayer> {
        let (wdims, wvals) = tensors
            .remove(&format!("{prefix}.weight"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.weight")))?;
        if wdims.len() != 2 {
            return Err(Error::Checkpoint(format!("{prefix}.weight is not rank 2")));
        }
        let (out, inp) = (wdims[0] as usize, wdims[1] as usize);
        if wvals.len() != out * inp {
            return Err(Error::Checkpoint(format!("{prefix}.weight size mismatch")));
        }
        let (bdims, bvals) = tensors
            .remove(&format!("{prefix}.bias"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.bias")))?;
        if bdims.len() != 1 || bdims[0] as usize != out || bvals.len() != out {
            return Err(Error::Checkpoint(format!("{prefix}.bias shape mismatch")));
        }
        Ok(AffineLayer {
            weight: Matrix::from_vec(out, inp, wvals),
            bias: bvals,
        })
    };

    let mut encoder = Vec::new();
    let mut i = 0;
    while tensors.contains_key(&format!("encoder.{i}.weight")) {
        encoder.push(take_layer(&mut tensors, &format!("encoder.{i}"))?);
        i += 1;
    }
    if encoder.is_empty() {
        return Err(Error::Checkpoint("no encoder layers found".into()));
    }
    let projector = take_layer(&mut tensors, "projector")?;
    let classifier = take_layer(&mut tensors, "classifier")?;
    if !tensors.is_empty() {
        let mut names: Vec<&String> = tensors.keys().collect();
        names.sort();
        return Err(Error::Checkpoint(format!("unexpected tensors: {names:?}")));
    }

    // Dimension chain must be consistent.
    for w in encoder.windows(2) {
        if w[1].in_dim() != w[0].out_dim() {
            return Err(Error::Checkpoint("encoder layer dims do not chain".into()));
        }
    }
    let embed = encoder.last().unwrap().out_dim();
    if projector.in_dim() != embed || classifier.in_dim() != embed {
        return Err(Error::Checkpoint("head input dims do not match embedding".into()));
    }
    Ok(ModelParams {
        encoder,
        projector,
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(seed: u64) -> ModelParams {
        let dims = ModelDims {
            input: 3,
            hidden: vec![4],
            embed: 4,
            proj: 3,
            classes: 2,
        };
        ModelParams::init(&dims, &mut Rng::new(seed))
    }

    #[test]
    fn forward_identity_like_normalizes() {
        // 1-layer encoder = identity, identity projector: z = normalize(x).
        let mut params = ModelParams {
            encoder: vec![AffineLayer::zeros(2, 2)],
            projector: AffineLayer::zeros(2, 2),
            classifier: AffineLayer::zeros(2, 2),
        };
        params.encoder[0].weight.set(0, 0, 1.0);
        params.encoder[0].weight.set(1, 1, 1.0);
        params.projector.weight.set(0, 0, 1.0);
        params.projector.weight.set(1, 1, 1.0);
        let pass = forward(&params, &[3.0, 4.0]).unwrap();
        assert!((pass.unit[0] - 0.6).abs() < 1e-15);
        assert!((pass.unit[1] - 0.8).abs() < 1e-15);
        assert_eq!(pass.logits, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_zero_weights() {
        let params = ModelParams {
            encoder: vec![AffineLayer::zeros(2, 2)],
            projector: AffineLayer::zeros(2, 2),
            classifier: AffineLayer::zeros(2, 2),
        };
        assert!(matches!(
            forward(&params, &[1.0, 2.0]),
            Err(Error::NearZeroNorm { .. })
        ));
    }

    #[test]
    fn forward_deterministic() {
        let params = tiny_params(3);
        let a = forward(&params, &[0.1, -0.2, 0.5]).unwrap();
        let b = forward(&params, &[0.1, -0.2, 0.5]).unwrap();
        assert_eq!(a.unit, b.unit);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn forward_dim_mismatch() {
        let params = tiny_params(3);
        assert!(matches!(
            forward(&params, &[1.0, 2.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn unit_norm_invariant() {
        let params = tiny_params(7);
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
            let pass = forward(&params, &x).unwrap();
            assert!((crate::math::norm2(&pass.unit) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let params = tiny_params(1);
        let pass = forward(&params, &[0.3, 0.5, -0.2]).unwrap();
        let grads = backward(
            &params,
            std::slice::from_ref(&pass),
            &[vec![0.0; 3]],
            &[vec![0.0; 2]],
        );
        assert!(grads.encoder[0].weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.projector.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.classifier.weight.data().iter().all(|&v| v == 0.0));
    }

    fn fd_check(
        params: &mut ModelParams,
        loss: &dyn Fn(&ModelParams) -> f64,
        get: &mut dyn FnMut(&mut ModelParams) -> &mut f64,
        analytic: f64,
    ) {
        let eps = 1e-6;
        let orig = *get(params);
        *get(params) = orig + eps;
        let up = loss(params);
        *get(params) = orig - eps;
        let down = loss(params);
        *get(params) = orig;
        let fd = (up - down) / (2.0 * eps);
        let denom = fd.abs().max(analytic.abs()).max(1e-4);
        assert!(
            ((analytic - fd) / denom).abs() < 1e-4,
            "analytic {analytic} vs fd {fd}"
        );
    }

    /// Central-difference oracle: loss is linear in (z, logits) with fixed
    /// coefficients, so upstream grads are those coefficients.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(42);
        for trial in 0..20u64 {
            let mut params = tiny_params(100 + trial);
            let xs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gaussian()).collect())
                .collect();
            let az: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gaussian()).collect())
                .collect();
            let al: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..2).map(|_| rng.gaussian()).collect())
                .collect();
            let loss = {
                let xs = xs.clone();
                let az = az.clone();
                let al = al.clone();
                move |p: &ModelParams| -> f64 {
                    xs.iter()
                        .enumerate()
                        .map(|(s, x)| {
                            let pass = forward(p, x).unwrap();
                            dot(&az[s], &pass.unit) + dot(&al[s], &pass.logits)
                        })
                        .sum()
                }
            };
            let passes: Vec<ForwardPass> = xs.iter().map(|x| forward(&params, x).unwrap()).collect();
            let analytic = backward(&params, &passes, &az, &al);

            for li in 0..2 {
                for k in 0..analytic.encoder[li].weight.data().len() {
                    let a = analytic.encoder[li].weight.data()[k];
                    fd_check(&mut params, &loss, &mut |p| &mut p.encoder[li].weight.data_mut()[k], a);
                }
                for k in 0..analytic.encoder[li].bias.len() {
                    let a = analytic.encoder[li].bias[k];
                    fd_check(&mut params, &loss, &mut |p| &mut p.encoder[li].bias[k], a);
                }
            }
            for k in 0..analytic.projector.weight.data().len() {
                let a = analytic.projector.weight.data()[k];
                fd_check(&mut params, &loss, &mut |p| &mut p.projector.weight.data_mut()[k], a);
            }
            for k in 0..analytic.classifier.weight.data().len() {
                let a = analytic.classifier.weight.data()[k];
                fd_check(&mut params, &loss, &mut |p| &mut p.classifier.weight.data_mut()[k], a);
            }
        }
    }

    /// The normalization Jacobian alone, against finite differences.
    #[test]
    fn unit_norm_jacobian_on_three_four() {
        let w = [3.0, 4.0];
        let norm = crate::math::norm2(&w);
        let z = l2_normalize(&w).unwrap();
        let g = [0.7, -0.3];
        let gdz = dot(&g, &z);
        let analytic: Vec<f64> = g.iter().zip(&z).map(|(&gi, &zi)| (gi - gdz * zi) / norm).collect();

        let eps = 1e-6;
        for k in 0..2 {
            let mut up = w;
            up[k] += eps;
            let mut down = w;
            down[k] -= eps;
            let fd = (dot(&g, &l2_normalize(&up).unwrap()) - dot(&g, &l2_normalize(&down).unwrap()))
                / (2.0 * eps);
            assert!((analytic[k] - fd).abs() < 1e-6, "{} vs {}", analytic[k], fd);
        }
    }

    #[test]
    fn sgd_zero_grads_zero_decay_is_identity() {
        let mut params = tiny_params(5);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptState::new(&params);
        sgd_step(&mut params, &mut state, &grads, 0.1, 0.9, 0.0, UpdateScope::All);
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_lr_zero_is_identity() {
        let mut params = tiny_params(5);
        let before = params.clone();
        let mut grads = params.zeros_like();
        for v in grads.encoder[0].weight.data_mut() {
            *v = 1.5;
        }
        let mut state = OptState::new(&params);
        sgd_step(&mut params, &mut state, &grads, 0.0, 0.9, 1e-4, UpdateScope::All);
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_plain_scalar_step() {
        // p = 1, grad = 1, lr = 0.1, no momentum, no decay -> p = 0.9.
        let mut p = [1.0];
        let mut buf = [0.0];
        sgd_update(&mut p, &[1.0], &mut buf, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // p0 = 0, two grads of 1, momentum 0.9, lr 0.1:
        // step 1: buf=1, p=-0.1; step 2: buf=1.9, p=-0.29.
        let mut p = [0.0];
        let mut buf = [0.0];
        sgd_update(&mut p, &[1.0], &mut buf, 0.1, 0.9, 0.0);
        sgd_update(&mut p, &[1.0], &mut buf, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn sgd_decay_skips_biases() {
        let mut params = tiny_params(5);
        for b in &mut params.encoder[0].bias {
            *b = 2.0;
        }
        let grads = params.zeros_like();
        let mut state = OptState::new(&params);
        sgd_step(&mut params, &mut state, &grads, 0.1, 0.0, 0.5, UpdateScope::All);
        assert!(params.encoder[0].bias.iter().all(|&b| b == 2.0));
    }

    #[test]
    fn freeze_projector_scope() {
        let mut params = tiny_params(5);
        let before_proj = params.projector.clone();
        let mut grads = params.zeros_like();
        for v in grads.projector.weight.data_mut() {
            *v = 1.0;
        }
        for v in grads.classifier.weight.data_mut() {
            *v = 1.0;
        }
        let mut state = OptState::new(&params);
        sgd_step(&mut params, &mut state, &grads, 0.1, 0.9, 1e-4, UpdateScope::FreezeProjector);
        assert_eq!(params.projector, before_proj);
        assert_ne!(params.classifier, tiny_params(5).classifier);
    }

    #[test]
    fn lr_schedule_milestones() {
        let sched = LrSchedule {
            initial: 0.1,
            milestones: vec![125, 200],
            factor: 0.1,
        };
        assert!((lr_at(0, &sched) - 0.1).abs() < 1e-15);
        assert!((lr_at(124, &sched) - 0.1).abs() < 1e-15);
        assert!((lr_at(125, &sched) - 0.01).abs() < 1e-15);
        assert!((lr_at(199, &sched) - 0.01).abs() < 1e-15);
        assert!((lr_at(200, &sched) - 0.001).abs() < 1e-15);
        assert!((lr_at(1000, &sched) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = tiny_params(77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let params = tiny_params(77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
