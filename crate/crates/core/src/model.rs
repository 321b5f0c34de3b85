//! Sequential layer stacks with hand-written backward passes.

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_weights, conv2d_weights_backward, ConvSpec, KernelScope};
use crate::deform::{
    add_channel_bias, channel_sums, clip_offset_field, deform_backward, deform_forward,
    GlobalOffsetGenerator, LocalOffsetGenerator, OffsetGenerator,
};
use crate::error::{shape_err, Error, Result};
use crate::random::{normal_tensor, normal_vec, DetRng};
use crate::tensor::{
    fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, Real, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformKind {
    DkGlobal,
    DkLocal,
    Dc,
    Dcdk,
}

impl DeformKind {
    pub fn has_kernel_offsets(self) -> bool {
        !matches!(self, DeformKind::Dc)
    }
    pub fn has_data_offsets(self) -> bool {
        matches!(self, DeformKind::Dc | DeformKind::Dcdk)
    }
    pub fn name(self) -> &'static str {
        match self {
            DeformKind::DkGlobal => "dk_global",
            DeformKind::DkLocal => "dk_local",
            DeformKind::Dc => "dc",
            DeformKind::Dcdk => "dcdk",
        }
    }
}

/// Parameter-free description of one layer; enough to rebuild a zeroed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerDesc {
    Rigid {
        spec: ConvSpec,
        bias: bool,
    },
    Deform {
        kind: DeformKind,
        spec: ConvSpec,
        scope_size: usize,
        bias: bool,
        lr_multiplier: f64,
    },
    Relu,
    Pool,
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer<T = f64> {
    pub spec: ConvSpec,
    pub kernel: KernelScope<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformLayer<T = f64> {
    pub kind: DeformKind,
    pub spec: ConvSpec,
    pub scope: KernelScope<T>,
    pub kernel_generator: Option<OffsetGenerator<T>>,
    pub data_generator: Option<LocalOffsetGenerator<T>>,
    pub bias: Option<Vec<T>>,
    /// Learning-rate multiplier for the offset generators.
    pub lr_multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcLayer<T = f64> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

// Layers live in one small Vec; boxing the deformable variant buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer<T = f64> {
    Rigid(ConvLayer<T>),
    Deform(DeformLayer<T>),
    Relu,
    Pool,
    Fc(FcLayer<T>),
}

impl<T: Real> Layer<T> {
    pub fn from_desc(desc: &LayerDesc) -> Result<Self> {
        Ok(match desc {
            LayerDesc::Rigid { spec, bias } => {
                spec.validate()?;
                let k = spec.kernel_size;
                Layer::Rigid(ConvLayer {
                    spec: *spec,
                    kernel: KernelScope::rigid(Tensor::zeros([
                        spec.out_channels,
                        spec.kernel_in_channels(),
                        k,
                        k,
                    ])?)?,
                    bias: bias.then(|| vec![T::zero(); spec.out_channels]),
                })
            }
            LayerDesc::Deform {
                kind,
                spec,
                scope_size,
                bias,
                lr_multiplier,
            } => {
                spec.validate()?;
                let scope = KernelScope::new(
                    spec.kernel_size,
                    *scope_size,
                    Tensor::zeros([
                        spec.out_channels,
                        spec.kernel_in_channels(),
                        *scope_size,
                        *scope_size,
                    ])?,
                )?;
                let kernel_generator = match kind {
                    DeformKind::DkGlobal => Some(OffsetGenerator::Global(
                        GlobalOffsetGenerator::zeros(spec.in_channels, spec.kernel_size),
                    )),
                    DeformKind::DkLocal | DeformKind::Dcdk => Some(OffsetGenerator::Local(
                        LocalOffsetGenerator::for_target(spec)?,
                    )),
                    DeformKind::Dc => None,
                };
                let data_generator = if kind.has_data_offsets() {
                    Some(LocalOffsetGenerator::for_target(spec)?)
                } else {
                    None
                };
                Layer::Deform(DeformLayer {
                    kind: *kind,
                    spec: *spec,
                    scope,
                    kernel_generator,
                    data_generator,
                    bias: bias.then(|| vec![T::zero(); spec.out_channels]),
                    lr_multiplier: *lr_multiplier,
                })
            }
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::Pool => Layer::Pool,
            LayerDesc::Fc { inputs, outputs } => Layer::Fc(FcLayer {
                inputs: *inputs,
                outputs: *outputs,
                weights: vec![T::zero(); inputs * outputs],
                bias: vec![T::zero(); *outputs],
            }),
        })
    }

    pub fn desc(&self) -> LayerDesc {
        match self {
            Layer::Rigid(c) => LayerDesc::Rigid {
                spec: c.spec,
                bias: c.bias.is_some(),
            },
            Layer::Deform(d) => LayerDesc::Deform {
                kind: d.kind,
                spec: d.spec,
                scope_size: d.scope.scope_size(),
                bias: d.bias.is_some(),
                lr_multiplier: d.lr_multiplier,
            },
            Layer::Relu => LayerDesc::Relu,
            Layer::Pool => LayerDesc::Pool,
            Layer::Fc(f) => LayerDesc::Fc {
                inputs: f.inputs,
                outputs: f.outputs,
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Rigid(_) => "rigid",
            Layer::Deform(d) => d.kind.name(),
            Layer::Relu => "relu",
            Layer::Pool => "pool",
            Layer::Fc(_) => "fc",
        }
    }

    fn is_spatial_conv(&self) -> bool {
        matches!(self, Layer::Rigid(_) | Layer::Deform(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    Scope,
    GeneratorWeight,
    GeneratorBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub role: ParamRole,
    pub dims: [usize; 4],
    pub lr_multiplier: f64,
}

impl ParamInfo {
    pub fn decays(&self) -> bool {
        matches!(
            self.role,
            ParamRole::Weight | ParamRole::Scope | ParamRole::GeneratorWeight
        )
    }
}

/// Kernel and data offsets of one deformable layer; either may be absent.
pub type OffsetPair<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

/// One gradient buffer per parameter slice.
pub type ParamGrads<T> = Vec<Vec<T>>;

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// `activations[l]` is the input of layer `l`; the last entry is the model output.
    pub activations: Vec<Tensor<T>>,
    /// Raw kernel and data offsets produced inside deformable layers.
    pub offsets: Vec<Option<OffsetPair<T>>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations
            .last()
            .expect("trace has the input at least")
    }
}

/// Per-layer ReLU firing masks recorded during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingTrace {
    pub masks: Vec<GateMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateMask {
    pub layer: usize,
    pub dims: [usize; 4],
    pub fired: Vec<bool>,
}

impl GatingTrace {
    pub fn from_trace<T: Real>(model: &ModelGraph<T>, trace: &Trace<T>) -> Self {
        let masks = model
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu))
            .map(|(i, _)| {
                let x = &trace.activations[i];
                GateMask {
                    layer: i,
                    dims: x.dims(),
                    fired: x.data().iter().map(|&v| v > T::zero()).collect(),
                }
            })
            .collect();
        Self { masks }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph<T = f64> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> ModelGraph<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn from_descs(descs: &[LayerDesc]) -> Result<Self> {
        Ok(Self {
            layers: descs.iter().map(Layer::from_desc).collect::<Result<_>>()?,
        })
    }

    pub fn descs(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(Layer::desc).collect()
    }

    /// Index of the first pooling layer, i.e. the end of the spatial trunk.
    pub fn trunk_end(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Pool))
            .unwrap_or(self.layers.len())
    }

    pub fn conv_depth(&self) -> usize {
        self.layers[..self.trunk_end()]
            .iter()
            .filter(|l| l.is_spatial_conv())
            .count()
    }

    /// Half-width of the theoretical receptive field of a trunk output unit,
    /// and the total trunk stride.
    pub fn receptive_field(&self) -> (usize, usize) {
        let mut half = 0;
        let mut stride = 1;
        for l in &self.layers[..self.trunk_end()] {
            let spec = match l {
                Layer::Rigid(c) => c.spec,
                Layer::Deform(d) => d.spec,
                _ => continue,
            };
            half += (spec.kernel_size / 2) * stride;
            stride *= spec.stride;
        }
        (half, stride)
    }

    pub fn deform_layers(&self) -> impl Iterator<Item = (usize, &DeformLayer<T>)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Deform(d) => Some((i, d)),
            _ => None,
        })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Trace<T>> {
        self.forward_to(input, self.layers.len())
    }

    /// Runs layers `[0, end)`.
    pub fn forward_to(&self, input: &Tensor<T>, end: usize) -> Result<Trace<T>> {
        let mut activations = Vec::with_capacity(end + 1);
        let mut offsets = Vec::with_capacity(end);
        activations.push(input.clone());
        for layer in &self.layers[..end] {
            let x = activations.last().expect("non-empty");
            let (y, off) = match layer {
                Layer::Rigid(c) => {
                    let mut y = conv2d_weights(x, c.kernel.weights().data(), &c.spec)?;
                    if let Some(b) = &c.bias {
                        add_channel_bias(&mut y, b);
                    }
                    (y, None)
                }
                Layer::Deform(d) => {
                    let koff = d
                        .kernel_generator
                        .as_ref()
                        .map(|g| g.forward(x))
                        .transpose()?;
                    let doff = d
                        .data_generator
                        .as_ref()
                        .map(|g| g.forward(x))
                        .transpose()?;
                    let mut y = deform_forward(x, &d.scope, &d.spec, koff.as_ref(), doff.as_ref())?;
                    if let Some(b) = &d.bias {
                        add_channel_bias(&mut y, b);
                    }
                    (y, Some((koff, doff)))
                }
                Layer::Relu => (relu(x), None),
                Layer::Pool => (global_avg_pool(x)?, None),
                Layer::Fc(f) => (fully_connected(x, &f.weights, &f.bias)?, None),
            };
            activations.push(y);
            offsets.push(off);
        }
        Ok(Trace {
            activations,
            offsets,
        })
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input)?.activations.pop().expect("output"))
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output of layer
    /// `end - 1`) through layers `[0, end)`. Returns parameter gradients in
    /// [`ModelGraph::params`] order, restricted to those layers (others are
    /// zero), and the gradient w.r.t. the model input when `need_input` is set.
    pub fn backward_from(
        &self,
        trace: &Trace<T>,
        end: usize,
        upstream: &Tensor<T>,
        need_input: bool,
    ) -> Result<(ParamGrads<T>, Option<Tensor<T>>)> {
        if trace.activations.len() < end + 1 {
            return Err(Error::Invalid(
                "trace is shorter than the requested backward range".into(),
            ));
        }
        if upstream.dims() != trace.activations[end].dims() {
            return Err(shape_err(
                "upstream dims differ from the activation being differentiated",
            ));
        }
        let mut layer_grads: Vec<Vec<Vec<T>>> = self.layers.iter().map(|l| zero_grads(l)).collect();
        let mut g = upstream.clone();
        for li in (0..end).rev() {
            let x = &trace.activations[li];
            let want_input = need_input || li > 0;
            g = match &self.layers[li] {
                Layer::Rigid(c) => {
                    let (gi, gw) = conv2d_weights_backward(
                        x,
                        c.kernel.weights().data(),
                        &c.spec,
                        &g,
                        want_input,
                    )?;
                    let mut grads = vec![gw];
                    if c.bias.is_some() {
                        grads.push(channel_sums(&g));
                    }
                    layer_grads[li] = grads;
                    gi
                }
                Layer::Deform(d) => {
                    let (koff, doff) = trace.offsets[li]
                        .as_ref()
                        .expect("deform layer records offsets");
                    let dg =
                        deform_backward(x, &d.scope, &d.spec, koff.as_ref(), doff.as_ref(), &g)?;
                    let mut gin = dg.input;
                    let mut grads = vec![dg.scope.into_vec()];
                    if d.bias.is_some() {
                        grads.push(channel_sums(&g));
                    }
                    if let (Some(gen), Some(gk)) = (&d.kernel_generator, &dg.kernel_offsets) {
                        let (gi, gg) = gen.backward(x, gk)?;
                        add_into(&mut gin, &gi);
                        grads.push(gg.weights);
                        grads.push(gg.bias);
                    }
                    if let (Some(gen), Some(gd)) = (&d.data_generator, &dg.data_offsets) {
                        let (gi, gg) = gen.backward(x, gd)?;
                        add_into(&mut gin, &gi);
                        grads.push(gg.weights);
                        grads.push(gg.bias);
                    }
                    layer_grads[li] = grads;
                    gin
                }
                Layer::Relu => relu_backward(x, &g)?,
                Layer::Pool => global_avg_pool_backward(x.dims(), &g)?,
                Layer::Fc(f) => {
                    let fg = fully_connected_backward(x, &f.weights, &g)?;
                    layer_grads[li] = vec![fg.weights, fg.bias];
                    fg.input
                }
            };
        }
        let input_grad = need_input.then_some(g);
        Ok((layer_grads.into_iter().flatten().collect(), input_grad))
    }

    pub fn params(&self) -> Vec<(ParamInfo, &[T])> {
        let mut out: Vec<(ParamInfo, &[T])> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let info = |suffix: &str, role, dims, lr| ParamInfo {
                name: format!("{i}.{suffix}"),
                role,
                dims,
                lr_multiplier: lr,
            };
            match layer {
                Layer::Rigid(c) => {
                    out.push((
                        info("weight", ParamRole::Weight, c.kernel.weights().dims(), 1.0),
                        c.kernel.weights().data(),
                    ));
                    if let Some(b) = &c.bias {
                        out.push((info("bias", ParamRole::Bias, [1, b.len(), 1, 1], 1.0), b));
                    }
                }
                Layer::Deform(d) => {
                    out.push((
                        info("scope", ParamRole::Scope, d.scope.weights().dims(), 1.0),
                        d.scope.weights().data(),
                    ));
                    if let Some(b) = &d.bias {
                        out.push((info("bias", ParamRole::Bias, [1, b.len(), 1, 1], 1.0), b));
                    }
                    if let Some(g) = &d.kernel_generator {
                        let (w, b) = g.params();
                        out.push((
                            info(
                                "kgen.weight",
                                ParamRole::GeneratorWeight,
                                [1, 1, 1, w.len()],
                                d.lr_multiplier,
                            ),
                            w,
                        ));
                        out.push((
                            info(
                                "kgen.bias",
                                ParamRole::GeneratorBias,
                                [1, b.len(), 1, 1],
                                d.lr_multiplier,
                            ),
                            b,
                        ));
                    }
                    if let Some(g) = &d.data_generator {
                        out.push((
                            info(
                                "dgen.weight",
                                ParamRole::GeneratorWeight,
                                g.weights.dims(),
                                d.lr_multiplier,
                            ),
                            g.weights.data(),
                        ));
                        out.push((
                            info(
                                "dgen.bias",
                                ParamRole::GeneratorBias,
                                [1, g.bias.len(), 1, 1],
                                d.lr_multiplier,
                            ),
                            &g.bias,
                        ));
                    }
                }
                Layer::Fc(f) => {
                    out.push((
                        info(
                            "weight",
                            ParamRole::Weight,
                            [1, 1, f.outputs, f.inputs],
                            1.0,
                        ),
                        &f.weights,
                    ));
                    out.push((
                        info("bias", ParamRole::Bias, [1, f.outputs, 1, 1], 1.0),
                        &f.bias,
                    ));
                }
                Layer::Relu | Layer::Pool => {}
            }
        }
        out
    }

    /// Mutable parameter slices in the same order as [`ModelGraph::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Rigid(c) => {
                    out.push(c.kernel.weights_mut().data_mut());
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
                Layer::Deform(d) => {
                    out.push(d.scope.weights_mut().data_mut());
                    if let Some(b) = &mut d.bias {
                        out.push(b);
                    }
                    if let Some(g) = &mut d.kernel_generator {
                        let (w, b) = g.params_mut();
                        out.push(w);
                        out.push(b);
                    }
                    if let Some(g) = &mut d.data_generator {
                        out.push(g.weights.data_mut());
                        out.push(&mut g.bias);
                    }
                }
                Layer::Fc(f) => {
                    out.push(&mut f.weights);
                    out.push(&mut f.bias);
                }
                Layer::Relu | Layer::Pool => {}
            }
        }
        out
    }

    /// He-normal weights; scopes are scaled so the kernel sampled at zero offsets
    /// has He variance. Zero biases and zero offset generators.
    pub fn init_random(&mut self, rng: &mut DetRng) {
        for layer in &mut self.layers {
            match layer {
                Layer::Rigid(c) => {
                    let fan_in =
                        c.spec.kernel_in_channels() * c.spec.kernel_size * c.spec.kernel_size;
                    let dims = c.kernel.weights().dims();
                    *c.kernel.weights_mut() =
                        normal_tensor(rng, dims, (2.0 / fan_in as f64).sqrt());
                }
                Layer::Deform(d) => {
                    let fan_in =
                        d.spec.kernel_in_channels() * d.spec.kernel_size * d.spec.kernel_size;
                    let dims = d.scope.weights().dims();
                    let std = (2.0 / (fan_in as f64 * d.scope.base_gain())).sqrt();
                    *d.scope.weights_mut() = normal_tensor(rng, dims, std);
                }
                Layer::Fc(f) => {
                    f.weights = normal_vec(rng, f.weights.len(), (1.0 / f.inputs as f64).sqrt());
                }
                Layer::Relu | Layer::Pool => {}
            }
        }
    }

    /// Clipped kernel offsets of the last layer that has them, `(N, 2K², H, W)`.
    pub fn last_kernel_offsets(&self, trace: &Trace<T>) -> Result<Option<Tensor<T>>> {
        for (i, d) in self.deform_layers().collect::<Vec<_>>().into_iter().rev() {
            if let Some((Some(k), _)) = trace.offsets.get(i).and_then(|o| o.as_ref()) {
                return clip_offset_field(k, &d.scope).map(Some);
            }
        }
        Ok(None)
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        let mut out =
            ModelGraph::<U>::from_descs(&self.descs()).expect("descs of a valid model rebuild");
        for (dst, (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.as_f64());
            }
        }
        out
    }
}

fn zero_grads<T: Real>(layer: &Layer<T>) -> Vec<Vec<T>> {
    let model = ModelGraph {
        layers: vec![layer.clone()],
    };
    model
        .params()
        .into_iter()
        .map(|(_, p)| vec![T::zero(); p.len()])
        .collect()
}

fn add_into<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += *b;
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let [n, m, h, w] = logits.dims();
    if h != 1 || w != 1 || labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy expects (N,M,1,1) logits and N labels",
        ));
    }
    let mut grad = Vec::with_capacity(n * m);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= m {
            return Err(Error::Invalid(format!(
                "label {label} out of range for {m} classes"
            )));
        }
        let z = logits.item(b);
        let max = z.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let exps: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += -((exps[label] / sum).ln());
        for (c, e) in exps.iter().enumerate() {
            let p = e / sum - if c == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64(p * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::from_parts([n, m, 1, 1], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded_rng;

    pub(crate) fn tiny_model() -> ModelGraph<f64> {
        let c1 = ConvSpec::new(3, 1, 1, false, 1, 2).unwrap();
        let d = ConvSpec::new(3, 2, 1, true, 2, 2).unwrap();
        let descs = vec![
            LayerDesc::Rigid {
                spec: c1,
                bias: true,
            },
            LayerDesc::Relu,
            LayerDesc::Deform {
                kind: DeformKind::Dcdk,
                spec: d,
                scope_size: 4,
                bias: false,
                lr_multiplier: 0.01,
            },
            LayerDesc::Relu,
            LayerDesc::Pool,
            LayerDesc::Fc {
                inputs: 2,
                outputs: 3,
            },
        ];
        let mut m = ModelGraph::from_descs(&descs).unwrap();
        m.init_random(&mut seeded_rng(1));
        m
    }

    #[test]
    fn desc_round_trip_and_params_align() {
        let m = tiny_model();
        let rebuilt = ModelGraph::<f64>::from_descs(&m.descs()).unwrap();
        assert_eq!(rebuilt.descs(), m.descs());
        let names: Vec<String> = m.params().iter().map(|(i, _)| i.name.clone()).collect();
        assert_eq!(
            names,
            [
                "0.weight",
                "0.bias",
                "2.scope",
                "2.kgen.weight",
                "2.kgen.bias",
                "2.dgen.weight",
                "2.dgen.bias",
                "5.weight",
                "5.bias"
            ]
        );
        let mut m2 = m.clone();
        let lens: Vec<usize> = m2.params_mut().iter().map(|p| p.len()).collect();
        assert_eq!(
            lens,
            m.params().iter().map(|(_, p)| p.len()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn forward_shapes_and_receptive_field() {
        let m = tiny_model();
        let x = Tensor::new([2, 1, 8, 8], 0.5).unwrap();
        let t = m.forward(&x).unwrap();
        assert_eq!(t.output().dims(), [2, 3, 1, 1]);
        assert_eq!(m.trunk_end(), 4);
        assert_eq!(m.receptive_field(), (2, 2));
        assert_eq!(m.conv_depth(), 2);
    }

    #[test]
    fn backward_grads_align_with_params() {
        let m = tiny_model();
        let x = Tensor::new([1, 1, 6, 6], 0.3).unwrap();
        let t = m.forward(&x).unwrap();
        let (loss, g) = softmax_cross_entropy(t.output(), &[1]).unwrap();
        assert!(loss > 0.0);
        let (grads, gin) = m.backward_from(&t, m.layers.len(), &g, true).unwrap();
        assert_eq!(grads.len(), m.params().len());
        for (gr, (_, p)) in grads.iter().zip(m.params()) {
            assert_eq!(gr.len(), p.len());
        }
        assert_eq!(gin.unwrap().dims(), x.dims());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros([2, 4, 1, 1]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((g.get(0, 0, 0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
    }

    #[test]
    fn gating_trace_marks_fired_units() {
        let m = tiny_model();
        let x = Tensor::new([1, 1, 6, 6], 0.3).unwrap();
        let t = m.forward(&x).unwrap();
        let gates = GatingTrace::from_trace(&m, &t);
        assert_eq!(gates.masks.len(), 2);
        assert_eq!(gates.masks[0].dims, [1, 2, 6, 6]);
    }
}
