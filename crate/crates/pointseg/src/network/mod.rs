//! The segmentation network: a fire-block encoder with channel-reweighting
//! layers and width-only downsampling, a multi-rate dilated enlargement
//! block, and a fire-deconv decoder with additive skips.
//!
//! The graph is built on the autodiff tape for training and inference
//! alike, so the two paths cannot drift apart. All channel counts live in
//! [`WiringConfig`]; the default profile is the full-size network, and
//! scaled-down profiles keep the same topology for tests and desk-scale
//! training.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train_step, Adagrad, TrainSample};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, ValueId};
use crate::tensor::{kernels, ConvSpec, Tensor};

/// Channel and extent plan for the whole graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WiringConfig {
    pub height: usize,
    pub width: usize,
    pub input_channels: usize,
    pub class_count: usize,
    pub conv1_channels: usize,
    /// Output channels of the three encoder fire stages.
    pub stage_channels: [usize; 3],
    /// Channel-reweighting bottleneck divisor.
    pub sr_reduction: usize,
    /// Dilation rates of the enlargement branches.
    pub el_rates: [usize; 3],
}

impl Default for WiringConfig {
    fn default() -> Self {
        WiringConfig {
            height: 64,
            width: 512,
            input_channels: 5,
            class_count: 4,
            conv1_channels: 64,
            stage_channels: [128, 256, 512],
            sr_reduction: 16,
            el_rates: [6, 9, 12],
        }
    }
}

impl WiringConfig {
    /// Same topology with all channel counts divided by `divisor`; spatial
    /// extents are unchanged. Valid divisors keep the last stage a
    /// multiple of 16 (the enlargement block quarters it twice).
    pub fn scaled(divisor: usize) -> Self {
        let d = divisor.max(1);
        WiringConfig {
            conv1_channels: 64 / d,
            stage_channels: [128 / d, 256 / d, 512 / d],
            ..WiringConfig::default()
        }
    }

    pub fn with_frame(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    /// Per-branch channel count of the enlargement block.
    pub fn el_branch_channels(&self) -> usize {
        self.stage_channels[2] / 4
    }

    /// Fused output channels of the enlargement block: five branches
    /// compressed to a quarter of their concatenation.
    pub fn el_out_channels(&self) -> usize {
        5 * self.el_branch_channels() / 4
    }

    /// Spatial extent entering the enlargement block, after the three
    /// width halvings.
    pub fn el_extent(&self) -> (usize, usize) {
        (self.height, self.width / 8)
    }

    /// Encoder fire blocks in order. Squeeze width follows the quarter
    /// rule on the stage's output channels.
    pub fn encoder_fires(&self) -> [FireConfig; 9] {
        let mut fires = Vec::with_capacity(9);
        for stage in 0..3 {
            let out = self.stage_channels[stage];
            let prev = if stage == 0 {
                self.conv1_channels
            } else {
                self.stage_channels[stage - 1]
            };
            for k in 0..3 {
                fires.push(FireConfig {
                    in_channels: if k == 0 { prev } else { out },
                    squeeze_channels: out / 4,
                    expand1_channels: out / 2,
                    expand3_channels: out / 2,
                });
            }
        }
        fires.try_into().expect("exactly nine encoder fires")
    }

    /// Decoder fire-deconv blocks. Output channels are forced by the
    /// additive skips: the block feeding a skip-add must match that skip's
    /// channel count, and the last block matches the full-width stem.
    pub fn decoder_fires(&self) -> [FireDeconvConfig; 4] {
        let [s0, s1, _] = self.stage_channels;
        let plan = [
            (self.el_out_channels() + self.stage_channels[2], s1, 2),
            (s1, s1, 1),
            (s1, s0, 2),
            (s0, self.conv1_channels, 2),
        ];
        plan.map(|(inp, out, stride_w)| FireDeconvConfig {
            fire: FireConfig {
                in_channels: inp,
                squeeze_channels: (inp / 4).max(1),
                expand1_channels: out / 2,
                expand3_channels: out / 2,
            },
            stride_w,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::Config(format!("wiring: {detail}")));
        if self.height == 0 || self.width == 0 || !self.width.is_multiple_of(8) {
            return fail(format!(
                "frame extent {}x{} must be positive with width divisible by 8",
                self.height, self.width
            ));
        }
        if self.input_channels == 0 {
            return fail("input channel count must be positive".into());
        }
        if self.class_count < 2 {
            return fail(format!("class count {} is below 2", self.class_count));
        }
        if self.conv1_channels < 2 || !self.conv1_channels.is_multiple_of(2) {
            return fail(format!(
                "stem channels {} must be a positive even number",
                self.conv1_channels
            ));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c < 4 || c % 4 != 0 {
                return fail(format!("stage {i} channels {c} must be a positive multiple of 4"));
            }
        }
        if !self.stage_channels[2].is_multiple_of(16) {
            return fail(format!(
                "last stage channels {} must be a multiple of 16 for the enlargement block",
                self.stage_channels[2]
            ));
        }
        if self.sr_reduction == 0 {
            return fail("reweighting reduction must be positive".into());
        }
        if self.el_rates.contains(&0) {
            return fail("dilation rates must be positive".into());
        }
        for f in self.encoder_fires() {
            f.validate()?;
        }
        for f in self.decoder_fires() {
            f.fire.validate()?;
        }
        Ok(())
    }
}

/// One fire block: a 1x1 squeeze feeding parallel 1x1 and 3x3 expands
/// whose outputs concatenate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireConfig {
    pub in_channels: usize,
    pub squeeze_channels: usize,
    pub expand1_channels: usize,
    pub expand3_channels: usize,
}

impl FireConfig {
    /// Default squeeze rule: a quarter of the input channels.
    pub fn new(in_channels: usize, expand1_channels: usize, expand3_channels: usize) -> Self {
        FireConfig {
            in_channels,
            squeeze_channels: (in_channels / 4).max(1),
            expand1_channels,
            expand3_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1_channels + self.expand3_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.squeeze_channels == 0 || self.expand1_channels == 0 || self.expand3_channels == 0 {
            return Err(Error::Config(format!(
                "fire block channels must be positive: {self:?}"
            )));
        }
        if self.squeeze_channels > self.in_channels {
            return Err(Error::Config(format!(
                "fire squeeze {} exceeds input channels {}",
                self.squeeze_channels, self.in_channels
            )));
        }
        Ok(())
    }
}

/// A fire block whose middle stage is a width-upsampling transposed
/// convolution (kernel 1x4, stride 1 or 2 along width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireDeconvConfig {
    pub fire: FireConfig,
    pub stride_w: usize,
}

const DECONV_KERNEL_W: usize = 4;

impl FireDeconvConfig {
    fn deconv_spec(&self) -> ConvSpec {
        ConvSpec::new(
            (1, DECONV_KERNEL_W),
            self.fire.squeeze_channels,
            self.fire.squeeze_channels,
        )
        .with_stride((1, self.stride_w))
    }
}

/// Weight/bias pair of one convolution or dense layer.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct FireParams {
    pub squeeze: ConvParams,
    pub expand1: ConvParams,
    pub expand3: ConvParams,
}

pub struct FireDeconvParams {
    pub squeeze: ConvParams,
    pub deconv: ConvParams,
    pub expand1: ConvParams,
    pub expand3: ConvParams,
}

/// Channel-attention parameters: two dense layers around the global
/// descriptor.
pub struct SqueezeReweightParams {
    pub fc1: ConvParams,
    pub fc2: ConvParams,
}

pub struct EnlargementParams {
    pub dilated: [ConvParams; 3],
    pub rates: [usize; 3],
    pub conv1x1: ConvParams,
    /// Projection of the global-average descriptor.
    pub image: ConvParams,
    pub fuse: ConvParams,
    pub expected_extent: (usize, usize),
}

/// Shape of every named parameter tensor, in graph order.
#[derive(Clone, Debug)]
enum LayerKind {
    Conv(ConvSpec),
    Deconv(ConvSpec),
    Dense { input: usize, output: usize },
}

impl LayerKind {
    fn weight_shape(&self) -> Vec<usize> {
        match self {
            LayerKind::Conv(spec) => spec.weight_shape().to_vec(),
            LayerKind::Deconv(spec) => spec.deconv_weight_shape().to_vec(),
            LayerKind::Dense { input, output } => vec![*input, *output],
        }
    }

    fn bias_len(&self) -> usize {
        match self {
            LayerKind::Conv(spec) | LayerKind::Deconv(spec) => spec.out_channels,
            LayerKind::Dense { output, .. } => *output,
        }
    }

    /// Incoming connections per output element, the initialization scale.
    fn fan_in(&self) -> usize {
        match self {
            LayerKind::Conv(spec) => spec.kernel.0 * spec.kernel.1 * spec.in_channels,
            LayerKind::Deconv(spec) => spec.kernel.0 * spec.kernel.1 * spec.in_channels,
            LayerKind::Dense { input, .. } => *input,
        }
    }
}

/// Every parameterized layer with its shape contract, in graph order.
fn parameter_plan(w: &WiringConfig) -> Vec<(String, LayerKind)> {
    let mut plan: Vec<(String, LayerKind)> = Vec::new();
    let conv = |plan: &mut Vec<(String, LayerKind)>, name: String, spec: ConvSpec| {
        plan.push((name, LayerKind::Conv(spec)));
    };

    conv(
        &mut plan,
        "conv1".into(),
        ConvSpec::k3x3(w.input_channels, w.conv1_channels).with_stride((1, 2)),
    );
    // Full-width projection of the raw input; source of the final skip.
    conv(
        &mut plan,
        "conv1_skip".into(),
        ConvSpec::k1x1(w.input_channels, w.conv1_channels),
    );

    let fires = w.encoder_fires();
    for (i, f) in fires.iter().enumerate() {
        let p = format!("fire{}", i + 1);
        conv(&mut plan, format!("{p}.squeeze"), ConvSpec::k1x1(f.in_channels, f.squeeze_channels));
        conv(&mut plan, format!("{p}.expand1"), ConvSpec::k1x1(f.squeeze_channels, f.expand1_channels));
        conv(&mut plan, format!("{p}.expand3"), ConvSpec::k3x3(f.squeeze_channels, f.expand3_channels));
        // A reweighting layer closes each stage of three fire blocks.
        if i % 3 == 2 {
            let c = f.out_channels();
            let reduced = (c / w.sr_reduction).max(1);
            let sr = format!("sr{}", i / 3 + 1);
            plan.push((format!("{sr}.fc1"), LayerKind::Dense { input: c, output: reduced }));
            plan.push((format!("{sr}.fc2"), LayerKind::Dense { input: reduced, output: c }));
        }
    }

    let c_in = w.stage_channels[2];
    let cb = w.el_branch_channels();
    for (i, &rate) in w.el_rates.iter().enumerate() {
        conv(
            &mut plan,
            format!("el.dil{}", i + 1),
            ConvSpec::k3x3(c_in, cb).with_dilation((rate, rate)),
        );
    }
    conv(&mut plan, "el.conv1x1".into(), ConvSpec::k1x1(c_in, cb));
    plan.push(("el.image".into(), LayerKind::Dense { input: c_in, output: cb }));
    conv(&mut plan, "el.fuse".into(), ConvSpec::k1x1(5 * cb, w.el_out_channels()));

    for (j, d) in w.decoder_fires().iter().enumerate() {
        let p = format!("fdeconv{}", j + 1);
        let f = d.fire;
        conv(&mut plan, format!("{p}.squeeze"), ConvSpec::k1x1(f.in_channels, f.squeeze_channels));
        plan.push((format!("{p}.deconv"), LayerKind::Deconv(d.deconv_spec())));
        conv(&mut plan, format!("{p}.expand1"), ConvSpec::k1x1(f.squeeze_channels, f.expand1_channels));
        conv(&mut plan, format!("{p}.expand3"), ConvSpec::k3x3(f.squeeze_channels, f.expand3_channels));
    }

    conv(
        &mut plan,
        "head".into(),
        ConvSpec::k3x3(w.conv1_channels, w.class_count),
    );
    plan
}

/// The full parameter set: wiring plus one tensor per `.w`/`.b` name.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub wiring: WiringConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

fn tensor_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with the run seed so both vary the
    // stream independently.
    let mut h = 0xcbf29ce484222325u64 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ModelParams {
    /// Fresh parameters: weights uniform on ±sqrt(3/fan_in) (variance
    /// 1/fan_in), biases zero, one independent stream per tensor so the
    /// values do not shift when unrelated layers are added or removed.
    pub fn init(wiring: WiringConfig, seed: u64) -> Result<Self> {
        wiring.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, kind) in parameter_plan(&wiring) {
            let wname = format!("{name}.w");
            let shape = kind.weight_shape();
            let n: usize = shape.iter().product();
            let bound = (3.0 / kind.fan_in() as f32).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, &wname));
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            tensors.insert(wname, Tensor::new(shape, data)?);
            tensors.insert(format!("{name}.b"), Tensor::zeros(vec![kind.bias_len()]));
        }
        Ok(ModelParams { wiring, tensors })
    }

    /// Checks presence and shape of every parameter tensor, reporting the
    /// first inconsistent layer in graph order, then rejects strays.
    pub fn validate(&self) -> Result<()> {
        self.wiring.validate()?;
        let plan = parameter_plan(&self.wiring);
        for (name, kind) in &plan {
            for (suffix, expected) in [
                ("w", kind.weight_shape()),
                ("b", vec![kind.bias_len()]),
            ] {
                let key = format!("{name}.{suffix}");
                match self.tensors.get(&key) {
                    None => {
                        return Err(Error::Config(format!("missing parameter {key}")));
                    }
                    Some(t) if t.shape() != expected.as_slice() => {
                        return Err(Error::Config(format!(
                            "parameter {key}: expected shape {:?}, found {:?}",
                            expected,
                            t.shape()
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
        let known: std::collections::BTreeSet<String> = plan
            .iter()
            .flat_map(|(n, _)| [format!("{n}.w"), format!("{n}.b")])
            .collect();
        if let Some(stray) = self.tensors.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unexpected parameter {stray}")));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Extent and channels of a named point in the graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn trace_shape<'a>(trace: &'a [LayerTrace], name: &str) -> Option<&'a [usize]> {
    trace
        .iter()
        .find(|t| t.name == name)
        .map(|t| t.shape.as_slice())
}

/// A fully wired forward pass on a tape, ready for inference (read
/// `probs`) or training (append a loss node and run backward).
pub struct ForwardGraph {
    pub tape: Tape,
    pub input: ValueId,
    pub logits: ValueId,
    pub probs: ValueId,
    pub param_ids: BTreeMap<String, ValueId>,
    pub trace: Vec<LayerTrace>,
}

struct TapeConv {
    w: ValueId,
    b: ValueId,
    spec: ConvSpec,
}

fn tape_conv(tape: &mut Tape, x: ValueId, c: &TapeConv) -> Result<ValueId> {
    tape.conv2d(x, c.w, c.b, &c.spec)
}

fn tape_fire(
    tape: &mut Tape,
    x: ValueId,
    squeeze: &TapeConv,
    expand1: &TapeConv,
    expand3: &TapeConv,
) -> Result<ValueId> {
    let s = tape_conv(tape, x, squeeze)?;
    let s = tape.relu(s);
    let a = tape_conv(tape, s, expand1)?;
    let a = tape.relu(a);
    let b = tape_conv(tape, s, expand3)?;
    let b = tape.relu(b);
    // 1x1 expand first, 3x3 second: fixed concat order.
    tape.concat_channels(&[a, b])
}

fn tape_fire_deconv(
    tape: &mut Tape,
    x: ValueId,
    squeeze: &TapeConv,
    deconv: &TapeConv,
    expand1: &TapeConv,
    expand3: &TapeConv,
) -> Result<ValueId> {
    let s = tape_conv(tape, x, squeeze)?;
    let s = tape.relu(s);
    let d = tape.deconv2d(s, deconv.w, deconv.b, &deconv.spec)?;
    let d = tape.relu(d);
    let a = tape_conv(tape, d, expand1)?;
    let a = tape.relu(a);
    let b = tape_conv(tape, d, expand3)?;
    let b = tape.relu(b);
    tape.concat_channels(&[a, b])
}

fn tape_squeeze_reweight(
    tape: &mut Tape,
    x: ValueId,
    fc1: (ValueId, ValueId),
    fc2: (ValueId, ValueId),
) -> Result<ValueId> {
    let chi = tape.global_avg_pool(x)?;
    let h = tape.dense(chi, fc1.0, fc1.1)?;
    let h = tape.relu(h);
    let gate = tape.dense(h, fc2.0, fc2.1)?;
    let gate = tape.sigmoid(gate);
    tape.scale_channels(x, gate)
}

#[allow(clippy::too_many_arguments)]
fn tape_enlargement(
    tape: &mut Tape,
    x: ValueId,
    dilated: [&TapeConv; 3],
    conv1x1: &TapeConv,
    image: (ValueId, ValueId),
    fuse: &TapeConv,
    expected_extent: (usize, usize),
) -> Result<ValueId> {
    let (h, w, _) = tape.value(x).dims3()?;
    if (h, w) != expected_extent {
        return Err(Error::shape(
            "enlargement",
            format!(
                "input extent {h}x{w}, graph position expects {}x{}",
                expected_extent.0, expected_extent.1
            ),
        ));
    }
    let mut branches = Vec::with_capacity(5);
    for d in dilated {
        let y = tape_conv(tape, x, d)?;
        branches.push(tape.relu(y));
    }
    let c = tape_conv(tape, x, conv1x1)?;
    branches.push(tape.relu(c));
    // Global-average branch: pooled descriptor, projected, broadcast back
    // over the full extent by gating a constant map.
    let cb = conv1x1.spec.out_channels;
    let chi = tape.global_avg_pool(x)?;
    let proj = tape.dense(chi, image.0, image.1)?;
    let proj = tape.relu(proj);
    let ones = tape.leaf(Tensor::filled(vec![h, w, cb], 1.0));
    let broadcast = tape.scale_channels(ones, proj)?;
    branches.push(broadcast);

    let cat = tape.concat_channels(&branches)?;
    let fused = tape_conv(tape, cat, fuse)?;
    Ok(tape.relu(fused))
}

/// Builds the whole forward pass for one frame tensor `[h, w, 5]`.
pub fn build_forward(params: &ModelParams, input: &Tensor) -> Result<ForwardGraph> {
    params.validate()?;
    let wiring = &params.wiring;
    let (h, w, c) = input.dims3()?;
    if (h, w, c) != (wiring.height, wiring.width, wiring.input_channels) {
        return Err(Error::shape(
            "model input",
            format!(
                "frame {h}x{w}x{c}, wiring expects {}x{}x{}",
                wiring.height, wiring.width, wiring.input_channels
            ),
        ));
    }

    let mut tape = Tape::new();
    let input_id = tape.leaf(input.clone());
    tape.set_label(input_id, "input");

    let plan: BTreeMap<String, LayerKind> = parameter_plan(wiring).into_iter().collect();
    let mut param_ids = BTreeMap::new();
    for name in params.tensors.keys() {
        let id = tape.leaf(params.tensors[name].clone());
        tape.set_label(id, name.clone());
        param_ids.insert(name.clone(), id);
    }
    let tc = |name: &str| -> TapeConv {
        let kind = &plan[name];
        let spec = match kind {
            LayerKind::Conv(s) | LayerKind::Deconv(s) => *s,
            LayerKind::Dense { .. } => unreachable!("dense layers use dense_ids"),
        };
        TapeConv {
            w: param_ids[&format!("{name}.w")],
            b: param_ids[&format!("{name}.b")],
            spec,
        }
    };
    let dense_ids =
        |name: &str| -> (ValueId, ValueId) { (param_ids[&format!("{name}.w")], param_ids[&format!("{name}.b")]) };

    let mut trace = Vec::new();
    let mut record = |tape: &Tape, name: &str, id: ValueId| {
        trace.push(LayerTrace {
            name: name.to_string(),
            shape: tape.value(id).shape().to_vec(),
        });
    };
    record(&tape, "input", input_id);

    // Stem: one strided 3x3 (first width halving) plus the full-width 1x1
    // projection that feeds the final skip.
    let c1 = tape_conv(&mut tape, input_id, &tc("conv1"))?;
    let c1 = tape.relu(c1);
    tape.set_label(c1, "conv1");
    record(&tape, "conv1", c1);
    let stem_skip = tape_conv(&mut tape, input_id, &tc("conv1_skip"))?;
    let stem_skip = tape.relu(stem_skip);
    tape.set_label(stem_skip, "conv1_skip");

    // Encoder: three stages of three fire blocks, each closed by a
    // reweighting layer; width halves between stages.
    let mut x = c1;
    let mut sr_outs = Vec::with_capacity(3);
    for stage in 0..3 {
        for k in 0..3 {
            let i = stage * 3 + k + 1;
            let p = format!("fire{i}");
            x = tape_fire(
                &mut tape,
                x,
                &tc(&format!("{p}.squeeze")),
                &tc(&format!("{p}.expand1")),
                &tc(&format!("{p}.expand3")),
            )?;
            tape.set_label(x, p);
        }
        let sr = format!("sr{}", stage + 1);
        x = tape_squeeze_reweight(
            &mut tape,
            x,
            dense_ids(&format!("{sr}.fc1")),
            dense_ids(&format!("{sr}.fc2")),
        )?;
        tape.set_label(x, sr.clone());
        record(&tape, &sr, x);
        sr_outs.push(x);
        if stage < 2 {
            x = tape.maxpool2d(x, (3, 3), (1, 2))?;
            tape.set_label(x, format!("pool{}", stage + 1));
            record(&tape, &format!("pool{}", stage + 1), x);
        }
    }

    let el = tape_enlargement(
        &mut tape,
        x,
        [&tc("el.dil1"), &tc("el.dil2"), &tc("el.dil3")],
        &tc("el.conv1x1"),
        dense_ids("el.image"),
        &tc("el.fuse"),
        wiring.el_extent(),
    )?;
    tape.set_label(el, "el");
    record(&tape, "el", el);

    // Decoder: enlargement output concatenated with the last reweighted
    // stage feeds the first upsampling block; later blocks take additive
    // skips from the matching encoder stage on their inputs.
    let mut y = tape.concat_channels(&[el, sr_outs[2]])?;
    for j in 1..=4 {
        if j == 3 {
            y = tape.add(y, sr_outs[1])?;
        } else if j == 4 {
            y = tape.add(y, sr_outs[0])?;
        }
        let p = format!("fdeconv{j}");
        y = tape_fire_deconv(
            &mut tape,
            y,
            &tc(&format!("{p}.squeeze")),
            &tc(&format!("{p}.deconv")),
            &tc(&format!("{p}.expand1")),
            &tc(&format!("{p}.expand3")),
        )?;
        tape.set_label(y, p.clone());
        record(&tape, &p, y);
    }
    let y = tape.add(y, stem_skip)?;

    let logits = tape_conv(&mut tape, y, &tc("head"))?;
    tape.set_label(logits, "head");
    record(&tape, "head", logits);
    let probs = tape.softmax_channels(logits)?;
    tape.set_label(probs, "probs");
    record(&tape, "probs", probs);

    Ok(ForwardGraph {
        tape,
        input: input_id,
        logits,
        probs,
        param_ids,
        trace,
    })
}

/// Per-pixel class probabilities for one frame tensor.
pub fn model_forward(params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    let g = build_forward(params, input)?;
    Ok(g.tape.value(g.probs).clone())
}

/// Forward pass that also returns the shape trace of the named graph
/// points.
pub fn model_forward_traced(params: &ModelParams, input: &Tensor) -> Result<(Tensor, Vec<LayerTrace>)> {
    let g = build_forward(params, input)?;
    let probs = g.tape.value(g.probs).clone();
    Ok((probs, g.trace))
}

/// Standalone fire block (same code path as the full graph).
pub fn fire_forward(x: &Tensor, cfg: &FireConfig, p: &FireParams) -> Result<Tensor> {
    cfg.validate()?;
    let (_, _, c) = x.dims3()?;
    if c != cfg.in_channels {
        return Err(Error::shape(
            "fire",
            format!("input has {c} channels, config expects {}", cfg.in_channels),
        ));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let mk = |tape: &mut Tape, cp: &ConvParams, spec: ConvSpec| TapeConv {
        w: tape.leaf(cp.w.clone()),
        b: tape.leaf(cp.b.clone()),
        spec,
    };
    let squeeze = mk(&mut tape, &p.squeeze, ConvSpec::k1x1(cfg.in_channels, cfg.squeeze_channels));
    let e1 = mk(&mut tape, &p.expand1, ConvSpec::k1x1(cfg.squeeze_channels, cfg.expand1_channels));
    let e3 = mk(&mut tape, &p.expand3, ConvSpec::k3x3(cfg.squeeze_channels, cfg.expand3_channels));
    let y = tape_fire(&mut tape, xid, &squeeze, &e1, &e3)?;
    Ok(tape.value(y).clone())
}

/// Standalone fire-deconv block.
pub fn fire_deconv_forward(
    x: &Tensor,
    cfg: &FireDeconvConfig,
    p: &FireDeconvParams,
) -> Result<Tensor> {
    cfg.fire.validate()?;
    let (_, _, c) = x.dims3()?;
    if c != cfg.fire.in_channels {
        return Err(Error::shape(
            "fire_deconv",
            format!("input has {c} channels, config expects {}", cfg.fire.in_channels),
        ));
    }
    let f = cfg.fire;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let mk = |tape: &mut Tape, cp: &ConvParams, spec: ConvSpec| TapeConv {
        w: tape.leaf(cp.w.clone()),
        b: tape.leaf(cp.b.clone()),
        spec,
    };
    let squeeze = mk(&mut tape, &p.squeeze, ConvSpec::k1x1(f.in_channels, f.squeeze_channels));
    let deconv = mk(&mut tape, &p.deconv, cfg.deconv_spec());
    let e1 = mk(&mut tape, &p.expand1, ConvSpec::k1x1(f.squeeze_channels, f.expand1_channels));
    let e3 = mk(&mut tape, &p.expand3, ConvSpec::k3x3(f.squeeze_channels, f.expand3_channels));
    let y = tape_fire_deconv(&mut tape, xid, &squeeze, &deconv, &e1, &e3)?;
    Ok(tape.value(y).clone())
}

/// Standalone channel reweighting.
pub fn squeeze_reweight_forward(x: &Tensor, p: &SqueezeReweightParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let fc1 = (tape.leaf(p.fc1.w.clone()), tape.leaf(p.fc1.b.clone()));
    let fc2 = (tape.leaf(p.fc2.w.clone()), tape.leaf(p.fc2.b.clone()));
    let y = tape_squeeze_reweight(&mut tape, xid, fc1, fc2)?;
    Ok(tape.value(y).clone())
}

/// Standalone enlargement block.
pub fn enlargement_forward(x: &Tensor, p: &EnlargementParams) -> Result<Tensor> {
    let (_, _, c) = x.dims3()?;
    let (_, _, _, cb) = p.conv1x1.w.dims4()?;
    let (_, _, _, fuse_out) = p.fuse.w.dims4()?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let mk = |tape: &mut Tape, cp: &ConvParams, spec: ConvSpec| TapeConv {
        w: tape.leaf(cp.w.clone()),
        b: tape.leaf(cp.b.clone()),
        spec,
    };
    let dil: Vec<TapeConv> = p
        .dilated
        .iter()
        .zip(p.rates)
        .map(|(cp, r)| mk(&mut tape, cp, ConvSpec::k3x3(c, cb).with_dilation((r, r))))
        .collect();
    let conv1x1 = mk(&mut tape, &p.conv1x1, ConvSpec::k1x1(c, cb));
    let image = (tape.leaf(p.image.w.clone()), tape.leaf(p.image.b.clone()));
    let fuse = mk(&mut tape, &p.fuse, ConvSpec::k1x1(5 * cb, fuse_out));
    let y = tape_enlargement(
        &mut tape,
        xid,
        [&dil[0], &dil[1], &dil[2]],
        &conv1x1,
        image,
        &fuse,
        p.expected_extent,
    )?;
    Ok(tape.value(y).clone())
}

/// Per-pixel argmax over class probabilities; ties take the lowest id.
pub fn predict(probs: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = probs.dims3()?;
    if c < 2 || c > u8::MAX as usize {
        return Err(Error::shape(
            "predict",
            format!("class axis of {c} channels"),
        ));
    }
    let pd = probs.data();
    let mut out = Vec::with_capacity(h * w);
    for px in 0..h * w {
        let row = &pd[px * c..(px + 1) * c];
        let mut best = 0usize;
        for (ci, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = ci;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

/// `predict` with empty pixels forced to background: predictions carry no
/// information where the frame has no return.
pub fn predict_masked(probs: &Tensor, occupancy: &[bool]) -> Result<Vec<u8>> {
    let mut map = predict(probs)?;
    if occupancy.len() != map.len() {
        return Err(Error::shape(
            "predict",
            format!(
                "{} occupancy flags for {} pixels",
                occupancy.len(),
                map.len()
            ),
        ));
    }
    for (m, &occ) in map.iter_mut().zip(occupancy) {
        if !occ {
            *m = 0;
        }
    }
    Ok(map)
}

/// Class-weighted mean negative log likelihood over all pixels.
pub fn loss(probs: &Tensor, labels: &[u8], class_weights: &[f32]) -> Result<f32> {
    kernels::weighted_nll_mean(probs, labels, class_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ProjectionConfig;
    use crate::synth;
    use crate::testutil::{seeded_tensor, GradCheck};

    fn conv_pair(w_shape: &[usize], b_len: usize, seed: u64) -> ConvParams {
        ConvParams {
            w: seeded_tensor(w_shape, seed, 0.5),
            b: seeded_tensor(&[b_len], seed.wrapping_add(1), 0.1),
        }
    }

    #[test]
    fn fire_matches_manual_kernel_composition() {
        let cfg = FireConfig {
            in_channels: 16,
            squeeze_channels: 4,
            expand1_channels: 8,
            expand3_channels: 8,
        };
        let x = seeded_tensor(&[4, 8, 16], 3, 1.0);
        let p = FireParams {
            squeeze: conv_pair(&[1, 1, 16, 4], 4, 10),
            expand1: conv_pair(&[1, 1, 4, 8], 8, 20),
            expand3: conv_pair(&[3, 3, 4, 8], 8, 30),
        };
        let got = fire_forward(&x, &cfg, &p).unwrap();
        assert_eq!(got.shape(), [4, 8, 16]);

        let s = kernels::relu(&kernels::conv2d(&x, &p.squeeze.w, &p.squeeze.b, &ConvSpec::k1x1(16, 4)).unwrap());
        let a = kernels::relu(&kernels::conv2d(&s, &p.expand1.w, &p.expand1.b, &ConvSpec::k1x1(4, 8)).unwrap());
        let b = kernels::relu(&kernels::conv2d(&s, &p.expand3.w, &p.expand3.b, &ConvSpec::k3x3(4, 8)).unwrap());
        let manual = kernels::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(got, manual);
    }

    #[test]
    fn fire_zero_weights_give_zero_output() {
        let cfg = FireConfig::new(8, 4, 4);
        let x = seeded_tensor(&[3, 5, 8], 7, 1.0);
        let p = FireParams {
            squeeze: ConvParams { w: Tensor::zeros(vec![1, 1, 8, 2]), b: Tensor::zeros(vec![2]) },
            expand1: ConvParams { w: Tensor::zeros(vec![1, 1, 2, 4]), b: Tensor::zeros(vec![4]) },
            expand3: ConvParams { w: Tensor::zeros(vec![3, 3, 2, 4]), b: Tensor::zeros(vec![4]) },
        };
        let y = fire_forward(&x, &cfg, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fire_rejects_channel_mismatch() {
        let cfg = FireConfig::new(8, 4, 4);
        let x = seeded_tensor(&[3, 5, 6], 7, 1.0);
        let p = FireParams {
            squeeze: conv_pair(&[1, 1, 8, 2], 2, 1),
            expand1: conv_pair(&[1, 1, 2, 4], 4, 2),
            expand3: conv_pair(&[3, 3, 2, 4], 4, 3),
        };
        assert!(fire_forward(&x, &cfg, &p).is_err());
    }

    #[test]
    fn fire_deconv_doubles_width_and_composes() {
        let cfg = FireDeconvConfig {
            fire: FireConfig {
                in_channels: 12,
                squeeze_channels: 3,
                expand1_channels: 5,
                expand3_channels: 5,
            },
            stride_w: 2,
        };
        let x = seeded_tensor(&[4, 6, 12], 11, 1.0);
        let p = FireDeconvParams {
            squeeze: conv_pair(&[1, 1, 12, 3], 3, 40),
            deconv: conv_pair(&[1, 4, 3, 3], 3, 50),
            expand1: conv_pair(&[1, 1, 3, 5], 5, 60),
            expand3: conv_pair(&[3, 3, 3, 5], 5, 70),
        };
        let got = fire_deconv_forward(&x, &cfg, &p).unwrap();
        assert_eq!(got.shape(), [4, 12, 10]);

        let spec = cfg.deconv_spec();
        let s = kernels::relu(&kernels::conv2d(&x, &p.squeeze.w, &p.squeeze.b, &ConvSpec::k1x1(12, 3)).unwrap());
        let d = kernels::relu(&kernels::deconv2d(&s, &p.deconv.w, &p.deconv.b, &spec).unwrap());
        let a = kernels::relu(&kernels::conv2d(&d, &p.expand1.w, &p.expand1.b, &ConvSpec::k1x1(3, 5)).unwrap());
        let b = kernels::relu(&kernels::conv2d(&d, &p.expand3.w, &p.expand3.b, &ConvSpec::k3x3(3, 5)).unwrap());
        let manual = kernels::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(got, manual);

        // Stride 1 keeps the width.
        let cfg1 = FireDeconvConfig { stride_w: 1, ..cfg };
        let y1 = fire_deconv_forward(&x, &cfg1, &p).unwrap();
        assert_eq!(y1.shape(), [4, 6, 10]);
    }

    #[test]
    fn reweighting_with_saturated_gate_is_identity() {
        let x = seeded_tensor(&[4, 6, 8], 5, 2.0);
        // Zero fc weights and a large fc2 bias saturate the sigmoid to
        // exactly 1.0 in f32.
        let p = SqueezeReweightParams {
            fc1: ConvParams { w: Tensor::zeros(vec![8, 2]), b: Tensor::zeros(vec![2]) },
            fc2: ConvParams { w: Tensor::zeros(vec![2, 8]), b: Tensor::filled(vec![8], 30.0) },
        };
        let y = squeeze_reweight_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn reweighting_zero_parameters_halve_the_input() {
        let x = seeded_tensor(&[4, 6, 8], 9, 2.0);
        let p = SqueezeReweightParams {
            fc1: ConvParams { w: Tensor::zeros(vec![8, 2]), b: Tensor::zeros(vec![2]) },
            fc2: ConvParams { w: Tensor::zeros(vec![2, 8]), b: Tensor::zeros(vec![8]) },
        };
        let y = squeeze_reweight_forward(&x, &p).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(*yv, 0.5 * xv);
        }
    }

    #[test]
    fn reweighting_scales_channel_means_by_the_gate() {
        let x = seeded_tensor(&[6, 10, 4], 13, 1.5);
        let p = SqueezeReweightParams {
            fc1: conv_pair(&[4, 2], 2, 80),
            fc2: conv_pair(&[2, 4], 4, 81),
        };
        let y = squeeze_reweight_forward(&x, &p).unwrap();

        // Gate recomputed through the plain kernels.
        let chi = kernels::global_avg_pool(&x).unwrap();
        let h = kernels::relu(&kernels::dense(&chi, &p.fc1.w, &p.fc1.b).unwrap());
        let gate = kernels::sigmoid(&kernels::dense(&h, &p.fc2.w, &p.fc2.b).unwrap());

        for c in 0..4 {
            let mean = |t: &Tensor| -> f64 {
                (0..60).map(|px| t.data()[px * 4 + c] as f64).sum::<f64>() / 60.0
            };
            let got = mean(&y);
            let want = gate.data()[c] as f64 * mean(&x);
            assert!((got - want).abs() < 1e-5, "channel {c}: {got} vs {want}");
        }
    }

    /// Closed-form enlargement output for a per-channel-constant input:
    /// every conv branch collapses to (sum of its weights) * x + bias.
    fn el_constant_reference(p: &EnlargementParams, consts: &[f32], cb: usize) -> Vec<f32> {
        let branch_const = |cp: &ConvParams| -> Vec<f64> {
            let w = cp.w.data();
            let (kh, kw, ci, co) = cp.w.dims4().unwrap();
            (0..co)
                .map(|o| {
                    let mut acc = cp.b.data()[o] as f64;
                    for t in 0..kh * kw {
                        for i in 0..ci {
                            acc += w[(t * ci + i) * co + o] as f64 * consts[i] as f64;
                        }
                    }
                    acc.max(0.0)
                })
                .collect()
        };
        let mut branches: Vec<Vec<f64>> = p.dilated.iter().map(branch_const).collect();
        branches.push(branch_const(&p.conv1x1));
        // Image branch: dense on the pooled descriptor (equal to consts).
        let iw = p.image.w.data();
        let (ci, co) = p.image.w.dims2().unwrap();
        branches.push(
            (0..co)
                .map(|o| {
                    let mut acc = p.image.b.data()[o] as f64;
                    for i in 0..ci {
                        acc += iw[i * co + o] as f64 * consts[i] as f64;
                    }
                    acc.max(0.0)
                })
                .collect(),
        );
        let cat: Vec<f64> = branches.concat();
        let fw = p.fuse.w.data();
        let (_, _, fci, fco) = p.fuse.w.dims4().unwrap();
        assert_eq!(fci, 5 * cb);
        (0..fco)
            .map(|o| {
                let mut acc = p.fuse.b.data()[o] as f64;
                for i in 0..fci {
                    acc += fw[i * fco + o] as f64 * cat[i];
                }
                acc.max(0.0) as f32
            })
            .collect()
    }

    #[test]
    fn enlargement_interior_is_constant_on_constant_input() {
        let (h, w, c, cb) = (16, 16, 6, 2);
        let consts: Vec<f32> = (0..c).map(|i| 0.3 + 0.2 * i as f32).collect();
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            data.extend_from_slice(&consts);
        }
        let x = Tensor::new(vec![h, w, c], data).unwrap();
        let p = EnlargementParams {
            dilated: [
                conv_pair(&[3, 3, c, cb], cb, 100),
                conv_pair(&[3, 3, c, cb], cb, 101),
                conv_pair(&[3, 3, c, cb], cb, 102),
            ],
            rates: [2, 3, 4],
            conv1x1: conv_pair(&[1, 1, c, cb], cb, 103),
            image: conv_pair(&[c, cb], cb, 104),
            fuse: conv_pair(&[1, 1, 5 * cb, 2 * cb], 2 * cb, 105),
            expected_extent: (h, w),
        };
        let y = enlargement_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), [h, w, 2 * cb]);

        let want = el_constant_reference(&p, &consts, cb);
        // Interior excludes the largest dilated kernel's reach.
        let margin = 4;
        for row in margin..h - margin {
            for col in margin..w - margin {
                for (o, want_o) in want.iter().enumerate() {
                    let got = y.at3(row, col, o);
                    assert!(
                        (got - want_o).abs() < 1e-4,
                        "pixel ({row},{col}) channel {o}: {got} vs {want_o}"
                    );
                }
            }
        }
    }

    #[test]
    fn enlargement_zero_input_yields_bias_only_constant() {
        let (h, w, c, cb) = (8, 8, 4, 1);
        let x = Tensor::zeros(vec![h, w, c]);
        let p = EnlargementParams {
            dilated: [
                conv_pair(&[3, 3, c, cb], cb, 200),
                conv_pair(&[3, 3, c, cb], cb, 201),
                conv_pair(&[3, 3, c, cb], cb, 202),
            ],
            rates: [2, 2, 3],
            conv1x1: conv_pair(&[1, 1, c, cb], cb, 203),
            image: conv_pair(&[c, cb], cb, 204),
            fuse: conv_pair(&[1, 1, 5 * cb, cb], cb, 205),
            expected_extent: (h, w),
        };
        let y = enlargement_forward(&x, &p).unwrap();
        let want = el_constant_reference(&p, &[0.0; 4], cb);
        // On zero input the conv taps contribute nothing anywhere, so the
        // closed form holds at every pixel including borders.
        for px in 0..h * w {
            assert!((y.data()[px] - want[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn enlargement_rejects_wrong_extent() {
        let (c, cb) = (4, 1);
        let x = Tensor::zeros(vec![8, 6, c]);
        let p = EnlargementParams {
            dilated: [
                conv_pair(&[3, 3, c, cb], cb, 1),
                conv_pair(&[3, 3, c, cb], cb, 2),
                conv_pair(&[3, 3, c, cb], cb, 3),
            ],
            rates: [6, 9, 12],
            conv1x1: conv_pair(&[1, 1, c, cb], cb, 4),
            image: conv_pair(&[c, cb], cb, 5),
            fuse: conv_pair(&[1, 1, 5 * cb, cb], cb, 6),
            expected_extent: (8, 8),
        };
        let err = enlargement_forward(&x, &p).unwrap_err().to_string();
        assert!(err.contains("8x6"), "got: {err}");
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let wiring = WiringConfig::scaled(8);
        let a = ModelParams::init(wiring.clone(), 4).unwrap();
        let b = ModelParams::init(wiring.clone(), 4).unwrap();
        let c = ModelParams::init(wiring, 5).unwrap();
        assert_eq!(a.tensors, b.tensors);
        assert_ne!(a.tensors, c.tensors);
        a.validate().unwrap();
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let params = ModelParams::init(WiringConfig::default(), 0).unwrap();
        // Large tensors with known fan-in: 3x3x128 -> 256 and 1x1x672 -> 168.
        for (name, fan_in) in [("fire8.expand3.w", 9 * 128), ("fdeconv1.squeeze.w", 672)] {
            let t = &params.tensors[name];
            assert!(t.len() >= 10_000, "{name} has only {} elements", t.len());
            let n = t.len() as f64;
            let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var: f64 =
                t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let target = 1.0 / fan_in as f64;
            assert!(
                var > target / 2.0 && var < target * 2.0,
                "{name}: variance {var:.2e}, target {target:.2e}"
            );
        }
        // Biases start at zero.
        assert!(params.tensors["fire8.expand3.b"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validate_reports_first_inconsistent_layer_in_graph_order() {
        let wiring = WiringConfig::scaled(16);
        let mut params = ModelParams::init(wiring.clone(), 0).unwrap();
        params.tensors.remove("fire2.squeeze.w");
        let err = params.validate().unwrap_err().to_string();
        assert!(err.contains("fire2.squeeze.w"), "got: {err}");

        // Two corrupted layers: the one earlier in the graph wins.
        let mut params = ModelParams::init(wiring.clone(), 0).unwrap();
        params.tensors.insert("fire5.expand1.b".into(), Tensor::zeros(vec![3]));
        params.tensors.insert("conv1.b".into(), Tensor::zeros(vec![7]));
        let err = params.validate().unwrap_err().to_string();
        assert!(err.contains("conv1.b"), "got: {err}");

        let mut params = ModelParams::init(wiring, 0).unwrap();
        params.tensors.insert("extra.w".into(), Tensor::zeros(vec![1]));
        let err = params.validate().unwrap_err().to_string();
        assert!(err.contains("extra.w"), "got: {err}");
    }

    #[test]
    fn forward_trace_follows_the_width_plan() {
        let wiring = WiringConfig::scaled(8);
        let params = ModelParams::init(wiring, 1).unwrap();
        let frame = synth::scene_frame(2, &ProjectionConfig::default()).unwrap();
        let (probs, trace) = model_forward_traced(&params, &frame.channels).unwrap();

        let expect = [
            ("input", vec![64, 512, 5]),
            ("conv1", vec![64, 256, 8]),
            ("sr1", vec![64, 256, 16]),
            ("pool1", vec![64, 128, 16]),
            ("sr2", vec![64, 128, 32]),
            ("pool2", vec![64, 64, 32]),
            ("sr3", vec![64, 64, 64]),
            ("el", vec![64, 64, 20]),
            ("fdeconv1", vec![64, 128, 32]),
            ("fdeconv2", vec![64, 128, 32]),
            ("fdeconv3", vec![64, 256, 16]),
            ("fdeconv4", vec![64, 512, 8]),
            ("head", vec![64, 512, 4]),
            ("probs", vec![64, 512, 4]),
        ];
        for (name, shape) in expect {
            assert_eq!(
                trace_shape(&trace, name),
                Some(shape.as_slice()),
                "trace point {name}"
            );
        }
        // Probabilities normalize per pixel.
        let pd = probs.data();
        for px in 0..64 * 512 {
            let s: f32 = pd[px * 4..(px + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "pixel {px} sums to {s}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParams::init(WiringConfig::scaled(16).with_frame(16, 64), 3).unwrap();
        let cfg = ProjectionConfig {
            height: 16,
            width: 64,
            ..ProjectionConfig::default()
        };
        let frame = synth::scene_frame(1, &cfg).unwrap();
        let a = model_forward(&params, &frame.channels).unwrap();
        let b = model_forward(&params, &frame.channels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_mismatched_frame() {
        let params = ModelParams::init(WiringConfig::scaled(16).with_frame(16, 64), 3).unwrap();
        let err = model_forward(&params, &Tensor::zeros(vec![16, 32, 5]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("16x32x5"), "got: {err}");
    }

    #[test]
    fn predict_breaks_ties_toward_lower_class() {
        let probs = Tensor::filled(vec![2, 3, 4], 0.25);
        assert_eq!(predict(&probs).unwrap(), vec![0; 6]);

        let mut data = vec![0.25f32; 2 * 3 * 4];
        data[(3 + 2) * 4 + 2] = 0.9;
        let probs = Tensor::new(vec![2, 3, 4], data).unwrap();
        let map = predict(&probs).unwrap();
        assert_eq!(map[5], 2);
        assert_eq!(map.iter().filter(|&&m| m == 0).count(), 5);
    }

    #[test]
    fn predict_matches_loop_oracle() {
        let probs = kernels::softmax_channels(&seeded_tensor(&[6, 9, 4], 17, 2.0)).unwrap();
        let map = predict(&probs).unwrap();
        for (px, &pred) in map.iter().enumerate() {
            let row = &probs.data()[px * 4..(px + 1) * 4];
            let mut best = 0;
            for c in 1..4 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            assert_eq!(pred as usize, best);
        }
    }

    #[test]
    fn predict_is_invariant_under_per_pixel_logit_shifts() {
        let logits = seeded_tensor(&[5, 7, 4], 23, 3.0);
        let base = predict(&kernels::softmax_channels(&logits).unwrap()).unwrap();
        let mut shifted = logits.data().to_vec();
        for px in 0..5 * 7 {
            let c = (px % 11) as f32 - 5.0;
            for k in 0..4 {
                shifted[px * 4 + k] += c;
            }
        }
        let shifted = Tensor::new(vec![5, 7, 4], shifted).unwrap();
        let moved = predict(&kernels::softmax_channels(&shifted).unwrap()).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn predict_masked_forces_empty_pixels_to_background() {
        let mut data = vec![0.0f32; 2 * 2 * 4];
        for px in 0..4 {
            data[px * 4 + 3] = 1.0;
        }
        let probs = Tensor::new(vec![2, 2, 4], data).unwrap();
        let occ = [true, false, false, true];
        assert_eq!(predict_masked(&probs, &occ).unwrap(), vec![3, 0, 0, 3]);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_on_a_small_crop() {
        // Strictly positive, normalized probabilities keep the log smooth
        // around the finite-difference step.
        let raw = seeded_tensor(&[4, 4, 4], 29, 1.0);
        let probs = kernels::softmax_channels(&raw).unwrap();
        let labels: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
        let weights = [1.0f32, 2.0, 0.5, 1.5];

        let analytic =
            kernels::weighted_nll_mean_backward(&probs, &labels, &weights, 1.0).unwrap();
        GradCheck::default()
            .run(
                |inputs| kernels::weighted_nll_mean(&inputs[0], &labels, &weights).unwrap(),
                &[probs],
                &[analytic],
            )
            .unwrap();
    }
}
