//! Network builders: the appearance and motion trunks, the fused binary
//! classifier over triplets, the heatmap pose head, and the action
//! classification head. Parameter sharing works through names: both
//! appearance streams run under the same `app.` prefix, so their gradients
//! accumulate into one set of weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sampler::{Batch, TripletSample};
use crate::tensor::{
    conv2d_out_size, pool_out_size, LayerSpec, NodeId, ParamSet, Tape, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("architecture error: {0}")]
    Arch(String),
    #[error("{stream} stream: {source}")]
    Stream {
        stream: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("parameter transfer failed: {0}")]
    Transfer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// One conv stage: convolution, relu, optional max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// (kernel, stride) of the pool following this stage.
    pub pool: Option<(usize, usize)>,
}

/// Trunk architecture: five conv stages and the FC6 feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub stages: Vec<ConvStage>,
    pub fc6_dim: usize,
}

impl ArchConfig {
    /// Full-scale preset: 96k7s2 - 256k5s2 - 512k3 - 512k3 - 512k3 with
    /// pools after stages 1, 2 and 5; 4096-dim FC6 on 224px RGB input.
    pub fn vggm_paper() -> ArchConfig {
        ArchConfig {
            name: "vggm-paper".into(),
            in_channels: 3,
            input_size: 224,
            stages: vec![
                ConvStage { out_channels: 96, kernel: 7, stride: 2, pad: 0, pool: Some((3, 2)) },
                ConvStage { out_channels: 256, kernel: 5, stride: 2, pad: 1, pool: Some((3, 2)) },
                ConvStage { out_channels: 512, kernel: 3, stride: 1, pad: 1, pool: None },
                ConvStage { out_channels: 512, kernel: 3, stride: 1, pad: 1, pool: None },
                ConvStage { out_channels: 512, kernel: 3, stride: 1, pad: 1, pool: Some((3, 2)) },
            ],
            fc6_dim: 4096,
        }
    }

    /// Desk-scale preset: same five-stage shape scaled down to 64px
    /// grayscale input and a 256-dim FC6.
    pub fn vggm_mini() -> ArchConfig {
        ArchConfig {
            name: "vggm-mini".into(),
            in_channels: 1,
            input_size: 64,
            stages: vec![
                ConvStage { out_channels: 16, kernel: 5, stride: 2, pad: 0, pool: Some((2, 2)) },
                ConvStage { out_channels: 32, kernel: 3, stride: 2, pad: 1, pool: Some((2, 2)) },
                ConvStage { out_channels: 64, kernel: 3, stride: 1, pad: 1, pool: None },
                ConvStage { out_channels: 64, kernel: 3, stride: 1, pad: 1, pool: None },
                ConvStage { out_channels: 64, kernel: 3, stride: 1, pad: 1, pool: Some((2, 2)) },
            ],
            fc6_dim: 256,
        }
    }

    pub fn preset(name: &str) -> Option<ArchConfig> {
        match name {
            "vggm-paper" | "paper" => Some(ArchConfig::vggm_paper()),
            "vggm-mini" | "mini" => Some(ArchConfig::vggm_mini()),
            _ => None,
        }
    }

    /// (channels, spatial extent) after the last stage, optionally skipping
    /// the final stage's pool.
    fn final_shape(&self, in_channels: usize, keep_last_pool: bool) -> Result<(usize, usize)> {
        let mut c = in_channels;
        let mut s = self.input_size;
        for (i, stage) in self.stages.iter().enumerate() {
            s = conv2d_out_size(s, stage.kernel, stage.stride, stage.pad).map_err(|e| {
                NetError::Arch(format!("{}: stage {} conv: {e}", self.name, i + 1))
            })?;
            c = stage.out_channels;
            if let Some((pk, ps)) = stage.pool {
                if keep_last_pool || i + 1 < self.stages.len() {
                    s = pool_out_size(s, pk, ps).map_err(|e| {
                        NetError::Arch(format!("{}: stage {} pool: {e}", self.name, i + 1))
                    })?;
                }
            }
        }
        Ok((c, s))
    }

}

/// A linear chain of named layers. Parametric layers look their weights up
/// under `<prefix><name>.w` / `.b`.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<(String, LayerSpec)>,
}

impl Network {
    pub fn run(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        prefix: &str,
        input: NodeId,
    ) -> std::result::Result<NodeId, TensorError> {
        let mut node = input;
        for (name, spec) in &self.layers {
            let pname = format!("{prefix}{name}");
            node = tape.layer(spec, params, spec.is_parametric().then_some(pname.as_str()), node)?;
        }
        Ok(node)
    }

    pub fn init_params(&self, params: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng) {
        for (name, spec) in &self.layers {
            if spec.is_parametric() {
                params.init_layer(&format!("{prefix}{name}"), spec, rng);
            }
        }
    }

    pub fn param_layer_names(&self, prefix: &str) -> Vec<String> {
        self.layers
            .iter()
            .filter(|(_, spec)| spec.is_parametric())
            .map(|(name, _)| format!("{prefix}{name}"))
            .collect()
    }

    fn describe(&self) -> String {
        self.layers
            .iter()
            .map(|(name, spec)| format!("{name}:{spec:?}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Conv trunk (stages 1..5 with their pools) followed by FC6+relu.
pub fn build_appearance_net(cfg: &ArchConfig) -> Result<Network> {
    let mut layers = trunk_layers(cfg, cfg.in_channels, true)?;
    let (c, s) = cfg.final_shape(cfg.in_channels, true)?;
    layers.push((
        "fc6".into(),
        LayerSpec::FullyConnected { in_dim: c * s * s, out_dim: cfg.fc6_dim },
    ));
    layers.push(("relu6".into(), LayerSpec::Relu));
    Ok(Network { layers })
}

/// The appearance trunk with conv1 widened to `flow_channels` inputs.
pub fn build_motion_net(cfg: &ArchConfig, flow_channels: usize) -> Result<Network> {
    if flow_channels == 0 || flow_channels % 2 != 0 {
        return Err(NetError::Arch(format!(
            "flow trunk needs an even channel count (2 per flow field), got {flow_channels}"
        )));
    }
    let mut layers = trunk_layers(cfg, flow_channels, true)?;
    let (c, s) = cfg.final_shape(flow_channels, true)?;
    layers.push((
        "fc6".into(),
        LayerSpec::FullyConnected { in_dim: c * s * s, out_dim: cfg.fc6_dim },
    ));
    layers.push(("relu6".into(), LayerSpec::Relu));
    Ok(Network { layers })
}

fn trunk_layers(
    cfg: &ArchConfig,
    in_channels: usize,
    keep_last_pool: bool,
) -> Result<Vec<(String, LayerSpec)>> {
    // validate the whole chain up front so misconfigured sizes fail at build
    cfg.final_shape(in_channels, keep_last_pool)?;
    let mut layers = Vec::new();
    let mut c = in_channels;
    for (i, stage) in cfg.stages.iter().enumerate() {
        layers.push((
            format!("conv{}", i + 1),
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: stage.out_channels,
                kernel_h: stage.kernel,
                kernel_w: stage.kernel,
                stride: stage.stride,
                pad: stage.pad,
            },
        ));
        layers.push((format!("relu{}", i + 1), LayerSpec::Relu));
        if let Some((pk, ps)) = stage.pool {
            if keep_last_pool || i + 1 < cfg.stages.len() {
                layers.push((format!("pool{}", i + 1), LayerSpec::MaxPool { kernel: pk, stride: ps }));
            }
        }
        c = stage.out_channels;
    }
    Ok(layers)
}

/// The joint three-stream model: two shared-weight appearance streams, one
/// motion stream, and the fused two-layer classifier (3D -> D -> 2).
#[derive(Debug)]
pub struct JointModel {
    pub cfg: ArchConfig,
    pub flow_channels: usize,
    pub appearance: Network,
    pub motion: Network,
    pub fusion: Network,
    pub params: ParamSet,
}

impl JointModel {
    pub fn new(cfg: &ArchConfig, flow_channels: usize, seed: u64) -> Result<JointModel> {
        let appearance = build_appearance_net(cfg)?;
        let motion = build_motion_net(cfg, flow_channels)?;
        let fusion = Network {
            layers: vec![
                (
                    "fc7".into(),
                    LayerSpec::FullyConnected { in_dim: 3 * cfg.fc6_dim, out_dim: cfg.fc6_dim },
                ),
                ("relu7".into(), LayerSpec::Relu),
                (
                    "fc8".into(),
                    LayerSpec::FullyConnected { in_dim: cfg.fc6_dim, out_dim: 2 },
                ),
            ],
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        appearance.init_params(&mut params, "app.", &mut rng);
        motion.init_params(&mut params, "mot.", &mut rng);
        fusion.init_params(&mut params, "fus.", &mut rng);
        Ok(JointModel {
            cfg: cfg.clone(),
            flow_channels,
            appearance,
            motion,
            fusion,
            params,
        })
    }

    /// Two-class scores for a stacked batch. Both appearance streams run
    /// under the shared `app.` parameters.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        patches_a: Tensor,
        patches_b: Tensor,
        blocks: Tensor,
    ) -> Result<NodeId> {
        let stream = |s: &'static str| move |source| NetError::Stream { stream: s, source };
        let a = tape.input(patches_a).map_err(stream("appearance"))?;
        let b = tape.input(patches_b).map_err(stream("appearance"))?;
        let t = tape.input(blocks).map_err(stream("motion"))?;
        let fa = self
            .appearance
            .run(tape, &self.params, "app.", a)
            .map_err(stream("appearance"))?;
        let fb = self
            .appearance
            .run(tape, &self.params, "app.", b)
            .map_err(stream("appearance"))?;
        let ft = self
            .motion
            .run(tape, &self.params, "mot.", t)
            .map_err(stream("motion"))?;
        let cat = tape.concat(&[fa, fb, ft]).map_err(stream("fusion"))?;
        self.fusion
            .run(tape, &self.params, "fus.", cat)
            .map_err(stream("fusion"))
    }

    pub fn forward_samples(&self, tape: &mut Tape, samples: &[TripletSample]) -> Result<NodeId> {
        let (a, b, t) = stack_samples(samples)?;
        self.forward_batch(tape, a, b, t)
    }

    /// Argmax class per sample, no gradients recorded.
    pub fn predict(&self, samples: &[TripletSample]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let scores = self.forward_samples(&mut tape, samples)?;
        let v = tape.value(scores);
        let n = v.shape()[0];
        Ok((0..n)
            .map(|i| {
                let row = &v.data()[i * 2..(i + 1) * 2];
                usize::from(row[1] > row[0])
            })
            .collect())
    }

    /// FC6 appearance features for a stack of patches.
    pub fn appearance_features(&self, patches: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(patches)?;
        let f = self.appearance.run(&mut tape, &self.params, "app.", x)?;
        Ok(tape.value(f).clone())
    }

    pub fn arch_string(&self) -> String {
        format!(
            "joint|{}|in{}|flow{}|{}|{}|{}",
            self.cfg.name,
            self.cfg.in_channels,
            self.flow_channels,
            self.appearance.describe(),
            self.motion.describe(),
            self.fusion.describe()
        )
    }
}

/// Stack per-sample tensors into batched NCHW inputs.
pub fn stack_samples(samples: &[TripletSample]) -> Result<(Tensor, Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(NetError::Arch("empty batch".into()));
    }
    let stack = |pick: &dyn Fn(&TripletSample) -> &Tensor| -> Result<Tensor> {
        let first = pick(&samples[0]).shape().to_vec();
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&first);
        let mut data = Vec::with_capacity(shape.iter().product());
        for s in samples {
            let t = pick(s);
            if t.shape() != first.as_slice() {
                return Err(NetError::Arch(format!(
                    "inconsistent sample shapes in batch: {:?} vs {:?}",
                    t.shape(),
                    first
                )));
            }
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::from_vec(&shape, data)?)
    };
    Ok((
        stack(&|s| &s.patch_a)?,
        stack(&|s| &s.patch_b)?,
        stack(&|s| &s.flow_block)?,
    ))
}

pub fn stack_batch(batch: &Batch) -> Result<(Tensor, Tensor, Tensor, Vec<usize>)> {
    let (a, b, t) = stack_samples(&batch.samples)?;
    Ok((a, b, t, batch.labels()))
}

/// Heatmap pose network: conv trunk (last pool dropped), one upscaling
/// transposed convolution, and a 1x1 conv emitting `num_joints` maps.
#[derive(Debug)]
pub struct PoseNet {
    pub cfg: ArchConfig,
    pub input_size: usize,
    pub heatmap_size: usize,
    pub num_joints: usize,
    pub trunk: Network,
    pub head: Network,
    pub params: ParamSet,
}

/// Solve (kernel, stride) for a transposed conv mapping `from` to `to`:
/// the largest stride realizing `to` exactly with a positive kernel.
pub fn solve_deconv_geometry(from: usize, to: usize) -> Result<(usize, usize)> {
    if from == 0 || to < from {
        return Err(NetError::Arch(format!(
            "cannot upscale a {from}px map to {to}px"
        )));
    }
    let mut stride = (to / from).max(1);
    loop {
        let span = (from - 1) * stride;
        if span < to {
            return Ok((to - span, stride));
        }
        if stride == 1 {
            return Err(NetError::Arch(format!(
                "no transposed-conv geometry maps {from}px to {to}px"
            )));
        }
        stride -= 1;
    }
}

pub fn build_pose_net(
    cfg: &ArchConfig,
    init_from: Option<&ParamSet>,
    num_joints: usize,
    heatmap_size: usize,
    input_size: usize,
    seed: u64,
) -> Result<PoseNet> {
    let pose_cfg = ArchConfig { input_size, ..cfg.clone() };
    let trunk = Network {
        layers: trunk_layers(&pose_cfg, cfg.in_channels, false)?,
    };
    let (_, conv5_size) = pose_cfg.final_shape(cfg.in_channels, false)?;
    let conv5_ch = cfg.stages.last().expect("five stages").out_channels;
    let (kernel, stride) = solve_deconv_geometry(conv5_size, heatmap_size)?;
    let deconv_ch = (conv5_ch / 2).max(8);
    let head = Network {
        layers: vec![
            (
                "deconv".into(),
                LayerSpec::TransposedConv2d {
                    in_channels: conv5_ch,
                    out_channels: deconv_ch,
                    kernel_h: kernel,
                    kernel_w: kernel,
                    stride,
                    pad: 0,
                },
            ),
            ("relu_deconv".into(), LayerSpec::Relu),
            (
                "heatmap".into(),
                LayerSpec::Conv2d {
                    in_channels: deconv_ch,
                    out_channels: num_joints,
                    kernel_h: 1,
                    kernel_w: 1,
                    stride: 1,
                    pad: 0,
                },
            ),
        ],
    };
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trunk.init_params(&mut params, "", &mut rng);
    head.init_params(&mut params, "", &mut rng);
    if let Some(src) = init_from {
        transfer_trunk(&mut params, src, "app.", "", cfg.stages.len())?;
    }
    Ok(PoseNet {
        cfg: pose_cfg,
        input_size,
        heatmap_size,
        num_joints,
        trunk,
        head,
        params,
    })
}

impl PoseNet {
    /// K heatmaps for a batch of crops [N, C, S, S].
    pub fn forward(&self, tape: &mut Tape, crops: Tensor) -> Result<NodeId> {
        let x = tape.input(crops)?;
        let mid = self.trunk.run(tape, &self.params, "", x)?;
        Ok(self.head.run(tape, &self.params, "", mid)?)
    }

    pub fn heatmaps(&self, crops: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, crops)?;
        Ok(tape.value(out).clone())
    }

    pub fn arch_string(&self) -> String {
        format!(
            "pose|{}|in{}|inp{}|hm{}|K{}|{}|{}",
            self.cfg.name,
            self.cfg.in_channels,
            self.input_size,
            self.heatmap_size,
            self.num_joints,
            self.trunk.describe(),
            self.head.describe()
        )
    }
}

/// Copy `convN.w/.b` values from `src` (under `src_prefix`) into `dst`
/// (under `dst_prefix`), failing with the full list of mismatched layers.
pub fn transfer_trunk(
    dst: &mut ParamSet,
    src: &ParamSet,
    src_prefix: &str,
    dst_prefix: &str,
    stages: usize,
) -> Result<()> {
    let mut mismatched = Vec::new();
    let mut missing = Vec::new();
    for i in 1..=stages {
        for kind in ["w", "b"] {
            let from = format!("{src_prefix}conv{i}.{kind}");
            let to = format!("{dst_prefix}conv{i}.{kind}");
            let (Ok(s), Ok(d)) = (src.get(&from), dst.get(&to)) else {
                missing.push(from.clone());
                continue;
            };
            if s.value.shape() != d.value.shape() {
                mismatched.push(format!(
                    "{from} {:?} -> {to} {:?}",
                    s.value.shape(),
                    d.value.shape()
                ));
            }
        }
    }
    if !missing.is_empty() || !mismatched.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing [{}]", missing.join(", ")));
        }
        if !mismatched.is_empty() {
            parts.push(format!("shape mismatch [{}]", mismatched.join(", ")));
        }
        return Err(NetError::Transfer(parts.join("; ")));
    }
    for i in 1..=stages {
        for kind in ["w", "b"] {
            let from = src.get(&format!("{src_prefix}conv{i}.{kind}"))?.value.clone();
            let to = dst.get_mut(&format!("{dst_prefix}conv{i}.{kind}"))?;
            to.value = from;
            to.value.clear_grad();
        }
    }
    Ok(())
}

/// Action classifier: the appearance trunk through FC6 plus two fresh FC
/// layers (hidden -> classes).
#[derive(Debug)]
pub struct ActionNet {
    pub cfg: ArchConfig,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub trunk: Network,
    pub head: Network,
    pub params: ParamSet,
    pub frozen_trunk: bool,
}

pub fn build_action_net(
    cfg: &ArchConfig,
    init_from: Option<&ParamSet>,
    num_classes: usize,
    hidden_dim: usize,
    freeze_trunk: bool,
    seed: u64,
) -> Result<ActionNet> {
    if num_classes < 2 {
        return Err(NetError::Arch("need at least two action classes".into()));
    }
    let trunk = build_appearance_net(cfg)?;
    let head = Network {
        layers: vec![
            (
                "fc7".into(),
                LayerSpec::FullyConnected { in_dim: cfg.fc6_dim, out_dim: hidden_dim },
            ),
            ("relu7".into(), LayerSpec::Relu),
            (
                "fc8".into(),
                LayerSpec::FullyConnected { in_dim: hidden_dim, out_dim: num_classes },
            ),
        ],
    };
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trunk.init_params(&mut params, "", &mut rng);
    head.init_params(&mut params, "", &mut rng);
    if let Some(src) = init_from {
        transfer_trunk(&mut params, src, "app.", "", cfg.stages.len())?;
        // fc6 transfers too when shapes line up (same preset)
        if src.contains("app.fc6.w")
            && src.get("app.fc6.w")?.value.shape() == params.get("fc6.w")?.value.shape()
        {
            let names: Vec<String> = vec!["fc6.w".into(), "fc6.b".into()];
            let mut renamed = ParamSet::new();
            renamed.insert("fc6.w", src.get("app.fc6.w")?.value.clone());
            renamed.insert("fc6.b", src.get("app.fc6.b")?.value.clone());
            params
                .copy_values_from(&renamed, &names)
                .map_err(|e| NetError::Transfer(e.to_string()))?;
        }
    }
    if freeze_trunk {
        for name in trunk.param_layer_names("") {
            params.set_frozen(&name, true);
        }
    }
    Ok(ActionNet {
        cfg: cfg.clone(),
        num_classes,
        hidden_dim,
        trunk,
        head,
        params,
        frozen_trunk: freeze_trunk,
    })
}

impl ActionNet {
    pub fn forward(&self, tape: &mut Tape, crops: Tensor) -> Result<NodeId> {
        let x = tape.input(crops)?;
        let feat = self.trunk.run(tape, &self.params, "", x)?;
        Ok(self.head.run(tape, &self.params, "", feat)?)
    }

    /// Class scores without recording gradients.
    pub fn scores(&self, crops: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, crops)?;
        Ok(tape.value(out).clone())
    }

    pub fn arch_string(&self) -> String {
        format!(
            "action|{}|in{}|classes{}|hidden{}|{}|{}",
            self.cfg.name,
            self.cfg.in_channels,
            self.num_classes,
            self.hidden_dim,
            self.trunk.describe(),
            self.head.describe()
        )
    }
}
