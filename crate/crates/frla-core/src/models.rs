//! The adapting target model and the frozen mock vision-language teacher.
//!
//! Both share the same desk-scale skeleton: a small stack of valid
//! (unpadded) strided conv+relu layers produces a patch-feature map, a
//! linear map takes backbone channels to the shared embedding dimension,
//! and similarities against a K×D class matrix give logits.
//!
//! The teacher L2-normalizes its pooled feature before the class product
//! (and, per patch, divides by that pooled norm — a single scalar per
//! sample); the target model omits the norm division since it does not
//! normalize features. The target model's classifier matrix plays the role
//! the class-embedding matrix plays for the teacher, and its patch and
//! image heads share the identical bottleneck and classifier parameters.

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Tape, Tensor, TensorId};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Geometry shared by both models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub image_size: usize,
    pub in_channels: usize,
    pub convs: Vec<ConvLayerSpec>,
    /// Shared embedding dimension D.
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl ModelArch {
    /// Desk-scale presets: 32×32 inputs yield a 4×4 patch grid, 64×64 an
    /// 8×8 grid; backbone channels 32, embedding dimension 16.
    pub fn desk_default(image_size: usize, num_classes: usize) -> Result<Self> {
        let convs = match image_size {
            32 => vec![
                ConvLayerSpec { out_channels: 8, kernel: 5, stride: 2 },
                ConvLayerSpec { out_channels: 16, kernel: 3, stride: 2 },
                ConvLayerSpec { out_channels: 32, kernel: 3, stride: 1 },
            ],
            64 => vec![
                ConvLayerSpec { out_channels: 8, kernel: 6, stride: 2 },
                ConvLayerSpec { out_channels: 16, kernel: 4, stride: 2 },
                ConvLayerSpec { out_channels: 32, kernel: 7, stride: 1 },
            ],
            other => {
                return Err(Error::Config(format!(
                    "no desk-scale preset for image_size {other} (use 32 or 64)"
                )))
            }
        };
        let arch = ModelArch {
            image_size,
            in_channels: 3,
            convs,
            embed_dim: 16,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Side length of the patch grid after all conv layers.
    pub fn grid_side(&self) -> usize {
        let mut s = self.image_size;
        for c in &self.convs {
            s = (s - c.kernel) / c.stride + 1;
        }
        s
    }

    /// Channels of the last conv layer (D_b / D_v).
    pub fn backbone_channels(&self) -> usize {
        self.convs.last().map(|c| c.out_channels).unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let mut s = self.image_size;
        for (i, c) in self.convs.iter().enumerate() {
            if c.kernel > s {
                return Err(Error::Config(format!(
                    "conv{} kernel {} larger than its {}-pixel input",
                    i, c.kernel, s
                )));
            }
            if c.stride == 0 {
                return Err(Error::Config(format!("conv{i} stride must be positive")));
            }
            s = (s - c.kernel) / c.stride + 1;
        }
        if s == 0 {
            return Err(Error::Config("conv stack collapses the image to nothing".into()));
        }
        Ok(())
    }

    fn conv_kernel_shape(&self, layer: usize) -> Vec<usize> {
        let c_in = if layer == 0 {
            self.in_channels
        } else {
            self.convs[layer - 1].out_channels
        };
        let c = &self.convs[layer];
        vec![c.out_channels, c_in, c.kernel, c.kernel]
    }
}

fn randn_tensor(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, values).unwrap()
}

fn init_conv_stack(arch: &ModelArch, rng: &mut impl rand::Rng, trainable: bool) -> Vec<Tensor> {
    (0..arch.convs.len())
        .map(|i| {
            let shape = arch.conv_kernel_shape(i);
            let fan_in: usize = shape[1] * shape[2] * shape[3];
            let t = randn_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng);
            if trainable {
                t.with_grad()
            } else {
                t
            }
        })
        .collect()
}

/// The adapting student: conv backbone, bottleneck D_b→D, classifier K×D.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub arch: ModelArch,
    pub conv_kernels: Vec<Tensor>,
    /// [D_b×D] linear map applied per patch.
    pub bottleneck: Tensor,
    /// [K×D] class weight matrix; the analog of the teacher's class matrix.
    pub classifier: Tensor,
    pub logit_scale: f64,
    /// Optional relu between bottleneck and heads (off by default).
    pub bottleneck_relu: bool,
}

impl TargetModel {
    pub fn init(arch: ModelArch, logit_scale: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, 0x7A6, 0, 0);
        let conv_kernels = init_conv_stack(&arch, &mut rng, true);
        let d_b = arch.backbone_channels();
        let bottleneck =
            randn_tensor(vec![d_b, arch.embed_dim], (1.0 / d_b as f64).sqrt(), &mut rng)
                .with_grad();
        let classifier = randn_tensor(
            vec![arch.num_classes, arch.embed_dim],
            (1.0 / arch.embed_dim as f64).sqrt(),
            &mut rng,
        )
        .with_grad();
        Ok(TargetModel {
            arch,
            conv_kernels,
            bottleneck,
            classifier,
            logit_scale,
            bottleneck_relu: false,
        })
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.conv_kernels.len())
            .map(|i| format!("conv{i}"))
            .collect();
        names.push("bottleneck".into());
        names.push("classifier".into());
        names
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut ps: Vec<&Tensor> = self.conv_kernels.iter().collect();
        ps.push(&self.bottleneck);
        ps.push(&self.classifier);
        ps
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps: Vec<&mut Tensor> = self.conv_kernels.iter_mut().collect();
        ps.push(&mut self.bottleneck);
        ps.push(&mut self.classifier);
        ps
    }

    /// Watches every parameter once on the tape; reuse the staged handle for
    /// all forwards in the step so gradients accumulate on single leaves.
    pub fn stage(&self, tape: &mut Tape) -> StagedTarget {
        StagedTarget {
            convs: self.conv_kernels.iter().map(|k| tape.watch(k)).collect(),
            bottleneck: tape.watch(&self.bottleneck),
            classifier: tape.watch(&self.classifier),
            arch: self.arch.clone(),
            logit_scale: self.logit_scale,
            bottleneck_relu: self.bottleneck_relu,
        }
    }

    /// Stages the model with parameter `index` (in `parameter_names` order)
    /// replaced by an existing tape tensor — the hook the finite-difference
    /// gradient checker uses to vary one parameter at a time.
    pub fn stage_with_override(
        &self,
        tape: &mut Tape,
        index: usize,
        replacement: TensorId,
    ) -> StagedTarget {
        let mut staged = StagedTarget {
            convs: Vec::with_capacity(self.conv_kernels.len()),
            bottleneck: replacement,
            classifier: replacement,
            arch: self.arch.clone(),
            logit_scale: self.logit_scale,
            bottleneck_relu: self.bottleneck_relu,
        };
        let n_convs = self.conv_kernels.len();
        for (i, k) in self.conv_kernels.iter().enumerate() {
            staged
                .convs
                .push(if i == index { replacement } else { tape.constant_of(k) });
        }
        if index != n_convs {
            staged.bottleneck = tape.constant_of(&self.bottleneck);
        }
        if index != n_convs + 1 {
            staged.classifier = tape.constant_of(&self.classifier);
        }
        staged
    }
}

/// The frozen teacher: vision encoder, projection D_v→D, class-embedding
/// matrix with unit-normalized rows, softmax sharpness knob.
#[derive(Debug, Clone, PartialEq)]
pub struct MockViL {
    pub arch: ModelArch,
    pub conv_kernels: Vec<Tensor>,
    /// [D_v×D] linear map (the layer after pooling, applied per patch).
    pub projection: Tensor,
    /// [K×D] frozen class-embedding matrix C with unit rows.
    pub text_matrix: Tensor,
    pub logit_scale: f64,
}

impl MockViL {
    /// Trainable initialization for pretraining: encoder and projection
    /// carry gradients, the class matrix never does.
    pub fn init_trainable(arch: ModelArch, logit_scale: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, 0xF1A, 0, 0);
        let conv_kernels = init_conv_stack(&arch, &mut rng, true);
        let d_v = arch.backbone_channels();
        let projection =
            randn_tensor(vec![d_v, arch.embed_dim], (1.0 / d_v as f64).sqrt(), &mut rng)
                .with_grad();
        let mut text = randn_tensor(
            vec![arch.num_classes, arch.embed_dim],
            1.0,
            &mut rng,
        );
        normalize_rows(&mut text);
        Ok(MockViL {
            arch,
            conv_kernels,
            projection,
            text_matrix: text,
            logit_scale,
        })
    }

    /// Drops every gradient buffer and grad flag; the adaptation loop
    /// requires a frozen teacher.
    pub fn freeze(&mut self) {
        for k in &mut self.conv_kernels {
            let values = k.values().to_vec();
            *k = Tensor::new(k.shape().to_vec(), values).unwrap();
        }
        let p = Tensor::new(self.projection.shape().to_vec(), self.projection.values().to_vec())
            .unwrap();
        self.projection = p;
    }

    pub fn is_frozen(&self) -> bool {
        !self.conv_kernels.iter().any(|k| k.requires_grad())
            && !self.projection.requires_grad()
            && !self.text_matrix.requires_grad()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.conv_kernels.len())
            .map(|i| format!("conv{i}"))
            .collect();
        names.push("projection".into());
        names.push("text_matrix".into());
        names
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut ps: Vec<&Tensor> = self.conv_kernels.iter().collect();
        ps.push(&self.projection);
        ps.push(&self.text_matrix);
        ps
    }

    /// Trainable parameters during teacher pretraining (class matrix stays
    /// fixed).
    pub fn pretrain_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps: Vec<&mut Tensor> = self.conv_kernels.iter_mut().collect();
        ps.push(&mut self.projection);
        ps
    }

    pub fn stage(&self, tape: &mut Tape) -> StagedVil {
        StagedVil {
            convs: self.conv_kernels.iter().map(|k| tape.watch(k)).collect(),
            projection: tape.watch(&self.projection),
            text_matrix: tape.watch(&self.text_matrix),
            arch: self.arch.clone(),
            logit_scale: self.logit_scale,
        }
    }
}

fn normalize_rows(t: &mut Tensor) {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let v = t.values_mut();
    for r in 0..rows {
        let row = &mut v[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in row {
            *x /= norm;
        }
    }
}

/// Patch-feature map in flat [B·H·W × D] form plus its geometry.
#[derive(Debug, Clone, Copy)]
pub struct PatchFeatures {
    pub flat: TensorId,
    pub batch: usize,
    pub grid: usize,
    pub dim: usize,
}

fn run_backbone(
    tape: &mut Tape,
    convs: &[TensorId],
    arch: &ModelArch,
    images: &Tensor,
) -> Result<TensorId> {
    let expect = [
        images.shape().first().copied().unwrap_or(0),
        arch.in_channels,
        arch.image_size,
        arch.image_size,
    ];
    if images.shape().len() != 4 || images.shape()[1..] != expect[1..] {
        return Err(Error::shape(
            "backbone",
            format!(
                "batch shape {:?} does not match configured geometry [B, {}, {}, {}]",
                images.shape(),
                arch.in_channels,
                arch.image_size,
                arch.image_size
            ),
        ));
    }
    let mut x = tape.watch(images);
    for (i, kernel) in convs.iter().enumerate() {
        x = tape.conv2d(x, *kernel, arch.convs[i].stride)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// [B,C,H,W] feature map -> flat per-patch rows [B·H·W × C].
fn to_patch_rows(tape: &mut Tape, feat: TensorId) -> Result<(TensorId, usize, usize, usize)> {
    let shape = tape.shape(feat).to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let nhwc = tape.nchw_to_nhwc(feat)?;
    let flat = tape.reshape(nhwc, vec![b * h * w, c])?;
    Ok((flat, b, h, w))
}

pub struct StagedTarget {
    convs: Vec<TensorId>,
    bottleneck: TensorId,
    classifier: TensorId,
    arch: ModelArch,
    logit_scale: f64,
    bottleneck_relu: bool,
}

impl StagedTarget {
    /// Tape ids of every watched parameter, in `parameter_names` order.
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids = self.convs.clone();
        ids.push(self.bottleneck);
        ids.push(self.classifier);
        ids
    }

    /// Backbone + bottleneck, shared by both heads.
    pub fn features(&self, tape: &mut Tape, images: &Tensor) -> Result<PatchFeatures> {
        let feat = run_backbone(tape, &self.convs, &self.arch, images)?;
        let (rows, b, h, _w) = to_patch_rows(tape, feat)?;
        let mut z = tape.matmul(rows, self.bottleneck)?;
        if self.bottleneck_relu {
            z = tape.relu(z);
        }
        Ok(PatchFeatures {
            flat: z,
            batch: b,
            grid: h,
            dim: self.arch.embed_dim,
        })
    }

    /// softmax(GAP(features)·W_clsᵀ·scale): [B×K] rows summing to 1.
    pub fn image_head(&self, tape: &mut Tape, f: &PatchFeatures) -> Result<TensorId> {
        let map = tape.reshape(f.flat, vec![f.batch, f.grid, f.grid, f.dim])?;
        let pooled = tape.global_avg_pool(map)?;
        let wt = tape.transpose(self.classifier)?;
        let logits = tape.matmul(pooled, wt)?;
        let logits = tape.mul_const(logits, self.logit_scale);
        tape.softmax_axis(logits, 1)
    }

    /// Per-patch probabilities [B×H×W×K]; no norm division.
    pub fn patch_head(&self, tape: &mut Tape, f: &PatchFeatures) -> Result<TensorId> {
        let wt = tape.transpose(self.classifier)?;
        let logits = tape.matmul(f.flat, wt)?;
        let logits = tape.mul_const(logits, self.logit_scale);
        let probs = tape.softmax_axis(logits, 1)?;
        tape.reshape(probs, vec![f.batch, f.grid, f.grid, self.arch.num_classes])
    }
}

pub struct StagedVil {
    convs: Vec<TensorId>,
    projection: TensorId,
    text_matrix: TensorId,
    arch: ModelArch,
    logit_scale: f64,
}

/// Raw vision features before projection, in [B,H,W,D_v] layout.
#[derive(Debug, Clone, Copy)]
pub struct VisionFeatures {
    pub nhwc: TensorId,
    pub batch: usize,
    pub grid: usize,
    pub dim: usize,
}

impl StagedVil {
    /// Tape ids of the parameters trained during teacher pretraining
    /// (encoder kernels then projection; the class matrix stays fixed).
    pub fn pretrain_param_ids(&self) -> Vec<TensorId> {
        let mut ids = self.convs.clone();
        ids.push(self.projection);
        ids
    }

    pub fn vision_features(&self, tape: &mut Tape, images: &Tensor) -> Result<VisionFeatures> {
        let feat = run_backbone(tape, &self.convs, &self.arch, images)?;
        let shape = tape.shape(feat).to_vec();
        let nhwc = tape.nchw_to_nhwc(feat)?;
        Ok(VisionFeatures {
            nhwc,
            batch: shape[0],
            grid: shape[2],
            dim: shape[1],
        })
    }

    /// Projection applied per patch: [B·H·W × D].
    pub fn projected(&self, tape: &mut Tape, vis: &VisionFeatures) -> Result<PatchFeatures> {
        let rows = tape.reshape(
            vis.nhwc,
            vec![vis.batch * vis.grid * vis.grid, vis.dim],
        )?;
        let z = tape.matmul(rows, self.projection)?;
        Ok(PatchFeatures {
            flat: z,
            batch: vis.batch,
            grid: vis.grid,
            dim: self.arch.embed_dim,
        })
    }

    /// Euclidean norm of each sample's pooled projected feature, [B].
    /// A zero norm signals a dead encoder and fails loudly.
    fn pooled_norms(&self, tape: &mut Tape, f: &PatchFeatures) -> Result<TensorId> {
        let map = tape.reshape(f.flat, vec![f.batch, f.grid, f.grid, f.dim])?;
        let pooled = tape.global_avg_pool(map)?;
        let sq = tape.mul(pooled, pooled)?;
        let ones = tape.constant(vec![1.0; f.dim], vec![f.dim, 1])?;
        let sums = tape.matmul(sq, ones)?;
        let sums = tape.reshape(sums, vec![f.batch])?;
        let norms = tape.sqrt(sums);
        if tape.value(norms).contains(&0.0) {
            return Err(Error::DegenerateInput(
                "pooled projected feature has zero norm".into(),
            ));
        }
        Ok(norms)
    }

    /// softmax(scale · (pooled/‖pooled‖)·Cᵀ): [B×K].
    pub fn image_head(&self, tape: &mut Tape, f: &PatchFeatures) -> Result<TensorId> {
        let map = tape.reshape(f.flat, vec![f.batch, f.grid, f.grid, f.dim])?;
        let pooled = tape.global_avg_pool(map)?;
        let norms = self.pooled_norms(tape, f)?;
        let ones = tape.constant(vec![1.0; f.batch], vec![f.batch])?;
        let inv = tape.div(ones, norms)?;
        let unit = tape.scale_rows(pooled, inv)?;
        let ct = tape.transpose(self.text_matrix)?;
        let logits = tape.matmul(unit, ct)?;
        let logits = tape.mul_const(logits, self.logit_scale);
        tape.softmax_axis(logits, 1)
    }

    /// softmax(scale · (patch/‖pooled‖)·Cᵀ) per patch: [B×H×W×K]. Each
    /// sample's pooled norm is a single scalar broadcast over its patches.
    pub fn patch_head(&self, tape: &mut Tape, f: &PatchFeatures) -> Result<TensorId> {
        let norms = self.pooled_norms(tape, f)?;
        let ones = tape.constant(vec![1.0; f.batch], vec![f.batch])?;
        let inv = tape.div(ones, norms)?;
        let per_patch = tape.repeat_interleave(inv, f.grid * f.grid)?;
        let scaled = tape.scale_rows(f.flat, per_patch)?;
        let ct = tape.transpose(self.text_matrix)?;
        let logits = tape.matmul(scaled, ct)?;
        let logits = tape.mul_const(logits, self.logit_scale);
        let probs = tape.softmax_axis(logits, 1)?;
        tape.reshape(probs, vec![f.batch, f.grid, f.grid, self.arch.num_classes])
    }
}

// ── convenience single-shot forwards ────────────────────────────────────

/// Image-level probabilities of the target model, [B×K].
pub fn target_forward_image(tape: &mut Tape, model: &TargetModel, images: &Tensor) -> Result<TensorId> {
    let staged = model.stage(tape);
    let f = staged.features(tape, images)?;
    staged.image_head(tape, &f)
}

/// Patch-level probabilities of the target model, [B×H×W×K].
pub fn target_forward_patches(
    tape: &mut Tape,
    model: &TargetModel,
    images: &Tensor,
) -> Result<TensorId> {
    let staged = model.stage(tape);
    let f = staged.features(tape, images)?;
    staged.patch_head(tape, &f)
}

/// Image-level probabilities of the frozen teacher, [B×K].
pub fn vil_forward_image(tape: &mut Tape, vil: &MockViL, images: &Tensor) -> Result<TensorId> {
    let staged = vil.stage(tape);
    let vis = staged.vision_features(tape, images)?;
    let f = staged.projected(tape, &vis)?;
    staged.image_head(tape, &f)
}

/// Patch-level probabilities of the frozen teacher, [B×H×W×K].
pub fn vil_forward_patches(tape: &mut Tape, vil: &MockViL, images: &Tensor) -> Result<TensorId> {
    let staged = vil.stage(tape);
    let vis = staged.vision_features(tape, images)?;
    let f = staged.projected(tape, &vis)?;
    staged.patch_head(tape, &f)
}

// ── checkpoints ─────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"FRLA";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    arch: ModelArch,
    logit_scale: f64,
    #[serde(default)]
    bottleneck_relu: bool,
}

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

fn write_checkpoint(
    path: &Path,
    desc: &Descriptor,
    params: &[(String, &Tensor)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let desc_json = serde_json::to_string(desc).expect("descriptor serializes");
    buf.extend_from_slice(&(desc_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(desc_json.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct RawCheckpoint {
    desc: Descriptor,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| ckpt_err(path, format!("cannot open: {e}")))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(ckpt_err(path, "file truncated"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(ckpt_err(path, "bad magic (not a checkpoint file)"));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {version}, expected {VERSION}"),
        ));
    }
    let desc_len = read_u32(&mut pos)? as usize;
    let desc_bytes = take(&mut pos, desc_len)?;
    let desc: Descriptor = serde_json::from_slice(desc_bytes)
        .map_err(|e| ckpt_err(path, format!("bad descriptor: {e}")))?;
    let n_params = read_u32(&mut pos)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| ckpt_err(path, "parameter name is not utf-8"))?;
        let rank = read_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut pos)? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = take(&mut pos, count * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push((name, dims, values));
    }
    if pos != bytes.len() {
        return Err(ckpt_err(path, "trailing bytes after last parameter"));
    }
    Ok(RawCheckpoint { desc, params })
}

fn fill_params(
    path: &Path,
    raw: &RawCheckpoint,
    expected: &mut [(String, &mut Tensor)],
) -> Result<()> {
    if raw.params.len() != expected.len() {
        return Err(ckpt_err(
            path,
            format!(
                "checkpoint holds {} parameters, architecture expects {}",
                raw.params.len(),
                expected.len()
            ),
        ));
    }
    for ((name, dims, values), (want_name, tensor)) in raw.params.iter().zip(expected.iter_mut()) {
        if name != want_name {
            return Err(ckpt_err(
                path,
                format!("parameter {name} where {want_name} was expected"),
            ));
        }
        if dims != tensor.shape() {
            return Err(ckpt_err(
                path,
                format!(
                    "parameter {name}: shape {:?} does not fit architecture shape {:?}",
                    dims,
                    tensor.shape()
                ),
            ));
        }
        tensor.values_mut().copy_from_slice(values);
    }
    Ok(())
}

pub fn save_target_checkpoint(model: &TargetModel, path: &Path) -> Result<()> {
    let desc = Descriptor {
        kind: "target".into(),
        arch: model.arch.clone(),
        logit_scale: model.logit_scale,
        bottleneck_relu: model.bottleneck_relu,
    };
    let names = model.parameter_names();
    let params: Vec<(String, &Tensor)> =
        names.into_iter().zip(model.parameters()).collect();
    write_checkpoint(path, &desc, &params)
}

pub fn load_target_checkpoint(path: &Path) -> Result<TargetModel> {
    let raw = read_checkpoint(path)?;
    if raw.desc.kind != "target" {
        return Err(ckpt_err(
            path,
            format!("checkpoint kind {:?}, expected \"target\"", raw.desc.kind),
        ));
    }
    raw.desc.arch.validate()?;
    let mut model = TargetModel::init(raw.desc.arch.clone(), raw.desc.logit_scale, 0)?;
    model.bottleneck_relu = raw.desc.bottleneck_relu;
    let names = model.parameter_names();
    let mut expected: Vec<(String, &mut Tensor)> =
        names.into_iter().zip(model.parameters_mut()).collect();
    fill_params(path, &raw, &mut expected)?;
    Ok(model)
}

pub fn save_teacher_checkpoint(vil: &MockViL, path: &Path) -> Result<()> {
    let desc = Descriptor {
        kind: "teacher".into(),
        arch: vil.arch.clone(),
        logit_scale: vil.logit_scale,
        bottleneck_relu: false,
    };
    let names = vil.parameter_names();
    let params: Vec<(String, &Tensor)> = names.into_iter().zip(vil.parameters()).collect();
    write_checkpoint(path, &desc, &params)
}

/// Loads a frozen teacher: no parameter carries a gradient flag.
pub fn load_teacher_checkpoint(path: &Path) -> Result<MockViL> {
    let raw = read_checkpoint(path)?;
    if raw.desc.kind != "teacher" {
        return Err(ckpt_err(
            path,
            format!("checkpoint kind {:?}, expected \"teacher\"", raw.desc.kind),
        ));
    }
    raw.desc.arch.validate()?;
    let mut vil = MockViL::init_trainable(raw.desc.arch.clone(), raw.desc.logit_scale, 0)?;
    vil.freeze();
    let names = vil.parameter_names();
    let mut tensors: Vec<&mut Tensor> = Vec::new();
    for k in &mut vil.conv_kernels {
        tensors.push(k);
    }
    tensors.push(&mut vil.projection);
    tensors.push(&mut vil.text_matrix);
    let mut expected: Vec<(String, &mut Tensor)> = names.into_iter().zip(tensors).collect();
    fill_params(path, &raw, &mut expected)?;
    Ok(vil)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DomainShift, SynthSpec};
    use frla_testkit as oracle;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ModelArch {
        ModelArch {
            image_size: 10,
            in_channels: 3,
            convs: vec![
                ConvLayerSpec { out_channels: 4, kernel: 3, stride: 2 },
                ConvLayerSpec { out_channels: 6, kernel: 3, stride: 1 },
            ],
            embed_dim: 4,
            num_classes: 3,
        }
    }

    fn single_patch_arch() -> ModelArch {
        ModelArch {
            image_size: 8,
            in_channels: 3,
            convs: vec![
                ConvLayerSpec { out_channels: 4, kernel: 5, stride: 1 },
                ConvLayerSpec { out_channels: 6, kernel: 4, stride: 1 },
            ],
            embed_dim: 4,
            num_classes: 3,
        }
    }

    fn random_batch(arch: &ModelArch, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * arch.in_channels * arch.image_size * arch.image_size;
        Tensor::new(
            vec![b, arch.in_channels, arch.image_size, arch.image_size],
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn desk_presets_produce_expected_grids() {
        let a32 = ModelArch::desk_default(32, 4).unwrap();
        assert_eq!(a32.grid_side(), 4);
        assert_eq!(a32.backbone_channels(), 32);
        let a64 = ModelArch::desk_default(64, 4).unwrap();
        assert_eq!(a64.grid_side(), 8);
        assert!(ModelArch::desk_default(48, 4).is_err());
    }

    #[test]
    fn target_image_rows_sum_to_one() {
        let arch = tiny_arch();
        let model = TargetModel::init(arch.clone(), 1.0, 3).unwrap();
        let batch = random_batch(&arch, 4, 1);
        let mut tape = Tape::new();
        let probs = target_forward_image(&mut tape, &model, &batch).unwrap();
        assert_eq!(tape.shape(probs), &[4, 3]);
        for row in tape.value(probs).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_classifier_gives_uniform_rows() {
        let arch = tiny_arch();
        let mut model = TargetModel::init(arch.clone(), 1.0, 3).unwrap();
        model
            .classifier
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let batch = random_batch(&arch, 2, 5);
        let mut tape = Tape::new();
        let probs = target_forward_image(&mut tape, &model, &batch).unwrap();
        for p in tape.value(probs) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forwards_are_deterministic() {
        let arch = tiny_arch();
        let model = TargetModel::init(arch.clone(), 1.0, 3).unwrap();
        let batch = random_batch(&arch, 2, 9);
        let run = || {
            let mut tape = Tape::new();
            let probs = target_forward_image(&mut tape, &model, &batch).unwrap();
            tape.value(probs).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn geometry_mismatch_is_shape_error() {
        let arch = tiny_arch();
        let model = TargetModel::init(arch, 1.0, 3).unwrap();
        let bad = Tensor::zeros(vec![2, 3, 8, 8]);
        let mut tape = Tape::new();
        assert!(matches!(
            target_forward_image(&mut tape, &model, &bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn teacher_rows_sum_to_one_and_stay_constant() {
        let arch = tiny_arch();
        let mut vil = MockViL::init_trainable(arch.clone(), 10.0, 4).unwrap();
        vil.freeze();
        assert!(vil.is_frozen());
        let batch = random_batch(&arch, 3, 2);
        let mut tape = Tape::new();
        let probs = vil_forward_image(&mut tape, &vil, &batch).unwrap();
        for row in tape.value(probs).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(!tape.needs_grad(probs));
    }

    #[test]
    fn text_matrix_rows_are_unit_normalized() {
        let arch = tiny_arch();
        let vil = MockViL::init_trainable(arch, 10.0, 4).unwrap();
        let d = vil.arch.embed_dim;
        for row in vil.text_matrix.values().chunks(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_patch_slices_sum_to_one() {
        let arch = tiny_arch();
        let mut vil = MockViL::init_trainable(arch.clone(), 10.0, 6).unwrap();
        vil.freeze();
        let batch = random_batch(&arch, 2, 3);
        let mut tape = Tape::new();
        let patches = vil_forward_patches(&mut tape, &vil, &batch).unwrap();
        let k = 3;
        for slice in tape.value(patches).chunks(k) {
            assert!((slice.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_patch_heads_agree_with_image_heads() {
        let arch = single_patch_arch();
        assert_eq!(arch.grid_side(), 1);

        let model = TargetModel::init(arch.clone(), 1.3, 5).unwrap();
        let batch = random_batch(&arch, 3, 7);
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let f = staged.features(&mut tape, &batch).unwrap();
        let img = staged.image_head(&mut tape, &f).unwrap();
        let pat = staged.patch_head(&mut tape, &f).unwrap();
        oracle::assert_close(
            tape.value(pat),
            tape.value(img),
            1e-12,
            "target 1x1 head consistency",
        );

        let mut vil = MockViL::init_trainable(arch.clone(), 10.0, 6).unwrap();
        vil.freeze();
        let mut tape = Tape::new();
        let staged = vil.stage(&mut tape);
        let vis = staged.vision_features(&mut tape, &batch).unwrap();
        let f = staged.projected(&mut tape, &vis).unwrap();
        let img = staged.image_head(&mut tape, &f).unwrap();
        let pat = staged.patch_head(&mut tape, &f).unwrap();
        oracle::assert_close(
            tape.value(pat),
            tape.value(img),
            1e-12,
            "teacher 1x1 head consistency",
        );
    }

    #[test]
    fn teacher_patches_match_scalar_oracle() {
        let arch = tiny_arch();
        let mut vil = MockViL::init_trainable(arch.clone(), 10.0, 8).unwrap();
        vil.freeze();
        let batch = random_batch(&arch, 2, 11);
        let mut tape = Tape::new();
        let staged = vil.stage(&mut tape);
        let vis = staged.vision_features(&mut tape, &batch).unwrap();
        let f = staged.projected(&mut tape, &vis).unwrap();
        let probs = staged.patch_head(&mut tape, &f).unwrap();

        let raw = tape.value(vis.nhwc).to_vec();
        let expect = oracle::patch_probs_oracle(
            &raw,
            vis.batch,
            vis.grid,
            vis.grid,
            vis.dim,
            vil.projection.values(),
            arch.embed_dim,
            vil.text_matrix.values(),
            arch.num_classes,
            vil.logit_scale,
            true,
            None,
        );
        oracle::assert_close(tape.value(probs), &expect, 1e-10, "patch head vs oracle");
    }

    #[test]
    fn zero_encoder_trips_degenerate_norm() {
        let arch = tiny_arch();
        let mut vil = MockViL::init_trainable(arch.clone(), 10.0, 8).unwrap();
        for k in &mut vil.conv_kernels {
            k.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        vil.freeze();
        let batch = random_batch(&arch, 1, 0);
        let mut tape = Tape::new();
        assert!(matches!(
            vil_forward_patches(&mut tape, &vil, &batch),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn target_patch_gradients_reach_all_parameters() {
        let arch = tiny_arch();
        let model = TargetModel::init(arch.clone(), 1.0, 2).unwrap();
        let batch = random_batch(&arch, 2, 13);
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let f = staged.features(&mut tape, &batch).unwrap();
        let probs = staged.patch_head(&mut tape, &f).unwrap();
        let flat = tape
            .reshape(probs, vec![2 * arch.grid_side() * arch.grid_side() * 3])
            .unwrap();
        let mask: Vec<f64> = (0..tape.value(flat).len())
            .map(|i| (i % 7) as f64 * 0.3 - 0.8)
            .collect();
        let m = tape.constant(mask, vec![tape.value(flat).len()]).unwrap();
        let weighted = tape.mul(flat, m).unwrap();
        let root = tape.sum_all(weighted);
        tape.backward(root).unwrap();
        for id in [staged.convs[0], staged.convs[1], staged.bottleneck, staged.classifier] {
            let g = tape.grad(id).expect("gradient reaches parameter");
            assert!(g.iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arch = tiny_arch();
        let model = TargetModel::init(arch.clone(), 1.0, 3).unwrap();
        let path = dir.path().join("model.ckpt");
        save_target_checkpoint(&model, &path).unwrap();
        let back = load_target_checkpoint(&path).unwrap();
        assert_eq!(model.arch, back.arch);
        for (a, b) in model.parameters().iter().zip(back.parameters()) {
            assert_eq!(a.values(), b.values());
            assert_eq!(a.shape(), b.shape());
        }

        let mut vil = MockViL::init_trainable(arch, 10.0, 9).unwrap();
        vil.freeze();
        let path = dir.path().join("teacher.ckpt");
        save_teacher_checkpoint(&vil, &path).unwrap();
        let back = load_teacher_checkpoint(&path).unwrap();
        assert!(back.is_frozen());
        for (a, b) in vil.parameters().iter().zip(back.parameters()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let model = TargetModel::init(tiny_arch(), 1.0, 3).unwrap();
        let path = dir.path().join("model.ckpt");
        save_target_checkpoint(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_target_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn wrong_kind_and_shape_mismatch_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut vil = MockViL::init_trainable(tiny_arch(), 10.0, 4).unwrap();
        vil.freeze();
        let path = dir.path().join("teacher.ckpt");
        save_teacher_checkpoint(&vil, &path).unwrap();
        let err = load_target_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("kind"));

        // descriptor says conv0 has different geometry than the stored blob
        let model = TargetModel::init(tiny_arch(), 1.0, 3).unwrap();
        let path2 = dir.path().join("model.ckpt");
        save_target_checkpoint(&model, &path2).unwrap();
        let mut bytes = fs::read(&path2).unwrap();
        // patch the first dim of conv0 (first u32 after its rank marker)
        let desc_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let p = 12 + desc_len + 4; // params count
        let name_len = u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
        let rank_pos = p + 4 + name_len;
        let dim_pos = rank_pos + 4;
        bytes[dim_pos..dim_pos + 4].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&path2, &bytes).unwrap();
        let err = load_target_checkpoint(&path2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv0") || msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn trained_style_input_keeps_probabilities_normalized() {
        // sanity on real generated data rather than uniform noise
        let spec = SynthSpec::default();
        let ds = generate(&spec, &DomainShift::identity(), 4, 3, "s", "t").unwrap();
        let arch = ModelArch::desk_default(32, 4).unwrap();
        let model = TargetModel::init(arch, 1.0, 1).unwrap();
        let batch = ds.batch_images(&[0, 1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let probs = target_forward_image(&mut tape, &model, &batch).unwrap();
        for row in tape.value(probs).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
