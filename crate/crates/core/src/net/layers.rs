//! Building blocks of the network. Every layer registers its parameters in a
//! [`Layout`] at construction and reads them back from the bound graph
//! leaves during `forward`.

use rand::Rng;

use super::config::{NdcDims, NdcLayerConfig};
use crate::error::Result;
use crate::grad::{Graph, ParamId, ParamStore, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::{ConvSpec, Tensor};

/// Initial value rule of a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-b, b]`, `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered parameter declarations of a network, without values.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Draws initial values in declaration order.
    pub fn instantiate<T: Scalar, R: Rng>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for s in &self.specs {
            let value = match s.init {
                Init::KaimingUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| lit(rng.random_range(-bound..bound)))
                }
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
            };
            store.insert(s.name.clone(), value)?;
        }
        Ok(store)
    }
}

fn kernel_shape(out: usize, inp: usize, kernel: usize, rank: usize) -> Vec<usize> {
    let mut s = vec![out, inp];
    s.extend(std::iter::repeat_n(kernel, rank));
    s
}

/// Correlation with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new(
        layout: &mut Layout,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        spec: ConvSpec,
        rank: usize,
    ) -> Self {
        let fan_in = inp / spec.groups * kernel.pow(rank as u32);
        let weight = layout.add(
            format!("{name}.weight"),
            kernel_shape(out, inp / spec.groups, kernel, rank),
            Init::KaimingUniform { fan_in },
        );
        let bias = Some(layout.add(format!("{name}.bias"), vec![out], Init::Zeros));
        Conv {
            weight,
            bias,
            spec,
            in_channels: inp,
            out_channels: out,
            kernel,
        }
    }

    pub fn pointwise(layout: &mut Layout, name: &str, inp: usize, out: usize, rank: usize) -> Self {
        Self::new(layout, name, inp, out, 1, ConvSpec::valid(rank), rank)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.conv(x, p[self.weight.0], &self.spec)?;
        match self.bias {
            Some(b) => g.add_bias(y, p[b.0]),
            None => Ok(y),
        }
    }

    /// Multiply-accumulates per output voxel.
    pub fn macs_per_output(&self, rank: usize) -> usize {
        self.out_channels * self.in_channels / self.spec.groups * self.kernel.pow(rank as u32)
    }
}

/// Transposed correlation with bias (learned upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvTranspose {
    pub fn new(
        layout: &mut Layout,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        rank: usize,
    ) -> Self {
        // PyTorch convention: fan_in of a (C_in, C_out, k…) weight is C_out·k^d
        let fan_in = out * kernel.pow(rank as u32);
        let weight = layout.add(
            format!("{name}.weight"),
            kernel_shape(inp, out, kernel, rank),
            Init::KaimingUniform { fan_in },
        );
        let bias = layout.add(format!("{name}.bias"), vec![out], Init::Zeros);
        ConvTranspose {
            weight,
            bias,
            spec: ConvSpec::valid(rank).with_stride(stride),
            in_channels: inp,
            out_channels: out,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.conv_transpose(x, p[self.weight.0], &self.spec)?;
        g.add_bias(y, p[self.bias.0])
    }
}

/// Instance normalization with learnable per-channel affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new(layout: &mut Layout, name: &str, channels: usize) -> Self {
        InstanceNorm {
            scale: layout.add(format!("{name}.scale"), vec![channels], Init::Ones),
            shift: layout.add(format!("{name}.shift"), vec![channels], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.instance_norm(
            x,
            Some(p[self.scale.0]),
            Some(p[self.shift.0]),
            lit(INSTANCE_NORM_EPS),
        )
    }
}

/// Learnable nonnegative deconvolution: one ε-guarded multiplicative update
/// per channel group.
///
/// The source is initialised by a pointwise convolution of the full input
/// followed by ReLU; the filter is stored raw and rectified before use, and
/// the adjoint filter is derived from the same parameters.
#[derive(Debug, Clone)]
pub struct NdcLayer {
    pub source_init: Conv,
    /// Raw filter `(C, E/G, k…)`.
    pub filter: ParamId,
    pub dims: NdcDims,
    pub kernel: usize,
    pub epsilon: f64,
    rank: usize,
}

/// Tolerated negative input magnitude (rounding from upstream ops).
pub const NDC_NEGATIVE_SLACK: f64 = 1e-12;

impl NdcLayer {
    pub fn new(
        layout: &mut Layout,
        name: &str,
        channels: usize,
        cfg: &NdcLayerConfig,
        rank: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims(channels)?;
        let source_init =
            Conv::pointwise(layout, &format!("{name}.source_init"), channels, dims.sources, rank);
        let per_group_sources = dims.sources / dims.groups;
        let filter = layout.add(
            format!("{name}.filter"),
            kernel_shape(channels, per_group_sources, cfg.kernel, rank),
            Init::KaimingUniform {
                fan_in: per_group_sources * cfg.kernel.pow(rank as u32),
            },
        );
        Ok(NdcLayer {
            source_init,
            filter,
            dims,
            kernel: cfg.kernel,
            epsilon: cfg.epsilon,
            rank,
        })
    }

    fn same_spec(&self) -> ConvSpec {
        ConvSpec::same(&vec![self.kernel; self.rank])
            .expect("kernel validated odd")
            .with_groups(self.dims.groups)
    }

    /// Returns `(S⁽¹⁾, S⁽⁰⁾, V)` so callers can inspect the update.
    pub fn forward_parts<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        g.value(x)
            .check_nonnegative_within("NDC input", lit(NDC_NEGATIVE_SLACK))?;
        let s0_pre = self.source_init.forward(g, p, x)?;
        let s0 = g.relu(s0_pre);
        let v = g.relu(p[self.filter.0]);
        let v_adj = g.adjoint(v, self.dims.groups)?;
        let spec = self.same_spec();
        let eps: T = lit(self.epsilon);

        let back = g.conv(x, v_adj, &spec)?;
        let num = g.add_scalar(back, eps);
        let recon = g.conv(s0, v, &spec)?;
        let reproj = g.conv(recon, v_adj, &spec)?;
        let den = g.add_scalar(reproj, eps);
        let ratio = g.div(num, den)?;
        let s1 = g.mul(s0, ratio)?;
        Ok((s1, s0, v))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, p, x)?.0)
    }

    pub fn macs_per_voxel(&self) -> usize {
        let taps = self.kernel.pow(self.rank as u32);
        let NdcDims {
            channels: c,
            groups: gr,
            sources: e,
        } = self.dims;
        // S∗V, X∗V⁻ and (S∗V)∗V⁻
        let forward = c * (e / gr) * taps;
        let adjoint = e * (c / gr) * taps;
        self.source_init.macs_per_output(self.rank) + forward + 2 * adjoint
    }
}

/// Pointwise conv → ReLU → NDC → pointwise conv.
#[derive(Debug, Clone)]
pub struct DeconvMixer {
    pub project_in: Conv,
    pub ndc: NdcLayer,
    pub project_out: Conv,
}

impl DeconvMixer {
    pub fn new(
        layout: &mut Layout,
        name: &str,
        channels: usize,
        cfg: &NdcLayerConfig,
        rank: usize,
    ) -> Result<Self> {
        let project_in = Conv::pointwise(layout, &format!("{name}.project_in"), channels, channels, rank);
        let ndc = NdcLayer::new(layout, &format!("{name}.ndc"), channels, cfg, rank)?;
        let project_out = Conv::pointwise(
            layout,
            &format!("{name}.project_out"),
            ndc.dims.sources,
            channels,
            rank,
        );
        Ok(DeconvMixer {
            project_in,
            ndc,
            project_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let x1 = self.project_in.forward(g, p, x)?;
        let x1 = g.relu(x1);
        let x2 = self.ndc.forward(g, p, x1)?;
        self.project_out.forward(g, p, x2)
    }

    pub fn macs_per_voxel(&self, rank: usize) -> usize {
        self.project_in.macs_per_output(rank)
            + self.ndc.macs_per_voxel()
            + self.project_out.macs_per_output(rank)
    }
}

/// Two pointwise convolutions around a GELU, expanding by `mlp_ratio`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub expand: Conv,
    pub project: Conv,
}

impl Mlp {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, ratio: usize, rank: usize) -> Self {
        let hidden = channels * ratio;
        Mlp {
            expand: Conv::pointwise(layout, &format!("{name}.expand"), channels, hidden, rank),
            project: Conv::pointwise(layout, &format!("{name}.project"), hidden, channels, rank),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.expand.forward(g, p, x)?;
        let h = g.gelu(h);
        self.project.forward(g, p, h)
    }
}

/// `Z = Mixer(IN(X)) + X`, `Y = MLP(IN(Z)) + Z`.
#[derive(Debug, Clone)]
pub struct DeconverBlock {
    pub norm1: InstanceNorm,
    pub mixer: DeconvMixer,
    pub norm2: InstanceNorm,
    pub mlp: Mlp,
    pub channels: usize,
}

impl DeconverBlock {
    pub fn new(
        layout: &mut Layout,
        name: &str,
        channels: usize,
        mlp_ratio: usize,
        cfg: &NdcLayerConfig,
        rank: usize,
    ) -> Result<Self> {
        Ok(DeconverBlock {
            norm1: InstanceNorm::new(layout, &format!("{name}.norm1"), channels),
            mixer: DeconvMixer::new(layout, &format!("{name}.mixer"), channels, cfg, rank)?,
            norm2: InstanceNorm::new(layout, &format!("{name}.norm2"), channels),
            mlp: Mlp::new(layout, &format!("{name}.mlp"), channels, mlp_ratio, rank),
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let n1 = self.norm1.forward(g, p, x)?;
        let m = self.mixer.forward(g, p, n1)?;
        let z = g.add(m, x)?;
        let n2 = self.norm2.forward(g, p, z)?;
        let h = self.mlp.forward(g, p, n2)?;
        g.add(h, z)
    }

    pub fn macs_per_voxel(&self, rank: usize) -> usize {
        self.mixer.macs_per_voxel(rank)
            + self.mlp.expand.macs_per_output(rank)
            + self.mlp.project.macs_per_output(rank)
    }
}
