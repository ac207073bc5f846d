use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DeconverConfig;
use super::layers::{Conv, ConvTranspose, DeconverBlock, Layout};
use crate::error::{Error, Result};
use crate::grad::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

/// Layer structure of a U-shaped Deconver network.
///
/// Encoder: stem, then one block per stage with kernel-2 stride-2
/// downsampling between stages. Decoder: per stage, a kernel-2 stride-2
/// transposed convolution, concatenation with the encoder skip, a pointwise
/// fusion back to `C_ℓ`, and one block. A pointwise head emits logits.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub config: DeconverConfig,
    pub stem: Conv,
    pub encoder: Vec<DeconverBlock>,
    pub down: Vec<Conv>,
    pub up: Vec<ConvTranspose>,
    pub fuse: Vec<Conv>,
    pub decoder: Vec<DeconverBlock>,
    pub head: Conv,
}

impl Architecture {
    pub fn new(config: &DeconverConfig) -> Result<(Self, Layout)> {
        config.validate()?;
        let rank = config.spatial_rank;
        let chans = config.stage_channels();
        let mut layout = Layout::default();
        let k = config.stem_kernel;
        let stem = Conv::new(
            &mut layout,
            "stem",
            config.in_channels,
            chans[0],
            k,
            ConvSpec::same(&vec![k; rank])?,
            rank,
        );
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for (l, &c) in chans.iter().enumerate() {
            if l > 0 {
                down.push(Conv::new(
                    &mut layout,
                    &format!("down{}", l - 1),
                    chans[l - 1],
                    c,
                    2,
                    ConvSpec::valid(rank).with_stride(2),
                    rank,
                ));
            }
            encoder.push(DeconverBlock::new(
                &mut layout,
                &format!("enc{l}"),
                c,
                config.mlp_ratio,
                &config.ndc,
                rank,
            )?);
        }
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..config.depth - 1).rev() {
            let c = chans[l];
            up.push(ConvTranspose::new(
                &mut layout,
                &format!("up{l}"),
                chans[l + 1],
                c,
                2,
                2,
                rank,
            ));
            fuse.push(Conv::pointwise(&mut layout, &format!("fuse{l}"), 2 * c, c, rank));
            decoder.push(DeconverBlock::new(
                &mut layout,
                &format!("dec{l}"),
                c,
                config.mlp_ratio,
                &config.ndc,
                rank,
            )?);
        }
        let head = Conv::pointwise(&mut layout, "head", chans[0], config.out_channels, rank);
        Ok((
            Architecture {
                config: config.clone(),
                stem,
                encoder,
                down,
                up,
                fuse,
                decoder,
                head,
            },
            layout,
        ))
    }

    /// Logits for one sample; `p` holds the bound parameters.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let xv = g.value(x);
        if xv.channels() != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "input has {} channels, network expects {}",
                xv.channels(),
                self.config.in_channels
            )));
        }
        self.config.check_input_extent(xv.spatial())?;

        let mut h = self.stem.forward(g, p, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = self.down[l - 1].forward(g, p, h)?;
            }
            h = block.forward(g, p, h)?;
            skips.push(h);
        }
        skips.pop();
        for ((up, fuse), block) in self.up.iter().zip(&self.fuse).zip(&self.decoder) {
            let u = up.forward(g, p, h)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.concat(&[u, skip])?;
            let f = fuse.forward(g, p, cat)?;
            h = block.forward(g, p, f)?;
        }
        self.head.forward(g, p, h)
    }

    /// Multiply-accumulates of one forward pass per input voxel.
    pub fn macs_per_voxel(&self) -> f64 {
        let rank = self.config.spatial_rank;
        let shrink = (1usize << rank) as f64;
        let mut total = self.stem.macs_per_output(rank) as f64;
        let mut scale = 1.0;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                scale /= shrink;
                total += self.down[l - 1].macs_per_output(rank) as f64 * scale;
            }
            total += block.macs_per_voxel(rank) as f64 * scale;
        }
        for ((up, fuse), block) in self.up.iter().zip(&self.fuse).zip(&self.decoder) {
            scale *= shrink;
            // kernel 2, stride 2: every output voxel receives exactly one tap per input channel
            total += (up.in_channels * up.out_channels) as f64 * scale;
            total += fuse.macs_per_output(rank) as f64 * scale;
            total += block.macs_per_voxel(rank) as f64 * scale;
        }
        total + self.head.macs_per_output(rank) as f64
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Deconver<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Deconver<T> {
    /// Builds a network with Kaiming-uniform weights and zero biases.
    pub fn new(config: &DeconverConfig, seed: u64) -> Result<Self> {
        let (arch, layout) = Architecture::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.instantiate(&mut rng)?;
        Ok(Deconver { arch, params })
    }

    /// Wraps existing parameter values; names and shapes must match the
    /// architecture.
    pub fn from_params(config: &DeconverConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.params.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DeconverConfig {
        &self.arch.config
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        self.arch.forward(g, p, x)
    }

    /// Logits for `x` (`C_in × spatial`).
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let xv = g.constant(x.clone());
        let y = self.arch.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }
}
