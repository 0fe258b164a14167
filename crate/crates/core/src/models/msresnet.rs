use autodiff::nn::{BatchNorm1d, Conv1d, Dense, ParamStore, Session};
use autodiff::{Padding, Var};
use rand_chacha::ChaCha8Rng;

use super::{MsResNetConfig, Network, Outputs};
use crate::error::{argument, Result};

/// `relu(bn(conv(x))) + shortcut(x)`, the shortcut being a width-1
/// convolution when the channel count changes.
struct ResBlock {
    conv: Conv1d,
    bn: BatchNorm1d,
    shortcut: Option<Conv1d>,
}

/// Shared conv/BN/max-pool stem feeding parallel residual branches with
/// different kernel sizes, each globally average-pooled and concatenated
/// before the classifier.
pub struct MsResNet {
    stem_conv: Conv1d,
    stem_bn: BatchNorm1d,
    pool_kernel: usize,
    pool_stride: usize,
    branches: Vec<Vec<ResBlock>>,
    head: Dense,
}

impl MsResNet {
    pub fn new(cfg: &MsResNetConfig, in_channels: usize, num_classes: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.branch_kernel_sizes.is_empty() || cfg.branch_widths.is_empty() {
            return argument("the ResNet needs at least one branch and one block");
        }
        if cfg.stem_stride == 0 || cfg.pool_stride == 0 || cfg.pool_kernel == 0 {
            return argument("stem strides and pool size must be positive");
        }
        let after_stem = cfg.input_length.div_ceil(cfg.stem_stride);
        let pad = cfg.pool_kernel / 2;
        if after_stem + 2 * pad < cfg.pool_kernel || cfg.input_length < cfg.stem_stride * cfg.pool_stride {
            return argument(format!(
                "input length {} is too short for a stride-{} stem and stride-{} pool",
                cfg.input_length, cfg.stem_stride, cfg.pool_stride
            ));
        }
        if in_channels == 0 || num_classes == 0 || cfg.stem_channels == 0 || cfg.branch_widths.contains(&0) {
            return argument("channel and class counts must be positive");
        }
        let stem_conv =
            Conv1d::new(store, "stem.conv", in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, Padding::Same, rng);
        let stem_bn = BatchNorm1d::new(store, "stem.bn", cfg.stem_channels);
        let mut branches = Vec::new();
        for (bi, &k) in cfg.branch_kernel_sizes.iter().enumerate() {
            let mut blocks = Vec::new();
            let mut c_in = cfg.stem_channels;
            for (li, &c_out) in cfg.branch_widths.iter().enumerate() {
                let name = format!("branch{bi}.block{li}");
                let conv = Conv1d::new(store, &format!("{name}.conv"), c_in, c_out, k, 1, Padding::Same, rng);
                let bn = BatchNorm1d::new(store, &format!("{name}.bn"), c_out);
                let shortcut =
                    (c_in != c_out).then(|| Conv1d::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, 1, Padding::Same, rng));
                blocks.push(ResBlock { conv, bn, shortcut });
                c_in = c_out;
            }
            branches.push(blocks);
        }
        let head = Dense::new(store, "head", cfg.concat_dim(), num_classes, rng);
        Ok(Self { stem_conv, stem_bn, pool_kernel: cfg.pool_kernel, pool_stride: cfg.pool_stride, branches, head })
    }
}

impl Network for MsResNet {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Outputs> {
        let h = self.stem_conv.forward(s, x)?;
        let h = self.stem_bn.forward(s, h)?;
        let stem = s.graph.max_pool1d(h, self.pool_kernel, self.pool_stride, self.pool_kernel / 2)?;
        let mut pooled = Vec::with_capacity(self.branches.len());
        for blocks in &self.branches {
            let mut b = stem;
            for block in blocks {
                let y = block.conv.forward(s, b)?;
                let y = block.bn.forward(s, y)?;
                let y = s.graph.relu(y);
                let shortcut = match &block.shortcut {
                    Some(proj) => proj.forward(s, b)?,
                    None => b,
                };
                b = s.graph.add(y, shortcut)?;
            }
            pooled.push(s.graph.global_avg_pool1d(b)?);
        }
        let embedding = s.graph.concat(&pooled)?;
        let logits = self.head.forward(s, embedding)?;
        Ok(Outputs { logits, embedding: Some(embedding), branches: pooled, stem: Some(stem) })
    }
}
