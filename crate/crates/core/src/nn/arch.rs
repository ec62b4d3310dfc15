use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub kernel: usize,
    pub channels: usize,
    pub pool: usize,
}

/// Conv blocks (conv, batch norm, ReLU, dropout, max-pool), then one hidden
/// fully connected layer and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub dropout_p: f64,
    pub fc_hidden: usize,
    pub num_classes: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 256,
            conv_blocks: vec![
                ConvBlock { kernel: 7, channels: 8, pool: 2 },
                ConvBlock { kernel: 5, channels: 16, pool: 2 },
                ConvBlock { kernel: 3, channels: 32, pool: 2 },
            ],
            dropout_p: 0.2,
            fc_hidden: 64,
            num_classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub count: u64,
}

/// Multiply-accumulates for conv and fc layers, one op per element for
/// batch norm, ReLU and pooling (counted on the layer input). Dropout is
/// inactive at inference and not counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsCount {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
}

impl FlopsCount {
    pub fn ratio_to(&self, base: &FlopsCount) -> f64 {
        self.total as f64 / base.total as f64
    }
}

pub(crate) struct BlockShape {
    pub in_ch: usize,
    pub len: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pool: usize,
    pub pooled: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be >= 1"));
        }
        if self.num_classes != 2 {
            return Err(Error::config("num_classes", "the detector head is binary; must be 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p", "must be in [0, 1)"));
        }
        if self.fc_hidden == 0 {
            return Err(Error::config("fc_hidden", "must be >= 1"));
        }
        let mut len = self.input_dim;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel == 0 || b.channels == 0 || b.pool == 0 {
                return Err(Error::config(
                    format!("conv_blocks[{i}]"),
                    "kernel, channels and pool must be >= 1",
                ));
            }
            if i > 0 && b.kernel > self.conv_blocks[i - 1].kernel {
                return Err(Error::config(
                    format!("conv_blocks[{i}].kernel"),
                    "kernel sizes must be non-increasing",
                ));
            }
            len /= b.pool;
            if len == 0 {
                return Err(Error::config(
                    format!("conv_blocks[{i}].pool"),
                    "pooling chain leaves no samples",
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn blocks(&self) -> Vec<BlockShape> {
        let mut in_ch = 1;
        let mut len = self.input_dim;
        self.conv_blocks
            .iter()
            .map(|b| {
                let s = BlockShape {
                    in_ch,
                    len,
                    out_ch: b.channels,
                    kernel: b.kernel,
                    pool: b.pool,
                    pooled: len / b.pool,
                };
                in_ch = b.channels;
                len = s.pooled;
                s
            })
            .collect()
    }

    /// Width of the flattened conv output feeding `fc1`.
    pub fn flat_dim(&self) -> usize {
        match self.blocks().last() {
            Some(b) => b.out_ch * b.pooled,
            None => self.input_dim,
        }
    }

    /// Tensor names and shapes in the order the model file writes them.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks().iter().enumerate() {
            let n = i + 1;
            out.push((format!("conv{n}.weight"), vec![b.out_ch, b.in_ch, b.kernel]));
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("bn{n}.{s}"), vec![b.out_ch]));
            }
        }
        out.push(("fc1.weight".into(), vec![self.fc_hidden, self.flat_dim()]));
        out.push(("fc1.bias".into(), vec![self.fc_hidden]));
        out.push(("head.weight".into(), vec![self.num_classes, self.fc_hidden]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }

    pub fn flops(&self) -> FlopsCount {
        let mut layers = Vec::new();
        let mut push = |name: String, count: usize| layers.push(LayerFlops { name, count: count as u64 });
        for (i, b) in self.blocks().iter().enumerate() {
            let n = i + 1;
            let elems = b.out_ch * b.len;
            push(format!("conv{n}"), b.len * b.out_ch * b.in_ch * b.kernel);
            push(format!("bn{n}"), elems);
            push(format!("relu{n}"), elems);
            push(format!("pool{n}"), elems);
        }
        push("fc1".into(), self.flat_dim() * self.fc_hidden);
        push("fc1_relu".into(), self.fc_hidden);
        push("head".into(), self.fc_hidden * self.num_classes);
        let total = layers.iter().map(|l| l.count).sum();
        FlopsCount { layers, total }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_counts_by_hand() {
        // conv: 256*8*1*7, 128*16*8*5, 64*32*16*3
        // bn/relu/pool: 3 ops on 2048 elements per block
        // fc1: 1024*64, relu 64, head 64*2
        let f = ArchSpec::default().flops();
        let by_name = |n: &str| f.layers.iter().find(|l| l.name == n).unwrap().count;
        assert_eq!(by_name("conv1"), 14_336);
        assert_eq!(by_name("conv2"), 81_920);
        assert_eq!(by_name("conv3"), 98_304);
        assert_eq!(by_name("fc1"), 65_536);
        assert_eq!(by_name("head"), 128);
        assert_eq!(f.total, 278_720);
        assert_eq!(f.total, f.layers.iter().map(|l| l.count).sum::<u64>());
    }

    #[test]
    fn fc_head_only() {
        let a = ArchSpec {
            input_dim: 256,
            conv_blocks: vec![],
            dropout_p: 0.0,
            fc_hidden: 256,
            num_classes: 2,
        };
        let f = a.flops();
        assert_eq!(f.layers.last().unwrap().count, 512);
    }

    #[test]
    fn doubling_channels_doubles_that_conv() {
        let base = ArchSpec::default();
        let mut wide = base.clone();
        wide.conv_blocks[0].channels *= 2;
        let conv1 = |a: &ArchSpec| a.flops().layers[0].count;
        assert_eq!(conv1(&wide), 2 * conv1(&base));
    }

    #[test]
    fn validation() {
        assert!(ArchSpec::default().validate().is_ok());
        let mut a = ArchSpec::default();
        a.conv_blocks[1].kernel = 9;
        assert!(a.validate().is_err());
        let mut a = ArchSpec::default();
        a.dropout_p = 1.0;
        assert!(a.validate().is_err());
        let mut a = ArchSpec::default();
        a.conv_blocks[2].pool = 1000;
        assert!(a.validate().is_err());
        let mut a = ArchSpec::default();
        a.num_classes = 3;
        assert!(a.validate().is_err());
    }

    #[test]
    fn shapes_follow_the_pooling_chain() {
        let a = ArchSpec::default();
        assert_eq!(a.flat_dim(), 32 * 32);
        let shapes = a.tensor_shapes();
        assert_eq!(shapes[0], ("conv1.weight".to_string(), vec![8, 1, 7]));
        assert!(shapes.iter().any(|(n, s)| n == "fc1.weight" && s == &vec![64, 1024]));
    }
}
