use crate::error::{Error, Result};

/// Layer count of the standard architecture: 12 convolutions + 3 dense layers.
pub const STANDARD_DEPTH: usize = 15;
pub const STANDARD_CONV_LAYERS: usize = 12;
pub const STANDARD_DENSE_WIDTHS: [usize; 3] = [256, 128, 2];
pub const DEFAULT_CONV_WIDTHS: [usize; 12] = [16, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64];

/// Architecture description: a stack of valid 3x3 convolutions followed by
/// dense layers, the last of which has two units feeding a softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub patch_side: usize,
    pub kernel: usize,
    pub conv_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Dense,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::standard(DEFAULT_CONV_WIDTHS.to_vec()).expect("default widths are valid")
    }
}

impl NetworkSpec {
    /// The 15-layer patch classifier: two input channels, 32x32 patches,
    /// twelve 3x3 convolutions of the given widths, dense 256/128/2.
    pub fn standard(conv_widths: Vec<usize>) -> Result<Self> {
        let spec = NetworkSpec {
            input_channels: 2,
            patch_side: 32,
            kernel: 3,
            conv_widths,
            dense_widths: STANDARD_DENSE_WIDTHS.to_vec(),
        };
        spec.validate_standard()?;
        Ok(spec)
    }

    /// Checks the general structural constraints every network must meet.
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.kernel == 0 {
            return Err(Error::param("input channels and kernel size must be positive"));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::param(format!(
                "conv widths must be non-empty and positive, got {:?}",
                self.conv_widths
            )));
        }
        if self.dense_widths.last() != Some(&2) || self.dense_widths.contains(&0) {
            return Err(Error::param(format!(
                "dense widths must be positive and end in 2 units, got {:?}",
                self.dense_widths
            )));
        }
        let shrink = self.conv_widths.len() * (self.kernel - 1);
        if self.patch_side <= shrink {
            return Err(Error::param(format!(
                "patch side {} leaves no spatial extent after {} convolutions",
                self.patch_side,
                self.conv_widths.len()
            )));
        }
        Ok(())
    }

    /// Checks the published architecture: 12 conv + dense 256/128/2 on
    /// two-channel 32x32 patches with 3x3 kernels.
    pub fn validate_standard(&self) -> Result<()> {
        self.validate()?;
        if self.conv_widths.len() != STANDARD_CONV_LAYERS
            || self.dense_widths != STANDARD_DENSE_WIDTHS
            || self.input_channels != 2
            || self.patch_side != 32
            || self.kernel != 3
        {
            return Err(Error::param(format!(
                "expected 12 conv widths, dense [256, 128, 2], 2x32x32 input and 3x3 kernels; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of parameterized layers, `d`.
    pub fn depth(&self) -> usize {
        self.conv_widths.len() + self.dense_widths.len()
    }

    pub fn conv_layers(&self) -> usize {
        self.conv_widths.len()
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        if layer < self.conv_widths.len() {
            LayerKind::Conv
        } else {
            LayerKind::Dense
        }
    }

    /// Side of the feature map after the last convolution (8 for the standard net).
    pub fn feature_side(&self) -> usize {
        self.patch_side - self.conv_widths.len() * (self.kernel - 1)
    }

    /// Width of the flattened input to the first dense layer.
    pub fn flat_features(&self) -> usize {
        let side = self.feature_side();
        self.conv_widths.last().copied().unwrap_or(self.input_channels) * side * side
    }

    /// Output width of a layer (channels for conv, units for dense).
    pub fn out_width(&self, layer: usize) -> usize {
        let nc = self.conv_widths.len();
        if layer < nc {
            self.conv_widths[layer]
        } else {
            self.dense_widths[layer - nc]
        }
    }

    /// Input width and fan-in of a layer.
    pub fn fan_in(&self, layer: usize) -> usize {
        let nc = self.conv_widths.len();
        match self.layer_kind(layer) {
            LayerKind::Conv => {
                let cin = if layer == 0 { self.input_channels } else { self.conv_widths[layer - 1] };
                cin * self.kernel * self.kernel
            }
            LayerKind::Dense => {
                if layer == nc {
                    self.flat_features()
                } else {
                    self.dense_widths[layer - nc - 1]
                }
            }
        }
    }

    pub fn weight_shape(&self, layer: usize) -> Vec<usize> {
        let nc = self.conv_widths.len();
        match self.layer_kind(layer) {
            LayerKind::Conv => {
                let cin = if layer == 0 { self.input_channels } else { self.conv_widths[layer - 1] };
                vec![self.conv_widths[layer], cin, self.kernel, self.kernel]
            }
            LayerKind::Dense => vec![self.dense_widths[layer - nc], self.fan_in(layer)],
        }
    }

    /// Every layer except the output layer is batch-normalized.
    pub fn has_batchnorm(&self, layer: usize) -> bool {
        layer + 1 < self.depth()
    }

    /// Dropout follows the hidden dense layers only.
    pub fn has_dropout(&self, layer: usize) -> bool {
        self.layer_kind(layer) == LayerKind::Dense && layer + 1 < self.depth()
    }

    /// Trainable parameter count: weights and biases of every layer plus
    /// BN scale and shift of every hidden layer.
    pub fn parameter_count(&self) -> usize {
        (0..self.depth())
            .map(|l| {
                let out = self.out_width(l);
                let bn = if self.has_batchnorm(l) { 2 * out } else { 0 };
                out * self.fan_in(l) + out + bn
            })
            .sum()
    }
}
