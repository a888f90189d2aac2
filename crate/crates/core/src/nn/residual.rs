use super::batchnorm::BatchNorm2d;
use super::conv::Conv2d;
use super::spectral::SnConv2d;
use super::Fwd;
use crate::error::Result;
use crate::tensor::TensorId;
use rand::Rng;

/// conv-bn-relu-conv-bn plus identity skip; no activation after the sum, so
/// zeroing the second norm's gamma makes the block an exact identity.
pub struct ResidualBlock {
    pub conv1: SnConv2d,
    pub bn1: BatchNorm2d,
    pub conv2: SnConv2d,
    pub bn2: BatchNorm2d,
}

impl ResidualBlock {
    pub fn new(ch: usize, spectral: bool, rng: &mut impl Rng) -> Self {
        fn wrap(c: Conv2d, spectral: bool, rng: &mut impl Rng) -> SnConv2d {
            if spectral {
                SnConv2d::spectral(c, rng)
            } else {
                SnConv2d::plain(c)
            }
        }
        // Both convs feed a batch norm, which cancels per-channel bias — none carried.
        ResidualBlock {
            conv1: wrap(Conv2d::new(ch, ch, 3, 1, 1, false, rng), spectral, rng),
            bn1: BatchNorm2d::new(ch, rng),
            conv2: wrap(Conv2d::new(ch, ch, 3, 1, 1, false, rng), spectral, rng),
            bn2: BatchNorm2d::new(ch, rng),
        }
    }

    pub fn forward(&self, fw: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let h = self.conv1.forward(fw, x)?;
        let h = self.bn1.forward(fw, h)?;
        let h = fw.tape.relu(h)?;
        let h = self.conv2.forward(fw, h)?;
        let h = self.bn2.forward(fw, h)?;
        fw.tape.add(h, x)
    }
}
