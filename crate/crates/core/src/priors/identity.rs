use featinv_tensor::{Ctx, Var};

use super::GenerativePrior;

/// `D(v) = v` reshaped to the image: inversion becomes direct pixel
/// optimization.
#[derive(Clone, Debug)]
pub struct IdentityPrior {
    shape: [usize; 3],
    latent: Vec<usize>,
}

impl IdentityPrior {
    pub fn new(image_shape: [usize; 3]) -> Self {
        Self {
            shape: image_shape,
            latent: image_shape.to_vec(),
        }
    }
}

impl GenerativePrior for IdentityPrior {
    fn name(&self) -> &str {
        "identity"
    }

    fn latent_shape(&self) -> &[usize] {
        &self.latent
    }

    fn output_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn pixel_range(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn expects_normalized_latent(&self) -> bool {
        false
    }

    fn decode_var<'g>(&self, _: &mut Ctx<'g>, v: Var<'g>, _: Option<Var<'g>>) -> Var<'g> {
        let n = v.shape()[0];
        let [c, h, w] = self.shape;
        v.reshape(vec![n, c, h, w])
    }
}
