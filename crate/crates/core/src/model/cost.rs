use super::{stem_spec, trunk_spec, Branch, ModelConfig, ModelError};
use crate::attention::{Cost, CostModel};

fn linear(batch: usize, fan_in: usize, fan_out: usize, bias: bool) -> Cost {
    Cost {
        params: fan_in * fan_out + if bias { fan_out } else { 0 },
        flops: 2 * (batch * fan_in * fan_out) as u64,
    }
}

/// Cost of one training forward pass (all four branches and both
/// classifiers) on an `(N, 3, H, W)` batch.
impl CostModel for ModelConfig {
    type Error = ModelError;

    fn cost(&self, [n, _, h, w]: [usize; 4]) -> Result<Cost, ModelError> {
        self.validate()?;
        let stems = if self.shared_stem { 1 } else { 4 };
        let mut total = Cost::default();
        let mut size = (h, w);
        let mut cin = 3;
        for &c in &self.widths {
            let spec = stem_spec(cin, c);
            let stage = Cost {
                params: spec.param_count(),
                flops: spec.flops(n, size.0, size.1)?,
            };
            for _ in 0..stems {
                total = total + stage;
            }
            size = spec.output_size(size.0, size.1)?;
            cin = c;
        }

        let c = self.channels();
        let d = self.feature_dim;
        let shape = [n, c, size.0, size.1];
        for b in Branch::ALL {
            for _ in 0..self.blocks_per_branch {
                let spec = trunk_spec(c);
                total = total
                    + Cost {
                        params: spec.param_count(),
                        flops: spec.flops(n, size.0, size.1)?,
                    };
                if self.attention {
                    total = total
                        + if b.is_lka() {
                            self.lka_config()?.cost(shape)?
                        } else {
                            self.hca_config()?.cost(shape)?
                        };
                }
            }
            total = total + linear(n, c, d, true);
            if b.classifies() {
                total = total + linear(n, d, self.num_identities, false);
            }
        }
        if self.metadata_embeddings {
            total.params += (self.num_cameras + self.num_views) * d;
        }
        Ok(total)
    }
}
