use serde::Serialize;

use super::{AttentionError, HcaConfig, LkaConfig};

/// Parameter count and FLOPs (two per multiply-accumulate of every
/// convolution and matrix product) for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Cost {
    pub params: usize,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost {
            params: self.params + rhs.params,
            flops: self.flops + rhs.flops,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// Closed-form cost from configuration and an NCHW input shape.
pub trait CostModel {
    type Error;

    fn cost(&self, input_shape: [usize; 4]) -> Result<Cost, Self::Error>;
}

pub fn count_params_flops<M: CostModel>(model: &M, input_shape: [usize; 4]) -> Result<Cost, M::Error> {
    model.cost(input_shape)
}

impl CostModel for LkaConfig {
    type Error = AttentionError;

    fn cost(&self, [n, _, h, w]: [usize; 4]) -> Result<Cost, AttentionError> {
        self.validate()?;
        let specs = [
            self.pointwise_spec(),
            self.dw_spec(),
            self.dd_spec(),
            self.pointwise_spec(),
            self.pointwise_spec(),
        ];
        specs
            .iter()
            .map(|s| {
                Ok(Cost {
                    params: s.param_count(),
                    flops: s.flops(n, h, w)?,
                })
            })
            .sum()
    }
}

impl CostModel for HcaConfig {
    type Error = AttentionError;

    fn cost(&self, [n, _, _, _]: [usize; 4]) -> Result<Cost, AttentionError> {
        let k = self.kernel_size()?;
        let c = self.channels;
        let cells = self.grid * self.grid;
        Ok(Cost {
            params: 2 * (k + 1),
            flops: 2 * (n * c * k + n * cells * c * k) as u64,
        })
    }
}
