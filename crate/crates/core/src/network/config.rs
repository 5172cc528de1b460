use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters and input-group masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub rows: usize,
    pub cols: usize,
    /// Input history length.
    pub s: usize,
    /// Forecast horizon.
    pub h: usize,
    /// Output channels of every branch of a multi-branch block.
    pub c_branch: usize,
    /// Channels produced by each CStem stage.
    pub c_stem: usize,
    pub c_hidden: usize,
    pub cstem_stages: usize,
    pub branch_kernels: Vec<usize>,
    pub use_lightning: bool,
    pub use_radar: bool,
    pub use_cloud: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

pub const DEFAULT_KERNELS: [usize; 4] = [3, 5, 7, 11];

impl ModelConfig {
    pub fn new(rows: usize, cols: usize) -> Self {
        ModelConfig {
            rows,
            cols,
            s: 6,
            h: 6,
            c_branch: 8,
            c_stem: 16,
            c_hidden: 32,
            cstem_stages: 2,
            branch_kernels: DEFAULT_KERNELS.to_vec(),
            use_lightning: true,
            use_radar: true,
            use_cloud: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.rows == 0 || self.cols == 0 || self.s == 0 || self.h == 0 {
            return fail(format!("rows, cols, s and h must be positive: {self:?}"));
        }
        if self.cstem_stages == 0 {
            return fail("cstem_stages must be at least 1".into());
        }
        if self.c_branch == 0 || self.c_stem == 0 || self.c_hidden == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.c_hidden % (1 << self.cstem_stages) != 0 {
            return fail(format!(
                "c_hidden {} must be divisible by 2^cstem_stages = {}",
                self.c_hidden,
                1 << self.cstem_stages
            ));
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|k| k % 2 == 0) {
            return fail(format!("branch kernels must be odd and non-empty: {:?}", self.branch_kernels));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("invalid batch-norm constants".into());
        }
        Ok(())
    }

    /// Latent spatial size after the CStem: ceil-halved once per stage.
    pub fn latent(&self) -> (usize, usize) {
        let mut rc = (self.rows, self.cols);
        for _ in 0..self.cstem_stages {
            rc = (rc.0.div_ceil(2), rc.1.div_ceil(2));
        }
        rc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_sizes() {
        assert_eq!(ModelConfig::new(159, 159).latent(), (40, 40));
        assert_eq!(ModelConfig::new(32, 32).latent(), (8, 8));
        let mut c = ModelConfig::new(9, 5);
        c.cstem_stages = 3;
        assert_eq!(c.latent(), (2, 1));
    }

    #[test]
    fn validation() {
        ModelConfig::new(32, 32).validate().unwrap();
        let mut c = ModelConfig::new(32, 32);
        c.c_hidden = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(32, 32);
        c.branch_kernels = vec![3, 4];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(32, 32);
        c.cstem_stages = 0;
        assert!(c.validate().is_err());
    }
}
