use ndarray::{Array1, Array2, Axis};

use super::param::{join, Param, ParamVisitor, Parameterized};

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array2::ones((1, dim))),
            beta: Param::zeros(1, dim),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let LayerNormCache { xhat, inv_std } = cache;
        self.gamma.grad += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat;
        dx -= &mean_dxhat.insert_axis(Axis(1));
        dx -= &(xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
        dx *= &inv_std.view().insert_axis(Axis(1));
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
}

/// Per-feature standardization across the rows (batch) of its input.
///
/// Running statistics are buffers, not parameters; they are updated
/// explicitly through [`BatchNorm::update_running`] so repeated forward
/// passes (gradient checks) stay side-effect free.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// `false` when running statistics were used, making the map affine.
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Array2::ones((1, dim))),
            beta: Param::zeros(1, dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, BatchNormCache, BatchStats) {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma.value + &self.beta.value;
        let stats = BatchStats {
            mean,
            var,
            count: x.nrows(),
        };
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats: true,
            },
            stats,
        )
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> (Array2<f64>, BatchNormCache) {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &self.running_mean) * &inv_std;
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbiased = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &(&stats.var * (m * unbiased));
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let BatchNormCache {
            xhat,
            inv_std,
            batch_stats,
        } = cache;
        self.gamma.grad += &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        if !batch_stats {
            return dxhat * inv_std;
        }
        let n = dy.nrows() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(0)) / n;
        let mean_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0)) / n;
        let mut dx = dxhat;
        dx -= &mean_dxhat;
        dx -= &(xhat * &mean_dxhat_xhat);
        dx *= inv_std;
        dx
    }
}

impl Parameterized for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
    }
}
