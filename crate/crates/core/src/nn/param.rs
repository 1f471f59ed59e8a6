use ndarray::Array2;

/// A trainable tensor together with its accumulated gradient.
///
/// Vectors (biases, norm scales) are stored as `1 x n` rows so every
/// parameter shares one representation in checkpoints and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

/// Anything that owns named parameters.
pub trait Parameterized {
    /// Visit every parameter with its fully qualified name. Visiting order
    /// is stable and defines the checkpoint and optimizer layout.
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>);

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
