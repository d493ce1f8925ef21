use crate::{Error, ParamSet, Result, Scalar};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        AdamState {
            lr,
            weight_decay,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds a state from stored moments (checkpoint resume).
    pub fn restore(mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::contract("adam moments have inconsistent shapes"));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(self)
    }

    /// Applies one update to every trainable tensor and zeroes its gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::contract(format!(
                "adam state tracks {} tensors but the set has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (id, name, t) in params.iter() {
            if t.is_trainable() && t.grad().is_none() {
                return Err(Error::contract(format!("parameter {name} has no gradient")));
            }
            if self.first[id.index()].len() != t.len() {
                return Err(Error::contract(format!("adam moment shape mismatch for {name}")));
            }
        }
        self.step += 1;
        let t_step = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t_step);
        let bc2 = T::one() - self.beta2.powi(t_step);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let tensor = params.get_mut(id);
            if !tensor.is_trainable() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    state.step(params)
}
