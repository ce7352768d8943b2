//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use super::kernels::all_finite;
use super::tape::{Gradients, ParamId};
use super::NumericError;

/// Flat registry of named parameters. Ids are dense and stable, so models
/// hold `ParamId`s and the store owns the actual weights.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f32>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param `{name}`: shape {shape:?} vs {} values",
            data.len()
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let pid = self.names.len();
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.data.push(data);
        self.index.insert(name.to_string(), pid);
        pid
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.names[pid]
    }

    pub fn shape(&self, pid: ParamId) -> &[usize] {
        &self.shapes[pid]
    }

    pub fn data(&self, pid: ParamId) -> &[f32] {
        &self.data[pid]
    }

    pub fn data_mut(&mut self, pid: ParamId) -> &mut [f32] {
        &mut self.data[pid]
    }

    pub fn set_data(&mut self, pid: ParamId, data: Vec<f32>) {
        assert_eq!(self.data[pid].len(), data.len(), "param `{}`", self.names[pid]);
        self.data[pid] = data;
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.names.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }
}

/// Adam with bias correction. Moment math runs in f64; moments are stored
/// as f32 so they round-trip through checkpoints unchanged.
pub struct AdamState {
    lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f32) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.ids().map(|p| vec![0.0; params.data(p).len()]).collect(),
            v: params.ids().map(|p| vec![0.0; params.data(p).len()]).collect(),
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub(super) fn moments(&self, pid: ParamId) -> (&[f32], &[f32]) {
        (&self.m[pid], &self.v[pid])
    }

    pub(super) fn restore(&mut self, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }

    /// One update over every parameter in the store. Parameters without a
    /// gradient are treated as zero-gradient (moments decay, weights hold).
    /// Any non-finite gradient rejects the whole step before mutation.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
    ) -> Result<(), NumericError> {
        assert_eq!(self.m.len(), params.len(), "optimizer/store size mismatch");
        for pid in params.ids() {
            if let Some(g) = grads.for_param(pid) {
                if !all_finite(g) {
                    return Err(NumericError::NonFiniteGradient(params.name(pid).to_string()));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for pid in params.ids() {
            let g = grads.for_param(pid);
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            let w = params.data_mut(pid);
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| g[i]) as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr as f64 * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                w[i] = (w[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
