//! SGD with historical-subspace amplification on the head parameters.
//!
//! With a historical projector `M` the head update is
//! `theta <- theta - eta * (g + M M^T g / kappa)`; without one (warmup, or the
//! historical term disabled) it is plain SGD. Backbone parameters always take
//! plain SGD steps.

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::axpy;
use crate::net::ModelParams;
use crate::trajectory::{build_projector, BufferGroup, GradientBuffer, Projector};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Renewal {
    /// Buffer not full yet.
    Pending,
    Renewed { rank: usize },
    /// Full buffer carried no energy; the previous projector stays.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct OptState {
    lr: f64,
    kappa: f64,
    tau: f64,
    historical: GradientBuffer,
    projector: Option<Projector>,
    renewals: usize,
}

impl OptState {
    pub fn new(lr: f64, kappa: f64, tau: f64, capacity: usize, head_dim: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
        }
        Ok(Self {
            lr,
            kappa,
            tau,
            historical: GradientBuffer::new(BufferGroup::Historical, capacity, head_dim)?,
            projector: None,
            renewals: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    pub fn buffer(&self) -> &GradientBuffer {
        &self.historical
    }

    pub fn renewals(&self) -> usize {
        self.renewals
    }

    /// Installs a projector directly, bypassing the buffer.
    pub fn set_projector(&mut self, projector: Option<Projector>) -> Result<()> {
        if let Some(p) = &projector {
            ensure_len("OptState::set_projector", self.historical.dim(), p.dim())?;
        }
        self.projector = projector;
        Ok(())
    }

    /// The update direction `g + M M^T g / kappa` (or `g` without a projector).
    pub fn direction(&self, g_tilde: &[f64]) -> Result<Vec<f64>> {
        ensure_len("OptState::direction", self.historical.dim(), g_tilde.len())?;
        let mut d = g_tilde.to_vec();
        if let Some(p) = &self.projector {
            axpy(1.0 / self.kappa, &p.project(g_tilde)?, &mut d);
        }
        Ok(d)
    }

    /// Updates the flat head parameters in place, then records `g_tilde` in the
    /// historical buffer. A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, head: &mut [f64], g_tilde: &[f64]) -> Result<()> {
        ensure_len("OptState::step", self.historical.dim(), head.len())?;
        ensure_finite("OptState::step gradient", g_tilde)?;
        let d = self.direction(g_tilde)?;
        axpy(-self.lr, &d, head);
        self.historical.push(g_tilde.to_vec())
    }

    /// Plain SGD on the backbone, [`OptState::step`] on the head.
    pub fn step_model(&mut self, params: &mut ModelParams, grad: &ModelParams) -> Result<()> {
        params.ensure_same_shape(grad)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("OptState::step_model gradient"));
        }
        for (layer, g) in params.backbone.iter_mut().zip(&grad.backbone) {
            axpy(-self.lr, g.weight.as_slice(), layer.weight.as_mut_slice());
            axpy(-self.lr, &g.bias, &mut layer.bias);
        }
        let mut head = params.head_flat();
        self.step(&mut head, &grad.head_flat())?;
        params.set_head_flat(&head)
    }

    /// Rebuilds the historical projector when the buffer is full, then clears it.
    pub fn maybe_renew(&mut self, iteration: usize) -> Result<Renewal> {
        if !self.historical.is_full() {
            return Ok(Renewal::Pending);
        }
        let outcome = match build_projector(&self.historical, self.tau, iteration) {
            Ok(p) => {
                let rank = p.rank;
                self.projector = Some(p);
                self.renewals += 1;
                Renewal::Renewed { rank }
            }
            Err(Error::Degenerate(_)) => Renewal::Degenerate,
            Err(e) => return Err(e),
        };
        self.historical.clear();
        Ok(outcome)
    }
}
