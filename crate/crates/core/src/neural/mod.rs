//! Permutation-invariant Q networks with optional factored per-vehicle heads.
//!
//! Every vehicle slot is concatenated with the ego features and pushed
//! through the same shared layers, so the weights seen by each slot are
//! literally the same parameters. What happens next depends on [`HeadMode`]:
//!
//! * `Monolithic`: the last shared pre-activations are summed over present
//!   slots, rectified, concatenated with the ego features and passed through
//!   the merged layers to a linear output.
//! * `FactoredMin`: a linear head on each slot's shared features gives
//!   `q_i(ego, vehicle_i, a)`; the network output is the per-action minimum
//!   over present slots, or a learned per-action constant when no vehicle is
//!   present.
//! * `FactoredPlusMerged`: as `Monolithic`, with the per-action minimum of
//!   the factored heads appended to the merged-layer input.

mod adam;
mod io;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{apply_update, AdamConfig, AdamState, UpdateStats};
pub use io::{read_parameters, write_parameters, CHECKPOINT_MAGIC};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss gradient at batch index {index}")]
    NonFiniteLoss { index: usize },
    #[error("non-finite gradient, update skipped")]
    NonFiniteGradient,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Monolithic,
    FactoredMin,
    FactoredPlusMerged,
}

impl HeadMode {
    pub fn is_factored(self) -> bool {
        !matches!(self, HeadMode::Monolithic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub ego_width: usize,
    pub vehicle_width: usize,
    pub max_vehicles: usize,
    pub shared: Vec<usize>,
    pub merged: Vec<usize>,
    pub head: HeadMode,
    pub n_actions: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidSpec(m.to_string()));
        if self.ego_width == 0 || self.vehicle_width == 0 {
            return bad("input widths must be >= 1");
        }
        if self.max_vehicles == 0 || self.n_actions == 0 {
            return bad("max_vehicles and n_actions must be >= 1");
        }
        if self.shared.is_empty() {
            return bad("at least one shared layer is required");
        }
        if self.shared.iter().chain(&self.merged).any(|w| *w == 0) {
            return bad("layer sizes must be >= 1");
        }
        Ok(())
    }
}

/// Flat parameter vector; [`Network`] knows the layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub values: Vec<f64>,
}

impl Parameters {
    pub fn zeros(n: usize) -> Self {
        Parameters { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Target-network sync: overwrite `self` with `src`.
    pub fn copy_from(&mut self, src: &Parameters) {
        self.values.clear();
        self.values.extend_from_slice(&src.values);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    offset: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn w<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.n_in, self.n_out), &p[self.offset..self.offset + self.n_in * self.n_out])
            .expect("layout")
    }

    fn b<'a>(&self, p: &'a [f64]) -> ndarray::ArrayView1<'a, f64> {
        let start = self.offset + self.n_in * self.n_out;
        ndarray::ArrayView1::from(&p[start..start + self.n_out])
    }

    fn forward(&self, p: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w(p));
        z += &self.b(p);
        z
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &ArrayView2<f64>, dz: &Array2<f64>, need_input: bool) -> Option<Array2<f64>> {
        let nw = self.n_in * self.n_out;
        {
            let mut gw = ArrayViewMut2::from_shape((self.n_in, self.n_out), &mut g[self.offset..self.offset + nw]).expect("layout");
            gw += &x.t().dot(dz);
        }
        let gb = &mut g[self.offset + nw..self.offset + nw + self.n_out];
        for row in dz.rows() {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        need_input.then(|| dz.dot(&self.w(p).t()))
    }
}

/// Network inputs for a batch of `B` states.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    /// `B x ego_width`.
    pub ego: Array2<f64>,
    /// `B x max_vehicles x vehicle_width`; absent slots zero-padded.
    pub vehicles: Array3<f64>,
    /// `B x max_vehicles`, 1.0 for present slots and 0.0 otherwise.
    pub mask: Array2<f64>,
}

impl NetInput {
    pub fn zeros(batch: usize, spec: &NetworkSpec) -> Self {
        NetInput {
            ego: Array2::zeros((batch, spec.ego_width)),
            vehicles: Array3::zeros((batch, spec.max_vehicles, spec.vehicle_width)),
            mask: Array2::zeros((batch, spec.max_vehicles)),
        }
    }

    pub fn batch(&self) -> usize {
        self.ego.nrows()
    }
}

struct Cache {
    x0: Array2<f64>,
    shared_z: Vec<Array2<f64>>,
    shared_h: Vec<Array2<f64>>,
    pooled_z: Option<Array2<f64>>,
    merged_x: Vec<Array2<f64>>,
    merged_z: Vec<Array2<f64>>,
    /// Argmin slot per `(b, a)` for the min merge; `None` when no vehicle.
    argmin: Vec<Option<usize>>,
    mask: Array2<f64>,
}

/// Output of [`Network::forward`].
pub struct Forward {
    /// `B x n_actions`.
    pub q: Array2<f64>,
    /// `(B * max_vehicles) x n_actions` factored values (factored modes).
    pub factored: Option<Array2<f64>>,
    cache: Cache,
}

impl Forward {
    /// Factored q of slot `j` in sample `b`.
    pub fn factored_row(&self, b: usize, j: usize, m: usize) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.factored.as_ref().map(|f| f.row(b * m + j))
    }

    pub fn argmin(&self, b: usize, a: usize) -> Option<usize> {
        let n_actions = self.q.ncols();
        self.cache.argmin.get(b * n_actions + a).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shared: Vec<Dense>,
    head: Option<Dense>,
    free: Option<usize>,
    merged: Vec<Dense>,
    output: Option<Dense>,
    n_params: usize,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

fn relu_grad(dz: &mut Array2<f64>, z: &Array2<f64>) {
    ndarray::Zip::from(dz).and(z).for_each(|d, &zv| {
        if zv <= 0.0 {
            *d = 0.0;
        }
    });
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, NeuralError> {
        spec.validate()?;
        let mut offset = 0;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense { offset, n_in, n_out };
            offset += d.len();
            d
        };
        let mut shared = Vec::new();
        let mut width = spec.ego_width + spec.vehicle_width;
        for &h in &spec.shared {
            shared.push(dense(width, h));
            width = h;
        }
        let feat = width;
        let head = spec.head.is_factored().then(|| dense(feat, spec.n_actions));
        let mut merged = Vec::new();
        let mut output = None;
        if spec.head != HeadMode::FactoredMin {
            let mut width = feat + spec.ego_width;
            if spec.head == HeadMode::FactoredPlusMerged {
                width += spec.n_actions;
            }
            for &h in &spec.merged {
                merged.push(dense(width, h));
                width = h;
            }
            output = Some(dense(width, spec.n_actions));
        }
        let free = if spec.head.is_factored() {
            let at = offset;
            offset += spec.n_actions;
            Some(at)
        } else {
            None
        };
        Ok(Network { spec, shared, head, free, merged, output, n_params: offset })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Parameters {
        let mut p = Parameters::zeros(self.n_params);
        let layers = self.shared.iter().chain(self.head.iter()).chain(&self.merged).chain(self.output.iter());
        for d in layers {
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for w in &mut p.values[d.offset..d.offset + d.n_in * d.n_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn check(&self, params: &Parameters, input: &NetInput) -> Result<(), NeuralError> {
        let s = &self.spec;
        if params.len() != self.n_params {
            return Err(NeuralError::Dimension(format!("{} parameters, network needs {}", params.len(), self.n_params)));
        }
        let b = input.batch();
        if input.ego.ncols() != s.ego_width
            || input.vehicles.dim() != (b, s.max_vehicles, s.vehicle_width)
            || input.mask.dim() != (b, s.max_vehicles)
        {
            return Err(NeuralError::Dimension(format!(
                "input ego {:?} vehicles {:?} mask {:?} does not match spec",
                input.ego.dim(),
                input.vehicles.dim(),
                input.mask.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &Parameters, input: &NetInput) -> Result<Forward, NeuralError> {
        self.check(params, input)?;
        let p = &params.values[..];
        let s = &self.spec;
        let (b, m, na) = (input.batch(), s.max_vehicles, s.n_actions);
        let width = s.ego_width + s.vehicle_width;

        let mut x0 = Array2::zeros((b * m, width));
        for bi in 0..b {
            for j in 0..m {
                let mut row = x0.row_mut(bi * m + j);
                row.slice_mut(s![..s.ego_width]).assign(&input.ego.row(bi));
                row.slice_mut(s![s.ego_width..]).assign(&input.vehicles.slice(s![bi, j, ..]));
            }
        }

        let mut shared_z = Vec::with_capacity(self.shared.len());
        let mut shared_h: Vec<Array2<f64>> = Vec::with_capacity(self.shared.len());
        for (l, d) in self.shared.iter().enumerate() {
            let z = if l == 0 { d.forward(p, &x0.view()) } else { d.forward(p, &shared_h[l - 1].view()) };
            shared_h.push(relu(&z));
            shared_z.push(z);
        }
        let z_last = shared_z.last().expect("validated");
        let h_last = shared_h.last().expect("validated");
        let feat = z_last.ncols();

        let mut argmin = Vec::new();
        let (factored, q_min) = match self.head {
            Some(head) => {
                let qf = head.forward(p, &h_last.view());
                let free = &p[self.free.expect("factored")..][..na];
                let mut q_min = Array2::zeros((b, na));
                argmin = vec![None; b * na];
                for bi in 0..b {
                    for a in 0..na {
                        let mut best: Option<usize> = None;
                        for j in 0..m {
                            if input.mask[[bi, j]] > 0.0 && best.is_none_or(|k| qf[[bi * m + j, a]] < qf[[bi * m + k, a]]) {
                                best = Some(j);
                            }
                        }
                        q_min[[bi, a]] = match best {
                            Some(j) => qf[[bi * m + j, a]],
                            None => free[a],
                        };
                        argmin[bi * na + a] = best;
                    }
                }
                (Some(qf), Some(q_min))
            }
            None => (None, None),
        };

        let mut merged_x = Vec::new();
        let mut merged_z = Vec::new();
        let mut pooled_z = None;
        let q = match self.output {
            None => q_min.clone().expect("factored-min has a head"),
            Some(out) => {
                // Canonical slot order keeps the sum reproducible.
                let mut pooled = Array2::zeros((b, feat));
                for bi in 0..b {
                    let mut acc = pooled.row_mut(bi);
                    for j in 0..m {
                        let w = input.mask[[bi, j]];
                        if w > 0.0 {
                            acc.scaled_add(w, &z_last.row(bi * m + j));
                        }
                    }
                }
                let extra = if self.spec.head == HeadMode::FactoredPlusMerged { na } else { 0 };
                let mut x = Array2::zeros((b, feat + s.ego_width + extra));
                x.slice_mut(s![.., ..feat]).assign(&relu(&pooled));
                x.slice_mut(s![.., feat..feat + s.ego_width]).assign(&input.ego);
                if let Some(qm) = &q_min {
                    if extra > 0 {
                        x.slice_mut(s![.., feat + s.ego_width..]).assign(qm);
                    }
                }
                pooled_z = Some(pooled);
                for d in &self.merged {
                    let z = d.forward(p, &x.view());
                    let h = relu(&z);
                    merged_x.push(x);
                    merged_z.push(z);
                    x = h;
                }
                let q = out.forward(p, &x.view());
                merged_x.push(x);
                q
            }
        };

        Ok(Forward {
            q,
            factored,
            cache: Cache { x0, shared_z, shared_h, pooled_z, merged_x, merged_z, argmin, mask: input.mask.clone() },
        })
    }

    /// Gradient of `sum(dq * q) + sum(dq_factored * q_factored)` with respect
    /// to the parameters, i.e. backpropagation of the given output
    /// gradients. The min merge passes each action's gradient to its argmin
    /// slot only (lowest slot on ties).
    pub fn backward(
        &self,
        params: &Parameters,
        fwd: &Forward,
        dq: &Array2<f64>,
        dq_factored: Option<&Array2<f64>>,
    ) -> Result<Vec<f64>, NeuralError> {
        let p = &params.values[..];
        let s = &self.spec;
        let (b, m, na) = (fwd.q.nrows(), s.max_vehicles, s.n_actions);
        if dq.dim() != (b, na) {
            return Err(NeuralError::Dimension(format!("dq {:?}, expected {:?}", dq.dim(), (b, na))));
        }
        for (bi, row) in dq.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFiniteLoss { index: bi });
            }
        }
        if let Some(df) = dq_factored {
            if df.dim() != (b * m, na) {
                return Err(NeuralError::Dimension(format!("factored gradient {:?}, expected {:?}", df.dim(), (b * m, na))));
            }
            for (r, row) in df.rows().into_iter().enumerate() {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(NeuralError::NonFiniteLoss { index: r / m });
                }
            }
        }
        let c = &fwd.cache;
        let mut g = vec![0.0; self.n_params];
        let feat = c.shared_z.last().expect("validated").ncols();

        // Gradient flowing into the min-merged values, if any.
        let mut d_qmin: Option<Array2<f64>> = None;
        let mut dz_last = Array2::<f64>::zeros((b * m, feat));

        if let Some(out) = self.output {
            let mut dx = out.backward(p, &mut g, &c.merged_x[self.merged.len()].view(), dq, true).expect("input grad");
            for (l, d) in self.merged.iter().enumerate().rev() {
                relu_grad(&mut dx, &c.merged_z[l]);
                dx = d.backward(p, &mut g, &c.merged_x[l].view(), &dx, true).expect("input grad");
            }
            let pooled = c.pooled_z.as_ref().expect("merged path pools");
            let mut d_pooled = dx.slice(s![.., ..feat]).to_owned();
            relu_grad(&mut d_pooled, pooled);
            for bi in 0..b {
                for j in 0..m {
                    let w = c.mask[[bi, j]];
                    if w > 0.0 {
                        dz_last.row_mut(bi * m + j).scaled_add(w, &d_pooled.row(bi));
                    }
                }
            }
            if self.spec.head == HeadMode::FactoredPlusMerged {
                d_qmin = Some(dx.slice(s![.., feat + s.ego_width..]).to_owned());
            }
        } else {
            d_qmin = Some(dq.clone());
        }

        if let Some(head) = self.head {
            let mut dqf = Array2::<f64>::zeros((b * m, na));
            if let Some(df) = dq_factored {
                for r in 0..b * m {
                    if c.mask[[r / m, r % m]] > 0.0 {
                        dqf.row_mut(r).assign(&df.row(r));
                    }
                }
            }
            let free = self.free.expect("factored");
            if let Some(dmin) = &d_qmin {
                for bi in 0..b {
                    for a in 0..na {
                        match c.argmin[bi * na + a] {
                            Some(j) => dqf[[bi * m + j, a]] += dmin[[bi, a]],
                            None => g[free + a] += dmin[[bi, a]],
                        }
                    }
                }
            }
            let h_last = c.shared_h.last().expect("validated");
            let mut dh = head.backward(p, &mut g, &h_last.view(), &dqf, true).expect("input grad");
            relu_grad(&mut dh, c.shared_z.last().expect("validated"));
            dz_last += &dh;
        }

        let mut dz = dz_last;
        for l in (0..self.shared.len()).rev() {
            let x = if l == 0 { c.x0.view() } else { c.shared_h[l - 1].view() };
            let dx = self.shared[l].backward(p, &mut g, &x, &dz, l > 0);
            if let Some(mut dx) = dx {
                relu_grad(&mut dx, &c.shared_z[l - 1]);
                dz = dx;
            }
        }
        Ok(g)
    }

    /// Single-state convenience wrapper around [`Network::forward`].
    pub fn q_values(&self, params: &Parameters, ego: &[f64], vehicles: &[Vec<f64>], mask: &[bool]) -> Result<Array1<f64>, NeuralError> {
        let input = self.single_input(ego, vehicles, mask)?;
        Ok(self.forward(params, &input)?.q.row(0).to_owned())
    }

    pub fn single_input(&self, ego: &[f64], vehicles: &[Vec<f64>], mask: &[bool]) -> Result<NetInput, NeuralError> {
        let s = &self.spec;
        if ego.len() != s.ego_width || vehicles.len() > s.max_vehicles || mask.len() != vehicles.len() {
            return Err(NeuralError::Dimension("single input does not match spec".into()));
        }
        let mut input = NetInput::zeros(1, s);
        input.ego.row_mut(0).assign(&ndarray::ArrayView1::from(ego));
        for (j, (v, present)) in vehicles.iter().zip(mask).enumerate() {
            if v.len() != s.vehicle_width {
                return Err(NeuralError::Dimension(format!("vehicle slot {j} width {}", v.len())));
            }
            if *present {
                input.vehicles.slice_mut(s![0, j, ..]).assign(&ndarray::ArrayView1::from(&v[..]));
                input.mask[[0, j]] = 1.0;
            }
        }
        Ok(input)
    }
}

/// Squared norm helper shared by the optimizer and tests.
pub(crate) fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests;
