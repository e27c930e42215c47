use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FlowError, LatentGrid};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::nn::{repeat_rows_index, sinusoidal, tile_rows_index, Conv3x3, Linear, ParamId, ParamSet};
use crate::tensor::Matrix;
use crate::text::{TokenBag, Vocabulary};

pub const CHECKPOINT_KIND: &str = "velocity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityModelConfig {
    pub vocabulary: Vocabulary,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Channels of the prompt-driven per-cell layout map.
    pub layout_dim: usize,
    pub seed: u64,
}

impl VelocityModelConfig {
    pub fn new(vocabulary: Vec<String>, seed: u64) -> Self {
        Self {
            vocabulary: Vocabulary::from(vocabulary),
            latent_height: 8,
            latent_width: 8,
            latent_channels: 48,
            hidden: 64,
            cond_dim: 32,
            time_dim: 16,
            layout_dim: 16,
            seed,
        }
    }
}

/// Per-cell velocity network: input projection plus learned cell bias plus a
/// prompt/time context and a prompt-driven per-cell layout map, two residual
/// 3×3 convolutions that each add a context shift, a pooled global feature
/// between them, a context-driven channel scale, and an output projection
/// plus a linear skip from the input.
#[derive(Clone, Debug)]
pub struct VelocityModel {
    pub config: VelocityModelConfig,
    pub params: ParamSet,
    pub step: u64,
    bag: TokenBag,
    cond1: Linear,
    cond2: Linear,
    time1: Linear,
    time2: Linear,
    gate: Linear,
    film1: Linear,
    film2: Linear,
    global: Linear,
    layout: Linear,
    layout_in: Linear,
    input: Linear,
    cell_bias: ParamId,
    conv1: Conv3x3,
    conv2: Conv3x3,
    output: Linear,
    skip: Linear,
}

impl VelocityModel {
    pub fn new(config: VelocityModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        let c = &config;
        let h = c.hidden;
        let bag = TokenBag::new(&mut p, "cond.bag", c.vocabulary.len(), c.cond_dim, &mut rng);
        let cond1 = Linear::new(&mut p, "cond.fc1", c.cond_dim, h, 1.0, &mut rng);
        let cond2 = Linear::new(&mut p, "cond.fc2", h, h, 1.0, &mut rng);
        let time1 = Linear::new(&mut p, "time.fc1", c.time_dim, h, 1.0, &mut rng);
        let time2 = Linear::new(&mut p, "time.fc2", h, h, 1.0, &mut rng);
        let gate = Linear::new(&mut p, "gate", h, h, 0.5, &mut rng);
        let film1 = Linear::new(&mut p, "film1", h, h, 0.5, &mut rng);
        let film2 = Linear::new(&mut p, "film2", h, h, 0.5, &mut rng);
        let global = Linear::new(&mut p, "global", h, h, 0.5, &mut rng);
        let cells = c.latent_height * c.latent_width;
        let layout = Linear::new(&mut p, "layout", h, cells * c.layout_dim, 0.5, &mut rng);
        let layout_in = Linear::new(&mut p, "layout_in", c.layout_dim, h, 1.0, &mut rng);
        let input = Linear::new(&mut p, "input", c.latent_channels, h, 1.0, &mut rng);
        let cell_bias = p.add_normal("cell_bias", cells, h, 0.1, &mut rng);
        let conv1 = Conv3x3::new(&mut p, "conv1", h, h, 1.0, &mut rng);
        let conv2 = Conv3x3::new(&mut p, "conv2", h, h, 1.0, &mut rng);
        let output = Linear::new(&mut p, "output", h, c.latent_channels, 0.5, &mut rng);
        let skip = Linear::new(&mut p, "skip", c.latent_channels, c.latent_channels, 0.5, &mut rng);
        Self {
            config,
            params: p,
            step: 0,
            bag,
            cond1,
            cond2,
            time1,
            time2,
            gate,
            film1,
            film2,
            global,
            layout,
            layout_in,
            input,
            cell_bias,
            conv1,
            conv2,
            output,
            skip,
        }
    }

    pub fn cells(&self) -> usize {
        self.config.latent_height * self.config.latent_width
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u32>, FlowError> {
        Ok(self.config.vocabulary.tokenize(prompt)?)
    }

    /// `x` is `(n·cells) × channels`; one time and one token list per sample.
    pub fn forward(&self, tape: &mut Tape, x: Var, ts: &[f64], conds: &[Vec<u32>]) -> Var {
        let p = &self.params;
        let c = &self.config;
        let (n, cells, h) = (ts.len(), self.cells(), c.hidden);
        assert_eq!(conds.len(), n, "one condition per sample");

        let e = self.bag.forward(tape, p, conds);
        let e = self.cond1.forward(tape, p, e);
        let e = tape.silu(e);
        let e = self.cond2.forward(tape, p, e);
        let mut temb = Matrix::zeros(n, c.time_dim);
        for (i, &t) in ts.iter().enumerate() {
            temb.row_mut(i).copy_from_slice(&sinusoidal(t, c.time_dim));
        }
        let temb = tape.constant(temb);
        let te = self.time1.forward(tape, p, temb);
        let te = tape.silu(te);
        let te = self.time2.forward(tape, p, te);
        let ctx = tape.add(e, te);
        let ctx_rows = tape.gather(ctx, repeat_rows_index(n, cells, h), n * cells, h);
        let g = self.gate.forward(tape, p, ctx);
        let g = tape.tanh(g);
        let g_rows = tape.gather(g, repeat_rows_index(n, cells, h), n * cells, h);

        let bias = tape.param(p, self.cell_bias);
        let bias_rows = tape.gather(bias, tile_rows_index(n, cells, h), n * cells, h);
        let h0 = self.input.forward(tape, p, x);
        let h0 = tape.add(h0, bias_rows);
        let h0 = tape.add(h0, ctx_rows);
        // Prompt-specific spatial map: each cell gets its own conditioning vector.
        let lay = self.layout.forward(tape, p, ctx);
        let lay = tape.reshape(lay, n * cells, c.layout_dim);
        let lay = self.layout_in.forward(tape, p, lay);
        let h0 = tape.add(h0, lay);
        let h1 = tape.silu(h0);
        let (hl, wl) = (c.latent_height, c.latent_width);
        let shift1 = self.film1.forward(tape, p, ctx);
        let shift1 = tape.gather(shift1, repeat_rows_index(n, cells, h), n * cells, h);
        let shift2 = self.film2.forward(tape, p, ctx);
        let shift2 = tape.gather(shift2, repeat_rows_index(n, cells, h), n * cells, h);
        let r = self.conv1.forward(tape, p, h1, n, hl, wl);
        let r = tape.add(r, shift1);
        let r = tape.silu(r);
        let h2 = tape.add(h1, r);
        // Mean over cells, so distant regions can agree on the layout.
        let mut pool = Matrix::zeros(n, n * cells);
        for i in 0..n {
            pool.row_mut(i)[i * cells..(i + 1) * cells].fill(1.0 / cells as f64);
        }
        let pool = tape.constant(pool);
        let pooled = tape.matmul(pool, h2);
        let gl = self.global.forward(tape, p, pooled);
        let gl = tape.silu(gl);
        let gl = tape.gather(gl, repeat_rows_index(n, cells, h), n * cells, h);
        let h2 = tape.add(h2, gl);
        let r = self.conv2.forward(tape, p, h2, n, hl, wl);
        let r = tape.add(r, shift2);
        let r = tape.silu(r);
        let h3 = tape.add(h2, r);
        let scaled = tape.mul(h3, g_rows);
        let h4 = tape.add(h3, scaled);
        let out = self.output.forward(tape, p, h4);
        let direct = self.skip.forward(tape, p, x);
        tape.add(out, direct)
    }

    /// Batched velocity without gradient bookkeeping.
    pub fn velocity_rows(&self, x: &Matrix, ts: &[f64], conds: &[Vec<u32>]) -> Matrix {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, ts, conds);
        tape.value(out).clone()
    }

    pub fn velocity(&self, x: &LatentGrid, t: f64, cond: &[u32]) -> LatentGrid {
        let rows = Matrix::from_vec(x.cells(), x.channels, x.data.clone());
        let v = self.velocity_rows(&rows, &[t], &[cond.to_vec()]);
        LatentGrid::new(x.height, x.width, x.channels, v.data)
    }

    pub fn save(&self, path: &Path) -> Result<(), FlowError> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, self.step, &self.params).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let ck = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.config_as()?);
        ck.restore_into(&mut model.params)?;
        model.step = ck.step;
        Ok(model)
    }
}
