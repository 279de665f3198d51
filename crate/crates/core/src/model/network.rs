use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{lstm_names, Model, ModelConfig, ModelError, Result};
use crate::tensor::{BatchNormMode, Graph, ParamStore, Real, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; encoder dropout active.
    Train,
    /// Running statistics; encoder dropout off.
    Eval,
}

impl Mode {
    fn bn(self) -> BatchNormMode {
        match self {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    PeriodDetected,
    MaxSteps,
    TargetLength,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::PeriodDetected => "period-detected",
            StopReason::MaxSteps => "max-steps",
            StopReason::TargetLength => "target-length",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// Every parameter of a model bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    pub conv: Vec<Var>,
    pub conv_gamma: Vec<Var>,
    pub conv_beta: Vec<Var>,
    pub encoder_lstm: Vec<[LstmVars; 2]>,
    pub attention_lstm: LstmVars,
    pub memory: Var,
    pub query: Var,
    pub location_conv: Var,
    pub location_fc: Var,
    pub energy: Var,
    pub prenet: Vec<(Var, Var)>,
    pub decoder_lstm: LstmVars,
    pub proj_w: Var,
    pub proj_b: Var,
    pub post_conv: Vec<Var>,
    pub post_gamma: Vec<Var>,
    pub post_beta: Vec<Var>,
    pub post_bias: Var,
}

impl Bound {
    pub fn bind(g: &mut Graph, cfg: &ModelConfig, ps: &ParamStore) -> Result<Self> {
        let mut p = |name: &str| -> Result<Var> { Ok(g.param(ps, ps.id(name)?)) };
        let lstm = |prefix: &str,
                    hidden: usize,
                    p: &mut dyn FnMut(&str) -> Result<Var>|
         -> Result<LstmVars> {
            let [wi, wh, b] = lstm_names(prefix);
            Ok(LstmVars {
                w_ih: p(&wi)?,
                w_hh: p(&wh)?,
                bias: p(&b)?,
                hidden,
            })
        };
        let nb = cfg.conv_blocks.len();
        let mut conv = Vec::with_capacity(nb);
        let mut conv_gamma = Vec::with_capacity(nb);
        let mut conv_beta = Vec::with_capacity(nb);
        for i in 0..nb {
            conv.push(p(&format!("encoder.conv{i}.weight"))?);
            conv_gamma.push(p(&format!("encoder.bn{i}.gamma"))?);
            conv_beta.push(p(&format!("encoder.bn{i}.beta"))?);
        }
        let mut encoder_lstm = Vec::new();
        for l in 0..cfg.encoder_lstm_layers {
            let f = lstm(
                &format!("encoder.lstm{l}.fwd"),
                cfg.encoder_lstm_size,
                &mut p,
            )?;
            let b = lstm(
                &format!("encoder.lstm{l}.bwd"),
                cfg.encoder_lstm_size,
                &mut p,
            )?;
            encoder_lstm.push([f, b]);
        }
        let attention_lstm = lstm("attention.lstm", cfg.attention_lstm_size, &mut p)?;
        let memory = p("attention.memory")?;
        let query = p("attention.query")?;
        let location_conv = p("attention.location_conv")?;
        let location_fc = p("attention.location_fc")?;
        let energy = p("attention.energy")?;
        let mut prenet = Vec::new();
        for i in 0..cfg.prenet_sizes.len() {
            prenet.push((
                p(&format!("prenet.fc{i}.weight"))?,
                p(&format!("prenet.fc{i}.bias"))?,
            ));
        }
        let decoder_lstm = lstm("decoder.lstm", cfg.decoder_lstm_size, &mut p)?;
        let proj_w = p("decoder.proj.weight")?;
        let proj_b = p("decoder.proj.bias")?;
        let last = cfg.postnet_layers - 1;
        let mut post_conv = Vec::new();
        let mut post_gamma = Vec::new();
        let mut post_beta = Vec::new();
        for i in 0..cfg.postnet_layers {
            post_conv.push(p(&format!("postnet.conv{i}.weight"))?);
            if i < last {
                post_gamma.push(p(&format!("postnet.bn{i}.gamma"))?);
                post_beta.push(p(&format!("postnet.bn{i}.beta"))?);
            }
        }
        let post_bias = p(&format!("postnet.conv{last}.bias"))?;
        Ok(Self {
            conv,
            conv_gamma,
            conv_beta,
            encoder_lstm,
            attention_lstm,
            memory,
            query,
            location_conv,
            location_fc,
            energy,
            prenet,
            decoder_lstm,
            proj_w,
            proj_b,
            post_conv,
            post_gamma,
            post_beta,
            post_bias,
        })
    }
}

fn zeros_row(g: &mut Graph, n: usize) -> Var {
    g.constant(Tensor::zeros(&[1, n]))
}

/// Runs an LSTM over the rows of `x` (`T × D`), returning `T × H` in
/// input order.
fn lstm_sequence(g: &mut Graph, x: Var, l: &LstmVars, reverse: bool) -> Result<Var> {
    let t_len = g.shape(x)[0];
    let xp = g.matmul(x, l.w_ih)?;
    let mut h = zeros_row(g, l.hidden);
    let mut c = zeros_row(g, l.hidden);
    let mut outs = vec![h; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let xt = g.slice_rows(xp, t, 1)?;
        (h, c) = g.lstm_cell_projected(xt, h, c, l.w_hh, l.bias)?;
        outs[t] = h;
    }
    Ok(g.concat_rows(&outs)?)
}

/// Visual encoder. `frames` is `C × T × H × W` with values in `[0, 1]`;
/// returns the `T × 2H_enc` memory the decoder attends over. `stats` holds
/// one entry per conv block.
pub fn encode<R: Rng>(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    stats: &mut [RunningStats],
    frames: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let s = frames.shape();
    if s.len() != 4
        || s[0] != cfg.input_channels
        || s[2] != cfg.frame_size
        || s[3] != cfg.frame_size
        || s[1] == 0
    {
        return Err(ModelError::Input {
            got: s.to_vec(),
            expected: format!(
                "[{}, T ≥ 1, {}, {}]",
                cfg.input_channels, cfg.frame_size, cfg.frame_size
            ),
        });
    }
    let t_len = s[1];
    let mut x = g.constant(frames.clone());
    for (i, b) in cfg.conv_blocks.iter().enumerate() {
        x = g.conv3d(x, p.conv[i], None, &cfg.conv_spec(i))?;
        x = g.batchnorm(x, p.conv_gamma[i], p.conv_beta[i], mode.bn(), &mut stats[i])?;
        x = g.relu(x);
        x = g.maxpool3d(x, b.pool_window, b.pool_stride)?;
        if mode == Mode::Train {
            x = g.dropout(x, cfg.encoder_dropout as Real, rng)?;
        }
    }
    // [C, T, H, W] → [T, C·H·W], channel-major within each timestep
    let x = g.permute(x, &[1, 0, 2, 3])?;
    let feat = g.value(x).len() / t_len;
    let mut h = g.reshape(x, &[t_len, feat])?;
    for layer in &p.encoder_lstm {
        let f = lstm_sequence(g, h, &layer[0], false)?;
        let b = lstm_sequence(g, h, &layer[1], true)?;
        h = g.concat_cols(&[f, b])?;
    }
    Ok(h)
}

/// Decoder-side attention state between steps.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    /// Previous weights, `1 × n`.
    pub a_prev: Var,
    /// Sum of all weights emitted so far, `1 × n`.
    pub a_cum: Var,
    /// Previous context vector, `1 × d_enc`.
    pub context: Var,
    pub h: Var,
    pub c: Var,
}

impl AttentionState {
    /// Weights start as a one-hot on the first encoder position, so the
    /// initial context is the first memory row; the cumulative sum starts
    /// at zero.
    pub fn initial(g: &mut Graph, cfg: &ModelConfig, memory: Var) -> Result<Self> {
        let n = g.shape(memory)[0];
        let mut onehot = vec![0.0; n];
        onehot[0] = 1.0;
        let a_prev = g.constant(Tensor::new(&[1, n], onehot)?);
        let a_cum = zeros_row(g, n);
        let context = g.slice_rows(memory, 0, 1)?;
        let h = zeros_row(g, cfg.attention_lstm_size);
        let c = zeros_row(g, cfg.attention_lstm_size);
        Ok(Self {
            a_prev,
            a_cum,
            context,
            h,
            c,
        })
    }
}

/// One location-sensitive attention step. `keys` is the precomputed
/// memory projection (`n × A`). Returns `(context, query_state, weights,
/// next_state)`.
pub fn attention_step(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    memory: Var,
    keys: Var,
    state: &AttentionState,
    prenet_out: Var,
) -> Result<(Var, Var, Var, AttentionState)> {
    let l = &p.attention_lstm;
    let inp = g.concat_cols(&[state.context, prenet_out])?;
    let (x, c) = g.lstm_cell(inp, state.h, state.c, l.w_ih, l.w_hh, l.bias)?;
    let stacked = g.concat_rows(&[state.a_prev, state.a_cum])?;
    let feats = g.conv1d(stacked, p.location_conv, None, &cfg.location_spec())?;
    let feats = g.transpose(feats)?;
    let loc = g.matmul(feats, p.location_fc)?;
    let q = g.matmul(x, p.query)?;
    let pre = g.add(keys, loc)?;
    let pre = g.add_row(pre, q)?;
    let act = g.tanh(pre);
    let e = g.matmul(act, p.energy)?;
    let n = g.shape(e)[0];
    let e = g.reshape(e, &[1, n])?;
    let a = g.softmax(e);
    let v = g.matmul(a, memory)?;
    let a_cum = g.add(state.a_cum, a)?;
    Ok((
        v,
        x,
        a,
        AttentionState {
            a_prev: a,
            a_cum,
            context: v,
            h: x,
            c,
        },
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
}

impl DecoderState {
    pub fn initial(g: &mut Graph, cfg: &ModelConfig) -> Self {
        Self {
            h: zeros_row(g, cfg.decoder_lstm_size),
            c: zeros_row(g, cfg.decoder_lstm_size),
        }
    }
}

/// Bottleneck applied to the previous frame (`1 × mel`).
pub fn prenet<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    prev: Var,
    dropout: Real,
    rng: &mut R,
) -> Result<Var> {
    let mut x = prev;
    for &(w, b) in &p.prenet {
        x = g.matmul(x, w)?;
        x = g.add_row(x, b)?;
        x = g.relu(x);
        x = g.dropout(x, dropout, rng)?;
    }
    Ok(x)
}

/// Decoder LSTM over `[context | query_state]` and projection to one mel
/// frame.
pub fn decode_step(
    g: &mut Graph,
    p: &Bound,
    v: Var,
    x: Var,
    state: &DecoderState,
) -> Result<(Var, DecoderState)> {
    let l = &p.decoder_lstm;
    let inp = g.concat_cols(&[v, x])?;
    let (h, c) = g.lstm_cell(inp, state.h, state.c, l.w_ih, l.w_hh, l.bias)?;
    let y = g.matmul(h, p.proj_w)?;
    let frame = g.add_row(y, p.proj_b)?;
    Ok((frame, DecoderState { h, c }))
}

/// Residual convolutional refinement of `m × mel` frames. `stats` holds
/// one entry per normalized postnet layer.
pub fn postnet(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    stats: &mut [RunningStats],
    o_dec: Var,
    mode: Mode,
) -> Result<Var> {
    let last = cfg.postnet_layers - 1;
    let mut y = g.transpose(o_dec)?;
    for i in 0..cfg.postnet_layers {
        let bias = (i == last).then_some(p.post_bias);
        y = g.conv1d(y, p.post_conv[i], bias, &cfg.postnet_spec(i))?;
        if i < last {
            y = g.batchnorm(y, p.post_gamma[i], p.post_beta[i], mode.bn(), &mut stats[i])?;
            y = g.tanh(y);
        }
    }
    let r = g.transpose(y)?;
    Ok(g.add(o_dec, r)?)
}

/// Sum of the two mean squared errors of the pre- and post-refinement
/// frames against the target.
pub fn loss(g: &mut Graph, o_dec: Var, o_post: Var, target: Var) -> Result<Var> {
    let a = g.mse(o_dec, target)?;
    let b = g.mse(o_post, target)?;
    Ok(g.add(a, b)?)
}

/// Graph handles produced by a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub o_dec: Var,
    pub o_post: Var,
    /// One `1 × n` weight row per decoder step.
    pub alignments: Vec<Var>,
    /// Final cumulative attention, `1 × n`.
    pub a_cum: Var,
    /// Steps whose prenet input was the model's own previous frame.
    pub sampled_steps: Vec<usize>,
}

fn check_target(cfg: &ModelConfig, target: &Tensor) -> Result<usize> {
    match target.shape() {
        [m, c] if *m >= 1 && *c == cfg.mel_channels => Ok(*m),
        s => Err(ModelError::Input {
            got: s.to_vec(),
            expected: format!("[m ≥ 1, {}]", cfg.mel_channels),
        }),
    }
}

/// Decodes exactly `m = target.rows` frames. Step `t` feeds the prenet the
/// target frame `t − 1` (zeros at `t = 0`); from step 1 on, with
/// probability `1 − tf_ratio` it feeds the model's own previous frame
/// instead, detached from the graph.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced<R: Rng>(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    stats: &mut [RunningStats],
    frames: &Tensor,
    target: &Tensor,
    tf_ratio: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<TeacherForced> {
    let m = check_target(cfg, target)?;
    let nb = cfg.conv_blocks.len();
    let (enc_stats, post_stats) = stats.split_at_mut(nb);
    let memory = encode(g, cfg, p, enc_stats, frames, mode, rng)?;
    let keys = g.matmul(memory, p.memory)?;
    let tgt = g.constant(target.clone());
    let mut att = AttentionState::initial(g, cfg, memory)?;
    let mut dec = DecoderState::initial(g, cfg);
    let mut outs = Vec::with_capacity(m);
    let mut alignments = Vec::with_capacity(m);
    let mut sampled_steps = Vec::new();
    let drop = cfg.prenet_dropout as Real;
    for t in 0..m {
        let prev = if t == 0 {
            zeros_row(g, cfg.mel_channels)
        } else if rng.random::<f64>() >= tf_ratio {
            sampled_steps.push(t);
            g.detach(outs[t - 1])
        } else {
            g.slice_rows(tgt, t - 1, 1)?
        };
        let pre = prenet(g, p, prev, drop, rng)?;
        let (v, x, a, next) = attention_step(g, cfg, p, memory, keys, &att, pre)?;
        att = next;
        let (frame, next_dec) = decode_step(g, p, v, x, &dec)?;
        dec = next_dec;
        outs.push(frame);
        alignments.push(a);
    }
    let o_dec = g.concat_rows(&outs)?;
    let o_post = postnet(g, cfg, p, post_stats, o_dec, mode)?;
    Ok(TeacherForced {
        o_dec,
        o_post,
        alignments,
        a_cum: att.a_cum,
        sampled_steps,
    })
}

/// Frames and alignments as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub o_dec: Tensor,
    pub o_post: Tensor,
    /// `m × n`.
    pub alignments: Tensor,
    pub stop_reason: StopReason,
}

impl DecoderOutput {
    pub fn frames(&self) -> usize {
        self.o_dec.shape()[0]
    }

    /// Encoder position with the largest weight at each decoder step.
    pub fn alignment_path(&self) -> Vec<usize> {
        let n = self.alignments.shape()[1];
        self.alignments
            .data()
            .chunks(n)
            .map(|row| (0..n).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
            .collect()
    }
}

impl TeacherForced {
    pub fn to_output(&self, g: &Graph) -> Result<DecoderOutput> {
        let rows: Vec<Vec<Real>> = self
            .alignments
            .iter()
            .map(|&a| g.value(a).data().to_vec())
            .collect();
        Ok(DecoderOutput {
            o_dec: g.value(self.o_dec).clone(),
            o_post: g.value(self.o_post).clone(),
            alignments: Tensor::from_rows(&rows)?,
            stop_reason: StopReason::TargetLength,
        })
    }
}

/// Free-running decode in eval mode. Stops once the weight on the final
/// encoder position (the appended visual period) exceeds
/// `stop_threshold` for `stop_patience` consecutive steps, or after
/// `max_decoder_steps`.
pub fn infer<R: Rng>(model: &Model, frames: &Tensor, rng: &mut R) -> Result<DecoderOutput> {
    let cfg = &model.config;
    let mut stats = model.stats.clone();
    let nb = cfg.conv_blocks.len();
    let (enc_stats, post_stats) = stats.split_at_mut(nb);
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, cfg, &model.params)?;
    let memory = encode(&mut g, cfg, &p, enc_stats, frames, Mode::Eval, rng)?;
    let keys = g.matmul(memory, p.memory)?;
    let n = g.shape(memory)[0];
    let drop = if cfg.prenet_dropout_at_inference {
        cfg.prenet_dropout as Real
    } else {
        0.0
    };

    let init = AttentionState::initial(&mut g, cfg, memory)?;
    let dec0 = DecoderState::initial(&mut g, cfg);
    let grab = |g: &Graph, v: Var| g.value(v).clone();
    let mut att_vals = [init.a_prev, init.a_cum, init.context, init.h, init.c].map(|v| grab(&g, v));
    let mut dec_vals = [dec0.h, dec0.c].map(|v| grab(&g, v));
    let mut prev = Tensor::zeros(&[1, cfg.mel_channels]);
    let mut frames_out: Vec<Vec<Real>> = Vec::new();
    let mut rows: Vec<Vec<Real>> = Vec::new();
    let mut run = 0;
    let mut stop_reason = StopReason::MaxSteps;
    let base = g.mark();
    for _ in 0..cfg.max_decoder_steps {
        let [a_prev, a_cum, context, h, c] = att_vals.clone().map(|t| g.constant(t));
        let [dh, dc] = dec_vals.clone().map(|t| g.constant(t));
        let prev_v = g.constant(prev.clone());
        let pre = prenet(&mut g, &p, prev_v, drop, rng)?;
        let state = AttentionState {
            a_prev,
            a_cum,
            context,
            h,
            c,
        };
        let (v, x, a, next) = attention_step(&mut g, cfg, &p, memory, keys, &state, pre)?;
        let (frame, dnext) = decode_step(&mut g, &p, v, x, &DecoderState { h: dh, c: dc })?;
        att_vals = [next.a_prev, next.a_cum, next.context, next.h, next.c].map(|v| grab(&g, v));
        dec_vals = [dnext.h, dnext.c].map(|v| grab(&g, v));
        prev = grab(&g, frame);
        let weights = grab(&g, a);
        g.rollback(base);

        frames_out.push(prev.data().to_vec());
        let last_weight = weights.data()[n - 1];
        rows.push(weights.into_data());
        run = if last_weight > cfg.stop_threshold as Real {
            run + 1
        } else {
            0
        };
        if run >= cfg.stop_patience {
            stop_reason = StopReason::PeriodDetected;
            break;
        }
    }
    let o_dec_t = Tensor::from_rows(&frames_out)?;
    let o_dec = g.constant(o_dec_t.clone());
    let o_post = postnet(&mut g, cfg, &p, post_stats, o_dec, Mode::Eval)?;
    Ok(DecoderOutput {
        o_dec: o_dec_t,
        o_post: g.value(o_post).clone(),
        alignments: Tensor::from_rows(&rows)?,
        stop_reason,
    })
}
