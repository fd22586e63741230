//! Generic solution networks: a scalars-to-scalars MLP and a grid-to-scalars
//! conv net, with flat parameter vectors so the whole network rides the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DiffValue, Tape};
use crate::error::{JpoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    S2S,
    G2S,
}

#[derive(Debug, Clone)]
pub struct NetSpec {
    pub kind: NetKind,
    /// S2S: raw scalar count before encoding. G2S: grid length.
    pub input_dim: usize,
    /// G2S input channels (ignored for S2S).
    pub input_channels: usize,
    /// Conv block output channels, one block = conv3 + tanh + pool2 (G2S only).
    pub conv_channels: Vec<usize>,
    /// Fully-connected hidden widths.
    pub hidden: Vec<usize>,
    /// Positional-encoding frequency count k (0 disables; S2S only).
    pub encode_freqs: usize,
    pub output_dim: usize,
}

impl NetSpec {
    pub fn s2s(raw_dim: usize, encode_freqs: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        NetSpec {
            kind: NetKind::S2S,
            input_dim: raw_dim,
            input_channels: 0,
            conv_channels: Vec::new(),
            hidden,
            encode_freqs,
            output_dim,
        }
    }

    pub fn g2s(
        grid_len: usize,
        channels: usize,
        conv_channels: Vec<usize>,
        hidden: Vec<usize>,
        output_dim: usize,
    ) -> Self {
        NetSpec {
            kind: NetKind::G2S,
            input_dim: grid_len,
            input_channels: channels,
            conv_channels,
            hidden,
            encode_freqs: 0,
            output_dim,
        }
    }

    /// Width of the vector actually fed to the first FC layer (S2S) or the
    /// flattened features after the conv stack (G2S).
    pub fn fc_input_dim(&self) -> usize {
        match self.kind {
            NetKind::S2S => {
                if self.encode_freqs > 0 {
                    2 * self.encode_freqs * self.input_dim
                } else {
                    self.input_dim
                }
            }
            NetKind::G2S => {
                let len = self.input_dim >> self.conv_channels.len();
                self.conv_channels.last().copied().unwrap_or(self.input_channels) * len
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.input_dim == 0 {
            return Err(JpoError::InvalidArg("zero-width net layer".into()));
        }
        if self.hidden.iter().chain(self.conv_channels.iter()).any(|&w| w == 0) {
            return Err(JpoError::InvalidArg("zero-width net layer".into()));
        }
        if self.kind == NetKind::G2S {
            let blocks = self.conv_channels.len();
            if self.input_dim % (1 << blocks) != 0 {
                return Err(JpoError::InvalidArg(format!(
                    "grid length {} not divisible by 2^{blocks}",
                    self.input_dim
                )));
            }
            if self.input_channels == 0 {
                return Err(JpoError::InvalidArg("g2s needs input channels".into()));
            }
        }
        Ok(())
    }
}

/// One weight tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter layout for a spec: (slots, total length, fan-in per slot).
pub fn layout(spec: &NetSpec) -> Result<(Vec<LayerSlot>, usize)> {
    spec.validate()?;
    let mut slots = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
        let len: usize = shape.iter().product();
        slots.push(LayerSlot { name, offset: *offset, shape });
        *offset += len;
    };
    if spec.kind == NetKind::G2S {
        let mut cin = spec.input_channels;
        for (i, &cout) in spec.conv_channels.iter().enumerate() {
            push(format!("conv{i}.w"), vec![cout, cin, 3], &mut offset);
            push(format!("conv{i}.b"), vec![cout], &mut offset);
            cin = cout;
        }
    }
    let mut din = spec.fc_input_dim();
    for (i, &w) in spec.hidden.iter().enumerate() {
        push(format!("fc{i}.w"), vec![din, w], &mut offset);
        push(format!("fc{i}.b"), vec![w], &mut offset);
        din = w;
    }
    push("out.w".into(), vec![din, spec.output_dim], &mut offset);
    push("out.b".into(), vec![spec.output_dim], &mut offset);
    Ok((slots, offset))
}

pub fn param_count(spec: &NetSpec) -> Result<usize> {
    layout(spec).map(|(_, n)| n)
}

#[derive(Debug, Clone)]
pub struct NetParams {
    pub theta: Vec<f64>,
    /// Frozen (mean, std) input statistics; set once from the first batch.
    pub norm: Option<(f64, f64)>,
}

/// Fan-in-scaled uniform init, seeded.
pub fn net_init(spec: &NetSpec, rng: &mut ChaCha8Rng) -> Result<NetParams> {
    let (slots, total) = layout(spec)?;
    let mut theta = vec![0.0; total];
    for slot in &slots {
        let fan_in: usize = if slot.name.ends_with(".b") {
            continue; // biases start at zero
        } else if slot.shape.len() == 3 {
            slot.shape[1] * slot.shape[2]
        } else {
            slot.shape[0]
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in theta[slot.offset..slot.offset + slot.len()].iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(NetParams { theta, norm: None })
}

/// Capture input statistics from a batch once; later calls are no-ops.
pub fn freeze_normalization(params: &mut NetParams, batch: &[f64]) {
    if params.norm.is_some() || batch.is_empty() {
        return;
    }
    let n = batch.len() as f64;
    let mean = batch.iter().sum::<f64>() / n;
    let var = batch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    params.norm = Some((mean, std));
}

/// Positional encoding: per raw scalar, sin and cos at k equidistant
/// frequencies spanning one decade upward from pi. Output length 2k*dim.
pub fn encode_frequencies(k: usize) -> Vec<f64> {
    let base = std::f64::consts::PI;
    if k == 1 {
        return vec![base];
    }
    (0..k)
        .map(|i| base + i as f64 * (10.0 * base - base) / (k - 1) as f64)
        .collect()
}

pub fn positional_encode(raw: &[f64], k: usize) -> Vec<f64> {
    let freqs = encode_frequencies(k);
    let mut out = Vec::with_capacity(2 * k * raw.len());
    for &x in raw {
        for &f in &freqs {
            out.push((f * x).sin());
            out.push((f * x).cos());
        }
    }
    out
}

/// Tape version of `positional_encode` over a batch [B, d] -> [B, 2k*d].
pub fn positional_encode_tape(tape: &mut Tape, raw: DiffValue, k: usize) -> Result<DiffValue> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 {
        return Err(JpoError::ShapeMismatch {
            op: "positional_encode",
            detail: format!("expected [B, d], got {shape:?}"),
        });
    }
    let (b, d) = (shape[0], shape[1]);
    let freqs = encode_frequencies(k);
    let mut parts = Vec::with_capacity(2 * k * d);
    for j in 0..d {
        let col = tape.column(raw, j)?; // [B]
        let col = tape.reshape(col, vec![b, 1])?;
        for &f in &freqs {
            let scaled = tape.scale(col, f);
            parts.push(tape.sin(scaled));
            parts.push(tape.cos(scaled));
        }
    }
    tape.concat(&parts, 1)
}

fn slot_value(
    tape: &mut Tape,
    theta: DiffValue,
    slot: &LayerSlot,
) -> Result<DiffValue> {
    let flat = tape.slice(theta, slot.offset, slot.len())?;
    tape.reshape(flat, slot.shape.clone())
}

/// Forward pass. S2S input: [B, raw_dim]. G2S input: [B, C, L]. Output [B, out].
pub fn net_forward(
    tape: &mut Tape,
    spec: &NetSpec,
    params: &NetParams,
    theta: DiffValue,
    input: DiffValue,
) -> Result<DiffValue> {
    let (slots, total) = layout(spec)?;
    if params.theta.len() != total {
        return Err(JpoError::ShapeMismatch {
            op: "net_forward",
            detail: format!("theta length {} vs layout {total}", params.theta.len()),
        });
    }
    let mut x = input;
    if let Some((mean, std)) = params.norm {
        let centered = tape.add_const(x, -mean);
        x = tape.scale(centered, 1.0 / std);
    }
    let mut si = 0;
    let batch = tape.shape(input)[0];
    match spec.kind {
        NetKind::S2S => {
            if spec.encode_freqs > 0 {
                x = positional_encode_tape(tape, x, spec.encode_freqs)?;
            }
        }
        NetKind::G2S => {
            for _ in 0..spec.conv_channels.len() {
                let w = slot_value(tape, theta, &slots[si])?;
                let b = slot_value(tape, theta, &slots[si + 1])?;
                si += 2;
                let conv = tape.conv1d(x, w)?;
                let biased = tape.bias_chan(conv, b)?;
                let act = tape.tanh(biased);
                x = tape.max_pool1d(act)?;
            }
            x = tape.reshape(x, vec![batch, spec.fc_input_dim()])?;
        }
    }
    for _ in 0..spec.hidden.len() {
        let w = slot_value(tape, theta, &slots[si])?;
        let b = slot_value(tape, theta, &slots[si + 1])?;
        si += 2;
        let lin = tape.matmul(x, w)?;
        let biased = tape.bias_row(lin, b)?;
        x = tape.tanh(biased);
    }
    let w = slot_value(tape, theta, &slots[si])?;
    let b = slot_value(tape, theta, &slots[si + 1])?;
    let lin = tape.matmul(x, w)?;
    tape.bias_row(lin, b)
}

/// The billiards solution net from the experiments: 4 raw scalars encoded to
/// 32, three hidden layers of 128, two outputs.
pub fn billiards_net_spec() -> NetSpec {
    NetSpec::s2s(4, 4, vec![128, 128, 128], 2)
}

/// Wave-packet net: 256-sample signal, five conv blocks of 16 channels,
/// FC 64 and 32, one output.
pub fn wavepacket_net_spec() -> NetSpec {
    NetSpec::g2s(256, 1, vec![16, 16, 16, 16, 16], vec![64, 32], 1)
}

/// KS net: stacked initial and final states as 2 channels of length 128,
/// conv widths 32, 32, 64, 64, FC 64 and 64, two outputs.
pub fn ks_net_spec() -> NetSpec {
    NetSpec::g2s(128, 2, vec![32, 32, 64, 64], vec![64, 64], 2)
}

/// Arm net: 2 target coordinates in, 4 solution components out.
pub fn arm_net_spec() -> NetSpec {
    NetSpec::s2s(2, 4, vec![64, 64], 4)
}
