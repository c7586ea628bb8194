//! The three similarity-matrix channels fed to the CNN.
//!
//! Channel one compares raw word embeddings by dot product; channel two
//! compares BiGRU hidden states through a bilinear form; channel three does
//! the same over knowledge-enhanced representations encoded by a second
//! BiGRU. Padding positions participate like any other position (PAD
//! embeddings are zero, so their channel-one entries are h(0)).

use serde::{Deserialize, Serialize};

use crate::encoder::{bigru_encode, GruVars};
use crate::knowledge::enhance_rows;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Activation, TensorResult};

/// Which similarity channels a model consumes. Single-channel variants are
/// the ablation rows; `only M1` reduces the architecture to a plain word
/// similarity matrix CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSelection {
    #[default]
    Full,
    M1,
    M2,
    M3,
}

impl ChannelSelection {
    pub fn count(self) -> usize {
        match self {
            ChannelSelection::Full => 3,
            _ => 1,
        }
    }

    pub fn uses_m1(self) -> bool {
        matches!(self, ChannelSelection::Full | ChannelSelection::M1)
    }

    pub fn uses_m2(self) -> bool {
        matches!(self, ChannelSelection::Full | ChannelSelection::M2)
    }

    pub fn uses_m3(self) -> bool {
        matches!(self, ChannelSelection::Full | ChannelSelection::M3)
    }
}

impl std::fmt::Display for ChannelSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelSelection::Full => write!(f, "full"),
            ChannelSelection::M1 => write!(f, "only M1"),
            ChannelSelection::M2 => write!(f, "only M2"),
            ChannelSelection::M3 => write!(f, "only M3"),
        }
    }
}

/// `M[i, j] = h(e_x,i · e_y,j)` — plain dot products, no weights.
pub fn word_channel(
    tape: &mut Tape,
    ex: Var,
    ey: Var,
    activation: Activation,
) -> TensorResult<Var> {
    let ey_t = tape.transpose(ey)?;
    let dots = tape.matmul(ex, ey_t)?;
    tape.activation(dots, activation)
}

/// `M[i, j] = h(h_x,i ᵀ W h_y,j + b)` over `[I, 2m]` and `[J, 2m]` states.
pub fn bilinear_channel(
    tape: &mut Tape,
    hx: Var,
    hy: Var,
    w: Var,
    b: Var,
    activation: Activation,
) -> TensorResult<Var> {
    let hxw = tape.matmul(hx, w)?;
    let hy_t = tape.transpose(hy)?;
    let scores = tape.matmul(hxw, hy_t)?;
    let shifted = tape.broadcast_add_scalar(scores, b)?;
    tape.activation(shifted, activation)
}

/// Tape handles for everything the channels need beyond the pair itself.
#[derive(Debug, Clone, Copy)]
pub struct ChannelParamVars {
    pub gate_w: Var,
    pub gate_u: Var,
    pub gru2_fwd: GruVars,
    pub gru2_bwd: GruVars,
    pub gru3_fwd: GruVars,
    pub gru3_bwd: GruVars,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

/// Embedded pair plus its knowledge vectors.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub ex: Var,
    pub ey: Var,
    pub kx: Var,
    pub ky: Var,
}

/// Builds the selected similarity matrices in M1, M2, M3 order. Both texts
/// go through the same parameters; only the second BiGRU ever sees the
/// knowledge-enhanced representations.
pub fn build_channels(
    tape: &mut Tape,
    pair: &PairVars,
    params: &ChannelParamVars,
    activation: Activation,
    selection: ChannelSelection,
) -> TensorResult<Vec<Var>> {
    let mut channels = Vec::with_capacity(selection.count());
    if selection.uses_m1() {
        channels.push(word_channel(tape, pair.ex, pair.ey, activation)?);
    }
    if selection.uses_m2() {
        let hx = bigru_encode(tape, pair.ex, &params.gru2_fwd, &params.gru2_bwd)?;
        let hy = bigru_encode(tape, pair.ey, &params.gru2_fwd, &params.gru2_bwd)?;
        channels.push(bilinear_channel(
            tape, hx, hy, params.w2, params.b2, activation,
        )?);
    }
    if selection.uses_m3() {
        let ex_enh = enhance_rows(tape, pair.ex, pair.kx, params.gate_w, params.gate_u)?;
        let ey_enh = enhance_rows(tape, pair.ey, pair.ky, params.gate_w, params.gate_u)?;
        let khx = bigru_encode(tape, ex_enh, &params.gru3_fwd, &params.gru3_bwd)?;
        let khy = bigru_encode(tape, ey_enh, &params.gru3_fwd, &params.gru3_bwd)?;
        channels.push(bilinear_channel(
            tape, khx, khy, params.w3, params.b3, activation,
        )?);
    }
    Ok(channels)
}
