//! Unimodal embedders and the masked intra/inter-modality encoder.

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Scalar};
use crate::seqlayout::{ModalityId, SequenceLayout};

/// Parameter handles of the embedding stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedderParams {
    pub ts_proj: ParamId,
    pub ts_bias: ParamId,
    pub ts_pos: ParamId,
    pub img_proj: ParamId,
    pub img_bias: ParamId,
    pub img_pos: ParamId,
    pub note_proj: ParamId,
    pub note_bias: ParamId,
    pub note_pos: ParamId,
    /// One row per combination, canonical order.
    pub comb_tokens: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Encoder outputs for one sample.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub z_task: Var,
    /// Combination rows in layout order; `None` if the layout has none.
    pub z_comb: Option<Var>,
    /// Per-modality output spans, indexed by [`ModalityId::index`].
    pub modality_outputs: [Option<Var>; 3],
    pub hidden: Var,
}

fn project_with_positions<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: ArrayView2<T>,
    proj: ParamId,
    bias: ParamId,
    pos: ParamId,
    what: &str,
) -> Result<Var> {
    let (n, width) = x.dim();
    let pw = tape.param(proj);
    let (in_w, _) = tape.shape(pw);
    if width != in_w {
        return Err(Error::Shape(format!("{what} width {width}, projection expects {in_w}")));
    }
    if n == 0 {
        return Err(Error::Empty("modality tokens"));
    }
    let pp = tape.param(pos);
    let max = tape.shape(pp).0;
    if n > max {
        return Err(Error::OutOfRange(format!("{what} has {n} tokens, positional table holds {max}")));
    }
    let xv = tape.constant_view(x);
    let b = tape.param(bias);
    let h = tape.linear(xv, pw, b)?;
    let p = tape.slice_rows(pp, 0, n)?;
    tape.add(h, p)
}

/// One token per time step: `x_s W + b + p_s`.
pub fn embed_timeseries<T: Scalar>(tape: &mut Tape<'_, T>, x: ArrayView2<T>, p: &EmbedderParams) -> Result<Var> {
    project_with_positions(tape, x, p.ts_proj, p.ts_bias, p.ts_pos, "time series")
}

/// Split an `H x W x C` image into non-overlapping `P x P` patches in raster
/// order; each patch is flattened row-major over `(row, col, channel)`.
pub fn patchify<T: Scalar>(img: ArrayView3<T>, patch: usize) -> Result<Array2<T>> {
    let (h, w, c) = img.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} is not divisible into {patch}x{patch} patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let mut out = Array2::<T>::zeros((ph * pw, width));
    for py in 0..ph {
        for px in 0..pw {
            let row = py * pw + px;
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        out[[row, k]] = img[[py * patch + y, px * patch + x, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn embed_image<T: Scalar>(
    tape: &mut Tape<'_, T>,
    img: ArrayView3<T>,
    patch: usize,
    p: &EmbedderParams,
) -> Result<Var> {
    let patches = patchify(img, patch)?;
    project_with_positions(tape, patches.view(), p.img_proj, p.img_bias, p.img_pos, "image")
}

/// Projects precomputed note vectors (one per row).
pub fn embed_note<T: Scalar>(tape: &mut Tape<'_, T>, v: ArrayView2<T>, p: &EmbedderParams) -> Result<Var> {
    project_with_positions(tape, v, p.note_proj, p.note_bias, p.note_pos, "note")
}

/// `H^0 = [task token; combination tokens of the layout; modality spans]`.
pub fn assemble_sequence<T: Scalar>(
    tape: &mut Tape<'_, T>,
    task_token: ParamId,
    layout: &SequenceLayout,
    modality_tokens: &[Option<Var>; 3],
    p: &EmbedderParams,
) -> Result<Var> {
    let mut parts = vec![tape.param(task_token)];
    if layout.n_combinations() > 0 {
        let table = tape.param(p.comb_tokens);
        let rows: Vec<usize> = layout.combinations().iter().map(|c| c.canonical_index()).collect();
        parts.push(tape.gather_rows(table, &rows)?);
    }
    for m in ModalityId::ALL {
        match (layout.span(m), modality_tokens[m.index()]) {
            (Some(span), Some(v)) => {
                let got = tape.shape(v).0;
                if got != span.len {
                    return Err(Error::Shape(format!(
                        "modality {} has {got} tokens, layout expects {}",
                        m.code(),
                        span.len
                    )));
                }
                parts.push(v);
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Shape(format!("modality {} missing tokens", m.code()))),
            (None, Some(_)) => return Err(Error::Shape(format!("modality {} not in layout", m.code()))),
        }
    }
    tape.concat_rows(&parts)
}

/// Masked multi-head self-attention over `h` (no output projection).
pub fn masked_mhsa<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h: Var,
    mask: &Array2<T>,
    layer: &EncoderLayerParams,
    heads: usize,
) -> Result<Var> {
    let wq = tape.param(layer.wq);
    let wk = tape.param(layer.wk);
    let wv = tape.param(layer.wv);
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    tape.masked_attention(q, k, v, mask, heads)
}

/// Post-norm residual block: `LN(H + MHSA(H))` then `LN(H~ + FFN(H~))`.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h: Var,
    mask: &Array2<T>,
    layer: &EncoderLayerParams,
    heads: usize,
) -> Result<Var> {
    let att = masked_mhsa(tape, h, mask, layer, heads)?;
    let r1 = tape.add(h, att)?;
    let g1 = tape.param(layer.ln1_gain);
    let b1 = tape.param(layer.ln1_bias);
    let h1 = tape.layer_norm(r1, g1, b1)?;
    let w1 = tape.param(layer.ff1_w);
    let fb1 = tape.param(layer.ff1_b);
    let w2 = tape.param(layer.ff2_w);
    let fb2 = tape.param(layer.ff2_b);
    let f = tape.linear(h1, w1, fb1)?;
    let f = tape.gelu(f);
    let f = tape.linear(f, w2, fb2)?;
    let r2 = tape.add(h1, f)?;
    let g2 = tape.param(layer.ln2_gain);
    let b2 = tape.param(layer.ln2_bias);
    tape.layer_norm(r2, g2, b2)
}

/// Run the layer stack and slice out task, combination and modality rows.
pub fn encode<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h0: Var,
    mask: &Array2<T>,
    layers: &[EncoderLayerParams],
    heads: usize,
    layout: &SequenceLayout,
) -> Result<EncodedSample> {
    if layers.is_empty() {
        return Err(Error::Empty("encoder layers"));
    }
    if tape.shape(h0).0 != layout.total_len() {
        return Err(Error::Shape("sequence length does not match layout".into()));
    }
    let mut h = h0;
    for layer in layers {
        h = encoder_layer(tape, h, mask, layer, heads)?;
    }
    let z_task = tape.row(h, layout.task_slot())?;
    let z_comb = match layout.n_combinations() {
        0 => None,
        n => Some(tape.slice_rows(h, 1, n)?),
    };
    let mut modality_outputs = [None; 3];
    for m in ModalityId::ALL {
        if let Some(span) = layout.span(m) {
            modality_outputs[m.index()] = Some(tape.slice_rows(h, span.start, span.len)?);
        }
    }
    Ok(EncodedSample {
        z_task,
        z_comb,
        modality_outputs,
        hidden: h,
    })
}
