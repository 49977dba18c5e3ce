use super::{Tape, Var};
use crate::error::{shape_err, Result};

/// One ConvLSTM step without peephole connections.
///
/// `weight` is `(4*H, C_x + H, K, K)` and `bias` is `(4*H)`, with gate
/// blocks stacked in the order input, forget, output, candidate. Inputs are
/// concatenated as `[x; h_prev]` along channels. Returns `(h, c)`.
pub fn convlstm_cell(tape: &mut Tape, x: Var, h_prev: Var, c_prev: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let [_, hid, hh, hw] = tape.value(h_prev).dims4()?;
    let [_, _, xh, xw] = tape.value(x).dims4()?;
    if (xh, xw) != (hh, hw) {
        return Err(shape_err!("convlstm input {xh}x{xw} vs state {hh}x{hw}"));
    }
    tape.value(c_prev).check_same_shape(tape.value(h_prev))?;
    let [gates_out, _, k, _] = tape.value(weight).dims4()?;
    if gates_out != 4 * hid {
        return Err(shape_err!("convlstm weight has {gates_out} outputs, need {}", 4 * hid));
    }
    let xh = tape.concat_channels(&[x, h_prev])?;
    let z = tape.conv2d(xh, weight, Some(bias), 1, k / 2)?;
    let zi = tape.slice_channels(z, 0, hid)?;
    let zf = tape.slice_channels(z, hid, hid)?;
    let zo = tape.slice_channels(z, 2 * hid, hid)?;
    let zg = tape.slice_channels(z, 3 * hid, hid)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let g = tape.tanh(zg)?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}
