use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::{convlstm_cell, Tape, Tensor, Var};

/// Per-scale features, finest first; scale `l` is `(H / 2^l, W / 2^l)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Residual and sharp estimate at one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalePrediction {
    pub residual: Var,
    pub estimate: Var,
}

/// Network inputs already recorded on a tape.
#[derive(Clone, Debug)]
pub struct InputVars {
    /// `(N, C_img, H, W)`
    pub blur: Var,
    /// `(N, bins, H, W)`
    pub voxel: Var,
    /// `n_chunks` tensors of shape `(N, bins, H, W)`, in time order.
    pub chunks: Vec<Var>,
}

fn conv(tape: &mut Tape, p: &Params, name: &str, x: Var, k: usize, bias: bool) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = if bias { Some(p.get(&format!("{name}.b"))?) } else { None };
    tape.conv2d(x, w, b, 1, k / 2)
}

fn conv_relu(tape: &mut Tape, p: &Params, name: &str, x: Var, k: usize) -> Result<Var> {
    let y = conv(tape, p, name, x, k, true)?;
    tape.relu(y)
}

fn zeros_like(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.value(v).shape().to_vec();
    tape.constant(Tensor::zeros(&shape))
}

/// Image-plus-voxel encoder: per scale, conv-relu-conv-relu, with 2x2
/// average pooling between scales.
pub fn encode_image_events(
    tape: &mut Tape,
    p: &Params,
    cfg: &ModelConfig,
    blur: Var,
    voxel: Var,
) -> Result<FeaturePyramid> {
    let [n, c, h, w] = tape.value(blur).dims4()?;
    let [vn, vb, vh, vw] = tape.value(voxel).dims4()?;
    if (n, h, w) != (vn, vh, vw) || c != cfg.image_channels || vb != cfg.voxel_bins {
        return Err(Error::Shape(format!(
            "blur {:?} and voxel {:?} do not match the model inputs",
            tape.value(blur).shape(),
            tape.value(voxel).shape()
        )));
    }
    cfg.check_input_size(h, w)?;
    let ev = if cfg.use_events { voxel } else { zeros_like(tape, voxel) };
    let mut x = tape.concat_channels(&[blur, ev])?;
    let mut levels = Vec::with_capacity(cfg.n_scales);
    for l in 0..cfg.n_scales {
        if l > 0 {
            x = tape.avgpool2(x)?;
        }
        let a = conv_relu(tape, p, &format!("enc.{l}.c1"), x, cfg.kernel)?;
        x = conv_relu(tape, p, &format!("enc.{l}.c2"), a, cfg.kernel)?;
        levels.push(x);
    }
    Ok(FeaturePyramid { levels })
}

/// Embeds every chunk with shared weights, integrates them with a ConvLSTM
/// in time order (or averages them when `use_lstm` is off), and pools the
/// result into a pyramid.
pub fn encode_events_recurrent(
    tape: &mut Tape,
    p: &Params,
    cfg: &ModelConfig,
    chunks: &[Var],
) -> Result<FeaturePyramid> {
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("empty chunk set".into()));
    }
    let mut embedded = Vec::with_capacity(chunks.len());
    for &ch in chunks {
        embedded.push(conv_relu(tape, p, "ev.embed", ch, cfg.kernel)?);
    }
    let merged = if cfg.use_lstm {
        let (wt, bs) = (p.get("ev.lstm.w")?, p.get("ev.lstm.b")?);
        let mut h = zeros_like(tape, embedded[0]);
        let mut c = zeros_like(tape, embedded[0]);
        for &e in &embedded {
            (h, c) = convlstm_cell(tape, e, h, c, wt, bs)?;
        }
        h
    } else {
        let mut acc = embedded[0];
        for &e in &embedded[1..] {
            acc = tape.add(acc, e)?;
        }
        tape.scale(acc, 1.0 / embedded.len() as f64)?
    };
    let mut levels = vec![merged];
    for l in 1..cfg.n_scales {
        let down = tape.avgpool2(levels[l - 1])?;
        levels.push(down);
    }
    Ok(FeaturePyramid { levels })
}

/// Offsets `(N, 2K^2, H, W)` and mask `(N, K^2, H, W)` at scale `l`.
fn offsets_and_mask(tape: &mut Tape, p: &Params, cfg: &ModelConfig, l: usize, f_ev: Var) -> Result<(Var, Var)> {
    let k = cfg.kernel;
    let t = conv_relu(tape, p, &format!("dm.{l}.t1"), f_ev, k)?;
    let t = conv_relu(tape, p, &format!("dm.{l}.t2"), t, k)?;
    let off = conv(tape, p, &format!("dm.{l}.off"), t, k, true)?;
    let m = conv(tape, p, &format!("dm.{l}.mask"), t, k, true)?;
    let mask = tape.sigmoid(m)?;
    Ok((off, mask))
}

/// Coarse to fine: fuses each scale's image-event features with the
/// upsampled output of the coarser scale, then applies a modulated
/// deformable conv steered by the event features (or a plain conv when
/// `use_deblur_module` is off).
pub fn deblur_module(
    tape: &mut Tape,
    p: &Params,
    cfg: &ModelConfig,
    f_imev: &FeaturePyramid,
    f_ev: Option<&FeaturePyramid>,
) -> Result<FeaturePyramid> {
    let l_count = cfg.n_scales;
    if f_imev.levels.len() != l_count {
        return Err(Error::Shape(format!(
            "image-event pyramid has {} scales, model has {l_count}",
            f_imev.levels.len()
        )));
    }
    let f_ev = if cfg.use_deblur_module {
        match f_ev {
            Some(f) if f.levels.len() == l_count => Some(f),
            Some(f) => {
                return Err(Error::Shape(format!(
                    "event pyramid has {} scales, model has {l_count}",
                    f.levels.len()
                )))
            }
            None => return Err(Error::InvalidArgument("deblur module needs event features".into())),
        }
    } else {
        None
    };
    let k = cfg.kernel;
    let mut out: Vec<Option<Var>> = vec![None; l_count];
    for l in (0..l_count).rev() {
        let fused = match out.get(l + 1).copied().flatten() {
            Some(coarse) => {
                let up = tape.upsample2(coarse)?;
                let cat = tape.concat_channels(&[f_imev.levels[l], up])?;
                conv_relu(tape, p, &format!("dm.{l}.fuse"), cat, k)?
            }
            None => f_imev.levels[l],
        };
        let w = p.get(&format!("dm.{l}.w"))?;
        let y = match f_ev {
            Some(ev) => {
                let (off, mask) = offsets_and_mask(tape, p, cfg, l, ev.levels[l])?;
                tape.deform_conv2d(fused, off, mask, w, None, 1, k / 2)?
            }
            None => tape.conv2d(fused, w, None, 1, k / 2)?,
        };
        out[l] = Some(y);
    }
    Ok(FeaturePyramid {
        levels: out.into_iter().map(|v| v.expect("every scale visited")).collect(),
    })
}

/// Residual decoders from the coarsest scale down. Returns predictions
/// finest first; only scale 0 when `use_c2f` is off.
pub fn decode_coarse_to_fine(
    tape: &mut Tape,
    p: &Params,
    cfg: &ModelConfig,
    f_deblur: &FeaturePyramid,
    blur: Var,
) -> Result<Vec<ScalePrediction>> {
    decode_impl(tape, p, cfg, f_deblur, blur, false)
}

/// `zero_coarse` replaces the upsampled coarse features entering each gate
/// by zeros.
pub(crate) fn decode_impl(
    tape: &mut Tape,
    p: &Params,
    cfg: &ModelConfig,
    f: &FeaturePyramid,
    blur: Var,
    zero_coarse: bool,
) -> Result<Vec<ScalePrediction>> {
    if f.levels.len() != cfg.n_scales {
        return Err(Error::Shape(format!(
            "decoder got {} scales, model has {}",
            f.levels.len(),
            cfg.n_scales
        )));
    }
    let decoded = if cfg.use_c2f { cfg.n_scales } else { 1 };
    let k = cfg.kernel;
    let mut blurs = vec![blur];
    for l in 1..decoded {
        let down = tape.avgpool2(blurs[l - 1])?;
        blurs.push(down);
    }
    let mut preds = Vec::with_capacity(decoded);
    let mut prev: Option<(Var, Var)> = None;
    for l in (0..decoded).rev() {
        let mut d = f.levels[l];
        if let Some((feat, _)) = prev {
            let mut up = tape.upsample2(feat)?;
            if zero_coarse {
                up = zeros_like(tape, up);
            }
            let cat = tape.concat_channels(&[d, up])?;
            let g = conv(tape, p, &format!("dec.{l}.gate"), cat, k, true)?;
            let gate = tape.sigmoid(g)?;
            let gated = tape.mul(gate, up)?;
            d = tape.add(d, gated)?;
        }
        for r in 0..cfg.n_resblocks {
            let t = conv_relu(tape, p, &format!("dec.{l}.r{r}.c1"), d, k)?;
            let t = conv(tape, p, &format!("dec.{l}.r{r}.c2"), t, k, true)?;
            d = tape.add(d, t)?;
        }
        let residual = conv(tape, p, &format!("dec.{l}.out"), d, k, true)?;
        tape.value(residual).check_same_shape(tape.value(blurs[l]))?;
        let mut estimate = tape.add(blurs[l], residual)?;
        if let Some((_, coarse_res)) = prev {
            let up = tape.upsample2(coarse_res)?;
            estimate = tape.add(estimate, up)?;
        }
        preds.push(ScalePrediction { residual, estimate });
        prev = Some((d, residual));
    }
    preds.reverse();
    Ok(preds)
}

/// Encoders, deblur module and decoder on already-recorded inputs.
pub fn forward_tape(tape: &mut Tape, p: &Params, cfg: &ModelConfig, input: &InputVars) -> Result<Vec<ScalePrediction>> {
    let f_imev = encode_image_events(tape, p, cfg, input.blur, input.voxel)?;
    let f_ev = if cfg.use_deblur_module {
        if input.chunks.len() != cfg.n_chunks {
            return Err(Error::Shape(format!(
                "got {} chunks, model expects {}",
                input.chunks.len(),
                cfg.n_chunks
            )));
        }
        Some(encode_events_recurrent(tape, p, cfg, &input.chunks)?)
    } else {
        None
    };
    let f_db = deblur_module(tape, p, cfg, &f_imev, f_ev.as_ref())?;
    decode_coarse_to_fine(tape, p, cfg, &f_db, input.blur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Weights;
    use crate::tensor::kernels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(l: usize) -> ModelConfig {
        ModelConfig {
            n_scales: l,
            base_channels: 4,
            event_channels: 3,
            n_chunks: 3,
            n_resblocks: 2,
            ..Default::default()
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Initialized weights with every tensor, heads included, randomized.
    fn random_weights(cfg: &ModelConfig, seed: u64) -> Weights {
        let mut w = Weights::init(cfg).unwrap();
        for (i, (_, t)) in w.iter_mut().enumerate() {
            *t = rand(t.shape(), seed + i as u64).map(|v| 0.3 * v);
        }
        w
    }

    fn inputs(tape: &mut Tape, cfg: &ModelConfig, h: usize, seed: u64) -> InputVars {
        let blur = tape.constant(rand(&[1, 1, h, h], seed).map(|v| 0.5 + 0.4 * v));
        let voxel = tape.constant(rand(&[1, cfg.voxel_bins, h, h], seed + 1));
        let chunks = (0..cfg.n_chunks)
            .map(|i| tape.constant(rand(&[1, cfg.voxel_bins, h, h], seed + 10 + i as u64)))
            .collect();
        InputVars { blur, voxel, chunks }
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn image_event_pyramid_sizes_halve_per_scale() {
        let cfg = ModelConfig::default();
        let w = Weights::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let x = inputs(&mut tape, &cfg, 64, 1);
        let f = encode_image_events(&mut tape, &p, &cfg, x.blur, x.voxel).unwrap();
        let sizes: Vec<[usize; 4]> = f.levels.iter().map(|&v| tape.value(v).dims4().unwrap()).collect();
        assert_eq!(sizes, vec![[1, 16, 64, 64], [1, 16, 32, 32], [1, 16, 16, 16]]);

        let one = ModelConfig { n_scales: 1, ..cfg };
        let w1 = Weights::init(&one).unwrap();
        let p1 = w1.bind(&mut tape, false);
        let f1 = encode_image_events(&mut tape, &p1, &one, x.blur, x.voxel).unwrap();
        assert_eq!(f1.levels.len(), 1);
        assert_eq!(tape.value(f1.levels[0]).dims4().unwrap(), [1, 16, 64, 64]);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = small(2);
        let w = Weights::zeros(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let x = inputs(&mut tape, &cfg, 8, 2);
        let f = encode_image_events(&mut tape, &p, &cfg, x.blur, x.voxel).unwrap();
        for v in f.levels {
            assert!(tape.value(v).data().iter().all(|&a| a == 0.0));
        }
        let zero_chunks: Vec<Var> = x.chunks.iter().map(|&c| zeros_like(&mut tape, c)).collect();
        let g = encode_events_recurrent(&mut tape, &p, &cfg, &zero_chunks).unwrap();
        for v in g.levels {
            assert!(tape.value(v).data().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn encoder_rejects_mismatched_inputs() {
        let cfg = small(2);
        let w = Weights::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let blur = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let voxel = tape.constant(Tensor::zeros(&[1, 5, 8, 4]));
        assert!(matches!(
            encode_image_events(&mut tape, &p, &cfg, blur, voxel),
            Err(Error::Shape(_))
        ));
        let odd = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let odd_v = tape.constant(Tensor::zeros(&[1, 5, 5, 5]));
        assert!(encode_image_events(&mut tape, &p, &cfg, odd, odd_v).is_err());
        assert!(matches!(
            encode_events_recurrent(&mut tape, &p, &cfg, &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_chunk_is_one_lstm_step() {
        let cfg = ModelConfig {
            n_chunks: 1,
            ..small(2)
        };
        let w = random_weights(&cfg, 3);
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let x = inputs(&mut tape, &cfg, 8, 3);
        let f = encode_events_recurrent(&mut tape, &p, &cfg, &x.chunks).unwrap();
        assert_eq!(tape.value(f.levels[1]).dims4().unwrap(), [1, 3, 4, 4]);
        assert!(tape.value(f.levels[0]).all_finite());
    }

    #[test]
    fn chunk_order_matters_only_with_the_lstm() {
        for use_lstm in [true, false] {
            let cfg = ModelConfig { use_lstm, ..small(1) };
            let w = random_weights(&cfg, 4);
            let mut tape = Tape::new();
            let p = w.bind(&mut tape, false);
            let x = inputs(&mut tape, &cfg, 8, 4);
            let fwd = encode_events_recurrent(&mut tape, &p, &cfg, &x.chunks).unwrap();
            let rev: Vec<Var> = x.chunks.iter().rev().copied().collect();
            let bwd = encode_events_recurrent(&mut tape, &p, &cfg, &rev).unwrap();
            let d = tape
                .value(fwd.levels[0])
                .max_abs_diff(tape.value(bwd.levels[0]))
                .unwrap();
            if use_lstm {
                assert!(d > 1e-6, "lstm output unchanged by reordering");
            } else {
                assert!(d < 1e-15, "mean combine is order dependent: {d}");
            }
        }
    }

    #[test]
    fn zero_heads_give_half_scaled_standard_conv() {
        let cfg = small(1);
        let w = Weights::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let f_im = tape.constant(rand(&[1, 4, 8, 8], 5));
        let f_ev = tape.constant(rand(&[1, 3, 8, 8], 6));
        let out = deblur_module(
            &mut tape,
            &p,
            &cfg,
            &FeaturePyramid { levels: vec![f_im] },
            Some(&FeaturePyramid { levels: vec![f_ev] }),
        )
        .unwrap();
        let plain = kernels::conv2d(tape.value(f_im), w.get("dm.0.w").unwrap(), None, 1, 1).unwrap();
        assert_eq!(bits(tape.value(out.levels[0])), bits(&plain.map(|v| 0.5 * v)));
    }

    #[test]
    fn plain_conv_mode_ignores_event_features() {
        let cfg = small(2).with_toggles(true, false, false, true);
        let w = random_weights(&cfg, 7);
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let f_im = FeaturePyramid {
            levels: vec![
                tape.constant(rand(&[1, 4, 8, 8], 8)),
                tape.constant(rand(&[1, 4, 4, 4], 9)),
            ],
        };
        let ev_a = FeaturePyramid {
            levels: vec![
                tape.constant(rand(&[1, 3, 8, 8], 10)),
                tape.constant(rand(&[1, 3, 4, 4], 11)),
            ],
        };
        let a = deblur_module(&mut tape, &p, &cfg, &f_im, Some(&ev_a)).unwrap();
        let b = deblur_module(&mut tape, &p, &cfg, &f_im, None).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(bits(tape.value(*x)), bits(tape.value(*y)));
        }
    }

    #[test]
    fn deblur_module_matches_hand_composed_kernels() {
        let cfg = small(2);
        let w = random_weights(&cfg, 12);
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let im = [rand(&[1, 4, 8, 8], 13), rand(&[1, 4, 4, 4], 14)];
        let ev = [rand(&[1, 3, 8, 8], 15), rand(&[1, 3, 4, 4], 16)];
        let f_im = FeaturePyramid {
            levels: im.iter().map(|t| tape.constant(t.clone())).collect(),
        };
        let f_ev = FeaturePyramid {
            levels: ev.iter().map(|t| tape.constant(t.clone())).collect(),
        };
        let got = deblur_module(&mut tape, &p, &cfg, &f_im, Some(&f_ev)).unwrap();

        let g = |n: &str| w.get(n).unwrap();
        let relu = |t: Tensor| t.map(|v| v.max(0.0));
        let conv_b =
            |x: &Tensor, n: &str| kernels::conv2d(x, g(&format!("{n}.w")), Some(g(&format!("{n}.b"))), 1, 1).unwrap();
        let deform = |x: &Tensor, l: usize| {
            let t = relu(conv_b(&ev[l], &format!("dm.{l}.t1")));
            let t = relu(conv_b(&t, &format!("dm.{l}.t2")));
            let off = conv_b(&t, &format!("dm.{l}.off"));
            let mask = conv_b(&t, &format!("dm.{l}.mask")).map(|v| 1.0 / (1.0 + (-v).exp()));
            kernels::modulated_deform_conv2d(x, &off, &mask, g(&format!("dm.{l}.w")), None, 1, 1).unwrap()
        };
        let coarse = deform(&im[1], 1);
        let up = kernels::upsample_bilinear2(&coarse).unwrap();
        let fused = relu(conv_b(&kernels::concat_channels(&[&im[0], &up]).unwrap(), "dm.0.fuse"));
        let fine = deform(&fused, 0);
        assert!(tape.value(got.levels[1]).max_abs_diff(&coarse).unwrap() < 1e-12);
        assert!(tape.value(got.levels[0]).max_abs_diff(&fine).unwrap() < 1e-12);
    }

    #[test]
    fn zero_decoder_returns_downsampled_blur() {
        let cfg = small(3);
        let w = Weights::zeros(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let blur_t = rand(&[1, 1, 16, 16], 17);
        let blur = tape.constant(blur_t.clone());
        let feats = FeaturePyramid {
            levels: (0..3)
                .map(|l| tape.constant(rand(&[1, 4, 16 >> l, 16 >> l], 18 + l as u64)))
                .collect(),
        };
        let preds = decode_coarse_to_fine(&mut tape, &p, &cfg, &feats, blur).unwrap();
        let mut down = blur_t;
        for (l, pr) in preds.iter().enumerate() {
            if l > 0 {
                down = kernels::avgpool2(&down).unwrap();
            }
            assert!(tape.value(pr.residual).data().iter().all(|&v| v == 0.0));
            assert_eq!(bits(tape.value(pr.estimate)), bits(&down));
        }
    }

    #[test]
    fn single_scale_c2f_modes_coincide() {
        let cfg = small(1);
        let w = random_weights(&cfg, 19);
        let off = cfg.clone().with_toggles(true, true, true, false);
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let x = inputs(&mut tape, &cfg, 8, 20);
        let a = forward_tape(&mut tape, &p, &cfg, &x).unwrap();
        let b = forward_tape(&mut tape, &p, &off, &x).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_eq!(bits(tape.value(a[0].estimate)), bits(tape.value(b[0].estimate)));
    }

    #[test]
    fn closed_gate_matches_zeroed_coarse_features() {
        let cfg = small(2);
        let mut w = random_weights(&cfg, 21);
        *w.get_mut("dec.0.gate.b").unwrap() = Tensor::full(&[4], -20.0);
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let blur = tape.constant(rand(&[1, 1, 8, 8], 22));
        let feats = FeaturePyramid {
            levels: vec![
                tape.constant(rand(&[1, 4, 8, 8], 23)),
                tape.constant(rand(&[1, 4, 4, 4], 24)),
            ],
        };
        let gated = decode_impl(&mut tape, &p, &cfg, &feats, blur, false).unwrap();
        let zeroed = decode_impl(&mut tape, &p, &cfg, &feats, blur, true).unwrap();
        let d = tape
            .value(gated[0].estimate)
            .max_abs_diff(tape.value(zeroed[0].estimate))
            .unwrap();
        assert!(d < 1e-7, "closed gate leaks {d}");
        let open = {
            let mut w2 = w.clone();
            *w2.get_mut("dec.0.gate.b").unwrap() = Tensor::zeros(&[4]);
            let p2 = w2.bind(&mut tape, false);
            decode_impl(&mut tape, &p2, &cfg, &feats, blur, false).unwrap()
        };
        let d_open = tape
            .value(open[0].estimate)
            .max_abs_diff(tape.value(zeroed[0].estimate))
            .unwrap();
        assert!(d_open > 1e3 * d);
    }

    #[test]
    fn zero_weights_forward_is_identity_at_every_scale() {
        let cfg = ModelConfig::default();
        let w = Weights::zeros(&cfg).unwrap();
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let x = inputs(&mut tape, &cfg, 16, 25);
        let preds = forward_tape(&mut tape, &p, &cfg, &x).unwrap();
        assert_eq!(preds.len(), 3);
        let mut down = tape.value(x.blur).clone();
        for (l, pr) in preds.iter().enumerate() {
            if l > 0 {
                down = kernels::avgpool2(&down).unwrap();
            }
            assert_eq!(bits(tape.value(pr.estimate)), bits(&down));
        }
    }

    #[test]
    fn events_off_ignores_the_event_inputs() {
        let cfg = small(2).with_toggles(false, false, false, true);
        let w = random_weights(&cfg, 26);
        let mut tape = Tape::new();
        let p = w.bind(&mut tape, false);
        let a = inputs(&mut tape, &cfg, 8, 27);
        let mut b = inputs(&mut tape, &cfg, 8, 99);
        b.blur = a.blur;
        let pa = forward_tape(&mut tape, &p, &cfg, &a).unwrap();
        let pb = forward_tape(&mut tape, &p, &cfg, &b).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(bits(tape.value(x.estimate)), bits(tape.value(y.estimate)));
        }
    }
}
