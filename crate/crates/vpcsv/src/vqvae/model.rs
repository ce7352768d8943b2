//! Encoder/decoder stacks and the three-term training loss.

use crate::numeric::init::glorot;
use crate::numeric::{NumericError, ParamId, ParamStore, Rng, Tape, Value};

use super::quantize::quantize_on_tape;
use super::VqVaeConfig;

/// Hidden widths of the conv stacks (input → 16×16 → 8×8 and back).
const H1: usize = 32;
const H2: usize = 64;

struct ConvP {
    w: ParamId,
    b: ParamId,
}

pub struct VqVae {
    pub k: usize,
    pub d: usize,
    pub beta: f32,
    /// Token grid side; 8 for 32×32 inputs.
    pub p: usize,
    pub h: usize,
    pub w: usize,
    enc1: ConvP,
    enc2: ConvP,
    enc3: ConvP,
    dec1: ConvP,
    dec2: ConvP,
    dec3: ConvP,
    pub codebook: ParamId,
}

fn conv_param(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
    fan_out: usize,
) -> ConvP {
    let n: usize = shape.iter().product();
    let w = store.add(&format!("{name}.w"), &shape, glorot(rng, fan_in, fan_out, n));
    // bias length = output channels, which transposed convs keep in dim 1
    let out_ch = if name.contains("dec2") || name.contains("dec3") { shape[1] } else { shape[0] };
    let b = store.add(&format!("{name}.b"), &[out_ch], vec![0.0; out_ch]);
    ConvP { w, b }
}

impl VqVae {
    /// Fresh model; registers every parameter under `vqvae.*`.
    pub fn init(store: &mut ParamStore, cfg: &VqVaeConfig, h: usize, w: usize, rng: &mut Rng) -> Self {
        assert!(h.is_multiple_of(4) && w.is_multiple_of(4), "encoder downsamples by 4");
        assert_eq!(h, w, "square frames only");
        let d = cfg.d;
        let mut r = rng.fork("vqvae-init");
        let enc1 = conv_param(store, &mut r, "vqvae.enc1", [H1, 3, 4, 4], 3 * 16, H1 * 16);
        let enc2 = conv_param(store, &mut r, "vqvae.enc2", [H2, H1, 4, 4], H1 * 16, H2 * 16);
        let enc3 = conv_param(store, &mut r, "vqvae.enc3", [d, H2, 3, 3], H2 * 9, d * 9);
        let dec1 = conv_param(store, &mut r, "vqvae.dec1", [H2, d, 3, 3], d * 9, H2 * 9);
        let dec2 = conv_param(store, &mut r, "vqvae.dec2", [H2, H1, 4, 4], H2 * 16, H1 * 16);
        let dec3 = conv_param(store, &mut r, "vqvae.dec3", [H1, 3, 4, 4], H1 * 16, 3 * 16);
        let codebook = store.add(
            "vqvae.codebook",
            &[cfg.k, d],
            crate::numeric::init::embedding(&mut r, cfg.k * d),
        );
        VqVae {
            k: cfg.k,
            d,
            beta: cfg.beta,
            p: h / 4,
            h,
            w,
            enc1,
            enc2,
            enc3,
            dec1,
            dec2,
            dec3,
            codebook,
        }
    }

    /// Rebuild the handle for parameters already present in `store`
    /// (checkpoint loading path).
    pub fn attach(store: &ParamStore, cfg: &VqVaeConfig, h: usize, w: usize) -> Self {
        let get = |name: &str| store.id(name).unwrap_or_else(|| panic!("missing param {name}"));
        let conv = |name: &str| ConvP { w: get(&format!("{name}.w")), b: get(&format!("{name}.b")) };
        VqVae {
            k: cfg.k,
            d: cfg.d,
            beta: cfg.beta,
            p: h / 4,
            h,
            w,
            enc1: conv("vqvae.enc1"),
            enc2: conv("vqvae.enc2"),
            enc3: conv("vqvae.enc3"),
            dec1: conv("vqvae.dec1"),
            dec2: conv("vqvae.dec2"),
            dec3: conv("vqvae.dec3"),
            codebook: get("vqvae.codebook"),
        }
    }

    /// x [3,H,W] in [0,1] → feature grid [D,p,p].
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Value,
    ) -> Result<Value, NumericError> {
        if x.shape() != [3, self.h, self.w] {
            return Err(NumericError::ShapeMismatch {
                op: "vqvae.encode",
                details: format!("expected [3, {}, {}], got {:?}", self.h, self.w, x.shape()),
            });
        }
        let conv = |tape: &mut Tape, x: &Value, p: &ConvP, s, pad| -> Result<Value, NumericError> {
            let w = tape.param(store, p.w);
            let b = tape.param(store, p.b);
            let y = tape.conv2d(x, &w, s, pad)?;
            tape.channel_bias(&y, &b)
        };
        let h1 = conv(tape, x, &self.enc1, 2, 1)?;
        let h1 = tape.relu(&h1)?;
        let h2 = conv(tape, &h1, &self.enc2, 2, 1)?;
        let h2 = tape.relu(&h2)?;
        let z = conv(tape, &h2, &self.enc3, 1, 1)?;
        debug_assert_eq!(z.shape(), &[self.d, self.p, self.p]);
        Ok(z)
    }

    /// z_q [D,p,p] → reconstruction [3,H,W] in [0,1].
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        zq: &Value,
    ) -> Result<Value, NumericError> {
        if zq.shape() != [self.d, self.p, self.p] {
            return Err(NumericError::ShapeMismatch {
                op: "vqvae.decode",
                details: format!("expected [{}, {}, {}], got {:?}", self.d, self.p, self.p, zq.shape()),
            });
        }
        let w1 = tape.param(store, self.dec1.w);
        let b1 = tape.param(store, self.dec1.b);
        let h1 = tape.conv2d(zq, &w1, 1, 1)?;
        let h1 = tape.channel_bias(&h1, &b1)?;
        let h1 = tape.relu(&h1)?;

        let w2 = tape.param(store, self.dec2.w);
        let b2 = tape.param(store, self.dec2.b);
        let h2 = tape.conv2d_transpose(&h1, &w2, 2, 1)?;
        let h2 = tape.channel_bias(&h2, &b2)?;
        let h2 = tape.relu(&h2)?;

        let w3 = tape.param(store, self.dec3.w);
        let b3 = tape.param(store, self.dec3.b);
        let out = tape.conv2d_transpose(&h2, &w3, 2, 1)?;
        let out = tape.channel_bias(&out, &b3)?;
        let out = tape.sigmoid(&out)?;
        debug_assert_eq!(out.shape(), &[3, self.h, self.w]);
        Ok(out)
    }

    /// Full training pass over one image: encode, quantize, decode, and the
    /// three loss terms with their stop-gradient routing.
    pub fn forward_terms(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Value,
    ) -> Result<ForwardTerms, NumericError> {
        let ze = self.encode(tape, store, x)?;
        let cells = tape.cells_from_chw(&ze)?;
        let codebook = tape.param(store, self.codebook);
        let (indices, e, zq) = quantize_on_tape(tape, &cells, &codebook)?;
        let zq_chw = tape.chw_from_cells(&zq, self.p, self.p)?;
        let xhat = self.decode(tape, store, &zq_chw)?;
        assemble_terms(tape, x, &xhat, &cells, &e, self.beta, indices)
    }
}

/// The three terms given precomputed pieces. Split out so tiny hand-built
/// instances can exercise the exact same code path as training.
pub fn assemble_terms(
    tape: &mut Tape,
    x: &Value,
    xhat: &Value,
    cells: &Value,
    e: &Value,
    beta: f32,
    indices: Vec<u16>,
) -> Result<ForwardTerms, NumericError> {
    let recon = tape.mse_loss(xhat, x)?;
    let sg_cells = tape.stop_gradient(cells);
    let codebook_term = tape.mse_loss(e, &sg_cells)?;
    let sg_e = tape.stop_gradient(e);
    let commit_raw = tape.mse_loss(cells, &sg_e)?;
    let commit = tape.scale(&commit_raw, beta)?;
    let partial = tape.add(&recon, &codebook_term)?;
    let total = tape.add(&partial, &commit)?;
    Ok(ForwardTerms { recon, codebook: codebook_term, commit, total, indices })
}

pub struct ForwardTerms {
    pub recon: Value,
    pub codebook: Value,
    pub commit: Value,
    pub total: Value,
    pub indices: Vec<u16>,
}
