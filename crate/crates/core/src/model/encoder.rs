use clickvos_tensor::{BoundParams, Graph, Tensor, Var};

use super::{AbsModel, Branch, Fusion, Meb, Modality};
use crate::error::Result;
use crate::video::Image;

/// Image as an `[H, W, 3]` tensor mapped from `[0, 1]` to `[-1, 1]`.
pub fn image_tensor(img: &Image) -> Tensor {
    let data = img.data.iter().map(|v| 2.0 * v - 1.0).collect();
    Tensor::new([img.height, img.width, 3], data).expect("image buffer matches its shape")
}

const POSITION_BASE: f64 = 100.0;

/// Fixed 2D sinusoidal position code, `[h, w, c]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let freqs = half / 2;
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let cell = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
            for (offset, pos) in [(0, y as f64), (half, x as f64)] {
                for k in 0..freqs {
                    let omega = POSITION_BASE.powf(-(k as f64) / freqs as f64);
                    cell[offset + 2 * k] = (pos * omega).sin();
                    cell[offset + 2 * k + 1] = (pos * omega).cos();
                }
            }
        }
    }
    Tensor::new([h, w, c], data).expect("buffer matches shape")
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `F_t`: normalised fused features plus the position code, `[H/s, W/s, C]`.
    pub features: Var,
    /// Image-side and flow-side stage outputs entering the fusion, when both exist.
    pub branches: Option<(Var, Var)>,
}

fn stage_a(g: &mut Graph, p: &BoundParams, b: &Branch, x: Var) -> Result<Var> {
    let mut h = x;
    for conv in &b.down_a {
        h = conv.apply(g, p, h)?;
        h = g.relu(h)?;
    }
    b.res_a.apply(g, p, h)
}

fn stage_b(g: &mut Graph, p: &BoundParams, b: &Branch, x: Var) -> Result<Var> {
    let h = b.down_b.apply(g, p, x)?;
    let h = g.relu(h)?;
    b.res_b.apply(g, p, h)
}

fn meb_forward(g: &mut Graph, p: &BoundParams, meb: &Meb, img: Var, flow: Option<Var>) -> Result<(Var, Option<Var>)> {
    let shape = g.shape(img).to_vec();
    let (l, c) = (shape[0] * shape[1], shape[2]);
    let i_tok = g.reshape(img, [l, c])?;
    let i_self = meb.img_self.apply(g, p, i_tok)?;
    let out = match (flow, &meb.flow_self, &meb.img_cross, &meb.flow_cross) {
        (Some(flow), Some(fs), Some(ic), Some(fc)) => {
            let o_tok = g.reshape(flow, [l, c])?;
            let o_self = fs.apply(g, p, o_tok)?;
            let io = ic.apply(g, p, i_self, o_self, o_self)?;
            let oi = fc.apply(g, p, o_self, i_self, i_self)?;
            (io, Some(g.reshape(oi, shape.clone())?))
        }
        _ => (i_self, None),
    };
    Ok((g.reshape(out.0, shape)?, out.1))
}

fn fusion_forward(g: &mut Graph, p: &BoundParams, f: &Fusion, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (l, c) = (shape[0] * shape[1], shape[2]);
    let flat = g.reshape(x, [l, c])?;
    let pooled = g.mean(flat, Some(0))?;
    let pooled = g.reshape(pooled, [1, c])?;
    let h = f.fc1.apply(g, p, pooled)?;
    let h = g.relu(h)?;
    let h = f.fc2.apply(g, p, h)?;
    let gate = g.sigmoid(h)?;
    let gate = g.reshape(gate, [c])?;
    let gated = g.mul(flat, gate)?;
    let gated = g.reshape(gated, shape)?;
    f.proj.apply(g, p, gated)
}

impl AbsModel {
    /// `image` and `flow` are `[H, W, 3]`; `flow` is ignored by
    /// appearance-only models.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, image: Var, flow: Var) -> Result<EncoderOutput> {
        let shape = g.shape(image).to_vec();
        self.config.check_frame(shape[0], shape[1])?;
        let w = &self.w;
        let ia = stage_a(g, p, &w.img, image)?;
        let oa = match &w.flow {
            Some(b) => Some(stage_a(g, p, b, flow)?),
            None => None,
        };
        let (ia, oa) = match &w.meb {
            Some(meb) => meb_forward(g, p, &meb[0], ia, oa)?,
            None => (ia, oa),
        };
        let ib = stage_b(g, p, &w.img, ia)?;
        let ob = match (&w.flow, oa) {
            (Some(b), Some(oa)) => Some(stage_b(g, p, b, oa)?),
            _ => None,
        };
        let (ib, ob) = match &w.meb {
            Some(meb) => meb_forward(g, p, &meb[1], ib, ob)?,
            None => (ib, ob),
        };
        let features = match (self.config.modality, ob) {
            (Modality::ConcatFuse, Some(ob)) => {
                let fc = w.concat_fc.as_ref().expect("concat models carry a fusion layer");
                let cat = g.concat(&[ib, ob], 2)?;
                let s = g.shape(cat).to_vec();
                let flat = g.reshape(cat, [s[0] * s[1], s[2]])?;
                let f = fc.apply(g, p, flat)?;
                g.reshape(f, [s[0], s[1], self.config.channels])?
            }
            (_, Some(ob)) => {
                let cat = g.concat(&[ib, ob], 2)?;
                fusion_forward(g, p, w.fusion.as_ref().expect("fusion present"), cat)?
            }
            (_, None) => fusion_forward(g, p, w.fusion.as_ref().expect("fusion present"), ib)?,
        };
        let features = w.out_norm.apply(g, p, features)?;
        let fs = g.shape(features).to_vec();
        let pe = g.constant(positional_encoding(fs[0], fs[1], fs[2]));
        let features = g.add(features, pe)?;
        Ok(EncoderOutput {
            features,
            branches: ob.map(|ob| (ib, ob)),
        })
    }
}
