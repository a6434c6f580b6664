use clickvos_tensor::{BoundParams, Graph, Var};

use super::memory::{DenseTokens, MemoryEntry, TokenSet};
use super::AbsModel;
use crate::annotate::PointSet;
use crate::error::{Error, Result};
use crate::video::LabelMap;

/// Majority label of each `stride x stride` cell, row-major; ties go to the
/// lower label.
pub fn cell_labels(mask: &LabelMap, stride: usize) -> Vec<u8> {
    let (ch, cw) = (mask.height / stride, mask.width / stride);
    let mut out = Vec::with_capacity(ch * cw);
    let mut counts = [0usize; 256];
    for cy in 0..ch {
        for cx in 0..cw {
            counts.fill(0);
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    counts[mask.get(x, y) as usize] += 1;
                }
            }
            let mut best = 0;
            for l in 1..256 {
                if counts[l] > counts[best] {
                    best = l;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Row `r` averages the cells labelled `ids[r]`; empty rows are all zero and
/// flagged absent.
pub fn pool_matrix(cells: &[u8], ids: &[u8]) -> (Vec<f64>, Vec<bool>) {
    let n = cells.len();
    let mut m = vec![0.0; ids.len() * n];
    let mut absent = Vec::with_capacity(ids.len());
    for (r, &id) in ids.iter().enumerate() {
        let count = cells.iter().filter(|&&l| l == id).count();
        absent.push(count == 0);
        if count > 0 {
            let inv = 1.0 / count as f64;
            for (j, &l) in cells.iter().enumerate() {
                if l == id {
                    m[r * n + j] = inv;
                }
            }
        }
    }
    (m, absent)
}

/// Per-pixel argmax over an `[H, W, K]` buffer; ties go to the lower label.
pub fn argmax_labels(logits: &[f64], height: usize, width: usize, k: usize) -> LabelMap {
    let data = logits
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::from_data(height, width, data).expect("logit buffer matches frame size")
}

impl AbsModel {
    fn flat_features(&self, g: &mut Graph, features: Var) -> Result<(Var, usize, usize)> {
        let s = g.shape(features).to_vec();
        let flat = g.reshape(features, [s[0] * s[1], s[2]])?;
        Ok((flat, s[0], s[1]))
    }

    fn id_rows(&self, g: &mut Graph, p: &BoundParams, ids: Vec<usize>) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.n_max) {
            return Err(Error::Config(format!("object id {bad} exceeds n_max {}", self.config.n_max)));
        }
        Ok(g.gather_rows(p.var(self.w.bank), ids)?)
    }

    /// Feature tokens at the clicked cells plus their identity rows. Also
    /// returns a warning for each pair of clicks sharing a cell.
    pub fn point_tokenize(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        features: Var,
        points: &PointSet,
    ) -> Result<(TokenSet<Var>, Vec<String>)> {
        let s = self.config.stride;
        let (flat, fh, fw) = self.flat_features(g, features)?;
        let mut cells = Vec::with_capacity(points.len());
        for c in points.clicks() {
            let (cx, cy) = (c.x / s, c.y / s);
            if cx >= fw || cy >= fh {
                return Err(Error::Schema(format!("point ({}, {}) outside the feature map", c.x, c.y)));
            }
            cells.push(cy * fw + cx);
        }
        let mut warnings = Vec::new();
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                if cells[i] == cells[j] {
                    let (a, b) = (points.clicks()[i], points.clicks()[j]);
                    warnings.push(format!("points for ids {} and {} share feature cell {}", a.id, b.id, cells[i]));
                }
            }
        }
        let ids: Vec<u8> = points.clicks().iter().map(|c| c.id).collect();
        let z = g.gather_rows(flat, cells)?;
        let id = self.id_rows(g, p, ids.iter().map(|&i| i as usize).collect())?;
        let z_id = g.add(z, id)?;
        let absent = vec![false; ids.len()];
        Ok((
            TokenSet {
                entry: MemoryEntry {
                    z,
                    z_id,
                    rows: ids.len(),
                },
                ids,
                absent,
            },
            warnings,
        ))
    }

    /// `E = X + MHA(LN(X), LN(keys), values)` with `X = F + MHA(LN(F))`.
    pub fn segment_attention(&self, g: &mut Graph, p: &BoundParams, features: Var, keys: Var, values: Var) -> Result<Var> {
        if g.shape(keys)[0] == 0 {
            return Err(Error::Shape("segment attention needs a non-empty memory".into()));
        }
        let shape = g.shape(features).to_vec();
        let (flat, _, _) = self.flat_features(g, features)?;
        let x = self.w.seg_self.apply(g, p, flat)?;
        let e = self.w.seg_cross.apply(g, p, x, keys, values)?;
        Ok(g.reshape(e, shape)?)
    }

    /// Logits `[H, W, n_max]` from `[E, F]`.
    pub fn decode(&self, g: &mut Graph, p: &BoundParams, e: Var, features: Var) -> Result<Var> {
        let mut h = g.concat(&[e, features], 2)?;
        for block in &self.w.decoder {
            h = g.upsample2x(h)?;
            h = block.apply(g, p, h)?;
        }
        self.w.head.apply(g, p, h)
    }

    /// Masked average of feature cells per id in `ids`.
    pub fn mask_pool(&self, g: &mut Graph, p: &BoundParams, features: Var, mask: &LabelMap, ids: &[u8]) -> Result<TokenSet<Var>> {
        let (flat, fh, fw) = self.flat_features(g, features)?;
        self.check_mask(mask, fh, fw)?;
        let cells = cell_labels(mask, self.config.stride);
        let (m, absent) = pool_matrix(&cells, ids);
        let pm = g.constant_from([ids.len(), cells.len()], m)?;
        let z = g.matmul(pm, flat)?;
        let id = self.id_rows(g, p, ids.iter().map(|&i| i as usize).collect())?;
        let z_id = g.add(z, id)?;
        Ok(TokenSet {
            entry: MemoryEntry {
                z,
                z_id,
                rows: ids.len(),
            },
            ids: ids.to_vec(),
            absent,
        })
    }

    /// Every feature cell as a token, tagged with the identity of its
    /// majority label.
    pub fn dense_tokens(&self, g: &mut Graph, p: &BoundParams, features: Var, mask: &LabelMap) -> Result<DenseTokens<Var>> {
        let (flat, fh, fw) = self.flat_features(g, features)?;
        self.check_mask(mask, fh, fw)?;
        let labels = cell_labels(mask, self.config.stride);
        let id = self.id_rows(g, p, labels.iter().map(|&l| l as usize).collect())?;
        let z_id = g.add(flat, id)?;
        Ok(DenseTokens {
            entry: MemoryEntry {
                z: flat,
                z_id,
                rows: labels.len(),
            },
            labels,
        })
    }

    fn check_mask(&self, mask: &LabelMap, fh: usize, fw: usize) -> Result<()> {
        let s = self.config.stride;
        if (mask.height, mask.width) != (fh * s, fw * s) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match features {fh}x{fw} at stride {s}",
                mask.height, mask.width
            )));
        }
        Ok(())
    }
}
