use clickvos_tensor::{BoundParams, Graph, Tensor, Var};

use super::encoder::image_tensor;
use super::memory::{MemoryFlags, MemoryState, MemoryTrace};
use super::segment::argmax_labels;
use super::AbsModel;
use crate::annotate::PointSet;
use crate::error::{Error, Result};
use crate::synth::VideoSample;
use crate::video::{Image, LabelMap};

#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// `[H, W, n_max]` logits.
    pub logits: Var,
    pub mask: LabelMap,
}

impl AbsModel {
    /// Runs one frame inside `g`. On the first frame `memory` must be `None`
    /// and is seeded from the clicks. The mask committed to memory is the
    /// prediction unless `mask_override` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_frame(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        image: &Image,
        flow: &Image,
        points: &PointSet,
        flags: MemoryFlags,
        memory: &mut Option<MemoryState<Var>>,
        mask_override: Option<&LabelMap>,
        warnings: &mut Vec<String>,
    ) -> Result<FrameOutput> {
        if (image.height, image.width) != (flow.height, flow.width) {
            return Err(Error::Shape(format!(
                "frame {}x{} and flow image {}x{} differ",
                image.height, image.width, flow.height, flow.width
            )));
        }
        let iv = g.constant(image_tensor(image));
        let fv = g.constant(image_tensor(flow));
        let features = self.encode(g, p, iv, fv)?.features;
        if memory.is_none() {
            let (tokens, w) = self.point_tokenize(g, p, features, points)?;
            warnings.extend(w);
            *memory = Some(MemoryState::new(flags, tokens));
        }
        let mem = memory.as_mut().expect("memory seeded above");
        let (keys, values) = mem.keys_values(g)?;
        let e = self.segment_attention(g, p, features, keys, values)?;
        let logits = self.decode(g, p, e, features)?;
        let mask = argmax_labels(g.value(logits), image.height, image.width, self.config.n_max);
        let committed = mask_override.unwrap_or(&mask);
        if !committed.same_shape(&mask) {
            return Err(Error::Shape("mask override does not match the frame size".into()));
        }
        let ids: Vec<u8> = points.clicks().iter().map(|c| c.id).collect();
        let pooled = self.mask_pool(g, p, features, committed, &ids)?;
        let dense = self.dense_tokens(g, p, features, committed)?;
        mem.update(pooled, dense);
        Ok(FrameOutput { logits, mask })
    }

    fn check_points(&self, points: &PointSet, height: usize, width: usize) -> Result<()> {
        points.check_bounds(height, width)?;
        if points.max_id() as usize >= self.config.n_max {
            return Err(Error::Config(format!(
                "object id {} needs n_max > {}, model has {}",
                points.max_id(),
                points.max_id(),
                self.config.n_max
            )));
        }
        Ok(())
    }
}

/// Frame-by-frame inference; each frame gets its own graph and the memory
/// is carried across as constants.
pub struct InferenceSession<'a> {
    model: &'a AbsModel,
    points: PointSet,
    flags: MemoryFlags,
    memory: Option<MemoryState<Tensor>>,
    pub warnings: Vec<String>,
}

impl<'a> InferenceSession<'a> {
    pub fn new(model: &'a AbsModel, points: PointSet, flags: MemoryFlags) -> Self {
        Self {
            model,
            points,
            flags,
            memory: None,
            warnings: Vec::new(),
        }
    }

    pub fn memory(&self) -> Option<&MemoryState<Tensor>> {
        self.memory.as_ref()
    }

    /// Segments the next frame; returns the predicted mask and the memory
    /// sizes after committing it.
    pub fn step(&mut self, image: &Image, flow: &Image, mask_override: Option<&LabelMap>) -> Result<(LabelMap, MemoryTrace)> {
        if self.memory.is_none() {
            self.model.check_points(&self.points, image.height, image.width)?;
        }
        let mut g = Graph::new();
        let p = self.model.params.bind_frozen(&mut g);
        let mut mem = self.memory.as_ref().map(|m| m.bind(&mut g));
        let out = self.model.forward_frame(
            &mut g,
            &p,
            image,
            flow,
            &self.points,
            self.flags,
            &mut mem,
            mask_override,
            &mut self.warnings,
        )?;
        let mem = mem.expect("memory exists after a frame").materialize(&g);
        let trace = mem.trace();
        self.memory = Some(mem);
        Ok((out.mask, trace))
    }
}

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub flags: MemoryFlags,
    /// Mask committed to memory for frame 1 in place of the prediction.
    pub first_mask_override: Option<LabelMap>,
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub masks: Vec<LabelMap>,
    pub traces: Vec<MemoryTrace>,
    pub warnings: Vec<String>,
}

pub fn infer_video(model: &AbsModel, sample: &VideoSample, points: &PointSet, opts: &InferOptions) -> Result<InferOutput> {
    if sample.num_frames() == 0 {
        return Err(Error::Shape("video has no frames".into()));
    }
    let mut session = InferenceSession::new(model, points.clone(), opts.flags);
    let mut masks = Vec::with_capacity(sample.num_frames());
    let mut traces = Vec::with_capacity(sample.num_frames());
    for t in 0..sample.num_frames() {
        let ov = if t == 0 { opts.first_mask_override.as_ref() } else { None };
        let (m, tr) = session.step(&sample.frames[t], &sample.flow_images[t], ov)?;
        masks.push(m);
        traces.push(tr);
    }
    Ok(InferOutput {
        masks,
        traces,
        warnings: session.warnings,
    })
}
