//! Taped forward pass: vision encoding, visual-prefix decoding, logits, and
//! the teacher-forced autoregressive loss.

use super::{CaptionerModel, ModelError, ModelResult, TokenSeq, EOS};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::video::VideoTensor;

/// Node handles for one decoder block's parameters.
struct TapedBlock {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// All model parameters registered on a tape, leaves when trainable.
pub struct TapedParams {
    patch_embed_w: NodeId,
    patch_embed_b: NodeId,
    patch_pos: NodeId,
    vision_proj_w: NodeId,
    vision_proj_b: NodeId,
    tok_embed: NodeId,
    pos_embed: NodeId,
    blocks: Vec<TapedBlock>,
    final_g: NodeId,
    final_b: NodeId,
    head_w: NodeId,
    head_b: NodeId,
}

impl TapedParams {
    /// Node ids in the same order as the checkpoint parameter listing.
    pub fn ordered_ids(&self) -> Vec<NodeId> {
        let mut out = vec![
            self.patch_embed_w,
            self.patch_embed_b,
            self.patch_pos,
            self.vision_proj_w,
            self.vision_proj_b,
            self.tok_embed,
            self.pos_embed,
        ];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g,
                b.ln2_b, b.w1, b.b1, b.w2, b.b2,
            ]);
        }
        out.extend([self.final_g, self.final_b, self.head_w, self.head_b]);
        out
    }
}

impl CaptionerModel {
    /// Registers every parameter on the tape. Trainable binding makes them
    /// differentiable leaves; frozen binding records constants, which keeps
    /// attack backward passes from materializing parameter gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TapedParams {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let p = self.params();
        TapedParams {
            patch_embed_w: reg(&p.patch_embed_w),
            patch_embed_b: reg(&p.patch_embed_b),
            patch_pos: reg(&p.patch_pos),
            vision_proj_w: reg(&p.vision_proj_w),
            vision_proj_b: reg(&p.vision_proj_b),
            tok_embed: reg(&p.tok_embed),
            pos_embed: reg(&p.pos_embed),
            blocks: p
                .blocks
                .iter()
                .map(|b| TapedBlock {
                    ln1_g: reg(&b.ln1_g),
                    ln1_b: reg(&b.ln1_b),
                    wq: reg(&b.wq),
                    bq: reg(&b.bq),
                    wk: reg(&b.wk),
                    bk: reg(&b.bk),
                    wv: reg(&b.wv),
                    bv: reg(&b.bv),
                    wo: reg(&b.wo),
                    bo: reg(&b.bo),
                    ln2_g: reg(&b.ln2_g),
                    ln2_b: reg(&b.ln2_b),
                    w1: reg(&b.w1),
                    b1: reg(&b.b1),
                    w2: reg(&b.w2),
                    b2: reg(&b.b2),
                })
                .collect(),
            final_g: reg(&p.final_g),
            final_b: reg(&p.final_b),
            head_w: reg(&p.head_w),
            head_b: reg(&p.head_b),
        }
    }

    pub fn check_video_dims(&self, video: &VideoTensor) -> ModelResult<()> {
        let c = &self.config();
        let want = [c.frames, c.height, c.width, c.channels];
        if video.dims() != want {
            return Err(ModelError::Config(format!(
                "video dims {:?} do not match model {:?}",
                video.dims(),
                want
            )));
        }
        Ok(())
    }

    /// g(x): one visual token per frame, differentiable w.r.t. the video node.
    pub fn encode_nodes(
        &self,
        tape: &mut Tape,
        p: &TapedParams,
        video: NodeId,
    ) -> ModelResult<NodeId> {
        let cfg = self.config();
        let per_frame = cfg.patches_per_frame();
        // Center pixels around mid-gray so object pixels dominate the patch
        // embedding over the shared background level.
        let mid = tape.constant(Tensor::full(
            vec![cfg.frames, cfg.height, cfg.width, cfg.channels],
            0.45,
        ));
        let centered = tape.sub(video, mid)?;
        let centered = tape.scale(centered, 2.0)?;
        let patches = tape.patchify(centered, cfg.patch)?;
        let mut h = tape.matmul(patches, p.patch_embed_w)?;
        h = tape.add_row_vec(h, p.patch_embed_b)?;
        // Per-patch position lookup, tiled over frames.
        let pos_idx: Vec<usize> = (0..cfg.frames * per_frame).map(|i| i % per_frame).collect();
        let pos = tape.embedding(p.patch_pos, &pos_idx)?;
        h = tape.add(h, pos)?;
        h = tape.gelu(h)?;
        // Mean over patches within each frame, as a constant pooling matmul.
        let mut pool = vec![0.0f32; cfg.frames * cfg.frames * per_frame];
        for f in 0..cfg.frames {
            for j in 0..per_frame {
                pool[f * cfg.frames * per_frame + f * per_frame + j] = 1.0 / per_frame as f32;
            }
        }
        let pool = tape.constant(Tensor::from_parts(
            vec![cfg.frames, cfg.frames * per_frame],
            pool,
        ));
        let pooled = tape.matmul(pool, h)?;
        let proj = tape.matmul(pooled, p.vision_proj_w)?;
        Ok(tape.add_row_vec(proj, p.vision_proj_b)?)
    }

    /// Final-layer hidden states for [visual prefix | text tokens], with an
    /// optional additive offset on a span of text-embedding rows.
    pub fn hidden_nodes(
        &self,
        tape: &mut Tape,
        p: &TapedParams,
        video: NodeId,
        text: &[usize],
        text_offset: Option<(NodeId, usize)>,
    ) -> ModelResult<NodeId> {
        let cfg = self.config();
        let total = cfg.frames + text.len();
        if total > cfg.max_seq_len {
            return Err(ModelError::Length {
                length: total,
                max: cfg.max_seq_len,
            });
        }
        let visual = self.encode_nodes(tape, p, video)?;
        let mut x = if text.is_empty() {
            visual
        } else {
            let mut tok = tape.embedding(p.tok_embed, text)?;
            if let Some((offset, row0)) = text_offset {
                tok = tape.add_rows_at(tok, offset, row0)?;
            }
            tape.concat_rows(visual, tok)?
        };
        let pos = tape.slice_rows(p.pos_embed, 0, total)?;
        x = tape.add(x, pos)?;

        let dim = cfg.embed_dim;
        let head_dim = dim / cfg.heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        // Additive causal mask: large negative above the diagonal.
        let mut mask = vec![0.0f32; total * total];
        for i in 0..total {
            for j in i + 1..total {
                mask[i * total + j] = -1e9;
            }
        }
        let mask = tape.constant(Tensor::from_parts(vec![total, total], mask));

        for block in &p.blocks {
            let n = tape.layer_norm(x, block.ln1_g, block.ln1_b)?;
            let q = tape.matmul(n, block.wq)?;
            let q = tape.add_row_vec(q, block.bq)?;
            let k = tape.matmul(n, block.wk)?;
            let k = tape.add_row_vec(k, block.bk)?;
            let v = tape.matmul(n, block.wv)?;
            let v = tape.add_row_vec(v, block.bv)?;

            let mut merged: Option<NodeId> = None;
            for h in 0..self.config().heads {
                let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add(scores, mask)?;
                let attn = tape.softmax(scores, 1)?;
                let out = tape.matmul(attn, vh)?;
                merged = Some(match merged {
                    None => out,
                    Some(m) => tape.concat_cols(m, out)?,
                });
            }
            let att = tape.matmul(merged.expect("at least one head"), block.wo)?;
            let att = tape.add_row_vec(att, block.bo)?;
            x = tape.add(x, att)?;

            let n2 = tape.layer_norm(x, block.ln2_g, block.ln2_b)?;
            let f = tape.matmul(n2, block.w1)?;
            let f = tape.add_row_vec(f, block.b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, block.w2)?;
            let f = tape.add_row_vec(f, block.b2)?;
            x = tape.add(x, f)?;
        }
        Ok(tape.layer_norm(x, p.final_g, p.final_b)?)
    }

    /// Token logits at every position of [visual prefix | text].
    pub fn logits_nodes(
        &self,
        tape: &mut Tape,
        p: &TapedParams,
        video: NodeId,
        text: &[usize],
        text_offset: Option<(NodeId, usize)>,
    ) -> ModelResult<NodeId> {
        let hidden = self.hidden_nodes(tape, p, video, text, text_offset)?;
        let logits = tape.matmul(hidden, p.head_w)?;
        Ok(tape.add_row_vec(logits, p.head_b)?)
    }

    /// Teacher-forced mean cross-entropy of `target` (terminal EOS appended)
    /// given the prompt. Returns the scalar loss node.
    pub fn ar_loss_nodes(
        &self,
        tape: &mut Tape,
        p: &TapedParams,
        video: NodeId,
        prompt: &[usize],
        target: &[usize],
    ) -> ModelResult<NodeId> {
        if target.is_empty() {
            return Err(ModelError::Config(
                "autoregressive loss needs a non-empty target".into(),
            ));
        }
        let mut text = prompt.to_vec();
        text.extend_from_slice(target);
        let logits = self.logits_nodes(tape, p, video, &text, None)?;
        // Row F+k-1 predicts the first target token; the last target row
        // predicts the terminal EOS.
        let start = self.config().frames + prompt.len() - 1;
        let rows = tape.slice_rows(logits, start, start + target.len() + 1)?;
        let mut labels = target.to_vec();
        labels.push(EOS);
        Ok(tape.cross_entropy(rows, &labels)?)
    }

    // ── Eager wrappers ──────────────────────────────────────────────

    /// g(x) as a plain tensor, shape [frames, embed_dim].
    pub fn encode_video(&self, video: &VideoTensor) -> ModelResult<Tensor> {
        self.check_video_dims(video)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = tape.constant(video.tensor().clone());
        let node = self.encode_nodes(&mut tape, &p, v)?;
        Ok(tape.value(node).clone())
    }

    /// h(x, c_in): final-layer hidden states at the visual-prefix and prompt
    /// positions, shape [frames + |prompt|, embed_dim].
    pub fn llm_hidden(&self, video: &VideoTensor, prompt: &TokenSeq) -> ModelResult<Tensor> {
        self.check_video_dims(video)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = tape.constant(video.tensor().clone());
        let node = self.hidden_nodes(&mut tape, &p, v, prompt.tokens(), None)?;
        Ok(tape.value(node).clone())
    }

    /// f_i: the next-token distribution after `prompt` and the generated
    /// `prefix`, shape [vocab].
    pub fn next_token_distribution(
        &self,
        video: &VideoTensor,
        prompt: &TokenSeq,
        prefix: &TokenSeq,
    ) -> ModelResult<Tensor> {
        self.check_video_dims(video)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = tape.constant(video.tensor().clone());
        let mut text = prompt.tokens().to_vec();
        text.extend_from_slice(prefix.tokens());
        let logits = self.logits_nodes(&mut tape, &p, v, &text, None)?;
        let rows = tape.value(logits).rows();
        let last = tape.slice_rows(logits, rows - 1, rows)?;
        let probs = tape.softmax(last, 1)?;
        Ok(Tensor::from_parts(
            vec![self.config().vocab_size],
            tape.value(probs).data().to_vec(),
        ))
    }

    /// Teacher-forced mean cross-entropy of `target` (EOS appended) as f32.
    pub fn autoregressive_loss(
        &self,
        video: &VideoTensor,
        prompt: &TokenSeq,
        target: &TokenSeq,
    ) -> ModelResult<f32> {
        self.check_video_dims(video)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = tape.constant(video.tensor().clone());
        let loss = self.ar_loss_nodes(&mut tape, &p, v, prompt.tokens(), target.tokens())?;
        Ok(tape.value(loss).item())
    }
}
