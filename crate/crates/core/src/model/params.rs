use rand_xoshiro::Xoshiro256PlusPlus;

use super::ModelConfig;
use crate::Tensor;

pub const INIT_RANGE: f64 = 0.02;

/// One transformer block's parameters. The same layout serves encoder and
/// decoder blocks; causality is applied at the attention call site.
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl BlockParams {
    fn init(d: usize, ffn: usize, rng: &mut Xoshiro256PlusPlus) -> BlockParams {
        let mat = |r: usize, c: usize, rng: &mut Xoshiro256PlusPlus| {
            Tensor::uniform_param(vec![r, c], -INIT_RANGE, INIT_RANGE, rng)
        };
        let zeros = |n: usize| Tensor::param(vec![n], vec![0.0; n]);
        let ones = |n: usize| Tensor::param(vec![n], vec![1.0; n]);
        BlockParams {
            wq: mat(d, d, rng),
            bq: zeros(d),
            wk: mat(d, d, rng),
            bk: zeros(d),
            wv: mat(d, d, rng),
            bv: zeros(d),
            wo: mat(d, d, rng),
            bo: zeros(d),
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            w1: mat(d, ffn, rng),
            b1: zeros(ffn),
            w2: mat(ffn, d, rng),
            b2: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let fields: [(&str, &Tensor); 16] = [
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
        ];
        for (name, tensor) in fields {
            out.push((format!("{prefix}.{name}"), (*tensor).clone()));
        }
    }
}

/// Every learned tensor in the model.
///
/// The decoders reuse the encoder's token embedding unless
/// `tie_embeddings` is off, in which case `msp_token_embed` exists.
pub struct Params {
    pub token_embed: Tensor,
    pub token_pos_embed: Tensor,
    pub sent_pos_embed: Tensor,
    pub msp_token_embed: Option<Tensor>,
    pub token_blocks: Vec<BlockParams>,
    pub sent_blocks: Vec<BlockParams>,
    pub msp_blocks: Vec<BlockParams>,
    pub msp_out: Tensor,
    pub ptr_blocks: Vec<BlockParams>,
    pub ptr_step_pos: Tensor,
    pub ptr_orig_pos: Tensor,
    pub ptr_attn_v: Tensor,
    pub ptr_attn_u: Tensor,
    pub ptr_attn_w: Tensor,
}

impl Params {
    /// Seed-deterministic initialization: weights uniform in
    /// [-INIT_RANGE, INIT_RANGE), biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig, rng: &mut Xoshiro256PlusPlus) -> Params {
        let d = config.d_model;
        let ffn = config.ffn_multiplier * d;
        let mat = |r: usize, c: usize, rng: &mut Xoshiro256PlusPlus| {
            Tensor::uniform_param(vec![r, c], -INIT_RANGE, INIT_RANGE, rng)
        };
        let blocks = |n: usize, rng: &mut Xoshiro256PlusPlus| {
            (0..n).map(|_| BlockParams::init(d, ffn, rng)).collect::<Vec<_>>()
        };
        let token_embed = mat(config.vocab_size, d, rng);
        let token_pos_embed = mat(config.max_tokens, d, rng);
        let sent_pos_embed = mat(config.max_sentences, d, rng);
        let token_blocks = blocks(config.token_layers, rng);
        let sent_blocks = blocks(config.sentence_layers, rng);
        let msp_token_embed = if config.tie_embeddings {
            None
        } else {
            Some(mat(config.vocab_size, d, rng))
        };
        let msp_blocks = blocks(config.decoder_layers, rng);
        let msp_out = mat(d, config.vocab_size, rng);
        let ptr_blocks = blocks(config.decoder_layers, rng);
        // position tables carry one extra row for the start-of-decode slot
        let ptr_step_pos = mat(config.max_sentences + 1, d, rng);
        let ptr_orig_pos = mat(config.max_sentences + 1, d, rng);
        let ptr_attn_v = mat(d, 1, rng);
        let ptr_attn_u = mat(d, d, rng);
        let ptr_attn_w = mat(d, d, rng);
        Params {
            token_embed,
            token_pos_embed,
            sent_pos_embed,
            msp_token_embed,
            token_blocks,
            sent_blocks,
            msp_blocks,
            msp_out,
            ptr_blocks,
            ptr_step_pos,
            ptr_orig_pos,
            ptr_attn_v,
            ptr_attn_u,
            ptr_attn_w,
        }
    }

    /// Embedding table used by the MSP decoder's input side.
    pub fn decoder_embedding(&self) -> &Tensor {
        self.msp_token_embed.as_ref().unwrap_or(&self.token_embed)
    }

    /// All tensors with stable names; ordering follows the struct layout.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("embed.token".into(), self.token_embed.clone()));
        out.push(("embed.token_pos".into(), self.token_pos_embed.clone()));
        out.push(("embed.sent_pos".into(), self.sent_pos_embed.clone()));
        if let Some(e) = &self.msp_token_embed {
            out.push(("embed.msp_token".into(), e.clone()));
        }
        for (i, blk) in self.token_blocks.iter().enumerate() {
            blk.named(&format!("enc_tok.{i}"), &mut out);
        }
        for (i, blk) in self.sent_blocks.iter().enumerate() {
            blk.named(&format!("enc_sent.{i}"), &mut out);
        }
        for (i, blk) in self.msp_blocks.iter().enumerate() {
            blk.named(&format!("dec_msp.{i}"), &mut out);
        }
        out.push(("dec_msp.out".into(), self.msp_out.clone()));
        for (i, blk) in self.ptr_blocks.iter().enumerate() {
            blk.named(&format!("dec_ptr.{i}"), &mut out);
        }
        out.push(("dec_ptr.step_pos".into(), self.ptr_step_pos.clone()));
        out.push(("dec_ptr.orig_pos".into(), self.ptr_orig_pos.clone()));
        out.push(("dec_ptr.attn_v".into(), self.ptr_attn_v.clone()));
        out.push(("dec_ptr.attn_u".into(), self.ptr_attn_u.clone()));
        out.push(("dec_ptr.attn_w".into(), self.ptr_attn_w.clone()));
        out
    }

    pub fn all(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Encoder-side tensors (shared embeddings included): these get the
    /// smaller learning rate.
    pub fn encoder_group(&self) -> Vec<Tensor> {
        self.named()
            .into_iter()
            .filter(|(name, _)| {
                (name.starts_with("embed.") && name != "embed.msp_token")
                    || name.starts_with("enc_tok.")
                    || name.starts_with("enc_sent.")
            })
            .map(|(_, t)| t)
            .collect()
    }

    /// Decoder-side tensors: MSP decoder, pointer decoder, and the untied
    /// decoder embedding when present.
    pub fn decoder_group(&self) -> Vec<Tensor> {
        self.named()
            .into_iter()
            .filter(|(name, _)| {
                name.starts_with("dec_msp.")
                    || name.starts_with("dec_ptr.")
                    || name == "embed.msp_token"
            })
            .map(|(_, t)| t)
            .collect()
    }

    /// Pointer-decoder tensors only (the sentence-shuffling task's own
    /// parameters), used by the objective-ablation checks.
    pub fn ss_only_group(&self) -> Vec<Tensor> {
        self.named()
            .into_iter()
            .filter(|(name, _)| name.starts_with("dec_ptr."))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn zero_grad(&self) {
        for t in self.all() {
            t.zero_grad();
        }
    }
}
