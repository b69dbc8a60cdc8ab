//! Phoneme encoder and speaker/latent conditioning.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, ConvBlock, Embedding, Init, SeqMask, TransformerBlock};
use crate::tensor::{Ctx, Var};

/// Padded phoneme ids, [B, N] row-major, with valid lengths.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: SeqMask,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let n = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * n);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0, n - s.len()));
        }
        Ok(TokenBatch {
            ids,
            mask: SeqMask::new(seqs.iter().map(Vec::len).collect(), n)?,
        })
    }
}

pub struct EncoderOutput {
    /// [B, N, d_model]; padded rows are zero.
    pub hidden: Var,
    pub mask: SeqMask,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub phonemes: Embedding,
    pub convs: Vec<ConvBlock>,
    pub blocks: Vec<TransformerBlock>,
    pub speakers: Embedding,
    pub d_model: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        if d == 0 || d % 2 != 0 {
            return Err(Error::invalid(format!("d_model must be positive and even, got {d}")));
        }
        let phonemes = Embedding::new(&mut init.sub("phonemes"), cfg.vocab_size, d)?;
        let convs = (0..cfg.enc_conv_blocks)
            .map(|i| ConvBlock::new(&mut init.sub(&format!("conv{i}")), d, d, cfg.enc_conv_width, cfg.dropout))
            .collect::<Result<_>>()?;
        let blocks = (0..cfg.enc_blocks)
            .map(|i| TransformerBlock::new(&mut init.sub(&format!("block{i}")), d, cfg.enc_heads, cfg.dropout))
            .collect::<Result<_>>()?;
        let speakers = Embedding::new(&mut init.sub("speakers"), cfg.num_speakers, cfg.speaker_dim)?;
        Ok(TextEncoder {
            phonemes,
            convs,
            blocks,
            speakers,
            d_model: d,
        })
    }

    pub fn encode(&self, cx: &mut Ctx<'_>, tokens: &TokenBatch) -> Result<EncoderOutput> {
        let mask = &tokens.mask;
        let (b, n) = (mask.batch(), mask.max_len());
        let mut index = Vec::with_capacity(b * n);
        for bi in 0..b {
            for t in 0..n {
                let id = tokens.ids[bi * n + t];
                if !mask.is_valid(bi, t) {
                    index.push(None);
                } else if id >= self.phonemes.count {
                    return Err(Error::TokenOutOfRange {
                        id,
                        index: t,
                        vocab: self.phonemes.count,
                    });
                } else {
                    index.push(Some(id));
                }
            }
        }
        let x = self.phonemes.lookup(cx, &index)?;
        let mut x = cx.g.reshape(x, &[b, n, self.d_model])?;
        for conv in &self.convs {
            x = conv.forward(cx, x, mask)?;
        }
        let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let pe = cx.g.constant(&[1, n, self.d_model], sinusoid_table(&positions, self.d_model)?)?;
        let pe = mask.apply(cx, pe)?;
        x = cx.g.add(x, pe)?;
        for block in &self.blocks {
            x = block.forward(cx, x, mask)?;
        }
        let hidden = mask.apply(cx, x)?;
        Ok(EncoderOutput {
            hidden,
            mask: mask.clone(),
        })
    }

    /// [B, speaker_dim] rows for the given speakers.
    pub fn speaker_embedding(&self, cx: &mut Ctx<'_>, speakers: &[usize]) -> Result<Var> {
        let mut index = Vec::with_capacity(speakers.len());
        for &s in speakers {
            if s >= self.speakers.count {
                return Err(Error::SpeakerOutOfRange {
                    id: s,
                    count: self.speakers.count,
                });
            }
            index.push(Some(s));
        }
        self.speakers.lookup(cx, &index)
    }

    /// Concatenates [encoder | speaker | latent] along channels, giving
    /// [B, N, d_model + speaker_dim + latent width]. A per-utterance latent
    /// ([B, L]) is tiled across tokens.
    pub fn attach_conditioning(
        &self,
        cx: &mut Ctx<'_>,
        enc: &EncoderOutput,
        speakers: &[usize],
        latent: Var,
    ) -> Result<Var> {
        let (b, n) = (enc.mask.batch(), enc.mask.max_len());
        if speakers.len() != b {
            return Err(Error::invalid(format!("{} speaker ids for batch of {b}", speakers.len())));
        }
        let spk = self.speaker_embedding(cx, speakers)?;
        let spk = tile_tokens(cx, spk, n)?;
        let lshape = cx.g.shape(latent).to_vec();
        let latent = match lshape.len() {
            2 if lshape[0] == b => tile_tokens(cx, latent, n)?,
            3 if lshape[0] == b && lshape[1] == n => latent,
            _ => return Err(Error::shape("attach_conditioning", &[b, n], &lshape)),
        };
        let cat = cx.g.concat(&[enc.hidden, spk, latent], 2)?;
        enc.mask.apply(cx, cat)
    }
}

/// [B, C] -> [B, N, C] by repetition.
pub(crate) fn tile_tokens(cx: &mut Ctx<'_>, x: Var, n: usize) -> Result<Var> {
    let s = cx.g.shape(x).to_vec();
    let x = cx.g.reshape(x, &[s[0], 1, s[1]])?;
    let ones = cx.g.constant(&[1, n, 1], vec![1.0; n])?;
    cx.g.mul(x, ones)
}
