//! Full model: backbone, prompt encoder and edge-aware decoder behind one
//! forward pass, plus tensor-archive checkpointing with a config echo.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, ArchiveEntry};
use crate::decoder::{DecoderConfig, EdgeDecoder, PyramidIds, PyramidOutputs};
use crate::encoder::{EncoderConfig, TinyVit};
use crate::error::{Error, Result};
use crate::geometry::{HBox, PromptPoints};
use crate::prompting::PromptEncoder;
use crate::tensor::{Element, ParamGroup, ParamStore, Tape, TensorData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_heads: usize,
    pub twoway_depth: usize,
    pub c_refine: usize,
    /// Freeze backbone and prompt embeddings (the pretrained-backend regime).
    /// The desk-scale backend trains with this off.
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder_heads: 4,
            twoway_depth: 2,
            c_refine: 32,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            c_enc: self.encoder.width,
            heads: self.decoder_heads,
            depth: self.twoway_depth,
            c_refine: self.c_refine,
            in_channels: self.encoder.in_channels,
        }
    }
}

/// Per-instance prompt geometry in crop coordinates.
#[derive(Clone, Copy, Debug)]
pub struct PromptInputs {
    pub bbox: HBox,
    pub points: PromptPoints,
}

/// A batch of normalized patches with their prompts.
pub struct PatchBatch<T> {
    /// `[B, C, S, S]`, already normalized.
    pub images: TensorData<T>,
    pub prompts: Vec<PromptInputs>,
}

pub struct SegModel<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    encoder: TinyVit,
    prompt: PromptEncoder,
    decoder: EdgeDecoder,
}

impl<T: Element> SegModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.encoder.validate()?;
        cfg.decoder_config().validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = TinyVit::new(&mut store, &mut rng, cfg.encoder.clone())?;
        let prompt = PromptEncoder::new(&mut store, &mut rng, cfg.encoder.width);
        let decoder = EdgeDecoder::new(&mut store, &mut rng, cfg.decoder_config())?;
        if cfg.freeze_backbone {
            store.set_group_trainable(ParamGroup::Backbone, false);
            store.set_group_trainable(ParamGroup::Prompt, false);
        }
        Ok(SegModel {
            cfg,
            store,
            encoder,
            prompt,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn prompt_encoder(&self) -> &PromptEncoder {
        &self.prompt
    }

    pub fn decoder(&self) -> &EdgeDecoder {
        &self.decoder
    }

    pub fn encoder(&self) -> &TinyVit {
        &self.encoder
    }

    fn check_batch(&self, batch: &PatchBatch<T>) -> Result<(usize, u32)> {
        let s = batch.images.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("batch images must be 4-d, got {s:?}")));
        }
        if batch.prompts.len() != s[0] {
            return Err(Error::shape(format!(
                "{} prompts for a batch of {}",
                batch.prompts.len(),
                s[0]
            )));
        }
        Ok((s[0], s[2] as u32))
    }

    /// Build the forward graph on a caller-provided tape (training path).
    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &PatchBatch<T>) -> Result<PyramidIds> {
        let (_b, s_in) = self.check_batch(batch)?;
        let enc = self.encoder.encode(tape, &batch.images)?;
        let img = tape.constant(batch.images.clone());

        let mut prompt_rows = Vec::with_capacity(batch.prompts.len());
        for p in &batch.prompts {
            let row = self
                .prompt
                .assemble_on_tape(tape, &self.store, &p.bbox, &p.points, s_in)?;
            prompt_rows.push(tape.reshape(row, vec![1, 5, self.cfg.encoder.width]));
        }
        let prompt = tape.concat(0, &prompt_rows);

        let grid_side = s_in as usize / crate::encoder::PATCH_STRIDE;
        let image_pe = self.prompt.dense_grid(&self.store, grid_side, s_in);

        let pyr = self
            .decoder
            .decode(tape, enc.f_deep, enc.f_shallow, img, prompt, &image_pe);
        if !tape.value(pyr.p1).all_finite() {
            return Err(Error::numerical("decoder produced non-finite logits"));
        }
        Ok(pyr)
    }

    /// Inference: materialized prediction pyramid, no gradient tracking.
    pub fn predict(&self, batch: &PatchBatch<T>) -> Result<PyramidOutputs<T>> {
        let mut tape = Tape::inference(&self.store);
        let ids = self.forward(&mut tape, batch)?;
        Ok(PyramidOutputs::from_tape(&tape, &ids))
    }

    // -------------------------------------------------------------------
    // Checkpointing
    // -------------------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_extra(path, &[])
    }

    /// Save all parameters plus caller-provided extra entries (optimizer
    /// state). The serialized config rides along as archive metadata.
    pub fn save_with_extra(&self, path: &Path, extra: &[ArchiveEntry]) -> Result<()> {
        let meta = serde_json::to_string(&self.cfg)?;
        let mut entries: Vec<ArchiveEntry> = self
            .store
            .iter()
            .map(|(_, e)| {
                ArchiveEntry::new(
                    e.name.clone(),
                    e.value.shape().to_vec(),
                    e.value.data().iter().map(|v| v.to_f64() as f32).collect(),
                )
            })
            .collect();
        entries.extend_from_slice(extra);
        write_archive(path, &meta, &entries)
    }

    /// Rebuild a model from an archive: the config echo drives construction,
    /// then every parameter is filled by name with shape validation.
    /// Returns the model and any extra (non-parameter) entries.
    pub fn load(path: &Path) -> Result<(Self, Vec<ArchiveEntry>)> {
        let (meta, entries) = read_archive(path)?;
        let cfg: ModelConfig = serde_json::from_str(&meta)
            .map_err(|e| Error::data(format!("checkpoint config echo unreadable: {e}")))?;
        let mut model = SegModel::new(cfg, 0)?;
        let extra = model.fill_from_entries(&entries)?;
        Ok((model, extra))
    }

    /// Load weights into an existing model; the archive's config echo must
    /// match this model's config exactly.
    pub fn load_weights(&mut self, path: &Path) -> Result<Vec<ArchiveEntry>> {
        let (meta, entries) = read_archive(path)?;
        let cfg: ModelConfig = serde_json::from_str(&meta)
            .map_err(|e| Error::data(format!("checkpoint config echo unreadable: {e}")))?;
        if cfg != self.cfg {
            return Err(Error::config(
                "checkpoint config echo does not match the constructed model",
            ));
        }
        self.fill_from_entries(&entries)
    }

    fn fill_from_entries(&mut self, entries: &[ArchiveEntry]) -> Result<Vec<ArchiveEntry>> {
        let mut extra = Vec::new();
        let mut filled = vec![false; self.store.len()];
        for e in entries {
            match self.store.lookup(&e.name) {
                Some(pid) => {
                    let current = self.store.value(pid);
                    if current.shape() != e.shape.as_slice() {
                        return Err(Error::data(format!(
                            "checkpoint entry {} has shape {:?}, model expects {:?}",
                            e.name,
                            e.shape,
                            current.shape()
                        )));
                    }
                    *self.store.value_mut(pid) = TensorData::new(
                        e.shape.clone(),
                        e.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
                    );
                    filled[pid] = true;
                }
                None => extra.push(e.clone()),
            }
        }
        if let Some((pid, _)) = filled.iter().enumerate().find(|(_, f)| !**f) {
            return Err(Error::data(format!(
                "checkpoint is missing parameter {}",
                self.store.entry(pid).name
            )));
        }
        Ok(extra)
    }
}
