//! Multimodal mixup sequence encoder.

mod encoder;
mod forward;
mod mixup;
mod params;
mod transformer;

pub use encoder::{attention_pool, encode_items, moe_forward, EncodedItems, EncoderActivations, LN_EPS};
pub use forward::{
    all_items, encode_catalog, frame_of, m2se_forward, prepare_prefixes, sequence_forward, ForwardStage, IdMode,
    ItemEncodings, SequenceActivations,
};
pub use mixup::{apply_swap, complementary_mixup, sample_swap_mask, sequence_dropout, Mixed, MixupConfig};
pub use params::{
    truncated_normal, Binding, ExpertParams, LayerParams, M2seParams, ModalityEncoderParams, ModelConfig, Param,
    ParamId, ParamKind, ParamStore, ProjectionParams, TransformerParams, INIT_STD,
};
pub use transformer::{attention_mask, transformer_encode, TransformerOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}
