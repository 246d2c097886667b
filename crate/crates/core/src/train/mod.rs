//! Training loops: self-supervised pre-training of the encoder and MIL
//! training on top of it.

mod mil;
mod pretrain;

pub use mil::{embed_bags, evaluate_bags, train_mil, MilEpoch, MilOutcome, MilParams};
pub use pretrain::{
    curve_csv, pretrain, pretrain_supervised_proxy, random_encoder, EpochLoss, PretrainOutcome, SslModel,
};
