//! Rescaling plus low-rank adapters over the frozen toy model, trained with
//! maximum likelihood and unlikelihood on answer choices.

mod gradcheck;
mod loss;
mod params;
mod schedule;
mod train;

pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheckReport, Tensor, DEFAULT_EPS, MIN_COORDS};
pub use loss::{batch_loss, batch_loss_and_grad, mle_loss, unlikelihood_loss, LossParts, TrainItem, UL_CLAMP};
pub use params::{merge_weights, peft_forward, Adapter, AdapterGrad, PeftParams, A_INIT_STD, DEFAULT_RANK};
pub use schedule::{lr_at, warmup_steps, Adam, AdamConfig};
pub use train::{encode_items, pretrain, train, train_on, PretrainConfig, TemplateOrder, TrainConfig, TrainReport};
