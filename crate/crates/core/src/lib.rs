//! Scientific-alignment toolkit on a procedural science world.
//!
//! A contrastive reward model learns to prefer images that show the
//! scientifically implied outcome of a prompt over images that show its
//! surface reading; a small rectified-flow generator is then fine-tuned
//! against that preference with masked online DPO on SDE rollouts.

pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod flow;
pub mod http;
pub mod metrics;
pub mod nn;
pub mod oft;
pub mod optim;
pub mod orchestrator;
pub mod preference;
pub mod reward;
pub mod rng;
pub mod sde;
pub mod synthworld;
pub mod tensor;
pub mod text;
