//! Networks and losses: the cross-temporal VAE and the routed classifier.

pub mod checkpoint;
pub mod demonet;
pub mod vae;

pub use demonet::{balance_loss, total_loss, Demonet, DemonetConfig, DemonetNet, LossParts, RoutingOutput};
pub use vae::{reparameterize, reparameterize_with, vae_loss, LatentStats, LatentVars, Vae, VaeConfig, VaeLossParts, VaeNet};
