//! Two-branch attribute-embedding head for zero-shot classification on
//! precomputed feature maps.
//!
//! The head maps a `K × H × H` feature map to an attribute embedding and
//! scores it against a fixed class matrix. One branch sees the features as
//! they are; the other sees them after a complementary ReLU that negates weak
//! activations. See [`network`] for the forward and backward passes,
//! [`pipeline`] for training runs, [`gzsl`] for seen/unseen calibration and
//! [`maps`] for activation-map export.
//!
//! ```
//! use aeen::data::{gen_synthetic, SyntheticSpec};
//! use aeen::pipeline::{fit, TrainSettings};
//!
//! let (ds, _) = gen_synthetic(&SyntheticSpec::new(5, 4, 4, 5, 3, 0.1, 0)).unwrap();
//! let trained = fit(&ds, &TrainSettings { epochs: 1, ..Default::default() }, |_| {}).unwrap();
//! assert_eq!(trained.metrics.len(), 1);
//! ```

pub mod attributes;
pub mod data;
pub mod gzsl;
pub mod maps;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod search;
pub mod seed;

// book snippets run as doc-tests
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(attributes, "attributes.md");
    chapter!(network, "network.md");
    chapter!(training, "training.md");
    chapter!(search, "search.md");
    chapter!(gzsl, "gzsl.md");
    chapter!(maps, "maps.md");
    chapter!(data, "data.md");
    chapter!(cli, "cli.md");
}
