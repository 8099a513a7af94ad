//! Per-attribute prototype banks: losses, push, nearest-prototype
//! inference and image export.

mod bank;
mod export;
mod push;

pub use bank::{
    cluster_loss, init_prototypes, separation_loss, Nearest, PrototypeBank, PrototypeEntry, ProtoLoss,
    DEFAULT_DIST_MAX, PROTOTYPES_PER_CLASS, PROTOTYPE_DIM, PROTOTYPE_PARAM,
};
pub use export::{
    decode_pgm, encode_pgm, export_prototypes, exported_path, prototype_file_name, ExportedPrototype, INDEX_FILE,
};
pub(crate) use export::write_pgm;
pub use push::{infer_attributes, push_prototypes, Explanation, PushSummary};
