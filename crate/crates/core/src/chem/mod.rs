//! SMILES parsing, molecular graphs, atom featurization, scaffolds,
//! descriptors and knowledge-prompt rendering.

mod canon;
mod elements;
mod features;
mod graph;
mod prompt;
mod properties;
mod rings;
mod scaffold;
mod smiles;
mod writer;

pub use canon::canonical_smiles;
pub use elements::Element;
pub use features::{atom_features, featurize, FeatureSet, ATOM_FEATURES, ELEMENT_VOCAB};
pub use graph::{Atom, Bond, BondOrder, MolGraph};
pub use prompt::{
    knowledge_template, render_prompt, task_description, UnknownTask, KNOWLEDGE_SECTIONS,
    REGISTERED_TASKS, SIDER_CATEGORIES,
};
pub use properties::{compute_properties, Properties};
pub use rings::sssr;
pub use scaffold::{murcko_scaffold, scaffold_graph, ScaffoldKey};
pub use smiles::{parse_smiles, ParseError, ParseErrorKind};
pub use writer::write_smiles;
