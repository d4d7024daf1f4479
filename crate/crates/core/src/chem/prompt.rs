use std::fmt::Write;

use thiserror::Error;

use super::graph::MolGraph;
use super::properties::compute_properties;

pub const SIDER_CATEGORIES: [&str; 27] = [
    "Hepatobiliary disorders",
    "Metabolism and nutrition disorders",
    "Product issues",
    "Eye disorders",
    "Investigations",
    "Musculoskeletal and connective tissue disorders",
    "Gastrointestinal disorders",
    "Social circumstances",
    "Immune system disorders",
    "Reproductive system and breast disorders",
    "Neoplasms (benign, malignant, and unspecified)",
    "General disorders and administration site conditions",
    "Endocrine disorders",
    "Surgical and medical procedures",
    "Vascular disorders",
    "Blood and lymphatic system disorders",
    "Skin and subcutaneous tissue disorders",
    "Congenital, familial, and genetic disorders",
    "Infections and infestations",
    "Respiratory, thoracic, and mediastinal disorders",
    "Psychiatric disorders",
    "Renal and urinary disorders",
    "Pregnancy, puerperium, and perinatal conditions",
    "Ear and labyrinth disorders",
    "Cardiac disorders",
    "Nervous system disorders",
    "Injury, poisoning, and procedural complications",
];

const FREESOLV: &str =
    "This task involves predicting the hydration free energy of small molecules in water, \
which reflects solvation behavior and plays a key role in drug absorption and distribution.";
const BACE: &str =
    "A binary classification task for predicting the binding affinity of molecules with human \
beta-secretase 1 (BACE-1), a therapeutic target in Alzheimer's disease.";
const CLINTOX: &str =
    "A toxicity classification task that aims to distinguish drugs approved by the FDA from \
those that have failed clinical trials due to toxicity.";
const SIDER: &str =
    "This multi-label classification task predicts potential adverse drug reactions (ADRs) \
across 27 physiological systems. The full list of ADR categories is as follows:";

pub const REGISTERED_TASKS: [&str; 4] = ["freesolv", "bace", "clintox", "sider"];

/// Section headings a chemist (or a chat model) is asked to fill in.
pub const KNOWLEDGE_SECTIONS: [&str; 4] = [
    "Structure observations",
    "Functional groups",
    "Property inference",
    "Risk assessment",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown task `{name}`; registered tasks: {}", REGISTERED_TASKS.join(", "))]
pub struct UnknownTask {
    pub name: String,
}

pub fn task_description(task: &str) -> Result<String, UnknownTask> {
    let text = match task.to_ascii_lowercase().as_str() {
        "freesolv" => FREESOLV.to_string(),
        "bace" => BACE.to_string(),
        "clintox" => CLINTOX.to_string(),
        "sider" => {
            let mut s = SIDER.to_string();
            for (i, c) in SIDER_CATEGORIES.iter().enumerate() {
                write!(s, "\n{}. {}", i + 1, c).unwrap();
            }
            s
        }
        _ => {
            return Err(UnknownTask {
                name: task.to_string(),
            })
        }
    };
    Ok(text)
}

/// Empty knowledge template with one heading per reasoning category.
pub fn knowledge_template() -> String {
    let mut s = String::new();
    for h in KNOWLEDGE_SECTIONS {
        writeln!(s, "## {h}\n").unwrap();
    }
    s
}

pub fn render_prompt(g: &MolGraph, task: &str) -> Result<String, UnknownTask> {
    let description = task_description(task)?;
    let p = compute_properties(g);
    let mut s = String::new();
    s.push_str("You are an experienced medicinal chemist reviewing a candidate molecule.\n\n");
    writeln!(s, "### Molecule\nSMILES: {}\n", g.source_smiles).unwrap();
    s.push_str("### Computed properties\n");
    writeln!(s, "- Molecular weight: {:.3} g/mol", p.molecular_weight).unwrap();
    writeln!(s, "- Heavy atoms: {}", p.heavy_atoms).unwrap();
    writeln!(s, "- Rings: {}", p.rings).unwrap();
    writeln!(s, "- Aromatic rings: {}", p.aromatic_rings).unwrap();
    writeln!(s, "- Hydrogen-bond donors: {}", p.h_bond_donors).unwrap();
    writeln!(s, "- Hydrogen-bond acceptors: {}", p.h_bond_acceptors).unwrap();
    writeln!(s, "- Net formal charge: {}\n", p.net_charge).unwrap();
    writeln!(s, "### Prediction task\n{description}\n").unwrap();
    s.push_str("### Instructions\n");
    s.push_str(
        "Emulate the reasoning of a medicinal chemist. Do not state a numeric prediction. \
Instead, describe the features of this molecule that bear on the task above, under these headings:\n",
    );
    for h in KNOWLEDGE_SECTIONS {
        writeln!(s, "- {h}").unwrap();
    }
    Ok(s)
}
