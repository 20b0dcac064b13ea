//! Fixtures shared by the benchmarks.

use cell_core::dataset::generate_synthetic;
use cell_core::dna_search::{LinkageModel, OperationAssignment};
use cell_core::genome_search::GenomeModel;
use cell_core::model_functioning::FinalModel;
use cell_core::util::seeded;
use cell_core::{Dataset, EmbeddingTable, SyntheticConfig};

pub const DIM: usize = 8;

/// The default planted synthetic dataset with `n_instances` rows.
pub fn synthetic(n_instances: usize) -> Dataset {
    let cfg = SyntheticConfig {
        n_instances,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg).expect("valid config").0
}

pub fn linkage_model(ds: &Dataset) -> LinkageModel {
    LinkageModel::init(&ds.field_cardinalities, DIM, 1).expect("valid shapes")
}

fn wiring(ds: &Dataset) -> (EmbeddingTable, OperationAssignment) {
    let table = EmbeddingTable::init(&ds.field_cardinalities, DIM, 2).expect("valid shapes");
    let assignment = OperationAssignment::random(ds.num_fields(), DIM, &mut seeded(3));
    (table, assignment)
}

pub fn genome_model(ds: &Dataset) -> GenomeModel {
    let (table, assignment) = wiring(ds);
    let p = assignment.kinds.len();
    GenomeModel::new(table, assignment, vec![0.5; ds.num_fields()], vec![0.5; p], false).expect("valid shapes")
}

/// Every feature and pair retained, MLP of the given shape.
pub fn final_model(ds: &Dataset, depth: usize, width: usize) -> FinalModel {
    let (table, assignment) = wiring(ds);
    let p = assignment.kinds.len();
    FinalModel::new(
        table,
        vec![1.0; ds.num_fields()],
        vec![1.0; p],
        &assignment,
        depth,
        width,
        false,
        &mut seeded(4),
    )
    .expect("non-empty model")
}
