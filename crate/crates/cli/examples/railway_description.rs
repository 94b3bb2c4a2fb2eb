//! Prints the localLocal railway description as JSON.
use csm_cli::railway::{description_json, Placement, Work};

fn main() {
    println!("{}", serde_json::to_string_pretty(&description_json(Placement::LocalLocal, Work::default())).unwrap());
}
