//! Regenerates the bundled synthetic price file.

use ebcharge_core::prices::{synthetic_series, write_price_file};

fn main() {
    let series = synthetic_series(38, 10, 20230101);
    let out = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/prices_38day.csv");
    write_price_file(&out, &series).expect("write price file");
    println!("wrote {} ({} days)", out.display(), series.num_days());
}
