//! Writes the synthetic benchmark corpus: `cargo run --example gen_corpus -- [DIR]`.

fn main() -> geoflow_core::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "corpus".into());
    for case in geoflow_core::corpus::write_corpus(std::path::Path::new(&dir))? {
        println!("{}", case.display());
    }
    Ok(())
}
