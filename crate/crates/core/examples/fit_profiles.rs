//! Prints the bundled device-profile file, refitted from scratch.
//!
//! `cargo run --release -p fundus-core --example fit_profiles > profiles/paper.profile`

fn main() {
    match fundus_core::profiler::reference_profile_text() {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
