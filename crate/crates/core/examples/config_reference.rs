//! Print the configuration key reference as markdown.
//!
//! ```text
//! cargo run --example config_reference > docs/CONFIG.md
//! ```

use gaze_distill::cli::Config;

fn main() {
    print!("{}", Config::reference_markdown());
}
