use std::io;
use std::path::PathBuf;

fn main() {
    let data_dir = std::env::var_os("ARCAPS_DATA_DIR").map(PathBuf::from);
    let code = arcaps::cli::run(std::env::args_os(), data_dir, &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
