//! Runs one bundled component kind; see `cosim-component --help`.

fn main() {
    std::process::exit(cosim::components::runtime::main_from_args(std::env::args_os()));
}
