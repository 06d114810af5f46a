fn main() {
    std::process::exit(divebatch_harness::cli::run_from(std::env::args_os()));
}
