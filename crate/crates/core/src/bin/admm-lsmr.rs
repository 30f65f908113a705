fn main() {
    std::process::exit(admm_lsmr::cli::main_with_args(std::env::args_os()));
}
