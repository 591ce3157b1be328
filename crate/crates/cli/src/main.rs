fn main() {
    std::process::exit(dnmm_cli::run(std::env::args_os()));
}
