fn main() {
    std::process::exit(fpcm_core::cli::run(std::env::args_os()));
}
