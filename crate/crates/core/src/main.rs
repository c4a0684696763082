fn main() {
    std::process::exit(phenomatch::cli::run(std::env::args_os()));
}
