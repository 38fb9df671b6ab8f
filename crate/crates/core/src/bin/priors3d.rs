fn main() {
    std::process::exit(priors3d::cli::run(std::env::args_os()));
}
