fn main() {
    std::process::exit(rootseg::cli::run(std::env::args_os()));
}
