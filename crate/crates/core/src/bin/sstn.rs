fn main() {
    std::process::exit(sstn::cli::run(std::env::args()));
}
