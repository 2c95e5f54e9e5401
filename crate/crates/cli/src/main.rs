fn main() {
    std::process::exit(ellembed_cli::run(std::env::args()));
}
