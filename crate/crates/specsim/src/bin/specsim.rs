fn main() {
    std::process::exit(specsim::cli::cli_main(std::env::args()));
}
