fn main() {
    std::process::exit(fedpda::harness::cli_main(std::env::args_os()));
}
